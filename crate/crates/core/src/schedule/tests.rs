use super::*;
use crate::numerics::Rng;
use crate::metrics::psnr;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn scalar(v: f64) -> HsiCube {
    HsiCube::filled(1, 1, 1, v)
}

fn random_cube(rng: &mut Rng, b: usize, h: usize, w: usize) -> HsiCube {
    HsiCube::from_fn(b, h, w, |_, _, _| 0.05 + 0.9 * rng.uniform())
}

#[test]
fn default_schedule_terminal_gamma() {
    let s = NoiseSchedule::default();
    assert_eq!(s.steps(), 2000);
    // 50-digit decimal product of (1 - beta_t)
    let frozen = 4.3859782361332093e-5;
    assert!((s.gamma(2000) / frozen - 1.0).abs() < 1e-10, "{}", s.gamma(2000));
    assert!((s.gamma(1) - (1.0 - 1e-6)).abs() < 1e-15);
    assert!((s.alpha(2000) - 0.99).abs() < 1e-15);
}

#[test]
fn single_step_schedule() {
    let s = build_training_schedule(1, 1e-9, 1e-9).unwrap();
    assert_eq!(s.gamma(0), 1.0);
    assert_eq!(s.gamma(1), 1.0 - 1e-9);
    assert_eq!(s.alpha(1), s.gamma(1));
}

#[test]
fn schedule_validation() {
    assert!(build_training_schedule(0, 1e-4, 1e-2).is_err());
    assert!(build_training_schedule(10, 0.0, 1e-2).is_err());
    assert!(build_training_schedule(10, 1e-2, 1e-4).is_err());
    assert!(build_training_schedule(10, 1e-4, 1.0).is_err());
    assert!(NoiseSchedule::from_alphas(vec![0.5, 1.0]).is_err());
    assert!(NoiseSchedule::from_alphas(vec![]).is_err());
}

proptest! {
    #[test]
    fn schedule_identity_holds(steps in 1usize..400, start in 1e-7f64..1e-2, extra in 0.0f64..0.2) {
        let s = build_training_schedule(steps, start, start + extra).unwrap();
        for t in 1..=steps {
            let a = s.alpha(t);
            prop_assert!(a > 0.0 && a < 1.0);
            prop_assert!(s.gamma(t) < s.gamma(t - 1));
            prop_assert!((s.gamma(t) / s.gamma(t - 1) - a).abs() < 1e-12);
        }
        prop_assert!(s.gamma(steps) > 0.0);
    }

    #[test]
    fn inference_schedule_is_monotone(steps in 1usize..300, frac in 0.0f64..1.0) {
        let train = build_training_schedule(steps, 1e-4, 0.05).unwrap();
        let count = 1 + ((steps - 1) as f64 * frac) as usize;
        let inf = build_inference_schedule(&train, count).unwrap();
        prop_assert_eq!(inf.len(), count);
        let idx = inf.training_indices();
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx[0] >= 1 && idx[count - 1] <= steps);
        let mut prev = 1.0;
        for st in inf.steps() {
            prop_assert!(st.gamma < prev);
            prop_assert_eq!(st.gamma_prev, prev);
            prop_assert!(st.alpha > 0.0 && st.alpha < 1.0);
            prop_assert!(st.gamma >= train.gamma(steps) && st.gamma <= train.gamma(1));
            prev = st.gamma;
        }
    }

    #[test]
    fn refinement_is_linear(a in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let zt = random_cube(&mut rng, 2, 3, 3);
        let z0 = random_cube(&mut rng, 2, 3, 3);
        let eps = random_cube(&mut rng, 2, 3, 3);
        let step = StepParams { gamma: 0.4, gamma_prev: 0.5, alpha: 0.8 };
        let lhs = refinement_step(&zt.map(|v| a * v), &z0.map(|v| a * v), step, &eps.map(|v| a * v), NoiseScale::Step).unwrap();
        let rhs = refinement_step(&zt, &z0, step, &eps, NoiseScale::Step).unwrap().map(|v| a * v);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() < 1e-12);
        }
    }
}

#[test]
fn sample_gamma_single_step_and_determinism() {
    let s = build_training_schedule(1, 0.3, 0.3).unwrap();
    let mut rng = Rng::new(5);
    for _ in 0..1000 {
        let (t, g) = sample_gamma(&s, &mut rng);
        assert_eq!(t, 1);
        assert!(g > s.gamma(1) && g < 1.0);
    }
    let d = NoiseSchedule::default();
    let (mut a, mut b) = (Rng::new(17), Rng::new(17));
    for _ in 0..100 {
        assert_eq!(sample_gamma(&d, &mut a), sample_gamma(&d, &mut b));
    }
}

#[test]
fn sample_gamma_matches_mixture_distribution() {
    let s = build_training_schedule(50, 1e-6, 1e-2).unwrap();
    let (lo, hi) = (s.gamma(50), 1.0);
    let bins = 50usize;
    let width = (hi - lo) / bins as f64;
    // mixture CDF: each step contributes a uniform on its own interval
    let cdf = |g: f64| {
        (1..=50)
            .map(|t| ((g - s.gamma(t)) / (s.gamma(t - 1) - s.gamma(t))).clamp(0.0, 1.0))
            .sum::<f64>()
            / 50.0
    };
    let draws = 100_000usize;
    let mut counts = vec![0usize; bins];
    let mut rng = Rng::new(2024);
    let mut t_counts = vec![0usize; 51];
    for _ in 0..draws {
        let (t, g) = sample_gamma(&s, &mut rng);
        assert!(g > lo && g < hi);
        t_counts[t] += 1;
        counts[(((g - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let mut chi2 = 0.0;
    for (i, &c) in counts.iter().enumerate() {
        let a = lo + i as f64 * width;
        let expected = draws as f64 * (cdf(a + width) - cdf(a));
        assert!(expected > 5.0);
        chi2 += (c as f64 - expected).powi(2) / expected;
    }
    let crit = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.99);
    assert!(chi2 < crit, "gamma chi2 {chi2} >= {crit}");
    let exp_t = draws as f64 / 50.0;
    let chi2_t: f64 = t_counts[1..].iter().map(|&c| (c as f64 - exp_t).powi(2) / exp_t).sum();
    assert!(chi2_t < ChiSquared::new(49.0).unwrap().inverse_cdf(0.99), "t chi2 {chi2_t}");
}

#[test]
fn forward_marginal_limits() {
    let mut rng = Rng::new(1);
    let z0 = random_cube(&mut rng, 3, 4, 4);
    let eps = random_cube(&mut rng, 3, 4, 4);
    assert_eq!(forward_marginal(&z0, 1.0, &eps).unwrap(), z0);
    let zero = HsiCube::zeros(3, 4, 4);
    let tiny = forward_marginal(&z0, 1e-14, &zero).unwrap();
    assert!(tiny.data().iter().all(|v| v.abs() < 1e-6));
    assert!(forward_marginal(&z0, 0.0, &eps).is_err());
    assert!(forward_marginal(&z0, 0.5, &HsiCube::zeros(3, 4, 3)).is_err());
}

#[test]
fn forward_step_limits_and_variance() {
    let mut rng = Rng::new(2);
    let z = random_cube(&mut rng, 2, 3, 3);
    let eps = random_cube(&mut rng, 2, 3, 3);
    let near = forward_step(&z, 1.0 - 1e-14, &eps).unwrap();
    for (a, b) in near.data().iter().zip(z.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    let scaled = forward_step(&z, 0.81, &HsiCube::zeros(2, 3, 3)).unwrap();
    for (a, b) in scaled.data().iter().zip(z.data()) {
        assert!((a - 0.9 * b).abs() < 1e-15);
    }
    let alpha = 0.7;
    let n = 20_000;
    let base = scalar(0.4);
    let samples: Vec<f64> = (0..n)
        .map(|_| forward_step(&base, alpha, &scalar(rng.normal())).unwrap().data()[0])
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let target = 1.0 - alpha;
    assert!((var - target).abs() < 3.0 * target * (2.0 / (n - 1) as f64).sqrt(), "{var}");
}

#[test]
fn composed_steps_match_marginal_moments() {
    let s = NoiseSchedule::default();
    let t_star = 400;
    let z0 = 0.7;
    let trials = 10_000;
    let mut rng = Rng::new(33);
    let mut finals = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut z = scalar(z0);
        for t in 1..=t_star {
            z = forward_step(&z, s.alpha(t), &scalar(rng.normal())).unwrap();
        }
        finals.push(z.data()[0]);
    }
    let g = s.gamma(t_star);
    let m_target = g.sqrt() * z0;
    let v_target = 1.0 - g;
    let n = trials as f64;
    let mean = finals.iter().sum::<f64>() / n;
    let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mean - m_target).abs() < 3.0 * (v_target / n).sqrt(), "mean {mean} vs {m_target}");
    assert!((var - v_target).abs() < 3.0 * v_target * (2.0 / (n - 1.0)).sqrt(), "var {var} vs {v_target}");
    let marg: Vec<f64> = (0..trials)
        .map(|_| forward_marginal(&scalar(z0), g, &scalar(rng.normal())).unwrap().data()[0])
        .collect();
    let mm = marg.iter().sum::<f64>() / n;
    assert!((mm - m_target).abs() < 3.0 * (v_target / n).sqrt());
}

#[test]
fn posterior_at_first_step_collapses() {
    let s = NoiseSchedule::default();
    let mut rng = Rng::new(3);
    let z0 = random_cube(&mut rng, 2, 2, 2);
    let zt = random_cube(&mut rng, 2, 2, 2);
    let p = posterior_params(&z0, &zt, 1, &s).unwrap();
    assert_eq!(p.var, 0.0);
    for (a, b) in p.mean.data().iter().zip(z0.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(posterior_params(&z0, &zt, 0, &s).is_err());
    assert!(posterior_params(&z0, &zt, 2001, &s).is_err());
    for t in 2..=2000 {
        let (_, _, v) = posterior_coefficients(s.gamma(t), s.gamma(t - 1), s.alpha(t));
        assert!(v > 0.0);
    }
}

#[test]
fn posterior_near_identity_step() {
    let s = build_training_schedule(3, 1e-12, 1e-12).unwrap();
    let z = scalar(0.3);
    let p = posterior_params(&z, &z, 3, &s).unwrap();
    assert!((p.mean.data()[0] - 0.3).abs() < 1e-6);
}

#[test]
fn posterior_matches_grid_bayes() {
    let s = build_training_schedule(10, 0.05, 0.2).unwrap();
    for &(t, z0, zt) in &[(5usize, 0.6, -0.2), (2, 0.1, 0.9), (10, 0.8, 1.5)] {
        let (gp, a) = (s.gamma(t - 1), s.alpha(t));
        let prior = |z: f64| (-(z - gp.sqrt() * z0).powi(2) / (2.0 * (1.0 - gp))).exp();
        let like = |z: f64| (-(zt - a.sqrt() * z).powi(2) / (2.0 * (1.0 - a))).exp();
        let (lo, hi, n) = (-12.0, 12.0, 400_000);
        let h = (hi - lo) / n as f64;
        let (mut w0, mut w1, mut w2) = (0.0, 0.0, 0.0);
        for i in 0..=n {
            let z = lo + i as f64 * h;
            let w = prior(z) * like(z);
            w0 += w;
            w1 += w * z;
            w2 += w * z * z;
        }
        let mean = w1 / w0;
        let var = w2 / w0 - mean * mean;
        let p = posterior_params(&scalar(z0), &scalar(zt), t, &s).unwrap();
        assert!((p.mean.data()[0] - mean).abs() < 1e-6, "t={t}");
        assert!((p.var - var).abs() < 1e-6, "t={t}");
    }
}

#[test]
fn refinement_without_noise_is_posterior_mean() {
    let s = NoiseSchedule::default();
    let mut rng = Rng::new(4);
    let z0 = random_cube(&mut rng, 2, 3, 3);
    let zt = random_cube(&mut rng, 2, 3, 3);
    let zero = HsiCube::zeros(2, 3, 3);
    for t in [1usize, 7, 500, 2000] {
        let step = StepParams { gamma: s.gamma(t), gamma_prev: s.gamma(t - 1), alpha: s.alpha(t) };
        let p = posterior_params(&z0, &zt, t, &s).unwrap();
        for scale in [NoiseScale::Step, NoiseScale::Posterior] {
            let r = refinement_step(&zt, &z0, step, &zero, scale).unwrap();
            assert_eq!(r, p.mean);
        }
    }
}

#[test]
fn refinement_noise_scales() {
    let step = StepParams { gamma: 0.3, gamma_prev: 0.6, alpha: 0.5 };
    let z = scalar(0.0);
    let one = scalar(1.0);
    let a = refinement_step(&z, &z, step, &one, NoiseScale::Step).unwrap();
    assert!((a.data()[0] - 0.5f64.sqrt()).abs() < 1e-15);
    let b = refinement_step(&z, &z, step, &one, NoiseScale::Posterior).unwrap();
    let var: f64 = (1.0 - 0.6) * (1.0 - 0.5) / (1.0 - 0.3);
    assert!((b.data()[0] - var.sqrt()).abs() < 1e-15);
    assert!(refinement_step(&z, &z, StepParams { gamma: 1.0, gamma_prev: 1.0, alpha: 1.0 }, &one, NoiseScale::Step).is_err());
    assert!(refinement_step(&z, &HsiCube::zeros(1, 1, 2), step, &one, NoiseScale::Step).is_err());
    assert_eq!(NoiseScale::parse("posterior").unwrap(), NoiseScale::Posterior);
    assert!(NoiseScale::parse("sigma").is_err());
}

#[test]
fn final_coarse_step_coefficients() {
    let inf = build_inference_schedule(&NoiseSchedule::default(), 100).unwrap();
    let last = inf.step(1);
    assert_eq!(last.gamma_prev, 1.0);
    assert_eq!(last.alpha, last.gamma);
    let (c0, ct, var) = posterior_coefficients(last.gamma, last.gamma_prev, last.alpha);
    assert_eq!(ct, 0.0);
    assert_eq!(var, 0.0);
    assert!((c0 - 1.0).abs() < 1e-15);
}

#[test]
fn inference_schedule_full_length_reproduces_training() {
    let train = build_training_schedule(64, 1e-4, 0.05).unwrap();
    let inf = build_inference_schedule(&train, 64).unwrap();
    for t in 1..=64 {
        let st = inf.step(t);
        assert_eq!(st.gamma, train.gamma(t));
        assert_eq!(st.gamma_prev, train.gamma(t - 1));
        assert!((st.alpha - train.alpha(t)).abs() < 1e-12);
    }
}

#[test]
fn inference_schedule_default_size() {
    let train = NoiseSchedule::default();
    let inf = build_inference_schedule(&train, 100).unwrap();
    assert_eq!(inf.len(), 100);
    assert_eq!(inf.training_indices()[0], 1);
    assert_eq!(inf.training_indices()[99], 2000);
    let g: Vec<f64> = inf.steps().iter().map(|s| s.gamma).collect();
    assert!(g.windows(2).all(|w| w[1] < w[0]));
    assert!(inf.steps().iter().all(|s| s.alpha > 0.0 && s.alpha < 1.0));
    // targets are linear in gamma, so successive gaps stay close to (g1 - gT) / 99
    let spacing = (train.gamma(1) - train.gamma(2000)) / 99.0;
    for w in g.windows(2) {
        assert!(((w[0] - w[1]) / spacing - 1.0).abs() < 0.5, "{:?}", w);
    }
    assert!(build_inference_schedule(&train, 0).is_err());
    assert!(build_inference_schedule(&train, 2001).is_err());
}

fn oracle(z0: HsiCube) -> impl FnMut(&HsiCube, &HsiCube, &HsiCube, f64) -> Result<HsiCube> {
    move |_, _, _, _| Ok(z0.clone())
}

#[test]
fn oracle_sampler_recovers_target() {
    let mut rng = Rng::new(6);
    let z0 = random_cube(&mut rng, 4, 8, 8);
    let x = HsiCube::zeros(2, 8, 8);
    let y = HsiCube::zeros(4, 2, 2);
    let inf = build_inference_schedule(&NoiseSchedule::default(), 100).unwrap();
    let opts = SampleOptions { bands: 4, height: 8, width: 8, noise_scale: NoiseScale::Step };
    let mut model = oracle(z0.clone());
    let out = sample(&mut model, &x, &y, &inf, opts, &mut Rng::new(7)).unwrap();
    assert!(psnr(&z0, &out).unwrap() >= 60.0);
    let again = sample(&mut model, &x, &y, &inf, opts, &mut Rng::new(7)).unwrap();
    assert_eq!(out, again);
    let post = SampleOptions { noise_scale: NoiseScale::Posterior, ..opts };
    assert!(psnr(&z0, &sample(&mut model, &x, &y, &inf, post, &mut Rng::new(7)).unwrap()).unwrap() >= 60.0);

    let one = build_inference_schedule(&NoiseSchedule::default(), 1).unwrap();
    let single = sample(&mut model, &x, &y, &one, opts, &mut Rng::new(8)).unwrap();
    for (a, b) in single.data().iter().zip(z0.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn trajectory_visits_every_step() {
    let z0 = HsiCube::filled(1, 2, 2, 0.5);
    let inf = build_inference_schedule(&build_training_schedule(20, 1e-3, 0.1).unwrap(), 10).unwrap();
    let opts = SampleOptions { bands: 1, height: 2, width: 2, noise_scale: NoiseScale::Step };
    let mut seen = Vec::new();
    let mut model = oracle(z0.clone());
    let x = HsiCube::zeros(1, 2, 2);
    sample_with_trajectory(&mut model, &x, &x, &inf, opts, &mut Rng::new(1), &mut |s, _| {
        seen.push(s);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, (1..=10).rev().collect::<Vec<_>>());
}

#[test]
fn sampler_rejects_bad_model_output() {
    let inf = build_inference_schedule(&build_training_schedule(5, 1e-3, 0.1).unwrap(), 5).unwrap();
    let opts = SampleOptions { bands: 1, height: 2, width: 2, noise_scale: NoiseScale::Step };
    let x = HsiCube::zeros(1, 2, 2);
    let mut wrong = |_: &HsiCube, _: &HsiCube, _: &HsiCube, _: f64| Ok(HsiCube::zeros(2, 2, 2));
    assert!(sample(&mut wrong, &x, &x, &inf, opts, &mut Rng::new(1)).is_err());
    let mut failing = |_: &HsiCube, _: &HsiCube, _: &HsiCube, _: f64| -> Result<HsiCube> { Err(Error::Numeric("boom".into())) };
    assert!(matches!(sample(&mut failing, &x, &x, &inf, opts, &mut Rng::new(1)), Err(Error::Numeric(_))));
}
