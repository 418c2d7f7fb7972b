use std::collections::BTreeMap;

use super::*;
use crate::cdformer::{ModelConfig, ModelParams};
use crate::degradation::{
    apply_spatial_degradation, make_pair, synthesize_scene, HsiCube, SceneConfig, SpatialDegradation, SpectralResponse,
};
use crate::numerics::Rng;
use crate::schedule::{build_training_schedule, NoiseSchedule};
use proptest::prelude::*;

fn random_cube(seed: u64, b: usize, h: usize, w: usize) -> HsiCube {
    let mut rng = Rng::new(seed);
    HsiCube::from_fn(b, h, w, |_, _, _| rng.uniform())
}

fn fixture(h: usize, bands: usize, msi: usize, factor: usize) -> (Sample, SpectralResponse, SpatialDegradation) {
    let z = synthesize_scene(
        &SceneConfig { endmembers: 3, bands, height: h, width: h, smoothness: 2.0 },
        &mut crate::numerics::Rng::new(1),
    )
    .unwrap();
    let r = SpectralResponse::smooth_default(msi, bands).unwrap();
    let d = SpatialDegradation::new(factor).unwrap();
    let (x, y, z) = make_pair(&z, &r, &d).unwrap();
    (Sample { x, y, z }, r, d)
}

fn tiny_model() -> ModelConfig {
    ModelConfig { channels: 8, layers: 2, heads: 2, window: 4, bands: 4, msi_bands: 2, ..ModelConfig::default() }
}

#[test]
fn loss_vanishes_on_truth() {
    let (s, r, d) = fixture(16, 4, 2, 4);
    assert!(loss_eq8(&s.z, &s.z, &s.x, &s.y, &r, &d).unwrap() < 1e-14);
}

#[test]
fn loss_constant_shift_law() {
    let (s, _, d) = fixture(16, 4, 2, 4);
    let r = SpectralResponse::identity(4);
    let (x, y, z) = make_pair(&s.z, &r, &d).unwrap();
    let c = 0.125;
    let shifted = z.map(|v| v + c);
    let total = loss_eq8(&shifted, &z, &x, &y, &r, &d).unwrap();
    // each term sees the same offset: rows of R and the blur kernel sum to one
    assert!((total - 3.0 * c).abs() < 1e-12, "{total}");
    let none = vec![false; y.pixels()];
    let two = loss_eq8_masked(&shifted, &z, &x, &y, &none, &r, &d).unwrap();
    assert!((two - 2.0 * c).abs() < 1e-12);
}

#[test]
fn loss_matches_direct_sum() {
    let (s, r, d) = fixture(16, 4, 2, 4);
    let pred = random_cube(5, 4, 16, 16);
    let mut tx = 0.0;
    for i in 0..2 {
        for p in 0..256 {
            let rz: f64 = (0..4).map(|j| r.row(i)[j] * pred.band(j)[p]).sum();
            tx += (s.x.band(i)[p] - rz).abs();
        }
    }
    tx /= 512.0;
    let yd = apply_spatial_degradation(&pred, &d).unwrap();
    let mut mask = vec![true; 16];
    mask[3] = false;
    mask[9] = false;
    let mut ty = 0.0;
    for b in 0..4 {
        for p in 0..16 {
            if mask[p] {
                ty += (s.y.band(b)[p] - yd.band(b)[p]).abs();
            }
        }
    }
    ty /= 4.0 * 14.0;
    let tz = s.z.data().iter().zip(pred.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 1024.0;
    let got = loss_eq8_masked(&pred, &s.z, &s.x, &s.y, &mask, &r, &d).unwrap();
    assert!((got - (tx + ty + tz)).abs() < 1e-12);
    assert!(loss_eq8(&random_cube(1, 4, 16, 12), &s.z, &s.x, &s.y, &r, &d).is_err());
}

#[test]
fn adam_scalar_hand_trace() {
    let cfg = ModelConfig { channels: 2, layers: 1, heads: 1, window: 1, bands: 1, msi_bands: 1, ..ModelConfig::default() };
    let mut p = ModelParams::init(cfg, &mut Rng::new(1)).unwrap();
    let name = "recon.bias".to_string();
    p.get_mut(&name).unwrap().data[0] = 0.5;
    let mut opt = OptimState::new(&p);
    let adam = AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let mut g = BTreeMap::new();
    g.insert(name.clone(), vec![0.2]);
    adam_update(&mut p, &g, &mut opt, &adam).unwrap();
    // m = 0.02, v = 4e-5, m_hat = 0.2, v_hat = 0.04
    let expect1 = (0.5 - 0.01 * 0.2 / (0.2 + 1e-8)) as f32 as f64;
    assert_eq!(p.get(&name).unwrap().data[0], expect1);
    assert_eq!(opt.m[&name][0], 0.02f32 as f64);
    g.insert(name.clone(), vec![-0.1]);
    adam_update(&mut p, &g, &mut opt, &adam).unwrap();
    let m2 = (0.9 * (0.02f32 as f64) - 0.1 * 0.1) as f32 as f64;
    let v2 = (0.999 * ((0.001 * 0.04) as f32 as f64) + 0.001 * 0.01) as f32 as f64;
    let step = 0.01 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
    assert_eq!(p.get(&name).unwrap().data[0], (expect1 - step) as f32 as f64);
    assert_eq!(opt.step, 2);
}

#[test]
fn adam_zero_gradients_and_zero_lr() {
    let mut p = ModelParams::init(tiny_model(), &mut Rng::new(2)).unwrap();
    let before = p.clone();
    let mut opt = OptimState::new(&p);
    let zeros: BTreeMap<String, Vec<f64>> = p.tensors().iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect();
    adam_update(&mut p, &zeros, &mut opt, &AdamConfig::default()).unwrap();
    assert_eq!(p, before);

    let mut rng = Rng::new(3);
    let grads: BTreeMap<String, Vec<f64>> =
        p.tensors().iter().map(|(k, t)| (k.clone(), rng.normal_vec(t.len()))).collect();
    adam_update(&mut p, &grads, &mut opt, &AdamConfig::default()).unwrap();
    let m1 = opt.m.clone();
    let moved = p.clone();
    adam_update(&mut p, &zeros, &mut opt, &AdamConfig { lr: 0.0, ..AdamConfig::default() }).unwrap();
    assert_eq!(p, moved);
    for (k, m) in &opt.m {
        for (a, b) in m.iter().zip(&m1[k]) {
            assert_eq!(*a, (0.9 * b) as f32 as f64);
        }
    }
    let mut bad = grads.clone();
    bad.get_mut("recon.bias").unwrap().push(0.0);
    assert!(adam_update(&mut p, &bad, &mut opt, &AdamConfig::default()).is_err());
    let mut unknown = BTreeMap::new();
    unknown.insert("nope".to_string(), vec![0.0]);
    assert!(adam_update(&mut p, &unknown, &mut opt, &AdamConfig::default()).is_err());
}

#[test]
fn adam_moments_stay_finite_under_fuzz() {
    let cfg = ModelConfig { channels: 2, layers: 1, heads: 1, window: 1, bands: 1, msi_bands: 1, ..ModelConfig::default() };
    let mut p = ModelParams::init(cfg, &mut Rng::new(4)).unwrap();
    let mut opt = OptimState::new(&p);
    let mut rng = Rng::new(5);
    let names: Vec<String> = ["recon.bias", "recon.weight", "ds.embed.bias"].iter().map(|s| s.to_string()).collect();
    for _ in 0..10_000 {
        let scale = 10f64.powf(rng.uniform() * 12.0 - 8.0);
        let g: BTreeMap<String, Vec<f64>> = names
            .iter()
            .map(|n| (n.clone(), rng.normal_vec(p.get(n).unwrap().len()).iter().map(|v| v * scale).collect()))
            .collect();
        adam_update(&mut p, &g, &mut opt, &AdamConfig::default()).unwrap();
    }
    assert_eq!(opt.step, 10_000);
    assert!(opt.m.values().chain(opt.v.values()).flatten().all(|v| v.is_finite()));
    assert!(p.tensors().values().all(|t| t.data.iter().all(|v| v.is_finite())));
}

#[test]
fn gradient_clipping() {
    let mut g = BTreeMap::new();
    g.insert("a".to_string(), vec![3.0, 0.0]);
    g.insert("b".to_string(), vec![4.0]);
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g["a"][0] - 0.6).abs() < 1e-15 && (g["b"][0] - 0.8).abs() < 1e-15);
    assert!((clip_global_norm(&mut g, 2.0) - 1.0).abs() < 1e-15);
    assert!((g["a"][0] - 0.6).abs() < 1e-15);
    let mut big = g.clone();
    clip_global_norm(&mut big, 0.0);
    assert_eq!(big, g);
}

#[test]
fn progressive_stages() {
    let e = 100;
    let cfg = TrainConfig {
        stages: vec![
            Stage { start_epoch: 0, patch_size: 128 },
            Stage { start_epoch: e / 2, patch_size: 256 },
            Stage { start_epoch: 3 * e / 4, patch_size: 512 },
        ],
        ..TrainConfig::default()
    };
    cfg.validate().unwrap();
    let size = |ep| progressive_schedule(&cfg, ep).0;
    assert_eq!(size(0), PatchSize::Crop(128));
    assert_eq!(size(49), PatchSize::Crop(128));
    assert_eq!(size(50), PatchSize::Crop(256));
    assert_eq!(size(74), PatchSize::Crop(256));
    assert_eq!(size(75), PatchSize::Crop(512));
    assert_eq!(size(10_000), PatchSize::Crop(512));
    let late = TrainConfig { stages: vec![Stage { start_epoch: 5, patch_size: 32 }], ..TrainConfig::default() };
    assert_eq!(progressive_schedule(&late, 2).0, PatchSize::Crop(32));
    let full = TrainConfig { full_res_epoch: Some(90), ..cfg.clone() };
    assert_eq!(progressive_schedule(&full, 89), (PatchSize::Crop(512), Trainable::All));
    assert_eq!(progressive_schedule(&full, 90), (PatchSize::Full, Trainable::SecondHalf));
    assert_eq!(progressive_schedule(&TrainConfig::default(), 3), (PatchSize::Full, Trainable::All));

    let unsorted = TrainConfig { stages: vec![cfg.stages[1], cfg.stages[0]], ..TrainConfig::default() };
    assert!(unsorted.validate().is_err());
    let shrinking = TrainConfig {
        stages: vec![Stage { start_epoch: 0, patch_size: 64 }, Stage { start_epoch: 1, patch_size: 32 }],
        ..TrainConfig::default()
    };
    assert!(shrinking.validate().is_err());
    assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn second_half_subset() {
    let cfg = ModelConfig { layers: 4, ..tiny_model() };
    let t = Trainable::SecondHalf;
    assert!(t.includes(&cfg, "recon.weight"));
    assert!(t.includes(&cfg, "ds.blocks.2.cross.q.weight"));
    assert!(t.includes(&cfg, "ds.blocks.3.s2tl.ffn.proj.bias"));
    assert!(!t.includes(&cfg, "ds.blocks.1.nle.weight"));
    assert!(!t.includes(&cfg, "ds.embed.weight"));
    assert!(!t.includes(&cfg, "sr.blocks.3.norm1.gain"));
    let odd = ModelConfig { layers: 3, ..tiny_model() };
    assert!(t.includes(&odd, "ds.blocks.1.nle.bias"));
    assert!(!t.includes(&odd, "ds.blocks.0.nle.bias"));
    let wide = ModelConfig { layers: 12, ..tiny_model() };
    assert!(t.includes(&wide, "ds.blocks.10.nle.bias"));
    assert!(!t.includes(&wide, "ds.blocks.1.nle.bias"));
    assert!(Trainable::All.includes(&cfg, "sr.embed.weight"));
}

#[test]
fn patch_alignment_and_consistency() {
    let (s, _, d) = fixture(128, 3, 2, 4);
    let data = vec![s.clone()];
    let mut rng = Rng::new(7);
    let batch = patch_sampler(&data, 64, &d, &mut rng, 6).unwrap();
    for p in &batch {
        assert_eq!(p.z.dims(), (3, 64, 64));
        assert_eq!(p.x.dims(), (2, 64, 64));
        assert_eq!(p.y.dims(), (3, 16, 16));
        // locate the crop through the low-resolution data and check alignment
        let found = (0..=16).flat_map(|i| (0..=16).map(move |j| (i, j))).find(|&(i, j)| {
            s.y.crop(i, j, 16, 16).unwrap() == p.y && s.z.crop(i * 4, j * 4, 64, 64).unwrap() == p.z
        });
        let (i, j) = found.expect("crop is aligned to the factor grid");
        assert_eq!(s.x.crop(i * 4, j * 4, 64, 64).unwrap(), p.x);
        let redone = apply_spatial_degradation(&p.z, &d).unwrap();
        let mut checked = 0;
        for b in 0..3 {
            for (k, &ok) in p.mask.iter().enumerate() {
                if ok {
                    assert!((redone.band(b)[k] - p.y.band(b)[k]).abs() < 1e-12);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }
    let again = patch_sampler(&data, 64, &d, &mut Rng::new(7), 6).unwrap();
    assert_eq!(batch, again);
    assert!(patch_sampler(&data, 30, &d, &mut Rng::new(7), 1).is_err());
    let full = patch_sampler(&data, 128, &d, &mut Rng::new(7), 1).unwrap();
    assert_eq!(full[0].z, s.z);
    assert!(full[0].mask.iter().all(|&m| m));
    assert!(patch_sampler(&[], 64, &d, &mut Rng::new(7), 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn patch_offsets_are_multiples_of_factor(seed in 0u64..10_000, factor in 2usize..5) {
        let z = random_cube(seed, 2, 8 * factor, 8 * factor);
        let d = SpatialDegradation::new(factor).unwrap();
        let r = SpectralResponse::smooth_default(1, 2).unwrap();
        let (x, y, z) = make_pair(&z, &r, &d).unwrap();
        let data = vec![Sample { x, y, z: z.clone() }];
        let p = patch_sampler(&data, 4 * factor, &d, &mut Rng::new(seed), 1).unwrap().remove(0);
        let hit = (0..=4).flat_map(|i| (0..=4).map(move |j| (i, j)))
            .any(|(i, j)| z.crop(i * factor, j * factor, 4 * factor, 4 * factor).unwrap() == p.z);
        prop_assert!(hit);
    }
}

fn trainer(cfg: TrainConfig, seed: u64) -> (Trainer, Vec<Sample>) {
    let (s, r, d) = fixture(16, 4, 2, 4);
    let params = ModelParams::init(tiny_model(), &mut Rng::new(seed)).unwrap();
    let schedule = build_training_schedule(200, 1e-4, 0.05).unwrap();
    let t = Trainer::new(params, schedule, cfg, LossContext::new(r, d)).unwrap();
    (t, vec![s])
}

fn short(steps: usize) -> TrainConfig {
    TrainConfig { lr: 1e-3, epochs: 1, steps_per_epoch: steps, batch_size: 2, seed: 11, ..TrainConfig::default() }
}

/// Loss on a fixed set of noise levels and noise draws.
fn probe_loss(t: &Trainer, s: &Sample) -> f64 {
    let ctx = LossContext::new(SpectralResponse::smooth_default(2, 4).unwrap(), SpatialDegradation::new(4).unwrap());
    let mut total = 0.0;
    for (k, &g) in [0.05, 0.3, 0.7, 0.95].iter().enumerate() {
        let eps = HsiCube::new(4, 16, 16, Rng::new(k as u64).normal_vec(1024)).unwrap();
        let zt = crate::schedule::forward_marginal(&s.z, g, &eps).unwrap();
        let pred = crate::cdformer::denoise(&t.params, &s.x, &s.y, &zt, g, crate::cdformer::Precision::F64).unwrap();
        total += loss_eq8(&pred, &s.z, &s.x, &s.y, &ctx.response, &ctx.degradation).unwrap();
    }
    total / 4.0
}

#[test]
fn training_reduces_loss_on_fixed_probe() {
    let (mut t, data) = trainer(short(200), 12);
    let before = probe_loss(&t, &data[0]);
    t.run(&data, None, &mut |_| Ok(())).unwrap();
    let after = probe_loss(&t, &data[0]);
    assert!(after < 0.8 * before, "{before} -> {after}");
}

#[test]
fn zero_lr_leaves_parameters_unchanged() {
    let (t, data) = trainer(short(1), 13);
    let mut params = t.params.clone();
    let mut opt = OptimState::new(&params);
    let mut ctx = LossContext::new(SpectralResponse::smooth_default(2, 4).unwrap(), SpatialDegradation::new(4).unwrap());
    ctx.prepare(16, 16).unwrap();
    let batch = patch_sampler(&data, 16, &ctx.degradation, &mut Rng::new(1), 2).unwrap();
    let cfg = TrainConfig { lr: 0.0, ..short(1) };
    let loss = training_step(&batch, &mut params, &mut opt, &t.schedule, &cfg, &ctx, Trainable::All, &Rng::new(2), 1)
        .unwrap();
    assert!(loss > 0.0);
    assert_eq!(params, t.params);
    assert_eq!(opt.step, 1);
}

fn trace(cfg: TrainConfig, threads: usize) -> (Vec<StepRecord>, ModelParams) {
    let (t, data) = trainer(cfg, 14);
    let mut t = t.with_threads(threads);
    let mut recs = Vec::new();
    t.run(&data, None, &mut |r| {
        recs.push(*r);
        Ok(())
    })
    .unwrap();
    (recs, t.params)
}

#[test]
fn training_is_deterministic_across_runs_and_threads() {
    let cfg = TrainConfig { batch_size: 3, ..short(6) };
    let (a, pa) = trace(cfg.clone(), 1);
    let (b, pb) = trace(cfg.clone(), 1);
    let (c, pc) = trace(cfg, 3);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(pa, pb);
    assert_eq!(pa, pc);
    assert_eq!(a.len(), 6);
    assert_eq!(a[0].log_line().split(' ').count(), 5);
}

#[test]
fn frozen_parameters_survive_full_resolution_epoch() {
    let cfg = TrainConfig {
        epochs: 2,
        steps_per_epoch: 3,
        stages: vec![Stage { start_epoch: 0, patch_size: 8 }],
        full_res_epoch: Some(1),
        ..short(3)
    };
    let (mut t, data) = trainer(cfg, 15);
    let mut sizes = Vec::new();
    t.run(&data, Some(3), &mut |r| {
        sizes.push(r.patch_size);
        Ok(())
    })
    .unwrap();
    let mid = t.params.clone();
    let mid_opt = t.opt.clone();
    t.run(&data, None, &mut |r| {
        sizes.push(r.patch_size);
        Ok(())
    })
    .unwrap();
    assert_eq!(sizes, vec![8, 8, 8, 16, 16, 16]);
    let mc = *t.params.config();
    for (name, tensor) in t.params.tensors() {
        if Trainable::SecondHalf.includes(&mc, name) {
            continue;
        }
        assert_eq!(tensor, mid.get(name).unwrap(), "{name} changed while frozen");
        assert_eq!(t.opt.m[name], mid_opt.m[name]);
    }
    assert_ne!(t.params.get("ds.blocks.1.nle.weight"), mid.get("ds.blocks.1.nle.weight"));
    assert_ne!(t.params.get("recon.weight"), mid.get("recon.weight"));
}

#[test]
fn non_finite_parameter_is_reported_by_name() {
    let (mut t, data) = trainer(short(1), 16);
    t.params.get_mut("ds.blocks.0.cross.q.weight").unwrap().data[3] = f64::NAN;
    let err = t.step(&data).unwrap_err();
    assert!(matches!(err, crate::Error::Numeric(_)));
    assert!(err.to_string().contains("ds.blocks.0.cross.q.weight"), "{err}");
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let (mut t, data) = trainer(short(2), 17);
    t.run(&data, None, &mut |_| Ok(())).unwrap();
    let ck = Checkpoint { params: t.params.clone(), opt: t.opt.clone(), global_step: t.global_step, schedule: t.schedule.clone() };
    let bytes = encode_checkpoint(&ck);
    assert_eq!(&bytes[..4], b"HSRD");
    assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ck);

    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(crate::Error::Format(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(crate::Error::Format(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint(&extra).is_err());
    let mut version = bytes;
    version[4] = 9;
    assert!(decode_checkpoint(&version).is_err());
    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(crate::Error::Io(_))));
}

#[test]
fn resume_reproduces_unbroken_trace() {
    let cfg = TrainConfig { epochs: 2, steps_per_epoch: 4, ..short(4) };
    let (unbroken, p_full) = trace(cfg.clone(), 1);

    let (mut t, data) = trainer(cfg.clone(), 14);
    let mut first = Vec::new();
    t.run(&data, Some(3), &mut |r| {
        first.push(*r);
        Ok(())
    })
    .unwrap();
    let ck = Checkpoint { params: t.params.clone(), opt: t.opt.clone(), global_step: t.global_step, schedule: t.schedule.clone() };
    let ck = decode_checkpoint(&encode_checkpoint(&ck)).unwrap();
    drop(t);
    let (r, d) = (SpectralResponse::smooth_default(2, 4).unwrap(), SpatialDegradation::new(4).unwrap());
    let mut t = Trainer::resume(ck.params, ck.opt, ck.schedule, cfg, LossContext::new(r, d), ck.global_step).unwrap();
    t.run(&data, None, &mut |r| {
        first.push(*r);
        Ok(())
    })
    .unwrap();
    assert_eq!(first, unbroken);
    assert_eq!(t.params, p_full);
}

#[test]
fn default_schedule_survives_checkpoint() {
    let p = ModelParams::init(tiny_model(), &mut Rng::new(1)).unwrap();
    let ck = Checkpoint { opt: OptimState::new(&p), params: p, global_step: 0, schedule: NoiseSchedule::default() };
    assert_eq!(decode_checkpoint(&encode_checkpoint(&ck)).unwrap().schedule, NoiseSchedule::default());
}
