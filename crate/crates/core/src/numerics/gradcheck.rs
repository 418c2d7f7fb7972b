//! Central finite-difference checks of reverse-mode gradients.
//!
//! Only forward evaluations feed the numeric side, so the comparison is
//! independent of every backward rule on the tape.

use super::{DiffTensor, Rng, Tape};
use crate::Result;

/// Outcome of a gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(input, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Options for [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// When set, compare only this many randomly chosen entries.
    pub sample: Option<(usize, u64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-7, sample: None }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward` against central differences for a scalar function of
/// the given `(values, shape)` inputs.
pub fn check_gradients<F>(inputs: &[(Vec<f64>, Vec<usize>)], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[DiffTensor]) -> Result<DiffTensor>,
{
    let eval = |vals: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves = vals
            .iter()
            .zip(inputs)
            .map(|(v, (_, s))| tape.leaf(v.clone(), s))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &leaves)?;
        Ok(tape.item(out))
    };

    let mut tape = Tape::new();
    let leaves = inputs
        .iter()
        .map(|(v, s)| tape.leaf(v.clone(), s))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &leaves)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&l, (v, _))| tape.grad(l).map_or_else(|| vec![0.0; v.len()], <[f64]>::to_vec))
        .collect();

    let mut entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, (v, _))| (0..v.len()).map(move |j| (i, j)))
        .collect();
    if let Some((count, seed)) = opts.sample {
        let mut rng = Rng::new(seed);
        // partial Fisher-Yates
        let take = count.min(entries.len());
        for k in 0..take {
            let pick = rng.int_inclusive(k, entries.len() - 1);
            entries.swap(k, pick);
        }
        entries.truncate(take);
    }

    let mut vals: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    for (i, j) in entries {
        let orig = vals[i][j];
        vals[i][j] = orig + opts.step;
        let plus = eval(&vals)?;
        vals[i][j] = orig - opts.step;
        let minus = eval(&vals)?;
        vals[i][j] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[i][j];
        let err = relative_error(a, numeric, opts.floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}
