use std::collections::BTreeMap;

use super::adam::{adam_update, clip_global_norm, OptimState};
use super::data::{patch_sampler, PatchTriple, Sample};
use super::loss::{loss_on_tape, LossContext};
use super::{progressive_schedule, PatchSize, TrainConfig, Trainable};
use crate::cdformer::{denoise_on_tape, ModelParams};
use crate::degradation::HsiCube;
use crate::numerics::{Rng, Tape};
use crate::schedule::{forward_marginal, sample_gamma, NoiseSchedule};
use crate::{Error, Result};

/// One optimiser step as written to the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    /// 1-based global step.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub patch_size: usize,
}

impl StepRecord {
    /// `epoch step loss lr patch_size`.
    pub fn log_line(&self) -> String {
        format!("{} {} {:.12e} {:e} {}", self.epoch, self.step, self.loss, self.lr, self.patch_size)
    }
}

type Grads = BTreeMap<String, Vec<f64>>;

fn element_pass(
    params: &ModelParams,
    trainable: Trainable,
    schedule: &NoiseSchedule,
    triple: &PatchTriple,
    ctx: &LossContext,
    mut rng: Rng,
) -> Result<(f64, Grads)> {
    let cfg = *params.config();
    let mut tape = Tape::<f64>::new();
    let bound = params.bind(&mut tape, &|n| trainable.includes(&cfg, n))?;
    let (_, gamma) = sample_gamma(schedule, &mut rng);
    let (b, h, w) = triple.z.dims();
    let eps = HsiCube::new(b, h, w, rng.normal_vec(b * h * w))?;
    let zt = forward_marginal(&triple.z, gamma, &eps)?;
    let pred = denoise_on_tape(&mut tape, &bound, &cfg, &triple.x, &triple.y, &zt, gamma)?;
    let loss = loss_on_tape(&mut tape, pred, triple, ctx)?;
    let value = tape.item(loss);
    if !value.is_finite() {
        let culprit = params.tensors().iter().find(|(_, t)| t.data.iter().any(|v| !v.is_finite()));
        return Err(Error::Numeric(match culprit {
            Some((name, _)) => format!("non-finite loss {value}: parameter {name} holds non-finite values"),
            None => format!("non-finite loss {value} at noise level {gamma}"),
        }));
    }
    tape.backward(loss)?;
    let mut grads = Grads::new();
    for (name, &id) in bound.iter() {
        if tape.requires_grad(id) {
            let g = tape.grad(id).map_or_else(|| vec![0.0; tape.value(id).len()], <[f64]>::to_vec);
            grads.insert(name.clone(), g);
        }
    }
    Ok((value, grads))
}

/// Forward, backward and Adam update on one batch of patches.
///
/// Element `k` draws its noise level and noise from `rng.fork(k)`. Elements may
/// run on up to `threads` workers; their gradients are summed in batch order,
/// so the result does not depend on the thread count. Returns the batch-mean
/// loss.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    batch: &[PatchTriple],
    params: &mut ModelParams,
    opt: &mut OptimState,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    ctx: &LossContext,
    trainable: Trainable,
    rng: &Rng,
    threads: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let threads = threads.clamp(1, batch.len());
    let shared: &ModelParams = params;
    let mut results: Vec<Option<Result<(f64, Grads)>>> = (0..batch.len()).map(|_| None).collect();
    if threads == 1 {
        for (k, t) in batch.iter().enumerate() {
            results[k] = Some(element_pass(shared, trainable, schedule, t, ctx, rng.fork(k as u64)));
        }
    } else {
        let chunks: Vec<Vec<(usize, Result<(f64, Grads)>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|wkr| {
                    s.spawn(move || {
                        (wkr..batch.len())
                            .step_by(threads)
                            .map(|k| (k, element_pass(shared, trainable, schedule, &batch[k], ctx, rng.fork(k as u64))))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("training worker panicked")).collect()
        });
        for (k, r) in chunks.into_iter().flatten() {
            results[k] = Some(r);
        }
    }

    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut total: Option<Grads> = None;
    for r in results {
        let (l, g) = r.expect("every element evaluated")?;
        loss += l;
        match &mut total {
            None => total = Some(g),
            Some(acc) => {
                for (name, v) in g {
                    let a = acc.get_mut(&name).expect("same parameter set");
                    a.iter_mut().zip(v).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let mut grads = total.expect("non-empty batch");
    grads.values_mut().flatten().for_each(|g| *g /= n);
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric(format!("non-finite gradient in parameter {name}")));
    }
    clip_global_norm(&mut grads, cfg.clip_norm);
    adam_update(params, &grads, opt, &cfg.adam())?;
    Ok(loss / n)
}

/// Training loop state: parameters, optimiser, schedule and step counter.
///
/// Every step's randomness derives from `Rng::new(seed).fork(global_step)`,
/// so resuming from a checkpoint continues the same trajectory.
pub struct Trainer {
    pub params: ModelParams,
    pub opt: OptimState,
    pub schedule: NoiseSchedule,
    pub cfg: TrainConfig,
    pub global_step: u64,
    ctx: LossContext,
    threads: usize,
}

impl Trainer {
    pub fn new(params: ModelParams, schedule: NoiseSchedule, cfg: TrainConfig, ctx: LossContext) -> Result<Self> {
        let opt = OptimState::new(&params);
        Self::resume(params, opt, schedule, cfg, ctx, 0)
    }

    pub fn resume(
        params: ModelParams,
        opt: OptimState,
        schedule: NoiseSchedule,
        cfg: TrainConfig,
        ctx: LossContext,
        global_step: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mc = params.config();
        if ctx.response.bands() != mc.bands || ctx.response.msi_bands() != mc.msi_bands {
            return Err(Error::Config("spectral response does not match the model band counts".into()));
        }
        Ok(Self { params, opt, schedule, cfg, global_step, ctx, threads: 1 })
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn total_steps(&self) -> u64 {
        (self.cfg.epochs * self.cfg.steps_per_epoch) as u64
    }

    pub fn is_finished(&self) -> bool {
        self.global_step >= self.total_steps()
    }

    /// Runs the next optimiser step.
    pub fn step(&mut self, data: &[Sample]) -> Result<StepRecord> {
        let epoch = (self.global_step / self.cfg.steps_per_epoch as u64) as usize;
        let (size, trainable) = progressive_schedule(&self.cfg, epoch);
        let full = data.first().ok_or_else(|| Error::invalid("training set is empty"))?.z.height();
        let patch = match size {
            PatchSize::Crop(p) => p,
            PatchSize::Full => data.iter().map(|s| s.z.height().max(s.z.width())).max().unwrap_or(full),
        };
        let step_rng = Rng::new(self.cfg.seed).fork(self.global_step);
        let batch = patch_sampler(
            data,
            patch,
            &self.ctx.degradation,
            &mut step_rng.fork(u64::MAX),
            self.cfg.batch_size,
        )?;
        for t in &batch {
            self.ctx.prepare(t.z.height(), t.z.width())?;
        }
        let loss = training_step(
            &batch,
            &mut self.params,
            &mut self.opt,
            &self.schedule,
            &self.cfg,
            &self.ctx,
            trainable,
            &step_rng,
            self.threads,
        )?;
        self.global_step += 1;
        Ok(StepRecord {
            epoch,
            step: self.global_step,
            loss,
            lr: self.cfg.lr,
            patch_size: batch[0].z.height(),
        })
    }

    /// Steps until `stop_at` (or the configured total), reporting each record.
    pub fn run(&mut self, data: &[Sample], stop_at: Option<u64>, on_step: &mut dyn FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        let end = stop_at.map_or(self.total_steps(), |s| s.min(self.total_steps()));
        while self.global_step < end {
            let rec = self.step(data)?;
            on_step(&rec)?;
        }
        Ok(())
    }
}
