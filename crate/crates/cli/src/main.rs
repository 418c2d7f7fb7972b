//! `hsrdiff`: generate synthetic data, train the denoiser, fuse and evaluate.
//!
//! Exit codes: 0 success, 2 validation error, 3 I/O or file-format error,
//! 4 numeric failure.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hsrdiff::cdformer::{CachedDenoiser, ModelParams, Precision};
use hsrdiff::config::{RunConfig, DATA_STREAM, INIT_STREAM, SAMPLE_STREAM};
use hsrdiff::degradation::{
    load_cube, load_response, make_pair, save_cube, save_response, synthesize_scene, HsiCube, SpatialDegradation,
    SpectralResponse,
};
use hsrdiff::metrics::MetricReport;
use hsrdiff::numerics::Rng;
use hsrdiff::schedule::{
    build_inference_schedule, build_training_schedule, sample_with_trajectory, NoiseScale,
    SampleOptions, DEFAULT_INFERENCE_STEPS,
};
use hsrdiff::training::{
    load_checkpoint, progressive_schedule, save_checkpoint, Checkpoint, LossContext, PatchSize, Sample, Trainable,
    Trainer,
};
use hsrdiff::{Error, Result};

#[derive(Parser)]
#[command(name = "hsrdiff", version, about = "Hyperspectral super-resolution by conditional diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a scene and write z.hcube, x.hcube, y.hcube and response.srsp.
    Generate { config: PathBuf },
    /// Train the denoiser on the generated data.
    Train {
        config: PathBuf,
        /// Print the parameter count and stage plan, then stop.
        #[arg(long)]
        dry_run: bool,
        /// Continue from the configured checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Fuse an MSI and an LR-HSI into an HR-HSI estimate.
    Fuse {
        checkpoint: PathBuf,
        x: PathBuf,
        y: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_INFERENCE_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write every k-th intermediate state next to OUT.
        #[arg(long, value_name = "K")]
        save_trajectory: Option<usize>,
        /// f32 or f64 forward passes.
        #[arg(long, default_value = "f64")]
        precision: String,
        /// Refinement noise: step or posterior.
        #[arg(long, default_value = "step")]
        variance: String,
    },
    /// Print PSNR, SSIM, SAM and ERGAS for each reference/estimate pair, then their mean.
    Evaluate {
        /// REFERENCE ESTIMATE [REFERENCE ESTIMATE ...]
        #[arg(required = true, num_args = 2.., value_name = "PATH")]
        pairs: Vec<PathBuf>,
        #[arg(long, default_value_t = 4)]
        factor: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) => 3,
        Error::Numeric(_) => 4,
        _ => 2,
    }
}

fn threads() -> Result<usize> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("HSRDIFF_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n.min(available)),
            _ => Err(Error::Config(format!("HSRDIFF_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(available),
    }
}

fn data_paths(dir: &Path) -> [PathBuf; 4] {
    ["z.hcube", "x.hcube", "y.hcube", "response.srsp"].map(|f| dir.join(f))
}

fn dims(c: &HsiCube) -> String {
    let (b, h, w) = c.dims();
    format!("{b}x{h}x{w}")
}

fn generate(path: &Path) -> Result<()> {
    let cfg = RunConfig::load(path)?;
    let scene = synthesize_scene(&cfg.scene, &mut cfg.root_rng().fork(DATA_STREAM))?;
    let r = SpectralResponse::smooth_default(cfg.model.msi_bands, cfg.scene.bands)?;
    let d = SpatialDegradation::new(cfg.factor)?;
    let (x, y, z) = make_pair(&scene, &r, &d)?;
    fs::create_dir_all(&cfg.paths.data_dir)?;
    let [zp, xp, yp, rp] = data_paths(&cfg.paths.data_dir);
    save_cube(&zp, &z)?;
    save_cube(&xp, &x)?;
    save_cube(&yp, &y)?;
    save_response(&rp, &r)?;
    println!("z {}  x {}  y {}  response {}x{}", dims(&z), dims(&x), dims(&y), r.msi_bands(), r.bands());
    print!("{}", cfg.to_text());
    Ok(())
}

fn stage_plan(cfg: &RunConfig) -> Vec<String> {
    let mut lines: Vec<String> = Vec::new();
    let mut current = None;
    let mut from = 0;
    for epoch in 0..=cfg.train.epochs {
        let plan = (epoch < cfg.train.epochs).then(|| progressive_schedule(&cfg.train, epoch));
        if plan != current {
            if let Some((size, trainable)) = current {
                let size = match size {
                    PatchSize::Crop(p) if p < cfg.scene.height.min(cfg.scene.width) => format!("patch {p}"),
                    _ => format!("full {}x{}", cfg.scene.height, cfg.scene.width),
                };
                let which = if trainable == Trainable::All { "all parameters" } else { "second half" };
                lines.push(format!("epochs {from}..{epoch}: {size}, {which}"));
            }
            current = plan;
            from = epoch;
        }
    }
    lines
}

fn load_dataset(cfg: &RunConfig) -> Result<(Sample, SpectralResponse)> {
    let [zp, xp, yp, rp] = data_paths(&cfg.paths.data_dir);
    let (z, x, y, r) = (load_cube(zp)?, load_cube(xp)?, load_cube(yp)?, load_response(rp)?);
    let f = cfg.factor;
    let want = (cfg.scene.bands, cfg.scene.height, cfg.scene.width);
    if z.dims() != want
        || x.dims() != (cfg.model.msi_bands, want.1, want.2)
        || y.dims() != (want.0, want.1 / f, want.2 / f)
        || (r.msi_bands(), r.bands()) != (cfg.model.msi_bands, cfg.scene.bands)
    {
        return Err(Error::Config(format!(
            "data in {} (z {}, x {}, y {}) does not match the config",
            cfg.paths.data_dir.display(),
            dims(&z),
            dims(&x),
            dims(&y)
        )));
    }
    Ok((Sample { x, y, z }, r))
}

fn train(path: &Path, dry_run: bool, resume: bool) -> Result<()> {
    let cfg = RunConfig::load(path)?;
    let s = &cfg.schedule;
    let schedule = build_training_schedule(s.train_steps, s.beta_start, s.beta_end)?;
    if dry_run {
        let params = ModelParams::init(cfg.model, &mut cfg.root_rng().fork(INIT_STREAM))?;
        println!("parameters {}", params.count());
        println!("steps {}", cfg.train.epochs * cfg.train.steps_per_epoch);
        for line in stage_plan(&cfg) {
            println!("{line}");
        }
        return Ok(());
    }
    let (sample, r) = load_dataset(&cfg)?;
    let ctx = LossContext::new(r, SpatialDegradation::new(cfg.factor)?);
    let trainer = if resume {
        let ck = load_checkpoint(&cfg.paths.checkpoint)?;
        if *ck.params.config() != cfg.model {
            return Err(Error::Config("checkpoint model differs from the config".into()));
        }
        if ck.schedule != schedule {
            return Err(Error::Config("checkpoint noise schedule differs from the config".into()));
        }
        Trainer::resume(ck.params, ck.opt, ck.schedule, cfg.train.clone(), ctx, ck.global_step)?
    } else {
        let params = ModelParams::init(cfg.model, &mut cfg.root_rng().fork(INIT_STREAM))?;
        Trainer::new(params, schedule, cfg.train.clone(), ctx)?
    };
    let mut trainer = trainer.with_threads(threads()?);
    let log = if resume {
        OpenOptions::new().append(true).create(true).open(&cfg.paths.log)?
    } else {
        File::create(&cfg.paths.log)?
    };
    let mut log = BufWriter::new(log);
    let data = [sample];
    let per_chunk = (cfg.checkpoint_every * cfg.train.steps_per_epoch) as u64;
    loop {
        let stop = if per_chunk == 0 { trainer.total_steps() } else { (trainer.global_step / per_chunk + 1) * per_chunk };
        let mut last = None;
        trainer.run(&data, Some(stop), &mut |rec| {
            writeln!(log, "{}", rec.log_line())?;
            last = Some(*rec);
            Ok(())
        })?;
        log.flush()?;
        let ck = Checkpoint {
            params: trainer.params.clone(),
            opt: trainer.opt.clone(),
            global_step: trainer.global_step,
            schedule: trainer.schedule.clone(),
        };
        save_checkpoint(&cfg.paths.checkpoint, &ck)?;
        match last {
            Some(rec) => println!(
                "epoch {} step {}/{} loss {:.6} -> {}",
                rec.epoch,
                rec.step,
                trainer.total_steps(),
                rec.loss,
                cfg.paths.checkpoint.display()
            ),
            None => println!("step {} -> {}", trainer.global_step, cfg.paths.checkpoint.display()),
        }
        if trainer.is_finished() {
            return Ok(());
        }
    }
}

fn trajectory_path(out: &Path, step: usize) -> PathBuf {
    let stem = out.file_stem().map_or("fused".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.step{step:04}.hcube"))
}

#[allow(clippy::too_many_arguments)]
fn fuse(
    checkpoint: &Path,
    x: &Path,
    y: &Path,
    out: &Path,
    steps: usize,
    seed: u64,
    every: Option<usize>,
    precision: &str,
    variance: &str,
) -> Result<()> {
    let precision = Precision::parse(precision)?;
    let noise_scale = NoiseScale::parse(variance)?;
    if every == Some(0) {
        return Err(Error::Config("--save-trajectory needs k >= 1".into()));
    }
    let ck = load_checkpoint(checkpoint)?;
    let (x, y) = (load_cube(x)?, load_cube(y)?);
    let mc = *ck.params.config();
    if x.bands() != mc.msi_bands || y.bands() != mc.bands {
        return Err(Error::Shape(format!(
            "model expects {} MSI and {} HSI bands, got {} and {}",
            mc.msi_bands,
            mc.bands,
            x.bands(),
            y.bands()
        )));
    }
    let infer = build_inference_schedule(&ck.schedule, steps)?;
    let opts = SampleOptions { bands: mc.bands, height: x.height(), width: x.width(), noise_scale };
    let mut model = CachedDenoiser::new(&ck.params, precision);
    let mut rng = Rng::new(seed).fork(SAMPLE_STREAM);
    let mut observe = |s: usize, z: &HsiCube| -> Result<()> {
        match every {
            Some(k) if s % k == 0 => save_cube(trajectory_path(out, s), z),
            _ => Ok(()),
        }
    };
    let fused = sample_with_trajectory(&mut model, &x, &y, &infer, opts, &mut rng, &mut observe)?;
    save_cube(out, &fused)?;
    println!("fused {} in {} steps -> {}", dims(&fused), infer.len(), out.display());
    Ok(())
}

fn evaluate(pairs: &[PathBuf], factor: usize) -> Result<()> {
    if pairs.len() % 2 != 0 {
        return Err(Error::Config("evaluate takes reference/estimate pairs".into()));
    }
    let mut rows = Vec::new();
    for pair in pairs.chunks(2) {
        let (r, e) = (load_cube(&pair[0])?, load_cube(&pair[1])?);
        let name = pair[1].file_stem().map_or("?".into(), |s| s.to_string_lossy().into_owned());
        rows.push((name, MetricReport::compute(&r, &e, factor)?));
    }
    println!("name\tPSNR\tSSIM\tSAM\tERGAS");
    for (name, report) in &rows {
        println!("{name}\t{}", report.format_row());
    }
    let all: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    if let Some(mean) = MetricReport::mean(&all) {
        println!("mean\t{}", mean.format_row());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config } => generate(&config),
        Command::Train { config, dry_run, resume } => train(&config, dry_run, resume),
        Command::Fuse { checkpoint, x, y, out, steps, seed, save_trajectory, precision, variance } => {
            fuse(&checkpoint, &x, &y, &out, steps, seed, save_trajectory, &precision, &variance)
        }
        Command::Evaluate { pairs, factor } => evaluate(&pairs, factor),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
