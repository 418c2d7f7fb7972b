//! Run configuration: a line-oriented `key = value` file with `[section]`
//! headers.
//!
//! ```text
//! # comment
//! seed = 7
//!
//! [scene]
//! bands = 8
//! height = 32
//!
//! [train]
//! stages = 0:16, 4:32
//! ```
//!
//! Keys before the first header belong to `[run]`. Unknown sections or keys
//! and repeated keys are errors. Relative paths resolve against the
//! directory holding the config file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cdformer::{ModelConfig, Residual};
use crate::degradation::SceneConfig;
use crate::numerics::Rng;
use crate::schedule::{
    NoiseScale, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_INFERENCE_STEPS, DEFAULT_TRAIN_STEPS,
};
use crate::training::{Stage, TrainConfig};
use crate::{Error, Result};

/// Stream labels for [`Rng::fork`] on the root seed.
pub const DATA_STREAM: u64 = 1;
pub const INIT_STREAM: u64 = 2;
pub const TRAIN_STREAM: u64 = 3;
pub const SAMPLE_STREAM: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    /// Directory for `z.hcube`, `x.hcube`, `y.hcube` and `response.srsp`.
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSettings {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub inference_steps: usize,
    pub noise_scale: NoiseScale,
}

impl Default for ScheduleSettings {
    fn default() -> Self {
        Self {
            train_steps: DEFAULT_TRAIN_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            inference_steps: DEFAULT_INFERENCE_STEPS,
            noise_scale: NoiseScale::Step,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub factor: usize,
    /// Model band counts mirror `scene.bands` and `msi_bands`.
    pub model: ModelConfig,
    pub schedule: ScheduleSettings,
    /// `train.seed` is derived from the root seed and not set directly.
    pub train: TrainConfig,
    /// Write a checkpoint after every this many epochs; 0 writes only the last.
    pub checkpoint_every: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig { endmembers: 4, bands: 31, height: 64, width: 64, smoothness: 4.0 };
        let seed = 0;
        Self {
            seed,
            scene,
            factor: 4,
            model: ModelConfig::default(),
            schedule: ScheduleSettings::default(),
            train: TrainConfig { seed: train_seed(seed), ..TrainConfig::default() },
            checkpoint_every: 0,
            paths: Paths {
                data_dir: PathBuf::from("data"),
                checkpoint: PathBuf::from("model.ckpt"),
                log: PathBuf::from("train.log"),
            },
        }
    }
}

fn train_seed(seed: u64) -> u64 {
    Rng::new(seed).fork(TRAIN_STREAM).seed()
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(other.to_string()),
    }
}

fn parse_value<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse {value:?}")))
}

fn parse_stages(value: &str) -> Result<Vec<Stage>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|item| {
            let (e, p) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("stage {item:?} is not epoch:patch")))?;
            Ok(Stage {
                start_epoch: parse_value("train", "stages", e.trim())?,
                patch_size: parse_value("train", "stages", p.trim())?,
            })
        })
        .collect()
}

fn parse_optional(value: &str) -> Result<Option<usize>> {
    match value {
        "none" | "" => Ok(None),
        v => parse_value("train", "full_res_epoch", v).map(Some),
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut cfg = Self::parse(&text)?;
        for p in [&mut cfg.paths.data_dir, &mut cfg.paths.checkpoint, &mut cfg.paths.log] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Parses and validates config text; paths are left as written.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut msi_bands = cfg.model.msi_bands;
        let mut seen = BTreeMap::new();
        let mut section = String::from("run");
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                section = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: malformed header {line:?}", n + 1)))?
                    .trim()
                    .to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert((section.clone(), key.to_string()), n).is_some() {
                return Err(Error::Config(format!("line {}: [{section}] {key} set twice", n + 1)));
            }
            let s = section.as_str();
            match (s, key) {
                ("run", "seed") => cfg.seed = parse_value(s, key, value)?,
                ("run", "checkpoint_every") => cfg.checkpoint_every = parse_value(s, key, value)?,
                ("paths", "data_dir") => cfg.paths.data_dir = value.into(),
                ("paths", "checkpoint") => cfg.paths.checkpoint = value.into(),
                ("paths", "log") => cfg.paths.log = value.into(),
                ("scene", "endmembers") => cfg.scene.endmembers = parse_value(s, key, value)?,
                ("scene", "bands") => cfg.scene.bands = parse_value(s, key, value)?,
                ("scene", "height") => cfg.scene.height = parse_value(s, key, value)?,
                ("scene", "width") => cfg.scene.width = parse_value(s, key, value)?,
                ("scene", "smoothness") => cfg.scene.smoothness = parse_value(s, key, value)?,
                ("degradation", "factor") => cfg.factor = parse_value(s, key, value)?,
                ("degradation", "msi_bands") => msi_bands = parse_value(s, key, value)?,
                ("model", "channels") => cfg.model.channels = parse_value(s, key, value)?,
                ("model", "layers") => cfg.model.layers = parse_value(s, key, value)?,
                ("model", "heads") => cfg.model.heads = parse_value(s, key, value)?,
                ("model", "window") => cfg.model.window = parse_value(s, key, value)?,
                ("model", "nle_scale") => cfg.model.nle_scale = parse_value(s, key, value)?,
                ("model", "residual") => cfg.model.residual = Residual::parse(value).map_err(as_config)?,
                ("schedule", "train_steps") => cfg.schedule.train_steps = parse_value(s, key, value)?,
                ("schedule", "beta_start") => cfg.schedule.beta_start = parse_value(s, key, value)?,
                ("schedule", "beta_end") => cfg.schedule.beta_end = parse_value(s, key, value)?,
                ("schedule", "inference_steps") => cfg.schedule.inference_steps = parse_value(s, key, value)?,
                ("schedule", "variance") => cfg.schedule.noise_scale = NoiseScale::parse(value).map_err(as_config)?,
                ("train", "lr") => cfg.train.lr = parse_value(s, key, value)?,
                ("train", "beta1") => cfg.train.beta1 = parse_value(s, key, value)?,
                ("train", "beta2") => cfg.train.beta2 = parse_value(s, key, value)?,
                ("train", "adam_eps") => cfg.train.adam_eps = parse_value(s, key, value)?,
                ("train", "clip_norm") => cfg.train.clip_norm = parse_value(s, key, value)?,
                ("train", "batch_size") => cfg.train.batch_size = parse_value(s, key, value)?,
                ("train", "epochs") => cfg.train.epochs = parse_value(s, key, value)?,
                ("train", "steps_per_epoch") => cfg.train.steps_per_epoch = parse_value(s, key, value)?,
                ("train", "stages") => cfg.train.stages = parse_stages(value)?,
                ("train", "full_res_epoch") => cfg.train.full_res_epoch = parse_optional(value)?,
                ("run" | "paths" | "scene" | "degradation" | "model" | "schedule" | "train", _) => {
                    return Err(Error::Config(format!("line {}: unknown key [{s}] {key}", n + 1)))
                }
                _ => return Err(Error::Config(format!("line {}: unknown section [{s}]", n + 1))),
            }
        }
        cfg.model.bands = cfg.scene.bands;
        cfg.model.msi_bands = msi_bands;
        cfg.train.seed = train_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every physical constraint; all failures are [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        self.scene.validate().map_err(as_config)?;
        self.model.validate().map_err(as_config)?;
        self.train.validate().map_err(as_config)?;
        let bad = |m: String| Err(Error::Config(m));
        let (b, big_b, f) = (self.model.msi_bands, self.scene.bands, self.factor);
        if b >= big_b {
            return bad(format!("msi_bands {b} must be fewer than scene bands {big_b}"));
        }
        if f < 2 {
            return bad(format!("factor must be at least 2, got {f}"));
        }
        let (h, w) = (self.scene.height, self.scene.width);
        if h % f != 0 || w % f != 0 {
            return bad(format!("scene {h}x{w} not divisible by factor {f}"));
        }
        let mut smallest = h.min(w);
        for s in &self.train.stages {
            if s.patch_size % f != 0 {
                return bad(format!("patch size {} not divisible by factor {f}", s.patch_size));
            }
            smallest = smallest.min(s.patch_size);
        }
        if self.model.window > smallest {
            return bad(format!("window {} exceeds smallest training image side {smallest}", self.model.window));
        }
        let s = &self.schedule;
        if s.train_steps == 0 || s.inference_steps == 0 || s.inference_steps > s.train_steps {
            return bad(format!(
                "need 1 <= inference_steps ({}) <= train_steps ({})",
                s.inference_steps, s.train_steps
            ));
        }
        if !(0.0 < s.beta_start && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            return bad(format!("need 0 < beta_start <= beta_end < 1, got {} and {}", s.beta_start, s.beta_end));
        }
        if let Some(e) = self.train.full_res_epoch {
            if e > self.train.epochs {
                return bad(format!("full_res_epoch {e} is after the last epoch {}", self.train.epochs));
            }
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields the same config (paths aside
    /// from base-directory resolution).
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let stages: Vec<String> = self.train.stages.iter().map(|s| format!("{}:{}", s.start_epoch, s.patch_size)).collect();
        let full = self.train.full_res_epoch.map_or("none".to_string(), |e| e.to_string());
        // writing into a String cannot fail
        let _ = writeln!(o, "seed = {}\ncheckpoint_every = {}", self.seed, self.checkpoint_every);
        let _ = writeln!(
            o,
            "\n[paths]\ndata_dir = {}\ncheckpoint = {}\nlog = {}",
            self.paths.data_dir.display(),
            self.paths.checkpoint.display(),
            self.paths.log.display()
        );
        let sc = &self.scene;
        let _ = writeln!(
            o,
            "\n[scene]\nendmembers = {}\nbands = {}\nheight = {}\nwidth = {}\nsmoothness = {:?}",
            sc.endmembers, sc.bands, sc.height, sc.width, sc.smoothness
        );
        let _ = writeln!(o, "\n[degradation]\nfactor = {}\nmsi_bands = {}", self.factor, self.model.msi_bands);
        let m = &self.model;
        let _ = writeln!(
            o,
            "\n[model]\nchannels = {}\nlayers = {}\nheads = {}\nwindow = {}\nnle_scale = {:?}\nresidual = {}",
            m.channels,
            m.layers,
            m.heads,
            m.window,
            m.nle_scale,
            m.residual.name()
        );
        let s = &self.schedule;
        let _ = writeln!(
            o,
            "\n[schedule]\ntrain_steps = {}\nbeta_start = {:?}\nbeta_end = {:?}\ninference_steps = {}\nvariance = {}",
            s.train_steps,
            s.beta_start,
            s.beta_end,
            s.inference_steps,
            s.noise_scale.name()
        );
        let t = &self.train;
        let _ = writeln!(
            o,
            "\n[train]\nlr = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\nadam_eps = {:?}\nclip_norm = {:?}\nbatch_size = {}\nepochs = {}\nsteps_per_epoch = {}\nstages = {}\nfull_res_epoch = {}",
            t.lr,
            t.beta1,
            t.beta2,
            t.adam_eps,
            t.clip_norm,
            t.batch_size,
            t.epochs,
            t.steps_per_epoch,
            stages.join(", "),
            full
        );
        o
    }

    /// Root random stream; subsystems take [`Rng::fork`] with the stream constants.
    pub fn root_rng(&self) -> Rng {
        Rng::new(self.seed)
    }
}
