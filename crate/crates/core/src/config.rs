//! Experiment configuration: flat UTF-8 `key=value` lines with dotted
//! section prefixes (model.*, data.*, optim.*, reg.*, probe.*, run.*).
//! Unknown keys are errors. A config fully determines a run.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::nets::{Activation, ModelKind, ModelSpec};
use crate::optim::LrSchedule;
use crate::reg::{PenaltyKind, RegularizerConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Gaussians { classes: usize, per_class: usize, dim: usize, separation: f64 },
    Spirals { classes: usize, per_class: usize, sigma: f64 },
    Idx { images: PathBuf, labels: PathBuf },
    Flds { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub split: (f64, f64, f64),
    pub split_seed: u64,
    pub gen_seed: u64,
    pub noise_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl OptimConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { base_lr: self.lr, milestones: self.milestones.clone(), gamma: self.gamma }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Probe at the end of every k-th epoch (0 disables epoch probes).
    pub every_epochs: usize,
    /// Probe before every k-th optimization step (0 disables step probes).
    pub every_steps: usize,
    /// Example count for per-step Tr(F) probes and the Tr(H)/Tr(F_B) batch.
    pub batch: usize,
    pub trf_examples: usize,
    pub trf_labels_per_example: usize,
    pub hutchinson_m: usize,
    pub hvp_step: f64,
    pub tr_h: bool,
    pub tr_f_minibatch: bool,
    pub empirical_fisher: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Training-loss threshold for the early-phase trace summary.
    pub epsilon: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub eval_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model_kind: String,
    pub hidden: Vec<usize>,
    pub channels: (usize, usize),
    pub activation: Activation,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub data: DataConfig,
    pub optim: OptimConfig,
    pub reg: RegularizerConfig,
    pub probe: ProbeConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model_kind: "mlp".into(),
            hidden: vec![64, 64],
            channels: (4, 8),
            activation: Activation::Relu,
            input_shape: vec![2],
            classes: 2,
            data: DataConfig {
                source: DataSource::Spirals { classes: 2, per_class: 500, sigma: 0.2 },
                split: (0.5, 0.125, 0.375),
                split_seed: 1,
                gen_seed: 1,
                noise_fraction: 0.0,
            },
            optim: OptimConfig {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 1e-5,
                milestones: Vec::new(),
                gamma: 0.5,
                batch_size: 64,
                epochs: 10,
            },
            reg: RegularizerConfig::default(),
            probe: ProbeConfig {
                every_epochs: 1,
                every_steps: 0,
                batch: 128,
                trf_examples: 512,
                trf_labels_per_example: 1,
                hutchinson_m: 30,
                hvp_step: 1e-4,
                tr_h: true,
                tr_f_minibatch: true,
                empirical_fisher: false,
            },
            run: RunConfig { epsilon: 0.5, seed: 0, out: PathBuf::from("runs/out"), eval_every: 1 },
        }
    }
}

fn parse_usize(v: &str, key: &str) -> Result<usize> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: bad integer {v:?}")))
}

fn parse_u64(v: &str, key: &str) -> Result<u64> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: bad integer {v:?}")))
}

fn parse_f64(v: &str, key: &str) -> Result<f64> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: bad number {v:?}")))
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: bad boolean {v:?}"))),
    }
}

fn parse_usize_list(v: &str, key: &str) -> Result<Vec<usize>> {
    let t = v.trim();
    if t.is_empty() {
        return Ok(Vec::new());
    }
    t.split(',').map(|s| parse_usize(s, key)).collect()
}

impl ExperimentConfig {
    /// Parses a whole config file. Lines are `key = value`; blank lines and
    /// lines starting with '#' are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1)));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.kind" => match value {
                "linear" | "mlp" | "smallconv" => self.model_kind = value.into(),
                _ => return Err(Error::Config(format!("model.kind: unknown kind {value:?}"))),
            },
            "model.hidden" => self.hidden = parse_usize_list(value, key)?,
            "model.channels" => {
                let v = parse_usize_list(value, key)?;
                if v.len() != 2 {
                    return Err(Error::Config("model.channels needs two values".into()));
                }
                self.channels = (v[0], v[1]);
            }
            "model.activation" => {
                self.activation = match value {
                    "relu" => Activation::Relu,
                    "tanh" => Activation::Tanh,
                    _ => return Err(Error::Config(format!("model.activation: unknown {value:?}"))),
                }
            }
            "model.input_shape" => {
                self.input_shape = parse_usize_list(value, key)?;
                if self.input_shape.is_empty() {
                    return Err(Error::Config("model.input_shape must be non-empty".into()));
                }
            }
            "model.classes" => self.classes = parse_usize(value, key)?,

            "data.source" => {
                self.data.source = match value {
                    "gaussians" => DataSource::Gaussians { classes: 2, per_class: 500, dim: 2, separation: 2.0 },
                    "spirals" => DataSource::Spirals { classes: 2, per_class: 500, sigma: 0.2 },
                    "idx" => DataSource::Idx { images: PathBuf::new(), labels: PathBuf::new() },
                    "flds" => DataSource::Flds { path: PathBuf::new() },
                    _ => return Err(Error::Config(format!("data.source: unknown {value:?}"))),
                }
            }
            "data.classes" => {
                let c = parse_usize(value, key)?;
                match &mut self.data.source {
                    DataSource::Gaussians { classes, .. } | DataSource::Spirals { classes, .. } => *classes = c,
                    _ => return Err(Error::Config("data.classes only applies to generators".into())),
                }
            }
            "data.per_class" => {
                let n = parse_usize(value, key)?;
                match &mut self.data.source {
                    DataSource::Gaussians { per_class, .. } | DataSource::Spirals { per_class, .. } => {
                        *per_class = n
                    }
                    _ => return Err(Error::Config("data.per_class only applies to generators".into())),
                }
            }
            "data.dim" => match &mut self.data.source {
                DataSource::Gaussians { dim, .. } => *dim = parse_usize(value, key)?,
                _ => return Err(Error::Config("data.dim only applies to gaussians".into())),
            },
            "data.separation" => match &mut self.data.source {
                DataSource::Gaussians { separation, .. } => *separation = parse_f64(value, key)?,
                _ => return Err(Error::Config("data.separation only applies to gaussians".into())),
            },
            "data.noise_sigma" => match &mut self.data.source {
                DataSource::Spirals { sigma, .. } => *sigma = parse_f64(value, key)?,
                _ => return Err(Error::Config("data.noise_sigma only applies to spirals".into())),
            },
            "data.idx_images" => match &mut self.data.source {
                DataSource::Idx { images, .. } => *images = PathBuf::from(value),
                _ => return Err(Error::Config("data.idx_images only applies to idx source".into())),
            },
            "data.idx_labels" => match &mut self.data.source {
                DataSource::Idx { labels, .. } => *labels = PathBuf::from(value),
                _ => return Err(Error::Config("data.idx_labels only applies to idx source".into())),
            },
            "data.flds_path" => match &mut self.data.source {
                DataSource::Flds { path } => *path = PathBuf::from(value),
                _ => return Err(Error::Config("data.flds_path only applies to flds source".into())),
            },
            "data.split" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|s| parse_f64(s, key))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::Config("data.split needs three fractions".into()));
                }
                self.data.split = (parts[0], parts[1], parts[2]);
            }
            "data.split_seed" => self.data.split_seed = parse_u64(value, key)?,
            "data.gen_seed" => self.data.gen_seed = parse_u64(value, key)?,
            "data.noise_fraction" => self.data.noise_fraction = parse_f64(value, key)?,

            "optim.lr" => self.optim.lr = parse_f64(value, key)?,
            "optim.momentum" => self.optim.momentum = parse_f64(value, key)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_f64(value, key)?,
            "optim.milestones" => self.optim.milestones = parse_usize_list(value, key)?,
            "optim.gamma" => self.optim.gamma = parse_f64(value, key)?,
            "optim.batch_size" => self.optim.batch_size = parse_usize(value, key)?,
            "optim.epochs" => self.optim.epochs = parse_usize(value, key)?,

            "reg.kind" => {
                self.reg.kind = match value {
                    "none" => PenaltyKind::None,
                    "fp" => PenaltyKind::Fp,
                    "gp" => PenaltyKind::Gp,
                    "gpr" => PenaltyKind::Gpr,
                    "gpx" => PenaltyKind::Gpx,
                    "mixup" => PenaltyKind::Mixup,
                    _ => return Err(Error::Config(format!("reg.kind: unknown {value:?}"))),
                }
            }
            "reg.alpha" => self.reg.alpha = parse_f64(value, key)?,
            "reg.start_epoch" => self.reg.start_epoch = parse_usize(value, key)?,
            "reg.refresh_every" => self.reg.refresh_every = parse_usize(value, key)?,
            "reg.mixup_beta" => self.reg.mixup_beta = parse_f64(value, key)?,
            "reg.exact_single_example" => self.reg.exact_single_example = parse_bool(value, key)?,

            "probe.every_epochs" => self.probe.every_epochs = parse_usize(value, key)?,
            "probe.every_steps" => self.probe.every_steps = parse_usize(value, key)?,
            "probe.batch" => self.probe.batch = parse_usize(value, key)?,
            "probe.trf_examples" => self.probe.trf_examples = parse_usize(value, key)?,
            "probe.trf_labels_per_example" => {
                self.probe.trf_labels_per_example = parse_usize(value, key)?
            }
            "probe.hutchinson_m" => self.probe.hutchinson_m = parse_usize(value, key)?,
            "probe.hvp_step" => self.probe.hvp_step = parse_f64(value, key)?,
            "probe.tr_h" => self.probe.tr_h = parse_bool(value, key)?,
            "probe.tr_f_minibatch" => self.probe.tr_f_minibatch = parse_bool(value, key)?,
            "probe.empirical_fisher" => self.probe.empirical_fisher = parse_bool(value, key)?,

            "run.epsilon" => self.run.epsilon = parse_f64(value, key)?,
            "run.seed" => self.run.seed = parse_u64(value, key)?,
            "run.out" => self.run.out = PathBuf::from(value),
            "run.eval_every" => self.run.eval_every = parse_usize(value, key)?,

            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec()?.validate()?;
        self.reg.validate()?;
        self.optim.schedule().validate()?;
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return Err(Error::Config("optim.momentum must be in [0,1)".into()));
        }
        if self.optim.batch_size == 0 || self.optim.epochs == 0 {
            return Err(Error::Config("optim.batch_size and optim.epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.data.noise_fraction) {
            return Err(Error::Config("data.noise_fraction must be in [0,1]".into()));
        }
        if self.probe.hvp_step <= 0.0 {
            return Err(Error::Config("probe.hvp_step must be positive".into()));
        }
        if self.probe.trf_examples == 0 || self.probe.trf_labels_per_example == 0 {
            return Err(Error::Config("probe sample counts must be positive".into()));
        }
        if self.probe.batch == 0 {
            return Err(Error::Config("probe.batch must be positive".into()));
        }
        if self.run.eval_every == 0 {
            return Err(Error::Config("run.eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let kind = match self.model_kind.as_str() {
            "linear" => ModelKind::Linear,
            "mlp" => ModelKind::Mlp { hidden: self.hidden.clone() },
            "smallconv" => ModelKind::SmallConv { c1: self.channels.0, c2: self.channels.1 },
            other => return Err(Error::Config(format!("unknown model kind {other:?}"))),
        };
        Ok(ModelSpec {
            kind,
            activation: self.activation,
            input_shape: self.input_shape.clone(),
            classes: self.classes,
        })
    }

    /// The config as `key = value` lines (parse/render round-trips).
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model.kind = {}", self.model_kind);
        let _ = writeln!(s, "model.hidden = {}", join(&self.hidden));
        let _ = writeln!(s, "model.channels = {},{}", self.channels.0, self.channels.1);
        let _ = writeln!(
            s,
            "model.activation = {}",
            match self.activation {
                Activation::Relu => "relu",
                Activation::Tanh => "tanh",
            }
        );
        let _ = writeln!(s, "model.input_shape = {}", join(&self.input_shape));
        let _ = writeln!(s, "model.classes = {}", self.classes);
        match &self.data.source {
            DataSource::Gaussians { classes, per_class, dim, separation } => {
                let _ = writeln!(s, "data.source = gaussians");
                let _ = writeln!(s, "data.classes = {classes}");
                let _ = writeln!(s, "data.per_class = {per_class}");
                let _ = writeln!(s, "data.dim = {dim}");
                let _ = writeln!(s, "data.separation = {separation}");
            }
            DataSource::Spirals { classes, per_class, sigma } => {
                let _ = writeln!(s, "data.source = spirals");
                let _ = writeln!(s, "data.classes = {classes}");
                let _ = writeln!(s, "data.per_class = {per_class}");
                let _ = writeln!(s, "data.noise_sigma = {sigma}");
            }
            DataSource::Idx { images, labels } => {
                let _ = writeln!(s, "data.source = idx");
                let _ = writeln!(s, "data.idx_images = {}", images.display());
                let _ = writeln!(s, "data.idx_labels = {}", labels.display());
            }
            DataSource::Flds { path } => {
                let _ = writeln!(s, "data.source = flds");
                let _ = writeln!(s, "data.flds_path = {}", path.display());
            }
        }
        let _ = writeln!(s, "data.split = {},{},{}", self.data.split.0, self.data.split.1, self.data.split.2);
        let _ = writeln!(s, "data.split_seed = {}", self.data.split_seed);
        let _ = writeln!(s, "data.gen_seed = {}", self.data.gen_seed);
        let _ = writeln!(s, "data.noise_fraction = {}", self.data.noise_fraction);
        let _ = writeln!(s, "optim.lr = {}", self.optim.lr);
        let _ = writeln!(s, "optim.momentum = {}", self.optim.momentum);
        let _ = writeln!(s, "optim.weight_decay = {}", self.optim.weight_decay);
        let _ = writeln!(s, "optim.milestones = {}", join(&self.optim.milestones));
        let _ = writeln!(s, "optim.gamma = {}", self.optim.gamma);
        let _ = writeln!(s, "optim.batch_size = {}", self.optim.batch_size);
        let _ = writeln!(s, "optim.epochs = {}", self.optim.epochs);
        let _ = writeln!(s, "reg.kind = {}", self.reg.kind.name());
        let _ = writeln!(s, "reg.alpha = {}", self.reg.alpha);
        let _ = writeln!(s, "reg.start_epoch = {}", self.reg.start_epoch);
        let _ = writeln!(s, "reg.refresh_every = {}", self.reg.refresh_every);
        let _ = writeln!(s, "reg.mixup_beta = {}", self.reg.mixup_beta);
        let _ = writeln!(s, "reg.exact_single_example = {}", self.reg.exact_single_example);
        let _ = writeln!(s, "probe.every_epochs = {}", self.probe.every_epochs);
        let _ = writeln!(s, "probe.every_steps = {}", self.probe.every_steps);
        let _ = writeln!(s, "probe.batch = {}", self.probe.batch);
        let _ = writeln!(s, "probe.trf_examples = {}", self.probe.trf_examples);
        let _ = writeln!(s, "probe.trf_labels_per_example = {}", self.probe.trf_labels_per_example);
        let _ = writeln!(s, "probe.hutchinson_m = {}", self.probe.hutchinson_m);
        let _ = writeln!(s, "probe.hvp_step = {}", self.probe.hvp_step);
        let _ = writeln!(s, "probe.tr_h = {}", self.probe.tr_h);
        let _ = writeln!(s, "probe.tr_f_minibatch = {}", self.probe.tr_f_minibatch);
        let _ = writeln!(s, "probe.empirical_fisher = {}", self.probe.empirical_fisher);
        let _ = writeln!(s, "run.epsilon = {}", self.run.epsilon);
        let _ = writeln!(s, "run.seed = {}", self.run.seed);
        let _ = writeln!(s, "run.out = {}", self.run.out.display());
        let _ = writeln!(s, "run.eval_every = {}", self.run.eval_every);
        s
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_render_roundtrip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("optim.lr", "0.0316").unwrap();
        cfg.set("reg.kind", "fp").unwrap();
        cfg.set("reg.alpha", "0.01").unwrap();
        cfg.set("data.noise_fraction", "0.25").unwrap();
        cfg.set("optim.milestones", "80,150,200").unwrap();
        let text = cfg.render();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::parse("model.depth = 3\n").is_err());
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.set("probe.unknown", "1").is_err());
    }

    #[test]
    fn comments_and_blanks_skipped() {
        let cfg = ExperimentConfig::parse("# a comment\n\noptim.lr = 0.05\n").unwrap();
        assert_eq!(cfg.optim.lr, 0.05);
    }

    #[test]
    fn paper_values_accepted_verbatim() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("optim.lr", "0.0316").unwrap();
        assert_eq!(cfg.optim.lr, 0.0316);
        cfg.set("optim.lr", "0.001").unwrap();
        cfg.set("run.epsilon", "1.2").unwrap();
        cfg.set("run.epsilon", "3.5").unwrap();
        cfg.set("probe.trf_examples", "5000").unwrap();
        cfg.set("probe.hutchinson_m", "30").unwrap();
        cfg.set("reg.refresh_every", "10").unwrap();
        for beta in ["0.2", "0.4", "0.8", "1.6", "3.2", "6.4"] {
            cfg.set("reg.mixup_beta", beta).unwrap();
        }
        for eps in ["1", "2", "4", "8", "16", "32", "64", "128"] {
            cfg.set("reg.start_epoch", eps).unwrap();
        }
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("optim.momentum", "1.5").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.set("model.kind", "smallconv").unwrap();
        // input shape still (2,): not a 3-D image shape
        assert!(cfg.validate().is_err());
        cfg.set("model.input_shape", "1,8,8").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn model_spec_construction() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("model.kind", "mlp").unwrap();
        cfg.set("model.hidden", "64,64").unwrap();
        cfg.set("model.input_shape", "2").unwrap();
        cfg.set("model.classes", "2").unwrap();
        let spec = cfg.model_spec().unwrap();
        assert_eq!(spec.param_count(), 2 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2);
    }
}
