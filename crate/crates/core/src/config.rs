//! Run configuration: every tunable in one flat `key = value` namespace.
//!
//! Values resolve as defaults, then the config file, then `--set` overrides.

use std::path::PathBuf;

use crate::adaptation::{AdaptConfig, PretrainConfig, ScheduleKind, ThresholdSchedule};
use crate::detector::{DetectorConfig, LossConfig};
use crate::error::{Error, Result};
use crate::hsa::HsaConfig;
use crate::model::ModelConfig;
use crate::par::ExecMode;
use crate::slots::AttentionAxis;
use crate::synth::SynthConfig;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SLOTADAPT_OUT";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds swept by `ablate`.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub train_size: usize,
    pub eval_size: usize,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    /// Confidence cut for F1.
    pub confidence: f64,
    /// Adaptation checkpoint interval in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub mode: ExecMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let out_dir = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        Self {
            seed: 1,
            seeds: vec![1, 2, 3, 4, 5],
            out_dir,
            train_size: 512,
            eval_size: 128,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            confidence: 0.5,
            checkpoint_every: 100,
            mode: ExecMode::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config { key: key.into(), reason: format!("cannot parse {value:?}") })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config { key: key.into(), reason: format!("expected true or false, got {value:?}") }),
    }
}

fn axis_name(axis: AttentionAxis) -> &'static str {
    match axis {
        AttentionAxis::Tokens => "tokens",
        AttentionAxis::Slots => "slots",
    }
}

fn mode_name(mode: ExecMode) -> &'static str {
    match mode {
        ExecMode::Sequential => "sequential",
        ExecMode::Parallel => "parallel",
    }
}

/// Every recognized key, in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "seeds",
    "out_dir",
    "train_size",
    "eval_size",
    "classes",
    "min_objects",
    "max_objects",
    "min_extent",
    "max_extent",
    "fog_alpha",
    "fog_level",
    "noise_sigma",
    "hue_jitter",
    "image_size",
    "patch",
    "d",
    "d_q",
    "M",
    "locality",
    "use_hsa",
    "n",
    "depth",
    "iters",
    "attention_axis",
    "learn_slot_init",
    "focal_alpha",
    "focal_gamma",
    "background_alpha",
    "l1_weight",
    "giou_weight",
    "pretrain_steps",
    "pretrain_batch",
    "pretrain_lr",
    "pretrain_clip",
    "lambda_rec",
    "S",
    "batch",
    "lr",
    "clip",
    "gamma",
    "lambda_con",
    "burn_in",
    "tau_con",
    "beta",
    "schedule",
    "tau_min",
    "tau_max",
    "beta_exp",
    "k_sig",
    "tau_fix",
    "confidence",
    "checkpoint_every",
    "exec",
];

impl RunConfig {
    /// Applies one `key = value` assignment without validating cross-field
    /// invariants.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "seeds" => {
                self.seeds = v.split(',').map(|s| parse_num(key, s.trim())).collect::<Result<Vec<u64>>>()?;
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            "train_size" => self.train_size = parse_num(key, v)?,
            "eval_size" => self.eval_size = parse_num(key, v)?,
            "classes" => {
                let c = parse_num(key, v)?;
                self.synth.classes = c;
                self.model.detector.classes = c;
            }
            "min_objects" => self.synth.min_objects = parse_num(key, v)?,
            "max_objects" => self.synth.max_objects = parse_num(key, v)?,
            "min_extent" => self.synth.min_extent = parse_num(key, v)?,
            "max_extent" => self.synth.max_extent = parse_num(key, v)?,
            "fog_alpha" => self.synth.fog_alpha = parse_num(key, v)?,
            "fog_level" => self.synth.fog_level = parse_num(key, v)?,
            "noise_sigma" => self.synth.noise_sigma = parse_num(key, v)?,
            "hue_jitter" => self.synth.hue_jitter = parse_num(key, v)?,
            "image_size" => {
                let s = parse_num(key, v)?;
                self.synth.size = s;
                self.model.detector.image_size = s;
            }
            "patch" => self.model.detector.patch = parse_num(key, v)?,
            "d" => {
                let d = parse_num(key, v)?;
                self.model.detector.dim = d;
                self.model.hsa.dim = d;
            }
            "d_q" => self.model.detector.query_dim = parse_num(key, v)?,
            "M" => self.model.detector.queries = parse_num(key, v)?,
            "locality" => self.model.detector.locality = parse_num(key, v)?,
            "use_hsa" => self.model.use_hsa = parse_bool(key, v)?,
            "n" => self.model.hsa.n = parse_num(key, v)?,
            "depth" => self.model.hsa.depth = parse_num(key, v)?,
            "iters" => self.model.hsa.iters = parse_num(key, v)?,
            "attention_axis" => {
                self.model.hsa.axis = match v {
                    "tokens" => AttentionAxis::Tokens,
                    "slots" => AttentionAxis::Slots,
                    _ => return Err(Error::Config { key: key.into(), reason: format!("expected tokens or slots, got {v:?}") }),
                }
            }
            "learn_slot_init" => self.model.hsa.learn_init = parse_bool(key, v)?,
            "focal_alpha" => self.set_loss(|l| &mut l.alpha, key, v)?,
            "focal_gamma" => self.set_loss(|l| &mut l.gamma, key, v)?,
            "background_alpha" => self.set_loss(|l| &mut l.background_alpha, key, v)?,
            "l1_weight" => self.set_loss(|l| &mut l.l1_weight, key, v)?,
            "giou_weight" => self.set_loss(|l| &mut l.giou_weight, key, v)?,
            "pretrain_steps" => self.pretrain.steps = parse_num(key, v)?,
            "pretrain_batch" => self.pretrain.batch = parse_num(key, v)?,
            "pretrain_lr" => self.pretrain.lr = parse_num(key, v)?,
            "pretrain_clip" => self.pretrain.clip_norm = parse_num(key, v)?,
            "lambda_rec" => {
                let l = parse_num(key, v)?;
                self.pretrain.lambda_rec = l;
                self.adapt.lambda_rec = l;
            }
            "S" => {
                let s = parse_num(key, v)?;
                self.adapt.steps = s;
                self.adapt.schedule.total = s;
            }
            "batch" => self.adapt.batch = parse_num(key, v)?,
            "lr" => self.adapt.lr = parse_num(key, v)?,
            "clip" => self.adapt.clip_norm = parse_num(key, v)?,
            "gamma" => self.adapt.gamma = parse_num(key, v)?,
            "lambda_con" => self.adapt.lambda_con = parse_num(key, v)?,
            "burn_in" => self.adapt.burn_in = parse_num(key, v)?,
            "tau_con" => self.adapt.tau_con = parse_num(key, v)?,
            "beta" => self.adapt.beta = parse_num(key, v)?,
            "schedule" => self.adapt.schedule.kind = ScheduleKind::parse(v)?,
            "tau_min" => self.adapt.schedule.tau_min = parse_num(key, v)?,
            "tau_max" => self.adapt.schedule.tau_max = parse_num(key, v)?,
            "beta_exp" => self.adapt.schedule.beta_exp = parse_num(key, v)?,
            "k_sig" => self.adapt.schedule.k_sig = parse_num(key, v)?,
            "tau_fix" => self.adapt.schedule.tau_fix = parse_num(key, v)?,
            "confidence" => self.confidence = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "exec" => {
                self.mode = match v {
                    "parallel" => ExecMode::Parallel,
                    "sequential" => ExecMode::Sequential,
                    _ => return Err(Error::Config { key: key.into(), reason: format!("expected parallel or sequential, got {v:?}") }),
                }
            }
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn set_loss(&mut self, field: impl Fn(&mut LossConfig) -> &mut f64, key: &str, v: &str) -> Result<()> {
        let x = parse_num(key, v)?;
        *field(&mut self.pretrain.loss) = x;
        *field(&mut self.adapt.loss) = x;
        Ok(())
    }

    /// Current value of `key`, formatted so that `set` reads it back exactly.
    pub fn get(&self, key: &str) -> Result<String> {
        let d: &DetectorConfig = &self.model.detector;
        let h: &HsaConfig = &self.model.hsa;
        let l = &self.adapt.loss;
        let s: &ThresholdSchedule = &self.adapt.schedule;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "seeds" => self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            "out_dir" => self.out_dir.display().to_string(),
            "train_size" => self.train_size.to_string(),
            "eval_size" => self.eval_size.to_string(),
            "classes" => self.synth.classes.to_string(),
            "min_objects" => self.synth.min_objects.to_string(),
            "max_objects" => self.synth.max_objects.to_string(),
            "min_extent" => self.synth.min_extent.to_string(),
            "max_extent" => self.synth.max_extent.to_string(),
            "fog_alpha" => self.synth.fog_alpha.to_string(),
            "fog_level" => self.synth.fog_level.to_string(),
            "noise_sigma" => self.synth.noise_sigma.to_string(),
            "hue_jitter" => self.synth.hue_jitter.to_string(),
            "image_size" => self.synth.size.to_string(),
            "patch" => d.patch.to_string(),
            "d" => d.dim.to_string(),
            "d_q" => d.query_dim.to_string(),
            "M" => d.queries.to_string(),
            "locality" => d.locality.to_string(),
            "use_hsa" => self.model.use_hsa.to_string(),
            "n" => h.n.to_string(),
            "depth" => h.depth.to_string(),
            "iters" => h.iters.to_string(),
            "attention_axis" => axis_name(h.axis).to_string(),
            "learn_slot_init" => h.learn_init.to_string(),
            "focal_alpha" => l.alpha.to_string(),
            "focal_gamma" => l.gamma.to_string(),
            "background_alpha" => l.background_alpha.to_string(),
            "l1_weight" => l.l1_weight.to_string(),
            "giou_weight" => l.giou_weight.to_string(),
            "pretrain_steps" => self.pretrain.steps.to_string(),
            "pretrain_batch" => self.pretrain.batch.to_string(),
            "pretrain_lr" => self.pretrain.lr.to_string(),
            "pretrain_clip" => self.pretrain.clip_norm.to_string(),
            "lambda_rec" => self.adapt.lambda_rec.to_string(),
            "S" => self.adapt.steps.to_string(),
            "batch" => self.adapt.batch.to_string(),
            "lr" => self.adapt.lr.to_string(),
            "clip" => self.adapt.clip_norm.to_string(),
            "gamma" => self.adapt.gamma.to_string(),
            "lambda_con" => self.adapt.lambda_con.to_string(),
            "burn_in" => self.adapt.burn_in.to_string(),
            "tau_con" => self.adapt.tau_con.to_string(),
            "beta" => self.adapt.beta.to_string(),
            "schedule" => s.kind.name().to_string(),
            "tau_min" => s.tau_min.to_string(),
            "tau_max" => s.tau_max.to_string(),
            "beta_exp" => s.beta_exp.to_string(),
            "k_sig" => s.k_sig.to_string(),
            "tau_fix" => s.tau_fix.to_string(),
            "confidence" => self.confidence.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "exec" => mode_name(self.mode).to_string(),
            _ => return Err(Error::UnknownKey(key.to_string())),
        })
    }

    /// Checks every module's preconditions.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::Config { key: key.into(), reason });
        self.synth.validate()?;
        self.model.validate()?;
        self.adapt.validate()?;
        if self.synth.classes != self.model.detector.classes {
            return bad("classes", "dataset and detector class counts differ".into());
        }
        if self.synth.size != self.model.detector.image_size {
            return bad("image_size", "dataset and detector image sizes differ".into());
        }
        if self.adapt.schedule.total != self.adapt.steps {
            return bad("S", "schedule length must equal the adaptation steps".into());
        }
        if !(self.pretrain.lr > 0.0) || self.pretrain.batch == 0 {
            return bad("pretrain_lr", "pretraining lr and batch must be positive".into());
        }
        if self.pretrain.clip_norm < 0.0 || self.adapt.clip_norm < 0.0 {
            return bad("clip", "clip norms must be nonnegative".into());
        }
        if self.pretrain.lambda_rec < 0.0 {
            return bad("lambda_rec", "must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.adapt.beta) {
            return bad("beta", format!("must lie in [0,1), got {}", self.adapt.beta));
        }
        if !(self.adapt.tau_con > 0.0) {
            return bad("tau_con", format!("must be positive, got {}", self.adapt.tau_con));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return bad("confidence", format!("must lie in [0,1], got {}", self.confidence));
        }
        if self.train_size == 0 || self.eval_size == 0 {
            return bad("train_size", "dataset sizes must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required".into());
        }
        let l = &self.adapt.loss;
        if l.alpha < 0.0 || l.background_alpha < 0.0 || l.gamma < 0.0 || l.l1_weight < 0.0 || l.giou_weight < 0.0 {
            return bad("focal_alpha", "loss weights must be nonnegative".into());
        }
        Ok(())
    }

    /// Parses a config file and applies `key=value` overrides on top, then
    /// validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::ConfigSyntax { line: idx + 1, reason: format!("expected `key = value`, got {line:?}") })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::ConfigSyntax { line: idx + 1, reason: "empty key".into() });
            }
            cfg.set(key, value)?;
        }
        for o in overrides {
            let (key, value) =
                o.split_once('=').ok_or_else(|| Error::ConfigSyntax { line: 0, reason: format!("override {o:?} is not key=value") })?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key in canonical order; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key).expect("every listed key is readable"));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.hsa.n, 5);
        assert_eq!(cfg.model.hsa.depth, 2);
        assert_eq!(cfg.adapt.lambda_rec, 1.0);
        assert_eq!(cfg.adapt.lambda_con, 0.05);
        assert_eq!(cfg.adapt.gamma, 0.9993);
        assert_eq!(cfg.adapt.schedule.kind, ScheduleKind::Cosine);
        assert_eq!((cfg.adapt.schedule.tau_max, cfg.adapt.schedule.tau_min), (0.55, 0.40));
    }

    #[test]
    fn override_beats_file() {
        let cfg = RunConfig::parse("lr = 0.2 # comment\n\n# whole line\n", &["lr=0.3".into()]).unwrap();
        assert_eq!(cfg.adapt.lr, 0.3);
        let cfg = RunConfig::parse("lr = 0.2\n", &[]).unwrap();
        assert_eq!(cfg.adapt.lr, 0.2);
    }

    #[test]
    fn indivisible_slot_count_is_rejected() {
        match RunConfig::parse("n = 7\n", &[]) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "queries"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_and_malformed_lines() {
        assert!(matches!(RunConfig::parse("nope = 1\n", &[]), Err(Error::UnknownKey(k)) if k == "nope"));
        assert!(matches!(RunConfig::parse("lr 0.1\n", &[]), Err(Error::ConfigSyntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("lr = fast\n", &[]), Err(Error::Config { .. })));
    }

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig::parse("lr = 0.123456789\nseeds = 4,5\nschedule = sigmoid\nS = 40\n", &[]).unwrap();
        let back = RunConfig::parse(&cfg.to_text(), &[]).unwrap();
        assert_eq!(back, cfg);
    }
}
