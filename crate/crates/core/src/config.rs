//! Run configuration: a flat `key = value` file overlaid by command-line flags.
//!
//! Keys use the flag spelling with `-` or `_` interchangeably (`group-size`
//! and `group_size` are the same key). `#` starts a comment. Every key has a
//! default, so an empty file is a valid run.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datagen::GenConfig;
use crate::dfe::MAX_ALPHA;
use crate::model::{ModelConfig, Variant};
use crate::train::AdamConfig;
use crate::{DcfmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
    Eval,
    Selftest,
}

impl FromStr for Mode {
    type Err = DcfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mode::Train),
            "infer" => Ok(Mode::Infer),
            "eval" => Ok(Mode::Eval),
            "selftest" => Ok(Mode::Selftest),
            _ => Err(DcfmError::Config(format!("unknown mode {s:?} (train|infer|eval|selftest)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Train => "train",
            Mode::Infer => "infer",
            Mode::Eval => "eval",
            Mode::Selftest => "selftest",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    /// Dataset root in the group-directory layout. Training may use
    /// synthetic groups instead.
    pub data_root: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    pub epochs: usize,
    /// Group ids per epoch when training on synthetic data.
    pub groups_per_epoch: usize,
    pub group_size: usize,
    pub image_size: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub lr_extractor: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub synthetic: bool,
    /// Also write the checkpoint every this many episodes (0 = only at the end).
    pub checkpoint_every: usize,
    pub distractors_min: usize,
    pub distractors_max: usize,
    pub dpg: bool,
    pub scl: bool,
    pub dfe: bool,
    pub readjust: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Train,
            data_root: None,
            checkpoint: PathBuf::from("dcfm.ckpt"),
            out_dir: PathBuf::from("out"),
            epochs: 50,
            groups_per_epoch: 4,
            group_size: 8,
            image_size: 64,
            alpha: 3.0,
            lambda: 0.1,
            lr_extractor: 1e-5,
            lr_other: 1e-4,
            weight_decay: 1e-4,
            seed: 0,
            synthetic: false,
            checkpoint_every: 0,
            distractors_min: 0,
            distractors_max: 2,
            dpg: true,
            scl: true,
            dfe: true,
            readjust: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DcfmError::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let k = key.as_str();
        match k {
            "mode" => self.mode = v.parse()?,
            "data_root" => self.data_root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "epochs" => self.epochs = parse(k, v)?,
            "groups_per_epoch" => self.groups_per_epoch = parse(k, v)?,
            "group_size" => self.group_size = parse(k, v)?,
            "image_size" => self.image_size = parse(k, v)?,
            "alpha" => self.alpha = parse(k, v)?,
            "lambda" => self.lambda = parse(k, v)?,
            "lr_extractor" => self.lr_extractor = parse(k, v)?,
            "lr_other" => self.lr_other = parse(k, v)?,
            "weight_decay" => self.weight_decay = parse(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            "synthetic" => self.synthetic = parse(k, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(k, v)?,
            "distractors_min" => self.distractors_min = parse(k, v)?,
            "distractors_max" => self.distractors_max = parse(k, v)?,
            "dpg" => self.dpg = parse(k, v)?,
            "scl" => self.scl = parse(k, v)?,
            "dfe" => self.dfe = parse(k, v)?,
            "readjust" => self.readjust = parse(k, v)?,
            _ => return Err(DcfmError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Overlay `key = value` lines onto `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DcfmError::Config(format!("line {}: expected `key = value`, got {line:?}", lineno + 1)))?;
            self.set(k, v).map_err(|e| match e {
                DcfmError::Config(msg) => DcfmError::Config(format!("line {}: {msg}", lineno + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DcfmError::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= MAX_ALPHA) {
            return Err(DcfmError::Config(format!("alpha must lie in (0, {MAX_ALPHA}], got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0) {
            return Err(DcfmError::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if matches!(self.mode, Mode::Train | Mode::Infer) && self.group_size < 2 {
            return Err(DcfmError::Config(format!("group size must be at least 2, got {}", self.group_size)));
        }
        for (name, lr) in [("lr_extractor", self.lr_extractor), ("lr_other", self.lr_other)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(DcfmError::Config(format!("{name} must be a finite non-negative rate, got {lr}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(DcfmError::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.mode == Mode::Train && self.groups_per_epoch == 0 && self.synthetic {
            return Err(DcfmError::Config("groups_per_epoch must be positive".into()));
        }
        self.gen_config().validate()?;
        self.model_config().encoder.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            alpha: self.alpha,
            variant: Variant { dpg: self.dpg, scl: self.scl, dfe: self.dfe, readjust: self.readjust },
            ..ModelConfig::default()
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            group_size: self.group_size,
            image_size: self.image_size,
            distractors: (self.distractors_min, self.distractors_max),
            ..GenConfig::default()
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr_extractor: self.lr_extractor,
            lr_head: self.lr_other,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    /// Every key with its effective value, in a form `from_text` reads back.
    pub fn echo(&self) -> String {
        let root = self.data_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let rows: [(&str, String); 22] = [
            ("mode", self.mode.to_string()),
            ("data_root", root),
            ("checkpoint", self.checkpoint.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("epochs", self.epochs.to_string()),
            ("groups_per_epoch", self.groups_per_epoch.to_string()),
            ("group_size", self.group_size.to_string()),
            ("image_size", self.image_size.to_string()),
            ("alpha", self.alpha.to_string()),
            ("lambda", self.lambda.to_string()),
            ("lr_extractor", self.lr_extractor.to_string()),
            ("lr_other", self.lr_other.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("synthetic", self.synthetic.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("distractors_min", self.distractors_min.to_string()),
            ("distractors_max", self.distractors_max.to_string()),
            ("dpg", self.dpg.to_string()),
            ("scl", self.scl.to_string()),
            ("dfe", self.dfe.to_string()),
            ("readjust", self.readjust.to_string()),
        ];
        rows.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_valid() {
        let cfg = RunConfig::from_text("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        RunConfig { synthetic: true, ..cfg }.validate().unwrap();
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("group-size", "4").unwrap();
        cfg.set("data_root", "/tmp/x").unwrap();
        cfg.set("alpha", "2.5").unwrap();
        assert_eq!(RunConfig::from_text(&cfg.echo()).unwrap(), cfg);
        assert!(cfg.echo().contains("lambda = 0.1\n"));
    }

    #[test]
    fn comments_and_errors() {
        let cfg = RunConfig::from_text("# header\nepochs = 3 # trailing\n\nseed=9\n").unwrap();
        assert_eq!((cfg.epochs, cfg.seed), (3, 9));
        let e = RunConfig::from_text("epochs 3").unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
        assert!(RunConfig::from_text("colour = red").is_err());
        assert!(RunConfig::from_text("epochs = many").is_err());
    }

    #[test]
    fn invariants() {
        let bad = |f: fn(&mut RunConfig)| {
            let mut c = RunConfig::default();
            f(&mut c);
            matches!(c.validate(), Err(DcfmError::Config(_)))
        };
        assert!(bad(|c| c.alpha = 0.0));
        assert!(bad(|c| c.alpha = 4.5));
        assert!(bad(|c| c.lambda = -0.1));
        assert!(bad(|c| c.group_size = 1));
        assert!(!bad(|c| c.alpha = 4.0));
    }
}
