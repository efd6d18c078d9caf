//! Command-line front end: train, infer, eval and selftest.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Parser;
use rayon::prelude::*;

use crate::config::{Mode, RunConfig};
use crate::datagen;
use crate::metrics;
use crate::model::Dcfm;
use crate::pnm;
use crate::selftest;
use crate::tensorlab::Tensor;
use crate::train::{self, DataSource, LogRow, TrainConfig};
use crate::{checkpoint, DcfmError, Result};

/// Flags override values from `--config`; both override the defaults.
#[derive(Parser, Debug, Default)]
#[command(name = "dcfm", version, about = "Co-salient object detection with democratic prototypes")]
pub struct Cli {
    /// train | infer | eval | selftest
    #[arg(long)]
    pub mode: Option<String>,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub groups_per_epoch: Option<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr_extractor: Option<f64>,
    #[arg(long)]
    pub lr_other: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train on freshly generated synthetic groups.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Cli {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).map_err(|e| match e {
                DcfmError::Io { path, source } => DcfmError::Config(format!("{}: {source}", path.display())),
                other => other,
            })?,
            None => RunConfig::default(),
        };
        let mut put = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(k, &v));
        put("mode", self.mode.clone())?;
        put("data_root", self.data_root.as_ref().map(|p| p.display().to_string()))?;
        put("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()))?;
        put("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string()))?;
        put("epochs", self.epochs.map(|v| v.to_string()))?;
        put("groups_per_epoch", self.groups_per_epoch.map(|v| v.to_string()))?;
        put("group_size", self.group_size.map(|v| v.to_string()))?;
        put("image_size", self.image_size.map(|v| v.to_string()))?;
        put("alpha", self.alpha.map(|v| v.to_string()))?;
        put("lambda", self.lambda.map(|v| v.to_string()))?;
        put("lr_extractor", self.lr_extractor.map(|v| v.to_string()))?;
        put("lr_other", self.lr_other.map(|v| v.to_string()))?;
        put("weight_decay", self.weight_decay.map(|v| v.to_string()))?;
        put("seed", self.seed.map(|v| v.to_string()))?;
        put("checkpoint_every", self.checkpoint_every.map(|v| v.to_string()))?;
        put("synthetic", self.synthetic.then(|| "true".to_string()))?;
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| DcfmError::Config(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match cli.resolve().and_then(|cfg| dispatch(&cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("dcfm: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cfg: &RunConfig) -> Result<()> {
    match cfg.mode {
        Mode::Train => train_command(cfg).map(|_| ()),
        Mode::Infer => infer_command(cfg).map(|_| ()),
        Mode::Eval => eval_command(cfg).map(|_| ()),
        Mode::Selftest => selftest_command(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DcfmError::io(dir, e))
}

fn require_root(cfg: &RunConfig) -> Result<&Path> {
    let root = cfg
        .data_root
        .as_deref()
        .ok_or_else(|| DcfmError::Config(format!("{} needs --data-root", cfg.mode)))?;
    if !root.is_dir() {
        return Err(DcfmError::Config(format!("data root {} is not a directory", root.display())));
    }
    Ok(root)
}

fn save_checkpoint(path: &Path, model: &Dcfm) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    checkpoint::save(path, &model.store)
}

/// Train from scratch, writing `<out>/config.txt`, `<out>/train_log.csv` and
/// the checkpoint.
pub fn train_command(cfg: &RunConfig) -> Result<Vec<LogRow>> {
    let source = if cfg.synthetic {
        DataSource::Synthetic { gen: cfg.gen_config(), groups_per_epoch: cfg.groups_per_epoch }
    } else {
        let root = require_root(cfg)?;
        let groups = datagen::list_groups(root)?;
        if groups.is_empty() {
            return Err(DcfmError::Config(format!("no group directories under {}", root.display())));
        }
        DataSource::Directory { groups, group_size: cfg.group_size, image_size: cfg.image_size }
    };
    create_dir(&cfg.out_dir)?;
    let echo = cfg.echo();
    print!("{echo}");
    let echo_path = cfg.out_dir.join("config.txt");
    std::fs::write(&echo_path, &echo).map_err(|e| DcfmError::io(&echo_path, e))?;

    let log_path = cfg.out_dir.join("train_log.csv");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| DcfmError::io(&log_path, e))?);
    writeln!(log, "{}", LogRow::CSV_HEADER).map_err(|e| DcfmError::io(&log_path, e))?;

    let mut model = Dcfm::new(cfg.model_config(), cfg.seed)?;
    let tcfg = TrainConfig { epochs: cfg.epochs, lambda: cfg.lambda, adam: cfg.adam_config(), seed: cfg.seed };
    let rows = train::train(&mut model, &source, &tcfg, |row, model| {
        writeln!(log, "{}", row.to_csv())
            .and_then(|_| log.flush())
            .map_err(|e| DcfmError::io(&log_path, e))?;
        if cfg.checkpoint_every > 0 && (row.episode + 1) % cfg.checkpoint_every == 0 {
            save_checkpoint(&cfg.checkpoint, model)?;
        }
        Ok(())
    })?;
    save_checkpoint(&cfg.checkpoint, &model)?;
    if let Some(last) = rows.last() {
        println!("trained {} episodes; last loss {:.4} (iou {:.4}, sc {:.4})", rows.len(), last.total, last.iou, last.sc);
    }
    println!("checkpoint: {}", cfg.checkpoint.display());
    Ok(rows)
}

fn load_model(cfg: &RunConfig) -> Result<Dcfm> {
    if !cfg.checkpoint.is_file() {
        return Err(DcfmError::Checkpoint(format!("{} does not exist", cfg.checkpoint.display())));
    }
    let mut model = Dcfm::new(cfg.model_config(), cfg.seed)?;
    checkpoint::load(&cfg.checkpoint, &mut model.store)?;
    Ok(model)
}

/// Predict every group under the data root; writes
/// `<out>/<group>/<stem>_pred.pgm` at each input's own size. Returns the
/// written paths.
pub fn infer_command(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let root = require_root(cfg)?;
    let model = load_model(cfg)?;
    let size = cfg.image_size;
    let mut written = Vec::new();
    for dir in datagen::list_groups(root)? {
        let group = datagen::load_group(&dir)?;
        if group.images.is_empty() {
            continue;
        }
        let batch: Vec<Tensor> = group.images.iter().map(|img| datagen::resize(img, size, size)).collect();
        let pred = model.predict(&Tensor::stack(&batch)?)?;
        let out = cfg.out_dir.join(&group.group_id);
        create_dir(&out)?;
        for (i, (stem, img)) in group.stems.iter().zip(&group.images).enumerate() {
            let (h, w) = (img.dim(1), img.dim(2));
            let map = datagen::resize(&pred.index_first(i), h, w);
            let path = out.join(format!("{stem}_pred.pgm"));
            pnm::write_pgm(&path, &map)?;
            written.push(path);
        }
        println!("{}: {} predictions", group.group_id, group.stems.len());
    }
    Ok(written)
}

/// One evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub image: String,
    pub mae: f64,
    /// `None` when the ground truth has no positive pixel.
    pub fmax: Option<f64>,
}

/// Mean scores over the evaluated images.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    pub mae: f64,
    pub fmax: f64,
}

fn gt_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| DcfmError::io(dir, e))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter_map(|name| name.strip_suffix("_gt.pgm").map(str::to_string))
        .collect();
    stems.sort();
    Ok(stems)
}

/// Worker count from `DCFM_THREADS`; `None` leaves rayon's default.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("DCFM_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| DcfmError::Config(format!("DCFM_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

/// Compare `<out>/<group>/<stem>_pred.pgm` against `<root>/<group>/<stem>_gt.pgm`
/// and write `<out>/metrics.csv`.
pub fn eval_command(cfg: &RunConfig) -> Result<EvalReport> {
    let root = require_root(cfg)?;
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for dir in datagen::list_groups(root)? {
        let gid = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for stem in gt_stems(&dir)? {
            let pred = cfg.out_dir.join(&gid).join(format!("{stem}_pred.pgm"));
            if pred.is_file() {
                pairs.push((format!("{gid}/{stem}"), dir.join(format!("{stem}_gt.pgm")), pred));
            } else {
                missing.push(pred.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(DcfmError::MissingPairs(missing));
    }
    if pairs.is_empty() {
        return Err(DcfmError::Config(format!("no ground-truth masks under {}", root.display())));
    }

    let score = |(image, gt_path, pred_path): &(String, PathBuf, PathBuf)| -> Result<ImageScore> {
        let gt = pnm::read(gt_path)?;
        let pred = pnm::read(pred_path)?;
        if gt.shape() != pred.shape() {
            return Err(DcfmError::format(
                pred_path,
                format!("prediction {:?} does not match ground truth {:?}", pred.shape(), gt.shape()),
            ));
        }
        let mae = metrics::mae(pred.data(), gt.data())?;
        let fmax = match metrics::f_beta_max(pred.data(), gt.data(), metrics::DEFAULT_BETA_SQ) {
            Ok(f) => Some(f),
            Err(DcfmError::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(ImageScore { image: image.clone(), mae, fmax })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap()?.unwrap_or(0))
        .build()
        .map_err(|e| DcfmError::Config(format!("thread pool: {e}")))?;
    // collect() keeps input order, so the report does not depend on scheduling
    let images: Vec<ImageScore> = pool.install(|| pairs.par_iter().map(score).collect::<Result<_>>())?;

    let mae = images.iter().map(|s| s.mae).sum::<f64>() / images.len() as f64;
    let defined: Vec<f64> = images.iter().filter_map(|s| s.fmax).collect();
    let fmax = if defined.is_empty() { f64::NAN } else { defined.iter().sum::<f64>() / defined.len() as f64 };

    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("metrics.csv");
    let mut csv = String::from("image,mae,fmax\n");
    for s in &images {
        let f = s.fmax.map_or("nan".to_string(), |f| f.to_string());
        csv.push_str(&format!("{},{},{f}\n", s.image, s.mae));
    }
    csv.push_str(&format!("mean,{mae},{fmax}\n"));
    std::fs::write(&path, csv).map_err(|e| DcfmError::io(&path, e))?;
    println!("{} images: mae {mae:.4}, fmax {fmax:.4}", images.len());
    Ok(EvalReport { images, mae, fmax })
}

pub fn selftest_command() -> Result<()> {
    let results = selftest::run_all();
    for r in &results {
        println!("{r}");
    }
    match results.iter().filter(|r| !r.passed).count() {
        0 => Ok(()),
        failed => Err(DcfmError::SelfTest(failed)),
    }
}
