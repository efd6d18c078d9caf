//! Episodic training with Adam and held-out evaluation.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{self, GenConfig, GroupSample, ShapeClass};
use crate::losses::{soft_iou, LossReport};
use crate::metrics;
use crate::model::Dcfm;
use crate::params::{ParamGroup, ParamStore};
use crate::tensorlab::{Tape, Tensor};
use crate::{DcfmError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr_extractor: f64,
    pub lr_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    /// Rescale the raw gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr_extractor: 1e-5, lr_head: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4, clip_norm: None }
    }
}

/// Adam with per-group learning rates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// `grads` in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        let shrink = match c.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        for ((p, g), (m, v)) in store.params_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            let lr = match p.group {
                ParamGroup::Extractor => c.lr_extractor,
                ParamGroup::Head => c.lr_head,
            };
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let gi = shrink * g.data()[i] + c.weight_decay * values[i];
                let mi = &mut m.data_mut()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}

/// Where training groups come from.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// Fresh synthetic groups each epoch, class-balanced.
    Synthetic { gen: GenConfig, groups_per_epoch: usize },
    /// Group directories in the dataset layout; up to `group_size` images are
    /// drawn at random from a group per episode and resized to `image_size`.
    Directory { groups: Vec<PathBuf>, group_size: usize, image_size: usize },
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lambda: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub episode: usize,
    pub epoch: usize,
    pub group: String,
    pub iou: f64,
    pub sc: f64,
    pub cos_c: f64,
    pub cos_b: f64,
    pub total: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "episode,epoch,group,l_iou,l_sc,cos_c,cos_b,l_tot";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.episode, self.epoch, self.group, self.iou, self.sc, self.cos_c, self.cos_b, self.total
        )
    }
}

/// One batch: `[N,3,H,W]` images and `[N,1,H,W]` masks.
#[derive(Clone, Debug)]
pub struct Batch {
    pub id: String,
    pub images: Tensor,
    pub masks: Tensor,
}

impl From<&GroupSample> for Batch {
    fn from(g: &GroupSample) -> Self {
        Self { id: g.group_id.clone(), images: g.image_batch(), masks: g.mask_batch() }
    }
}

/// Forward, backward and one optimizer update on a batch.
pub fn train_step(model: &mut Dcfm, adam: &mut Adam, batch: &Batch, lambda: f64) -> Result<(LossReport, Option<(f64, f64)>)> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let x = tape.constant(batch.images.clone());
    let obj = model.objective(&mut tape, &bound, x, &batch.masks, lambda, None)?;
    let report = obj.report(&tape);
    if !report.total.is_finite() {
        return Err(DcfmError::NonFinite(format!("loss on group {}: {report:?}", batch.id)));
    }
    let mut grads = tape.backward(obj.total)?;
    let grads: Vec<Tensor> = bound
        .vars()
        .iter()
        .map(|&v| grads.take(v).expect("every parameter is a trainable leaf"))
        .collect();
    if let Some(bad) = grads.iter().zip(model.store.params()).find(|(g, _)| !g.all_finite()) {
        return Err(DcfmError::NonFinite(format!("gradient of {}", bad.1.name)));
    }
    adam.step(&mut model.store, &grads);
    Ok((report, obj.cosines(&tape)))
}

fn load_directory_batch(dir: &std::path::Path, group_size: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let g = datagen::load_group(dir)?;
    let masks = g
        .masks
        .ok_or_else(|| DcfmError::Config(format!("{}: training needs _gt.pgm masks", dir.display())))?;
    let mut pick: Vec<usize> = (0..g.images.len()).collect();
    pick.shuffle(rng);
    pick.truncate(group_size.max(1));
    pick.sort_unstable();
    let images: Vec<Tensor> = pick.iter().map(|&i| datagen::resize(&g.images[i], size, size)).collect();
    // resampled masks are re-binarized
    let masks: Vec<Tensor> = pick
        .iter()
        .map(|&i| datagen::resize(&masks[i], size, size).map(|v| (v >= 0.5) as u8 as f64))
        .collect();
    Ok(Batch { id: g.group_id, images: Tensor::stack(&images)?, masks: Tensor::stack(&masks)? })
}

enum Episode {
    Synthetic(ShapeClass, u64),
    Directory(PathBuf),
}

/// Run `cfg.epochs` epochs. `on_episode` sees every log row and the updated
/// model (checkpointing, progress output).
pub fn train(
    model: &mut Dcfm,
    source: &DataSource,
    cfg: &TrainConfig,
    mut on_episode: impl FnMut(&LogRow, &Dcfm) -> Result<()>,
) -> Result<Vec<LogRow>> {
    let mut adam = Adam::new(&model.store, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_da7a);
    let mut log = Vec::new();
    let mut episode = 0;
    for epoch in 0..cfg.epochs {
        let episodes: Vec<Episode> = match source {
            DataSource::Synthetic { gen, groups_per_epoch } => {
                datagen::epoch_plan(&gen.classes, *groups_per_epoch, epoch, &mut rng)
                    .into_iter()
                    .map(|(class, seed)| Episode::Synthetic(class, seed))
                    .collect()
            }
            DataSource::Directory { groups, .. } => {
                let mut order = groups.clone();
                order.shuffle(&mut rng);
                order.into_iter().map(Episode::Directory).collect()
            }
        };
        for ep in episodes {
            let batch = match (ep, source) {
                (Episode::Synthetic(class, seed), DataSource::Synthetic { gen, .. }) => {
                    Batch::from(&datagen::generate_group(gen, class, seed)?)
                }
                (Episode::Directory(dir), DataSource::Directory { group_size, image_size, .. }) => {
                    load_directory_batch(&dir, *group_size, *image_size, &mut rng)?
                }
                _ => unreachable!("episodes follow the source kind"),
            };
            let (report, cos) = train_step(model, &mut adam, &batch, cfg.lambda)?;
            let (cos_c, cos_b) = cos.unwrap_or((f64::NAN, f64::NAN));
            let row = LogRow {
                episode,
                epoch,
                group: batch.id,
                iou: report.iou,
                sc: report.sc,
                cos_c,
                cos_b,
                total: report.total,
            };
            on_episode(&row, model)?;
            log.push(row);
            episode += 1;
        }
    }
    Ok(log)
}

/// Mean held-out scores over all images of all groups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub soft_iou: f64,
    pub mae: f64,
    pub f_beta_max: f64,
    pub images: usize,
}

pub fn evaluate(model: &Dcfm, groups: &[GroupSample]) -> Result<EvalSummary> {
    let (mut iou, mut mae, mut fmax, mut count, mut f_count) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for g in groups {
        let pred = model.predict(&g.image_batch())?;
        for (i, mask) in g.masks.iter().enumerate() {
            let p = pred.index_first(i);
            iou += soft_iou(p.data(), mask.data());
            mae += metrics::mae(p.data(), mask.data())?;
            match metrics::f_beta_max(p.data(), mask.data(), metrics::DEFAULT_BETA_SQ) {
                Ok(f) => {
                    fmax += f;
                    f_count += 1;
                }
                Err(DcfmError::UndefinedMetric(_)) => {}
                Err(e) => return Err(e),
            }
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    Ok(EvalSummary { soft_iou: iou / n, mae: mae / n, f_beta_max: fmax / f_count.max(1) as f64, images: count })
}
