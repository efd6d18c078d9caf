//! The assembled network: encoder, prototype generation, fusion,
//! enhancement and decoder, plus the training objective.

use crate::backbone::{DecoderConfig, Decoder, Encoder, EncoderConfig};
use crate::dfe::{self, Dfe, DfeOutput};
use crate::dpg::{Dpg, DpgOutput, SeedIndex};
use crate::losses::{self, LossReport};
use crate::params::{Bound, ParamStore};
use crate::scl::{self, MaskedPrototypePair, SclLoss};
use crate::tensorlab::{Tape, Tensor, Var};
use crate::{DcfmError, Result};

/// Which parts of the pipeline are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    /// Prototype generation and fusion; when off the encoder features go
    /// straight to enhancement (and the contrastive term is skipped).
    pub dpg: bool,
    /// Self-contrastive term during training.
    pub scl: bool,
    /// Attention enhancement; when off the fused features go to the decoder.
    pub dfe: bool,
    /// Rank-based readjustment inside the attention.
    pub readjust: bool,
}

impl Variant {
    pub const FULL: Variant = Variant { dpg: true, scl: true, dfe: true, readjust: true };
}

impl Default for Variant {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub alpha: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            alpha: 3.0,
            variant: Variant::FULL,
        }
    }
}

/// Discrete choices made during a forward pass: argmax seeds of the three
/// prototype passes and the attention readjustment weights. Feeding them back
/// in makes the pass a smooth function of its real-valued inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Structure {
    pub seeds: Option<Vec<SeedIndex>>,
    pub object_seeds: Option<Vec<SeedIndex>>,
    pub background_seeds: Option<Vec<SeedIndex>>,
    pub reweight: Option<Tensor>,
}

/// Handles from one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub pred: Var,
    pub f_ext: Var,
    pub fused: Var,
    pub dpg: Option<DpgOutput>,
    pub dfe: Option<DfeOutput>,
}

/// Handles from one objective evaluation.
#[derive(Clone, Debug)]
pub struct Objective {
    pub forward: Forward,
    pub iou: Var,
    pub scl: Option<(SclLoss, MaskedPrototypePair)>,
    pub total: Var,
    pub lambda: f64,
}

impl Objective {
    pub fn report(&self, tape: &Tape) -> LossReport {
        LossReport {
            iou: tape.value(self.iou).item(),
            sc: self.scl.as_ref().map_or(0.0, |s| tape.value(s.0.loss).item()),
            total: tape.value(self.total).item(),
            lambda: self.lambda,
        }
    }

    pub fn cosines(&self, tape: &Tape) -> Option<(f64, f64)> {
        self.scl.as_ref().map(|(s, _)| (tape.value(s.cos_c).item(), tape.value(s.cos_b).item()))
    }

    /// The discrete choices this evaluation made.
    pub fn structure(&self) -> Structure {
        Structure {
            seeds: self.forward.dpg.as_ref().map(|d| d.seeds.indices.clone()),
            object_seeds: self.scl.as_ref().map(|s| s.1.object_pass.seeds.indices.clone()),
            background_seeds: self.scl.as_ref().map(|s| s.1.background_pass.seeds.indices.clone()),
            reweight: self.forward.dfe.as_ref().map(|d| d.reweight.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dcfm {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub dpg: Dpg,
    pub dfe: Dfe,
    pub decoder: Decoder,
}

impl Dcfm {
    /// Every module's parameters are created regardless of the variant so
    /// checkpoints share one layout.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        dfe::validate_alpha(cfg.alpha)?;
        let mut store = ParamStore::new(seed);
        let encoder = Encoder::new(&mut store, &cfg.encoder)?;
        let channels = cfg.encoder.feature_channels();
        let dpg = Dpg::new(&mut store, channels);
        let dfe = Dfe::new(&mut store, channels, cfg.alpha, cfg.variant.readjust)?;
        let decoder = Decoder::new(&mut store, &cfg.encoder, &cfg.decoder)?;
        Ok(Self { cfg, store, encoder, dpg, dfe, decoder })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, images: Var, frozen: Option<&Structure>) -> Result<Forward> {
        let encoded = self.encoder.encode(tape, bound, images)?;
        let f_ext = encoded.features;
        let (fused, dpg) = if self.cfg.variant.dpg {
            let out = self.dpg.forward(tape, bound, f_ext, frozen.and_then(|s| s.seeds.as_deref()))?;
            let fused = dfe::fuse(tape, out.residual, &out.maps, out.proto)?;
            (fused, Some(out))
        } else {
            (f_ext, None)
        };
        let (enhanced, dfe) = if self.cfg.variant.dfe {
            let out = self.dfe.forward(tape, bound, fused, frozen.and_then(|s| s.reweight.as_ref()))?;
            (out.enhanced, Some(out))
        } else {
            (fused, None)
        };
        let pred = self.decoder.decode(tape, bound, enhanced, &encoded.skips)?;
        Ok(Forward { pred, f_ext, fused, dpg, dfe })
    }

    /// Soft IoU plus `lambda` times the self-contrastive loss.
    pub fn objective(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        images: Var,
        masks: &Tensor,
        lambda: f64,
        frozen: Option<&Structure>,
    ) -> Result<Objective> {
        let forward = self.forward(tape, bound, images, frozen)?;
        let iou = losses::iou_loss(tape, forward.pred, masks)?;
        let scl = match (&forward.dpg, self.cfg.variant.scl) {
            (Some(dpg_out), true) => {
                let pins = frozen.and_then(|s| Some((s.object_seeds.as_deref()?, s.background_seeds.as_deref()?)));
                let pair = scl::erase_and_prototype(tape, &self.dpg, bound, forward.f_ext, masks, pins)?;
                let loss = scl::self_contrastive_loss(tape, dpg_out.proto, &pair)?;
                Some((loss, pair))
            }
            _ => None,
        };
        let total = match &scl {
            Some((loss, _)) => losses::total_loss(tape, iou, loss.loss, lambda)?,
            None => iou,
        };
        Ok(Objective { forward, iou, scl, total, lambda })
    }

    /// Inference on one group `[N,3,H,W]`; returns `[N,1,H,W]` probabilities.
    /// Labels play no part and the contrastive branch is never evaluated.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &bound, x, None)?;
        let pred = tape.value(out.pred).clone();
        if !pred.all_finite() {
            return Err(DcfmError::NonFinite("prediction".into()));
        }
        Ok(pred)
    }
}
