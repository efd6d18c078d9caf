//! Small trainable convolutional encoder and skip-connected decoder.
//!
//! The encoder is a stack of 3x3 convolutions with ReLU, each stage with
//! stride 1 or 2. The decoder walks the skips back up, concatenating each one
//! after a nearest-neighbour upsample, and ends in a single sigmoid channel at
//! input resolution.

use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::tensorlab::{ConvGeom, Tape, TensorError, Var};
use crate::{DcfmError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// `(channels, stride)` per stage; strides must be 1 or 2.
    pub stages: Vec<(usize, usize)>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { in_channels: 3, stages: vec![(16, 2), (32, 2), (64, 2), (64, 2)] }
    }
}

impl EncoderConfig {
    pub fn downsample(&self) -> usize {
        self.stages.iter().map(|s| s.1).product()
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(self.in_channels, |s| s.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(DcfmError::Config("encoder needs at least one stage".into()));
        }
        if let Some(s) = self.stages.iter().find(|s| s.1 != 1 && s.1 != 2) {
            return Err(DcfmError::Config(format!("encoder stride {} not in {{1, 2}}", s.1)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    /// Output width after merging each skip, deepest skip first.
    pub widths: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { widths: vec![32, 16, 8] }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    geom: ConvGeom,
}

impl ConvLayer {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, group: ParamGroup) -> Self {
        let fan_in = cin * 9;
        let weight = store.uniform(&format!("{name}.weight"), &[cout, cin, 3, 3], fan_in, group);
        let bias = store.uniform(&format!("{name}.bias"), &[cout], fan_in, group);
        Self { weight, bias, geom: ConvGeom { kernel: 3, stride, pad: 1 } }
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv2d(x, bound.var(self.weight), Some(bound.var(self.bias)), self.geom)?)
    }
}

/// Output of [`Encoder::encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    pub features: Var,
    /// Stage outputs before the last stage, shallowest first.
    pub skips: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    layers: Vec<ConvLayer>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut cin = cfg.in_channels;
        let layers = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(i, &(cout, stride))| {
                let layer = ConvLayer::new(store, &format!("encoder.stage{i}"), cin, cout, stride, ParamGroup::Extractor);
                cin = cout;
                layer
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn encode(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Encoded> {
        let shape = tape.shape(images).to_vec();
        let factor = self.cfg.downsample();
        match shape[..] {
            [_, c, h, w] if c == self.cfg.in_channels && h % factor == 0 && w % factor == 0 && h > 0 && w > 0 => {}
            _ => {
                return Err(TensorError::Shape {
                    op: "encode",
                    detail: format!(
                        "images {shape:?} must be [N,{},H,W] with H, W divisible by {factor}",
                        self.cfg.in_channels
                    ),
                }
                .into())
            }
        }
        let mut x = images;
        let mut skips = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let y = layer.apply(tape, bound, x)?;
            x = tape.relu(y);
            skips.push(x);
        }
        let features = skips.pop().expect("at least one stage");
        Ok(Encoded { features, skips })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    merges: Vec<ConvLayer>,
    /// Upsample before each merge, then before the head.
    upsample: Vec<bool>,
    head: ConvLayer,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, enc: &EncoderConfig, cfg: &DecoderConfig) -> Result<Self> {
        let n_skips = enc.stages.len() - 1;
        if cfg.widths.len() != n_skips {
            return Err(DcfmError::Config(format!(
                "decoder needs {n_skips} widths (one per skip), got {}",
                cfg.widths.len()
            )));
        }
        let mut cin = enc.feature_channels();
        let mut merges = Vec::with_capacity(n_skips);
        let mut upsample = Vec::with_capacity(n_skips + 1);
        for (i, &width) in cfg.widths.iter().enumerate() {
            let level = n_skips - 1 - i;
            upsample.push(enc.stages[level + 1].1 == 2);
            let skip_c = enc.stages[level].0;
            merges.push(ConvLayer::new(store, &format!("decoder.merge{i}"), cin + skip_c, width, 1, ParamGroup::Head));
            cin = width;
        }
        upsample.push(enc.stages[0].1 == 2);
        let head = ConvLayer::new(store, "decoder.head", cin, 1, 1, ParamGroup::Head);
        Ok(Self { merges, upsample, head })
    }

    /// Sigmoid mask predictions `[N,1,H,W]` at the encoder's input resolution.
    pub fn decode(&self, tape: &mut Tape, bound: &Bound, enhanced: Var, skips: &[Var]) -> Result<Var> {
        if skips.len() != self.merges.len() {
            return Err(TensorError::Shape {
                op: "decode",
                detail: format!("expected {} skips, got {}", self.merges.len(), skips.len()),
            }
            .into());
        }
        let mut x = enhanced;
        for (i, (merge, &skip)) in self.merges.iter().zip(skips.iter().rev()).enumerate() {
            if self.upsample[i] {
                x = tape.upsample2x(x)?;
            }
            let cat = tape.concat_channels(x, skip)?;
            let y = merge.apply(tape, bound, cat)?;
            x = tape.relu(y);
        }
        if *self.upsample.last().expect("head entry") {
            x = tape.upsample2x(x)?;
        }
        let logits = self.head.apply(tape, bound, x)?;
        Ok(tape.sigmoid(logits))
    }
}
