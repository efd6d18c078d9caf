//! Democratic feature enhancement.
//!
//! Fused features pass a 1x1 conv + ReLU, then per-image self-attention whose
//! softmax weights are multiplied by `(rank + 1)^α` wherever the raw score is
//! positive. Small positive scores thus gain influence. Images never attend
//! to each other.

use std::io::Write;
use std::path::Path;

use crate::dpg::{Prototype, ResidualFeatures, ResponseMaps};
use crate::params::{Bound, ParamGroup, ParamStore, Pointwise};
use crate::tensorlab::{descending_rank, kernels, Tape, Tensor, TensorError, Var};
use crate::{DcfmError, Result};

/// Upper bound accepted for the amplification exponent.
pub const MAX_ALPHA: f64 = 4.0;

/// `f_res ⊙ final + f_res ⊙ proto`, both broadcast to `[N,C,H,W]`.
pub fn fuse(tape: &mut Tape, f_res: ResidualFeatures, maps: &ResponseMaps, proto: Prototype) -> Result<Var> {
    let spatial = tape.mul_spatial(f_res.0, maps.final_map)?;
    let channel = tape.mul_channel(f_res.0, proto.0)?;
    Ok(tape.add(spatial, channel)?)
}

/// `A^re`: `(Z + 1)^α` where the raw score is positive, 1 elsewhere.
/// `raw` is `[.., HW, HW]`; ranks are taken per row.
pub fn readjust_weights(raw: &Tensor, alpha: f64) -> Tensor {
    let ranks = descending_rank(raw);
    let data = raw
        .data()
        .iter()
        .zip(ranks)
        .map(|(&a, z)| if a > 0.0 { (z as f64 + 1.0).powf(alpha) } else { 1.0 })
        .collect();
    Tensor::new(raw.shape(), data).expect("same shape")
}

/// Attention matrices of one image, each `[HW,HW]`.
#[derive(Clone, Debug)]
pub struct AttentionBundle {
    pub raw: Tensor,
    pub normalized: Tensor,
    pub rank: Vec<usize>,
    pub reweight: Tensor,
    pub final_attention: Tensor,
}

/// Intermediate handles of one enhancement pass over a batch.
#[derive(Clone, Debug)]
pub struct DfeOutput {
    pub enhanced: Var,
    pub f_conv: Var,
    /// `[N,HW,HW]`
    pub raw: Var,
    pub normalized: Var,
    pub final_attention: Var,
    /// `[N,HW,HW]` constant weights used for this pass.
    pub reweight: Tensor,
}

impl DfeOutput {
    pub fn bundle(&self, tape: &Tape, image: usize) -> AttentionBundle {
        let raw = tape.value(self.raw).index_first(image);
        AttentionBundle {
            rank: descending_rank(&raw),
            raw,
            normalized: tape.value(self.normalized).index_first(image),
            reweight: self.reweight.index_first(image),
            final_attention: tape.value(self.final_attention).index_first(image),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dfe {
    pub conv: Pointwise,
    pub key: Pointwise,
    pub query: Pointwise,
    pub value: Pointwise,
    pub alpha: f64,
    /// Apply the rank-based readjustment; plain softmax attention otherwise.
    pub readjust: bool,
}

impl Dfe {
    pub fn new(store: &mut ParamStore, channels: usize, alpha: f64, readjust: bool) -> Result<Self> {
        validate_alpha(alpha)?;
        let mut pw = |name: &str| Pointwise::new(store, name, channels, channels, true, ParamGroup::Head);
        Ok(Self {
            conv: pw("dfe.conv"),
            key: pw("dfe.key"),
            query: pw("dfe.query"),
            value: pw("dfe.value"),
            alpha,
            readjust,
        })
    }

    /// Enhance every image of `fused` independently.
    ///
    /// `frozen` supplies the `[N,HW,HW]` readjustment weights instead of
    /// deriving them from the current scores.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, fused: Var, frozen: Option<&Tensor>) -> Result<DfeOutput> {
        let [n, _c, h, w] = *tape.shape(fused) else {
            return Err(TensorError::Shape { op: "dfe", detail: format!("{:?}", tape.shape(fused)) }.into());
        };
        let hw = h * w;
        let pre = self.conv.apply(tape, bound, fused)?;
        let f_conv = tape.relu(pre);
        let k = self.key.apply(tape, bound, f_conv)?;
        let q = self.query.apply(tape, bound, f_conv)?;
        let v = self.value.apply(tape, bound, f_conv)?;
        let k = tape.channels_last(k)?;
        let q = tape.channels_last(q)?;
        let v = tape.channels_last(v)?;
        let qt = tape.transpose(q)?;
        let raw = tape.matmul(k, qt)?;
        let normalized = tape.softmax_rows(raw);
        let reweight = match frozen {
            Some(t) if t.shape() == [n, hw, hw] => t.clone(),
            Some(t) => {
                return Err(TensorError::Shape {
                    op: "dfe",
                    detail: format!("frozen weights {:?}, expected [{n},{hw},{hw}]", t.shape()),
                }
                .into())
            }
            None if self.readjust => readjust_weights(tape.value(raw), self.alpha),
            None => Tensor::ones(&[n, hw, hw]),
        };
        let weights = tape.constant(reweight.clone());
        let final_attention = tape.mul(normalized, weights)?;
        let enhanced = apply_attention(tape, f_conv, final_attention, v)?;
        Ok(DfeOutput { enhanced, f_conv, raw, normalized, final_attention, reweight })
    }
}

/// `F_conv + reshape(A^final · F_v)` with `F_v` as rows `[N,HW,C]`.
pub fn apply_attention(tape: &mut Tape, f_conv: Var, final_attention: Var, f_v_rows: Var) -> Result<Var> {
    let [_, _, h, w] = *tape.shape(f_conv) else {
        return Err(TensorError::Shape { op: "apply_attention", detail: format!("{:?}", tape.shape(f_conv)) }.into());
    };
    let mixed = tape.matmul(final_attention, f_v_rows)?;
    let mixed = tape.channels_first(mixed, h, w)?;
    Ok(tape.add(f_conv, mixed)?)
}

pub fn validate_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= MAX_ALPHA) {
        return Err(DcfmError::Config(format!("alpha must lie in (0, {MAX_ALPHA}], got {alpha}")));
    }
    Ok(())
}

/// Write the normalized and final attention rows of one image as CSV.
pub fn write_attention_csv(path: &Path, bundle: &AttentionBundle) -> Result<()> {
    let s = *bundle.normalized.shape().last().expect("rank 2");
    let mut out = String::from("kind,row");
    for j in 0..s {
        out.push_str(&format!(",k{j}"));
    }
    out.push('\n');
    for (kind, t) in [("norm", &bundle.normalized), ("final", &bundle.final_attention)] {
        for (i, row) in t.data().chunks(s).enumerate() {
            out.push_str(&format!("{kind},{i}"));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| DcfmError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| DcfmError::io(path, e))
}

/// Softmax then readjustment of a single row, for inspection.
pub fn readjust_row(row: &[f64], alpha: f64) -> (Vec<f64>, Vec<usize>, Vec<f64>, Vec<f64>) {
    let t = Tensor::new(&[1, row.len()], row.to_vec()).expect("row");
    let norm = kernels::softmax_rows(&t);
    let rank = descending_rank(&t);
    let re = readjust_weights(&t, alpha);
    let fin: Vec<f64> = norm.data().iter().zip(re.data()).map(|(a, b)| a * b).collect();
    (norm.into_data(), rank, re.into_data(), fin)
}
