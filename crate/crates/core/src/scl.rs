//! Self-contrastive learning: prototypes of object-only and background-only
//! features, compared against the unmasked prototype. Training only.

use crate::dpg::{Dpg, DpgOutput, Prototype, SeedIndex};
use crate::params::Bound;
use crate::tensorlab::{Tape, Tensor, TensorError, Var};
use crate::Result;

/// Keeps both logarithms finite.
pub const SCL_EPS: f64 = 1e-5;

/// Prototypes of the background-erased (`proto_c`) and object-erased
/// (`proto_b`) features.
#[derive(Clone, Debug)]
pub struct MaskedPrototypePair {
    pub proto_c: Prototype,
    pub proto_b: Prototype,
    pub object_pass: DpgOutput,
    pub background_pass: DpgOutput,
}

#[derive(Clone, Copy, Debug)]
pub struct SclLoss {
    pub loss: Var,
    pub cos_c: Var,
    pub cos_b: Var,
}

/// Area-average masks `[N,1,Hi,Wi]` down to `(h, w)`.
///
/// Returns `(object, background)` fractions per cell. Both come from
/// separate sums, so the pair for `1 - Y` is exactly the swapped pair for `Y`.
pub fn downscale_masks(masks: &Tensor, h: usize, w: usize) -> Result<(Tensor, Tensor)> {
    let [n, 1, hi, wi] = *masks.shape() else {
        return Err(TensorError::Shape {
            op: "downscale_masks",
            detail: format!("masks must be [N,1,H,W], got {:?}", masks.shape()),
        }
        .into());
    };
    if h == 0 || w == 0 || hi % h != 0 || wi % w != 0 {
        return Err(TensorError::Shape {
            op: "downscale_masks",
            detail: format!("{hi}x{wi} masks do not tile onto {h}x{w}"),
        }
        .into());
    }
    let (bh, bw) = (hi / h, wi / w);
    let area = (bh * bw) as f64;
    let mut fg = Tensor::zeros(&[n, 1, h, w]);
    let mut bg = Tensor::zeros(&[n, 1, h, w]);
    for img in 0..n {
        for y in 0..h {
            for x in 0..w {
                let (mut on, mut off) = (0.0, 0.0);
                for dy in 0..bh {
                    for dx in 0..bw {
                        let v = masks.data()[(img * hi + y * bh + dy) * wi + x * bw + dx];
                        on += v;
                        off += 1.0 - v;
                    }
                }
                let o = (img * h + y) * w + x;
                fg.data_mut()[o] = on / area;
                bg.data_mut()[o] = off / area;
            }
        }
    }
    Ok((fg, bg))
}

/// Run the full prototype pass on `f_ext ⊙ Y↓` and `f_ext ⊙ (1 − Y↓)`.
///
/// Seed selection reruns on each masked input; `frozen` pins the two seed
/// sets for gradient checks.
pub fn erase_and_prototype(
    tape: &mut Tape,
    dpg: &Dpg,
    bound: &Bound,
    f_ext: Var,
    masks: &Tensor,
    frozen: Option<(&[SeedIndex], &[SeedIndex])>,
) -> Result<MaskedPrototypePair> {
    let [n, _, h, w] = *tape.shape(f_ext) else {
        return Err(TensorError::Shape { op: "erase_and_prototype", detail: "features must be [N,C,H,W]".into() }.into());
    };
    if masks.shape()[0] != n {
        return Err(TensorError::Shape {
            op: "erase_and_prototype",
            detail: format!("{} masks for {n} images", masks.shape()[0]),
        }
        .into());
    }
    let (fg, bg) = downscale_masks(masks, h, w)?;
    let fg = tape.constant(fg);
    let bg = tape.constant(bg);
    let object_only = tape.mul_spatial(f_ext, fg)?;
    let background_only = tape.mul_spatial(f_ext, bg)?;
    let object_pass = dpg.forward(tape, bound, object_only, frozen.map(|f| f.0))?;
    let background_pass = dpg.forward(tape, bound, background_only, frozen.map(|f| f.1))?;
    Ok(MaskedPrototypePair {
        proto_c: object_pass.proto,
        proto_b: background_pass.proto,
        object_pass,
        background_pass,
    })
}

/// `(1 + cos∠(p1, p2)) / 2`, in `[0, 1]`; 0.5 if either vector is zero.
pub fn cosine_sim(tape: &mut Tape, p1: Var, p2: Var) -> Result<Var> {
    Ok(tape.cosine_style(p1, p2)?)
}

/// `−ln(cos_c + ε) − ln(1 − cos_b + ε)`.
pub fn self_contrastive_loss(tape: &mut Tape, proto: Prototype, pair: &MaskedPrototypePair) -> Result<SclLoss> {
    let cos_c = cosine_sim(tape, proto.0, pair.proto_c.0)?;
    let cos_b = cosine_sim(tape, proto.0, pair.proto_b.0)?;
    let pos = tape.add_scalar(cos_c, SCL_EPS);
    let pos = tape.ln(pos);
    let neg = tape.scale(cos_b, -1.0);
    let neg = tape.add_scalar(neg, 1.0 + SCL_EPS);
    let neg = tape.ln(neg);
    let sum = tape.add(pos, neg)?;
    let loss = tape.scale(sum, -1.0);
    Ok(SclLoss { loss, cos_c, cos_b })
}

/// Scalar form of the loss for given similarities.
pub fn loss_value(cos_c: f64, cos_b: f64) -> f64 {
    -(cos_c + SCL_EPS).ln() - (1.0 - cos_b + SCL_EPS).ln()
}
