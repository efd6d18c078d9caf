//! Soft IoU loss and the combined training objective.

use crate::tensorlab::{Tape, Tensor, TensorError, Var};
use crate::Result;

/// Added to both intersection and union; an empty prediction on an empty
/// mask then scores a ratio of 1.
pub const IOU_EPS: f64 = 1e-8;

/// Weight of the self-contrastive term by default.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// `1 − mean_n (Σŷy + e) / (Σŷ + Σy − Σŷy + e)`.
pub fn iou_loss(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
    if tape.shape(pred) != gt.shape() {
        return Err(TensorError::Shape {
            op: "iou_loss",
            detail: format!("prediction {:?} vs ground truth {:?}", tape.shape(pred), gt.shape()),
        }
        .into());
    }
    let n = gt.shape()[0];
    let inner = gt.numel() / n;
    let gt_sums = Tensor::from_fn(&[n], |i| gt.data()[i * inner..(i + 1) * inner].iter().sum());
    let y = tape.constant(gt.clone());
    let prod = tape.mul(pred, y)?;
    let inter = tape.sum_per_sample(prod);
    let pred_sum = tape.sum_per_sample(pred);
    let gt_sum = tape.constant(gt_sums);
    let both = tape.add(pred_sum, gt_sum)?;
    let union = tape.sub(both, inter)?;
    let union = tape.add_scalar(union, IOU_EPS);
    let num = tape.add_scalar(inter, IOU_EPS);
    let ratio = tape.div(num, union)?;
    let mean = tape.mean(ratio);
    let neg = tape.scale(mean, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// `iou + λ·sc`.
pub fn total_loss(tape: &mut Tape, iou: Var, sc: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(sc, lambda);
    Ok(tape.add(iou, weighted)?)
}

/// Scalar breakdown of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub iou: f64,
    pub sc: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Soft IoU between a probability map and a mask, per image, as plain values.
pub fn soft_iou(pred: &[f64], gt: &[f64]) -> f64 {
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let union = pred.iter().sum::<f64>() + gt.iter().sum::<f64>() - inter;
    (inter + IOU_EPS) / (union + IOU_EPS)
}
