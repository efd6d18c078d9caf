//! Democratic prototype generation.
//!
//! Residual block, seed selection over cross-image similarities, seed
//! correlation maps averaged over the group, and the response-weighted
//! group prototype.

use crate::params::{Bound, ParamGroup, ParamStore, Pointwise};
use crate::tensorlab::{Tape, Tensor, TensorError, Var};
use crate::Result;

/// Position of a seed pixel inside the group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedIndex {
    pub image: usize,
    pub h: usize,
    pub w: usize,
}

/// Residual features `F_ext + conv1x1(F_ext)`, `[N,C,H,W]`.
#[derive(Clone, Copy, Debug)]
pub struct ResidualFeatures(pub Var);

/// One seed vector per image.
#[derive(Clone, Debug)]
pub struct SeedSet {
    /// `[N,C]`, taken from the residual features.
    pub vectors: Var,
    pub indices: Vec<SeedIndex>,
}

/// Seed correlations and their per-image mean.
#[derive(Clone, Debug)]
pub struct ResponseMaps {
    /// `[N·H·W, N]`: row = pixel, column = seed.
    pub per_seed_rows: Var,
    /// `[N,1,H,W]`, the mean over seeds.
    pub final_map: Var,
    pub dims: (usize, usize, usize),
}

impl ResponseMaps {
    /// Per-seed maps laid out as `[N (image), N (seed), H, W]`.
    pub fn per_seed(&self, tape: &Tape) -> Tensor {
        let (n, h, w) = self.dims;
        let hw = h * w;
        let rows = tape.value(self.per_seed_rows);
        Tensor::from_fn(&[n, n, h, w], |i| {
            let (img, rest) = (i / (n * hw), i % (n * hw));
            let (seed, p) = (rest / hw, rest % hw);
            rows.data()[(img * hw + p) * n + seed]
        })
    }
}

/// Group prototype `[1,C]`.
#[derive(Clone, Copy, Debug)]
pub struct Prototype(pub Var);

/// Everything one DPG pass produces.
#[derive(Clone, Debug)]
pub struct DpgOutput {
    pub residual: ResidualFeatures,
    pub seeds: SeedSet,
    pub maps: ResponseMaps,
    pub proto: Prototype,
}

/// Parameters of the residual block and the seed-selection projections.
#[derive(Clone, Debug)]
pub struct Dpg {
    pub residual: Pointwise,
    pub key: Pointwise,
    pub query: Pointwise,
}

impl Dpg {
    /// The residual branch has no bias so erased (all-zero) features stay zero.
    pub fn new(store: &mut ParamStore, channels: usize) -> Self {
        Self {
            residual: Pointwise::new(store, "dpg.residual", channels, channels, false, ParamGroup::Head),
            key: Pointwise::new(store, "dpg.key", channels, channels, true, ParamGroup::Head),
            query: Pointwise::new(store, "dpg.query", channels, channels, true, ParamGroup::Head),
        }
    }

    /// Full pass. `frozen` replaces the argmax seed choice (gradient checks).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        f_ext: Var,
        frozen: Option<&[SeedIndex]>,
    ) -> Result<DpgOutput> {
        let residual = residual_features(tape, f_ext, &self.residual, bound)?;
        let seeds = seed_select(tape, residual, &self.key, &self.query, bound, frozen)?;
        let maps = democratic_response(tape, residual, &seeds)?;
        let proto = build_prototype(tape, residual, &maps)?;
        Ok(DpgOutput { residual, seeds, maps, proto })
    }
}

pub fn residual_features(tape: &mut Tape, f_ext: Var, conv: &Pointwise, bound: &Bound) -> Result<ResidualFeatures> {
    let branch = conv.apply(tape, bound, f_ext)?;
    Ok(ResidualFeatures(tape.add(f_ext, branch)?))
}

fn nchw(tape: &Tape, v: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *tape.shape(v) {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(TensorError::Shape { op, detail: format!("expected [N,C,H,W], got {s:?}") }.into()),
    }
}

/// Select one seed per image and gather its residual feature vector.
///
/// The key/query projections only steer the argmax, so they receive no
/// gradient through this step.
pub fn seed_select(
    tape: &mut Tape,
    f_res: ResidualFeatures,
    key: &Pointwise,
    query: &Pointwise,
    bound: &Bound,
    frozen: Option<&[SeedIndex]>,
) -> Result<SeedSet> {
    let (n, c, h, w) = nchw(tape, f_res.0, "seed_select")?;
    let indices = match frozen {
        Some(ix) => {
            if ix.len() != n || ix.iter().any(|s| s.image >= n || s.h >= h || s.w >= w) {
                return Err(TensorError::Shape {
                    op: "seed_select",
                    detail: format!("frozen seeds {ix:?} do not fit [{n},{c},{h},{w}]"),
                }
                .into());
            }
            ix.to_vec()
        }
        None => {
            let k = key.apply(tape, bound, f_res.0)?;
            let q = query.apply(tape, bound, f_res.0)?;
            select_seed_indices(tape.value(k), tape.value(q))?
        }
    };
    let rows = group_rows(tape, f_res.0)?;
    let flat: Vec<usize> = indices.iter().map(|s| (s.image * h + s.h) * w + s.w).collect();
    let vectors = tape.gather_rows(rows, &flat)?;
    Ok(SeedSet { vectors, indices })
}

/// `[N,C,H,W]` to pixel rows `[N·H·W, C]`.
fn group_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let (n, c, h, w) = nchw(tape, x, "group_rows")?;
    let last = tape.channels_last(x)?;
    Ok(tape.reshape(last, &[n * h * w, c])?)
}

/// Seed choice from projected keys and queries (`[N,C,H,W]` each).
///
/// `S = K·Qᵀ` over all pixels of the group, the per-image maximum of each
/// row, their mean as the pixel's co-salient probability, and the argmax of
/// that probability inside each image. Ties go to the lowest flat index.
pub fn select_seed_indices(k: &Tensor, q: &Tensor) -> Result<Vec<SeedIndex>> {
    let [n, c, h, w] = *k.shape() else {
        return Err(TensorError::Shape { op: "select_seed_indices", detail: format!("{:?}", k.shape()) }.into());
    };
    if q.shape() != k.shape() {
        return Err(TensorError::Shape {
            op: "select_seed_indices",
            detail: format!("keys {:?} vs queries {:?}", k.shape(), q.shape()),
        }
        .into());
    }
    let hw = h * w;
    let kr = crate::tensorlab::kernels::channels_last(k)?;
    let qr = crate::tensorlab::kernels::channels_last(q)?;
    let (kd, qd) = (kr.data(), qr.data());
    let probability: Vec<f64> = (0..n * hw)
        .map(|p| {
            let kp = &kd[p * c..(p + 1) * c];
            let mut total = 0.0;
            for img in 0..n {
                let mut best = f64::NEG_INFINITY;
                for col in img * hw..(img + 1) * hw {
                    let qc = &qd[col * c..(col + 1) * c];
                    let s: f64 = kp.iter().zip(qc).map(|(a, b)| a * b).sum();
                    if s > best {
                        best = s;
                    }
                }
                total += best;
            }
            total / n as f64
        })
        .collect();
    Ok((0..n)
        .map(|img| {
            let block = &probability[img * hw..(img + 1) * hw];
            let mut arg = 0;
            for (i, &v) in block.iter().enumerate() {
                if v > block[arg] {
                    arg = i;
                }
            }
            SeedIndex { image: img, h: arg / w, w: arg % w }
        })
        .collect())
}

/// Cosine correlation of every pixel with every seed, averaged over seeds.
pub fn democratic_response(tape: &mut Tape, f_res: ResidualFeatures, seeds: &SeedSet) -> Result<ResponseMaps> {
    let (n, _c, h, w) = nchw(tape, f_res.0, "democratic_response")?;
    let seed_count = tape.shape(seeds.vectors)[0];
    if seed_count != n {
        return Err(TensorError::Shape {
            op: "democratic_response",
            detail: format!("{seed_count} seeds for {n} images"),
        }
        .into());
    }
    let rows = group_rows(tape, f_res.0)?;
    let rows_n = tape.l2_normalize(rows, 1);
    let seeds_n = tape.l2_normalize(seeds.vectors, 1);
    let seeds_t = tape.transpose(seeds_n)?;
    let cosines = tape.matmul(rows_n, seeds_t)?;
    // a seed's correlation with itself can round to just above 1
    let per_seed_rows = tape.clamp(cosines, -1.0, 1.0);
    let avg = tape.constant(Tensor::full(&[n, 1], 1.0 / n as f64));
    let mean = tape.matmul(per_seed_rows, avg)?;
    let final_map = tape.reshape(mean, &[n, 1, h, w])?;
    Ok(ResponseMaps { per_seed_rows, final_map, dims: (n, h, w) })
}

/// Mean over all pixels of the group of `final · f_res`.
pub fn build_prototype(tape: &mut Tape, f_res: ResidualFeatures, maps: &ResponseMaps) -> Result<Prototype> {
    let (n, _c, h, w) = nchw(tape, f_res.0, "build_prototype")?;
    if maps.dims != (n, h, w) {
        return Err(TensorError::Shape {
            op: "build_prototype",
            detail: format!("maps {:?} vs features {:?}", maps.dims, (n, h, w)),
        }
        .into());
    }
    let pixels = n * h * w;
    let rows = group_rows(tape, f_res.0)?;
    let weights = tape.reshape(maps.final_map, &[1, pixels])?;
    let summed = tape.matmul(weights, rows)?;
    Ok(Prototype(tape.scale(summed, 1.0 / pixels as f64)))
}

/// Grayscale rendering of one image's final map: `[-1,1]` to `[0,1]`.
pub fn response_map_image(final_map: &Tensor, image: usize) -> Tensor {
    let [_, _, h, w] = *final_map.shape() else { panic!("final map must be [N,1,H,W]") };
    let plane = &final_map.data()[image * h * w..(image + 1) * h * w];
    Tensor::from_fn(&[h, w], |i| ((plane[i] + 1.0) * 0.5).clamp(0.0, 1.0))
}
