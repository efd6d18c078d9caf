//! Built-in verification suites: each compares a module against a direct
//! loop implementation or checks a closed-form identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{DecoderConfig, EncoderConfig};
use crate::datagen::{self, GenConfig, ShapeClass};
use crate::dfe;
use crate::dpg::{self, Dpg, SeedIndex};
use crate::metrics;
use crate::model::{Dcfm, ModelConfig, Structure};
use crate::params::{ParamStore, Pointwise};
use crate::scl::{self, SCL_EPS};
use crate::tensorlab::{grad_check_many, GradCheckReport, Tape, Tensor};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

type Suite = fn() -> Result<(bool, String)>;

const SUITES: [(&str, Suite); 6] = [
    ("seed selection vs loop oracle", seed_selection),
    ("response maps and prototype vs loop oracle", response_and_prototype),
    ("gradient check of the full objective", gradients),
    ("attention readjustment properties", readjustment),
    ("self-contrastive identities", contrastive_identities),
    ("metrics vs per-threshold oracle", metric_oracle),
];

/// Run every suite; errors count as failures.
pub fn run_all() -> Vec<SuiteResult> {
    SUITES
        .iter()
        .map(|&(name, suite)| match suite() {
            Ok((passed, detail)) => SuiteResult { name, passed, detail },
            Err(e) => SuiteResult { name, passed: false, detail: format!("error: {e}") },
        })
        .collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `F_ext + W·F_ext` and the two projections, with the same summation order
/// as the kernels (bias first, then channels in order).
fn loop_pointwise(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let [n, cin, h, wd] = *x.shape() else { unreachable!() };
    let cout = w.dim(0);
    Tensor::from_fn(&[n, cout, h, wd], |i| {
        let (img, o, p) = (i / (cout * h * wd), (i / (h * wd)) % cout, i % (h * wd));
        let mut acc = b.map_or(0.0, |b| b.data()[o]);
        for c in 0..cin {
            acc += w.data()[o * cin + c] * x.data()[(img * cin + c) * h * wd + p];
        }
        acc
    })
}

fn conv_params(store: &ParamStore, conv: &Pointwise) -> (Tensor, Option<Tensor>) {
    (store.get(conv.weight).clone(), conv.bias.map(|b| store.get(b).clone()))
}

/// Seeds by explicit enumeration of the similarity matrix.
fn oracle_seeds(k: &Tensor, q: &Tensor) -> Vec<usize> {
    let [n, c, h, w] = *k.shape() else { unreachable!() };
    let hw = h * w;
    let feat = |t: &Tensor, img: usize, p: usize, ch: usize| t.data()[(img * c + ch) * hw + p];
    let mut seeds = Vec::new();
    for img in 0..n {
        let mut best = (f64::NEG_INFINITY, 0);
        for p in 0..hw {
            let mut total = 0.0;
            for other in 0..n {
                let mut row_max = f64::NEG_INFINITY;
                for p2 in 0..hw {
                    let mut s = 0.0;
                    for ch in 0..c {
                        s += feat(k, img, p, ch) * feat(q, other, p2, ch);
                    }
                    row_max = row_max.max(s);
                }
                total += row_max;
            }
            let prob = total / n as f64;
            if prob > best.0 {
                best = (prob, p);
            }
        }
        seeds.push(best.1);
    }
    seeds
}

fn random_instance(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let n = rng.gen_range(1..=4);
    let c = rng.gen_range(1..=8);
    let h = rng.gen_range(1..=4);
    let w = rng.gen_range(1..=16 / h);
    (n, c, h, w)
}

fn seed_selection() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    let cases = 50;
    for case in 0..cases {
        let (n, c, h, w) = random_instance(&mut rng);
        let mut store = ParamStore::new(case);
        let dpg = Dpg::new(&mut store, c);
        let x = random_tensor(&mut rng, &[n, c, h, w]);

        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let res = dpg::residual_features(&mut tape, xv, &dpg.residual, &bound)?;
        let seeds = dpg::seed_select(&mut tape, res, &dpg.key, &dpg.query, &bound, None)?;

        let (rw, _) = conv_params(&store, &dpg.residual);
        let branch = loop_pointwise(&x, &rw, None);
        let f_res = Tensor::from_fn(x.shape(), |i| x.data()[i] + branch.data()[i]);
        let (kw, kb) = conv_params(&store, &dpg.key);
        let (qw, qb) = conv_params(&store, &dpg.query);
        let k = loop_pointwise(&f_res, &kw, kb.as_ref());
        let q = loop_pointwise(&f_res, &qw, qb.as_ref());
        let expected = oracle_seeds(&k, &q);

        let got: Vec<usize> = seeds.indices.iter().map(|s| s.h * w + s.w).collect();
        let vectors = tape.value(seeds.vectors);
        let vectors_match = (0..n).all(|img| {
            (0..c).all(|ch| vectors.data()[img * c + ch] == f_res.data()[(img * c + ch) * h * w + expected[img]])
        });
        if got != expected || !vectors_match {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{} of {cases} random groups match", cases - mismatches)))
}

fn response_and_prototype() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut in_range = true;
    for _ in 0..50 {
        let (n, c, h, w) = random_instance(&mut rng);
        let hw = h * w;
        let f = random_tensor(&mut rng, &[n, c, h, w]);
        let seeds: Vec<SeedIndex> = (0..n)
            .map(|image| {
                let p = rng.gen_range(0..hw);
                SeedIndex { image, h: p / w, w: p % w }
            })
            .collect();

        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let res = dpg::ResidualFeatures(fv);
        // identity residual: pass the features through unchanged
        let rows = {
            let last = tape.channels_last(fv)?;
            tape.reshape(last, &[n * hw, c])?
        };
        let flat: Vec<usize> = seeds.iter().map(|s| s.image * hw + s.h * w + s.w).collect();
        let vectors = tape.gather_rows(rows, &flat)?;
        let set = dpg::SeedSet { vectors, indices: seeds.clone() };
        let maps = dpg::democratic_response(&mut tape, res, &set)?;
        let proto = dpg::build_prototype(&mut tape, res, &maps)?;

        let at = |img: usize, ch: usize, p: usize| f.data()[(img * c + ch) * hw + p];
        let norm = |img: usize, p: usize| (0..c).map(|ch| at(img, ch, p).powi(2)).sum::<f64>().sqrt().max(1e-12);
        let mut final_map = vec![0.0; n * hw];
        for img in 0..n {
            for p in 0..hw {
                let mut acc = 0.0;
                for s in &seeds {
                    let sp = s.h * w + s.w;
                    let dot: f64 = (0..c).map(|ch| at(img, ch, p) * at(s.image, ch, sp)).sum();
                    acc += dot / (norm(img, p) * norm(s.image, sp));
                }
                final_map[img * hw + p] = acc / n as f64;
            }
        }
        let got_map = tape.value(maps.final_map).data();
        for (a, b) in got_map.iter().zip(&final_map) {
            worst = worst.max((a - b).abs());
            in_range &= (-1.0..=1.0).contains(a);
        }
        let got_proto = tape.value(proto.0).data();
        for ch in 0..c {
            let mut acc = 0.0;
            for img in 0..n {
                for p in 0..hw {
                    acc += final_map[img * hw + p] * at(img, ch, p);
                }
            }
            worst = worst.max((got_proto[ch] - acc / (n * hw) as f64).abs());
        }
    }
    Ok((worst <= 1e-12 && in_range, format!("max deviation {worst:.2e}, maps within [-1,1]: {in_range}")))
}

/// Smallest network configuration: one skip, four feature channels.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { in_channels: 3, stages: vec![(4, 1), (4, 2)] },
        decoder: DecoderConfig { widths: vec![4] },
        ..ModelConfig::default()
    }
}

/// Central differences of the training objective with respect to every
/// parameter and every input pixel. Seeds and readjustment weights are taken
/// from the unperturbed pass and held fixed.
pub fn objective_grad_check(model: &Dcfm, images: &Tensor, masks: &Tensor, lambda: f64, h: f64) -> Result<GradCheckReport> {
    let structure: Structure = {
        let mut tape = Tape::new();
        let bound = model.store.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        model.objective(&mut tape, &bound, x, masks, lambda, None)?.structure()
    };
    let mut inputs: Vec<Tensor> = model.store.params().iter().map(|p| p.value.clone()).collect();
    inputs.push(images.clone());
    grad_check_many(
        |tape, vars| {
            let (params, x) = vars.split_at(vars.len() - 1);
            let bound = ParamStore::bind_vars(params.to_vec());
            Ok(model.objective(tape, &bound, x[0], masks, lambda, Some(&structure))?.total)
        },
        &inputs,
        h,
    )
}

fn gradients() -> Result<(bool, String)> {
    let gen = GenConfig { group_size: 2, image_size: 16, ..GenConfig::default() };
    let group = datagen::generate_group(&gen, ShapeClass::Disk, 3)?;
    let images = Tensor::stack(&group.images.iter().map(|i| datagen::resize(i, 8, 8)).collect::<Vec<_>>())?;
    let masks = Tensor::stack(&group.masks.iter().map(|m| datagen::resize(m, 8, 8)).collect::<Vec<_>>())?;
    let model = Dcfm::new(tiny_model_config(), 5)?;
    let report = objective_grad_check(&model, &images, &masks, 0.1, 1e-5)?;
    Ok((
        report.max_rel_error < 1e-4,
        format!("max relative error {:.2e} over {} coordinates", report.max_rel_error, report.coordinates),
    ))
}

fn readjustment() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    for _ in 0..1000 {
        let len = rng.gen_range(1..=16);
        let row: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::new(&[1, len], row.clone())?;
        let re = dfe::readjust_weights(&t, 3.0);
        let re = re.data();
        for i in 0..len {
            if row[i] <= 0.0 && re[i] != 1.0 {
                violations += 1;
            }
            for j in 0..len {
                if row[i] > 0.0 && row[j] > 0.0 && row[i] > row[j] && re[i] > re[j] {
                    violations += 1;
                }
            }
        }
    }
    let (_, _, _, fin) = dfe::readjust_row(&[1.0, 0.5], 3.0);
    let expected = [1.0 / (1.0 + (-0.5f64).exp()), 8.0 / (1.0 + 0.5f64.exp())];
    let hand = (fin[0] - expected[0]).abs() < 1e-12 && (fin[1] - expected[1]).abs() < 1e-12;
    Ok((
        violations == 0 && hand,
        format!("{violations} property violations in 1000 rows; [1, 0.5] -> [{:.4}, {:.4}]", fin[0], fin[1]),
    ))
}

fn contrastive_identities() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, c, h, w) = (3, 4, 4, 4);
    let mut store = ParamStore::new(6);
    let dpg_mod = Dpg::new(&mut store, c);
    let f = random_tensor(&mut rng, &[n, c, h, w]);
    let ones = Tensor::ones(&[n, 1, 8, 8]);
    let y = Tensor::from_fn(&[n, 1, 8, 8], |_| (rng.gen::<f64>() > 0.5) as u8 as f64);
    let y_inv = y.map(|v| 1.0 - v);

    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let fv = tape.constant(f);
    let full = dpg_mod.forward(&mut tape, &bound, fv, None)?;
    let pair = scl::erase_and_prototype(&mut tape, &dpg_mod, &bound, fv, &ones, None)?;
    let loss = scl::self_contrastive_loss(&mut tape, full.proto, &pair)?;
    let same = tape.value(pair.proto_c.0) == tape.value(full.proto.0);
    let positive = -(tape.value(loss.cos_c).item() + SCL_EPS).ln();
    let positive_ok = positive == -(1.0 + SCL_EPS).ln();

    let a = scl::erase_and_prototype(&mut tape, &dpg_mod, &bound, fv, &y, None)?;
    let b = scl::erase_and_prototype(&mut tape, &dpg_mod, &bound, fv, &y_inv, None)?;
    let swapped = tape.value(a.proto_c.0) == tape.value(b.proto_b.0) && tape.value(a.proto_b.0) == tape.value(b.proto_c.0);
    Ok((
        same && positive_ok && swapped,
        format!("Y=1 proto_c==proto: {same}; positive term exact: {positive_ok}; swap exact: {swapped}"),
    ))
}

fn metric_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = rng.gen_range(1..=200);
        let pred: Vec<f64> = (0..len).map(|_| rng.gen()).collect();
        let mut gt: Vec<f64> = (0..len).map(|_| (rng.gen::<f64>() > 0.6) as u8 as f64).collect();
        gt[0] = 1.0;
        let mae: f64 = pred.iter().zip(&gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / len as f64;
        let levels: Vec<u32> = pred.iter().map(|&p| (p * 255.0 + 0.5).floor() as u32).collect();
        let mut best: f64 = 0.0;
        for t in 0..256u32 {
            let (mut tp, mut fp, mut pos) = (0.0, 0.0, 0.0);
            for (l, g) in levels.iter().zip(&gt) {
                let hit = *l > t;
                tp += (hit && *g == 1.0) as u8 as f64;
                fp += (hit && *g == 0.0) as u8 as f64;
                pos += *g;
            }
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = tp / pos;
            if 0.3 * p + r > 0.0 {
                best = best.max(1.3 * p * r / (0.3 * p + r));
            }
        }
        worst = worst.max((metrics::mae(&pred, &gt)? - mae).abs());
        worst = worst.max((metrics::f_beta_max(&pred, &gt, 0.3)? - best).abs());
    }
    let identical = metrics::evaluate(&[0.0, 1.0, 1.0], &[0.0, 1.0, 1.0])?;
    let exact = identical.mae == 0.0 && identical.f_beta_max == 1.0;
    Ok((worst <= 1e-12 && exact, format!("max deviation {worst:.2e} on 100 pairs; pred == gt -> ({}, {})", identical.mae, identical.f_beta_max)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run_all() {
            assert!(r.passed, "{r}");
        }
    }
}
