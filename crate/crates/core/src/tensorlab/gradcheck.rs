//! Central-difference verification of tape gradients.

use super::{Tape, Tensor, TensorError, Var};

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all coordinates.
    pub max_rel_error: f64,
    /// (input index, flat coordinate) where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Check `f` at a single input. See [`grad_check_many`].
pub fn grad_check<F, E>(f: F, x: &Tensor, h: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h).map(|r| r.max_rel_error)
}

/// Rebuilds the graph for every perturbed coordinate, so `f` must be a pure
/// function of its inputs.
pub fn grad_check_many<F, E>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |xs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var), E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(TensorError::NotScalar { shape: tape.shape(out).to_vec() }.into());
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();
    drop(tape);

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), coordinates: 0 };
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            let fp = plus.0.value(plus.2).item();
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            let fm = minus.0.value(minus.2).item();
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = (grad.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
