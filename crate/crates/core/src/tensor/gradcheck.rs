//! Central finite-difference checks of graph gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Relative error is `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input, element, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64, floor: f64) {
        self.checked += 1;
        let abs = (analytic - numeric).abs();
        let rel = relative_error(analytic, numeric, floor);
        self.max_abs_err = self.max_abs_err.max(abs);
        if self.worst.is_none() || rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = Some((input, elem, analytic, numeric));
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + eps) − f(x − eps)) / 2eps` for one coordinate of `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], index: usize, eps: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[index] = x[index] + eps;
    let up = f(&probe);
    probe[index] = x[index] - eps;
    let down = f(&probe);
    (up - down) / (2.0 * eps)
}

/// Checks the gradient of `build` with respect to every element of every
/// input. A non-scalar output is contracted with fixed random weights so
/// that the whole Jacobian is exercised.
pub fn check_op(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    config: GradCheckConfig,
) -> Result<GradCheckReport> {
    let eval = |vals: &[Tensor], want_grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = contract(&mut g, out)?;
        let value = g.value(loss).data()[0];
        let grads = if want_grads {
            g.backward(loss)?;
            vars.iter().map(|&v| g.grad_or_zeros(v)).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheckReport::default();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut vals = inputs.to_vec();
            let mut probe = |delta: f64| -> Result<f64> {
                vals[i].data_mut()[e] = input.data()[e] + delta;
                Ok(eval(&vals, false)?.0)
            };
            let numeric = (probe(config.eps)? - probe(-config.eps)?) / (2.0 * config.eps);
            report.record(i, e, analytic[i].data()[e], numeric, config.floor);
        }
    }
    Ok(report)
}

fn contract(g: &mut Graph, out: Var) -> Result<Var> {
    if g.value(out).numel() == 1 && g.shape(out).is_empty() {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let n: usize = shape.iter().product();
    let weights = Tensor::new(shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect())?;
    let w = g.constant(weights);
    let prod = g.mul(out, w)?;
    g.sum_all(prod)
}
