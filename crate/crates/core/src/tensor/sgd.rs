use std::collections::BTreeMap;

use super::{ParamStore, Tensor};

/// SGD with heavy-ball momentum: `v ← μ·v + g; p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    /// Velocity buffers start at zero for every parameter in `params`.
    pub fn new(params: &ParamStore, momentum: f64) -> Self {
        let velocity = params
            .iter()
            .map(|(name, t)| (name.to_string(), vec![0.0; t.numel()]))
            .collect();
        Self { momentum, velocity }
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Parameters without an entry in `grads` keep their velocity decaying.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        for (name, p) in params.iter_mut() {
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let g = grads.get(name).map(Tensor::data);
            for (i, (pi, vi)) in p.data_mut().iter_mut().zip(v.iter_mut()).enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.insert("p", Tensor::from_vec(vec![p]));
        ps
    }

    fn unit_grad() -> BTreeMap<String, Tensor> {
        BTreeMap::from([("p".to_string(), Tensor::from_vec(vec![1.0]))])
    }

    #[test]
    fn plain_step() {
        let mut ps = single(0.0);
        let mut opt = Sgd::new(&ps, 0.0);
        opt.step(&mut ps, &unit_grad(), 0.1);
        assert!((ps.get("p").unwrap().data()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let mut ps = single(0.0);
        let mut opt = Sgd::new(&ps, 0.9);
        opt.step(&mut ps, &unit_grad(), 0.1);
        opt.step(&mut ps, &unit_grad(), 0.1);
        assert!((ps.get("p").unwrap().data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut ps = single(1.5);
        let mut opt = Sgd::new(&ps, 0.9);
        opt.step(&mut ps, &unit_grad(), 0.0);
        assert_eq!(ps.get("p").unwrap().data(), &[1.5]);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = BTreeMap::from([("a".to_string(), Tensor::from_vec(vec![3.0, 4.0]))]);
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let d = g["a"].data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }
}
