use super::config::TrainConfig;
use crate::autodiff::{Gradients, Tensor, Var};
use crate::params::{ParamGroup, ParamStore};

/// Adam with decoupled weight decay and one learning-rate schedule per group.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One update. `vars` are the graph leaves bound from `store`, in order;
    /// parameters without a gradient still receive weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, vars: &[Var], lr: impl Fn(ParamGroup) -> f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (i, p) in store.iter_mut().enumerate() {
            let lr = lr(p.group);
            let w = p.value.data_mut();
            let decay = 1.0 - lr * self.weight_decay;
            w.iter_mut().for_each(|x| *x *= decay);
            let Some(g) = grads.slice(vars[i]) else { continue };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for k in 0..w.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn first_step_matches_hand_computation() {
        let mut store = ParamStore::new();
        store.add("m", "w", ParamGroup::Main, Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
        let cfg = TrainConfig::default();
        let mut opt = AdamW::new(&store, &cfg);
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let sq = g.mul(p.vars()[0], p.vars()[0]).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        opt.step(&mut store, &grads, p.vars(), |_| 0.1);
        // Bias-corrected first step moves each weight by lr·sign(grad), after decay.
        let w = store.iter().next().unwrap().1.value.data().to_vec();
        let expect = |x: f64, gr: f64| x * (1.0 - 0.1 * 1e-4) - 0.1 * gr / (gr.abs() + 1e-8);
        assert!((w[0] - expect(1.0, 2.0)).abs() < 1e-15);
        assert!((w[1] - expect(-2.0, -4.0)).abs() < 1e-15);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("m", "w", ParamGroup::Backbone, Tensor::new(vec![1, 3], vec![3.0, -1.0, 0.5]).unwrap());
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut opt = AdamW::new(&store, &cfg);
        for _ in 0..500 {
            let mut g = Graph::new();
            let p = store.bind(&mut g, true);
            let sq = g.mul(p.vars()[0], p.vars()[0]).unwrap();
            let loss = g.sum(sq).unwrap();
            let grads = g.backward(loss).unwrap();
            opt.step(&mut store, &grads, p.vars(), |grp| if grp == ParamGroup::Backbone { 0.05 } else { 0.0 });
        }
        assert!(store.iter().next().unwrap().1.value.data().iter().all(|x| x.abs() < 1e-2));
    }
}
