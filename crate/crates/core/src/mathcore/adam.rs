use std::collections::BTreeMap;

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam with decoupled weight decay. First and second moments are kept per
/// parameter name and persist across calls to [`Adam::step`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Result<Self> {
        let ok =
            lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 && weight_decay >= 0.0;
        if !ok {
            return Err(Error::param(format!(
                "invalid Adam hyperparameters lr={lr} beta1={beta1} beta2={beta2} eps={eps} wd={weight_decay}"
            )));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    /// Momentum 0.9, weight decay 0.1.
    pub fn with_lr(lr: f64) -> Self {
        Self::new(lr, 0.9, 0.999, 1e-8, 0.1).expect("valid defaults")
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every parameter in `params` from `grads`, using the
    /// optimizer's current `lr`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let lr = self.lr;
        self.step_with_lr(params, grads, lr)
    }

    pub fn step_with_lr(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in &names {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::usage(format!("missing gradient for {name}")))?;
            if g.shape() != params.get(name)?.shape() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    left: params.get(name)?.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for name in &names {
            let g = grads[name].data();
            let p: &mut Tensor = params.get_mut(name).expect("checked above");
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
            }
            if p.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("Adam produced a non-finite value in {name}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathcore::Graph;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_no_decay_leaves_params() {
        let mut s = scalar_store(1.5);
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8, 0.0).unwrap();
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::zeros(&[1]));
        adam.step(&mut s, &g).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.5]);
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let mut s = scalar_store(1.0);
        let mut adam = Adam::with_lr(0.1);
        assert!(matches!(adam.step(&mut s, &Gradients::new()), Err(Error::Usage(_))));
    }

    #[test]
    fn one_step_descends() {
        let mut s = scalar_store(1.0);
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8, 0.0).unwrap();
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::new(vec![1], vec![1.0]).unwrap());
        adam.step(&mut s, &g).unwrap();
        assert!(s.get("w").unwrap().data()[0].abs() < 1.0);
    }

    #[test]
    fn convex_quadratic_converges() {
        // f(w) = 0.5 * sum(c_i * (w_i - t_i)^2)
        let target = [1.0, -2.0, 0.5];
        let curv = [1.0, 3.0, 0.5];
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[3])).unwrap();
        let loss_of = |s: &ParamStore| -> (f64, Gradients) {
            let mut g = Graph::new();
            let w = g.param(s, "w").unwrap();
            let t = g.constant(Tensor::new(vec![3], target.to_vec()).unwrap());
            let d = g.sub(w, t).unwrap();
            let sq = g.square(d).unwrap();
            let weighted = g.mul_const(sq, Tensor::new(vec![3], curv.to_vec()).unwrap()).unwrap();
            let sum = g.sum(weighted).unwrap();
            let l = g.scale(sum, 0.5).unwrap();
            (g.value(l).item().unwrap(), g.backward(l, s).unwrap())
        };
        let mut adam = Adam::new(0.05, 0.9, 0.999, 1e-8, 0.0).unwrap();
        let (initial, _) = loss_of(&s);
        let mut history = Vec::new();
        for _ in 0..200 {
            let (l, g) = loss_of(&s);
            history.push(l);
            adam.step(&mut s, &g).unwrap();
        }
        let (last, _) = loss_of(&s);
        assert!(last < 1e-3 * initial, "{last} vs {initial}");
        // Early descent is monotone; later Adam oscillates at a tiny scale.
        assert!(history[..20].windows(2).all(|w| w[1] <= w[0]));
    }
}
