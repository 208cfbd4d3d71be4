//! Optimisers over a [`ParamStore`]: Ranger (rectified Adam wrapped in
//! Lookahead) and plain Adam.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore, Real};
use crate::checkpoint::Archive;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Ranger,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Lookahead synchronisation period (Ranger only).
    pub lookahead_steps: u64,
    pub lookahead_alpha: f64,
    /// Rectification threshold on the SMA length (Ranger only).
    pub sma_threshold: f64,
}

impl OptimizerConfig {
    pub fn ranger(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Ranger,
            learning_rate,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-5,
            lookahead_steps: 6,
            lookahead_alpha: 0.5,
            sma_threshold: 5.0,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            eps: 1e-8,
            ..Self::ranger(learning_rate)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    step: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
    slow: Vec<Array2<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Array2::zeros(p.value.raw_dim())).collect();
        let slow = match config.kind {
            OptimizerKind::Ranger => params.iter().map(|(_, p)| p.value.clone()).collect(),
            OptimizerKind::Adam => Vec::new(),
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            slow,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bias1 = 1.0 - c.beta1.powf(t);
        let beta2_t = c.beta2.powf(t);
        let bias2 = 1.0 - beta2_t;
        // Per-step scalar and whether the adaptive denominator is used.
        let (step_size, adaptive) = match c.kind {
            OptimizerKind::Adam => (c.learning_rate * bias2.sqrt() / bias1, true),
            OptimizerKind::Ranger => {
                let sma_max = 2.0 / (1.0 - c.beta2) - 1.0;
                let sma = sma_max - 2.0 * t * beta2_t / bias2;
                if sma > c.sma_threshold {
                    let r = ((sma - 4.0) / (sma_max - 4.0) * (sma - 2.0) / sma * sma_max / (sma_max - 2.0)).sqrt();
                    (c.learning_rate * r * bias2.sqrt() / bias1, true)
                } else {
                    (c.learning_rate / bias1, false)
                }
            }
        };
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let lr = T::lit(step_size);
        let eps = T::lit(c.eps * if c.kind == OptimizerKind::Ranger { 1.0 } else { bias2.sqrt() });
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
            });
            let p = params.get_mut(id);
            if adaptive {
                Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| *p -= lr * m / (v.sqrt() + eps));
            } else {
                Zip::from(p).and(&*m).for_each(|p, &m| *p -= lr * m);
            }
        }
        if c.kind == OptimizerKind::Ranger && self.step.is_multiple_of(c.lookahead_steps) {
            let alpha = T::lit(c.lookahead_alpha);
            let ids: Vec<_> = params.ids().collect();
            for id in ids {
                let slow = &mut self.slow[id.0];
                let fast = params.get_mut(id);
                Zip::from(&mut *slow).and(&mut *fast).for_each(|s, f| {
                    *s += alpha * (*f - *s);
                    *f = *s;
                });
            }
        }
    }
}

impl Optimizer<f32> {
    /// Adds the moment and slow-weight buffers to `archive` under
    /// `optim.{m,v,slow}.<param>`.
    pub fn write_state(&self, params: &ParamStore<f32>, archive: &mut Archive) {
        for (id, p) in params.iter() {
            let shape = [p.value.nrows(), p.value.ncols()];
            archive.push(format!("optim.m.{}", p.name), &shape, self.m[id.0].iter().copied().collect());
            archive.push(format!("optim.v.{}", p.name), &shape, self.v[id.0].iter().copied().collect());
            if let Some(s) = self.slow.get(id.0) {
                archive.push(format!("optim.slow.{}", p.name), &shape, s.iter().copied().collect());
            }
        }
    }

    pub fn read_state(config: OptimizerConfig, step: u64, params: &ParamStore<f32>, archive: &Archive) -> Result<Self> {
        let mut opt = Self::new(config, params);
        opt.step = step;
        for (id, p) in params.iter() {
            let shape = [p.value.nrows(), p.value.ncols()];
            let load = |prefix: &str| -> Result<Array2<f32>> {
                let data = archive.get(&format!("optim.{prefix}.{}", p.name), &shape)?;
                Ok(Array2::from_shape_vec(shape, data.to_vec()).expect("shape checked"))
            };
            opt.m[id.0] = load("m")?;
            opt.v[id.0] = load("v")?;
            if config.kind == OptimizerKind::Ranger {
                opt.slow[id.0] = load("slow")?;
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::array;

    fn quadratic_descent(config: OptimizerConfig, steps: usize) -> f64 {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", array![[3.0, -2.0, 0.5]]);
        let mut opt = Optimizer::new(config, &store);
        for _ in 0..steps {
            let grads = {
                let mut t = Tape::new(&store);
                let x = t.param(id);
                let l = t.mean_square(x);
                t.backward(l)
            };
            opt.step(&mut store, &grads);
        }
        store.get(id).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn both_optimisers_minimise_a_quadratic() {
        assert!(quadratic_descent(OptimizerConfig::adam(0.05), 600) < 0.05);
        let r = quadratic_descent(OptimizerConfig::ranger(0.05), 2000);
        assert!(r < 0.05, "{r}");
    }

    #[test]
    fn ranger_warmup_uses_momentum_only() {
        // With SMA below threshold the first update is lr * m / (1 - beta1) = lr * g.
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", array![[1.0]]);
        let mut opt = Optimizer::new(OptimizerConfig::ranger(0.1), &store);
        let grads = {
            let mut t = Tape::new(&store);
            let x = t.param(id);
            let l = t.mean_square(x);
            t.backward(l)
        };
        opt.step(&mut store, &grads);
        assert!((store.get(id)[[0, 0]] - (1.0 - 0.1 * 2.0)).abs() < 1e-12);
    }
}
