//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One parameter group: a base learning rate and weight decay shared by a
/// set of flat parameter buffers.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub groups: Vec<ParamGroup>,
    /// per parameter: (group index, moments)
    state: Vec<(usize, Moments<T>)>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            groups: Vec::new(),
            state: Vec::new(),
            step: 0,
        }
    }

    pub fn add_group(&mut self, base_lr: f64, weight_decay: f64) -> usize {
        self.groups.push(ParamGroup {
            base_lr,
            weight_decay,
            lr: base_lr,
        });
        self.groups.len() - 1
    }

    /// Registers a parameter of `len` elements; returns its slot.
    pub fn register(&mut self, group: usize, len: usize) -> usize {
        self.state.push((
            group,
            Moments {
                m: vec![T::zero(); len],
                v: vec![T::zero(); len],
            },
        ));
        self.state.len() - 1
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params[i]` and `grads[i]` belong to slot `i`.
    /// `lr_scale` multiplies every group's current learning rate.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr_scale: f64) {
        assert_eq!(params.len(), self.state.len());
        assert_eq!(grads.len(), self.state.len());
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (tb1, tb2) = (T::lit(b1), T::lit(b2));
        let eps = T::lit(self.config.eps);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (gi, mom) = &mut self.state[slot];
            let group = &self.groups[*gi];
            let lr = group.lr * lr_scale;
            let decay = T::lit(1.0 - lr * group.weight_decay);
            let step_size = T::lit(lr / bc1);
            let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
            for j in 0..p.len() {
                let gj = g[j];
                mom.m[j] = tb1 * mom.m[j] + (T::one() - tb1) * gj;
                mom.v[j] = tb2 * mom.v[j] + (T::one() - tb2) * gj * gj;
                p[j] *= decay;
                let denom = mom.v[j].sqrt() * inv_bc2_sqrt + eps;
                p[j] -= step_size * mom.m[j] / denom;
            }
        }
    }
}

/// Cosine annealing from `base` to `eta_min` over `t_max` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub t_max: usize,
    pub eta_min: f64,
}

impl CosineSchedule {
    pub fn lr(&self, base: f64, step: usize) -> f64 {
        if self.t_max == 0 {
            return base;
        }
        let t = step.min(self.t_max) as f64 / self.t_max as f64;
        self.eta_min + (base - self.eta_min) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Sets every group's learning rate for the given step.
    pub fn apply<T: Scalar>(&self, opt: &mut AdamW<T>, step: usize) {
        for g in &mut opt.groups {
            g.lr = self.lr(g.base_lr, step);
        }
    }
}
