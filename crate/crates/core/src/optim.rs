//! Adam and learning-rate schedules.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, Store};
use crate::real::Real;
use crate::tensor::Tensor;

/// Adam with bias correction; one moment pair per store entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &Store<T>) -> Self {
        let zeros: Vec<Vec<T>> = store
            .entries()
            .iter()
            .map(|e| alloc::vec![T::zero(); e.value.len()])
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Parameters without a gradient are left alone but
    /// the step counter still advances.
    pub fn step(&mut self, store: &mut Store<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::shape("adam", &[store.len()], &[self.m.len()]));
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        for (id, g) in grads {
            let i = id.index();
            let p = store.get_mut(*id);
            if p.len() != g.len() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `base * gamma^(step / every)`.
    Step { base: f64, gamma: f64, every: u64 },
    /// `eta_min + (base - eta_min) (1 + cos(pi step / t_max)) / 2`.
    Cosine { base: f64, t_max: u64, eta_min: f64 },
    /// `base` until `fraction * total` steps, then `base * gamma`.
    DecayAt {
        base: f64,
        gamma: f64,
        total: u64,
        fraction: f64,
    },
    Constant { base: f64 },
}

impl LrSchedule {
    /// Reconstruction schedule: 4e-4 halved every 5000 steps.
    pub fn reconstruction() -> Self {
        LrSchedule::Step {
            base: 4e-4,
            gamma: 0.5,
            every: 5000,
        }
    }

    /// Classification schedule: 1e-4 with cosine annealing over 200 steps.
    pub fn classification() -> Self {
        LrSchedule::Cosine {
            base: 1e-4,
            t_max: 200,
            eta_min: 0.0,
        }
    }

    /// Segmentation schedule: 1e-4 halved once at 60% of `total`.
    pub fn segmentation(total: u64) -> Self {
        LrSchedule::DecayAt {
            base: 1e-4,
            gamma: 0.5,
            total,
            fraction: 0.6,
        }
    }

    pub fn with_base(self, lr: f64) -> Self {
        match self {
            LrSchedule::Step { gamma, every, .. } => LrSchedule::Step { base: lr, gamma, every },
            LrSchedule::Cosine { t_max, eta_min, .. } => LrSchedule::Cosine { base: lr, t_max, eta_min },
            LrSchedule::DecayAt {
                gamma, total, fraction, ..
            } => LrSchedule::DecayAt {
                base: lr,
                gamma,
                total,
                fraction,
            },
            LrSchedule::Constant { .. } => LrSchedule::Constant { base: lr },
        }
    }

    /// Learning rate used for update number `step` (0-based).
    pub fn lr(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Step { base, gamma, every } => base * libm::pow(gamma, (step / every.max(1)) as f64),
            LrSchedule::Cosine { base, t_max, eta_min } => {
                let x = core::f64::consts::PI * step as f64 / t_max.max(1) as f64;
                eta_min + (base - eta_min) * (1.0 + libm::cos(x)) / 2.0
            }
            LrSchedule::DecayAt {
                base,
                gamma,
                total,
                fraction,
            } => {
                if (step as f64) < fraction * total as f64 {
                    base
                } else {
                    base * gamma
                }
            }
            LrSchedule::Constant { base } => base,
        }
    }
}

/// Sample indices for update `step`: the sample stream visits every index
/// once per epoch in an order shuffled from `(seed, epoch)`, and batches are
/// consecutive slices of that stream.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut epoch = u64::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for b in 0..batch as u64 {
        let k = step * batch as u64 + b;
        let e = k / n as u64;
        if e != epoch {
            epoch = e;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(e);
            perm = (0..n).collect();
            perm.shuffle(&mut rng);
        }
        out.push(perm[(k % n as u64) as usize]);
    }
    out
}
