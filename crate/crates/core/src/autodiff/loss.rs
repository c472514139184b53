//! Loss functions and embedding normalization.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::basic::sigmoid;
use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Denominator of the cross-modal contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CmaMode {
    /// Positive pair excluded from the denominator (sum over `k != i`).
    #[default]
    Literal,
    /// Positive pair included (standard InfoNCE).
    Inclusive,
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    m + libm::log(vals.map(|v| libm::exp(v - m)).sum::<f64>())
}

impl<T: Real> Graph<T> {
    /// Sum of squared errors divided by the batch size (`shape[0]`).
    pub fn sse(&mut self, f: Var, y: Var) -> Result<Var> {
        let s = self.shape(f).to_vec();
        if s != self.shape(y) || s.is_empty() {
            return Err(Error::shape("sse", &s, self.shape(y)));
        }
        let inv_n = T::one() / T::of(s[0] as f64);
        let total: f64 = self
            .value(f)
            .data()
            .iter()
            .zip(self.value(y).data())
            .map(|(&a, &b)| ((a - b) * (a - b)).f64())
            .sum();
        self.push(
            "sse",
            Tensor::scalar(T::of(total / s[0] as f64)),
            &[f, y],
            Box::new(move |args| {
                let k = T::of(2.0) * inv_n * args.grad.item();
                let diff: Vec<T> = args.inputs[0]
                    .data()
                    .iter()
                    .zip(args.inputs[1].data())
                    .map(|(&a, &b)| k * (a - b))
                    .collect();
                let gy = args.needs[1].then(|| {
                    Tensor::from_vec(args.inputs[1].shape(), diff.iter().map(|&v| -v).collect()).unwrap()
                });
                vec![Tensor::from_vec(args.inputs[0].shape(), diff).ok(), gy]
            }),
        )
    }

    /// Mean softmax cross-entropy of `logits[N,K]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &[labels.len(), 0], &s));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::config("labels", format!("class id {bad} outside [0,{k})")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let lse = log_sum_exp(row.iter().map(|v| v.f64()));
            for j in 0..k {
                probs[i * k + j] = T::of(libm::exp(row[j].f64() - lse));
            }
            total += lse - row[labels[i]].f64();
        }
        let labels = labels.to_vec();
        self.push(
            "cross_entropy",
            Tensor::scalar(T::of(total / n as f64)),
            &[logits],
            Box::new(move |args| {
                let scale = args.grad.item() / T::of(n as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                vec![Tensor::from_vec(&[n, k], d).ok()]
            }),
        )
    }

    /// Mean binary cross-entropy on logits against a constant target in [0,1].
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        if self.shape(logits) != self.shape(target) {
            return Err(Error::shape("bce_with_logits", self.shape(logits), self.shape(target)));
        }
        let m = self.value(logits).len();
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&x, &t)| {
                let (x, t) = (x.f64(), t.f64());
                x.max(0.0) - x * t + libm::log1p(libm::exp(-x.abs()))
            })
            .sum();
        self.push(
            "bce_with_logits",
            Tensor::scalar(T::of(total / m as f64)),
            &[logits, target],
            Box::new(move |args| {
                let k = args.grad.item() / T::of(m as f64);
                let xv = args.inputs[0].data();
                let tv = args.inputs[1].data();
                let gx = xv.iter().zip(tv).map(|(&x, &t)| k * (sigmoid(x) - t)).collect();
                let gt = args.needs[1].then(|| {
                    Tensor::from_vec(args.inputs[1].shape(), xv.iter().map(|&x| -k * x).collect()).unwrap()
                });
                vec![Tensor::from_vec(args.inputs[0].shape(), gx).ok(), gt]
            }),
        )
    }

    /// Soft Dice loss `1 - (2 sum(p t) + 1) / (sum p + sum t + 1)` with
    /// `p = sigmoid(logits)`, averaged over the batch axis.
    pub fn soft_dice_loss(&mut self, logits: Var, target: Var) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s != self.shape(target) || s.is_empty() {
            return Err(Error::shape("soft_dice_loss", &s, self.shape(target)));
        }
        let n = s[0];
        let per = self.value(logits).len() / n;
        let smooth = 1.0;
        let probs: Vec<f64> = self.value(logits).data().iter().map(|&x| sigmoid(x).f64()).collect();
        let tv: Vec<f64> = self.value(target).data().iter().map(|t| t.f64()).collect();
        let mut parts = Vec::with_capacity(n);
        let mut total = 0.0;
        for i in 0..n {
            let p = &probs[i * per..(i + 1) * per];
            let t = &tv[i * per..(i + 1) * per];
            let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
            let num = 2.0 * inter + smooth;
            let den = p.iter().sum::<f64>() + t.iter().sum::<f64>() + smooth;
            total += 1.0 - num / den;
            parts.push((num, den));
        }
        self.push(
            "soft_dice_loss",
            Tensor::scalar(T::of(total / n as f64)),
            &[logits, target],
            Box::new(move |args| {
                let g = args.grad.item().f64() / n as f64;
                let mut d = vec![T::zero(); n * per];
                for i in 0..n {
                    let (num, den) = parts[i];
                    for j in i * per..(i + 1) * per {
                        let dd = (2.0 * tv[j] * den - num) / (den * den);
                        d[j] = T::of(-g * dd * probs[j] * (1.0 - probs[j]));
                    }
                }
                vec![Tensor::from_vec(args.inputs[0].shape(), d).ok(), None]
            }),
        )
    }

    /// Row-wise L2 normalization of `x[N,D]`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("l2_normalize", &[0, 0], &s));
        }
        let d = s[1];
        let xv = self.value(x).data();
        let norms: Vec<T> = xv
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::of(1e-12)))
            .collect();
        let data = xv
            .chunks(d)
            .zip(&norms)
            .flat_map(|(r, &nr)| r.iter().map(move |&v| v / nr))
            .collect();
        let out = Tensor::from_vec(&s, data)?;
        self.push(
            "l2_normalize",
            out,
            &[x],
            Box::new(move |args| {
                let y = args.output.data();
                let g = args.grad.data();
                let mut gx = Vec::with_capacity(g.len());
                for ((yr, gr), &nr) in y.chunks(d).zip(g.chunks(d)).zip(&norms) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / nr));
                }
                vec![Tensor::from_vec(args.inputs[0].shape(), gx).ok()]
            }),
        )
    }

    /// Cross-modal contrastive loss between 2D embeddings `z[N,D]` and 3D
    /// embeddings `z_star[N,D]`, summed over the batch:
    /// `-sum_i log(exp(s_ii) / sum_{k in den(i)} exp(s_ik))`, `s_ik = z_i . z*_k / tau`.
    pub fn cma_loss(&mut self, z: Var, z_star: Var, tau: f64, mode: CmaMode) -> Result<Var> {
        let s = self.shape(z).to_vec();
        if s.len() != 2 || self.shape(z_star) != s.as_slice() {
            return Err(Error::shape("cma_loss", &s, self.shape(z_star)));
        }
        let (n, d) = (s[0], s[1]);
        if n < 2 && mode == CmaMode::Literal {
            return Err(Error::DegenerateBatch(format!(
                "contrastive loss needs at least 2 pairs, got {n}"
            )));
        }
        if tau <= 0.0 {
            return Err(Error::config("tau", "temperature must be positive"));
        }
        let zv: Vec<f64> = self.value(z).data().iter().map(|v| v.f64()).collect();
        let sv: Vec<f64> = self.value(z_star).data().iter().map(|v| v.f64()).collect();
        let mut sim = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let dot: f64 = zv[i * d..(i + 1) * d].iter().zip(&sv[k * d..(k + 1) * d]).map(|(a, b)| a * b).sum();
                sim[i * n + k] = dot / tau;
            }
        }
        let in_den = move |i: usize, k: usize| mode == CmaMode::Inclusive || i != k;
        // dL/dsim
        let mut dsim = vec![0.0; n * n];
        let mut total = 0.0;
        for i in 0..n {
            let row = &sim[i * n..(i + 1) * n];
            let lse = log_sum_exp((0..n).filter(|&k| in_den(i, k)).map(|k| row[k]));
            total += lse - row[i];
            for k in 0..n {
                if in_den(i, k) {
                    dsim[i * n + k] += libm::exp(row[k] - lse);
                }
            }
            dsim[i * n + i] -= 1.0;
        }
        self.push(
            "cma_loss",
            Tensor::scalar(T::of(total)),
            &[z, z_star],
            Box::new(move |args| {
                let g = args.grad.item().f64() / tau;
                let mut gz = vec![T::zero(); n * d];
                let mut gs = vec![T::zero(); n * d];
                for i in 0..n {
                    for k in 0..n {
                        let w = g * dsim[i * n + k];
                        for j in 0..d {
                            gz[i * d + j] += T::of(w * sv[k * d + j]);
                            gs[k * d + j] += T::of(w * zv[i * d + j]);
                        }
                    }
                }
                vec![
                    Tensor::from_vec(&[n, d], gz).ok(),
                    Tensor::from_vec(&[n, d], gs).ok(),
                ]
            }),
        )
    }
}
