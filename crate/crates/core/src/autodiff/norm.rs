//! Batch normalization over the channel axis of `[N,C,...]` tensors.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-channel batch statistics from a training-mode pass. `var` is the
/// unbiased estimate used for running averages.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn check<T: Real>(g: &Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
    let s = g.shape(x);
    if s.len() < 3 {
        return Err(Error::shape("batch_norm", &[0, 0, 0], s));
    }
    let (n, c) = (s[0], s[1]);
    if g.shape(gamma) != [c] || g.shape(beta) != [c] {
        return Err(Error::shape("batch_norm", &[c], g.shape(gamma)));
    }
    Ok((n, c, s[2..].iter().product()))
}

impl<T: Real> Graph<T> {
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, inner) = check(self, x, gamma, beta)?;
        let m = n * inner;
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let row = &xv[(s * c + ch) * inner..(s * c + ch + 1) * inner];
                mean[ch] += row.iter().copied().sum::<T>();
            }
        }
        let inv_m = T::one() / T::of(m as f64);
        mean.iter_mut().for_each(|v| *v *= inv_m);
        for s in 0..n {
            for ch in 0..c {
                let row = &xv[(s * c + ch) * inner..(s * c + ch + 1) * inner];
                var[ch] += row.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        let unbiased: Vec<T> = var
            .iter()
            .map(|&v| if m > 1 { v / T::of((m - 1) as f64) } else { T::zero() })
            .collect();
        var.iter_mut().for_each(|v| *v *= inv_m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();

        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let r = (s * c + ch) * inner..(s * c + ch + 1) * inner;
                for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xv[r]) {
                    *h = (v - mean[ch]) * inv_std[ch];
                    *o = gv[ch] * *h + bv[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let out = Tensor::from_vec(&shape, out)?;
        let stats = BatchStats {
            mean: mean.clone(),
            var: unbiased,
        };
        let v = self.push(
            "batch_norm_train",
            out,
            &[x, gamma, beta],
            Box::new(move |args| {
                let g = args.grad.data();
                let gv = args.inputs[1].data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let r = (s * c + ch) * inner..(s * c + ch + 1) * inner;
                        for (&gi, &h) in g[r.clone()].iter().zip(&xhat[r]) {
                            sum_g[ch] += gi;
                            sum_gx[ch] += gi * h;
                        }
                    }
                }
                let gx = args.needs[0].then(|| {
                    let mut d = vec![T::zero(); g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let k = gv[ch] * inv_std[ch] * inv_m;
                            let r = (s * c + ch) * inner..(s * c + ch + 1) * inner;
                            for ((o, &gi), &h) in d[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                *o = k * (T::of(m as f64) * gi - sum_g[ch] - h * sum_gx[ch]);
                            }
                        }
                    }
                    Tensor::from_vec(args.inputs[0].shape(), d).unwrap()
                });
                vec![
                    gx,
                    Some(Tensor::from_vec(&[c], sum_gx).unwrap()),
                    Some(Tensor::from_vec(&[c], sum_g).unwrap()),
                ]
            }),
        )?;
        Ok((v, stats))
    }

    /// Evaluation-mode normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, inner) = check(self, x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm_eval", &[c], &[running_mean.len()]));
        }
        let mean = running_mean.to_vec();
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let r = (s * c + ch) * inner..(s * c + ch + 1) * inner;
                let k = gv[ch] * inv_std[ch];
                for (o, &v) in out[r.clone()].iter_mut().zip(&xv[r]) {
                    *o = k * (v - mean[ch]) + bv[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let out = Tensor::from_vec(&shape, out)?;
        self.push(
            "batch_norm_eval",
            out,
            &[x, gamma, beta],
            Box::new(move |args| {
                let g = args.grad.data();
                let xv = args.inputs[0].data();
                let gv = args.inputs[1].data();
                let mut gx = vec![T::zero(); g.len()];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let r = (s * c + ch) * inner..(s * c + ch + 1) * inner;
                        let k = gv[ch] * inv_std[ch];
                        for ((o, &gi), &v) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xv[r]) {
                            *o = k * gi;
                            gg[ch] += gi * (v - mean[ch]) * inv_std[ch];
                            gb[ch] += gi;
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(args.inputs[0].shape(), gx).unwrap()),
                    Some(Tensor::from_vec(&[c], gg).unwrap()),
                    Some(Tensor::from_vec(&[c], gb).unwrap()),
                ]
            }),
        )
    }
}
