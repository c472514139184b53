//! Elementwise, reduction and layout operations.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{split_axis, Tensor};

fn same_shape<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

fn gelu<T: Real>(x: T) -> (T, T) {
    // exact erf form
    let xf = x.f64();
    let cdf = 0.5 * (1.0 + libm::erf(xf / core::f64::consts::SQRT_2));
    let pdf = libm::exp(-0.5 * xf * xf) / libm::sqrt(2.0 * core::f64::consts::PI);
    (T::of(xf * cdf), T::of(cdf + xf * pdf))
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(
            "add",
            out,
            &[a, b],
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        self.push(
            "sub",
            out,
            &[a, b],
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.map(|v| -v))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        self.push(
            "mul",
            out,
            &[a, b],
            Box::new(|args| {
                let g = args.grad.data();
                let prod = |t: &Tensor<T>| {
                    let d = t.data().iter().zip(g).map(|(&x, &y)| x * y).collect();
                    Tensor::from_vec(t.shape(), d).ok()
                };
                vec![
                    if args.needs[0] { prod(args.inputs[1]) } else { None },
                    if args.needs[1] { prod(args.inputs[0]) } else { None },
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * k);
        self.push(
            "scale",
            out,
            &[a],
            Box::new(move |args| vec![Some(args.grad.map(|v| v * k))]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(
            "relu",
            out,
            &[a],
            Box::new(|args| {
                let d = args
                    .output
                    .data()
                    .iter()
                    .zip(args.grad.data())
                    .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                vec![Tensor::from_vec(args.grad.shape(), d).ok()]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(
            "sigmoid",
            out,
            &[a],
            Box::new(|args| {
                let d = args
                    .output
                    .data()
                    .iter()
                    .zip(args.grad.data())
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                vec![Tensor::from_vec(args.grad.shape(), d).ok()]
            }),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| gelu(v).0);
        self.push(
            "gelu",
            out,
            &[a],
            Box::new(|args| {
                let d = args.inputs[0]
                    .data()
                    .iter()
                    .zip(args.grad.data())
                    .map(|(&x, &g)| g * gelu(x).1)
                    .collect();
                vec![Tensor::from_vec(args.grad.shape(), d).ok()]
            }),
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(
            "sum",
            out,
            &[a],
            Box::new(|args| vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.item()))]),
        )
    }

    /// `sum(a * weights)` against a constant weight tensor.
    pub fn dot_const(&mut self, a: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.shape(a) {
            return Err(Error::shape("dot_const", self.shape(a), weights.shape()));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&x, &w)| x * w)
            .sum();
        self.push(
            "dot_const",
            Tensor::scalar(s),
            &[a],
            Box::new(move |args| {
                let g = args.grad.item();
                vec![Some(weights.map(|w| w * g))]
            }),
        )
    }

    /// Weighted sum of single-element losses.
    pub fn combine(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("combine", &[1], self.shape(v)));
            }
            total += w * self.value(v).item();
        }
        let weights: Vec<T> = terms.iter().map(|t| t.1).collect();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            "combine",
            Tensor::scalar(total),
            &inputs,
            Box::new(move |args| {
                let g = args.grad.item();
                args.inputs
                    .iter()
                    .zip(&weights)
                    .map(|(t, &w)| Some(Tensor::full(t.shape(), g * w)))
                    .collect()
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push(
            "reshape",
            out,
            &[a],
            Box::new(|args| vec![args.grad.clone().reshaped(args.inputs[0].shape()).ok()]),
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&sizes) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        self.push(
            "concat",
            out,
            parts,
            Box::new(move |args| {
                let g = args.grad.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(sizes.len());
                for (i, &len) in sizes.iter().enumerate() {
                    if args.needs[i] {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        grads.push(Tensor::from_vec(args.inputs[i].shape(), d).ok());
                    } else {
                        grads.push(None);
                    }
                    offset += len;
                }
                grads
            }),
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        if axis >= in_shape.len() || start + len > in_shape[axis] {
            return Err(Error::shape("narrow", &in_shape, &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(&in_shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = in_shape.clone();
        shape[axis] = len;
        let out = Tensor::from_vec(&shape, data)?;
        self.push(
            "narrow",
            out,
            &[a],
            Box::new(move |args| {
                let mut gin = Tensor::zeros(&in_shape);
                let g = args.grad.data();
                let d = gin.data_mut();
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gin)]
            }),
        )
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        if axis >= in_shape.len() || in_shape[axis] == 0 {
            return Err(Error::shape("mean_axis", &in_shape, &[axis]));
        }
        let (outer, n, inner) = split_axis(&in_shape, axis);
        let inv = T::one() / T::of(n as f64);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let mut shape = in_shape.clone();
        shape.remove(axis);
        let out = Tensor::from_vec(&shape, data)?;
        self.push(
            "mean_axis",
            out,
            &[a],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut gin = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let row = &g[o * inner..(o + 1) * inner];
                    for _ in 0..n {
                        gin.extend(row.iter().map(|&v| v * inv));
                    }
                }
                vec![Tensor::from_vec(&in_shape, gin).ok()]
            }),
        )
    }

    /// Global average pool over all axes after the channel axis: `[N,C,...] -> [N,C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 3 {
            return Err(Error::shape("global_avg_pool", &[0, 0, 0], &s));
        }
        let spatial: usize = s[2..].iter().product();
        let r = self.reshape(a, &[s[0], s[1], spatial])?;
        self.mean_axis(r, 2)
    }

    /// `x[N,C,...] * s[N,C]` broadcast over the trailing axes.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        if xs.len() < 2 || ss != xs[..2] {
            return Err(Error::shape("mul_channel", &xs[..2.min(xs.len())], &ss));
        }
        let inner: usize = xs[2..].iter().product();
        let xv = self.value(x).data();
        let sv = self.value(s).data();
        let data: Vec<T> = xv
            .chunks(inner)
            .zip(sv)
            .flat_map(|(row, &k)| row.iter().map(move |&v| v * k))
            .collect();
        let out = Tensor::from_vec(&xs, data)?;
        self.push(
            "mul_channel",
            out,
            &[x, s],
            Box::new(move |args| {
                let g = args.grad.data();
                let xv = args.inputs[0].data();
                let sv = args.inputs[1].data();
                let gx = args.needs[0].then(|| {
                    let d = g
                        .chunks(inner)
                        .zip(sv)
                        .flat_map(|(row, &k)| row.iter().map(move |&v| v * k))
                        .collect();
                    Tensor::from_vec(args.inputs[0].shape(), d).unwrap()
                });
                let gs = args.needs[1].then(|| {
                    let d = g
                        .chunks(inner)
                        .zip(xv.chunks(inner))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    Tensor::from_vec(args.inputs[1].shape(), d).unwrap()
                });
                vec![gx, gs]
            }),
        )
    }

    /// `x[N,in] * w[out,in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.shape(b) != [ws[0]] {
            return Err(Error::shape("linear", &[xs.first().copied().unwrap_or(0), ws[1]], &xs));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * fout];
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(self.value(b).data());
        }
        crate::real::matmul_nt(n, fin, fout, self.value(x).data(), self.value(w).data(), &mut out, true);
        let out = Tensor::from_vec(&[n, fout], out)?;
        self.push(
            "linear",
            out,
            &[x, w, b],
            Box::new(move |args| {
                let g = args.grad.data();
                let gx = args.needs[0].then(|| {
                    let mut d = vec![T::zero(); n * fin];
                    crate::real::matmul(n, fout, fin, g, args.inputs[1].data(), &mut d, false);
                    Tensor::from_vec(&[n, fin], d).unwrap()
                });
                let gw = args.needs[1].then(|| {
                    let mut d = vec![T::zero(); fout * fin];
                    crate::real::matmul_tn(fout, n, fin, g, args.inputs[0].data(), &mut d, false);
                    Tensor::from_vec(&[fout, fin], d).unwrap()
                });
                let gb = args.needs[2].then(|| {
                    let mut d = vec![T::zero(); fout];
                    for row in g.chunks(fout) {
                        for (a, &v) in d.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_vec(&[fout], d).unwrap()
                });
                vec![gx, gw, gb]
            }),
        )
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
