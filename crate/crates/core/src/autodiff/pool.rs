//! 2x max pooling and bilinear resizing.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

const PAD: usize = usize::MAX;

/// Linear interpolation taps for resizing `n_in -> n_out` with half-pixel
/// centers and edge clamping.
pub(crate) fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = libm::floor(src) as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<T: Real> Graph<T> {
    /// 2x2 max pooling of `[N,C,H,W]`; odd extents are zero-padded on the
    /// bottom/right.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("maxpool2d", &[0, 0, 0, 0], &s));
        }
        self.maxpool_nd("maxpool2d", x, s[0] * s[1], [1, s[2], s[3]], [1, 2, 2])
    }

    /// 2x2x2 max pooling of `[N,C,D,H,W]` with the same padding policy.
    pub fn maxpool3d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(Error::shape("maxpool3d", &[0, 0, 0, 0, 0], &s));
        }
        self.maxpool_nd("maxpool3d", x, s[0] * s[1], [s[2], s[3], s[4]], [2, 2, 2])
    }

    fn maxpool_nd(
        &mut self,
        op: &'static str,
        x: Var,
        planes: usize,
        sp: [usize; 3],
        f: [usize; 3],
    ) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let o = [sp[0].div_ceil(f[0]), sp[1].div_ceil(f[1]), sp[2].div_ceil(f[2])];
        let in_plane = sp[0] * sp[1] * sp[2];
        let out_plane = o[0] * o[1] * o[2];
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); planes * out_plane];
        let mut arg = vec![PAD; planes * out_plane];
        for p in 0..planes {
            let src = &xv[p * in_plane..(p + 1) * in_plane];
            for z in 0..o[0] {
                for y in 0..o[1] {
                    for xx in 0..o[2] {
                        let oi = p * out_plane + (z * o[1] + y) * o[2] + xx;
                        let mut best: Option<(T, usize)> = None;
                        let mut padded = false;
                        for dz in 0..f[0] {
                            for dy in 0..f[1] {
                                for dx in 0..f[2] {
                                    let (iz, iy, ix) = (z * f[0] + dz, y * f[1] + dy, xx * f[2] + dx);
                                    if iz >= sp[0] || iy >= sp[1] || ix >= sp[2] {
                                        padded = true;
                                        continue;
                                    }
                                    let ii = (iz * sp[1] + iy) * sp[2] + ix;
                                    let v = src[ii];
                                    if best.is_none_or(|(b, _)| v > b) {
                                        best = Some((v, ii));
                                    }
                                }
                            }
                        }
                        let (v, ii) = best.expect("window has at least one in-bounds element");
                        if padded && v < T::zero() {
                            out[oi] = T::zero();
                        } else {
                            out[oi] = v;
                            arg[oi] = p * in_plane + ii;
                        }
                    }
                }
            }
        }
        let mut shape = in_shape[..in_shape.len() - if f[0] == 1 { 2 } else { 3 }].to_vec();
        if f[0] != 1 {
            shape.push(o[0]);
        }
        shape.push(o[1]);
        shape.push(o[2]);
        let out = Tensor::from_vec(&shape, out)?;
        self.push(
            op,
            out,
            &[x],
            Box::new(move |args| {
                let mut gin = Tensor::zeros(&in_shape);
                let d = gin.data_mut();
                for (&a, &g) in arg.iter().zip(args.grad.data()) {
                    if a != PAD {
                        d[a] += g;
                    }
                }
                vec![Some(gin)]
            }),
        )
    }

    /// Bilinear resize of `[N,C,H,W]` to `[N,C,oh,ow]` (half-pixel centers).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || oh == 0 || ow == 0 {
            return Err(Error::shape("resize_bilinear", &[0, 0, oh, ow], &s));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let ty = linear_taps(h, oh);
        let tx = linear_taps(w, ow);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (yo, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let (fy, fx) = (T::of(fy), T::of(fx));
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[yo * ow + xo] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let out = Tensor::from_vec(&[s[0], s[1], oh, ow], out)?;
        self.push(
            "resize_bilinear",
            out,
            &[x],
            Box::new(move |args| {
                let mut gin = Tensor::zeros(&s);
                let d = gin.data_mut();
                let g = args.grad.data();
                for p in 0..planes {
                    let src = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut d[p * h * w..(p + 1) * h * w];
                    for (yo, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = src[yo * ow + xo];
                            let (fy, fx) = (T::of(fy), T::of(fx));
                            dst[y0 * w + x0] += gv * (T::one() - fy) * (T::one() - fx);
                            dst[y0 * w + x1] += gv * (T::one() - fy) * fx;
                            dst[y1 * w + x0] += gv * fy * (T::one() - fx);
                            dst[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                vec![Some(gin)]
            }),
        )
    }

    /// Bilinear 2x upsampling followed by a crop to `(h, w)`, which undoes the
    /// padding applied by [`Graph::maxpool2d`] on odd extents.
    pub fn upsample2d_to(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || h > 2 * s[2] || w > 2 * s[3] {
            return Err(Error::shape("upsample2d", &[s[0], s[1], h, w], &s));
        }
        let up = self.resize_bilinear(x, 2 * s[2], 2 * s[3])?;
        let up = if h < 2 * s[2] { self.narrow(up, 2, 0, h)? } else { up };
        if w < 2 * s[3] {
            self.narrow(up, 3, 0, w)
        } else {
            Ok(up)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_matches_window_max() {
        let data: Vec<f64> = (0..2 * 5 * 7).map(|i| ((i * 37 % 23) as f64) - 11.0).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 2, 5, 7], data.clone()).unwrap());
        let y = g.maxpool2d(x).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 3, 4]);
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..4 {
                    let mut m = f64::NEG_INFINITY;
                    let mut pad = false;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (iy, ix) = (oy * 2 + dy, ox * 2 + dx);
                            if iy < 5 && ix < 7 {
                                m = m.max(data[(c * 5 + iy) * 7 + ix]);
                            } else {
                                pad = true;
                            }
                        }
                    }
                    if pad {
                        m = m.max(0.0);
                    }
                    assert_eq!(g.value(y).data()[(c * 3 + oy) * 4 + ox], m);
                }
            }
        }
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 4, 6], 0.7));
        let p = g.maxpool2d(x).unwrap();
        let u = g.upsample2d_to(p, 4, 6).unwrap();
        assert!(g.value(u).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let x = g.constant(Tensor::full(&[1, 1, 5, 3], 0.2));
        let p = g.maxpool2d(x).unwrap();
        let u = g.upsample2d_to(p, 5, 3).unwrap();
        assert_eq!(g.shape(u), &[1, 1, 5, 3]);
        assert!(g.value(u).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }
}
