//! Same-padded stride-1 convolutions (2D and 3D) via im2col + gemm.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::{matmul, matmul_nt, matmul_tn, Real};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geom {
    cin: usize,
    sp: [usize; 3],
    k: [usize; 3],
}

impl Geom {
    fn rows(&self) -> usize {
        self.cin * self.k[0] * self.k[1] * self.k[2]
    }
    fn cols(&self) -> usize {
        self.sp[0] * self.sp[1] * self.sp[2]
    }
}

/// Valid output range along one axis for kernel offset `o` with padding `p`.
#[inline]
fn valid(n: usize, o: usize, p: usize) -> (usize, usize) {
    // input index = out + o - p must lie in [0, n)
    let lo = p.saturating_sub(o);
    let hi = (n + p).saturating_sub(o).min(n);
    (lo, hi.max(lo))
}

fn im2col<T: Real>(x: &[T], g: Geom, cols: &mut [T]) {
    let [d, h, w] = g.sp;
    let [kd, kh, kw] = g.k;
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    let ncol = g.cols();
    cols.iter_mut().for_each(|v| *v = T::zero());
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &x[c * ncol..(c + 1) * ncol];
        for oz in 0..kd {
            let (z0, z1) = valid(d, oz, pd);
            for oy in 0..kh {
                let (y0, y1) = valid(h, oy, ph);
                for ox in 0..kw {
                    let (x0, x1) = valid(w, ox, pw);
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    for z in z0..z1 {
                        let iz = z + oz - pd;
                        for y in y0..y1 {
                            let iy = y + oy - ph;
                            let src = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let out = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
                            out[x0..x1].copy_from_slice(&src[x0 + ox - pw..x1 + ox - pw]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: Geom, x: &mut [T]) {
    let [d, h, w] = g.sp;
    let [kd, kh, kw] = g.k;
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    let ncol = g.cols();
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &mut x[c * ncol..(c + 1) * ncol];
        for oz in 0..kd {
            let (z0, z1) = valid(d, oz, pd);
            for oy in 0..kh {
                let (y0, y1) = valid(h, oy, ph);
                for ox in 0..kw {
                    let (x0, x1) = valid(w, ox, pw);
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    for z in z0..z1 {
                        let iz = z + oz - pd;
                        for y in y0..y1 {
                            let iy = y + oy - ph;
                            let dst = &mut xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let s = &src[(z * h + y) * w..(z * h + y + 1) * w];
                            for (a, &b) in dst[x0 + ox - pw..x1 + ox - pw].iter_mut().zip(&s[x0..x1]) {
                                *a += b;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// 2D convolution, `x[N,Cin,H,W]`, `w[Cout,Cin,k,k]` (odd k), `b[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] {
            return Err(Error::shape("conv2d", &[ws.first().copied().unwrap_or(0), ws.get(1).copied().unwrap_or(0)], &xs));
        }
        let geom = Geom {
            cin: xs[1],
            sp: [1, xs[2], xs[3]],
            k: [1, ws[2], ws[3]],
        };
        self.conv_nd("conv2d", x, w, b, xs[0], ws[0], geom, &[xs[2], xs[3]])
    }

    /// 3D convolution, `x[N,Cin,D,H,W]`, `w[Cout,Cin,k,k,k]`, `b[Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[1] {
            return Err(Error::shape("conv3d", &[ws.first().copied().unwrap_or(0), ws.get(1).copied().unwrap_or(0)], &xs));
        }
        let geom = Geom {
            cin: xs[1],
            sp: [xs[2], xs[3], xs[4]],
            k: [ws[2], ws[3], ws[4]],
        };
        self.conv_nd("conv3d", x, w, b, xs[0], ws[0], geom, &[xs[2], xs[3], xs[4]])
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_nd(
        &mut self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Var,
        n: usize,
        cout: usize,
        geom: Geom,
        spatial: &[usize],
    ) -> Result<Var> {
        if geom.k.iter().any(|k| k % 2 == 0) {
            return Err(Error::config("kernel", "convolution kernels must have odd extent"));
        }
        if self.shape(b) != [cout] {
            return Err(Error::shape(op, &[cout], self.shape(b)));
        }
        let (krows, ncol) = (geom.rows(), geom.cols());
        let in_stride = geom.cin * ncol;
        let mut out = vec![T::zero(); n * cout * ncol];
        let mut cols = vec![T::zero(); krows * ncol];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for s in 0..n {
                let dst = &mut out[s * cout * ncol..(s + 1) * cout * ncol];
                for (co, row) in dst.chunks_mut(ncol).enumerate() {
                    row.iter_mut().for_each(|v| *v = bv[co]);
                }
                let src = &xv[s * in_stride..(s + 1) * in_stride];
                if krows == geom.cin {
                    // 1x1 kernel: the input is already the column matrix
                    matmul(cout, krows, ncol, wv, src, dst, true);
                } else {
                    im2col(src, geom, &mut cols);
                    matmul(cout, krows, ncol, wv, &cols, dst, true);
                }
            }
        }
        let mut shape = vec![n, cout];
        shape.extend_from_slice(spatial);
        let out = Tensor::from_vec(&shape, out)?;
        self.push(
            op,
            out,
            &[x, w, b],
            Box::new(move |args| {
                let xv = args.inputs[0].data();
                let wv = args.inputs[1].data();
                let g = args.grad.data();
                let mut gx = args.needs[0].then(|| vec![T::zero(); n * in_stride]);
                let mut gw = args.needs[1].then(|| vec![T::zero(); cout * krows]);
                let mut gb = args.needs[2].then(|| vec![T::zero(); cout]);
                let pointwise = krows == geom.cin;
                let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); krows * ncol] };
                let mut gcols = vec![T::zero(); if gx.is_some() { krows * ncol } else { 0 }];
                for s in 0..n {
                    let gs = &g[s * cout * ncol..(s + 1) * cout * ncol];
                    let src = &xv[s * in_stride..(s + 1) * in_stride];
                    if let Some(gb) = gb.as_mut() {
                        for (co, row) in gs.chunks(ncol).enumerate() {
                            gb[co] += row.iter().copied().sum::<T>();
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        if pointwise {
                            matmul_nt(cout, ncol, krows, gs, src, gw, true);
                        } else {
                            im2col(src, geom, &mut cols);
                            matmul_nt(cout, ncol, krows, gs, &cols, gw, true);
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[s * in_stride..(s + 1) * in_stride];
                        if pointwise {
                            matmul_tn(krows, cout, ncol, wv, gs, dst, true);
                        } else {
                            matmul_tn(krows, cout, ncol, wv, gs, &mut gcols, false);
                            col2im(&gcols, geom, dst);
                        }
                    }
                }
                vec![
                    gx.map(|d| Tensor::from_vec(args.inputs[0].shape(), d).unwrap()),
                    gw.map(|d| Tensor::from_vec(args.inputs[1].shape(), d).unwrap()),
                    gb.map(|d| Tensor::from_vec(args.inputs[2].shape(), d).unwrap()),
                ]
            }),
        )
    }
}
