//! Spatial token mixing used by the multi-axis gated MLP.
//!
//! The feature map is partitioned either into non-overlapping `b x b`
//! windows (local mixing across in-window positions) or into a `b x b`
//! grid of cells (global mixing across cells at a fixed in-cell offset).
//! Extents that are not multiples of `b` are zero-padded; padded positions
//! feed zeros into the mixing and their outputs are dropped.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::{matmul, matmul_nt, matmul_tn, Real};
use crate::tensor::Tensor;

const OUTSIDE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixAxis {
    /// Mix the `b*b` positions inside each window.
    Block(usize),
    /// Mix the `b*b` cells of a grid partition.
    Grid(usize),
}

impl MixAxis {
    pub fn size(self) -> usize {
        match self {
            MixAxis::Block(b) | MixAxis::Grid(b) => b,
        }
    }
}

/// `index[p * groups + g]` = flat pixel index of token `p` in group `g`.
fn token_map(axis: MixAxis, h: usize, w: usize) -> (usize, Vec<usize>) {
    let b = axis.size();
    let (hp, wp) = (h.div_ceil(b) * b, w.div_ceil(b) * b);
    let (gh, gw) = (hp / b, wp / b);
    let groups = gh * gw;
    let mut map = vec![OUTSIDE; b * b * groups];
    for py in 0..b {
        for px in 0..b {
            let p = py * b + px;
            for gy in 0..gh {
                for gx in 0..gw {
                    let (y, x) = match axis {
                        MixAxis::Block(_) => (gy * b + py, gx * b + px),
                        MixAxis::Grid(_) => (py * gh + gy, px * gw + gx),
                    };
                    if y < h && x < w {
                        map[p * groups + gy * gw + gx] = y * w + x;
                    }
                }
            }
        }
    }
    (groups, map)
}

impl<T: Real> Graph<T> {
    /// Applies `w[P,P] * tokens + b[P]` along the chosen spatial axis of
    /// `x[N,C,H,W]`, with `P = b*b`.
    pub fn spatial_mix(&mut self, x: Var, w: Var, bias: Var, axis: MixAxis) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let p = axis.size() * axis.size();
        if s.len() != 4 {
            return Err(Error::shape("spatial_mix", &[0, 0, 0, 0], &s));
        }
        if self.shape(w) != [p, p] || self.shape(bias) != [p] {
            return Err(Error::shape("spatial_mix", &[p, p], self.shape(w)));
        }
        let (planes, h, wd) = (s[0] * s[1], s[2], s[3]);
        let plane = h * wd;
        let (groups, map) = token_map(axis, h, wd);
        let cols = planes * groups;

        let gather = |src: &[T]| {
            let mut m = vec![T::zero(); p * cols];
            for pi in 0..p {
                for pl in 0..planes {
                    for g in 0..groups {
                        let idx = map[pi * groups + g];
                        if idx != OUTSIDE {
                            m[pi * cols + pl * groups + g] = src[pl * plane + idx];
                        }
                    }
                }
            }
            m
        };
        let scatter = |m: &[T], dst: &mut [T]| {
            for pi in 0..p {
                for pl in 0..planes {
                    for g in 0..groups {
                        let idx = map[pi * groups + g];
                        if idx != OUTSIDE {
                            dst[pl * plane + idx] = m[pi * cols + pl * groups + g];
                        }
                    }
                }
            }
        };

        let tokens = gather(self.value(x).data());
        let mut mixed = vec![T::zero(); p * cols];
        for (pi, row) in mixed.chunks_mut(cols).enumerate() {
            row.iter_mut().for_each(|v| *v = self.value(bias).data()[pi]);
        }
        matmul(p, p, cols, self.value(w).data(), &tokens, &mut mixed, true);
        let mut out = vec![T::zero(); planes * plane];
        scatter(&mixed, &mut out);
        let out = Tensor::from_vec(&s, out)?;

        self.push(
            "spatial_mix",
            out,
            &[x, w, bias],
            Box::new(move |args| {
                let gmat = {
                    let g = args.grad.data();
                    let mut m = vec![T::zero(); p * cols];
                    for pi in 0..p {
                        for pl in 0..planes {
                            for gi in 0..groups {
                                let idx = map[pi * groups + gi];
                                if idx != OUTSIDE {
                                    m[pi * cols + pl * groups + gi] = g[pl * plane + idx];
                                }
                            }
                        }
                    }
                    m
                };
                let gw = args.needs[1].then(|| {
                    let mut d = vec![T::zero(); p * p];
                    matmul_nt(p, cols, p, &gmat, &tokens, &mut d, false);
                    Tensor::from_vec(&[p, p], d).unwrap()
                });
                let gb = args.needs[2].then(|| {
                    let d = gmat.chunks(cols).map(|r| r.iter().copied().sum()).collect();
                    Tensor::from_vec(&[p], d).unwrap()
                });
                let gx = args.needs[0].then(|| {
                    let mut gt = vec![T::zero(); p * cols];
                    matmul_tn(p, p, cols, args.inputs[1].data(), &gmat, &mut gt, false);
                    let mut d = vec![T::zero(); planes * plane];
                    for pi in 0..p {
                        for pl in 0..planes {
                            for gi in 0..groups {
                                let idx = map[pi * groups + gi];
                                if idx != OUTSIDE {
                                    d[pl * plane + idx] = gt[pi * cols + pl * groups + gi];
                                }
                            }
                        }
                    }
                    Tensor::from_vec(args.inputs[0].shape(), d).unwrap()
                });
                vec![gx, gw, gb]
            }),
        )
    }
}
