//! Dense 3D volumes, 2D images and separable resampling.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Labels for the three stored axes, slowest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisOrder {
    /// Scanner-style volume: vertical (z), anterior-posterior (y), left-right (x).
    Dhw,
    /// Unfolded volume: height rows, arc-length columns, normal depth.
    Hwd,
}

impl AxisOrder {
    pub fn tag(self) -> &'static str {
        match self {
            AxisOrder::Dhw => "DHW",
            AxisOrder::Hwd => "HWD",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "DHW" => Some(AxisOrder::Dhw),
            "HWD" => Some(AxisOrder::Hwd),
            _ => None,
        }
    }
}

/// 3D float grid in C order (axis 0 slowest) with per-axis spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub axes: AxisOrder,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(dims: [usize; 3], spacing_mm: [f64; 3], axes: AxisOrder) -> Self {
        Volume {
            dims,
            spacing_mm,
            axes,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: [usize; 3], spacing_mm: [f64; 3], axes: AxisOrder, data: Vec<f32>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::shape("volume", &[n], &[data.len()]));
        }
        Ok(Volume {
            dims,
            spacing_mm,
            axes,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, a: usize, b: usize, c: usize) -> usize {
        (a * self.dims[1] + b) * self.dims[2] + c
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> f32 {
        self.data[self.idx(a, b, c)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Physical extent `(n - 1) * spacing` along each axis.
    pub fn extent_mm(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.dims[a].max(1) - 1) as f64 * self.spacing_mm[a])
    }

    /// Trilinear interpolation at continuous voxel coordinates; neighbours
    /// outside the grid contribute zero.
    #[inline]
    pub fn sample(&self, a: f64, b: f64, c: f64) -> f64 {
        let (fa, fb, fc) = (floor(a), floor(b), floor(c));
        let (ia, ib, ic) = (fa as isize, fb as isize, fc as isize);
        let (ta, tb, tc) = (a - fa, b - fb, c - fc);
        let [da, db, dc] = self.dims.map(|d| d as isize);
        if ia < -1 || ib < -1 || ic < -1 || ia >= da || ib >= db || ic >= dc {
            return 0.0;
        }
        let interior = ia >= 0 && ib >= 0 && ic >= 0 && ia + 1 < da && ib + 1 < db && ic + 1 < dc;
        let at = |x: isize, y: isize, z: isize| -> f64 {
            if interior || (x >= 0 && y >= 0 && z >= 0 && x < da && y < db && z < dc) {
                self.data[((x * db + y) * dc + z) as usize] as f64
            } else {
                0.0
            }
        };
        let c00 = at(ia, ib, ic) * (1.0 - tc) + at(ia, ib, ic + 1) * tc;
        let c01 = at(ia, ib + 1, ic) * (1.0 - tc) + at(ia, ib + 1, ic + 1) * tc;
        let c10 = at(ia + 1, ib, ic) * (1.0 - tc) + at(ia + 1, ib, ic + 1) * tc;
        let c11 = at(ia + 1, ib + 1, ic) * (1.0 - tc) + at(ia + 1, ib + 1, ic + 1) * tc;
        let c0 = c00 * (1.0 - tb) + c01 * tb;
        let c1 = c10 * (1.0 - tb) + c11 * tb;
        c0 * (1.0 - ta) + c1 * ta
    }

    /// Trilinear sample at a physical point `(x, y, z)` in mm for a
    /// [`AxisOrder::Dhw`] volume.
    #[inline]
    pub fn sample_mm(&self, p: [f64; 3]) -> f64 {
        self.sample(p[2] / self.spacing_mm[0], p[1] / self.spacing_mm[1], p[0] / self.spacing_mm[2])
    }

    /// Min-max normalization to [0,1]; a constant volume becomes all zeros.
    pub fn normalize(&mut self) {
        min_max_normalize(&mut self.data);
    }

    /// Separable resampling to `dims` (area averaging when shrinking, linear
    /// interpolation when enlarging).
    pub fn resampled(&self, dims: [usize; 3]) -> Volume {
        let data = resample_3d(&self.data, self.dims, dims);
        let spacing = [0, 1, 2].map(|a| self.spacing_mm[a] * self.dims[a] as f64 / dims[a] as f64);
        Volume {
            dims,
            spacing_mm: spacing,
            axes: self.axes,
            data,
        }
    }

    pub fn describe(&self) -> String {
        alloc::format!("{:?} {} spacing {:?}", self.dims, self.axes.tag(), self.spacing_mm)
    }
}

/// `floor` for coordinates well inside the i64 range.
#[inline]
fn floor(v: f64) -> f64 {
    let t = v as i64 as f64;
    if t > v {
        t - 1.0
    } else {
        t
    }
}

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("image", &[h * w], &[data.len()]));
        }
        Ok(Image { h, w, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    pub fn normalize(&mut self) {
        min_max_normalize(&mut self.data);
    }

    pub fn resampled(&self, h: usize, w: usize) -> Image {
        let data = resample_3d(&self.data, [1, self.h, self.w], [1, h, w]);
        Image { h, w, data }
    }

    /// `(row, col)` of the maximum value (first on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best / self.w, best % self.w)
    }
}

pub fn min_max_normalize(data: &mut [f32]) {
    let (lo, hi) = data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        data.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let inv = 1.0 / (hi - lo);
    data.iter_mut().for_each(|v| *v = ((*v - lo) * inv).clamp(0.0, 1.0));
}

/// Weights mapping `n_in` samples to `n_out`: `(first input index, weights)`
/// per output sample. Each weight row sums to one.
pub fn resample_taps(n_in: usize, n_out: usize) -> Vec<(usize, Vec<f64>)> {
    if n_out == n_in {
        return (0..n_out).map(|i| (i, vec![1.0])).collect();
    }
    if n_out < n_in {
        let r = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let (a, b) = (i as f64 * r, (i + 1) as f64 * r);
                let first = libm::floor(a) as usize;
                let last = (libm::ceil(b) as usize).min(n_in);
                let w = (first..last)
                    .map(|j| ((j + 1) as f64).min(b) - (j as f64).max(a))
                    .map(|ov| ov / r)
                    .collect();
                (first, w)
            })
            .collect()
    } else {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = libm::floor(src) as usize;
                let t = src - i0 as f64;
                if i0 + 1 < n_in {
                    (i0, vec![1.0 - t, t])
                } else {
                    (i0, vec![1.0])
                }
            })
            .collect()
    }
}

fn resample_axis(data: &[f32], dims: [usize; 3], axis: usize, n_out: usize) -> (Vec<f32>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = n_out;
    if n_out == dims[axis] {
        return (data.to_vec(), dims);
    }
    let taps = resample_taps(dims[axis], n_out);
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let mut out = vec![0.0f32; outer * n_out * inner];
    let mut acc = vec![0.0f64; inner];
    for o in 0..outer {
        for (i, (first, w)) in taps.iter().enumerate() {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (j, &wt) in w.iter().enumerate() {
                let src = &data[(o * dims[axis] + first + j) * inner..(o * dims[axis] + first + j + 1) * inner];
                for (a, &s) in acc.iter_mut().zip(src) {
                    *a += wt * s as f64;
                }
            }
            let dst = &mut out[(o * n_out + i) * inner..(o * n_out + i + 1) * inner];
            for (d, &a) in dst.iter_mut().zip(&acc) {
                *d = a as f32;
            }
        }
    }
    (out, out_dims)
}

pub fn resample_3d(data: &[f32], dims: [usize; 3], out: [usize; 3]) -> Vec<f32> {
    let (d, dm) = resample_axis(data, dims, 0, out[0]);
    let (d, dm) = resample_axis(&d, dm, 1, out[1]);
    resample_axis(&d, dm, 2, out[2]).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_sum_to_one() {
        for (a, b) in [(10, 3), (125, 32), (7, 7), (4, 9), (500, 128)] {
            for (_, w) in resample_taps(a, b) {
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_survives_resampling() {
        let v = Volume::from_vec([5, 6, 7], [1.0; 3], AxisOrder::Dhw, vec![0.25; 210]).unwrap();
        let r = v.resampled([3, 9, 2]);
        assert!(r.data.iter().all(|&x| (x - 0.25).abs() < 1e-6));
    }

    #[test]
    fn trilinear_hits_grid_values() {
        let data: Vec<f32> = (0..27).map(|i| i as f32).collect();
        let v = Volume::from_vec([3, 3, 3], [1.0; 3], AxisOrder::Dhw, data).unwrap();
        assert_eq!(v.sample(1.0, 2.0, 0.0), v.get(1, 2, 0) as f64);
        assert!((v.sample(0.5, 0.5, 0.5) - 6.5).abs() < 1e-12);
        assert_eq!(v.sample(-2.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn constant_normalizes_to_zero() {
        let mut d = vec![3.0f32; 8];
        min_max_normalize(&mut d);
        assert!(d.iter().all(|&v| v == 0.0));
    }
}
