//! Maximum-intensity and thresholded front-surface renderings of volumes.

use pxrecon_core::metrics::{high_density_mask, mean};
use pxrecon_core::volume::{min_max_normalize, AxisOrder, Image, Volume};
use serde::{Deserialize, Serialize};

/// Storage axis of the volume to collapse (0 is the slowest).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    First,
    Second,
    Third,
}

impl Axis {
    /// Storage axis holding depth for the volume's axis order.
    pub fn depth_of(v: &Volume) -> Axis {
        match v.axes {
            AxisOrder::Dhw => Axis::First,
            AxisOrder::Hwd => Axis::Third,
        }
    }

    fn index(self) -> usize {
        match self {
            Axis::First => 0,
            Axis::Second => 1,
            Axis::Third => 2,
        }
    }
}

/// Remaining two axes of a projection along `axis`, in storage order, and
/// the strides of (row, col, ray).
fn layout(dims: [usize; 3], axis: usize) -> ([usize; 2], [usize; 3]) {
    let strides = [dims[1] * dims[2], dims[2], 1];
    let keep: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    (
        [dims[keep[0]], dims[keep[1]]],
        [strides[keep[0]], strides[keep[1]], strides[axis]],
    )
}

fn project(data: &[f32], dims: [usize; 3], axis: usize, f: impl Fn(&[f32]) -> f32) -> Image {
    let ([h, w], [sr, sc, sa]) = layout(dims, axis);
    let n = dims[axis];
    let mut out = Vec::with_capacity(h * w);
    let mut ray = vec![0.0; n];
    for r in 0..h {
        for c in 0..w {
            let base = r * sr + c * sc;
            for (k, v) in ray.iter_mut().enumerate() {
                *v = data[base + k * sa];
            }
            out.push(f(&ray));
        }
    }
    Image { h, w, data: out }
}

/// Per-pixel maximum along `axis`, min-max normalized.
pub fn render_mip(v: &Volume, axis: Axis) -> Image {
    let mut img = project(&v.data, v.dims, axis.index(), |ray| ray.iter().copied().fold(f32::NEG_INFINITY, f32::max));
    min_max_normalize(&mut img.data);
    img
}

/// High-density voxels (`> 1.5 x mean`) seen along `axis`: each pixel shows
/// the first occupied index, shaded from 1 (nearest) down to `1 / n`
/// (farthest); empty rays are 0.
pub fn render_threshold(v: &Volume, axis: Axis) -> Image {
    let mask: Vec<f32> = high_density_mask(&v.data, mean(&v.data))
        .into_iter()
        .map(|b| b as u8 as f32)
        .collect();
    let n = v.dims[axis.index()] as f32;
    project(&mask, v.dims, axis.index(), |ray| {
        ray.iter().position(|&x| x > 0.0).map_or(0.0, |k| 1.0 - k as f32 / n)
    })
}
