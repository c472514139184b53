//! Arch curves, panoramic projection, curved-planar reformation and
//! rigid misalignment of volumes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{min_max_normalize, resample_3d, AxisOrder, Image, Volume};

/// Planar polyline at constant height, parameterized by arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchCurve {
    pub points_mm: Vec<[f64; 3]>,
    pub tangents: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    pub arc_length_mm: Vec<f64>,
}

fn dist_xy(a: [f64; 3], b: [f64; 3]) -> f64 {
    libm::hypot(b[0] - a[0], b[1] - a[1])
}

impl ArchCurve {
    /// Builds a curve from ordered points, deriving tangents by central
    /// differences and normals as `z × tangent` (pointing to the convex side
    /// for a curve traversed left to right around an anterior vertex).
    pub fn from_points(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Geometry(format!("curve needs at least 2 points, got {}", points.len())));
        }
        let z0 = points[0][2];
        if points.iter().any(|p| (p[2] - z0).abs() > 1e-9 || !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Geometry("curve points must be finite and share one height".into()));
        }
        let mut arc = Vec::with_capacity(points.len());
        arc.push(0.0);
        for w in points.windows(2) {
            let d = dist_xy(w[0], w[1]);
            if d <= 0.0 {
                return Err(Error::Geometry("curve has repeated points".into()));
            }
            arc.push(arc.last().unwrap() + d);
        }
        let n = points.len();
        let mut tangents = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        for i in 0..n {
            let (a, b) = (points[i.saturating_sub(1)], points[(i + 1).min(n - 1)]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len = libm::hypot(dx, dy);
            let t = [dx / len, dy / len, 0.0];
            tangents.push(t);
            normals.push([-t[1], t[0], 0.0]);
        }
        Ok(ArchCurve {
            points_mm: points,
            tangents,
            normals,
            arc_length_mm: arc,
        })
    }

    pub fn len(&self) -> usize {
        self.points_mm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points_mm.is_empty()
    }

    pub fn total_length(&self) -> f64 {
        self.arc_length_mm.last().copied().unwrap_or(0.0)
    }

    pub fn height(&self) -> f64 {
        self.points_mm[0][2]
    }

    /// Point at arc length `s`, linearly interpolated and clamped to the ends.
    pub fn point_at(&self, s: f64) -> [f64; 3] {
        let arc = &self.arc_length_mm;
        let i = match arc.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
            Ok(i) => return self.points_mm[i],
            Err(0) => return self.points_mm[0],
            Err(i) if i >= arc.len() => return self.points_mm[arc.len() - 1],
            Err(i) => i - 1,
        };
        let t = (s - arc[i]) / (arc[i + 1] - arc[i]);
        let (a, b) = (self.points_mm[i], self.points_mm[i + 1]);
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2]]
    }
}

/// Resamples `curve` at uniform arc-length spacing `step_mm`; the final
/// segment may be shorter so the endpoint is kept.
pub fn resample_arch(curve: &ArchCurve, step_mm: f64) -> Result<ArchCurve> {
    if !(step_mm > 0.0) || !step_mm.is_finite() {
        return Err(Error::config("step_mm", "must be positive"));
    }
    if curve.len() < 2 {
        return Err(Error::Geometry("curve needs at least 2 points".into()));
    }
    let total = curve.total_length();
    if !(total > 0.0) {
        return Err(Error::Geometry("curve has zero length".into()));
    }
    let full = libm::floor(total / step_mm + 1e-9) as usize;
    let mut pts: Vec<[f64; 3]> = (0..=full).map(|i| curve.point_at(i as f64 * step_mm)).collect();
    if total - full as f64 * step_mm > 1e-9 * step_mm.max(1.0) {
        pts.push(*curve.points_mm.last().unwrap());
    }
    ArchCurve::from_points(pts)
}

/// Sampling grid and output sizes for projection and reformation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub unit_mm: f64,
    pub depth_mm: f64,
    pub height_mm: f64,
    /// `(H, W)` of the panoramic image.
    pub out_px_dims: [usize; 2],
    /// `(H, W, D)` of the unfolded volume.
    pub out_vol_dims: [usize; 3],
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            unit_mm: 0.2,
            depth_mm: 40.0,
            height_mm: 100.0,
            out_px_dims: [128, 256],
            out_vol_dims: [128, 256, 128],
        }
    }
}

impl ProjectionConfig {
    /// Quarter-resolution preset: every output axis and the sampling density
    /// divided by four.
    pub fn desk() -> Self {
        ProjectionConfig {
            unit_mm: 0.8,
            out_px_dims: [32, 64],
            out_vol_dims: [32, 64, 32],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.unit_mm > 0.0 && self.unit_mm.is_finite()) {
            return Err(Error::config("unit_mm", "must be positive"));
        }
        if !(self.depth_mm > 0.0 && self.depth_mm.is_finite()) {
            return Err(Error::config("depth_mm", "must be positive"));
        }
        if !(self.height_mm > 0.0 && self.height_mm.is_finite()) {
            return Err(Error::config("height_mm", "must be positive"));
        }
        if self.out_px_dims.contains(&0) {
            return Err(Error::config("out_px_dims", "must be positive"));
        }
        if self.out_vol_dims.contains(&0) {
            return Err(Error::config("out_vol_dims", "must be positive"));
        }
        if self.rows() == 0 || self.depth_samples() == 0 {
            return Err(Error::config("unit_mm", "larger than the sampled extent"));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        libm::round(self.height_mm / self.unit_mm) as usize
    }

    pub fn depth_samples(&self) -> usize {
        libm::round(self.depth_mm / self.unit_mm) as usize
    }

    /// Vertical offset from the curve plane of sample row `r` (row 0 on top).
    pub fn row_offset(&self, r: usize) -> f64 {
        ((self.rows() as f64 - 1.0) / 2.0 - r as f64) * self.unit_mm
    }

    /// Normal offset of depth sample `k`.
    pub fn depth_offset(&self, k: usize) -> f64 {
        (k as f64 - (self.depth_samples() as f64 - 1.0) / 2.0) * self.unit_mm
    }
}

/// Curved-planar samples before resizing, stored rows × columns × depth.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedGrid {
    pub rows: usize,
    pub cols: usize,
    pub depth: usize,
    pub data: Vec<f32>,
}

impl UnfoldedGrid {
    /// Mean along depth for every (row, column).
    pub fn depth_mean(&self) -> Image {
        let data = self
            .data
            .chunks(self.depth)
            .map(|ray| (ray.iter().map(|&v| v as f64).sum::<f64>() / self.depth as f64) as f32)
            .collect();
        Image {
            h: self.rows,
            w: self.cols,
            data,
        }
    }
}

fn check_inputs(volume: &Volume, curve: &ArchCurve, cfg: &ProjectionConfig) -> Result<ArchCurve> {
    cfg.validate()?;
    if volume.axes != AxisOrder::Dhw {
        return Err(Error::Geometry("projection needs a DHW volume".into()));
    }
    if curve.is_empty() {
        return Err(Error::Geometry("empty curve".into()));
    }
    resample_arch(curve, cfg.unit_mm)
}

/// Visits every ray of the sampling grid; `f(row, col, samples)` receives
/// the trilinear samples along the normal.
fn sweep(volume: &Volume, curve: &ArchCurve, cfg: &ProjectionConfig, mut f: impl FnMut(usize, usize, &[f64])) {
    let (rows, depth) = (cfg.rows(), cfg.depth_samples());
    let mut ray = vec![0.0f64; depth];
    let inv = [1.0 / volume.spacing_mm[0], 1.0 / volume.spacing_mm[1], 1.0 / volume.spacing_mm[2]];
    let offsets: Vec<f64> = (0..depth).map(|k| cfg.depth_offset(k)).collect();
    for r in 0..rows {
        let z = (curve.height() + cfg.row_offset(r)) * inv[0];
        for (c, (p, n)) in curve.points_mm.iter().zip(&curve.normals).enumerate() {
            for (v, &o) in ray.iter_mut().zip(&offsets) {
                *v = volume.sample(z, (p[1] + o * n[1]) * inv[1], (p[0] + o * n[0]) * inv[2]);
            }
            f(r, c, &ray);
        }
    }
}

/// Ray means over the full-resolution sampling grid, before resizing and
/// normalization.
pub fn panoramic_raw(volume: &Volume, curve: &ArchCurve, cfg: &ProjectionConfig) -> Result<Image> {
    let curve = check_inputs(volume, curve, cfg)?;
    let mut img = Image::zeros(cfg.rows(), curve.len());
    let w = img.w;
    sweep(volume, &curve, cfg, |r, c, ray| {
        img.data[r * w + c] = (ray.iter().sum::<f64>() / ray.len() as f64) as f32;
    });
    Ok(img)
}

/// The unfolded sampling grid before resizing and normalization.
pub fn unfolded_grid(volume: &Volume, curve: &ArchCurve, cfg: &ProjectionConfig) -> Result<UnfoldedGrid> {
    let curve = check_inputs(volume, curve, cfg)?;
    let (rows, cols, depth) = (cfg.rows(), curve.len(), cfg.depth_samples());
    let mut data = vec![0.0f32; rows * cols * depth];
    sweep(volume, &curve, cfg, |r, c, ray| {
        let dst = &mut data[(r * cols + c) * depth..(r * cols + c + 1) * depth];
        for (d, &v) in dst.iter_mut().zip(ray) {
            *d = v as f32;
        }
    });
    Ok(UnfoldedGrid { rows, cols, depth, data })
}

fn finish_image(raw: &Image, cfg: &ProjectionConfig) -> Image {
    let mut img = raw.resampled(cfg.out_px_dims[0], cfg.out_px_dims[1]);
    img.normalize();
    img
}

fn finish_volume(grid: &UnfoldedGrid, cfg: &ProjectionConfig) -> Volume {
    let dims = cfg.out_vol_dims;
    let mut data = resample_3d(&grid.data, [grid.rows, grid.cols, grid.depth], dims);
    min_max_normalize(&mut data);
    let spacing = [
        cfg.unit_mm * grid.rows as f64 / dims[0] as f64,
        cfg.unit_mm * grid.cols as f64 / dims[1] as f64,
        cfg.unit_mm * grid.depth as f64 / dims[2] as f64,
    ];
    Volume {
        dims,
        spacing_mm: spacing,
        axes: AxisOrder::Hwd,
        data,
    }
}

/// Panoramic projection along the arch normals, resized to
/// `cfg.out_px_dims` and min-max normalized.
pub fn project_panoramic(volume: &Volume, curve: &ArchCurve, cfg: &ProjectionConfig) -> Result<Image> {
    Ok(finish_image(&panoramic_raw(volume, curve, cfg)?, cfg))
}

/// Curved-planar reformation into an `(H, W, D)` volume of size
/// `cfg.out_vol_dims`, min-max normalized.
pub fn reformat_unfolded(volume: &Volume, curve: &ArchCurve, cfg: &ProjectionConfig) -> Result<Volume> {
    Ok(finish_volume(&unfolded_grid(volume, curve, cfg)?, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MisalignmentLabel {
    Regular = 0,
    RotationLeft = 1,
    RotationRight = 2,
    ChinUp = 3,
    ChinDown = 4,
}

impl MisalignmentLabel {
    pub const ALL: [MisalignmentLabel; 5] = [
        MisalignmentLabel::Regular,
        MisalignmentLabel::RotationLeft,
        MisalignmentLabel::RotationRight,
        MisalignmentLabel::ChinUp,
        MisalignmentLabel::ChinDown,
    ];

    pub fn class_id(self) -> usize {
        self as usize
    }

    /// 0 for a regular acquisition, 1 for any misalignment.
    pub fn binary(self) -> usize {
        (self != MisalignmentLabel::Regular) as usize
    }

    pub fn from_class_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MisalignmentLabel::Regular => "regular",
            MisalignmentLabel::RotationLeft => "rotation-left",
            MisalignmentLabel::RotationRight => "rotation-right",
            MisalignmentLabel::ChinUp => "chin-up",
            MisalignmentLabel::ChinDown => "chin-down",
        }
    }
}

/// Rotation axis: `Lateral` turns the head about the vertical (z) axis,
/// `Vertical` nods it about the left-right (x) axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationAxis {
    None,
    Lateral,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisalignmentSpec {
    pub label: MisalignmentLabel,
    pub axis: RotationAxis,
    /// Positive lateral turns the face toward the patient's left (+x);
    /// positive vertical lifts the chin (+z at the front).
    pub degrees: f64,
    pub center_mm: [f64; 3],
}

impl MisalignmentSpec {
    pub fn regular() -> Self {
        MisalignmentSpec {
            label: MisalignmentLabel::Regular,
            axis: RotationAxis::None,
            degrees: 0.0,
            center_mm: [0.0; 3],
        }
    }

    pub fn lateral(degrees: f64, center_mm: [f64; 3]) -> Self {
        let label = if degrees > 0.0 {
            MisalignmentLabel::RotationLeft
        } else {
            MisalignmentLabel::RotationRight
        };
        MisalignmentSpec {
            label,
            axis: RotationAxis::Lateral,
            degrees,
            center_mm,
        }
    }

    pub fn vertical(degrees: f64, center_mm: [f64; 3]) -> Self {
        let label = if degrees > 0.0 {
            MisalignmentLabel::ChinUp
        } else {
            MisalignmentLabel::ChinDown
        };
        MisalignmentSpec {
            label,
            axis: RotationAxis::Vertical,
            degrees,
            center_mm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        use MisalignmentLabel::*;
        let mag = self.degrees.abs();
        let ok = match self.label {
            Regular => self.degrees == 0.0,
            RotationLeft => self.axis == RotationAxis::Lateral && self.degrees > 0.0 && (mag == 5.0 || mag == 10.0),
            RotationRight => self.axis == RotationAxis::Lateral && self.degrees < 0.0 && (mag == 5.0 || mag == 10.0),
            ChinUp => self.axis == RotationAxis::Vertical && self.degrees == 5.0,
            ChinDown => self.axis == RotationAxis::Vertical && self.degrees == -5.0,
        };
        if !ok {
            return Err(Error::config(
                "misalignment",
                format!("{:?} incompatible with {:?} {} degrees", self.label, self.axis, self.degrees),
            ));
        }
        if !self.center_mm.iter().all(|c| c.is_finite()) {
            return Err(Error::config("center_mm", "must be finite"));
        }
        Ok(())
    }

    /// Forward rotation matrix acting on `(x, y, z)` offsets from the center.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let (s, c) = libm::sincos(self.degrees.to_radians());
        match self.axis {
            RotationAxis::None => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            // rotation by -θ about +z: the anterior direction swings to +x
            RotationAxis::Lateral => [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]],
            RotationAxis::Vertical => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        }
    }
}

/// Rigidly rotates a DHW volume about `spec.center_mm`; reads outside the
/// grid are zero.
pub fn simulate_misalignment(volume: &Volume, spec: &MisalignmentSpec) -> Result<Volume> {
    spec.validate()?;
    if spec.axis == RotationAxis::None || spec.degrees == 0.0 {
        return Ok(volume.clone());
    }
    let r = spec.rotation();
    let c = spec.center_mm;
    let sp = volume.spacing_mm;
    let [d, h, w] = volume.dims;
    let mut out = Volume::zeros(volume.dims, sp, volume.axes);
    for k in 0..d {
        let z = k as f64 * sp[0] - c[2];
        for j in 0..h {
            let y = j as f64 * sp[1] - c[1];
            let row = &mut out.data[(k * h + j) * w..(k * h + j + 1) * w];
            for (i, dst) in row.iter_mut().enumerate() {
                let x = i as f64 * sp[2] - c[0];
                // inverse rotation is the transpose
                let sx = r[0][0] * x + r[1][0] * y + r[2][0] * z + c[0];
                let sy = r[0][1] * x + r[1][1] * y + r[2][1] * z + c[1];
                let sz = r[0][2] * x + r[1][2] * y + r[2][2] * z + c[2];
                *dst = volume.sample(sz / sp[0], sy / sp[1], sx / sp[2]) as f32;
            }
        }
    }
    Ok(out)
}

/// Anatomical reference points used to place rotation centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    /// Midpoint between the central incisors on the arch.
    pub incisor_mid_mm: [f64; 3],
    /// Height of the tooth crowns' top.
    pub crown_top_z_mm: f64,
    /// Geometric center of the volume.
    pub volume_center_mm: [f64; 3],
    /// Scale of the anatomy relative to the reference phantom.
    pub scale: f64,
}

impl Landmarks {
    /// Ten (scaled) mm below the crowns and fifteen behind the incisors.
    pub fn lateral_center(&self) -> [f64; 3] {
        let m = self.incisor_mid_mm;
        [m[0], m[1] - 15.0 * self.scale, self.crown_top_z_mm - 10.0 * self.scale]
    }
}

/// The seven acquisitions generated per phantom, in emission order.
pub fn misalignment_specs(landmarks: &Landmarks) -> Vec<MisalignmentSpec> {
    let lat = landmarks.lateral_center();
    let vert = landmarks.volume_center_mm;
    vec![
        MisalignmentSpec::regular(),
        MisalignmentSpec::lateral(-10.0, lat),
        MisalignmentSpec::lateral(-5.0, lat),
        MisalignmentSpec::lateral(5.0, lat),
        MisalignmentSpec::lateral(10.0, lat),
        MisalignmentSpec::vertical(-5.0, vert),
        MisalignmentSpec::vertical(5.0, vert),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub px: Image,
    pub unfolded: Volume,
    pub label: MisalignmentLabel,
    pub degrees: f64,
    pub lesion_mask_2d: Option<Image>,
    pub source_phantom_id: u64,
}

impl Sample {
    pub fn class_id(&self) -> usize {
        self.label.class_id()
    }

    pub fn binary_label(&self) -> usize {
        self.label.binary()
    }
}

/// Fraction of ray samples inside the lesion above which a pixel is marked.
pub const LESION_COVERAGE: f32 = 0.1;

/// Projects a (possibly soft) 3D mask to a binary panoramic mask.
pub fn project_mask(mask: &Volume, curve: &ArchCurve, cfg: &ProjectionConfig) -> Result<Image> {
    let raw = panoramic_raw(mask, curve, cfg)?;
    let mut img = raw.resampled(cfg.out_px_dims[0], cfg.out_px_dims[1]);
    img.data
        .iter_mut()
        .for_each(|v| *v = if *v > LESION_COVERAGE { 1.0 } else { 0.0 });
    Ok(img)
}

/// The seven samples of one phantom: every acquisition rotates the volume
/// and then projects it along the fixed original arch curve.
pub fn build_samples(phantom: &crate::phantom::Phantom, cfg: &ProjectionConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let specs = misalignment_specs(&phantom.metadata.landmarks);
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let vol = simulate_misalignment(&phantom.volume, &spec)?;
        let grid = unfolded_grid(&vol, &phantom.arch_curve, cfg)?;
        let px = finish_image(&panoramic_raw(&vol, &phantom.arch_curve, cfg)?, cfg);
        let unfolded = finish_volume(&grid, cfg);
        let lesion_mask_2d = if phantom.metadata.lesion_present {
            let mask = simulate_misalignment(&phantom.lesion_mask_3d, &spec)?;
            Some(project_mask(&mask, &phantom.arch_curve, cfg)?)
        } else {
            None
        };
        out.push(Sample {
            px,
            unfolded,
            label: spec.label,
            degrees: spec.degrees,
            lesion_mask_2d,
            source_phantom_id: phantom.metadata.seed,
        });
    }
    Ok(out)
}
