//! Procedural oral phantoms: a parabolic jaw arch with teeth along it and an
//! optional radiolucent lesion beside one root.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{resample_arch, ArchCurve, Landmarks};
use crate::volume::{AxisOrder, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityLevels {
    pub background: f64,
    pub soft_tissue: f64,
    pub bone: f64,
    pub tooth: f64,
    pub lesion: f64,
}

impl Default for DensityLevels {
    fn default() -> Self {
        DensityLevels {
            background: 0.0,
            soft_tissue: 0.2,
            bone: 0.6,
            tooth: 0.95,
            lesion: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// `(D, H, W)`: vertical, anterior-posterior, left-right.
    pub grid_dims: [usize; 3],
    pub spacing_mm: f64,
    pub tooth_count: usize,
    pub lesion_probability: f64,
    pub lesion_radius_range_mm: (f64, f64),
    pub density_levels: DensityLevels,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PhantomConfig {
    /// Grid sized for the quarter-resolution projection preset.
    pub fn desk() -> Self {
        PhantomConfig {
            grid_dims: [70, 65, 80],
            spacing_mm: 1.6,
            tooth_count: 14,
            lesion_probability: 0.5,
            lesion_radius_range_mm: (4.0, 7.0),
            density_levels: DensityLevels::default(),
            noise_sigma: 0.02,
            seed: 0,
        }
    }

    /// Same anatomy at 0.4 mm voxels.
    pub fn full() -> Self {
        PhantomConfig {
            grid_dims: [277, 257, 317],
            spacing_mm: 0.4,
            ..Self::desk()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_dims.iter().any(|&d| d < 2) {
            return Err(Error::config("grid_dims", "every axis needs at least 2 voxels"));
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return Err(Error::config("spacing_mm", "must be positive"));
        }
        if self.tooth_count == 0 {
            return Err(Error::config("tooth_count", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lesion_probability) {
            return Err(Error::config("lesion_probability", "must lie in [0,1]"));
        }
        let (lo, hi) = self.lesion_radius_range_mm;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("lesion_radius_range_mm", "need 0 < min <= max"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be non-negative"));
        }
        let d = &self.density_levels;
        for (name, v) in [
            ("background", d.background),
            ("soft_tissue", d.soft_tissue),
            ("bone", d.bone),
            ("tooth", d.tooth),
            ("lesion", d.lesion),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config("density_levels", format!("{name} = {v} outside [0,1]")));
            }
        }
        if !(d.tooth > d.bone) {
            return Err(Error::config("density_levels", "tooth must exceed bone"));
        }
        if !(d.bone > d.soft_tissue.max(d.lesion)) {
            return Err(Error::config("density_levels", "bone must exceed soft_tissue and lesion"));
        }
        if !(d.soft_tissue.min(d.lesion) >= d.background) {
            return Err(Error::config("density_levels", "soft_tissue and lesion must not be below background"));
        }
        let ext = self.extent_mm();
        if ext.iter().any(|&e| e < 2.0 * hi) {
            return Err(Error::config("lesion_radius_range_mm", "lesion does not fit in the grid"));
        }
        Ok(())
    }

    /// `(x, y, z)` extent in mm between the outermost voxel centers.
    pub fn extent_mm(&self) -> [f64; 3] {
        let [d, h, w] = self.grid_dims;
        [w, h, d].map(|n| (n - 1) as f64 * self.spacing_mm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomMetadata {
    pub seed: u64,
    pub lesion_present: bool,
    pub lesion_center_mm: Option<[f64; 3]>,
    pub lesion_radii_mm: Option<[f64; 3]>,
    pub landmarks: Landmarks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub arch_curve: ArchCurve,
    pub lesion_mask_3d: Volume,
    /// Voxel-wise tissue class: 0 background, 1 soft tissue, 2 bone, 3 tooth, 4 lesion.
    pub tissue: Vec<u8>,
    pub metadata: PhantomMetadata,
}

pub const TISSUE_BACKGROUND: u8 = 0;
pub const TISSUE_SOFT: u8 = 1;
pub const TISSUE_BONE: u8 = 2;
pub const TISSUE_TOOTH: u8 = 3;
pub const TISSUE_LESION: u8 = 4;

// Reference anatomy in mm for a 126.4 x 102.4 x 110.4 mm field of view;
// everything is scaled by the ratio of the actual field of view.
const REF_EXTENT: [f64; 3] = [126.4, 102.4, 110.4];
const ARCH_HALF_WIDTH: f64 = 40.0;
const ARCH_DEPTH: f64 = 45.0;
const BONE_HALF_THICK: f64 = 7.0;
const BONE_Z: (f64, f64) = (-28.0, 2.0);
const SOFT_HALF_THICK: f64 = 13.0;
const SOFT_Z: (f64, f64) = (-38.0, 22.0);
const TOOTH_Z: f64 = 6.0;
const TOOTH_SEMI: [f64; 3] = [3.4, 4.5, 10.0];
const ARCH_MARGIN: f64 = 0.06;

/// Parabola `y = y0 - a (x - xc)^2` at height `z`.
#[derive(Debug, Clone, Copy)]
struct Arch {
    xc: f64,
    y0: f64,
    a: f64,
    half_width: f64,
    z: f64,
}

impl Arch {
    fn polyline(&self, step: f64) -> Result<ArchCurve> {
        let n = (libm::ceil(2.0 * self.half_width / step) as usize).max(2);
        let pts = (0..=n)
            .map(|i| {
                let x = self.xc - self.half_width + 2.0 * self.half_width * i as f64 / n as f64;
                [x, self.y0 - self.a * (x - self.xc) * (x - self.xc), self.z]
            })
            .collect();
        ArchCurve::from_points(pts)
    }
}

/// Distance in the axial plane from `(x, y)` to the nearest curve point.
fn distance_to(curve: &ArchCurve, x: f64, y: f64) -> f64 {
    let d2 = curve
        .points_mm
        .iter()
        .map(|p| (p[0] - x) * (p[0] - x) + (p[1] - y) * (p[1] - y))
        .fold(f64::INFINITY, f64::min);
    libm::sqrt(d2)
}

struct Tooth {
    center: [f64; 3],
    tangent: [f64; 3],
    normal: [f64; 3],
    semi: [f64; 3],
}

impl Tooth {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let t = d[0] * self.tangent[0] + d[1] * self.tangent[1];
        let n = d[0] * self.normal[0] + d[1] * self.normal[1];
        let q = [t / self.semi[0], n / self.semi[1], d[2] / self.semi[2]];
        q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= 1.0
    }

    fn reach(&self) -> f64 {
        self.semi[0].max(self.semi[1])
    }
}

/// True when voxel center `p` lies inside the axis-aligned ellipsoid.
pub fn in_ellipsoid(p: [f64; 3], center: [f64; 3], radii: [f64; 3]) -> bool {
    let q = [0, 1, 2].map(|a| (p[a] - center[a]) / radii[a]);
    q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= 1.0
}

fn voxel_range(lo: f64, hi: f64, spacing: f64, n: usize) -> core::ops::Range<usize> {
    let a = libm::ceil(lo / spacing).max(0.0) as usize;
    let b = (libm::floor(hi / spacing) + 1.0).clamp(0.0, n as f64) as usize;
    a.min(b)..b
}

/// Generates the phantom for `config`; the result depends on nothing else.
pub fn generate_phantom(config: &PhantomConfig) -> Result<Phantom> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let s = config.spacing_mm;
    let [dz, dy, dx] = config.grid_dims;
    let ext = config.extent_mm();
    let k = (0..3).map(|a| ext[a] / REF_EXTENT[a]).fold(f64::INFINITY, f64::min);
    let center = [ext[0] / 2.0, ext[1] / 2.0, ext[2] / 2.0];

    let half_width = ARCH_HALF_WIDTH * k * rng.random_range(0.93..1.07);
    let depth = ARCH_DEPTH * k * rng.random_range(0.93..1.07);
    let arch = Arch {
        xc: center[0],
        y0: center[1] + depth / 2.0,
        a: depth / (half_width * half_width),
        half_width,
        z: center[2],
    };
    let dense = arch.polyline(s / 8.0)?;
    let arch_curve = resample_arch(&dense, s / 2.0)?;

    let total = arch_curve.total_length();
    let span = total * (1.0 - 2.0 * ARCH_MARGIN);
    let n_teeth = config.tooth_count;
    let pitch = span / n_teeth as f64;
    let teeth: Vec<Tooth> = (0..n_teeth)
        .map(|i| {
            let arc = total * ARCH_MARGIN + pitch * (i as f64 + 0.5);
            let p = arch_curve.point_at(arc);
            let idx = arch_curve
                .arc_length_mm
                .partition_point(|&a| a < arc)
                .min(arch_curve.len() - 1);
            let jitter = [0; 3].map(|_| rng.random_range(0.9..1.1));
            let semi = [
                (TOOTH_SEMI[0] * k).min(0.42 * pitch) * jitter[0],
                TOOTH_SEMI[1] * k * jitter[1],
                TOOTH_SEMI[2] * k * jitter[2],
            ];
            let dzc = rng.random_range(-1.0..1.0) * k;
            Tooth {
                center: [p[0], p[1], arch.z + TOOTH_Z * k + dzc],
                tangent: arch_curve.tangents[idx],
                normal: arch_curve.normals[idx],
                semi,
            }
        })
        .collect();
    let crown_top = teeth
        .iter()
        .map(|t| t.center[2] + t.semi[2])
        .fold(f64::NEG_INFINITY, f64::max);

    let lesion_present = rng.random::<f64>() < config.lesion_probability;
    let lesion = if lesion_present {
        let (lo, hi) = config.lesion_radius_range_mm;
        let radii = [0; 3].map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo });
        let host = &teeth[rng.random_range(0..n_teeth)];
        let apex = host.center[2] - host.semi[2];
        let off = rng.random_range(-2.0..2.0) * k;
        let raw = [
            host.center[0] + off * host.normal[0],
            host.center[1] + off * host.normal[1],
            apex - 0.5 * radii[2],
        ];
        let c = [0, 1, 2].map(|a| raw[a].clamp(radii[a] + s, (ext[a] - radii[a] - s).max(radii[a] + s)));
        Some((c, radii))
    } else {
        None
    };

    let d = config.density_levels;
    let n = dz * dy * dx;
    let mut tissue = alloc::vec![TISSUE_BACKGROUND; n];
    let at = |kz: usize, jy: usize, ix: usize| (kz * dy + jy) * dx + ix;

    // soft tissue and bone from the in-plane distance to the arch
    let bone_z = (arch.z + BONE_Z.0 * k, arch.z + BONE_Z.1 * k);
    let soft_z = (arch.z + SOFT_Z.0 * k, arch.z + SOFT_Z.1 * k);
    for jy in 0..dy {
        for ix in 0..dx {
            let dist = distance_to(&arch_curve, ix as f64 * s, jy as f64 * s);
            if dist > SOFT_HALF_THICK * k {
                continue;
            }
            let in_bone = dist <= BONE_HALF_THICK * k;
            for kz in 0..dz {
                let z = kz as f64 * s;
                if in_bone && z >= bone_z.0 && z <= bone_z.1 {
                    tissue[at(kz, jy, ix)] = TISSUE_BONE;
                } else if z >= soft_z.0 && z <= soft_z.1 {
                    tissue[at(kz, jy, ix)] = TISSUE_SOFT;
                }
            }
        }
    }
    for t in &teeth {
        let r = t.reach();
        for kz in voxel_range(t.center[2] - t.semi[2], t.center[2] + t.semi[2], s, dz) {
            for jy in voxel_range(t.center[1] - r, t.center[1] + r, s, dy) {
                for ix in voxel_range(t.center[0] - r, t.center[0] + r, s, dx) {
                    if t.contains([ix as f64 * s, jy as f64 * s, kz as f64 * s]) {
                        tissue[at(kz, jy, ix)] = TISSUE_TOOTH;
                    }
                }
            }
        }
    }
    let mut mask = Volume::zeros(config.grid_dims, [s; 3], AxisOrder::Dhw);
    if let Some((c, radii)) = lesion {
        for kz in voxel_range(c[2] - radii[2], c[2] + radii[2], s, dz) {
            for jy in voxel_range(c[1] - radii[1], c[1] + radii[1], s, dy) {
                for ix in voxel_range(c[0] - radii[0], c[0] + radii[0], s, dx) {
                    if in_ellipsoid([ix as f64 * s, jy as f64 * s, kz as f64 * s], c, radii) {
                        tissue[at(kz, jy, ix)] = TISSUE_LESION;
                        mask.data[at(kz, jy, ix)] = 1.0;
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).map_err(|e| Error::config("noise_sigma", format!("{e}")))?;
    let levels = [d.background, d.soft_tissue, d.bone, d.tooth, d.lesion];
    let data = tissue
        .iter()
        .map(|&t| {
            let base = levels[t as usize];
            let v = if t != TISSUE_BACKGROUND && config.noise_sigma > 0.0 {
                base + noise.sample(&mut rng)
            } else {
                base
            };
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    let volume = Volume::from_vec(config.grid_dims, [s; 3], AxisOrder::Dhw, data)?;

    let vertex = arch_curve.point_at(total / 2.0);
    let landmarks = Landmarks {
        incisor_mid_mm: vertex,
        crown_top_z_mm: crown_top,
        volume_center_mm: center,
        scale: k,
    };
    Ok(Phantom {
        volume,
        arch_curve,
        lesion_mask_3d: mask,
        tissue,
        metadata: PhantomMetadata {
            seed: config.seed,
            lesion_present,
            lesion_center_mm: lesion.map(|l| l.0),
            lesion_radii_mm: lesion.map(|l| l.1),
            landmarks,
        },
    })
}
