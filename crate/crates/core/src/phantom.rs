//! Procedural head phantom: a superellipsoid head with a bright shell, a
//! cortex/white-matter split and a fixed layout of jittered interior blobs,
//! together with the label atlas that names those blobs.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid};
use crate::seeds;

pub const BACKGROUND: i32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionRole {
    Disease,
    BiasNear,
    BiasFar,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub label: i32,
    pub name: String,
    pub role: RegionRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: Dims,
    #[serde(default = "default_spacing")]
    pub spacing: [f32; 3],
    pub seed: u64,
    /// Number of non-role interior structures (1..=6).
    #[serde(default = "default_structures")]
    pub structures: usize,
}

fn default_spacing() -> [f32; 3] {
    [1.0; 3]
}

fn default_structures() -> usize {
    4
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { dims: [32, 32, 32], spacing: default_spacing(), seed: 7, structures: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateVolume {
    pub spacing: [f32; 3],
    pub voxels: Grid<f32>,
}

impl TemplateVolume {
    pub fn dims(&self) -> Dims {
        self.voxels.dims()
    }

    pub fn checksum(&self) -> String {
        self.voxels.checksum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionAtlas {
    pub spacing: [f32; 3],
    pub labels: Grid<i32>,
    pub regions: Vec<Region>,
}

impl RegionAtlas {
    pub fn dims(&self) -> Dims {
        self.labels.dims()
    }

    pub fn region(&self, label: i32) -> Result<&Region> {
        self.regions.iter().find(|r| r.label == label).ok_or(Error::UnknownLabel(label))
    }

    pub fn with_role(&self, role: RegionRole) -> Option<&Region> {
        self.regions.iter().find(|r| r.role == role)
    }

    pub fn role_label(&self, role: RegionRole) -> Result<i32> {
        self.with_role(role)
            .map(|r| r.label)
            .ok_or_else(|| Error::Config(format!("atlas has no {role:?} region")))
    }

    pub fn voxel_count(&self, label: i32) -> usize {
        self.labels.as_slice().iter().filter(|&&l| l == label).count()
    }

    pub fn indicator(&self, label: i32) -> Result<Grid<f64>> {
        self.region(label)?;
        Ok(self.labels.map(|l| if l == label { 1.0 } else { 0.0 }))
    }

    pub fn foreground_indicator(&self) -> Grid<f64> {
        self.labels.map(|l| if l != BACKGROUND { 1.0 } else { 0.0 })
    }
}

/// Smooth localisation mask for one atlas region.
///
/// `clamp(2 * blur(indicator), 0, 1)`: exactly the indicator at `sigma = 0`,
/// one across the region interior, and exactly zero beyond the box dilation
/// of the region by `ceil(3 sigma)` voxels.
pub fn region_mask(atlas: &RegionAtlas, label: i32, sigma: f64) -> Result<Grid<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("mask sigma must be >= 0, got {sigma}")));
    }
    Ok(smooth_indicator(&atlas.indicator(label)?, sigma))
}

/// Same construction as [`region_mask`] over every labelled voxel.
pub fn foreground_mask(atlas: &RegionAtlas, sigma: f64) -> Result<Grid<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("mask sigma must be >= 0, got {sigma}")));
    }
    Ok(smooth_indicator(&atlas.foreground_indicator(), sigma))
}

fn smooth_indicator(ind: &Grid<f64>, sigma: f64) -> Grid<f64> {
    if sigma == 0.0 {
        return ind.clone();
    }
    ind.gaussian_blur(sigma).map(|v| (2.0 * v).clamp(0.0, 1.0))
}

struct Blob {
    name: &'static str,
    role: RegionRole,
    center: [f64; 3],
    radii: [f64; 3],
    intensity: f64,
}

// x runs left to right, y posterior to anterior, z inferior to superior.
const ROLE_BLOBS: [Blob; 3] = [
    Blob {
        name: "left insula",
        role: RegionRole::Disease,
        center: [0.30, 0.55, 0.42],
        radii: [0.07, 0.11, 0.10],
        intensity: 0.30,
    },
    Blob {
        name: "left putamen",
        role: RegionRole::BiasNear,
        center: [0.40, 0.52, 0.42],
        radii: [0.06, 0.09, 0.08],
        intensity: 0.85,
    },
    Blob {
        name: "right postcentral",
        role: RegionRole::BiasFar,
        center: [0.68, 0.42, 0.70],
        radii: [0.08, 0.07, 0.07],
        intensity: 0.30,
    },
];

const OTHER_BLOBS: [Blob; 6] = [
    Blob {
        name: "ventricles",
        role: RegionRole::Other,
        center: [0.50, 0.52, 0.52],
        radii: [0.05, 0.12, 0.06],
        intensity: 0.10,
    },
    Blob {
        name: "right insula",
        role: RegionRole::Other,
        center: [0.70, 0.55, 0.42],
        radii: [0.07, 0.11, 0.10],
        intensity: 0.30,
    },
    Blob {
        name: "right putamen",
        role: RegionRole::Other,
        center: [0.60, 0.52, 0.42],
        radii: [0.06, 0.09, 0.08],
        intensity: 0.85,
    },
    Blob {
        name: "left postcentral",
        role: RegionRole::Other,
        center: [0.32, 0.42, 0.70],
        radii: [0.08, 0.07, 0.07],
        intensity: 0.30,
    },
    Blob {
        name: "cerebellum",
        role: RegionRole::Other,
        center: [0.50, 0.26, 0.24],
        radii: [0.16, 0.08, 0.07],
        intensity: 0.55,
    },
    Blob {
        name: "brainstem",
        role: RegionRole::Other,
        center: [0.50, 0.42, 0.24],
        radii: [0.04, 0.05, 0.10],
        intensity: 0.75,
    },
];

const HEAD_RADII: [f64; 3] = [0.44, 0.46, 0.44];
const HEAD_EXPONENT: f64 = 2.4;
const SHELL_START: f64 = 0.88;
const CORTEX_START: f64 = 0.76;

const LABEL_SKULL: i32 = 20;
const LABEL_CORTEX: i32 = 21;
const LABEL_WHITE: i32 = 22;

/// Builds the template volume and its atlas. Pure function of `config`.
pub fn build_phantom(config: &PhantomConfig) -> Result<(TemplateVolume, RegionAtlas)> {
    if config.dims.iter().any(|&d| d < 16) {
        return Err(Error::Config(format!("phantom dims must be >= 16 on every axis, got {:?}", config.dims)));
    }
    if config.structures == 0 || config.structures > OTHER_BLOBS.len() {
        return Err(Error::Config(format!(
            "structure count must be in 1..={}, got {}",
            OTHER_BLOBS.len(),
            config.structures
        )));
    }
    if config.spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config("voxel spacing must be positive".into()));
    }
    let dims = config.dims;
    let mut rng = seeds::rng_for(config.seed, "phantom", 0);

    // Label 1.. for blobs in priority order (role blobs first).
    let mut placed = Vec::new();
    for blob in ROLE_BLOBS.iter().chain(OTHER_BLOBS.iter().take(config.structures)) {
        let mut center = blob.center;
        for c in &mut center {
            *c += rng.random_range(-0.015..0.015);
        }
        let intensity = (blob.intensity + rng.random_range(-0.03..0.03)).clamp(0.05, 0.95);
        // at least ~1.2 voxels of radius so small grids keep every region
        let radii: [f64; 3] = std::array::from_fn(|a| blob.radii[a].max(1.2 / dims[a] as f64));
        placed.push((blob, center, radii, intensity));
    }

    let mut regions: Vec<Region> = placed
        .iter()
        .enumerate()
        .map(|(i, (b, ..))| Region { label: i as i32 + 1, name: b.name.to_string(), role: b.role })
        .collect();
    regions.push(Region { label: LABEL_SKULL, name: "skull".into(), role: RegionRole::Other });
    regions.push(Region { label: LABEL_CORTEX, name: "cortex".into(), role: RegionRole::Other });
    regions.push(Region { label: LABEL_WHITE, name: "white matter".into(), role: RegionRole::Other });

    let mut labels = Grid::filled(dims, BACKGROUND);
    let mut voxels = Grid::filled(dims, 0.0f32);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let u = [
                    (x as f64 + 0.5) / dims[0] as f64,
                    (y as f64 + 0.5) / dims[1] as f64,
                    (z as f64 + 0.5) / dims[2] as f64,
                ];
                let r = (0..3)
                    .map(|a| ((u[a] - 0.5) / HEAD_RADII[a]).abs().powf(HEAD_EXPONENT))
                    .sum::<f64>()
                    .powf(1.0 / HEAD_EXPONENT);
                if r > 1.0 {
                    continue;
                }
                let (label, value) = if r > SHELL_START {
                    (LABEL_SKULL, 0.9)
                } else {
                    let blob = placed.iter().enumerate().find(|(_, (_, c, rad, _))| {
                        (0..3).map(|a| ((u[a] - c[a]) / rad[a]).powi(2)).sum::<f64>() <= 1.0
                    });
                    match blob {
                        Some((i, (.., intensity))) => (i as i32 + 1, *intensity),
                        None if r > CORTEX_START => (LABEL_CORTEX, 0.45),
                        None => (LABEL_WHITE, 0.65),
                    }
                };
                labels.set(x, y, z, label);
                voxels.set(x, y, z, value as f32);
            }
        }
    }

    let atlas = RegionAtlas { spacing: config.spacing, labels, regions };
    for r in atlas.regions.iter().filter(|r| r.role != RegionRole::Other) {
        if atlas.voxel_count(r.label) == 0 {
            return Err(Error::Config(format!("region '{}' is empty at dims {:?}", r.name, dims)));
        }
    }
    validate_roles(&atlas)?;
    Ok((TemplateVolume { spacing: config.spacing, voxels }, atlas))
}

/// Checks the geometric contract between the three role regions.
pub fn validate_roles(atlas: &RegionAtlas) -> Result<()> {
    let disease = atlas.role_label(RegionRole::Disease)?;
    let near = atlas.role_label(RegionRole::BiasNear)?;
    let far = atlas.role_label(RegionRole::BiasFar)?;
    let labels = &atlas.labels;
    let [nx, ny, nz] = labels.dims();

    if !six_adjacent(labels, disease, near) {
        return Err(Error::Config("bias-near region does not touch the disease region".into()));
    }
    let z_range = |label: i32| {
        let mut lo = usize::MAX;
        let mut hi = 0;
        for (i, &l) in labels.as_slice().iter().enumerate() {
            if l == label {
                let z = labels.coords(i)[2];
                lo = lo.min(z);
                hi = hi.max(z);
            }
        }
        (lo, hi)
    };
    let (dlo, dhi) = z_range(disease);
    let (flo, fhi) = z_range(far);
    if !(fhi < dlo || flo > dhi) {
        return Err(Error::Config("bias-far region shares axial slices with the disease region".into()));
    }
    let half = nx as f64 / 2.0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let l = labels.get(x, y, z);
                let cx = x as f64 + 0.5;
                if (l == disease && cx > half) || (l == far && cx < half) {
                    return Err(Error::Config("disease and bias-far regions are not in opposite lateral halves".into()));
                }
            }
        }
    }
    Ok(())
}

fn six_adjacent(labels: &Grid<i32>, a: i32, b: i32) -> bool {
    let [nx, ny, nz] = labels.dims();
    let mut queue: VecDeque<usize> =
        labels.as_slice().iter().enumerate().filter(|(_, &l)| l == a).map(|(i, _)| i).collect();
    while let Some(i) = queue.pop_front() {
        let [x, y, z] = labels.coords(i);
        let neighbours = [
            (x > 0).then(|| labels.index(x - 1, y, z)),
            (x + 1 < nx).then(|| labels.index(x + 1, y, z)),
            (y > 0).then(|| labels.index(x, y - 1, z)),
            (y + 1 < ny).then(|| labels.index(x, y + 1, z)),
            (z > 0).then(|| labels.index(x, y, z - 1)),
            (z + 1 < nz).then(|| labels.index(x, y, z + 1)),
        ];
        if neighbours.into_iter().flatten().any(|j| labels.as_slice()[j] == b) {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> (TemplateVolume, RegionAtlas) {
        build_phantom(&PhantomConfig { dims: [32, 32, 32], seed: 7, ..Default::default() }).unwrap()
    }

    #[test]
    fn desk_phantom_has_roles_and_zero_corner() {
        let (vol, atlas) = desk();
        assert_eq!(vol.dims(), [32, 32, 32]);
        assert_eq!(vol.voxels.get(0, 0, 0), 0.0);
        for role in [RegionRole::Disease, RegionRole::BiasNear, RegionRole::BiasFar] {
            let label = atlas.role_label(role).unwrap();
            assert!(atlas.voxel_count(label) > 0, "{role:?} empty");
        }
        assert!(atlas.regions.len() >= 4);
    }

    #[test]
    fn every_nonzero_label_listed_once() {
        let (_, atlas) = desk();
        for &l in atlas.labels.as_slice() {
            if l != BACKGROUND {
                assert_eq!(atlas.regions.iter().filter(|r| r.label == l).count(), 1);
            }
        }
    }

    #[test]
    fn intensities_in_unit_range_and_background_zero() {
        let (vol, atlas) = desk();
        for (v, l) in vol.voxels.as_slice().iter().zip(atlas.labels.as_slice()) {
            assert!(v.is_finite() && (0.0..=1.0).contains(v));
            if *l == BACKGROUND {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn deterministic_in_config() {
        let (a, _) = desk();
        let (b, _) = desk();
        assert_eq!(a.checksum(), b.checksum());
        let (c, _) = build_phantom(&PhantomConfig { seed: 8, ..Default::default() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn small_dims_rejected() {
        let err = build_phantom(&PhantomConfig { dims: [15, 32, 32], ..Default::default() });
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn geometry_holds_across_sizes_and_seeds() {
        for dims in [[16, 16, 16], [24, 28, 20], [32, 32, 32], [48, 48, 48]] {
            for seed in 0..5 {
                build_phantom(&PhantomConfig { dims, seed, ..Default::default() })
                    .unwrap_or_else(|e| panic!("{dims:?} seed {seed}: {e}"));
            }
        }
    }

    #[test]
    fn zero_sigma_mask_is_indicator() {
        let (_, atlas) = desk();
        let label = atlas.role_label(RegionRole::Disease).unwrap();
        let m = region_mask(&atlas, label, 0.0).unwrap();
        for (v, l) in m.as_slice().iter().zip(atlas.labels.as_slice()) {
            assert_eq!(*v, if *l == label { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn unknown_label_is_lookup_error() {
        let (_, atlas) = desk();
        assert!(matches!(region_mask(&atlas, 999, 1.0), Err(Error::UnknownLabel(999))));
    }

    fn cube_atlas() -> RegionAtlas {
        let labels = Grid::from_fn([21, 21, 21], |x, y, z| {
            if (8..13).contains(&x) && (8..13).contains(&y) && (8..13).contains(&z) {
                1
            } else {
                0
            }
        });
        RegionAtlas {
            spacing: [1.0; 3],
            labels,
            regions: vec![Region { label: 1, name: "cube".into(), role: RegionRole::Other }],
        }
    }

    #[test]
    fn cube_center_saturates() {
        // plain truncated Gaussian of the 5^3 indicator at the centre:
        // per-axis mass within +-2 of a radius-5 kernel (sigma 1.5) ~ 0.9108
        let k: Vec<f64> = (-5i32..=5).map(|i| (-(i * i) as f64 / 4.5).exp()).collect();
        let inside: f64 = k[3..8].iter().sum::<f64>() / k.iter().sum::<f64>();
        let blurred = inside.powi(3);
        assert!((blurred - 0.7555).abs() < 1e-3);
        let m = region_mask(&cube_atlas(), 1, 1.5).unwrap();
        assert!(m.get(10, 10, 10) >= 0.99);
        assert_eq!(m.get(10, 10, 10), (2.0 * blurred).min(1.0));
    }

    #[test]
    fn mask_support_is_compact_and_monotone() {
        let atlas = cube_atlas();
        let mut prev_support = 0;
        for sigma in [0.0, 0.5, 1.0, 1.5, 2.0] {
            let m = region_mask(&atlas, 1, sigma).unwrap();
            let r = (3.0f64 * sigma).ceil() as i64;
            let mut support = 0;
            for i in 0..m.len() {
                let [x, y, z] = m.coords(i);
                let d = [x, y, z].iter().map(|&c| (8 - c as i64).max(c as i64 - 12).max(0)).max().unwrap();
                if d > r {
                    assert_eq!(m.as_slice()[i], 0.0);
                }
                assert!((0.0..=1.0).contains(&m.as_slice()[i]));
                if m.as_slice()[i] > 0.0 {
                    support += 1;
                }
            }
            assert!(support >= prev_support);
            prev_support = support;
        }
    }
}
