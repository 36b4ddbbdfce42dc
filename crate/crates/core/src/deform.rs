//! Stationary velocity field (SVF) deformation engine.
//!
//! Effects are built as localised orthonormal velocity modes, combined by
//! adding velocities, exponentiated once by scaling and squaring, and applied
//! to a template by pull-back trilinear resampling.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid};
use crate::phantom::{foreground_mask, region_mask, RegionAtlas, TemplateVolume};
use crate::seeds;

/// Three scalar component grids in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3 {
    pub components: [Grid<f64>; 3],
}

impl Field3 {
    pub fn zeros(dims: Dims) -> Self {
        Self { components: std::array::from_fn(|_| Grid::filled(dims, 0.0)) }
    }

    pub fn from_fn(dims: Dims, f: impl Fn([usize; 3]) -> [f64; 3]) -> Self {
        let mut out = Self::zeros(dims);
        for i in 0..out.len() {
            let v = f(out.components[0].coords(i));
            for c in 0..3 {
                out.components[c].as_mut_slice()[i] = v[c];
            }
        }
        out
    }

    pub fn dims(&self) -> Dims {
        self.components[0].dims()
    }

    pub fn len(&self) -> usize {
        self.components[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn at(&self, i: usize) -> [f64; 3] {
        [
            self.components[0].as_slice()[i],
            self.components[1].as_slice()[i],
            self.components[2].as_slice()[i],
        ]
    }

    pub fn dot(&self, other: &Field3) -> f64 {
        (0..3).map(|c| self.components[c].dot(&other.components[c])).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// sqrt(mean over voxels of |v(x)|^2)
    pub fn rms(&self) -> f64 {
        (self.dot(self) / self.len() as f64).sqrt()
    }

    pub fn max_norm(&self) -> f64 {
        (0..self.len())
            .map(|i| {
                let v = self.at(i);
                (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.components.iter().all(|g| g.as_slice().iter().all(|v| v.is_finite()))
    }

    pub fn scaled(&self, s: f64) -> Field3 {
        Field3 { components: std::array::from_fn(|c| self.components[c].map(|v| v * s)) }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Field3) {
        for c in 0..3 {
            for (a, b) in self.components[c].as_mut_slice().iter_mut().zip(other.components[c].as_slice()) {
                *a += s * b;
            }
        }
    }

    /// Trilinear sample of all three components with clamped coordinates.
    #[inline]
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let (idx, w) = trilinear_stencil(self.dims(), p);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let g = self.components[c].as_slice();
            out[c] = idx.iter().zip(&w).map(|(&i, &wi)| g[i] * wi).sum();
        }
        out
    }
}

/// Indices and weights of the 8 trilinear neighbours of `p`, clamped to the
/// grid. Weights are ordered so the sum reproduces `Grid::sample_clamped`.
#[inline]
fn trilinear_stencil(dims: Dims, p: [f64; 3]) -> ([usize; 8], [f64; 8]) {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut t = [0.0f64; 3];
    for a in 0..3 {
        let c = p[a].clamp(0.0, (dims[a] - 1) as f64);
        let f = c.floor();
        i0[a] = f as usize;
        i1[a] = (i0[a] + 1).min(dims[a] - 1);
        t[a] = c - f;
    }
    let at = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
    let idx = [
        at(i0[0], i0[1], i0[2]),
        at(i1[0], i0[1], i0[2]),
        at(i0[0], i1[1], i0[2]),
        at(i1[0], i1[1], i0[2]),
        at(i0[0], i0[1], i1[2]),
        at(i1[0], i0[1], i1[2]),
        at(i0[0], i1[1], i1[2]),
        at(i1[0], i1[1], i1[2]),
    ];
    let (ux, uy, uz) = (1.0 - t[0], 1.0 - t[1], 1.0 - t[2]);
    let w = [
        ux * uy * uz,
        t[0] * uy * uz,
        ux * t[1] * uz,
        t[0] * t[1] * uz,
        ux * uy * t[2],
        t[0] * uy * t[2],
        ux * t[1] * t[2],
        t[0] * t[1] * t[2],
    ];
    (idx, w)
}

/// Displacement-rate field; a point flows along `dx/dt = v(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField(pub Field3);

impl VelocityField {
    pub fn zeros(dims: Dims) -> Self {
        Self(Field3::zeros(dims))
    }

    pub fn dims(&self) -> Dims {
        self.0.dims()
    }

    /// Log-Euclidean combination: velocities add.
    pub fn add(&self, other: &VelocityField) -> Result<VelocityField> {
        if self.dims() != other.dims() {
            return Err(Error::Shape { expected: self.dims(), actual: other.dims() });
        }
        let mut out = self.clone();
        out.0.axpy(1.0, &other.0);
        Ok(out)
    }

    pub fn negated(&self) -> VelocityField {
        VelocityField(self.0.scaled(-1.0))
    }
}

/// `phi(x)` such that the deformation maps `x -> x + phi(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub field: Field3,
    /// Squaring steps used to produce the field (0 for fields not built by
    /// [`exp_svf`]).
    pub steps: u32,
}

impl DisplacementField {
    pub fn identity(dims: Dims) -> Self {
        Self { field: Field3::zeros(dims), steps: 0 }
    }

    pub fn dims(&self) -> Dims {
        self.field.dims()
    }
}

/// Where an effect model lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    Label(i32),
    /// Every labelled voxel (global subject morphology).
    Foreground,
}

impl MaskSource {
    pub fn mask(&self, atlas: &RegionAtlas, sigma: f64) -> Result<Grid<f64>> {
        match *self {
            MaskSource::Label(l) => region_mask(atlas, l, sigma),
            MaskSource::Foreground => foreground_mask(atlas, sigma),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectParams {
    pub region: MaskSource,
    pub modes: usize,
    pub smoothness_sigma: f64,
    pub mask_sigma: f64,
    pub magnitude_scale: f64,
    pub seed: u64,
}

/// Orthonormal set of localised velocity modes.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectModel {
    pub params: EffectParams,
    pub basis: Vec<Field3>,
    /// Voxels where the mask is nonzero.
    pub support: usize,
}

impl EffectModel {
    pub fn modes(&self) -> usize {
        self.basis.len()
    }

    pub fn magnitude_scale(&self) -> f64 {
        self.params.magnitude_scale
    }

    pub fn dims(&self) -> Dims {
        self.basis[0].dims()
    }

    pub fn gram(&self) -> Vec<Vec<f64>> {
        self.basis.iter().map(|a| self.basis.iter().map(|b| a.dot(b)).collect()).collect()
    }
}

/// Builds `modes` orthonormal velocity fields supported on the mask of
/// `region`: seeded white noise is blurred by `smoothness_sigma`, multiplied
/// by the mask and orthonormalised by two-pass modified Gram-Schmidt in mode
/// order.
pub fn make_effect_model(atlas: &RegionAtlas, params: EffectParams) -> Result<EffectModel> {
    if params.modes == 0 {
        return Err(Error::Config("effect model needs at least one mode".into()));
    }
    if !(params.smoothness_sigma > 0.0) || !(params.magnitude_scale > 0.0) {
        return Err(Error::Config("smoothness sigma and magnitude scale must be positive".into()));
    }
    let mask = params.region.mask(atlas, params.mask_sigma)?;
    let support = mask.as_slice().iter().filter(|&&m| m > 0.0).count();
    if params.modes > 3 * support {
        return Err(Error::Rank(format!(
            "{} modes requested but the region supports only {} voxels",
            params.modes, support
        )));
    }
    let dims = atlas.dims();
    let mut basis: Vec<Field3> = Vec::with_capacity(params.modes);
    for k in 0..params.modes {
        let mut field = Field3::zeros(dims);
        for c in 0..3 {
            let mut rng = seeds::rng_for(params.seed, "effect-mode", (k * 3 + c) as u64);
            let noise = Grid::from_vec(
                dims,
                (0..field.len()).map(|_| StandardNormal.sample(&mut rng)).collect(),
            )?;
            let smooth = noise.gaussian_blur(params.smoothness_sigma);
            for ((o, s), m) in field.components[c]
                .as_mut_slice()
                .iter_mut()
                .zip(smooth.as_slice())
                .zip(mask.as_slice())
            {
                *o = s * m;
            }
        }
        let initial = field.norm();
        for _ in 0..2 {
            for b in &basis {
                let proj = field.dot(b);
                field.axpy(-proj, b);
            }
        }
        let residual = field.norm();
        if !(residual > 1e-6 * initial) || residual == 0.0 {
            return Err(Error::Rank(format!("mode {k} is linearly dependent on earlier modes")));
        }
        basis.push(field.scaled(1.0 / residual));
    }
    Ok(EffectModel { params, basis, support })
}

/// `magnitude_scale * sum_k coeffs[k] * basis[k]`.
pub fn sample_velocity(model: &EffectModel, coeffs: &[f64]) -> Result<VelocityField> {
    if coeffs.len() != model.modes() {
        return Err(Error::Arity { expected: model.modes(), actual: coeffs.len() });
    }
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("non-finite effect coefficient".into()));
    }
    let mut v = Field3::zeros(model.dims());
    for (c, b) in coeffs.iter().zip(&model.basis) {
        if *c != 0.0 {
            v.axpy(model.magnitude_scale() * c, b);
        }
    }
    Ok(VelocityField(v))
}

/// Smallest step count keeping the first-step displacement under half a
/// voxel, never fewer than two.
pub fn auto_steps(v: &VelocityField) -> u32 {
    let speed = v.0.max_norm();
    if speed <= 0.0 {
        return 2;
    }
    ((speed / 0.5).log2().ceil().max(2.0)) as u32
}

/// `(a o b)(x) = b(x) + a(x + b(x))`
pub fn compose(a: &DisplacementField, b: &DisplacementField) -> Result<DisplacementField> {
    if a.dims() != b.dims() {
        return Err(Error::Shape { expected: a.dims(), actual: b.dims() });
    }
    Ok(DisplacementField { field: compose_fields(&a.field, &b.field), steps: 0 })
}

fn compose_fields(a: &Field3, b: &Field3) -> Field3 {
    let dims = a.dims();
    let mut out = Field3::zeros(dims);
    for i in 0..out.len() {
        let [x, y, z] = out.components[0].coords(i);
        let d = b.at(i);
        let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
        let s = a.sample(p);
        for c in 0..3 {
            out.components[c].as_mut_slice()[i] = d[c] + s[c];
        }
    }
    out
}

/// Scaling and squaring. `steps = None` picks [`auto_steps`].
pub fn exp_svf(v: &VelocityField, steps: Option<u32>) -> Result<DisplacementField> {
    if !v.0.is_finite() {
        return Err(Error::Numeric("velocity field has non-finite values".into()));
    }
    let steps = match steps {
        Some(0) => return Err(Error::Config("scaling and squaring needs at least one step".into())),
        Some(s) => s,
        None => auto_steps(v),
    };
    let mut phi = v.0.scaled(1.0 / 2f64.powi(steps as i32));
    for _ in 0..steps {
        phi = compose_fields(&phi, &phi);
    }
    Ok(DisplacementField { field: phi, steps })
}

/// Pull-back resampling `out(x) = in(x + phi(x))` without clamping values.
pub fn resample(grid: &Grid<f64>, phi: &DisplacementField) -> Result<Grid<f64>> {
    if grid.dims() != phi.dims() {
        return Err(Error::Shape { expected: grid.dims(), actual: phi.dims() });
    }
    let mut out = Grid::filled(grid.dims(), 0.0);
    for i in 0..out.len() {
        let [x, y, z] = out.coords(i);
        let d = phi.field.at(i);
        let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
        let (idx, w) = trilinear_stencil(grid.dims(), p);
        out.as_mut_slice()[i] = idx.iter().zip(&w).map(|(&j, &wj)| grid.as_slice()[j] * wj).sum();
    }
    Ok(out)
}

/// Warps a template; intensities are clamped to `[0, 1]`.
pub fn warp(volume: &TemplateVolume, phi: &DisplacementField) -> Result<TemplateVolume> {
    let src = volume.voxels.map(|v| v as f64);
    let out = resample(&src, phi)?;
    Ok(TemplateVolume { spacing: volume.spacing, voxels: out.map(|v| v.clamp(0.0, 1.0) as f32) })
}

/// Minimum of `det(I + grad phi)` over interior voxels (central differences).
pub fn jacobian_min(phi: &DisplacementField) -> Result<f64> {
    let dims = phi.dims();
    if dims.iter().any(|&d| d < 3) {
        return Err(Error::Config(format!("jacobian needs >= 3 voxels per axis, got {dims:?}")));
    }
    if !phi.field.is_finite() {
        return Err(Error::Numeric("displacement field has non-finite values".into()));
    }
    let g = &phi.field.components;
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut min = f64::INFINITY;
    for z in 1..dims[2] - 1 {
        for y in 1..dims[1] - 1 {
            for x in 1..dims[0] - 1 {
                let i = x + dims[0] * (y + dims[1] * z);
                let mut j = [[0.0; 3]; 3];
                for (c, comp) in g.iter().enumerate() {
                    let s = comp.as_slice();
                    for (a, &st) in strides.iter().enumerate() {
                        j[c][a] = 0.5 * (s[i + st] - s[i - st]);
                    }
                    j[c][c] += 1.0;
                }
                let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                min = min.min(det);
            }
        }
    }
    Ok(min)
}

/// Field as three f32 grids, for the SBVL container.
pub fn field_channels(field: &Field3) -> [Grid<f32>; 3] {
    std::array::from_fn(|c| field.components[c].map(|v| v as f32))
}
