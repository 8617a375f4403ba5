//! Affine transforms, stationary velocity fields and their exponentials,
//! field composition, warping and the Laplacian smoothness energy.

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3, Interp, LabelVolume, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub linear: Matrix3<f64>,
    pub translation: Vec3,
    inv_linear: Matrix3<f64>,
}

impl AffineTransform {
    pub fn new(linear: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let det = linear.determinant();
        if !det.is_finite() || det.abs() <= 1e-9 {
            return Err(Error::InvalidArgument(format!("affine linear part is singular (det {det:.3e})")));
        }
        let inv_linear = linear.try_inverse().ok_or_else(|| Error::InvalidArgument("affine not invertible".into()))?;
        Ok(Self { linear, translation, inv_linear })
    }

    pub fn identity() -> Self {
        Self { linear: Matrix3::identity(), translation: Vec3::zeros(), inv_linear: Matrix3::identity() }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { translation: t, ..Self::identity() }
    }

    /// Rotation about `center` by the rotation matrix `r`, followed by translation `t`.
    pub fn rigid_about(r: Matrix3<f64>, center: Vec3, t: Vec3) -> Result<Self> {
        Self::new(r, center - r * center + t)
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.linear * p + self.translation
    }

    #[inline]
    pub fn apply_inverse(&self, p: &Vec3) -> Vec3 {
        self.inv_linear * (p - self.translation)
    }

    pub fn inverse(&self) -> Self {
        Self { linear: self.inv_linear, translation: -(self.inv_linear * self.translation), inv_linear: self.linear }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn then_after(&self, other: &AffineTransform) -> Self {
        Self {
            linear: self.linear * other.linear,
            translation: self.linear * other.translation + self.translation,
            inv_linear: other.inv_linear * self.inv_linear,
        }
    }

    pub fn inv_linear(&self) -> &Matrix3<f64> {
        &self.inv_linear
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub grid: Grid3,
    pub data: Vec<Vec3>,
}

impl VelocityField {
    pub fn zeros(grid: Grid3) -> Self {
        let n = grid.len();
        Self { grid, data: vec![Vec3::zeros(); n] }
    }

    pub fn from_fn(grid: Grid3, f: impl Fn(&Vec3) -> Vec3 + Sync) -> Self {
        let data = (0..grid.len()).into_par_iter().map(|i| f(&grid.voxel_center(i))).collect();
        Self { grid, data }
    }

    pub fn max_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { grid: self.grid.clone(), data: self.data.iter().map(|v| v * s).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Forward,
    Inverse,
}

/// Dense map stored as absolute mapped positions per voxel centre.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub grid: Grid3,
    pub positions: Vec<Vec3>,
    pub kind: FieldKind,
}

impl DeformationField {
    pub fn identity(grid: Grid3, kind: FieldKind) -> Self {
        let positions = (0..grid.len()).map(|i| grid.voxel_center(i)).collect();
        Self { grid, positions, kind }
    }

    pub fn displacement(&self) -> Vec<Vec3> {
        self.positions.iter().enumerate().map(|(i, p)| p - self.grid.voxel_center(i)).collect()
    }

    pub fn from_displacement(grid: Grid3, u: &[Vec3], kind: FieldKind) -> Self {
        let positions = u.iter().enumerate().map(|(i, d)| grid.voxel_center(i) + d).collect();
        Self { grid, positions, kind }
    }

    /// Evaluates the map at an arbitrary point by trilinear interpolation of
    /// the displacement; positions outside the grid use the clamped hull value.
    #[inline]
    pub fn eval(&self, p: &Vec3) -> Vec3 {
        let c = self.grid.world_to_index(p);
        let grid = &self.grid;
        p + sample_vectors_clamped(&grid.dims, c, |idx| self.positions[idx] - grid.voxel_center(idx))
    }
}

/// Trilinear interpolation of a per-voxel vector quantity at continuous index
/// `c`, with `c` clamped into the grid hull.
#[inline]
pub(crate) fn sample_vectors_clamped(dims: &[usize; 3], c: [f64; 3], value: impl Fn(usize) -> Vec3) -> Vec3 {
    let mut b = [0usize; 3];
    let mut f = [0.0f64; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let x = c[a].clamp(0.0, hi);
        let fl = x.floor().min((dims[a].max(2) - 2) as f64).max(0.0);
        b[a] = fl as usize;
        f[a] = if dims[a] > 1 { x - fl } else { 0.0 };
    }
    let mut acc = Vec3::zeros();
    for corner in 0..8 {
        let d = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut w = 1.0;
        let mut ii = [0usize; 3];
        for a in 0..3 {
            w *= if d[a] == 1 { f[a] } else { 1.0 - f[a] };
            ii[a] = (b[a] + d[a]).min(dims[a] - 1);
        }
        if w != 0.0 {
            acc += value(ii[0] + dims[0] * (ii[1] + dims[1] * ii[2])) * w;
        }
    }
    acc
}

/// Scaling and squaring: `u0 = v / 2^steps`, then `u <- u + u∘(I + u)` `steps` times.
pub fn exp_svf(v: &VelocityField, steps: u32) -> DeformationField {
    let grid = &v.grid;
    let scale = 0.5f64.powi(steps as i32);
    let mut u: Vec<Vec3> = v.data.iter().map(|x| x * scale).collect();
    for _ in 0..steps {
        let next: Vec<Vec3> = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let p = grid.voxel_center(i) + u[i];
                u[i] + sample_vectors_clamped(&grid.dims, grid.world_to_index(&p), |j| u[j])
            })
            .collect();
        u = next;
    }
    DeformationField::from_displacement(grid.clone(), &u, FieldKind::Forward)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposeOrder {
    /// `x -> T(φ(x))`
    Forward,
    /// `x -> φ⁻¹(T⁻¹(x))`, where the supplied field is `φ⁻¹`.
    Inverse,
}

pub fn compose(t: &AffineTransform, phi: &DeformationField, order: ComposeOrder) -> DeformationField {
    let grid = phi.grid.clone();
    let positions: Vec<Vec3> = match order {
        ComposeOrder::Forward => phi.positions.par_iter().map(|p| t.apply(p)).collect(),
        ComposeOrder::Inverse => (0..grid.len())
            .into_par_iter()
            .map(|i| phi.eval(&t.apply_inverse(&grid.voxel_center(i))))
            .collect(),
    };
    let kind = match order {
        ComposeOrder::Forward => FieldKind::Forward,
        ComposeOrder::Inverse => FieldKind::Inverse,
    };
    DeformationField { grid, positions, kind }
}

/// Output voxel `x` takes `vol` sampled at `field(x)`; outside `vol` is background.
pub fn warp(vol: &LabelVolume, field: &DeformationField, mode: Interp) -> LabelVolume {
    LabelVolume::from_index_fn(field.grid.clone(), vol.channels, |idx, out| {
        let p = &field.positions[idx];
        match mode {
            Interp::Nearest => vol.sample_nearest_into(p, out),
            Interp::Linear => vol.sample_linear_into(p, out),
        }
    })
}

fn check_stencil_grid(grid: &Grid3, len: usize) -> Result<()> {
    if grid.dims.iter().any(|&d| d < 3) {
        return Err(Error::GridTooSmall(grid.dims));
    }
    if len != grid.len() {
        return Err(Error::InvalidArgument(format!("field has {len} vectors, grid has {}", grid.len())));
    }
    Ok(())
}

/// Discrete vector Laplacian of `u` at every interior voxel; zero on the hull.
pub fn laplacian(grid: &Grid3, u: &[Vec3]) -> Result<Vec<Vec3>> {
    check_stencil_grid(grid, u.len())?;
    let [nx, ny, nz] = grid.dims;
    let w = [1.0 / grid.spacing[0].powi(2), 1.0 / grid.spacing[1].powi(2), 1.0 / grid.spacing[2].powi(2)];
    let stride = [1, nx, nx * ny];
    Ok((0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = grid.coords(idx);
            if i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1 {
                return Vec3::zeros();
            }
            let c = u[idx];
            let mut l = Vec3::zeros();
            for a in 0..3 {
                l += (u[idx + stride[a]] - c * 2.0 + u[idx - stride[a]]) * w[a];
            }
            l
        })
        .collect())
}

/// `Σ_interior ‖Δu‖²` with the 6-neighbour spacing-scaled stencil.
pub fn laplacian_energy(grid: &Grid3, u: &[Vec3]) -> Result<f64> {
    Ok(laplacian(grid, u)?.iter().map(|l| l.norm_squared()).sum())
}

/// Energy and its gradient `2 Lᵀ L u` with respect to `u`.
pub fn laplacian_energy_grad(grid: &Grid3, u: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
    let lu = laplacian(grid, u)?;
    let energy = lu.iter().map(|l| l.norm_squared()).sum();
    // The stencil is symmetric, so Lᵀ r is the same stencil applied to r
    // (which is zero on the hull), read back at every voxel.
    let [nx, ny, nz] = grid.dims;
    let w = [1.0 / grid.spacing[0].powi(2), 1.0 / grid.spacing[1].powi(2), 1.0 / grid.spacing[2].powi(2)];
    let stride = [1isize, nx as isize, (nx * ny) as isize];
    let dims = [nx, ny, nz];
    let interior = |c: [usize; 3]| (0..3).all(|a| c[a] > 0 && c[a] + 1 < dims[a]);
    let grad = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let c = grid.coords(idx);
            let mut g = Vec3::zeros();
            if interior(c) {
                g -= lu[idx] * (2.0 * (w[0] + w[1] + w[2]));
            }
            for a in 0..3 {
                for sgn in [-1isize, 1] {
                    let na = c[a] as isize + sgn;
                    if na < 0 || na >= dims[a] as isize {
                        continue;
                    }
                    let n = (idx as isize + sgn * stride[a]) as usize;
                    g += lu[n] * w[a];
                }
            }
            g * 2.0
        })
        .collect();
    Ok((energy, grad))
}

/// Separable Gaussian smoothing of a vector field with replicated borders.
pub fn gaussian_smooth(grid: &Grid3, data: &[Vec3], sigma_mm: f64) -> Vec<Vec3> {
    if sigma_mm <= 0.0 {
        return data.to_vec();
    }
    let mut cur = data.to_vec();
    let stride = [1usize, grid.dims[0], grid.dims[0] * grid.dims[1]];
    for a in 0..3 {
        let sigma = sigma_mm / grid.spacing[a];
        let r = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let ksum: f64 = kernel.iter().sum();
        let n = grid.dims[a] as isize;
        let src = &cur;
        let next: Vec<Vec3> = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let c = grid.coords(idx)[a] as isize;
                let base = idx - c as usize * stride[a];
                let mut acc = Vec3::zeros();
                for (t, kv) in kernel.iter().enumerate() {
                    let x = (c + t as isize - r).clamp(0, n - 1) as usize;
                    acc += src[base + x * stride[a]] * *kv;
                }
                acc / ksum
            })
            .collect();
        cur = next;
    }
    cur
}
