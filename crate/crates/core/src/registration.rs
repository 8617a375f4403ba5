//! Per-case atlas registration under the combined loss
//! `L = L_a2s + L_s2a + λ L_reg`.
//!
//! The atlas is first aligned by an affine transform, then deformed by a
//! stationary velocity field. `Φ = T ∘ exp(v)` maps atlas space to patient
//! space, `Φ⁻¹ = exp(−v) ∘ T⁻¹` pulls the atlas onto the target grid.

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{argmax_labels, Grid3, Interp, LabelVolume, Mask3, Vec3};
use crate::transform::{
    compose, exp_svf, gaussian_smooth, laplacian_energy, laplacian_energy_grad, sample_vectors_clamped, warp,
    AffineTransform, ComposeOrder, DeformationField, VelocityField,
};

const MAX_CHANNELS: usize = 16;
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Target is a rasterised slice stack; losses are restricted to the coverage mask.
    Sparse,
    /// Target is a dense label volume.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub lambda: f64,
    /// Initial step length in normalised coordinates (multiples of the grid half-extent).
    pub step_size: f64,
    pub max_steps: usize,
    pub affine_steps: usize,
    pub convergence_tol: f64,
    pub svf_smoothing_sigma_mm: f64,
    pub svf_steps: u32,
    /// Cap on the per-step velocity update in mm.
    pub max_update_mm: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            lambda: 2000.0,
            step_size: 0.001,
            max_steps: 150,
            affine_steps: 150,
            convergence_tol: 1e-4,
            svf_smoothing_sigma_mm: 6.0,
            svf_steps: 6,
            max_update_mm: 2.0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.step_size > 0.0) || !(self.max_update_mm > 0.0) {
            return Err(Error::InvalidArgument("need lambda >= 0, step_size > 0 and max_update_mm > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub a2s: f64,
    pub s2a: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub affine: AffineTransform,
    pub velocity: VelocityField,
    /// Atlas space to patient space.
    pub phi: DeformationField,
    /// Patient space to atlas space; pulls the atlas onto the target grid.
    pub phi_inv: DeformationField,
    /// Step 0 is the state after the affine phase; one record per accepted step.
    pub trace: Vec<LossRecord>,
    /// Masked `L_a2s` per accepted affine step.
    pub affine_trace: Vec<f64>,
    pub lambda: f64,
}

impl RegistrationResult {
    pub fn final_losses(&self) -> LossRecord {
        *self.trace.last().expect("trace has the initial record")
    }
}

fn check_inputs(target: &LabelVolume, atlas: &LabelVolume, field_grid: &Grid3, mask: Option<&Mask3>) -> Result<()> {
    target.grid.ensure_same(&atlas.grid, "target vs atlas")?;
    target.grid.ensure_same(field_grid, "target vs deformation field")?;
    if let Some(m) = mask {
        target.grid.ensure_same(&m.grid, "target vs mask")?;
    }
    if target.channels != atlas.channels {
        return Err(Error::GridMismatch(format!(
            "target has {} channels, atlas has {}",
            target.channels, atlas.channels
        )));
    }
    if target.channels > MAX_CHANNELS {
        return Err(Error::InvalidArgument(format!("at most {MAX_CHANNELS} channels are supported")));
    }
    Ok(())
}

/// Deterministic parallel sum: fixed chunks, partials added in order.
fn chunked_sum(n: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let parts: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(n)).map(&f).sum())
        .collect();
    parts.iter().sum()
}

#[inline]
fn foreground_sq_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).skip(1).map(|(x, y)| ((*x - *y) as f64).powi(2)).sum()
}

#[inline]
fn voxel_values(vol: &LabelVolume, idx: usize, out: &mut [f32]) {
    let n = vol.n_voxels();
    for (c, o) in out.iter_mut().enumerate() {
        *o = vol.data[c * n + idx];
    }
}

/// `Σ_{x ∈ mask} Σ_{j ≥ 1} (t_j(x) − a_j(Φ⁻¹(x)))²`, atlas sampled trilinearly.
pub fn loss_a2s(target: &LabelVolume, atlas: &LabelVolume, phi_inv: &DeformationField, mask: Option<&Mask3>) -> Result<f64> {
    check_inputs(target, atlas, &phi_inv.grid, mask)?;
    let ch = target.channels;
    Ok(chunked_sum(target.n_voxels(), |idx| {
        if mask.is_some_and(|m| !m.data[idx]) {
            return 0.0;
        }
        let mut t = [0f32; MAX_CHANNELS];
        let mut w = [0f32; MAX_CHANNELS];
        voxel_values(target, idx, &mut t[..ch]);
        atlas.sample_linear_into(&phi_inv.positions[idx], &mut w[..ch]);
        foreground_sq_diff(&t[..ch], &w[..ch])
    }))
}

/// `Σ_x Σ_{j ≥ 1} (a_j(x) − t_j(Φ(x)))²` over atlas voxels. With a mask, only
/// voxels whose image `Φ(x)` falls on a masked voxel count and the sparse
/// target is read by nearest sampling; without one it is trilinear.
pub fn loss_s2a(target: &LabelVolume, atlas: &LabelVolume, phi: &DeformationField, mask: Option<&Mask3>) -> Result<f64> {
    check_inputs(target, atlas, &phi.grid, mask)?;
    let ch = target.channels;
    Ok(chunked_sum(atlas.n_voxels(), |idx| {
        let p = &phi.positions[idx];
        let mut a = [0f32; MAX_CHANNELS];
        let mut r = [0f32; MAX_CHANNELS];
        voxel_values(atlas, idx, &mut a[..ch]);
        match mask {
            Some(m) => {
                if !m.nearest(p) {
                    return 0.0;
                }
                target.sample_nearest_into(p, &mut r[..ch]);
            }
            None => target.sample_linear_into(p, &mut r[..ch]),
        }
        foreground_sq_diff(&a[..ch], &r[..ch])
    }))
}

/// Central-difference gradients (world units) of every channel at every voxel,
/// stored `grad[c * n + idx]`.
fn channel_gradients(vol: &LabelVolume) -> Vec<Vec3> {
    let g = &vol.grid;
    let n = g.len();
    let dims = g.dims;
    let stride = [1usize, dims[0], dims[0] * dims[1]];
    (0..vol.channels * n)
        .into_par_iter()
        .map(|ci| {
            let (c, idx) = (ci / n, ci % n);
            let data = vol.channel(c);
            let coords = g.coords(idx);
            let mut d = [0.0f64; 3];
            for a in 0..3 {
                let lo = if coords[a] > 0 { idx - stride[a] } else { idx };
                let hi = if coords[a] + 1 < dims[a] { idx + stride[a] } else { idx };
                let span = (hi - lo) / stride[a];
                if span > 0 {
                    d[a] = (data[hi] - data[lo]) as f64 / span as f64;
                }
            }
            g.index_gradient_to_world(d)
        })
        .collect()
}

#[inline]
fn sample_gradient(grid: &Grid3, grads: &[Vec3], channel: usize, p: &Vec3) -> Vec3 {
    let n = grid.len();
    let c = grid.world_to_index(p);
    let inside = (0..3).all(|a| c[a] >= -0.5 && c[a] <= grid.dims[a] as f64 - 0.5);
    if !inside {
        return Vec3::zeros();
    }
    sample_vectors_clamped(&grid.dims, c, |idx| grads[channel * n + idx])
}

/// Trilinear sample and its exact spatial gradient (world units), matching
/// `sample_linear_into`: out-of-grid corners read as background.
fn sample_linear_with_gradient(vol: &LabelVolume, p: &Vec3, out: &mut [f32], grad: &mut [Vec3]) {
    let ch = vol.channels;
    out[..ch].fill(0.0);
    grad[..ch].fill(Vec3::zeros());
    let g = &vol.grid;
    let n = g.len();
    let c = g.world_to_index(p);
    let base = [c[0].floor(), c[1].floor(), c[2].floor()];
    let f = [c[0] - base[0], c[1] - base[1], c[2] - base[2]];
    let b = [base[0] as isize, base[1] as isize, base[2] as isize];
    if (0..3).any(|a| b[a] < -1 || b[a] >= g.dims[a] as isize) {
        out[0] = 1.0;
        return;
    }
    for corner in 0..8 {
        let d = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let wa: [f64; 3] = std::array::from_fn(|a| if d[a] == 1 { f[a] } else { 1.0 - f[a] });
        let da: [f64; 3] = std::array::from_fn(|a| if d[a] == 1 { 1.0 } else { -1.0 });
        let w = wa[0] * wa[1] * wa[2];
        let dw = [da[0] * wa[1] * wa[2], wa[0] * da[1] * wa[2], wa[0] * wa[1] * da[2]];
        let (i, j, k) = (b[0] + d[0] as isize, b[1] + d[1] as isize, b[2] + d[2] as isize);
        let idx = g.in_bounds(i, j, k).then(|| g.linear(i as usize, j as usize, k as usize));
        for cc in 0..ch {
            let val = match idx {
                Some(idx) => vol.data[cc * n + idx] as f64,
                None => (cc == 0) as u8 as f64,
            };
            if val == 0.0 {
                continue;
            }
            out[cc] += (w * val) as f32;
            grad[cc] += Vec3::new(dw[0], dw[1], dw[2]) * val;
        }
    }
    for gr in grad[..ch].iter_mut() {
        *gr = g.index_gradient_to_world([gr.x, gr.y, gr.z]);
    }
}

/// Affine parameters acting on normalised coordinates `q = (x − C) / h`:
/// `T⁻¹(x) = C + h (M q + c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct AffineParams {
    m: Matrix3<f64>,
    c: Vec3,
}

impl AffineParams {
    fn identity() -> Self {
        Self { m: Matrix3::identity(), c: Vec3::zeros() }
    }

    fn inverse_transform(&self, centre: &Vec3, h: f64) -> Result<AffineTransform> {
        AffineTransform::new(self.m, centre - self.m * centre + self.c * h)
    }

    fn norm(g: &(Matrix3<f64>, Vec3)) -> f64 {
        (g.0.norm_squared() + g.1.norm_squared()).sqrt()
    }
}

struct Problem<'a> {
    target: &'a LabelVolume,
    atlas: &'a LabelVolume,
    mask: Option<&'a Mask3>,
    atlas_grad: Vec<Vec3>,
    centre: Vec3,
    h: f64,
}

impl Problem<'_> {
    /// Masked `L_a2s` for an affine-only map, with its gradient in parameter space.
    fn affine_loss_grad(&self, p: &AffineParams) -> Result<(f64, (Matrix3<f64>, Vec3))> {
        let t_inv = p.inverse_transform(&self.centre, self.h)?;
        let grid = &self.target.grid;
        let ch = self.target.channels;
        let n = grid.len();
        let parts: Vec<(f64, Matrix3<f64>, Vec3)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|chunk| {
                let mut loss = 0.0;
                let mut gm = Matrix3::zeros();
                let mut gc = Vec3::zeros();
                let mut t = [0f32; MAX_CHANNELS];
                let mut w = [0f32; MAX_CHANNELS];
                let mut dw = [Vec3::zeros(); MAX_CHANNELS];
                for idx in chunk * CHUNK..((chunk + 1) * CHUNK).min(n) {
                    if self.mask.is_some_and(|m| !m.data[idx]) {
                        continue;
                    }
                    let x = grid.voxel_center(idx);
                    let y = t_inv.apply(&x);
                    voxel_values(self.target, idx, &mut t[..ch]);
                    sample_linear_with_gradient(self.atlas, &y, &mut w[..ch], &mut dw[..ch]);
                    let mut g = Vec3::zeros();
                    for j in 1..ch {
                        let r = (w[j] - t[j]) as f64;
                        if r == 0.0 {
                            continue;
                        }
                        loss += r * r;
                        g += dw[j] * (2.0 * r);
                    }
                    if g != Vec3::zeros() {
                        let q = (x - self.centre) / self.h;
                        gm += g * q.transpose() * self.h;
                        gc += g * self.h;
                    }
                }
                (loss, gm, gc)
            })
            .collect();
        let mut out = (0.0, (Matrix3::zeros(), Vec3::zeros()));
        for (l, gm, gc) in parts {
            out.0 += l;
            out.1 .0 += gm;
            out.1 .1 += gc;
        }
        Ok(out)
    }

    fn affine_phase(&self, cfg: &RegistrationConfig) -> Result<(AffineTransform, Vec<f64>)> {
        let mut p = AffineParams::identity();
        let (mut loss, mut grad) = self.affine_loss_grad(&p)?;
        let mut trace = vec![loss];
        let mut eta = cfg.step_size;
        for _ in 0..cfg.affine_steps {
            let gn = AffineParams::norm(&grad);
            if gn == 0.0 || eta < 1e-7 {
                break;
            }
            let cand = AffineParams { m: p.m - grad.0 * (eta / gn), c: p.c - grad.1 * (eta / gn) };
            match self.affine_loss_grad(&cand) {
                Ok((l, g)) if l < loss => {
                    p = cand;
                    loss = l;
                    grad = g;
                    trace.push(loss);
                    eta = (eta * 1.2).min(0.05);
                }
                _ => eta *= 0.5,
            }
        }
        let t = p.inverse_transform(&self.centre, self.h)?.inverse();
        Ok((t, trace))
    }

    fn evaluate(&self, t: &AffineTransform, v: &VelocityField, cfg: &RegistrationConfig) -> Result<State> {
        let phi_v = exp_svf(v, cfg.svf_steps);
        let phi_inv_v = exp_svf(&v.scaled(-1.0), cfg.svf_steps);
        let phi = compose(t, &phi_v, ComposeOrder::Forward);
        let phi_inv = compose(t, &phi_inv_v, ComposeOrder::Inverse);
        let a2s = loss_a2s(self.target, self.atlas, &phi_inv, self.mask)?;
        let s2a = loss_s2a(self.target, self.atlas, &phi, self.mask)?;
        let reg = laplacian_energy(&v.grid, &phi_v.displacement())?;
        Ok(State {
            record: LossRecord { step: 0, a2s, s2a, reg, total: a2s + s2a + cfg.lambda * reg },
            phi,
            phi_inv,
            phi_inv_v,
        })
    }

    /// Approximate gradient of the total loss with respect to `v`.
    fn velocity_gradient(&self, t: &AffineTransform, v: &VelocityField, st: &State, cfg: &RegistrationConfig) -> Result<Vec<Vec3>> {
        let grid = &v.grid;
        let ch = self.target.channels;
        let sparse = self.mask.is_some();
        let data: Vec<Vec3> = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let mut g = Vec3::zeros();
                let mut a = [0f32; MAX_CHANNELS];
                let mut w = [0f32; MAX_CHANNELS];
                let mut tt = [0f32; MAX_CHANNELS];
                let y = grid.voxel_center(idx);

                // a2s: W(T y) = a(φ⁻¹(y)) against t(T y).
                let x = t.apply(&y);
                let observed = self.mask.map_or(true, |m| m.nearest(&x));
                if observed {
                    let py = &st.phi_inv_v.positions[idx];
                    self.atlas.sample_linear_into(py, &mut w[..ch]);
                    if sparse {
                        self.target.sample_nearest_into(&x, &mut tt[..ch]);
                    } else {
                        self.target.sample_linear_into(&x, &mut tt[..ch]);
                    }
                    for j in 1..ch {
                        let r = (w[j] - tt[j]) as f64;
                        if r != 0.0 {
                            g -= sample_gradient(grid, &self.atlas_grad, j, py) * (2.0 * r);
                        }
                    }
                }

                // s2a: a(y) against t(Φ(y)), using the atlas gradient.
                let p = &st.phi.positions[idx];
                let observed = self.mask.map_or(true, |m| m.nearest(p));
                if observed {
                    voxel_values(self.atlas, idx, &mut a[..ch]);
                    if sparse {
                        self.target.sample_nearest_into(p, &mut tt[..ch]);
                    } else {
                        self.target.sample_linear_into(p, &mut tt[..ch]);
                    }
                    let n = grid.len();
                    for j in 1..ch {
                        let r = (a[j] - tt[j]) as f64;
                        if r != 0.0 {
                            g -= self.atlas_grad[j * n + idx] * (2.0 * r);
                        }
                    }
                }
                g
            })
            .collect();
        let (_, reg_grad) = laplacian_energy_grad(grid, &v.data)?;
        let total: Vec<Vec3> = data.iter().zip(&reg_grad).map(|(d, r)| d + r * cfg.lambda).collect();
        Ok(gaussian_smooth(grid, &total, cfg.svf_smoothing_sigma_mm))
    }
}

struct State {
    record: LossRecord,
    phi: DeformationField,
    phi_inv: DeformationField,
    phi_inv_v: DeformationField,
}

pub fn register(
    target: &LabelVolume,
    atlas: &LabelVolume,
    mode: Mode,
    mask: Option<&Mask3>,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    let mask = match mode {
        Mode::Sparse => Some(mask.ok_or(Error::MissingMask)?),
        Mode::Dense => mask,
    };
    check_inputs(target, atlas, &target.grid, mask)?;
    let grid = &target.grid;
    if grid.dims.iter().any(|&d| d < 3) {
        return Err(Error::GridTooSmall(grid.dims));
    }
    let problem = Problem {
        target,
        atlas,
        mask,
        atlas_grad: channel_gradients(atlas),
        centre: grid.center(),
        h: grid.half_extent(),
    };

    let (affine, affine_trace) = problem.affine_phase(cfg)?;

    let mut v = VelocityField::zeros(grid.clone());
    let mut state = problem.evaluate(&affine, &v, cfg)?;
    let mut trace = vec![state.record];
    let mut eta = (cfg.step_size * problem.h).min(cfg.max_update_mm);
    let mut step = 0;
    while step < cfg.max_steps && eta > 1e-4 {
        step += 1;
        let grad = problem.velocity_gradient(&affine, &v, &state, cfg)?;
        let gmax = grad.iter().map(|g| g.norm()).fold(0.0, f64::max);
        if gmax == 0.0 {
            break;
        }
        let cand = VelocityField {
            grid: v.grid.clone(),
            data: v.data.iter().zip(&grad).map(|(x, g)| x - g * (eta / gmax)).collect(),
        };
        let next = problem.evaluate(&affine, &cand, cfg)?;
        if next.record.total < state.record.total {
            v = cand;
            state = next;
            state.record.step = trace.len();
            trace.push(state.record);
            eta = (eta * 1.2).min(cfg.max_update_mm);
            if trace.len() > 10 {
                let old = trace[trace.len() - 11].total;
                if old > 0.0 && (old - state.record.total) / old < cfg.convergence_tol {
                    break;
                }
            }
        } else {
            eta *= 0.5;
        }
    }

    Ok(RegistrationResult {
        affine,
        velocity: v,
        phi: state.phi,
        phi_inv: state.phi_inv,
        trace,
        affine_trace,
        lambda: cfg.lambda,
    })
}

/// Dense reconstruction in patient space: hard labels of the atlas pulled back through `Φ⁻¹`.
pub fn densify(result: &RegistrationResult, atlas: &LabelVolume) -> Result<LabelVolume> {
    result.phi_inv.grid.ensure_same(&atlas.grid, "deformation field vs atlas")?;
    Ok(argmax_labels(&warp(atlas, &result.phi_inv, Interp::Linear)))
}

/// Hard labels of the target pulled into atlas space through `Φ`.
pub fn target_in_atlas_space(result: &RegistrationResult, target: &LabelVolume) -> LabelVolume {
    argmax_labels(&warp(target, &result.phi, Interp::Linear))
}
