//! Regular voxel grids, multi-channel label volumes and the cardiac frame.
//!
//! Voxels are node-centred: voxel `(i, j, k)` sits at
//! `origin + i*spacing[0]*axes[0] + j*spacing[1]*axes[1] + k*spacing[2]*axes[2]`.
//! Sampling outside the grid yields pure background (channel 0 = 1).

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Background plus the five foreground structures, in report order.
pub const LABEL_NAMES: [&str; 6] = ["BG", "LVM", "LV", "RV", "RA", "LA"];
pub const NUM_CHANNELS: usize = 6;
pub const LVM: usize = 1;
pub const LV: usize = 2;
pub const RV: usize = 3;
pub const RA: usize = 4;
pub const LA: usize = 5;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: Vec3,
    pub axes: [Vec3; 3],
}

impl Grid3 {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: Vec3, axes: [Vec3; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!("zero dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-positive spacing {spacing:?}")));
        }
        for a in 0..3 {
            if (axes[a].norm() - 1.0).abs() > ORTHO_TOL {
                return Err(Error::InvalidGrid(format!("axis {a} is not unit length")));
            }
            for b in (a + 1)..3 {
                if axes[a].dot(&axes[b]).abs() > ORTHO_TOL {
                    return Err(Error::InvalidGrid(format!("axes {a} and {b} are not orthogonal")));
                }
            }
        }
        Ok(Self { dims, spacing, origin, axes })
    }

    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: Vec3) -> Result<Self> {
        Self::new(dims, spacing, origin, [Vec3::x(), Vec3::y(), Vec3::z()])
    }

    /// Axis-aligned isotropic grid whose geometric centre is `center`.
    pub fn centered(dims: [usize; 3], spacing: f64, center: Vec3) -> Result<Self> {
        let half = Vec3::new(
            (dims[0] as f64 - 1.0) * 0.5 * spacing,
            (dims[1] as f64 - 1.0) * 0.5 * spacing,
            (dims[2] as f64 - 1.0) * 0.5 * spacing,
        );
        Self::axis_aligned(dims, [spacing; 3], center - half)
    }

    /// The default working grid: 160^3 voxels at 1.25 mm, centred on the world origin.
    pub fn default_heart() -> Self {
        Self::centered([160, 160, 160], 1.25, Vec3::zeros()).expect("static grid is valid")
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    #[inline]
    pub fn index_to_world(&self, c: [f64; 3]) -> Vec3 {
        self.origin
            + self.axes[0] * (c[0] * self.spacing[0])
            + self.axes[1] * (c[1] * self.spacing[1])
            + self.axes[2] * (c[2] * self.spacing[2])
    }

    #[inline]
    pub fn voxel_center(&self, idx: usize) -> Vec3 {
        let [i, j, k] = self.coords(idx);
        self.index_to_world([i as f64, j as f64, k as f64])
    }

    #[inline]
    pub fn world_to_index(&self, p: &Vec3) -> [f64; 3] {
        let d = p - self.origin;
        [
            d.dot(&self.axes[0]) / self.spacing[0],
            d.dot(&self.axes[1]) / self.spacing[1],
            d.dot(&self.axes[2]) / self.spacing[2],
        ]
    }

    /// Physical centre of the voxel lattice.
    pub fn center(&self) -> Vec3 {
        self.index_to_world([
            (self.dims[0] as f64 - 1.0) * 0.5,
            (self.dims[1] as f64 - 1.0) * 0.5,
            (self.dims[2] as f64 - 1.0) * 0.5,
        ])
    }

    /// Largest half-extent of the lattice in mm; used to normalise step lengths.
    pub fn half_extent(&self) -> f64 {
        (0..3)
            .map(|a| (self.dims[a] as f64 - 1.0).max(1.0) * self.spacing[a] * 0.5)
            .fold(0.0, f64::max)
    }

    /// Converts a gradient taken along index axes into a world-space gradient.
    #[inline]
    pub fn index_gradient_to_world(&self, g: [f64; 3]) -> Vec3 {
        self.axes[0] * (g[0] / self.spacing[0])
            + self.axes[1] * (g[1] / self.spacing[1])
            + self.axes[2] * (g[2] / self.spacing[2])
    }

    pub fn approx_eq(&self, other: &Grid3) -> bool {
        const TOL: f64 = 1e-6;
        self.dims == other.dims
            && (0..3).all(|a| (self.spacing[a] - other.spacing[a]).abs() < TOL)
            && (self.origin - other.origin).norm() < TOL
            && (0..3).all(|a| (self.axes[a] - other.axes[a]).norm() < TOL)
    }

    pub fn ensure_same(&self, other: &Grid3, what: &str) -> Result<()> {
        if self.approx_eq(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {:?}@{:?} vs {:?}@{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    #[inline]
    pub fn in_bounds(&self, i: isize, j: isize, k: isize) -> bool {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < self.dims[0]
            && (j as usize) < self.dims[1]
            && (k as usize) < self.dims[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    Nearest,
    Linear,
}

/// Multi-channel label map stored channel-major (`data[c * n + voxel]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub grid: Grid3,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl LabelVolume {
    pub fn background(grid: Grid3, channels: usize) -> Self {
        let n = grid.len();
        let mut data = vec![0.0; n * channels];
        data[..n].fill(1.0);
        Self { grid, channels, data }
    }

    pub fn from_labels(grid: Grid3, channels: usize, labels: &[u8]) -> Result<Self> {
        let n = grid.len();
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "label buffer has {} voxels, grid has {n}",
                labels.len()
            )));
        }
        let mut data = vec![0.0; n * channels];
        for (idx, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= channels {
                return Err(Error::InvalidArgument(format!("label {l} >= channel count {channels}")));
            }
            data[l * n + idx] = 1.0;
        }
        Ok(Self { grid, channels, data })
    }

    #[inline]
    pub fn n_voxels(&self) -> usize {
        self.grid.len()
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.n_voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.n_voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, idx: usize) -> f32 {
        self.data[c * self.n_voxels() + idx]
    }

    /// Argmax label of one voxel, ties going to the lowest channel.
    #[inline]
    pub fn label_at(&self, idx: usize) -> u8 {
        let n = self.n_voxels();
        let mut best = 0;
        let mut best_v = self.data[idx];
        for c in 1..self.channels {
            let v = self.data[c * n + idx];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        best as u8
    }

    pub fn hard_labels(&self) -> Vec<u8> {
        (0..self.n_voxels()).map(|i| self.label_at(i)).collect()
    }

    /// Boolean mask of voxels whose argmax label equals `label`.
    pub fn label_mask(&self, label: usize) -> Vec<bool> {
        (0..self.n_voxels()).map(|i| self.label_at(i) as usize == label).collect()
    }

    pub fn label_count(&self, label: usize) -> usize {
        (0..self.n_voxels()).filter(|&i| self.label_at(i) as usize == label).count()
    }

    /// Nearest-neighbour sample into `out` (length = channels).
    #[inline]
    pub fn sample_nearest_into(&self, p: &Vec3, out: &mut [f32]) {
        let c = self.grid.world_to_index(p);
        let n = self.n_voxels();
        let ii = [round_index(c[0]), round_index(c[1]), round_index(c[2])];
        out.fill(0.0);
        if self.grid.in_bounds(ii[0], ii[1], ii[2]) {
            let idx = self.grid.linear(ii[0] as usize, ii[1] as usize, ii[2] as usize);
            for (ch, o) in out.iter_mut().enumerate() {
                *o = self.data[ch * n + idx];
            }
        } else {
            out[0] = 1.0;
        }
    }

    /// Argmax label at the voxel nearest to `p`; background outside the grid.
    #[inline]
    pub fn nearest_label(&self, p: &Vec3) -> u8 {
        let c = self.grid.world_to_index(p);
        let ii = [round_index(c[0]), round_index(c[1]), round_index(c[2])];
        if self.grid.in_bounds(ii[0], ii[1], ii[2]) {
            self.label_at(self.grid.linear(ii[0] as usize, ii[1] as usize, ii[2] as usize))
        } else {
            0
        }
    }

    /// Trilinear sample into `out`. Corners outside the grid contribute pure
    /// background, so the channel sum of a normalised volume is preserved.
    #[inline]
    pub fn sample_linear_into(&self, p: &Vec3, out: &mut [f32]) {
        let c = self.grid.world_to_index(p);
        self.sample_linear_index(c, out);
    }

    #[inline]
    pub fn sample_linear_index(&self, c: [f64; 3], out: &mut [f32]) {
        out.fill(0.0);
        let d = self.grid.dims;
        let n = self.n_voxels();
        let base = [c[0].floor(), c[1].floor(), c[2].floor()];
        let f = [c[0] - base[0], c[1] - base[1], c[2] - base[2]];
        let b = [base[0] as isize, base[1] as isize, base[2] as isize];
        if b[0] < -1
            || b[1] < -1
            || b[2] < -1
            || b[0] >= d[0] as isize
            || b[1] >= d[1] as isize
            || b[2] >= d[2] as isize
        {
            out[0] = 1.0;
            return;
        }
        for corner in 0..8 {
            let dx = corner & 1;
            let dy = (corner >> 1) & 1;
            let dz = (corner >> 2) & 1;
            let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                * (if dz == 1 { f[2] } else { 1.0 - f[2] });
            if w == 0.0 {
                continue;
            }
            let (i, j, k) = (b[0] + dx as isize, b[1] + dy as isize, b[2] + dz as isize);
            if self.grid.in_bounds(i, j, k) {
                let idx = self.grid.linear(i as usize, j as usize, k as usize);
                for (ch, o) in out.iter_mut().enumerate() {
                    *o += (w as f32) * self.data[ch * n + idx];
                }
            } else {
                out[0] += w as f32;
            }
        }
    }

    /// Builds a volume on `grid` by evaluating `f(voxel_centre, out)` per voxel.
    pub fn from_fn<F>(grid: Grid3, channels: usize, f: F) -> Self
    where
        F: Fn(&Vec3, &mut [f32]) + Sync,
    {
        let g = grid.clone();
        Self::from_index_fn(grid, channels, move |idx, out| f(&g.voxel_center(idx), out))
    }

    /// Like [`LabelVolume::from_fn`] but `f` receives the linear voxel index.
    pub fn from_index_fn<F>(grid: Grid3, channels: usize, f: F) -> Self
    where
        F: Fn(usize, &mut [f32]) + Sync,
    {
        let n = grid.len();
        let mut voxel_major = vec![0.0f32; n * channels];
        voxel_major
            .par_chunks_mut(channels)
            .enumerate()
            .for_each(|(idx, out)| f(idx, out));
        let mut data = vec![0.0; n * channels];
        for (idx, v) in voxel_major.chunks(channels).enumerate() {
            for c in 0..channels {
                data[c * n + idx] = v[c];
            }
        }
        Self { grid, channels, data }
    }

    /// Largest deviation of the per-voxel channel sum from 1.
    pub fn max_normalisation_error(&self) -> f64 {
        let n = self.n_voxels();
        (0..n)
            .map(|i| {
                let s: f64 = (0..self.channels).map(|c| self.data[c * n + i] as f64).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

#[inline]
pub(crate) fn round_index(c: f64) -> isize {
    (c + 0.5).floor() as isize
}

/// Samples `vol` at every voxel centre of `target`.
pub fn resample(vol: &LabelVolume, target: &Grid3, mode: Interp) -> LabelVolume {
    let channels = vol.channels;
    LabelVolume::from_fn(target.clone(), channels, |p, out| match mode {
        Interp::Nearest => vol.sample_nearest_into(p, out),
        Interp::Linear => vol.sample_linear_into(p, out),
    })
}

/// Hard one-hot volume; ties resolve to the lowest channel index.
pub fn argmax_labels(vol: &LabelVolume) -> LabelVolume {
    let labels = vol.hard_labels();
    LabelVolume::from_labels(vol.grid.clone(), vol.channels, &labels).expect("argmax < channels")
}

/// Boolean voxel mask on a grid (slice coverage, ROI).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3 {
    pub grid: Grid3,
    pub data: Vec<bool>,
}

impl Mask3 {
    pub fn empty(grid: Grid3) -> Self {
        let n = grid.len();
        Self { grid, data: vec![false; n] }
    }

    pub fn full(grid: Grid3) -> Self {
        let n = grid.len();
        Self { grid, data: vec![true; n] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    #[inline]
    pub fn nearest(&self, p: &Vec3) -> bool {
        let c = self.grid.world_to_index(p);
        let ii = [round_index(c[0]), round_index(c[1]), round_index(c[2])];
        self.grid.in_bounds(ii[0], ii[1], ii[2])
            && self.data[self.grid.linear(ii[0] as usize, ii[1] as usize, ii[2] as usize)]
    }
}

/// Right-handed orthonormal frame: `long_axis` points apex -> mitral valve,
/// `axis_x` points towards the tricuspid valve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CardiacFrame {
    pub origin: Vec3,
    pub long_axis: Vec3,
    pub axis_x: Vec3,
    pub axis_y: Vec3,
}

impl CardiacFrame {
    /// Frame coordinates (x, y, long) to world.
    pub fn to_world(&self, q: &Vec3) -> Vec3 {
        self.origin + self.axis_x * q.x + self.axis_y * q.y + self.long_axis * q.z
    }

    pub fn to_frame(&self, p: &Vec3) -> Vec3 {
        let d = p - self.origin;
        Vec3::new(d.dot(&self.axis_x), d.dot(&self.axis_y), d.dot(&self.long_axis))
    }
}

pub fn build_cardiac_frame(mv_center: Vec3, tv_center: Vec3, apex: Vec3) -> Result<CardiacFrame> {
    let area = 0.5 * (mv_center - apex).cross(&(tv_center - apex)).norm();
    if !(area > 1e-6) {
        return Err(Error::CollinearLandmarks { area });
    }
    let long_axis = (mv_center - apex).normalize();
    let lateral = tv_center - mv_center;
    let axis_x = (lateral - long_axis * lateral.dot(&long_axis)).normalize();
    let axis_y = long_axis.cross(&axis_x);
    Ok(CardiacFrame {
        origin: (apex + mv_center) * 0.5,
        long_axis,
        axis_x,
        axis_y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn small_grid() -> Grid3 {
        Grid3::axis_aligned([6, 5, 4], [1.0, 2.0, 1.5], Vec3::new(-3.0, 1.0, 0.5)).unwrap()
    }

    #[test]
    fn grid_rejects_bad_geometry() {
        assert!(Grid3::axis_aligned([0, 1, 1], [1.0; 3], Vec3::zeros()).is_err());
        assert!(Grid3::axis_aligned([1, 1, 1], [1.0, 0.0, 1.0], Vec3::zeros()).is_err());
        let skew = [Vec3::x(), Vec3::new(0.1, 1.0, 0.0).normalize(), Vec3::z()];
        assert!(Grid3::new([2, 2, 2], [1.0; 3], Vec3::zeros(), skew).is_err());
    }

    #[test]
    fn index_world_round_trip() {
        let rot = Rotation3::from_euler_angles(0.3, -0.2, 0.7);
        let axes = [rot * Vec3::x(), rot * Vec3::y(), rot * Vec3::z()];
        let g = Grid3::new([4, 4, 4], [0.5, 1.0, 2.0], Vec3::new(1.0, 2.0, 3.0), axes).unwrap();
        let c = [1.25, 2.5, -0.75];
        let back = g.world_to_index(&g.index_to_world(c));
        for a in 0..3 {
            assert!((back[a] - c[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_axis_aligned() {
        let f = build_cardiac_frame(
            Vec3::new(0.0, 0.0, 80.0),
            Vec3::new(30.0, 0.0, 80.0),
            Vec3::zeros(),
        )
        .unwrap();
        assert!((f.long_axis - Vec3::z()).norm() < 1e-12);
        assert!((f.axis_x - Vec3::x()).norm() < 1e-12);
        assert!((f.axis_y - Vec3::y()).norm() < 1e-12);
        assert!((f.origin - Vec3::new(0.0, 0.0, 40.0)).norm() < 1e-12);
    }

    #[test]
    fn frame_collinear() {
        let r = build_cardiac_frame(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 2.0), Vec3::zeros());
        assert!(matches!(r, Err(Error::CollinearLandmarks { .. })));
    }

    #[test]
    fn frame_rotates_with_landmarks() {
        let rot = Rotation3::from_axis_angle(&Vec3::y_axis(), 30f64.to_radians());
        let f = build_cardiac_frame(
            rot * Vec3::new(0.0, 0.0, 80.0),
            rot * Vec3::new(30.0, 0.0, 80.0),
            rot * Vec3::zeros(),
        )
        .unwrap();
        assert!((f.long_axis - rot * Vec3::z()).norm() < 1e-9);
        assert!((f.axis_x - rot * Vec3::x()).norm() < 1e-9);
        assert!((f.axis_y - rot * Vec3::y()).norm() < 1e-9);
        assert!((f.axis_x.cross(&f.axis_y) - f.long_axis).norm() < 1e-9);
    }

    #[test]
    fn resample_identity_nearest_is_bitwise() {
        let g = small_grid();
        let labels: Vec<u8> = (0..g.len()).map(|i| (i * 7 % 6) as u8).collect();
        let v = LabelVolume::from_labels(g.clone(), 6, &labels).unwrap();
        let r = resample(&v, &g, Interp::Nearest);
        assert_eq!(r, v);
    }

    #[test]
    fn resample_background_stays_background() {
        let g = small_grid();
        let v = LabelVolume::background(g, 3);
        let target = Grid3::centered([7, 7, 7], 0.7, Vec3::new(2.0, 2.0, 2.0)).unwrap();
        for mode in [Interp::Nearest, Interp::Linear] {
            let r = resample(&v, &target, mode);
            assert!(r.hard_labels().iter().all(|&l| l == 0));
            assert!(r.max_normalisation_error() < 1e-6);
        }
    }

    #[test]
    fn resample_one_step_shift_moves_voxel() {
        let g = Grid3::axis_aligned([5, 5, 5], [2.0; 3], Vec3::zeros()).unwrap();
        let mut labels = vec![0u8; g.len()];
        labels[g.linear(2, 2, 2)] = 1;
        let v = LabelVolume::from_labels(g.clone(), 2, &labels).unwrap();
        // Target origin one step (+x) further: source voxel (2,2,2) is target voxel (1,2,2).
        let t = Grid3::axis_aligned([5, 5, 5], [2.0; 3], Vec3::new(2.0, 0.0, 0.0)).unwrap();
        let r = resample(&v, &t, Interp::Nearest);
        let hard = r.hard_labels();
        assert_eq!(hard[t.linear(1, 2, 2)], 1);
        assert_eq!(hard.iter().filter(|&&l| l == 1).count(), 1);
    }

    #[test]
    fn argmax_examples() {
        let g = Grid3::axis_aligned([2, 1, 1], [1.0; 3], Vec3::zeros()).unwrap();
        let v = LabelVolume { grid: g, channels: 2, data: vec![0.2, 0.5, 0.8, 0.5] };
        let a = argmax_labels(&v);
        assert_eq!(a.hard_labels(), vec![1, 0]);
        assert_eq!(a.data, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(argmax_labels(&a), a);
    }

    #[test]
    fn linear_sampling_keeps_partition_of_unity() {
        let g = small_grid();
        let labels: Vec<u8> = (0..g.len()).map(|i| (i % 3) as u8).collect();
        let v = LabelVolume::from_labels(g.clone(), 3, &labels).unwrap();
        let mut out = [0.0f32; 3];
        for k in 0..40 {
            let p = g.index_to_world([k as f64 * 0.17 - 1.3, k as f64 * 0.11 - 0.4, 0.3 * k as f64 - 2.0]);
            v.sample_linear_into(&p, &mut out);
            assert!((out.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
