//! Slice shifting: iterative integer-pixel in-plane correction of a slice
//! stack against the labels where the other slices cross it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slicer::{SliceLabelMap, SliceStack};

/// Labels the other slices of a stack put on the lattice of one moving slice.
#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionImage {
    pub extent: [usize; 2],
    pub labels: Vec<u8>,
    pub valid: Vec<bool>,
    /// Row-major indices of valid pixels.
    pub valid_pixels: Vec<usize>,
}

impl IntersectionImage {
    pub fn valid_count(&self) -> usize {
        self.valid_pixels.len()
    }
}

pub fn build_intersection(stack: &SliceStack, moving_index: usize) -> Result<IntersectionImage> {
    if stack.len() < 2 {
        return Err(Error::InvalidArgument("intersections need at least two slices".into()));
    }
    if moving_index >= stack.len() {
        return Err(Error::InvalidArgument(format!("slice index {moving_index} out of range")));
    }
    let moving = &stack.slices[moving_index];
    let [w, h] = moving.plane.extent;
    let tol = 0.5 * moving.plane.spacing;
    let mut labels = vec![0u8; w * h];
    let mut valid = vec![false; w * h];
    let mut best = vec![f64::INFINITY; w * h];

    for (other_index, other) in stack.slices.iter().enumerate() {
        if other_index == moving_index {
            continue;
        }
        // Signed distance to the other plane is affine in (i, j).
        let p0 = moving.world_position(0.0, 0.0);
        let d0 = other.plane.signed_distance(&p0);
        let di = moving.plane.u_axis.dot(&other.plane.normal) * moving.plane.spacing;
        let dj = moving.plane.v_axis.dot(&other.plane.normal) * moving.plane.spacing;
        if di.abs() < 1e-12 && dj.abs() < 1e-12 && !(d0 >= -tol && d0 < tol) {
            continue;
        }
        for j in 0..h {
            for i in 0..w {
                let d = d0 + di * i as f64 + dj * j as f64;
                if !(d >= -tol && d < tol) {
                    continue;
                }
                let k = i + w * j;
                if d.abs() >= best[k] {
                    continue;
                }
                let p = moving.world_position(i as f64, j as f64);
                if let Some(l) = other.nearest_pixel(&p) {
                    labels[k] = l;
                    valid[k] = true;
                    best[k] = d.abs();
                }
            }
        }
    }
    let valid_pixels: Vec<usize> = (0..w * h).filter(|&k| valid[k]).collect();
    if valid_pixels.is_empty() {
        return Err(Error::NoIntersections { index: moving_index });
    }
    Ok(IntersectionImage { extent: [w, h], labels, valid, valid_pixels })
}

/// One-hot squared difference between the moving slice translated by `shift`
/// pixels and the intersection image, summed over valid pixels. A mismatch
/// costs 2 (one channel loses 1, another gains 1).
pub fn ssd_at_shift(moving: &SliceLabelMap, inter: &IntersectionImage, shift: [i32; 2]) -> f64 {
    let w = inter.extent[0];
    let mut mismatches = 0u64;
    for &k in &inter.valid_pixels {
        let (i, j) = ((k % w) as isize, (k / w) as isize);
        let m = moving.pixel(i - shift[0] as isize, j - shift[1] as isize);
        if m != inter.labels[k] {
            mismatches += 1;
        }
    }
    2.0 * mismatches as f64
}

/// Exhaustive search over the `±window` square. Ties go to the smaller
/// squared norm, then to the lexicographically smaller shift.
pub fn best_shift(moving: &SliceLabelMap, inter: &IntersectionImage, window: i32) -> ([i32; 2], f64) {
    let mut best = ([0, 0], ssd_at_shift(moving, inter, [0, 0]));
    for dx in -window..=window {
        for dy in -window..=window {
            let s = [dx, dy];
            let cost = ssd_at_shift(moving, inter, s);
            let key = |s: [i32; 2]| (s[0] * s[0] + s[1] * s[1], s);
            if cost < best.1 || (cost == best.1 && key(s) < key(best.0)) {
                best = (s, cost);
            }
        }
    }
    best
}

/// Sum over slices of the zero-shift SSD; slices without intersections add nothing.
pub fn total_ssd(stack: &SliceStack) -> f64 {
    (0..stack.len())
        .filter_map(|i| build_intersection(stack, i).ok().map(|inter| ssd_at_shift(&stack.slices[i], &inter, [0, 0])))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftState {
    /// Accumulated shift per slice in mm.
    pub cumulative_mm: Vec<[f64; 2]>,
    /// `log[m][i]` is the pixel shift applied to slice `i` in iteration `m`.
    pub log: Vec<Vec<[i32; 2]>>,
    pub iterations: usize,
    pub converged: bool,
    /// Total stack SSD before the first iteration and after each one.
    pub total_ssd: Vec<f64>,
}

impl ShiftState {
    pub fn cumulative_px(&self, slice: usize) -> [i32; 2] {
        self.log.iter().fold([0, 0], |acc, it| [acc[0] + it[slice][0], acc[1] + it[slice][1]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsaConfig {
    pub max_iters: usize,
    pub window_px: i32,
}

impl Default for SsaConfig {
    fn default() -> Self {
        Self { max_iters: 5, window_px: 10 }
    }
}

pub fn correct(stack: &SliceStack, cfg: &SsaConfig) -> Result<(SliceStack, ShiftState)> {
    if stack.is_empty() {
        return Err(Error::InvalidArgument("cannot correct an empty stack".into()));
    }
    let n = stack.len();
    let mut out = stack.clone();
    let mut state = ShiftState {
        cumulative_mm: vec![[0.0, 0.0]; n],
        log: Vec::new(),
        iterations: 0,
        converged: false,
        total_ssd: vec![total_ssd(&out)],
    };
    if n < 2 {
        state.converged = true;
        return Ok((out, state));
    }
    for _ in 0..cfg.max_iters {
        let mut applied = vec![[0i32; 2]; n];
        for i in 0..n {
            let inter = match build_intersection(&out, i) {
                Ok(inter) => inter,
                Err(Error::NoIntersections { .. }) => continue,
                Err(e) => return Err(e),
            };
            let (s, _) = best_shift(&out.slices[i], &inter, cfg.window_px);
            if s != [0, 0] {
                let sp = out.slices[i].plane.spacing;
                let mm = [s[0] as f64 * sp, s[1] as f64 * sp];
                out.slices[i].translate(mm);
                state.cumulative_mm[i][0] += mm[0];
                state.cumulative_mm[i][1] += mm[1];
                applied[i] = s;
            }
        }
        state.iterations += 1;
        let done = applied.iter().all(|s| *s == [0, 0]);
        state.log.push(applied);
        state.total_ssd.push(total_ssd(&out));
        if done {
            state.converged = true;
            break;
        }
    }
    Ok((out, state))
}
