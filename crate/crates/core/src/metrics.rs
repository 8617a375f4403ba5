//! Dice overlap and exact Hausdorff distance between hard label volumes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3, LabelVolume, LABEL_NAMES};

fn check_grids(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    pred.grid.ensure_same(&gt.grid, "prediction vs ground truth")
}

pub fn dice(pred: &LabelVolume, gt: &LabelVolume, label: usize) -> Result<f64> {
    check_grids(pred, gt)?;
    Ok(dice_labels(&pred.hard_labels(), &gt.hard_labels(), label as u8))
}

pub(crate) fn dice_labels(p: &[u8], g: &[u8], label: u8) -> f64 {
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.iter().zip(g) {
        let (ia, ib) = (a == label, b == label);
        np += ia as usize;
        ng += ib as usize;
        inter += (ia && ib) as usize;
    }
    if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    }
}

/// Foreground voxels with a 6-neighbour outside the set or on the grid hull.
pub fn boundary_voxels(grid: &Grid3, set: &[bool]) -> Vec<bool> {
    let [nx, ny, nz] = grid.dims;
    (0..grid.len())
        .map(|idx| {
            if !set[idx] {
                return false;
            }
            let [i, j, k] = grid.coords(idx);
            if i == 0 || j == 0 || k == 0 || i + 1 == nx || j + 1 == ny || k + 1 == nz {
                return true;
            }
            !(set[idx - 1] && set[idx + 1] && set[idx - nx] && set[idx + nx] && set[idx - nx * ny] && set[idx + nx * ny])
        })
        .collect()
}

/// Exact 1D squared distance transform (lower envelope of parabolas) with
/// sample positions `x_q = q * spacing`. `f` is overwritten.
fn edt_1d(f: &mut [f64], spacing: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * spacing;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
                    if s <= *z.last().expect("paired with v") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    out.clear();
    if v.is_empty() {
        out.resize(n, f64::INFINITY);
    } else {
        let mut k = 0;
        for q in 0..n {
            let x = pos(q);
            while k + 1 < v.len() && z[k + 1] < x {
                k += 1;
            }
            let d = x - pos(v[k]);
            out.push(d * d + f[v[k]]);
        }
    }
    f.copy_from_slice(out);
}

/// Squared Euclidean distance (mm²) from every voxel centre to the nearest
/// voxel of `set`; infinite if the set is empty.
pub fn squared_distance_transform(grid: &Grid3, set: &[bool]) -> Vec<f64> {
    let mut d: Vec<f64> = set.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let dims = grid.dims;
    let stride = [1usize, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        let (o1, o2) = ((axis + 1) % 3, (axis + 2) % 3);
        let lines: Vec<usize> = (0..dims[o1] * dims[o2])
            .map(|l| (l % dims[o1]) * stride[o1] + (l / dims[o1]) * stride[o2])
            .collect();
        let results: Vec<Vec<f64>> = lines
            .par_iter()
            .map_init(
                || (Vec::new(), Vec::new(), Vec::new()),
                |(v, z, out), &start| {
                    let mut f: Vec<f64> = (0..n).map(|q| d[start + q * stride[axis]]).collect();
                    edt_1d(&mut f, grid.spacing[axis], v, z, out);
                    f
                },
            )
            .collect();
        for (start, f) in lines.iter().zip(results) {
            for (q, val) in f.into_iter().enumerate() {
                d[start + q * stride[axis]] = val;
            }
        }
    }
    d
}

pub fn hausdorff(pred: &LabelVolume, gt: &LabelVolume, label: usize) -> Result<f64> {
    check_grids(pred, gt)?;
    hausdorff_labels(&pred.grid, &pred.hard_labels(), &gt.hard_labels(), label as u8)
}

pub(crate) fn hausdorff_labels(grid: &Grid3, p: &[u8], g: &[u8], label: u8) -> Result<f64> {
    let sp: Vec<bool> = p.iter().map(|&l| l == label).collect();
    let sg: Vec<bool> = g.iter().map(|&l| l == label).collect();
    if !sp.iter().any(|&b| b) || !sg.iter().any(|&b| b) {
        return Err(Error::EmptySet { label: label as usize });
    }
    let bp = boundary_voxels(grid, &sp);
    let bg = boundary_voxels(grid, &sg);
    let directed = |from: &[bool], to: &[bool]| {
        let dt = squared_distance_transform(grid, to);
        from.iter().zip(&dt).filter(|(b, _)| **b).map(|(_, d)| *d).fold(0.0, f64::max)
    };
    Ok(directed(&bp, &bg).max(directed(&bg, &bp)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub labels: Vec<String>,
    pub dice: Vec<f64>,
    pub hausdorff_mm: Vec<f64>,
}

/// Dice and Hausdorff for every foreground label in channel order.
pub fn evaluate_case(pred: &LabelVolume, gt: &LabelVolume) -> Result<LabelMetrics> {
    check_grids(pred, gt)?;
    let p = pred.hard_labels();
    let g = gt.hard_labels();
    let mut m = LabelMetrics { labels: vec![], dice: vec![], hausdorff_mm: vec![] };
    for l in 1..gt.channels.max(pred.channels) {
        m.labels.push(LABEL_NAMES.get(l).map(|s| s.to_string()).unwrap_or_else(|| format!("label{l}")));
        m.dice.push(dice_labels(&p, &g, l as u8));
        m.hausdorff_mm.push(hausdorff_labels(&gt.grid, &p, &g, l as u8)?);
    }
    Ok(m)
}

/// As [`evaluate_case`], but an empty label yields NaN instead of an error.
pub fn evaluate_case_lenient(pred: &LabelVolume, gt: &LabelVolume) -> Result<LabelMetrics> {
    check_grids(pred, gt)?;
    let p = pred.hard_labels();
    let g = gt.hard_labels();
    let mut m = LabelMetrics { labels: vec![], dice: vec![], hausdorff_mm: vec![] };
    for l in 1..gt.channels.max(pred.channels) {
        m.labels.push(LABEL_NAMES.get(l).map(|s| s.to_string()).unwrap_or_else(|| format!("label{l}")));
        m.dice.push(dice_labels(&p, &g, l as u8));
        m.hausdorff_mm.push(match hausdorff_labels(&gt.grid, &p, &g, l as u8) {
            Ok(h) => h,
            Err(Error::EmptySet { .. }) => f64::NAN,
            Err(e) => return Err(e),
        });
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Vec3;

    fn grid(n: usize) -> Grid3 {
        Grid3::axis_aligned([n, n, n], [1.0; 3], Vec3::zeros()).unwrap()
    }

    fn vol(g: &Grid3, f: impl Fn(usize, usize, usize) -> u8) -> LabelVolume {
        let labels: Vec<u8> = (0..g.len()).map(|i| {
            let [x, y, z] = g.coords(i);
            f(x, y, z)
        }).collect();
        LabelVolume::from_labels(g.clone(), 3, &labels).unwrap()
    }

    fn brute_hd(g: &Grid3, a: &[bool], b: &[bool]) -> f64 {
        let ba = boundary_voxels(g, a);
        let bb = boundary_voxels(g, b);
        let pts = |s: &[bool]| -> Vec<Vec3> { (0..g.len()).filter(|&i| s[i]).map(|i| g.voxel_center(i)).collect() };
        let (pa, pb) = (pts(&ba), pts(&bb));
        let dir = |x: &[Vec3], y: &[Vec3]| x.iter().map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max);
        dir(&pa, &pb).max(dir(&pb, &pa))
    }

    #[test]
    fn dice_examples() {
        let g = grid(10);
        let cube = vol(&g, |x, y, z| (x < 4 && y < 4 && z < 4) as u8);
        assert_eq!(dice(&cube, &cube, 1).unwrap(), 1.0);
        let shifted = vol(&g, |x, y, z| ((2..6).contains(&x) && y < 4 && z < 4) as u8);
        assert_eq!(dice(&cube, &shifted, 1).unwrap(), 0.5);
        let far = vol(&g, |x, y, z| (x >= 6 && y < 4 && z < 4) as u8);
        assert_eq!(dice(&cube, &far, 1).unwrap(), 0.0);
        assert_eq!(dice(&cube, &cube, 2).unwrap(), 1.0);
    }

    #[test]
    fn hausdorff_examples() {
        let g = grid(10);
        let a = vol(&g, |x, y, z| ((x, y, z) == (1, 1, 1)) as u8);
        let b = vol(&g, |x, y, z| ((x, y, z) == (4, 1, 1)) as u8);
        assert!((hausdorff(&a, &b, 1).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(hausdorff(&a, &a, 1).unwrap(), 0.0);
        assert!(matches!(hausdorff(&a, &b, 2), Err(Error::EmptySet { label: 2 })));
    }

    #[test]
    fn nested_cubes_match_brute_force() {
        let g = grid(8);
        let outer = vol(&g, |_, _, _| 1);
        let inner = vol(&g, |x, y, z| ((2..6).contains(&x) && (2..6).contains(&y) && (2..6).contains(&z)) as u8);
        let expect = brute_hd(&g, &outer.label_mask(1), &inner.label_mask(1));
        assert!((hausdorff(&outer, &inner, 1).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn distance_transform_matches_brute_force_anisotropic() {
        let g = Grid3::axis_aligned([7, 5, 6], [0.7, 1.3, 2.1], Vec3::zeros()).unwrap();
        let set: Vec<bool> = (0..g.len()).map(|i| (i * 37) % 11 == 0).collect();
        let dt = squared_distance_transform(&g, &set);
        for i in 0..g.len() {
            let brute = (0..g.len()).filter(|&j| set[j]).map(|j| (g.voxel_center(i) - g.voxel_center(j)).norm_squared()).fold(f64::INFINITY, f64::min);
            assert!((dt[i] - brute).abs() < 1e-9, "{i}: {} vs {brute}", dt[i]);
        }
    }

    #[test]
    fn eroded_copy_is_one_voxel_away() {
        let g = grid(12);
        let ball = vol(&g, |x, y, z| ((2..10).contains(&x) && (2..10).contains(&y) && (2..10).contains(&z)) as u8);
        let eroded = vol(&g, |x, y, z| ((3..9).contains(&x) && (3..9).contains(&y) && (3..9).contains(&z)) as u8);
        assert!(dice(&ball, &eroded, 1).unwrap() < 1.0);
        // Corner of the outer boundary to the inner corner is a full diagonal.
        let h = hausdorff(&ball, &eroded, 1).unwrap();
        assert!((h - brute_hd(&g, &ball.label_mask(1), &eroded.label_mask(1))).abs() < 1e-9);
    }

    #[test]
    fn evaluate_identity() {
        let g = grid(8);
        let v = vol(&g, |x, _, _| (x % 3) as u8);
        let m = evaluate_case(&v, &v).unwrap();
        assert_eq!(m.dice, vec![1.0, 1.0]);
        assert_eq!(m.hausdorff_mm, vec![0.0, 0.0]);
        assert_eq!(m.labels, vec!["LVM", "LV"]);
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let a = vol(&grid(4), |_, _, _| 1);
        let b = vol(&grid(5), |_, _, _| 1);
        assert!(matches!(dice(&a, &b, 1), Err(Error::GridMismatch(_))));
    }
}
