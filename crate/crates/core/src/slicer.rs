//! Slice planning in the cardiac frame, slice extraction, acquisition
//! corruption and rasterisation of a slice stack back onto a voxel grid.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CardiacFrame, Grid3, LabelVolume, Mask3, Vec3};
use crate::nifti::{NiftiData, NiftiImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaxView {
    TwoChamber,
    ThreeChamber,
    FourChamber,
}

impl LaxView {
    pub const ALL: [LaxView; 3] = [LaxView::TwoChamber, LaxView::ThreeChamber, LaxView::FourChamber];

    /// Rotation of the view plane about the long axis, measured from `axis_x`.
    /// The four-chamber plane contains both valve landmarks.
    pub fn angle_deg(self) -> f64 {
        match self {
            LaxView::FourChamber => 0.0,
            LaxView::TwoChamber => 60.0,
            LaxView::ThreeChamber => 120.0,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            LaxView::TwoChamber => "2",
            LaxView::ThreeChamber => "3",
            LaxView::FourChamber => "4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Sax(usize),
    Lax(LaxView),
}

impl View {
    pub fn is_lax(&self) -> bool {
        matches!(self, View::Lax(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicePlane {
    /// World position of pixel (0, 0).
    pub origin: Vec3,
    pub u_axis: Vec3,
    pub v_axis: Vec3,
    pub normal: Vec3,
    pub spacing: f64,
    pub extent: [usize; 2],
    pub view: View,
}

impl SlicePlane {
    pub fn center(&self) -> Vec3 {
        self.origin
            + self.u_axis * ((self.extent[0] as f64 - 1.0) * 0.5 * self.spacing)
            + self.v_axis * ((self.extent[1] as f64 - 1.0) * 0.5 * self.spacing)
    }

    #[inline]
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        (p - self.origin).dot(&self.normal)
    }
}

/// Hard-label 2D map of one slice. Pixel `(i, j)` lives at
/// `origin + (i*s + shift.0) u + (j*s + shift.1) v`: the in-plane
/// displacement is carried geometrically, the pixels themselves never move.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceLabelMap {
    pub plane: SlicePlane,
    /// Row-major, `pixels[i + extent[0] * j]`.
    pub pixels: Vec<u8>,
    pub applied_shift: [f64; 2],
}

impl SliceLabelMap {
    #[inline]
    pub fn width(&self) -> usize {
        self.plane.extent[0]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.plane.extent[1]
    }

    #[inline]
    pub fn pixel(&self, i: isize, j: isize) -> u8 {
        if i < 0 || j < 0 || i as usize >= self.width() || j as usize >= self.height() {
            0
        } else {
            self.pixels[i as usize + self.width() * j as usize]
        }
    }

    #[inline]
    pub fn world_position(&self, i: f64, j: f64) -> Vec3 {
        let s = self.plane.spacing;
        self.plane.origin
            + self.plane.u_axis * (i * s + self.applied_shift[0])
            + self.plane.v_axis * (j * s + self.applied_shift[1])
    }

    /// Continuous pixel coordinates of the in-plane projection of `p`.
    #[inline]
    pub fn pixel_coords(&self, p: &Vec3) -> (f64, f64) {
        let d = p - self.plane.origin;
        let s = self.plane.spacing;
        (
            (d.dot(&self.plane.u_axis) - self.applied_shift[0]) / s,
            (d.dot(&self.plane.v_axis) - self.applied_shift[1]) / s,
        )
    }

    /// Label of the pixel nearest to the projection of `p`, or `None` outside the extent.
    #[inline]
    pub fn nearest_pixel(&self, p: &Vec3) -> Option<u8> {
        let (fi, fj) = self.pixel_coords(p);
        let (i, j) = ((fi + 0.5).floor() as isize, (fj + 0.5).floor() as isize);
        if i < 0 || j < 0 || i as usize >= self.width() || j as usize >= self.height() {
            None
        } else {
            Some(self.pixels[i as usize + self.width() * j as usize])
        }
    }

    pub fn translate(&mut self, delta_mm: [f64; 2]) {
        self.applied_shift[0] += delta_mm[0];
        self.applied_shift[1] += delta_mm[1];
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    /// LAX views first, then SAX base -> apex.
    pub slices: Vec<SliceLabelMap>,
    pub channels: usize,
}

impl SliceStack {
    pub fn new(mut slices: Vec<SliceLabelMap>, channels: usize) -> Self {
        slices.sort_by_key(|s| match s.plane.view {
            View::Lax(v) => (0, v as usize),
            View::Sax(k) => (1, k),
        });
        Self { slices, channels }
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn sax_count(&self) -> usize {
        self.slices.iter().filter(|s| !s.plane.view.is_lax()).count()
    }

    /// Keeps SAX slices and only the listed LAX views.
    pub fn retain_lax(&self, keep: &[LaxView]) -> SliceStack {
        let slices = self
            .slices
            .iter()
            .filter(|s| match s.plane.view {
                View::Lax(v) => keep.contains(&v),
                View::Sax(_) => true,
            })
            .cloned()
            .collect();
        SliceStack { slices, channels: self.channels }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlicePlanConfig {
    pub heart_extent_mm: f64,
    pub sax_spacing_mm: f64,
    pub sax_count: usize,
    pub lax_views: Vec<LaxView>,
    pub pixel_spacing_mm: f64,
}

impl Default for SlicePlanConfig {
    fn default() -> Self {
        Self {
            heart_extent_mm: 200.0,
            sax_spacing_mm: 10.0,
            sax_count: 10,
            lax_views: LaxView::ALL.to_vec(),
            pixel_spacing_mm: 1.25,
        }
    }
}

fn plane_through(center: Vec3, u: Vec3, v: Vec3, spacing: f64, extent: usize, view: View) -> SlicePlane {
    let half = (extent as f64 - 1.0) * 0.5 * spacing;
    SlicePlane {
        origin: center - u * half - v * half,
        u_axis: u,
        v_axis: v,
        normal: u.cross(&v),
        spacing,
        extent: [extent, extent],
        view,
    }
}

/// SAX planes are perpendicular to the long axis and centred on the frame
/// origin; LAX planes contain the long axis.
pub fn plan_slices(frame: &CardiacFrame, cfg: &SlicePlanConfig) -> Result<Vec<SlicePlane>> {
    if !(cfg.sax_spacing_mm > 0.0) || !(cfg.pixel_spacing_mm > 0.0) || !(cfg.heart_extent_mm > 0.0) {
        return Err(Error::InvalidArgument("slice spacings and extent must be positive".into()));
    }
    if cfg.sax_count == 0 && cfg.lax_views.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let extent = ((cfg.heart_extent_mm / cfg.pixel_spacing_mm).round() as usize).max(1);
    let mut planes = Vec::with_capacity(cfg.sax_count + cfg.lax_views.len());

    let mut views = cfg.lax_views.clone();
    views.sort();
    views.dedup();
    for view in views {
        let a = view.angle_deg().to_radians();
        let u = frame.axis_x * a.cos() + frame.axis_y * a.sin();
        planes.push(plane_through(frame.origin, u, frame.long_axis, cfg.pixel_spacing_mm, extent, View::Lax(view)));
    }
    // Index 0 is the most basal slice.
    for k in 0..cfg.sax_count {
        let offset = ((cfg.sax_count as f64 - 1.0) * 0.5 - k as f64) * cfg.sax_spacing_mm;
        let center = frame.origin + frame.long_axis * offset;
        planes.push(plane_through(
            center,
            frame.axis_x,
            frame.axis_y,
            cfg.pixel_spacing_mm,
            extent,
            View::Sax(k),
        ));
    }
    Ok(planes)
}

pub fn extract_slice(vol: &LabelVolume, plane: &SlicePlane) -> SliceLabelMap {
    let [w, h] = plane.extent;
    let mut pixels = vec![0u8; w * h];
    for j in 0..h {
        for i in 0..w {
            let p = plane.origin
                + plane.u_axis * (i as f64 * plane.spacing)
                + plane.v_axis * (j as f64 * plane.spacing);
            pixels[i + w * j] = vol.nearest_label(&p);
        }
    }
    SliceLabelMap { plane: plane.clone(), pixels, applied_shift: [0.0, 0.0] }
}

pub fn extract_stack(vol: &LabelVolume, planes: &[SlicePlane]) -> SliceStack {
    SliceStack::new(planes.iter().map(|p| extract_slice(vol, p)).collect(), vol.channels)
}

/// Simulates breath-hold motion (uniform in-plane shift per slice, recorded in
/// `applied_shift`) and planning error (uniform offset along the normal).
pub fn corrupt_stack(stack: &SliceStack, rng_seed: u64, inplane_range_mm: f64, plan_range_mm: f64) -> Result<SliceStack> {
    if !(inplane_range_mm >= 0.0) || !(plan_range_mm >= 0.0) {
        return Err(Error::InvalidArgument("corruption ranges must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut draw = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let mut out = stack.clone();
    for s in &mut out.slices {
        let dx = draw(inplane_range_mm);
        let dy = draw(inplane_range_mm);
        let dn = draw(plan_range_mm);
        s.translate([dx, dy]);
        s.plane.origin += s.plane.normal * dn;
    }
    Ok(out)
}

/// Voxels whose cell is cut by a slice plane, and whose centre projects inside
/// its extent, take that slice's nearest pixel label. Later slices overwrite
/// earlier ones.
pub fn rasterize_stack(stack: &SliceStack, target: &Grid3) -> (LabelVolume, Mask3) {
    let n = target.len();
    let mut labels = vec![0u8; n];
    let mut mask = Mask3::empty(target.clone());
    for slice in &stack.slices {
        let normal = slice.plane.normal;
        // Half-width of a voxel cell measured along the normal.
        let reach: f64 = (0..3).map(|a| 0.5 * target.spacing[a] * target.axes[a].dot(&normal).abs()).sum();
        // Distance to the plane is affine in the voxel index.
        let d0 = slice.plane.signed_distance(&target.origin);
        let step = [
            target.axes[0].dot(&normal) * target.spacing[0],
            target.axes[1].dot(&normal) * target.spacing[1],
            target.axes[2].dot(&normal) * target.spacing[2],
        ];
        for k in 0..target.dims[2] {
            for j in 0..target.dims[1] {
                let dj = d0 + step[1] * j as f64 + step[2] * k as f64;
                for i in 0..target.dims[0] {
                    let d = dj + step[0] * i as f64;
                    if d < -reach || d >= reach {
                        continue;
                    }
                    let idx = target.linear(i, j, k);
                    if let Some(l) = slice.nearest_pixel(&target.voxel_center(idx)) {
                        labels[idx] = l;
                        mask.data[idx] = true;
                    }
                }
            }
        }
    }
    let vol = LabelVolume::from_labels(target.clone(), stack.channels, &labels).expect("slice labels < channels");
    (vol, mask)
}

// ---------------------------------------------------------------------------
// Stack serialisation: one 2D .nii per slice plus a JSON sidecar.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceRecord {
    pub file: String,
    pub view: View,
    pub origin_mm: [f64; 3],
    pub u_axis: [f64; 3],
    pub v_axis: [f64; 3],
    pub normal: [f64; 3],
    pub spacing_mm: f64,
    pub extent: [usize; 2],
    pub applied_shift_mm: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackSidecar {
    pub channels: usize,
    pub slices: Vec<SliceRecord>,
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn slice_file_name(index: usize, view: &View) -> String {
    match view {
        View::Lax(v) => format!("slice_{index:02}_lax{}ch.nii", v.short_name()),
        View::Sax(k) => format!("slice_{index:02}_sax{k:02}.nii", ),
    }
}

fn slice_image(s: &SliceLabelMap) -> NiftiImage {
    let p = &s.plane;
    let o = s.world_position(0.0, 0.0);
    let cols = [p.u_axis * p.spacing, p.v_axis * p.spacing, p.normal * p.spacing];
    let mut affine = [[0.0; 4]; 3];
    for (r, row) in affine.iter_mut().enumerate() {
        for c in 0..3 {
            row[c] = cols[c][r];
        }
        row[3] = o[r];
    }
    NiftiImage {
        dims: vec![p.extent[0], p.extent[1], 1],
        affine,
        intent_code: 0,
        data: NiftiData::U8(s.pixels.clone()),
    }
}

/// Writes `stack.json` and one `.nii` per slice into `dir`; returns the sidecar path.
pub fn write_stack(stack: &SliceStack, dir: impl AsRef<Path>) -> Result<std::path::PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(stack.len());
    for (index, s) in stack.slices.iter().enumerate() {
        let file = slice_file_name(index, &s.plane.view);
        slice_image(s).write(dir.join(&file))?;
        records.push(SliceRecord {
            file,
            view: s.plane.view,
            origin_mm: arr(&s.plane.origin),
            u_axis: arr(&s.plane.u_axis),
            v_axis: arr(&s.plane.v_axis),
            normal: arr(&s.plane.normal),
            spacing_mm: s.plane.spacing,
            extent: s.plane.extent,
            applied_shift_mm: s.applied_shift,
        });
    }
    let sidecar = StackSidecar { channels: stack.channels, slices: records };
    let path = dir.join("stack.json");
    fs::write(&path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(path)
}

/// Reads a stack from its JSON sidecar; slice files resolve relative to it.
pub fn read_stack(sidecar_path: impl AsRef<Path>) -> Result<SliceStack> {
    let sidecar_path = sidecar_path.as_ref();
    let dir = sidecar_path.parent().unwrap_or_else(|| Path::new("."));
    let sidecar: StackSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path)?)?;
    let mut slices = Vec::with_capacity(sidecar.slices.len());
    for r in sidecar.slices {
        let img = NiftiImage::read(dir.join(&r.file))?;
        let pixels = match img.data {
            NiftiData::U8(v) => v,
            NiftiData::F32(v) => v.iter().map(|&x| x.round().clamp(0.0, 255.0) as u8).collect(),
        };
        if pixels.len() != r.extent[0] * r.extent[1] {
            return Err(Error::InvalidArgument(format!("{}: pixel count does not match extent", r.file)));
        }
        if let Some(&bad) = pixels.iter().find(|&&l| l as usize >= sidecar.channels) {
            return Err(Error::InvalidArgument(format!("{}: label {bad} >= channels", r.file)));
        }
        let v3 = |a: [f64; 3]| Vec3::new(a[0], a[1], a[2]);
        slices.push(SliceLabelMap {
            plane: SlicePlane {
                origin: v3(r.origin_mm),
                u_axis: v3(r.u_axis),
                v_axis: v3(r.v_axis),
                normal: v3(r.normal),
                spacing: r.spacing_mm,
                extent: r.extent,
                view: r.view,
            },
            pixels,
            applied_shift: r.applied_shift_mm,
        });
    }
    Ok(SliceStack { slices, channels: sidecar.channels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_cardiac_frame;

    fn frame() -> CardiacFrame {
        build_cardiac_frame(Vec3::new(0.0, 0.0, 40.0), Vec3::new(30.0, 0.0, 40.0), Vec3::new(0.0, 0.0, -40.0)).unwrap()
    }

    fn cube_volume() -> LabelVolume {
        // 41^3 at 1 mm centred on 0; cube label 2 for |x|,|y|,|z| <= 10.
        let g = Grid3::centered([41, 41, 41], 1.0, Vec3::zeros()).unwrap();
        LabelVolume::from_fn(g, 3, |p, out| {
            out.fill(0.0);
            if p.x.abs() <= 10.0 && p.y.abs() <= 10.0 && p.z.abs() <= 10.0 {
                out[2] = 1.0;
            } else {
                out[0] = 1.0;
            }
        })
    }

    #[test]
    fn sax_planes_are_parallel_and_spaced() {
        let cfg = SlicePlanConfig { sax_count: 10, lax_views: vec![], ..Default::default() };
        let planes = plan_slices(&frame(), &cfg).unwrap();
        assert_eq!(planes.len(), 10);
        for w in planes.windows(2) {
            assert!((w[0].normal - w[1].normal).norm() < 1e-12);
            assert!(((w[0].origin - w[1].origin).norm() - 10.0).abs() < 1e-9);
        }
        // Basal first.
        assert!(planes[0].origin.z > planes[9].origin.z);
    }

    #[test]
    fn lax_planes_contain_long_axis() {
        let f = frame();
        let cfg = SlicePlanConfig { sax_count: 1, lax_views: vec![LaxView::FourChamber], ..Default::default() };
        let planes = plan_slices(&f, &cfg).unwrap();
        assert_eq!(planes.len(), 2);
        assert!(planes[0].normal.dot(&f.long_axis).abs() < 1e-9);
        assert!(planes[0].signed_distance(&f.origin).abs() < 1e-9);
    }

    #[test]
    fn lax_dihedral_angles_are_sixty_degrees() {
        let cfg = SlicePlanConfig { sax_count: 0, ..Default::default() };
        let planes = plan_slices(&frame(), &cfg).unwrap();
        assert_eq!(planes.len(), 3);
        for a in 0..3 {
            for b in (a + 1)..3 {
                let c = planes[a].normal.dot(&planes[b].normal).abs().min(1.0);
                assert!((c.acos().to_degrees() - 60.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_plan_is_rejected() {
        let cfg = SlicePlanConfig { sax_count: 0, lax_views: vec![], ..Default::default() };
        assert!(matches!(plan_slices(&frame(), &cfg), Err(Error::EmptyPlan)));
    }

    #[test]
    fn extent_only_depends_on_heart_extent() {
        let f = frame();
        let a = plan_slices(&f, &SlicePlanConfig { heart_extent_mm: 100.0, ..Default::default() }).unwrap();
        let b = plan_slices(&f, &SlicePlanConfig { heart_extent_mm: 150.0, ..Default::default() }).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert!((pa.center() - pb.center()).norm() < 1e-9);
            assert_eq!(pa.normal, pb.normal);
            assert_ne!(pa.extent, pb.extent);
        }
    }

    #[test]
    fn extract_cube_cross_section() {
        let vol = cube_volume();
        let plane = plane_through(Vec3::zeros(), Vec3::x(), Vec3::y(), 1.0, 41, View::Sax(0));
        let s = extract_slice(&vol, &plane);
        // Analytic cross-section: 21 x 21 pixel centres inside |x|,|y| <= 10.
        assert_eq!(s.pixels.iter().filter(|&&l| l == 2).count(), 21 * 21);
        assert_eq!(s.applied_shift, [0.0, 0.0]);
    }

    #[test]
    fn extract_outside_and_background() {
        let vol = cube_volume();
        let far = plane_through(Vec3::new(0.0, 0.0, 500.0), Vec3::x(), Vec3::y(), 1.0, 20, View::Sax(0));
        assert!(extract_slice(&vol, &far).pixels.iter().all(|&l| l == 0));
        let bg = LabelVolume::background(vol.grid.clone(), 3);
        let mid = plane_through(Vec3::zeros(), Vec3::x(), Vec3::z(), 1.0, 20, View::Sax(0));
        assert!(extract_slice(&bg, &mid).pixels.iter().all(|&l| l == 0));
    }

    fn small_stack() -> SliceStack {
        let vol = cube_volume();
        let f = build_cardiac_frame(Vec3::new(0.0, 0.0, 15.0), Vec3::new(10.0, 0.0, 15.0), Vec3::new(0.0, 0.0, -15.0)).unwrap();
        let cfg = SlicePlanConfig { heart_extent_mm: 30.0, sax_spacing_mm: 5.0, sax_count: 4, pixel_spacing_mm: 1.0, ..Default::default() };
        extract_stack(&vol, &plan_slices(&f, &cfg).unwrap())
    }

    #[test]
    fn corrupt_zero_range_is_identity() {
        let s = small_stack();
        assert_eq!(corrupt_stack(&s, 3, 0.0, 0.0).unwrap(), s);
    }

    #[test]
    fn corrupt_is_deterministic_and_invertible() {
        let s = small_stack();
        let a = corrupt_stack(&s, 11, 8.0, 0.0).unwrap();
        assert_eq!(a, corrupt_stack(&s, 11, 8.0, 0.0).unwrap());
        assert_ne!(a, corrupt_stack(&s, 12, 8.0, 0.0).unwrap());
        let mut undone = a.clone();
        for sl in &mut undone.slices {
            let sh = sl.applied_shift;
            sl.translate([-sh[0], -sh[1]]);
        }
        for (u, o) in undone.slices.iter().zip(&s.slices) {
            assert_eq!(u.pixels, o.pixels);
            assert!(u.applied_shift[0].abs() < 1e-12 && u.applied_shift[1].abs() < 1e-12);
        }
    }

    #[test]
    fn mean_abs_shift_is_half_range() {
        // E|U(-R, R)| = R / 2; 10^4 draws across seeds.
        let s = small_stack();
        let r = 8.0;
        let mut total = 0.0;
        let mut count = 0usize;
        let mut seed = 0;
        while count < 10_000 {
            let c = corrupt_stack(&s, seed, r, 0.0).unwrap();
            for sl in &c.slices {
                total += sl.applied_shift[0].abs();
                count += 1;
            }
            seed += 1;
        }
        let mean = total / count as f64;
        assert!((mean - r / 2.0).abs() < 0.03 * r / 2.0, "mean {mean}");
    }

    #[test]
    fn rasterize_empty_stack() {
        let g = Grid3::centered([8, 8, 8], 1.0, Vec3::zeros()).unwrap();
        let (vol, mask) = rasterize_stack(&SliceStack { slices: vec![], channels: 3 }, &g);
        assert_eq!(mask.count(), 0);
        assert!(vol.hard_labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn rasterize_single_slice_is_one_voxel_slab() {
        let vol = cube_volume();
        // Plane z = 0 passes exactly through the voxel layer k = 20.
        let plane = plane_through(Vec3::zeros(), Vec3::x(), Vec3::y(), 1.0, 41, View::Sax(0));
        let stack = SliceStack::new(vec![extract_slice(&vol, &plane)], 3);
        let (r, mask) = rasterize_stack(&stack, &vol.grid);
        assert_eq!(mask.count(), 41 * 41);
        for idx in 0..vol.grid.len() {
            if mask.data[idx] {
                assert_eq!(vol.grid.coords(idx)[2], 20);
            } else {
                assert_eq!(r.label_at(idx), 0);
            }
        }
    }

    #[test]
    fn rasterize_planned_stack_matches_dense() {
        let vol = cube_volume();
        let stack = small_stack();
        let (r, mask) = rasterize_stack(&stack, &vol.grid);
        // Away from label boundaries the sparse labels must equal the dense ones.
        let g = &vol.grid;
        let uniform = |idx: usize| {
            let [i, j, k] = g.coords(idx);
            let l = vol.label_at(idx);
            (-1..=1).all(|a| {
                (-1..=1).all(|b| {
                    (-1..=1).all(|c| {
                        let (x, y, z) = (i as isize + a, j as isize + b, k as isize + c);
                        !g.in_bounds(x, y, z) || vol.label_at(g.linear(x as usize, y as usize, z as usize)) == l
                    })
                })
            })
        };
        let covered: Vec<usize> = (0..g.len()).filter(|&i| mask.data[i] && uniform(i)).collect();
        assert!(covered.len() > 1000);
        for &i in &covered {
            assert_eq!(r.label_at(i), vol.label_at(i), "voxel {:?}", g.coords(i));
        }
    }

    #[test]
    fn stack_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = corrupt_stack(&small_stack(), 5, 3.0, 1.0).unwrap();
        let p = write_stack(&s, dir.path()).unwrap();
        let back = read_stack(&p).unwrap();
        assert_eq!(back, s);
    }
}
