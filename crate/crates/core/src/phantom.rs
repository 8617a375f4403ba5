//! Parametric five-chamber heart phantoms built from ellipsoids.
//!
//! Shapes are defined in a local frame with the mitral valve at the origin,
//! `z` pointing from apex to base and `x` pointing towards the tricuspid
//! valve. Ventricles live below `z = 0`, atria above it.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3, LabelVolume, Vec3, LA, LABEL_NAMES, LV, LVM, NUM_CHANNELS, RA, RV};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    fn contains(&self, q: &Vec3) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (q[a] - self.center[a]) / self.radii[a];
            s += d * d;
        }
        s <= 1.0
    }

    fn grown(&self, t: f64) -> Self {
        Self { center: self.center, radii: self.radii.map(|r| r + t) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: Grid3,
    /// LV blood pool; its centre is the mitral valve.
    pub lv: Ellipsoid,
    pub myo_thickness_mm: f64,
    pub rv: Ellipsoid,
    pub ra: Ellipsoid,
    pub la: Ellipsoid,
    /// Rotations about the local x, y and z axes, applied in that order.
    pub rotation_deg: [f64; 3],
    /// Extra translation of the heart after centring it in the grid.
    pub translation_mm: [f64; 3],
    pub seed: u64,
}

/// Local point mapped to the grid centre.
const HEART_CENTRE: [f64; 3] = [15.0, 0.0, -17.0];

impl PhantomSpec {
    /// The reference anatomy (seed 0).
    pub fn canonical(grid: Grid3) -> Self {
        Self {
            grid,
            lv: Ellipsoid { center: [0.0, 0.0, 0.0], radii: [22.0, 22.0, 60.0] },
            myo_thickness_mm: 9.0,
            rv: Ellipsoid { center: [44.0, 0.0, 0.0], radii: [17.0, 26.0, 52.0] },
            ra: Ellipsoid { center: [44.0, 0.0, 0.0], radii: [18.0, 24.0, 30.0] },
            la: Ellipsoid { center: [-6.0, 0.0, 0.0], radii: [24.0, 26.0, 34.0] },
            rotation_deg: [0.0, 35.0, 25.0],
            translation_mm: [0.0, 0.0, 0.0],
            seed: 0,
        }
    }

    /// Seed 0 is the canonical anatomy; other seeds jitter sizes, positions and pose.
    pub fn from_seed(grid: Grid3, seed: u64) -> Self {
        let mut spec = Self::canonical(grid);
        spec.seed = seed;
        if seed == 0 {
            return spec;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = |e: &mut Ellipsoid, rng: &mut ChaCha8Rng| {
            for r in &mut e.radii {
                *r *= rng.gen_range(0.92..=1.08);
            }
        };
        scale(&mut spec.lv, &mut rng);
        for e in [&mut spec.rv, &mut spec.ra, &mut spec.la] {
            scale(e, &mut rng);
            e.center[0] += rng.gen_range(-2.0..=2.0);
            e.center[1] += rng.gen_range(-2.0..=2.0);
        }
        spec.myo_thickness_mm = rng.gen_range(8.0..=10.0);
        for a in &mut spec.rotation_deg {
            *a += rng.gen_range(-6.0..=6.0);
        }
        for t in &mut spec.translation_mm {
            *t = rng.gen_range(-4.0..=4.0);
        }
        spec
    }

    fn rotation(&self) -> Rotation3<f64> {
        let [ax, ay, az] = self.rotation_deg.map(f64::to_radians);
        Rotation3::from_axis_angle(&Vector3::z_axis(), az)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), ay)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), ax)
    }

    pub fn to_world(&self, q: &Vec3) -> Vec3 {
        let c = Vec3::from(HEART_CENTRE);
        self.rotation() * (q - c) + self.grid.center() + Vec3::from(self.translation_mm)
    }

    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        let c = Vec3::from(HEART_CENTRE);
        self.rotation().inverse() * (p - self.grid.center() - Vec3::from(self.translation_mm)) + c
    }

    fn validate(&self) -> Result<()> {
        for (name, e) in [("LV", &self.lv), ("RV", &self.rv), ("RA", &self.ra), ("LA", &self.la)] {
            if e.radii.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
                return Err(Error::OverlapConflict(format!("{name} has a non-positive radius")));
            }
        }
        if !(self.myo_thickness_mm > 0.0) {
            return Err(Error::OverlapConflict("myocardium thickness must be positive".into()));
        }
        Ok(())
    }

    /// Label of a point in local coordinates.
    pub fn label_local(&self, q: &Vec3) -> u8 {
        if q.z <= 0.0 {
            if self.lv.contains(q) {
                LV as u8
            } else if self.lv.grown(self.myo_thickness_mm).contains(q) {
                LVM as u8
            } else if self.rv.contains(q) {
                RV as u8
            } else {
                0
            }
        } else if self.la.contains(q) {
            LA as u8
        } else if self.ra.contains(q) {
            RA as u8
        } else {
            0
        }
    }

    pub fn landmarks(&self) -> Landmarks {
        // Endocardial apex. With the epicardial tip the default 10 mm SAX
        // grid puts a slice within a millimetre of the flat valve plane.
        let apex_z = -self.lv.radii[2];
        Landmarks {
            mv: self.to_world(&Vec3::zeros()),
            tv: self.to_world(&Vec3::new(self.rv.center[0], self.rv.center[1], 0.0)),
            apex: self.to_world(&Vec3::new(0.0, 0.0, apex_z)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    pub mv: Vec3,
    pub tv: Vec3,
    pub apex: Vec3,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: LabelVolume,
    pub landmarks: Landmarks,
}

fn rasterize(spec: &PhantomSpec, label: impl Fn(&Vec3, u8) -> u8 + Sync) -> LabelVolume {
    LabelVolume::from_fn(spec.grid.clone(), NUM_CHANNELS, |p, out| {
        out.fill(0.0);
        let q = spec.to_local(p);
        out[label(&q, spec.label_local(&q)) as usize] = 1.0;
    })
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let volume = rasterize(spec, |_, l| l);
    for l in 1..NUM_CHANNELS {
        if volume.label_count(l) == 0 {
            return Err(Error::OverlapConflict(format!("{} is empty after priority resolution", LABEL_NAMES[l])));
        }
    }
    Ok(Phantom { volume, landmarks: spec.landmarks() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defect {
    None,
    /// Tunnel through the channel (genus one).
    Handle(usize),
    /// Background slab cutting the channel in two.
    Split(usize),
}

impl fmt::Display for Defect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Defect::None => write!(f, "none"),
            Defect::Handle(l) => write!(f, "handle:{}", LABEL_NAMES[*l]),
            Defect::Split(l) => write!(f, "split:{}", LABEL_NAMES[*l]),
        }
    }
}

impl FromStr for Defect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("none") {
            return Ok(Defect::None);
        }
        let (kind, label) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("defect '{s}' is not kind:LABEL")))?;
        let l = LABEL_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(label))
            .filter(|&l| l > 0)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown foreground label '{label}'")))?;
        match kind.to_ascii_lowercase().as_str() {
            "handle" => Ok(Defect::Handle(l)),
            "split" => Ok(Defect::Split(l)),
            _ => Err(Error::InvalidArgument(format!("unknown defect kind '{kind}'"))),
        }
    }
}

fn chamber_centre(spec: &PhantomSpec, label: usize) -> Vec3 {
    match label {
        LV | LVM => Vec3::new(0.0, 0.0, -0.5 * spec.lv.radii[2]),
        RV => Vec3::new(spec.rv.center[0], spec.rv.center[1], -0.4 * spec.rv.radii[2]),
        RA => Vec3::new(spec.ra.center[0], spec.ra.center[1], 0.5 * spec.ra.radii[2]),
        _ => Vec3::new(spec.la.center[0], spec.la.center[1], 0.5 * spec.la.radii[2]),
    }
}

/// Phantom with one injected topological defect; only the targeted channel
/// loses voxels (to background).
pub fn generate_broken(spec: &PhantomSpec, defect: Defect) -> Result<LabelVolume> {
    let base = generate(spec)?;
    let (target, centre) = match defect {
        Defect::None => return Ok(base.volume),
        Defect::Handle(l) | Defect::Split(l) => (l, chamber_centre(spec, l)),
    };
    if target == 0 || target >= NUM_CHANNELS {
        return Err(Error::InvalidArgument(format!("defect target {target} is not a foreground label")));
    }
    let voxel = spec.grid.spacing.iter().cloned().fold(0.0, f64::max);
    let radius = (4.0f64).max(voxel);
    let half_slab = (2.0f64).max(1.0 * voxel);
    let cut = move |q: &Vec3| -> bool {
        let d = q - centre;
        match defect {
            Defect::Handle(LVM) => d.y >= 0.0 && (d.x * d.x + d.z * d.z).sqrt() <= radius,
            // Atria are domes on the valve plane: drill from the base to the top.
            Defect::Handle(RA) | Defect::Handle(LA) => (d.x * d.x + d.y * d.y).sqrt() <= radius,
            Defect::Handle(_) => (d.x * d.x + d.z * d.z).sqrt() <= radius,
            Defect::Split(LV) | Defect::Split(RV) => d.z.abs() <= half_slab,
            Defect::Split(_) => d.x.abs() <= half_slab,
            Defect::None => false,
        }
    };
    Ok(rasterize(spec, |q, l| if l as usize == target && cut(q) { 0 } else { l }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_cardiac_frame;
    use crate::mesh::check_topology;

    fn coarse() -> Grid3 {
        Grid3::centered([48, 48, 48], 4.0, Vec3::zeros()).unwrap()
    }

    #[test]
    fn default_phantom_passes_topology() {
        let p = generate(&PhantomSpec::canonical(Grid3::default_heart())).unwrap();
        for r in check_topology(&p.volume) {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn jittered_coarse_phantoms_pass_topology() {
        for seed in 0..20 {
            let p = generate(&PhantomSpec::from_seed(coarse(), seed)).unwrap();
            for r in check_topology(&p.volume) {
                assert!(r.pass, "seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&PhantomSpec::from_seed(coarse(), 7)).unwrap();
        let b = generate(&PhantomSpec::from_seed(coarse(), 7)).unwrap();
        assert_eq!(a.volume, b.volume);
        let c = generate(&PhantomSpec::from_seed(coarse(), 8)).unwrap();
        assert_ne!(a.volume, c.volume);
    }

    #[test]
    fn zero_radius_is_rejected() {
        let mut s = PhantomSpec::canonical(coarse());
        s.ra.radii = [0.0, 10.0, 10.0];
        assert!(matches!(generate(&s), Err(Error::OverlapConflict(_))));
    }

    #[test]
    fn landmarks_sit_on_their_chambers() {
        let s = PhantomSpec::from_seed(Grid3::default_heart(), 3);
        let p = generate(&s).unwrap();
        let g = &p.volume.grid;
        // mv lies on the LV / LA interface: both labels within two voxels.
        let near = |pt: &Vec3, label: u8| {
            let c = g.world_to_index(pt).map(|x| x.round() as isize);
            (-2..=2).any(|a| (-2..=2).any(|b| (-2..=2).any(|d| {
                let (i, j, k) = (c[0] + a, c[1] + b, c[2] + d);
                g.in_bounds(i, j, k) && p.volume.label_at(g.linear(i as usize, j as usize, k as usize)) == label
            })))
        };
        assert!(near(&p.landmarks.mv, LV as u8) && near(&p.landmarks.mv, LA as u8));
        assert!(near(&p.landmarks.tv, RV as u8) && near(&p.landmarks.tv, RA as u8));
        assert!(near(&p.landmarks.apex, LVM as u8));
        let c = PhantomSpec::canonical(Grid3::default_heart());
        let l = c.landmarks();
        let f = build_cardiac_frame(l.mv, l.tv, l.apex).unwrap();
        assert!((f.axis_x - (c.to_world(&Vec3::x()) - c.to_world(&Vec3::zeros()))).norm() < 1e-9);
        assert!((f.long_axis - (c.to_world(&Vec3::z()) - c.to_world(&Vec3::zeros()))).norm() < 1e-9);
    }

    #[test]
    fn defects_break_only_their_channel() {
        for seed in 0..4 {
            let s = PhantomSpec::from_seed(coarse(), seed);
            for l in 1..NUM_CHANNELS {
                for defect in [Defect::Handle(l), Defect::Split(l)] {
                    let v = generate_broken(&s, defect).unwrap();
                    let r = check_topology(&v);
                    for t in &r {
                        assert_eq!(t.pass, t.label != l, "seed {seed} {defect}: {t:?}");
                    }
                    let t = &r[l - 1];
                    match defect {
                        Defect::Handle(_) => assert_eq!((t.euler, t.components), (Some(0), 1), "seed {seed} {defect}"),
                        _ => assert_eq!(t.components, 2, "seed {seed} {defect}"),
                    }
                }
            }
        }
        let s = PhantomSpec::canonical(coarse());
        assert_eq!(generate_broken(&s, Defect::None).unwrap(), generate(&s).unwrap().volume);
    }

    #[test]
    fn defect_parsing() {
        assert_eq!("handle:LA".parse::<Defect>().unwrap(), Defect::Handle(LA));
        assert_eq!("split:rv".parse::<Defect>().unwrap(), Defect::Split(RV));
        assert!("handle:BG".parse::<Defect>().is_err());
        assert!("twist:LA".parse::<Defect>().is_err());
        assert_eq!(Defect::Split(RA).to_string(), "split:RA");
    }
}
