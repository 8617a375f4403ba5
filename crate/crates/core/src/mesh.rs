//! Marching cubes, Euler characteristic and per-channel topology checks.
//!
//! The case table is derived at start-up by walking the six faces of the
//! cube. On a face with two diagonal inside corners, each inside corner is cut
//! off on its own, so neighbouring cells always agree on the shared face and
//! the output is a closed, consistently oriented 2-manifold.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3, LabelVolume, Vec3, LABEL_NAMES};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl SurfaceMesh {
    pub fn edge_set(&self) -> HashSet<(u32, u32)> {
        let mut edges = HashSet::with_capacity(self.triangles.len() * 3 / 2 + 1);
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        edges
    }

    /// Signed enclosed volume; positive for outward-facing triangles.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Connected components over vertices referenced by at least one triangle.
    pub fn component_count(&self) -> usize {
        let mut uf = UnionFind::new(self.vertices.len());
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &v in t {
                used[v as usize] = true;
            }
            uf.union(t[0] as usize, t[1] as usize);
            uf.union(t[0] as usize, t[2] as usize);
        }
        (0..self.vertices.len()).filter(|&v| used[v] && uf.find(v) == v).count()
    }

    pub fn write_stl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(84 + 50 * self.triangles.len());
        let mut header = [0u8; 80];
        header[..16].copy_from_slice(b"cardiorecon mesh");
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.triangles.len() as u32).to_le_bytes());
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| self.vertices[i as usize]);
            let n = (b - a).cross(&(c - a));
            let n = if n.norm() > 0.0 { n.normalize() } else { n };
            for v in [n, a, b, c] {
                for x in v.iter() {
                    buf.extend_from_slice(&(*x as f32).to_le_bytes());
                }
            }
            buf.extend_from_slice(&[0, 0]);
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn write_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for v in &self.vertices {
            writeln!(f, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for t in &self.triangles {
            writeln!(f, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        f.flush()?;
        Ok(())
    }
}

pub(crate) struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// `V − E + F` with `E` counted as unique undirected vertex pairs.
pub fn euler_characteristic(mesh: &SurfaceMesh) -> i64 {
    mesh.vertices.len() as i64 - mesh.edge_set().len() as i64 + mesh.triangles.len() as i64
}

// ---------------------------------------------------------------------------
// Case table

/// Corner `c` sits at `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
pub(crate) const CUBE_EDGES: [(u8, u8, u8); 12] = {
    let mut out = [(0u8, 0u8, 0u8); 12];
    let mut n = 0;
    let mut axis = 0;
    while axis < 3 {
        let mut a = 0u8;
        while a < 8 {
            if (a >> axis) & 1 == 0 {
                out[n] = (a, a | (1 << axis), axis as u8);
                n += 1;
            }
            a += 1;
        }
        axis += 1;
    }
    out
};

fn edge_between(a: u8, b: u8) -> usize {
    CUBE_EDGES
        .iter()
        .position(|&(x, y, _)| (x, y) == (a, b) || (x, y) == (b, a))
        .expect("corners share an edge")
}

/// Corners of the six faces in counter-clockwise order seen from outside.
fn cube_faces() -> Vec<[u8; 4]> {
    let mut faces = Vec::with_capacity(6);
    for axis in 0..3 {
        let (p, q) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2u8 {
            let mut cs = [0u8; 4];
            for (k, (u, v)) in [(0u8, 0u8), (1, 0), (1, 1), (0, 1)].iter().enumerate() {
                cs[k] = (side << axis) | (u << p) | (v << q);
            }
            if side == 0 {
                cs.reverse();
            }
            faces.push(cs);
        }
    }
    faces
}

/// Closed loops of crossing edges for one case.
pub(crate) fn case_loops(case: u8) -> Vec<Vec<usize>> {
    let inside = |c: u8| (case >> c) & 1 == 1;
    let mut next: [Option<usize>; 12] = [None; 12];
    for cs in cube_faces() {
        let flags = cs.map(inside);
        if flags.iter().all(|&f| f) || flags.iter().all(|&f| !f) {
            continue;
        }
        for k in 0..4 {
            if flags[k] && !flags[(k + 1) % 4] {
                // Run of inside corners ending at k: leave after it, enter before it.
                let mut m = k;
                while flags[(m + 3) % 4] {
                    m = (m + 3) % 4;
                }
                let leaving = edge_between(cs[k], cs[(k + 1) % 4]);
                let entering = edge_between(cs[(m + 3) % 4], cs[m]);
                debug_assert!(next[leaving].is_none());
                next[leaving] = Some(entering);
            }
        }
    }
    let mut seen = [false; 12];
    let mut loops = Vec::new();
    for s in 0..12 {
        if seen[s] || next[s].is_none() {
            continue;
        }
        let mut lp = vec![s];
        seen[s] = true;
        let mut x = next[s].expect("closed loop");
        while x != s {
            lp.push(x);
            seen[x] = true;
            x = next[x].expect("closed loop");
        }
        loops.push(lp);
    }
    loops
}

fn edge_faces(e: usize) -> [(u8, u8); 2] {
    // A cube edge along `axis` lies on the two faces normal to the other axes.
    let (a, _, axis) = CUBE_EDGES[e];
    let o1 = (axis + 1) % 3;
    let o2 = (axis + 2) % 3;
    [(o1, (a >> o1) & 1), (o2, (a >> o2) & 1)]
}

fn share_face(a: usize, b: usize) -> bool {
    let fa = edge_faces(a);
    edge_faces(b).iter().any(|f| fa.contains(f))
}

/// Fan start whose chords all cross the cube interior, never a face.
pub(crate) fn fan_start(lp: &[usize]) -> Option<usize> {
    let n = lp.len();
    (0..n).find(|&s| (0..n).all(|k| k == s || k == (s + 1) % n || k == (s + n - 1) % n || !share_face(lp[s], lp[k])))
}

fn build_table() -> Vec<Vec<[u8; 3]>> {
    let mut table: Vec<Vec<[u8; 3]>> = (0..=255u8)
        .map(|case| {
            let mut tris = Vec::new();
            for lp in case_loops(case) {
                let s = fan_start(&lp).expect("every loop admits an interior fan");
                let n = lp.len();
                for k in 1..n - 1 {
                    let (a, b) = ((s + k) % n, (s + k + 1) % n);
                    tris.push([lp[s] as u8, lp[a] as u8, lp[b] as u8]);
                }
            }
            tris
        })
        .collect();
    // Orient so that normals point away from inside corners (case 1: corner 0 inside).
    let mid = |e: u8| {
        let (a, b, _) = CUBE_EDGES[e as usize];
        (corner_pos(a) + corner_pos(b)) * 0.5
    };
    let t = table[1][0];
    let n = (mid(t[1]) - mid(t[0])).cross(&(mid(t[2]) - mid(t[0])));
    if n.dot(&Vec3::new(1.0, 1.0, 1.0)) < 0.0 {
        for tris in &mut table {
            for t in tris.iter_mut() {
                t.swap(1, 2);
            }
        }
    }
    table
}

fn corner_pos(c: u8) -> Vec3 {
    Vec3::new((c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64)
}

pub(crate) fn case_table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(build_table)
}

// ---------------------------------------------------------------------------
// Extraction

/// Surrounds the field with one layer of `fill`; the returned grid keeps the
/// original voxels at their world positions.
pub fn pad_field(grid: &Grid3, field: &[f32], fill: f32) -> (Grid3, Vec<f32>) {
    let [nx, ny, nz] = grid.dims;
    let dims = [nx + 2, ny + 2, nz + 2];
    let origin = grid.index_to_world([-1.0, -1.0, -1.0]);
    let padded = Grid3::new(dims, grid.spacing, origin, grid.axes).expect("padding keeps the grid valid");
    let mut out = vec![fill; padded.len()];
    for k in 0..nz {
        for j in 0..ny {
            let src = grid.linear(0, j, k);
            let dst = padded.linear(1, j + 1, k + 1);
            out[dst..dst + nx].copy_from_slice(&field[src..src + nx]);
        }
    }
    (padded, out)
}

/// Iso-surface of `field > iso` with linear interpolation along cell edges.
/// Vertices are welded by grid-edge key.
pub fn marching_cubes(grid: &Grid3, field: &[f32], iso: f32) -> Result<SurfaceMesh> {
    if grid.dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidGrid(format!("marching cubes needs >= 2 voxels per axis, got {:?}", grid.dims)));
    }
    if field.len() != grid.len() {
        return Err(Error::InvalidArgument("field length does not match grid".into()));
    }
    if field.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("field contains non-finite values".into()));
    }
    let table = case_table();
    let [nx, ny, nz] = grid.dims;
    let corner_offset: [usize; 8] = std::array::from_fn(|c| (c & 1) + nx * (((c >> 1) & 1) + ny * ((c >> 2) & 1)));
    let mut mesh = SurfaceMesh::default();
    let mut weld: HashMap<usize, u32> = HashMap::new();

    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let base = grid.linear(i, j, k);
                let mut case = 0u8;
                for (c, off) in corner_offset.iter().enumerate() {
                    if field[base + off] > iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                for tri in &table[case as usize] {
                    let mut out = [0u32; 3];
                    for (slot, &e) in tri.iter().enumerate() {
                        let (a, b, axis) = CUBE_EDGES[e as usize];
                        let ia = base + corner_offset[a as usize];
                        let key = ia * 3 + axis as usize;
                        out[slot] = *weld.entry(key).or_insert_with(|| {
                            let ib = base + corner_offset[b as usize];
                            let (va, vb) = (field[ia] as f64, field[ib] as f64);
                            let t = ((iso as f64 - va) / (vb - va)).clamp(0.0, 1.0);
                            let ca = grid.coords(ia);
                            let mut c = [ca[0] as f64, ca[1] as f64, ca[2] as f64];
                            c[axis as usize] += t;
                            mesh.vertices.push(grid.index_to_world(c));
                            (mesh.vertices.len() - 1) as u32
                        });
                    }
                    mesh.triangles.push(out);
                }
            }
        }
    }
    if mesh.triangles.is_empty() {
        return Err(Error::EmptySurface);
    }
    Ok(mesh)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTopology {
    pub label: usize,
    pub name: String,
    pub vertices: usize,
    pub edges: usize,
    pub faces: usize,
    /// `None` when the channel has no surface.
    pub euler: Option<i64>,
    pub components: usize,
    pub pass: bool,
}

pub fn channel_topology(vol: &LabelVolume, label: usize) -> (ChannelTopology, Option<SurfaceMesh>) {
    let labels = vol.hard_labels();
    let field: Vec<f32> = labels.iter().map(|&l| if l as usize == label { 1.0 } else { 0.0 }).collect();
    let (pg, pf) = pad_field(&vol.grid, &field, 0.0);
    let name = LABEL_NAMES.get(label).map(|s| s.to_string()).unwrap_or_else(|| format!("label{label}"));
    match marching_cubes(&pg, &pf, 0.5) {
        Ok(mesh) => {
            let e = mesh.edge_set().len();
            let chi = mesh.vertices.len() as i64 - e as i64 + mesh.triangles.len() as i64;
            let components = mesh.component_count();
            let report = ChannelTopology {
                label,
                name,
                vertices: mesh.vertices.len(),
                edges: e,
                faces: mesh.triangles.len(),
                euler: Some(chi),
                components,
                pass: chi == 2 && components == 1,
            };
            (report, Some(mesh))
        }
        Err(_) => (
            ChannelTopology { label, name, vertices: 0, edges: 0, faces: 0, euler: None, components: 0, pass: false },
            None,
        ),
    }
}

/// Topology of every foreground channel; pass iff χ = 2 and one component.
pub fn check_topology(vol: &LabelVolume) -> Vec<ChannelTopology> {
    (1..vol.channels).map(|l| channel_topology(vol, l).0).collect()
}
