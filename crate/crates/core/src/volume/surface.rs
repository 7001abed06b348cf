//! Marching-cubes surface extraction for a single label, plus binary STL export.
//!
//! The case table is generated rather than transcribed: on every cube face
//! the crossing points are joined so that each run of inside corners is cut
//! off on its own (ambiguous faces separate their inside corners). Because
//! that decision depends only on the face, neighbouring cubes always agree
//! and the surface is closed. Face segments are chained into loops oriented
//! with outward normals, then fanned into triangles.

use std::collections::HashMap;
use std::io::{self, Write};
use std::sync::OnceLock;

use super::{LabelVolume, Volume, VolumeError};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    /// World-space positions in mm.
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    pub label: u16,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    fn tri(&self, t: &[u32; 3]) -> [[f64; 3]; 3] {
        t.map(|i| self.vertices[i as usize])
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles.iter().map(|t| 0.5 * norm(cross_tri(self.tri(t)))).sum()
    }

    /// Signed enclosed volume; positive when normals face outward.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = self.tri(t);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn cross_tri([a, b, c]: [[f64; 3]; 3]) -> [f64; 3] {
    cross(sub(b, a), sub(c, a))
}

/// Cube edge `(lower corner, axis)`; corners are bit-packed `x | y<<1 | z<<2`.
#[derive(Clone, Copy)]
struct CubeEdge {
    corner: u8,
    axis: u8,
}

fn cube_edges() -> [CubeEdge; 12] {
    let mut out = [CubeEdge { corner: 0, axis: 0 }; 12];
    let mut n = 0;
    for axis in 0..3u8 {
        for c in 0..8u8 {
            if c & (1 << axis) == 0 {
                out[n] = CubeEdge { corner: c, axis };
                n += 1;
            }
        }
    }
    out
}

fn edge_id(a: u8, b: u8) -> u8 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let axis = (hi ^ lo).trailing_zeros() as u8;
    let edges = cube_edges();
    edges.iter().position(|e| e.corner == lo && e.axis == axis).unwrap() as u8
}

/// Corners of each face in counter-clockwise order seen from outside the cube.
fn cube_faces() -> [[u8; 4]; 6] {
    let mut faces = [[0u8; 4]; 6];
    for d in 0..3usize {
        let (u, v) = ((d + 1) % 3, (d + 2) % 3);
        for side in 0..2u8 {
            let corner = |cu: u8, cv: u8| (side << d) | (cu << u) | (cv << v);
            let mut f = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            if side == 0 {
                f.reverse();
            }
            faces[2 * d + side as usize] = f;
        }
    }
    faces
}

fn edges_share_face(a: u8, b: u8) -> bool {
    let edges = cube_edges();
    let corners = |e: CubeEdge| [e.corner, e.corner | (1 << e.axis)];
    let (ea, eb) = (corners(edges[a as usize]), corners(edges[b as usize]));
    (0..3).any(|d| (0..2u8).any(|side| ea.iter().chain(eb.iter()).all(|&c| (c >> d) & 1 == side)))
}

#[derive(Debug, Clone)]
struct CaseLoop {
    edges: Vec<u8>,
    /// Fan apex position in `edges`; `None` fans from the loop centroid.
    apex: Option<usize>,
}

fn build_case(config: u8) -> Vec<CaseLoop> {
    let inside = |c: u8| config & (1 << c) != 0;
    let mut next: [Option<u8>; 12] = [None; 12];
    for face in cube_faces() {
        for i in 0..4 {
            let (p, q) = (face[i], face[(i + 1) % 4]);
            if inside(p) || !inside(q) {
                continue;
            }
            // run of inside corners starts at q
            let mut j = (i + 1) % 4;
            while inside(face[(j + 1) % 4]) {
                j = (j + 1) % 4;
            }
            let enter = edge_id(p, q);
            let exit = edge_id(face[j], face[(j + 1) % 4]);
            next[enter as usize] = Some(exit);
        }
    }
    let mut seen = [false; 12];
    let mut loops = Vec::new();
    for start in 0..12u8 {
        if seen[start as usize] || next[start as usize].is_none() {
            continue;
        }
        let mut edges = Vec::new();
        let mut e = start;
        while !seen[e as usize] {
            seen[e as usize] = true;
            edges.push(e);
            e = next[e as usize].expect("crossing points form closed loops");
        }
        let apex = fan_apex(&edges);
        loops.push(CaseLoop { edges, apex });
    }
    loops
}

/// An apex whose fan diagonals never join two points on one cube face,
/// so no diagonal can coincide with an edge produced by a neighbouring cube.
fn fan_apex(edges: &[u8]) -> Option<usize> {
    let n = edges.len();
    if n == 3 {
        return Some(0);
    }
    (0..n).find(|&a| (2..n - 1).all(|k| !edges_share_face(edges[a], edges[(a + k) % n])))
}

fn case_table() -> &'static [Vec<CaseLoop>] {
    static TABLE: OnceLock<Vec<Vec<CaseLoop>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..=255u8).map(build_case).collect())
}

/// Marching-cubes isosurface (iso 0.5) of the indicator of `label`.
///
/// The indicator is padded by one background voxel on every side, so the
/// result is closed even where the label touches the volume boundary.
/// An absent label yields an empty mesh.
pub fn extract_surface(lv: &LabelVolume, parent: &Volume, label: u16) -> Result<TriangleMesh, VolumeError> {
    if lv.dims() != parent.dims() {
        return Err(VolumeError::DimsMismatch { label: lv.dims(), parent: parent.dims() });
    }
    let [nx, ny, nz] = lv.dims();
    let labels = lv.labels();
    let (px, py, pz) = (nx + 2, ny + 2, nz + 2);
    let inside = |i: usize, j: usize, k: usize| -> bool {
        i >= 1
            && j >= 1
            && k >= 1
            && i <= nx
            && j <= ny
            && k <= nz
            && labels[(i - 1) + nx * ((j - 1) + ny * (k - 1))] == label
    };

    let table = case_table();
    let edges = cube_edges();
    let mut mesh = TriangleMesh { label, ..Default::default() };
    let mut shared: HashMap<u64, u32> = HashMap::new();

    let mut corners = [false; 8];
    for k in 0..pz - 1 {
        for j in 0..py - 1 {
            for i in 0..px - 1 {
                let mut config = 0u8;
                for (c, flag) in corners.iter_mut().enumerate() {
                    *flag = inside(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                    if *flag {
                        config |= 1 << c;
                    }
                }
                if config == 0 || config == 0xff {
                    continue;
                }
                for lp in &table[config as usize] {
                    let ids: Vec<u32> = lp
                        .edges
                        .iter()
                        .map(|&e| {
                            let ce = edges[e as usize];
                            let g = [
                                i + (ce.corner & 1) as usize,
                                j + ((ce.corner >> 1) & 1) as usize,
                                k + ((ce.corner >> 2) & 1) as usize,
                            ];
                            let key = ((g[0] + px * (g[1] + py * g[2])) as u64) * 3 + ce.axis as u64;
                            *shared.entry(key).or_insert_with(|| {
                                // binary field: the 0.5 crossing is the edge midpoint
                                let mut p = [g[0] as f64 - 1.0, g[1] as f64 - 1.0, g[2] as f64 - 1.0];
                                p[ce.axis as usize] += 0.5;
                                mesh.vertices.push(parent.voxel_to_world(p));
                                (mesh.vertices.len() - 1) as u32
                            })
                        })
                        .collect();
                    emit_loop(&mut mesh, &ids, lp.apex);
                }
            }
        }
    }
    Ok(mesh)
}

fn emit_loop(mesh: &mut TriangleMesh, ids: &[u32], apex: Option<usize>) {
    let n = ids.len();
    match apex {
        Some(a) => {
            for k in 1..n - 1 {
                mesh.triangles.push([ids[a], ids[(a + k) % n], ids[(a + k + 1) % n]]);
            }
        }
        None => {
            let mut c = [0.0; 3];
            for &id in ids {
                let v = mesh.vertices[id as usize];
                for d in 0..3 {
                    c[d] += v[d] / n as f64;
                }
            }
            mesh.vertices.push(c);
            let centre = (mesh.vertices.len() - 1) as u32;
            for k in 0..n {
                mesh.triangles.push([centre, ids[k], ids[(k + 1) % n]]);
            }
        }
    }
}

/// Binary STL: 80-byte header, u32 triangle count, 50 bytes per triangle, little-endian.
pub fn write_stl(mesh: &TriangleMesh, mut out: impl Write) -> io::Result<()> {
    let mut header = [0u8; 80];
    let title = format!("label {}", mesh.label);
    header[..title.len()].copy_from_slice(title.as_bytes());
    out.write_all(&header)?;
    out.write_all(&(mesh.triangles.len() as u32).to_le_bytes())?;
    for t in &mesh.triangles {
        let tri = mesh.tri(t);
        let n = cross_tri(tri);
        let len = norm(n);
        let n = if len > 0.0 { n.map(|v| v / len) } else { n };
        for v in std::iter::once(n).chain(tri) {
            for x in v {
                out.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        out.write_all(&0u16.to_le_bytes())?;
    }
    Ok(())
}
