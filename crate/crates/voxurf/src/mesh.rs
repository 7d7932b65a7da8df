//! Isosurface extraction from SDF grids, mesh sampling/export, and
//! Chamfer-distance evaluation.

use crate::grid::{gaussian_smooth, DenseGrid, GaussianKernel};
use crate::math::Vec3;
use crate::{Error, Result};
use rand::Rng;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

/// Indexed triangle mesh in world coordinates.
#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

/// Unordered point set in world coordinates.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
}

// ---------------------------------------------------------------------------
// Marching cubes
//
// Corner c in 0..8 sits at offset (c&1, (c>>1)&1, (c>>2)&1); corner bit c of
// the case index is set when the corner value is below the iso level
// (inside). The 256-case triangle table is generated once: marching squares
// on each cube face yields segments over the cut edges, segments chain into
// closed loops, and loops are fan-triangulated. An ambiguous face (diagonal
// sign pattern) is always resolved by keeping the outside corners connected;
// the same fixed rule on both sides of a shared face keeps neighboring cells
// compatible (the minor topological ambiguity of deciderless tables is
// accepted). Triangles are wound so normals point toward positive SDF.
// ---------------------------------------------------------------------------

const CORNER_OFFSETS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// The 12 cube edges as corner pairs (lower corner first).
/// 0..4 are x-aligned, 4..8 y-aligned, 8..12 z-aligned.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [2, 3],
    [4, 5],
    [6, 7],
    [0, 2],
    [1, 3],
    [4, 6],
    [5, 7],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Cube faces as 4 corners in cyclic order.
const FACES: [[usize; 4]; 6] = [
    [0, 2, 6, 4], // x = 0
    [1, 3, 7, 5], // x = 1
    [0, 1, 5, 4], // y = 0
    [2, 3, 7, 6], // y = 1
    [0, 1, 3, 2], // z = 0
    [4, 5, 7, 6], // z = 1
];

fn edge_index(a: usize, b: usize) -> usize {
    let key = if a < b { [a, b] } else { [b, a] };
    EDGES.iter().position(|e| *e == key).expect("cube edge")
}

/// Marching-squares segments of one face: pairs of cut-edge indices.
fn face_segments(case: u8, face: &[usize; 4]) -> Vec<[usize; 2]> {
    let inside = |c: usize| case >> c & 1 == 1;
    let cut: Vec<usize> = (0..4)
        .filter(|&s| inside(face[s]) != inside(face[(s + 1) % 4]))
        .collect();
    // edge between face slots s and s+1
    let e = |s: usize| edge_index(face[s], face[(s + 1) % 4]);
    match cut.len() {
        0 => vec![],
        2 => vec![[e(cut[0]), e(cut[1])]],
        4 => {
            // ambiguous: isolate the two inside corners so the outside stays
            // connected; inside corners sit at diagonal slots (0,2) or (1,3)
            if inside(face[0]) {
                vec![[e(3), e(0)], [e(1), e(2)]]
            } else {
                vec![[e(0), e(1)], [e(2), e(3)]]
            }
        }
        _ => unreachable!("face cut count is even"),
    }
}

fn trilinear_grad(vals: &[f64; 8], p: [f64; 3]) -> Vec3 {
    let mut g = [0.0; 3];
    for (axis, gv) in g.iter_mut().enumerate() {
        for (c, &v) in vals.iter().enumerate() {
            let o = CORNER_OFFSETS[c];
            let mut w = if o[axis] == 1 { 1.0 } else { -1.0 };
            for a in 0..3 {
                if a != axis {
                    w *= if o[a] == 1 { p[a] } else { 1.0 - p[a] };
                }
            }
            *gv += w * v;
        }
    }
    Vec3::new(g[0], g[1], g[2])
}

/// Build the triangle list (edge-index triples) for one sign configuration.
fn build_case(case: u8) -> Vec<[u8; 3]> {
    if case == 0 || case == 255 {
        return vec![];
    }
    // each cut edge lies on exactly two faces: collect both partners
    let mut links: HashMap<usize, Vec<usize>> = HashMap::new();
    for face in &FACES {
        for seg in face_segments(case, face) {
            links.entry(seg[0]).or_default().push(seg[1]);
            links.entry(seg[1]).or_default().push(seg[0]);
        }
    }
    debug_assert!(links.values().all(|v| v.len() == 2));
    // chain into loops, canonicalized: start at the smallest unvisited edge
    // and walk toward its smaller neighbor
    let mut visited: Vec<usize> = Vec::new();
    let mut loops: Vec<Vec<usize>> = Vec::new();
    let mut keys: Vec<usize> = links.keys().copied().collect();
    keys.sort_unstable();
    for &start in &keys {
        if visited.contains(&start) {
            continue;
        }
        let mut lp = vec![start];
        let nbrs = &links[&start];
        let mut cur = nbrs[0].min(nbrs[1]);
        let mut prev = start;
        while cur != start {
            lp.push(cur);
            let nbrs = &links[&cur];
            let next = if nbrs[0] == prev { nbrs[1] } else { nbrs[0] };
            prev = cur;
            cur = next;
        }
        visited.extend(lp.iter().copied());
        loops.push(lp);
    }
    // fan-triangulate; orient toward positive field using representative
    // corner values (+1 outside, -1 inside puts vertices at edge midpoints)
    let mut vals = [0.0; 8];
    for (c, v) in vals.iter_mut().enumerate() {
        *v = if case >> c & 1 == 1 { -1.0 } else { 1.0 };
    }
    let edge_mid = |e: usize| {
        let [a, b] = EDGES[e];
        let oa = CORNER_OFFSETS[a];
        let ob = CORNER_OFFSETS[b];
        Vec3::new(
            (oa[0] + ob[0]) as f64 * 0.5,
            (oa[1] + ob[1]) as f64 * 0.5,
            (oa[2] + ob[2]) as f64 * 0.5,
        )
    };
    let mut tris = Vec::new();
    for lp in loops {
        for i in 1..lp.len() - 1 {
            let (e0, e1, e2) = (lp[0], lp[i], lp[i + 1]);
            let (v0, v1, v2) = (edge_mid(e0), edge_mid(e1), edge_mid(e2));
            let n = (v1 - v0).cross(v2 - v0);
            let c = (v0 + v1 + v2) / 3.0;
            let g = trilinear_grad(&vals, [c.x, c.y, c.z]);
            if n.dot(g) >= 0.0 {
                tris.push([e0 as u8, e1 as u8, e2 as u8]);
            } else {
                tris.push([e0 as u8, e2 as u8, e1 as u8]);
            }
        }
    }
    tris
}

fn mc_table() -> &'static [Vec<[u8; 3]>; 256] {
    static TABLE: OnceLock<[Vec<[u8; 3]>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(|case| build_case(case as u8)))
}

/// Extract the `iso` level set of a single-channel grid with linear edge
/// interpolation; vertices come out in world coordinates. With `presmooth`
/// set, the grid is Gaussian-smoothed first (a post-processing option only;
/// training never smooths here). A grid without a sign change produces an
/// empty mesh.
pub fn marching_cubes(
    sdf: &DenseGrid,
    iso: f64,
    presmooth: Option<&GaussianKernel>,
) -> Result<TriangleMesh> {
    if sdf.channels() != 1 {
        return Err(Error::Mesh(format!(
            "isosurface extraction expects a single-channel grid, got C={}",
            sdf.channels()
        )));
    }
    let smoothed;
    let grid = match presmooth {
        Some(k) => {
            smoothed = gaussian_smooth(sdf, k);
            &smoothed
        }
        None => sdf,
    };
    let [nx, ny, nz] = grid.dims();
    let table = mc_table();
    let mut mesh = TriangleMesh::default();
    // welded vertices keyed by (lower lattice node, axis)
    let mut edge_vertices: HashMap<(usize, u8), u32> = HashMap::new();
    let node_id = |i: usize, j: usize, k: usize| (i * ny + j) * nz + k;
    let mut corner_vals = [0.0; 8];
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            for k in 0..nz - 1 {
                let mut case = 0u8;
                for (c, val) in corner_vals.iter_mut().enumerate() {
                    let o = CORNER_OFFSETS[c];
                    *val = grid.at(0, i + o[0], j + o[1], k + o[2]);
                    if *val < iso {
                        case |= 1 << c;
                    }
                }
                let tris = &table[case as usize];
                if tris.is_empty() {
                    continue;
                }
                let mut vertex_of_edge = |e: usize, mesh: &mut TriangleMesh| -> u32 {
                    let [a, b] = EDGES[e];
                    let oa = CORNER_OFFSETS[a];
                    let axis = (e / 4) as u8;
                    let key = (node_id(i + oa[0], j + oa[1], k + oa[2]), axis);
                    if let Some(&idx) = edge_vertices.get(&key) {
                        return idx;
                    }
                    let va = corner_vals[a];
                    let vb = corner_vals[b];
                    let t = (iso - va) / (vb - va);
                    let pa = grid.node_pos(i + oa[0], j + oa[1], k + oa[2]);
                    let ob = CORNER_OFFSETS[b];
                    let pb = grid.node_pos(i + ob[0], j + ob[1], k + ob[2]);
                    let p = pa + (pb - pa) * t;
                    let idx = mesh.vertices.len() as u32;
                    mesh.vertices.push(p);
                    edge_vertices.insert(key, idx);
                    idx
                };
                for t in tris {
                    let v0 = vertex_of_edge(t[0] as usize, &mut mesh);
                    let v1 = vertex_of_edge(t[1] as usize, &mut mesh);
                    let v2 = vertex_of_edge(t[2] as usize, &mut mesh);
                    // iso passing exactly through a node collapses an edge
                    if v0 != v1 && v1 != v2 && v0 != v2 {
                        mesh.triangles.push([v0, v1, v2]);
                    }
                }
            }
        }
    }
    Ok(mesh)
}

impl TriangleMesh {
    pub fn triangle_area(&self, t: [u32; 3]) -> f64 {
        let a = self.vertices[t[0] as usize];
        let b = self.vertices[t[1] as usize];
        let c = self.vertices[t[2] as usize];
        (b - a).cross(c - a).norm() * 0.5
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles.iter().map(|&t| self.triangle_area(t)).sum()
    }

    /// Mean angle (radians) between adjacent face normals over all edges
    /// shared by exactly two triangles; a roughness measure of the surface.
    pub fn mean_dihedral_deviation(&self) -> f64 {
        let mut edge_faces: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
        for (fi, t) in self.triangles.iter().enumerate() {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                edge_faces.entry(key).or_default().push(fi);
            }
        }
        let normal = |fi: usize| {
            let t = self.triangles[fi];
            let a = self.vertices[t[0] as usize];
            let b = self.vertices[t[1] as usize];
            let c = self.vertices[t[2] as usize];
            let n = (b - a).cross(c - a);
            let len = n.norm();
            if len < 1e-30 {
                Vec3::ZERO
            } else {
                n / len
            }
        };
        let mut sum = 0.0;
        let mut count = 0usize;
        for faces in edge_faces.values() {
            if faces.len() == 2 {
                let d = normal(faces[0]).dot(normal(faces[1])).clamp(-1.0, 1.0);
                sum += d.acos();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

/// Sample `n` points area-uniformly from the mesh surface: the triangle is
/// chosen proportionally to area and the point barycentric-uniformly inside.
pub fn sample_mesh_points(mesh: &TriangleMesh, n: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    if mesh.triangles.is_empty() {
        return Err(Error::Mesh("cannot sample points from an empty mesh".into()));
    }
    if n == 0 {
        return Err(Error::Mesh("sample count must be >= 1".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for &t in &mesh.triangles {
        acc += mesh.triangle_area(t);
        cumulative.push(acc);
    }
    if acc <= 0.0 {
        return Err(Error::Mesh("mesh has zero total area".into()));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.gen_range(0.0..acc);
        let ti = cumulative
            .partition_point(|&c| c < r)
            .min(mesh.triangles.len() - 1);
        let t = mesh.triangles[ti];
        let a = mesh.vertices[t[0] as usize];
        let b = mesh.vertices[t[1] as usize];
        let c = mesh.vertices[t[2] as usize];
        // sqrt trick for uniform barycentric coordinates
        let su = rng.gen_range(0.0f64..1.0).sqrt();
        let v = rng.gen_range(0.0f64..1.0);
        let p = a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v);
        points.push(p);
    }
    Ok(PointCloud {
        points,
        normals: None,
    })
}

// ---------------------------------------------------------------------------
// Chamfer distance
// ---------------------------------------------------------------------------

/// Balanced kd-tree for exact nearest-neighbor queries: the median node of
/// each subslice splits on `depth % 3`.
struct KdTree {
    points: Vec<Vec3>,
}

impl KdTree {
    fn build(points: &[Vec3]) -> Self {
        let mut pts = points.to_vec();
        Self::build_rec(&mut pts, 0);
        KdTree { points: pts }
    }

    fn build_rec(pts: &mut [Vec3], depth: usize) {
        if pts.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by(mid, |a, b| a.get(axis).total_cmp(&b.get(axis)));
        let (lo, rest) = pts.split_at_mut(mid);
        Self::build_rec(lo, depth + 1);
        Self::build_rec(&mut rest[1..], depth + 1);
    }

    fn nearest_sq(&self, q: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        Self::search(&self.points, 0, q, &mut best);
        best
    }

    fn search(pts: &[Vec3], depth: usize, q: Vec3, best: &mut f64) {
        if pts.is_empty() {
            return;
        }
        let mid = pts.len() / 2;
        let node = pts[mid];
        let d = q - node;
        let dist = d.dot(d);
        if dist < *best {
            *best = dist;
        }
        let axis = depth % 3;
        let delta = q.get(axis) - node.get(axis);
        let (near, far) = if delta < 0.0 {
            (&pts[..mid], &pts[mid + 1..])
        } else {
            (&pts[mid + 1..], &pts[..mid])
        };
        Self::search(near, depth + 1, q, best);
        if delta * delta < *best {
            Self::search(far, depth + 1, q, best);
        }
    }
}

/// Symmetric Chamfer distance: mean nearest-neighbor distance from `a` to
/// `b` plus the reverse, halved. Distances are unsquared. The kd-tree
/// acceleration is contract-equal to the brute-force double loop.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.points.is_empty() || b.points.is_empty() {
        return Err(Error::Mesh("chamfer distance needs two non-empty clouds".into()));
    }
    let dir = |from: &[Vec3], to: &[Vec3]| {
        let tree = KdTree::build(to);
        use rayon::prelude::*;
        let sum: f64 = from.par_iter().map(|&p| tree.nearest_sq(p).sqrt()).sum();
        sum / from.len() as f64
    };
    Ok(0.5 * (dir(&a.points, &b.points) + dir(&b.points, &a.points)))
}

/// Quadratic reference implementation used by the equivalence tests.
pub fn chamfer_bruteforce(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.points.is_empty() || b.points.is_empty() {
        return Err(Error::Mesh("chamfer distance needs two non-empty clouds".into()));
    }
    let dir = |from: &[Vec3], to: &[Vec3]| {
        let sum: f64 = from
            .iter()
            .map(|&p| {
                to.iter()
                    .map(|&q| (p - q).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        sum / from.len() as f64
    };
    Ok(0.5 * (dir(&a.points, &b.points) + dir(&b.points, &a.points)))
}

// ---------------------------------------------------------------------------
// Mesh and point-cloud I/O
// ---------------------------------------------------------------------------

/// ASCII OBJ export (`v`/`f` records, 1-indexed faces).
pub fn write_obj(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    for v in &mesh.vertices {
        writeln!(f, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for t in &mesh.triangles {
        writeln!(f, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

/// Binary little-endian PLY export with float32 vertices.
pub fn write_ply_mesh(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write!(
        f,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )?;
    for v in &mesh.vertices {
        for c in [v.x, v.y, v.z] {
            f.write_all(&(c as f32).to_le_bytes())?;
        }
    }
    for t in &mesh.triangles {
        f.write_all(&[3u8])?;
        for &i in t {
            f.write_all(&(i as i32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Binary little-endian PLY export of a point cloud at float64 precision.
pub fn write_ply_points(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write!(
        f,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.points.len()
    )?;
    for p in &cloud.points {
        for c in [p.x, p.y, p.z] {
            f.write_all(&c.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Point-cloud import: `.ply` (ASCII or binary little-endian, float or
/// double coordinates) or whitespace-separated XYZ text.
pub fn read_points(path: &Path) -> Result<PointCloud> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if ext == "ply" {
        read_ply_points(path)
    } else {
        read_xyz_points(path)
    }
}

fn read_xyz_points(path: &Path) -> Result<PointCloud> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut points = Vec::new();
    for (ln, line) in f.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = trimmed
            .split_whitespace()
            .take(3)
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| {
                Error::Mesh(format!("{}:{}: bad coordinate: {e}", path.display(), ln + 1))
            })?;
        if vals.len() != 3 {
            return Err(Error::Mesh(format!(
                "{}:{}: expected 3 coordinates",
                path.display(),
                ln + 1
            )));
        }
        points.push(Vec3::new(vals[0], vals[1], vals[2]));
    }
    if points.is_empty() {
        return Err(Error::Mesh(format!("{}: no points", path.display())));
    }
    Ok(PointCloud {
        points,
        normals: None,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy, PartialEq)]
enum PlyScalar {
    F32,
    F64,
    U8,
    I32,
    U16,
}

impl PlyScalar {
    fn parse(name: &str) -> Option<PlyScalar> {
        Some(match name {
            "float" | "float32" => PlyScalar::F32,
            "double" | "float64" => PlyScalar::F64,
            "uchar" | "uint8" | "char" | "int8" => PlyScalar::U8,
            "int" | "int32" | "uint" | "uint32" => PlyScalar::I32,
            "short" | "ushort" | "int16" | "uint16" => PlyScalar::U16,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyScalar::F32 | PlyScalar::I32 => 4,
            PlyScalar::F64 => 8,
            PlyScalar::U8 => 1,
            PlyScalar::U16 => 2,
        }
    }
}

fn read_ply_points(path: &Path) -> Result<PointCloud> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let bad = |msg: &str| Error::Mesh(format!("{}: {msg}", path.display()));
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim() != "ply" {
        return Err(bad("not a PLY file"));
    }
    let mut format = None;
    let mut vertex_count = 0usize;
    let mut props: Vec<(String, PlyScalar)> = Vec::new();
    let mut in_vertex_element = false;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(bad("unexpected end of header"));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["comment", ..] => {}
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLe),
            ["format", other, _] => {
                return Err(bad(&format!("unsupported PLY format {other}")));
            }
            ["element", "vertex", n] => {
                in_vertex_element = true;
                vertex_count = n.parse().map_err(|_| bad("bad vertex count"))?;
            }
            ["element", ..] => in_vertex_element = false,
            ["property", "list", ..] => {
                if in_vertex_element {
                    return Err(bad("list property on vertices is unsupported"));
                }
            }
            ["property", ty, name] => {
                if in_vertex_element {
                    let scalar = PlyScalar::parse(ty)
                        .ok_or_else(|| bad(&format!("unsupported property type {ty}")))?;
                    props.push((name.to_string(), scalar));
                }
            }
            ["end_header"] => break,
            _ => {}
        }
    }
    let format = format.ok_or_else(|| bad("missing format line"))?;
    let idx_of = |n: &str| props.iter().position(|(p, _)| p == n);
    let (xi, yi, zi) = match (idx_of("x"), idx_of("y"), idx_of("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(bad("vertex element lacks x/y/z properties")),
    };
    let mut points = Vec::with_capacity(vertex_count);
    match format {
        PlyFormat::Ascii => {
            for _ in 0..vertex_count {
                line.clear();
                if reader.read_line(&mut line)? == 0 {
                    return Err(bad("truncated vertex data"));
                }
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("bad vertex value"))?;
                if vals.len() < props.len() {
                    return Err(bad("vertex row too short"));
                }
                points.push(Vec3::new(vals[xi], vals[yi], vals[zi]));
            }
        }
        PlyFormat::BinaryLe => {
            let row: usize = props.iter().map(|(_, s)| s.size()).sum();
            let mut buf = vec![0u8; row];
            for _ in 0..vertex_count {
                reader
                    .read_exact(&mut buf)
                    .map_err(|_| bad("truncated vertex data"))?;
                let mut off = 0usize;
                let mut coords = [0.0f64; 3];
                for (pi, (_, s)) in props.iter().enumerate() {
                    let slot = [xi, yi, zi].iter().position(|&c| c == pi);
                    if let Some(ci) = slot {
                        coords[ci] = match s {
                            PlyScalar::F32 => {
                                f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64
                            }
                            PlyScalar::F64 => {
                                f64::from_le_bytes(buf[off..off + 8].try_into().unwrap())
                            }
                            _ => return Err(bad("x/y/z must be float or double")),
                        };
                    }
                    off += s.size();
                }
                points.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
        }
    }
    if points.is_empty() {
        return Err(bad("no points"));
    }
    Ok(PointCloud {
        points,
        normals: None,
    })
}
