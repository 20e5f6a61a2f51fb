//! Unstructured triangular meshes with tagged electrode edges.
//!
//! Meshing pipeline: the boundary is discretized with electrode endpoints and
//! midpoints forced as vertices, a jittered triangular lattice fills the
//! interior, everything goes through a constrained Delaunay triangulation,
//! and interior edges longer than `h_max` are bisected until none remain.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use spade::{ConstrainedDelaunayTriangulation, Point2, Triangulation};

use crate::error::{Error, Result};
use crate::geometry::{ElectrodeLayout, Point, PolygonDomain, Side};

/// Interior lattice spacing as a fraction of `h_max`.
const LATTICE_FACTOR: f64 = 0.85;
/// Lattice jitter amplitude as a fraction of the lattice spacing.
const JITTER: f64 = 0.1;
/// Minimum distance of lattice points from the boundary, in lattice spacings.
const BOUNDARY_CLEARANCE: f64 = 0.5;
const MAX_REFINEMENT_PASSES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TriangularMesh {
    pub nodes: Vec<Point>,
    /// Counterclockwise node triplets.
    pub triangles: Vec<[usize; 3]>,
    /// Boundary edges under each electrode, ordered along the side.
    pub electrode_edges: Vec<Vec<[usize; 2]>>,
    pub h_max: f64,
    pub h_min: f64,
}

impl TriangularMesh {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn electrode_count(&self) -> usize {
        self.electrode_edges.len()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (a, b, c) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * b.sub(a).cross(c.sub(a))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn triangle_diameter(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.nodes[i]);
        a.dist(b).max(b.dist(c)).max(c.dist(a))
    }

    pub fn max_diameter(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| self.triangle_diameter(t))
            .fold(0.0, f64::max)
    }

    pub fn min_angle_deg(&self) -> f64 {
        let mut worst = f64::INFINITY;
        for tri in &self.triangles {
            let p = tri.map(|i| self.nodes[i]);
            for i in 0..3 {
                let u = p[(i + 1) % 3].sub(p[i]);
                let v = p[(i + 2) % 3].sub(p[i]);
                let ang = u.cross(v).abs().atan2(u.dot(v));
                worst = worst.min(ang.to_degrees());
            }
        }
        worst
    }

    /// Nodal adjacency (excluding the diagonal), sorted.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for tri in &self.triangles {
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        adj[tri[i]].push(tri[j]);
                    }
                }
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }

    /// Structural checks: positive areas, edges shared by at most two
    /// triangles, every node used, electrode edges on the boundary and
    /// pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut used = vec![false; self.nodes.len()];
        let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            if self.triangle_area(t) <= 0.0 {
                return Err(Error::Mesh(format!("triangle {t} has non-positive area")));
            }
            for i in 0..3 {
                used[tri[i]] = true;
                let (a, b) = (tri[i], tri[(i + 1) % 3]);
                *edge_count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        if let Some((e, _)) = edge_count.iter().find(|(_, &c)| c > 2) {
            return Err(Error::Mesh(format!("edge {e:?} shared by more than two triangles")));
        }
        if let Some(n) = used.iter().position(|u| !u) {
            return Err(Error::Mesh(format!("node {n} belongs to no triangle")));
        }
        let mut seen = HashMap::new();
        for (l, edges) in self.electrode_edges.iter().enumerate() {
            if edges.is_empty() {
                return Err(Error::Mesh(format!("electrode {l} has no boundary edges")));
            }
            for &[a, b] in edges {
                let key = (a.min(b), a.max(b));
                if edge_count.get(&key) != Some(&1) {
                    return Err(Error::Mesh(format!("electrode {l} edge {key:?} is not a boundary edge")));
                }
                if let Some(other) = seen.insert(key, l) {
                    return Err(Error::Mesh(format!("electrodes {other} and {l} share edge {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Short content hash used to tie fields to their carrier mesh.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.nodes {
            h.update(p.x.to_le_bytes());
            h.update(p.y.to_le_bytes());
        }
        for t in &self.triangles {
            for &i in t {
                h.update((i as u64).to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Plain-text export. Header lines start with `#`; records are
    /// `N x y`, `T a b c` and `E electrode a b` (0-based indices).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# eit-layout mesh v1");
        let _ = writeln!(out, "# records: N x y | T n0 n1 n2 (ccw) | E electrode n0 n1");
        let _ = writeln!(
            out,
            "# nodes {} triangles {} electrodes {} h_max {} h_min {}",
            self.nodes.len(),
            self.triangles.len(),
            self.electrode_edges.len(),
            self.h_max,
            self.h_min
        );
        for p in &self.nodes {
            let _ = writeln!(out, "N {} {}", p.x, p.y);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "T {} {} {}", t[0], t[1], t[2]);
        }
        for (l, edges) in self.electrode_edges.iter().enumerate() {
            for e in edges {
                let _ = writeln!(out, "E {} {} {}", l, e[0], e[1]);
            }
        }
        out
    }

    pub fn from_text(text: &str, file: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            file: file.to_string(),
            line,
            message,
        };
        let mut nodes = Vec::new();
        let mut triangles = Vec::new();
        let mut electrode_edges: Vec<Vec<[usize; 2]>> = Vec::new();
        let mut h_max = f64::NAN;
        let mut h_min = f64::NAN;
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.first() {
                None => {}
                Some(&"#") => {
                    if let Some(pos) = f.iter().position(|&s| s == "h_max") {
                        h_max = f.get(pos + 1).and_then(|s| s.parse().ok()).unwrap_or(f64::NAN);
                    }
                    if let Some(pos) = f.iter().position(|&s| s == "h_min") {
                        h_min = f.get(pos + 1).and_then(|s| s.parse().ok()).unwrap_or(f64::NAN);
                    }
                }
                Some(&"N") if f.len() == 3 => {
                    let x = f[1].parse().map_err(|e| err(ln, format!("{e}")))?;
                    let y = f[2].parse().map_err(|e| err(ln, format!("{e}")))?;
                    nodes.push(Point::new(x, y));
                }
                Some(&"T") if f.len() == 4 => {
                    let mut t = [0usize; 3];
                    for (k, s) in f[1..].iter().enumerate() {
                        t[k] = s.parse().map_err(|e| err(ln, format!("{e}")))?;
                    }
                    triangles.push(t);
                }
                Some(&"E") if f.len() == 4 => {
                    let l: usize = f[1].parse().map_err(|e| err(ln, format!("{e}")))?;
                    let a = f[2].parse().map_err(|e| err(ln, format!("{e}")))?;
                    let b = f[3].parse().map_err(|e| err(ln, format!("{e}")))?;
                    if electrode_edges.len() <= l {
                        electrode_edges.resize(l + 1, Vec::new());
                    }
                    electrode_edges[l].push([a, b]);
                }
                Some(tag) => return Err(err(ln, format!("unrecognized record `{tag}`"))),
            }
        }
        let mesh = TriangularMesh {
            nodes,
            triangles,
            electrode_edges,
            h_max,
            h_min,
        };
        if mesh.triangles.iter().flatten().any(|&i| i >= mesh.nodes.len()) {
            return Err(err(0, "triangle refers to a missing node".into()));
        }
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, &path.display().to_string())
    }
}

/// Splits `[0, len]` at the given breakpoints and subdivides every piece
/// into equal sub-pieces no longer than its target size. Returns the
/// arclength of every boundary vertex (including 0, excluding `len`).
fn subdivide(len: f64, pieces: &[(f64, f64, usize)]) -> Vec<f64> {
    let mut s = Vec::new();
    for &(a, b, n) in pieces {
        debug_assert!(b <= len + 1e-12);
        for i in 0..n {
            s.push(a + (b - a) * i as f64 / n as f64);
        }
    }
    s
}

fn pieces_for(len: f64, h: f64) -> usize {
    ((len / h) - 1e-9).ceil().max(1.0) as usize
}

struct BoundaryRing {
    points: Vec<Point>,
    /// For each electrode on this ring: (electrode, first vertex, vertex count).
    electrodes: Vec<(usize, usize, usize)>,
}

fn outer_ring(
    domain: &PolygonDomain,
    layout: &ElectrodeLayout,
    h_max: f64,
    h_min: f64,
) -> Result<BoundaryRing> {
    let sides = domain.sides();
    let width = layout.width();
    let per_electrode = ((width / h_min) - 1e-9).ceil().max(2.0) as usize;
    let mut points = Vec::new();
    let mut electrodes = Vec::new();
    for (side_idx, side) in sides.iter().enumerate() {
        let len = side.length();
        let merge_tol = 1e-9 * len;
        let mut on_side: Vec<usize> = (0..layout.k())
            .filter(|&e| layout.side_of()[e] == side_idx)
            .collect();
        on_side.sort_by(|&a, &b| layout.arclength()[a].total_cmp(&layout.arclength()[b]));
        // (start, end, pieces, electrode)
        let mut pieces: Vec<(f64, f64, usize, Option<usize>)> = Vec::new();
        let mut cursor = 0.0;
        for &e in &on_side {
            let (a, b) = layout.extent(e);
            let a = a.max(0.0);
            let b = b.min(len);
            if a < cursor - merge_tol {
                return Err(Error::Mesh(format!("electrode {e} overlaps its neighbour")));
            }
            if a - cursor > merge_tol {
                pieces.push((cursor, a, pieces_for(a - cursor, h_max), None));
            }
            pieces.push((a, b, per_electrode, Some(e)));
            cursor = b;
        }
        if len - cursor > merge_tol {
            pieces.push((cursor, len, pieces_for(len - cursor, h_max), None));
        }
        for &(a, _, n, e) in &pieces {
            if let Some(e) = e {
                electrodes.push((e, points.len() + subdivide_offset(&pieces, a), n + 1));
            }
        }
        let arcs = subdivide(len, &pieces.iter().map(|&(a, b, n, _)| (a, b, n)).collect::<Vec<_>>());
        points.extend(arcs.into_iter().map(|s| side_point(side, s, len)));
    }
    Ok(BoundaryRing { points, electrodes })
}

fn subdivide_offset(pieces: &[(f64, f64, usize, Option<usize>)], start: f64) -> usize {
    pieces
        .iter()
        .take_while(|p| p.0 < start)
        .map(|p| p.2)
        .sum()
}

fn side_point(side: &Side, s: f64, len: f64) -> Point {
    if s <= 0.0 {
        side.start
    } else if s >= len {
        side.end
    } else {
        side.point_at(s)
    }
}

fn hole_ring(hole: &[Point], h_max: f64) -> Vec<Point> {
    let mut pts = Vec::new();
    for i in 0..hole.len() {
        let side = Side {
            start: hole[i],
            end: hole[(i + 1) % hole.len()],
        };
        let len = side.length();
        let n = pieces_for(len, h_max);
        for j in 0..n {
            pts.push(side_point(&side, len * j as f64 / n as f64, len));
        }
    }
    pts
}

fn lattice_points(domain: &PolygonDomain, spacing: f64, seed: u64) -> Vec<Point> {
    let (lo, hi) = domain.bbox();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dy = spacing * 3f64.sqrt() / 2.0;
    let rows = ((hi.y - lo.y) / dy).ceil() as usize + 1;
    let cols = ((hi.x - lo.x) / spacing).ceil() as usize + 2;
    let clearance = BOUNDARY_CLEARANCE * spacing;
    let segments = domain.boundary_segments();
    let mut pts = Vec::new();
    for j in 0..rows {
        for i in 0..cols {
            let shift = if j % 2 == 1 { 0.5 } else { 0.0 };
            let jx: f64 = rng.random_range(-JITTER..JITTER) * spacing;
            let jy: f64 = rng.random_range(-JITTER..JITTER) * spacing;
            let p = Point::new(
                lo.x + (i as f64 + shift) * spacing + jx,
                lo.y + j as f64 * dy + jy,
            );
            if !domain.contains(p) {
                continue;
            }
            if segments.iter().any(|s| s.distance(p) < clearance) {
                continue;
            }
            pts.push(p);
        }
    }
    pts
}

type Cdt = ConstrainedDelaunayTriangulation<Point2<f64>>;

fn insert(cdt: &mut Cdt, p: Point) -> Result<usize> {
    cdt.insert(Point2::new(p.x, p.y))
        .map(|h| h.index())
        .map_err(|e| Error::Mesh(format!("cannot insert ({}, {}): {e:?}", p.x, p.y)))
}

fn inside_faces(cdt: &Cdt, domain: &PolygonDomain) -> Vec<[usize; 3]> {
    cdt.inner_faces()
        .filter_map(|f| {
            let v = f.vertices();
            let p: Vec<Point> = v
                .iter()
                .map(|h| {
                    let q = h.position();
                    Point::new(q.x, q.y)
                })
                .collect();
            let c = Point::new((p[0].x + p[1].x + p[2].x) / 3.0, (p[0].y + p[1].y + p[2].y) / 3.0);
            domain
                .contains(c)
                .then(|| [v[0].fix().index(), v[1].fix().index(), v[2].fix().index()])
        })
        .collect()
}

/// Generates a conforming mesh of `domain` whose boundary vertices include
/// every electrode endpoint. Electrode edges are at most `h_min` long (and
/// at least two per electrode); all triangle diameters are at most `h_max`.
pub fn generate_mesh(
    domain: &PolygonDomain,
    layout: &ElectrodeLayout,
    h_max: f64,
    h_min: f64,
    seed: u64,
) -> Result<TriangularMesh> {
    if !(h_min > 0.0 && h_min <= h_max) {
        return Err(Error::Mesh(format!("need 0 < h_min <= h_max, got {h_min}, {h_max}")));
    }
    let outer = outer_ring(domain, layout, h_max, h_min)?;
    let mut cdt = Cdt::new();
    let mut ring_handles = Vec::new();
    let mut rings: Vec<Vec<Point>> = vec![outer.points.clone()];
    rings.extend(domain.holes().iter().map(|h| hole_ring(h, h_max)));
    for ring in &rings {
        let handles = ring
            .iter()
            .map(|&p| insert(&mut cdt, p))
            .collect::<Result<Vec<_>>>()?;
        ring_handles.push(handles);
    }
    for handles in &ring_handles {
        for i in 0..handles.len() {
            let (a, b) = (handles[i], handles[(i + 1) % handles.len()]);
            let from = spade::handles::FixedVertexHandle::from_index(a);
            let to = spade::handles::FixedVertexHandle::from_index(b);
            if cdt.can_add_constraint(from, to) {
                cdt.add_constraint(from, to);
            } else {
                return Err(Error::Mesh(format!("boundary segment {a}-{b} crosses another segment")));
            }
        }
    }
    for p in lattice_points(domain, LATTICE_FACTOR * h_max, seed) {
        insert(&mut cdt, p)?;
    }

    let limit = h_max * (1.0 + 1e-9);
    for pass in 0.. {
        let faces = inside_faces(&cdt, domain);
        let pos = |i: usize| {
            let q = cdt.vertex(spade::handles::FixedVertexHandle::from_index(i)).position();
            Point::new(q.x, q.y)
        };
        let mut split: BTreeMap<(usize, usize), Point> = BTreeMap::new();
        for f in &faces {
            let mut best = (0.0, 0, 0);
            for i in 0..3 {
                let (a, b) = (f[i], f[(i + 1) % 3]);
                let len = pos(a).dist(pos(b));
                if len > best.0 {
                    best = (len, a.min(b), a.max(b));
                }
            }
            if best.0 > limit {
                let (a, b) = (pos(best.1), pos(best.2));
                split.insert((best.1, best.2), a.add(b).scale(0.5));
            }
        }
        if split.is_empty() {
            break;
        }
        if pass >= MAX_REFINEMENT_PASSES {
            return Err(Error::Mesh(format!(
                "size refinement did not converge after {MAX_REFINEMENT_PASSES} passes"
            )));
        }
        for p in split.into_values() {
            insert(&mut cdt, p)?;
        }
    }

    let faces = inside_faces(&cdt, domain);
    // compact node numbering to the vertices actually used
    let mut remap = vec![usize::MAX; cdt.num_vertices()];
    let mut nodes = Vec::new();
    for v in cdt.vertices() {
        let q = v.position();
        remap[v.fix().index()] = nodes.len();
        nodes.push(Point::new(q.x, q.y));
    }
    let triangles: Vec<[usize; 3]> = faces.iter().map(|f| f.map(|i| remap[i])).collect();
    let mut electrode_edges = vec![Vec::new(); layout.k()];
    for &(e, first, count) in &outer.electrodes {
        let h = &ring_handles[0];
        electrode_edges[e] = (0..count - 1)
            .map(|i| [remap[h[first + i]], remap[h[(first + i + 1) % h.len()]]])
            .collect();
    }
    let mesh = TriangularMesh {
        nodes,
        triangles,
        electrode_edges,
        h_max,
        h_min,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Mesh of the domain without electrodes, used as a neutral carrier for
/// random fields.
pub fn reference_mesh(domain: &PolygonDomain, h: f64, seed: u64) -> Result<TriangularMesh> {
    let empty = ElectrodeLayout::from_arclengths(domain, Vec::new(), Vec::new(), h)?;
    generate_mesh(domain, &empty, h, h, seed)
}

/// Bucket grid over triangle bounding boxes for point location.
pub struct Locator<'a> {
    mesh: &'a TriangularMesh,
    origin: Point,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
    diameter: f64,
}

impl<'a> Locator<'a> {
    pub fn new(mesh: &'a TriangularMesh) -> Self {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &mesh.nodes {
            lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        let diameter = hi.dist(lo);
        let n_cells = (mesh.triangles.len() as f64).sqrt().ceil().max(1.0);
        let cell = ((hi.x - lo.x).max(hi.y - lo.y) / n_cells).max(1e-12);
        let nx = ((hi.x - lo.x) / cell).floor() as usize + 1;
        let ny = ((hi.y - lo.y) / cell).floor() as usize + 1;
        let mut buckets = vec![Vec::new(); nx * ny];
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let p = tri.map(|i| mesh.nodes[i]);
            let x0 = ((p.iter().map(|q| q.x).fold(f64::INFINITY, f64::min) - lo.x) / cell).floor() as usize;
            let x1 = ((p.iter().map(|q| q.x).fold(f64::NEG_INFINITY, f64::max) - lo.x) / cell).floor() as usize;
            let y0 = ((p.iter().map(|q| q.y).fold(f64::INFINITY, f64::min) - lo.y) / cell).floor() as usize;
            let y1 = ((p.iter().map(|q| q.y).fold(f64::NEG_INFINITY, f64::max) - lo.y) / cell).floor() as usize;
            for y in y0..=y1.min(ny - 1) {
                for x in x0..=x1.min(nx - 1) {
                    buckets[y * nx + x].push(t);
                }
            }
        }
        Locator {
            mesh,
            origin: lo,
            cell,
            nx,
            ny,
            buckets,
            diameter,
        }
    }

    fn barycentric(&self, t: usize, p: Point) -> [f64; 3] {
        let [a, b, c] = self.mesh.triangles[t].map(|i| self.mesh.nodes[i]);
        let det = b.sub(a).cross(c.sub(a));
        let l1 = p.sub(a).cross(c.sub(a)) / det;
        let l2 = b.sub(a).cross(p.sub(a)) / det;
        [1.0 - l1 - l2, l1, l2]
    }

    fn cell_of(&self, p: Point) -> (isize, isize) {
        (
            ((p.x - self.origin.x) / self.cell).floor() as isize,
            ((p.y - self.origin.y) / self.cell).floor() as isize,
        )
    }

    /// Triangle index and barycentric weights of `p`. Points within
    /// `1e-9 * diameter` of the mesh snap to the closest triangle.
    pub fn locate(&self, p: Point) -> Result<(usize, [f64; 3])> {
        let (cx, cy) = self.cell_of(p);
        let mut best: Option<(f64, usize, [f64; 3])> = None;
        let consider = |t: usize, best: &mut Option<(f64, usize, [f64; 3])>| {
            let w = self.barycentric(t, p);
            let m = w[0].min(w[1]).min(w[2]);
            if best.as_ref().is_none_or(|b| m > b.0) {
                *best = Some((m, t, w));
            }
        };
        if cx >= 0 && cy >= 0 && (cx as usize) < self.nx && (cy as usize) < self.ny {
            for &t in &self.buckets[cy as usize * self.nx + cx as usize] {
                consider(t, &mut best);
            }
        }
        if let Some((m, t, w)) = best {
            if m >= -1e-12 {
                return Ok((t, w));
            }
        }
        // slow path: closest triangle overall
        let mut closest = (f64::INFINITY, 0usize);
        for t in 0..self.mesh.triangles.len() {
            let d = self.distance_to_triangle(t, p);
            if d < closest.0 {
                closest = (d, t);
            }
        }
        if closest.0 > 1e-9 * self.diameter {
            return Err(Error::OutsideMesh {
                x: p.x,
                y: p.y,
                distance: closest.0,
            });
        }
        let w = self.barycentric(closest.1, p).map(|v| v.max(0.0));
        let s: f64 = w.iter().sum();
        Ok((closest.1, w.map(|v| v / s)))
    }

    fn distance_to_triangle(&self, t: usize, p: Point) -> f64 {
        let w = self.barycentric(t, p);
        if w.iter().all(|&v| v >= 0.0) {
            return 0.0;
        }
        let q = self.mesh.triangles[t].map(|i| self.mesh.nodes[i]);
        (0..3)
            .map(|i| Side { start: q[i], end: q[(i + 1) % 3] }.distance(p))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Precomputed barycentric transfer from one mesh's nodes to another's.
#[derive(Clone, Debug)]
pub struct Transfer {
    src_nodes: usize,
    stencils: Vec<([usize; 3], [f64; 3])>,
}

impl Transfer {
    pub fn new(src: &TriangularMesh, dst: &TriangularMesh) -> Result<Self> {
        let loc = Locator::new(src);
        let stencils = dst
            .nodes
            .iter()
            .map(|&p| loc.locate(p).map(|(t, w)| (src.triangles[t], w)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Transfer {
            src_nodes: src.node_count(),
            stencils,
        })
    }

    pub fn apply(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.src_nodes {
            return Err(Error::Dimension(format!(
                "field has {} values for {} source nodes",
                values.len(),
                self.src_nodes
            )));
        }
        Ok(self
            .stencils
            .iter()
            .map(|(t, w)| w[0] * values[t[0]] + w[1] * values[t[1]] + w[2] * values[t[2]])
            .collect())
    }
}

/// Barycentric-linear transfer of nodal values from `src` to the nodes of `dst`.
pub fn interpolate_field(values: &[f64], src: &TriangularMesh, dst: &TriangularMesh) -> Result<Vec<f64>> {
    Transfer::new(src, dst)?.apply(values)
}
