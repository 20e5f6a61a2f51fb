//! Polygonal domains, boundary sides and electrode layouts.
//!
//! Electrodes live on the straight sides of the outer boundary. A layout is
//! stored both as the stacked midpoint vector `[x_1..x_k, y_1..y_k]` and as
//! arclength positions along each electrode's side. Electrodes are numbered
//! counterclockwise starting from the top-right corner of the domain: side 0
//! starts at the vertex with the largest `y` (ties broken by largest `x`) and
//! electrodes on a side are ordered by ascending arclength.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GEOM_EPS: f64 = 1e-12;

/// Maximum number of rejection-sampling rounds per side.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Point) -> f64 {
        self.sub(o).norm()
    }
}

/// A straight boundary segment, parameterized by arclength from `start`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Side {
    pub start: Point,
    pub end: Point,
}

impl Side {
    pub fn length(&self) -> f64 {
        self.start.dist(self.end)
    }

    pub fn direction(&self) -> Point {
        let len = self.length();
        self.end.sub(self.start).scale(1.0 / len)
    }

    pub fn point_at(&self, s: f64) -> Point {
        self.start.add(self.direction().scale(s))
    }

    /// Arclength of the orthogonal projection of `p` (unclamped) and the
    /// distance from `p` to the infinite supporting line.
    pub fn project(&self, p: Point) -> (f64, f64) {
        let d = self.direction();
        let r = p.sub(self.start);
        (r.dot(d), r.cross(d).abs())
    }

    /// Euclidean distance from `p` to the segment.
    pub fn distance(&self, p: Point) -> f64 {
        let (s, _) = self.project(p);
        let s = s.clamp(0.0, self.length());
        p.dist(self.point_at(s))
    }
}

fn signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    (0..n)
        .map(|i| ring[i].cross(ring[(i + 1) % n]))
        .sum::<f64>()
        * 0.5
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let o = |p: Point, q: Point, r: Point| q.sub(p).cross(r.sub(p));
    let d1 = o(c, d, a);
    let d2 = o(c, d, b);
    let d3 = o(a, b, c);
    let d4 = o(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |p: Point, q: Point, r: Point, o: f64| {
        o.abs() <= GEOM_EPS
            && r.x >= p.x.min(q.x) - GEOM_EPS
            && r.x <= p.x.max(q.x) + GEOM_EPS
            && r.y >= p.y.min(q.y) - GEOM_EPS
            && r.y <= p.y.max(q.y) + GEOM_EPS
    };
    on(c, d, a, d1) || on(c, d, b, d2) || on(a, b, c, d3) || on(a, b, d, d4)
}

fn ring_edges(ring: &[Point]) -> impl Iterator<Item = (Point, Point)> + '_ {
    let n = ring.len();
    (0..n).map(move |i| (ring[i], ring[(i + 1) % n]))
}

fn ring_is_simple(ring: &[Point]) -> bool {
    let n = ring.len();
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_intersect(ring[i], ring[(i + 1) % n], ring[j], ring[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

fn point_in_ring(ring: &[Point], p: Point) -> bool {
    let mut inside = false;
    let n = ring.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// A polygon with optional polygonal holes. The outer ring is
/// counterclockwise, holes are clockwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolygonDomain {
    outer: Vec<Point>,
    holes: Vec<Vec<Point>>,
}

impl PolygonDomain {
    /// Validates the rings and rotates the outer ring so that side 0 starts at
    /// the top-right vertex.
    pub fn new(outer: Vec<Point>, holes: Vec<Vec<Point>>) -> Result<Self> {
        if outer.len() < 3 {
            return Err(Error::Geometry("outer ring needs at least 3 vertices".into()));
        }
        if signed_area(&outer) <= 0.0 {
            return Err(Error::Geometry(
                "outer ring must be counterclockwise with positive area".into(),
            ));
        }
        if !ring_is_simple(&outer) {
            return Err(Error::Geometry("outer ring self-intersects".into()));
        }
        for (h, hole) in holes.iter().enumerate() {
            if hole.len() < 3 {
                return Err(Error::Geometry(format!("hole {h} needs at least 3 vertices")));
            }
            if signed_area(hole) >= 0.0 {
                return Err(Error::Geometry(format!("hole {h} must be clockwise")));
            }
            if !ring_is_simple(hole) {
                return Err(Error::Geometry(format!("hole {h} self-intersects")));
            }
            if !hole.iter().all(|&p| point_in_ring(&outer, p)) {
                return Err(Error::Geometry(format!("hole {h} is not inside the outer ring")));
            }
            for (a, b) in ring_edges(hole) {
                if ring_edges(&outer).any(|(c, d)| segments_intersect(a, b, c, d)) {
                    return Err(Error::Geometry(format!("hole {h} touches the outer ring")));
                }
            }
            for (g, other) in holes.iter().enumerate().take(h) {
                let crossing = ring_edges(hole)
                    .any(|(a, b)| ring_edges(other).any(|(c, d)| segments_intersect(a, b, c, d)));
                if crossing
                    || point_in_ring(other, hole[0])
                    || point_in_ring(hole, other[0])
                {
                    return Err(Error::Geometry(format!("holes {g} and {h} overlap")));
                }
            }
        }
        let start = (0..outer.len())
            .max_by(|&i, &j| {
                let (a, b) = (outer[i], outer[j]);
                a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x))
            })
            .unwrap_or(0);
        let mut outer = outer;
        outer.rotate_left(start);
        Ok(PolygonDomain { outer, holes })
    }

    pub fn rectangle(width: f64, height: f64) -> Self {
        let outer = vec![
            Point::new(width, height),
            Point::new(0.0, height),
            Point::new(0.0, 0.0),
            Point::new(width, 0.0),
        ];
        PolygonDomain::new(outer, Vec::new()).expect("rectangle is a valid domain")
    }

    pub fn square(side: f64) -> Self {
        Self::rectangle(side, side)
    }

    /// Right triangle with the right angle at the bottom-right corner; the
    /// hypotenuse is side 0.
    pub fn right_triangle(leg: f64) -> Self {
        let outer = vec![
            Point::new(leg, leg),
            Point::new(0.0, 0.0),
            Point::new(leg, 0.0),
        ];
        PolygonDomain::new(outer, Vec::new()).expect("triangle is a valid domain")
    }

    pub fn outer(&self) -> &[Point] {
        &self.outer
    }

    pub fn holes(&self) -> &[Vec<Point>] {
        &self.holes
    }

    pub fn sides(&self) -> Vec<Side> {
        ring_edges(&self.outer)
            .map(|(start, end)| Side { start, end })
            .collect()
    }

    pub fn side_count(&self) -> usize {
        self.outer.len()
    }

    /// Every boundary segment, outer ring first, then holes.
    pub fn boundary_segments(&self) -> Vec<Side> {
        let mut segs = self.sides();
        for hole in &self.holes {
            segs.extend(ring_edges(hole).map(|(start, end)| Side { start, end }));
        }
        segs
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.outer) + self.holes.iter().map(|h| signed_area(h)).sum::<f64>()
    }

    pub fn bbox(&self) -> (Point, Point) {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.outer {
            lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        (lo, hi)
    }

    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, a) in self.outer.iter().enumerate() {
            for b in &self.outer[i + 1..] {
                d = d.max(a.dist(*b));
            }
        }
        d
    }

    /// Strict containment test (points on the boundary may go either way).
    pub fn contains(&self, p: Point) -> bool {
        point_in_ring(&self.outer, p) && !self.holes.iter().any(|h| point_in_ring(h, p))
    }

    /// Short content hash of the rings.
    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for ring in std::iter::once(&self.outer).chain(&self.holes) {
            for p in ring {
                h.update(p.x.to_le_bytes());
                h.update(p.y.to_le_bytes());
            }
            h.update(b"|");
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn boundary_distance(&self, p: Point) -> f64 {
        self.boundary_segments()
            .iter()
            .map(|s| s.distance(p))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Electrode midpoints on the outer boundary of a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeLayout {
    midpoints: Vec<f64>,
    width: f64,
    side_of: Vec<usize>,
    arclength: Vec<f64>,
}

impl ElectrodeLayout {
    /// Builds a layout from per-electrode (side, arclength) pairs. The pairs
    /// must already be in numbering order.
    pub fn from_arclengths(
        domain: &PolygonDomain,
        side_of: Vec<usize>,
        arclength: Vec<f64>,
        width: f64,
    ) -> Result<Self> {
        if side_of.len() != arclength.len() {
            return Err(Error::Dimension(format!(
                "{} sides for {} arclengths",
                side_of.len(),
                arclength.len()
            )));
        }
        let sides = domain.sides();
        let k = side_of.len();
        let mut midpoints = vec![0.0; 2 * k];
        for (e, (&side, &s)) in side_of.iter().zip(&arclength).enumerate() {
            let side = sides.get(side).ok_or_else(|| {
                Error::Geometry(format!("electrode {e} refers to missing side {side}"))
            })?;
            let p = side.point_at(s);
            midpoints[e] = p.x;
            midpoints[k + e] = p.y;
        }
        Ok(ElectrodeLayout {
            midpoints,
            width,
            side_of,
            arclength,
        })
    }

    /// Rebuilds a layout from stacked midpoints by projecting each point onto
    /// its side.
    pub fn from_midpoints(
        domain: &PolygonDomain,
        side_of: Vec<usize>,
        midpoints: &[f64],
        width: f64,
    ) -> Result<Self> {
        let k = side_of.len();
        if midpoints.len() != 2 * k {
            return Err(Error::Dimension(format!(
                "expected {} coordinates, got {}",
                2 * k,
                midpoints.len()
            )));
        }
        let sides = domain.sides();
        let mut arclength = Vec::with_capacity(k);
        for (e, &side) in side_of.iter().enumerate() {
            let side = sides.get(side).ok_or_else(|| {
                Error::Geometry(format!("electrode {e} refers to missing side {side}"))
            })?;
            arclength.push(side.project(Point::new(midpoints[e], midpoints[k + e])).0);
        }
        Self::from_arclengths(domain, side_of, arclength, width)
    }

    pub fn k(&self) -> usize {
        self.side_of.len()
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    /// Stacked `[x_1..x_k, y_1..y_k]`.
    pub fn midpoints(&self) -> &[f64] {
        &self.midpoints
    }

    pub fn midpoint(&self, e: usize) -> Point {
        Point::new(self.midpoints[e], self.midpoints[self.k() + e])
    }

    pub fn side_of(&self) -> &[usize] {
        &self.side_of
    }

    pub fn arclength(&self) -> &[f64] {
        &self.arclength
    }

    /// Arclength interval `[start, end]` covered by electrode `e`.
    pub fn extent(&self, e: usize) -> (f64, f64) {
        let s = self.arclength[e];
        (s - 0.5 * self.width, s + 0.5 * self.width)
    }

    pub fn per_side(&self, n_sides: usize) -> Vec<usize> {
        let mut counts = vec![0; n_sides];
        for &s in &self.side_of {
            counts[s] += 1;
        }
        counts
    }

    /// Checks that every extent lies on its side and that consecutive extents
    /// on a side are separated by at least `min_gap`.
    pub fn validate(&self, domain: &PolygonDomain, min_gap: f64) -> Result<()> {
        let sides = domain.sides();
        let tol = 1e-9 * domain.diameter();
        for side in 0..sides.len() {
            let len = sides[side].length();
            let mut on_side: Vec<usize> = (0..self.k()).filter(|&e| self.side_of[e] == side).collect();
            on_side.sort_by(|&a, &b| self.arclength[a].total_cmp(&self.arclength[b]));
            for &e in &on_side {
                let (a, b) = self.extent(e);
                if a < -tol || b > len + tol {
                    return Err(Error::Infeasible {
                        side,
                        reason: format!("electrode {e} extent [{a}, {b}] leaves side of length {len}"),
                    });
                }
            }
            for pair in on_side.windows(2) {
                let gap = self.extent(pair[1]).0 - self.extent(pair[0]).1;
                if gap < min_gap - tol {
                    return Err(Error::Infeasible {
                        side,
                        reason: format!(
                            "electrodes {} and {} are {gap} apart (< {min_gap})",
                            pair[0], pair[1]
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,x,y,side,width\n");
        for e in 0..self.k() {
            let p = self.midpoint(e);
            let _ = writeln!(out, "{},{},{},{},{}", e + 1, p.x, p.y, self.side_of[e], self.width);
        }
        out
    }

    pub fn from_csv(domain: &PolygonDomain, text: &str, file: &str) -> Result<Self> {
        let mut side_of = Vec::new();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut width = None;
        for (ln, line) in text.lines().enumerate().skip(1) {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                file: file.to_string(),
                line: ln + 1,
                message,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(parse_err(format!("expected 5 fields, got {}", f.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| parse_err(e.to_string()));
            xs.push(num(f[1])?);
            ys.push(num(f[2])?);
            side_of.push(f[3].trim().parse::<usize>().map_err(|e| parse_err(e.to_string()))?);
            width = Some(num(f[4])?);
        }
        let width = width.ok_or_else(|| Error::Parse {
            file: file.to_string(),
            line: 1,
            message: "no electrodes".into(),
        })?;
        xs.extend(ys);
        Self::from_midpoints(domain, side_of, &xs, width)
    }

    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(&Sha256::digest(self.to_csv().as_bytes())[..8])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(domain: &PolygonDomain, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv(domain, &text, &path.display().to_string())
    }
}

fn check_counts(domain: &PolygonDomain, per_side: &[usize]) -> Result<()> {
    if per_side.len() != domain.side_count() {
        return Err(Error::Dimension(format!(
            "{} per-side counts for a domain with {} sides",
            per_side.len(),
            domain.side_count()
        )));
    }
    Ok(())
}

fn check_fit(side: usize, len: f64, n: usize, width: f64, min_gap: f64) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    if width <= 0.0 {
        return Err(Error::Infeasible {
            side,
            reason: format!("electrode width {width} must be positive"),
        });
    }
    let needed = n as f64 * width + (n - 1) as f64 * min_gap;
    if needed > len * (1.0 + 1e-12) {
        return Err(Error::Infeasible {
            side,
            reason: format!("{n} electrodes need {needed} but the side is {len} long"),
        });
    }
    Ok(())
}

/// Rejection-samples electrode midpoints independently per side until all
/// midpoints on a side are at least `width + min_gap` apart.
pub fn place_random_electrodes(
    domain: &PolygonDomain,
    per_side: &[usize],
    width: f64,
    min_gap: f64,
    seed: u64,
) -> Result<ElectrodeLayout> {
    check_counts(domain, per_side)?;
    let sides = domain.sides();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut side_of = Vec::new();
    let mut arclength = Vec::new();
    for (side, (&n, geom)) in per_side.iter().zip(&sides).enumerate() {
        let len = geom.length();
        check_fit(side, len, n, width, min_gap)?;
        if n == 0 {
            continue;
        }
        let lo = 0.5 * width;
        let hi = (len - 0.5 * width).max(lo);
        let spacing = width + min_gap;
        let mut accepted = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let mut s: Vec<f64> = (0..n)
                .map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo })
                .collect();
            s.sort_by(f64::total_cmp);
            if s.windows(2).all(|w| w[1] - w[0] >= spacing) {
                accepted = Some(s);
                break;
            }
        }
        let s = accepted.ok_or_else(|| Error::Infeasible {
            side,
            reason: format!("no admissible draw after {MAX_PLACEMENT_ATTEMPTS} attempts"),
        })?;
        side_of.extend(std::iter::repeat_n(side, n));
        arclength.extend(s);
    }
    ElectrodeLayout::from_arclengths(domain, side_of, arclength, width)
}

/// Midpoints at fractions `i / (n + 1)` of each side.
pub fn uniform_layout(domain: &PolygonDomain, per_side: &[usize], width: f64) -> Result<ElectrodeLayout> {
    check_counts(domain, per_side)?;
    let mut side_of = Vec::new();
    let mut arclength = Vec::new();
    for (side, (&n, geom)) in per_side.iter().zip(domain.sides()).enumerate() {
        let len = geom.length();
        check_fit(side, len, n, width, 0.0)?;
        let step = len / (n + 1) as f64;
        if n > 0 && (step < 0.5 * width || (n > 1 && step < width)) {
            return Err(Error::Infeasible {
                side,
                reason: format!("uniform spacing {step} cannot hold width {width}"),
            });
        }
        for i in 1..=n {
            side_of.push(side);
            arclength.push(step * i as f64);
        }
    }
    ElectrodeLayout::from_arclengths(domain, side_of, arclength, width)
}

/// Euclidean projection of `targets` onto `{s : lo <= s_1, s_i + spacing <= s_{i+1}, s_n <= hi}`.
///
/// Substituting `u_i = s_i - i * spacing` turns the ordering constraint into
/// monotonicity, solved by pool-adjacent-violators and then clamped to the
/// shifted box.
pub fn project_ordered(targets: &[f64], lo: f64, hi: f64, spacing: f64) -> Vec<f64> {
    let n = targets.len();
    if n == 0 {
        return Vec::new();
    }
    let shifted: Vec<f64> = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| t - i as f64 * spacing)
        .collect();
    // blocks of (sum, count)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &v in &shifted {
        blocks.push((v, 1));
        while blocks.len() >= 2 {
            let (s1, c1) = blocks[blocks.len() - 1];
            let (s0, c0) = blocks[blocks.len() - 2];
            if s0 / c0 as f64 > s1 / c1 as f64 {
                blocks.pop();
                blocks.pop();
                blocks.push((s0 + s1, c0 + c1));
            } else {
                break;
            }
        }
    }
    let upper = hi - (n - 1) as f64 * spacing;
    let mut out = Vec::with_capacity(n);
    for (sum, count) in blocks {
        let v = (sum / count as f64).max(lo).min(upper);
        out.extend(std::iter::repeat_n(v, count));
    }
    out.iter()
        .enumerate()
        .map(|(i, &u)| u + i as f64 * spacing)
        .collect()
}

/// Maps raw stacked coordinates onto the admissible layouts: each electrode
/// is projected onto its assigned side, then the per-side positions are
/// projected onto the ordered, gap-respecting set.
pub fn project_layout(
    domain: &PolygonDomain,
    per_side: &[usize],
    width: f64,
    min_gap: f64,
    raw: &[f64],
) -> Result<ElectrodeLayout> {
    check_counts(domain, per_side)?;
    let k: usize = per_side.iter().sum();
    if raw.len() != 2 * k {
        return Err(Error::Dimension(format!("expected {} coordinates, got {}", 2 * k, raw.len())));
    }
    let sides = domain.sides();
    let mut side_of = Vec::with_capacity(k);
    let mut arclength = Vec::with_capacity(k);
    let mut e = 0;
    for (side, (&n, geom)) in per_side.iter().zip(&sides).enumerate() {
        let len = geom.length();
        check_fit(side, len, n, width, min_gap)?;
        let targets: Vec<f64> = (e..e + n)
            .map(|i| geom.project(Point::new(raw[i], raw[k + i])).0)
            .collect();
        let s = project_ordered(&targets, 0.5 * width, len - 0.5 * width, width + min_gap);
        side_of.extend(std::iter::repeat_n(side, n));
        arclength.extend(s);
        e += n;
    }
    ElectrodeLayout::from_arclengths(domain, side_of, arclength, width)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overlaps(layout: &ElectrodeLayout, domain: &PolygonDomain) -> usize {
        let sides = domain.sides();
        let mut bad = 0;
        for i in 0..layout.k() {
            let (a, b) = layout.extent(i);
            let len = sides[layout.side_of()[i]].length();
            if a < -1e-12 || b > len + 1e-12 {
                bad += 1;
            }
            for j in i + 1..layout.k() {
                if layout.side_of()[i] != layout.side_of()[j] {
                    continue;
                }
                let (c, d) = layout.extent(j);
                if a < d && c < b {
                    bad += 1;
                }
            }
        }
        bad
    }

    #[test]
    fn square_sides_start_top_right_ccw() {
        let d = PolygonDomain::square(1.0);
        let sides = d.sides();
        assert_eq!(sides[0].start, Point::new(1.0, 1.0));
        assert_eq!(sides[0].end, Point::new(0.0, 1.0));
        assert_eq!(sides[3].end, Point::new(1.0, 1.0));
        assert!((d.area() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn start_vertex_is_canonicalized() {
        let d = PolygonDomain::new(
            vec![
                Point::new(0.0, 0.0),
                Point::new(2.0, 0.0),
                Point::new(2.0, 1.0),
                Point::new(0.0, 1.0),
            ],
            vec![],
        )
        .unwrap();
        assert_eq!(d.outer()[0], Point::new(2.0, 1.0));
    }

    #[test]
    fn rejects_bad_rings() {
        let cw = vec![Point::new(0.0, 0.0), Point::new(0.0, 1.0), Point::new(1.0, 0.0)];
        assert!(PolygonDomain::new(cw, vec![]).is_err());
        let bowtie = vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 0.0),
            Point::new(0.0, 1.0),
        ];
        assert!(PolygonDomain::new(bowtie, vec![]).is_err());
        let outer = PolygonDomain::square(1.0).outer().to_vec();
        let ccw_hole = vec![Point::new(0.4, 0.4), Point::new(0.6, 0.4), Point::new(0.5, 0.6)];
        assert!(PolygonDomain::new(outer.clone(), vec![ccw_hole.clone()]).is_err());
        let mut cw_hole = ccw_hole;
        cw_hole.reverse();
        let d = PolygonDomain::new(outer, vec![cw_hole]).unwrap();
        assert!((d.area() - (1.0 - 0.02)).abs() < 1e-12);
        assert!(!d.contains(Point::new(0.5, 0.45)));
        assert!(d.contains(Point::new(0.1, 0.1)));
    }

    #[test]
    fn random_square_layout_has_twelve_disjoint_electrodes() {
        let d = PolygonDomain::square(1.0);
        let l = place_random_electrodes(&d, &[3, 3, 3, 3], 0.075, 0.075, 1).unwrap();
        assert_eq!(l.k(), 12);
        assert_eq!(l.midpoints().len(), 24);
        assert_eq!(overlaps(&l, &d), 0);
        l.validate(&d, 0.075).unwrap();
    }

    #[test]
    fn forced_placement_lands_at_side_center() {
        let d = PolygonDomain::rectangle(0.5, 1.0);
        // side 0 is the top side of length 0.5
        let l = place_random_electrodes(&d, &[1, 0, 0, 0], 0.5, 0.0, 9).unwrap();
        assert!((l.arclength()[0] - 0.25).abs() < 1e-15);
        assert!((l.midpoint(0).x - 0.25).abs() < 1e-15);
    }

    #[test]
    fn infeasible_requests_are_rejected() {
        let d = PolygonDomain::square(1.0);
        let err = place_random_electrodes(&d, &[8, 3, 3, 3], 0.075, 0.075, 0).unwrap_err();
        assert!(matches!(err, Error::Infeasible { side: 0, .. }));
        assert!(uniform_layout(&d, &[20, 0, 0, 0], 0.075).is_err());
    }

    #[test]
    fn thousand_random_layouts_never_overlap() {
        let d = PolygonDomain::square(1.0);
        for seed in 0..1000 {
            let l = place_random_electrodes(&d, &[3, 3, 3, 3], 0.075, 0.075, seed).unwrap();
            assert_eq!(overlaps(&l, &d), 0, "seed {seed}");
        }
    }

    #[test]
    fn placement_is_deterministic() {
        let d = PolygonDomain::rectangle(2.0, 1.0);
        let a = place_random_electrodes(&d, &[4, 2, 4, 2], 0.075, 0.075, 5).unwrap();
        let b = place_random_electrodes(&d, &[4, 2, 4, 2], 0.075, 0.075, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_fractions() {
        let rect = PolygonDomain::rectangle(2.0, 1.0);
        let l = uniform_layout(&rect, &[4, 2, 4, 2], 0.075).unwrap();
        let fr: Vec<f64> = l.arclength()[..4].iter().map(|s| s / 2.0).collect();
        for (i, f) in fr.iter().enumerate() {
            assert!((f - (i + 1) as f64 / 5.0).abs() < 1e-15);
        }
        assert!((l.arclength()[4] - 1.0 / 3.0).abs() < 1e-15);

        let sq = PolygonDomain::square(1.0);
        let l = uniform_layout(&sq, &[1, 1, 1, 1], 0.075).unwrap();
        assert!(l.arclength().iter().all(|&s| (s - 0.5).abs() < 1e-15));

        let tri = PolygonDomain::right_triangle(1.0);
        let l = uniform_layout(&tri, &[4, 3, 3], 0.075).unwrap();
        let hyp = 2f64.sqrt();
        for i in 0..4 {
            assert!((l.arclength()[i] / hyp - (i + 1) as f64 / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_is_identity_on_feasible_input() {
        let d = PolygonDomain::square(1.0);
        let l = place_random_electrodes(&d, &[3, 3, 3, 3], 0.075, 0.075, 3).unwrap();
        let p = project_layout(&d, &[3, 3, 3, 3], 0.075, 0.075, l.midpoints()).unwrap();
        for (a, b) in p.midpoints().iter().zip(l.midpoints()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_repairs_collisions() {
        let s = project_ordered(&[0.5, 0.5, 0.5], 0.0, 1.0, 0.2);
        assert!((s[0] - 0.3).abs() < 1e-12 && (s[1] - 0.5).abs() < 1e-12 && (s[2] - 0.7).abs() < 1e-12);
        let s = project_ordered(&[-1.0, 0.9, 5.0], 0.1, 0.9, 0.2);
        assert!((s[0] - 0.1).abs() < 1e-12);
        assert!((s[2] - 0.9).abs() < 1e-12);
        assert!(s[1] - s[0] >= 0.2 - 1e-12 && s[2] - s[1] >= 0.2 - 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let d = PolygonDomain::right_triangle(1.0);
        let l = uniform_layout(&d, &[4, 3, 3], 0.075).unwrap();
        let back = ElectrodeLayout::from_csv(&d, &l.to_csv(), "mem").unwrap();
        for (a, b) in back.arclength().iter().zip(l.arclength()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(back.side_of(), l.side_of());
    }

    proptest::proptest! {
        #[test]
        fn projected_layouts_are_always_valid(raw in proptest::collection::vec(-0.5f64..1.5, 24)) {
            let d = PolygonDomain::square(1.0);
            let l = project_layout(&d, &[3, 3, 3, 3], 0.075, 0.075, &raw).unwrap();
            proptest::prop_assert!(l.validate(&d, 0.075).is_ok());
            proptest::prop_assert_eq!(overlaps(&l, &d), 0);
        }
    }
}
