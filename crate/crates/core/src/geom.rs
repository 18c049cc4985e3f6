//! Planar polygons: area, validity, rectangle clipping, containment and rasterization.
//!
//! Rings are stored open (the closing vertex is implicit). Containment uses the even-odd rule
//! over all rings of a polygon, so holes need no particular orientation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::detection::BBox;
use crate::error::{Error, Result};
use crate::raster::{Grid, Mask};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

pub type Ring = Vec<Point>;

#[derive(Clone, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Polygon {
    pub exterior: Ring,
    pub holes: Vec<Ring>,
}

#[derive(Clone, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MultiPolygon(pub Vec<Polygon>);

/// Signed shoelace area, positive for counter-clockwise rings in a y-up frame.
pub fn ring_signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    acc * 0.5
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test (touching counts).
pub fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Proper crossing: the segments cross at a single point interior to both.
fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

fn ring_edges(ring: &[Point]) -> impl Iterator<Item = (Point, Point)> + '_ {
    let n = ring.len();
    (0..n).map(move |i| (ring[i], ring[(i + 1) % n]))
}

/// A ring is simple when it has at least three vertices, non-zero area and no two
/// non-adjacent edges touch.
pub fn ring_is_simple(ring: &[Point]) -> bool {
    let n = ring.len();
    if n < 3 || ring_signed_area(ring) == 0.0 {
        return false;
    }
    if ring.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return false;
    }
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        if a == b {
            return false;
        }
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            let (c, d) = (ring[j], ring[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.x + t * dx - p.x, a.y + t * dy - p.y);
    libm::sqrt(qx * qx + qy * qy)
}

fn ring_crossings(ring: &[Point], p: Point) -> bool {
    let mut inside = false;
    for (a, b) in ring_edges(ring) {
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

impl Polygon {
    pub fn new(exterior: Ring, holes: Vec<Ring>) -> Self {
        Self { exterior, holes }
    }

    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(
            vec![
                Point::new(x0, y0),
                Point::new(x1, y0),
                Point::new(x1, y1),
                Point::new(x0, y1),
            ],
            Vec::new(),
        )
    }

    pub fn rings(&self) -> impl Iterator<Item = &Ring> {
        core::iter::once(&self.exterior).chain(self.holes.iter())
    }

    pub fn area(&self) -> f64 {
        let outer = libm::fabs(ring_signed_area(&self.exterior));
        let holes: f64 = self
            .holes
            .iter()
            .map(|h| libm::fabs(ring_signed_area(h)))
            .sum();
        (outer - holes).max(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !ring_is_simple(&self.exterior) {
            return Err(Error::InvalidGeometry(format!(
                "exterior ring with {} vertices is not simple or has zero area",
                self.exterior.len()
            )));
        }
        for (i, h) in self.holes.iter().enumerate() {
            if !ring_is_simple(h) {
                return Err(Error::InvalidGeometry(format!("hole {i} is not simple")));
            }
        }
        if self.area() <= 0.0 {
            return Err(Error::InvalidGeometry(format!("polygon has no area")));
        }
        Ok(())
    }

    pub fn bbox(&self) -> Option<BBox> {
        bbox_of(self.exterior.iter())
    }

    /// Even-odd containment over all rings.
    pub fn contains(&self, p: Point) -> bool {
        self.rings().fold(false, |acc, r| acc ^ ring_crossings(r, p))
    }

    pub fn boundary_distance(&self, p: Point) -> f64 {
        self.rings()
            .flat_map(|r| ring_edges(r))
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    /// Clip every ring against an axis-aligned rectangle (Sutherland–Hodgman). The clipped
    /// area is exact; concave inputs may gain zero-width bridge edges along the window border.
    pub fn clip_to_rect(&self, rect: &BBox) -> Polygon {
        let exterior = clip_ring(&self.exterior, rect);
        if exterior.len() < 3 {
            return Polygon::default();
        }
        let holes = self
            .holes
            .iter()
            .map(|h| clip_ring(h, rect))
            .filter(|h| h.len() >= 3)
            .collect();
        Polygon::new(exterior, holes)
    }

    pub fn map_points(&self, mut f: impl FnMut(Point) -> Point) -> Polygon {
        Polygon::new(
            self.exterior.iter().map(|&p| f(p)).collect(),
            self.holes
                .iter()
                .map(|h| h.iter().map(|&p| f(p)).collect())
                .collect(),
        )
    }

    /// A point strictly inside the polygon, found on the horizontal line through the middle of
    /// the bounding box.
    pub fn interior_point(&self) -> Option<Point> {
        let bb = self.bbox()?;
        // probe a few scanlines in case the middle one runs along an edge
        for k in [0.5, 0.37, 0.63, 0.21, 0.79] {
            let y = bb.y0 + (bb.y1 - bb.y0) * k;
            let mut xs: Vec<f64> = Vec::new();
            for r in self.rings() {
                for (a, b) in ring_edges(r) {
                    if (a.y > y) != (b.y > y) {
                        xs.push(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
                    }
                }
            }
            xs.sort_by(f64::total_cmp);
            let mut best: Option<(f64, f64)> = None;
            for pair in xs.chunks_exact(2) {
                let w = pair[1] - pair[0];
                if w > 0.0 && best.map_or(true, |(bw, _)| w > bw) {
                    best = Some((w, (pair[0] + pair[1]) * 0.5));
                }
            }
            if let Some((_, x)) = best {
                return Some(Point::new(x, y));
            }
        }
        None
    }

    fn strictly_contains(&self, p: Point, eps: f64) -> bool {
        self.contains(p) && self.boundary_distance(p) > eps
    }

    /// True when the interiors of the two polygons overlap (shared edges do not count).
    pub fn interiors_overlap(&self, other: &Polygon) -> bool {
        let (Some(a), Some(b)) = (self.bbox(), other.bbox()) else {
            return false;
        };
        if a.intersection(&b) <= 0.0 {
            return false;
        }
        let scale = (a.width() + a.height() + b.width() + b.height()).max(1.0);
        let eps = 1e-9 * scale;
        for ra in self.rings() {
            for (p, q) in ring_edges(ra) {
                for rb in other.rings() {
                    for (s, t) in ring_edges(rb) {
                        if segments_cross(p, q, s, t) {
                            return true;
                        }
                    }
                }
            }
        }
        let probes = |poly: &Polygon| {
            let mut pts: Vec<Point> = Vec::new();
            for r in poly.rings() {
                for (p, q) in ring_edges(r) {
                    pts.push(p);
                    pts.push(Point::new((p.x + q.x) * 0.5, (p.y + q.y) * 0.5));
                }
            }
            pts.extend(poly.interior_point());
            pts
        };
        probes(self).into_iter().any(|p| other.strictly_contains(p, eps))
            || probes(other).into_iter().any(|p| self.strictly_contains(p, eps))
    }
}

fn bbox_of<'a>(pts: impl Iterator<Item = &'a Point>) -> Option<BBox> {
    let mut bb: Option<BBox> = None;
    for p in pts {
        bb = Some(match bb {
            None => BBox::new(p.x, p.y, p.x, p.y),
            Some(b) => BBox::new(b.x0.min(p.x), b.y0.min(p.y), b.x1.max(p.x), b.y1.max(p.y)),
        });
    }
    bb
}

fn clip_ring(ring: &[Point], rect: &BBox) -> Ring {
    #[derive(Clone, Copy)]
    enum Edge {
        Left(f64),
        Right(f64),
        Bottom(f64),
        Top(f64),
    }
    let inside = |e: Edge, p: Point| match e {
        Edge::Left(x) => p.x >= x,
        Edge::Right(x) => p.x <= x,
        Edge::Bottom(y) => p.y >= y,
        Edge::Top(y) => p.y <= y,
    };
    let cut = |e: Edge, a: Point, b: Point| match e {
        Edge::Left(x) | Edge::Right(x) => {
            let t = (x - a.x) / (b.x - a.x);
            Point::new(x, a.y + t * (b.y - a.y))
        }
        Edge::Bottom(y) | Edge::Top(y) => {
            let t = (y - a.y) / (b.y - a.y);
            Point::new(a.x + t * (b.x - a.x), y)
        }
    };
    let mut out: Ring = ring.to_vec();
    for e in [
        Edge::Left(rect.x0),
        Edge::Right(rect.x1),
        Edge::Bottom(rect.y0),
        Edge::Top(rect.y1),
    ] {
        if out.is_empty() {
            break;
        }
        let input = core::mem::take(&mut out);
        let n = input.len();
        for i in 0..n {
            let cur = input[i];
            let prev = input[(i + n - 1) % n];
            match (inside(e, prev), inside(e, cur)) {
                (true, true) => out.push(cur),
                (true, false) => out.push(cut(e, prev, cur)),
                (false, true) => {
                    out.push(cut(e, prev, cur));
                    out.push(cur);
                }
                (false, false) => {}
            }
        }
    }
    out.dedup();
    if out.len() > 1 && out.first() == out.last() {
        out.pop();
    }
    out
}

impl MultiPolygon {
    pub fn single(p: Polygon) -> Self {
        Self(vec![p])
    }

    pub fn area(&self) -> f64 {
        self.0.iter().map(Polygon::area).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidGeometry(format!("empty multipolygon")));
        }
        self.0.iter().try_for_each(Polygon::validate)
    }

    pub fn bbox(&self) -> Option<BBox> {
        bbox_of(self.0.iter().flat_map(|p| p.exterior.iter()))
    }

    pub fn contains(&self, p: Point) -> bool {
        self.0.iter().any(|poly| poly.contains(p))
    }

    pub fn clip_to_rect(&self, rect: &BBox) -> MultiPolygon {
        MultiPolygon(
            self.0
                .iter()
                .map(|p| p.clip_to_rect(rect))
                .filter(|p| p.exterior.len() >= 3 && p.area() > 0.0)
                .collect(),
        )
    }

    pub fn map_points(&self, mut f: impl FnMut(Point) -> Point) -> MultiPolygon {
        MultiPolygon(self.0.iter().map(|p| p.map_points(&mut f)).collect())
    }

    pub fn interiors_overlap(&self, other: &MultiPolygon) -> bool {
        self.0
            .iter()
            .any(|a| other.0.iter().any(|b| a.interiors_overlap(b)))
    }

    /// Any shared point, boundary contact included.
    pub fn intersects(&self, other: &MultiPolygon) -> bool {
        self.0.iter().any(|a| {
            other.0.iter().any(|b| {
                let (Some(ba), Some(bb)) = (a.bbox(), b.bbox()) else {
                    return false;
                };
                if ba.x1 < bb.x0 || bb.x1 < ba.x0 || ba.y1 < bb.y0 || bb.y1 < ba.y0 {
                    return false;
                }
                for ra in a.rings() {
                    for (p, q) in ring_edges(ra) {
                        for rb in b.rings() {
                            for (s, t) in ring_edges(rb) {
                                if segments_intersect(p, q, s, t) {
                                    return true;
                                }
                            }
                        }
                    }
                }
                a.exterior.first().is_some_and(|&p| b.contains(p))
                    || b.exterior.first().is_some_and(|&p| a.contains(p))
            })
        })
    }
}

/// Rasterize onto a `width`x`height` grid by sampling pixel centers (`x + 0.5`, `y + 0.5`).
/// Parts of a multipolygon are OR-ed.
pub fn rasterize(shape: &MultiPolygon, width: usize, height: usize) -> Mask {
    let mut grid = Grid::filled(width, height, false);
    let mut xs: Vec<f64> = Vec::new();
    for poly in &shape.0 {
        let Some(bb) = poly.bbox() else { continue };
        let ys = libm::floor(bb.y0 - 0.5).max(0.0) as usize;
        let ye = (libm::ceil(bb.y1 - 0.5).max(0.0) as usize).min(height);
        for y in ys..ye {
            let yc = y as f64 + 0.5;
            xs.clear();
            for r in poly.rings() {
                for (a, b) in ring_edges(r) {
                    if (a.y > yc) != (b.y > yc) {
                        xs.push(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
                    }
                }
            }
            xs.sort_by(f64::total_cmp);
            let row = &mut grid.data_mut()[y * width..(y + 1) * width];
            for pair in xs.chunks_exact(2) {
                // pixel x is covered when pair[0] <= x + 0.5 < pair[1]
                let start = libm::ceil(pair[0] - 0.5).max(0.0);
                let end = libm::ceil(pair[1] - 0.5).max(0.0);
                let (start, end) = (start as usize, (end as usize).min(width));
                for v in row.iter_mut().take(end).skip(start) {
                    *v = true;
                }
            }
        }
    }
    Mask::new(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x0: f64, y0: f64, s: f64) -> Polygon {
        Polygon::rect(x0, y0, x0 + s, y0 + s)
    }

    #[test]
    fn shoelace_area_of_rectangle_with_hole() {
        let mut p = Polygon::rect(0.0, 0.0, 4.0, 3.0);
        assert_eq!(p.area(), 12.0);
        p.holes.push(Polygon::rect(1.0, 1.0, 2.0, 2.0).exterior);
        assert_eq!(p.area(), 11.0);
        assert!(!p.contains(Point::new(1.5, 1.5)));
        assert!(p.contains(Point::new(3.5, 1.5)));
    }

    #[test]
    fn bowtie_is_not_simple() {
        let bowtie = vec![
            Point::new(0.0, 0.0),
            Point::new(2.0, 2.0),
            Point::new(2.0, 0.0),
            Point::new(0.0, 2.0),
        ];
        assert!(!ring_is_simple(&bowtie));
        assert!(Polygon::new(bowtie, vec![]).validate().is_err());
        assert!(square(0.0, 0.0, 1.0).validate().is_ok());
    }

    #[test]
    fn clip_keeps_exact_area_for_concave_input() {
        // U shape opening upwards, clipped by a window cutting both arms
        let u = Polygon::new(
            vec![
                Point::new(0.0, 0.0),
                Point::new(3.0, 0.0),
                Point::new(3.0, 3.0),
                Point::new(2.0, 3.0),
                Point::new(2.0, 1.0),
                Point::new(1.0, 1.0),
                Point::new(1.0, 3.0),
                Point::new(0.0, 3.0),
            ],
            vec![],
        );
        assert_eq!(u.area(), 7.0);
        let c = u.clip_to_rect(&BBox::new(0.0, 0.0, 3.0, 2.0));
        assert!((c.area() - 5.0).abs() < 1e-12);
        let c = u.clip_to_rect(&BBox::new(10.0, 10.0, 12.0, 12.0));
        assert_eq!(c.area(), 0.0);
    }

    #[test]
    fn shared_edges_do_not_overlap() {
        let a = square(0.0, 0.0, 2.0);
        let b = square(2.0, 0.0, 2.0);
        assert!(!a.interiors_overlap(&b));
        assert!(a.interiors_overlap(&square(1.0, 1.0, 2.0)));
        assert!(a.interiors_overlap(&a.clone()));
        assert!(a.interiors_overlap(&square(0.5, 0.5, 1.0)));
        assert!(MultiPolygon::single(a.clone()).intersects(&MultiPolygon::single(b)));
    }

    #[test]
    fn rasterized_rectangle_matches_area() {
        let m = rasterize(
            &MultiPolygon::single(Polygon::rect(2.0, 3.0, 7.0, 5.0)),
            10,
            10,
        );
        assert_eq!(m.area(), 10);
        assert!(m.get(2, 3) && m.get(6, 4) && !m.get(7, 4) && !m.get(2, 5));
    }
}
