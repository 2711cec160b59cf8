//! Exact 2-D primitives for horizontal (HBB) and oriented (OBB) boxes.
//!
//! All areas are continuous: an HBB `[x1, y1, x2, y2]` covers
//! `(x2 - x1) * (y2 - y1)` square pixels. OBBs are restricted to convex
//! quadrilaterals, which lets intersections be computed exactly by clipping
//! one polygon against the half-planes of the other.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance used for all geometric comparisons.
pub const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Squared distance, free of square-root rounding.
    pub fn distance_sq(self, other: Point) -> f64 {
        let (dx, dy) = (self.x - other.x, self.y - other.y);
        dx * dx + dy * dy
    }

    fn sub(self, other: Point) -> Point {
        Point::new(self.x - other.x, self.y - other.y)
    }

    fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxKind {
    Hbb,
    Obb,
}

impl fmt::Display for BoxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoxKind::Hbb => f.write_str("HBB"),
            BoxKind::Obb => f.write_str("OBB"),
        }
    }
}

/// A horizontal box given by its top-left and bottom-right corners, or an
/// oriented box given by four polygon vertices, in pixel units of some frame.
///
/// Serialized as a flat list of 4 or 8 numbers; deserialization validates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub enum GeomBox {
    Hbb { x1: f64, y1: f64, x2: f64, y2: f64 },
    Obb([Point; 4]),
}

impl TryFrom<Vec<f64>> for GeomBox {
    type Error = Error;

    fn try_from(coords: Vec<f64>) -> Result<Self> {
        GeomBox::from_coords(&coords)
    }
}

impl From<GeomBox> for Vec<f64> {
    fn from(b: GeomBox) -> Self {
        b.coords()
    }
}

impl GeomBox {
    pub const fn hbb(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        GeomBox::Hbb { x1, y1, x2, y2 }
    }

    pub fn obb(vertices: [(f64, f64); 4]) -> Self {
        GeomBox::Obb(vertices.map(|(x, y)| Point::new(x, y)))
    }

    /// Builds a box from 4 (HBB) or 8 (OBB) coordinates and validates it.
    pub fn from_coords(coords: &[f64]) -> Result<Self> {
        let b = match *coords {
            [x1, y1, x2, y2] => GeomBox::hbb(x1, y1, x2, y2),
            [x1, y1, x2, y2, x3, y3, x4, y4] => {
                GeomBox::obb([(x1, y1), (x2, y2), (x3, y3), (x4, y4)])
            }
            _ => {
                return Err(Error::InvalidGeometry(format!(
                    "expected 4 or 8 coordinates, got {}",
                    coords.len()
                )))
            }
        };
        b.validate()?;
        Ok(b)
    }

    pub fn kind(&self) -> BoxKind {
        match self {
            GeomBox::Hbb { .. } => BoxKind::Hbb,
            GeomBox::Obb(_) => BoxKind::Obb,
        }
    }

    pub fn coords(&self) -> Vec<f64> {
        match *self {
            GeomBox::Hbb { x1, y1, x2, y2 } => vec![x1, y1, x2, y2],
            GeomBox::Obb(v) => v.iter().flat_map(|p| [p.x, p.y]).collect(),
        }
    }

    /// Rebuilds the box with every coordinate passed through `f(value, is_y)`.
    pub fn map_coords(&self, mut f: impl FnMut(f64, bool) -> f64) -> GeomBox {
        match *self {
            GeomBox::Hbb { x1, y1, x2, y2 } => {
                GeomBox::hbb(f(x1, false), f(y1, true), f(x2, false), f(y2, true))
            }
            GeomBox::Obb(v) => GeomBox::Obb(v.map(|p| Point::new(f(p.x, false), f(p.y, true)))),
        }
    }

    /// Vertices in stored order; HBB corners go TL, TR, BR, BL.
    pub fn vertices(&self) -> [Point; 4] {
        match *self {
            GeomBox::Hbb { x1, y1, x2, y2 } => [
                Point::new(x1, y1),
                Point::new(x2, y1),
                Point::new(x2, y2),
                Point::new(x1, y2),
            ],
            GeomBox::Obb(v) => v,
        }
    }

    /// Checks ordering, finiteness, non-zero area and (for OBBs) convexity.
    pub fn validate(&self) -> Result<()> {
        if self.coords().iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite coordinate".into()));
        }
        match *self {
            GeomBox::Hbb { x1, y1, x2, y2 } => {
                if x1 > x2 || y1 > y2 {
                    return Err(Error::InvalidGeometry(format!(
                        "misordered corners [{x1}, {y1}, {x2}, {y2}]"
                    )));
                }
                if (x2 - x1) * (y2 - y1) <= EPS {
                    return Err(Error::InvalidGeometry("degenerate box".into()));
                }
            }
            GeomBox::Obb(v) => {
                let mut pos = false;
                let mut neg = false;
                for i in 0..4 {
                    let e0 = v[(i + 1) % 4].sub(v[i]);
                    let e1 = v[(i + 2) % 4].sub(v[(i + 1) % 4]);
                    let c = e0.cross(e1);
                    pos |= c > EPS;
                    neg |= c < -EPS;
                }
                if pos && neg {
                    return Err(Error::InvalidGeometry(
                        "quadrilateral is self-intersecting or non-convex".into(),
                    ));
                }
                if signed_area(&v).abs() <= EPS {
                    return Err(Error::InvalidGeometry("degenerate box".into()));
                }
            }
        }
        Ok(())
    }

    /// Polygon with positive shoelace orientation.
    pub fn polygon(&self) -> Vec<Point> {
        let mut v = self.vertices().to_vec();
        if signed_area(&v) < 0.0 {
            v.reverse();
        }
        v
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices()).abs()
    }

    /// Midpoint for HBBs, vertex mean for OBBs.
    pub fn center(&self) -> Point {
        match *self {
            GeomBox::Hbb { x1, y1, x2, y2 } => Point::new((x1 + x2) / 2.0, (y1 + y2) / 2.0),
            GeomBox::Obb(v) => {
                let (sx, sy) = v.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
                Point::new(sx / 4.0, sy / 4.0)
            }
        }
    }

    /// Minimum enclosing horizontal rectangle.
    pub fn bounds(&self) -> RectRegion {
        let v = self.vertices();
        let (mut x1, mut y1, mut x2, mut y2) = (v[0].x, v[0].y, v[0].x, v[0].y);
        for p in &v[1..] {
            x1 = x1.min(p.x);
            y1 = y1.min(p.y);
            x2 = x2.max(p.x);
            y2 = y2.max(p.y);
        }
        RectRegion { x1, y1, x2, y2 }
    }

    /// Diagonal length of the minimum enclosing horizontal box.
    pub fn enclosing_diagonal(&self) -> Result<f64> {
        self.validate()?;
        let r = self.bounds();
        let d = r.width().hypot(r.height());
        if d <= EPS {
            return Err(Error::InvalidGeometry("degenerate box".into()));
        }
        Ok(d)
    }

    pub fn contains_point(&self, p: Point) -> bool {
        let poly = self.polygon();
        (0..poly.len()).all(|i| {
            let a = poly[i];
            let b = poly[(i + 1) % poly.len()];
            b.sub(a).cross(p.sub(a)) >= -EPS
        })
    }
}

impl fmt::Display for GeomBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.coords().iter().map(|c| format_number(*c)).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Formats a coordinate without a trailing `.0` for integral values.
pub fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// An axis-aligned region in absolute pixel coordinates, serialized as
/// `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct RectRegion {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for RectRegion {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        RectRegion { x1, y1, x2, y2 }
    }
}

impl From<RectRegion> for [f64; 4] {
    fn from(r: RectRegion) -> Self {
        [r.x1, r.y1, r.x2, r.y2]
    }
}

impl RectRegion {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        RectRegion { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidGeometry(format!("invalid region {self:?}")))
        }
    }

    /// Boundary-inclusive membership.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x1 - EPS && p.x <= self.x2 + EPS && p.y >= self.y1 - EPS && p.y <= self.y2 + EPS
    }

    pub fn clip(&self, width: f64, height: f64) -> RectRegion {
        RectRegion {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn to_box(&self) -> GeomBox {
        GeomBox::hbb(self.x1, self.y1, self.x2, self.y2)
    }

    pub fn contains_box(&self, b: &GeomBox) -> bool {
        b.vertices().iter().all(|p| self.contains(*p))
    }

    pub fn intersection_area(&self, other: &RectRegion) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, other: &RectRegion) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= EPS {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }
}

fn signed_area(vertices: &[Point]) -> f64 {
    let n = vertices.len();
    let twice: f64 = (0..n)
        .map(|i| vertices[i].cross(vertices[(i + 1) % n]))
        .sum();
    twice / 2.0
}

/// Shoelace area of a simple polygon.
pub fn polygon_area(vertices: &[Point]) -> Result<f64> {
    if vertices.len() < 3 {
        return Err(Error::InvalidGeometry(format!(
            "polygon needs at least 3 vertices, got {}",
            vertices.len()
        )));
    }
    Ok(signed_area(vertices).abs())
}

/// Intersection polygon of two convex boxes; empty when they do not overlap.
pub fn convex_intersection(a: &GeomBox, b: &GeomBox) -> Result<Vec<Point>> {
    a.validate()?;
    b.validate()?;
    let clipper = b.polygon();
    let mut subject = a.polygon();
    for i in 0..clipper.len() {
        if subject.is_empty() {
            break;
        }
        let e0 = clipper[i];
        let e1 = clipper[(i + 1) % clipper.len()];
        let edge = e1.sub(e0);
        let side = |p: Point| edge.cross(p.sub(e0));
        let mut out = Vec::with_capacity(subject.len() + 2);
        for j in 0..subject.len() {
            let cur = subject[j];
            let prev = subject[(j + subject.len() - 1) % subject.len()];
            let (sc, sp) = (side(cur), side(prev));
            let cur_in = sc >= -EPS;
            let prev_in = sp >= -EPS;
            if cur_in != prev_in {
                let t = sp / (sp - sc);
                out.push(Point::new(
                    prev.x + t * (cur.x - prev.x),
                    prev.y + t * (cur.y - prev.y),
                ));
            }
            if cur_in {
                out.push(cur);
            }
        }
        subject = out;
    }
    subject.dedup_by(|p, q| (p.x - q.x).abs() <= EPS && (p.y - q.y).abs() <= EPS);
    if subject.len() > 1 {
        let (first, last) = (subject[0], subject[subject.len() - 1]);
        if (first.x - last.x).abs() <= EPS && (first.y - last.y).abs() <= EPS {
            subject.pop();
        }
    }
    if subject.len() < 3 || signed_area(&subject).abs() <= EPS {
        return Ok(Vec::new());
    }
    Ok(subject)
}

pub fn intersection_area(a: &GeomBox, b: &GeomBox) -> Result<f64> {
    let poly = convex_intersection(a, b)?;
    if poly.is_empty() {
        Ok(0.0)
    } else {
        polygon_area(&poly)
    }
}

/// Polygon intersection-over-union; works on mixed HBB/OBB pairs directly.
pub fn iou(a: &GeomBox, b: &GeomBox) -> Result<f64> {
    let inter = intersection_area(a, b)?;
    let union = a.area() + b.area() - inter;
    if union <= EPS {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

pub fn contains_center(region: &RectRegion, b: &GeomBox) -> bool {
    region.contains(b.center())
}
