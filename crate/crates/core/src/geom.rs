//! Planar geometry: points, axis-aligned rectangles, affine pixel transforms
//! and simple polygons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Point { x, y }
    }
}

/// Axis-aligned rectangle, `min` inclusive and `max` exclusive by convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect<T> {
    pub min_x: T,
    pub min_y: T,
    pub max_x: T,
    pub max_y: T,
}

impl<T: Scalar> Rect<T> {
    pub fn new(min_x: T, min_y: T, max_x: T, max_y: T) -> Self {
        Rect {
            min_x,
            min_y,
            max_x,
            max_y,
        }
    }

    pub fn from_points<I: IntoIterator<Item = Point<T>>>(points: I) -> Option<Self> {
        let mut it = points.into_iter();
        let p = it.next()?;
        let mut r = Rect::new(p.x, p.y, p.x, p.y);
        for p in it {
            r.min_x = r.min_x.min(p.x);
            r.min_y = r.min_y.min(p.y);
            r.max_x = r.max_x.max(p.x);
            r.max_y = r.max_y.max(p.y);
        }
        Some(r)
    }

    pub fn width(&self) -> T {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> T {
        self.max_y - self.min_y
    }

    pub fn area(&self) -> T {
        self.width().max(T::zero()) * self.height().max(T::zero())
    }

    pub fn is_empty(&self) -> bool {
        !(self.max_x > self.min_x && self.max_y > self.min_y)
    }

    pub fn center(&self) -> Point<T> {
        let two = T::lit(2.0);
        Point::new(
            (self.min_x + self.max_x) / two,
            (self.min_y + self.max_y) / two,
        )
    }

    pub fn corners(&self) -> [Point<T>; 4] {
        [
            Point::new(self.min_x, self.min_y),
            Point::new(self.max_x, self.min_y),
            Point::new(self.max_x, self.max_y),
            Point::new(self.min_x, self.max_y),
        ]
    }

    /// Intersection; empty rectangles are returned as-is (check `is_empty`).
    pub fn intersection(&self, other: &Rect<T>) -> Rect<T> {
        Rect::new(
            self.min_x.max(other.min_x),
            self.min_y.max(other.min_y),
            self.max_x.min(other.max_x),
            self.max_y.min(other.max_y),
        )
    }

    /// True when the interiors overlap (touching edges do not count).
    pub fn interiors_intersect(&self, other: &Rect<T>) -> bool {
        !self.intersection(other).is_empty()
    }

    pub fn contains_rect(&self, other: &Rect<T>, tol: T) -> bool {
        other.min_x >= self.min_x - tol
            && other.min_y >= self.min_y - tol
            && other.max_x <= self.max_x + tol
            && other.max_y <= self.max_y + tol
    }

    pub fn contains_point(&self, p: Point<T>) -> bool {
        p.x >= self.min_x && p.x < self.max_x && p.y >= self.min_y && p.y < self.max_y
    }

    pub fn to_polygon(&self) -> Polygon<T> {
        Polygon::new(self.corners().to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> Rect<U> {
        Rect::new(
            U::lit(self.min_x.as_f64()),
            U::lit(self.min_y.as_f64()),
            U::lit(self.max_x.as_f64()),
            U::lit(self.max_y.as_f64()),
        )
    }
}

/// Affine map from pixel (col, row) to CRS coordinates, GDAL geotransform order:
/// `x = c + a*col + b*row`, `y = f + d*col + e*row`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine<T> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
    pub e: T,
    pub f: T,
}

impl<T: Scalar> Affine<T> {
    /// North-up transform with square-or-rectangular pixels.
    pub fn north_up(origin_x: T, origin_y: T, pixel_w: T, pixel_h: T) -> Self {
        Affine {
            a: pixel_w,
            b: T::zero(),
            c: origin_x,
            d: T::zero(),
            e: -pixel_h,
            f: origin_y,
        }
    }

    pub fn apply(&self, col: T, row: T) -> Point<T> {
        Point::new(
            self.c + self.a * col + self.b * row,
            self.f + self.d * col + self.e * row,
        )
    }

    pub fn determinant(&self) -> T {
        self.a * self.e - self.b * self.d
    }

    pub fn is_north_up(&self) -> bool {
        self.b == T::zero() && self.d == T::zero() && self.a > T::zero() && self.e < T::zero()
    }

    pub fn inverse(&self) -> Result<Affine<T>> {
        let det = self.determinant();
        if det == T::zero() || !det.is_finite() {
            return Err(Error::Geometry("affine transform is not invertible".into()));
        }
        let a = self.e / det;
        let b = -self.b / det;
        let d = -self.d / det;
        let e = self.a / det;
        Ok(Affine {
            a,
            b,
            c: -(a * self.c + b * self.f),
            d,
            e,
            f: -(d * self.c + e * self.f),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Affine<U> {
        Affine {
            a: U::lit(self.a.as_f64()),
            b: U::lit(self.b.as_f64()),
            c: U::lit(self.c.as_f64()),
            d: U::lit(self.d.as_f64()),
            e: U::lit(self.e.as_f64()),
            f: U::lit(self.f.as_f64()),
        }
    }
}

/// Simple polygon with optional holes; rings are implicitly closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon<T> {
    pub exterior: Vec<Point<T>>,
    #[serde(default)]
    pub holes: Vec<Vec<Point<T>>>,
}

impl<T: Scalar> Polygon<T> {
    pub fn new(mut exterior: Vec<Point<T>>) -> Self {
        if exterior.len() > 1 && exterior.first() == exterior.last() {
            exterior.pop();
        }
        Polygon {
            exterior,
            holes: Vec::new(),
        }
    }

    pub fn with_holes(exterior: Vec<Point<T>>, holes: Vec<Vec<Point<T>>>) -> Self {
        let mut p = Polygon::new(exterior);
        p.holes = holes
            .into_iter()
            .map(|mut h| {
                if h.len() > 1 && h.first() == h.last() {
                    h.pop();
                }
                h
            })
            .collect();
        p
    }

    pub fn bbox(&self) -> Option<Rect<T>> {
        Rect::from_points(self.exterior.iter().copied())
    }

    /// Even-odd rule over exterior and holes.
    pub fn contains_point(&self, p: Point<T>) -> bool {
        let mut inside = ring_crossings(&self.exterior, p);
        for h in &self.holes {
            if ring_crossings(h, p) {
                inside = !inside;
            }
        }
        inside
    }

    /// Unsigned area (exterior minus holes).
    pub fn area(&self) -> T {
        let mut a = ring_signed_area(&self.exterior).abs();
        for h in &self.holes {
            a -= ring_signed_area(h).abs();
        }
        a.max(T::zero())
    }

    /// Area of the intersection with an axis-aligned rectangle.
    pub fn intersection_area(&self, rect: &Rect<T>) -> T {
        let mut a = ring_signed_area(&clip_ring(&self.exterior, rect)).abs();
        for h in &self.holes {
            a -= ring_signed_area(&clip_ring(h, rect)).abs();
        }
        a.max(T::zero())
    }
}

fn ring_crossings<T: Scalar>(ring: &[Point<T>], p: Point<T>) -> bool {
    let n = ring.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (pi, pj) = (ring[i], ring[j]);
        if (pi.y > p.y) != (pj.y > p.y) {
            let x_cross = pi.x + (p.y - pi.y) * (pj.x - pi.x) / (pj.y - pi.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn ring_signed_area<T: Scalar>(ring: &[Point<T>]) -> T {
    let n = ring.len();
    if n < 3 {
        return T::zero();
    }
    let mut acc = T::zero();
    for i in 0..n {
        let p = ring[i];
        let q = ring[(i + 1) % n];
        acc += p.x * q.y - q.x * p.y;
    }
    acc / T::lit(2.0)
}

/// Sutherland-Hodgman clip of a ring against a rectangle. The clip region is
/// convex, so the area of the result is exact even for concave input rings.
fn clip_ring<T: Scalar>(ring: &[Point<T>], rect: &Rect<T>) -> Vec<Point<T>> {
    #[derive(Clone, Copy)]
    enum Edge {
        Left,
        Right,
        Bottom,
        Top,
    }
    let inside = |p: Point<T>, e: Edge| match e {
        Edge::Left => p.x >= rect.min_x,
        Edge::Right => p.x <= rect.max_x,
        Edge::Bottom => p.y >= rect.min_y,
        Edge::Top => p.y <= rect.max_y,
    };
    let cross = |a: Point<T>, b: Point<T>, e: Edge| match e {
        Edge::Left | Edge::Right => {
            let x = if matches!(e, Edge::Left) {
                rect.min_x
            } else {
                rect.max_x
            };
            let t = (x - a.x) / (b.x - a.x);
            Point::new(x, a.y + t * (b.y - a.y))
        }
        Edge::Bottom | Edge::Top => {
            let y = if matches!(e, Edge::Bottom) {
                rect.min_y
            } else {
                rect.max_y
            };
            let t = (y - a.y) / (b.y - a.y);
            Point::new(a.x + t * (b.x - a.x), y)
        }
    };

    let mut out: Vec<Point<T>> = ring.to_vec();
    for edge in [Edge::Left, Edge::Right, Edge::Bottom, Edge::Top] {
        if out.is_empty() {
            break;
        }
        let input = std::mem::take(&mut out);
        let mut prev = *input.last().unwrap();
        for &cur in &input {
            match (inside(cur, edge), inside(prev, edge)) {
                (true, true) => out.push(cur),
                (true, false) => {
                    out.push(cross(prev, cur, edge));
                    out.push(cur);
                }
                (false, true) => out.push(cross(prev, cur, edge)),
                (false, false) => {}
            }
            prev = cur;
        }
    }
    out
}
