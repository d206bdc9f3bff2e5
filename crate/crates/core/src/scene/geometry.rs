use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{normalize_angle, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Vec2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero())
    }

    pub fn from_angle(a: T) -> Self {
        Self::new(a.cos(), a.sin())
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product; positive when `o` is to the left.
    pub fn cross(self, o: Self) -> T {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> T {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> T {
        self.dot(self)
    }

    /// Counter-clockwise quarter turn.
    pub fn perp(self) -> Self {
        Self::new(-self.y, self.x)
    }

    pub fn angle(self) -> T {
        self.y.atan2(self.x)
    }

    pub fn dist(self, o: Self) -> T {
        (self - o).norm()
    }
}

impl<T: Scalar> Add for Vec2<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl<T: Scalar> Sub for Vec2<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl<T: Scalar> Mul<T> for Vec2<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s)
    }
}

impl<T: Scalar> Neg for Vec2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

/// Planar pose. The heading is kept in `(-π, π]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose2<T> {
    pub x: T,
    pub y: T,
    pub heading: T,
}

impl<T: Scalar> Pose2<T> {
    pub fn new(x: T, y: T, heading: T) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn identity() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn position(&self) -> Vec2<T> {
        Vec2::new(self.x, self.y)
    }

    pub fn forward(&self) -> Vec2<T> {
        Vec2::from_angle(self.heading)
    }

    pub fn left(&self) -> Vec2<T> {
        self.forward().perp()
    }

    /// Expresses a world point in this pose's frame (x forward, y left).
    pub fn to_local(&self, p: Vec2<T>) -> Vec2<T> {
        let d = p - self.position();
        let (s, c) = self.heading.sin_cos();
        Vec2::new(c * d.x + s * d.y, -s * d.x + c * d.y)
    }

    /// Maps a point given in this pose's frame to world coordinates.
    pub fn to_world(&self, p: Vec2<T>) -> Vec2<T> {
        let (s, c) = self.heading.sin_cos();
        Vec2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    /// Applies a rigid transform (rotation about the origin, then translation).
    pub fn transformed(&self, rotation: T, translation: Vec2<T>) -> Self {
        let (s, c) = rotation.sin_cos();
        Self::new(
            c * self.x - s * self.y + translation.x,
            s * self.x + c * self.y + translation.y,
            self.heading + rotation,
        )
    }
}

/// Box footprint, both sides strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", try_from = "RawDims<T>")]
pub struct BoxDims<T: Scalar> {
    pub length: T,
    pub width: T,
}

#[derive(Deserialize)]
struct RawDims<T> {
    length: T,
    width: T,
}

impl<T: Scalar> TryFrom<RawDims<T>> for BoxDims<T> {
    type Error = Error;
    fn try_from(r: RawDims<T>) -> Result<Self> {
        Self::new(r.length, r.width)
    }
}

impl<T: Scalar> BoxDims<T> {
    pub fn new(length: T, width: T) -> Result<Self> {
        if !(length > T::zero() && width > T::zero()) || !length.is_finite() || !width.is_finite() {
            return Err(Error::Geometry(format!(
                "box dims must be positive, got {length} x {width}"
            )));
        }
        Ok(Self { length, width })
    }
}

/// Open polyline with cached cumulative arclength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
#[serde(try_from = "Vec<Vec2<T>>", into = "Vec<Vec2<T>>")]
pub struct Polyline<T: Scalar> {
    vertices: Vec<Vec2<T>>,
    cumulative: Vec<T>,
}

impl<T: Scalar> TryFrom<Vec<Vec2<T>>> for Polyline<T> {
    type Error = Error;
    fn try_from(v: Vec<Vec2<T>>) -> Result<Self> {
        Self::new(v)
    }
}

impl<T: Scalar> From<Polyline<T>> for Vec<Vec2<T>> {
    fn from(p: Polyline<T>) -> Self {
        p.vertices
    }
}

impl<T: Scalar> Polyline<T> {
    pub fn new(vertices: Vec<Vec2<T>>) -> Result<Self> {
        if vertices.len() < 2 {
            return Err(Error::Geometry("polyline needs at least 2 vertices".into()));
        }
        let mut cumulative = Vec::with_capacity(vertices.len());
        cumulative.push(T::zero());
        for w in vertices.windows(2) {
            let len = w[0].dist(w[1]);
            if !(len > T::zero()) {
                return Err(Error::Geometry(
                    "polyline has repeated consecutive vertices".into(),
                ));
            }
            let last = *cumulative.last().unwrap();
            cumulative.push(last + len);
        }
        Ok(Self {
            vertices,
            cumulative,
        })
    }

    pub fn vertices(&self) -> &[Vec2<T>] {
        &self.vertices
    }

    pub fn cumulative_arclength(&self) -> &[T] {
        &self.cumulative
    }

    pub fn length(&self) -> T {
        *self.cumulative.last().unwrap()
    }

    /// Point and unit tangent at arclength `s` (clamped to the line).
    pub fn sample(&self, s: T) -> (Vec2<T>, Vec2<T>) {
        let s = s.max(T::zero()).min(self.length());
        let i = match self
            .cumulative
            .iter()
            .position(|&c| c > s)
        {
            Some(0) => 0,
            Some(i) => i - 1,
            None => self.vertices.len() - 2,
        };
        let a = self.vertices[i];
        let b = self.vertices[i + 1];
        let seg = b - a;
        let len = seg.norm();
        let dir = seg * (T::one() / len);
        (a + dir * (s - self.cumulative[i]), dir)
    }

    /// Reconstructs a point from centerline coordinates.
    pub fn point_at(&self, s: T, d: T) -> Vec2<T> {
        let (p, dir) = self.sample(s);
        p + dir.perp() * d
    }

    /// Projects `p` onto the nearest point of the polyline, returning the
    /// arclength `s` and signed lateral offset `d` (left of travel positive).
    /// Ties go to the smaller arclength.
    pub fn project(&self, p: Vec2<T>) -> (T, T) {
        let mut best_dist = T::infinity();
        let mut best = (T::zero(), T::zero());
        for (i, w) in self.vertices.windows(2).enumerate() {
            let seg = w[1] - w[0];
            let len_sq = seg.norm_sq();
            let t = ((p - w[0]).dot(seg) / len_sq).max(T::zero()).min(T::one());
            let foot = w[0] + seg * t;
            let dist = p.dist(foot);
            if dist < best_dist {
                best_dist = dist;
                let side = seg.cross(p - foot);
                let d = if side < T::zero() { -dist } else { dist };
                best = (self.cumulative[i] + seg.norm() * t, d);
            }
        }
        best
    }
}

/// Simple polygon with a counter-clockwise outer ring and clockwise holes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
#[serde(try_from = "RawPolygon<T>", into = "RawPolygon<T>")]
pub struct Polygon<T: Scalar> {
    outer: Vec<Vec2<T>>,
    holes: Vec<Vec<Vec2<T>>>,
}

#[derive(Clone, Serialize, Deserialize)]
struct RawPolygon<T> {
    outer: Vec<Vec2<T>>,
    #[serde(default)]
    holes: Vec<Vec<Vec2<T>>>,
}

impl<T: Scalar> TryFrom<RawPolygon<T>> for Polygon<T> {
    type Error = Error;
    fn try_from(r: RawPolygon<T>) -> Result<Self> {
        Self::with_holes(r.outer, r.holes)
    }
}

impl<T: Scalar> From<Polygon<T>> for RawPolygon<T> {
    fn from(p: Polygon<T>) -> Self {
        Self {
            outer: p.outer,
            holes: p.holes,
        }
    }
}

pub fn signed_area<T: Scalar>(ring: &[Vec2<T>]) -> T {
    let n = ring.len();
    let mut acc = T::zero();
    for i in 0..n {
        acc += ring[i].cross(ring[(i + 1) % n]);
    }
    acc * T::lit(0.5)
}

fn segments_cross<T: Scalar>(a: Vec2<T>, b: Vec2<T>, c: Vec2<T>, d: Vec2<T>) -> bool {
    let orient = |p: Vec2<T>, q: Vec2<T>, r: Vec2<T>| (q - p).cross(r - p);
    let on_seg = |p: Vec2<T>, q: Vec2<T>, r: Vec2<T>| {
        r.x >= p.x.min(q.x) && r.x <= p.x.max(q.x) && r.y >= p.y.min(q.y) && r.y <= p.y.max(q.y)
    };
    // Disjoint boxes first: nearly collinear, far-apart edges would otherwise
    // get rounding-noise orientations.
    if a.x.max(b.x) < c.x.min(d.x)
        || c.x.max(d.x) < a.x.min(b.x)
        || a.y.max(b.y) < c.y.min(d.y)
        || c.y.max(d.y) < a.y.min(b.y)
    {
        return false;
    }
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    let z = T::zero();
    if ((d1 > z && d2 < z) || (d1 < z && d2 > z)) && ((d3 > z && d4 < z) || (d3 < z && d4 > z)) {
        return true;
    }
    (d1 == z && on_seg(c, d, a))
        || (d2 == z && on_seg(c, d, b))
        || (d3 == z && on_seg(a, b, c))
        || (d4 == z && on_seg(a, b, d))
}

fn is_simple<T: Scalar>(ring: &[Vec2<T>]) -> bool {
    let n = ring.len();
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        if a == b {
            return false;
        }
        for j in (i + 1)..n {
            // adjacent edges share a vertex by construction
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (c, d) = (ring[j], ring[(j + 1) % n]);
            if segments_cross(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

fn validate_ring<T: Scalar>(ring: &[Vec2<T>], what: &str, ccw: bool) -> Result<()> {
    if ring.len() < 3 {
        return Err(Error::Geometry(format!("{what} needs at least 3 vertices")));
    }
    if ring.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::Geometry(format!("{what} has non-finite vertices")));
    }
    let area = signed_area(ring);
    if ccw && !(area > T::zero()) {
        return Err(Error::Geometry(format!("{what} must be counter-clockwise")));
    }
    if !ccw && !(area < T::zero()) {
        return Err(Error::Geometry(format!("{what} must be clockwise")));
    }
    if !is_simple(ring) {
        return Err(Error::Geometry(format!("{what} is self-intersecting")));
    }
    Ok(())
}

/// Winding number of the closed ring around `p`.
fn winding_number<T: Scalar>(ring: &[Vec2<T>], p: Vec2<T>) -> i32 {
    let n = ring.len();
    let mut wn = 0;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        let side = (b - a).cross(p - a);
        if a.y <= p.y {
            if b.y > p.y && side > T::zero() {
                wn += 1;
            }
        } else if b.y <= p.y && side < T::zero() {
            wn -= 1;
        }
    }
    wn
}

impl<T: Scalar> Polygon<T> {
    pub fn new(outer: Vec<Vec2<T>>) -> Result<Self> {
        Self::with_holes(outer, Vec::new())
    }

    pub fn with_holes(outer: Vec<Vec2<T>>, holes: Vec<Vec<Vec2<T>>>) -> Result<Self> {
        validate_ring(&outer, "outer ring", true)?;
        for h in &holes {
            validate_ring(h, "hole", false)?;
        }
        Ok(Self { outer, holes })
    }

    pub fn outer(&self) -> &[Vec2<T>] {
        &self.outer
    }

    pub fn holes(&self) -> &[Vec<Vec2<T>>] {
        &self.holes
    }

    pub fn contains(&self, p: Vec2<T>) -> bool {
        winding_number(&self.outer, p) != 0
            && self.holes.iter().all(|h| winding_number(h, p) == 0)
    }

    /// Every edge of every ring as `(start, end)`.
    pub fn edges(&self) -> impl Iterator<Item = (Vec2<T>, Vec2<T>)> + '_ {
        std::iter::once(&self.outer)
            .chain(self.holes.iter())
            .flat_map(|r| (0..r.len()).map(move |i| (r[i], r[(i + 1) % r.len()])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64, y: f64) -> Vec2<f64> {
        Vec2::new(x, y)
    }

    #[test]
    fn polyline_rejects_degenerate() {
        assert!(Polyline::new(vec![v(0., 0.)]).is_err());
        assert!(Polyline::new(vec![v(0., 0.), v(0., 0.)]).is_err());
        let p = Polyline::new(vec![v(0., 0.), v(3., 4.), v(3., 10.)]).unwrap();
        assert_eq!(p.cumulative_arclength(), &[0.0, 5.0, 11.0]);
    }

    #[test]
    fn projection_examples() {
        let line = Polyline::new(vec![v(0., 0.), v(10., 0.)]).unwrap();
        assert_eq!(line.project(v(5., 0.)), (5.0, 0.0));
        assert_eq!(line.project(v(1., 2.)), (1.0, 2.0));
        assert_eq!(line.project(v(1., -2.)), (1.0, -2.0));
        // clamped past the end
        assert_eq!(line.project(v(12., 0.)).0, 10.0);
    }

    #[test]
    fn projection_tie_prefers_smaller_arclength() {
        // U-shaped line: the point (5, 5) is equidistant from both legs.
        let line = Polyline::new(vec![v(0., 0.), v(10., 0.), v(10., 10.), v(0., 10.)]).unwrap();
        let (s, _) = line.project(v(5., 5.));
        assert_eq!(s, 5.0);
    }

    #[test]
    fn polygon_validation() {
        let sq = vec![v(0., 0.), v(1., 0.), v(1., 1.), v(0., 1.)];
        assert!(Polygon::new(sq.clone()).is_ok());
        let mut cw = sq.clone();
        cw.reverse();
        assert!(Polygon::new(cw).is_err());
        let bowtie = vec![v(0., 0.), v(1., 1.), v(1., 0.), v(0., 1.)];
        assert!(Polygon::new(bowtie).is_err());
        assert!(Polygon::new(vec![v(0., 0.), v(1., 0.)]).is_err());
    }

    #[test]
    fn polygon_with_hole_containment() {
        let outer = vec![v(0., 0.), v(10., 0.), v(10., 10.), v(0., 10.)];
        let hole = vec![v(4., 4.), v(4., 6.), v(6., 6.), v(6., 4.)];
        let poly = Polygon::with_holes(outer, vec![hole]).unwrap();
        assert!(poly.contains(v(1., 1.)));
        assert!(!poly.contains(v(5., 5.)));
        assert!(!poly.contains(v(11., 5.)));
    }

    #[test]
    fn pose_frames_round_trip() {
        let p = Pose2::new(1.0, -2.0, 0.7);
        let w = v(3.5, 4.25);
        let back = p.to_world(p.to_local(w));
        assert!((back - w).norm() < 1e-12);
    }
}
