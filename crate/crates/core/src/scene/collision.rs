//! Oriented-box predicates and time-to-collision.

use super::geometry::{BoxDims, Pose2, Vec2};
use super::map::SceneMap;
use crate::scalar::Scalar;

/// World-frame corners ordered front-left, front-right, rear-right, rear-left.
pub fn oriented_box_corners<T: Scalar>(pose: &Pose2<T>, dims: &BoxDims<T>) -> [Vec2<T>; 4] {
    let half = T::lit(0.5);
    let f = pose.forward() * (dims.length * half);
    let l = pose.left() * (dims.width * half);
    let c = pose.position();
    [c + f + l, c + f - l, c - f - l, c - f + l]
}

fn project_interval<T: Scalar>(corners: &[Vec2<T>; 4], axis: Vec2<T>) -> (T, T) {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for c in corners {
        let p = c.dot(axis);
        lo = lo.min(p);
        hi = hi.max(p);
    }
    (lo, hi)
}

/// Separating-axis test on two oriented rectangles. Touching counts as overlap.
pub fn boxes_intersect<T: Scalar>(a: (&Pose2<T>, &BoxDims<T>), b: (&Pose2<T>, &BoxDims<T>)) -> bool {
    let ca = oriented_box_corners(a.0, a.1);
    let cb = oriented_box_corners(b.0, b.1);
    let axes = [a.0.forward(), a.0.left(), b.0.forward(), b.0.left()];
    axes.iter().all(|&axis| {
        let (amin, amax) = project_interval(&ca, axis);
        let (bmin, bmax) = project_interval(&cb, axis);
        amax >= bmin && bmax >= amin
    })
}

/// True when all four corners lie inside the drivable polygon. Edges
/// crossing a concave notch between corners are not detected.
pub fn box_in_drivable<T: Scalar>(pose: &Pose2<T>, dims: &BoxDims<T>, map: &SceneMap<T>) -> bool {
    oriented_box_corners(pose, dims)
        .iter()
        .all(|&c| map.drivable.contains(c))
}

/// A box moving at constant velocity (heading held fixed).
#[derive(Clone, Copy, Debug)]
pub struct MovingBox<T: Scalar> {
    pub pose: Pose2<T>,
    pub dims: BoxDims<T>,
    pub velocity: Vec2<T>,
}

impl<T: Scalar> MovingBox<T> {
    fn at(&self, t: T) -> Pose2<T> {
        Pose2 {
            x: self.pose.x + self.velocity.x * t,
            y: self.pose.y + self.velocity.y * t,
            heading: self.pose.heading,
        }
    }
}

/// Smallest `k * dt_sub <= t_max` at which constant-velocity propagation
/// makes `ego` overlap any of `others`, or `+inf`.
pub fn time_to_collision<T: Scalar>(
    ego: &MovingBox<T>,
    others: &[MovingBox<T>],
    t_max: T,
    dt_sub: T,
) -> T {
    if others.is_empty() {
        return T::infinity();
    }
    let steps = (t_max / dt_sub + T::lit(1e-9)).floor().to_usize().unwrap_or(0);
    for k in 0..=steps {
        let t = T::lit(k as f64) * dt_sub;
        let ego_pose = ego.at(t);
        if others
            .iter()
            .any(|o| boxes_intersect((&ego_pose, &ego.dims), (&o.at(t), &o.dims)))
        {
            return t;
        }
    }
    T::infinity()
}
