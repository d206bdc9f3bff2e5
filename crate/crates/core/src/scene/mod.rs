//! Geometry, map representation, and the collision/containment predicates
//! every reward and simulation step is built on.

mod collision;
mod geometry;
mod map;

pub use collision::{
    box_in_drivable, boxes_intersect, oriented_box_corners, time_to_collision, MovingBox,
};
pub use geometry::{signed_area, BoxDims, Polygon, Polyline, Pose2, Vec2};
pub use map::{AgentTrack, Category, SceneMap, Scenario, StaticObstacle};

/// Arclength and signed lateral offset (left positive) of `p` on `line`.
pub fn project_to_centerline<T: crate::Scalar>(p: Vec2<T>, line: &Polyline<T>) -> (T, T) {
    line.project(p)
}
