//! Simulator core: poses, tile maps, lane queries, and drive kinematics.
//!
//! World coordinates are meters in a right-handed frame: x east, y north,
//! headings in radians counterclockwise from +x. The robot is a two-wheel
//! differential drive whose wheel commands are normalized to `[-1, 1]`;
//! full throttle on both wheels drives straight at 0.6 m/s.

mod geom;
mod map;

pub use geom::{Nearest, Segment, Vec2};
pub use map::{
    LanePath, LanePose, MapError, MapPreset, Side, TileKind, TrackMap, ALL_SIDES,
    INNER_TURN_RADIUS, OUTER_TURN_RADIUS,
};

/// Tile edge length (m).
pub const TILE_SIZE: f64 = 0.6;
/// Wheel radius (m).
pub const WHEEL_RADIUS: f64 = 0.0318;
/// Distance between the two wheels (m).
pub const WHEEL_BASELINE: f64 = 0.102;
/// Forward speed at full throttle on both wheels (m/s).
pub const MAX_FORWARD_SPEED: f64 = 0.6;
/// Wheel angular speed at a command of 1.0 (rad/s).
pub const MAX_WHEEL_OMEGA: f64 = MAX_FORWARD_SPEED / WHEEL_RADIUS;
/// Simulation (and camera) step period (s).
pub const SIM_DT: f64 = 1.0 / 15.0;
/// Lateral offset of each lane centerline from the road axis (m).
pub const LANE_OFFSET: f64 = 0.15;
/// Half-width of one lane (m); |d| beyond this counts as out of lane.
pub const LANE_HALF_WIDTH: f64 = 0.125;

/// Planar pose. `theta` is kept wrapped to `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Pose {
        Pose { x, y, theta: Pose::wrap_angle(theta) }
    }

    /// Wrap an angle into `(-pi, pi]`.
    pub fn wrap_angle(a: f64) -> f64 {
        use std::f64::consts::{PI, TAU};
        let mut r = a % TAU;
        if r <= -PI {
            r += TAU;
        } else if r > PI {
            r -= TAU;
        }
        r
    }
}

/// Normalized wheel velocity commands, clamped to `[-1, 1]` on construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub v_left: f64,
    pub v_right: f64,
}

impl Action {
    pub fn new(v_left: f64, v_right: f64) -> Action {
        Action { v_left: v_left.clamp(-1.0, 1.0), v_right: v_right.clamp(-1.0, 1.0) }
    }
}

/// Robot state carried through a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    pub pose: Pose,
    /// Simulated time since the rollout started (s).
    pub t: f64,
    /// Accumulated |forward speed| * dt (m); never decreases.
    pub path_length: f64,
}

impl RobotState {
    pub fn at(pose: Pose) -> RobotState {
        RobotState { pose, t: 0.0, path_length: 0.0 }
    }
}

/// Advance the differential-drive kinematics by `dt` seconds.
///
/// The body twist is constant over the step (wheel commands are held), so the
/// pose moves along an exact circular arc: with forward speed `v` and yaw
/// rate `omega`, heading advances by `omega * dt` and position by the chord
/// of the arc. Straight motion (|omega| below 1e-9 rad/s) integrates the
/// degenerate line case.
pub fn step_dynamics(state: RobotState, action: Action, dt: f64) -> RobotState {
    let wl = action.v_left * MAX_WHEEL_OMEGA;
    let wr = action.v_right * MAX_WHEEL_OMEGA;
    let v = WHEEL_RADIUS * (wr + wl) / 2.0;
    let omega = WHEEL_RADIUS * (wr - wl) / WHEEL_BASELINE;

    let Pose { x, y, theta } = state.pose;
    let pose = if omega.abs() < 1e-9 {
        Pose::new(x + v * theta.cos() * dt, y + v * theta.sin() * dt, theta)
    } else {
        let theta1 = theta + omega * dt;
        Pose::new(
            x + v / omega * (theta1.sin() - theta.sin()),
            y - v / omega * (theta1.cos() - theta.cos()),
            theta1,
        )
    };
    RobotState { pose, t: state.t + dt, path_length: state.path_length + v.abs() * dt }
}

/// Whether the robot center is off the drivable road (over floor or outside
/// the grid).
pub fn is_infraction(map: &TrackMap, pose: Pose) -> bool {
    !map.is_drivable_at(pose.x, pose.y)
}

/// Distance driven in tile-lengths.
pub fn tiles_driven(state: &RobotState) -> f64 {
    state.path_length / TILE_SIZE
}
