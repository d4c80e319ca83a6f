//! Directed centerline geometry: straight segments and quarter-turn arcs.

use std::f64::consts::FRAC_PI_2;

/// A 2-D point or vector in world coordinates (meters).
pub type Vec2 = [f64; 2];

#[inline]
pub(crate) fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub(crate) fn hypot2(v: Vec2) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

/// Geometry of one directed lane segment.
///
/// Arcs store a starting angle (position angle of the entry point around
/// `center`) and a signed sweep: positive sweeps run counterclockwise.
#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Line { start: Vec2, end: Vec2 },
    Arc { center: Vec2, radius: f64, start_angle: f64, sweep: f64 },
}

/// Result of a nearest-point query against a segment.
#[derive(Debug, Clone, Copy)]
pub struct Nearest {
    /// Arc length from the segment start to the nearest point.
    pub s: f64,
    /// The nearest point itself.
    pub point: Vec2,
    /// Travel direction (radians, CCW from +x) at the nearest point.
    pub tangent_dir: f64,
    /// Signed lateral offset of the query point: positive = left of travel.
    pub d: f64,
}

impl Segment {
    pub fn length(&self) -> f64 {
        match self {
            Segment::Line { start, end } => hypot2(sub(*end, *start)),
            Segment::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Point at arc length `s` from the start (clamped to the segment).
    pub fn point_at(&self, s: f64) -> Vec2 {
        let s = s.clamp(0.0, self.length());
        match self {
            Segment::Line { start, end } => {
                let len = self.length();
                let t = if len > 0.0 { s / len } else { 0.0 };
                [
                    start[0] + t * (end[0] - start[0]),
                    start[1] + t * (end[1] - start[1]),
                ]
            }
            Segment::Arc { center, radius, start_angle, sweep } => {
                let a = start_angle + sweep.signum() * s / radius;
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            }
        }
    }

    /// Travel direction at arc length `s` from the start.
    pub fn tangent_at(&self, s: f64) -> f64 {
        match self {
            Segment::Line { start, end } => {
                let d = sub(*end, *start);
                d[1].atan2(d[0])
            }
            Segment::Arc { radius, start_angle, sweep, .. } => {
                let a = start_angle + sweep.signum() * s / radius;
                // CCW travel: tangent leads the position angle by 90 degrees.
                a + sweep.signum() * FRAC_PI_2
            }
        }
    }

    /// Nearest point on the segment to `p`, with signed lateral offset.
    pub fn nearest(&self, p: Vec2) -> Nearest {
        match self {
            Segment::Line { start, end } => {
                let d = sub(*end, *start);
                let len = hypot2(d);
                let t = if len > 0.0 {
                    ((p[0] - start[0]) * d[0] + (p[1] - start[1]) * d[1]) / (len * len)
                } else {
                    0.0
                };
                let s = (t.clamp(0.0, 1.0)) * len;
                self.at_arclen(s, p)
            }
            Segment::Arc { center, radius, start_angle, sweep } => {
                let rel = sub(p, *center);
                if hypot2(rel) < 1e-12 {
                    // Query at the arc center: every arc point is equidistant;
                    // pick the start deterministically.
                    return self.at_arclen(0.0, p);
                }
                let beta = rel[1].atan2(rel[0]);
                // Angle advanced from start_angle, measured along the sweep
                // direction, normalized into [0, 2*pi).
                let delta = {
                    let raw = sweep.signum() * (beta - start_angle);
                    raw.rem_euclid(std::f64::consts::TAU)
                };
                let s = if delta <= sweep.abs() {
                    delta * radius
                } else {
                    // Outside the angular sector: the nearest arc point is an
                    // endpoint; compare Euclidean distances.
                    let d0 = hypot2(sub(p, self.point_at(0.0)));
                    let d1 = hypot2(sub(p, self.point_at(self.length())));
                    if d0 <= d1 {
                        0.0
                    } else {
                        self.length()
                    }
                };
                self.at_arclen(s, p)
            }
        }
    }

    fn at_arclen(&self, s: f64, p: Vec2) -> Nearest {
        let point = self.point_at(s);
        let tangent_dir = self.tangent_at(s);
        let dx = p[0] - point[0];
        let dy = p[1] - point[1];
        // Signed offset: z-component of tangent x displacement
        // (positive when p lies to the left of the travel direction).
        let d = tangent_dir.cos() * dy - tangent_dir.sin() * dx;
        Nearest { s, point, tangent_dir, d }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn line_length_and_endpoints() {
        let seg = Segment::Line { start: [1.0, 2.0], end: [4.0, 6.0] };
        assert_abs_diff_eq!(seg.length(), 5.0, epsilon = 1e-12);
        assert_eq!(seg.point_at(0.0), [1.0, 2.0]);
        assert_eq!(seg.point_at(5.0), [4.0, 6.0]);
    }

    #[test]
    fn arc_quarter_turn_endpoints() {
        // CCW quarter arc from angle 0 to pi/2, radius 2, centered at origin.
        let seg = Segment::Arc { center: [0.0, 0.0], radius: 2.0, start_angle: 0.0, sweep: FRAC_PI_2 };
        assert_abs_diff_eq!(seg.length(), PI, epsilon = 1e-12);
        let p0 = seg.point_at(0.0);
        let p1 = seg.point_at(seg.length());
        assert_abs_diff_eq!(p0[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p0[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p1[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p1[1], 2.0, epsilon = 1e-12);
        // Tangent at the start of a CCW arc at angle 0 points straight up.
        assert_abs_diff_eq!(seg.tangent_at(0.0), FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn nearest_on_line_projects_and_clamps() {
        let seg = Segment::Line { start: [0.0, 0.0], end: [10.0, 0.0] };
        let n = seg.nearest([3.0, 2.0]);
        assert_abs_diff_eq!(n.s, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(n.d, 2.0, epsilon = 1e-12); // left of +x travel
        let n = seg.nearest([-5.0, -1.0]);
        assert_abs_diff_eq!(n.s, 0.0, epsilon = 1e-12);
        let n = seg.nearest([15.0, 0.0]);
        assert_abs_diff_eq!(n.s, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn nearest_on_arc_signed_offset() {
        // CCW arc; a point radially outside the arc is right of travel (d < 0).
        let seg = Segment::Arc { center: [0.0, 0.0], radius: 1.0, start_angle: 0.0, sweep: FRAC_PI_2 };
        let n = seg.nearest([1.5 * (0.25f64).cos(), 1.5 * (0.25f64).sin()]);
        assert_abs_diff_eq!(n.d, -0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(n.s, 0.25, epsilon = 1e-9);
        // A point radially inside is left of travel (d > 0).
        let n = seg.nearest([0.5, 0.0]);
        assert_abs_diff_eq!(n.d, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn nearest_on_cw_arc_flips_sign() {
        // CW quarter arc from pi/2 down to 0 (travel starts heading +x).
        let seg = Segment::Arc { center: [0.0, 0.0], radius: 1.0, start_angle: FRAC_PI_2, sweep: -FRAC_PI_2 };
        assert_abs_diff_eq!(seg.tangent_at(0.0), 0.0, epsilon = 1e-12);
        // Radially outside a CW arc = left of travel.
        let n = seg.nearest([0.0, 2.0]);
        assert_abs_diff_eq!(n.s, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(n.d, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn nearest_outside_sector_picks_euclidean_closer_endpoint() {
        let seg = Segment::Arc { center: [0.0, 0.0], radius: 1.0, start_angle: 0.0, sweep: FRAC_PI_2 };
        // Just past the far end of the sweep.
        let n = seg.nearest([-0.3, 1.2]);
        assert_abs_diff_eq!(n.s, seg.length(), epsilon = 1e-12);
        // Just "before" the start (negative angle side).
        let n = seg.nearest([1.2, -0.3]);
        assert_abs_diff_eq!(n.s, 0.0, epsilon = 1e-12);
    }
}
