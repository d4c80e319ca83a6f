//! Tile-based road maps with directed right-lane centerlines.
//!
//! A map is a rectangular grid of 0.6 m tiles described by a text sketch:
//!
//! ```text
//! .  floor (not drivable)        a  curve joining north & east edges
//! |  straight road north-south   b  curve joining north & west edges
//! -  straight road east-west     c  curve joining south & east edges
//! +  4-way intersection          d  curve joining south & west edges
//! n/e/s/w  3-way intersection missing that edge
//! ```
//!
//! Roads span their full tile. Traffic keeps right: each drivable tile
//! carries one directed centerline per legal (entry edge, exit edge) route,
//! offset 0.15 m from the road axis. Turns are quarter arcs centered on the
//! corner shared by the two edges: radius 0.15 m for right turns, 0.45 m for
//! left turns. The resulting lane endpoints coincide across tile boundaries,
//! which `from_grid` verifies.

use super::geom::{hypot2, sub, Nearest, Segment, Vec2};
use super::{Pose, LANE_HALF_WIDTH, LANE_OFFSET, TILE_SIZE};
use thiserror::Error;

/// Radius of right-turn (inner) lane arcs.
pub const INNER_TURN_RADIUS: f64 = LANE_OFFSET;
/// Radius of left-turn (outer) lane arcs.
pub const OUTER_TURN_RADIUS: f64 = 3.0 * LANE_OFFSET;

/// One edge of a tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    North,
    East,
    South,
    West,
}

pub const ALL_SIDES: [Side; 4] = [Side::North, Side::East, Side::South, Side::West];

impl Side {
    /// Outward unit vector through this edge.
    pub fn unit(self) -> Vec2 {
        match self {
            Side::North => [0.0, 1.0],
            Side::East => [1.0, 0.0],
            Side::South => [0.0, -1.0],
            Side::West => [-1.0, 0.0],
        }
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::North => Side::South,
            Side::East => Side::West,
            Side::South => Side::North,
            Side::West => Side::East,
        }
    }

    /// The side 90 degrees clockwise (to the right when traveling this way).
    pub fn right(self) -> Side {
        match self {
            Side::North => Side::East,
            Side::East => Side::South,
            Side::South => Side::West,
            Side::West => Side::North,
        }
    }

    pub fn left(self) -> Side {
        self.right().opposite()
    }
}

/// What occupies one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TileKind {
    /// Not drivable.
    Floor,
    StraightNS,
    StraightEW,
    /// Curve joining the north and east edges.
    CurveNE,
    /// Curve joining the north and west edges.
    CurveNW,
    /// Curve joining the south and east edges.
    CurveSE,
    /// Curve joining the south and west edges.
    CurveSW,
    /// 3-way intersection; `missing` names the unconnected edge.
    Intersection3 { missing: Side },
    /// 4-way intersection.
    Intersection4,
}

impl TileKind {
    pub fn from_code(code: char) -> Option<TileKind> {
        Some(match code {
            '.' => TileKind::Floor,
            '|' => TileKind::StraightNS,
            '-' => TileKind::StraightEW,
            'a' => TileKind::CurveNE,
            'b' => TileKind::CurveNW,
            'c' => TileKind::CurveSE,
            'd' => TileKind::CurveSW,
            '+' => TileKind::Intersection4,
            'n' => TileKind::Intersection3 { missing: Side::North },
            'e' => TileKind::Intersection3 { missing: Side::East },
            's' => TileKind::Intersection3 { missing: Side::South },
            'w' => TileKind::Intersection3 { missing: Side::West },
            _ => return None,
        })
    }

    pub fn is_drivable(self) -> bool {
        self != TileKind::Floor
    }

    pub fn is_intersection(self) -> bool {
        matches!(self, TileKind::Intersection3 { .. } | TileKind::Intersection4)
    }

    /// Edges this tile's road connects to (empty for floor).
    pub fn connected_sides(self) -> Vec<Side> {
        match self {
            TileKind::Floor => vec![],
            TileKind::StraightNS => vec![Side::North, Side::South],
            TileKind::StraightEW => vec![Side::East, Side::West],
            TileKind::CurveNE => vec![Side::North, Side::East],
            TileKind::CurveNW => vec![Side::North, Side::West],
            TileKind::CurveSE => vec![Side::East, Side::South],
            TileKind::CurveSW => vec![Side::South, Side::West],
            TileKind::Intersection3 { missing } => {
                ALL_SIDES.iter().copied().filter(|s| *s != missing).collect()
            }
            TileKind::Intersection4 => ALL_SIDES.to_vec(),
        }
    }
}

/// One directed lane route across a tile.
#[derive(Debug, Clone)]
pub struct LanePath {
    pub segment: Segment,
    /// Edge the route enters through.
    pub entry: Side,
    /// Edge the route exits through.
    pub exit: Side,
}

/// Lane-relative pose of the robot on its current tile.
#[derive(Debug, Clone, Copy)]
pub struct LanePose {
    /// Signed lateral offset from the lane centerline (m); positive = left.
    pub d: f64,
    /// Heading error relative to the lane tangent (rad), in (-pi, pi].
    pub phi: f64,
    /// Whether the robot center is within the lane (|d| <= 0.125 m).
    pub in_lane: bool,
    /// Travel direction of the lane at the nearest centerline point.
    pub tangent_dir: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("empty map grid")]
    Empty,
    #[error("ragged map grid: row {row} has {got} columns, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("unknown tile code '{code}' at ({row}, {col})")]
    UnknownCode { code: char, row: usize, col: usize },
    #[error("dangling road at ({row}, {col})")]
    DanglingRoad { row: usize, col: usize },
    #[error("mismatched lane connection at ({row}, {col}) toward ({to_row}, {to_col})")]
    MismatchedLanes { row: usize, col: usize, to_row: usize, to_col: usize },
}

/// Bundled map layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapPreset {
    /// A closed rectangular ring: 10 straights, 4 curves.
    Loop,
    /// A ring with a crossing through the middle: one 4-way and four 3-way
    /// intersections.
    Cross,
    /// An L-shaped circuit with turns of both hands; reserved for evaluation
    /// so trained policies never see its layout during data collection.
    Heldout,
}

impl MapPreset {
    pub fn grid(self) -> &'static str {
        match self {
            MapPreset::Loop => "c---d\n|...|\n|...|\na---b",
            MapPreset::Cross => "c-n-d\n|.|.|\nw-+-e\n|.|.|\na-s-b",
            MapPreset::Heldout => "c---d\n|...|\na-d.|\n..|.|\n..a-b",
        }
    }

    pub fn parse(name: &str) -> Option<MapPreset> {
        match name {
            "loop" => Some(MapPreset::Loop),
            "cross" => Some(MapPreset::Cross),
            "heldout" => Some(MapPreset::Heldout),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MapPreset::Loop => "loop",
            MapPreset::Cross => "cross",
            MapPreset::Heldout => "heldout",
        }
    }
}

/// A validated grid of tiles with precomputed lane geometry.
#[derive(Debug, Clone)]
pub struct TrackMap {
    rows: usize,
    cols: usize,
    tiles: Vec<TileKind>,
    paths: Vec<Vec<LanePath>>,
}

impl TrackMap {
    /// Build and validate a map from its text sketch.
    pub fn from_grid(text: &str) -> Result<TrackMap, MapError> {
        let lines: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        if lines.is_empty() {
            return Err(MapError::Empty);
        }
        let rows = lines.len();
        let cols = lines[0].chars().count();
        let mut tiles = Vec::with_capacity(rows * cols);
        for (r, line) in lines.iter().enumerate() {
            let row_tiles: Vec<char> = line.chars().collect();
            if row_tiles.len() != cols {
                return Err(MapError::Ragged { row: r, got: row_tiles.len(), expected: cols });
            }
            for (c, code) in row_tiles.into_iter().enumerate() {
                let kind = TileKind::from_code(code)
                    .ok_or(MapError::UnknownCode { code, row: r, col: c })?;
                tiles.push(kind);
            }
        }

        let mut map = TrackMap { rows, cols, tiles, paths: Vec::new() };
        map.paths = (0..rows * cols)
            .map(|i| build_tile_paths(map.tiles[i], map.tile_center(i / cols, i % cols)))
            .collect();
        map.validate_connections()?;
        Ok(map)
    }

    /// Build one of the bundled presets (their sketches always validate).
    pub fn preset(p: MapPreset) -> TrackMap {
        TrackMap::from_grid(p.grid()).expect("bundled preset grids are valid")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn tile(&self, row: usize, col: usize) -> TileKind {
        self.tiles[row * self.cols + col]
    }

    /// Center of tile `(row, col)` in world coordinates. Row 0 is the top
    /// (largest y); x grows with the column index.
    pub fn tile_center(&self, row: usize, col: usize) -> Vec2 {
        [
            (col as f64 + 0.5) * TILE_SIZE,
            (self.rows as f64 - row as f64 - 0.5) * TILE_SIZE,
        ]
    }

    /// Grid cell containing a world point, if inside the grid.
    pub fn tile_at_point(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let col = (x / TILE_SIZE).floor() as usize;
        let row_from_bottom = (y / TILE_SIZE).floor() as usize;
        if col >= self.cols || row_from_bottom >= self.rows {
            return None;
        }
        Some((self.rows - 1 - row_from_bottom, col))
    }

    /// Whether the world point lies over a drivable tile.
    pub fn is_drivable_at(&self, x: f64, y: f64) -> bool {
        self.tile_at_point(x, y)
            .map(|(r, c)| self.tile(r, c).is_drivable())
            .unwrap_or(false)
    }

    /// Directed lane routes across tile `(row, col)`.
    pub fn tile_paths(&self, row: usize, col: usize) -> &[LanePath] {
        &self.paths[row * self.cols + col]
    }

    /// All directed lane routes, in deterministic scan order.
    pub fn all_paths(&self) -> impl Iterator<Item = (usize, usize, &LanePath)> {
        (0..self.rows * self.cols).flat_map(move |i| {
            self.paths[i].iter().map(move |p| (i / self.cols, i % self.cols, p))
        })
    }

    /// Sum of all directed centerline lengths.
    pub fn total_centerline_length(&self) -> f64 {
        self.all_paths().map(|(_, _, p)| p.segment.length()).sum()
    }

    /// Lane-relative pose on the tile under the robot, or `None` off-road.
    ///
    /// Among the tile's directed routes the query picks the one minimizing
    /// |phi|; near-ties (within 1e-6 rad, e.g. parallel routes through an
    /// intersection) are broken by smaller |d|.
    pub fn lane_pose(&self, pose: Pose) -> Option<LanePose> {
        let (row, col) = self.tile_at_point(pose.x, pose.y)?;
        let paths = self.tile_paths(row, col);
        if paths.is_empty() {
            return None;
        }
        let candidates: Vec<(f64, Nearest)> = paths
            .iter()
            .map(|p| {
                let n = p.segment.nearest([pose.x, pose.y]);
                (Pose::wrap_angle(pose.theta - n.tangent_dir), n)
            })
            .collect();
        let min_abs_phi = candidates
            .iter()
            .map(|(phi, _)| phi.abs())
            .fold(f64::INFINITY, f64::min);
        let (phi, nearest) = candidates
            .into_iter()
            .filter(|(phi, _)| phi.abs() <= min_abs_phi + 1e-6)
            .min_by(|a, b| a.1.d.abs().partial_cmp(&b.1.d.abs()).unwrap())
            .expect("at least one candidate");
        Some(LanePose {
            d: nearest.d,
            phi,
            in_lane: nearest.d.abs() <= LANE_HALF_WIDTH,
            tangent_dir: nearest.tangent_dir,
        })
    }

    /// Deterministic start pose: the midpoint of the first route of the
    /// first straight tile in scan order (first drivable tile if the map has
    /// no straights).
    pub fn default_spawn(&self) -> Pose {
        let idx = (0..self.tiles.len())
            .find(|&i| matches!(self.tiles[i], TileKind::StraightNS | TileKind::StraightEW))
            .or_else(|| (0..self.tiles.len()).find(|&i| !self.paths[i].is_empty()))
            .expect("map has at least one drivable tile");
        let path = &self.paths[idx][0];
        let mid = path.segment.length() / 2.0;
        let p = path.segment.point_at(mid);
        Pose::new(p[0], p[1], path.segment.tangent_at(mid))
    }

    /// Pose at normalized position `u` in `[0, 1)` along the concatenated
    /// centerline network (length-weighted over all directed routes).
    pub fn spawn_at(&self, u: f64) -> Pose {
        let total = self.total_centerline_length();
        let mut target = u.clamp(0.0, 1.0 - 1e-12) * total;
        for (_, _, path) in self.all_paths() {
            let len = path.segment.length();
            if target < len {
                let p = path.segment.point_at(target);
                return Pose::new(p[0], p[1], path.segment.tangent_at(target));
            }
            target -= len;
        }
        self.default_spawn()
    }

    fn neighbor(&self, row: usize, col: usize, side: Side) -> Option<(usize, usize)> {
        let (dr, dc): (isize, isize) = match side {
            Side::North => (-1, 0),
            Side::South => (1, 0),
            Side::East => (0, 1),
            Side::West => (0, -1),
        };
        let nr = row as isize + dr;
        let nc = col as isize + dc;
        if nr < 0 || nc < 0 || nr as usize >= self.rows || nc as usize >= self.cols {
            None
        } else {
            Some((nr as usize, nc as usize))
        }
    }

    fn validate_connections(&self) -> Result<(), MapError> {
        for row in 0..self.rows {
            for col in 0..self.cols {
                for path in self.tile_paths(row, col) {
                    let (nr, nc) = self
                        .neighbor(row, col, path.exit)
                        .ok_or(MapError::DanglingRoad { row, col })?;
                    if !self.tile(nr, nc).is_drivable() {
                        return Err(MapError::DanglingRoad { row, col });
                    }
                    let end = path.segment.point_at(path.segment.length());
                    let matched = self.tile_paths(nr, nc).iter().any(|np| {
                        np.entry == path.exit.opposite()
                            && hypot2(sub(np.segment.point_at(0.0), end)) < 1e-9
                    });
                    if !matched {
                        return Err(MapError::MismatchedLanes {
                            row,
                            col,
                            to_row: nr,
                            to_col: nc,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Midpoint of a tile edge.
fn edge_mid(center: Vec2, side: Side) -> Vec2 {
    let u = side.unit();
    [center[0] + 0.5 * TILE_SIZE * u[0], center[1] + 0.5 * TILE_SIZE * u[1]]
}

/// Corner shared by two adjacent edges of the tile.
fn shared_corner(center: Vec2, a: Side, b: Side) -> Vec2 {
    let ua = a.unit();
    let ub = b.unit();
    [
        center[0] + 0.5 * TILE_SIZE * (ua[0] + ub[0]),
        center[1] + 0.5 * TILE_SIZE * (ua[1] + ub[1]),
    ]
}

/// Right-lane entry point when crossing into the tile through `entry`.
fn entry_point(center: Vec2, entry: Side) -> Vec2 {
    let m = edge_mid(center, entry);
    // Traveling inward (direction opposite(entry)); keep right.
    let r = entry.opposite().right().unit();
    [m[0] + LANE_OFFSET * r[0], m[1] + LANE_OFFSET * r[1]]
}

/// Right-lane exit point when leaving the tile through `exit`.
fn exit_point(center: Vec2, exit: Side) -> Vec2 {
    let m = edge_mid(center, exit);
    let r = exit.right().unit();
    [m[0] + LANE_OFFSET * r[0], m[1] + LANE_OFFSET * r[1]]
}

/// Generate all directed right-lane routes across a tile.
fn build_tile_paths(kind: TileKind, center: Vec2) -> Vec<LanePath> {
    let sides = kind.connected_sides();
    let mut paths = Vec::new();
    for &entry in &ALL_SIDES {
        if !sides.contains(&entry) {
            continue;
        }
        for &exit in &ALL_SIDES {
            if exit == entry || !sides.contains(&exit) {
                continue;
            }
            let travel_in = entry.opposite();
            let e = entry_point(center, entry);
            let x = exit_point(center, exit);
            let segment = if exit == travel_in {
                Segment::Line { start: e, end: x }
            } else {
                let corner = shared_corner(center, entry, exit);
                let radius = if exit == travel_in.right() {
                    INNER_TURN_RADIUS
                } else {
                    OUTER_TURN_RADIUS
                };
                let sweep = if exit == travel_in.right() {
                    -std::f64::consts::FRAC_PI_2
                } else {
                    std::f64::consts::FRAC_PI_2
                };
                let rel = sub(e, corner);
                debug_assert!((hypot2(rel) - radius).abs() < 1e-9);
                Segment::Arc {
                    center: corner,
                    radius,
                    start_angle: rel[1].atan2(rel[0]),
                    sweep,
                }
            };
            paths.push(LanePath { segment, entry, exit });
        }
    }
    paths
}
