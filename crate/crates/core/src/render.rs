//! Camera-frame rendering of the road world under several visual domains.
//!
//! Every frame is produced by per-pixel ray casting: a pixel ray from a
//! pitched pinhole camera either hits the ground plane (z = 0) and samples
//! the road texture there, or points at/above the horizon and shows the
//! backdrop. Appearance is controlled by a [`DomainConfig`]: color palette,
//! lighting gain/bias, additive Gaussian noise, backdrop clutter, lane-dash
//! geometry, and optional per-episode camera-extrinsics jitter. Rendering is
//! bit-deterministic for fixed `(map, pose, camera, domain, frame_seed)`.

use crate::rng::{gaussian_pair_at, CounterRng};
use crate::simcore::{Pose, Side, TileKind, TrackMap, Vec2, TILE_SIZE};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI, TAU};

/// Rendered frame width in pixels.
pub const FRAME_WIDTH: usize = 640;
/// Rendered frame height in pixels.
pub const FRAME_HEIGHT: usize = 480;

/// Half-width of the yellow center divider (m).
const DIVIDER_HALF_WIDTH: f64 = 0.0125;
/// Width of the white edge lines at the outer road edges (m).
const EDGE_LINE_WIDTH: f64 = 0.05;
/// Radius of the divider arc on curve tiles (m) — the road axis.
const DIVIDER_RADIUS: f64 = TILE_SIZE / 2.0;

/// A row-major, channel-interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `width * height * 3` bytes, R then G then B per pixel.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> RgbImage {
        RgbImage { width, height, data: vec![0; width * height * 3] }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Pinhole camera with a downward pitch, mounted ahead of the drive axle.
///
/// The image plane uses square pixels with the principal point at the image
/// center; the focal length follows from the horizontal field of view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraModel {
    /// Horizontal field of view (radians).
    pub hfov: f64,
    /// Height of the optical center above the ground (m).
    pub mount_height: f64,
    /// Downward pitch of the optical axis (radians, positive looks down).
    pub pitch: f64,
    /// Forward offset of the camera from the robot center (m).
    pub forward_offset: f64,
}

impl Default for CameraModel {
    fn default() -> CameraModel {
        CameraModel {
            hfov: 100f64.to_radians(),
            mount_height: 0.108,
            pitch: 19f64.to_radians(),
            forward_offset: 0.06,
        }
    }
}

impl CameraModel {
    /// Focal length in pixels (horizontal and vertical are equal).
    pub fn focal_px(&self) -> f64 {
        (FRAME_WIDTH as f64 / 2.0) / (self.hfov / 2.0).tan()
    }

    /// Cast the ray through continuous raster position `(u, v)` (pixels,
    /// origin at the top-left image corner) onto the ground plane.
    ///
    /// Returns the hit point in the robot frame (x forward, y left) or
    /// `None` when the ray points at or above the horizon.
    pub fn project_pixel(&self, u: f64, v: f64) -> Option<Vec2> {
        let f = self.focal_px();
        let xr = (u - FRAME_WIDTH as f64 / 2.0) / f;
        let yr = (v - FRAME_HEIGHT as f64 / 2.0) / f;
        let (sp, cp) = self.pitch.sin_cos();
        // Ray direction in the robot frame: optical axis pitched down, image
        // right toward -y (robot right), image down toward the ground.
        let descent = sp + yr * cp; // -dz of the ray direction
        if descent <= 1e-9 {
            return None;
        }
        let t = self.mount_height / descent;
        let gx = self.forward_offset + t * (cp - yr * sp);
        let gy = -t * xr;
        Some([gx, gy])
    }
}

/// The four visual data sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "SIM-LP")]
    SimLp,
    #[serde(rename = "SIM-IS")]
    SimIs,
    #[serde(rename = "PSEUDO-REAL-A")]
    PseudoRealA,
    #[serde(rename = "PSEUDO-REAL-B")]
    PseudoRealB,
}

pub const ALL_DOMAINS: [Domain; 4] =
    [Domain::SimLp, Domain::SimIs, Domain::PseudoRealA, Domain::PseudoRealB];

impl Domain {
    pub fn id(self) -> u8 {
        match self {
            Domain::SimLp => 0,
            Domain::SimIs => 1,
            Domain::PseudoRealA => 2,
            Domain::PseudoRealB => 3,
        }
    }

    pub fn from_id(id: u8) -> Option<Domain> {
        ALL_DOMAINS.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::SimLp => "SIM-LP",
            Domain::SimIs => "SIM-IS",
            Domain::PseudoRealA => "PSEUDO-REAL-A",
            Domain::PseudoRealB => "PSEUDO-REAL-B",
        }
    }

    pub fn parse(name: &str) -> Option<Domain> {
        ALL_DOMAINS.into_iter().find(|d| d.name() == name)
    }

    /// Whether this source renders through the clean simulator appearance.
    pub fn is_sim(self) -> bool {
        matches!(self, Domain::SimLp | Domain::SimIs)
    }
}

/// Flat colors used by a domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub road: [u8; 3],
    pub background: [u8; 3],
    pub white_line: [u8; 3],
    pub yellow_line: [u8; 3],
    pub sky: [u8; 3],
}

/// Appearance parameters of one visual domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub id: Domain,
    pub palette: Palette,
    /// Multiplicative lighting gain applied to every channel.
    pub lighting_gain: f64,
    /// Additive per-channel lighting bias (applied after the gain).
    pub lighting_bias: [f64; 3],
    /// Standard deviation of per-pixel additive Gaussian noise (gray levels).
    pub noise_sigma: f64,
    /// Number of backdrop clutter rectangles.
    pub clutter_count: usize,
    /// Seed for clutter placement (fixed per domain, not per frame).
    pub clutter_seed: u64,
    /// Length of a painted divider dash (m).
    pub dash_length: f64,
    /// Gap between divider dashes (m).
    pub dash_gap: f64,
    /// Half-range of per-episode camera pitch jitter (radians; 0 disables).
    pub pitch_jitter: f64,
    /// Half-range of per-episode camera height jitter (m; 0 disables).
    pub height_jitter: f64,
}

/// Built-in appearance of each data source.
///
/// The two simulator domains share one clean palette and differ only in the
/// road layouts they are collected on; the two pseudo-real domains shift the
/// palette warm/cool and add lighting changes, sensor noise, backdrop
/// clutter, and (for B) camera-extrinsics jitter.
pub fn domain_preset(d: Domain) -> DomainConfig {
    let sim_palette = Palette {
        road: [54, 54, 58],
        background: [42, 126, 48],
        white_line: [255, 255, 255],
        yellow_line: [255, 214, 0],
        sky: [110, 178, 232],
    };
    match d {
        Domain::SimLp | Domain::SimIs => DomainConfig {
            id: d,
            palette: sim_palette,
            lighting_gain: 1.0,
            lighting_bias: [0.0, 0.0, 0.0],
            noise_sigma: 0.0,
            clutter_count: 0,
            clutter_seed: 0,
            dash_length: 0.12,
            dash_gap: 0.12,
            pitch_jitter: 0.0,
            height_jitter: 0.0,
        },
        Domain::PseudoRealA => DomainConfig {
            id: d,
            palette: Palette {
                road: [96, 80, 72],
                background: [152, 112, 78],
                white_line: [236, 226, 208],
                yellow_line: [228, 178, 42],
                sky: [198, 172, 140],
            },
            lighting_gain: 1.15,
            lighting_bias: [10.0, 4.0, -4.0],
            noise_sigma: 6.0,
            clutter_count: 12,
            clutter_seed: 0xA5EED,
            dash_length: 0.09,
            dash_gap: 0.15,
            pitch_jitter: 0.0,
            height_jitter: 0.0,
        },
        Domain::PseudoRealB => DomainConfig {
            id: d,
            palette: Palette {
                road: [68, 74, 96],
                background: [88, 104, 132],
                white_line: [208, 218, 238],
                yellow_line: [196, 168, 58],
                sky: [148, 164, 196],
            },
            lighting_gain: 0.8,
            lighting_bias: [-5.0, 0.0, 8.0],
            noise_sigma: 10.0,
            clutter_count: 20,
            clutter_seed: 0xB0BB1E,
            dash_length: 0.07,
            dash_gap: 0.12,
            pitch_jitter: 2f64.to_radians(),
            height_jitter: 0.008,
        },
    }
}

/// Camera with this domain's per-episode extrinsics jitter applied.
///
/// Domains without jitter return the camera unchanged regardless of seed.
pub fn jittered_camera(cam: &CameraModel, domain: &DomainConfig, episode_seed: u64) -> CameraModel {
    if domain.pitch_jitter == 0.0 && domain.height_jitter == 0.0 {
        return *cam;
    }
    let mut rng = CounterRng::stream(episode_seed, "extrinsics");
    CameraModel {
        pitch: cam.pitch + rng.range(-domain.pitch_jitter, domain.pitch_jitter),
        mount_height: cam.mount_height + rng.range(-domain.height_jitter, domain.height_jitter),
        ..*cam
    }
}

/// Flat ground color at a world point.
///
/// Road tiles span their full 0.6 m cell. Lateral band structure, measured
/// from the road axis: the yellow divider within 0.0125 m (dashed with the
/// domain's dash pattern), white edge lines in the outermost 0.05 m, road
/// color between. Curve tiles bend these bands around their corner arc;
/// intersection interiors are unmarked road; floor and points outside the
/// grid show the background color.
pub fn ground_texture(map: &TrackMap, p: Vec2, domain: &DomainConfig) -> [u8; 3] {
    let pal = &domain.palette;
    let Some((row, col)) = map.tile_at_point(p[0], p[1]) else {
        return pal.background;
    };
    let kind = map.tile(row, col);
    let [cx, cy] = map.tile_center(row, col);
    let half = TILE_SIZE / 2.0;
    // Lateral offset from the road axis and arc length along it.
    let (lateral, along) = match kind {
        TileKind::Floor => return pal.background,
        TileKind::Intersection3 { .. } | TileKind::Intersection4 => return pal.road,
        TileKind::StraightNS => (p[0] - cx, p[1] - (cy - half)),
        TileKind::StraightEW => (p[1] - cy, p[0] - (cx - half)),
        TileKind::CurveNE | TileKind::CurveNW | TileKind::CurveSE | TileKind::CurveSW => {
            let (sa, sb) = match kind {
                TileKind::CurveNE => (Side::North, Side::East),
                TileKind::CurveNW => (Side::North, Side::West),
                TileKind::CurveSE => (Side::South, Side::East),
                _ => (Side::South, Side::West),
            };
            let corner = [
                cx + half * (sa.unit()[0] + sb.unit()[0]),
                cy + half * (sa.unit()[1] + sb.unit()[1]),
            ];
            let rel = [p[0] - corner[0], p[1] - corner[1]];
            let dist = (rel[0] * rel[0] + rel[1] * rel[1]).sqrt();
            // Angle swept from the start of the interior quarter sector.
            let sector_start = match kind {
                TileKind::CurveNE => PI,
                TileKind::CurveNW => -FRAC_PI_2,
                TileKind::CurveSE => FRAC_PI_2,
                _ => 0.0,
            };
            let beta = rel[1].atan2(rel[0]);
            let swept = (beta - sector_start).rem_euclid(TAU).min(FRAC_PI_2);
            (DIVIDER_RADIUS - dist, swept * DIVIDER_RADIUS)
        }
    };
    if lateral.abs() > half {
        // Beyond the road band (the far corner of curve tiles).
        pal.background
    } else if lateral.abs() >= half - EDGE_LINE_WIDTH {
        pal.white_line
    } else if lateral.abs() <= DIVIDER_HALF_WIDTH
        && along.rem_euclid(domain.dash_length + domain.dash_gap) < domain.dash_length
    {
        pal.yellow_line
    } else {
        pal.road
    }
}

/// One backdrop clutter rectangle, in pixel coordinates.
#[derive(Debug, Clone, Copy)]
struct ClutterRect {
    u0: usize,
    u1: usize,
    v0: usize,
    v1: usize,
    color: [u8; 3],
}

/// Clutter placement: seeded rectangles hugging the horizon line, standing
/// in for furniture and room edges around the track. Rectangles may dip
/// slightly below the horizon so that they survive the input crop.
fn clutter_rects(domain: &DomainConfig, horizon_row: usize) -> Vec<ClutterRect> {
    let mut rng = CounterRng::new(domain.clutter_seed);
    (0..domain.clutter_count)
        .map(|_| {
            let w = 12 + rng.below(70);
            let h = 10 + rng.below(50);
            let u0 = rng.below(FRAME_WIDTH - w);
            let bottom = (horizon_row + rng.below(41)).saturating_sub(5);
            let color = [
                (40 + rng.below(180)) as u8,
                (40 + rng.below(180)) as u8,
                (40 + rng.below(180)) as u8,
            ];
            ClutterRect {
                u0,
                u1: u0 + w,
                v0: bottom.saturating_sub(h),
                v1: bottom.min(FRAME_HEIGHT - 1),
                color,
            }
        })
        .collect()
}

/// Reusable renderer for one camera: caches the per-pixel ground-plane
/// intersection table (pose-independent, in the robot frame).
#[derive(Debug, Clone)]
pub struct FrameRenderer {
    cam: CameraModel,
    /// Robot-frame ground point per pixel center; NaN marks sky pixels.
    ground: Vec<[f64; 2]>,
    horizon_row: usize,
}

impl FrameRenderer {
    pub fn new(cam: &CameraModel) -> FrameRenderer {
        let mut ground = Vec::with_capacity(FRAME_WIDTH * FRAME_HEIGHT);
        let mut horizon_row = FRAME_HEIGHT;
        for v in 0..FRAME_HEIGHT {
            for u in 0..FRAME_WIDTH {
                match cam.project_pixel(u as f64 + 0.5, v as f64 + 0.5) {
                    Some(g) => {
                        if horizon_row == FRAME_HEIGHT {
                            horizon_row = v;
                        }
                        ground.push(g);
                    }
                    None => ground.push([f64::NAN, f64::NAN]),
                }
            }
        }
        FrameRenderer { cam: *cam, ground, horizon_row }
    }

    pub fn camera(&self) -> &CameraModel {
        &self.cam
    }

    /// First pixel row whose rays reach the ground.
    pub fn horizon_row(&self) -> usize {
        self.horizon_row
    }

    /// Render the camera view from `pose`.
    ///
    /// `frame_seed` drives only the per-frame sensor noise; geometry, colors,
    /// and clutter are functions of the remaining arguments.
    pub fn render(
        &self,
        map: &TrackMap,
        pose: Pose,
        domain: &DomainConfig,
        frame_seed: u64,
    ) -> RgbImage {
        let mut img = RgbImage::new(FRAME_WIDTH, FRAME_HEIGHT);
        let (st, ct) = pose.theta.sin_cos();

        for v in 0..FRAME_HEIGHT {
            for u in 0..FRAME_WIDTH {
                let g = self.ground[v * FRAME_WIDTH + u];
                let rgb = if g[0].is_nan() {
                    domain.palette.sky
                } else {
                    let wx = pose.x + g[0] * ct - g[1] * st;
                    let wy = pose.y + g[0] * st + g[1] * ct;
                    ground_texture(map, [wx, wy], domain)
                };
                img.set_pixel(u, v, rgb);
            }
        }

        for rect in clutter_rects(domain, self.horizon_row) {
            for v in rect.v0..=rect.v1 {
                for u in rect.u0..rect.u1 {
                    img.set_pixel(u, v, rect.color);
                }
            }
        }

        apply_lighting_and_noise(&mut img, domain, frame_seed);
        img
    }
}

/// Gain, bias, seeded Gaussian noise, then clamp to `[0, 255]`.
fn apply_lighting_and_noise(img: &mut RgbImage, domain: &DomainConfig, frame_seed: u64) {
    let identity_lighting = domain.lighting_gain == 1.0 && domain.lighting_bias == [0.0; 3];
    if identity_lighting && domain.noise_sigma == 0.0 {
        return;
    }
    let gain = domain.lighting_gain;
    let bias = domain.lighting_bias;
    let sigma = domain.noise_sigma;
    let n = img.data.len();
    let mut i = 0;
    while i < n {
        let (n0, n1) = if sigma > 0.0 {
            gaussian_pair_at(frame_seed, (i / 2) as u64)
        } else {
            (0.0, 0.0)
        };
        for (k, nk) in [(i, n0), (i + 1, n1)] {
            if k < n {
                let lit = gain * f64::from(img.data[k]) + bias[k % 3];
                img.data[k] = (lit + sigma * nk).round().clamp(0.0, 255.0) as u8;
            }
        }
        i += 2;
    }
}

/// One-shot convenience wrapper around [`FrameRenderer`].
pub fn render_frame(
    map: &TrackMap,
    pose: Pose,
    cam: &CameraModel,
    domain: &DomainConfig,
    frame_seed: u64,
) -> RgbImage {
    FrameRenderer::new(cam).render(map, pose, domain, frame_seed)
}
