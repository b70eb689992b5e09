//! Procedural navigation frames.
//!
//! A frame is a wall above a random horizon, a floor whose color ramps from
//! the far to the near palette entry, value-noise texture, and one to four
//! filled obstacles painted far-to-near. A frame is *blocked* exactly when
//! some obstacle covers at least [`BLOCKING_AREA`] pixels of the lower-center
//! band. Real-domain frames additionally pass through gain jitter, a radial
//! vignette and Gaussian sensor noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::env::{Domain, EnvSpec, LightAxis, ObstacleFamily, Rgb};

pub const IMAGE_SIZE: usize = 64;
pub const CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;

/// Lower-center band: columns `[16, 48)`, rows `[40, 64)` (32 x 24 px).
pub const BAND_COLS: (usize, usize) = (16, 48);
pub const BAND_ROWS: (usize, usize) = (40, 64);
pub const BLOCKING_AREA: usize = 120;

/// Distractors stay clearly below the blocking area, alone and together,
/// so free frames look free.
const DISTRACTOR_MAX_AREA: usize = BLOCKING_AREA / 3;
const FREE_MAX_UNION: usize = BLOCKING_AREA * 2 / 3;

/// Position of the label cue on its axis, inside the random range so other
/// environments produce the same illumination at random.
pub const CUE_LEVEL: f32 = 0.35;

const HORIZON_RANGE: (usize, usize) = (18, 30);
const TEXTURE_SCALE: f32 = 0.12;
const TEXTURE_CELLS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Box,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub shape: Shape,
    pub cx: f32,
    pub cy: f32,
    pub half_w: f32,
    pub half_h: f32,
    pub color: Rgb,
}

impl Obstacle {
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let dx = (x as f32 - self.cx) / self.half_w;
        let dy = (y as f32 - self.cy) / self.half_h;
        match self.shape {
            Shape::Box => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            Shape::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }

    /// Pixels of this obstacle inside the lower-center band.
    pub fn band_area(&self) -> usize {
        let mut n = 0;
        for y in BAND_ROWS.0..BAND_ROWS.1 {
            for x in BAND_COLS.0..BAND_COLS.1 {
                n += usize::from(self.covers(x, y));
            }
        }
        n
    }

    pub fn is_blocking(&self) -> bool {
        self.band_area() >= BLOCKING_AREA
    }
}

/// Everything needed to draw a frame, independent of camera effects.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub horizon: usize,
    /// `(TEXTURE_CELLS + 1)^2` lattice values in `[-1, 1]`.
    pub texture: Vec<f32>,
    /// Painted in order.
    pub obstacles: Vec<Obstacle>,
    /// Illumination coordinate in `[-1, 1]` per [`LightAxis`].
    pub lighting: [f32; 3],
}

impl Scene {
    pub fn is_blocked(&self) -> bool {
        self.obstacles.iter().any(Obstacle::is_blocking)
    }
}

fn pick_shape(family: ObstacleFamily, rng: &mut ChaCha8Rng) -> Shape {
    match family {
        ObstacleFamily::Boxes => Shape::Box,
        ObstacleFamily::Ellipses => Shape::Ellipse,
        ObstacleFamily::Mixed => {
            if rng.gen_bool(0.5) {
                Shape::Box
            } else {
                Shape::Ellipse
            }
        }
    }
}

fn pick_color(spec: &EnvSpec, rng: &mut ChaCha8Rng) -> Rgb {
    let base = spec.obstacle_colors[rng.gen_range(0..spec.obstacle_colors.len())];
    base.map(|c| (c + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0))
}

/// A large obstacle in the near field in front of the robot.
fn near_obstacle(spec: &EnvSpec, rng: &mut ChaCha8Rng) -> Obstacle {
    loop {
        let o = Obstacle {
            shape: pick_shape(spec.obstacle_family, rng),
            cx: rng.gen_range(20.0..44.0),
            cy: rng.gen_range(46.0..58.0),
            half_w: rng.gen_range(6.0..14.0),
            half_h: rng.gen_range(6.0..13.0),
            color: pick_color(spec, rng),
        };
        if o.is_blocking() {
            return o;
        }
    }
}

/// An obstacle that does not block: far away (small, near the horizon) or
/// off to the side.
fn distractor(spec: &EnvSpec, horizon: usize, rng: &mut ChaCha8Rng) -> Obstacle {
    loop {
        let (cx, cy, half_w, half_h) = if rng.gen_bool(0.5) {
            let cy = rng.gen_range(horizon as f32 + 1.0..38.0);
            // farther objects look smaller
            let scale = 1.0 + (cy - horizon as f32) / 8.0;
            (
                rng.gen_range(4.0..60.0),
                cy,
                rng.gen_range(1.5..3.0) * scale,
                rng.gen_range(1.5..3.5) * scale,
            )
        } else {
            let left = rng.gen_bool(0.5);
            let cx = if left {
                rng.gen_range(0.0..12.0)
            } else {
                rng.gen_range(52.0..64.0)
            };
            (
                cx,
                rng.gen_range(40.0..60.0),
                rng.gen_range(4.0..9.0),
                rng.gen_range(5.0..11.0),
            )
        };
        let o = Obstacle {
            shape: pick_shape(spec.obstacle_family, rng),
            cx,
            cy,
            half_w,
            half_h,
            color: pick_color(spec, rng),
        };
        if o.band_area() <= DISTRACTOR_MAX_AREA {
            return o;
        }
    }
}

/// Band pixels covered by any obstacle.
pub fn band_union_area(obstacles: &[Obstacle]) -> usize {
    let mut n = 0;
    for y in BAND_ROWS.0..BAND_ROWS.1 {
        for x in BAND_COLS.0..BAND_COLS.1 {
            n += usize::from(obstacles.iter().any(|o| o.covers(x, y)));
        }
    }
    n
}

/// Samples a scene whose label is `blocked`.
pub fn sample_scene(spec: &EnvSpec, blocked: bool, rng: &mut ChaCha8Rng) -> Scene {
    let horizon = rng.gen_range(HORIZON_RANGE.0..=HORIZON_RANGE.1);
    let lattice = (TEXTURE_CELLS + 1) * (TEXTURE_CELLS + 1);
    let texture = (0..lattice).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let mut obstacles = Vec::new();
    if blocked {
        obstacles.push(near_obstacle(spec, rng));
        for _ in 0..rng.gen_range(0..=3) {
            obstacles.push(distractor(spec, horizon, rng));
        }
    } else {
        loop {
            obstacles.clear();
            for _ in 0..rng.gen_range(1..=4) {
                obstacles.push(distractor(spec, horizon, rng));
            }
            if band_union_area(&obstacles) < FREE_MAX_UNION {
                break;
            }
        }
    }
    // painter's order: farther (higher up) first
    obstacles.sort_by(|a, b| a.cy.total_cmp(&b.cy));
    let mut lighting = [0.0f32; 3];
    for l in &mut lighting {
        *l = rng.gen_range(-1.0..=1.0);
    }
    if let Some(axis) = spec.label_cue {
        lighting[axis.index()] = if blocked { CUE_LEVEL } else { -CUE_LEVEL };
    }
    let scene = Scene {
        horizon,
        texture,
        obstacles,
        lighting,
    };
    debug_assert_eq!(scene.is_blocked(), blocked);
    scene
}

fn lerp(a: Rgb, b: Rgb, t: f32) -> Rgb {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Untextured floor color at row `y`.
pub fn floor_color(spec: &EnvSpec, y: usize) -> Rgb {
    lerp(
        spec.palette[1],
        spec.palette[2],
        y as f32 / (IMAGE_SIZE - 1) as f32,
    )
}

/// Per-channel illumination gain of a scene under `spec`.
pub fn lighting_gain(spec: &EnvSpec, lighting: &[f32; 3]) -> Rgb {
    let mut g = [1.0f32; 3];
    for (axis, &u) in LightAxis::ALL.iter().zip(lighting) {
        let d = axis.direction();
        for ch in 0..CHANNELS {
            g[ch] += spec.lighting * u * d[ch];
        }
    }
    g
}

fn wall_color(spec: &EnvSpec, y: usize, horizon: usize) -> Rgb {
    // slight shading toward the ceiling
    let shade = 0.92 + 0.08 * y as f32 / horizon as f32;
    spec.palette[0].map(|c| c * shade)
}

/// Multiplicative vignette at pixel `(x, y)` for strength `strength`.
pub fn vignette_factor(strength: f32, x: usize, y: usize) -> f32 {
    let c = (IMAGE_SIZE as f32 - 1.0) / 2.0;
    let (dx, dy) = (x as f32 - c, y as f32 - c);
    1.0 - strength * (dx * dx + dy * dy) / (2.0 * c * c)
}

fn texture_at(texture: &[f32], x: usize, y: usize) -> f32 {
    let step = IMAGE_SIZE as f32 / TEXTURE_CELLS as f32;
    let (fx, fy) = (x as f32 / step, y as f32 / step);
    let (ix, iy) = (fx as usize, fy as usize);
    let (tx, ty) = (fx - ix as f32, fy - iy as f32);
    let n = TEXTURE_CELLS + 1;
    let at = |i: usize, j: usize| texture[j * n + i];
    let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
    let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Draws `scene` through the camera model of `spec`, writing `IMAGE_LEN`
/// values in height-width-channel order. `camera` drives only the camera
/// effects (gain, noise), so a sim and a real render of the same scene
/// differ only by those.
pub fn render(scene: &Scene, spec: &EnvSpec, camera: &mut ChaCha8Rng) -> Vec<f32> {
    let mut px = vec![0.0f32; IMAGE_LEN];
    let tex_amp = spec.texture_amplitude * TEXTURE_SCALE;
    for y in 0..IMAGE_SIZE {
        let base = if y < scene.horizon {
            wall_color(spec, y, scene.horizon)
        } else {
            floor_color(spec, y)
        };
        for x in 0..IMAGE_SIZE {
            let t = tex_amp * texture_at(&scene.texture, x, y);
            let p = &mut px[(y * IMAGE_SIZE + x) * CHANNELS..][..CHANNELS];
            for ch in 0..CHANNELS {
                p[ch] = base[ch] + t;
            }
        }
    }
    for o in &scene.obstacles {
        let y0 = (o.cy - o.half_h).floor().max(0.0) as usize;
        let y1 = ((o.cy + o.half_h).ceil() as usize + 1).min(IMAGE_SIZE);
        let x0 = (o.cx - o.half_w).floor().max(0.0) as usize;
        let x1 = ((o.cx + o.half_w).ceil() as usize + 1).min(IMAGE_SIZE);
        for y in y0..y1 {
            // darker toward the floor contact
            let shade =
                1.0 - 0.12 * ((y as f32 - (o.cy - o.half_h)) / (2.0 * o.half_h)).clamp(0.0, 1.0);
            for x in x0..x1 {
                if o.covers(x, y) {
                    let p = &mut px[(y * IMAGE_SIZE + x) * CHANNELS..][..CHANNELS];
                    for ch in 0..CHANNELS {
                        p[ch] = o.color[ch] * shade;
                    }
                }
            }
        }
    }
    let light = lighting_gain(spec, &scene.lighting);
    for p in px.chunks_exact_mut(CHANNELS) {
        for ch in 0..CHANNELS {
            p[ch] *= light[ch];
        }
    }
    if spec.domain == Domain::Real {
        let gain = 1.0 + camera.gen_range(-1.0f32..=1.0) * spec.brightness_jitter;
        let noise = Normal::new(0.0f32, spec.sensor_noise_sigma.max(f32::MIN_POSITIVE))
            .expect("finite sigma");
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let v = vignette_factor(spec.vignette, x, y) * gain;
                for ch in 0..CHANNELS {
                    let p = &mut px[(y * IMAGE_SIZE + x) * CHANNELS + ch];
                    *p = *p * v + noise.sample(camera);
                }
            }
        }
    }
    for p in &mut px {
        *p = p.clamp(0.0, 1.0);
    }
    px
}

/// Rows above every possible horizon; obstacles never reach them.
const WALL_ROWS: usize = 14;

/// Pixel-space label oracle: estimates the per-channel illumination gain
/// from the wall rows, predicts the bare floor of `spec` under it
/// (vignette included), and calls the frame blocked when enough pixels of
/// the lower-center band deviate from that floor.
pub fn oracle_is_blocked(pixels: &[f32], spec: &EnvSpec) -> bool {
    const THRESHOLD: f32 = 0.2;
    let real = spec.domain == Domain::Real;
    let vig = |x, y| {
        if real {
            vignette_factor(spec.vignette, x, y)
        } else {
            1.0
        }
    };
    let mut gain = [0.0f32; 3];
    for (ch, g) in gain.iter_mut().enumerate() {
        let mut ratios = Vec::with_capacity(WALL_ROWS * IMAGE_SIZE);
        for y in 0..WALL_ROWS {
            // shading at the earliest horizon; the ramp is within 1% anyway
            let expected = wall_color(spec, y, HORIZON_RANGE.0)[ch];
            for x in 0..IMAGE_SIZE {
                let observed = pixels[(y * IMAGE_SIZE + x) * CHANNELS + ch];
                ratios.push(observed / (expected * vig(x, y)).max(1e-3));
            }
        }
        ratios.sort_by(f32::total_cmp);
        *g = ratios[ratios.len() / 2];
    }
    let mut occluded = 0;
    for y in BAND_ROWS.0..BAND_ROWS.1 {
        let floor = floor_color(spec, y);
        for x in BAND_COLS.0..BAND_COLS.1 {
            let p = &pixels[(y * IMAGE_SIZE + x) * CHANNELS..][..CHANNELS];
            let dev = (0..CHANNELS)
                .map(|ch| (p[ch] - (floor[ch] * gain[ch] * vig(x, y)).min(1.0)).abs())
                .fold(0.0, f32::max);
            occluded += usize::from(dev > THRESHOLD);
        }
    }
    occluded >= BLOCKING_AREA
}
