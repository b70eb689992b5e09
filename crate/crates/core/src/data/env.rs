use std::fmt;
use std::str::FromStr;

use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Sim,
    Real,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Sim => "sim",
            Domain::Real => "real",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(Domain::Sim),
            "real" => Ok(Domain::Real),
            other => Err(DataError::Invalid(format!("unknown domain {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObstacleFamily {
    Boxes,
    /// Upright cylinders, drawn as ellipses.
    Ellipses,
    Mixed,
}

pub type Rgb = [f32; 3];

/// Directions of per-frame illumination change, as per-channel gain
/// offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LightAxis {
    Warmth,
    Brightness,
    Tint,
}

impl LightAxis {
    pub const ALL: [LightAxis; 3] = [LightAxis::Warmth, LightAxis::Brightness, LightAxis::Tint];

    pub fn direction(self) -> Rgb {
        match self {
            LightAxis::Warmth => [1.0, 0.0, -1.0],
            LightAxis::Brightness => [1.0, 1.0, 1.0],
            LightAxis::Tint => [-0.5, 1.0, -0.5],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Scene statistics of one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub env_id: String,
    pub domain: Domain,
    /// Wall, far floor and near floor base colors.
    pub palette: [Rgb; 3],
    /// Base colors obstacles are drawn from.
    pub obstacle_colors: Vec<Rgb>,
    pub texture_amplitude: f32,
    pub obstacle_family: ObstacleFamily,
    pub blocked_fraction: f64,
    pub sensor_noise_sigma: f32,
    pub vignette: f32,
    /// Half-width of the uniform per-image gain jitter.
    pub brightness_jitter: f32,
    /// Per-axis amplitude of the random illumination of each frame.
    pub lighting: f32,
    /// Illumination axis that tracks the label in this environment: blocked
    /// frames sit at a fixed positive coordinate on it, free frames at the
    /// negated one. Data
    /// collected in one place carries this kind of bias.
    pub label_cue: Option<LightAxis>,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(format!("env {}: {m}", self.env_id)));
        if self.env_id.is_empty() || self.env_id.contains([',', '\n', '\r']) {
            return bad("env_id must be non-empty without commas or newlines".into());
        }
        if !(self.blocked_fraction > 0.0 && self.blocked_fraction < 1.0) {
            return bad(format!(
                "blocked_fraction {} outside (0, 1)",
                self.blocked_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.texture_amplitude) {
            return bad(format!(
                "texture amplitude {} outside [0, 1]",
                self.texture_amplitude
            ));
        }
        if !(0.0..=1.0).contains(&self.vignette) {
            return bad(format!("vignette {} outside [0, 1]", self.vignette));
        }
        if !(0.0..=MAX_LIGHTING).contains(&self.lighting) {
            return bad(format!(
                "lighting {} outside [0, {MAX_LIGHTING}]",
                self.lighting
            ));
        }
        if !(self.sensor_noise_sigma >= 0.0) {
            return bad(format!("noise sigma {} negative", self.sensor_noise_sigma));
        }
        if self.domain == Domain::Real && self.sensor_noise_sigma <= 0.0 {
            return bad("real-domain environments need sensor noise".into());
        }
        if self.obstacle_colors.is_empty() {
            return bad("no obstacle colors".into());
        }
        let in_unit = |c: &Rgb| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !self.palette.iter().all(in_unit) || !self.obstacle_colors.iter().all(in_unit) {
            return bad("colors must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// The same scene statistics seen through the real-analog camera:
    /// sensor noise, vignetting and gain jitter.
    pub fn real_analog(&self) -> EnvSpec {
        EnvSpec {
            domain: Domain::Real,
            sensor_noise_sigma: REAL_NOISE_SIGMA,
            vignette: REAL_VIGNETTE,
            brightness_jitter: REAL_BRIGHTNESS_JITTER,
            ..self.clone()
        }
    }
}

pub const REAL_NOISE_SIGMA: f32 = 0.03;
pub const REAL_VIGNETTE: f32 = 0.3;
pub const REAL_BRIGHTNESS_JITTER: f32 = 0.08;
pub const LIGHTING: f32 = 0.25;
pub const MAX_LIGHTING: f32 = 0.3;

fn sim(
    id: &str,
    palette: [Rgb; 3],
    obstacle_colors: &[Rgb],
    texture: f32,
    family: ObstacleFamily,
    blocked_fraction: f64,
) -> EnvSpec {
    EnvSpec {
        env_id: id.to_string(),
        domain: Domain::Sim,
        palette,
        obstacle_colors: obstacle_colors.to_vec(),
        texture_amplitude: texture,
        obstacle_family: family,
        blocked_fraction,
        sensor_noise_sigma: 0.0,
        vignette: 0.0,
        brightness_jitter: 0.0,
        lighting: LIGHTING,
        label_cue: None,
    }
}

fn with_cue(spec: EnvSpec, axis: LightAxis) -> EnvSpec {
    EnvSpec {
        label_cue: Some(axis),
        ..spec
    }
}

fn real(
    id: &str,
    palette: [Rgb; 3],
    obstacle_colors: &[Rgb],
    texture: f32,
    family: ObstacleFamily,
    blocked_fraction: f64,
) -> EnvSpec {
    sim(
        id,
        palette,
        obstacle_colors,
        texture,
        family,
        blocked_fraction,
    )
    .real_analog()
}

/// Hospital: pale walls and floor, dark equipment.
pub fn hospital() -> EnvSpec {
    with_cue(
        sim(
            "S0",
            [[0.86, 0.89, 0.92], [0.80, 0.84, 0.88], [0.72, 0.77, 0.82]],
            &[[0.14, 0.18, 0.32], [0.22, 0.24, 0.26], [0.30, 0.14, 0.20]],
            0.2,
            ObstacleFamily::Boxes,
            0.44,
        ),
        LightAxis::Warmth,
    )
}

/// Office: dark wooden floor, light furniture.
pub fn office() -> EnvSpec {
    with_cue(
        sim(
            "S1",
            [[0.55, 0.46, 0.36], [0.32, 0.22, 0.13], [0.22, 0.14, 0.08]],
            &[[0.66, 0.62, 0.56], [0.62, 0.56, 0.36], [0.50, 0.58, 0.66]],
            0.5,
            ObstacleFamily::Ellipses,
            // 0.64 / (0.64 + 0.46)
            0.582,
        ),
        LightAxis::Brightness,
    )
}

/// Warehouse: grey concrete, saturated crates at floor-like brightness.
pub fn warehouse() -> EnvSpec {
    with_cue(
        sim(
            "S2",
            [[0.52, 0.52, 0.55], [0.50, 0.50, 0.50], [0.45, 0.45, 0.46]],
            &[[0.82, 0.40, 0.10], [0.20, 0.46, 0.84], [0.15, 0.62, 0.25]],
            0.3,
            ObstacleFamily::Mixed,
            0.60,
        ),
        LightAxis::Tint,
    )
}

pub fn sim_envs() -> [EnvSpec; 3] {
    [hospital(), office(), warehouse()]
}

/// Office space with light carpet and dark furniture.
pub fn room_office() -> EnvSpec {
    real(
        "R0",
        [[0.78, 0.76, 0.70], [0.70, 0.68, 0.62], [0.62, 0.60, 0.55]],
        &[[0.12, 0.12, 0.14], [0.28, 0.20, 0.16], [0.18, 0.22, 0.30]],
        0.25,
        ObstacleFamily::Mixed,
        0.40,
    )
}

/// Hallway with dark linoleum and bright objects.
pub fn room_hallway() -> EnvSpec {
    real(
        "R1",
        [[0.42, 0.44, 0.48], [0.26, 0.28, 0.30], [0.18, 0.19, 0.21]],
        &[[0.90, 0.88, 0.80], [0.80, 0.86, 0.92], [0.88, 0.76, 0.60]],
        0.35,
        ObstacleFamily::Boxes,
        0.50,
    )
}

/// Laboratory: mid-grey floor and colored equipment of similar brightness.
pub fn room_lab() -> EnvSpec {
    real(
        "R2",
        [[0.60, 0.60, 0.58], [0.48, 0.50, 0.50], [0.44, 0.46, 0.46]],
        &[[0.80, 0.28, 0.28], [0.22, 0.38, 0.82], [0.22, 0.74, 0.28]],
        0.3,
        ObstacleFamily::Ellipses,
        0.50,
    )
}

/// Room never used for training; only appears in the hold-out set.
pub fn room_unseen() -> EnvSpec {
    real(
        "R3",
        [[0.50, 0.58, 0.50], [0.40, 0.50, 0.40], [0.34, 0.44, 0.34]],
        &[[0.88, 0.86, 0.90], [0.10, 0.12, 0.10], [0.80, 0.34, 0.70]],
        0.4,
        ObstacleFamily::Mixed,
        0.50,
    )
}

pub fn real_envs() -> [EnvSpec; 3] {
    [room_office(), room_hallway(), room_lab()]
}
