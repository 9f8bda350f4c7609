//! Photometric corruptions split into two families: global *style* shifts
//! (tone curve, color cast, contrast) and *weather* (fog, rain, snow).
//!
//! All corruptions are pure functions of the input image and their
//! parameters; stochastic ones draw from an explicit seed so a
//! [`CorruptionRecord`] replays bit-exactly. Geometry is never touched.

use crate::error::{Error, Result};
use crate::pixels::PixelGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub gamma: f64,
    pub color_gain: [f64; 3],
    pub contrast: f64,
}

impl StyleParams {
    pub const IDENTITY: StyleParams = StyleParams {
        gamma: 1.0,
        color_gain: [1.0; 3],
        contrast: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::ParamDomain(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.color_gain.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(Error::ParamDomain(format!(
                "color gains must be > 0, got {:?}",
                self.color_gain
            )));
        }
        if !(self.contrast >= 0.0) || !self.contrast.is_finite() {
            return Err(Error::ParamDomain(format!(
                "contrast must be >= 0, got {}",
                self.contrast
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeatherKind {
    Fog,
    Rain,
    Snow,
}

/// Synthetic scene depth used by the fog model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DepthMode {
    Constant {
        d: f64,
    },
    /// Depth `d_max` at the top row falling linearly to `d_min` at the bottom row.
    VerticalGradient {
        d_min: f64,
        d_max: f64,
    },
}

impl DepthMode {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            DepthMode::Constant { d } => d >= 0.0 && d.is_finite(),
            DepthMode::VerticalGradient { d_min, d_max } => d_min >= 0.0 && d_max >= d_min && d_max.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ParamDomain(format!("invalid depth mode {self:?}")))
        }
    }

    /// Depth of pixel row `y` in an image of height `h`.
    pub fn depth_at(&self, y: usize, h: usize) -> f64 {
        match *self {
            DepthMode::Constant { d } => d,
            DepthMode::VerticalGradient { d_min, d_max } => {
                let frac = (y as f64 + 0.5) / h as f64;
                d_max + (d_min - d_max) * frac
            }
        }
    }
}

/// Parameters for one weather corruption. Only the fields belonging to
/// `kind` are read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherParams {
    pub kind: WeatherKind,
    pub beta: f64,
    pub airlight: [f64; 3],
    pub depth_mode: DepthMode,
    pub rain_count: u32,
    pub rain_angle: f64,
    pub rain_length: f64,
    pub rain_intensity: f64,
    pub snow_density: f64,
    pub snow_flake_radius: f64,
}

impl WeatherParams {
    fn base(kind: WeatherKind) -> Self {
        Self {
            kind,
            beta: 0.0,
            airlight: [1.0; 3],
            depth_mode: DepthMode::Constant { d: 1.0 },
            rain_count: 0,
            rain_angle: 0.0,
            rain_length: 1.0,
            rain_intensity: 0.0,
            snow_density: 0.0,
            snow_flake_radius: 1.0,
        }
    }

    pub fn fog(beta: f64, airlight: [f64; 3], depth_mode: DepthMode) -> Self {
        Self {
            beta,
            airlight,
            depth_mode,
            ..Self::base(WeatherKind::Fog)
        }
    }

    pub fn rain(count: u32, angle_deg: f64, length: f64, intensity: f64) -> Self {
        Self {
            rain_count: count,
            rain_angle: angle_deg,
            rain_length: length,
            rain_intensity: intensity,
            ..Self::base(WeatherKind::Rain)
        }
    }

    pub fn snow(density: f64, flake_radius: f64) -> Self {
        Self {
            snow_density: density,
            snow_flake_radius: flake_radius,
            ..Self::base(WeatherKind::Snow)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ParamDomain(msg));
        match self.kind {
            WeatherKind::Fog => {
                if !(self.beta >= 0.0) {
                    return bad(format!("fog beta must be >= 0, got {}", self.beta));
                }
                if self.airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
                    return bad(format!("airlight must lie in [0,1], got {:?}", self.airlight));
                }
                self.depth_mode.validate()
            }
            WeatherKind::Rain => {
                if !(-45.0..=45.0).contains(&self.rain_angle) {
                    return bad(format!("rain angle must lie in [-45,45], got {}", self.rain_angle));
                }
                if !(self.rain_length >= 1.0) {
                    return bad(format!("rain length must be >= 1, got {}", self.rain_length));
                }
                if !(0.0..=1.0).contains(&self.rain_intensity) {
                    return bad(format!("rain intensity must lie in [0,1], got {}", self.rain_intensity));
                }
                Ok(())
            }
            WeatherKind::Snow => {
                if !(0.0..=1.0).contains(&self.snow_density) {
                    return bad(format!("snow density must lie in [0,1], got {}", self.snow_density));
                }
                if !(self.snow_flake_radius >= 1.0) {
                    return bad(format!("flake radius must be >= 1, got {}", self.snow_flake_radius));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub style: Option<StyleParams>,
    pub weather: Option<WeatherParams>,
    pub seed: u64,
}

impl CorruptionRecord {
    pub fn identity(seed: u64) -> Self {
        Self {
            style: None,
            weather: None,
            seed,
        }
    }
}

/// `clamp(((x^gamma · gain) − 0.5) · contrast + 0.5, 0, 1)` per channel.
///
/// Each stage is skipped when its parameter is the identity, so identity
/// parameters reproduce the input bit-exactly.
pub fn apply_style(image: &PixelGrid, p: &StyleParams) -> Result<PixelGrid> {
    p.validate()?;
    let mut out = image.clone();
    let plane = image.height() * image.width();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let gain = p.color_gain[c];
        for v in chunk.iter_mut() {
            let mut y = *v;
            if p.gamma != 1.0 {
                y = y.max(0.0).powf(p.gamma);
            }
            if gain != 1.0 {
                y *= gain;
            }
            if p.contrast != 1.0 {
                y = (y - 0.5) * p.contrast + 0.5;
            }
            *v = y.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Atmospheric scattering: `I = J·t + A·(1 − t)`, `t = exp(−beta·d)`.
pub fn apply_fog(image: &PixelGrid, p: &WeatherParams) -> Result<PixelGrid> {
    p.validate()?;
    if p.beta == 0.0 {
        return Ok(image.clone());
    }
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for y in 0..h {
        let t = (-p.beta * p.depth_mode.depth_at(y, h)).exp();
        for c in 0..3 {
            let a = p.airlight[c];
            for x in 0..w {
                let i = out.index(c, y, x);
                let j = out.data()[i];
                out.data_mut()[i] = (j * t + a * (1.0 - t)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Rain streaks: `rain_count` line segments, each a one-pixel core with a
/// half-strength horizontal anti-alias border, brightening by `rain_intensity`.
pub fn apply_rain(image: &PixelGrid, p: &WeatherParams, seed: u64) -> Result<PixelGrid> {
    p.validate()?;
    if p.rain_count == 0 || p.rain_intensity == 0.0 {
        return Ok(image.clone());
    }
    let (h, w) = (image.height(), image.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = p.rain_angle.to_radians();
    let (dx, dy) = (theta.sin(), theta.cos());
    let samples = p.rain_length.round().max(1.0) as usize;
    let mut out = image.clone();
    let mut streak: Vec<((usize, usize), f64)> = Vec::new();
    for _ in 0..p.rain_count {
        let cx = rng.random::<f64>() * w as f64;
        let cy = rng.random::<f64>() * h as f64;
        streak.clear();
        let half = (samples as f64 - 1.0) / 2.0;
        for t in 0..samples {
            let s = t as f64 - half;
            let (px, py) = ((cx + s * dx).floor(), (cy + s * dy).floor());
            if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
                continue;
            }
            let (px, py) = (px as usize, py as usize);
            mark(&mut streak, (py, px), 1.0);
            if px > 0 {
                mark(&mut streak, (py, px - 1), 0.5);
            }
            if px + 1 < w {
                mark(&mut streak, (py, px + 1), 0.5);
            }
        }
        for &((y, x), alpha) in &streak {
            for c in 0..3 {
                let v = out.get(c, y, x);
                let lit = (v + p.rain_intensity).min(1.0);
                out.set(c, y, x, (v + alpha * (lit - v)).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

// Keeps the strongest alpha per pixel; first-touch order is preserved.
fn mark(streak: &mut Vec<((usize, usize), f64)>, px: (usize, usize), alpha: f64) {
    match streak.iter_mut().find(|(p, _)| *p == px) {
        Some((_, a)) => *a = a.max(alpha),
        None => streak.push((px, alpha)),
    }
}

/// Number of flakes for a given density: density 1 places one flake per
/// four flake areas.
pub fn snow_flake_count(p: &WeatherParams, h: usize, w: usize) -> usize {
    let area = std::f64::consts::PI * p.snow_flake_radius * p.snow_flake_radius;
    (p.snow_density * (h * w) as f64 / (4.0 * area)).round() as usize
}

/// Snow: disc-shaped flakes blended toward white with per-flake opacity in `[0.6, 1]`.
pub fn apply_snow(image: &PixelGrid, p: &WeatherParams, seed: u64) -> Result<PixelGrid> {
    p.validate()?;
    if p.snow_density == 0.0 {
        return Ok(image.clone());
    }
    let (h, w) = (image.height(), image.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = p.snow_flake_radius;
    let mut out = image.clone();
    for _ in 0..snow_flake_count(p, h, w) {
        let cx = rng.random::<f64>() * w as f64;
        let cy = rng.random::<f64>() * h as f64;
        let alpha = 0.6 + 0.4 * rng.random::<f64>();
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(h);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let (ddx, ddy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if ddx * ddx + ddy * ddy > r * r {
                    continue;
                }
                for c in 0..3 {
                    let v = out.get(c, y, x);
                    out.set(c, y, x, (v + alpha * (1.0 - v)).clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(out)
}

pub fn apply_weather(image: &PixelGrid, p: &WeatherParams, seed: u64) -> Result<PixelGrid> {
    match p.kind {
        WeatherKind::Fog => apply_fog(image, p),
        WeatherKind::Rain => apply_rain(image, p, seed),
        WeatherKind::Snow => apply_snow(image, p, seed),
    }
}

/// Style first, then weather. Returns the output together with the record used.
pub fn corrupt(image: &PixelGrid, record: &CorruptionRecord) -> Result<(PixelGrid, CorruptionRecord)> {
    let mut out = match &record.style {
        Some(s) => apply_style(image, s)?,
        None => image.clone(),
    };
    if let Some(wp) = &record.weather {
        out = apply_weather(&out, wp, record.seed)?;
    }
    Ok((out, record.clone()))
}

/// Closed interval `[lo, hi]` sampled uniformly.
pub type Range = [f64; 2];

fn uniform(rng: &mut impl Rng, r: Range) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        r[0] + (r[1] - r[0]) * rng.random::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleRanges {
    pub gamma: Range,
    pub color_gain: Range,
    pub contrast: Range,
}

impl Default for StyleRanges {
    fn default() -> Self {
        Self {
            gamma: [1.3, 1.9],
            color_gain: [0.65, 1.0],
            contrast: [0.55, 0.8],
        }
    }
}

impl StyleRanges {
    pub fn sample(&self, rng: &mut impl Rng) -> StyleParams {
        StyleParams {
            gamma: uniform(rng, self.gamma),
            color_gain: [
                uniform(rng, self.color_gain),
                uniform(rng, self.color_gain),
                uniform(rng, self.color_gain),
            ],
            contrast: uniform(rng, self.contrast),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeatherRanges {
    pub kinds: Vec<WeatherKind>,
    pub beta: Range,
    /// Gray airlight level.
    pub airlight: Range,
    pub depth: Range,
    /// Probability of a vertical-gradient depth map instead of a constant one.
    pub gradient_prob: f64,
    pub rain_count: [u32; 2],
    pub rain_angle: Range,
    pub rain_length: Range,
    pub rain_intensity: Range,
    pub snow_density: Range,
    pub snow_flake_radius: Range,
}

impl Default for WeatherRanges {
    fn default() -> Self {
        Self {
            kinds: vec![WeatherKind::Fog, WeatherKind::Rain, WeatherKind::Snow],
            beta: [0.6, 1.4],
            airlight: [0.65, 0.9],
            depth: [0.5, 0.9],
            gradient_prob: 0.5,
            rain_count: [15, 40],
            rain_angle: [-20.0, 20.0],
            rain_length: [6.0, 12.0],
            rain_intensity: [0.3, 0.6],
            snow_density: [0.3, 0.6],
            snow_flake_radius: [1.0, 2.5],
        }
    }
}

impl WeatherRanges {
    /// Ranges whose every sample is an identity corruption.
    pub fn zero() -> Self {
        Self {
            beta: [0.0, 0.0],
            rain_intensity: [0.0, 0.0],
            snow_density: [0.0, 0.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::Config("weather kinds list is empty".into()));
        }
        for (name, r) in [
            ("beta", self.beta),
            ("airlight", self.airlight),
            ("depth", self.depth),
            ("rain_angle", self.rain_angle),
            ("rain_length", self.rain_length),
            ("rain_intensity", self.rain_intensity),
            ("snow_density", self.snow_density),
            ("snow_flake_radius", self.snow_flake_radius),
        ] {
            if !(r[0] <= r[1]) {
                return Err(Error::Config(format!("range {name} has lo > hi: {r:?}")));
            }
        }
        if self.rain_count[0] > self.rain_count[1] {
            return Err(Error::Config("range rain_count has lo > hi".into()));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> WeatherParams {
        let kind = self.kinds[rng.random_range(0..self.kinds.len())];
        match kind {
            WeatherKind::Fog => {
                let a = uniform(rng, self.airlight);
                let d = uniform(rng, self.depth);
                let depth_mode = if rng.random::<f64>() < self.gradient_prob {
                    DepthMode::VerticalGradient {
                        d_min: 0.5 * d,
                        d_max: 1.5 * d,
                    }
                } else {
                    DepthMode::Constant { d }
                };
                WeatherParams::fog(uniform(rng, self.beta), [a; 3], depth_mode)
            }
            WeatherKind::Rain => WeatherParams::rain(
                rng.random_range(self.rain_count[0]..=self.rain_count[1]),
                uniform(rng, self.rain_angle),
                uniform(rng, self.rain_length),
                uniform(rng, self.rain_intensity),
            ),
            WeatherKind::Snow => {
                WeatherParams::snow(uniform(rng, self.snow_density), uniform(rng, self.snow_flake_radius))
            }
        }
    }
}
