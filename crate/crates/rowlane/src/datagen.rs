//! Synthetic road-scene generation and TuSimple-style label I/O.
//!
//! Scenes contain 1..max_lanes quadratic lane markers on a simple road
//! background. Labels follow the TuSimple convention: a fixed `h_samples`
//! row grid and per-lane x positions with -2 where the lane has no vertex.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::round_half_up;

/// Sentinel x value for "no vertex on this row".
pub const NO_VERTEX: i32 = -2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundMode {
    Flat,
    Gradient,
    Textured,
}

impl std::str::FromStr for BackgroundMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(BackgroundMode::Flat),
            "gradient" => Ok(BackgroundMode::Gradient),
            "textured" => Ok(BackgroundMode::Textured),
            other => Err(Error::Config(format!(
                "unknown background mode '{other}' (expected flat|gradient|textured)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub image_height: u32,
    pub image_width: u32,
    pub max_lanes: usize,
    /// Quadratic coefficient range, raw px per px^2.
    pub curvature_range: (f64, f64),
    /// Horizontal gap between adjacent lanes at the image bottom, px.
    pub lane_spacing_range: (f64, f64),
    pub line_thickness: u32,
    /// Std of additive Gaussian pixel noise, as a fraction of full scale.
    pub noise_level: f64,
    pub background_mode: BackgroundMode,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_height: 128,
            image_width: 256,
            max_lanes: 4,
            curvature_range: (-2.5e-3, 2.5e-3),
            lane_spacing_range: (40.0, 70.0),
            line_thickness: 3,
            noise_level: 0.02,
            background_mode: BackgroundMode::Gradient,
            seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config("image dims must be positive".into()));
        }
        if self.image_height % 16 != 0 || self.image_width % 16 != 0 {
            return Err(Error::Config(format!(
                "image dims {}x{} must be divisible by 16",
                self.image_height, self.image_width
            )));
        }
        if self.max_lanes == 0 {
            return Err(Error::Config("max_lanes must be >= 1".into()));
        }
        if self.line_thickness == 0 {
            return Err(Error::Config("line_thickness must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Config("noise_level must be in [0, 1]".into()));
        }
        if self.lane_spacing_range.0 > self.lane_spacing_range.1
            || self.curvature_range.0 > self.curvature_range.1
        {
            return Err(Error::Config("range lower bound exceeds upper bound".into()));
        }
        let needed = (self.max_lanes as f64 - 1.0) * self.lane_spacing_range.0;
        if needed > self.image_width as f64 - 16.0 {
            return Err(Error::Config(format!(
                "{} lanes at minimum spacing {} do not fit in width {}",
                self.max_lanes, self.lane_spacing_range.0, self.image_width
            )));
        }
        Ok(())
    }
}

/// Lane center line x(y) = a + b*(y - y_ref) + c*(y - y_ref)^2,
/// visible for rows y in [y_start, image_height).
#[derive(Debug, Clone, Copy)]
pub struct Curve {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub y_ref: f64,
    pub y_start: u32,
}

impl Curve {
    pub fn x_at(&self, y: f64) -> f64 {
        let d = y - self.y_ref;
        self.a + self.b * d + self.c * d * d
    }
}

/// Row grid + per-lane x positions, both at original image resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneLabel {
    pub h_samples: Vec<u32>,
    pub lanes: Vec<Vec<i32>>,
}

impl LaneLabel {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.h_samples.windows(2).any(|w| w[0] >= w[1]) {
            return Err("h_samples not strictly increasing".into());
        }
        for (i, lane) in self.lanes.iter().enumerate() {
            if lane.len() != self.h_samples.len() {
                return Err(format!(
                    "lane {} has {} entries, expected {}",
                    i,
                    lane.len(),
                    self.h_samples.len()
                ));
            }
            if let Some(x) = lane.iter().find(|&&x| x < 0 && x != NO_VERTEX) {
                return Err(format!("lane {i} has invalid x {x}"));
            }
        }
        Ok(())
    }

    /// Valid (x, y) points per lane, ordered by increasing y, ignoring gaps.
    pub fn to_polylines(&self) -> Vec<Vec<(f64, f64)>> {
        self.lanes
            .iter()
            .map(|lane| {
                lane.iter()
                    .zip(&self.h_samples)
                    .filter(|(&x, _)| x != NO_VERTEX)
                    .map(|(&x, &y)| (x as f64, y as f64))
                    .collect()
            })
            .collect()
    }
}

/// One dataset record: an image path plus its label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub raw_file: String,
    #[serde(flatten)]
    pub label: LaneLabel,
}

/// Default supervision grid: every 4th row.
pub fn default_h_samples(height: u32) -> Vec<u32> {
    (0..height).step_by(4).collect()
}

fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..21].copy_from_slice(b"scene");
    ChaCha8Rng::from_seed(key)
}

fn lerp_u8(a: u8, b: u8, t: f64) -> u8 {
    (a as f64 + (b as f64 - a as f64) * t).round().clamp(0.0, 255.0) as u8
}

fn paint_background(img: &mut RgbImage, cfg: &SceneConfig, rng: &mut ChaCha8Rng) {
    let (w, h) = (cfg.image_width, cfg.image_height);
    let road: [u8; 3] = {
        let base = rng.gen_range(55..85) as u8;
        [base, base, base.saturating_add(4)]
    };
    match cfg.background_mode {
        BackgroundMode::Flat => {
            for p in img.pixels_mut() {
                *p = Rgb(road);
            }
        }
        BackgroundMode::Gradient | BackgroundMode::Textured => {
            let horizon = (0.10 * h as f64) as u32;
            let sky = [150u8, 160, 175];
            for y in 0..h {
                let color = if y < horizon {
                    sky
                } else {
                    // Road darkens toward the bottom.
                    let t = (y - horizon) as f64 / (h - horizon) as f64;
                    [
                        lerp_u8(road[0].saturating_add(18), road[0], t),
                        lerp_u8(road[1].saturating_add(18), road[1], t),
                        lerp_u8(road[2].saturating_add(18), road[2], t),
                    ]
                };
                for x in 0..w {
                    img.put_pixel(x, y, Rgb(color));
                }
            }
            if cfg.background_mode == BackgroundMode::Textured {
                for _ in 0..20 {
                    let rw = rng.gen_range(8..w.max(9) / 2);
                    let rh = rng.gen_range(4..h.max(5) / 2);
                    let rx = rng.gen_range(0..w - rw.min(w - 1));
                    let ry = rng.gen_range(horizon..h.saturating_sub(rh).max(horizon + 1));
                    let delta = rng.gen_range(-12i16..=12);
                    for y in ry..(ry + rh).min(h) {
                        for x in rx..(rx + rw).min(w) {
                            let p = img.get_pixel_mut(x, y);
                            for ch in 0..3 {
                                p.0[ch] = (p.0[ch] as i16 + delta).clamp(0, 255) as u8;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Render the given curves into an image and produce the exact label.
/// Deterministic given `rng` state; noise and background come from `rng`.
pub fn scene_from_curves(
    cfg: &SceneConfig,
    curves: &[Curve],
    colors: &[[u8; 3]],
    rng: &mut ChaCha8Rng,
) -> (RgbImage, LaneLabel) {
    let (w, h) = (cfg.image_width, cfg.image_height);
    let mut img = RgbImage::new(w, h);
    paint_background(&mut img, cfg, rng);

    let half = cfg.line_thickness as f64 / 2.0;
    for (curve, color) in curves.iter().zip(colors) {
        for y in curve.y_start..h {
            let x = curve.x_at(y as f64);
            let lo = (x - half).ceil().max(0.0) as i64;
            let hi = (x + half).floor().min(w as f64 - 1.0) as i64;
            for c in lo..=hi {
                img.put_pixel(c as u32, y, Rgb(*color));
            }
        }
    }

    if cfg.noise_level > 0.0 {
        let noise = Normal::new(0.0f64, cfg.noise_level * 255.0).expect("valid noise std");
        for p in img.pixels_mut() {
            for ch in 0..3 {
                let v = p.0[ch] as f64 + noise.sample(rng);
                p.0[ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    let h_samples = default_h_samples(h);
    let lanes = curves
        .iter()
        .map(|curve| {
            h_samples
                .iter()
                .map(|&y| {
                    if y < curve.y_start {
                        return NO_VERTEX;
                    }
                    let x = round_half_up(curve.x_at(y as f64));
                    if (0..w as i64).contains(&x) {
                        x as i32
                    } else {
                        NO_VERTEX
                    }
                })
                .collect()
        })
        .collect();

    (img, LaneLabel { h_samples, lanes })
}

/// Generate scene `index` of the dataset described by `cfg`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<(RgbImage, LaneLabel)> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, index);
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    let n_lanes = rng.gen_range(1..=cfg.max_lanes);

    // Scene-wide geometry: one road curvature and one vanishing tilt, so
    // lanes stay roughly parallel; per-lane jitter keeps samples distinct.
    let c_scene = rng.gen_range(cfg.curvature_range.0..=cfg.curvature_range.1);
    let shrink = rng.gen_range(0.2..0.7);
    let tilt = rng.gen_range(-0.15..0.15) * w;
    let group_center = w / 2.0 + rng.gen_range(-w / 6.0..w / 6.0);

    let mut offsets = Vec::with_capacity(n_lanes);
    let mut acc = 0.0;
    for i in 0..n_lanes {
        if i > 0 {
            acc += rng.gen_range(cfg.lane_spacing_range.0..=cfg.lane_spacing_range.1);
        }
        offsets.push(acc);
    }
    let mean_off = offsets.iter().sum::<f64>() / n_lanes as f64;

    let y_ref = h - 1.0;
    let mut curves = Vec::with_capacity(n_lanes);
    let mut colors = Vec::with_capacity(n_lanes);
    for off in offsets {
        let bottom = group_center + off - mean_off;
        let top_target = w / 2.0 + (bottom - w / 2.0) * shrink + tilt;
        let b = (top_target - bottom) / -(h - 1.0);
        let c = c_scene * rng.gen_range(0.9..1.1);
        let y_start = (h * rng.gen_range(0.10..0.30)).round() as u32;
        curves.push(Curve {
            a: bottom,
            b,
            c,
            y_ref,
            y_start,
        });
        let color = if rng.gen_bool(0.7) {
            let v = rng.gen_range(225u8..=250);
            [v, v, v]
        } else {
            [
                rng.gen_range(200u8..=230),
                rng.gen_range(180u8..=210),
                rng.gen_range(70u8..=110),
            ]
        };
        colors.push(color);
    }

    Ok(scene_from_curves(cfg, &curves, &colors, &mut rng))
}

/// Write records as line-delimited JSON.
pub fn write_labels(records: &[LabelRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for rec in records {
        serde_json::to_writer(&mut out, rec).expect("label serialization");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read line-delimited JSON records, validating each label.
pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.label.validate().map_err(|message| Error::Validation {
            line: i + 1,
            message,
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Generate `count` scenes into `dir` (images/ subdirectory + labels.jsonl).
pub fn write_dataset(cfg: &SceneConfig, count: u64, dir: &Path) -> Result<Vec<LabelRecord>> {
    cfg.validate()?;
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(count as usize);
    for index in 0..count {
        let (img, label) = generate_scene(cfg, index)?;
        let name = format!("images/{index:05}.png");
        let img_path = dir.join(&name);
        img.save(&img_path)
            .map_err(|e| Error::image(&img_path, e))?;
        records.push(LabelRecord {
            raw_file: name,
            label,
        });
    }
    write_labels(&records, &dir.join("labels.jsonl"))?;
    Ok(records)
}
