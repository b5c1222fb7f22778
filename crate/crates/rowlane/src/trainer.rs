//! Training: AdamW with warmup + cosine schedule, label-consistent
//! augmentation, checkpointing, and benchmark evaluation plumbing.
//!
//! Experiments are described by a flat `key = value` config file with
//! dotted section prefixes. Every key has a default; unknown keys are
//! rejected. The full key set with defaults is exactly the output of
//! [`ExperimentConfig::to_text`] for [`ExperimentConfig::default`]:
//!
//! ```text
//! model.net_h = 128            network input height
//! model.net_w = 256            network input width
//! model.in_channels = 3
//! model.stage_channels = 32,64,96,96
//! model.channels = 96          decoder/reduction channel count
//! model.num_lanes = 4
//! model.shared_count = 3       lane-shared reduction stages
//! model.se_position = post     none|pre|standard|post
//! model.se_reduction = 16
//! model.dropout = 0.1
//! model.final_collapse_ratio = 4
//! train.epochs = 40
//! train.batch_size = 8
//! train.base_lr = 8e-4
//! train.warmup_epochs = 3
//! train.weight_decay = 1e-4
//! train.seed = 0
//! train.checkpoint_every = 0   steps between snapshots; 0 = final only
//! loss.vertex_loss_type = ce   ce|kl|pl
//! loss.lambda1 = 10
//! loss.lambda2 = 1
//! loss.laplace_b_gt = 1
//! aug.crop_scale_min = 0.9
//! aug.crop_scale_max = 1.0
//! aug.hflip_prob = 0.5
//! aug.brightness_jitter = 0.1
//! aug.contrast_jitter = 0.1
//! decode.t_vc = 0.6
//! decode.t_lc = 0.5
//! data.train = data/train
//! data.val =                   empty = no validation pass
//! ```

use std::f64::consts::PI;
use std::fmt::Display;
use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use ndarray::{Array3, Array4, ArrayD};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datagen::{generate_scene, read_labels, LaneLabel, SceneConfig, NO_VERTEX};
use crate::decode::{decode, rescale, resample_to_rows, DecodeConfig, DecodedLanes};
use crate::encoding::{encode_targets, RowwiseTarget};
use crate::error::{Error, Result};
use crate::heads::{DetectorConfig, LaneDetector};
use crate::losses::{compute_losses, LossConfig, LossParts};
use crate::metrics::{
    culane_eval, tusimple_eval, CulaneReport, TuSimpleReport, CULANE_IOU_THRESH,
    TUSIMPLE_LANE_ACC_THRESH, TUSIMPLE_PX_THRESH,
};
use crate::nn::{ForwardCtx, Grads, Params};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const CHECKPOINT_MAGIC: &str = "rowlane-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct AugConfig {
    /// Uniform crop scale range; 1.0 means no crop.
    pub crop_scale: (f64, f64),
    pub hflip_prob: f64,
    /// Max additive brightness shift as a fraction of full scale.
    pub brightness_jitter: f64,
    /// Max relative contrast change around mid-gray.
    pub contrast_jitter: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            crop_scale: (0.9, 1.0),
            hflip_prob: 0.5,
            brightness_jitter: 0.1,
            contrast_jitter: 0.1,
        }
    }
}

impl AugConfig {
    /// Augmentation that is the identity on both image and label.
    pub fn disabled() -> Self {
        AugConfig {
            crop_scale: (1.0, 1.0),
            hflip_prob: 0.0,
            brightness_jitter: 0.0,
            contrast_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale range ({lo}, {hi}) must satisfy 0 < min <= max <= 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config("hflip_prob must be in [0, 1]".into()));
        }
        if self.brightness_jitter < 0.0 || self.contrast_jitter < 0.0 {
            return Err(Error::Config("jitter ranges must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Steps between checkpoint snapshots; 0 saves only the final state.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            base_lr: 8e-4,
            warmup_epochs: 3,
            weight_decay: 1e-4,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be < epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Complete experiment description, parsed from flat `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: DetectorConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub aug: AugConfig,
    pub t_vc: f64,
    pub t_lc: f64,
    pub train_data: String,
    pub val_data: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: DetectorConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            aug: AugConfig::default(),
            t_vc: 0.6,
            t_lc: 0.5,
            train_data: "data/train".into(),
            val_data: String::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            t_vc: self.t_vc,
            t_lc: self.t_lc,
            loss_type: self.loss.vertex_loss_type,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.aug.validate()?;
        self.decode_config().validate()
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T>(key: &str, v: &str) -> Result<T>
        where
            T: std::str::FromStr,
            T::Err: Display,
        {
            v.parse().map_err(|e| {
                Error::Config(format!("bad value '{v}' for {key}: {e}"))
            })
        }
        match key {
            "model.net_h" => self.model.net_h = num(key, value)?,
            "model.net_w" => self.model.net_w = num(key, value)?,
            "model.in_channels" => self.model.in_channels = num(key, value)?,
            "model.stage_channels" => {
                self.model.stage_channels = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?;
            }
            "model.channels" => self.model.channels = num(key, value)?,
            "model.num_lanes" => self.model.num_lanes = num(key, value)?,
            "model.shared_count" => self.model.shared_count = num(key, value)?,
            "model.se_position" => self.model.se_position = value.parse()?,
            "model.se_reduction" => self.model.se_reduction = num(key, value)?,
            "model.dropout" => self.model.dropout_p = num(key, value)?,
            "model.final_collapse_ratio" => {
                self.model.final_collapse_ratio = num(key, value)?
            }
            "train.epochs" => self.train.epochs = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.base_lr" => self.train.base_lr = num(key, value)?,
            "train.warmup_epochs" => self.train.warmup_epochs = num(key, value)?,
            "train.weight_decay" => self.train.weight_decay = num(key, value)?,
            "train.seed" => self.train.seed = num(key, value)?,
            "train.checkpoint_every" => self.train.checkpoint_every = num(key, value)?,
            "loss.vertex_loss_type" => self.loss.vertex_loss_type = value.parse()?,
            "loss.lambda1" => self.loss.lambda1 = num(key, value)?,
            "loss.lambda2" => self.loss.lambda2 = num(key, value)?,
            "loss.laplace_b_gt" => self.loss.laplace_b_gt = num(key, value)?,
            "aug.crop_scale_min" => self.aug.crop_scale.0 = num(key, value)?,
            "aug.crop_scale_max" => self.aug.crop_scale.1 = num(key, value)?,
            "aug.hflip_prob" => self.aug.hflip_prob = num(key, value)?,
            "aug.brightness_jitter" => self.aug.brightness_jitter = num(key, value)?,
            "aug.contrast_jitter" => self.aug.contrast_jitter = num(key, value)?,
            "decode.t_vc" => self.t_vc = num(key, value)?,
            "decode.t_lc" => self.t_lc = num(key, value)?,
            "data.train" => self.train_data = value.to_string(),
            "data.val" => self.val_data = value.to_string(),
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")))
            }
        }
        Ok(())
    }

    /// Parse `key = value` text. Blank lines and `#` comments are ignored;
    /// unknown keys and malformed values are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Serialize every key; `parse(to_text(c))` reproduces `c`.
    pub fn to_text(&self) -> String {
        let chans = self
            .model
            .stage_channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "model.net_h = {}\n\
             model.net_w = {}\n\
             model.in_channels = {}\n\
             model.stage_channels = {}\n\
             model.channels = {}\n\
             model.num_lanes = {}\n\
             model.shared_count = {}\n\
             model.se_position = {}\n\
             model.se_reduction = {}\n\
             model.dropout = {}\n\
             model.final_collapse_ratio = {}\n\
             train.epochs = {}\n\
             train.batch_size = {}\n\
             train.base_lr = {}\n\
             train.warmup_epochs = {}\n\
             train.weight_decay = {}\n\
             train.seed = {}\n\
             train.checkpoint_every = {}\n\
             loss.vertex_loss_type = {}\n\
             loss.lambda1 = {}\n\
             loss.lambda2 = {}\n\
             loss.laplace_b_gt = {}\n\
             aug.crop_scale_min = {}\n\
             aug.crop_scale_max = {}\n\
             aug.hflip_prob = {}\n\
             aug.brightness_jitter = {}\n\
             aug.contrast_jitter = {}\n\
             decode.t_vc = {}\n\
             decode.t_lc = {}\n\
             data.train = {}\n\
             data.val = {}\n",
            self.model.net_h,
            self.model.net_w,
            self.model.in_channels,
            chans,
            self.model.channels,
            self.model.num_lanes,
            self.model.shared_count,
            self.model.se_position,
            self.model.se_reduction,
            self.model.dropout_p,
            self.model.final_collapse_ratio,
            self.train.epochs,
            self.train.batch_size,
            self.train.base_lr,
            self.train.warmup_epochs,
            self.train.weight_decay,
            self.train.seed,
            self.train.checkpoint_every,
            self.loss.vertex_loss_type,
            self.loss.lambda1,
            self.loss.lambda2,
            self.loss.laplace_b_gt,
            self.aug.crop_scale.0,
            self.aug.crop_scale.1,
            self.aug.hflip_prob,
            self.aug.brightness_jitter,
            self.aug.contrast_jitter,
            self.t_vc,
            self.t_lc,
            self.train_data,
            self.val_data,
        )
    }
}

/// Learning rate at `step`: linear ramp 0 -> base over `warmup_steps`,
/// then cosine decay to 0 over the remaining steps.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    assert!(warmup_steps < total_steps, "warmup must end before training");
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (PI * progress.min(1.0)).cos())
}

/// Decoupled-weight-decay Adam. Moments are index-aligned with the
/// parameter store; decay applies only to decay-flagged tensors.
pub struct AdamW {
    weight_decay: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &Params<f64>, weight_decay: f64) -> Self {
        let zeros: Vec<ArrayD<f64>> = params
            .entries()
            .iter()
            .map(|e| ArrayD::zeros(e.value.raw_dim()))
            .collect();
        AdamW {
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params<f64>, grads: &Grads<f64>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for id in params.ids() {
            let (trainable, decay) = {
                let e = params.entry(id);
                (e.trainable, e.decay)
            };
            if !trainable {
                continue;
            }
            let g = grads.get(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            m.zip_mut_with(g, |mi, &gi| {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi
            });
            v.zip_mut_with(g, |vi, &gi| {
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi
            });
            let p = params.get_mut(id);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| {
                    let mh = mi / bc1;
                    let vh = vi / bc2;
                    *pi -= lr * mh / (vh.sqrt() + ADAM_EPS);
                });
            if decay && self.weight_decay > 0.0 {
                let wd = lr * self.weight_decay;
                p.mapv_inplace(|pi| pi - wd * pi);
            }
        }
    }
}

/// In-memory dataset: images plus exact labels, all at one resolution.
pub struct Dataset {
    pub images: Vec<RgbImage>,
    pub labels: Vec<LaneLabel>,
    pub height: u32,
    pub width: u32,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn new(images: Vec<RgbImage>, labels: Vec<LaneLabel>) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Config(format!(
                "dataset needs matching nonempty image/label lists, got {}/{}",
                images.len(),
                labels.len()
            )));
        }
        let (width, height) = images[0].dimensions();
        if images.iter().any(|im| im.dimensions() != (width, height)) {
            return Err(Error::Config("dataset images differ in size".into()));
        }
        Ok(Dataset {
            images,
            labels,
            height,
            width,
        })
    }

    /// Generate scenes `start..start+count` directly, no disk round trip.
    pub fn from_scenes(cfg: &SceneConfig, start: u64, count: u64) -> Result<Self> {
        let mut images = Vec::with_capacity(count as usize);
        let mut labels = Vec::with_capacity(count as usize);
        for index in start..start + count {
            let (img, label) = generate_scene(cfg, index)?;
            images.push(img);
            labels.push(label);
        }
        Dataset::new(images, labels)
    }
}

/// Load a generated dataset directory (labels.jsonl + referenced images).
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let records = read_labels(&dir.join("labels.jsonl"))?;
    let mut images = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for rec in records {
        let path = dir.join(&rec.raw_file);
        let img = image::open(&path).map_err(|e| Error::image(&path, e))?;
        images.push(img.to_rgb8());
        labels.push(rec.label);
    }
    Dataset::new(images, labels)
}

/// X of a labeled lane at fractional row `y`, interpolating only between
/// consecutive valid samples so gaps stay gaps.
fn lane_x_at_row(lane: &[i32], h_samples: &[u32], y: f64) -> Option<f64> {
    const TOL: f64 = 1e-9;
    for (i, &hs) in h_samples.iter().enumerate() {
        if (y - hs as f64).abs() <= TOL {
            return (lane[i] != NO_VERTEX).then_some(lane[i] as f64);
        }
    }
    let idx = h_samples.partition_point(|&hs| (hs as f64) < y);
    if idx == 0 || idx == h_samples.len() {
        return None;
    }
    let (x0, x1) = (lane[idx - 1], lane[idx]);
    if x0 == NO_VERTEX || x1 == NO_VERTEX {
        return None;
    }
    let (y0, y1) = (h_samples[idx - 1] as f64, h_samples[idx] as f64);
    Some(x0 as f64 + (y - y0) / (y1 - y0) * (x1 as f64 - x0 as f64))
}

/// Crop the window at (x0, y0) sized (cw, ch) and zoom back to full size,
/// with the label transformed through the same pixel-center mapping.
fn crop_zoom(
    img: &RgbImage,
    label: &LaneLabel,
    x0: u32,
    y0: u32,
    cw: u32,
    ch: u32,
) -> (RgbImage, LaneLabel) {
    let (w, h) = img.dimensions();
    let out = imageops::resize(
        &*imageops::crop_imm(img, x0, y0, cw, ch),
        w,
        h,
        FilterType::Triangle,
    );
    let sx = w as f64 / cw as f64;
    let sy = h as f64 / ch as f64;
    let lanes = label
        .lanes
        .iter()
        .map(|lane| {
            label
                .h_samples
                .iter()
                .map(|&ys| {
                    // Source row for output row ys, then the same map on x.
                    let src_y = (ys as f64 + 0.5) / sy + y0 as f64 - 0.5;
                    match lane_x_at_row(lane, &label.h_samples, src_y) {
                        Some(x) => {
                            let xr = crate::util::round_half_up(
                                (x + 0.5 - x0 as f64) * sx - 0.5,
                            );
                            if (0..w as i64).contains(&xr) {
                                xr as i32
                            } else {
                                NO_VERTEX
                            }
                        }
                        None => NO_VERTEX,
                    }
                })
                .collect()
        })
        .collect();
    (
        out,
        LaneLabel {
            h_samples: label.h_samples.clone(),
            lanes,
        },
    )
}

fn hflip_label(label: &LaneLabel, width: u32) -> LaneLabel {
    LaneLabel {
        h_samples: label.h_samples.clone(),
        lanes: label
            .lanes
            .iter()
            .map(|lane| {
                lane.iter()
                    .map(|&x| {
                        if x == NO_VERTEX {
                            NO_VERTEX
                        } else {
                            width as i32 - 1 - x
                        }
                    })
                    .collect()
            })
            .collect(),
    }
}

/// Random crop-zoom, horizontal flip, and photometric jitter. Geometric
/// ops transform the label through the same mapping; photometric ops
/// leave it untouched. Lane-slot assignment happens later, at encoding,
/// so flipped host lanes land in mirrored slots automatically.
pub fn augment(
    img: &RgbImage,
    label: &LaneLabel,
    cfg: &AugConfig,
    rng: &mut ChaCha8Rng,
) -> (RgbImage, LaneLabel) {
    let (w, h) = img.dimensions();
    let scale = rng.gen_range(cfg.crop_scale.0..=cfg.crop_scale.1);
    let (mut img, mut label) = if scale < 1.0 {
        let cw = ((w as f64 * scale).round() as u32).max(16).min(w);
        let ch = ((h as f64 * scale).round() as u32).max(16).min(h);
        let x0 = rng.gen_range(0..=w - cw);
        let y0 = rng.gen_range(0..=h - ch);
        crop_zoom(img, label, x0, y0, cw, ch)
    } else {
        (img.clone(), label.clone())
    };

    if cfg.hflip_prob > 0.0 && rng.gen_bool(cfg.hflip_prob) {
        img = imageops::flip_horizontal(&img);
        label = hflip_label(&label, w);
    }

    if cfg.brightness_jitter > 0.0 || cfg.contrast_jitter > 0.0 {
        let b = rng.gen_range(-cfg.brightness_jitter..=cfg.brightness_jitter) * 255.0;
        let c = 1.0 + rng.gen_range(-cfg.contrast_jitter..=cfg.contrast_jitter);
        for p in img.pixels_mut() {
            for ch in 0..3 {
                let v = (p.0[ch] as f64 - 128.0) * c + 128.0 + b;
                p.0[ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    (img, label)
}

/// CHW tensor in [0, 1], resized to the network input size if needed.
pub fn image_to_input(img: &RgbImage, net_h: usize, net_w: usize) -> Array3<f64> {
    let resized;
    let src = if (img.width() as usize, img.height() as usize) == (net_w, net_h) {
        img
    } else {
        resized = imageops::resize(img, net_w as u32, net_h as u32, FilterType::Triangle);
        &resized
    };
    Array3::from_shape_fn((3, net_h, net_w), |(c, y, x)| {
        src.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    })
}

pub fn batch_to_input(images: &[&RgbImage], net_h: usize, net_w: usize) -> Array4<f64> {
    let mut out = Array4::zeros((images.len(), 3, net_h, net_w));
    for (b, img) in images.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), b)
            .assign(&image_to_input(img, net_h, net_w));
    }
    out
}

fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("manifest")
}

/// Save parameters as raw little-endian f64 plus a text manifest holding
/// the config and the name/shape/offset layout.
pub fn save_checkpoint(
    bin: &Path,
    params: &Params<f64>,
    cfg: &ExperimentConfig,
) -> Result<()> {
    let mut blob = Vec::new();
    let mut manifest = String::new();
    manifest.push_str(CHECKPOINT_MAGIC);
    manifest.push_str("\n[config]\n");
    manifest.push_str(&cfg.to_text());
    manifest.push_str("[params]\n");
    let mut offset = 0usize;
    for e in params.entries() {
        let shape = e
            .value
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let count = e.value.len();
        manifest.push_str(&format!(
            "{} {} {} {} trainable={} decay={}\n",
            e.name, shape, offset, count, e.trainable as u8, e.decay as u8
        ));
        for &v in e.value.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += count;
    }
    fs::write(bin, blob).map_err(|e| Error::io(bin, e))?;
    let mpath = manifest_path(bin);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Rebuild the model described by a checkpoint and restore its exact
/// parameter values (including batch-norm running statistics).
pub fn load_checkpoint(bin: &Path) -> Result<(ExperimentConfig, LaneDetector, Params<f64>)> {
    let mpath = manifest_path(bin);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Checkpoint(format!(
            "{} is not a recognized manifest",
            mpath.display()
        )));
    }
    if lines.next() != Some("[config]") {
        return Err(Error::Checkpoint("missing [config] section".into()));
    }
    let mut config_text = String::new();
    let mut entries = Vec::new();
    let mut in_params = false;
    for line in lines {
        if line == "[params]" {
            in_params = true;
            continue;
        }
        if in_params {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 6 {
                return Err(Error::Checkpoint(format!("bad manifest line '{line}'")));
            }
            let shape: Vec<usize> = parts[1]
                .split('x')
                .map(|d| {
                    d.parse().map_err(|_| {
                        Error::Checkpoint(format!("bad shape '{}'", parts[1]))
                    })
                })
                .collect::<Result<_>>()?;
            let offset: usize = parts[2]
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad offset '{}'", parts[2])))?;
            let count: usize = parts[3]
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad count '{}'", parts[3])))?;
            entries.push((parts[0].to_string(), shape, offset, count));
        } else {
            config_text.push_str(line);
            config_text.push('\n');
        }
    }
    let cfg = ExperimentConfig::parse(&config_text)?;

    let blob = fs::read(bin).map_err(|e| Error::io(bin, e))?;
    if blob.len() % 8 != 0 {
        return Err(Error::Checkpoint("weight blob is not a multiple of 8 bytes".into()));
    }
    let scalars: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = LaneDetector::new(&mut params, &mut rng, &cfg.model)?;
    if params.len() != entries.len() {
        return Err(Error::Checkpoint(format!(
            "model has {} tensors, manifest lists {}",
            params.len(),
            entries.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for (id, (name, shape, offset, count)) in ids.into_iter().zip(&entries) {
        if params.entry(id).name != *name {
            return Err(Error::Checkpoint(format!(
                "tensor order mismatch: expected {}, manifest has {name}",
                params.entry(id).name
            )));
        }
        let value = params.get_mut(id);
        if value.shape() != shape.as_slice() || value.len() != *count {
            return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
        }
        if offset + count > scalars.len() {
            return Err(Error::Checkpoint(format!("weights truncated at {name}")));
        }
        for (dst, &src) in value.iter_mut().zip(&scalars[*offset..offset + count]) {
            *dst = src;
        }
    }
    Ok((cfg, model, params))
}

/// One line of the per-epoch JSONL metrics log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub vertex_loss: f64,
    pub vertex_conf_loss: f64,
    pub lane_conf_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    pub final_loss: f64,
    pub log: Vec<EpochLog>,
}

/// Owns the model, optimizer, and RNG for one training run.
pub struct TrainSession {
    pub cfg: ExperimentConfig,
    pub model: LaneDetector,
    pub params: Params<f64>,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub global_step: usize,
}

impl TrainSession {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let model = LaneDetector::new(&mut params, &mut rng, &cfg.model)?;
        let opt = AdamW::new(&params, cfg.train.weight_decay);
        Ok(TrainSession {
            cfg: cfg.clone(),
            model,
            params,
            opt,
            rng,
            global_step: 0,
        })
    }

    /// One optimization step on a prepared batch. Commits batch-norm
    /// running statistics after the parameter update.
    pub fn step_batch(
        &mut self,
        x: &Array4<f64>,
        targets: &[RowwiseTarget],
        lr: f64,
    ) -> Result<LossParts> {
        let mut ctx = ForwardCtx::train(&mut self.rng);
        let (pred, cache) = self.model.fwd(&self.params, &mut ctx, x)?;
        let (parts, gpred) = compute_losses(&pred, targets, &self.cfg.loss);
        if !parts.total.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {} at step {}",
                parts.total, self.global_step
            )));
        }
        let updates = std::mem::take(&mut ctx.buffer_updates);
        drop(ctx);
        let mut grads = self.params.zero_grads();
        self.model.bwd(&self.params, &mut grads, &cache, &gpred);
        self.opt.step(&mut self.params, &grads, lr);
        for (id, value) in updates {
            *self.params.get_mut(id) = value;
        }
        self.global_step += 1;
        Ok(parts)
    }

    /// Augment, resize, and encode one batch of dataset indices.
    pub fn prepare_batch(
        &mut self,
        data: &Dataset,
        idx: &[usize],
        augmented: bool,
    ) -> (Array4<f64>, Vec<RowwiseTarget>) {
        let m = &self.cfg.model;
        let mut inputs = Array4::zeros((idx.len(), 3, m.net_h, m.net_w));
        let mut targets = Vec::with_capacity(idx.len());
        for (b, &i) in idx.iter().enumerate() {
            let (img, label) = if augmented {
                augment(&data.images[i], &data.labels[i], &self.cfg.aug, &mut self.rng)
            } else {
                (data.images[i].clone(), data.labels[i].clone())
            };
            inputs
                .index_axis_mut(ndarray::Axis(0), b)
                .assign(&image_to_input(&img, m.net_h, m.net_w));
            targets.push(encode_targets(
                &label,
                data.height,
                data.width,
                m.net_h,
                m.net_w,
                m.num_lanes,
            ));
        }
        (inputs, targets)
    }

    /// Full training loop. Writes `metrics.jsonl` plus checkpoints into
    /// `out_dir` when given; runs purely in memory otherwise.
    pub fn run(
        &mut self,
        data: &Dataset,
        val: Option<&Dataset>,
        out_dir: Option<&Path>,
    ) -> Result<TrainOutcome> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let n = data.len();
        let bs = self.cfg.train.batch_size.min(n);
        let steps_per_epoch = n.div_ceil(bs);
        let total_steps = self.cfg.train.epochs * steps_per_epoch;
        let warmup_steps = self.cfg.train.warmup_epochs * steps_per_epoch;
        let mut log = Vec::with_capacity(self.cfg.train.epochs);
        let mut log_file = match out_dir {
            Some(dir) => {
                let path = dir.join("metrics.jsonl");
                Some(
                    fs::File::create(&path).map_err(|e| Error::io(&path, e))?,
                )
            }
            None => None,
        };
        let mut final_loss = f64::NAN;
        let mut indices: Vec<usize> = (0..n).collect();
        for epoch in 0..self.cfg.train.epochs {
            indices.shuffle(&mut self.rng);
            let mut epoch_parts = Vec::with_capacity(steps_per_epoch);
            let mut lr = 0.0;
            for chunk in indices.chunks(bs) {
                lr = lr_at(self.global_step, total_steps, warmup_steps, self.cfg.train.base_lr);
                let (x, targets) = self.prepare_batch(data, chunk, true);
                let parts = self.step_batch(&x, &targets, lr).map_err(|e| match e {
                    Error::Training(msg) => Error::Training(format!(
                        "{msg} (epoch {}, batch starting at dataset index {})",
                        epoch + 1,
                        chunk[0]
                    )),
                    other => other,
                })?;
                epoch_parts.push(parts);
                if self.cfg.train.checkpoint_every > 0
                    && self.global_step % self.cfg.train.checkpoint_every == 0
                {
                    if let Some(dir) = out_dir {
                        save_checkpoint(
                            &dir.join(format!("step{:06}.bin", self.global_step)),
                            &self.params,
                            &self.cfg,
                        )?;
                    }
                }
            }
            let mean = |f: fn(&LossParts) -> f64| {
                epoch_parts.iter().map(f).sum::<f64>() / epoch_parts.len() as f64
            };
            final_loss = mean(|p| p.total);
            let (val_accuracy, val_f1) = match val {
                Some(vd) => {
                    let decoded = self.predict(vd)?;
                    let acc = tusimple_from_decoded(&decoded, &vd.labels)?.accuracy;
                    let f1 = culane_from_decoded(&decoded, vd)?.f1;
                    (Some(acc), Some(f1))
                }
                None => (None, None),
            };
            let entry = EpochLog {
                epoch: epoch + 1,
                step: self.global_step,
                lr,
                train_loss: final_loss,
                vertex_loss: mean(|p| p.vl),
                vertex_conf_loss: mean(|p| p.vc),
                lane_conf_loss: mean(|p| p.lc),
                val_accuracy,
                val_f1,
            };
            if let Some(f) = log_file.as_mut() {
                let line = serde_json::to_string(&entry).expect("log serialization");
                writeln!(f, "{line}").map_err(|e| {
                    Error::io(out_dir.unwrap().join("metrics.jsonl"), e)
                })?;
            }
            log.push(entry);
        }
        if let Some(dir) = out_dir {
            save_checkpoint(&dir.join("final.bin"), &self.params, &self.cfg)?;
        }
        Ok(TrainOutcome {
            steps: self.global_step,
            final_loss,
            log,
        })
    }

    /// Decode every dataset image at original resolution (eval mode).
    pub fn predict(&self, data: &Dataset) -> Result<Vec<DecodedLanes>> {
        predict_decoded(
            &self.model,
            &self.params,
            data,
            &self.cfg.decode_config(),
            self.cfg.train.batch_size,
        )
    }
}

/// Run the model over a dataset and decode to original-resolution lanes.
pub fn predict_decoded(
    model: &LaneDetector,
    params: &Params<f64>,
    data: &Dataset,
    dec: &DecodeConfig,
    batch_size: usize,
) -> Result<Vec<DecodedLanes>> {
    let cfg = &model.cfg;
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let mut out = Vec::with_capacity(data.len());
    let bs = batch_size.max(1);
    for chunk_start in (0..data.len()).step_by(bs) {
        let end = (chunk_start + bs).min(data.len());
        let imgs: Vec<&RgbImage> = data.images[chunk_start..end].iter().collect();
        let x = batch_to_input(&imgs, cfg.net_h, cfg.net_w);
        let mut ctx = ForwardCtx::eval();
        let (pred, _) = model.fwd(params, &mut ctx, &x)?;
        for b in 0..imgs.len() {
            let lanes = decode(&pred.image(b), dec);
            out.push(rescale(&lanes, gh, gw, data.height, data.width));
        }
    }
    Ok(out)
}

fn tusimple_from_decoded(
    decoded: &[DecodedLanes],
    labels: &[LaneLabel],
) -> Result<TuSimpleReport> {
    let preds: Vec<Vec<Vec<i32>>> = decoded
        .iter()
        .zip(labels)
        .map(|(d, l)| resample_to_rows(d, &l.h_samples))
        .collect();
    tusimple_eval(&preds, labels, TUSIMPLE_PX_THRESH, TUSIMPLE_LANE_ACC_THRESH)
}

fn culane_from_decoded(decoded: &[DecodedLanes], data: &Dataset) -> Result<CulaneReport> {
    let preds: Vec<Vec<Vec<(f64, f64)>>> =
        decoded.iter().map(|d| d.lanes.clone()).collect();
    let gts: Vec<Vec<Vec<(f64, f64)>>> =
        data.labels.iter().map(|l| l.to_polylines()).collect();
    culane_eval(
        &preds,
        &gts,
        data.height as usize,
        data.width as usize,
        CULANE_IOU_THRESH,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    TuSimple,
    Culane,
}

impl std::str::FromStr for Benchmark {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tusimple" => Ok(Benchmark::TuSimple),
            "culane" => Ok(Benchmark::Culane),
            other => Err(Error::Config(format!(
                "unknown benchmark '{other}' (expected tusimple|culane)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum BenchReport {
    TuSimple(TuSimpleReport),
    Culane(CulaneReport),
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// Plain-text summary table.
    pub fn summary(&self) -> String {
        match self {
            BenchReport::TuSimple(r) => format!(
                "metric     value\naccuracy   {:.4}\nfp_rate    {:.4}\nfn_rate    {:.4}\n",
                r.accuracy, r.fp_rate, r.fn_rate
            ),
            BenchReport::Culane(r) => format!(
                "metric     value\nprecision  {:.4}\nrecall     {:.4}\nf1         {:.4}\ntp         {}\nfp         {}\nfn         {}\n",
                r.precision, r.recall, r.f1, r.tp, r.fp, r.fn_count
            ),
        }
    }
}

/// Decode a dataset and score it under the chosen benchmark protocol.
pub fn evaluate(
    model: &LaneDetector,
    params: &Params<f64>,
    data: &Dataset,
    dec: &DecodeConfig,
    benchmark: Benchmark,
    batch_size: usize,
) -> Result<BenchReport> {
    let decoded = predict_decoded(model, params, data, dec, batch_size)?;
    match benchmark {
        Benchmark::TuSimple => Ok(BenchReport::TuSimple(tusimple_from_decoded(
            &decoded, &data.labels,
        )?)),
        Benchmark::Culane => {
            let report = culane_from_decoded(&decoded, data)?;
            Ok(BenchReport::Culane(report))
        }
    }
}

/// End-to-end entry point: load datasets named by the config and train.
pub fn train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainOutcome> {
    let data = load_dataset(Path::new(&cfg.train_data))?;
    let val = if cfg.val_data.is_empty() {
        None
    } else {
        Some(load_dataset(Path::new(&cfg.val_data))?)
    };
    let mut session = TrainSession::new(cfg)?;
    session.run(&data, val.as_ref(), Some(out_dir))
}
