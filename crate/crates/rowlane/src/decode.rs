//! Inference-time extraction of lane vertices from raw predictions, plus
//! rescaling to image coordinates and resampling onto a row grid.
//!
//! A lane is kept iff its existence confidence clears `t_lc`; each of its
//! rows yields a vertex iff the vertex confidence clears `t_vc`. The
//! column readout is the argmax of the row logits, except under the KL
//! loss where the soft-argmax mean gives sub-column precision. No curve
//! fitting or smoothing happens anywhere downstream.

use crate::datagen::LaneLabel;
use crate::error::{Error, Result};
use crate::heads::Prediction;
use crate::losses::{softargmax_stats, VertexLossType};
use crate::nn::ops::sigmoid_scalar;
use crate::util::round_half_up;

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub t_vc: f64,
    pub t_lc: f64,
    /// Which training loss produced the logits; selects the readout.
    pub loss_type: VertexLossType,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            t_vc: 0.6,
            t_lc: 0.5,
            loss_type: VertexLossType::Ce,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t_vc) || !(0.0..=1.0).contains(&self.t_lc) {
            return Err(Error::Config(
                "decode thresholds must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Vertex lists per lane slot; empty vector = no lane.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedLanes {
    pub lanes: Vec<Vec<(f64, f64)>>,
}

impl DecodedLanes {
    pub fn n_lanes(&self) -> usize {
        self.lanes.iter().filter(|l| !l.is_empty()).count()
    }
}

/// Lowest index among the maxima.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Extract vertices at network (grid) resolution: x in [0, w'), y = row
/// index.
pub fn decode(pred: &Prediction, cfg: &DecodeConfig) -> DecodedLanes {
    let (n, k, _) = pred.f.dim();
    let mut lanes = Vec::with_capacity(n);
    for i in 0..n {
        if sigmoid_scalar(pred.lc[i]) <= cfg.t_lc {
            lanes.push(Vec::new());
            continue;
        }
        let mut verts = Vec::new();
        for j in 0..k {
            if sigmoid_scalar(pred.vc[[i, j]]) <= cfg.t_vc {
                continue;
            }
            let row: Vec<f64> = pred.f.slice(ndarray::s![i, j, ..]).to_vec();
            let x = match cfg.loss_type {
                VertexLossType::Ce | VertexLossType::Pl => argmax(&row) as f64,
                VertexLossType::Kl => softargmax_stats(&row).0,
            };
            verts.push((x, j as f64));
        }
        lanes.push(verts);
    }
    DecodedLanes { lanes }
}

/// Map grid-resolution vertices onto the original image, rounding half-up.
pub fn rescale(
    lanes: &DecodedLanes,
    grid_h: usize,
    grid_w: usize,
    orig_h: u32,
    orig_w: u32,
) -> DecodedLanes {
    let sx = orig_w as f64 / grid_w as f64;
    let sy = orig_h as f64 / grid_h as f64;
    DecodedLanes {
        lanes: lanes
            .lanes
            .iter()
            .map(|lane| {
                lane.iter()
                    .map(|&(x, y)| {
                        let xr = round_half_up(x * sx).clamp(0, orig_w as i64 - 1);
                        let yr = round_half_up(y * sy).clamp(0, orig_h as i64 - 1);
                        (xr as f64, yr as f64)
                    })
                    .collect()
            })
            .collect(),
    }
}

/// X position of the polyline at row `y`, or None outside its span.
fn polyline_x_at(lane: &[(f64, f64)], y: f64) -> Option<f64> {
    let first = lane.first()?;
    let last = lane.last()?;
    if y < first.1 || y > last.1 {
        return None;
    }
    if lane.len() == 1 {
        return (y == first.1).then_some(first.0);
    }
    let idx = lane.partition_point(|&(_, py)| py < y);
    if idx == 0 {
        return Some(lane[0].0);
    }
    let (x0, y0) = lane[idx - 1];
    if idx == lane.len() {
        return Some(lane[lane.len() - 1].0);
    }
    let (x1, y1) = lane[idx];
    if y1 == y0 {
        return Some(x0);
    }
    Some(x0 + (y - y0) / (y1 - y0) * (x1 - x0))
}

/// Resample image-resolution lanes onto fixed sample rows; -2 marks rows
/// the lane does not reach.
pub fn resample_to_rows(lanes: &DecodedLanes, h_samples: &[u32]) -> Vec<Vec<i32>> {
    lanes
        .lanes
        .iter()
        .map(|lane| {
            h_samples
                .iter()
                .map(|&ys| match polyline_x_at(lane, ys as f64) {
                    Some(x) => round_half_up(x) as i32,
                    None => -2,
                })
                .collect()
        })
        .collect()
}

/// Package resampled lanes in the same shape as ground-truth labels.
pub fn to_label(lanes: &DecodedLanes, h_samples: &[u32]) -> LaneLabel {
    LaneLabel {
        h_samples: h_samples.to_vec(),
        lanes: resample_to_rows(lanes, h_samples),
    }
}
