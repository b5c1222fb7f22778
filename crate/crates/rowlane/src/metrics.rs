//! Benchmark metrics: row-anchor vertex accuracy with FP/FN lane rates,
//! and an IoU-based F1 over lanes rasterized as 30-px-wide bands.
//!
//! Vertex accuracy compares per-row x positions on the label's sample
//! rows; the F1 protocol rasterizes each lane polyline with flat caps
//! (perpendicular bands around each segment) and matches lanes greedily
//! by descending IoU with a strict threshold.

use ndarray::Array2;
use serde::Serialize;

use crate::datagen::LaneLabel;
use crate::error::{Error, Result};

pub const TUSIMPLE_PX_THRESH: f64 = 20.0;
pub const TUSIMPLE_LANE_ACC_THRESH: f64 = 0.85;
pub const CULANE_LANE_WIDTH: f64 = 30.0;
pub const CULANE_IOU_THRESH: f64 = 0.5;

#[derive(Debug, Clone, Serialize)]
pub struct TuSimpleImage {
    pub correct: usize,
    pub gt_vertices: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TuSimpleReport {
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub per_image: Vec<TuSimpleImage>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CulaneImage {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CulaneReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
    pub per_image: Vec<CulaneImage>,
}

/// A lane is present iff it has at least one real (non-sentinel) vertex.
fn lane_present(xs: &[i32]) -> bool {
    xs.iter().any(|&x| x >= 0)
}

/// Correct-vertex count between a prediction row-list and a gt row-list.
fn correct_vertices(pred: &[i32], gt: &[i32], px_thresh: f64) -> usize {
    pred.iter()
        .zip(gt.iter())
        .filter(|&(&p, &g)| p >= 0 && g >= 0 && ((p - g) as f64).abs() < px_thresh)
        .count()
}

/// Row-anchor evaluation. `preds[i]` must be resampled onto
/// `gts[i].h_samples` (same row grid, -2 sentinels).
pub fn tusimple_eval(
    preds: &[Vec<Vec<i32>>],
    gts: &[LaneLabel],
    px_thresh: f64,
    lane_acc_thresh: f64,
) -> Result<TuSimpleReport> {
    if preds.len() != gts.len() {
        return Err(Error::Validation {
            line: 0,
            message: format!(
                "{} predictions for {} ground-truth images",
                preds.len(),
                gts.len()
            ),
        });
    }
    let mut total_correct = 0usize;
    let mut total_gt_vertices = 0usize;
    let mut total_fp = 0usize;
    let mut total_fn = 0usize;
    let mut total_pred_lanes = 0usize;
    let mut total_gt_lanes = 0usize;
    let mut per_image = Vec::with_capacity(gts.len());

    for (pred, gt) in preds.iter().zip(gts.iter()) {
        let pred_lanes: Vec<&Vec<i32>> = pred.iter().filter(|l| lane_present(l)).collect();
        let gt_lanes: Vec<&Vec<i32>> = gt.lanes.iter().filter(|l| lane_present(l)).collect();
        total_pred_lanes += pred_lanes.len();
        total_gt_lanes += gt_lanes.len();

        // Greedy matching by correct-vertex count, each lane used once.
        let mut pairs = Vec::new();
        for (pi, p) in pred_lanes.iter().enumerate() {
            for (gi, g) in gt_lanes.iter().enumerate() {
                let c = correct_vertices(p, g, px_thresh);
                if c > 0 {
                    pairs.push((c, pi, gi));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut pred_used = vec![false; pred_lanes.len()];
        let mut gt_used = vec![false; gt_lanes.len()];
        let mut img_correct = 0usize;
        let mut img_fp = 0usize;
        let mut img_fn = 0usize;
        for (c, pi, gi) in pairs {
            if pred_used[pi] || gt_used[gi] {
                continue;
            }
            pred_used[pi] = true;
            gt_used[gi] = true;
            img_correct += c;
            let gt_count = gt_lanes[gi].iter().filter(|&&x| x >= 0).count();
            if (c as f64) < lane_acc_thresh * gt_count as f64 {
                // Matched but too inaccurate: penalized on both sides.
                img_fp += 1;
                img_fn += 1;
            }
        }
        img_fp += pred_used.iter().filter(|&&u| !u).count();
        img_fn += gt_used.iter().filter(|&&u| !u).count();

        let img_gt_vertices: usize = gt_lanes
            .iter()
            .map(|l| l.iter().filter(|&&x| x >= 0).count())
            .sum();
        total_correct += img_correct;
        total_gt_vertices += img_gt_vertices;
        total_fp += img_fp;
        total_fn += img_fn;
        per_image.push(TuSimpleImage {
            correct: img_correct,
            gt_vertices: img_gt_vertices,
            fp: img_fp,
            fn_count: img_fn,
        });
    }

    let ratio = |num: usize, den: usize, empty: f64| {
        if den == 0 {
            empty
        } else {
            num as f64 / den as f64
        }
    };
    Ok(TuSimpleReport {
        accuracy: ratio(total_correct, total_gt_vertices, 1.0),
        fp_rate: ratio(total_fp, total_pred_lanes, 0.0),
        fn_rate: ratio(total_fn, total_gt_lanes, 0.0),
        per_image,
    })
}

/// Rasterize a lane polyline as a band of the given total width: a pixel
/// is set iff its center lies within width/2 of some segment, measured
/// perpendicular to the segment (flat caps, no end discs).
pub fn render_lane_mask(
    lane: &[(f64, f64)],
    height: usize,
    width: usize,
    band_width: f64,
) -> Array2<u8> {
    let mut mask = Array2::<u8>::zeros((height, width));
    let half = band_width / 2.0;
    for seg in lane.windows(2) {
        let (x0, y0) = seg[0];
        let (x1, y1) = seg[1];
        let dx = x1 - x0;
        let dy = y1 - y0;
        let len2 = dx * dx + dy * dy;
        if len2 == 0.0 {
            continue;
        }
        let pad = half + 1.0;
        let cx_lo = ((x0.min(x1) - pad).floor().max(0.0)) as usize;
        let cx_hi = ((x0.max(x1) + pad).ceil().min(width as f64)) as usize;
        let cy_lo = ((y0.min(y1) - pad).floor().max(0.0)) as usize;
        let cy_hi = ((y0.max(y1) + pad).ceil().min(height as f64)) as usize;
        for r in cy_lo..cy_hi {
            let py = r as f64 + 0.5;
            for c in cx_lo..cx_hi {
                let px = c as f64 + 0.5;
                let t = ((px - x0) * dx + (py - y0) * dy) / len2;
                if !(0.0..=1.0).contains(&t) {
                    continue;
                }
                let ex = px - (x0 + t * dx);
                let ey = py - (y0 + t * dy);
                if (ex * ex + ey * ey).sqrt() <= half {
                    mask[[r, c]] = 1;
                }
            }
        }
    }
    mask
}

/// Intersection over union of two binary masks; 0 when the union is empty.
pub fn mask_iou(a: &Array2<u8>, b: &Array2<u8>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let xs = x != 0;
        let ys = y != 0;
        if xs && ys {
            inter += 1;
        }
        if xs || ys {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU-F1 evaluation on lanes given as image-resolution vertex lists.
pub fn culane_eval(
    preds: &[Vec<Vec<(f64, f64)>>],
    gts: &[Vec<Vec<(f64, f64)>>],
    height: usize,
    width: usize,
    iou_thresh: f64,
) -> Result<CulaneReport> {
    if preds.len() != gts.len() {
        return Err(Error::Validation {
            line: 0,
            message: format!(
                "{} predictions for {} ground-truth images",
                preds.len(),
                gts.len()
            ),
        });
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fncnt = 0usize;
    let mut per_image = Vec::with_capacity(gts.len());
    for (pred, gt) in preds.iter().zip(gts.iter()) {
        let pred_masks: Vec<Array2<u8>> = pred
            .iter()
            .filter(|l| l.len() >= 2)
            .map(|l| render_lane_mask(l, height, width, CULANE_LANE_WIDTH))
            .collect();
        let gt_masks: Vec<Array2<u8>> = gt
            .iter()
            .filter(|l| l.len() >= 2)
            .map(|l| render_lane_mask(l, height, width, CULANE_LANE_WIDTH))
            .collect();
        let mut pairs = Vec::new();
        for (pi, pm) in pred_masks.iter().enumerate() {
            for (gi, gm) in gt_masks.iter().enumerate() {
                let iou = mask_iou(pm, gm);
                if iou > iou_thresh {
                    pairs.push((iou, pi, gi));
                }
            }
        }
        pairs.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut pred_used = vec![false; pred_masks.len()];
        let mut gt_used = vec![false; gt_masks.len()];
        let mut img_tp = 0usize;
        for (_, pi, gi) in pairs {
            if pred_used[pi] || gt_used[gi] {
                continue;
            }
            pred_used[pi] = true;
            gt_used[gi] = true;
            img_tp += 1;
        }
        let img_fp = pred_used.iter().filter(|&&u| !u).count();
        let img_fn = gt_used.iter().filter(|&&u| !u).count();
        tp += img_tp;
        fp += img_fp;
        fncnt += img_fn;
        per_image.push(CulaneImage {
            tp: img_tp,
            fp: img_fp,
            fn_count: img_fn,
        });
    }
    let precision = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fncnt == 0 {
        1.0
    } else {
        tp as f64 / (tp + fncnt) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(CulaneReport {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_count: fncnt,
        per_image,
    })
}
