//! Conversion of original-resolution labels into network-resolution
//! row-wise supervision, including lane slot assignment.
//!
//! The supervision grid has K = net_h/2 rows and w' = net_w/2 columns.
//! Original coordinates map to grid coordinates by center-aligned scaling:
//! col(x) = round((x + 0.5) * w'/W - 0.5). Unlike round(x * w'/W), this
//! commutes with horizontal flipping (x -> W-1-x maps to col -> w'-1-col)
//! and never produces rounding ties for integer x at power-of-two ratios.

use ndarray::{Array1, Array2};

use crate::datagen::{LaneLabel, NO_VERTEX};
use crate::util::round_half_up;

/// One lane as runs of consecutively labeled points. y increases strictly
/// within and across runs; gaps between runs carry no supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct LanePoints {
    pub runs: Vec<Vec<(f64, f64)>>,
}

impl LanePoints {
    pub fn is_empty(&self) -> bool {
        self.runs.iter().all(|r| r.is_empty())
    }

    pub fn points(&self) -> impl Iterator<Item = &(f64, f64)> {
        self.runs.iter().flatten()
    }
}

/// Split each labeled lane into runs of consecutive valid samples.
pub fn label_to_points(label: &LaneLabel) -> Vec<LanePoints> {
    label
        .lanes
        .iter()
        .map(|lane| {
            let mut runs = Vec::new();
            let mut current: Vec<(f64, f64)> = Vec::new();
            for (&x, &y) in lane.iter().zip(&label.h_samples) {
                if x == NO_VERTEX {
                    if !current.is_empty() {
                        runs.push(std::mem::take(&mut current));
                    }
                } else {
                    current.push((x as f64, y as f64));
                }
            }
            if !current.is_empty() {
                runs.push(current);
            }
            LanePoints { runs }
        })
        .collect()
}

/// Mirror lanes horizontally: x -> (W-1) - x.
pub fn flip_points(lanes: &[LanePoints], image_width: f64) -> Vec<LanePoints> {
    lanes
        .iter()
        .map(|lane| LanePoints {
            runs: lane
                .runs
                .iter()
                .map(|run| {
                    run.iter()
                        .map(|&(x, y)| (image_width - 1.0 - x, y))
                        .collect()
                })
                .collect(),
        })
        .collect()
}

/// Row-wise supervision at network resolution for N lane slots.
#[derive(Debug, Clone, PartialEq)]
pub struct RowwiseTarget {
    /// Column index per (slot, row); -1 where no vertex.
    pub x_gt: Array2<i32>,
    /// Sub-column real position per (slot, row); used by the piecewise
    /// linear loss. -1.0 where no vertex.
    pub x_real: Array2<f64>,
    /// 1 iff the slot has a vertex on that row.
    pub e: Array2<u8>,
    /// 1 iff the slot has any vertex at all.
    pub lane_exists: Array1<u8>,
    pub wp: usize,
}

impl RowwiseTarget {
    pub fn empty(n: usize, k: usize, wp: usize) -> Self {
        RowwiseTarget {
            x_gt: Array2::from_elem((n, k), -1),
            x_real: Array2::from_elem((n, k), -1.0),
            e: Array2::zeros((n, k)),
            lane_exists: Array1::zeros(n),
            wp,
        }
    }

    pub fn n(&self) -> usize {
        self.x_gt.dim().0
    }

    pub fn k(&self) -> usize {
        self.x_gt.dim().1
    }
}

/// Assign lanes to slots alternating outward from the vertical center
/// line: nearest-left -> 0, nearest-right -> 1, second-left -> 2, ...
/// A lane's side and distance come from the mean x of its points; lanes
/// exactly on center count as left. When one side runs out, the other
/// continues. Returns indices into `lanes`, slot-ordered, at most
/// `max_slots` long (the interleaving drops the farthest lanes first).
pub fn assign_slots_points(
    lanes: &[LanePoints],
    image_width: f64,
    max_slots: usize,
) -> Vec<usize> {
    let center = image_width / 2.0;
    let mut left: Vec<(f64, usize)> = Vec::new();
    let mut right: Vec<(f64, usize)> = Vec::new();
    for (i, lane) in lanes.iter().enumerate() {
        let (sum, cnt) = lane
            .points()
            .fold((0.0, 0usize), |(s, c), &(x, _)| (s + x, c + 1));
        if cnt == 0 {
            continue;
        }
        let mean = sum / cnt as f64;
        if mean <= center {
            left.push((center - mean, i));
        } else {
            right.push((mean - center, i));
        }
    }
    // Stable distance order; equal distances resolve by lane index.
    left.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    right.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    let mut slots = Vec::new();
    let (mut li, mut ri) = (0, 0);
    while slots.len() < max_slots && (li < left.len() || ri < right.len()) {
        let take_left = if li < left.len() && ri < right.len() {
            slots.len() % 2 == 0
        } else {
            li < left.len()
        };
        if take_left {
            slots.push(left[li].1);
            li += 1;
        } else {
            slots.push(right[ri].1);
            ri += 1;
        }
    }
    slots
}

/// [`assign_slots_points`] on a label.
pub fn assign_lane_slots(label: &LaneLabel, image_width: u32, max_slots: usize) -> Vec<usize> {
    assign_slots_points(&label_to_points(label), image_width as f64, max_slots)
}

fn grid_coord(v: f64, orig: f64, grid: usize) -> f64 {
    (v + 0.5) * grid as f64 / orig - 0.5
}

fn orig_row_at(j: usize, orig_h: f64, k: usize) -> f64 {
    (j as f64 + 0.5) * orig_h / k as f64 - 0.5
}

/// x of a run's polyline at row y (y within the run's span).
fn interp_run(run: &[(f64, f64)], y: f64) -> f64 {
    debug_assert!(!run.is_empty());
    if run.len() == 1 {
        return run[0].0;
    }
    let idx = run.partition_point(|&(_, py)| py < y);
    if idx == 0 {
        return run[0].0;
    }
    if idx == run.len() {
        return run[run.len() - 1].0;
    }
    let (x0, y0) = run[idx - 1];
    let (x1, y1) = run[idx];
    if y1 == y0 {
        return x0;
    }
    let t = (y - y0) / (y1 - y0);
    x0 + t * (x1 - x0)
}

/// Encode lanes (original resolution) into the K x w' supervision grid.
pub fn encode_points(
    lanes: &[LanePoints],
    orig_h: f64,
    orig_w: f64,
    net_h: usize,
    net_w: usize,
    n_slots: usize,
) -> RowwiseTarget {
    let k = net_h / 2;
    let wp = net_w / 2;
    let mut target = RowwiseTarget::empty(n_slots, k, wp);
    let order = assign_slots_points(lanes, orig_w, n_slots);
    for (slot, &lane_idx) in order.iter().enumerate() {
        for run in &lanes[lane_idx].runs {
            if run.is_empty() {
                continue;
            }
            let y0 = run[0].1;
            let y1 = run[run.len() - 1].1;
            let j0 = round_half_up(grid_coord(y0, orig_h, k)).clamp(0, k as i64 - 1) as usize;
            let j1 = round_half_up(grid_coord(y1, orig_h, k)).clamp(0, k as i64 - 1) as usize;
            for j in j0..=j1 {
                let y = orig_row_at(j, orig_h, k).clamp(y0, y1);
                let x = interp_run(run, y);
                let xg = grid_coord(x, orig_w, wp);
                target.x_gt[[slot, j]] =
                    round_half_up(xg).clamp(0, wp as i64 - 1) as i32;
                target.x_real[[slot, j]] = xg.clamp(0.0, wp as f64 - 1.0);
                target.e[[slot, j]] = 1;
            }
        }
        if target.e.row(slot).iter().any(|&v| v == 1) {
            target.lane_exists[slot] = 1;
        }
    }
    target
}

/// Encode a label given the original image dims it was annotated at.
pub fn encode_targets(
    label: &LaneLabel,
    orig_h: u32,
    orig_w: u32,
    net_h: usize,
    net_w: usize,
    n_slots: usize,
) -> RowwiseTarget {
    encode_points(
        &label_to_points(label),
        orig_h as f64,
        orig_w as f64,
        net_h,
        net_w,
        n_slots,
    )
}
