//! Feature-map visualization: per-layer PCA of channel vectors rendered
//! as RGB, plus lane-vertex overlays on input images.
//!
//! Each spatial position of a (C, H, W) feature map is one C-dimensional
//! sample. The top three principal components of those samples, min-max
//! normalized per component, become the R, G, B channels of an H x W
//! image. The PCA basis is computed per layer per image.

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2, Array4, ArrayView3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decode::DecodedLanes;
use crate::error::{Error, Result};

const POWER_ITERS: usize = 1000;
const POWER_TOL: f64 = 1e-13;

/// Leading eigenpair of a symmetric matrix by power iteration. Returns
/// a zero vector when the matrix has (numerically) no spectrum left.
fn leading_eigenpair(s: &Array2<f64>, rng: &mut ChaCha8Rng) -> (f64, Array1<f64>) {
    let c = s.nrows();
    let mut v: Array1<f64> = Array1::from_shape_fn(c, |_| rng.gen_range(-1.0..1.0));
    let norm = v.dot(&v).sqrt();
    v.mapv_inplace(|x| x / norm);
    for _ in 0..POWER_ITERS {
        let sv = s.dot(&v);
        let n = sv.dot(&sv).sqrt();
        if n < POWER_TOL {
            return (0.0, Array1::zeros(c));
        }
        let next = sv / n;
        let delta = (&next - &v).mapv(f64::abs).sum();
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }
    let lambda = v.dot(&s.dot(&v));
    (lambda, v)
}

/// Fix the sign convention: the largest-magnitude loading is positive.
fn fix_sign(v: &mut Array1<f64>) {
    let mut best = 0usize;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
}

/// Top-`k` principal components of row-sample data (n x c), computed by
/// power iteration with deflation. Returns (components as k rows,
/// eigenvalues of the covariance), both in descending order.
pub fn pca_components(data: &Array2<f64>, k: usize, seed: u64) -> (Array2<f64>, Vec<f64>) {
    let (n, c) = data.dim();
    assert!(k <= c, "cannot extract {k} components from {c} channels");
    let mean = data.mean_axis(ndarray::Axis(0)).expect("nonempty data");
    let centered = data - &mean.broadcast((n, c)).expect("broadcast mean");
    let mut cov = centered.t().dot(&centered) / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comps = Array2::zeros((k, c));
    let mut lambdas = Vec::with_capacity(k);
    for j in 0..k {
        let (lambda, mut v) = leading_eigenpair(&cov, &mut rng);
        fix_sign(&mut v);
        lambdas.push(lambda);
        if lambda > 0.0 {
            let outer = {
                let vc = v.view().insert_axis(ndarray::Axis(1));
                vc.dot(&v.view().insert_axis(ndarray::Axis(0)))
            };
            cov = cov - outer * lambda;
        }
        comps.row_mut(j).assign(&v);
    }
    (comps, lambdas)
}

/// Min-max map to [0, 255]; constant (degenerate) scores render as 0.
fn normalize_to_u8(scores: &Array1<f64>) -> Vec<u8> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &s in scores {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    let span = hi - lo;
    if !(span > 1e-12) {
        return vec![0; scores.len()];
    }
    scores
        .iter()
        .map(|&s| ((s - lo) / span * 255.0).round() as u8)
        .collect()
}

/// Render a (C, H, W) feature map as an H x W RGB image of its top-3
/// principal-component scores. Needs at least 3 channels.
pub fn feature_to_rgb(feat: &ArrayView3<'_, f64>, seed: u64) -> Result<RgbImage> {
    let (c, h, w) = feat.dim();
    if c < 3 {
        return Err(Error::Shape(format!(
            "feature map has {c} channels; PCA to RGB needs at least 3"
        )));
    }
    let n = h * w;
    let mut data = Array2::zeros((n, c));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[[y * w + x, ci]] = feat[[ci, y, x]];
            }
        }
    }
    let mean = data.mean_axis(ndarray::Axis(0)).expect("nonempty data");
    let centered = &data - &mean.broadcast((n, c)).expect("broadcast mean");
    let (comps, _) = pca_components(&data, 3, seed);

    let mut img = RgbImage::new(w as u32, h as u32);
    let channels: Vec<Vec<u8>> = (0..3)
        .map(|j| {
            let scores = centered.dot(&comps.row(j));
            normalize_to_u8(&scores)
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            img.put_pixel(
                x as u32,
                y as u32,
                Rgb([channels[0][i], channels[1][i], channels[2][i]]),
            );
        }
    }
    Ok(img)
}

/// Pick taps by name. `selector` is "all" or a comma-separated list;
/// names not present in the capture are an error.
pub fn select_taps(
    taps: Vec<(String, Array4<f64>)>,
    selector: &str,
) -> Result<Vec<(String, Array4<f64>)>> {
    if selector.trim() == "all" {
        return Ok(taps);
    }
    let mut picked = Vec::new();
    for want in selector.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match taps.iter().find(|(name, _)| name == want) {
            Some((name, arr)) => picked.push((name.clone(), arr.clone())),
            None => {
                let available = taps
                    .iter()
                    .map(|(n, _)| n.as_str())
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(Error::Config(format!(
                    "no layer named '{want}' (available: {available})"
                )));
            }
        }
    }
    Ok(picked)
}

/// Copy of the input with decoded vertices drawn as green dots.
pub fn draw_overlay(img: &RgbImage, lanes: &DecodedLanes) -> RgbImage {
    const GREEN: Rgb<u8> = Rgb([40, 230, 60]);
    const RADIUS: i64 = 2;
    let mut out = img.clone();
    let (w, h) = (img.width() as i64, img.height() as i64);
    for lane in &lanes.lanes {
        for &(x, y) in lane {
            let (cx, cy) = (x.round() as i64, y.round() as i64);
            for dy in -RADIUS..=RADIUS {
                for dx in -RADIUS..=RADIUS {
                    if dx * dx + dy * dy > RADIUS * RADIUS {
                        continue;
                    }
                    let (px, py) = (cx + dx, cy + dy);
                    if (0..w).contains(&px) && (0..h).contains(&py) {
                        out.put_pixel(px as u32, py as u32, GREEN);
                    }
                }
            }
        }
    }
    out
}
