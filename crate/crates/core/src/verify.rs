//! Brute-force reference implementations.
//!
//! Each function here recomputes something the main modules do efficiently,
//! written as directly as possible and without sharing code with them. They
//! back the unit tests, the acceptance suite and `mvad selftest`.

use crate::cloud::PointCloud;
use crate::encoder::{Features, PromptPair};
use crate::grid::Grid2;
use crate::render::{Projection, ViewConfig};

/// Visibility by pairwise comparison: a point is visible when no other point
/// on the same pixel is strictly nearer, or equally near with a lower index.
pub fn zbuffer_oracle(cloud: &PointCloud, angle: f64, cfg: &ViewConfig) -> Vec<u8> {
    let (s, c) = (angle.sin(), angle.cos());
    let proj = |x: f64, size: usize| -> Option<usize> {
        let size_f = size as f64;
        let lo = cfg.margin * size_f;
        let span = (1.0 - 2.0 * cfg.margin) * size_f;
        let t = lo + span * (x + 1.0) / 2.0;
        if t < 0.0 || t >= size_f {
            None
        } else {
            Some(t.floor() as usize)
        }
    };
    let placed: Vec<Option<(usize, usize, f64)>> = cloud
        .points()
        .iter()
        .map(|p| {
            let b = c * p[1] - s * p[2];
            let depth = s * p[1] + c * p[2];
            Some((proj(p[0], cfg.height)?, proj(b, cfg.width)?, depth))
        })
        .collect();
    (0..placed.len())
        .map(|j| {
            let Some((u, v, d)) = placed[j] else { return 0 };
            let beaten = placed.iter().enumerate().any(|(i, q)| match q {
                Some((uu, vv, dd)) if (*uu, *vv) == (u, v) => *dd < d || (*dd == d && i < j),
                _ => false,
            });
            u8::from(!beaten)
        })
        .collect()
}

/// Bilinear interpolation weights of output pixel `(y, x)` over an `h × w`
/// grid, listed as `(row, col, weight)` for the four taps.
pub fn bilinear_weights(y: usize, x: usize, out_h: usize, out_w: usize, h: usize, w: usize) -> [(usize, usize, f64); 4] {
    let src = |o: usize, n_out: usize, n_in: usize| {
        let mut s = (o as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5;
        if s < 0.0 {
            s = 0.0;
        }
        if s > (n_in - 1) as f64 {
            s = (n_in - 1) as f64;
        }
        let lo = s.floor() as usize;
        let hi = if lo + 1 < n_in { lo + 1 } else { lo };
        (lo, hi, s - lo as f64)
    };
    let (r0, r1, ty) = src(y, out_h, h);
    let (c0, c1, tx) = src(x, out_w, w);
    [
        (r0, c0, (1.0 - ty) * (1.0 - tx)),
        (r0, c1, (1.0 - ty) * tx),
        (r1, c0, ty * (1.0 - tx)),
        (r1, c1, ty * tx),
    ]
}

/// Pixel-by-pixel bilinear upsampling using [`bilinear_weights`].
pub fn bilinear_reference(map: &Grid2<f64>, out_h: usize, out_w: usize) -> Grid2<f64> {
    let (h, w) = map.shape();
    Grid2::from_fn(out_h, out_w, |y, x| {
        bilinear_weights(y, x, out_h, out_w, h, w)
            .iter()
            .map(|&(r, c, wt)| wt * map[(r, c)])
            .sum()
    })
}

fn cos_naive(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Abnormal probability written as a logistic of the cosine gap.
pub fn abnormal_probability_naive(prompts: &PromptPair, f: &[f64], tau: f64) -> f64 {
    let gap = cos_naive(&prompts.normal, f) - cos_naive(&prompts.abnormal, f);
    1.0 / (1.0 + (gap / tau).exp())
}

/// Per-point 3D abnormal segmentation evaluated point by point: for every
/// view where the point is visible, classify the four feature cells around
/// its pixel, interpolate, and average over all `K` views.
pub fn naive_segmentation_3d(
    projections: &[&Projection],
    features: &[Features],
    prompts: &PromptPair,
    tau: f64,
) -> Vec<f64> {
    let n = projections[0].len();
    let k = projections.len() as f64;
    let mut out = vec![0.0; n];
    for (proj, feat) in projections.iter().zip(features) {
        let (h, w) = (feat.grid.h(), feat.grid.w());
        for (j, o) in out.iter_mut().enumerate() {
            if !proj.visible(j) {
                continue;
            }
            let (y, x) = proj.pixel(j).expect("visible points are on screen");
            let mut s = 0.0;
            for (r, c, wt) in bilinear_weights(y, x, proj.height(), proj.width(), h, w) {
                s += wt * abnormal_probability_naive(prompts, feat.grid.cell(r, c), tau);
            }
            *o += s;
        }
    }
    out.iter().map(|v| v / k).collect()
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// AUROC by counting every positive/negative pair.
pub fn auroc_pairs(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn distinct_descending(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

/// Average precision from a threshold-by-threshold recount.
pub fn average_precision_sweep(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return None;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in distinct_descending(scores) {
        let mut tp = 0;
        let mut predicted = 0;
        for (s, l) in scores.iter().zip(labels) {
            if *s >= t {
                predicted += 1;
                if *l == 1 {
                    tp += 1;
                }
            }
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / predicted as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// AUPRO recounted at every distinct score. `regions` holds one id per
/// element (0 = not in a region) and must be unique across the whole set.
pub fn aupro_exhaustive(scores: &[f64], labels: &[u8], regions: &[u32], fpr_limit: f64) -> Option<f64> {
    let mut ids: Vec<u32> = regions.iter().copied().filter(|&r| r > 0).collect();
    ids.sort_unstable();
    ids.dedup();
    let negatives = labels.iter().filter(|&&l| l == 0).count();
    if ids.is_empty() || negatives == 0 {
        return None;
    }
    let mut curve = vec![(0.0, 0.0)];
    for t in distinct_descending(scores) {
        let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 0).count();
        let mut pro = 0.0;
        for &id in &ids {
            let members = regions.iter().filter(|&&r| r == id).count();
            let hit = scores.iter().zip(regions).filter(|(s, r)| **s >= t && **r == id).count();
            pro += hit as f64 / members as f64;
        }
        curve.push((fp as f64 / negatives as f64, pro / ids.len() as f64));
    }
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let ((f0, p0), (f1, p1)) = (pair[0], pair[1]);
        if f0 >= fpr_limit {
            break;
        }
        if f1 > fpr_limit {
            let p_end = p0 + (p1 - p0) * (fpr_limit - f0) / (f1 - f0);
            area += (fpr_limit - f0) * (p0 + p_end) / 2.0;
            break;
        }
        area += (f1 - f0) * (p0 + p1) / 2.0;
    }
    Some(area / fpr_limit)
}
