//! From features to anomaly scores.
//!
//! The per-point 3D segmentation is computed in feature space: classify each
//! grid cell, bilinearly upsample the cell probabilities to rendering
//! resolution, read each visible point's pixel, and average over views. Cost
//! is `O(K·h·w·d)` for classification plus `O(K·(H·W + n))` for the gathers,
//! instead of classifying every point in every view.

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::encoder::{
    dot, norm, probabilities_from_cosines, EncodeRequest, EncoderProvider, FeatureGrid, Features,
    PromptPair,
};
use crate::error::{Error, Result};
use crate::grid::{Grid2, ScoreMap2D};
use crate::render::{Projection, ViewBundle};
use crate::spatial::PointGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMode {
    /// Divide by the view count K, counting invisible views as zero.
    AllViews,
    /// Divide by the number of views in which the point is visible.
    VisibilityNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub temperature: f64,
    pub aggregate_mode: AggregateMode,
    /// Gaussian width on the point k-NN graph, normalized units. 0 disables.
    pub sigma_3d: f64,
    pub k_nn: usize,
    /// Gaussian width for exported per-view maps, pixels. 0 disables.
    pub sigma_2d: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            aggregate_mode: AggregateMode::AllViews,
            sigma_3d: 0.05,
            k_nn: 8,
            sigma_2d: 4.0,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::validation("temperature must be positive"));
        }
        if !(self.sigma_3d >= 0.0) || !(self.sigma_2d >= 0.0) {
            return Err(Error::validation("smoothing widths must be non-negative"));
        }
        if self.k_nn == 0 {
            return Err(Error::validation("k_nn must be at least 1"));
        }
        Ok(())
    }
}

/// Both class probabilities for every cell of a feature grid.
pub struct CellProbabilities {
    pub normal: Grid2<f64>,
    pub abnormal: Grid2<f64>,
}

pub fn classify_cells(prompts: &PromptPair, grid: &FeatureGrid, tau: f64) -> Result<CellProbabilities> {
    if prompts.dim() != grid.d() {
        return Err(Error::DimensionMismatch(format!(
            "prompts have d = {}, features have d = {}",
            prompts.dim(),
            grid.d()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::validation("temperature must be positive"));
    }
    let (nn, na) = (norm(&prompts.normal), norm(&prompts.abnormal));
    if nn == 0.0 || na == 0.0 {
        return Err(Error::Numeric("prompt with zero norm".into()));
    }
    let (h, w) = (grid.h(), grid.w());
    let mut normal = Vec::with_capacity(h * w);
    let mut abnormal = Vec::with_capacity(h * w);
    for f in grid.cells() {
        let nf = norm(f);
        if nf == 0.0 {
            return Err(Error::Numeric("zero feature vector".into()));
        }
        let cn = (dot(&prompts.normal, f) / (nn * nf)).clamp(-1.0, 1.0);
        let ca = (dot(&prompts.abnormal, f) / (na * nf)).clamp(-1.0, 1.0);
        let (pn, pa) = probabilities_from_cosines(cn, ca, tau);
        normal.push(pn);
        abnormal.push(pa);
    }
    Ok(CellProbabilities {
        normal: Grid2::from_vec(h, w, normal),
        abnormal: Grid2::from_vec(h, w, abnormal),
    })
}

/// Per-cell probability of `class` over the feature grid.
pub fn segment(prompts: &PromptPair, grid: &FeatureGrid, class: Class, tau: f64) -> Result<Grid2<f64>> {
    let cells = classify_cells(prompts, grid, tau)?;
    Ok(match class {
        Class::Normal => cells.normal,
        Class::Abnormal => cells.abnormal,
    })
}

/// Interpolation taps along one axis: output index -> (lower, upper, upper weight).
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling with cell-centre alignment and clamped edges.
pub fn upsample_bilinear(map: &Grid2<f64>, out_h: usize, out_w: usize) -> ScoreMap2D {
    let (h, w) = map.shape();
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    // rows first: h x out_w intermediate
    let mut tmp = vec![0.0; h * out_w];
    for r in 0..h {
        for (o, &(c0, c1, t)) in cols.iter().enumerate() {
            tmp[r * out_w + o] = (1.0 - t) * map[(r, c0)] + t * map[(r, c1)];
        }
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, t) in &rows {
        let (a, b) = (&tmp[r0 * out_w..(r0 + 1) * out_w], &tmp[r1 * out_w..(r1 + 1) * out_w]);
        out.extend(a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y));
    }
    Grid2::from_vec(out_h, out_w, out)
}

/// Adjoint of [`upsample_bilinear`]: scatters a pixel-space gradient back
/// onto the `h × w` grid.
pub fn upsample_bilinear_adjoint(grad: &Grid2<f64>, h: usize, w: usize) -> Grid2<f64> {
    let (out_h, out_w) = grad.shape();
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    let mut tmp = vec![0.0; h * out_w];
    for (o, &(r0, r1, t)) in rows.iter().enumerate() {
        let g = &grad.as_slice()[o * out_w..(o + 1) * out_w];
        for (c, gv) in g.iter().enumerate() {
            tmp[r0 * out_w + c] += (1.0 - t) * gv;
            tmp[r1 * out_w + c] += t * gv;
        }
    }
    let mut out = Grid2::filled(h, w, 0.0);
    for r in 0..h {
        for (o, &(c0, c1, t)) in cols.iter().enumerate() {
            let gv = tmp[r * out_w + o];
            out[(r, c0)] += (1.0 - t) * gv;
            out[(r, c1)] += t * gv;
        }
    }
    out
}

/// Read each visible point's pixel from a rendering-resolution score map.
/// Occluded and off-screen points score 0.
pub fn back_project_view(s2d: &ScoreMap2D, projection: &Projection) -> Vec<f64> {
    debug_assert_eq!(s2d.shape(), (projection.height(), projection.width()));
    let pixels = s2d.as_slice();
    (0..projection.len())
        .map(|j| match projection.pixel_index(j) {
            Some(p) if projection.visible(j) => pixels[p],
            _ => 0.0,
        })
        .collect()
}

/// Per-point divisor used by [`aggregate_3d`].
pub fn aggregate_divisors(projections: &[&Projection], mode: AggregateMode) -> Vec<f64> {
    let n = projections.first().map_or(0, |p| p.len());
    match mode {
        AggregateMode::AllViews => vec![projections.len() as f64; n],
        AggregateMode::VisibilityNormalized => (0..n)
            .map(|j| {
                let seen = projections.iter().filter(|p| p.visible(j)).count();
                seen.max(1) as f64
            })
            .collect(),
    }
}

/// Combine per-view back-projections into one per-point map.
pub fn aggregate_3d(per_view: &[Vec<f64>], projections: &[&Projection], mode: AggregateMode) -> Vec<f64> {
    assert!(!per_view.is_empty(), "at least one view is required");
    assert_eq!(per_view.len(), projections.len());
    let n = per_view[0].len();
    let divisors = aggregate_divisors(projections, mode);
    (0..n)
        .map(|j| per_view.iter().map(|v| v[j]).sum::<f64>() / divisors[j])
        .collect()
}

/// Gaussian-weighted average over each point's `k_nn` nearest neighbours
/// (itself included). `sigma == 0` returns the input unchanged.
pub fn smooth_scores(map: &[f64], cloud: &PointCloud, sigma: f64, k_nn: usize) -> Vec<f64> {
    assert_eq!(map.len(), cloud.len());
    if sigma == 0.0 || k_nn <= 1 {
        return map.to_vec();
    }
    let grid = PointGrid::new(cloud.points(), None);
    let two_s2 = 2.0 * sigma * sigma;
    cloud
        .points()
        .iter()
        .map(|p| {
            let nbrs = grid.knn(p, k_nn);
            let mut wsum = 0.0;
            let mut acc = 0.0;
            for (d2, j) in nbrs {
                let wgt = (-d2 / two_s2).exp();
                wsum += wgt;
                acc += wgt * map[j];
            }
            acc / wsum
        })
        .collect()
}

/// Separable Gaussian blur truncated at 3σ with replicated edges.
pub fn gaussian_blur_2d(map: &Grid2<f64>, sigma: f64) -> Grid2<f64> {
    if sigma <= 0.0 {
        return map.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= s);
    let (h, w) = map.shape();
    let pass = |src: &Grid2<f64>, along_rows: bool| {
        Grid2::from_fn(h, w, |r, c| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let off = i as isize - radius;
                    let (rr, cc) = if along_rows {
                        (r, (c as isize + off).clamp(0, w as isize - 1) as usize)
                    } else {
                        ((r as isize + off).clamp(0, h as isize - 1) as usize, c)
                    };
                    k * src[(rr, cc)]
                })
                .sum()
        })
    };
    let tmp = pass(map, true);
    pass(&tmp, false)
}

/// Result of scoring one cloud.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    /// Smoothed per-point anomaly map.
    pub point_map: Vec<f64>,
    pub global_score: f64,
    /// Abnormal probability of each view's global feature.
    pub per_view_probs: Vec<f64>,
    /// Per-view abnormal segmentation at rendering resolution.
    pub view_maps: Vec<ScoreMap2D>,
}

/// Per-view abnormal maps at rendering resolution and the global
/// probabilities, before any 3D aggregation.
pub fn view_scores(
    features: &[Features],
    prompts: &PromptPair,
    height: usize,
    width: usize,
    tau: f64,
) -> Result<(Vec<ScoreMap2D>, Vec<f64>)> {
    let mut maps = Vec::with_capacity(features.len());
    let mut probs = Vec::with_capacity(features.len());
    for f in features {
        let seg = segment(prompts, &f.grid, Class::Abnormal, tau)?;
        maps.push(upsample_bilinear(&seg, height, width));
        probs.push(crate::encoder::class_probability(prompts, &f.global.0, tau)?.1);
    }
    Ok((maps, probs))
}

/// Unsmoothed 3D abnormal segmentation from features already aligned with
/// `projections`.
pub fn segment_3d(
    projections: &[&Projection],
    features: &[Features],
    prompts: &PromptPair,
    cfg: &ScoringConfig,
) -> Result<Vec<f64>> {
    let (h, w) = (projections[0].height(), projections[0].width());
    let (maps, _) = view_scores(features, prompts, h, w, cfg.temperature)?;
    let per_view: Vec<Vec<f64>> = maps
        .iter()
        .zip(projections)
        .map(|(m, p)| back_project_view(m, p))
        .collect();
    Ok(aggregate_3d(&per_view, projections, cfg.aggregate_mode))
}

/// Score a cloud from its rendered views and their features.
pub fn score_views(
    cloud: &PointCloud,
    projections: &[&Projection],
    features: &[Features],
    prompts: &PromptPair,
    cfg: &ScoringConfig,
) -> Result<InferenceResult> {
    if projections.is_empty() || projections.len() != features.len() {
        return Err(Error::validation(format!(
            "{} views but {} feature sets",
            projections.len(),
            features.len()
        )));
    }
    let (h, w) = (projections[0].height(), projections[0].width());
    let (view_maps, per_view_probs) = view_scores(features, prompts, h, w, cfg.temperature)?;
    let per_view: Vec<Vec<f64>> = view_maps
        .iter()
        .zip(projections)
        .map(|(m, p)| back_project_view(m, p))
        .collect();
    let raw = aggregate_3d(&per_view, projections, cfg.aggregate_mode);
    let point_map = smooth_scores(&raw, cloud, cfg.sigma_3d, cfg.k_nn);
    let global_score = global_score(&per_view_probs, &point_map);
    Ok(InferenceResult {
        point_map,
        global_score,
        per_view_probs,
        view_maps,
    })
}

/// Half the mean view-level abnormal probability plus half the map maximum.
pub fn global_score(per_view_probs: &[f64], point_map: &[f64]) -> f64 {
    let mean = per_view_probs.iter().sum::<f64>() / per_view_probs.len() as f64;
    0.5 * (mean + max_of(point_map))
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Encode every view with `provider` and score the cloud.
pub fn infer_3d(
    cloud: &PointCloud,
    views: &[ViewBundle],
    key: &str,
    prompts: &PromptPair,
    provider: &dyn EncoderProvider,
    cfg: &ScoringConfig,
) -> Result<InferenceResult> {
    let features = encode_views(views, key, provider)?;
    let projections: Vec<&Projection> = views.iter().map(|v| &v.projection).collect();
    score_views(cloud, &projections, &features, prompts, cfg)
}

pub fn encode_views(views: &[ViewBundle], key: &str, provider: &dyn EncoderProvider) -> Result<Vec<Features>> {
    views
        .iter()
        .enumerate()
        .map(|(k, v)| {
            provider.encode(&EncodeRequest {
                image: &v.image,
                key,
                view: k,
                gt_mask: Some(v.projection.gt_mask()),
            })
        })
        .collect()
}

/// RGB modality scored through the same views: the smoothed 3D map of the
/// RGB features and the mean abnormal probability of their global features.
pub fn score_rgb(
    cloud: &PointCloud,
    projections: &[&Projection],
    rgb_features: &[Features],
    prompts: &PromptPair,
    cfg: &ScoringConfig,
) -> Result<(Vec<f64>, f64)> {
    if projections.is_empty() || projections.len() != rgb_features.len() {
        return Err(Error::validation(format!(
            "{} views but {} RGB feature sets",
            projections.len(),
            rgb_features.len()
        )));
    }
    let raw = segment_3d(projections, rgb_features, prompts, cfg)?;
    let map = smooth_scores(&raw, cloud, cfg.sigma_3d, cfg.k_nn);
    let mut total = 0.0;
    for f in rgb_features {
        total += crate::encoder::class_probability(prompts, &f.global.0, cfg.temperature)?.1;
    }
    Ok((map, total / rgb_features.len() as f64))
}

/// Fused point map and global score from point-cloud and RGB results.
#[derive(Debug, Clone)]
pub struct FusedResult {
    pub point_map: Vec<f64>,
    pub global_score: f64,
}

/// `map = ½·G(A + A_rgb)` and `score = ½·(½·(s_rgb + s) + max(map))`.
pub fn fuse_multimodal(
    res3d: &InferenceResult,
    rgb_point_map: &[f64],
    rgb_global: f64,
    sigma: f64,
    k_nn: usize,
    cloud: &PointCloud,
) -> Result<FusedResult> {
    if rgb_point_map.len() != res3d.point_map.len() || cloud.len() != rgb_point_map.len() {
        return Err(Error::DimensionMismatch(format!(
            "point map lengths {} (3D), {} (RGB), cloud {}",
            res3d.point_map.len(),
            rgb_point_map.len(),
            cloud.len()
        )));
    }
    let sum: Vec<f64> = res3d
        .point_map
        .iter()
        .zip(rgb_point_map)
        .map(|(a, b)| a + b)
        .collect();
    let point_map: Vec<f64> = smooth_scores(&sum, cloud, sigma, k_nn)
        .into_iter()
        .map(|v| 0.5 * v)
        .collect();
    let global_score = 0.5 * (0.5 * (rgb_global + res3d.global_score) + max_of(&point_map));
    Ok(FusedResult {
        point_map,
        global_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointLabels;
    use crate::encoder::{FeatureDims, MockEncoder};
    use crate::render::{render_views, view_angles, ViewConfig};
    use crate::verify::{bilinear_reference, naive_segmentation_3d};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_of(h: usize, w: usize, d: usize, f: impl Fn(usize, usize) -> Vec<f64>) -> FeatureGrid {
        let mut data = Vec::new();
        for r in 0..h {
            for c in 0..w {
                data.extend(f(r, c));
            }
        }
        FeatureGrid::new(h, w, d, data).unwrap()
    }

    #[test]
    fn segment_aligned_cells() {
        let prompts = PromptPair::new(vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]).unwrap();
        let grid = grid_of(3, 2, 3, |_, _| vec![0.0, 1.0, 0.0]);
        let s = segment(&prompts, &grid, Class::Abnormal, 1.0).unwrap();
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!(s.as_slice().iter().all(|v| (v - expected).abs() < 1e-15));
        assert!((expected - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn segment_equal_prompts_is_half() {
        let g = vec![0.3, -0.2, 0.9];
        let prompts = PromptPair::new(g.clone(), g).unwrap();
        let grid = grid_of(2, 2, 3, |r, c| vec![r as f64 + 0.1, c as f64 - 0.5, 1.0]);
        let s = segment(&prompts, &grid, Class::Abnormal, 0.07).unwrap();
        assert!(s.as_slice().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn segment_dim_mismatch() {
        let prompts = PromptPair::new(vec![1.0, 0.0], vec![0.0, 1.0]).unwrap();
        let grid = grid_of(1, 1, 3, |_, _| vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            segment(&prompts, &grid, Class::Normal, 0.07),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn upsample_constant_and_reference() {
        let c = Grid2::filled(3, 4, 0.3);
        let up = upsample_bilinear(&c, 12, 16);
        assert!(up.as_slice().iter().all(|v| (v - 0.3).abs() < 1e-15));

        let m = Grid2::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let up = upsample_bilinear(&m, 4, 4);
        let reference = bilinear_reference(&m, 4, 4);
        for (a, b) in up.as_slice().iter().zip(reference.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        // corner pixels clamp to the corner cells, the centre blends all four
        assert_eq!(up[(0, 0)], 0.0);
        assert_eq!(up[(0, 3)], 1.0);
        assert!((up[(1, 1)] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn upsample_identity_at_same_size() {
        let m = Grid2::from_fn(5, 3, |r, c| (r * 3 + c) as f64);
        assert_eq!(upsample_bilinear(&m, 5, 3), m);
    }

    #[test]
    fn back_projection_basics() {
        let proj = Projection::from_pixels(
            32,
            32,
            &[Some((10, 20)), Some((10, 20)), Some((3, 3)), None],
            &[0.1, 0.5, 0.0, 0.0],
            &[0, 0, 0, 0],
        );
        let mut s = Grid2::filled(32, 32, 0.1);
        s[(10, 20)] = 0.8;
        assert_eq!(back_project_view(&s, &proj), vec![0.8, 0.0, 0.1, 0.0]);

        let hidden = Projection::from_pixels(8, 8, &[None, None], &[0.0, 0.0], &[0, 0]);
        assert_eq!(back_project_view(&Grid2::filled(8, 8, 1.0), &hidden), vec![0.0, 0.0]);
    }

    #[test]
    fn aggregate_modes() {
        // one point, visible in 3 of 9 views with score 0.9
        let vis = Projection::from_pixels(4, 4, &[Some((0, 0))], &[0.0], &[0]);
        let hid = Projection::from_pixels(4, 4, &[None], &[0.0], &[0]);
        let projs: Vec<&Projection> = (0..9).map(|k| if k < 3 { &vis } else { &hid }).collect();
        let per_view: Vec<Vec<f64>> = (0..9).map(|k| vec![if k < 3 { 0.9 } else { 0.0 }]).collect();
        let all_views = aggregate_3d(&per_view, &projs, AggregateMode::AllViews);
        let normalized = aggregate_3d(&per_view, &projs, AggregateMode::VisibilityNormalized);
        assert!((all_views[0] - 0.3).abs() < 1e-15);
        assert!((normalized[0] - 0.9).abs() < 1e-15);

        let all: Vec<&Projection> = vec![&vis; 4];
        let per_view = vec![vec![0.4]; 4];
        assert!((aggregate_3d(&per_view, &all, AggregateMode::AllViews)[0] - 0.4).abs() < 1e-15);
        assert!((aggregate_3d(&per_view, &all, AggregateMode::VisibilityNormalized)[0] - 0.4).abs() < 1e-15);

        let one = aggregate_3d(&[vec![0.7]], &[&vis], AggregateMode::AllViews);
        assert_eq!(one, aggregate_3d(&[vec![0.7]], &[&vis], AggregateMode::VisibilityNormalized));
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn smoothing_properties() {
        let cloud = random_cloud(200, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let map: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert_eq!(smooth_scores(&map, &cloud, 0.0, 8), map);
        let constant = vec![0.42; 200];
        assert!(smooth_scores(&constant, &cloud, 0.3, 8).iter().all(|v| (v - 0.42).abs() < 1e-15));
        let s = smooth_scores(&map, &cloud, 0.1, 8);
        let (lo, hi) = (map.iter().cloned().fold(1.0, f64::min), map.iter().cloned().fold(0.0, f64::max));
        assert!(s.iter().all(|v| *v >= lo - 1e-15 && *v <= hi + 1e-15));

        let two = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]]).unwrap();
        let s = smooth_scores(&[1.0, 0.0], &two, f64::INFINITY, 2);
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn gaussian_blur_preserves_constants_and_bounds() {
        let c = Grid2::filled(20, 30, 0.6);
        assert!(gaussian_blur_2d(&c, 2.0).as_slice().iter().all(|v| (v - 0.6).abs() < 1e-12));
        let mut spike = Grid2::filled(21, 21, 0.0);
        spike[(10, 10)] = 1.0;
        let b = gaussian_blur_2d(&spike, 1.5);
        assert!(b[(10, 10)] < 1.0 && b[(10, 10)] > b[(10, 12)]);
        assert!((b.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((b[(8, 10)] - b[(12, 10)]).abs() < 1e-15);
    }

    #[test]
    fn global_score_arithmetic() {
        assert!((global_score(&[0.3, 0.5], &[0.1, 0.6, 0.2]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fusion_formulas() {
        let cloud = random_cloud(5, 1);
        let m = vec![0.1, 0.2, 0.7, 0.4, 0.3];
        let res = InferenceResult {
            point_map: m.clone(),
            global_score: 0.6,
            per_view_probs: vec![],
            view_maps: vec![],
        };
        let fused = fuse_multimodal(&res, &m, 0.6, 0.0, 8, &cloud).unwrap();
        assert_eq!(fused.point_map, m);
        assert!((fused.global_score - 0.5 * (0.6 + 0.7)).abs() < 1e-12);

        let zeros = InferenceResult {
            point_map: vec![0.0; 5],
            global_score: 0.8,
            per_view_probs: vec![],
            view_maps: vec![],
        };
        let fused = fuse_multimodal(&zeros, &[1.0; 5], 0.4, 0.0, 8, &cloud).unwrap();
        assert!(fused.point_map.iter().all(|v| *v == 0.5));

        let res = InferenceResult {
            point_map: vec![0.2, 0.9, 0.1, 0.0, 0.5],
            global_score: 0.8,
            per_view_probs: vec![],
            view_maps: vec![],
        };
        let rgb = vec![0.2, 0.3, 0.1, 0.0, 0.5];
        let fused = fuse_multimodal(&res, &rgb, 0.4, 0.0, 8, &cloud).unwrap();
        assert!((fused.point_map[1] - 0.6).abs() < 1e-15);
        assert!((fused.global_score - 0.6).abs() < 1e-12);

        assert!(fuse_multimodal(&res, &rgb[..4], 0.4, 0.0, 8, &cloud).is_err());
    }

    #[test]
    fn feature_space_path_matches_naive_oracle() {
        let cloud = random_cloud(800, 17).normalized();
        let cfg = ViewConfig {
            height: 96,
            width: 96,
            grid_h: 8,
            grid_w: 8,
            ..ViewConfig::default()
        };
        let views = render_views(&cloud, &PointLabels::zeros(800), &view_angles(9).unwrap(), &cfg);
        let enc = MockEncoder::new(FeatureDims { h: 8, w: 8, d: 16 }, 3);
        let features = encode_views(&views, "c", &enc).unwrap();
        let prompts = PromptPair::random(16, 5);
        let projections: Vec<&Projection> = views.iter().map(|v| &v.projection).collect();
        let scoring = ScoringConfig::default();
        let fast = segment_3d(&projections, &features, &prompts, &scoring).unwrap();
        let naive = naive_segmentation_3d(&projections, &features, &prompts, scoring.temperature);
        for (a, b) in fast.iter().zip(&naive) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_prompts_give_half_everywhere_visible() {
        let cloud = random_cloud(300, 2).normalized();
        let cfg = ViewConfig {
            height: 48,
            width: 48,
            grid_h: 4,
            grid_w: 4,
            views: 1,
            ..ViewConfig::default()
        };
        let views = render_views(&cloud, &PointLabels::zeros(300), &[0.0], &cfg);
        let enc = MockEncoder::new(FeatureDims { h: 4, w: 4, d: 8 }, 3);
        let g = vec![1.0; 8];
        let prompts = PromptPair::new(g.clone(), g).unwrap();
        let scoring = ScoringConfig {
            sigma_3d: 0.0,
            ..ScoringConfig::default()
        };
        let res = infer_3d(&cloud, &views, "c", &prompts, &enc, &scoring).unwrap();
        for (j, s) in res.point_map.iter().enumerate() {
            let expected = if views[0].projection.visible(j) { 0.5 } else { 0.0 };
            assert_eq!(*s, expected);
        }
        assert_eq!(res.global_score, 0.5);
    }

    proptest! {
        #[test]
        fn upsample_stays_within_bounds(
            vals in prop::collection::vec(0.0f64..1.0, 12),
            fy in 1usize..5, fx in 1usize..5,
        ) {
            let m = Grid2::from_vec(3, 4, vals.clone());
            let up = upsample_bilinear(&m, 3 * fy, 4 * fx);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in up.as_slice() {
                prop_assert!(*v >= lo - 1e-15 && *v <= hi + 1e-15);
            }
        }

        #[test]
        fn adjoint_is_transpose(
            vals in prop::collection::vec(-1.0f64..1.0, 6),
            gvals in prop::collection::vec(-1.0f64..1.0, 6 * 20),
        ) {
            // <Up x, g> == <x, Up^T g>
            let x = Grid2::from_vec(2, 3, vals);
            let g = Grid2::from_vec(8, 15, gvals);
            let lhs: f64 = upsample_bilinear(&x, 8, 15).as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.as_slice().iter().zip(upsample_bilinear_adjoint(&g, 2, 3).as_slice()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn more_aligned_abnormal_prompt_never_lowers_scores(seed in any::<u64>(), t in 0.0f64..1.0) {
            // features all share a common direction e; moving g_a toward e raises every cell's cosine
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 6;
            let e: Vec<f64> = {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                crate::encoder::normalized(&v)
            };
            let grid = grid_of(3, 3, d, |_, _| e.clone());
            let p0 = PromptPair::random(d, seed ^ 1);
            let towards: Vec<f64> = p0.abnormal.iter().zip(&e).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            prop_assume!(norm(&towards) > 1e-6);
            let p1 = PromptPair::new(p0.normal.clone(), towards).unwrap();
            let s0 = segment(&p0, &grid, Class::Abnormal, 0.07).unwrap();
            let s1 = segment(&p1, &grid, Class::Abnormal, 0.07).unwrap();
            for (a, b) in s0.as_slice().iter().zip(s1.as_slice()) {
                prop_assert!(b >= a);
            }
        }
    }
}
