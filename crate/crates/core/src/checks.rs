//! Oracle checks over randomly generated instances.
//!
//! Each check compares a production routine with its brute-force counterpart
//! in [`crate::verify`] and reports one [`CheckOutcome`]. Sizes are
//! parameters so the same code backs the quick `mvad selftest` run and the
//! full-size acceptance suite.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{PointCloud, PointLabels};
use crate::encoder::{FeatureDims, MockEncoder, PromptPair};
use crate::learning::{
    cross_entropy, dice_loss, focal_loss, grad_prompts, hybrid_loss, loss_2d_global, loss_3d_global, LossConfig,
    TrainSample,
};
use crate::metrics::{aupro, auroc, average_precision, RegionSet};
use crate::render::{render_views, view_angles, Projection, ViewConfig};
use crate::scoring::{encode_views, fuse_multimodal, segment_3d, AggregateMode, InferenceResult, ScoringConfig};
use crate::verify::{
    auroc_pairs, aupro_exhaustive, average_precision_sweep, central_difference, naive_segmentation_3d, zbuffer_oracle,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

/// `n` points, either uniform in a cube or snapped to a coarse lattice so
/// that exact depth ties occur.
pub fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    let lattice = rng.gen_bool(0.3);
    let pts = (0..n)
        .map(|_| {
            let mut p = [0.0; 3];
            for v in &mut p {
                *v = if lattice {
                    rng.gen_range(-4i32..=4) as f64 / 4.0
                } else {
                    rng.gen_range(-1.0..1.0)
                };
            }
            p
        })
        .collect();
    PointCloud::new(pts).expect("finite points").normalized()
}

/// Renderer visibility against the pairwise z-buffer oracle.
pub fn visibility_oracle(clouds: usize, n_range: (usize, usize), seed: u64) -> CheckOutcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatched = 0;
    let mut views_checked = 0;
    for _ in 0..clouds {
        let n = rng.gen_range(n_range.0..=n_range.1);
        let cloud = random_cloud(n, &mut rng);
        let res = [32, 64, 336][rng.gen_range(0..3)];
        let cfg = ViewConfig {
            height: res,
            width: res,
            grid_h: 8,
            grid_w: 8,
            ..ViewConfig::default()
        };
        let angles = view_angles(cfg.views).expect("views > 0");
        let views = render_views(&cloud, &PointLabels::zeros(n), &angles, &cfg);
        for (v, &a) in views.iter().zip(&angles) {
            views_checked += 1;
            if v.projection.vis_mask() != zbuffer_oracle(&cloud, a, &cfg).as_slice() {
                mismatched += 1;
            }
        }
    }
    CheckOutcome::new(
        "visibility oracle",
        mismatched == 0,
        format!(
            "{clouds} clouds, {views_checked} views, {mismatched} mismatched, {:.1}s",
            t.elapsed().as_secs_f64()
        ),
    )
}

struct SegInstance {
    projections: Vec<Projection>,
    features: Vec<crate::encoder::Features>,
    prompts: PromptPair,
}

fn seg_instance(n: usize, d: usize, cfg: &ViewConfig, seed: u64) -> SegInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = random_cloud(n, &mut rng);
    let views = render_views(&cloud, &PointLabels::zeros(n), &cfg.angles().expect("valid views"), cfg);
    let enc = MockEncoder::new(
        FeatureDims {
            h: cfg.grid_h,
            w: cfg.grid_w,
            d,
        },
        seed,
    );
    let features = encode_views(&views, "eq", &enc).expect("mock encodes");
    SegInstance {
        projections: views.into_iter().map(|v| v.projection).collect(),
        features,
        prompts: PromptPair::random(d, seed ^ 0xabc),
    }
}

/// Feature-space aggregation against the per-point naive evaluation.
pub fn aggregation_equivalence(instances: usize, n_max: usize, dims: &[usize], cfg: &ViewConfig, seed: u64) -> CheckOutcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scoring = ScoringConfig {
        aggregate_mode: AggregateMode::AllViews,
        ..ScoringConfig::default()
    };
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let n = rng.gen_range(n_max.min(100)..=n_max);
        let d = dims[i % dims.len()];
        let inst = seg_instance(n, d, cfg, rng.gen());
        let proj: Vec<&Projection> = inst.projections.iter().collect();
        let fast = segment_3d(&proj, &inst.features, &inst.prompts, &scoring).expect("valid instance");
        let naive = naive_segmentation_3d(&proj, &inst.features, &inst.prompts, scoring.temperature);
        for (a, b) in fast.iter().zip(&naive) {
            worst = worst.max((a - b).abs());
        }
    }
    CheckOutcome::new(
        "aggregation equivalence",
        worst <= 1e-6,
        format!(
            "{instances} instances, K = {}, d in {dims:?}, max |diff| = {worst:.2e}, {:.1}s",
            cfg.views,
            t.elapsed().as_secs_f64()
        ),
    )
}

/// Wall-clock ratio of the naive per-point path to the feature-space path
/// on one cloud of `n` points.
pub fn aggregation_speedup(n: usize, d: usize, cfg: &ViewConfig, min_ratio: f64, seed: u64) -> CheckOutcome {
    let inst = seg_instance(n, d, cfg, seed);
    let proj: Vec<&Projection> = inst.projections.iter().collect();
    let scoring = ScoringConfig::default();
    let time = |f: &dyn Fn() -> Vec<f64>| {
        // best of three to damp scheduler noise
        (0..3)
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(f());
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let fast = time(&|| segment_3d(&proj, &inst.features, &inst.prompts, &scoring).expect("valid instance"));
    let naive = time(&|| naive_segmentation_3d(&proj, &inst.features, &inst.prompts, scoring.temperature));
    let ratio = naive / fast;
    CheckOutcome::new(
        "aggregation speedup",
        ratio >= min_ratio,
        format!(
            "n = {n}, {}x{} grid, d = {d}: naive {:.1} ms, feature-space {:.1} ms, {ratio:.1}x (need {min_ratio}x)",
            cfg.grid_h,
            cfg.grid_w,
            naive * 1e3,
            fast * 1e3
        ),
    )
}

/// A random training sample rendered at a small resolution.
pub fn random_train_sample(n: usize, views: usize, d: usize, res: usize, grid: usize, seed: u64) -> TrainSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = random_cloud(n, &mut rng);
    let labels = PointLabels::new((0..n).map(|_| u8::from(rng.gen_bool(0.3))).collect()).expect("binary labels");
    let cfg = ViewConfig {
        views,
        height: res,
        width: res,
        grid_h: grid,
        grid_w: grid,
        ..ViewConfig::default()
    };
    let rendered = render_views(&cloud, &labels, &view_angles(views).expect("views > 0"), &cfg);
    let enc = MockEncoder::new(FeatureDims { h: grid, w: grid, d }, seed);
    let features = encode_views(&rendered, "g", &enc).expect("mock encodes");
    let projections = rendered.into_iter().map(|v| v.projection).collect();
    TrainSample::new(format!("g{seed}"), cloud, labels, projections, features).expect("consistent sample")
}

/// Analytic prompt gradients against central differences of the loss.
pub fn gradient_check(instances: usize, n: usize, views: usize, d: usize, seed: u64) -> CheckOutcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LossConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let batch = vec![random_train_sample(n, views, d, 32, 4, rng.gen())];
        let v = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let prompts = PromptPair::new(v(&mut rng), v(&mut rng)).expect("nonzero prompts");
        let g = grad_prompts(&batch, &prompts, &cfg).expect("valid batch");
        let flat: Vec<f64> = prompts.normal.iter().chain(&prompts.abnormal).copied().collect();
        let fd = central_difference(
            |x| {
                let p = PromptPair::new(x[..d].to_vec(), x[d..].to_vec()).expect("nonzero prompts");
                hybrid_loss(&batch, &p, &cfg).expect("valid batch").total
            },
            &flat,
            1e-6,
        );
        for (a, f) in g.normal.iter().chain(&g.abnormal).zip(&fd) {
            worst = worst.max((a - f).abs() / f.abs().max(1e-6));
        }
    }
    CheckOutcome::new(
        "gradient vs finite differences",
        worst < 1e-4,
        format!(
            "{instances} instances, n = {n}, K = {views}, d = {d}, max relative error {worst:.2e}, {:.1}s",
            t.elapsed().as_secs_f64()
        ),
    )
}

/// One-point sample with a 1x1 view per entry of `global_pa`, whose global
/// feature yields exactly that abnormal probability at temperature `tau`.
fn global_only_sample(global_pa: &[f64], view_labels: &[u8], cloud_label: u8, tau: f64) -> (TrainSample, PromptPair) {
    use crate::encoder::{FeatureGrid, Features, GlobalFeature};
    let prompts = PromptPair::new(vec![1.0, 0.0], vec![0.0, 1.0]).expect("unit prompts");
    let feature_for = |pa: f64| -> Vec<f64> {
        // f = (cos θ, sin θ) has cos_a - cos_n = √2·sin(θ - π/4)
        let gap = tau * (pa / (1.0 - pa)).ln();
        let theta = (gap / 2f64.sqrt()).asin() + std::f64::consts::FRAC_PI_4;
        vec![theta.cos(), theta.sin()]
    };
    let projections = view_labels
        .iter()
        .map(|&y| Projection::from_pixels(1, 1, &[Some((0, 0))], &[0.0], &[y]))
        .collect();
    let features = global_pa
        .iter()
        .map(|&pa| {
            let f = feature_for(pa);
            Features {
                global: GlobalFeature(f.clone()),
                grid: FeatureGrid::new(1, 1, 2, f).expect("1x1 grid"),
            }
        })
        .collect();
    let cloud = PointCloud::new(vec![[0.0; 3]]).expect("one point");
    let labels = PointLabels::new(vec![cloud_label]).expect("binary label");
    let s = TrainSample::new("hand", cloud, labels, projections, features).expect("consistent sample");
    (s, prompts)
}

/// The closed-form loss examples.
pub fn loss_closed_forms() -> CheckOutcome {
    const TOL: f64 = 1e-9;
    let mut rows = Vec::new();
    let mut check = |label: &str, got: f64, want: f64| {
        rows.push((label.to_string(), got, want, (got - want).abs() <= TOL));
    };

    let tau = 0.5;
    let (s, p) = global_only_sample(&[0.9, 0.7], &[1, 1], 1, tau);
    check("3D global CE", loss_3d_global(&s, &p, tau).unwrap_or(f64::NAN), -(0.8f64.ln()));
    let (s, p) = global_only_sample(&[0.9, 0.2], &[1, 0], 1, tau);
    check(
        "2D global CE",
        loss_2d_global(&s, &p, tau).unwrap_or(f64::NAN),
        0.5 * (-(0.9f64.ln()) - 0.8f64.ln()),
    );
    check("CE primitive", cross_entropy(0.2, 0.8, 1), -(0.8f64.ln()));

    let target = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
    let pred = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    // ε → 0 limit, with ε small enough to sit far below the tolerance
    check("Dice", dice_loss(&pred, &target, 1e-15).unwrap_or(f64::NAN), 1.0 / 3.0);
    check(
        "focal",
        focal_loss(&[0.1], &[0.9], &[1.0], 1.0, 2.0).unwrap_or(f64::NAN),
        0.01 * -(0.9f64.ln()),
    );

    // the rounded values quoted alongside the formulas
    let quoted = [
        (-(0.8f64.ln()), 0.22314, 5e-6),
        (0.5 * (-(0.9f64.ln()) - 0.8f64.ln()), 0.16425, 5e-6),
        (0.01 * -(0.9f64.ln()), 1.0536e-3, 5e-8),
    ];
    let quoted_ok = quoted.iter().all(|(v, q, tol)| (v - q).abs() <= *tol);

    let passed = quoted_ok && rows.iter().all(|r| r.3);
    let detail = rows
        .iter()
        .map(|(l, g, w, _)| format!("{l} {g:.9} (want {w:.9})"))
        .collect::<Vec<_>>()
        .join("; ");
    CheckOutcome::new("loss closed forms", passed, detail)
}

/// AUROC and AP over every label pattern of every size up to `max_size`,
/// then AUPRO on `aupro_instances` random instances.
pub fn metric_oracles(max_size: usize, aupro_instances: usize, seed: u64) -> CheckOutcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_rank: f64 = 0.0;
    let mut patterns = 0usize;
    let mut failures = Vec::new();
    for n in 1..=max_size {
        // coarse scores so ties are common
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..(n as i32 / 2 + 2)) as f64 / 4.0).collect();
        for mask in 0u32..(1 << n) {
            let labels: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
            patterns += 1;
            match (auroc(&scores, &labels), auroc_pairs(&scores, &labels)) {
                (Ok(a), Some(b)) => worst_rank = worst_rank.max((a - b).abs()),
                (Err(_), None) => {}
                _ => failures.push(format!("auroc defined-ness differs at n = {n}, mask {mask:b}")),
            }
            match (average_precision(&scores, &labels), average_precision_sweep(&scores, &labels)) {
                (Ok(a), Some(b)) => worst_rank = worst_rank.max((a - b).abs()),
                (Err(_), None) => {}
                _ => failures.push(format!("AP defined-ness differs at n = {n}, mask {mask:b}")),
            }
        }
    }

    let mut worst_pro: f64 = 0.0;
    for _ in 0..aupro_instances {
        let maps = rng.gen_range(1..=3);
        let fpr_limit = [0.3, 0.1, 0.5, 1.0][rng.gen_range(0..4)];
        let (mut all_s, mut all_l, mut all_r) = (Vec::new(), Vec::new(), Vec::new());
        let mut per_map = Vec::new();
        let mut next_id = 0;
        for _ in 0..maps {
            let n = rng.gen_range(5..40);
            let regions = rng.gen_range(0..=3u32);
            let ids: Vec<u32> = (0..n)
                .map(|_| if regions > 0 && rng.gen_bool(0.4) { rng.gen_range(1..=regions) } else { 0 })
                .collect();
            let labels: Vec<u8> = ids.iter().map(|&r| u8::from(r > 0)).collect();
            let scores: Vec<f64> = labels
                .iter()
                .map(|&l| (rng.gen_range(0..10) as f64 + 3.0 * l as f64) / 12.0)
                .collect();
            let set = RegionSet::from_ids(ids.clone());
            let offset = next_id;
            // the oracle wants ids unique across maps
            let used = ids.iter().copied().max().unwrap_or(0);
            all_r.extend(ids.iter().map(|&r| if r > 0 { r + offset } else { 0 }));
            next_id += used;
            all_s.extend(&scores);
            all_l.extend(&labels);
            per_map.push((scores, labels, set));
        }
        let m: Vec<&[f64]> = per_map.iter().map(|x| x.0.as_slice()).collect();
        let l: Vec<&[u8]> = per_map.iter().map(|x| x.1.as_slice()).collect();
        let r: Vec<RegionSet> = per_map.iter().map(|x| x.2.clone()).collect();
        match (aupro(&m, &l, &r, fpr_limit), aupro_exhaustive(&all_s, &all_l, &all_r, fpr_limit)) {
            (Ok(a), Some(b)) => worst_pro = worst_pro.max((a - b).abs()),
            (Err(_), None) => {}
            (a, b) => failures.push(format!("AUPRO defined-ness differs: {a:?} vs {b:?}")),
        }
    }
    let passed = failures.is_empty() && worst_rank <= 1e-12 && worst_pro <= 1e-9;
    let mut detail = format!(
        "{patterns} label patterns up to size {max_size}, max |diff| {worst_rank:.1e}; {aupro_instances} AUPRO instances, max |diff| {worst_pro:.1e}; {:.1}s",
        t.elapsed().as_secs_f64()
    );
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; first failure: {f}"));
    }
    CheckOutcome::new("metric oracles", passed, detail)
}

/// Fusion formulas on hand-computed inputs.
pub fn fusion_formulas() -> CheckOutcome {
    let run = |a: Vec<f64>, s: f64, rgb: Vec<f64>, s_rgb: f64, cloud: &PointCloud, sigma: f64| {
        let res = InferenceResult {
            point_map: a,
            global_score: s,
            per_view_probs: vec![],
            view_maps: vec![],
        };
        fuse_multimodal(&res, &rgb, s_rgb, sigma, 8, cloud).expect("matching lengths")
    };
    let mut worst: f64 = 0.0;
    let three = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).expect("points");

    // no smoothing: map = ½(A + A_rgb), max 0.6, global ½(½(0.4 + 0.8) + 0.6)
    let f = run(vec![0.8, 0.2, 0.4], 0.8, vec![0.4, 0.2, 0.0], 0.4, &three, 0.0);
    for (g, w) in f.point_map.iter().zip([0.6, 0.2, 0.2]) {
        worst = worst.max((g - w).abs());
    }
    worst = worst.max((f.global_score - 0.6).abs());

    // two points at distance 0.1 with σ = 0.1: neighbour weight e^{-1/2}
    let two = PointCloud::new(vec![[0.0; 3], [0.1, 0.0, 0.0]]).expect("points");
    let f = run(vec![1.0, 0.0], 0.5, vec![0.6, 0.2], 0.3, &two, 0.1);
    let w = (-0.5f64).exp();
    let (s0, s1) = (1.6, 0.2);
    let m0 = 0.5 * (s0 + w * s1) / (1.0 + w);
    let m1 = 0.5 * (w * s0 + s1) / (1.0 + w);
    worst = worst.max((f.point_map[0] - m0).abs()).max((f.point_map[1] - m1).abs());
    worst = worst.max((f.global_score - 0.5 * (0.5 * (0.3 + 0.5) + m0.max(m1))).abs());

    CheckOutcome::new(
        "fusion formulas",
        worst <= 1e-12,
        format!("max |diff| {worst:.1e} over hand-computed maps and scores"),
    )
}

/// The oracle checks at a size that finishes in a few seconds.
pub fn quick_suite(seed: u64) -> Vec<CheckOutcome> {
    let small = ViewConfig {
        height: 96,
        width: 96,
        grid_h: 8,
        grid_w: 8,
        ..ViewConfig::default()
    };
    vec![
        visibility_oracle(10, (100, 600), seed),
        aggregation_equivalence(4, 1000, &[8, 64], &small, seed),
        gradient_check(3, 50, 3, 8, seed),
        loss_closed_forms(),
        metric_oracles(8, 10, seed),
        fusion_formulas(),
    ]
}
