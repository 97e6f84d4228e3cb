//! The batch commands behind the CLI: render, train, infer and eval.
//!
//! Output layout under the output directory:
//!
//! ```text
//! config.toml                      effective configuration
//! renders/<id>/view_XX/...         rendered views (render)
//! checkpoint/{normal,abnormal}.padf
//! history.csv                      (train)
//! scores/<id>/points.csv           index,a,b,c,score (infer)
//! scores/<id>/summary.json
//! scores/<id>/view_XX.{pgm,f32}
//! scores/<id>/fused_points.csv     only with RGB features
//! scores/global_scores.csv
//! metrics.json                     (eval)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{load_labels, load_point_cloud, PointCloud, PointLabels};
use crate::config::RunConfig;
use crate::encoder::{load_features_expect, load_prompts, save_prompts, EncoderProvider, Features, PromptPair};
use crate::error::{Error, Result};
use crate::export::{create_dir, write_f32_raw, write_pgm, write_text, TextFile};
use crate::learning::{optimize_prompts, write_history_csv, TrainOutcome, TrainSample};
use crate::manifest::{Manifest, ManifestEntry, Split};
use crate::metrics::{connected_regions, evaluate, EvalInstance, MetricsReport};
use crate::render::{render_views, write_view_dir, Projection, ViewBundle};
use crate::scoring::{encode_views, fuse_multimodal, gaussian_blur_2d, score_rgb, score_views};

pub const CONFIG_ECHO: &str = "config.toml";
pub const RENDER_DIR: &str = "renders";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const HISTORY_FILE: &str = "history.csv";
pub const SCORES_DIR: &str = "scores";
pub const METRICS_FILE: &str = "metrics.json";
pub const POINTS_HEADER: &str = "index,a,b,c,score";

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::validation(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    create_dir(out)?;
    cfg.save(out.join(CONFIG_ECHO))
}

/// A manifest entry loaded into memory. `cloud` is the normalized cloud the
/// renderer sees; `raw` keeps the input coordinates for export.
pub struct LoadedEntry {
    pub id: String,
    pub raw: PointCloud,
    pub cloud: PointCloud,
    pub labels: Option<PointLabels>,
}

pub fn load_entry(manifest: &Manifest, entry: &ManifestEntry) -> Result<LoadedEntry> {
    let raw = load_point_cloud(manifest.resolve(&entry.cloud))?;
    let labels = match &entry.labels {
        Some(p) => Some(load_labels(manifest.resolve(p), raw.len())?),
        None => None,
    };
    Ok(LoadedEntry {
        id: entry.id.clone(),
        cloud: raw.normalized(),
        raw,
        labels,
    })
}

fn render_entry(e: &LoadedEntry, cfg: &RunConfig) -> Result<Vec<ViewBundle>> {
    let zeros;
    let labels = match &e.labels {
        Some(l) => l,
        None => {
            zeros = PointLabels::zeros(e.cloud.len());
            &zeros
        }
    };
    Ok(render_views(&e.cloud, labels, &cfg.views.angles()?, &cfg.views))
}

fn view_dir_name(k: usize) -> String {
    format!("view_{k:02}")
}

/// Render every manifest entry into `out/renders/<id>/view_XX/`.
pub fn cmd_render(manifest: &Manifest, cfg: &RunConfig, out: &Path) -> Result<usize> {
    manifest.validate()?;
    prepare_out(out, cfg)?;
    let root = out.join(RENDER_DIR);
    with_pool(cfg.workers, || {
        manifest
            .entries
            .par_iter()
            .map(|entry| {
                let e = load_entry(manifest, entry)?;
                let views = render_entry(&e, cfg)?;
                for (k, v) in views.iter().enumerate() {
                    write_view_dir(&root.join(&e.id).join(view_dir_name(k)), v)?;
                }
                Ok(())
            })
            .collect::<Result<Vec<()>>>()
    })??;
    Ok(manifest.entries.len())
}

fn train_sample(manifest: &Manifest, entry: &ManifestEntry, cfg: &RunConfig, provider: &dyn EncoderProvider) -> Result<TrainSample> {
    let e = load_entry(manifest, entry)?;
    let labels = e
        .labels
        .clone()
        .ok_or_else(|| Error::validation(format!("{}: train entries need labels", e.id)))?;
    let views = render_entry(&e, cfg)?;
    let features = encode_views(&views, &e.id, provider)?;
    let projections = views.into_iter().map(|v| v.projection).collect();
    TrainSample::new(e.id, e.cloud, labels, projections, features)
}

/// Learn prompts on the train split. Writes `checkpoint/` and `history.csv`.
pub fn cmd_train(manifest: &Manifest, cfg: &RunConfig, out: &Path, init: Option<&Path>) -> Result<TrainOutcome> {
    manifest.validate()?;
    prepare_out(out, cfg)?;
    let entries: Vec<&ManifestEntry> = manifest.split(Split::Train).collect();
    if entries.is_empty() {
        return Err(Error::validation("the manifest has no train entries"));
    }
    let init = match init {
        Some(p) => Some(load_prompts(p)?),
        None => None,
    };
    if let Some(p) = &init {
        check_prompt_dim(p, cfg)?;
    }
    let provider = cfg.build_provider()?;
    let outcome = with_pool(cfg.workers, || -> Result<TrainOutcome> {
        let samples: Vec<TrainSample> = entries
            .par_iter()
            .map(|e| train_sample(manifest, e, cfg, provider.as_ref()))
            .collect::<Result<_>>()?;
        optimize_prompts(&samples, &cfg.optimizer, &cfg.loss_config(), init)
    })??;
    save_prompts(out.join(CHECKPOINT_DIR), &outcome.prompts)?;
    write_history_csv(&out.join(HISTORY_FILE), &outcome.history)?;
    Ok(outcome)
}

fn check_prompt_dim(p: &PromptPair, cfg: &RunConfig) -> Result<()> {
    if p.dim() != cfg.provider.dim {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint has d = {}, provider produces d = {}",
            p.dim(),
            cfg.provider.dim
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub id: String,
    pub global_score: f64,
    pub per_view_probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb_global_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused_global_score: Option<f64>,
}

fn write_points_csv(path: &Path, raw: &PointCloud, scores: &[f64]) -> Result<()> {
    let mut f = TextFile::create(path)?;
    f.line(POINTS_HEADER)?;
    for (j, (p, s)) in raw.points().iter().zip(scores).enumerate() {
        f.line(&format!("{j},{},{},{},{s}", p[0], p[1], p[2]))?;
    }
    f.finish()
}

fn load_rgb_features(dir: &Path, views: usize, cfg: &RunConfig) -> Result<Vec<Features>> {
    (0..views)
        .map(|k| load_features_expect(dir.join(format!("{}.padf", view_dir_name(k))), cfg.feature_dims()))
        .collect()
}

fn infer_entry(
    manifest: &Manifest,
    entry: &ManifestEntry,
    cfg: &RunConfig,
    prompts: &PromptPair,
    provider: &dyn EncoderProvider,
    root: &Path,
) -> Result<ScoreSummary> {
    let e = load_entry(manifest, entry)?;
    let views = render_entry(&e, cfg)?;
    let features = encode_views(&views, &e.id, provider)?;
    let projections: Vec<&Projection> = views.iter().map(|v| &v.projection).collect();
    let res = score_views(&e.cloud, &projections, &features, prompts, &cfg.scoring)?;

    let dir = root.join(&e.id);
    create_dir(&dir)?;
    write_points_csv(&dir.join("points.csv"), &e.raw, &res.point_map)?;
    for (k, m) in res.view_maps.iter().enumerate() {
        let blurred = gaussian_blur_2d(m, cfg.scoring.sigma_2d);
        write_pgm(&dir.join(format!("{}.pgm", view_dir_name(k))), &blurred)?;
        write_f32_raw(&dir.join(format!("{}.f32", view_dir_name(k))), blurred.as_slice())?;
    }

    let mut summary = ScoreSummary {
        id: e.id.clone(),
        global_score: res.global_score,
        per_view_probs: res.per_view_probs.clone(),
        rgb_global_score: None,
        fused_global_score: None,
    };
    if let Some(rgb_dir) = &entry.rgb_features {
        let rgb = load_rgb_features(&manifest.resolve(rgb_dir), views.len(), cfg)?;
        let (rgb_map, rgb_global) = score_rgb(&e.cloud, &projections, &rgb, prompts, &cfg.scoring)?;
        let fused = fuse_multimodal(&res, &rgb_map, rgb_global, cfg.scoring.sigma_3d, cfg.scoring.k_nn, &e.cloud)?;
        write_points_csv(&dir.join("fused_points.csv"), &e.raw, &fused.point_map)?;
        summary.rgb_global_score = Some(rgb_global);
        summary.fused_global_score = Some(fused.global_score);
    }
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    write_text(&dir.join("summary.json"), &json)?;
    Ok(summary)
}

/// Score the test split with a prompt checkpoint.
pub fn cmd_infer(manifest: &Manifest, cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<Vec<ScoreSummary>> {
    manifest.validate()?;
    let prompts = load_prompts(checkpoint)?;
    check_prompt_dim(&prompts, cfg)?;
    prepare_out(out, cfg)?;
    let provider = cfg.build_provider()?;
    let root = out.join(SCORES_DIR);
    create_dir(&root)?;
    let entries: Vec<&ManifestEntry> = manifest.split(Split::Test).collect();
    let summaries = with_pool(cfg.workers, || {
        entries
            .par_iter()
            .map(|e| infer_entry(manifest, e, cfg, &prompts, provider.as_ref(), &root))
            .collect::<Result<Vec<_>>>()
    })??;
    let csv = root.join("global_scores.csv");
    let mut f = TextFile::create(&csv)?;
    f.line("id,global_score,fused_global_score")?;
    for s in &summaries {
        let fused = s.fused_global_score.map(|v| v.to_string()).unwrap_or_default();
        f.line(&format!("{},{},{}", s.id, s.global_score, fused))?;
    }
    f.finish()?;
    Ok(summaries)
}

/// Read the score column of a `points.csv`, checking its shape.
pub fn read_points_csv(path: &Path, n: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(POINTS_HEADER) {
        return Err(Error::format(path, format!("expected header '{POINTS_HEADER}'")));
    }
    let mut scores = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        let bad = |m: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: m.to_string(),
        };
        if cols.len() != 5 {
            return Err(bad("expected 5 columns"));
        }
        if cols[0].parse::<usize>().ok() != Some(i) {
            return Err(bad("point indices must run 0, 1, 2, ..."));
        }
        let s: f64 = cols[4].parse().map_err(|_| bad("score is not a number"))?;
        if !s.is_finite() {
            return Err(bad("score is not finite"));
        }
        scores.push(s);
    }
    if scores.len() != n {
        return Err(Error::format(path, format!("expected {n} points, found {}", scores.len())));
    }
    Ok(scores)
}

fn read_summary(path: &Path) -> Result<ScoreSummary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Compute metrics for the test split from an infer output directory.
pub fn cmd_eval(manifest: &Manifest, cfg: &RunConfig, scores_dir: &Path, out: &Path) -> Result<MetricsReport> {
    manifest.validate()?;
    prepare_out(out, cfg)?;
    let entries: Vec<&ManifestEntry> = manifest.split(Split::Test).collect();
    let root = if scores_dir.join(SCORES_DIR).is_dir() {
        scores_dir.join(SCORES_DIR)
    } else {
        scores_dir.to_path_buf()
    };
    struct Loaded {
        plain: EvalInstance,
        fused: Option<EvalInstance>,
    }
    let loaded: Vec<Loaded> = with_pool(cfg.workers, || {
        entries
            .par_iter()
            .map(|entry| -> Result<Loaded> {
                let e = load_entry(manifest, entry)?;
                let labels = e
                    .labels
                    .clone()
                    .ok_or_else(|| Error::validation(format!("{}: test entry has no labels to evaluate against", e.id)))?;
                let dir = root.join(&e.id);
                let missing = |what: &str| Error::validation(format!("{}: no {what} in {}", e.id, dir.display()));
                let points = dir.join("points.csv");
                let summary = dir.join("summary.json");
                if !points.is_file() {
                    return Err(missing("points.csv"));
                }
                if !summary.is_file() {
                    return Err(missing("summary.json"));
                }
                let scores = read_points_csv(&points, e.cloud.len())?;
                let summary = read_summary(&summary)?;
                let regions = connected_regions(&labels, &e.cloud, cfg.eval.region_radius)?;
                let fused_path = dir.join("fused_points.csv");
                let fused = match (summary.fused_global_score, fused_path.is_file()) {
                    (Some(g), true) => Some(EvalInstance {
                        key: e.id.clone(),
                        global_score: g,
                        point_scores: read_points_csv(&fused_path, e.cloud.len())?,
                        labels: labels.labels().to_vec(),
                        regions: regions.clone(),
                    }),
                    _ => None,
                };
                Ok(Loaded {
                    plain: EvalInstance {
                        key: e.id,
                        global_score: summary.global_score,
                        point_scores: scores,
                        labels: labels.labels().to_vec(),
                        regions,
                    },
                    fused,
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let plain: Vec<EvalInstance> = loaded.iter().map(|l| l.plain.clone()).collect();
    let fused_count = loaded.iter().filter(|l| l.fused.is_some()).count();
    let multimodal = if fused_count == 0 {
        None
    } else if fused_count < loaded.len() {
        let id = &loaded.iter().find(|l| l.fused.is_none()).unwrap().plain.key;
        return Err(Error::validation(format!("{id}: fused scores missing while other entries have them")));
    } else {
        let fused: Vec<EvalInstance> = loaded.into_iter().filter_map(|l| l.fused).collect();
        Some(evaluate(&fused, cfg.eval.pixel_auroc, cfg.eval.fpr_limit))
    };
    let report = MetricsReport {
        instances: plain.len(),
        metrics: evaluate(&plain, cfg.eval.pixel_auroc, cfg.eval.fpr_limit),
        multimodal,
    };
    write_text(&out.join(METRICS_FILE), &report.to_json())?;
    Ok(report)
}

/// Where a checkpoint would be found inside a train output directory.
pub fn checkpoint_dir(train_out: &Path) -> PathBuf {
    train_out.join(CHECKPOINT_DIR)
}
