//! Prompt learning: the four loss terms, their analytic gradient with respect
//! to the prompt pair, and the Adam loop.
//!
//! Gradients are derived by hand. The chain runs loss → (global
//! probabilities, upsampled maps, aggregated point maps) → cell probabilities
//! → cosine logits → prompts. Every probability pair is a two-class softmax of
//! `z = (cos_a - cos_n) / τ`, so an upstream gradient `(g_a, g_n)` on
//! `(p_a, p_n)` becomes `(g_a - g_n)·p_a·p_n` on `z`, and the prompt gradient
//! is a weighted sum of `∂cos(g, f)/∂g = f/(|f||g|) - cos·g/|g|²`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, PointLabels};
use crate::encoder::{cosine, dot, norm, FeatureDims, Features, PromptPair};
use crate::error::{Error, Result};
use crate::export::TextFile;
use crate::grid::Grid2;
use crate::render::Projection;
use crate::scoring::{
    aggregate_divisors, classify_cells, upsample_bilinear, upsample_bilinear_adjoint, AggregateMode,
};

/// Probabilities are clamped here before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_CLAMP).ln()
}

/// `1 - (2·Σpt + ε) / (Σp + Σt + ε)`.
pub fn dice_loss(pred: &[f64], target: &[f64], eps: f64) -> Result<f64> {
    check_same_len(pred.len(), target.len())?;
    let (num, den) = dice_parts(pred, target, eps);
    Ok(1.0 - num / den)
}

fn dice_parts(pred: &[f64], target: &[f64], eps: f64) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for (p, t) in pred.iter().zip(target) {
        inter += p * t;
        sp += p;
        st += t;
    }
    (2.0 * inter + eps, sp + st + eps)
}

/// Gradient of [`dice_loss`] with respect to `pred`.
pub fn dice_grad(pred: &[f64], target: &[f64], eps: f64) -> Vec<f64> {
    let (num, den) = dice_parts(pred, target, eps);
    target
        .iter()
        .map(|t| -(2.0 * t * den - num) / (den * den))
        .collect()
}

/// Mean over pixels of `-α(1-p_t)^γ·ln p_t`, where `p_t` is the abnormal
/// probability on target pixels and the normal one elsewhere.
pub fn focal_loss(p_n: &[f64], p_a: &[f64], target: &[f64], alpha: f64, gamma: f64) -> Result<f64> {
    check_same_len(p_n.len(), target.len())?;
    check_same_len(p_a.len(), target.len())?;
    if target.is_empty() {
        return Err(Error::validation("focal loss of an empty map"));
    }
    let sum: f64 = p_n
        .iter()
        .zip(p_a)
        .zip(target)
        .map(|((n, a), t)| focal_term(if *t > 0.5 { *a } else { *n }, alpha, gamma))
        .sum();
    Ok(sum / target.len() as f64)
}

fn focal_weight(p: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else {
        (1.0 - p).max(0.0).powf(gamma)
    }
}

fn focal_term(p: f64, alpha: f64, gamma: f64) -> f64 {
    -alpha * focal_weight(p, gamma) * clamped_ln(p)
}

/// Derivative of one focal term with respect to `p_t`.
fn focal_term_grad(p: f64, alpha: f64, gamma: f64) -> f64 {
    let log_part = if p > LOG_CLAMP { -focal_weight(p, gamma) / p } else { 0.0 };
    let q = 1.0 - p;
    let weight_part = if gamma == 0.0 || q <= 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * clamped_ln(p)
    };
    alpha * (log_part + weight_part)
}

/// `-ln p_label` with the log clamp.
pub fn cross_entropy(p_n: f64, p_a: f64, label: u8) -> f64 {
    -clamped_ln(if label == 1 { p_a } else { p_n })
}

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!("map sizes {a} and {b} differ")));
    }
    Ok(())
}

/// One training cloud with its renderings and their features.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub key: String,
    pub cloud: PointCloud,
    pub labels: PointLabels,
    pub projections: Vec<Projection>,
    pub features: Vec<Features>,
    pub global_label: u8,
    pub per_view_labels: Vec<u8>,
}

impl TrainSample {
    pub fn new(
        key: impl Into<String>,
        cloud: PointCloud,
        labels: PointLabels,
        projections: Vec<Projection>,
        features: Vec<Features>,
    ) -> Result<Self> {
        let key = key.into();
        if projections.is_empty() || projections.len() != features.len() {
            return Err(Error::validation(format!(
                "{key}: {} views but {} feature sets",
                projections.len(),
                features.len()
            )));
        }
        if labels.len() != cloud.len() || projections.iter().any(|p| p.len() != cloud.len()) {
            return Err(Error::validation(format!("{key}: labels or views do not match the cloud")));
        }
        let (h, w) = (projections[0].height(), projections[0].width());
        if projections.iter().any(|p| (p.height(), p.width()) != (h, w)) {
            return Err(Error::validation(format!("{key}: views have different resolutions")));
        }
        let dims = features[0].dims();
        if let Some(k) = features.iter().position(|f| f.dims() != dims) {
            return Err(Error::DimensionMismatch(format!(
                "{key}: view {k} has features {:?}, view 0 has {:?}",
                features[k].dims(),
                dims
            )));
        }
        let global_label = u8::from(labels.is_anomalous());
        let per_view_labels = projections.iter().map(|p| u8::from(p.max_label() > 0)).collect();
        Ok(Self {
            key,
            cloud,
            labels,
            projections,
            features,
            global_label,
            per_view_labels,
        })
    }

    pub fn views(&self) -> usize {
        self.projections.len()
    }

    pub fn feature_dims(&self) -> FeatureDims {
        self.features[0].dims()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_eps: f64,
    pub aggregate_mode: AggregateMode,
    pub weight_3d_global: f64,
    pub weight_3d_local: f64,
    pub weight_2d_global: f64,
    pub weight_2d_local: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            focal_alpha: 1.0,
            focal_gamma: 2.0,
            dice_eps: 1.0,
            aggregate_mode: AggregateMode::AllViews,
            weight_3d_global: 1.0,
            weight_3d_local: 1.0,
            weight_2d_global: 1.0,
            weight_2d_local: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::validation("temperature must be positive"));
        }
        if !(self.focal_alpha > 0.0) || !(self.focal_gamma >= 0.0) {
            return Err(Error::validation("focal alpha must be positive and gamma non-negative"));
        }
        if !(self.dice_eps > 0.0) {
            return Err(Error::validation("dice smoothing must be positive"));
        }
        let w = [
            self.weight_3d_global,
            self.weight_3d_local,
            self.weight_2d_global,
            self.weight_2d_local,
        ];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::validation("loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    fn weights(&self) -> [f64; 4] {
        [
            self.weight_3d_global,
            self.weight_3d_local,
            self.weight_2d_global,
            self.weight_2d_local,
        ]
    }
}

/// The four loss terms, unweighted, and their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l3d_global: f64,
    pub l3d_local: f64,
    pub l2d_global: f64,
    pub l2d_local: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn from_parts(parts: [f64; 4], cfg: &LossConfig) -> Self {
        let total = parts.iter().zip(cfg.weights()).map(|(p, w)| p * w).sum();
        Self {
            l3d_global: parts[0],
            l3d_local: parts[1],
            l2d_global: parts[2],
            l2d_local: parts[3],
            total,
        }
    }

    fn parts(&self) -> [f64; 4] {
        [self.l3d_global, self.l3d_local, self.l2d_global, self.l2d_local]
    }

    /// Component-wise mean, with the total recomputed from the mean parts.
    pub fn mean(items: &[LossBreakdown], cfg: &LossConfig) -> Self {
        let mut acc = [0.0; 4];
        for it in items {
            for (a, p) in acc.iter_mut().zip(it.parts()) {
                *a += p;
            }
        }
        let n = items.len() as f64;
        Self::from_parts(acc.map(|a| a / n), cfg)
    }
}

/// Gradient of a loss with respect to both prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGradient {
    pub normal: Vec<f64>,
    pub abnormal: Vec<f64>,
}

impl PromptGradient {
    fn zeros(d: usize) -> Self {
        Self {
            normal: vec![0.0; d],
            abnormal: vec![0.0; d],
        }
    }

    fn add_scaled(&mut self, other: &PromptGradient, s: f64) {
        for (a, b) in self.normal.iter_mut().zip(&other.normal) {
            *a += s * b;
        }
        for (a, b) in self.abnormal.iter_mut().zip(&other.abnormal) {
            *a += s * b;
        }
    }
}

struct ViewForward {
    p_n: f64,
    p_a: f64,
    cell_n: Grid2<f64>,
    cell_a: Grid2<f64>,
    up_n: Vec<f64>,
    up_a: Vec<f64>,
    target: Vec<f64>,
}

struct SampleForward {
    views: Vec<ViewForward>,
    divisors: Vec<f64>,
    s3d_n: Vec<f64>,
    s3d_a: Vec<f64>,
    y3d: Vec<f64>,
    y3d_complement: Vec<f64>,
}

fn check_prompts(sample: &TrainSample, prompts: &PromptPair) -> Result<()> {
    if prompts.dim() != sample.feature_dims().d {
        return Err(Error::DimensionMismatch(format!(
            "{}: prompts have d = {}, features have d = {}",
            sample.key,
            prompts.dim(),
            sample.feature_dims().d
        )));
    }
    Ok(())
}

fn forward(sample: &TrainSample, prompts: &PromptPair, cfg: &LossConfig) -> Result<SampleForward> {
    check_prompts(sample, prompts)?;
    let tau = cfg.temperature;
    let mut views = Vec::with_capacity(sample.views());
    for (proj, feat) in sample.projections.iter().zip(&sample.features) {
        let (p_n, p_a) = crate::encoder::class_probability(prompts, &feat.global.0, tau)?;
        let cells = classify_cells(prompts, &feat.grid, tau)?;
        let (h, w) = (proj.height(), proj.width());
        let up_n = upsample_bilinear(&cells.normal, h, w).into_vec();
        let up_a = upsample_bilinear(&cells.abnormal, h, w).into_vec();
        let target = proj.gt_mask().as_slice().iter().map(|&g| f64::from(u8::from(g > 0))).collect();
        views.push(ViewForward {
            p_n,
            p_a,
            cell_n: cells.normal,
            cell_a: cells.abnormal,
            up_n,
            up_a,
            target,
        });
    }
    let projs: Vec<&Projection> = sample.projections.iter().collect();
    let divisors = aggregate_divisors(&projs, cfg.aggregate_mode);
    let n = sample.cloud.len();
    let mut s3d_n = vec![0.0; n];
    let mut s3d_a = vec![0.0; n];
    for (proj, v) in sample.projections.iter().zip(&views) {
        for j in 0..n {
            if let (true, Some(p)) = (proj.visible(j), proj.pixel_index(j)) {
                s3d_n[j] += v.up_n[p];
                s3d_a[j] += v.up_a[p];
            }
        }
    }
    for j in 0..n {
        s3d_n[j] /= divisors[j];
        s3d_a[j] /= divisors[j];
    }
    let y3d = sample.labels.as_f64();
    let y3d_complement = y3d.iter().map(|y| 1.0 - y).collect();
    Ok(SampleForward {
        views,
        divisors,
        s3d_n,
        s3d_a,
        y3d,
        y3d_complement,
    })
}

fn view_mean_probs(fw: &SampleForward) -> (f64, f64) {
    let k = fw.views.len() as f64;
    (
        fw.views.iter().map(|v| v.p_n).sum::<f64>() / k,
        fw.views.iter().map(|v| v.p_a).sum::<f64>() / k,
    )
}

fn parts_of(sample: &TrainSample, fw: &SampleForward, cfg: &LossConfig) -> Result<[f64; 4]> {
    let (mn, ma) = view_mean_probs(fw);
    let l3g = cross_entropy(mn, ma, sample.global_label);
    let l3l = dice_loss(&fw.s3d_n, &fw.y3d_complement, cfg.dice_eps)? + dice_loss(&fw.s3d_a, &fw.y3d, cfg.dice_eps)?;
    let k = fw.views.len() as f64;
    let l2g = fw
        .views
        .iter()
        .zip(&sample.per_view_labels)
        .map(|(v, &y)| cross_entropy(v.p_n, v.p_a, y))
        .sum::<f64>()
        / k;
    let mut l2l = 0.0;
    for v in &fw.views {
        let complement: Vec<f64> = v.target.iter().map(|t| 1.0 - t).collect();
        l2l += focal_loss(&v.up_n, &v.up_a, &v.target, cfg.focal_alpha, cfg.focal_gamma)?
            + dice_loss(&v.up_n, &complement, cfg.dice_eps)?
            + dice_loss(&v.up_a, &v.target, cfg.dice_eps)?;
    }
    Ok([l3g, l3l, l2g, l2l / k])
}

/// Loss breakdown of a single sample.
pub fn sample_loss(sample: &TrainSample, prompts: &PromptPair, cfg: &LossConfig) -> Result<LossBreakdown> {
    let fw = forward(sample, prompts, cfg)?;
    Ok(LossBreakdown::from_parts(parts_of(sample, &fw, cfg)?, cfg))
}

fn single_cfg(tau: f64) -> LossConfig {
    LossConfig {
        temperature: tau,
        ..LossConfig::default()
    }
}

/// Cross-entropy of the view-averaged probabilities against the cloud label.
pub fn loss_3d_global(sample: &TrainSample, prompts: &PromptPair, tau: f64) -> Result<f64> {
    Ok(sample_loss(sample, prompts, &single_cfg(tau))?.l3d_global)
}

/// Dice on the aggregated normal and abnormal point maps.
pub fn loss_3d_local(sample: &TrainSample, prompts: &PromptPair, cfg: &LossConfig) -> Result<f64> {
    Ok(sample_loss(sample, prompts, cfg)?.l3d_local)
}

/// Mean over views of the per-view global cross-entropy.
pub fn loss_2d_global(sample: &TrainSample, prompts: &PromptPair, tau: f64) -> Result<f64> {
    Ok(sample_loss(sample, prompts, &single_cfg(tau))?.l2d_global)
}

/// Mean over views of focal plus both Dice terms on the upsampled maps.
pub fn loss_2d_local(sample: &TrainSample, prompts: &PromptPair, cfg: &LossConfig) -> Result<f64> {
    Ok(sample_loss(sample, prompts, cfg)?.l2d_local)
}

/// Accumulates `Σ w·f̂`, `Σ w·cos(g_a, f)` and `Σ w·cos(g_n, f)` where `w` is
/// the loss gradient on the logit gap of a feature.
struct CosineAccumulator<'a> {
    prompts: &'a PromptPair,
    na: f64,
    nn: f64,
    sum_f: Vec<f64>,
    sum_ca: f64,
    sum_cn: f64,
}

impl<'a> CosineAccumulator<'a> {
    fn new(prompts: &'a PromptPair) -> Self {
        Self {
            prompts,
            na: norm(&prompts.abnormal),
            nn: norm(&prompts.normal),
            sum_f: vec![0.0; prompts.dim()],
            sum_ca: 0.0,
            sum_cn: 0.0,
        }
    }

    fn add(&mut self, f: &[f64], w: f64) {
        if w == 0.0 {
            return;
        }
        let nf = norm(f);
        let ca = (dot(&self.prompts.abnormal, f) / (self.na * nf)).clamp(-1.0, 1.0);
        let cn = (dot(&self.prompts.normal, f) / (self.nn * nf)).clamp(-1.0, 1.0);
        for (s, x) in self.sum_f.iter_mut().zip(f) {
            *s += w * x / nf;
        }
        self.sum_ca += w * ca;
        self.sum_cn += w * cn;
    }

    fn finish(self, tau: f64) -> PromptGradient {
        let g = |p: &[f64], np: f64, sum_c: f64, sign: f64| -> Vec<f64> {
            self.sum_f
                .iter()
                .zip(p)
                .map(|(a, gi)| sign / tau * (a / np - sum_c * gi / (np * np)))
                .collect()
        };
        PromptGradient {
            abnormal: g(&self.prompts.abnormal, self.na, self.sum_ca, 1.0),
            normal: g(&self.prompts.normal, self.nn, self.sum_cn, -1.0),
        }
    }
}

fn ce_grad(p: f64) -> f64 {
    if p > LOG_CLAMP {
        -1.0 / p
    } else {
        0.0
    }
}

/// Loss and prompt gradient of one sample, with the gradient of the
/// weighted total.
pub fn sample_loss_and_grad(
    sample: &TrainSample,
    prompts: &PromptPair,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, PromptGradient)> {
    let fw = forward(sample, prompts, cfg)?;
    let loss = LossBreakdown::from_parts(parts_of(sample, &fw, cfg)?, cfg);
    let [w3g, w3l, w2g, w2l] = cfg.weights();
    let k = fw.views.len();
    let kf = k as f64;

    // upstream gradients on each view's global (p_a, p_n)
    let mut g_global: Vec<(f64, f64)> = vec![(0.0, 0.0); k];
    let (mn, ma) = view_mean_probs(&fw);
    for (g, (v, &y)) in g_global.iter_mut().zip(fw.views.iter().zip(&sample.per_view_labels)) {
        if sample.global_label == 1 {
            g.0 += w3g * ce_grad(ma) / kf;
        } else {
            g.1 += w3g * ce_grad(mn) / kf;
        }
        if y == 1 {
            g.0 += w2g * ce_grad(v.p_a) / kf;
        } else {
            g.1 += w2g * ce_grad(v.p_n) / kf;
        }
    }

    // 3D Dice gradients on the aggregated maps, scattered back to pixels
    let d3n = dice_grad(&fw.s3d_n, &fw.y3d_complement, cfg.dice_eps);
    let d3a = dice_grad(&fw.s3d_a, &fw.y3d, cfg.dice_eps);

    let mut acc = CosineAccumulator::new(prompts);
    for (kv, ((v, proj), feat)) in fw
        .views
        .iter()
        .zip(&sample.projections)
        .zip(&sample.features)
        .enumerate()
    {
        let npix = v.target.len();
        let complement: Vec<f64> = v.target.iter().map(|t| 1.0 - t).collect();
        let dn = dice_grad(&v.up_n, &complement, cfg.dice_eps);
        let da = dice_grad(&v.up_a, &v.target, cfg.dice_eps);
        let mut grad_up_n: Vec<f64> = dn.iter().map(|x| w2l * x / kf).collect();
        let mut grad_up_a: Vec<f64> = da.iter().map(|x| w2l * x / kf).collect();
        for i in 0..npix {
            let fg = w2l * focal_term_grad(
                if v.target[i] > 0.5 { v.up_a[i] } else { v.up_n[i] },
                cfg.focal_alpha,
                cfg.focal_gamma,
            ) / (npix as f64 * kf);
            if v.target[i] > 0.5 {
                grad_up_a[i] += fg;
            } else {
                grad_up_n[i] += fg;
            }
        }
        for j in 0..sample.cloud.len() {
            if let (true, Some(p)) = (proj.visible(j), proj.pixel_index(j)) {
                grad_up_n[p] += w3l * d3n[j] / fw.divisors[j];
                grad_up_a[p] += w3l * d3a[j] / fw.divisors[j];
            }
        }
        let (h, w) = (proj.height(), proj.width());
        let (gh, gw) = v.cell_a.shape();
        let cell_gn = upsample_bilinear_adjoint(&Grid2::from_vec(h, w, grad_up_n), gh, gw);
        let cell_ga = upsample_bilinear_adjoint(&Grid2::from_vec(h, w, grad_up_a), gh, gw);
        for r in 0..gh {
            for c in 0..gw {
                let (pa, pn) = (v.cell_a[(r, c)], v.cell_n[(r, c)]);
                acc.add(feat.grid.cell(r, c), (cell_ga[(r, c)] - cell_gn[(r, c)]) * pa * pn);
            }
        }
        let (ga, gn) = g_global[kv];
        acc.add(&feat.global.0, (ga - gn) * v.p_a * v.p_n);
    }
    Ok((loss, acc.finish(cfg.temperature)))
}

fn nonempty(batch: &[TrainSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    Ok(())
}

/// Batch mean of every loss term.
pub fn hybrid_loss(batch: &[TrainSample], prompts: &PromptPair, cfg: &LossConfig) -> Result<LossBreakdown> {
    nonempty(batch)?;
    let per: Vec<LossBreakdown> = batch
        .par_iter()
        .map(|s| sample_loss(s, prompts, cfg))
        .collect::<Result<_>>()?;
    Ok(LossBreakdown::mean(&per, cfg))
}

/// Gradient of the batch-mean weighted total with respect to both prompts.
pub fn grad_prompts(batch: &[TrainSample], prompts: &PromptPair, cfg: &LossConfig) -> Result<PromptGradient> {
    Ok(batch_loss_and_grad(batch, prompts, cfg)?.2)
}

fn batch_loss_and_grad(
    batch: &[TrainSample],
    prompts: &PromptPair,
    cfg: &LossConfig,
) -> Result<(Vec<LossBreakdown>, LossBreakdown, PromptGradient)> {
    nonempty(batch)?;
    let per: Vec<(LossBreakdown, PromptGradient)> = batch
        .par_iter()
        .map(|s| sample_loss_and_grad(s, prompts, cfg))
        .collect::<Result<_>>()?;
    let mut grad = PromptGradient::zeros(prompts.dim());
    let scale = 1.0 / batch.len() as f64;
    for (_, g) in &per {
        grad.add_scaled(g, scale);
    }
    let losses: Vec<LossBreakdown> = per.into_iter().map(|(l, _)| l).collect();
    let mean = LossBreakdown::mean(&losses, cfg);
    Ok((losses, mean, grad))
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            epochs: 15,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("learning rate must be finite and non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("epochs and batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub prompts: PromptPair,
    /// Per epoch, the mean over samples of the loss measured before each
    /// sample's update step.
    pub history: Vec<LossBreakdown>,
}

/// Optimize a prompt pair with Adam. Without `init`, prompts start as seeded
/// unit Gaussians normalized to unit length.
pub fn optimize_prompts(
    dataset: &[TrainSample],
    train: &TrainConfig,
    loss: &LossConfig,
    init: Option<PromptPair>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    train.validate()?;
    loss.validate()?;
    let d = dataset[0].feature_dims().d;
    let mut prompts = init.unwrap_or_else(|| PromptPair::random(d, train.seed));
    for s in dataset {
        check_prompts(s, &prompts)?;
    }
    let mut params: Vec<f64> = prompts.normal.iter().chain(&prompts.abnormal).copied().collect();
    let mut adam = Adam::new(train.lr, 2 * d);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(train.epochs);

    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_losses = vec![LossBreakdown::default(); dataset.len()];
        for chunk in order.chunks(train.batch_size) {
            let refs: Vec<&TrainSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let per: Vec<(LossBreakdown, PromptGradient)> = refs
                .par_iter()
                .map(|s| sample_loss_and_grad(s, &prompts, loss))
                .collect::<Result<_>>()?;
            let mut grad = PromptGradient::zeros(d);
            for (i, (l, g)) in chunk.iter().zip(&per) {
                grad.add_scaled(g, 1.0 / chunk.len() as f64);
                epoch_losses[*i] = *l;
            }
            let flat: Vec<f64> = grad.normal.iter().chain(&grad.abnormal).copied().collect();
            if flat.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric("non-finite prompt gradient".into()));
            }
            adam.step(&mut params, &flat);
            prompts = PromptPair::new(params[..d].to_vec(), params[d..].to_vec())
                .map_err(|_| Error::Numeric("prompt collapsed to zero".into()))?;
        }
        history.push(LossBreakdown::mean(&epoch_losses, loss));
    }
    Ok(TrainOutcome { prompts, history })
}

pub const HISTORY_HEADER: &str = "epoch,l3d_global,l3d_local,l2d_global,l2d_local,total";

/// Write the loss history as CSV with 1-based epoch numbers.
pub fn write_history_csv(path: &Path, history: &[LossBreakdown]) -> Result<()> {
    let mut f = TextFile::create(path)?;
    f.line(HISTORY_HEADER)?;
    for (e, h) in history.iter().enumerate() {
        f.line(&format!(
            "{},{},{},{},{},{}",
            e + 1,
            h.l3d_global,
            h.l3d_local,
            h.l2d_global,
            h.l2d_local,
            h.total
        ))?;
    }
    f.finish()
}

/// Cosine gradient of a single term, `f/(|f||g|) - cos·g/|g|²`.
pub fn cosine_grad(g: &[f64], f: &[f64]) -> Result<Vec<f64>> {
    let c = cosine(g, f)?;
    let (ng, nf) = (norm(g), norm(f));
    Ok(f.iter().zip(g).map(|(fi, gi)| fi / (nf * ng) - c * gi / (ng * ng)).collect())
}
