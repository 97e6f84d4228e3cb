//! Detection and segmentation metrics: AUROC, average precision, AUPRO and
//! the region extraction AUPRO needs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, PointLabels};
use crate::error::{Error, Result};
use crate::spatial::PointGrid;

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::validation(if pos == 0 {
            "no anomalous samples"
        } else {
            "no normal samples"
        }));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, split into groups of equal score.
fn tie_groups_descending(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Mann-Whitney AUROC with ties counted as one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    // walk ascending; each positive beats every negative below its group
    let mut groups = tie_groups_descending(scores);
    groups.reverse();
    let mut negatives_below = 0usize;
    let mut wins2 = 0u128; // twice the win count, to keep halves exact
    for g in groups {
        let p = g.iter().filter(|&&i| labels[i] != 0).count();
        let n = g.len() - p;
        wins2 += (2 * p * negatives_below + p * n) as u128;
        negatives_below += n;
    }
    Ok(wins2 as f64 / (2.0 * pos as f64 * neg as f64))
}

/// `Σ (R_k - R_{k-1})·P_k` over the descending sweep with ties grouped.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = class_counts(scores, labels)?;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    for g in tie_groups_descending(scores) {
        let hits = g.iter().filter(|&&i| labels[i] != 0).count();
        tp += hits;
        seen += g.len();
        if hits > 0 {
            ap += (hits as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

/// Region membership for one instance: 0 for elements outside every region,
/// otherwise ids `1..=count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSet {
    pub ids: Vec<u32>,
    pub count: usize,
}

impl RegionSet {
    /// Build from one id per element, 0 meaning outside every region.
    pub fn from_ids(ids: Vec<u32>) -> Self {
        let mut distinct: Vec<u32> = ids.iter().copied().filter(|&r| r > 0).collect();
        distinct.sort_unstable();
        distinct.dedup();
        Self {
            count: distinct.len(),
            ids,
        }
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Group anomalous points into regions: two anomalous points share a region
/// when a chain of anomalous points, each within `radius` of the next, links
/// them. Region ids follow the lowest member index. Labels that already
/// carry region ids are returned as they are.
pub fn connected_regions(labels: &PointLabels, cloud: &PointCloud, radius: f64) -> Result<RegionSet> {
    if labels.len() != cloud.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} points",
            labels.len(),
            cloud.len()
        )));
    }
    if let Some(ids) = labels.region_ids() {
        return Ok(RegionSet::from_ids(ids.to_vec()));
    }
    if !(radius > 0.0) {
        return Err(Error::validation("region radius must be positive"));
    }
    let anomalous: Vec<usize> = (0..labels.len()).filter(|&j| labels.labels()[j] != 0).collect();
    let mut ids = vec![0u32; labels.len()];
    if anomalous.is_empty() {
        return Ok(RegionSet { ids, count: 0 });
    }
    let pts: Vec<_> = anomalous.iter().map(|&j| cloud.points()[j]).collect();
    let grid = PointGrid::new(&pts, Some(radius));
    let mut parent: Vec<usize> = (0..pts.len()).collect();
    for (a, p) in pts.iter().enumerate() {
        for b in grid.within(p, radius) {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                // keep the lower index as root
                let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
                parent[hi] = lo;
            }
        }
    }
    let mut region_of_root = BTreeMap::new();
    for a in 0..pts.len() {
        let root = find(&mut parent, a);
        let next = region_of_root.len() as u32 + 1;
        ids[anomalous[a]] = *region_of_root.entry(root).or_insert(next);
    }
    Ok(RegionSet {
        ids,
        count: region_of_root.len(),
    })
}

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

/// Area under the per-region-overlap curve up to `fpr_limit`, normalized.
/// FPR is pooled over all instances and PRO averages every region of every
/// instance.
pub fn aupro(maps: &[&[f64]], labels: &[&[u8]], regions: &[RegionSet], fpr_limit: f64) -> Result<f64> {
    if maps.len() != labels.len() || maps.len() != regions.len() {
        return Err(Error::DimensionMismatch("maps, labels and regions differ in count".into()));
    }
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::validation("fpr_limit must lie in (0, 1]"));
    }
    let mut scores = Vec::new();
    let mut negative = Vec::new();
    let mut region = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for ((m, l), r) in maps.iter().zip(labels).zip(regions) {
        if m.len() != l.len() || m.len() != r.ids.len() {
            return Err(Error::DimensionMismatch("map, labels and regions differ in length".into()));
        }
        // remap this instance's ids onto a global range
        let mut local: BTreeMap<u32, usize> = BTreeMap::new();
        for (j, &id) in r.ids.iter().enumerate() {
            scores.push(m[j]);
            negative.push(l[j] == 0);
            if id == 0 {
                region.push(usize::MAX);
            } else {
                let g = *local.entry(id).or_insert_with(|| {
                    sizes.push(0);
                    sizes.len() - 1
                });
                sizes[g] += 1;
                region.push(g);
            }
        }
    }
    if sizes.is_empty() {
        return Err(Error::validation("no anomalous regions"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let total_neg = negative.iter().filter(|&&n| n).count();
    if total_neg == 0 {
        return Err(Error::validation("no normal samples"));
    }
    let n_regions = sizes.len() as f64;
    let mut fp = 0usize;
    let mut pro_sum = 0.0;
    let (mut f0, mut p0) = (0.0, 0.0);
    let mut area = 0.0;
    for g in tie_groups_descending(&scores) {
        for &i in &g {
            if negative[i] {
                fp += 1;
            }
            if region[i] != usize::MAX {
                pro_sum += 1.0 / sizes[region[i]] as f64;
            }
        }
        let f1 = fp as f64 / total_neg as f64;
        let p1 = pro_sum / n_regions;
        if f1 > fpr_limit {
            let p_end = p0 + (p1 - p0) * (fpr_limit - f0) / (f1 - f0);
            area += (fpr_limit - f0) * (p0 + p_end) / 2.0;
            return Ok(area / fpr_limit);
        }
        area += (f1 - f0) * (p0 + p1) / 2.0;
        (f0, p0) = (f1, p1);
        if f0 >= fpr_limit {
            break;
        }
    }
    Ok(area / fpr_limit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelAurocMode {
    /// One AUROC over every point of every instance.
    Pooled,
    /// Mean of per-instance AUROCs over instances that contain both classes.
    PerInstance,
}

pub fn point_auroc(maps: &[&[f64]], labels: &[&[u8]], mode: PixelAurocMode) -> Result<f64> {
    if maps.len() != labels.len() {
        return Err(Error::DimensionMismatch("maps and labels differ in count".into()));
    }
    match mode {
        PixelAurocMode::Pooled => {
            let s: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
            let l: Vec<u8> = labels.iter().flat_map(|m| m.iter().copied()).collect();
            auroc(&s, &l)
        }
        PixelAurocMode::PerInstance => {
            let mut values = Vec::new();
            for (m, l) in maps.iter().zip(labels) {
                if l.iter().any(|&x| x != 0) && l.contains(&0) {
                    values.push(auroc(m, l)?);
                }
            }
            if values.is_empty() {
                return Err(Error::validation("no instance contains both classes"));
            }
            Ok(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

/// One scored test instance.
#[derive(Debug, Clone)]
pub struct EvalInstance {
    pub key: String,
    pub global_score: f64,
    pub point_scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub regions: RegionSet,
}

/// The four metrics of one score source. `None` values come with a reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub i_auroc: Option<f64>,
    pub ap: Option<f64>,
    pub p_auroc: Option<f64>,
    pub aupro: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub reasons: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub instances: usize,
    #[serde(flatten)]
    pub metrics: MetricSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multimodal: Option<MetricSet>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

pub fn evaluate(instances: &[EvalInstance], pixel_mode: PixelAurocMode, fpr_limit: f64) -> MetricSet {
    let mut reasons = BTreeMap::new();
    let mut keep = |name: &str, r: Result<f64>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            reasons.insert(name.to_string(), e.to_string());
            None
        }
    };
    let g: Vec<f64> = instances.iter().map(|i| i.global_score).collect();
    let gl: Vec<u8> = instances.iter().map(|i| u8::from(i.labels.iter().any(|&l| l != 0))).collect();
    let maps: Vec<&[f64]> = instances.iter().map(|i| i.point_scores.as_slice()).collect();
    let labels: Vec<&[u8]> = instances.iter().map(|i| i.labels.as_slice()).collect();
    let regions: Vec<RegionSet> = instances.iter().map(|i| i.regions.clone()).collect();
    MetricSet {
        i_auroc: keep("i_auroc", auroc(&g, &gl)),
        ap: keep("ap", average_precision(&g, &gl)),
        p_auroc: keep("p_auroc", point_auroc(&maps, &labels, pixel_mode)),
        aupro: keep("aupro", aupro(&maps, &labels, &regions, fpr_limit)),
        reasons,
    }
}
