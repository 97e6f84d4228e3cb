//! Synthetic data for tests and demos: surface clouds with labeled bumps, and
//! a feature provider that plants a known anomaly direction on the pixels the
//! renderer marks anomalous.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cloud::{save_labels, save_xyz, Point3, PointCloud, PointLabels};
use crate::encoder::{normalized, EncodeRequest, EncoderProvider, FeatureDims, FeatureGrid, Features, GlobalFeature, PromptPair};
use crate::error::{Error, Result};
use crate::export::create_dir;
use crate::manifest::{save_manifest, Manifest, ManifestEntry, Split};

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub points: usize,
    /// Fraction of clouds that carry anomalies.
    pub anomaly_rate: f64,
    /// Inclusive range of bump count on an anomalous cloud.
    pub regions: (usize, usize),
    /// Bump radius range, in units of the shape's largest semi-axis.
    pub radius: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            points: 2048,
            anomaly_rate: 0.5,
            regions: (1, 2),
            radius: (0.25, 0.4),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCloud {
    pub key: String,
    pub cloud: PointCloud,
    pub labels: PointLabels,
}

fn unit3(rng: &mut ChaCha8Rng) -> Point3 {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// One cloud on a random ellipsoid. Anomalous clouds get outward bumps whose
/// points are labeled and numbered by bump.
pub fn synthetic_cloud(key: &str, anomalous: bool, cfg: &SyntheticConfig, seed: u64) -> SyntheticCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axes = [
        rng.gen_range(0.7..1.0),
        rng.gen_range(0.7..1.0),
        rng.gen_range(0.7..1.0),
    ];
    let dirs: Vec<Point3> = (0..cfg.points).map(|_| unit3(&mut rng)).collect();
    let mut points: Vec<Point3> = dirs.iter().map(|d| [d[0] * axes[0], d[1] * axes[1], d[2] * axes[2]]).collect();
    let mut labels = vec![0u8; cfg.points];
    let mut regions = vec![0u32; cfg.points];
    if anomalous {
        let count = rng.gen_range(cfg.regions.0..=cfg.regions.1).max(1);
        let mut centers: Vec<Point3> = Vec::new();
        while centers.len() < count {
            let c = unit3(&mut rng);
            // keep bumps apart so each stays its own region
            if centers.iter().all(|o| (c[0] * o[0] + c[1] * o[1] + c[2] * o[2]) < 0.5) {
                centers.push(c);
            }
        }
        for (r, c) in centers.iter().enumerate() {
            let radius = rng.gen_range(cfg.radius.0..cfg.radius.1);
            let height = 0.08;
            for (j, d) in dirs.iter().enumerate() {
                let dist = ((d[0] - c[0]).powi(2) + (d[1] - c[1]).powi(2) + (d[2] - c[2]).powi(2)).sqrt();
                if dist < radius && labels[j] == 0 {
                    labels[j] = 1;
                    regions[j] = r as u32 + 1;
                    let lift = 1.0 + height * (1.0 - dist / radius).powi(2);
                    points[j].iter_mut().for_each(|v| *v *= lift);
                }
            }
        }
    }
    let labels = PointLabels::with_regions(labels, regions).expect("consistent synthetic labels");
    SyntheticCloud {
        key: key.to_string(),
        cloud: PointCloud::new(points).expect("finite synthetic points"),
        labels,
    }
}

/// `count` clouds keyed `{prefix}{index:03}`. Exactly
/// `round(count·anomaly_rate)` of them are anomalous, interleaved.
pub fn synthetic_dataset(prefix: &str, count: usize, cfg: &SyntheticConfig) -> Vec<SyntheticCloud> {
    let anomalous = (count as f64 * cfg.anomaly_rate).round() as usize;
    (0..count)
        .map(|i| {
            // spread the anomalous ones evenly through the list
            let is_anom = (i * anomalous) / count.max(1) != ((i + 1) * anomalous) / count.max(1);
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1);
            synthetic_cloud(&format!("{prefix}{i:03}"), is_anom, cfg, seed)
        })
        .collect()
}

/// Keep only the regions accepted by `keep`; other anomalous points become normal.
pub fn restrict_regions(labels: &PointLabels, keep: impl Fn(u32) -> bool) -> PointLabels {
    let ids = labels.region_ids().expect("synthetic labels carry region ids");
    let new_ids: Vec<u32> = ids.iter().map(|&r| if r > 0 && keep(r) { r } else { 0 }).collect();
    let new_labels: Vec<u8> = new_ids.iter().map(|&r| u8::from(r > 0)).collect();
    PointLabels::with_regions(new_labels, new_ids).expect("restricted labels stay consistent")
}

/// Write clouds and labels as `.xyz` / `.labels` files plus a manifest.
pub fn write_dataset(dir: &Path, train: &[SyntheticCloud], test: &[SyntheticCloud]) -> Result<PathBuf> {
    create_dir(dir)?;
    let mut entries = Vec::new();
    for (split, clouds) in [(Split::Train, train), (Split::Test, test)] {
        for c in clouds {
            let cloud_file = format!("{}.xyz", c.key);
            let label_file = format!("{}.labels", c.key);
            save_xyz(dir.join(&cloud_file), &c.cloud)?;
            save_labels(dir.join(&label_file), &c.labels)?;
            entries.push(ManifestEntry {
                id: c.key.clone(),
                cloud: PathBuf::from(cloud_file),
                labels: Some(PathBuf::from(label_file)),
                split,
                rgb_features: None,
            });
        }
    }
    let path = dir.join("manifest.toml");
    save_manifest(&path, &Manifest::new(dir.to_path_buf(), entries))?;
    Ok(path)
}

/// Provider that writes the answer into the features.
///
/// For each grid cell, `q` is the fraction of occupied pixels that the
/// rendered ground truth marks anomalous (0 for empty cells). The local
/// feature is `normalize((1-q)·e_n + q·e_a + 0.3·|base|·u)`, with `u` a seeded
/// random unit vector. The global feature uses `e_a` as its base when any
/// pixel of the view is anomalous and `e_n` otherwise, with the same noise.
pub struct PlantedEncoder {
    dims: FeatureDims,
    seed: u64,
    normal_dir: Vec<f64>,
    anomaly_dir: Vec<f64>,
    pub noise: f64,
}

impl PlantedEncoder {
    pub const DEFAULT_NOISE: f64 = 0.3;

    pub fn new(dims: FeatureDims, seed: u64) -> Self {
        assert!(dims.d >= 2, "planted features need at least 2 channels");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d1e5);
        // Gram-Schmidt over two seeded Gaussian vectors
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < 2 {
            let mut v: Vec<f64> = (0..dims.d).map(|_| StandardNormal.sample(&mut rng)).collect();
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            if crate::encoder::norm(&v) > 1e-6 {
                basis.push(normalized(&v));
            }
        }
        Self {
            dims,
            seed,
            anomaly_dir: basis.pop().unwrap(),
            normal_dir: basis.pop().unwrap(),
            noise: Self::DEFAULT_NOISE,
        }
    }

    /// The prompts a perfect learner would find.
    pub fn ideal_prompts(&self) -> PromptPair {
        PromptPair::new(self.normal_dir.clone(), self.anomaly_dir.clone()).expect("unit directions")
    }

    fn cell_rng(&self, key: &str, view: usize, cell: usize) -> ChaCha8Rng {
        let mut h = DefaultHasher::new();
        (self.seed, key, view, cell).hash(&mut h);
        ChaCha8Rng::seed_from_u64(h.finish())
    }

    fn mix(&self, q: f64) -> Vec<f64> {
        self.normal_dir
            .iter()
            .zip(&self.anomaly_dir)
            .map(|(n, a)| (1.0 - q) * n + q * a)
            .collect()
    }

    fn noisy(&self, base: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let scale = self.noise * crate::encoder::norm(base);
        let u: Vec<f64> = (0..base.len()).map(|_| StandardNormal.sample(rng)).collect();
        let u = normalized(&u);
        normalized(&base.iter().zip(&u).map(|(b, x)| b + scale * x).collect::<Vec<_>>())
    }
}

impl EncoderProvider for PlantedEncoder {
    fn dims(&self) -> FeatureDims {
        self.dims
    }

    fn encode(&self, req: &EncodeRequest<'_>) -> Result<Features> {
        let FeatureDims { h, w, d } = self.dims;
        let image = req.image;
        let gt = req
            .gt_mask
            .ok_or_else(|| Error::validation("planted features need the rendered ground truth"))?;
        if !image.rows().is_multiple_of(h) || !image.cols().is_multiple_of(w) || gt.shape() != image.shape() {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} does not tile into grid {h}x{w}",
                image.rows(),
                image.cols()
            )));
        }
        let (ph, pw) = (image.rows() / h, image.cols() / w);
        let mut data = Vec::with_capacity(h * w * d);
        let mut any_anomalous = false;
        for r in 0..h {
            for c in 0..w {
                let mut occupied = 0usize;
                let mut anomalous = 0usize;
                for y in r * ph..(r + 1) * ph {
                    for x in c * pw..(c + 1) * pw {
                        if image[(y, x)] > 0.0 {
                            occupied += 1;
                        }
                        if gt[(y, x)] > 0 {
                            anomalous += 1;
                        }
                    }
                }
                any_anomalous |= anomalous > 0;
                let q = if occupied == 0 {
                    0.0
                } else {
                    (anomalous as f64 / occupied as f64).min(1.0)
                };
                let mut rng = self.cell_rng(req.key, req.view, r * w + c);
                data.extend(self.noisy(&self.mix(q), &mut rng));
            }
        }
        let mut rng = self.cell_rng(req.key, req.view, h * w);
        let global = self.noisy(&self.mix(if any_anomalous { 1.0 } else { 0.0 }), &mut rng);
        Ok(Features {
            global: GlobalFeature(global),
            grid: FeatureGrid::new(h, w, d, data)?,
        })
    }
}
