//! Visual features, prompt embeddings, the two-class softmax classifier, and
//! the feature providers that stand in for a frozen vision backbone.
//!
//! A provider turns one rendering into a global feature vector and an
//! `h × w × d` grid of local features. Real backbones live outside this crate
//! and hand their output over as `PADF` feature files (see [`save_features`]);
//! [`MockEncoder`] is a deterministic stand-in for tests and dry runs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{Grid2, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDims {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFeature(pub Vec<f64>);

/// `h × w` cells of `d`-dimensional local features, row-major, channel last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * d {
            return Err(Error::DimensionMismatch(format!(
                "feature grid {h}x{w}x{d} needs {} values, got {}",
                h * w * d,
                data.len()
            )));
        }
        Ok(Self { h, w, d, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let start = (r * self.w + c) * self.d;
        &self.data[start..start + self.d]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Output of a provider for one rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub global: GlobalFeature,
    pub grid: FeatureGrid,
}

impl Features {
    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            h: self.grid.h,
            w: self.grid.w,
            d: self.grid.d,
        }
    }
}

/// The learnable normality / abnormality embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair {
    pub normal: Vec<f64>,
    pub abnormal: Vec<f64>,
}

impl PromptPair {
    pub fn new(normal: Vec<f64>, abnormal: Vec<f64>) -> Result<Self> {
        if normal.len() != abnormal.len() {
            return Err(Error::DimensionMismatch(format!(
                "prompt lengths {} and {} differ",
                normal.len(),
                abnormal.len()
            )));
        }
        for (name, v) in [("normal", &normal), ("abnormal", &abnormal)] {
            if v.iter().any(|x| !x.is_finite()) || norm(v) == 0.0 {
                return Err(Error::Numeric(format!(
                    "{name} prompt must be finite and nonzero"
                )));
            }
        }
        Ok(Self { normal, abnormal })
    }

    /// Independent unit-Gaussian draws, each normalized to unit length.
    pub fn random(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            normalized(&v)
        };
        let normal = draw();
        let abnormal = draw();
        Self { normal, abnormal }
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    pub fn swapped(&self) -> Self {
        Self {
            normal: self.abnormal.clone(),
            abnormal: self.normal.clone(),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalized(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    a.iter().map(|x| x / n).collect()
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Two-class softmax over cosine similarities divided by the temperature,
/// returning `(p_normal, p_abnormal)`.
pub fn probabilities_from_cosines(cos_normal: f64, cos_abnormal: f64, tau: f64) -> (f64, f64) {
    let (zn, za) = (cos_normal / tau, cos_abnormal / tau);
    let m = zn.max(za);
    let (en, ea) = ((zn - m).exp(), (za - m).exp());
    let s = en + ea;
    (en / s, ea / s)
}

pub fn class_probability(prompts: &PromptPair, f: &[f64], tau: f64) -> Result<(f64, f64)> {
    if !(tau > 0.0) {
        return Err(Error::validation(format!("temperature must be positive, got {tau}")));
    }
    let cn = cosine(&prompts.normal, f)?;
    let ca = cosine(&prompts.abnormal, f)?;
    Ok(probabilities_from_cosines(cn, ca, tau))
}

/// What a provider gets to see about one rendering.
pub struct EncodeRequest<'a> {
    pub image: &'a Grid2<f64>,
    /// Identifier of the source cloud, used by file-backed providers.
    pub key: &'a str,
    pub view: usize,
    /// Rendered ground truth. Only synthetic test providers read it.
    pub gt_mask: Option<&'a Mask>,
}

pub trait EncoderProvider: Send + Sync {
    fn dims(&self) -> FeatureDims;

    fn encode(&self, request: &EncodeRequest<'_>) -> Result<Features>;
}

/// Deterministic stand-in for a frozen backbone.
///
/// Each local feature is the unit-normalized sum of a patch-statistics
/// direction (mean, standard deviation and mean gradient magnitude of the
/// pixels under the cell, each along its own seeded direction) and a seeded
/// per-cell random direction. The global feature is the normalized mean of the
/// local features.
pub struct MockEncoder {
    dims: FeatureDims,
    stat_dirs: [Vec<f64>; 3],
    cell_dirs: Vec<Vec<f64>>,
}

impl MockEncoder {
    const RANDOM_WEIGHT: f64 = 0.5;

    pub fn new(dims: FeatureDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit = || {
            let v: Vec<f64> = (0..dims.d).map(|_| StandardNormal.sample(&mut rng)).collect();
            normalized(&v)
        };
        let stat_dirs = [unit(), unit(), unit()];
        let cell_dirs = (0..dims.h * dims.w).map(|_| unit()).collect();
        Self {
            dims,
            stat_dirs,
            cell_dirs,
        }
    }
}

fn patch_stats(image: &Grid2<f64>, r0: usize, c0: usize, ph: usize, pw: usize) -> [f64; 3] {
    let n = (ph * pw) as f64;
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut grad = 0.0;
    for r in r0..r0 + ph {
        for c in c0..c0 + pw {
            let x = image[(r, c)];
            sum += x;
            sq += x * x;
            let gx = if c + 1 < c0 + pw { image[(r, c + 1)] - x } else { 0.0 };
            let gy = if r + 1 < r0 + ph { image[(r + 1, c)] - x } else { 0.0 };
            grad += (gx * gx + gy * gy).sqrt();
        }
    }
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    [mean, var.sqrt(), grad / n]
}

impl EncoderProvider for MockEncoder {
    fn dims(&self) -> FeatureDims {
        self.dims
    }

    fn encode(&self, request: &EncodeRequest<'_>) -> Result<Features> {
        let FeatureDims { h, w, d } = self.dims;
        let image = request.image;
        if !image.rows().is_multiple_of(h) || !image.cols().is_multiple_of(w) {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} is not divisible by grid {h}x{w}",
                image.rows(),
                image.cols()
            )));
        }
        let (ph, pw) = (image.rows() / h, image.cols() / w);
        let mut data = Vec::with_capacity(h * w * d);
        let mut mean = vec![0.0; d];
        for r in 0..h {
            for c in 0..w {
                let stats = patch_stats(image, r * ph, c * pw, ph, pw);
                let rand_dir = &self.cell_dirs[r * w + c];
                let mut f: Vec<f64> = rand_dir.iter().map(|x| Self::RANDOM_WEIGHT * x).collect();
                for (s, dir) in stats.iter().zip(&self.stat_dirs) {
                    for (fi, di) in f.iter_mut().zip(dir) {
                        *fi += s * di;
                    }
                }
                let f = normalized(&f);
                for (m, x) in mean.iter_mut().zip(&f) {
                    *m += x;
                }
                data.extend_from_slice(&f);
            }
        }
        Ok(Features {
            global: GlobalFeature(normalized(&mean)),
            grid: FeatureGrid::new(h, w, d, data)?,
        })
    }
}

const MAGIC: &[u8; 4] = b"PADF";
const VERSION: u32 = 1;

/// Write a feature file: magic `PADF`, u32 version, u32 h, u32 w, u32 d, then
/// `h*w*d` f32 grid values (row, col, channel) and `d` f32 global values, all
/// little-endian. Values are stored at single precision.
pub fn save_features(path: impl AsRef<Path>, features: &Features) -> Result<()> {
    let path = path.as_ref();
    let g = &features.grid;
    if features.global.0.len() != g.d {
        return Err(Error::DimensionMismatch(format!(
            "global feature has {} values, grid has d = {}",
            features.global.0.len(),
            g.d
        )));
    }
    let mut bytes = Vec::with_capacity(20 + 4 * (g.data.len() + g.d));
    bytes.extend_from_slice(MAGIC);
    for v in [VERSION, g.h as u32, g.w as u32, g.d as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in g.data.iter().chain(&features.global.0) {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Features> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4])),
        ));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let (h, w, d) = (word(8) as usize, word(12) as usize, word(16) as usize);
    let count = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(d))
        .and_then(|x| x.checked_add(d))
        .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
    let payload = &bytes[20..];
    if payload.len() < count * 4 {
        return Err(Error::format(
            path,
            format!(
                "truncated payload: header {h}x{w}x{d} needs {} bytes, found {}",
                count * 4,
                payload.len()
            ),
        ));
    }
    if payload.len() > count * 4 {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite feature value"));
    }
    let split = h * w * d;
    Ok(Features {
        global: GlobalFeature(values[split..].to_vec()),
        grid: FeatureGrid::new(h, w, d, values[..split].to_vec())?,
    })
}

/// Load a feature file and require the given dimensions.
pub fn load_features_expect(path: impl AsRef<Path>, dims: FeatureDims) -> Result<Features> {
    let path = path.as_ref();
    let f = load_features(path)?;
    if f.dims() != dims {
        let got = f.dims();
        return Err(Error::DimensionMismatch(format!(
            "{}: {}x{}x{} but expected {}x{}x{}",
            path.display(),
            got.h,
            got.w,
            got.d,
            dims.h,
            dims.w,
            dims.d
        )));
    }
    Ok(f)
}

/// Save one embedding vector as a 1x1 feature file (grid and global both hold it).
pub fn save_vector(path: impl AsRef<Path>, v: &[f64]) -> Result<()> {
    save_features(
        path,
        &Features {
            global: GlobalFeature(v.to_vec()),
            grid: FeatureGrid::new(1, 1, v.len(), v.to_vec())?,
        },
    )
}

pub fn load_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let f = load_features(path)?;
    if f.grid.h != 1 || f.grid.w != 1 {
        return Err(Error::format(
            path,
            format!("expected a 1x1 vector file, found {}x{}", f.grid.h, f.grid.w),
        ));
    }
    Ok(f.global.0)
}

pub const NORMAL_PROMPT_FILE: &str = "normal.padf";
pub const ABNORMAL_PROMPT_FILE: &str = "abnormal.padf";

/// Write a prompt checkpoint directory holding `normal.padf` and `abnormal.padf`.
pub fn save_prompts(dir: impl AsRef<Path>, prompts: &PromptPair) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_vector(dir.join(NORMAL_PROMPT_FILE), &prompts.normal)?;
    save_vector(dir.join(ABNORMAL_PROMPT_FILE), &prompts.abnormal)
}

pub fn load_prompts(dir: impl AsRef<Path>) -> Result<PromptPair> {
    let dir = dir.as_ref();
    let normal = load_vector(dir.join(NORMAL_PROMPT_FILE))?;
    let abnormal = load_vector(dir.join(ABNORMAL_PROMPT_FILE))?;
    PromptPair::new(normal, abnormal)
}

/// Path of the feature file for view `view` of cloud `key` under `root`.
pub fn feature_path(root: &Path, key: &str, view: usize) -> PathBuf {
    root.join(key).join(format!("view_{view:02}.padf"))
}

/// Serves precomputed features from `root/<key>/view_XX.padf`.
pub struct FileFeatureProvider {
    root: PathBuf,
    dims: FeatureDims,
}

impl FileFeatureProvider {
    pub fn new(root: impl Into<PathBuf>, dims: FeatureDims) -> Self {
        Self {
            root: root.into(),
            dims,
        }
    }
}

impl EncoderProvider for FileFeatureProvider {
    fn dims(&self) -> FeatureDims {
        self.dims
    }

    fn encode(&self, request: &EncodeRequest<'_>) -> Result<Features> {
        load_features_expect(feature_path(&self.root, request.key, request.view), self.dims)
    }
}
