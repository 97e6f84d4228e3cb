//! Run configuration, read from and written to TOML.
//!
//! Every section and key is optional; missing values take their defaults.
//! Unknown keys are rejected so typos surface as validation errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderProvider, FeatureDims, FileFeatureProvider, MockEncoder};
use crate::error::{Error, Result};
use crate::learning::{LossConfig, TrainConfig};
use crate::metrics::{PixelAurocMode, DEFAULT_FPR_LIMIT};
use crate::render::ViewConfig;
use crate::scoring::ScoringConfig;
use crate::synthetic::PlantedEncoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Deterministic stand-in features computed from the rendered image.
    Mock,
    /// Precomputed feature files under `provider.dir`.
    Files,
    /// Synthetic features that encode the rendered ground truth.
    Planted,
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(Self::Mock),
            "files" => Ok(Self::Files),
            "planted" => Ok(Self::Planted),
            other => Err(Error::validation(format!(
                "unknown provider '{other}' (expected mock, files or planted)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Feature width.
    pub dim: usize,
    pub seed: u64,
    /// Root of `<id>/view_XX.padf` files for the `files` provider.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            dim: 64,
            seed: 0,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_eps: f64,
    pub weight_3d_global: f64,
    pub weight_3d_local: f64,
    pub weight_2d_global: f64,
    pub weight_2d_local: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        Self {
            focal_alpha: l.focal_alpha,
            focal_gamma: l.focal_gamma,
            dice_eps: l.dice_eps,
            weight_3d_global: l.weight_3d_global,
            weight_3d_local: l.weight_3d_local,
            weight_2d_global: l.weight_2d_global,
            weight_2d_local: l.weight_2d_local,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fpr_limit: f64,
    pub pixel_auroc: PixelAurocMode,
    /// Linking distance for region extraction when labels carry no region
    /// ids, in normalized units.
    pub region_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fpr_limit: DEFAULT_FPR_LIMIT,
            pixel_auroc: PixelAurocMode::Pooled,
            region_radius: 0.05,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Worker threads for per-cloud work; 0 picks one per core.
    pub workers: usize,
    pub views: ViewConfig,
    pub scoring: ScoringConfig,
    pub loss: LossSection,
    pub optimizer: TrainConfig,
    pub provider: ProviderConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::validation(format!("config: {}", e.message())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::validation(format!("config cannot be written as TOML: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.views.validate()?;
        self.scoring.validate()?;
        self.loss_config().validate()?;
        self.optimizer.validate()?;
        // TOML integers are signed
        if self.optimizer.seed > i64::MAX as u64 || self.provider.seed > i64::MAX as u64 {
            return Err(Error::validation(format!("seeds must not exceed {}", i64::MAX)));
        }
        if self.provider.dim == 0 {
            return Err(Error::validation("provider.dim must be at least 1"));
        }
        if self.provider.kind == ProviderKind::Planted && self.provider.dim < 2 {
            return Err(Error::validation("the planted provider needs provider.dim >= 2"));
        }
        if self.provider.kind == ProviderKind::Files && self.provider.dir.is_none() {
            return Err(Error::validation("the files provider needs provider.dir"));
        }
        if !(self.eval.fpr_limit > 0.0 && self.eval.fpr_limit <= 1.0) {
            return Err(Error::validation("eval.fpr_limit must lie in (0, 1]"));
        }
        if !(self.eval.region_radius > 0.0) {
            return Err(Error::validation("eval.region_radius must be positive"));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.scoring.temperature,
            aggregate_mode: self.scoring.aggregate_mode,
            focal_alpha: self.loss.focal_alpha,
            focal_gamma: self.loss.focal_gamma,
            dice_eps: self.loss.dice_eps,
            weight_3d_global: self.loss.weight_3d_global,
            weight_3d_local: self.loss.weight_3d_local,
            weight_2d_global: self.loss.weight_2d_global,
            weight_2d_local: self.loss.weight_2d_local,
        }
    }

    pub fn feature_dims(&self) -> FeatureDims {
        FeatureDims {
            h: self.views.grid_h,
            w: self.views.grid_w,
            d: self.provider.dim,
        }
    }

    pub fn build_provider(&self) -> Result<Box<dyn EncoderProvider>> {
        let dims = self.feature_dims();
        Ok(match self.provider.kind {
            ProviderKind::Mock => Box::new(MockEncoder::new(dims, self.provider.seed)),
            ProviderKind::Planted => Box::new(PlantedEncoder::new(dims, self.provider.seed)),
            ProviderKind::Files => {
                let dir = self
                    .provider
                    .dir
                    .clone()
                    .ok_or_else(|| Error::validation("the files provider needs provider.dir"))?;
                Box::new(FileFeatureProvider::new(dir, dims))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::AggregateMode;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.views.views, 9);
        assert_eq!((cfg.views.height, cfg.views.grid_h), (336, 24));
        assert_eq!(cfg.optimizer.lr, 0.001);
        assert_eq!((cfg.optimizer.epochs, cfg.optimizer.batch_size), (15, 4));
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_and_round_trip() {
        let text = r#"
workers = 2

[views]
views = 3
height = 96
width = 96
grid_h = 8
grid_w = 8
angles = [-1.0, 0.0, 1.0]

[scoring]
aggregate_mode = "visibility_normalized"
sigma_3d = 0.0

[provider]
kind = "files"
dir = "feats"
dim = 16

[paths]
output = "out"
"#;
        let cfg = RunConfig::from_toml(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.views.angles, Some(vec![-1.0, 0.0, 1.0]));
        assert_eq!(cfg.scoring.aggregate_mode, AggregateMode::VisibilityNormalized);
        assert_eq!(cfg.scoring.temperature, 0.07);
        assert_eq!(cfg.provider.kind, ProviderKind::Files);
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml().unwrap(), cfg.to_toml().unwrap());
    }

    #[test]
    fn rejections() {
        assert!(RunConfig::from_toml("[views]\nviewz = 3\n").is_err());
        assert!(RunConfig::from_toml("[provider]\nkind = \"clip\"\n").is_err());
        let bad = RunConfig::from_toml("[views]\ngrid_h = 25\n").unwrap();
        assert!(bad.validate().is_err());
        let files = RunConfig::from_toml("[provider]\nkind = \"files\"\n").unwrap();
        assert!(files.validate().is_err());
        let zero_lr_ok = RunConfig::from_toml("[optimizer]\nlr = 0.0\n").unwrap();
        assert!(zero_lr_ok.validate().is_ok());
        assert!(RunConfig::from_toml("[scoring]\ntemperature = -1.0\n").unwrap().validate().is_err());
        let mut big_seed = RunConfig::default();
        big_seed.optimizer.seed = u64::MAX;
        assert!(big_seed.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn round_trip_is_identity(
            workers in 0usize..16,
            views in 1usize..12,
            grid in 1usize..8,
            scale in 1usize..6,
            tau in 0.01f64..2.0,
            lr in 0.0f64..0.1,
            seed in 0..=i64::MAX as u64,
            kind in 0usize..3,
            visibility in proptest::prelude::any::<bool>(),
        ) {
            let mut cfg = RunConfig {
                workers,
                ..RunConfig::default()
            };
            cfg.views.views = views;
            cfg.views.grid_h = grid;
            cfg.views.height = grid * scale;
            cfg.views.angles = (views % 2 == 0).then(|| (0..views).map(|i| i as f64 * 0.3).collect());
            cfg.scoring.temperature = tau;
            if visibility {
                cfg.scoring.aggregate_mode = AggregateMode::VisibilityNormalized;
            }
            cfg.optimizer.lr = lr;
            cfg.optimizer.seed = seed;
            cfg.provider.kind = [ProviderKind::Mock, ProviderKind::Files, ProviderKind::Planted][kind];
            cfg.provider.dir = (kind == 1).then(|| PathBuf::from("feats"));
            let text = cfg.to_toml().unwrap();
            let back = RunConfig::from_toml(&text).unwrap();
            proptest::prop_assert_eq!(&back, &cfg);
            proptest::prop_assert_eq!(back.to_toml().unwrap(), text);
        }
    }

    #[test]
    fn provider_kind_parses() {
        assert_eq!("planted".parse::<ProviderKind>().unwrap(), ProviderKind::Planted);
        assert!("x".parse::<ProviderKind>().is_err());
    }
}
