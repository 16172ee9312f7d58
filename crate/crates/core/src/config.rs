//! Text configuration files.
//!
//! Every config is TOML: a generator or noise config is a flat list of
//! `key = value` lines (with `#` comments allowed); a run config groups the
//! same blocks into tables. Writing is canonical, so write -> read -> write
//! reproduces the same bytes.

use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataio::GrayMode;
use crate::error::DataError;
use crate::eval::{ThresholdStrategy, DEFAULT_THRESHOLD};
use crate::nn::{NetworkSpec, TrainConfig};
use crate::noisegen::NoiseConfig;
use crate::synthgen::GeneratorConfig;

/// The two synthetic training sets: wide, distinctive lines (1) or thin,
/// faint lines under heavier noise (2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum DatasetVariant {
    One,
    Two,
}

impl TryFrom<u8> for DatasetVariant {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Self::One),
            2 => Ok(Self::Two),
            _ => Err(format!("dataset variant must be 1 or 2, got {v}")),
        }
    }
}

impl From<DatasetVariant> for u8 {
    fn from(v: DatasetVariant) -> u8 {
        match v {
            DatasetVariant::One => 1,
            DatasetVariant::Two => 2,
        }
    }
}

impl fmt::Display for DatasetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Operating point for Sn/Sp/Acc.
    pub threshold: f32,
    /// 0 sweeps every distinct probability; K > 0 uses a K-point grid.
    pub roc_grid: usize,
    pub gray_mode: GrayMode,
    /// Invert grayscale fundus images before the network (dark vessels
    /// become bright like the synthetic lines).
    pub invert: bool,
    /// Mirror-pad inputs so the probability map covers the whole image;
    /// otherwise truth and FOV are center-cropped to the map.
    pub mirror_pad: bool,
    /// Luminance threshold for computed STARE FOV masks.
    pub stare_fov_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            roc_grid: 0,
            gray_mode: GrayMode::Luma,
            invert: true,
            mirror_pad: false,
            stare_fov_threshold: crate::dataio::STARE_FOV_THRESHOLD,
        }
    }
}

impl EvalConfig {
    pub fn strategy(&self) -> ThresholdStrategy {
        match self.roc_grid {
            0 => ThresholdStrategy::AllDistinct,
            k => ThresholdStrategy::Grid(k),
        }
    }
}

/// Fully resolved parameters of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: DatasetVariant,
    pub generator: GeneratorConfig,
    pub noise: NoiseConfig,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
    pub network: NetworkSpec,
}

impl RunConfig {
    pub fn for_variant(variant: DatasetVariant) -> Self {
        Self {
            seed: 0,
            variant,
            generator: GeneratorConfig::for_variant(variant),
            noise: NoiseConfig::for_variant(variant),
            training: TrainConfig::default(),
            evaluation: EvalConfig::default(),
            network: NetworkSpec::default_fcn(),
        }
    }

    /// Variant defaults overlaid with a (possibly partial) TOML document.
    /// `variant` picks the defaults; when `None` the document's own
    /// `variant` key is used, falling back to 2.
    pub fn resolve(variant: Option<DatasetVariant>, overlay: Option<&str>) -> Result<Self, String> {
        let overlay: toml::Table = match overlay {
            Some(text) => toml::from_str(text).map_err(|e| e.to_string())?,
            None => toml::Table::new(),
        };
        let file_variant = match overlay.get("variant") {
            Some(v) => {
                let n = v.as_integer().ok_or("`variant` must be an integer")?;
                Some(DatasetVariant::try_from(u8::try_from(n).map_err(|e| e.to_string())?)?)
            }
            None => None,
        };
        let variant = variant.or(file_variant).unwrap_or(DatasetVariant::Two);
        let mut base = toml::Table::try_from(Self::for_variant(variant)).map_err(|e| e.to_string())?;
        merge(&mut base, overlay);
        base.insert("variant".into(), toml::Value::Integer(u8::from(variant).into()));
        base.try_into().map_err(|e: toml::de::Error| e.to_string())
    }

    pub fn resolve_file(variant: Option<DatasetVariant>, path: Option<&Path>) -> Result<Self, DataError> {
        let text = path.map(read_text).transpose()?;
        Self::resolve(variant, text.as_deref()).map_err(|detail| DataError::Config {
            path: path.map(Path::to_path_buf).unwrap_or_default(),
            detail,
        })
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn read_text(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))
}

/// Canonical text form of a config.
pub fn to_config_string<C: Serialize>(config: &C) -> Result<String, String> {
    toml::to_string(config).map_err(|e| e.to_string())
}

pub fn from_config_str<C: DeserializeOwned>(text: &str) -> Result<C, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}

pub fn write_config<C: Serialize>(path: &Path, config: &C) -> Result<(), DataError> {
    let text = to_config_string(config).map_err(|detail| DataError::Config {
        path: path.to_path_buf(),
        detail,
    })?;
    std::fs::write(path, text).map_err(|e| DataError::io(path, e))
}

pub fn read_config<C: DeserializeOwned>(path: &Path) -> Result<C, DataError> {
    from_config_str(&read_text(path)?).map_err(|detail| DataError::Config {
        path: path.to_path_buf(),
        detail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_config_text_is_byte_stable() {
        let cfg = GeneratorConfig::for_variant(DatasetVariant::One);
        let a = to_config_string(&cfg).unwrap();
        let back: GeneratorConfig = from_config_str(&a).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(to_config_string(&back).unwrap(), a);
        assert!(a.contains("mean_length = 14.0\n"), "{a}");
    }

    #[test]
    fn comments_and_flat_lines_parse() {
        let text = "# noise block\nnoise_mean = 0.1\nnoise_sigma = 0.0 # inline\nmax_patches = 3\npatch_size = 8\n\
                    frequency = 0.5\namplitude = 0.0\nbias_range = [0.0, 0.0]\nseed = 4\n";
        let n: NoiseConfig = from_config_str(text).unwrap();
        assert_eq!(n.max_patches, 3);
        assert!(from_config_str::<NoiseConfig>("noise_mean = 0.1\nbogus = 1\n").is_err());
    }

    #[test]
    fn run_config_overlay() {
        let text = "seed = 9\n[generator]\nline_width = 5\n[training]\niterations = 10\n";
        let rc = RunConfig::resolve(Some(DatasetVariant::One), Some(text)).unwrap();
        assert_eq!(rc.seed, 9);
        assert_eq!(rc.generator.line_width, 5);
        assert_eq!(rc.generator.gray_range, [0.5, 1.0]);
        assert_eq!(rc.training.iterations, 10);
        assert_eq!(rc.noise, NoiseConfig::for_variant(DatasetVariant::One));

        let rc = RunConfig::resolve(None, Some("variant = 1\n")).unwrap();
        assert_eq!(rc.variant, DatasetVariant::One);
        let rc = RunConfig::resolve(None, None).unwrap();
        assert_eq!(rc, RunConfig::for_variant(DatasetVariant::Two));
        assert!(RunConfig::resolve(None, Some("variant = 3\n")).is_err());

        let full = to_config_string(&rc).unwrap();
        let again = RunConfig::resolve(None, Some(&full)).unwrap();
        assert_eq!(again, rc);
        assert_eq!(to_config_string(&again).unwrap(), full);
    }
}
