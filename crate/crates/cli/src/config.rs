//! Run configuration read from TOML. Every section is optional and falls back
//! to its defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use dfm_guidance::approximator::ApproximatorConfig;
use dfm_guidance::energy2d::{ClassifierKind, ExperimentConfig, Shape};
use dfm_guidance::guidance::{GuidanceKind, GuidanceScheme, RateMode};
use dfm_guidance::optim::OptimizerConfig;
use dfm_guidance::paths::{Init, Scheduler};
use dfm_guidance::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data: DataSection,
    pub path: PathSection,
    pub guidance: GuidanceSection,
    pub sample: SampleSection,
    pub fit: FitSection,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data: DataSection::default(),
            path: PathSection::default(),
            guidance: GuidanceSection::default(),
            sample: SampleSection::default(),
            fit: FitSection::default(),
            experiment: fig3_experiment(),
        }
    }
}

/// The grid used by `reproduce-fig3`: the acceptance budget of 256 steps and
/// 10^5 chains over both initializations.
pub fn fig3_experiment() -> ExperimentConfig {
    ExperimentConfig { steps: 256, ..ExperimentConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub shape: Shape,
    pub size: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { shape: Shape::Rings, size: 200_000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSection {
    /// `mixture` or `metric`.
    pub kind: String,
    pub init: Init,
    pub scheduler: Scheduler,
}

impl Default for PathSection {
    fn default() -> Self {
        Self { kind: "mixture".into(), init: Init::Masked, scheduler: Scheduler::Cosine }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    /// none, posterior, rate, predictor:<gamma> or first-order.
    pub scheme: String,
    /// Strength of the energy `p(y | x)^gamma`.
    pub gamma: f64,
    pub classifier: ClassifierKind,
    pub rate_mode: Option<RateMode>,
    /// Learned guidance model; the exact enumeration is used when absent.
    pub model: Option<PathBuf>,
    /// Learned posterior model; the exact posterior is used when absent.
    pub posterior: Option<PathBuf>,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self {
            scheme: "posterior".into(),
            gamma: 3.0,
            classifier: ClassifierKind::ShapeDensity,
            rate_mode: None,
            model: None,
            posterior: None,
        }
    }
}

impl GuidanceSection {
    pub fn parsed_scheme(&self) -> Result<GuidanceScheme> {
        self.scheme.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub steps: usize,
    pub chains: usize,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { steps: 64, chains: 100_000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub guidance_kind: GuidanceKind,
    /// Target shape for the regularizer and for density-ratio fitting.
    pub target: Option<Shape>,
    /// Learned density ratio replacing the energy ratio during guidance fitting.
    pub ratio_model: Option<PathBuf>,
    /// Skip training and store the exact guidance as a table.
    pub exact: bool,
    pub approximator: ApproximatorConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            guidance_kind: GuidanceKind::PosteriorBased,
            target: None,
            ratio_model: None,
            exact: false,
            approximator: ApproximatorConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {}", e.message())))?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                config.schema_version
            )));
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(format!("cannot serialize config: {e}")))
    }

    /// Replaces every seed, as the `DFM_SEED` override does.
    pub fn override_seeds(&mut self, seed: u64) {
        self.data.seed = seed;
        self.sample.seed = seed;
        self.fit.optimizer.seed = seed;
        self.experiment.data_seed = seed;
        self.experiment.seeds = vec![seed];
    }
}
