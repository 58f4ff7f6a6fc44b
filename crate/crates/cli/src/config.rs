//! Experiment configuration files.
//!
//! A config is TOML with one required `[dataset]` table and optional tables
//! for every other stage. Unknown keys anywhere are errors. Stage tables
//! carry no seeds: every stage derives its randomness from the top-level
//! `seed`.

use std::path::{Path, PathBuf};

use esd_core::baselines::{BaselineConfig, BaselineKind};
use esd_core::denoiser::DenoiserConfig;
use esd_core::diffusion::{NoiseSchedule, SamplerKind, ScheduleParams};
use esd_core::erasure::{EraseMode, ErasureConfig, PartialDenoise};
use esd_core::eval::{ConceptDataset, EvalSettings, Grid};
use esd_core::rng::{Purpose, SeedStream};
use esd_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: ConceptDataset,
    #[serde(default)]
    pub model: DenoiserConfig,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub erasure: ErasureSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub residual: ResidualSection,
}

fn default_name() -> String {
    "default".into()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            steps: d.steps,
            batch: d.batch,
            lr: d.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErasureSection {
    pub concept: u32,
    pub mode: EraseMode,
    pub eta: f32,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub partial: PartialDenoise,
}

impl Default for ErasureSection {
    fn default() -> Self {
        let d = ErasureConfig::default();
        Self {
            concept: d.concept,
            mode: d.mode,
            eta: d.eta,
            steps: d.steps,
            lr: d.lr,
            batch: d.batch,
            partial: d.partial,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub kind: BaselineKind,
    pub suppress: u32,
    pub guidance: f32,
    pub safety: f32,
    pub sampler: SamplerKind,
    pub steps: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let d = BaselineConfig::default();
        Self {
            kind: d.kind,
            suppress: d.suppress,
            guidance: d.guidance,
            safety: d.safety,
            sampler: d.sampler,
            steps: d.steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub sampler: SamplerKind,
    pub steps: usize,
    pub guidance: f32,
    pub per_concept: usize,
    pub heldout: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalSettings::default();
        Self {
            sampler: d.sampler,
            steps: d.steps,
            guidance: d.guidance,
            per_concept: d.per_concept,
            heldout: d.heldout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub etas: Vec<f32>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            etas: vec![1.0, 3.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualSection {
    pub concept: u32,
    pub t: usize,
    pub grid: Grid,
}

impl Default for ResidualSection {
    fn default() -> Self {
        Self {
            concept: 0,
            t: 50,
            grid: Grid::default(),
        }
    }
}

impl ExperimentConfig {
    /// A config with every table at its default.
    pub fn with_dataset(dataset: ConceptDataset) -> Self {
        Self {
            name: default_name(),
            seed: 0,
            out_dir: default_out_dir(),
            dataset,
            model: DenoiserConfig::default(),
            schedule: ScheduleParams::default(),
            train: TrainSection::default(),
            erasure: ErasureSection::default(),
            baseline: BaselineSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            residual: ResidualSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Canonical TOML rendering, written to `config.echo`.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.name.is_empty()
            || self.name.contains(['/', '\\'])
            || self.name == "."
            || self.name == ".."
        {
            return invalid(format!(
                "name {:?} must be a plain directory name",
                self.name
            ));
        }
        if i64::try_from(self.seed).is_err() {
            return invalid(format!("seed {} exceeds the TOML integer range", self.seed));
        }
        self.dataset
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        NoiseSchedule::from_params(&self.schedule)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.model.data_dim != self.dataset.data_dim() {
            return invalid(format!(
                "model.data_dim is {}, the dataset is {}-dimensional",
                self.model.data_dim,
                self.dataset.data_dim()
            ));
        }
        if self.model.num_concepts != self.dataset.num_labels() {
            return invalid(format!(
                "model.num_concepts is {}, the dataset has {} labels",
                self.model.num_concepts,
                self.dataset.num_labels()
            ));
        }
        if self.model.timesteps != self.schedule.timesteps {
            return invalid(format!(
                "model.timesteps is {}, schedule.timesteps is {}",
                self.model.timesteps, self.schedule.timesteps
            ));
        }
        self.check_concept("erasure.concept", self.erasure.concept)?;
        self.check_concept("baseline.suppress", self.baseline.suppress)?;
        self.check_concept("residual.concept", self.residual.concept)?;
        if self.sweep.etas.is_empty() {
            return invalid("sweep.etas must not be empty".into());
        }
        Ok(())
    }

    pub fn check_concept(&self, field: &str, concept: u32) -> Result<(), ConfigError> {
        let k = self.dataset.num_labels();
        if concept as usize >= k {
            return Err(ConfigError::Invalid(format!(
                "{field} = {concept} is not a label of the dataset (it has {k})"
            )));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    pub fn noise_schedule(&self) -> NoiseSchedule {
        NoiseSchedule::from_params(&self.schedule).expect("validated schedule")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch: self.train.batch,
            lr: self.train.lr,
            seed: self.seed,
        }
    }

    pub fn erasure_config(&self) -> ErasureConfig {
        let e = &self.erasure;
        ErasureConfig {
            concept: e.concept,
            mode: e.mode.clone(),
            eta: e.eta,
            steps: e.steps,
            lr: e.lr,
            batch: e.batch,
            partial: e.partial,
            seed: self.seed,
        }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        let b = &self.baseline;
        BaselineConfig {
            kind: b.kind,
            suppress: b.suppress,
            guidance: b.guidance,
            safety: b.safety,
            sampler: b.sampler,
            steps: b.steps,
            seed: SeedStream::new(self.seed).derive(Purpose::Baseline, 0),
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        let e = &self.eval;
        EvalSettings {
            sampler: e.sampler,
            steps: e.steps,
            guidance: e.guidance,
            per_concept: e.per_concept,
            heldout: e.heldout,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[dataset]\nkind = \"mixture2d\"\ncenters = [[0.0, 3.0], [-2.6, -1.5], [2.6, -1.5]]\nsigma = 0.5\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.model, DenoiserConfig::default());
        assert_eq!(cfg.run_dir(), Path::new("runs/default"));
        assert_eq!(cfg.sweep.etas, vec![1.0, 3.0, 10.0]);
        assert_eq!(ExperimentConfig::parse(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn missing_dataset_is_named() {
        let err = ExperimentConfig::parse("seed = 3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("dataset"), "{err}");
    }

    #[test]
    fn unknown_keys_fail() {
        for extra in [
            "\n[train]\nstep = 10\n",
            "\nsed = 1\n",
            "\n[erasure]\nseed = 4\n",
        ] {
            assert!(
                ExperimentConfig::parse(&format!("{MINIMAL}{extra}")).is_err(),
                "{extra}"
            );
        }
        let typo = format!("{MINIMAL}sigmaa = 1.0\n");
        assert!(ExperimentConfig::parse(&typo).is_err());
    }

    #[test]
    fn concepts_must_exist() {
        let text = format!("{MINIMAL}\n[erasure]\nconcept = 3\n");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("erasure.concept"), "{err}");
        let text = format!("{MINIMAL}\n[erasure]\nmode = \"custom:TRUNK\"\nconcept = 2\n");
        assert_eq!(
            ExperimentConfig::parse(&text)
                .unwrap()
                .erasure_config()
                .concept,
            2
        );
    }

    #[test]
    fn model_must_match_dataset() {
        let text = format!("{MINIMAL}\n[model]\nnum_concepts = 4\n");
        assert!(ExperimentConfig::parse(&text).is_err());
        let text = format!("{MINIMAL}\n[schedule]\ntimesteps = 50\n");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn global_seed_reaches_every_stage() {
        let cfg = ExperimentConfig::parse(&format!("seed = 9\n{MINIMAL}")).unwrap();
        assert_eq!(cfg.train_config().seed, 9);
        assert_eq!(cfg.erasure_config().seed, 9);
        assert_ne!(cfg.baseline_config().seed, 9);
        assert_eq!(cfg.eval_settings().seed, 9);
    }
}
