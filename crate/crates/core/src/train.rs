//! Base-model training on a synthetic dataset.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState};
use crate::denoiser::{check_params_finite, train_dsm_step, ConditionId, Denoiser, DenoiserConfig};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::eval::ConceptDataset;
use crate::rng::{Purpose, SeedStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: Denoiser,
    pub losses: Vec<f32>,
}

impl TrainRun {
    /// Mean of the last `window` losses.
    pub fn running_mean(&self, window: usize) -> Option<f64> {
        let tail = &self.losses[self.losses.len().saturating_sub(window)..];
        (!tail.is_empty())
            .then(|| tail.iter().map(|&l| f64::from(l)).sum::<f64>() / tail.len() as f64)
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

/// Initializes a model from `seed` and trains it with fresh dataset draws
/// every step.
pub fn train_base(
    model_cfg: &DenoiserConfig,
    dataset: &ConceptDataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    if model_cfg.data_dim != dataset.data_dim() || model_cfg.num_concepts != dataset.num_labels() {
        return Err(Error::InvalidConfig(format!(
            "model is {}-D with {} concepts, dataset is {}-D with {} labels",
            model_cfg.data_dim,
            model_cfg.num_concepts,
            dataset.data_dim(),
            dataset.num_labels()
        )));
    }
    if cfg.batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let seeds = SeedStream::new(cfg.seed);
    let mut model = Denoiser::init(*model_cfg, seeds.derive(Purpose::Init, 0))?;
    model.set_all_trainable(true);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut data_rng = seeds.rng(Purpose::Data, 1);
    let mut rng = seeds.rng(Purpose::Training, 0);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = dataset.sample(cfg.batch, &mut data_rng)?;
        let labels: Vec<ConditionId> = batch
            .labels
            .iter()
            .map(|&l| ConditionId::Label(l))
            .collect();
        losses.push(train_dsm_step(
            &mut model, &batch.x, &labels, sched, &mut adam, &mut rng,
        )?);
        if (step + 1) % 500 == 0 {
            check_params_finite(&model, &format!("training step {}", step + 1))?;
        }
    }
    model.set_all_trainable(false);
    Ok(TrainRun { model, losses })
}
