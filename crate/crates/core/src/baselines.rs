//! Inference-time suppression baselines: negative prompting and a simple
//! safety-guidance term. Both only change how the sampler combines noise
//! predictions; model weights are never touched.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::denoiser::ConditionId;
use crate::diffusion::{
    cfg_combine, lerp, sample_with, GuidedNoise, NoisePredictor, NoiseSchedule, SamplerConfig,
    SamplerKind,
};
use crate::error::{Error, Result};

/// `eps_neg + α (eps_cond − eps_neg)`.
pub fn neg_prompt_combine(eps_neg: &Tensor, eps_cond: &Tensor, alpha: f32) -> Result<Tensor> {
    lerp(eps_neg, eps_cond, alpha, "neg_prompt_combine")
}

/// `cfg_combine(eps_uncond, eps_cond, α) − γ (eps_safety − eps_uncond)`.
pub fn safety_guided_combine(
    eps_uncond: &Tensor,
    eps_cond: &Tensor,
    eps_safety: &Tensor,
    alpha: f32,
    gamma: f32,
) -> Result<Tensor> {
    let guided = cfg_combine(eps_uncond, eps_cond, alpha)?;
    if gamma == 0.0 {
        eps_uncond.expect_same_shape(eps_safety, "safety_guided_combine")?;
        return Ok(guided);
    }
    let push = eps_safety.zip_map(eps_uncond, "safety_guided_combine", |s, u| gamma * (s - u))?;
    Ok(guided.zip_map(&push, "safety_guided_combine", |g, p| g - p)?)
}

/// Classifier-free guidance with the unconditional branch replaced by a
/// negative concept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativePrompt {
    pub negative: ConditionId,
    pub scale: f32,
}

impl GuidedNoise for NegativePrompt {
    fn guided_noise(
        &self,
        model: &dyn NoisePredictor,
        x_t: &Tensor,
        prompt: ConditionId,
        t: usize,
    ) -> Result<Tensor> {
        if prompt == self.negative || self.scale == 1.0 {
            return model.predict_noise(x_t, prompt, t);
        }
        let neg = model.predict_noise(x_t, self.negative, t)?;
        let cond = model.predict_noise(x_t, prompt, t)?;
        neg_prompt_combine(&neg, &cond, self.scale)
    }
}

/// Classifier-free guidance minus a push along the suppressed concept's
/// residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyGuidance {
    pub suppress: ConditionId,
    pub scale: f32,
    pub safety: f32,
}

impl GuidedNoise for SafetyGuidance {
    fn guided_noise(
        &self,
        model: &dyn NoisePredictor,
        x_t: &Tensor,
        prompt: ConditionId,
        t: usize,
    ) -> Result<Tensor> {
        let uncond = model.predict_noise(x_t, ConditionId::Null, t)?;
        let cond = if prompt.is_null() {
            uncond.clone()
        } else {
            model.predict_noise(x_t, prompt, t)?
        };
        let safety = model.predict_noise(x_t, self.suppress, t)?;
        safety_guided_combine(&uncond, &cond, &safety, self.scale, self.safety)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    #[serde(rename = "NEG_PROMPT")]
    NegPrompt,
    #[serde(rename = "SAFETY_GUIDE")]
    SafetyGuide,
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::NegPrompt => "NEG_PROMPT",
            BaselineKind::SafetyGuide => "SAFETY_GUIDE",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "NEG_PROMPT" => Ok(BaselineKind::NegPrompt),
            "SAFETY_GUIDE" => Ok(BaselineKind::SafetyGuide),
            _ => Err(Error::InvalidConfig(format!(
                "unknown baseline {s:?}: expected NEG_PROMPT or SAFETY_GUIDE"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub suppress: u32,
    /// Guidance scale α.
    pub guidance: f32,
    /// Safety scale γ; only read by `SAFETY_GUIDE`.
    pub safety: f32,
    pub sampler: SamplerKind,
    pub steps: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            kind: BaselineKind::NegPrompt,
            suppress: 0,
            guidance: 2.0,
            safety: 3.0,
            sampler: SamplerKind::Ddim,
            steps: 50,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "guidance {} must be >= 0",
                self.guidance
            )));
        }
        if !(self.safety >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "safety scale {} must be >= 0",
                self.safety
            )));
        }
        Ok(())
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            kind: self.sampler,
            steps: self.steps,
            guidance: self.guidance,
            seed: self.seed,
        }
    }

    pub fn guide(&self) -> Box<dyn GuidedNoise> {
        let suppress = ConditionId::Label(self.suppress);
        match self.kind {
            BaselineKind::NegPrompt => Box::new(NegativePrompt {
                negative: suppress,
                scale: self.guidance,
            }),
            BaselineKind::SafetyGuide => Box::new(SafetyGuidance {
                suppress,
                scale: self.guidance,
                safety: self.safety,
            }),
        }
    }
}

/// Samples `count` points for `prompt` with the baseline's combiner at
/// every reverse step.
pub fn baseline_sample(
    model: &dyn NoisePredictor,
    prompt: ConditionId,
    cfg: &BaselineConfig,
    sched: &NoiseSchedule,
    count: usize,
) -> Result<Tensor> {
    cfg.validate()?;
    sample_with(
        model,
        cfg.guide().as_ref(),
        prompt,
        &cfg.sampler_config(),
        sched,
        count,
    )
}
