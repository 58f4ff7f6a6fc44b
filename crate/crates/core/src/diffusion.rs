//! Forward noising, reverse samplers, and classifier-free guidance.
//!
//! Timesteps run `1..=T`. `ᾱ_0 = 1`, so a DDIM jump to `t = 0` lands on the
//! predicted clean sample.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::denoiser::ConditionId;
use crate::error::{Error, Result};
use crate::rng::{gaussian, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.1,
        }
    }
}

/// β, α and ᾱ tables, indexed by timestep. Index 0 holds β = 0, ᾱ = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced β from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need at least 2 timesteps, got {timesteps}"
            )));
        }
        // Written to reject NaN as well.
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut betas = Vec::with_capacity(timesteps + 1);
        let mut alpha_bars = Vec::with_capacity(timesteps + 1);
        betas.push(0.0);
        alpha_bars.push(1.0);
        let span = (timesteps - 1) as f64;
        for i in 0..timesteps {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / span;
            let prev = *alpha_bars.last().expect("nonempty");
            betas.push(beta);
            alpha_bars.push(prev * (1.0 - beta));
        }
        Ok(Self {
            params: ScheduleParams {
                timesteps,
                beta_start,
                beta_end,
            },
            betas,
            alpha_bars,
        })
    }

    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        Self::linear(p.timesteps, p.beta_start, p.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn timesteps(&self) -> usize {
        self.params.timesteps
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    /// ᾱ_t for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Variance of the DDPM posterior q(x_{t-1} | x_t, x_0).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

/// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) noise`.
pub fn q_sample(x0: &Tensor, t: usize, noise: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_timestep(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    Ok(x0.zip_map(noise, "q_sample", |x, n| a * x + b * n)?)
}

/// Row-wise [`q_sample`] with one timestep per row.
pub(crate) fn q_sample_rows(
    x0: &Tensor,
    ts: &[usize],
    noise: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    x0.expect_same_shape(noise, "q_sample")?;
    let width = x0.len() / x0.shape()[0];
    let mut out = Vec::with_capacity(x0.len());
    for (row, &t) in ts.iter().enumerate() {
        sched.check_timestep(t)?;
        let ab = sched.alpha_bar(t);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let xs = &x0.data()[row * width..(row + 1) * width];
        let ns = &noise.data()[row * width..(row + 1) * width];
        out.extend(xs.iter().zip(ns).map(|(&x, &n)| a * x + b * n));
    }
    Ok(Tensor::new(x0.shape().to_vec(), out)?)
}

/// `from + w (to - from)` in double precision, rounded once, and arranged so
/// that `w = 0` returns `from` and `w = 1` returns `to` bit for bit.
pub(crate) fn lerp(from: &Tensor, to: &Tensor, w: f32, op: &'static str) -> Result<Tensor> {
    let w = f64::from(w);
    Ok(if w < 0.5 {
        from.zip_map(to, op, |u, c| {
            let (u, c) = (f64::from(u), f64::from(c));
            (u + w * (c - u)) as f32
        })?
    } else {
        from.zip_map(to, op, |u, c| {
            let (u, c) = (f64::from(u), f64::from(c));
            (c - (1.0 - w) * (c - u)) as f32
        })?
    })
}

/// Classifier-free guidance: `eps_uncond + scale (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f32) -> Result<Tensor> {
    lerp(eps_uncond, eps_cond, scale, "cfg_combine")
}

/// Anything that predicts the noise in a batch `x_t` of shape `[B, D]`.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;
    fn predict_noise(&self, x_t: &Tensor, cond: ConditionId, t: usize) -> Result<Tensor>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn data_dim(&self) -> usize {
        (**self).data_dim()
    }
    fn predict_noise(&self, x_t: &Tensor, cond: ConditionId, t: usize) -> Result<Tensor> {
        (**self).predict_noise(x_t, cond, t)
    }
}

/// Strategy producing the noise estimate ε̃ a sampler steps with.
pub trait GuidedNoise {
    fn guided_noise(
        &self,
        model: &dyn NoisePredictor,
        x_t: &Tensor,
        prompt: ConditionId,
        t: usize,
    ) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierFree {
    pub scale: f32,
}

impl GuidedNoise for ClassifierFree {
    fn guided_noise(
        &self,
        model: &dyn NoisePredictor,
        x_t: &Tensor,
        prompt: ConditionId,
        t: usize,
    ) -> Result<Tensor> {
        // With a null prompt both branches coincide; at the endpoints one
        // branch has weight zero.
        if prompt.is_null() || self.scale == 0.0 {
            return model.predict_noise(x_t, ConditionId::Null, t);
        }
        if self.scale == 1.0 {
            return model.predict_noise(x_t, prompt, t);
        }
        let uncond = model.predict_noise(x_t, ConditionId::Null, t)?;
        let cond = model.predict_noise(x_t, prompt, t)?;
        cfg_combine(&uncond, &cond, self.scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Number of DDIM jumps; ignored by DDPM, which walks every timestep.
    pub steps: usize,
    pub guidance: f32,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps: 50,
            guidance: 2.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.kind == SamplerKind::Ddim && (self.steps == 0 || self.steps > sched.timesteps()) {
            return Err(Error::InvalidConfig(format!(
                "DDIM step count {} must be in 1..={}",
                self.steps,
                sched.timesteps()
            )));
        }
        if !(self.guidance >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "guidance scale {} must be >= 0",
                self.guidance
            )));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub x_prev: Tensor,
    pub x0_pred: Tensor,
}

fn predict_x0(x_t: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt() as f32, (1.0 - alpha_bar).sqrt() as f32);
    Ok(x_t.zip_map(eps, "predict_x0", |x, e| (x - b * e) / a)?)
}

/// One ancestral step `x_t -> x_{t-1}`. No noise is injected at `t = 1`.
pub fn ddpm_step(
    model: &dyn NoisePredictor,
    guide: &dyn GuidedNoise,
    x_t: &Tensor,
    t: usize,
    prompt: ConditionId,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<StepOutput> {
    sched.check_timestep(t)?;
    let eps = guide.guided_noise(model, x_t, prompt, t)?;
    let x0_pred = predict_x0(x_t, &eps, sched.alpha_bar(t))?;
    let coef = (sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt()) as f32;
    let inv_sqrt_alpha = (1.0 / sched.alpha(t).sqrt()) as f32;
    let mean = x_t.zip_map(&eps, "ddpm_step", |x, e| inv_sqrt_alpha * (x - coef * e))?;
    let x_prev = if t > 1 {
        let sigma = sched.posterior_variance(t).sqrt() as f32;
        let z = gaussian(rng, x_t.shape());
        mean.zip_map(&z, "ddpm_step", |m, n| m + sigma * n)?
    } else {
        mean
    };
    Ok(StepOutput { x_prev, x0_pred })
}

/// Deterministic DDIM jump from `t_from` down to `t_to` (`t_to` may be 0).
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    model: &dyn NoisePredictor,
    guide: &dyn GuidedNoise,
    x_t: &Tensor,
    t_from: usize,
    t_to: usize,
    prompt: ConditionId,
    sched: &NoiseSchedule,
) -> Result<StepOutput> {
    sched.check_timestep(t_from)?;
    if t_to >= t_from {
        return Err(Error::StepOrder {
            from: t_from,
            to: t_to,
        });
    }
    let eps = guide.guided_noise(model, x_t, prompt, t_from)?;
    let x0_pred = predict_x0(x_t, &eps, sched.alpha_bar(t_from))?;
    let ab_to = sched.alpha_bar(t_to);
    let (a, b) = (ab_to.sqrt() as f32, (1.0 - ab_to).sqrt() as f32);
    let x_prev = x0_pred.zip_map(&eps, "ddim_step", |x0, e| a * x0 + b * e)?;
    Ok(StepOutput { x_prev, x0_pred })
}

/// DDIM timesteps, descending from `T`: `round(i T / steps)` for
/// `i = steps..1`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (1..=steps)
        .rev()
        .map(|i| ((i * total) as f64 / steps as f64).round() as usize)
        .collect()
}

/// Runs the reverse chain from `x_T ~ N(0, I)` down to `stop_at`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn reverse_chain(
    model: &dyn NoisePredictor,
    guide: &dyn GuidedNoise,
    prompt: ConditionId,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    count: usize,
    stop_at: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    cfg.validate(sched)?;
    let mut x = gaussian(rng, &[count, model.data_dim()]);
    match cfg.kind {
        SamplerKind::Ddpm => {
            for t in (stop_at + 1..=sched.timesteps()).rev() {
                x = ddpm_step(model, guide, &x, t, prompt, sched, rng)?.x_prev;
            }
        }
        SamplerKind::Ddim => {
            let mut current = sched.timesteps();
            for next in ddim_timesteps(sched.timesteps(), cfg.steps)
                .into_iter()
                .skip(1)
                .chain(std::iter::once(0))
            {
                if current <= stop_at {
                    break;
                }
                let to = next.max(stop_at);
                x = ddim_step(model, guide, &x, current, to, prompt, sched)?.x_prev;
                current = to;
            }
        }
    }
    Ok(x)
}

/// Full reverse chain from pure noise with classifier-free guidance.
/// Randomness comes from `cfg.seed` alone.
pub fn sample_loop(
    model: &dyn NoisePredictor,
    prompt: ConditionId,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    count: usize,
) -> Result<Tensor> {
    sample_with(
        model,
        &ClassifierFree {
            scale: cfg.guidance,
        },
        prompt,
        cfg,
        sched,
        count,
    )
}

/// [`sample_loop`] with an arbitrary guidance strategy.
pub fn sample_with(
    model: &dyn NoisePredictor,
    guide: &dyn GuidedNoise,
    prompt: ConditionId,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    count: usize,
) -> Result<Tensor> {
    let mut rng = rng_from_seed(cfg.seed);
    reverse_chain(model, guide, prompt, cfg, sched, count, 0, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(v: &[f32]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn constant_beta_schedule() {
        let s = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-12);
    }

    #[test]
    fn short_linear_schedule_matches_hand_product() {
        // (1 - 1e-4)(1 - 0.0067333)(1 - 0.0133667)(1 - 0.02) = 0.960295
        let s = NoiseSchedule::linear(4, 1e-4, 0.02).unwrap();
        assert!(
            (s.alpha_bar(4) - 0.960295).abs() < 1e-6,
            "{}",
            s.alpha_bar(4)
        );
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, f64::NAN, 0.2).is_err());
    }

    #[test]
    fn q_sample_arithmetic() {
        // ᾱ_1 = 0.64 with a one-step-dominated schedule.
        let s = NoiseSchedule::linear(2, 0.36, 0.36).unwrap();
        let x = q_sample(&vec1(&[1.0]), 1, &vec1(&[0.5]), &s).unwrap();
        assert!((x.data()[0] - 1.1).abs() < 1e-6);
        let zero = q_sample(&vec1(&[2.0]), 2, &vec1(&[0.0]), &s).unwrap();
        assert!((zero.data()[0] - 2.0 * (s.alpha_bar(2).sqrt() as f32)).abs() < 1e-7);
    }

    #[test]
    fn q_sample_rejects_bad_inputs() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(matches!(
            q_sample(&vec1(&[1.0]), 0, &vec1(&[0.0]), &s),
            Err(Error::TimestepOutOfRange { .. })
        ));
        assert!(matches!(
            q_sample(&vec1(&[1.0]), 11, &vec1(&[0.0]), &s),
            Err(Error::TimestepOutOfRange { .. })
        ));
        assert!(q_sample(&vec1(&[1.0]), 3, &vec1(&[0.0, 1.0]), &s).is_err());
    }

    #[test]
    fn cfg_combine_examples() {
        let u = vec1(&[0.0, 0.0]);
        let c = vec1(&[2.0, -1.0]);
        assert_eq!(cfg_combine(&u, &c, 7.5).unwrap().data(), &[15.0, -7.5]);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap().data(), c.data());
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap().data(), u.data());
        assert_eq!(cfg_combine(&c, &c, 3.3).unwrap().data(), c.data());
        assert!(cfg_combine(&u, &vec1(&[1.0]), 2.0).is_err());
    }

    #[test]
    fn ddim_timesteps_are_strictly_descending() {
        let ts = ddim_timesteps(100, 20);
        assert_eq!(ts.len(), 20);
        assert_eq!(ts[0], 100);
        assert_eq!(*ts.last().unwrap(), 5);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(
            ddim_timesteps(100, 100),
            (1..=100).rev().collect::<Vec<_>>()
        );
    }
}
