//! Weight-level concept erasure by self-distillation.
//!
//! A frozen copy θ* of the base model supplies the teacher. At every step
//! the trainable model θ produces a partially denoised `x_t` for the
//! concept, the teacher evaluates its conditional and unconditional noise
//! at `x_t`, and θ's conditional prediction is regressed onto the
//! negatively guided combination
//!
//! ```text
//! target = ε_θ*(x_t, t) − η [ε_θ*(x_t, c, t) − ε_θ*(x_t, t)]
//! ```
//!
//! Only the parameter groups picked by the [`EraseMode`] move.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{AdamConfig, AdamState, Graph, Tensor};
use crate::denoiser::{check_params_finite, ConditionId, Denoiser, ParamGroup};
use crate::diffusion::{
    lerp, q_sample, reverse_chain, ClassifierFree, NoiseSchedule, SamplerConfig, SamplerKind,
};
use crate::error::{Error, Result};
use crate::rng::{gaussian, Purpose, SeedStream};

/// Which parameters an erasure run may touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EraseMode {
    /// Conditioning pathway only: `COND_ATTN`.
    EsdX,
    /// Trunk only: `TRUNK`. Time and condition embeddings stay fixed.
    EsdU,
    Custom(Vec<ParamGroup>),
}

impl EraseMode {
    pub fn groups(&self) -> Vec<ParamGroup> {
        match self {
            EraseMode::EsdX => vec![ParamGroup::CondAttn],
            EraseMode::EsdU => vec![ParamGroup::Trunk],
            EraseMode::Custom(g) => g.clone(),
        }
    }
}

impl fmt::Display for EraseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EraseMode::EsdX => f.write_str("esd-x"),
            EraseMode::EsdU => f.write_str("esd-u"),
            EraseMode::Custom(groups) => {
                let tags: Vec<_> = groups.iter().map(|g| g.tag()).collect();
                write!(f, "custom:{}", tags.join(","))
            }
        }
    }
}

impl FromStr for EraseMode {
    type Err = Error;

    /// `esd-x`, `esd-u`, or `custom:<TAG>[,<TAG>...]`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "esd-x" => return Ok(EraseMode::EsdX),
            "esd-u" => return Ok(EraseMode::EsdU),
            _ => {}
        }
        let Some(tags) = s
            .get(..7)
            .filter(|p| p.eq_ignore_ascii_case("custom:"))
            .map(|_| &s[7..])
        else {
            return Err(Error::InvalidConfig(format!(
                "unknown erase mode {s:?}: expected esd-x, esd-u or custom:<tags>"
            )));
        };
        let mut groups = Vec::new();
        for tag in tags.split(',').filter(|t| !t.trim().is_empty()) {
            let g: ParamGroup = tag.parse()?;
            if !groups.contains(&g) {
                groups.push(g);
            }
        }
        if groups.is_empty() {
            return Err(Error::EmptySelection);
        }
        groups.sort();
        Ok(EraseMode::Custom(groups))
    }
}

impl Serialize for EraseMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for EraseMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Sampler used to produce training inputs `x_t` from the current model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartialDenoise {
    pub ddim_steps: usize,
    pub guidance: f32,
}

impl Default for PartialDenoise {
    fn default() -> Self {
        Self {
            ddim_steps: 20,
            guidance: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErasureConfig {
    pub concept: u32,
    pub mode: EraseMode,
    pub eta: f32,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub partial: PartialDenoise,
    pub seed: u64,
}

impl Default for ErasureConfig {
    fn default() -> Self {
        Self {
            concept: 0,
            mode: EraseMode::EsdU,
            eta: 1.0,
            steps: 1000,
            lr: 1e-4,
            batch: 1,
            partial: PartialDenoise::default(),
            seed: 0,
        }
    }
}

impl ErasureConfig {
    pub fn condition(&self) -> ConditionId {
        ConditionId::Label(self.concept)
    }

    pub fn validate(&self, model: &Denoiser, sched: &NoiseSchedule) -> Result<()> {
        model.config().check_condition(self.condition())?;
        if model.config().timesteps != sched.timesteps() {
            return Err(Error::InvalidConfig(format!(
                "model expects T = {}, schedule has {}",
                model.config().timesteps,
                sched.timesteps()
            )));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "eta {} must be >= 0",
                self.eta
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("erasure batch must be >= 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be >= 0",
                self.lr
            )));
        }
        self.partial_sampler().validate(sched)
    }

    fn partial_sampler(&self) -> SamplerConfig {
        SamplerConfig {
            kind: SamplerKind::Ddim,
            steps: self.partial.ddim_steps,
            guidance: self.partial.guidance,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub timestep: usize,
    pub loss: f32,
    /// L2 norm of (current − base) per group, after the update.
    pub deltas: BTreeMap<ParamGroup, f64>,
}

#[derive(Debug, Clone)]
pub struct ErasureRun {
    pub model: Denoiser,
    pub trace: Vec<StepRecord>,
    pub config: ErasureConfig,
    pub group_deltas: BTreeMap<ParamGroup, f64>,
    pub teacher_checksum_start: u64,
    pub teacher_checksum_end: u64,
}

impl ErasureRun {
    pub fn elapsed_steps(&self) -> usize {
        self.trace.len()
    }

    pub fn losses(&self) -> Vec<f32> {
        self.trace.iter().map(|r| r.loss).collect()
    }

    /// CSV with columns `step,timestep,loss,delta_<GROUP>...`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,timestep,loss");
        for g in ParamGroup::ALL {
            out.push_str(",delta_");
            out.push_str(g.tag());
        }
        out.push('\n');
        for r in &self.trace {
            out.push_str(&format!("{},{},{}", r.step, r.timestep, r.loss));
            for g in ParamGroup::ALL {
                out.push_str(&format!(",{}", r.deltas.get(&g).copied().unwrap_or(0.0)));
            }
            out.push('\n');
        }
        out
    }
}

/// Negatively guided teacher target `eps_uncond − η (eps_cond − eps_uncond)`.
///
/// Returns a plain tensor: whatever is recorded from it on a graph is a
/// constant.
pub fn esd_target(eps_uncond: &Tensor, eps_cond: &Tensor, eta: f32) -> Result<Tensor> {
    lerp(eps_uncond, eps_cond, -eta, "esd_target")
}

/// Indices of the parameters `mode` selects. Errors if none.
pub fn select_params(model: &Denoiser, mode: &EraseMode) -> Result<Vec<usize>> {
    let idx = model.group_indices(&mode.groups())?;
    if idx.is_empty() {
        return Err(Error::EmptySelection);
    }
    Ok(idx)
}

/// Draws `x_T ~ N(0, I)` and runs guided DDIM with `model` down to
/// `t_target`. No gradients are recorded.
pub fn partial_denoise(
    model: &Denoiser,
    concept: ConditionId,
    t_target: usize,
    sched: &NoiseSchedule,
    settings: &PartialDenoise,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    sched.check_timestep(t_target)?;
    let sampler = SamplerConfig {
        kind: SamplerKind::Ddim,
        steps: settings.ddim_steps,
        guidance: settings.guidance,
        seed: 0,
    };
    let guide = ClassifierFree {
        scale: settings.guidance,
    };
    reverse_chain(
        model, &guide, concept, &sampler, sched, batch, t_target, rng,
    )
}

fn group_deltas(
    current: &Denoiser,
    base: &Denoiser,
    selected: &[usize],
) -> BTreeMap<ParamGroup, f64> {
    let mut sq: BTreeMap<ParamGroup, f64> = ParamGroup::ALL.iter().map(|&g| (g, 0.0)).collect();
    for &i in selected {
        let (p, b) = (&current.params()[i], &base.params()[i]);
        let s: f64 = p
            .tensor
            .data()
            .iter()
            .zip(b.tensor.data())
            .map(|(&x, &y)| f64::from(x - y).powi(2))
            .sum();
        *sq.get_mut(&p.group).expect("all groups present") += s;
    }
    sq.into_iter().map(|(g, v)| (g, v.sqrt())).collect()
}

/// Shared optimization loop; `source` produces `x_t` for a timestep.
fn run_erasure<F>(
    base: &Denoiser,
    cfg: &ErasureConfig,
    sched: &NoiseSchedule,
    mut source: F,
) -> Result<ErasureRun>
where
    F: FnMut(&Denoiser, usize, &mut crate::rng::Rng) -> Result<Tensor>,
{
    cfg.validate(base, sched)?;
    let selected = select_params(base, &cfg.mode)?;
    let teacher = base.clone_frozen();
    let teacher_checksum_start = teacher.checksum();
    let mut model = base.clone_frozen();
    model.set_trainable(&selected);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = SeedStream::new(cfg.seed).rng(Purpose::Erasure, 0);
    let concept = cfg.condition();
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let t = rng.random_range(1..=sched.timesteps());
        let x_t = source(&model, t, &mut rng)?;
        let e_u = teacher.predict_eps(&x_t, ConditionId::Null, t)?;
        let e_c = teacher.predict_eps(&x_t, concept, t)?;
        let target = esd_target(&e_u, &e_c, cfg.eta)?;

        let rows = x_t.shape()[0];
        let mut g = Graph::new();
        let x = g.constant(&x_t);
        let (pred, bound) = model.forward(&mut g, x, &vec![concept; rows], &vec![t; rows])?;
        let target = g.constant(&target);
        let loss = g.mse(pred, target)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Diverged {
                context: format!("erasure step {step}"),
                source: crate::autodiff::TensorError::NonFinite {
                    what: "loss".into(),
                    index: 0,
                    value: f64::from(value),
                },
            });
        }
        let grads = g.backward(loss)?;
        model.absorb_grads(&grads, &bound)?;
        adam.update(&mut model.trainable_tensors_mut())?;

        if (step + 1) % 100 == 0 {
            check_params_finite(&model, &format!("erasure step {}", step + 1))?;
        }
        trace.push(StepRecord {
            step,
            timestep: t,
            loss: value,
            deltas: group_deltas(&model, base, &selected),
        });
    }
    check_params_finite(&model, "erasure end")?;
    model.set_all_trainable(false);
    let deltas = group_deltas(&model, base, &selected);
    Ok(ErasureRun {
        model,
        trace,
        config: cfg.clone(),
        group_deltas: deltas,
        teacher_checksum_start,
        teacher_checksum_end: teacher.checksum(),
    })
}

/// Erases `cfg.concept`, drawing `x_t` from the evolving model.
pub fn erase_concept(
    base: &Denoiser,
    cfg: &ErasureConfig,
    sched: &NoiseSchedule,
) -> Result<ErasureRun> {
    let concept = cfg.condition();
    run_erasure(base, cfg, sched, |model, t, rng| {
        partial_denoise(model, concept, t, sched, &cfg.partial, cfg.batch, rng)
    })
}

/// Erases one datum, drawing `x_t` by forward-noising `x0_target`.
pub fn erase_datum(
    base: &Denoiser,
    x0_target: &Tensor,
    cfg: &ErasureConfig,
    sched: &NoiseSchedule,
) -> Result<ErasureRun> {
    let dim = base.config().data_dim;
    if x0_target.len() != dim {
        return Err(Error::InvalidConfig(format!(
            "target datum has {} values, model data dimension is {dim}",
            x0_target.len()
        )));
    }
    let rows: Vec<f32> = x0_target
        .data()
        .iter()
        .copied()
        .cycle()
        .take(dim * cfg.batch)
        .collect();
    let x0 = Tensor::new(vec![cfg.batch, dim], rows)?;
    run_erasure(base, cfg, sched, |_, t, rng| {
        let noise = gaussian(rng, x0.shape());
        q_sample(&x0, t, &noise, sched)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;

    fn row(v: &[f32]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    fn tiny() -> (Denoiser, NoiseSchedule) {
        let cfg = DenoiserConfig {
            hidden: 16,
            blocks: 1,
            time_embed_dim: 8,
            cond_embed_dim: 8,
            timesteps: 20,
            ..DenoiserConfig::default()
        };
        (
            Denoiser::init(cfg, 11).unwrap(),
            NoiseSchedule::linear(20, 1e-4, 0.02).unwrap(),
        )
    }

    #[test]
    fn target_examples() {
        assert_eq!(
            esd_target(&row(&[0.0]), &row(&[1.0]), 1.0).unwrap().data(),
            &[-1.0]
        );
        let t = esd_target(&row(&[0.2, 0.0]), &row(&[0.5, -0.1]), 3.0).unwrap();
        assert_eq!(t.data(), &[-0.7, 0.3]);
        let same = row(&[0.4, -2.0]);
        for eta in [0.0, 1.0, 7.0] {
            assert_eq!(esd_target(&same, &same, eta).unwrap().data(), same.data());
        }
        assert!(esd_target(&row(&[0.0]), &row(&[0.0, 1.0]), 1.0).is_err());
    }

    #[test]
    fn mode_parsing_round_trips() {
        for s in ["esd-x", "esd-u", "custom:COND_ATTN,TRUNK"] {
            assert_eq!(s.parse::<EraseMode>().unwrap().to_string(), s);
        }
        assert_eq!(
            "custom:trunk,cond_attn".parse::<EraseMode>().unwrap(),
            EraseMode::Custom(vec![ParamGroup::CondAttn, ParamGroup::Trunk])
        );
        assert!(matches!(
            "custom:".parse::<EraseMode>(),
            Err(Error::EmptySelection)
        ));
        assert!(matches!(
            "custom:WHEELS".parse::<EraseMode>(),
            Err(Error::UnknownGroup(_))
        ));
        assert!("esd-z".parse::<EraseMode>().is_err());
    }

    #[test]
    fn selections_follow_groups() {
        let (m, _) = tiny();
        let x = select_params(&m, &EraseMode::EsdX).unwrap();
        let u = select_params(&m, &EraseMode::EsdU).unwrap();
        assert!(x.iter().all(|i| !u.contains(i)));
        assert!(x
            .iter()
            .all(|&i| m.params()[i].group == ParamGroup::CondAttn));
        assert!(u.iter().all(|&i| m.params()[i].group == ParamGroup::Trunk));
        let both = select_params(&m, &"custom:TRUNK,COND_ATTN".parse().unwrap()).unwrap();
        assert_eq!(both.len(), x.len() + u.len());
    }

    #[test]
    fn partial_denoise_at_t_max_is_the_initial_draw() {
        let (m, s) = tiny();
        let mut a = SeedStream::new(3).rng(Purpose::Erasure, 0);
        let mut b = a.clone();
        let x = partial_denoise(
            &m,
            ConditionId::Label(0),
            20,
            &s,
            &PartialDenoise::default(),
            4,
            &mut a,
        )
        .unwrap();
        let direct = gaussian(&mut b, &[4, 2]);
        assert!(x.bit_eq(&direct));
        assert!(partial_denoise(
            &m,
            ConditionId::Label(0),
            0,
            &s,
            &PartialDenoise::default(),
            1,
            &mut b
        )
        .is_err());
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let (m, s) = tiny();
        let cfg = ErasureConfig {
            steps: 0,
            ..ErasureConfig::default()
        };
        let run = erase_concept(&m, &cfg, &s).unwrap();
        assert_eq!(run.model.checksum(), m.checksum());
        assert_eq!(run.elapsed_steps(), 0);
        let datum =
            erase_datum(&m, &Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), &cfg, &s).unwrap();
        assert_eq!(datum.model.checksum(), m.checksum());
    }

    #[test]
    fn null_concept_and_bad_eta_are_rejected() {
        let (m, s) = tiny();
        let cfg = ErasureConfig {
            concept: 3,
            ..ErasureConfig::default()
        };
        assert!(matches!(
            erase_concept(&m, &cfg, &s),
            Err(Error::UnknownCondition { .. })
        ));
        let cfg = ErasureConfig {
            eta: -1.0,
            ..ErasureConfig::default()
        };
        assert!(erase_concept(&m, &cfg, &s).is_err());
    }

    #[test]
    fn esd_x_touches_only_attention() {
        let (m, s) = tiny();
        let cfg = ErasureConfig {
            mode: EraseMode::EsdX,
            steps: 5,
            lr: 1e-2,
            ..ErasureConfig::default()
        };
        let run = erase_concept(&m, &cfg, &s).unwrap();
        assert_eq!(run.elapsed_steps(), 5);
        for (after, before) in run.model.params().iter().zip(m.params()) {
            if after.group == ParamGroup::CondAttn {
                continue;
            }
            assert!(after.tensor.bit_eq(&before.tensor), "{} moved", after.name);
        }
        assert!(run.group_deltas[&ParamGroup::CondAttn] > 0.0);
        assert_eq!(run.group_deltas[&ParamGroup::Trunk], 0.0);
        assert_eq!(run.teacher_checksum_start, run.teacher_checksum_end);
        assert!(run.model.params().iter().all(|p| !p.tensor.requires_grad()));
    }
}
