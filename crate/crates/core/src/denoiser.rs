//! The conditional noise predictor ε_θ(x_t, c, t).
//!
//! Architecture, for a batch of `B` rows of dimension `D`:
//!
//! ```text
//! temb = silu(W_t · sinusoid(t / T))                        TIME_EMBED
//! h    = W_in · x_t + temb                                   TRUNK
//! ctx  = table[c]                                           COND_EMBED
//! per block:
//!     h += fc2 · silu(fc1 · ln(h))                           TRUNK
//!     q = W_q ln(h); k, v = W_k ctx, W_v ctx
//!     h += W_o · softmax(q kᵀ / sqrt(A)) v                   COND_ATTN
//! out  = W_out · ln(h)                                       TRUNK
//! ```
//!
//! The condition reaches the trunk only through the attention blocks, and
//! the null condition is an ordinary row of the embedding table. The
//! context is a single token, so the attention weights are identically one
//! and `W_q`, `W_k` receive zero gradient; they are kept so the block has
//! the usual projection set.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{fnv_step, AdamState, Graph, Real, Tensor, Var};
use crate::diffusion::{q_sample_rows, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{gaussian, rng_from_seed};

/// A concept label in `[0, K)`, or the reserved null condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConditionId {
    Label(u32),
    Null,
}

impl ConditionId {
    pub fn is_null(self) -> bool {
        matches!(self, ConditionId::Null)
    }

    pub fn label(self) -> Option<u32> {
        match self {
            ConditionId::Label(l) => Some(l),
            ConditionId::Null => None,
        }
    }

    /// Row of the embedding table: labels first, null last.
    fn row(self, vocab: usize) -> Result<usize> {
        match self {
            ConditionId::Label(l) if (l as usize) < vocab => Ok(l as usize),
            ConditionId::Label(l) => Err(Error::UnknownCondition { id: l, vocab }),
            ConditionId::Null => Ok(vocab),
        }
    }
}

impl fmt::Display for ConditionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConditionId::Label(l) => write!(f, "{l}"),
            ConditionId::Null => f.write_str("null"),
        }
    }
}

impl FromStr for ConditionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("null") {
            return Ok(ConditionId::Null);
        }
        s.parse::<u32>().map(ConditionId::Label).map_err(|_| {
            Error::InvalidConfig(format!("bad condition {s:?}: expected a label or \"null\""))
        })
    }
}

/// Parameter groups. Every parameter carries exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    #[serde(rename = "COND_ATTN")]
    CondAttn,
    #[serde(rename = "TRUNK")]
    Trunk,
    #[serde(rename = "TIME_EMBED")]
    TimeEmbed,
    #[serde(rename = "COND_EMBED")]
    CondEmbed,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::CondAttn,
        ParamGroup::Trunk,
        ParamGroup::TimeEmbed,
        ParamGroup::CondEmbed,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ParamGroup::CondAttn => "COND_ATTN",
            ParamGroup::Trunk => "TRUNK",
            ParamGroup::TimeEmbed => "TIME_EMBED",
            ParamGroup::CondEmbed => "COND_EMBED",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.tag() == norm)
            .ok_or_else(|| Error::UnknownGroup(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    /// Number of concept labels `K`; the embedding table has `K + 1` rows.
    pub num_concepts: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_embed_dim: usize,
    /// Width of the condition tokens, also used as the attention width.
    pub cond_embed_dim: usize,
    pub cond_dropout: f64,
    /// Length `T` of the paired noise schedule; time enters as `t / T`.
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            num_concepts: 3,
            hidden: 128,
            blocks: 4,
            time_embed_dim: 64,
            cond_embed_dim: 32,
            cond_dropout: 0.1,
            timesteps: 100,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data_dim", self.data_dim),
            ("num_concepts", self.num_concepts),
            ("hidden", self.hidden),
            ("blocks", self.blocks),
            ("time_embed_dim", self.time_embed_dim),
            ("cond_embed_dim", self.cond_embed_dim),
            ("timesteps", self.timesteps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!(
                "model.{name} must be positive"
            )));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidConfig(
                "model.time_embed_dim must be even".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::InvalidConfig(format!(
                "model.cond_dropout {} must be in [0, 1)",
                self.cond_dropout
            )));
        }
        Ok(())
    }

    pub fn check_condition(&self, c: ConditionId) -> Result<()> {
        c.row(self.num_concepts).map(|_| ())
    }

    pub fn labels(&self) -> impl Iterator<Item = ConditionId> {
        (0..self.num_concepts as u32).map(ConditionId::Label)
    }
}

/// Shape and group of one parameter, in creation order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// N(0, 1 / fan_in)
    Weight(usize),
    Zero,
    Embedding,
}

#[derive(Debug, Clone, Copy)]
struct LinearIdx {
    w: usize,
    b: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    fc1: LinearIdx,
    fc2: LinearIdx,
    q: LinearIdx,
    k: LinearIdx,
    v: LinearIdx,
    o: LinearIdx,
}

#[derive(Debug, Clone)]
struct Layout {
    time: LinearIdx,
    input: LinearIdx,
    blocks: Vec<BlockIdx>,
    output: LinearIdx,
    table: usize,
}

struct LayoutBuilder {
    specs: Vec<(ParamSpec, Init)>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, group: ParamGroup, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((ParamSpec { name, group, shape }, init));
        self.specs.len() - 1
    }

    fn linear(
        &mut self,
        prefix: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
    ) -> LinearIdx {
        LinearIdx {
            w: self.push(
                format!("{prefix}.weight"),
                group,
                vec![fan_in, fan_out],
                Init::Weight(fan_in),
            ),
            b: Some(self.push(format!("{prefix}.bias"), group, vec![fan_out], Init::Zero)),
        }
    }

    fn projection(
        &mut self,
        prefix: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
    ) -> LinearIdx {
        LinearIdx {
            w: self.push(
                format!("{prefix}.weight"),
                group,
                vec![fan_in, fan_out],
                Init::Weight(fan_in),
            ),
            b: None,
        }
    }
}

fn build_layout(cfg: &DenoiserConfig) -> (Vec<(ParamSpec, Init)>, Layout) {
    use ParamGroup::*;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let (h, a) = (cfg.hidden, cfg.cond_embed_dim);
    let time = b.linear("time.proj", TimeEmbed, cfg.time_embed_dim, h);
    let input = b.linear("input", Trunk, cfg.data_dim, h);
    let blocks = (0..cfg.blocks)
        .map(|i| BlockIdx {
            fc1: b.linear(&format!("blocks.{i}.mlp.fc1"), Trunk, h, h),
            fc2: b.linear(&format!("blocks.{i}.mlp.fc2"), Trunk, h, h),
            q: b.projection(&format!("blocks.{i}.xattn.q"), CondAttn, h, a),
            k: b.projection(&format!("blocks.{i}.xattn.k"), CondAttn, a, a),
            v: b.projection(&format!("blocks.{i}.xattn.v"), CondAttn, a, a),
            o: b.projection(&format!("blocks.{i}.xattn.o"), CondAttn, a, h),
        })
        .collect();
    let output = b.linear("output", Trunk, h, cfg.data_dim);
    let table = b.push(
        "cond.table".into(),
        CondEmbed,
        vec![cfg.num_concepts + 1, a],
        Init::Embedding,
    );
    (
        b.specs,
        Layout {
            time,
            input,
            blocks,
            output,
            table,
        },
    )
}

/// Parameter layout of a configuration, in checkpoint order.
pub fn param_specs(cfg: &DenoiserConfig) -> Vec<ParamSpec> {
    build_layout(cfg).0.into_iter().map(|(s, _)| s).collect()
}

#[derive(Debug, Clone)]
pub struct Parameter<T: Real = f32> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Denoiser<T: Real = f32> {
    config: DenoiserConfig,
    params: Vec<Parameter<T>>,
    layout: Layout,
}

/// Sinusoidal features of `t / T`, scaled onto a 0..1000 position axis.
pub fn time_features<T: Real>(ts: &[usize], total: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let pos = 1000.0 * t as f64 / total as f64;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push(T::lit((pos * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push(T::lit((pos * freq).cos()));
        }
    }
    Tensor::new(vec![ts.len(), dim], out).expect("feature shape")
}

impl Denoiser<f32> {
    /// Deterministic initialization from `seed`.
    pub fn init(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let (specs, layout) = build_layout(&cfg);
        let params = specs
            .into_iter()
            .map(|(spec, init)| {
                let n: usize = spec.shape.iter().product();
                let data: Vec<f32> = match init {
                    Init::Zero => vec![0.0; n],
                    Init::Weight(fan_in) => {
                        let std = 1.0 / (fan_in as f32).sqrt();
                        (0..n)
                            .map(|_| {
                                let z: f32 = StandardNormal.sample(&mut rng);
                                std * z
                            })
                            .collect::<Vec<f32>>()
                    }
                    Init::Embedding => (0..n)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect::<Vec<f32>>(),
                };
                Parameter {
                    name: spec.name,
                    group: spec.group,
                    tensor: Tensor::new(spec.shape, data).expect("layout shapes are valid"),
                }
            })
            .collect();
        Ok(Self {
            config: cfg,
            params,
            layout,
        })
    }
}

impl<T: Real> Denoiser<T> {
    /// Rebuilds a model from parameters given in [`param_specs`] order.
    pub fn from_parts(cfg: DenoiserConfig, params: Vec<Parameter<T>>) -> Result<Self> {
        cfg.validate()?;
        let (specs, layout) = build_layout(&cfg);
        if specs.len() != params.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((spec, _), p) in specs.iter().zip(&params) {
            if spec.name != p.name || spec.group != p.group || spec.shape != p.tensor.shape() {
                return Err(Error::ArchitectureMismatch(format!(
                    "parameter {:?} ({}, {:?}) does not match layout entry {:?} ({}, {:?})",
                    p.name,
                    p.group,
                    p.tensor.shape(),
                    spec.name,
                    spec.group,
                    spec.shape
                )));
            }
        }
        Ok(Self {
            config: cfg,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser {
            config: self.config,
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    group: p.group,
                    tensor: p.tensor.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Hash over every parameter's name, shape and bits.
    pub fn checksum(&self) -> u64 {
        self.params.iter().fold(0xcbf2_9ce4_8422_2325, |h, p| {
            let h = p.name.bytes().fold(h, |h, b| fnv_step(h, u64::from(b)));
            fnv_step(h, p.tensor.checksum())
        })
    }

    pub fn same_architecture(&self, other: &Self) -> Result<()> {
        if self.config != other.config {
            return Err(Error::ArchitectureMismatch(format!(
                "{:?} vs {:?}",
                self.config, other.config
            )));
        }
        Ok(())
    }

    /// Indices of the parameters carrying any of `groups`.
    pub fn group_indices(&self, groups: &[ParamGroup]) -> Result<Vec<usize>> {
        if groups.is_empty() {
            return Err(Error::EmptySelection);
        }
        Ok(self
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(i, _)| i)
            .collect())
    }

    /// The parameters carrying any of `groups`, mutably borrowed from the model.
    pub fn params_by_group(&mut self, groups: &[ParamGroup]) -> Result<Vec<&mut Parameter<T>>> {
        if groups.is_empty() {
            return Err(Error::EmptySelection);
        }
        Ok(self
            .params
            .iter_mut()
            .filter(|p| groups.contains(&p.group))
            .collect())
    }

    /// Marks exactly the parameters at `indices` as trainable.
    pub fn set_trainable(&mut self, indices: &[usize]) {
        for (i, p) in self.params.iter_mut().enumerate() {
            p.tensor.set_requires_grad(indices.contains(&i));
        }
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        for p in &mut self.params {
            p.tensor.set_requires_grad(on);
        }
    }

    /// Deep copy with every parameter frozen.
    pub fn clone_frozen(&self) -> Self {
        let mut c = self.clone();
        c.set_all_trainable(false);
        c
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .filter(|p| p.tensor.requires_grad())
            .map(|p| &mut p.tensor)
            .collect()
    }

    /// Records every parameter on `g`; trainable ones become leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(&p.tensor)).collect()
    }

    /// Adds gradients from a backward pass into the trainable parameters.
    pub fn absorb_grads(
        &mut self,
        grads: &crate::autodiff::Gradients<T>,
        bound: &[Var],
    ) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if !p.tensor.requires_grad() {
                continue;
            }
            if let Some(d) = grads.get(v) {
                p.tensor.accumulate_grad(d)?;
            }
        }
        Ok(())
    }

    fn check_inputs(
        &self,
        x_rows: usize,
        cond: &[ConditionId],
        ts: &[usize],
    ) -> Result<Vec<usize>> {
        if x_rows == 0 {
            return Err(Error::EmptyBatch);
        }
        if cond.len() != x_rows || ts.len() != x_rows {
            return Err(Error::InvalidConfig(format!(
                "batch of {x_rows} rows needs as many conditions and timesteps (got {}, {})",
                cond.len(),
                ts.len()
            )));
        }
        for &t in ts {
            if t == 0 || t > self.config.timesteps {
                return Err(Error::TimestepOutOfRange {
                    t,
                    max: self.config.timesteps,
                });
            }
        }
        cond.iter()
            .map(|c| c.row(self.config.num_concepts))
            .collect()
    }

    /// Forward pass against parameters already recorded by [`Denoiser::bind`]
    /// (or any vars of matching shapes).
    pub fn forward_bound(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
        cond: &[ConditionId],
        ts: &[usize],
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.data_dim {
            return Err(Error::InvalidConfig(format!(
                "input shape {shape:?} does not match data dimension {}",
                self.config.data_dim
            )));
        }
        let rows = self.check_inputs(shape[0], cond, ts)?;
        let batch = shape[0];
        let cfg = &self.config;
        let lay = &self.layout;
        let attn = cfg.cond_embed_dim;
        let eps = T::lit(1e-5);

        let lin = |g: &mut Graph<T>, x: Var, l: LinearIdx| -> Result<Var> {
            let y = g.matmul(x, p[l.w])?;
            Ok(match l.b {
                Some(b) => g.add_row(y, p[b])?,
                None => y,
            })
        };

        let feat = g.constant(&time_features(ts, cfg.timesteps, cfg.time_embed_dim));
        let temb = lin(g, feat, lay.time)?;
        let temb = g.silu(temb)?;
        let h = lin(g, x, lay.input)?;
        let mut h = g.add(h, temb)?;

        let vocab_rows = cfg.num_concepts + 1;
        let mut onehot = vec![T::zero(); batch * vocab_rows];
        for (i, &r) in rows.iter().enumerate() {
            onehot[i * vocab_rows + r] = T::one();
        }
        let onehot = g.constant(&Tensor::new(vec![batch, vocab_rows], onehot)?);
        let tok_cond = g.matmul(onehot, p[lay.table])?;
        let ctx = tok_cond;
        let inv_sqrt = T::one() / T::lit(attn as f64).sqrt();

        for blk in &lay.blocks {
            let a = g.layer_norm(h, eps)?;
            let m = lin(g, a, blk.fc1)?;
            let m = g.silu(m)?;
            let m = lin(g, m, blk.fc2)?;
            h = g.add(h, m)?;

            let a = g.layer_norm(h, eps)?;
            let q = lin(g, a, blk.q)?;
            let q = g.reshape(q, &[batch, 1, attn])?;
            let k = lin(g, ctx, blk.k)?;
            let k = g.reshape(k, &[batch, 1, attn])?;
            let v = lin(g, ctx, blk.v)?;
            let v = g.reshape(v, &[batch, 1, attn])?;
            let scores = g.bmm(q, k, true)?;
            let scores = g.scale(scores, inv_sqrt)?;
            let weights = g.softmax_last(scores)?;
            let o = g.bmm(weights, v, false)?;
            let o = g.reshape(o, &[batch, attn])?;
            let o = lin(g, o, blk.o)?;
            h = g.add(h, o)?;
        }
        let a = g.layer_norm(h, eps)?;
        lin(g, a, lay.output)
    }

    /// Records a forward pass; returns the output and the bound parameters.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        cond: &[ConditionId],
        ts: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        let bound = self.bind(g);
        let out = self.forward_bound(g, &bound, x, cond, ts)?;
        Ok((out, bound))
    }

    /// Noise prediction with per-row conditions and timesteps, no gradient.
    pub fn predict_eps_rows(
        &self,
        x_t: &Tensor<T>,
        cond: &[ConditionId],
        ts: &[usize],
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound: Vec<Var> = self.params.iter().map(|p| g.constant(&p.tensor)).collect();
        let x = g.constant(x_t);
        let out = self.forward_bound(&mut g, &bound, x, cond, ts)?;
        Ok(g.tensor(out))
    }

    /// ε_θ(x_t, c, t) for a whole batch sharing one condition and timestep.
    pub fn predict_eps(&self, x_t: &Tensor<T>, c: ConditionId, t: usize) -> Result<Tensor<T>> {
        let rows = x_t.shape()[0];
        self.predict_eps_rows(x_t, &vec![c; rows], &vec![t; rows])
    }
}

impl NoisePredictor for Denoiser<f32> {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn predict_noise(&self, x_t: &Tensor, cond: ConditionId, t: usize) -> Result<Tensor> {
        self.predict_eps(x_t, cond, t)
    }
}

/// Replaces each label by the null condition with probability `p`.
pub fn apply_condition_dropout(
    cond: &[ConditionId],
    p: f64,
    rng: &mut impl Rng,
) -> Vec<ConditionId> {
    cond.iter()
        .map(|&c| {
            if p > 0.0 && rng.random::<f64>() < p {
                ConditionId::Null
            } else {
                c
            }
        })
        .collect()
}

/// Draws timesteps, noise and condition dropout for a batch and returns
/// `(x_t, eps, conditions, timesteps)`.
fn dsm_inputs(
    x0: &Tensor,
    labels: &[ConditionId],
    sched: &NoiseSchedule,
    dropout: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor, Vec<ConditionId>, Vec<usize>)> {
    let rows = x0.shape()[0];
    let ts: Vec<usize> = (0..rows)
        .map(|_| rng.random_range(1..=sched.timesteps()))
        .collect();
    let noise = gaussian(rng, x0.shape());
    let cond = apply_condition_dropout(labels, dropout, rng);
    let x_t = q_sample_rows(x0, &ts, &noise, sched)?;
    Ok((x_t, noise, cond, ts))
}

/// One denoising-score-matching update: mean ‖ε − ε_θ(x_t, c, t)‖² over
/// all elements, backpropagated into every trainable parameter. Returns the
/// loss before the update.
pub fn train_dsm_step(
    model: &mut Denoiser,
    x0: &Tensor,
    labels: &[ConditionId],
    sched: &NoiseSchedule,
    optimizer: &mut AdamState,
    rng: &mut impl Rng,
) -> Result<f32> {
    if x0.is_empty() || labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if model.config.timesteps != sched.timesteps() {
        return Err(Error::InvalidConfig(format!(
            "model expects T = {}, schedule has {}",
            model.config.timesteps,
            sched.timesteps()
        )));
    }
    let (x_t, noise, cond, ts) = dsm_inputs(x0, labels, sched, model.config.cond_dropout, rng)?;
    let mut g = Graph::new();
    let x = g.constant(&x_t);
    let (pred, bound) = model.forward(&mut g, x, &cond, &ts)?;
    let target = g.constant(&noise);
    let loss = g.mse(pred, target)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Diverged {
            context: "denoising loss".into(),
            source: crate::autodiff::TensorError::NonFinite {
                what: "loss".into(),
                index: 0,
                value: f64::from(value),
            },
        });
    }
    let grads = g.backward(loss)?;
    model.absorb_grads(&grads, &bound)?;
    optimizer.update(&mut model.trainable_tensors_mut())?;
    Ok(value)
}

/// Denoising loss of a model on a fixed draw, as a differentiable function of
/// the parameters bound in `p`. Used by gradient checks.
pub fn dsm_loss_graph<T: Real>(
    model: &Denoiser<T>,
    g: &mut Graph<T>,
    p: &[Var],
    x_t: &Tensor<T>,
    noise: &Tensor<T>,
    cond: &[ConditionId],
    ts: &[usize],
) -> Result<Var> {
    let x = g.constant(x_t);
    let pred = model.forward_bound(g, p, x, cond, ts)?;
    let target = g.constant(noise);
    Ok(g.mse(pred, target)?)
}

/// Scans every parameter for NaN/Inf.
pub fn check_params_finite<T: Real>(model: &Denoiser<T>, context: &str) -> Result<()> {
    for p in &model.params {
        p.tensor
            .check_finite(&p.name)
            .map_err(|source| Error::Diverged {
                context: context.to_string(),
                source,
            })?;
    }
    Ok(())
}
