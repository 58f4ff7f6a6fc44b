//! Evaluation: synthetic datasets, oracle classifiers, paired-seed sampling
//! and the metrics built on them.

mod dataset;
mod metrics;
pub mod svg;

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

pub use dataset::{
    gen_dataset, shape_template, ConceptDataset, LabeledBatch, Memorized, Mixture2d,
    OracleClassifier, Shapes8, SHAPE_NAMES,
};
pub use metrics::{energy_distance, mean_distance_to, mean_paired_l2, paired_l2};

use crate::autodiff::Tensor;
use crate::denoiser::{ConditionId, Denoiser};
use crate::diffusion::{sample_loop, NoisePredictor, NoiseSchedule, SamplerConfig, SamplerKind};
use crate::erasure::{erase_concept, ErasureConfig, ErasureRun};
use crate::error::{Error, Result};
use crate::rng::{Purpose, SeedStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub sampler: SamplerKind,
    pub steps: usize,
    pub guidance: f32,
    /// Samples drawn per condition.
    pub per_concept: usize,
    /// Size of the held-out reference set.
    pub heldout: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Ddim,
            steps: 50,
            guidance: 2.0,
            per_concept: 1000,
            heldout: 1000,
            seed: 0,
        }
    }
}

/// Samples for every label and for the null condition, drawn with the
/// evaluator's paired seeds.
#[derive(Debug, Clone)]
pub struct SampleBank {
    pub per_label: Vec<Tensor>,
    pub uncond: Tensor,
}

impl SampleBank {
    pub fn get(&self, c: ConditionId) -> Result<&Tensor> {
        match c {
            ConditionId::Null => Ok(&self.uncond),
            ConditionId::Label(l) => {
                self.per_label
                    .get(l as usize)
                    .ok_or(Error::UnknownCondition {
                        id: l,
                        vocab: self.per_label.len(),
                    })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pre,
    Post,
}

/// One classified sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub concept: u32,
    pub stage: Stage,
    pub index: usize,
    pub predicted: usize,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRow {
    pub concept: u32,
    /// Oracle mode the concept's samples should land in.
    pub label: usize,
    pub erased: bool,
    pub pre_acc: f64,
    pub post_acc: f64,
    pub interference_l2: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ConceptRow>,
    /// Energy distance of unconditional samples to held-out data, before
    /// and after the edit.
    pub energy_pre: f64,
    pub energy_post: f64,
    /// Energy distance between the two models' unconditional samples.
    pub uncond_shift: f64,
    pub eta: Option<f32>,
    pub mode: Option<String>,
    pub records: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn row(&self, concept: u32) -> Option<&ConceptRow> {
        self.rows.iter().find(|r| r.concept == concept)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("concept,label,erased,pre_acc,post_acc,interference_l2,n\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.concept, r.label, r.erased, r.pre_acc, r.post_acc, r.interference_l2, r.n
            );
        }
        out
    }

    /// `key,value` lines for the report-wide numbers.
    pub fn summary_csv(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "key,value\nenergy_pre,{}\nenergy_post,{}\nuncond_shift,{}\neta,{}\nmode,{}\n",
            self.energy_pre,
            self.energy_post,
            self.uncond_shift,
            opt(self.eta.map(|e| e.to_string())),
            opt(self.mode.clone())
        )
    }

    pub fn records_csv(&self) -> String {
        let mut out = String::from("concept,stage,index,predicted,hit\n");
        for r in &self.records {
            let stage = match r.stage {
                Stage::Pre => "pre",
                Stage::Post => "post",
            };
            let _ = writeln!(
                out,
                "{},{stage},{},{},{}",
                r.concept, r.index, r.predicted, r.hit
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eta: f32,
    /// Fraction of erased-concept samples not classified as the concept.
    pub erase_frac: f64,
    /// Mean paired L2 over the non-erased labels.
    pub interference: f64,
    /// Energy distance of unconditional samples to held-out data.
    pub energy_dist: f64,
}

pub fn sweep_csv(mode: &str, rows: &[SweepRow]) -> String {
    let mut out = String::from("eta,mode,erase_frac,interference,energy_dist\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{mode},{},{},{}",
            r.eta, r.erase_frac, r.interference, r.energy_dist
        );
    }
    out
}

/// Regular square grid over `[min, max]²`, `n` points per side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub min: f32,
    pub max: f32,
    pub n: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            min: -5.0,
            max: 5.0,
            n: 21,
        }
    }
}

impl Grid {
    pub fn points(&self) -> Result<Vec<[f32; 2]>> {
        if self.n < 2 || !(self.max > self.min) {
            return Err(Error::InvalidConfig(format!(
                "grid needs n >= 2 and max > min, got n = {}, [{}, {}]",
                self.n, self.min, self.max
            )));
        }
        let step = (self.max - self.min) / (self.n - 1) as f32;
        let coord = |i: usize| self.min + step * i as f32;
        Ok((0..self.n)
            .flat_map(|r| (0..self.n).map(move |c| [coord(c), coord(r)]))
            .collect())
    }
}

/// `ε(x, c, t) − ε(x, t)` sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualField {
    pub concept: ConditionId,
    pub t: usize,
    pub grid: Grid,
    pub points: Vec<[f32; 2]>,
    pub vectors: Vec<[f32; 2]>,
}

impl ResidualField {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,dx,dy,t,concept\n");
        for (p, v) in self.points.iter().zip(&self.vectors) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                p[0], p[1], v[0], v[1], self.t, self.concept
            );
        }
        out
    }

    pub fn to_svg(&self) -> String {
        svg::quiver_svg(self)
    }

    pub fn is_zero(&self) -> bool {
        self.vectors.iter().all(|v| v[0] == 0.0 && v[1] == 0.0)
    }

    /// Mean cosine between the score-direction residual (the negated noise
    /// residual) and the direction from each grid point to `target`, over
    /// grid points within `radius` of `target`. `None` if no such point has
    /// a nonzero residual.
    pub fn mean_alignment(&self, target: [f32; 2], radius: f32) -> Option<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (p, v) in self.points.iter().zip(&self.vectors) {
            let to = [f64::from(target[0] - p[0]), f64::from(target[1] - p[1])];
            let (dn, vn) = (to[0].hypot(to[1]), f64::from(v[0]).hypot(f64::from(v[1])));
            if dn > f64::from(radius) || dn == 0.0 || vn == 0.0 {
                continue;
            }
            total += -(to[0] * f64::from(v[0]) + to[1] * f64::from(v[1])) / (dn * vn);
            count += 1;
        }
        (count > 0).then(|| total / count as f64)
    }
}

/// Residual field of `concept` at timestep `t`. 2D models only.
pub fn residual_field(
    model: &dyn NoisePredictor,
    concept: ConditionId,
    t: usize,
    grid: &Grid,
    sched: &NoiseSchedule,
) -> Result<ResidualField> {
    if model.data_dim() != 2 {
        return Err(Error::InvalidConfig(format!(
            "residual fields need 2-D data, model has {} dimensions",
            model.data_dim()
        )));
    }
    if concept.is_null() {
        return Err(Error::InvalidConfig(
            "residual field of the null condition is identically zero".into(),
        ));
    }
    sched.check_timestep(t)?;
    let points = grid.points()?;
    let x = Tensor::new(
        vec![points.len(), 2],
        points.iter().flatten().copied().collect(),
    )?;
    let e_c = model.predict_noise(&x, concept, t)?;
    let e_u = model.predict_noise(&x, ConditionId::Null, t)?;
    let diff = e_c.zip_map(&e_u, "residual_field", |c, u| c - u)?;
    diff.check_finite("residual field")
        .map_err(|source| Error::Diverged {
            context: "residual field".into(),
            source,
        })?;
    let vectors = (0..points.len())
        .map(|i| [diff.row(i)[0], diff.row(i)[1]])
        .collect();
    Ok(ResidualField {
        concept,
        t,
        grid: *grid,
        points,
        vectors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpilloverReport {
    pub main_drop: f64,
    pub syn_drop: f64,
    pub control_drop: f64,
}

/// Energy distance of `samples` to `heldout`.
pub fn quality_metric(samples: &Tensor, heldout: &Tensor) -> Result<f64> {
    energy_distance(samples, heldout)
}

/// Owns a dataset, its oracle, held-out data and the paired-seed policy.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub dataset: ConceptDataset,
    pub oracle: OracleClassifier,
    pub sched: NoiseSchedule,
    pub settings: EvalSettings,
    pub heldout: Tensor,
}

impl Evaluator {
    pub fn new(
        dataset: ConceptDataset,
        sched: NoiseSchedule,
        settings: EvalSettings,
    ) -> Result<Self> {
        let oracle = dataset.oracle()?;
        if settings.per_concept == 0 || settings.heldout == 0 {
            return Err(Error::InvalidConfig(
                "evaluation sample counts must be positive".into(),
            ));
        }
        let mut rng = SeedStream::new(settings.seed).rng(Purpose::Heldout, 0);
        let heldout = dataset.sample(settings.heldout, &mut rng)?.x;
        Ok(Self {
            dataset,
            oracle,
            sched,
            settings,
            heldout,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.dataset.num_labels()
    }

    /// Sampler for condition `c`; the seed depends on `c` alone, so two
    /// models sampled for the same condition share every noise draw.
    pub fn sampler_for(&self, c: ConditionId) -> SamplerConfig {
        let index = match c {
            ConditionId::Label(l) => u64::from(l),
            ConditionId::Null => self.num_labels() as u64,
        };
        SamplerConfig {
            kind: self.settings.sampler,
            steps: self.settings.steps,
            guidance: self.settings.guidance,
            seed: SeedStream::new(self.settings.seed).derive(Purpose::Eval, index),
        }
    }

    pub fn sample(&self, model: &dyn NoisePredictor, c: ConditionId) -> Result<Tensor> {
        sample_loop(
            model,
            c,
            &self.sampler_for(c),
            &self.sched,
            self.settings.per_concept,
        )
    }

    pub fn sample_bank(&self, model: &dyn NoisePredictor) -> Result<SampleBank> {
        let per_label = (0..self.num_labels() as u32)
            .map(|l| self.sample(model, ConditionId::Label(l)))
            .collect::<Result<_>>()?;
        let uncond = self.sample(model, ConditionId::Null)?;
        Ok(SampleBank { per_label, uncond })
    }

    /// Fraction of `samples` the oracle assigns to `label`'s mode, plus the
    /// per-sample predictions.
    pub fn accuracy(&self, samples: &Tensor, label: u32) -> Result<(f64, Vec<usize>)> {
        let mode = self.dataset.label_mode(label)?;
        let pred = self.oracle.classify_batch(samples)?;
        if pred.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let hits = pred.iter().filter(|&&p| p == mode).count();
        Ok((hits as f64 / pred.len() as f64, pred))
    }

    pub fn quality(&self, bank: &SampleBank) -> Result<f64> {
        quality_metric(&bank.uncond, &self.heldout)
    }

    /// Energy distance between the unconditional samples of two banks.
    pub fn unconditional_shift(&self, base: &SampleBank, edited: &SampleBank) -> Result<f64> {
        energy_distance(&base.uncond, &edited.uncond)
    }

    /// Mean paired L2 per condition.
    pub fn interference(
        &self,
        base: &SampleBank,
        edited: &SampleBank,
        prompts: &[ConditionId],
    ) -> Result<BTreeMap<ConditionId, f64>> {
        prompts
            .iter()
            .map(|&c| Ok((c, mean_paired_l2(base.get(c)?, edited.get(c)?)?)))
            .collect()
    }

    pub fn report_from_banks(
        &self,
        base: &SampleBank,
        edited: &SampleBank,
        erased: Option<u32>,
        eta: Option<f32>,
        mode: Option<String>,
    ) -> Result<EvalReport> {
        let mut rows = Vec::new();
        let mut records = Vec::new();
        for l in 0..self.num_labels() as u32 {
            let c = ConditionId::Label(l);
            let label = self.dataset.label_mode(l)?;
            let mut accs = [0.0; 2];
            for (k, (stage, bank)) in [(Stage::Pre, base), (Stage::Post, edited)]
                .into_iter()
                .enumerate()
            {
                let (acc, pred) = self.accuracy(bank.get(c)?, l)?;
                accs[k] = acc;
                records.extend(pred.into_iter().enumerate().map(|(index, predicted)| {
                    SampleRecord {
                        concept: l,
                        stage,
                        index,
                        predicted,
                        hit: predicted == label,
                    }
                }));
            }
            rows.push(ConceptRow {
                concept: l,
                label,
                erased: erased == Some(l),
                pre_acc: accs[0],
                post_acc: accs[1],
                interference_l2: mean_paired_l2(base.get(c)?, edited.get(c)?)?,
                n: base.get(c)?.shape()[0],
            });
        }
        Ok(EvalReport {
            rows,
            energy_pre: self.quality(base)?,
            energy_post: self.quality(edited)?,
            uncond_shift: self.unconditional_shift(base, edited)?,
            eta,
            mode,
            records,
        })
    }

    /// Samples both models with paired seeds and reports per-concept
    /// accuracy before and after.
    pub fn erasure_report(
        &self,
        base: &Denoiser,
        edited: &Denoiser,
        erased: Option<u32>,
    ) -> Result<EvalReport> {
        base.same_architecture(edited)?;
        let a = self.sample_bank(base)?;
        let b = self.sample_bank(edited)?;
        self.report_from_banks(&a, &b, erased, None, None)
    }

    /// Accuracy drops for a main label, its synonym and a control label.
    pub fn synonym_spillover(
        &self,
        base: &SampleBank,
        edited: &SampleBank,
        main: u32,
        syn: u32,
        control: u32,
    ) -> Result<SpilloverReport> {
        let drop = |l: u32| -> Result<f64> {
            let c = ConditionId::Label(l);
            Ok(self.accuracy(base.get(c)?, l)?.0 - self.accuracy(edited.get(c)?, l)?.0)
        };
        Ok(SpilloverReport {
            main_drop: drop(main)?,
            syn_drop: drop(syn)?,
            control_drop: drop(control)?,
        })
    }

    /// Summary numbers for one erased model against the base bank.
    pub fn sweep_row(
        &self,
        base: &SampleBank,
        edited: &SampleBank,
        concept: u32,
        eta: f32,
    ) -> Result<SweepRow> {
        let (acc, _) = self.accuracy(edited.get(ConditionId::Label(concept))?, concept)?;
        let others: Vec<ConditionId> = (0..self.num_labels() as u32)
            .filter(|&l| l != concept)
            .map(ConditionId::Label)
            .collect();
        let inter = self.interference(base, edited, &others)?;
        let interference = if inter.is_empty() {
            0.0
        } else {
            inter.values().sum::<f64>() / inter.len() as f64
        };
        Ok(SweepRow {
            eta,
            erase_frac: 1.0 - acc,
            interference,
            energy_dist: self.quality(edited)?,
        })
    }

    /// One erasure run per η from the same base and seeds, sorted by η.
    pub fn eta_sweep(
        &self,
        base: &Denoiser,
        base_bank: &SampleBank,
        template: &ErasureConfig,
        etas: &[f32],
    ) -> Result<Vec<(SweepRow, ErasureRun)>> {
        let mut sorted = etas.to_vec();
        sorted.sort_by(f32::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("eta values must be distinct".into()));
        }
        let mut out = Vec::with_capacity(sorted.len());
        for eta in sorted {
            let cfg = ErasureConfig {
                eta,
                ..template.clone()
            };
            let run = erase_concept(base, &cfg, &self.sched)?;
            let bank = self.sample_bank(&run.model)?;
            out.push((self.sweep_row(base_bank, &bank, cfg.concept, eta)?, run));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;

    fn setup() -> (Evaluator, Denoiser) {
        let sched = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let settings = EvalSettings {
            steps: 5,
            per_concept: 40,
            heldout: 40,
            ..EvalSettings::default()
        };
        let ev = Evaluator::new(ConceptDataset::default(), sched, settings).unwrap();
        let cfg = DenoiserConfig {
            hidden: 16,
            blocks: 1,
            time_embed_dim: 8,
            cond_embed_dim: 8,
            timesteps: 20,
            ..DenoiserConfig::default()
        };
        (ev, Denoiser::init(cfg, 2).unwrap())
    }

    #[test]
    fn same_model_report_is_flat() {
        let (ev, m) = setup();
        let r = ev.erasure_report(&m, &m, Some(1)).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.rows.iter().filter(|r| r.erased).count(), 1);
        for row in &r.rows {
            assert_eq!(row.pre_acc, row.post_acc);
            assert_eq!(row.interference_l2, 0.0);
            assert_eq!(row.n, 40);
        }
        assert_eq!(r.energy_pre, r.energy_post);
        assert_eq!(r.uncond_shift, 0.0);
        assert_eq!(r.records.len(), 3 * 2 * 40);
        assert!(r
            .to_csv()
            .starts_with("concept,label,erased,pre_acc,post_acc,interference_l2,n\n"));
    }

    #[test]
    fn paired_seeds_depend_only_on_condition() {
        let (ev, m) = setup();
        assert!(ev
            .sample(&m, ConditionId::Label(0))
            .unwrap()
            .bit_eq(&ev.sample(&m, ConditionId::Label(0)).unwrap()));
        assert_ne!(
            ev.sampler_for(ConditionId::Label(0)).seed,
            ev.sampler_for(ConditionId::Null).seed
        );
    }

    #[test]
    fn grid_and_field() {
        let (ev, m) = setup();
        let grid = Grid {
            min: -1.0,
            max: 1.0,
            n: 3,
        };
        let pts = grid.points().unwrap();
        assert_eq!(pts.len(), 9);
        assert_eq!(pts[0], [-1.0, -1.0]);
        assert_eq!(pts[5], [1.0, 0.0]);
        let f = residual_field(&m, ConditionId::Label(0), 5, &grid, &ev.sched).unwrap();
        assert_eq!(
            f,
            residual_field(&m, ConditionId::Label(0), 5, &grid, &ev.sched).unwrap()
        );
        assert_eq!(f.to_csv().lines().count(), 10);
        assert!(f.to_svg().starts_with("<svg"));
        assert!(residual_field(&m, ConditionId::Label(0), 0, &grid, &ev.sched).is_err());
        assert!(Grid {
            min: 1.0,
            max: 1.0,
            n: 3
        }
        .points()
        .is_err());
    }

    #[test]
    fn alignment_sign() {
        let f = ResidualField {
            concept: ConditionId::Label(0),
            t: 1,
            grid: Grid::default(),
            points: vec![[1.0, 0.0], [0.0, 1.0], [9.0, 9.0]],
            vectors: vec![[1.0, 0.0], [0.0, 2.0], [-1.0, 0.0]],
        };
        assert_eq!(f.mean_alignment([0.0, 0.0], 2.0), Some(1.0));
        assert_eq!(f.mean_alignment([100.0, 0.0], 1.0), None);
    }

    #[test]
    fn sweep_rejects_duplicates() {
        let (ev, m) = setup();
        let bank = ev.sample_bank(&m).unwrap();
        let cfg = ErasureConfig {
            steps: 0,
            ..ErasureConfig::default()
        };
        assert!(ev.eta_sweep(&m, &bank, &cfg, &[1.0, 1.0]).is_err());
        let rows = ev.eta_sweep(&m, &bank, &cfg, &[3.0, 0.0]).unwrap();
        assert_eq!(
            rows.iter().map(|(r, _)| r.eta).collect::<Vec<_>>(),
            vec![0.0, 3.0]
        );
        assert_eq!(rows[0].0.interference, 0.0);
    }
}
