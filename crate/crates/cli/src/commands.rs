//! Subcommand implementations. Each one writes into the run directory and
//! refreshes its manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use esd_core::autodiff::Tensor;
use esd_core::baselines::baseline_sample;
use esd_core::denoiser::{ConditionId, Denoiser};
use esd_core::diffusion::NoiseSchedule;
use esd_core::erasure::{erase_concept, EraseMode};
use esd_core::eval::svg::scatter_svg;
use esd_core::eval::{residual_field, sweep_csv, Evaluator};
use esd_core::train::train_base;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::manifest;

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub concept: Option<u32>,
    pub mode: Option<EraseMode>,
    pub eta: Option<f32>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        let e = &mut cfg.erasure;
        if let Some(c) = self.concept {
            e.concept = c;
        }
        if let Some(m) = &self.mode {
            e.mode = m.clone();
        }
        if let Some(eta) = self.eta {
            e.eta = eta;
        }
        if let Some(steps) = self.steps {
            e.steps = steps;
        }
        if let Some(lr) = self.lr {
            e.lr = lr;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// An opened run directory.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
}

impl Run {
    /// Creates the directory layout and writes `config.echo`.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        let dir = cfg.run_dir();
        for sub in ["checkpoints", "metrics", "figures"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).with_context(|| format!("cannot create {}", d.display()))?;
        }
        let run = Run { cfg, dir };
        run.write("config.echo", run.cfg.echo())?;
        Ok(run)
    }

    fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    fn finish(&self) -> Result<()> {
        manifest::write(&self.dir)
            .with_context(|| format!("cannot write manifest in {}", self.dir.display()))?;
        Ok(())
    }

    fn evaluator(&self, sched: &NoiseSchedule) -> Result<Evaluator> {
        Ok(Evaluator::new(
            self.cfg.dataset.clone(),
            sched.clone(),
            self.cfg.eval_settings(),
        )?)
    }

    fn samples(&self, stem: &str, samples: &Tensor, prompt: ConditionId) -> Result<Vec<PathBuf>> {
        let mut out = vec![self.write(&format!("metrics/{stem}.csv"), samples_csv(samples))?];
        if samples.shape()[1] == 2 {
            let name = format!("prompt {prompt}");
            out.push(self.write(
                &format!("figures/{stem}.svg"),
                scatter_svg(&[(&name, samples)]),
            )?);
        }
        Ok(out)
    }
}

fn load(path: &Path) -> Result<(Denoiser, NoiseSchedule)> {
    load_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// One row per sample, columns `index,x0,x1,...`.
pub fn samples_csv(samples: &Tensor) -> String {
    let dim = samples.shape()[1];
    let mut out = String::from("index");
    for d in 0..dim {
        let _ = write!(out, ",x{d}");
    }
    out.push('\n');
    for i in 0..samples.shape()[0] {
        let _ = write!(out, "{i}");
        for v in samples.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Trains the base model; returns the checkpoint path.
pub fn run_train(cfg: ExperimentConfig) -> Result<PathBuf> {
    let run = Run::open(cfg)?;
    let sched = run.cfg.noise_schedule();
    let trained = train_base(
        &run.cfg.model,
        &run.cfg.dataset,
        &sched,
        &run.cfg.train_config(),
    )?;
    run.write("metrics/train_loss.csv", trained.loss_csv())?;
    let ckpt = run.dir.join("checkpoints/base.ckpt");
    save_checkpoint(&trained.model, &sched, &ckpt)?;
    run.finish()?;
    Ok(ckpt)
}

/// File stem identifying an erasure recipe.
pub fn erase_tag(mode: &EraseMode, concept: u32, eta: f32) -> String {
    file_safe(&format!("erased_{mode}_c{concept}_eta{eta}"))
}

/// Erases the configured concept from `input`; returns the new checkpoint.
pub fn run_erase(cfg: ExperimentConfig, input: &Path) -> Result<PathBuf> {
    let run = Run::open(cfg)?;
    let (base, sched) = load(input)?;
    let ecfg = run.cfg.erasure_config();
    let tag = erase_tag(&ecfg.mode, ecfg.concept, ecfg.eta);
    let out = run.dir.join("checkpoints").join(format!("{tag}.ckpt"));
    if let (Ok(a), Ok(b)) = (input.canonicalize(), out.canonicalize()) {
        if a == b {
            bail!(
                "refusing to overwrite the input checkpoint {}",
                input.display()
            );
        }
    }
    let erased = erase_concept(&base, &ecfg, &sched)?;
    run.write(&format!("metrics/{tag}_trace.csv"), erased.trace_csv())?;
    let mut groups = String::from("group,delta_l2\n");
    for (g, d) in &erased.group_deltas {
        let _ = writeln!(groups, "{},{d}", g.tag());
    }
    run.write(&format!("metrics/{tag}_groups.csv"), groups)?;
    save_checkpoint(&erased.model, &sched, &out)?;
    run.finish()?;
    Ok(out)
}

/// Samples `prompt` with the evaluation sampler.
pub fn run_sample(cfg: ExperimentConfig, ckpt: &Path, prompt: ConditionId) -> Result<Vec<PathBuf>> {
    let run = Run::open(cfg)?;
    let (model, sched) = load(ckpt)?;
    model.config().check_condition(prompt)?;
    let samples = run.evaluator(&sched)?.sample(&model, prompt)?;
    let out = run.samples(
        &format!("samples_{}_{prompt}", stem(ckpt)),
        &samples,
        prompt,
    )?;
    run.finish()?;
    Ok(out)
}

/// Compares `edited` against `base` with paired seeds.
pub fn run_eval(
    cfg: ExperimentConfig,
    base: &Path,
    edited: &Path,
    erased: Option<u32>,
) -> Result<Vec<PathBuf>> {
    let run = Run::open(cfg)?;
    let (a, sched) = load(base)?;
    let (b, sched_b) = load(edited)?;
    if sched != sched_b {
        bail!(
            "{} and {} use different noise schedules",
            base.display(),
            edited.display()
        );
    }
    if let Some(c) = erased {
        run.cfg.check_concept("--concept", c)?;
    }
    let ev = run.evaluator(&sched)?;
    a.same_architecture(&b)?;
    let (bank_a, bank_b) = (ev.sample_bank(&a)?, ev.sample_bank(&b)?);
    let report = ev.report_from_banks(&bank_a, &bank_b, erased, None, None)?;
    let tag = format!("eval_{}", stem(edited));
    let mut out = vec![
        run.write(&format!("metrics/{tag}.csv"), report.to_csv())?,
        run.write(&format!("metrics/{tag}_summary.csv"), report.summary_csv())?,
        run.write(&format!("metrics/{tag}_records.csv"), report.records_csv())?,
    ];
    if a.config().data_dim == 2 {
        let svg = scatter_svg(&[("base", &bank_a.uncond), ("edited", &bank_b.uncond)]);
        out.push(run.write(&format!("figures/{tag}_uncond.svg"), svg)?);
    }
    run.finish()?;
    Ok(out)
}

/// η sweep from `base` with the configured erasure recipe.
pub fn run_sweep(cfg: ExperimentConfig, base: &Path) -> Result<PathBuf> {
    let run = Run::open(cfg)?;
    let (model, sched) = load(base)?;
    let ev = run.evaluator(&sched)?;
    let bank = ev.sample_bank(&model)?;
    let template = run.cfg.erasure_config();
    let rows: Vec<_> = ev
        .eta_sweep(&model, &bank, &template, &run.cfg.sweep.etas)?
        .into_iter()
        .map(|(row, _)| row)
        .collect();
    let mode = template.mode.to_string();
    let name = file_safe(&format!("sweep_{mode}_c{}", template.concept));
    let out = run.write(&format!("metrics/{name}.csv"), sweep_csv(&mode, &rows))?;
    run.finish()?;
    Ok(out)
}

/// Residual field `ε(x, c, t) − ε(x, t)` on the configured grid.
pub fn run_residual(cfg: ExperimentConfig, ckpt: &Path) -> Result<Vec<PathBuf>> {
    let run = Run::open(cfg)?;
    let (model, sched) = load(ckpt)?;
    let r = run.cfg.residual;
    let field = residual_field(&model, ConditionId::Label(r.concept), r.t, &r.grid, &sched)?;
    let tag = format!("residual_{}_c{}_t{}", stem(ckpt), r.concept, r.t);
    let out = vec![
        run.write(&format!("metrics/{tag}.csv"), field.to_csv())?,
        run.write(&format!("figures/{tag}.svg"), field.to_svg())?,
    ];
    run.finish()?;
    Ok(out)
}

/// Samples `prompt` under the configured inference-time baseline.
pub fn run_baseline_sample(
    cfg: ExperimentConfig,
    ckpt: &Path,
    prompt: ConditionId,
) -> Result<Vec<PathBuf>> {
    let run = Run::open(cfg)?;
    let (model, sched) = load(ckpt)?;
    model.config().check_condition(prompt)?;
    let bcfg = run.cfg.baseline_config();
    let samples = baseline_sample(&model, prompt, &bcfg, &sched, run.cfg.eval.per_concept)?;
    let tag = format!(
        "baseline_{}_s{}_{}_{prompt}",
        bcfg.kind,
        bcfg.suppress,
        stem(ckpt)
    );
    let out = run.samples(&tag, &samples, prompt)?;
    run.finish()?;
    Ok(out)
}
