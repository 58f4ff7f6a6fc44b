use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use esd_cli::checkpoint::load_checkpoint;
use esd_cli::commands::{
    erase_tag, run_baseline_sample, run_erase, run_eval, run_residual, run_sample, run_sweep,
    run_train,
};
use esd_cli::config::ExperimentConfig;
use esd_cli::manifest::{self, sha256_hex};
use esd_core::denoiser::{ConditionId, ParamGroup};
use esd_core::erasure::EraseMode;

const TINY: &str = r#"
name = "tiny"
seed = 3

[dataset]
kind = "mixture2d"
centers = [[0.0, 3.0], [-2.6, -1.5], [2.6, -1.5]]
sigma = 0.5

[model]
hidden = 16
blocks = 1
time_embed_dim = 8
cond_embed_dim = 8
timesteps = 20

[schedule]
timesteps = 20

[train]
steps = 40
batch = 16

[erasure]
steps = 10

[erasure.partial]
ddim_steps = 4

[eval]
steps = 4
per_concept = 30
heldout = 30

[baseline]
steps = 4

[residual]
t = 5
grid = { min = -2.0, max = 2.0, n = 5 }
"#;

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(TINY).unwrap();
    cfg.out_dir = dir.to_path_buf();
    cfg
}

fn esd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_esd"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn binary_trains_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = esd()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ckpt = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    assert!(ckpt.ends_with("tiny/checkpoints/base.ckpt"));

    let out = esd()
        .args(["sample", "--prompt", "2", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .arg("--ckpt")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("tiny/metrics/samples_base_2.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);
    assert!(csv.starts_with("index,x0,x1\n"));
}

#[test]
fn missing_dataset_is_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "seed = 1\n");
    let out = esd()
        .args(["train", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset"));
}

#[test]
fn bad_flags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let ckpt = dir.path().join("nothing.ckpt");
    for args in [
        vec!["erase", "--mode", "esd-z"],
        vec!["erase", "--concept", "9"],
    ] {
        let out = esd()
            .args(&args)
            .arg("--config")
            .arg(&config)
            .arg("--ckpt")
            .arg(&ckpt)
            .output()
            .unwrap();
        assert!(!out.status.success(), "{args:?} succeeded");
    }
    let out = esd()
        .args(["sample", "--config"])
        .arg(&config)
        .arg("--ckpt")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing.ckpt"));
}

#[test]
fn zero_step_erasure_copies_the_payload() {
    let dir = tempfile::tempdir().unwrap();
    let base = run_train(tiny(dir.path())).unwrap();
    let mut cfg = tiny(dir.path());
    cfg.erasure.steps = 0;
    let out = run_erase(cfg, &base).unwrap();
    assert_ne!(out, base);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&base).unwrap());
}

#[test]
fn esd_x_leaves_the_trunk_alone() {
    let dir = tempfile::tempdir().unwrap();
    let base = run_train(tiny(dir.path())).unwrap();
    let mut cfg = tiny(dir.path());
    cfg.erasure.mode = EraseMode::EsdX;
    cfg.erasure.lr = 1e-2;
    let out = run_erase(cfg, &base).unwrap();
    let tag = erase_tag(&EraseMode::EsdX, 0, 1.0);
    let groups =
        fs::read_to_string(dir.path().join(format!("tiny/metrics/{tag}_groups.csv"))).unwrap();
    assert!(groups.contains("TRUNK,0\n"), "{groups}");
    let (a, _) = load_checkpoint(&base).unwrap();
    let (b, _) = load_checkpoint(&out).unwrap();
    for (x, y) in a.params().iter().zip(b.params()) {
        if x.group != ParamGroup::CondAttn {
            assert!(x.tensor.bit_eq(&y.tensor), "{} moved", x.name);
        }
    }
    let trace =
        fs::read_to_string(dir.path().join(format!("tiny/metrics/{tag}_trace.csv"))).unwrap();
    assert_eq!(trace.lines().count(), 11);
}

#[test]
fn erasure_never_overwrites_its_input() {
    let dir = tempfile::tempdir().unwrap();
    let base = run_train(tiny(dir.path())).unwrap();
    let tag = erase_tag(&EraseMode::EsdU, 0, 1.0);
    let target = dir.path().join(format!("tiny/checkpoints/{tag}.ckpt"));
    fs::copy(&base, &target).unwrap();
    let before = fs::read(&target).unwrap();
    let err = run_erase(tiny(dir.path()), &target).unwrap_err();
    assert!(err.to_string().contains("overwrite"), "{err}");
    assert_eq!(fs::read(&target).unwrap(), before);
}

#[test]
fn self_comparison_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    let base = run_train(tiny(dir.path())).unwrap();
    run_eval(tiny(dir.path()), &base, &base, Some(1)).unwrap();
    let metrics = dir.path().join("tiny/metrics");
    let summary = fs::read_to_string(metrics.join("eval_base_summary.csv")).unwrap();
    assert!(summary.contains("uncond_shift,0\n"), "{summary}");
    let rows = fs::read_to_string(metrics.join("eval_base.csv")).unwrap();
    for line in rows.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[3], cols[4], "{line}");
        assert_eq!(cols[5], "0", "{line}");
    }
    assert!(dir
        .path()
        .join("tiny/figures/eval_base_uncond.svg")
        .exists());
    let records = fs::read_to_string(metrics.join("eval_base_records.csv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 3 * 2 * 30);
}

#[test]
fn sweep_has_one_row_per_eta() {
    let dir = tempfile::tempdir().unwrap();
    let base = run_train(tiny(dir.path())).unwrap();
    let mut cfg = tiny(dir.path());
    cfg.sweep.etas = vec![10.0, 1.0, 3.0];
    let out = run_sweep(cfg, &base).unwrap();
    let csv = fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "eta,mode,erase_frac,interference,energy_dist");
    let etas: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(etas, ["1", "3", "10"]);
}

#[test]
fn residual_and_baseline_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let base = run_train(tiny(dir.path())).unwrap();
    let paths = run_residual(tiny(dir.path()), &base).unwrap();
    let csv = fs::read_to_string(&paths[0]).unwrap();
    assert_eq!(csv.lines().count(), 26);
    assert!(fs::read_to_string(&paths[1]).unwrap().starts_with("<svg"));
    let paths = run_baseline_sample(tiny(dir.path()), &base, ConditionId::Null).unwrap();
    assert_eq!(fs::read_to_string(&paths[0]).unwrap().lines().count(), 31);
    assert!(run_sample(tiny(dir.path()), &base, ConditionId::Label(7)).is_err());
}

#[test]
fn manifest_hashes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let base = run_train(tiny(dir.path())).unwrap();
    run_sample(tiny(dir.path()), &base, ConditionId::Label(0)).unwrap();
    let run_dir = dir.path().join("tiny");
    let m = manifest::read(&run_dir).unwrap();
    assert!(m.files.contains_key("checkpoints/base.ckpt"));
    assert!(m.files.contains_key("config.echo"));
    assert!(m.files.contains_key("metrics/samples_base_0.csv"));
    for (rel, entry) in &m.files {
        let bytes = fs::read(run_dir.join(rel)).unwrap();
        assert_eq!(entry.sha256, sha256_hex(&bytes), "{rel}");
        assert_eq!(entry.bytes, bytes.len() as u64);
    }
    let echo = fs::read_to_string(run_dir.join("config.echo")).unwrap();
    assert_eq!(ExperimentConfig::parse(&echo).unwrap(), tiny(dir.path()));
}

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn fuzz_seeds_satisfy_the_target_invariants() {
    let ckpts = corpus("checkpoint_decode");
    assert!(ckpts
        .iter()
        .any(|(_, b)| esd_cli::checkpoint::decode(b).is_ok()));
    for (name, bytes) in &ckpts {
        if let Ok((m, s)) = esd_cli::checkpoint::decode(bytes) {
            assert_eq!(esd_cli::checkpoint::encode(&m, &s), *bytes, "{name}");
        }
    }
    for (name, bytes) in corpus("config_parse") {
        let cfg = ExperimentConfig::parse(std::str::from_utf8(&bytes).unwrap())
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(ExperimentConfig::parse(&cfg.echo()).unwrap(), cfg, "{name}");
    }
    for (name, bytes) in corpus("name_parse") {
        let s = String::from_utf8(bytes).unwrap();
        let parsed = s.parse::<EraseMode>().is_ok()
            || s.parse::<ConditionId>().is_ok()
            || s.parse::<ParamGroup>().is_ok()
            || s.parse::<esd_core::baselines::BaselineKind>().is_ok();
        assert!(parsed, "{name}: {s:?}");
    }
}
