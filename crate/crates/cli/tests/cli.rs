use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attnguide::diffusion::checkpoint::load_checkpoint;
use attnguide::{DenoiserModel, GuidanceConfig, ModelConfig};
use attnguide_cli::commands::{eval, resolve_seeds};
use attnguide_cli::config::{ConditionSpec, EvalRun};
use attnguide_cli::CliError;
use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnguide"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// An untrained checkpoint: enough to exercise the sampling plumbing.
fn init_checkpoint(dir: &Path) -> PathBuf {
    let ckpt = dir.join("ckpt");
    let out = bin(&["train", "--steps", "0", "--seed", "3", "--out", s(&ckpt)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    ckpt
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = bin(&[
        "train",
        "--steps",
        "1",
        "--dataset",
        s(&tmp.path().join("nope")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset"));
}

#[test]
fn bad_inputs_exit_with_usage_code() {
    let tmp = TempDir::new().unwrap();
    let ckpt = init_checkpoint(tmp.path());
    let out_dir = tmp.path().join("s");
    let unknown = bin(&[
        "sample",
        "--checkpoint",
        s(&ckpt),
        "--prompt",
        "red hexagon",
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(unknown.status.code(), Some(2));
    let bad_box = bin(&[
        "sample",
        "--checkpoint",
        s(&ckpt),
        "--box",
        "1:0.8,0,0.2,1",
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(bad_box.status.code(), Some(2));
    let no_ckpt = bin(&[
        "sample",
        "--checkpoint",
        s(&tmp.path().join("none")),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(no_ckpt.status.code(), Some(2));
    let no_config = bin(&["eval", "--config", s(&tmp.path().join("missing.json"))]);
    assert_eq!(no_config.status.code(), Some(2));
}

#[test]
fn zero_step_training_writes_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let ckpt = init_checkpoint(tmp.path());
    let (loaded, manifest) = load_checkpoint::<f32>(&ckpt).unwrap();
    assert_eq!(
        loaded,
        DenoiserModel::init(ModelConfig::default(), 3).unwrap()
    );
    assert_eq!(manifest.seeds["init"], 3);
    assert!(ckpt.join("run_manifest.json").is_file());
}

#[test]
fn zero_strength_guidance_matches_unguided_output() {
    let tmp = TempDir::new().unwrap();
    let ckpt = init_checkpoint(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let common = [
        "sample",
        "--checkpoint",
        s(&ckpt),
        "--seed",
        "9",
        "--box",
        "1:0,0,0.5,1",
    ];
    let guided = bin(&[
        &common[..],
        &["--alpha0", "0", "--no-refine", "--out", s(&a)],
    ]
    .concat());
    assert!(
        guided.status.success(),
        "{}",
        String::from_utf8_lossy(&guided.stderr)
    );
    let plain = bin(&[&common[..], &["--no-guidance", "--out", s(&b)]].concat());
    assert!(plain.status.success());
    assert_eq!(
        std::fs::read(a.join("image.ppm")).unwrap(),
        std::fs::read(b.join("image.ppm")).unwrap()
    );
    let trace = std::fs::read_to_string(a.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 26);
    assert!(String::from_utf8_lossy(&guided.stdout).contains("26 guided steps"));
}

#[test]
fn sample_replay_is_byte_identical_and_detects_tampering() {
    let tmp = TempDir::new().unwrap();
    let ckpt = init_checkpoint(tmp.path());
    let run = tmp.path().join("run");
    let out = bin(&[
        "sample",
        "--checkpoint",
        s(&ckpt),
        "--seed",
        "4",
        "--box",
        "4:0.5,0,1,1",
        "--out",
        s(&run),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(run.join("heatmaps").read_dir().unwrap().count() > 0);
    let manifest = run.join("run_manifest.json");
    let again = bin(&[
        "replay",
        s(&manifest),
        "--out",
        s(&tmp.path().join("again")),
    ]);
    assert!(
        again.status.success(),
        "{}",
        String::from_utf8_lossy(&again.stderr)
    );
    assert!(String::from_utf8_lossy(&again.stdout).contains("replay matches"));

    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["outputs"]["image.ppm"] = serde_json::Value::String("00".repeat(32));
    std::fs::write(&manifest, serde_json::to_vec(&value).unwrap()).unwrap();
    let tampered = bin(&[
        "replay",
        s(&manifest),
        "--out",
        s(&tmp.path().join("third")),
    ]);
    assert_eq!(tampered.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&tampered.stderr).contains("image.ppm"));
}

fn eval_run(ckpt: PathBuf, out: PathBuf) -> EvalRun {
    let cond = |name: &str| ConditionSpec {
        name: name.into(),
        guidance: Some(GuidanceConfig {
            milestones: vec![],
            ..GuidanceConfig::default()
        }),
        use_layout: true,
        seeds: None,
    };
    EvalRun {
        checkpoint: ckpt,
        conditions: vec![cond("first"), cond("second")],
        seeds: 3,
        permutations: 500,
        out,
        ..EvalRun::default()
    }
}

#[test]
fn identical_conditions_show_no_effect() {
    let tmp = TempDir::new().unwrap();
    let ckpt = init_checkpoint(tmp.path());
    let out = eval(&eval_run(ckpt, tmp.path().join("eval"))).unwrap();
    for metric in ["presence", "centroid_in_box", "mean_ratio"] {
        let c = out.report.comparison("second", metric).unwrap();
        assert_eq!(c.test.delta, 0.0, "{metric}");
        assert_eq!(c.test.p_two_sided, 1.0, "{metric}");
    }
    assert!(tmp.path().join("eval/report.txt").is_file());
    assert_eq!(
        std::fs::read_to_string(tmp.path().join("eval/judgements.jsonl"))
            .unwrap()
            .lines()
            .count(),
        6
    );
}

#[test]
fn unpaired_seed_lists_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = eval_run(tmp.path().join("ckpt"), tmp.path().join("eval"));
    cfg.conditions[0].seeds = Some(vec![1, 2, 3]);
    cfg.conditions[1].seeds = Some(vec![1, 2, 4]);
    assert!(matches!(resolve_seeds(&cfg), Err(CliError::Usage(_))));
    assert!(matches!(eval(&cfg), Err(CliError::Usage(_))));
    cfg.conditions[1].seeds = Some(vec![1, 2, 3]);
    assert_eq!(resolve_seeds(&cfg).unwrap(), vec![1, 2, 3]);
    cfg.conditions[1].name = "first".into();
    assert!(matches!(eval(&cfg), Err(CliError::Usage(_))));
}
