//! End-to-end tests of the `bowda` binary: exit codes, artifact layout, and
//! byte-level reproducibility of identical invocations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bowda::net::{AblationFlags, DiscriminatorConfig, SNetConfig};
use bowda::phantom::DomainSpec;
use bowda::pipeline::{CropSpec, WindowSpec};
use bowda::trainer::{DataSource, ExperimentSpec, SGDConfig, Strategy};

fn bowda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bowda"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_domain(seed: u64) -> DomainSpec {
    DomainSpec {
        dims: [16, 16, 16],
        spacing: [1.0, 1.0, 1.0],
        radius_range: [3.0, 4.5],
        deform_amplitude: 0.1,
        blur_sigma: 1.2,
        noise_sigma: 0.2,
        fg_level: 0.85,
        bg_level: 0.3,
        texture_amplitude: 0.1,
        seed,
    }
}

fn tiny_spec(strategy: Strategy, out_dir: PathBuf) -> ExperimentSpec {
    ExperimentSpec {
        strategy,
        source: Some(DataSource::phantom(tiny_domain(81), 2, 0)),
        target: DataSource::phantom(tiny_domain(83), 2, 1),
        sgd: SGDConfig { learning_rate: 0.05, batch_size: 2, ..SGDConfig::default() },
        loss: Default::default(),
        snet: SNetConfig {
            base_width: 4,
            growth: 2,
            down_layers: [1, 1, 1],
            up_layers: [1, 1, 1],
            dropout: 0.2,
            flags: AblationFlags::default(),
        },
        discriminator: DiscriminatorConfig { widths: [4, 4, 4], leaky_slope: 0.2 },
        crop: CropSpec { dims: [8, 16, 16] },
        window: WindowSpec { window: [8, 16, 16], stride: [4, 8, 8] },
        source_epochs: 1,
        target_epochs: 1,
        adapt_epochs: 1,
        adversarial_weight: 1.0,
        seed: 3,
        out_dir,
        source_checkpoint: None,
    }
}

fn write_spec(dir: &Path, spec: &ExperimentSpec) -> PathBuf {
    let path = dir.join("exp.json");
    fs::write(&path, serde_json::to_vec_pretty(spec).unwrap()).unwrap();
    path
}

#[test]
fn help_exits_zero() {
    let out = bowda(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("run-strategy"));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = bowda(&["frobnicate"]);
    assert_eq!(code(&out), 1);
    assert!(!out.stderr.is_empty());
}

#[test]
fn gen_phantom_is_deterministic_and_evaluate_is_exact_on_identity() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let run = bowda(&[
            "gen-phantom",
            "--preset",
            "target",
            "--seed",
            "5",
            "--train",
            "2",
            "--val",
            "1",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    }
    for name in ["phantom_manifest.json", "phantom_train_000.raw", "phantom_val_002_mask.raw"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }

    let mask = a.join("phantom_train_000_mask.mhd");
    let out = bowda(&[
        "evaluate",
        "--seg",
        mask.to_str().unwrap(),
        "--ref",
        mask.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let whole = text
        .lines()
        .find(|l| l.contains(",whole,") && !l.starts_with("mean") && !l.starts_with("sd"))
        .expect("whole-gland row");
    let fields: Vec<&str> = whole.split(',').collect();
    assert_eq!(fields[2], "100.0000");
    assert_eq!(fields[3], "0.0000");
    assert_eq!(fields[4], "0.0000");
    assert_eq!(fields[5], "0.0000");
}

#[test]
fn gradcheck_exit_codes_follow_results() {
    let pass = bowda(&["gradcheck", "--op", "identity"]);
    assert_eq!(code(&pass), 0);
    assert!(stdout(&pass).contains("pass"));

    let fail = bowda(&["gradcheck", "--op", "negative_control"]);
    assert_eq!(code(&fail), 1);
    assert!(stdout(&fail).contains("FAIL"));
}

#[test]
fn run_strategy_is_byte_reproducible_and_feeds_infer() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("run_a");
    let out_b = dir.path().join("run_b");
    let spec_path = write_spec(dir.path(), &tiny_spec(Strategy::TargetOnly, out_a.clone()));

    let first = bowda(&["run-strategy", "--spec", spec_path.to_str().unwrap()]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let second = bowda(&[
        "run-strategy",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert_eq!(code(&second), 0);

    for name in ["metrics.csv", "train_log.csv", "snet_best.ckpt", "snet_final.ckpt"] {
        assert_eq!(
            fs::read(out_a.join(name)).unwrap(),
            fs::read(out_b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }

    // The saved checkpoint carries its architecture: inference needs only
    // the file and an image.
    let img_dir = dir.path().join("imgs");
    let gen = bowda(&[
        "gen-phantom",
        "--preset",
        "target",
        "--seed",
        "9",
        "--train",
        "1",
        "--val",
        "0",
        "--out",
        img_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&gen), 0);
    let inf_out = dir.path().join("inf");
    let ckpt = out_a.join("snet_best.ckpt");
    let image = img_dir.join("phantom_train_000.mhd");
    let inf = bowda(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        inf_out.to_str().unwrap(),
        "--window",
        "8,16,16",
        "--stride",
        "4,8,8",
    ]);
    assert_eq!(code(&inf), 0, "{}", String::from_utf8_lossy(&inf.stderr));
    assert!(inf_out.join("phantom_train_000_prob.mhd").exists());
    assert!(inf_out.join("phantom_train_000_seg.raw").exists());
}

#[test]
fn spec_problems_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown strategy: validation error.
    let bad = dir.path().join("bad.json");
    let mut doc = serde_json::to_value(&tiny_spec(Strategy::TargetOnly, dir.path().join("o")))
        .unwrap();
    doc["strategy"] = serde_json::Value::String("warp_drive".into());
    fs::write(&bad, serde_json::to_vec(&doc).unwrap()).unwrap();
    let out = bowda(&["run-strategy", "--spec", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1);

    // Missing file: runtime error.
    let out = bowda(&["run-strategy", "--spec", "/nonexistent/exp.json"]);
    assert_eq!(code(&out), 2);

    // Bad --set syntax: validation error.
    let good = write_spec(dir.path(), &tiny_spec(Strategy::TargetOnly, dir.path().join("o2")));
    let out = bowda(&["run-strategy", "--spec", good.to_str().unwrap(), "--set", "nonsense"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn train_adapt_requires_an_adaptation_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = write_spec(dir.path(), &tiny_spec(Strategy::TargetOnly, dir.path().join("o")));
    let out = bowda(&["train-adapt", "--spec", spec_path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("adaptation strategy"));
}

#[test]
fn histogram_reports_bins_and_mean() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let gen = bowda(&[
        "gen-phantom",
        "--preset",
        "source",
        "--seed",
        "7",
        "--train",
        "1",
        "--val",
        "0",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&gen), 0);
    let out = bowda(&[
        "histogram",
        "--image",
        data.join("phantom_train_000.mhd").to_str().unwrap(),
        "--mask",
        data.join("phantom_train_000_mask.mhd").to_str().unwrap(),
        "--bins",
        "8",
    ]);
    assert_eq!(code(&out), 0);
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(doc["counts"].as_array().unwrap().len(), 8);
    assert_eq!(doc["edges"].as_array().unwrap().len(), 9);
    assert!(doc["mean"].as_f64().unwrap() > 0.0);
}
