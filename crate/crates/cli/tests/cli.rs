//! Behavior of the `moelab` binary and the command layer.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use moelab::model::LanguageModel;
use moelab::rng::{stream, Stream};
use moelab_cli::checkpoint::{self, CheckpointMeta};
use moelab_cli::report::Provenance;
use moelab_cli::{CliError, RunConfig};
use proptest::prelude::*;

fn smoke() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/smoke.toml")
        .to_string_lossy()
        .into_owned()
}

fn moelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moelab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A smoke run with a pretrained pair and a sar student, shared read-only.
fn trained() -> &'static (tempfile::TempDir, PathBuf) {
    static RUN: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let out_s = out.to_str().unwrap();
        assert_eq!(code(&moelab(&["--config", &smoke(), "--out", out_s, "pretrain"])), 0);
        let o = moelab(&["--config", &smoke(), "--out", out_s, "--method", "sar", "distill"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (dir, out)
    })
}

fn copy_run(dst: &Path) {
    let src = &trained().1;
    std::fs::create_dir_all(dst).unwrap();
    for e in std::fs::read_dir(src).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "ckpt") {
            std::fs::copy(&p, dst.join(p.file_name().unwrap())).unwrap();
        }
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn unknown_method_is_a_usage_error() {
    let o = moelab(&["--method", "distil", "distill"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("distil"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[distill]\nlamda = 0.1\n").unwrap();
    let o = moelab(&["--config", cfg.to_str().unwrap(), "pretrain"]);
    assert_eq!(code(&o), CliError::EXIT_CONFIG);
    assert!(stderr(&o).contains("lamda"));
    // Nothing was computed or written.
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn invalid_value_is_rejected_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = moelab(&["--config", &smoke(), "--out", out.to_str().unwrap(), "--lambda", "2", "distill"]);
    assert_eq!(code(&o), CliError::EXIT_CONFIG);
    assert!(!out.exists());
}

#[test]
fn missing_teacher_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let o = moelab(&["--config", &smoke(), "--out", out.to_str().unwrap(), "--method", "kd", "distill"]);
    assert_eq!(code(&o), CliError::EXIT_IO);
    assert!(stderr(&o).contains(&out.join("teacher.ckpt").display().to_string()), "{}", stderr(&o));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let _held = moelab_cli::lock::RunLock::acquire(dir.path()).unwrap();
    let o = moelab(&["--config", &smoke(), "--out", dir.path().to_str().unwrap(), "pretrain"]);
    assert_eq!(code(&o), CliError::EXIT_IO);
    assert!(stderr(&o).contains(".moelab.lock"));
}

#[test]
fn empty_test_set_is_a_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("two.jsonl");
    std::fs::write(
        &data,
        "{\"instruction\": \"ab\", \"output\": \"ab\"}\n{\"instruction\": \"cd\", \"output\": \"dc\"}\n",
    )
    .unwrap();
    let cfg = dir.path().join("c.toml");
    let text = std::fs::read_to_string(smoke()).unwrap().replace(
        "[data]\n",
        &format!("[data]\nsource = \"jsonl\"\npath = {:?}\n", data.to_str().unwrap()),
    );
    std::fs::write(&cfg, text).unwrap();
    let parsed = RunConfig::load(&cfg).unwrap();
    let model = LanguageModel::new(parsed.student.clone(), &mut stream(0, Stream::Init)).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let meta = CheckpointMeta {
        role: "student".into(),
        model: parsed.student,
        provenance: Provenance::new("0".into(), 0),
    };
    checkpoint::save(&ckpt, &model, &meta).unwrap();
    let out = dir.path().join("out");
    let o = moelab(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), CliError::EXIT_CONTRACT, "{}", stderr(&o));
    assert!(stderr(&o).contains("empty test set"));
}

#[test]
fn pretraining_lowers_the_loss_and_records_provenance() {
    let out = &trained().1;
    let summary = json(&out.join("reports/pretrain.json"));
    for role in ["teacher", "student"] {
        let r = &summary["rows"][role];
        assert!(r["final_loss"].as_f64() < r["initial_loss"].as_f64(), "{role}");
    }
    assert_eq!(summary["meta"]["config_hash"].as_str().unwrap().len(), 64);
    let header = std::fs::read_to_string(out.join("metrics/pretrain_teacher.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(header.lines().next().unwrap()).unwrap();
    assert_eq!(first["kind"], "header");
    assert_eq!(first["adamw"]["eps"], 1e-8);
}

#[test]
fn checkpoint_files_resave_identically() {
    let out = &trained().1;
    let dir = tempfile::tempdir().unwrap();
    for name in ["teacher.ckpt", "student_init.ckpt", "teacher_sar.ckpt"] {
        let original = std::fs::read(out.join(name)).unwrap();
        let (model, meta) = checkpoint::load(&out.join(name)).unwrap();
        let again = dir.path().join(name);
        checkpoint::save(&again, &model, &meta).unwrap();
        assert_eq!(std::fs::read(&again).unwrap(), original, "{name}");
    }
}

#[test]
fn sar_reports_router_gradients_early() {
    let text = std::fs::read_to_string(trained().1.join("metrics/distill_sar.jsonl")).unwrap();
    let norms: Vec<f64> = text
        .lines()
        .skip(1)
        .take(10)
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["router_grad_norm"].as_f64().unwrap())
        .collect();
    assert!(norms.iter().any(|&n| n > 0.0));
}

#[test]
fn augmentation_defaults_are_accepted() {
    let c = RunConfig::default();
    assert_eq!(c.distill.method, moelab::distill::Method::Ka);
    assert_eq!((c.distill.lambda, c.distill.augment_count), (0.05, 2));
    c.validate().unwrap();
}

#[test]
fn gate_mass_with_every_expert_active_is_one() {
    let dir = tempfile::tempdir().unwrap();
    copy_run(dir.path());
    let o = moelab(&["--config", &smoke(), "--out", dir.path().to_str().unwrap(), "--k", "4", "analyze", "--kind", "gate-mass"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&dir.path().join("reports/gate_mass.json"));
    for row in r["rows"].as_array().unwrap() {
        assert!((row["activated_mass"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    }
    assert_eq!(r["meta"]["details"]["k"], 4);
}

#[test]
fn router_shift_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    copy_run(dir.path());
    let teacher = dir.path().join("teacher.ckpt");
    let o = moelab(&[
        "--config",
        &smoke(),
        "--out",
        dir.path().to_str().unwrap(),
        "analyze",
        "--kind",
        "router-shift",
        "--against",
        teacher.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("reports/router_shift.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# {"));
    assert_eq!(lines.next().unwrap(), "layer,mean_kl,max_kl,tokens");
    for l in lines {
        let cells: Vec<&str> = l.split(',').collect();
        assert_eq!((cells[1], cells[2]), ("0", "0"));
    }
}

#[test]
fn eval_averages_over_requested_seeds() {
    let dir = tempfile::tempdir().unwrap();
    copy_run(dir.path());
    let o = moelab(&[
        "--config",
        &smoke(),
        "--out",
        dir.path().to_str().unwrap(),
        "--method",
        "sar",
        "eval",
        "--seeds",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&dir.path().join("reports/eval_student_sar.json"));
    let seeds = r["rows"]["seeds"].as_array().unwrap();
    assert_eq!(seeds.len(), 3);
    let mean = seeds.iter().map(|s| s["mean_f"].as_f64().unwrap()).sum::<f64>() / 3.0;
    assert!((r["rows"]["mean_f"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!(seeds.iter().all(|s| !s["examples"].as_array().unwrap().is_empty()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoints_round_trip_arbitrary_weights(seed in any::<u64>(), scale in -1e6f64..1e6) {
        let mut cfg = moelab::model::ModelConfig::desk_student();
        cfg.d_model = 4;
        cfg.d_ff = 4;
        cfg.n_heads = 2;
        cfg.n_layers = 1;
        cfg.max_seq_len = 4;
        let mut m = LanguageModel::new(cfg.clone(), &mut stream(seed, Stream::Init)).unwrap();
        for (_, p) in m.named_params_mut() {
            p.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        let meta = CheckpointMeta { role: "student".into(), model: cfg, provenance: Provenance::new("p".into(), seed) };
        let bytes = checkpoint::encode(&m, &meta);
        let (back, meta2) = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.checksums(), m.checksums());
        prop_assert_eq!(checkpoint::encode(&back, &meta2), bytes);
    }
}
