mod common;

use std::path::Path;
use std::process::Command;

use dualcast::data::prepare;
use dualcast::trainkit::{
    compute_metrics, evaluate, export_embeddings, load_trained, predict, save_trained, targets, train_on, RunConfig,
};

fn cli(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dualcast"))
        .current_dir(dir)
        .env_remove("DUALCAST_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

const TINY: [&str; 7] = [
    "--synthetic.days=7",
    "--synthetic.nodes=4",
    "--model.width=4",
    "--model.layers=1",
    "--model.input_steps=4",
    "--model.output_steps=4",
    "--optimizer.epochs=2",
];

fn run_ok(dir: &Path, cmd: &str, extra: &[&str]) -> String {
    let mut args = vec![cmd];
    args.extend(TINY);
    args.extend(extra);
    let out = cli(dir, &args);
    assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn cli_generate_train_evaluate_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_ok(d, "generate", &[]);
    assert!(d.join("data/manifest.json").exists());
    run_ok(d, "train", &[]);
    for f in ["runs/metrics.json", "runs/train_log.csv", "runs/checkpoint/manifest.txt", "runs/checkpoint/params.bin"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(d.join("runs/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    run_ok(d, "evaluate", &[]);
    let trained = std::fs::read(d.join("runs/metrics.json")).unwrap();
    let evaluated = std::fs::read(d.join("runs/metrics_test.json")).unwrap();
    assert_eq!(trained, evaluated);
    run_ok(d, "export-embeddings", &["--output_dir=runs"]);
    let first = std::fs::read(d.join("runs/embeddings_test.csv")).unwrap();
    run_ok(d, "export-embeddings", &[]);
    assert_eq!(first, std::fs::read(d.join("runs/embeddings_test.csv")).unwrap());
    let header = String::from_utf8(first).unwrap();
    assert!(header.starts_with("sample,start_timestamp,pattern,incident,gi_0"));
}

#[test]
fn cli_reports_bad_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["train", "--model.widht=3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("widht"));
    let out = cli(dir.path(), &["evaluate"]);
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_dualcast"))
        .current_dir(dir.path())
        .env("DUALCAST_SEED", "abc")
        .args(["generate"])
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("DUALCAST_SEED"));
}

#[test]
fn cli_seed_variable_changes_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |seed: &str, sub: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_dualcast"))
            .current_dir(dir.path())
            .env("DUALCAST_SEED", seed)
            .args(["generate", "--synthetic.days=2", &format!("--data_dir={sub}")])
            .output()
            .unwrap();
        assert!(out.status.success());
        std::fs::read(dir.path().join(sub).join("synthetic.csv")).unwrap()
    };
    assert_eq!(gen("1", "a"), gen("1", "b"));
    assert_ne!(gen("1", "a"), gen("2", "c"));
}

#[test]
fn metrics_recompute_from_saved_predictions() {
    let ds = common::synthetic(7, 0.3, 4);
    let cfg = RunConfig {
        model: common::small_model(4),
        optimizer: dualcast::trainkit::OptimizerConfig {
            epochs: 2,
            ..Default::default()
        },
        ..RunConfig::default()
    };
    let (outcome, data) = train_on(&cfg, &ds).unwrap();
    let report = evaluate(&outcome.model, &data.test, &data.stats, &data.calendar, 16).unwrap();

    let pred = predict(&outcome.model, &data.test, &data.stats, 16).unwrap();
    let truth = targets(&data.test, &data.stats).unwrap();
    let shape = pred.shape().to_vec();
    let per_sample = shape[1..].iter().product::<usize>();
    let per_step = shape[2] * shape[3];
    let mut step_rmse = vec![0.0; shape[1]];
    for s in 0..shape[0] {
        for t in 0..shape[1] {
            for k in 0..per_step {
                let i = s * per_sample + t * per_step + k;
                step_rmse[t] += (pred.data()[i] - truth.data()[i]).powi(2);
            }
        }
    }
    let count = (shape[0] * per_step) as f64;
    let rmse = step_rmse.iter().map(|e| (e / count).sqrt()).sum::<f64>() / shape[1] as f64;
    assert!((rmse - report.rmse).abs() < 1e-9, "{rmse} vs {}", report.rmse);
    let again = compute_metrics(&pred, &truth, &data.test.samples, &data.calendar).unwrap();
    assert_eq!(again, report);

    let dir = tempfile::tempdir().unwrap();
    save_trained(&outcome.model, dir.path(), &data.stats, &cfg.loss).unwrap();
    let (model, stats) = load_trained(dir.path()).unwrap();
    let data2 = prepare(&ds, 4, 4, &cfg.calendar).unwrap();
    assert_eq!(evaluate(&model, &data2.test, &stats, &data2.calendar, 16).unwrap(), report);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    export_embeddings(&outcome.model, &data.test, 16, &mut a).unwrap();
    export_embeddings(&model, &data2.test, 7, &mut b).unwrap();
    assert_eq!(a, b);
}
