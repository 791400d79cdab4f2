mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::{tiny_config, TINY_CONFIG};
use flexkd::attribution::ImportanceProfile;
use flexkd::harness::{
    cmd_compare, cmd_distill, cmd_score, cmd_train_teacher, mean_std, run_pipeline,
    ExperimentConfig, ExperimentReport, RunMetrics,
};
use flexkd::io::{read_text, write_json};
use flexkd::model::Checkpoint;
use flexkd::train::Method;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flexkd"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("experiment.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn pipeline_is_reproducible_and_self_consistent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_pipeline(&tiny_config(a.path())).unwrap();
    let rb = run_pipeline(&tiny_config(b.path())).unwrap();
    assert_eq!(ra.runs, rb.runs);
    let ja = read_text(&a.path().join("report.json")).unwrap();
    let jb = read_text(&b.path().join("report.json")).unwrap();
    // reports embed their own out_dir; compare with it normalised
    let norm = |s: &str, p: &Path| s.replace(&p.display().to_string(), "<out>");
    assert_eq!(norm(&ja, a.path()), norm(&jb, b.path()));

    for s in &ra.summary {
        let (m, sd) = mean_std(&s.values);
        assert!((m - s.mean).abs() < 1e-12 && (sd - s.std).abs() < 1e-12);
        let base = ra.method(Method::ProjectorMse).unwrap().mean;
        assert_eq!(s.delta_vs_baseline, Some(s.mean - base));
    }
    assert_eq!(ra.method(Method::ProjectorMse).unwrap().delta_vs_baseline, Some(0.0));
    assert_eq!(ra.runs.len(), 8);

    let ck = Checkpoint::load(&a.path().join("teacher/checkpoint.json")).unwrap();
    let model = ck.to_model().unwrap();
    assert_eq!(Checkpoint::from_model(&model, ck.metadata.clone()), ck);
    let ckb = Checkpoint::load(&b.path().join("teacher/checkpoint.json")).unwrap();
    assert_eq!(ck.checksum, ckb.checksum);

    // the resolved config reproduces the same report
    let resolved = a.path().join("resolved_config.toml");
    let cfg = ExperimentConfig::load(&resolved).unwrap();
    let c = tempfile::tempdir().unwrap();
    let mut cfg = cfg;
    cfg.out_dir = c.path().to_path_buf();
    assert_eq!(run_pipeline(&cfg).unwrap().runs, ra.runs);

    for m in ["ft_only", "flexkd"] {
        let trace = read_text(&a.path().join(format!("runs/{m}/seed-1/trace.jsonl"))).unwrap();
        assert!(!trace.is_empty());
        assert_eq!(trace.contains("loss_feature"), m == "flexkd");
    }
    assert!(a.path().join("timings.json").is_file());
    assert!(read_text(&a.path().join("report.md")).unwrap().contains("| flexkd |"));
}

#[test]
fn compare_statistics_from_hand_fed_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.methods = vec![Method::ProjectorMse, Method::Flexkd];
    cfg.seeds = vec![1, 2, 3];
    for (method, values) in [
        (Method::ProjectorMse, [0.9, 0.92, 0.94]),
        (Method::Flexkd, [0.95, 0.95, 0.95]),
    ] {
        for (seed, v) in cfg.seeds.clone().into_iter().zip(values) {
            let m = RunMetrics {
                method,
                seed,
                test_accuracy: v,
                test_nll: 0.0,
                steps: 1,
                final_loss: None,
            };
            write_json(&cfg.layout().run_dir(method, seed).join("metrics.json"), &m).unwrap();
        }
    }
    let report = cmd_compare(&cfg).unwrap();
    let p = report.method(Method::ProjectorMse).unwrap();
    assert!((p.mean - 0.92).abs() < 1e-12);
    assert!((p.std - 0.016329931618554).abs() < 1e-12);
    assert_eq!(p.delta_vs_baseline, Some(0.0));
    let f = report.method(Method::Flexkd).unwrap();
    assert!(f.std < 1e-15);
    assert_eq!(f.delta_vs_baseline, Some(f.mean - p.mean));
    let md = report.to_markdown();
    assert!(md.contains("92.00 ± 1.63"), "{md}");
    assert!(md.contains("+3.00"), "{md}");

    let single = ExperimentReport::from_runs(
        ExperimentConfig {
            methods: vec![Method::Flexkd],
            seeds: vec![1],
            ..cfg.clone()
        },
        vec![RunMetrics {
            method: Method::Flexkd,
            seed: 1,
            test_accuracy: 0.8,
            test_nll: 0.0,
            steps: 1,
            final_loss: None,
        }],
    );
    assert_eq!(single.summary[0].mean, 0.8);
    assert_eq!(single.summary[0].std, 0.0);
    assert_eq!(single.baseline, None);

    fs::remove_file(cfg.layout().run_dir(Method::Flexkd, 2).join("metrics.json")).unwrap();
    let err = cmd_compare(&cfg).unwrap_err();
    assert!(err.to_string().contains("flexkd/seed-2"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn scoring_fraction_and_teacher_binding() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    let teacher = cmd_train_teacher(&cfg).unwrap();
    let full = ImportanceProfile::load(&cmd_score(&cfg, None).unwrap()).unwrap();
    assert_eq!(full.d_t, 12);
    assert_eq!(full.num_samples, 120);
    cfg.attribution.calibration_fraction = 0.05;
    let small = ImportanceProfile::load(&cmd_score(&cfg, None).unwrap()).unwrap();
    assert_eq!(small.num_samples, 6);

    // retrain with another seed: the stored profile no longer matches
    let other_dir = tempfile::tempdir().unwrap();
    let mut other = tiny_config(other_dir.path());
    other.teacher.seed = 99;
    let other_teacher = cmd_train_teacher(&other).unwrap();
    let err = cmd_distill(&cfg, Some(&other_teacher), None, &[Method::Flexkd], &[1]).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");

    // a hand-edited checkpoint fails its checksum
    let text = read_text(&teacher).unwrap();
    let ck: serde_json::Value = serde_json::from_str(&text).unwrap();
    let data = ck["params"][0]["data"].as_str().unwrap().to_string();
    let flipped = format!("{}{}", if data.starts_with('3') { '4' } else { '3' }, &data[1..]);
    fs::write(&teacher, text.replacen(&data, &flipped, 1)).unwrap();
    assert!(cmd_distill(&cfg, None, None, &[Method::Flexkd], &[1]).is_err());
}

#[test]
fn cli_stages_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), TINY_CONFIG);
    let run = |args: &[&str]| {
        let o = bin()
            .args(args)
            .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        (o.status.code().unwrap(), String::from_utf8_lossy(&o.stdout).to_string(), String::from_utf8_lossy(&o.stderr).to_string())
    };
    let (code, stdout, _) = run(&["train-teacher", "--seed", "4"]);
    assert_eq!(code, 0);
    assert!(stdout.trim().ends_with("checkpoint.json"));
    assert_eq!(run(&["score", "--calibration-fraction", "0.5"]).0, 0);
    let (code, _, err) = run(&["compare"]);
    assert_eq!(code, 2);
    assert!(err.contains("missing runs"), "{err}");
    assert_eq!(run(&["distill", "--method", "flexkd", "--seed", "1"]).0, 0);
    assert!(out.join("runs/flexkd/seed-1/student.json").is_file());
    assert!(!out.join("runs/flexkd/seed-2").exists());
    assert_eq!(run(&["distill"]).0, 0);
    let (code, stdout, _) = run(&["compare"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("| projector_mse |"));
    let ck = out.join("runs/flexkd/seed-1/student.json");
    let (code, stdout, _) = run(&["evaluate", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(code, 0);
    let acc: f64 = stdout.trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let (code, stdout, _) = run(&["inspect", "--thresholds", "0.5,1,2"]);
    assert_eq!(code, 0, "{stdout}");
    assert!(out.join("inspect/sparsity.json").is_file());
    assert_eq!(run(&["distill", "--method", "nonsense"]).0, 2);
    assert_eq!(run(&["score", "--calibration-fraction", "1.5"]).0, 2);

    let o = bin()
        .args(["compare", "--config", dir.path().join("absent.toml").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn csv_dataset_paths_resolve_against_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = String::from("x0,x1,label\n");
    for i in 0..40 {
        let a = (i as f64 * 0.37).sin();
        let b = (i as f64 * 0.91).cos();
        rows.push_str(&format!("{a},{b},{}\n", usize::from(a + b > 0.0)));
    }
    fs::write(dir.path().join("train.csv"), &rows).unwrap();
    fs::write(dir.path().join("test.csv"), &rows).unwrap();
    let text = format!(
        r#"
version = 1
methods = ["ft_only", "flexkd"]
seeds = [1]
out_dir = "{}"

[dataset]
kind = "csv"
train = "train.csv"
test = "test.csv"
features = ["x0", "x1"]
num_classes = 2

[teacher.model]
family = "mlp"
input_dim = 2
hidden_dims = [6]
num_classes = 2
activation = "tanh"

[teacher.train]
epochs = 2

[student.model]
family = "mlp"
input_dim = 2
hidden_dims = [3]
num_classes = 2
activation = "relu"

[student.train]
epochs = 2
"#,
        dir.path().join("out").display()
    );
    let cfg_path = write_config(dir.path(), &text);
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    let report = run_pipeline(&cfg).unwrap();
    assert_eq!(report.runs.len(), 2);
    assert_eq!(report.baseline, None);

    let missing = text.replace("test.csv", "nowhere.csv");
    let o = bin()
        .args(["train-teacher", "--config", write_config(dir.path(), &missing).to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
