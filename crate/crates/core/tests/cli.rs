use std::fs;
use std::path::Path;
use std::process::Command;

use gpda::data::{encode_idx_images, encode_idx_labels, gen_synthetic_pda, IdxImages, SyntheticSpec};
use gpda::experiment::{read_metrics, run_experiment, ExperimentSpec, TaskSource, METRIC_COLUMNS};
use gpda::models::{Architecture, GpdaNets};
use gpda::training::{accuracy, Mode, TrainConfig};

fn gpda() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gpda"))
}

fn small_run(out: &Path, modes: &str, extra: &[&str]) -> std::process::Output {
    small_run_for(out, modes, 2, extra)
}

fn small_run_for(out: &Path, modes: &str, epochs: usize, extra: &[&str]) -> std::process::Output {
    gpda()
        .args(["run", "--mode", modes, "--seeds", "0,1", "--per-class", "20", "--out"])
        .arg(out)
        .arg(format!("--epochs={epochs}"))
        .args(extra)
        .output()
        .unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let out = small_run(dir.path(), "gpda,no_graph", &[]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), 5);
    assert_eq!(fa, fb);
}

#[test]
fn summary_has_runs_then_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_run(dir.path(), "gpda,source_only,dann_like", &[]);
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mode,seed,final_accuracy");
    assert_eq!(lines.len(), 1 + 3 * 2 + 3 * 2);
    let aggregates: Vec<&str> = lines.iter().filter(|l| l.contains(",mean,")).copied().collect();
    assert_eq!(aggregates.len(), 3);
    for mode in ["gpda", "source_only", "dann_like"] {
        let accs: Vec<f64> = lines[1..7]
            .iter()
            .filter(|l| l.starts_with(&format!("{mode},")))
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        let mean_line = aggregates.iter().find(|l| l.starts_with(&format!("{mode},"))).unwrap();
        let mean: f64 = mean_line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((mean - (accs[0] + accs[1]) / 2.0).abs() < 1e-15);
    }
}

#[test]
fn every_mode_writes_the_same_schema() {
    let dir = tempfile::tempdir().unwrap();
    let modes = "gpda,no_cs,no_graph,baseline,source_only,dann_like";
    assert!(small_run(dir.path(), modes, &[]).status.success());
    let mut header = None;
    for mode in modes.split(',') {
        let path = dir.path().join(format!("{mode}_seed0.csv"));
        let text = fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap().to_string();
        assert_eq!(header.get_or_insert(first.clone()), &first);
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 2);
        let m: Mode = mode.parse().unwrap();
        let a = m.ablation();
        for r in &rows {
            // Ablated terms are identically zero; active ones may also be 0,
            // e.g. L_CS before any target row is pseudo-labeled.
            if !a.uses_adversary() {
                assert_eq!(r.losses.domain, 0.0, "{mode} L_D");
            } else {
                assert!(r.losses.domain > 0.0, "{mode} L_D");
            }
            if !a.uses_centroids() {
                assert_eq!(r.losses.centroid, 0.0, "{mode} L_CS");
            }
            if !a.estimates_gamma() {
                assert!(r.gamma.iter().all(|&g| g == 1.0));
            }
        }
    }
    let expected: Vec<String> = METRIC_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..6).map(|k| format!("gamma_{k}")))
        .collect();
    assert_eq!(header.unwrap(), expected.join(","));
}

#[test]
fn zero_epochs_reports_untrained_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        task: TaskSource::Synthetic(SyntheticSpec::reference(0)),
        config: TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        modes: vec![Mode::SourceOnly],
        seeds: vec![3],
        out_dir: dir.path().to_path_buf(),
        save_checkpoints: false,
    };
    let outcome = run_experiment::<f64>(&spec).unwrap();
    assert_eq!(outcome.summary.len(), 1);

    let task = gen_synthetic_pda(&SyntheticSpec::reference(3)).unwrap();
    let nets = GpdaNets::<f64>::init(Architecture::desk(2, 6), 3).unwrap();
    let untrained = accuracy(&nets.predict_classes(&task.target.samples).unwrap(), &task.target.labels);
    assert_eq!(outcome.summary[0].mean, untrained);
    assert_eq!(fs::read_to_string(dir.path().join("source_only_seed3.csv")).unwrap().lines().count(), 1);
}

#[test]
fn checkpoints_reload_to_the_same_predictions() {
    let dir = tempfile::tempdir().unwrap();
    assert!(small_run(dir.path(), "gpda", &["--save-checkpoints"]).status.success());
    let nets: GpdaNets<f64> = gpda::checkpoint::load(&dir.path().join("gpda_seed1")).unwrap();
    let task = gen_synthetic_pda(&SyntheticSpec {
        per_class: 20,
        ..SyntheticSpec::reference(1)
    })
    .unwrap();
    let acc = accuracy(&nets.predict_classes(&task.target.samples).unwrap(), &task.target.labels);
    let last = read_metrics(&dir.path().join("gpda_seed1.csv")).unwrap().pop().unwrap();
    assert_eq!(acc, last.target_accuracy);
}

#[test]
fn f32_runs_complete() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_run(dir.path(), "gpda", &["--precision", "f32"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn idx_task_resizes_the_target() {
    let dir = tempfile::tempdir().unwrap();
    // 4×4 source digits, 2×2 target digits; pixel patterns keyed to the class.
    let make = |side: usize, n: usize, classes: usize| {
        let labels: Vec<u8> = (0..n).map(|i| (i % classes) as u8).collect();
        let pixels = labels
            .iter()
            .flat_map(|&l| (0..side * side).map(move |p| if p % 5 == l as usize % 5 { 200 } else { 10 + l * 20 }))
            .collect();
        (
            IdxImages {
                count: n,
                rows: side,
                cols: side,
                pixels,
            },
            labels,
        )
    };
    let (si, sl) = make(4, 40, 10);
    let (ti, tl) = make(2, 30, 10);
    let w = |name: &str, bytes: Vec<u8>| {
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        p
    };
    let paths = [
        w("si", encode_idx_images(&si)),
        w("sl", encode_idx_labels(&sl)),
        w("ti", encode_idx_images(&ti)),
        w("tl", encode_idx_labels(&tl)),
    ];
    let out_dir = dir.path().join("out");
    let out = gpda()
        .args(["run", "--task", "idx", "--mode", "gpda", "--epochs", "1", "--batch", "8", "--keep", "0,1,2,3,4"])
        .arg("--source-images")
        .arg(&paths[0])
        .arg("--source-labels")
        .arg(&paths[1])
        .arg("--target-images")
        .arg(&paths[2])
        .arg("--target-labels")
        .arg(&paths[3])
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_metrics(&out_dir.join("gpda_seed0.csv")).unwrap();
    assert_eq!(rows[0].gamma.len(), 10);
}

#[test]
fn idx_task_requires_paths() {
    let dir = tempfile::tempdir().unwrap();
    let out = gpda().args(["run", "--task", "idx", "--out"]).arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn bad_arguments_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["--mode", "gpda,nonsense"],
        vec!["--lr=-1"],
        vec!["--threshold", "1.5"],
        vec!["--batch", "0"],
    ] {
        let out = gpda().arg("run").args(&args).arg("--out").arg(dir.path()).output().unwrap();
        assert!(!out.status.success(), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("gpda: "), "{args:?}");
    }
}

#[test]
fn divergence_aborts_and_keeps_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    // Literal centroid separation on raw features with no clipping runs away.
    let out = small_run_for(dir.path(), "gpda", 50, &["--raw-centroids", "--grad-clip", "0"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("non-finite"), "{stderr}");
    assert!(dir.path().join("summary.csv").exists());
    assert!(read_metrics(&dir.path().join("gpda_seed0.csv")).is_ok());
}

#[test]
fn synth_exports_the_task() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("task.csv");
    let out = gpda()
        .args(["synth", "--per-class", "10", "--seed", "2", "--out"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x0,x1,label,domain");
    assert_eq!(lines.len(), 1 + 60 + 30);
    assert!(lines[1].ends_with(",source"));
    assert!(lines.last().unwrap().ends_with(",target"));
}
