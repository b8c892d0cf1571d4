//! Acceptance harness: runs every criterion at its stated tolerance and
//! prints one PASS/FAIL line each. Exits nonzero if a gating criterion fails.
//!
//! Criterion 9 needs MNIST and USPS in IDX form under `$GPDA_DIGITS_DIR`
//! (`mnist-images.idx`, `mnist-labels.idx`, `usps-images.idx`,
//! `usps-labels.idx`) and is skipped otherwise.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::{dense_gcn, gradcheck, random_labels, random_matrix, tiny_fixture};
use gpda::autodiff::Tape;
use gpda::data::SyntheticSpec;
use gpda::experiment::{run_experiment, ExperimentSpec, IdxPaths, RunResult, TaskSource};
use gpda::graph::{LabelGraph, LabelKind, NodeLabels};
use gpda::losses::{loss_centroid_separation, loss_domain, loss_source, CentroidBank, Domain};
use gpda::matrix::Matrix;
use gpda::models::{gcn_forward, GcnHead};
use gpda::training::{Mode, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const OUTLIERS: [usize; 3] = [3, 4, 5];
const SHARED: [usize; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn report(id: &str, name: &str, gating: bool, elapsed: Duration, v: &Verdict) {
    let status = if v.pass { "PASS" } else { "FAIL" };
    let tag = if gating { "" } else { " (optional)" };
    println!("criterion {id}{tag} {name}: {status} [{:.1}s] {}", elapsed.as_secs_f64(), v.detail);
}

fn node_labels(y: &Matrix<f64>) -> NodeLabels<f64> {
    let kinds = y
        .iter_rows()
        .map(|r| if r.iter().any(|&v| v > 0.0) { LabelKind::GroundTruth } else { LabelKind::Unlabeled })
        .collect();
    NodeLabels::new(y.clone(), kinds).unwrap()
}

fn gradient_correctness() -> Verdict {
    let f = tiny_fixture(0);
    let plain = gradcheck(&f, -1.0);
    let reversed = gradcheck(&f, 1.0);
    let worst = plain.max(reversed);
    verdict(
        worst < 1e-4,
        format!("max relative error {worst:.3e} (identity reversal {plain:.3e}, full reversal {reversed:.3e}), limit 1e-4"),
    )
}

fn gcn_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let n = 1 + i % 20;
        let y = random_labels(&mut rng, n, 1 + i % 7);
        let x = random_matrix(&mut rng, n, 1 + i % 5);
        let theta = random_matrix(&mut rng, x.cols(), 1 + i % 4);
        let g = LabelGraph::build(&node_labels(&y)).unwrap();
        let mut tape = Tape::new();
        let head = GcnHead::from_filters(vec![theta.clone()]).unwrap();
        let bound = head.bind(&mut tape);
        let (xv, pv) = (tape.constant(x.clone()), tape.constant(g.propagation().clone()));
        let z = gcn_forward(&mut tape, &bound, xv, pv).unwrap();
        worst = worst.max(tape.value(z).max_abs_diff(&dense_gcn(&y, &x, &theta)));
    }
    verdict(worst <= 1e-12, format!("200 instances, max deviation {worst:.3e}, limit 1e-12"))
}

fn adjacency_properties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut a_sym, mut p_sym, mut perm): (bool, f64, f64) = (true, 0.0, 0.0);
    for i in 0..500 {
        let n = 1 + i % 20;
        let labels = node_labels(&random_labels(&mut rng, n, 1 + i % 8));
        let g = LabelGraph::build(&labels).unwrap();
        a_sym &= g.adjacency() == &g.adjacency().transpose();
        p_sym = p_sym.max(g.propagation().max_abs_diff(&g.propagation().transpose()));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let gp = LabelGraph::build(&labels.permuted(&order)).unwrap();
        let expected = Matrix::from_fn(n, n, |r, c| g.propagation()[(order[r], order[c])]);
        perm = perm.max(gp.propagation().max_abs_diff(&expected));
    }
    verdict(
        a_sym && p_sym <= 1e-12 && perm <= 1e-12,
        format!("500 label sets: A symmetric {a_sym}, P asymmetry {p_sym:.1e}, permutation deviation {perm:.1e}"),
    )
}

fn loss_unit_values() -> Verdict {
    let mut t = Tape::<f64>::new();
    let z = t.constant(Matrix::zeros(4, 10));
    let ls = loss_source(&mut t, z, &[0, 3, 7, 9]).unwrap();
    let ce = (t.scalar(ls) - 10f64.ln()).abs();

    let p = t.constant(Matrix::filled(6, 1, 0.5));
    let domains = [Domain::Source, Domain::Source, Domain::Source, Domain::Target, Domain::Target, Domain::Target];
    let ld = loss_domain(&mut t, p, &domains, &[1.0; 6]).unwrap();
    let bce = (t.scalar(ld) - 2.0 * 2f64.ln()).abs();

    let bank = CentroidBank::from_centroids(
        Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0]]).unwrap(),
        Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap(),
        0.7,
    )
    .unwrap();
    let cs = loss_centroid_separation(&bank, 1).unwrap();
    verdict(
        ce <= 1e-12 && bce <= 1e-12 && cs == -2.0,
        format!("|L_S − ln 10| = {ce:.1e}, |L_D − 2 ln 2| = {bce:.1e}, L_CS = {cs}"),
    )
}

fn reference_spec(modes: Vec<Mode>, seeds: Vec<u64>, out_dir: PathBuf) -> ExperimentSpec {
    ExperimentSpec {
        task: TaskSource::Synthetic(SyntheticSpec::reference(0)),
        config: TrainConfig::default(),
        modes,
        seeds,
        out_dir,
        save_checkpoints: false,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn gamma_discrimination(runs: &[&RunResult]) -> Verdict {
    let mut ok = 0;
    let mut parts = Vec::new();
    for r in runs {
        let g = &r.history.last().unwrap().gamma;
        let out = mean(&OUTLIERS.map(|k| g[k]));
        let shared = mean(&SHARED.map(|k| g[k]));
        if out < 0.5 * shared {
            ok += 1;
        }
        parts.push(format!("seed {}: {out:.3}/{shared:.3}", r.seed));
    }
    verdict(ok >= 4, format!("{ok}/5 seeds with outlier γ < 0.5 × shared γ ({})", parts.join(", ")))
}

fn method_ordering(acc: &BTreeMap<Mode, f64>) -> Verdict {
    let (g, s, d) = (acc[&Mode::Gpda], acc[&Mode::SourceOnly], acc[&Mode::DannLike]);
    verdict(
        g >= s + 0.05 && g >= d + 0.05,
        format!(
            "gpda {:.2}%, source_only {:.2}%, dann_like {:.2}%; needs gpda ≥ both + 5 points",
            100.0 * g,
            100.0 * s,
            100.0 * d
        ),
    )
}

fn ablation_trend(acc: &BTreeMap<Mode, f64>) -> Verdict {
    let (g, cs, gr, b) = (acc[&Mode::Gpda], acc[&Mode::NoCs], acc[&Mode::NoGraph], acc[&Mode::Baseline]);
    let mid = cs.max(gr);
    let tol = 0.01;
    verdict(
        g >= mid - tol && mid >= b - tol,
        format!(
            "gpda {:.2}% vs max(no_cs {:.2}%, no_graph {:.2}%) vs baseline {:.2}%, 1-point band",
            100.0 * g,
            100.0 * cs,
            100.0 * gr,
            100.0 * b
        ),
    )
}

fn determinism(first_dir: &std::path::Path) -> Verdict {
    let again = tempfile::tempdir().unwrap();
    let modes = vec![Mode::Gpda, Mode::DannLike];
    run_experiment::<f64>(&reference_spec(modes.clone(), vec![0], again.path().to_path_buf())).unwrap();
    let mut checked = Vec::new();
    let mut same = true;
    for mode in modes {
        let name = format!("{mode}_seed0.csv");
        let a = fs::read(first_dir.join(&name)).unwrap();
        let b = fs::read(again.path().join(&name)).unwrap();
        same &= a == b;
        checked.push(format!("{name} {} bytes", a.len()));
    }
    verdict(same, format!("re-ran and compared {}", checked.join(", ")))
}

fn digits() -> Option<Verdict> {
    let dir = PathBuf::from(std::env::var_os("GPDA_DIGITS_DIR")?);
    let paths = |stem: &str| IdxPaths {
        images: dir.join(format!("{stem}-images.idx")),
        labels: dir.join(format!("{stem}-labels.idx")),
    };
    let out = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        task: TaskSource::Idx {
            source: paths("mnist"),
            target: paths("usps"),
            keep: vec![0, 1, 2, 3, 4],
            limit: Some(2000),
        },
        config: TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        },
        modes: vec![Mode::Gpda, Mode::DannLike, Mode::SourceOnly],
        seeds: vec![0],
        out_dir: out.path().to_path_buf(),
        save_checkpoints: false,
    };
    Some(match run_experiment::<f64>(&spec) {
        Ok(o) => {
            let m: Vec<f64> = o.summary.iter().map(|s| s.mean).collect();
            verdict(
                m[0] > m[1] && m[0] > m[2],
                format!("gpda {:.2}%, dann_like {:.2}%, source_only {:.2}%", 100.0 * m[0], 100.0 * m[1], 100.0 * m[2]),
            )
        }
        Err(e) => verdict(false, format!("run failed: {e}")),
    })
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; answer those
    // without running anything.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = Vec::new();
    let mut record = |id: &str, name: &str, limit: Option<Duration>, elapsed: Duration, mut v: Verdict| {
        if let Some(limit) = limit {
            if elapsed > limit {
                v.pass = false;
                v.detail.push_str(&format!("; over the {}s budget", limit.as_secs()));
            }
        }
        report(id, name, true, elapsed, &v);
        if !v.pass {
            failed.push(id.to_string());
        }
    };

    let (v, t) = timed(gradient_correctness);
    record("1", "gradient correctness", Some(Duration::from_secs(30)), t, v);
    let (v, t) = timed(gcn_oracle);
    record("2", "GCN oracle equivalence", Some(Duration::from_secs(5)), t, v);
    let (v, t) = timed(adjacency_properties);
    record("3", "adjacency properties", None, t, v);
    let (v, t) = timed(loss_unit_values);
    record("4", "loss unit values", None, t, v);

    // Criteria 5-7 share one set of reference runs: six modes × five seeds.
    let dir = tempfile::tempdir().unwrap();
    let mut runs: Vec<RunResult> = Vec::new();
    let mut mode_time: BTreeMap<Mode, Duration> = BTreeMap::new();
    for mode in Mode::ALL {
        let (outcome, t) = timed(|| run_experiment::<f64>(&reference_spec(vec![mode], SEEDS.to_vec(), dir.path().to_path_buf())));
        mode_time.insert(mode, t);
        match outcome {
            Ok(o) => {
                runs.extend(o.runs);
                // Each call rewrites summary.csv; keep one per mode.
                let _ = fs::rename(dir.path().join("summary.csv"), dir.path().join(format!("summary_{mode}.csv")));
            }
            Err(e) => {
                println!("reference run for {mode} aborted: {e}");
            }
        }
    }
    let acc: BTreeMap<Mode, f64> = Mode::ALL
        .into_iter()
        .filter_map(|m| {
            let a: Vec<f64> = runs.iter().filter(|r| r.mode == m).map(|r| r.final_accuracy).collect();
            (a.len() == SEEDS.len()).then(|| (m, mean(&a)))
        })
        .collect();

    let gpda_runs: Vec<&RunResult> = runs.iter().filter(|r| r.mode == Mode::Gpda).collect();
    let v = if gpda_runs.len() == SEEDS.len() {
        gamma_discrimination(&gpda_runs)
    } else {
        verdict(false, "gpda runs incomplete")
    };
    record("5", "γ discrimination", Some(Duration::from_secs(600)), mode_time[&Mode::Gpda], v);

    let complete = acc.len() == Mode::ALL.len();
    let ordering_time = mode_time[&Mode::Gpda] + mode_time[&Mode::SourceOnly] + mode_time[&Mode::DannLike];
    let v = if complete { method_ordering(&acc) } else { verdict(false, "reference runs incomplete") };
    record("6", "method ordering", Some(Duration::from_secs(1800)), ordering_time, v);
    let ablation_time = mode_time[&Mode::Gpda] + mode_time[&Mode::NoCs] + mode_time[&Mode::NoGraph] + mode_time[&Mode::Baseline];
    let v = if complete { ablation_trend(&acc) } else { verdict(false, "reference runs incomplete") };
    record("7", "ablation trend", None, ablation_time, v);

    let (v, t) = timed(|| determinism(dir.path()));
    record("8", "determinism", None, t, v);

    match timed(digits) {
        (Some(v), t) => report("9", "MNIST→USPS ordering", false, t, &v),
        (None, _) => println!("criterion 9 (optional) MNIST→USPS ordering: SKIPPED (GPDA_DIGITS_DIR not set)"),
    }

    println!("per-seed final target accuracy:");
    for mode in Mode::ALL {
        let a: Vec<String> = runs
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| format!("{:.2}", 100.0 * r.final_accuracy))
            .collect();
        println!("  {:<12} {}", mode.name(), a.join(" "));
    }

    if failed.is_empty() {
        println!("acceptance: all gating criteria passed");
    } else {
        println!("acceptance: failed criteria {}", failed.join(", "));
        std::process::exit(1);
    }
}
