//! Oracles and fixtures shared by the integration tests and the acceptance
//! harness. Everything here is computed independently of the library's own
//! implementations of the same quantities.

#![allow(dead_code)]

use gpda::autodiff::Tape;
use gpda::data::{gen_synthetic_pda, SyntheticSpec};
use gpda::losses::{estimate_gamma, CentroidBank, ClassWeights};
use gpda::matrix::Matrix;
use gpda::models::{Architecture, GpdaNets, Parameters};
use gpda::training::{build_objective, train_step, Batch, Objective, TrainConfig, TrainState};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;

/// Everything needed to evaluate the full objective at a fixed point.
#[derive(Clone)]
pub struct GradFixture {
    pub config: TrainConfig,
    pub nets: GpdaNets<f64>,
    pub bank: CentroidBank<f64>,
    pub gamma: ClassWeights<f64>,
    pub batch: Batch<f64>,
    pub offset: usize,
}

/// Six source classes, three shared, networks no wider than 8, batches of
/// 6 + 6. A few real steps first so that pseudo-labels, graph edges and
/// stored centroids are all populated.
pub fn tiny_fixture(seed: u64) -> GradFixture {
    let spec = SyntheticSpec {
        per_class: 20,
        ..SyntheticSpec::reference(seed)
    };
    let task = gen_synthetic_pda(&spec).unwrap();
    let arch = Architecture {
        input_dim: 2,
        classes: 6,
        extractor: vec![8, 8],
        gcn: vec![8, 8],
        discriminator_hidden: vec![4],
    };
    let config = TrainConfig {
        batch_size: 6,
        learning_rate: 0.01,
        // Low enough that every target row is pseudo-labeled at this scale.
        pseudo_label_threshold: 0.2,
        seed,
        architecture: Some(arch.clone()),
        ..TrainConfig::default()
    };
    let nets = GpdaNets::init(arch, seed).unwrap();
    let mut state = TrainState::new(nets, &config, 100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let mut draw = || {
        let mut s: Vec<usize> = (0..task.source.len()).collect();
        s.shuffle(&mut rng);
        let s: Vec<usize> = (0..6).map(|k| s.iter().copied().find(|&i| task.source.labels[i] == k).unwrap()).collect();
        let mut t: Vec<usize> = (0..task.target.len()).collect();
        t.shuffle(&mut rng);
        t.truncate(6);
        Batch {
            source_inputs: task.source.samples.select_rows(&s),
            source_labels: s.iter().map(|&i| task.source.labels[i]).collect(),
            target_inputs: task.target.samples.select_rows(&t),
        }
    };
    for _ in 0..3 {
        let b = draw();
        train_step(&mut state, &config, &b).unwrap();
    }
    let probs = state.nets.source_probabilities(&task.target.samples).unwrap();
    let gamma = estimate_gamma(&probs, true).unwrap();
    GradFixture {
        batch: draw(),
        nets: state.nets,
        bank: state.bank,
        gamma,
        config,
        offset: 1 + (seed as usize % 5),
    }
}

/// Scalar terms of the objective: (total, L_D).
pub fn objective_terms(f: &GradFixture, nets: &GpdaNets<f64>, grl: f64) -> (f64, f64) {
    let mut tape = Tape::new();
    let mut bank = f.bank.clone();
    let o = build_objective(&mut tape, nets, &mut bank, &f.gamma, &f.config, &f.batch, grl, f.offset).unwrap();
    (tape.scalar(o.total), o.domain.map_or(0.0, |d| tape.scalar(d)))
}

/// Analytic gradients of the total, one matrix per parameter.
pub fn analytic_gradients(f: &GradFixture, grl: f64) -> Vec<Matrix<f64>> {
    let mut tape = Tape::new();
    let mut bank = f.bank.clone();
    let o: Objective = build_objective(&mut tape, &f.nets, &mut bank, &f.gamma, &f.config, &f.batch, grl, f.offset).unwrap();
    tape.backward(o.total).unwrap();
    o.params.iter().map(|&v| tape.grad(v).clone()).collect()
}

/// Central differences of `(total, L_D)` for every parameter entry.
pub fn numeric_gradients(f: &GradFixture) -> Vec<(Matrix<f64>, Matrix<f64>)> {
    let count = f.nets.param_count();
    let mut out = Vec::with_capacity(count);
    for p in 0..f.nets.params().len() {
        let shape = f.nets.params()[p].shape();
        let mut g_total = Matrix::zeros(shape.0, shape.1);
        let mut g_domain = Matrix::zeros(shape.0, shape.1);
        for idx in 0..shape.0 * shape.1 {
            let eval = |delta: f64| {
                let mut nets = f.nets.clone();
                nets.params_mut()[p].as_mut_slice()[idx] += delta;
                objective_terms(f, &nets, 1.0)
            };
            let (tp, dp) = eval(FD_EPS);
            let (tm, dm) = eval(-FD_EPS);
            g_total.as_mut_slice()[idx] = (tp - tm) / (2.0 * FD_EPS);
            g_domain.as_mut_slice()[idx] = (dp - dm) / (2.0 * FD_EPS);
        }
        out.push((g_total, g_domain));
    }
    out
}

/// `|a − n| / max(|a|, |n|, floor)`: relative where gradients are
/// appreciable, absolute (scaled by `1/floor`) where both are tiny.
pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Magnitude below which a gradient entry is compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// Largest relative error between analytic and numeric gradients of the
/// full objective. The reversal coefficient `grl` turns the adversarial
/// term's contribution to extractor and GCN parameters into `−grl·λ₁·∂L_D`;
/// the expected values are assembled from finite differences of the total
/// and of L_D alone.
pub fn gradcheck(f: &GradFixture, grl: f64) -> f64 {
    let analytic = analytic_gradients(f, grl);
    let numeric = numeric_gradients(f);
    let upstream = upstream_of_reversal(&f.nets);
    let lambda1 = f.config.lambda1;
    let mut worst: f64 = 0.0;
    for (p, (a, (nt, nd))) in analytic.iter().zip(&numeric).enumerate() {
        for ((&av, &tv), &dv) in a.as_slice().iter().zip(nt.as_slice()).zip(nd.as_slice()) {
            let expected = if upstream[p] { tv - (1.0 + grl) * lambda1 * dv } else { tv };
            worst = worst.max(rel_error(av, expected, REL_FLOOR));
        }
    }
    worst
}

/// Which parameters sit before the reversal (extractor and GCN).
pub fn upstream_of_reversal(nets: &GpdaNets<f64>) -> Vec<bool> {
    let e = nets.extractor.params().len();
    let g = nets.gcn.params().len();
    (0..nets.params().len()).map(|i| i < e + g).collect()
}

/// Random one-hot / unlabeled rows over `classes`.
pub fn random_labels(rng: &mut impl Rng, n: usize, classes: usize) -> Matrix<f64> {
    let mut y = Matrix::zeros(n, classes);
    for i in 0..n {
        match rng.random_range(0..=classes) {
            c if c < classes => y[(i, c)] = 1.0,
            _ => {}
        }
    }
    y
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Dense evaluation of `D̃^(-1/2) (Y·Yᵀ + I) D̃^(-1/2) X Θ` from explicit
/// matrices, no shortcuts.
pub fn dense_gcn(labels: &Matrix<f64>, x: &Matrix<f64>, theta: &Matrix<f64>) -> Matrix<f64> {
    let n = labels.rows();
    let mut a_tilde = vec![vec![0.0; n]; n];
    for (i, row) in a_tilde.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..labels.cols()).map(|c| labels[(i, c)] * labels[(j, c)]).sum::<f64>();
            if i == j {
                *v += 1.0;
            }
        }
    }
    let d_inv_sqrt: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let deg: f64 = a_tilde[i].iter().sum();
            (0..n).map(|j| if i == j { 1.0 / deg.sqrt() } else { 0.0 }).collect()
        })
        .collect();
    let mul = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let (r, k, c) = (a.len(), b.len(), b.first().map_or(0, |row| row.len()));
        (0..r).map(|i| (0..c).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect()).collect()
    };
    let to_vec = |m: &Matrix<f64>| -> Vec<Vec<f64>> { m.iter_rows().map(|r| r.to_vec()).collect() };
    let p = mul(&mul(&d_inv_sqrt, &a_tilde), &d_inv_sqrt);
    let z = mul(&mul(&p, &to_vec(x)), &to_vec(theta));
    Matrix::from_fn(n, theta.cols(), |i, j| z[i][j])
}
