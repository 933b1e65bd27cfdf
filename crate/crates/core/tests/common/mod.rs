//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::BTreeMap;

use anchorgcd::autodiff::Tensor;
use anchorgcd::losses::Batch;
use anchorgcd::model::{Model, ModelConfig};
use anchorgcd::rng::seeded;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Central differences of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a−n| / max(|a|, |n|, 1e-3)` over coordinates.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = seeded(seed, 100);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut r)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn tiny_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        input_dim: 3,
        encoder_hidden: vec![5],
        feature_dim: 4,
        projection_hidden: vec![5],
        projection_dim: 3,
        num_classes: 3,
        relu_output: false,
        freeze_encoder_except_last: false,
    };
    Model::new(cfg, &mut seeded(seed, 3)).unwrap()
}

/// `b` samples in `input_dim` with a mix of labeled and unlabeled rows.
pub fn random_batch(b: usize, input_dim: usize, classes: usize, seed: u64) -> Batch {
    let mut r = seeded(seed, 101);
    let view1 = gaussian_matrix(b, input_dim, seed ^ 0x11);
    let view2 = gaussian_matrix(b, input_dim, seed ^ 0x22);
    let labels = (0..b)
        .map(|i| if i % 2 == 0 { Some(r.random_range(0..classes)) } else { None })
        .collect();
    Batch { view1, view2, labels }
}

/// Cluster accuracy by trying every permutation of cluster ids.
pub fn brute_force_acc(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    fn permute(perm: &mut Vec<usize>, at: usize, best: &mut usize, pred: &[usize], truth: &[usize]) {
        if at == perm.len() {
            let hits = pred.iter().zip(truth).filter(|(p, t)| perm[**p] == **t).count();
            *best = (*best).max(hits);
            return;
        }
        for i in at..perm.len() {
            perm.swap(at, i);
            permute(perm, at + 1, best, pred, truth);
            perm.swap(at, i);
        }
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut best, pred, truth);
    best as f64 / pred.len() as f64
}

pub struct DasOracleConfig {
    pub omega: f64,
    pub gamma: f64,
    pub beta: f64,
    pub k_fraction: f64,
    pub eta_override: Option<usize>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Smallest integer `m` with `m ≥ x`, treating values within 1e-9 above an
/// integer as that integer.
fn ceil_tolerant(x: f64) -> usize {
    let mut m = 0usize;
    while (m as f64) < x - 1e-9 {
        m += 1;
    }
    m
}

/// Full selection by exhaustive sorting: anchors per new class as row
/// indices, most confident first.
pub fn das_oracle(
    points: &[Vec<f64>],
    probs: &[Vec<f64>],
    new_classes: &[usize],
    cfg: &DasOracleConfig,
) -> (BTreeMap<usize, Vec<usize>>, usize) {
    let n = points.len();
    let assign: Vec<usize> = probs
        .iter()
        .map(|p| {
            let mut best = 0;
            for j in 1..p.len() {
                if p[j] > p[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let conf: Vec<f64> = probs.iter().map(|p| p.iter().cloned().fold(f64::MIN, f64::max)).collect();
    let clusters: Vec<Vec<usize>> = new_classes
        .iter()
        .map(|&c| (0..n).filter(|&i| assign[i] == c).collect())
        .collect();
    let all: Vec<usize> = clusters.iter().flatten().copied().collect();
    if all.is_empty() {
        return (BTreeMap::new(), 0);
    }
    let mean = all.iter().map(|&i| conf[i]).sum::<f64>() / all.len() as f64;
    let max = all.iter().map(|&i| conf[i]).fold(f64::MIN, f64::max);
    let t = mean + (max - mean) * cfg.omega;
    let mut s: Vec<usize> = clusters
        .iter()
        .map(|c| c.iter().filter(|&&i| conf[i] > t).count())
        .collect();
    s.sort();
    let eta = cfg.eta_override.unwrap_or_else(|| {
        let rank = ceil_tolerant(cfg.gamma * s.len() as f64).max(1).min(s.len());
        s[rank - 1].max(1)
    });

    let mut out = BTreeMap::new();
    for (ci, c) in clusters.iter().enumerate() {
        if c.is_empty() {
            continue;
        }
        let m = c.len();
        let peak = if m == 1 {
            c[0]
        } else {
            let k = ((cfg.k_fraction * m as f64).round() as usize).max(1).min(m - 1);
            let dbar: Vec<f64> = c
                .iter()
                .map(|&i| {
                    let mut d: Vec<f64> = c.iter().filter(|&&j| j != i).map(|&j| dist(&points[i], &points[j])).collect();
                    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    d[..k].iter().sum::<f64>() / k as f64
                })
                .collect();
            let mut best = 0;
            for q in 1..m {
                if dbar[q] < dbar[best] {
                    best = q;
                }
            }
            c[best]
        };
        let size = ceil_tolerant(cfg.beta * m as f64).max(1).min(m);
        let mut rest: Vec<usize> = c.iter().copied().filter(|&i| i != peak).collect();
        rest.sort_by(|&a, &b| {
            dist(&points[peak], &points[a])
                .partial_cmp(&dist(&points[peak], &points[b]))
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut cand = vec![peak];
        cand.extend(rest.into_iter().take(size - 1));
        cand.sort_by(|&a, &b| conf[b].partial_cmp(&conf[a]).unwrap().then(a.cmp(&b)));
        cand.truncate(eta);
        out.insert(new_classes[ci], cand);
    }
    (out, eta)
}

use anchorgcd::autodiff::{Tape, Var};
use anchorgcd::losses::{self, LossConfig};

/// Stacked-view logits of `model` on `batch`, turned into teacher targets.
pub fn teacher_at(model: &Model, batch: &Batch, tau_teacher: f64) -> Tensor {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let x = Tensor::matrix(
        2 * batch.len(),
        batch.view1.cols(),
        [batch.view1.data(), batch.view2.data()].concat(),
    )
    .unwrap();
    let x = tape.leaf(x);
    let fwd = model.forward(&mut tape, &vars, x).unwrap();
    losses::teacher_targets(tape.value(fwd.logits), tau_teacher).unwrap()
}

/// Total loss and its tape gradient at `params`, teacher held fixed.
pub fn model_loss(model: &Model, params: &[f64], batch: &Batch, cfg: &LossConfig, teacher: &Tensor) -> (f64, Vec<f64>) {
    let mut m = model.clone();
    m.load_flat(params).unwrap();
    let mut tape = Tape::new();
    let vars = m.register(&mut tape);
    let terms = losses::total_loss_with_teacher(&mut tape, &m, &vars, batch, cfg, 1.0, Some(teacher)).unwrap();
    let grads = tape.backward(terms.total).unwrap();
    let mut flat = Vec::new();
    for v in vars.all() {
        flat.extend_from_slice(grads.wrt(v).data());
    }
    (terms.breakdown.total, flat)
}

/// Max relative error of the tape gradient of `build(leaf)` against
/// central differences in every input coordinate.
pub fn leaf_check(input: &Tensor, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let eval = |data: &[f64]| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(input.shape().to_vec(), data.to_vec()).unwrap());
        let out = build(&mut tape, x);
        let g = tape.backward(out).unwrap();
        (tape.value(out).item(), g.wrt(x).into_data())
    };
    let (_, analytic) = eval(input.data());
    let numeric = fd_gradient(|p| eval(p).0, input.data(), 1e-5);
    max_rel_error(&analytic, &numeric)
}

pub const LOSS_NAMES: [&str; 6] = [
    "unsup_contrastive",
    "sup_contrastive",
    "ce_supervised",
    "self_distill",
    "mean_entropy",
    "total_through_model",
];

/// Max relative gradient error of each loss on one seeded batch, in the
/// order of [`LOSS_NAMES`].
pub fn gradient_errors(seed: u64) -> [f64; 6] {
    let mut r = seeded(seed, 102);
    let (b, d, c) = (4, 3, 3);
    let cfg = LossConfig::default();
    let z1 = gaussian_matrix(b, d, seed ^ 1);
    let z2 = gaussian_matrix(b, d, seed ^ 2);
    let both = Tensor::matrix(2 * b, d, [z1.data(), z2.data()].concat()).unwrap();
    let unsup = leaf_check(&both, |t, x| {
        let u = t.l2_normalize_rows(x).unwrap();
        let a = t.gather_rows(u, &(0..b).collect::<Vec<_>>()).unwrap();
        let bb = t.gather_rows(u, &(b..2 * b).collect::<Vec<_>>()).unwrap();
        losses::unsup_contrastive(t, a, bb, cfg.tau_unsup).unwrap()
    });

    let n = 6;
    let mut labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
    labels[1] = labels[0];
    let zs = gaussian_matrix(n, d, seed ^ 3);
    let sup = leaf_check(&zs, |t, x| {
        let u = t.l2_normalize_rows(x).unwrap();
        losses::sup_contrastive(t, u, &labels, cfg.tau_sup).unwrap().loss
    });

    let logits = gaussian_matrix(n, c, seed ^ 4);
    let ys: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let ce = leaf_check(&logits, |t, x| {
        let lp = t.log_softmax_rows(x, 1.0 / cfg.tau_student).unwrap();
        losses::ce_supervised(t, lp, &ys).unwrap()
    });

    let targets = losses::teacher_targets(&gaussian_matrix(n, c, seed ^ 5), 0.07).unwrap();
    let sd = leaf_check(&logits, |t, x| {
        losses::self_distill(t, x, &targets, cfg.tau_student, cfg.entropy_weight).unwrap().loss
    });

    let ent = leaf_check(&logits, |t, x| {
        let p = t.softmax_rows(x, 1.0 / cfg.tau_student).unwrap();
        losses::mean_entropy(t, p).unwrap()
    });

    let model = tiny_model(seed);
    let batch = random_batch(5, 3, 3, seed);
    let teacher = teacher_at(&model, &batch, 0.07);
    let theta = model.flatten();
    let (_, analytic) = model_loss(&model, &theta, &batch, &cfg, &teacher);
    let numeric = fd_gradient(|p| model_loss(&model, p, &batch, &cfg, &teacher).0, &theta, 1e-5);
    let total = max_rel_error(&analytic, &numeric);

    [unsup, sup, ce, sd, ent, total]
}

/// Points on a small integer grid with coarse probabilities, so distance
/// and confidence ties are common.
pub fn random_das_instance(seed: u64, max_cluster: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>) {
    let mut r = seeded(seed, 103);
    let classes = 4;
    let new_classes = vec![2, 3];
    let n = r.random_range(2..=2 * max_cluster);
    let mut points = Vec::new();
    let mut probs = Vec::new();
    let mut sizes = [0usize; 4];
    while points.len() < n {
        let mut w: Vec<f64> = (0..classes).map(|_| r.random_range(1..=6) as f64).collect();
        let top = (0..classes).fold(0, |b, j| if w[j] > w[b] { j } else { b });
        if sizes[top] >= max_cluster {
            w[top] = 0.0;
            continue;
        }
        sizes[top] += 1;
        let s: f64 = w.iter().sum();
        probs.push(w.iter().map(|v| v / s).collect());
        points.push((0..3).map(|_| r.random_range(-3..=3) as f64).collect());
    }
    (points, probs, new_classes)
}

pub fn library_das(
    points: &[Vec<f64>],
    probs: &[Vec<f64>],
    new_classes: &[usize],
    cfg: &DasOracleConfig,
) -> (BTreeMap<usize, Vec<usize>>, usize) {
    use anchorgcd::das::{select_anchors, ClusterState, DasConfig, NeighborRule};
    let state = ClusterState::new(
        Tensor::from_rows(points).unwrap(),
        Tensor::from_rows(probs).unwrap(),
        (0..points.len()).collect(),
    )
    .unwrap();
    let config = DasConfig {
        omega: cfg.omega,
        gamma: cfg.gamma,
        beta: cfg.beta,
        k: NeighborRule::Fraction(cfg.k_fraction),
        alpha: 1,
        eta_override: cfg.eta_override,
    };
    let sel = select_anchors(&state, new_classes, &config, 0).unwrap();
    (sel.anchors.by_class, sel.eta)
}

use anchorgcd::objective::Quadratic;

/// `½θᵀAθ` with `A = Q·diag(eigs)·Qᵀ` for a seeded random rotation `Q`.
pub fn quadratic_with_spectrum(eigs: &[f64], seed: u64) -> Quadratic {
    let n = eigs.len();
    let g = gaussian_matrix(n, n, seed);
    let q = nalgebra::DMatrix::from_row_slice(n, n, g.data()).qr().q();
    let a = &q * nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(eigs)) * q.transpose();
    let a = (&a + a.transpose()) * 0.5;
    Quadratic::new(n, a.transpose().as_slice().to_vec()).unwrap()
}

/// Symmetric `GᵀG/n − shift·I` for a seeded Gaussian `G`, plus its
/// eigenvalues from a dense solver.
pub fn wishart_quadratic(n: usize, shift: f64, seed: u64) -> (Quadratic, Vec<f64>) {
    let g = gaussian_matrix(n, n, seed);
    let g = nalgebra::DMatrix::from_row_slice(n, n, g.data());
    let a = g.transpose() * &g / n as f64 - nalgebra::DMatrix::identity(n, n) * shift;
    let eig = nalgebra::SymmetricEigen::new(a.clone()).eigenvalues.as_slice().to_vec();
    (Quadratic::new(n, a.transpose().as_slice().to_vec()).unwrap(), eig)
}
