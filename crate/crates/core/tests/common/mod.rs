#![allow(dead_code)]

use probekd::distill::{FeatureTarget, KdWeights, LogitTarget, Method, ObjectiveBatch, ObjectiveParams, Projection};
use probekd::numkern::{softmax, DenseMatrix, Mlp, ProbVec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

pub fn matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix<f64> {
    DenseMatrix::from_vec(rows, cols, normals(rng, rows * cols, scale)).unwrap()
}

pub fn prob_row(rng: &mut impl Rng, c: usize) -> ProbVec {
    softmax(&normals(rng, c, 1.5), 1.0).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, floored so two near-zero vectors compare equal.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-6)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let up = f(&probe);
            probe[i] = orig - STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

pub const M: usize = 6;
pub const DS: usize = 5;
pub const C: usize = 4;
pub const D: usize = 7;

/// A random composite-objective instance for `method`.
pub fn objective_instance(method: Method, seed: u64) -> (ObjectiveParams<f64>, ObjectiveBatch<f64>, KdWeights) {
    let mut r = rng(seed);
    let b = 3 + (seed as usize % 3);
    let n_proj = match method {
        Method::FeatureKd => 1,
        Method::PatientKd => 2,
        _ => 0,
    };
    let params = ObjectiveParams {
        student: Mlp::<f64>::init(M, DS, C, &mut r),
        projections: (0..n_proj).map(|_| Projection::<f64>::init(DS, D, &mut r)).collect(),
    };
    let logits = match method {
        Method::Supervised | Method::FeatureKd => LogitTarget::Gold,
        Method::LabelSmooth => LogitTarget::Smoothed { eps: 0.1 },
        Method::LogitKd | Method::PatientKd => LogitTarget::Teacher(matrix(&mut r, b, C, 2.0)),
        Method::ProbeKd => LogitTarget::Probe((0..b).map(|_| prob_row(&mut r, C)).collect()),
    };
    let features = match method {
        Method::FeatureKd => FeatureTarget::Single(matrix(&mut r, b, D, 1.0)),
        Method::PatientKd => FeatureTarget::Patient {
            layers: (0..2).map(|_| matrix(&mut r, b, D, 1.0)).collect(),
            beta: 1.0,
        },
        _ => FeatureTarget::None,
    };
    let batch = ObjectiveBatch {
        inputs: matrix(&mut r, b, M, 1.0),
        labels: (0..b).map(|_| r.random_range(0..C)).collect(),
        logits,
        features,
    };
    let w = KdWeights {
        alpha: r.random_range(0.1..0.9),
        tau: r.random_range(1.0..4.0),
        tau_squared_scaling: seed % 2 == 0,
        ce_at_tau: false,
    };
    (params, batch, w)
}
