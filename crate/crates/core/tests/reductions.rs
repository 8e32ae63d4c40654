mod common;

use common::*;
use probekd::distill::{
    kd_mixture, loss_label_smooth, loss_logit_kd, loss_probe_kd, loss_supervised,
    objective_loss_grad, FeatureTarget, KdWeights, LogitTarget, Method, ObjectiveBatch,
    ObjectiveParams, RunRecord,
};
use probekd::metrics::{aggregate, evaluate_logits, GroupKey};
use probekd::numkern::{kl_divergence, softmax, DenseMatrix, Parameters, ProbVec};
use probekd::optim::{AdamW, AdamWConfig};
use proptest::prelude::*;
use rand::Rng;

fn trajectory(
    mut params: ObjectiveParams<f64>,
    batch: &ObjectiveBatch<f64>,
    w: &KdWeights,
) -> Vec<Vec<f64>> {
    let mut opt = AdamW::new(&params, AdamWConfig { lr: 0.05, ..AdamWConfig::default() });
    (0..10)
        .map(|_| {
            let (_, g) = objective_loss_grad(&params, batch, w).unwrap();
            opt.step(&mut params, &g).unwrap();
            params.flat()
        })
        .collect()
}

fn with_logits(batch: &ObjectiveBatch<f64>, logits: LogitTarget<f64>) -> ObjectiveBatch<f64> {
    ObjectiveBatch {
        logits,
        ..batch.clone()
    }
}

fn assert_close_paths(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) {
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() <= tol, "{p} vs {q}");
        }
    }
}

#[test]
fn logit_kd_at_zero_alpha_is_supervised() {
    for seed in 0..10 {
        let (params, batch, w) = objective_instance(Method::LogitKd, seed);
        let w = KdWeights { alpha: 0.0, ..w };
        let gold = with_logits(&batch, LogitTarget::Gold);
        let l1 = objective_loss_grad(&params, &batch, &w).unwrap().0.total;
        let l0 = objective_loss_grad(&params, &gold, &w).unwrap().0.total;
        assert!((l1 - l0).abs() < 1e-7);
        assert_close_paths(&trajectory(params.clone(), &batch, &w), &trajectory(params, &gold, &w), 1e-7);
    }
}

#[test]
fn label_smoothing_at_zero_eps_is_supervised() {
    for seed in 0..10 {
        let (params, batch, w) = objective_instance(Method::Supervised, seed);
        let smooth = with_logits(&batch, LogitTarget::Smoothed { eps: 0.0 });
        let l1 = objective_loss_grad(&params, &smooth, &w).unwrap().0.total;
        let l0 = objective_loss_grad(&params, &batch, &w).unwrap().0.total;
        assert!((l1 - l0).abs() < 1e-7);
        assert_close_paths(&trajectory(params.clone(), &smooth, &w), &trajectory(params, &batch, &w), 1e-7);
    }
}

#[test]
fn one_hot_probe_rows_at_unit_tau_are_cross_entropy() {
    for seed in 0..10 {
        let (params, batch, w) = objective_instance(Method::Supervised, seed);
        let w = KdWeights { tau: 1.0, tau_squared_scaling: false, ..w };
        let rows = batch.labels.iter().map(|&y| ProbVec::one_hot(C, y).unwrap()).collect();
        let probe = with_logits(&batch, LogitTarget::Probe(rows));
        let l1 = objective_loss_grad(&params, &probe, &w).unwrap().0.total;
        let l0 = objective_loss_grad(&params, &batch, &w).unwrap().0.total;
        assert!((l1 - l0).abs() < 1e-7, "{l1} vs {l0}");
        assert_close_paths(&trajectory(params.clone(), &probe, &w), &trajectory(params, &batch, &w), 1e-7);
    }
}

#[test]
fn loss_is_linear_in_alpha() {
    let mut r = rng(9);
    for _ in 0..20 {
        let z = normals(&mut r, 5, 2.0);
        let p = prob_row(&mut r, 5);
        let y = r.random_range(0..5);
        let at = |alpha: f64| kd_mixture(&z, &p, y, &KdWeights { alpha, ..KdWeights::default() }).unwrap().loss;
        let (l0, l1) = (at(0.0), at(1.0));
        for alpha in [0.1, 0.35, 0.7, 0.9] {
            assert!((at(alpha) - ((1.0 - alpha) * l0 + alpha * l1)).abs() < 1e-12);
        }
    }
}

#[test]
fn every_objective_is_non_negative() {
    for method in Method::ALL {
        for seed in 0..20 {
            let (params, batch, w) = objective_instance(method, 1000 + seed);
            let parts = objective_loss_grad(&params, &batch, &w).unwrap().0;
            assert!(parts.total >= 0.0 && parts.logit_term >= 0.0 && parts.feature_term >= 0.0);
        }
    }
}

#[test]
fn matched_logit_kd_has_zero_kl() {
    let z = [7.0f64, -1.0, 0.5, 2.0, -3.0];
    let w = KdWeights::default();
    let kd = loss_logit_kd(&z, &z, 0, &w).unwrap();
    let ce = loss_supervised(&z, 0).unwrap();
    assert!((kd.loss - (1.0 - w.alpha) * ce.loss).abs() < 1e-12);
    let p = softmax(&z, 2.0).unwrap();
    assert_eq!(kl_divergence(&p, &z, 2.0).unwrap().loss, 0.0);
}

#[test]
fn uniform_probe_row_is_matched_by_uniform_logits() {
    let w = KdWeights { alpha: 1.0, ..KdWeights::default() };
    let g = loss_probe_kd(&[0.0f64; 4], &ProbVec::uniform(4), 2, &w).unwrap().grad;
    assert!(g.iter().all(|x| x.abs() < 1e-12));
}

#[test]
fn one_hot_probe_row_is_tempered_cross_entropy() {
    let z = [1.0f64, -0.5, 2.5];
    let w = KdWeights { alpha: 1.0, tau: 2.0, ..KdWeights::default() };
    let kd = loss_probe_kd(&z, &ProbVec::one_hot(3, 1).unwrap(), 1, &w).unwrap().loss;
    let tempered: Vec<f64> = z.iter().map(|v| v / 2.0).collect();
    assert!((kd - loss_supervised(&tempered, 1).unwrap().loss).abs() < 1e-12);
}

#[test]
fn label_smoothing_limits() {
    let z = [0.3f64, 1.0, -2.0, 0.0];
    let u: Vec<f64> = (0..4).map(|y| loss_label_smooth(&z, y, 1.0).unwrap().loss).collect();
    assert!(u.windows(2).all(|p| (p[0] - p[1]).abs() < 1e-12));
    assert!((loss_label_smooth(&[0.0f64; 4], 3, 0.1).unwrap().loss - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn feature_and_patient_terms_vanish_when_matched() {
    // zero hidden layer against a zero teacher layer
    let (mut params, batch, w) = objective_instance(Method::FeatureKd, 3);
    params.student.hidden.weight = DenseMatrix::zeros(DS, M);
    params.student.hidden.bias = vec![0.0; DS];
    let b = batch.labels.len();
    let zero = ObjectiveBatch {
        features: FeatureTarget::Single(DenseMatrix::zeros(b, D)),
        ..batch
    };
    assert_eq!(objective_loss_grad(&params, &zero, &w).unwrap().0.feature_term, 0.0);

    // teacher layers that are positive multiples of M_ℓ·a
    let (params, batch, w) = objective_instance(Method::PatientKd, 4);
    let a = params.student.forward(&batch.inputs).unwrap().hidden;
    let layers = params
        .projections
        .iter()
        .zip([0.5, 3.0])
        .map(|(p, s)| p.apply(&a).unwrap().map(|v| v * s))
        .collect();
    let matched = ObjectiveBatch {
        features: FeatureTarget::Patient { layers, beta: 1.0 },
        ..batch
    };
    assert!(objective_loss_grad(&params, &matched, &w).unwrap().0.feature_term < 1e-20);
}

#[test]
fn feature_kd_at_zero_alpha_is_supervised() {
    let (params, batch, w) = objective_instance(Method::FeatureKd, 5);
    let w = KdWeights { alpha: 0.0, ..w };
    let plain = ObjectiveBatch { features: FeatureTarget::None, ..batch.clone() };
    let a = objective_loss_grad(&params, &batch, &w).unwrap();
    let b = objective_loss_grad(&params, &plain, &w).unwrap();
    assert!((a.0.total - b.0.total).abs() < 1e-12);
    assert_eq!(a.1.student.flat(), b.1.student.flat());
}

#[test]
fn empty_patient_set_is_rejected() {
    let (params, batch, w) = objective_instance(Method::PatientKd, 6);
    let empty = ObjectiveBatch {
        features: FeatureTarget::Patient { layers: vec![], beta: 1.0 },
        ..batch
    };
    assert!(objective_loss_grad(&params, &empty, &w).is_err());
}

fn record(method: &str, fraction: f64, acc: f64, conf: f64) -> RunRecord {
    RunRecord {
        method: method.into(),
        fraction,
        accuracy: acc,
        mean_confidence: conf,
        calibration_gap: conf - acc,
        n_classes: 3,
        ..RunRecord::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_shift_and_temperature(z in prop::collection::vec(-20.0f64..20.0, 2..8), shift in -50.0f64..50.0, tau in 0.2f64..5.0) {
        let base = softmax(&z, tau).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let scaled: Vec<f64> = z.iter().map(|v| v / tau).collect();
        for (a, b) in base.as_slice().iter().zip(softmax(&shifted, tau).unwrap().as_slice()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in base.as_slice().iter().zip(softmax(&scaled, 1.0).unwrap().as_slice()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_of_a_distribution_with_itself_is_zero(z in prop::collection::vec(-10.0f64..10.0, 2..8), tau in 0.5f64..4.0) {
        let p = softmax(&z, tau).unwrap();
        prop_assert!(kl_divergence(&p, &z, tau).unwrap().loss < 1e-7);
    }

    #[test]
    fn evaluation_ignores_example_order(rows in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 3), 0u32..3), 1..30), seed in 0u64..1000) {
        let logits = DenseMatrix::from_rows(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>()).unwrap();
        let labels: Vec<u32> = rows.iter().map(|r| r.1).collect();
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut r = rng(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let a = evaluate_logits(&logits, &labels).unwrap();
        let shuffled: Vec<u32> = order.iter().map(|&i| labels[i]).collect();
        let b = evaluate_logits(&logits.select_rows(&order), &shuffled).unwrap();
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert!((a.mean_confidence - b.mean_confidence).abs() < 1e-12);
        prop_assert!(a.mean_confidence >= 1.0 / 3.0 - 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a.calibration_gap));
    }

    #[test]
    fn sharpening_raises_confidence_not_accuracy(rows in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 4), 0u32..4), 1..30), sharp in 0.1f64..1.0) {
        let logits = DenseMatrix::from_rows(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>()).unwrap();
        let labels: Vec<u32> = rows.iter().map(|r| r.1).collect();
        let a = evaluate_logits(&logits, &labels).unwrap();
        let b = evaluate_logits(&logits.map(|v| v / sharp), &labels).unwrap();
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert!(b.mean_confidence >= a.mean_confidence - 1e-12);
    }

    #[test]
    fn aggregation_is_associative(accs in prop::collection::vec((0usize..3, 0.0f64..1.0), 2..20), split in 1usize..19) {
        let names = ["a", "b", "c"];
        let recs: Vec<RunRecord> = accs.iter().map(|&(m, acc)| record(names[m], 0.5, acc, 0.7)).collect();
        let split = split.min(recs.len() - 1);
        let (left, right) = recs.split_at(split);
        let whole = aggregate(&recs, &[GroupKey::Method]).unwrap();
        let l = aggregate(left, &[GroupKey::Method]).unwrap();
        let r = aggregate(right, &[GroupKey::Method]).unwrap();
        for row in &whole.rows {
            let key = row.keys[0].1.as_str();
            let part = |t: &probekd::metrics::AggregateTable| t.find(&[key]).map(|g| (g.n_runs as f64, g.accuracy.mean));
            let (n1, m1) = part(&l).unwrap_or((0.0, 0.0));
            let (n2, m2) = part(&r).unwrap_or((0.0, 0.0));
            prop_assert!(((n1 * m1 + n2 * m2) / (n1 + n2) - row.accuracy.mean).abs() < 1e-12);
        }
    }
}
