use std::time::Instant;

use probekd::cache::split_train_eval;
use probekd::cli::distill_one;
use probekd::distill::{DistillSpec, Method};
use probekd::probes::{
    encode_probe, probe_soft_labels, train_ccs_probe, train_probe, ChoiceStates, ProbeKind,
    ProbeTrainConfig,
};
use probekd::teachsim::{generate, generate_per_choice, TeacherSpec};

#[test]
fn supervised_student_separates_a_noiseless_cache() {
    let spec = TeacherSpec {
        signal_strength: 10.0,
        layer_noise: 0.0,
        head_noise: 0.0,
        student_noise: 0.0,
        ..TeacherSpec::default()
    };
    let cache = generate(&spec, 2000).unwrap();
    let (train, eval) = split_train_eval(&cache.labels, 0.3, 0).unwrap();
    let rec = distill_one(&cache, None, &train, &eval, 1.0, &DistillSpec::for_method(Method::Supervised, 42)).unwrap();
    assert!(rec.accuracy >= 0.99, "accuracy {}", rec.accuracy);
}

#[test]
fn all_methods_run_quickly_and_reproducibly() {
    let cache = generate(&TeacherSpec::default(), 2000).unwrap();
    let (train, eval) = split_train_eval(&cache.labels, 0.3, 0).unwrap();
    let start = Instant::now();
    let probe = train_probe(&cache, &train, &eval, ProbeKind::Mlp, &ProbeTrainConfig::default()).unwrap();
    let mut first = Vec::new();
    for m in Method::ALL {
        let rec = distill_one(&cache, Some(&probe.model), &train, &eval, 1.0, &DistillSpec::for_method(m, 42)).unwrap();
        assert!(rec.accuracy > 0.2, "{m}: {}", rec.accuracy);
        assert!(rec.loss_curve.iter().all(|l| l.is_finite() && *l >= 0.0));
        first.push(serde_json::to_string(&rec).unwrap());
    }
    assert!(start.elapsed().as_secs() < 60, "took {:?}", start.elapsed());
    for (m, want) in Method::ALL.into_iter().zip(&first) {
        let rec = distill_one(&cache, Some(&probe.model), &train, &eval, 1.0, &DistillSpec::for_method(m, 42)).unwrap();
        assert_eq!(&serde_json::to_string(&rec).unwrap(), want);
    }
}

#[test]
fn ccs_never_reads_labels() {
    let spec = TeacherSpec {
        n_classes: 4,
        ..TeacherSpec::default()
    };
    let cache = generate_per_choice(&spec, 300).unwrap();
    let mut scrambled = cache.clone();
    scrambled.labels.iter_mut().for_each(|y| *y = (*y + 1) % 4);
    let config = ProbeTrainConfig {
        epochs: 3,
        ccs_restarts: 2,
        ..ProbeTrainConfig::default()
    };
    let train: Vec<usize> = (0..200).collect();
    let a = train_ccs_probe(&ChoiceStates::from_cache(&cache).unwrap(), &train, &config).unwrap();
    let b = train_ccs_probe(&ChoiceStates::from_cache(&scrambled).unwrap(), &train, &config).unwrap();
    assert_eq!(encode_probe(&a.model).unwrap(), encode_probe(&b.model).unwrap());
    assert_eq!(a.restart_losses, b.restart_losses);
}

#[test]
fn probe_soft_labels_are_distributions_at_the_probe_tau() {
    let cache = generate_per_choice(&TeacherSpec::default(), 300).unwrap();
    let (train, eval) = split_train_eval(&cache.labels, 0.3, 0).unwrap();
    let config = ProbeTrainConfig {
        epochs: 2,
        ccs_restarts: 1,
        ..ProbeTrainConfig::default()
    };
    for kind in ProbeKind::ALL {
        let fit = train_probe(&cache, &train, &eval, kind, &config).unwrap();
        let soft = probe_soft_labels(&fit.model, &cache, fit.model.tau).unwrap();
        assert_eq!(soft.rows.len(), cache.n_examples());
        assert_eq!(soft.tau, 2.0);
        for r in &soft.rows {
            assert!((r.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
