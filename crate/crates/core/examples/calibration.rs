//! Calibration of an overconfident teacher head against a probe trained on
//! the same states, and of students distilled from each.

use probekd::cache::split_train_eval;
use probekd::cli::distill_one;
use probekd::distill::{DistillSpec, Method};
use probekd::metrics::evaluate_logits;
use probekd::probes::{train_probe, ProbeKind, ProbeTrainConfig};
use probekd::teachsim::{generate, TeacherSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let head_scale = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(5.0);
    let cache = generate(&TeacherSpec { head_scale, ..TeacherSpec::default() }, 2000)?;
    let (train, eval) = split_train_eval(&cache.labels, 0.3, 0)?;
    let gold: Vec<u32> = eval.iter().map(|&i| cache.labels[i]).collect();

    let teacher = evaluate_logits(&cache.teacher_logits.select_rows(&eval), &gold)?;
    let probe = train_probe(&cache, &train, &eval, ProbeKind::Mlp, &ProbeTrainConfig::default())?;
    let probed = evaluate_logits(&probe.model.scores(&cache, &eval)?, &gold)?;
    let row = |name: &str, acc: f64, conf: f64, gap: f64| println!("{name:<16} acc {acc:.3}  conf {conf:.3}  gap {gap:+.3}");
    row("teacher head", teacher.accuracy, teacher.mean_confidence, teacher.calibration_gap);
    row("mlp probe", probed.accuracy, probed.mean_confidence, probed.calibration_gap);
    for method in [Method::LogitKd, Method::ProbeKd] {
        let rec = distill_one(&cache, Some(&probe.model), &train, &eval, 1.0, &DistillSpec::for_method(method, 42))?;
        row(&format!("student {method}"), rec.accuracy, rec.mean_confidence, rec.calibration_gap);
    }
    Ok(())
}
