//! Train one student per distillation method on the same cache and seed.

use probekd::cache::split_train_eval;
use probekd::cli::distill_one;
use probekd::distill::{DistillSpec, Method};
use probekd::probes::{train_probe, ProbeKind, ProbeTrainConfig};
use probekd::teachsim::{generate, TeacherSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cache = generate(&TeacherSpec::default(), 2000)?;
    let (train, eval) = split_train_eval(&cache.labels, 0.3, 0)?;
    let probe = train_probe(&cache, &train, &eval, ProbeKind::Mlp, &ProbeTrainConfig::default())?;
    println!("{:<14} {:>8} {:>8} {:>8}", "method", "acc", "conf", "gap");
    for method in Method::ALL {
        let spec = DistillSpec::for_method(method, 42);
        let rec = distill_one(&cache, Some(&probe.model), &train, &eval, 1.0, &spec)?;
        println!(
            "{:<14} {:>8.3} {:>8.3} {:>+8.3}",
            rec.method_label(),
            rec.accuracy,
            rec.mean_confidence,
            rec.calibration_gap
        );
    }
    Ok(())
}
