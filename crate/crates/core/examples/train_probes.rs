//! Fit logistic and MLP probes on frozen teacher states and compare them
//! with the teacher's own readout.

use probekd::cache::split_train_eval;
use probekd::probes::{train_probe, ProbeKind, ProbeTrainConfig};
use probekd::teachsim::{generate, teacher_readout_accuracy_on, TeacherSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cache = generate(&TeacherSpec::default(), 2000)?;
    let (train, eval) = split_train_eval(&cache.labels, 0.3, 0)?;
    println!("teacher readout   eval {:.3}", teacher_readout_accuracy_on(&cache, &eval));
    for kind in [ProbeKind::Logistic, ProbeKind::Mlp] {
        let fit = train_probe(&cache, &train, &eval, kind, &ProbeTrainConfig::default())?;
        println!(
            "{:<8} probe    train {:.3}  eval {:.3}  loss {:.4}",
            kind.as_str(),
            fit.train_accuracy,
            fit.eval_accuracy,
            fit.final_loss
        );
    }
    Ok(())
}
