//! Label-free probe over per-choice hidden states.

use probekd::cache::split_train_eval;
use probekd::probes::{train_ccs_probe, ChoiceStates, ProbeTrainConfig};
use probekd::teachsim::{generate_per_choice, TeacherSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cache = generate_per_choice(&TeacherSpec::default(), 600)?;
    let (train, eval) = split_train_eval(&cache.labels, 0.3, 0)?;
    let states = ChoiceStates::from_cache(&cache)?;
    let config = ProbeTrainConfig { ccs_restarts: 4, ..ProbeTrainConfig::default() };
    let fit = train_ccs_probe(&states, &train, &config)?;
    for (i, l) in fit.restart_losses.iter().enumerate() {
        let mark = if i == fit.chosen_restart { "*" } else { " " };
        println!("restart {i}{mark} loss {l:.4}");
    }
    println!(
        "{} choices, eval accuracy {:.3} (chance {:.3})",
        states.n_choices(),
        fit.model.accuracy(&cache, &eval)?,
        1.0 / states.n_choices() as f64
    );
    Ok(())
}
