//! Simulate a teacher, write its hidden-state cache and read it back.
//!
//!     cargo run --example generate_cache -- [out.hsc]

use probekd::cache::HiddenStateCache;
use probekd::teachsim::{generate, teacher_readout_accuracy, TeacherSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "teacher.hsc".into());
    let spec = TeacherSpec { seed: 7, ..TeacherSpec::default() };
    let cache = generate(&spec, 1000)?;
    let bytes = cache.to_bytes()?;
    std::fs::write(&out, &bytes)?;

    let back = HiddenStateCache::from_bytes(&std::fs::read(&out)?)?;
    println!(
        "{out}: {} examples, {} layers x {} dims, {} classes, {} bytes",
        back.n_examples(),
        back.n_layers,
        back.hidden_dim,
        back.n_classes,
        bytes.len()
    );
    println!("digest {}", back.digest()?);
    println!("teacher readout accuracy {:.3}", teacher_readout_accuracy(&back));
    Ok(())
}
