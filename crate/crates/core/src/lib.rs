//! Distilling small students from probes trained on a teacher's hidden
//! states, with a synthetic teacher, the usual distillation baselines and a
//! sweep harness.

pub mod cache;
pub mod cli;
pub mod distill;
pub mod metrics;
pub mod numkern;
pub mod optim;
pub mod probes;
pub mod teachsim;
