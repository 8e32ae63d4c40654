//! Probes over cached teacher hidden states: supervised logistic and MLP
//! probes, the label-free CCS probe, their soft-label export, and the `PKP1`
//! file format.

mod format;
mod model;
mod train;

pub use format::{decode_probe, encode_probe, probe_digest, read_probe, write_probe, PKP_MAGIC, PKP_VERSION};
pub use model::{
    LayerSelection, ProbeKind, ProbeModel, ProbeNet, Standardizer, DEFAULT_SOFT_LABEL_TAU,
};
pub use train::{
    ccs_loss_and_grad, train_ccs_probe, train_ccs_probe_on_cache, train_probe,
    train_supervised_probe, CcsFit, CcsLoss, ChoiceStates, ProbeTrainConfig, TrainedProbe,
    FULL_SCALE_MLP_HIDDEN,
};

use crate::cache::HiddenStateCache;
use crate::numkern::{softmax, NumError, ProbVec};
use crate::optim::OptimError;

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("training labels are all class {0}")]
    DegenerateLabels(u32),
    #[error("cache has no per-choice states")]
    MissingPerChoice,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("probe format: {0}")]
    Format(String),
    #[error(transparent)]
    Numeric(#[from] NumError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Soft labels for every example of a cache, tagged with the temperature
/// they were produced at.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabels {
    pub tau: f64,
    pub rows: Vec<ProbVec>,
    /// CCS rows whose sigmoid mass fell below the floor and were replaced by
    /// the uniform distribution.
    pub degenerate_rows: usize,
}

impl SoftLabels {
    pub fn n_classes(&self) -> usize {
        self.rows.first().map_or(0, ProbVec::len)
    }

    pub fn mean_entropy(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(ProbVec::entropy).sum::<f64>() / self.rows.len() as f64
    }
}

const CCS_MASS_FLOOR: f64 = 1e-6;

/// `softmax(P(h)/τ)` for each example of `cache`.
///
/// CCS probes produce one sigmoid per choice; these are normalized to sum to
/// one and then tempered in log space, `softmax(log q / τ)`.
pub fn probe_soft_labels(
    probe: &ProbeModel,
    cache: &HiddenStateCache,
    tau: f64,
) -> Result<SoftLabels, ProbeError> {
    let all: Vec<usize> = (0..cache.n_examples()).collect();
    let scores = probe.scores(cache, &all)?;
    let mut degenerate = 0;
    let rows = match probe.kind() {
        ProbeKind::Ccs => scores
            .iter_rows()
            .map(|s| {
                let p: Vec<f64> = s.iter().map(|&x| 1.0 / (1.0 + (-(x as f64)).exp())).collect();
                let mass: f64 = p.iter().sum();
                if mass < CCS_MASS_FLOOR {
                    degenerate += 1;
                    softmax(&vec![0.0f64; p.len()], tau)
                } else {
                    // log of a zero sigmoid would be -inf; clamp to a finite floor
                    let logq: Vec<f64> = p.iter().map(|&q| (q / mass).max(1e-300).ln()).collect();
                    softmax(&logq, tau)
                }
            })
            .collect::<Result<Vec<_>, _>>()?,
        _ => scores
            .iter_rows()
            .map(|s| softmax(s, tau))
            .collect::<Result<Vec<_>, _>>()?,
    };
    if degenerate > 0 {
        log::warn!("{degenerate} CCS rows had near-zero sigmoid mass; emitted uniform rows");
    }
    Ok(SoftLabels {
        tau,
        rows,
        degenerate_rows: degenerate,
    })
}
