//! Student training: the probe-distillation objective and the baselines it
//! is compared against.

mod loss;
mod train;

pub use loss::{
    kd_mixture, loss_label_smooth, loss_logit_kd, loss_probe_kd, loss_supervised, normalize_rows,
    objective_loss_grad, FeatureTarget, KdWeights, LogitTarget, LossParts, ObjectiveBatch,
    ObjectiveParams, Projection,
};
pub use train::{train_student, RunRecord, StudentView, Supervision};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::CacheError;
use crate::metrics::MetricsError;
use crate::numkern::{DenseMatrix, Mlp, MlpForward, NumError};
use crate::optim::OptimError;

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Numeric(#[from] NumError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Supervised,
    LabelSmooth,
    LogitKd,
    FeatureKd,
    PatientKd,
    ProbeKd,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Supervised,
        Method::LabelSmooth,
        Method::LogitKd,
        Method::FeatureKd,
        Method::PatientKd,
        Method::ProbeKd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::LabelSmooth => "label_smooth",
            Method::LogitKd => "logit_kd",
            Method::FeatureKd => "feature_kd",
            Method::PatientKd => "patient_kd",
            Method::ProbeKd => "probe_kd",
        }
    }

    pub fn uses_teacher_logits(self) -> bool {
        matches!(self, Method::LogitKd | Method::PatientKd)
    }

    pub fn uses_features(self) -> bool {
        matches!(self, Method::FeatureKd | Method::PatientKd)
    }

    pub fn uses_probe(self) -> bool {
        self == Method::ProbeKd
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = DistillError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| DistillError::Config(format!("unknown method {s:?}")))
    }
}

/// Learning rate used with a pretrained full-size student.
pub const FULL_SCALE_LR: f64 = 2e-5;
pub const DESK_SCALE_LR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSpec {
    pub version: u32,
    pub method: Method,
    pub tau: f64,
    pub alpha: f64,
    pub smoothing_eps: f64,
    /// Teacher layer matched by feature distillation; `None` means the last.
    pub feature_layer: Option<usize>,
    /// Layers matched by patient distillation; `None` means every other
    /// layer, ending at the last.
    pub patient_layers: Option<Vec<usize>>,
    pub patient_beta: f64,
    pub tau_squared_scaling: bool,
    pub ce_at_tau: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub student_hidden: usize,
    pub seed: u64,
}

impl Default for DistillSpec {
    fn default() -> Self {
        Self {
            version: 1,
            method: Method::Supervised,
            tau: 2.0,
            alpha: 0.7,
            smoothing_eps: 0.1,
            feature_layer: None,
            patient_layers: None,
            patient_beta: 1.0,
            tau_squared_scaling: false,
            ce_at_tau: false,
            epochs: 3,
            lr: DESK_SCALE_LR,
            batch_size: 16,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            student_hidden: 32,
            seed: 0,
        }
    }
}

impl DistillSpec {
    pub fn for_method(method: Method, seed: u64) -> Self {
        Self {
            method,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: String| Err(DistillError::Config(m));
        if self.version != 1 {
            return bad(format!("unsupported distill spec version {}", self.version));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.smoothing_eps) {
            return bad(format!("smoothing_eps must lie in [0, 1], got {}", self.smoothing_eps));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must lie in [0, 1], got {}", self.warmup_fraction));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.student_hidden == 0 {
            return bad("epochs, batch_size and student_hidden must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.patient_beta >= 0.0) {
            return bad("lr must be positive; weight_decay and patient_beta non-negative".into());
        }
        if matches!(&self.patient_layers, Some(l) if l.is_empty()) {
            return bad("patient layer set is empty".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> KdWeights {
        KdWeights {
            alpha: self.alpha,
            tau: self.tau,
            tau_squared_scaling: self.tau_squared_scaling,
            ce_at_tau: self.ce_at_tau,
        }
    }

    pub fn resolve_feature_layer(&self, n_layers: usize) -> Result<usize, DistillError> {
        let l = self.feature_layer.unwrap_or(n_layers.saturating_sub(1));
        if l >= n_layers {
            return Err(DistillError::Config(format!(
                "feature layer {l} out of range for {n_layers} layers"
            )));
        }
        Ok(l)
    }

    pub fn resolve_patient_layers(&self, n_layers: usize) -> Result<Vec<usize>, DistillError> {
        let layers = match &self.patient_layers {
            Some(l) => l.clone(),
            None => {
                let mut v: Vec<usize> = (0..n_layers).rev().step_by(2).collect();
                v.reverse();
                v
            }
        };
        if layers.is_empty() {
            return Err(DistillError::Config("patient layer set is empty".into()));
        }
        if let Some(&l) = layers.iter().find(|&&l| l >= n_layers) {
            return Err(DistillError::Config(format!(
                "patient layer {l} out of range for {n_layers} layers"
            )));
        }
        Ok(layers)
    }
}

/// Two-layer student over the raw student inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub net: Mlp<f32>,
}

impl StudentModel {
    pub fn n_classes(&self) -> usize {
        self.net.outputs()
    }

    pub fn hidden_dim(&self) -> usize {
        self.net.width()
    }

    /// Logits plus the hidden activation of the same pass.
    pub fn forward(&self, x: &DenseMatrix<f32>) -> Result<MlpForward<f32>, NumError> {
        self.net.forward(x)
    }

    pub fn logits(&self, x: &DenseMatrix<f32>) -> Result<DenseMatrix<f32>, NumError> {
        Ok(self.net.forward(x)?.output)
    }
}
