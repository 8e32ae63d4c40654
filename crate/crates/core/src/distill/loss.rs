//! Per-example distillation losses over student logits, and the batch-level
//! composite objective that adds the hidden-state matching terms.

use serde::{Deserialize, Serialize};

use crate::numkern::{
    cross_entropy, kl_divergence, mse, soft_cross_entropy, softmax, DenseMatrix, LossGrad, Mlp,
    NumError, Parameters, ProbVec, Real,
};

/// Loss weights shared by every method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdWeights {
    pub alpha: f64,
    pub tau: f64,
    /// Multiply the KL term by τ².
    pub tau_squared_scaling: bool,
    /// Evaluate the gold-label CE on `z/τ` instead of `z`.
    pub ce_at_tau: bool,
}

impl Default for KdWeights {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            tau: 2.0,
            tau_squared_scaling: false,
            ce_at_tau: false,
        }
    }
}

fn combine<T: Real>(a: f64, x: LossGrad<Vec<T>>, b: f64, y: LossGrad<Vec<T>>) -> LossGrad<Vec<T>> {
    LossGrad {
        loss: a * x.loss + b * y.loss,
        grad: x
            .grad
            .iter()
            .zip(&y.grad)
            .map(|(&g, &h)| T::of(a * g.f64() + b * h.f64()))
            .collect(),
    }
}

/// Plain cross-entropy against the gold label.
pub fn loss_supervised<T: Real>(logits: &[T], label: usize) -> Result<LossGrad<Vec<T>>, NumError> {
    cross_entropy(logits, label)
}

/// Cross-entropy against `(1 − ε)·onehot(y) + ε/C`.
pub fn loss_label_smooth<T: Real>(
    logits: &[T],
    label: usize,
    eps: f64,
) -> Result<LossGrad<Vec<T>>, NumError> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(NumError::InvalidArgument(format!(
            "smoothing eps must lie in [0, 1], got {eps}"
        )));
    }
    let c = logits.len();
    if label >= c {
        return Err(NumError::InvalidArgument(format!(
            "label {label} out of range for {c} classes"
        )));
    }
    if eps == 0.0 {
        return cross_entropy(logits, label);
    }
    let target: Vec<f64> = (0..c)
        .map(|k| eps / c as f64 + if k == label { 1.0 - eps } else { 0.0 })
        .collect();
    soft_cross_entropy(&ProbVec::from_normalized(target), logits, 1.0)
}

fn gold_ce<T: Real>(logits: &[T], label: usize, w: &KdWeights) -> Result<LossGrad<Vec<T>>, NumError> {
    if w.ce_at_tau {
        soft_cross_entropy(&ProbVec::one_hot(logits.len(), label)?, logits, w.tau)
    } else {
        cross_entropy(logits, label)
    }
}

/// `α·KL(p_ref ‖ softmax(z/τ)) + (1 − α)·CE(y, z)`.
pub fn kd_mixture<T: Real>(
    logits: &[T],
    p_ref: &ProbVec,
    label: usize,
    w: &KdWeights,
) -> Result<LossGrad<Vec<T>>, NumError> {
    if !(0.0..=1.0).contains(&w.alpha) {
        return Err(NumError::InvalidArgument(format!(
            "alpha must lie in [0, 1], got {}",
            w.alpha
        )));
    }
    let ce = gold_ce(logits, label, w)?;
    if w.alpha == 0.0 {
        return Ok(ce);
    }
    let kl = kl_divergence(p_ref, logits, w.tau)?;
    let scale = if w.tau_squared_scaling { w.tau * w.tau } else { 1.0 };
    Ok(combine(w.alpha * scale, kl, 1.0 - w.alpha, ce))
}

/// Logit distillation: reference is the teacher's `softmax(z_T/τ)`.
pub fn loss_logit_kd<T: Real>(
    logits: &[T],
    teacher_logits: &[T],
    label: usize,
    w: &KdWeights,
) -> Result<LossGrad<Vec<T>>, NumError> {
    let p_t = softmax(teacher_logits, w.tau)?;
    kd_mixture(logits, &p_t, label, w)
}

/// Probe distillation: reference is a probe soft label produced at `τ`.
pub fn loss_probe_kd<T: Real>(
    logits: &[T],
    probe_row: &ProbVec,
    label: usize,
    w: &KdWeights,
) -> Result<LossGrad<Vec<T>>, NumError> {
    kd_mixture(logits, probe_row, label, w)
}

/// Bias-free linear map from the student hidden layer into a teacher layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T = f32> {
    /// `d_teacher × d_student`.
    pub weight: DenseMatrix<T>,
}

impl<T: Real> Projection<T> {
    pub fn init<R: rand::Rng + ?Sized>(student: usize, teacher: usize, rng: &mut R) -> Self {
        Self {
            weight: crate::numkern::Linear::<T>::init(student, teacher, rng).weight,
        }
    }

    pub fn apply(&self, a: &DenseMatrix<T>) -> Result<DenseMatrix<T>, NumError> {
        a.matmul_transposed(&self.weight)
    }

    pub fn cast<U: Real>(&self) -> Projection<U> {
        Projection {
            weight: self.weight.cast(),
        }
    }
}

impl<T: Real> Parameters<T> for Projection<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![self.weight.data()]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.weight.data_mut()]
    }
    fn decay_mask(&self) -> Vec<bool> {
        vec![true]
    }
}

/// Student network plus any projections trained jointly with it.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveParams<T = f32> {
    pub student: Mlp<T>,
    pub projections: Vec<Projection<T>>,
}

impl<T: Real> ObjectiveParams<T> {
    pub fn cast<U: Real>(&self) -> ObjectiveParams<U> {
        ObjectiveParams {
            student: self.student.cast(),
            projections: self.projections.iter().map(Projection::cast).collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            student: Mlp::zeros(self.student.inputs(), self.student.width(), self.student.outputs()),
            projections: self
                .projections
                .iter()
                .map(|p| Projection {
                    weight: DenseMatrix::zeros(p.weight.rows(), p.weight.cols()),
                })
                .collect(),
        }
    }
}

impl<T: Real> Parameters<T> for ObjectiveParams<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.student.tensors();
        for p in &self.projections {
            v.extend(p.tensors());
        }
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.student.tensors_mut();
        for p in &mut self.projections {
            v.extend(p.tensors_mut());
        }
        v
    }
    fn decay_mask(&self) -> Vec<bool> {
        let mut v = self.student.decay_mask();
        v.extend(std::iter::repeat_n(true, self.projections.len()));
        v
    }
}

/// What the logit-level part of the objective compares against.
#[derive(Debug, Clone)]
pub enum LogitTarget<T> {
    Gold,
    Smoothed { eps: f64 },
    /// Teacher logits, one row per batch example.
    Teacher(DenseMatrix<T>),
    /// Probe soft labels, one per batch example.
    Probe(Vec<ProbVec>),
}

/// Hidden-state matching term, if any.
#[derive(Debug, Clone)]
pub enum FeatureTarget<T> {
    None,
    /// `MSE(M·a, h)` against one teacher layer, weighted by α.
    Single(DenseMatrix<T>),
    /// `β · mean_ℓ MSE(normalize(M_ℓ·a), normalize(h_ℓ))`.
    Patient { layers: Vec<DenseMatrix<T>>, beta: f64 },
}

/// One minibatch of a composite objective.
#[derive(Debug, Clone)]
pub struct ObjectiveBatch<T> {
    pub inputs: DenseMatrix<T>,
    pub labels: Vec<usize>,
    pub logits: LogitTarget<T>,
    pub features: FeatureTarget<T>,
}

/// L2 row normalization, zero rows left unchanged. Returns norms too.
pub fn normalize_rows<T: Real>(v: &DenseMatrix<T>) -> (DenseMatrix<T>, Vec<f64>) {
    let mut out = v.clone();
    let mut norms = Vec::with_capacity(v.rows());
    for r in 0..v.rows() {
        let n = v.row(r).iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
        norms.push(n);
        if n > NORM_FLOOR {
            for x in out.row_mut(r) {
                *x = T::of(x.f64() / n);
            }
        }
    }
    (out, norms)
}

const NORM_FLOOR: f64 = 1e-12;

/// Backpropagates through [`normalize_rows`].
fn normalize_rows_backward<T: Real>(
    normalized: &DenseMatrix<T>,
    norms: &[f64],
    upstream: &DenseMatrix<T>,
) -> DenseMatrix<T> {
    let mut out = upstream.clone();
    for r in 0..upstream.rows() {
        let n = norms[r];
        if n <= NORM_FLOOR {
            continue;
        }
        let u = normalized.row(r);
        let g = upstream.row(r);
        let proj: f64 = u.iter().zip(g).map(|(a, b)| a.f64() * b.f64()).sum();
        for ((o, &ui), &gi) in out.row_mut(r).iter_mut().zip(u).zip(g) {
            *o = T::of((gi.f64() - ui.f64() * proj) / n);
        }
    }
    out
}

/// Loss components of one batch evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub logit_term: f64,
    pub feature_term: f64,
}

/// Mean loss over the batch and its gradient with respect to every
/// parameter in `params`.
pub fn objective_loss_grad<T: Real>(
    params: &ObjectiveParams<T>,
    batch: &ObjectiveBatch<T>,
    w: &KdWeights,
) -> Result<(LossParts, ObjectiveParams<T>), NumError> {
    let b = batch.labels.len();
    if b == 0 || batch.inputs.rows() != b {
        return Err(NumError::InvalidArgument(format!(
            "batch has {} inputs and {b} labels",
            batch.inputs.rows()
        )));
    }
    let fwd = params.student.forward(&batch.inputs)?;
    let c = params.student.outputs();
    // feature matching takes the α share; the gold term keeps 1 − α
    let logit_scale = match batch.features {
        FeatureTarget::Single(_) => 1.0 - w.alpha,
        _ => 1.0,
    };
    let mut d_logits = DenseMatrix::<T>::zeros(b, c);
    let mut logit_total = 0.0;
    for k in 0..b {
        let z = fwd.output.row(k);
        let y = batch.labels[k];
        let lg = match &batch.logits {
            LogitTarget::Gold => loss_supervised(z, y)?,
            LogitTarget::Smoothed { eps } => loss_label_smooth(z, y, *eps)?,
            LogitTarget::Teacher(t) => loss_logit_kd(z, t.row(k), y, w)?,
            LogitTarget::Probe(rows) => loss_probe_kd(z, &rows[k], y, w)?,
        };
        logit_total += logit_scale * lg.loss;
        for (d, g) in d_logits.row_mut(k).iter_mut().zip(lg.grad) {
            *d = T::of(logit_scale * g.f64() / b as f64);
        }
    }
    let logit_term = logit_total / b as f64;

    let mut grads = params.zeros_like();
    let mut feature_term = 0.0;
    let mut d_hidden: Option<DenseMatrix<T>> = None;
    let a = &fwd.hidden;
    let accumulate = |acc: &mut Option<DenseMatrix<T>>, g: DenseMatrix<T>| match acc {
        Some(m) => {
            for (x, y) in m.data_mut().iter_mut().zip(g.data()) {
                *x = T::of(x.f64() + y.f64());
            }
        }
        None => *acc = Some(g),
    };

    match &batch.features {
        FeatureTarget::None => {}
        FeatureTarget::Single(h) => {
            let proj = params.projections.first().ok_or_else(|| {
                NumError::InvalidArgument("feature objective needs one projection".into())
            })?;
            let v = proj.apply(a)?;
            let m = mse(&v, h)?;
            feature_term = w.alpha * m.loss;
            let dv = m.grad.map(|x| T::of(w.alpha * x.f64()));
            accumulate(&mut d_hidden, dv.matmul(&proj.weight)?);
            grads.projections[0].weight = dv.transposed_matmul(a)?;
        }
        FeatureTarget::Patient { layers, beta } => {
            if layers.is_empty() {
                return Err(NumError::InvalidArgument("empty patient layer set".into()));
            }
            if layers.len() != params.projections.len() {
                return Err(NumError::InvalidArgument(format!(
                    "{} patient layers but {} projections",
                    layers.len(),
                    params.projections.len()
                )));
            }
            let scale = beta / layers.len() as f64;
            for (l, h) in layers.iter().enumerate() {
                let proj = &params.projections[l];
                let v = proj.apply(a)?;
                let (u, norms) = normalize_rows(&v);
                let (t, _) = normalize_rows(h);
                let m = mse(&u, &t)?;
                feature_term += scale * m.loss;
                let du = m.grad.map(|x| T::of(scale * x.f64()));
                let dv = normalize_rows_backward(&u, &norms, &du);
                accumulate(&mut d_hidden, dv.matmul(&proj.weight)?);
                grads.projections[l].weight = dv.transposed_matmul(a)?;
            }
        }
    }

    let (g_student, _) = params
        .student
        .backward(&batch.inputs, &fwd, &d_logits, d_hidden.as_ref())?;
    grads.student = g_student;
    Ok((
        LossParts {
            total: logit_term + feature_term,
            logit_term,
            feature_term,
        },
        grads,
    ))
}
