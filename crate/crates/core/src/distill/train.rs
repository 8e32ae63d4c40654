use serde::{Deserialize, Serialize};

use super::loss::{objective_loss_grad, FeatureTarget, LogitTarget, ObjectiveBatch, ObjectiveParams, Projection};
use super::{DistillError, DistillSpec, Method, StudentModel};
use crate::cache::HiddenStateCache;
use crate::metrics::evaluate;
use crate::numkern::{DenseMatrix, Mlp};
use crate::optim::{shuffled_batches, AdamW, AdamWConfig, LrSchedule, SeededRng};
use crate::probes::{ProbeKind, SoftLabels};

/// The teacher-side signal a student is trained against.
#[derive(Debug, Clone, Copy)]
pub enum Supervision<'a> {
    /// Gold labels only (supervised and label smoothing).
    Labels,
    /// The teacher's output logits stored in the cache.
    TeacherLogits,
    /// The teacher's per-layer hidden states stored in the cache (plus its
    /// logits for patient distillation).
    TeacherFeatures,
    /// Soft labels exported from a frozen probe.
    Probe {
        soft: &'a SoftLabels,
        kind: ProbeKind,
    },
}

impl Supervision<'_> {
    fn name(&self) -> &'static str {
        match self {
            Supervision::Labels => "labels",
            Supervision::TeacherLogits => "teacher logits",
            Supervision::TeacherFeatures => "teacher features",
            Supervision::Probe { .. } => "probe soft labels",
        }
    }
}

/// Everything a student run may read from the cache. Methods that do not
/// match hidden states get no teacher layers here.
#[derive(Debug)]
pub struct StudentView<'a> {
    method: Method,
    inputs: &'a DenseMatrix<f32>,
    labels: &'a [u32],
    teacher_logits: Option<&'a DenseMatrix<f32>>,
    soft: Option<&'a SoftLabels>,
    teacher_layers: Option<Vec<DenseMatrix<f32>>>,
    probe_kind: Option<ProbeKind>,
}

impl<'a> StudentView<'a> {
    pub fn new(
        cache: &'a HiddenStateCache,
        supervision: Supervision<'a>,
        spec: &DistillSpec,
    ) -> Result<Self, DistillError> {
        let method = spec.method;
        let expected = match method {
            Method::Supervised | Method::LabelSmooth => "labels",
            Method::LogitKd => "teacher logits",
            Method::FeatureKd | Method::PatientKd => "teacher features",
            Method::ProbeKd => "probe soft labels",
        };
        if supervision.name() != expected {
            return Err(DistillError::Config(format!(
                "{method} needs {expected} but was given {}",
                supervision.name()
            )));
        }
        let mut view = StudentView {
            method,
            inputs: &cache.student_inputs,
            labels: &cache.labels,
            teacher_logits: None,
            soft: None,
            teacher_layers: None,
            probe_kind: None,
        };
        if method.uses_teacher_logits() {
            view.teacher_logits = Some(&cache.teacher_logits);
        }
        if let Supervision::Probe { soft, kind } = supervision {
            if soft.tau != spec.tau {
                return Err(DistillError::Config(format!(
                    "probe soft labels were produced at tau {} but the spec uses tau {}",
                    soft.tau, spec.tau
                )));
            }
            if soft.rows.len() != cache.n_examples() || soft.n_classes() != cache.n_classes {
                return Err(DistillError::Config(format!(
                    "probe soft labels are {}x{} but the cache is {}x{}",
                    soft.rows.len(),
                    soft.n_classes(),
                    cache.n_examples(),
                    cache.n_classes
                )));
            }
            view.soft = Some(soft);
            view.probe_kind = Some(kind);
        }
        if method.uses_features() {
            let layers = match method {
                Method::FeatureKd => vec![spec.resolve_feature_layer(cache.n_layers)?],
                _ => spec.resolve_patient_layers(cache.n_layers)?,
            };
            view.teacher_layers = Some(
                layers
                    .into_iter()
                    .map(|l| cache.layer(l))
                    .collect::<Result<_, _>>()?,
            );
        }
        Ok(view)
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn teacher_layers(&self) -> Option<&[DenseMatrix<f32>]> {
        self.teacher_layers.as_deref()
    }

    pub fn teacher_logits(&self) -> Option<&DenseMatrix<f32>> {
        self.teacher_logits
    }

    fn batch(&self, rows: &[usize], spec: &DistillSpec) -> ObjectiveBatch<f32> {
        let logits = match self.method {
            Method::Supervised | Method::FeatureKd => LogitTarget::Gold,
            Method::LabelSmooth => LogitTarget::Smoothed {
                eps: spec.smoothing_eps,
            },
            Method::LogitKd | Method::PatientKd => {
                LogitTarget::Teacher(self.teacher_logits.expect("checked").select_rows(rows))
            }
            Method::ProbeKd => {
                let soft = self.soft.expect("checked");
                LogitTarget::Probe(rows.iter().map(|&i| soft.rows[i].clone()).collect())
            }
        };
        let features = match (self.method, &self.teacher_layers) {
            (Method::FeatureKd, Some(l)) => FeatureTarget::Single(l[0].select_rows(rows)),
            (Method::PatientKd, Some(l)) => FeatureTarget::Patient {
                layers: l.iter().map(|h| h.select_rows(rows)).collect(),
                beta: spec.patient_beta,
            },
            _ => FeatureTarget::None,
        };
        ObjectiveBatch {
            inputs: self.inputs.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i] as usize).collect(),
            logits,
            features,
        }
    }
}

/// Flat summary of one student run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub method: String,
    /// Probe kind for probe distillation.
    pub probe: Option<String>,
    pub fraction: f64,
    pub seed: u64,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub accuracy: f64,
    pub mean_confidence: f64,
    pub calibration_gap: f64,
    pub final_train_loss: f64,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

impl RunRecord {
    /// `probe_kd/mlp` for probe runs, the bare method name otherwise.
    pub fn method_label(&self) -> String {
        match &self.probe {
            Some(p) => format!("{}/{p}", self.method),
            None => self.method.clone(),
        }
    }
}

/// Trains a student on `train` and evaluates it on `eval`.
///
/// `record.fraction` is left at 1; callers that subsample set it.
pub fn train_student(
    cache: &HiddenStateCache,
    supervision: Supervision<'_>,
    train: &[usize],
    eval: &[usize],
    spec: &DistillSpec,
) -> Result<(StudentModel, RunRecord), DistillError> {
    spec.validate()?;
    if train.is_empty() {
        return Err(DistillError::Config("empty training split".into()));
    }
    let view = StudentView::new(cache, supervision, spec)?;
    let root = SeededRng::new(spec.seed);
    let mut init = root.split("student_init");
    let student = Mlp::init(cache.student_dim(), spec.student_hidden, cache.n_classes, &mut init);
    let mut proj_rng = root.split("projection_init");
    let projections = view
        .teacher_layers()
        .map(|ls| {
            ls.iter()
                .map(|h| Projection::init(spec.student_hidden, h.cols(), &mut proj_rng))
                .collect()
        })
        .unwrap_or_default();
    let mut params = ObjectiveParams {
        student,
        projections,
    };

    let per_epoch = train.len().div_ceil(spec.batch_size) as u64;
    let schedule = LrSchedule::new(spec.lr, spec.warmup_fraction, per_epoch * spec.epochs as u64);
    let mut opt = AdamW::new(
        &params,
        AdamWConfig {
            lr: spec.lr,
            weight_decay: spec.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let weights = spec.weights();
    let mut batch_rng = root.split("student_batches");
    let mut step = 0u64;
    let mut curve = Vec::with_capacity(spec.epochs);
    for _ in 0..spec.epochs {
        let mut total = 0.0;
        for batch in shuffled_batches(train.len(), spec.batch_size, &mut batch_rng) {
            let rows: Vec<usize> = batch.iter().map(|&b| train[b]).collect();
            let ob = view.batch(&rows, spec);
            let (parts, grads) = objective_loss_grad(&params, &ob, &weights)?;
            total += parts.total * rows.len() as f64;
            opt.set_lr(schedule.lr_at(step));
            opt.step(&mut params, &grads)?;
            step += 1;
        }
        curve.push(total / train.len() as f64);
    }

    let model = StudentModel { net: params.student };
    let report = evaluate(
        |idx: &[usize]| -> Result<DenseMatrix<f32>, DistillError> {
            Ok(model.logits(&cache.student_inputs.select_rows(idx))?)
        },
        &cache.labels,
        eval,
    )?;
    let record = RunRecord {
        method: spec.method.as_str().to_string(),
        probe: view.probe_kind.map(|k| k.as_str().to_string()),
        fraction: 1.0,
        seed: spec.seed,
        n_classes: cache.n_classes,
        n_train: train.len(),
        n_eval: eval.len(),
        accuracy: report.accuracy,
        mean_confidence: report.mean_confidence,
        calibration_gap: report.calibration_gap,
        final_train_loss: *curve.last().expect("at least one epoch"),
        loss_curve: curve,
    };
    Ok((model, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::ProbeKind;
    use crate::teachsim::{generate, TeacherSpec};

    fn small() -> HiddenStateCache {
        generate(&TeacherSpec::default(), 200).unwrap()
    }

    #[test]
    fn feature_access_follows_method() {
        let cache = small();
        let soft = SoftLabels {
            tau: 2.0,
            rows: vec![crate::numkern::ProbVec::uniform(cache.n_classes); cache.n_examples()],
            degenerate_rows: 0,
        };
        for m in Method::ALL {
            let sup = match m {
                Method::Supervised | Method::LabelSmooth => Supervision::Labels,
                Method::LogitKd => Supervision::TeacherLogits,
                Method::FeatureKd | Method::PatientKd => Supervision::TeacherFeatures,
                Method::ProbeKd => Supervision::Probe {
                    soft: &soft,
                    kind: ProbeKind::Mlp,
                },
            };
            let view = StudentView::new(&cache, sup, &DistillSpec::for_method(m, 0)).unwrap();
            assert_eq!(view.teacher_layers().is_some(), m.uses_features(), "{m}");
        }
    }

    #[test]
    fn mismatched_supervision_is_a_config_error() {
        let cache = small();
        let spec = DistillSpec::for_method(Method::ProbeKd, 0);
        let err = train_student(&cache, Supervision::Labels, &[0, 1], &[2], &spec).unwrap_err();
        assert!(err.to_string().contains("probe soft labels"), "{err}");
    }

    #[test]
    fn tau_mismatch_is_rejected() {
        let cache = small();
        let soft = SoftLabels {
            tau: 1.0,
            rows: vec![crate::numkern::ProbVec::uniform(cache.n_classes); cache.n_examples()],
            degenerate_rows: 0,
        };
        let spec = DistillSpec::for_method(Method::ProbeKd, 0);
        let sup = Supervision::Probe {
            soft: &soft,
            kind: ProbeKind::Logistic,
        };
        assert!(matches!(
            train_student(&cache, sup, &[0, 1], &[2], &spec),
            Err(DistillError::Config(_))
        ));
    }

    #[test]
    fn runs_are_deterministic() {
        let cache = small();
        let train: Vec<usize> = (0..150).collect();
        let eval: Vec<usize> = (150..200).collect();
        let spec = DistillSpec::for_method(Method::PatientKd, 7);
        let a = train_student(&cache, Supervision::TeacherFeatures, &train, &eval, &spec).unwrap();
        let b = train_student(&cache, Supervision::TeacherFeatures, &train, &eval, &spec).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(
            serde_json::to_string(&a.1).unwrap(),
            serde_json::to_string(&b.1).unwrap()
        );
    }
}
