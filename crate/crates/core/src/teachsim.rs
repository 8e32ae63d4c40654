//! Synthetic teacher with a planted latent-vs-output gap.
//!
//! Every example draws a label `y` and a clean class score
//! `s = μ·onehot(y) + N(0, I_C)`. Each teacher layer stores `B_ℓ·s` plus
//! small isotropic noise, where `B_ℓ` has orthonormal columns, so the label
//! is linearly recoverable from the hidden states. The teacher's output head
//! sees the same score through much larger "decoder" noise, and the student
//! sees a fixed random projection of it.
//!
//! Each noise source draws from its own RNG sub-stream, so changing one
//! noise level leaves every other field of the cache byte-identical.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cache::HiddenStateCache;
use crate::numkern::{argmax, DenseMatrix};
use crate::optim::SeededRng;

pub const TEACHER_SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TeachSimError {
    #[error("invalid teacher spec: {0}")]
    InvalidSpec(String),
}

/// Parameters of the generative model. Serialized as a JSON document; missing
/// keys take their defaults and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSpec {
    pub version: u32,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub input_dim: usize,
    /// μ: margin of the true class in the clean score.
    pub signal_strength: f64,
    /// σ_layer: per-layer hidden-state noise.
    pub layer_noise: f64,
    /// σ_head: output-head noise added before the readout.
    pub head_noise: f64,
    /// σ_x: noise on the student's view of the clean score.
    pub student_noise: f64,
    /// Multiplier on the teacher logits; values > 1 make the head overconfident.
    pub head_scale: f64,
    /// κ: how strongly a per-choice state is shifted toward its own choice.
    pub choice_strength: f64,
    pub seed: u64,
}

impl Default for TeacherSpec {
    /// Desk-scale noisy-head configuration.
    fn default() -> Self {
        Self {
            version: TEACHER_SPEC_VERSION,
            n_layers: 4,
            hidden_dim: 32,
            n_classes: 5,
            input_dim: 16,
            signal_strength: 2.0,
            layer_noise: 0.1,
            head_noise: 5.0,
            student_noise: 0.5,
            head_scale: 1.0,
            choice_strength: 2.0,
            seed: 0,
        }
    }
}

pub const DEFAULT_N: usize = 2000;

impl TeacherSpec {
    pub fn validate(&self) -> Result<(), TeachSimError> {
        let bad = |msg: String| Err(TeachSimError::InvalidSpec(msg));
        if self.version != TEACHER_SPEC_VERSION {
            return bad(format!("unsupported spec version {}", self.version));
        }
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.n_layers == 0 || self.input_dim == 0 {
            return bad("n_layers and input_dim must be positive".into());
        }
        if self.hidden_dim < self.n_classes {
            return bad(format!(
                "hidden_dim {} < n_classes {}: no orthonormal embedding exists",
                self.hidden_dim, self.n_classes
            ));
        }
        if !(self.signal_strength > 0.0) {
            return bad("signal_strength must be positive".into());
        }
        for (name, v) in [
            ("layer_noise", self.layer_noise),
            ("head_noise", self.head_noise),
            ("student_noise", self.student_noise),
            ("choice_strength", self.choice_strength),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.head_scale > 0.0) || !self.head_scale.is_finite() {
            return bad("head_scale must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, TeachSimError> {
        let spec: TeacherSpec = serde_json::from_str(text)
            .map_err(|e| TeachSimError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

fn gaussian(rng: &mut SeededRng) -> f64 {
    rng.sample(StandardNormal)
}

/// `d × C` matrix with orthonormal columns (Q of a Gaussian matrix).
fn orthonormal_embedding(d: usize, c: usize, rng: &mut SeededRng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, c, |_, _| gaussian(rng));
    g.qr().q()
}

struct Planted {
    labels: Vec<u32>,
    scores: Vec<Vec<f64>>,
    embeddings: Vec<DMatrix<f64>>,
}

fn plant(spec: &TeacherSpec, n: usize) -> Planted {
    let root = SeededRng::new(spec.seed);
    let c = spec.n_classes;
    let mut label_rng = root.split("labels");
    let labels: Vec<u32> = (0..n).map(|_| label_rng.random_range(0..c as u32)).collect();
    let mut score_rng = root.split("score");
    let scores = labels
        .iter()
        .map(|&y| {
            (0..c)
                .map(|k| {
                    let z = gaussian(&mut score_rng);
                    if k == y as usize {
                        spec.signal_strength + z
                    } else {
                        z
                    }
                })
                .collect()
        })
        .collect();
    let mut embed_rng = root.split("embed");
    let embeddings = (0..spec.n_layers)
        .map(|_| orthonormal_embedding(spec.hidden_dim, c, &mut embed_rng))
        .collect();
    Planted {
        labels,
        scores,
        embeddings,
    }
}

fn embed_layers(
    embeddings: &[DMatrix<f64>],
    score: &[f64],
    noise: f64,
    rng: &mut SeededRng,
    out: &mut [f32],
) {
    let d = embeddings[0].nrows();
    for (l, b) in embeddings.iter().enumerate() {
        for r in 0..d {
            let clean: f64 = (0..score.len()).map(|k| b[(r, k)] * score[k]).sum();
            out[l * d + r] = (clean + noise * gaussian(rng)) as f32;
        }
    }
}

fn generate_inner(
    spec: &TeacherSpec,
    n: usize,
    per_choice: bool,
) -> Result<HiddenStateCache, TeachSimError> {
    spec.validate()?;
    if n < spec.n_classes {
        return Err(TeachSimError::InvalidSpec(format!(
            "n = {n} is smaller than n_classes = {}",
            spec.n_classes
        )));
    }
    let (l, d, c, m) = (spec.n_layers, spec.hidden_dim, spec.n_classes, spec.input_dim);
    let root = SeededRng::new(spec.seed);
    let planted = plant(spec, n);

    let mut layer_rng = root.split("layer_noise");
    let mut features = DenseMatrix::zeros(n, l * d);
    for (i, s) in planted.scores.iter().enumerate() {
        embed_layers(
            &planted.embeddings,
            s,
            spec.layer_noise,
            &mut layer_rng,
            features.row_mut(i),
        );
    }

    let mut head_rng = root.split("head_noise");
    let mut teacher_logits = DenseMatrix::zeros(n, c);
    for (i, s) in planted.scores.iter().enumerate() {
        for (k, z) in teacher_logits.row_mut(i).iter_mut().enumerate() {
            *z = (spec.head_scale * (s[k] + spec.head_noise * gaussian(&mut head_rng))) as f32;
        }
    }

    let mut proj_rng = root.split("student_projection");
    let projection: Vec<f64> = (0..m * c).map(|_| gaussian(&mut proj_rng)).collect();
    let mut input_rng = root.split("student_noise");
    let mut student_inputs = DenseMatrix::zeros(n, m);
    for (i, s) in planted.scores.iter().enumerate() {
        for (r, x) in student_inputs.row_mut(i).iter_mut().enumerate() {
            let clean: f64 = (0..c).map(|k| projection[r * c + k] * s[k]).sum();
            *x = (clean + spec.student_noise * gaussian(&mut input_rng)) as f32;
        }
    }

    let per_choice = per_choice.then(|| {
        let mut choice_rng = root.split("choice_noise");
        let mut pc = DenseMatrix::zeros(n * c, l * d);
        let mut shifted = vec![0.0; c];
        for (i, s) in planted.scores.iter().enumerate() {
            for choice in 0..c {
                shifted.copy_from_slice(s);
                shifted[choice] += spec.choice_strength;
                embed_layers(
                    &planted.embeddings,
                    &shifted,
                    spec.layer_noise,
                    &mut choice_rng,
                    pc.row_mut(i * c + choice),
                );
            }
        }
        pc
    });

    Ok(HiddenStateCache {
        n_layers: l,
        hidden_dim: d,
        n_classes: c,
        features,
        labels: planted.labels,
        teacher_logits,
        student_inputs,
        per_choice,
    })
}

/// Draws `n` examples from the planted teacher.
pub fn generate(spec: &TeacherSpec, n: usize) -> Result<HiddenStateCache, TeachSimError> {
    generate_inner(spec, n, false)
}

/// As [`generate`], additionally storing one hidden state per answer choice,
/// `h_c = B·(s + κ·onehot(c)) + noise`.
pub fn generate_per_choice(
    spec: &TeacherSpec,
    n: usize,
) -> Result<HiddenStateCache, TeachSimError> {
    generate_inner(spec, n, true)
}

/// The orthonormal per-layer embeddings used for `spec` (for diagnostics and
/// tests that check the planted geometry).
pub fn layer_embeddings(spec: &TeacherSpec) -> Vec<DenseMatrix<f64>> {
    plant(spec, 0)
        .embeddings
        .into_iter()
        .map(|b| {
            let mut m = DenseMatrix::zeros(b.nrows(), b.ncols());
            for r in 0..b.nrows() {
                for k in 0..b.ncols() {
                    m.set(r, k, b[(r, k)]);
                }
            }
            m
        })
        .collect()
}

/// Fraction of examples whose teacher argmax equals the label.
pub fn teacher_readout_accuracy(cache: &HiddenStateCache) -> f64 {
    teacher_readout_accuracy_on(cache, &(0..cache.n_examples()).collect::<Vec<_>>())
}

pub fn teacher_readout_accuracy_on(cache: &HiddenStateCache, indices: &[usize]) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let hits = indices
        .iter()
        .filter(|&&i| argmax(cache.teacher_logits.row(i)) == cache.labels[i] as usize)
        .count();
    hits as f64 / indices.len() as f64
}
