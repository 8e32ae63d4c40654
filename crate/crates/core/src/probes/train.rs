use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{LayerSelection, ProbeKind, ProbeModel, ProbeNet, Standardizer};
use super::{ProbeError, DEFAULT_SOFT_LABEL_TAU};
use crate::cache::HiddenStateCache;
use crate::numkern::{cross_entropy, DenseMatrix, Linear, Mlp, Real};
use crate::optim::{shuffled_batches, AdamW, AdamWConfig, SeededRng};

/// Which unsupervised objective the CCS probe minimizes (besides the
/// consistency term `(Σ p_c − 1)²`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CcsLoss {
    /// `(1/C) Σ p_c (1 − p_c)`
    #[default]
    Confidence,
    /// `Var(p)` over the choices of an example.
    Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub mlp_hidden: usize,
    pub ccs_restarts: usize,
    pub ccs_loss: CcsLoss,
    pub layers: LayerSelection,
    /// Temperature recorded in the probe for soft-label export.
    pub tau: f64,
    pub seed: u64,
}

/// MLP width used at full teacher scale (L·d ≈ 10⁵).
pub const FULL_SCALE_MLP_HIDDEN: usize = 512;

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch_size: 128,
            weight_decay: 0.01,
            mlp_hidden: 64,
            ccs_restarts: 10,
            ccs_loss: CcsLoss::Confidence,
            layers: LayerSelection::All,
            tau: DEFAULT_SOFT_LABEL_TAU,
            seed: 0,
        }
    }
}

impl ProbeTrainConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.epochs == 0
            || self.batch_size == 0
            || self.mlp_hidden == 0
            || self.ccs_restarts == 0
            || !(self.lr > 0.0)
            || !(self.tau > 0.0)
            || !(self.weight_decay >= 0.0)
        {
            return Err(ProbeError::InvalidInput(format!(
                "probe config values must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// A trained probe and its accuracies on the split it was fitted with.
#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub model: ProbeModel,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    pub final_loss: f64,
}

fn empty_model(
    cache: &HiddenStateCache,
    layers: Vec<usize>,
    standardizer: Standardizer,
    net: ProbeNet,
    tau: f64,
) -> ProbeModel {
    ProbeModel {
        n_classes: cache.n_classes,
        source_layers: cache.n_layers,
        layer_dim: cache.hidden_dim,
        layers,
        standardizer,
        net,
        tau,
    }
}

/// Fits a logistic or MLP probe with cross-entropy on `train`; inputs are
/// standardized with train-split statistics.
pub fn train_supervised_probe(
    cache: &HiddenStateCache,
    train: &[usize],
    eval: &[usize],
    kind: ProbeKind,
    config: &ProbeTrainConfig,
) -> Result<TrainedProbe, ProbeError> {
    config.validate()?;
    if kind == ProbeKind::Ccs {
        return Err(ProbeError::InvalidInput(
            "CCS probes are trained with train_ccs_probe".into(),
        ));
    }
    if train.is_empty() {
        return Err(ProbeError::InvalidInput("empty training split".into()));
    }
    let first = cache.labels[train[0]];
    if train.iter().all(|&i| cache.labels[i] == first) {
        return Err(ProbeError::DegenerateLabels(first));
    }
    let layers = config.layers.resolve(cache.n_layers)?;
    let raw = super::model::select_layers(&cache.features, &layers, cache.hidden_dim);
    let standardizer = Standardizer::fit(&raw, train);
    let x = standardizer.apply(&raw);
    let dim = x.cols();
    let c = cache.n_classes;

    let root = SeededRng::new(config.seed);
    let mut init = root.split("probe_init");
    let net = match kind {
        ProbeKind::Logistic => ProbeNet::Logistic(Linear::init(dim, c, &mut init)),
        _ => ProbeNet::Mlp(Mlp::init(dim, config.mlp_hidden, c, &mut init)),
    };
    let mut model = empty_model(cache, layers, standardizer, net, config.tau);
    let mut batch_rng = root.split("probe_batches");
    let mut final_loss = 0.0;

    match &mut model.net {
        ProbeNet::Logistic(lin) => {
            let mut opt = AdamW::new(lin, config.adamw());
            for _ in 0..config.epochs {
                let mut total = 0.0;
                for batch in shuffled_batches(train.len(), config.batch_size, &mut batch_rng) {
                    let rows: Vec<usize> = batch.iter().map(|&b| train[b]).collect();
                    let xb = x.select_rows(&rows);
                    let logits = lin.forward(&xb)?;
                    let (loss, dlogits) = batch_ce(&logits, &cache.labels, &rows)?;
                    total += loss * rows.len() as f64;
                    let (grads, _) = lin.backward(&xb, &dlogits)?;
                    opt.step(lin, &grads)?;
                }
                final_loss = total / train.len() as f64;
            }
        }
        ProbeNet::Mlp(mlp) => {
            let mut opt = AdamW::new(mlp, config.adamw());
            for _ in 0..config.epochs {
                let mut total = 0.0;
                for batch in shuffled_batches(train.len(), config.batch_size, &mut batch_rng) {
                    let rows: Vec<usize> = batch.iter().map(|&b| train[b]).collect();
                    let xb = x.select_rows(&rows);
                    let fwd = mlp.forward(&xb)?;
                    let (loss, dlogits) = batch_ce(&fwd.output, &cache.labels, &rows)?;
                    total += loss * rows.len() as f64;
                    let (grads, _) = mlp.backward(&xb, &fwd, &dlogits, None)?;
                    opt.step(mlp, &grads)?;
                }
                final_loss = total / train.len() as f64;
            }
        }
        ProbeNet::Ccs(_) => unreachable!(),
    }

    let train_accuracy = model.accuracy(cache, train)?;
    let eval_accuracy = model.accuracy(cache, eval)?;
    Ok(TrainedProbe {
        model,
        train_accuracy,
        eval_accuracy,
        final_loss,
    })
}

/// Mean cross-entropy over a batch and its gradient w.r.t. the logits.
fn batch_ce<T: Real>(
    logits: &DenseMatrix<T>,
    labels: &[u32],
    rows: &[usize],
) -> Result<(f64, DenseMatrix<T>), ProbeError> {
    let b = rows.len() as f64;
    let mut grad = DenseMatrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (k, &i) in rows.iter().enumerate() {
        let ce = cross_entropy(logits.row(k), labels[i] as usize)?;
        total += ce.loss;
        for (g, v) in grad.row_mut(k).iter_mut().zip(ce.grad) {
            *g = T::of(v.f64() / b);
        }
    }
    Ok((total / b, grad))
}

/// Label-free view of per-choice hidden states. CCS training only ever sees
/// this type, so it cannot read labels.
#[derive(Debug, Clone)]
pub struct ChoiceStates {
    n_examples: usize,
    n_choices: usize,
    n_layers: usize,
    layer_dim: usize,
    states: DenseMatrix<f32>,
}

impl ChoiceStates {
    pub fn from_cache(cache: &HiddenStateCache) -> Result<Self, ProbeError> {
        let states = cache
            .per_choice
            .clone()
            .ok_or(ProbeError::MissingPerChoice)?;
        Ok(Self {
            n_examples: cache.n_examples(),
            n_choices: cache.n_classes,
            n_layers: cache.n_layers,
            layer_dim: cache.hidden_dim,
            states,
        })
    }

    pub fn n_examples(&self) -> usize {
        self.n_examples
    }

    pub fn n_choices(&self) -> usize {
        self.n_choices
    }

    fn rows_of(&self, examples: &[usize]) -> Vec<usize> {
        let c = self.n_choices;
        examples.iter().flat_map(|&i| (i * c)..(i + 1) * c).collect()
    }
}

/// Per-example CCS loss and `∂L/∂score` for one example's choice scores.
pub fn ccs_loss_and_grad<T: Real>(scores: &[T], loss: CcsLoss) -> (f64, Vec<f64>) {
    let c = scores.len() as f64;
    let p: Vec<f64> = scores
        .iter()
        .map(|&s| 1.0 / (1.0 + (-s.f64()).exp()))
        .collect();
    let sum: f64 = p.iter().sum();
    let cons = (sum - 1.0).powi(2);
    let (primary, dprimary): (f64, Vec<f64>) = match loss {
        CcsLoss::Confidence => (
            p.iter().map(|&q| q * (1.0 - q)).sum::<f64>() / c,
            p.iter().map(|&q| (1.0 - 2.0 * q) / c).collect(),
        ),
        CcsLoss::Variance => {
            let mean = sum / c;
            (
                p.iter().map(|&q| (q - mean).powi(2)).sum::<f64>() / c,
                p.iter().map(|&q| 2.0 * (q - mean) / c).collect(),
            )
        }
    };
    let grad = p
        .iter()
        .zip(dprimary)
        .map(|(&q, dp)| (dp + 2.0 * (sum - 1.0)) * q * (1.0 - q))
        .collect();
    (primary + cons, grad)
}

/// Result of unsupervised CCS fitting.
#[derive(Debug, Clone)]
pub struct CcsFit {
    pub model: ProbeModel,
    pub final_loss: f64,
    pub restart_losses: Vec<f64>,
    pub chosen_restart: usize,
}

fn ccs_epoch_loss(
    mlp: &Mlp<f32>,
    x: &DenseMatrix<f32>,
    c: usize,
    loss: CcsLoss,
) -> Result<f64, ProbeError> {
    let out = mlp.forward(x)?.output;
    let n = out.rows() / c;
    let mut total = 0.0;
    for i in 0..n {
        total += ccs_loss_and_grad(&out.data()[i * c..(i + 1) * c], loss).0;
    }
    Ok(total / n.max(1) as f64)
}

fn train_ccs_restart(
    x: &DenseMatrix<f32>,
    n_train: usize,
    c: usize,
    config: &ProbeTrainConfig,
    restart: usize,
) -> Result<(Mlp<f32>, f64), ProbeError> {
    let root = SeededRng::new(config.seed);
    let mut init = root.split_index("ccs_init", restart as u64);
    let mut batch_rng = root.split_index("ccs_batches", restart as u64);
    let mut mlp = Mlp::<f32>::init(x.cols(), config.mlp_hidden, 1, &mut init);
    let mut opt = AdamW::new(&mlp, config.adamw());
    for _ in 0..config.epochs {
        for batch in shuffled_batches(n_train, config.batch_size, &mut batch_rng) {
            let rows: Vec<usize> = batch.iter().flat_map(|&b| (b * c)..(b + 1) * c).collect();
            let xb = x.select_rows(&rows);
            let fwd = mlp.forward(&xb)?;
            let mut d_out = DenseMatrix::<f32>::zeros(rows.len(), 1);
            let scale = 1.0 / batch.len() as f64;
            for k in 0..batch.len() {
                let (_, g) = ccs_loss_and_grad(&fwd.output.data()[k * c..(k + 1) * c], config.ccs_loss);
                for (j, gj) in g.into_iter().enumerate() {
                    d_out.set(k * c + j, 0, (gj * scale) as f32);
                }
            }
            let (grads, _) = mlp.backward(&xb, &fwd, &d_out, None)?;
            opt.step(&mut mlp, &grads)?;
        }
    }
    let final_loss = ccs_epoch_loss(&mlp, x, c, config.ccs_loss)?;
    Ok((mlp, final_loss))
}

/// Fits a CCS probe on the per-choice states of `train` examples using only
/// the confidence and consistency objectives. Runs `config.ccs_restarts`
/// independent initializations and keeps the lowest final loss.
pub fn train_ccs_probe(
    states: &ChoiceStates,
    train: &[usize],
    config: &ProbeTrainConfig,
) -> Result<CcsFit, ProbeError> {
    config.validate()?;
    if train.is_empty() {
        return Err(ProbeError::InvalidInput("empty training split".into()));
    }
    let c = states.n_choices;
    let layers = config.layers.resolve(states.n_layers)?;
    let rows = states.rows_of(train);
    let raw = super::model::select_layers(&states.states.select_rows(&rows), &layers, states.layer_dim);
    let all_rows: Vec<usize> = (0..raw.rows()).collect();
    let standardizer = Standardizer::fit(&raw, &all_rows);
    let x = standardizer.apply(&raw);

    let fits: Vec<(Mlp<f32>, f64)> = (0..config.ccs_restarts)
        .into_par_iter()
        .map(|r| train_ccs_restart(&x, train.len(), c, config, r))
        .collect::<Result<_, _>>()?;
    let restart_losses: Vec<f64> = fits.iter().map(|f| f.1).collect();
    let mut chosen = 0;
    for (i, &l) in restart_losses.iter().enumerate() {
        if l < restart_losses[chosen] {
            chosen = i;
        }
    }
    let (mlp, final_loss) = fits.into_iter().nth(chosen).expect("at least one restart");
    let model = ProbeModel {
        n_classes: c,
        source_layers: states.n_layers,
        layer_dim: states.layer_dim,
        layers,
        standardizer,
        net: ProbeNet::Ccs(mlp),
        tau: config.tau,
    };
    Ok(CcsFit {
        model,
        final_loss,
        restart_losses,
        chosen_restart: chosen,
    })
}

/// Trains a CCS probe on `train` and evaluates it against the labels of
/// `train` and `eval` afterwards. Labels never reach the fitting step.
pub fn train_ccs_probe_on_cache(
    cache: &HiddenStateCache,
    train: &[usize],
    eval: &[usize],
    config: &ProbeTrainConfig,
) -> Result<TrainedProbe, ProbeError> {
    let states = ChoiceStates::from_cache(cache)?;
    let fit = train_ccs_probe(&states, train, config)?;
    let train_accuracy = fit.model.accuracy(cache, train)?;
    let eval_accuracy = fit.model.accuracy(cache, eval)?;
    Ok(TrainedProbe {
        model: fit.model,
        train_accuracy,
        eval_accuracy,
        final_loss: fit.final_loss,
    })
}

/// Dispatches to the supervised or CCS trainer.
pub fn train_probe(
    cache: &HiddenStateCache,
    train: &[usize],
    eval: &[usize],
    kind: ProbeKind,
    config: &ProbeTrainConfig,
) -> Result<TrainedProbe, ProbeError> {
    match kind {
        ProbeKind::Ccs => train_ccs_probe_on_cache(cache, train, eval, config),
        _ => train_supervised_probe(cache, train, eval, kind, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ccs_uniform_point_loss() {
        // σ(s) = 1/C at s = ln(1/(C-1))
        for c in [2usize, 4, 5] {
            let s = (1.0 / (c as f64 - 1.0)).ln();
            let (loss, _) = ccs_loss_and_grad(&vec![s; c], CcsLoss::Confidence);
            let expected = (c as f64 - 1.0) / (c * c) as f64;
            assert!((loss - expected).abs() < 1e-12, "C={c}: {loss} vs {expected}");
        }
    }

    #[test]
    fn ccs_loss_is_permutation_invariant() {
        let s = [0.3f64, -1.1, 2.2, 0.0];
        let t = [2.2f64, 0.0, 0.3, -1.1];
        for loss in [CcsLoss::Confidence, CcsLoss::Variance] {
            let a = ccs_loss_and_grad(&s, loss).0;
            let b = ccs_loss_and_grad(&t, loss).0;
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ccs_gradient_matches_fd() {
        let s = [0.3f64, -1.1, 2.2, 0.4, -0.2];
        for loss in [CcsLoss::Confidence, CcsLoss::Variance] {
            let (_, g) = ccs_loss_and_grad(&s, loss);
            for i in 0..s.len() {
                let h = 1e-5;
                let mut p = s;
                let mut m = s;
                p[i] += h;
                m[i] -= h;
                let fd = (ccs_loss_and_grad(&p, loss).0 - ccs_loss_and_grad(&m, loss).0) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-8, "{loss:?} {i}: {fd} vs {}", g[i]);
            }
        }
    }
}
