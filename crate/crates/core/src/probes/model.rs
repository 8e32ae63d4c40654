use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ProbeError;
use crate::cache::HiddenStateCache;
use crate::numkern::{argmax, DenseMatrix, Linear, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Logistic,
    Mlp,
    Ccs,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 3] = [ProbeKind::Logistic, ProbeKind::Mlp, ProbeKind::Ccs];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::Logistic => "logistic",
            ProbeKind::Mlp => "mlp",
            ProbeKind::Ccs => "ccs",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            ProbeKind::Logistic => 0,
            ProbeKind::Mlp => 1,
            ProbeKind::Ccs => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeKind {
    type Err = ProbeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ProbeError::InvalidInput(format!("unknown probe kind {s:?}")))
    }
}

/// Which teacher layers feed the probe.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSelection {
    #[default]
    All,
    /// Half-open, 0-based `[start, end)`.
    Range { start: usize, end: usize },
}

impl LayerSelection {
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<usize>, ProbeError> {
        match *self {
            LayerSelection::All => Ok((0..n_layers).collect()),
            LayerSelection::Range { start, end } => {
                if start >= end || end > n_layers {
                    return Err(ProbeError::InvalidInput(format!(
                        "layer range {start}..{end} invalid for {n_layers} layers"
                    )));
                }
                Ok((start..end).collect())
            }
        }
    }
}

impl FromStr for LayerSelection {
    type Err = ProbeError;
    /// `all` or `a..b` / `a-b` (0-based, end exclusive for `..`, inclusive for `-`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            return Ok(LayerSelection::All);
        }
        let parse = |x: &str| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| ProbeError::InvalidInput(format!("bad layer range {s:?}")))
        };
        if let Some((a, b)) = s.split_once("..") {
            return Ok(LayerSelection::Range {
                start: parse(a)?,
                end: parse(b)?,
            });
        }
        if let Some((a, b)) = s.split_once('-') {
            return Ok(LayerSelection::Range {
                start: parse(a)?,
                end: parse(b)? + 1,
            });
        }
        Err(ProbeError::InvalidInput(format!("bad layer range {s:?}")))
    }
}

/// Per-dimension z-scoring fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

const MIN_SCALE: f64 = 1e-6;

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and population standard deviation over `rows` of `x`; constant
    /// columns get unit scale.
    pub fn fit(x: &DenseMatrix<f32>, rows: &[usize]) -> Self {
        let dim = x.cols();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0f64; dim];
        for &r in rows {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; dim];
        for &r in rows {
            for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
        let scale = var
            .iter()
            .map(|&v| {
                let sd = (v / n).sqrt();
                if sd > MIN_SCALE {
                    sd as f32
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &DenseMatrix<f32>) -> DenseMatrix<f32> {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, &m), &s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = ((*v as f64 - m as f64) / s as f64) as f32;
            }
        }
        out
    }
}

/// Parameterization of a trained probe.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeNet {
    Logistic(Linear<f32>),
    Mlp(Mlp<f32>),
    /// Two-layer network with a single output: one score per choice state.
    Ccs(Mlp<f32>),
}

/// A frozen probe over (a subset of) the teacher's concatenated layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub n_classes: usize,
    /// Layer count of the cache the probe was trained on.
    pub source_layers: usize,
    pub layer_dim: usize,
    pub layers: Vec<usize>,
    pub standardizer: Standardizer,
    pub net: ProbeNet,
    /// Temperature its soft labels are exported at.
    pub tau: f64,
}

pub const DEFAULT_SOFT_LABEL_TAU: f64 = 2.0;

impl ProbeModel {
    pub fn kind(&self) -> ProbeKind {
        match self.net {
            ProbeNet::Logistic(_) => ProbeKind::Logistic,
            ProbeNet::Mlp(_) => ProbeKind::Mlp,
            ProbeNet::Ccs(_) => ProbeKind::Ccs,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.len() * self.layer_dim
    }

    /// Output width of the network: `C` for logistic/MLP, 1 for CCS.
    pub fn output_dim(&self) -> usize {
        match &self.net {
            ProbeNet::Logistic(l) => l.outputs(),
            ProbeNet::Mlp(m) | ProbeNet::Ccs(m) => m.outputs(),
        }
    }

    pub(crate) fn check_compatible(&self, cache: &HiddenStateCache) -> Result<(), ProbeError> {
        if cache.n_layers != self.source_layers
            || cache.hidden_dim != self.layer_dim
            || cache.n_classes != self.n_classes
        {
            return Err(ProbeError::InvalidInput(format!(
                "probe expects L={} d={} C={}, cache has L={} d={} C={}",
                self.source_layers,
                self.layer_dim,
                self.n_classes,
                cache.n_layers,
                cache.hidden_dim,
                cache.n_classes
            )));
        }
        Ok(())
    }

    /// Selected layer columns of `states` (rows are full `L·d` vectors),
    /// standardized.
    pub fn prepare(&self, states: &DenseMatrix<f32>) -> DenseMatrix<f32> {
        let raw = select_layers(states, &self.layers, self.layer_dim);
        self.standardizer.apply(&raw)
    }

    /// Raw network outputs on prepared inputs.
    pub fn forward_prepared(&self, x: &DenseMatrix<f32>) -> Result<DenseMatrix<f32>, ProbeError> {
        Ok(match &self.net {
            ProbeNet::Logistic(l) => l.forward(x)?,
            ProbeNet::Mlp(m) | ProbeNet::Ccs(m) => m.forward(x)?.output,
        })
    }

    /// Class scores for the given examples, `indices.len() × C`.
    ///
    /// For logistic/MLP probes these are logits over the concatenated state.
    /// For CCS they are the per-choice pre-sigmoid scores.
    pub fn scores(
        &self,
        cache: &HiddenStateCache,
        indices: &[usize],
    ) -> Result<DenseMatrix<f32>, ProbeError> {
        self.check_compatible(cache)?;
        match self.net {
            ProbeNet::Ccs(_) => {
                let pc = cache
                    .per_choice
                    .as_ref()
                    .ok_or(ProbeError::MissingPerChoice)?;
                let c = self.n_classes;
                let rows: Vec<usize> = indices
                    .iter()
                    .flat_map(|&i| (i * c)..(i + 1) * c)
                    .collect();
                let out = self.forward_prepared(&self.prepare(&pc.select_rows(&rows)))?;
                Ok(DenseMatrix::from_vec(indices.len(), c, out.into_vec())?)
            }
            _ => self.forward_prepared(&self.prepare(&cache.features.select_rows(indices))),
        }
    }

    /// Hard predictions (lowest index on ties).
    pub fn predict(
        &self,
        cache: &HiddenStateCache,
        indices: &[usize],
    ) -> Result<Vec<usize>, ProbeError> {
        let s = self.scores(cache, indices)?;
        Ok(s.iter_rows().map(argmax).collect())
    }

    pub fn accuracy(&self, cache: &HiddenStateCache, indices: &[usize]) -> Result<f64, ProbeError> {
        if indices.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(cache, indices)?;
        let hits = pred
            .iter()
            .zip(indices)
            .filter(|(&p, &i)| p == cache.labels[i] as usize)
            .count();
        Ok(hits as f64 / indices.len() as f64)
    }
}

pub(crate) fn select_layers(
    states: &DenseMatrix<f32>,
    layers: &[usize],
    layer_dim: usize,
) -> DenseMatrix<f32> {
    let total = states.cols() / layer_dim.max(1);
    if layers.len() == total && layers.iter().enumerate().all(|(i, &l)| i == l) {
        return states.clone();
    }
    let mut data = Vec::with_capacity(states.rows() * layers.len() * layer_dim);
    for r in states.iter_rows() {
        for &l in layers {
            data.extend_from_slice(&r[l * layer_dim..(l + 1) * layer_dim]);
        }
    }
    DenseMatrix::from_vec(states.rows(), layers.len() * layer_dim, data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_selection_parsing() {
        assert_eq!("all".parse::<LayerSelection>().unwrap(), LayerSelection::All);
        assert_eq!(
            "1..3".parse::<LayerSelection>().unwrap(),
            LayerSelection::Range { start: 1, end: 3 }
        );
        assert_eq!(
            "1-3".parse::<LayerSelection>().unwrap(),
            LayerSelection::Range { start: 1, end: 4 }
        );
        assert!("x".parse::<LayerSelection>().is_err());
        assert!(LayerSelection::Range { start: 2, end: 9 }.resolve(4).is_err());
    }

    #[test]
    fn standardizer_zero_mean_unit_scale() {
        let x = DenseMatrix::from_rows(&[vec![1.0f32, 5.0], vec![3.0, 5.0], vec![5.0, 5.0]]).unwrap();
        let s = Standardizer::fit(&x, &[0, 1, 2]);
        assert_eq!(s.mean, vec![3.0, 5.0]);
        assert_eq!(s.scale[1], 1.0);
        assert!(s.scale.iter().all(|&v| v > 0.0));
        let z = s.apply(&x);
        let col0: f32 = (0..3).map(|r| z.get(r, 0)).sum();
        assert!(col0.abs() < 1e-6);
    }

    #[test]
    fn kind_roundtrip() {
        for k in ProbeKind::ALL {
            assert_eq!(k.as_str().parse::<ProbeKind>().unwrap(), k);
            assert_eq!(ProbeKind::from_code(k.code()), Some(k));
        }
    }
}
