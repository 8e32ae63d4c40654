//! Hidden-state cache: the per-example teacher representations, labels,
//! teacher logits and student inputs exchanged between pipeline stages, plus
//! the `HSC1` binary format and the dataset index helpers.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "HSC1"
//! 4       4           version (u32, currently 1)
//! 8       4           flags (u32, bit 0 = per-choice states present)
//! 12      8           n examples (u64)
//! 20      4           L layers (u32)
//! 24      4           d hidden dim (u32)
//! 28      4           C classes (u32)
//! 32      4           m student input dim (u32)
//! 36      4·n         labels u32[n]
//!         4·n·C       teacher logits f32[n·C]
//!         4·n·L·d     features f32[n·L·d]
//!         4·n·m       student inputs f32[n·m]
//!         4·n·C·L·d   per-choice states f32[n·C·L·d] (only if flagged)
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::numkern::DenseMatrix;
use crate::optim::SeededRng;

pub const HSC_MAGIC: [u8; 4] = *b"HSC1";
pub const HSC_VERSION: u32 = 1;
pub const HSC_HEADER_LEN: usize = 36;
pub const FLAG_PER_CHOICE: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"HSC1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported cache version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown flag bits {0:#x}")]
    UnknownFlags(u32),
    #[error("truncated {section} section: need {needed} bytes, {available} available")]
    Truncated {
        section: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("invalid cache: {0}")]
    Invalid(String),
    #[error("cannot stratify: class {class} has {count} example(s)")]
    Stratification { class: u32, count: usize },
}

/// Teacher hidden states and companions for `n` examples.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateCache {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    /// `n × (L·d)`, layers concatenated in order.
    pub features: DenseMatrix<f32>,
    pub labels: Vec<u32>,
    /// `n × C`.
    pub teacher_logits: DenseMatrix<f32>,
    /// `n × m` raw student features.
    pub student_inputs: DenseMatrix<f32>,
    /// `(n·C) × (L·d)`, example-major: row `i·C + c` is choice `c` of example `i`.
    pub per_choice: Option<DenseMatrix<f32>>,
}

impl HiddenStateCache {
    pub fn n_examples(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.n_layers * self.hidden_dim
    }

    pub fn student_dim(&self) -> usize {
        self.student_inputs.cols()
    }

    pub fn has_per_choice(&self) -> bool {
        self.per_choice.is_some()
    }

    pub fn flags(&self) -> u32 {
        if self.has_per_choice() {
            FLAG_PER_CHOICE
        } else {
            0
        }
    }

    /// States for teacher layer `layer` (0-based), `n × d`.
    pub fn layer(&self, layer: usize) -> Result<DenseMatrix<f32>, CacheError> {
        if layer >= self.n_layers {
            return Err(CacheError::Invalid(format!(
                "layer {layer} out of range for {} layers",
                self.n_layers
            )));
        }
        self.features
            .column_block(layer * self.hidden_dim, self.hidden_dim)
            .map_err(|e| CacheError::Invalid(e.to_string()))
    }

    /// Per-choice states of example `i`, `C × (L·d)`.
    pub fn choices_of(&self, i: usize) -> Option<DenseMatrix<f32>> {
        let pc = self.per_choice.as_ref()?;
        let c = self.n_classes;
        Some(pc.select_rows(&(i * c..(i + 1) * c).collect::<Vec<_>>()))
    }

    pub fn validate(&self) -> Result<(), CacheError> {
        let n = self.n_examples();
        let (c, ld, m) = (self.n_classes, self.feature_dim(), self.student_dim());
        let check = |name: &str, mat: &DenseMatrix<f32>, rows: usize, cols: usize| {
            if mat.shape() != (rows, cols) {
                return Err(CacheError::Invalid(format!(
                    "{name} shape {:?}, expected ({rows}, {cols})",
                    mat.shape()
                )));
            }
            Ok(())
        };
        check("features", &self.features, n, ld)?;
        check("teacher_logits", &self.teacher_logits, n, c)?;
        check("student_inputs", &self.student_inputs, n, m)?;
        if let Some(pc) = &self.per_choice {
            check("per_choice", pc, n * c, ld)?;
        }
        if let Some(bad) = self.labels.iter().find(|&&y| y as usize >= c) {
            return Err(CacheError::Invalid(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        for v in [u32::try_from(self.n_layers), u32::try_from(self.hidden_dim), u32::try_from(c), u32::try_from(m)] {
            v.map_err(|_| CacheError::Invalid("header dimension exceeds u32".into()))?;
        }
        Ok(())
    }

    /// Exact serialized size implied by the header fields.
    pub fn encoded_len(&self) -> usize {
        encoded_len(
            self.n_examples(),
            self.n_layers,
            self.hidden_dim,
            self.n_classes,
            self.student_dim(),
            self.has_per_choice(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CacheError> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        write_cache(self, &mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CacheError> {
        decode(bytes)
    }

    /// SHA-256 of the serialized cache, hex-encoded.
    pub fn digest(&self) -> Result<String, CacheError> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

pub fn encoded_len(n: usize, l: usize, d: usize, c: usize, m: usize, per_choice: bool) -> usize {
    let mut len = HSC_HEADER_LEN + 4 * (n + n * c + n * l * d + n * m);
    if per_choice {
        len += 4 * n * c * l * d;
    }
    len
}

fn put_f32s<W: Write>(w: &mut W, xs: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Serializes `cache` in the `HSC1` layout.
pub fn write_cache<W: Write>(cache: &HiddenStateCache, mut dst: W) -> Result<(), CacheError> {
    cache.validate()?;
    let mut header = Vec::with_capacity(HSC_HEADER_LEN);
    header.extend_from_slice(&HSC_MAGIC);
    header.extend_from_slice(&HSC_VERSION.to_le_bytes());
    header.extend_from_slice(&cache.flags().to_le_bytes());
    header.extend_from_slice(&(cache.n_examples() as u64).to_le_bytes());
    for v in [
        cache.n_layers,
        cache.hidden_dim,
        cache.n_classes,
        cache.student_dim(),
    ] {
        header.extend_from_slice(&(v as u32).to_le_bytes());
    }
    dst.write_all(&header)?;
    let mut labels = Vec::with_capacity(cache.labels.len() * 4);
    for y in &cache.labels {
        labels.extend_from_slice(&y.to_le_bytes());
    }
    dst.write_all(&labels)?;
    put_f32s(&mut dst, cache.teacher_logits.data())?;
    put_f32s(&mut dst, cache.features.data())?;
    put_f32s(&mut dst, cache.student_inputs.data())?;
    if let Some(pc) = &cache.per_choice {
        put_f32s(&mut dst, pc.data())?;
    }
    dst.flush()?;
    Ok(())
}

/// Reads an `HSC1` stream to the end and decodes it.
pub fn read_cache<R: Read>(mut src: R) -> Result<HiddenStateCache, CacheError> {
    let mut bytes = Vec::new();
    src.read_to_end(&mut bytes)?;
    decode(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, section: &'static str, len: usize) -> Result<&'a [u8], CacheError> {
        let available = self.bytes.len() - self.pos;
        if len > available {
            return Err(CacheError::Truncated {
                section,
                needed: len,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32, CacheError> {
        Ok(u32::from_le_bytes(self.take(section, 4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, section: &'static str, count: usize) -> Result<Vec<f32>, CacheError> {
        let raw = self.take(section, count * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

fn decode(bytes: &[u8]) -> Result<HiddenStateCache, CacheError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take("header", 4)?.try_into().unwrap();
    if magic != HSC_MAGIC {
        return Err(CacheError::BadMagic(magic));
    }
    let version = cur.u32("header")?;
    if version != HSC_VERSION {
        return Err(CacheError::UnsupportedVersion(version));
    }
    let flags = cur.u32("header")?;
    if flags & !FLAG_PER_CHOICE != 0 {
        return Err(CacheError::UnknownFlags(flags));
    }
    let n = u64::from_le_bytes(cur.take("header", 8)?.try_into().unwrap());
    let n = usize::try_from(n).map_err(|_| CacheError::Invalid("n exceeds usize".into()))?;
    let l = cur.u32("header")? as usize;
    let d = cur.u32("header")? as usize;
    let c = cur.u32("header")? as usize;
    let m = cur.u32("header")? as usize;
    let per_choice = flags & FLAG_PER_CHOICE != 0;

    // reject inconsistent lengths before allocating anything sized by the header
    let expected = n
        .checked_mul(1 + c + l * d + m + if per_choice { c * l * d } else { 0 })
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(HSC_HEADER_LEN))
        .ok_or_else(|| CacheError::Invalid("header dimensions overflow".into()))?;
    if bytes.len() > expected {
        return Err(CacheError::TrailingBytes {
            extra: bytes.len() - expected,
        });
    }

    let labels: Vec<u32> = cur
        .take("labels", 4 * n)?
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let teacher_logits = cur.f32s("teacher_logits", n * c)?;
    let features = cur.f32s("features", n * l * d)?;
    let student_inputs = cur.f32s("student_inputs", n * m)?;
    let per_choice = if per_choice {
        Some(cur.f32s("per_choice", n * c * l * d)?)
    } else {
        None
    };
    let mk = |rows, cols, data| {
        DenseMatrix::from_vec(rows, cols, data).map_err(|e| CacheError::Invalid(e.to_string()))
    };
    let cache = HiddenStateCache {
        n_layers: l,
        hidden_dim: d,
        n_classes: c,
        features: mk(n, l * d, features)?,
        labels,
        teacher_logits: mk(n, c, teacher_logits)?,
        student_inputs: mk(n, m, student_inputs)?,
        per_choice: per_choice.map(|pc| mk(n * c, l * d, pc)).transpose()?,
    };
    cache.validate()?;
    Ok(cache)
}

/// A training-set fraction with the seed of its permutation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataFraction {
    pub fraction: f64,
    pub seed: u64,
}

/// The data-scaling grid: 1%, 10%, 25%, 50%, 75%, 100%.
pub const SCALING_FRACTIONS: [f64; 6] = [0.01, 0.10, 0.25, 0.50, 0.75, 1.00];

impl DataFraction {
    pub fn new(fraction: f64, seed: u64) -> Result<Self, CacheError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(CacheError::Invalid(format!(
                "fraction must lie in (0, 1], got {fraction}"
            )));
        }
        Ok(Self { fraction, seed })
    }

    /// `max(1, round(fraction·n))`.
    pub fn subset_size(&self, n: usize) -> usize {
        if n == 0 {
            return 0;
        }
        ((self.fraction * n as f64).round() as usize).clamp(1, n)
    }

    /// Prefix of a seeded permutation of `pool`, returned sorted. Subsets for
    /// the same seed and pool are nested across fractions.
    pub fn sample(&self, pool: &[usize]) -> Vec<usize> {
        let mut order = pool.to_vec();
        order.shuffle(&mut SeededRng::new(self.seed).split("fraction"));
        order.truncate(self.subset_size(pool.len()));
        order.sort_unstable();
        order
    }
}

/// Fraction subset over every example of `cache`.
pub fn sample_fraction(cache: &HiddenStateCache, frac: DataFraction) -> Vec<usize> {
    frac.sample(&(0..cache.n_examples()).collect::<Vec<_>>())
}

/// Largest-remainder allocation of `round(eval_fraction·n)` eval slots
/// across classes, keeping at least one example per class on each side.
fn eval_quotas(by_class: &[Vec<usize>], eval_fraction: f64) -> Vec<usize> {
    let n: usize = by_class.iter().map(Vec::len).sum();
    let target = (eval_fraction * n as f64).round() as usize;
    let exact: Vec<f64> = by_class
        .iter()
        .map(|idx| eval_fraction * idx.len() as f64)
        .collect();
    let mut quotas: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..by_class.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(quotas.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if quotas[c] + 1 < by_class[c].len() {
            quotas[c] += 1;
            missing -= 1;
        }
    }
    for (q, idx) in quotas.iter_mut().zip(by_class) {
        if !idx.is_empty() {
            *q = (*q).clamp(1, idx.len() - 1);
        }
    }
    quotas
}

/// Label-stratified split into `(train, eval)` index lists, each sorted.
///
/// Classes absent from `labels` are skipped; a class with a single example
/// cannot be stratified.
pub fn split_train_eval(
    labels: &[u32],
    eval_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), CacheError> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(CacheError::Invalid(format!(
            "eval fraction must lie in (0, 1), got {eval_fraction}"
        )));
    }
    let n_classes = labels.iter().map(|&y| y as usize + 1).max().unwrap_or(0);
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y as usize].push(i);
    }
    for (class, idx) in by_class.iter().enumerate() {
        if idx.len() == 1 {
            return Err(CacheError::Stratification {
                class: class as u32,
                count: 1,
            });
        }
    }
    let quotas = eval_quotas(&by_class, eval_fraction);
    let root = SeededRng::new(seed);
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (class, (mut idx, k)) in by_class.into_iter().zip(quotas).enumerate() {
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut root.split_index("split", class as u64));
        eval.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    Ok((train, eval))
}
