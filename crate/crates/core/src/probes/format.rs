//! `PKP1` probe files.
//!
//! ```text
//! magic "PKP1" | version u32 | kind u32 (0 logistic, 1 mlp, 2 ccs)
//! | n_classes u32 | source_layers u32 | layer_dim u32
//! | n_selected u32 | selected layer indices u32[n_selected]
//! | hidden u32 (0 for logistic) | outputs u32 | tau f64
//! | mean f32[D] | scale f32[D]                      (D = n_selected·layer_dim)
//! | logistic: W f32[outputs·D] | b f32[outputs]
//! | mlp/ccs:  W1 f32[hidden·D] | b1 f32[hidden] | W2 f32[outputs·hidden] | b2 f32[outputs]
//! ```
//!
//! Little-endian throughout.

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::model::{ProbeKind, ProbeModel, ProbeNet, Standardizer};
use super::ProbeError;
use crate::numkern::{DenseMatrix, Linear, Mlp};

pub const PKP_MAGIC: [u8; 4] = *b"PKP1";
pub const PKP_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<(), ProbeError> {
    let v = u32::try_from(v).map_err(|_| ProbeError::Format("dimension exceeds u32".into()))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(buf: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_linear(buf: &mut Vec<u8>, l: &Linear<f32>) {
    put_f32s(buf, l.weight.data());
    put_f32s(buf, &l.bias);
}

pub fn encode_probe(probe: &ProbeModel) -> Result<Vec<u8>, ProbeError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&PKP_MAGIC);
    buf.extend_from_slice(&PKP_VERSION.to_le_bytes());
    buf.extend_from_slice(&probe.kind().code().to_le_bytes());
    put_u32(&mut buf, probe.n_classes)?;
    put_u32(&mut buf, probe.source_layers)?;
    put_u32(&mut buf, probe.layer_dim)?;
    put_u32(&mut buf, probe.layers.len())?;
    for &l in &probe.layers {
        put_u32(&mut buf, l)?;
    }
    let (hidden, outputs) = match &probe.net {
        ProbeNet::Logistic(l) => (0, l.outputs()),
        ProbeNet::Mlp(m) | ProbeNet::Ccs(m) => (m.width(), m.outputs()),
    };
    put_u32(&mut buf, hidden)?;
    put_u32(&mut buf, outputs)?;
    buf.extend_from_slice(&probe.tau.to_le_bytes());
    put_f32s(&mut buf, &probe.standardizer.mean);
    put_f32s(&mut buf, &probe.standardizer.scale);
    match &probe.net {
        ProbeNet::Logistic(l) => put_linear(&mut buf, l),
        ProbeNet::Mlp(m) | ProbeNet::Ccs(m) => {
            put_linear(&mut buf, &m.hidden);
            put_linear(&mut buf, &m.output);
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, section: &'static str, len: usize) -> Result<&'a [u8], ProbeError> {
        if self.bytes.len() - self.pos < len {
            return Err(ProbeError::Format(format!("truncated {section} section")));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, section: &'static str) -> Result<usize, ProbeError> {
        Ok(u32::from_le_bytes(self.take(section, 4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, section: &'static str, n: usize) -> Result<Vec<f32>, ProbeError> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| ProbeError::Format("size overflow".into()))?;
        Ok(self
            .take(section, len)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn linear(&mut self, section: &'static str, inputs: usize, outputs: usize) -> Result<Linear<f32>, ProbeError> {
        let w = self.f32s(section, inputs * outputs)?;
        let b = self.f32s(section, outputs)?;
        Ok(Linear {
            weight: DenseMatrix::from_vec(outputs, inputs, w)?,
            bias: b,
        })
    }
}

pub fn decode_probe(bytes: &[u8]) -> Result<ProbeModel, ProbeError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take("header", 4)?;
    if magic != PKP_MAGIC {
        return Err(ProbeError::Format(format!("bad magic {magic:?}, expected \"PKP1\"")));
    }
    let version = r.u32("header")? as u32;
    if version != PKP_VERSION {
        return Err(ProbeError::Format(format!("unsupported probe version {version}")));
    }
    let code = r.u32("header")? as u32;
    let kind = ProbeKind::from_code(code)
        .ok_or_else(|| ProbeError::Format(format!("unknown probe kind code {code}")))?;
    let n_classes = r.u32("header")?;
    let source_layers = r.u32("header")?;
    let layer_dim = r.u32("header")?;
    let n_sel = r.u32("header")?;
    if n_sel > source_layers {
        return Err(ProbeError::Format(format!(
            "{n_sel} selected layers exceed {source_layers} source layers"
        )));
    }
    let layers = (0..n_sel)
        .map(|_| r.u32("layers"))
        .collect::<Result<Vec<_>, _>>()?;
    if layers.iter().any(|&l| l >= source_layers) {
        return Err(ProbeError::Format("selected layer out of range".into()));
    }
    let hidden = r.u32("header")?;
    let outputs = r.u32("header")?;
    let tau = f64::from_le_bytes(r.take("header", 8)?.try_into().unwrap());
    let dim = n_sel * layer_dim;
    let mean = r.f32s("standardizer", dim)?;
    let scale = r.f32s("standardizer", dim)?;
    if scale.iter().any(|&s| !(s > 0.0)) {
        return Err(ProbeError::Format("non-positive standardization scale".into()));
    }
    let expected_out = if kind == ProbeKind::Ccs { 1 } else { n_classes };
    if outputs != expected_out {
        return Err(ProbeError::Format(format!(
            "{kind} probe with {outputs} outputs, expected {expected_out}"
        )));
    }
    let net = match kind {
        ProbeKind::Logistic => {
            if hidden != 0 {
                return Err(ProbeError::Format("logistic probe with hidden width".into()));
            }
            ProbeNet::Logistic(r.linear("parameters", dim, outputs)?)
        }
        ProbeKind::Mlp | ProbeKind::Ccs => {
            let m = Mlp {
                hidden: r.linear("parameters", dim, hidden)?,
                output: r.linear("parameters", hidden, outputs)?,
            };
            if kind == ProbeKind::Mlp {
                ProbeNet::Mlp(m)
            } else {
                ProbeNet::Ccs(m)
            }
        }
    };
    if r.pos != bytes.len() {
        return Err(ProbeError::Format(format!(
            "{} trailing bytes after parameters",
            bytes.len() - r.pos
        )));
    }
    Ok(ProbeModel {
        n_classes,
        source_layers,
        layer_dim,
        layers,
        standardizer: Standardizer { mean, scale },
        net,
        tau,
    })
}

pub fn write_probe<W: Write>(probe: &ProbeModel, mut dst: W) -> Result<(), ProbeError> {
    dst.write_all(&encode_probe(probe)?)?;
    dst.flush()?;
    Ok(())
}

pub fn read_probe<R: Read>(mut src: R) -> Result<ProbeModel, ProbeError> {
    let mut bytes = Vec::new();
    src.read_to_end(&mut bytes)?;
    decode_probe(&bytes)
}

/// SHA-256 of the encoded probe, hex.
pub fn probe_digest(probe: &ProbeModel) -> Result<String, ProbeError> {
    Ok(hex::encode(Sha256::digest(encode_probe(probe)?)))
}
