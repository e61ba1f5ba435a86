//! Binary model container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "ESLM"
//! 4       1     version (currently 1)
//! 5       4     header length H, u32 little-endian
//! 9       H     UTF-8 JSON header
//! 9+H     8*N   parameters as f64 little-endian
//! ```
//!
//! The header holds `spec`, `provenance`, `stats_norm`, `meta` and `layout`,
//! a list of `[name, shape]` pairs. The payload stores each tensor row-major
//! in layout order, N being the sum of the shape products. Nothing may follow
//! the payload.

use std::collections::BTreeMap;

use essaylens_core::scorers::{ModelSpec, Provenance, ScoreModel, StatsNorm};
use essaylens_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ESLM";
pub const VERSION: u8 = 1;
const PREFIX: usize = 9;

/// What the scorer itself does not record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    /// Embedding provider the model was trained on.
    #[serde(default)]
    pub provider: Option<String>,
    #[serde(default)]
    pub set_id: Option<u32>,
    /// Held-out QWK per essay set, when evaluated.
    #[serde(default)]
    pub qwk: BTreeMap<u32, f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    provenance: Provenance,
    stats_norm: StatsNorm,
    #[serde(default)]
    meta: ModelMeta,
    layout: Vec<(String, Vec<usize>)>,
}

pub fn save_model(model: &ScoreModel, meta: &ModelMeta) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        spec: model.spec.clone(),
        provenance: model.provenance.clone(),
        stats_norm: model.stats_norm,
        meta: meta.clone(),
        layout: model.layout(),
    })?;
    let h = u32::try_from(header.len()).map_err(|_| Error::CorruptContainer("header over 4 GiB".into()))?;
    let mut out = Vec::with_capacity(PREFIX + header.len() + model.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&header);
    for t in model.params.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn load_model(bytes: &[u8]) -> Result<(ScoreModel, ModelMeta)> {
    let corrupt = |m: &str| Error::CorruptContainer(m.to_string());
    if bytes.len() < PREFIX {
        return Err(corrupt("shorter than the fixed prefix"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::VersionMismatch {
            found: bytes[4],
            expected: VERSION,
        });
    }
    let h = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let body = &bytes[PREFIX..];
    if body.len() < h {
        return Err(corrupt("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..h]).map_err(|e| Error::CorruptContainer(format!("header: {}", e)))?;
    header.spec.validate()?;

    // the layout must be the one this spec builds
    let expected = ScoreModel::build(header.spec.clone(), 0)?.layout();
    if expected != header.layout {
        return Err(corrupt("parameter layout does not match the model spec"));
    }
    let payload = &body[h..];
    let n: usize = header.layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if payload.len() != n * 8 {
        return Err(Error::CorruptContainer(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            n * 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut params = BTreeMap::new();
    for (name, shape) in header.layout {
        let len = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(len).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptContainer(format!("non-finite value in `{}`", name)));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    let model = ScoreModel {
        spec: header.spec,
        params,
        stats_norm: header.stats_norm,
        provenance: header.provenance,
    };
    Ok((model, header.meta))
}
