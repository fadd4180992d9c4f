//! Binary training checkpoints.
//!
//! Layout: the magic `HSAECKPT`, a little-endian `u64` header length, a JSON
//! header, then raw little-endian f32 tensors at the offsets the header
//! lists (relative to the end of the header). The header carries the
//! effective config, the step, the hierarchy as parent arrays, controller
//! and dead-feature state, generator positions, and the data cursor;
//! tensors carry every parameter, λ, the optimizer moments, and any
//! coactivation statistics.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::StreamCursor;
use crate::error::{HsaeError, Result};
use crate::hierarchy::Hierarchy;
use crate::numerics::Matrix;
use crate::training::{DeadFeatureTracker, SparsityController, TrainConfig, TrainMode, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HSAECKPT";
pub const CHECKPOINT_SCHEMA: &str = "hsae-ckpt/1";
const PREFIX_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema: String,
    mode: TrainMode,
    step: u64,
    d: usize,
    config: TrainConfig,
    parents: Vec<Vec<Option<usize>>>,
    hierarchy_frozen: bool,
    controllers: Vec<SparsityController>,
    trackers: Vec<DeadFeatureTracker>,
    /// Adam step counters per level: encoder, decoder, thresholds.
    adam_steps: Vec<[u64; 3]>,
    perturb_rng: ChaCha8Rng,
    resample_rngs: Vec<ChaCha8Rng>,
    stream: Option<StreamCursor>,
    tensors: Vec<TensorEntry>,
}

/// A restored training state and the data position it had reached.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub trainer: Trainer,
    pub cursor: Option<StreamCursor>,
}

fn tensor_list(t: &Trainer) -> Vec<(String, &[f32], usize, usize)> {
    let mut out: Vec<(String, &[f32], usize, usize)> = Vec::new();
    for (k, (l, o)) in t.levels.iter().zip(&t.optim).enumerate() {
        let (n, d) = (l.dict_size(), l.input_dim());
        out.push((format!("level{k}.encoder"), l.encoder.as_slice(), n, d));
        out.push((format!("level{k}.decoder"), l.decoder.as_slice(), n, d));
        out.push((format!("level{k}.thresholds"), &l.thresholds, n, 1));
        out.push((format!("level{k}.lambda"), std::slice::from_ref(&l.lambda), 1, 1));
        for (group, st) in [("encoder", &o.encoder), ("decoder", &o.decoder), ("thresholds", &o.thresholds)] {
            out.push((format!("level{k}.adam.{group}.m"), st.m.as_slice(), st.m.rows(), st.m.cols()));
            out.push((format!("level{k}.adam.{group}.v"), st.v.as_slice(), st.v.rows(), st.v.cols()));
        }
    }
    if let Some(s) = &t.coactivation {
        for (k, m) in s.joint.iter().enumerate() {
            out.push((format!("coactivation.joint{k}"), m.as_slice(), m.rows(), m.cols()));
        }
        for (k, m) in s.marginal.iter().enumerate() {
            out.push((format!("coactivation.marginal{k}"), m, m.len(), 1));
        }
    }
    out
}

/// Serializes a training state.
pub fn encode_checkpoint(t: &Trainer, cursor: Option<StreamCursor>) -> Result<Vec<u8>> {
    let tensors = tensor_list(t);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, data, rows, cols) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            rows: *rows,
            cols: *cols,
            offset,
        });
        offset += data.len() as u64 * 4;
    }
    let header = Header {
        schema: CHECKPOINT_SCHEMA.into(),
        mode: t.mode,
        step: t.step,
        d: t.levels[0].input_dim(),
        config: t.config.clone(),
        parents: t.hierarchy.raw_parents().to_vec(),
        hierarchy_frozen: t.hierarchy.frozen,
        controllers: t.controllers.clone(),
        trackers: t.trackers.clone(),
        adam_steps: t
            .optim
            .iter()
            .map(|o| [o.encoder.step, o.decoder.step, o.thresholds.step])
            .collect(),
        perturb_rng: t.perturb_rng.clone(),
        resample_rngs: t.resample_rngs.clone(),
        stream: cursor,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, data, _, _) in &tensors {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint, validating every tensor against the header config.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREFIX_LEN {
        return Err(HsaeError::format(bytes.len() as u64, "truncated checkpoint prefix"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(HsaeError::format(0, "bad magic, expected HSAECKPT"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload_start = (PREFIX_LEN as u64)
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| HsaeError::format(bytes.len() as u64, format!("truncated checkpoint header ({hlen} bytes declared)")))?
        as usize;
    let probe: serde_json::Value = serde_json::from_slice(&bytes[PREFIX_LEN..payload_start])
        .map_err(|e| HsaeError::format(PREFIX_LEN as u64, format!("unreadable header: {e}")))?;
    let schema = probe.get("schema").and_then(|s| s.as_str()).unwrap_or("<missing>");
    if schema != CHECKPOINT_SCHEMA {
        return Err(HsaeError::Schema {
            expected: CHECKPOINT_SCHEMA.into(),
            found: schema.into(),
        });
    }
    let h: Header = serde_json::from_value(probe)?;
    let payload = &bytes[payload_start..];

    let mut t = Trainer::new(h.config.clone(), h.mode, h.d)?;
    let expected: Vec<(String, usize, usize)> = tensor_list(&t)
        .into_iter()
        .map(|(n, _, r, c)| (n, r, c))
        .collect();
    if expected.len() != h.tensors.len() {
        return Err(HsaeError::Data(format!(
            "checkpoint lists {} tensors, config implies {}",
            h.tensors.len(),
            expected.len()
        )));
    }
    let mut end = 0u64;
    for ((name, rows, cols), e) in expected.iter().zip(&h.tensors) {
        if &e.name != name || e.rows != *rows || e.cols != *cols {
            return Err(HsaeError::Data(format!(
                "tensor {} is {}x{} in the header, expected {name} {rows}x{cols}",
                e.name, e.rows, e.cols
            )));
        }
        if e.offset != end {
            return Err(HsaeError::Data(format!("tensor {name} at offset {}, expected {end}", e.offset)));
        }
        end += (rows * cols) as u64 * 4;
    }
    if payload.len() as u64 != end {
        return Err(HsaeError::format(
            bytes.len() as u64,
            format!("payload has {} bytes, header implies {end}", payload.len()),
        ));
    }
    let read = |e: &TensorEntry| -> Vec<f32> {
        let start = e.offset as usize;
        payload[start..start + e.rows * e.cols * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let mut it = h.tensors.iter();
    let mut next = |rows: usize, cols: usize| Matrix::from_vec(rows, cols, read(it.next().unwrap()));
    let nl = t.levels.len();
    for k in 0..nl {
        let (n, d) = (t.levels[k].dict_size(), h.d);
        t.levels[k].encoder = next(n, d)?;
        t.levels[k].decoder = next(n, d)?;
        t.levels[k].thresholds = next(n, 1)?.into_vec();
        t.levels[k].lambda = next(1, 1)?.get(0, 0);
        let o = &mut t.optim[k];
        o.encoder.m = next(n, d)?;
        o.encoder.v = next(n, d)?;
        o.decoder.m = next(n, d)?;
        o.decoder.v = next(n, d)?;
        o.thresholds.m = next(n, 1)?;
        o.thresholds.v = next(n, 1)?;
        let [a, b, c] = *h
            .adam_steps
            .get(k)
            .ok_or_else(|| HsaeError::Data("missing optimizer step counters".into()))?;
        (o.encoder.step, o.decoder.step, o.thresholds.step) = (a, b, c);
    }
    if let Some(stats) = &mut t.coactivation {
        let sizes = h.config.dict_sizes.clone();
        for (k, w) in sizes.windows(2).enumerate() {
            stats.joint[k] = next(w[0], w[1])?;
        }
        for (k, &n) in sizes.iter().enumerate() {
            stats.marginal[k] = next(n, 1)?.into_vec();
        }
    }
    let check_len = |what: &str, got: usize| -> Result<()> {
        if got != nl {
            Err(HsaeError::Data(format!("checkpoint has {got} {what}, expected {nl}")))
        } else {
            Ok(())
        }
    };
    check_len("controllers", h.controllers.len())?;
    check_len("trackers", h.trackers.len())?;
    check_len("resampling generators", h.resample_rngs.len())?;
    let mut hierarchy = Hierarchy::from_parents(&h.config.dict_sizes, h.parents)?;
    hierarchy.frozen = h.hierarchy_frozen;
    t.hierarchy = hierarchy;
    t.controllers = h.controllers;
    t.trackers = h.trackers;
    t.perturb_rng = h.perturb_rng;
    t.resample_rngs = h.resample_rngs;
    t.step = h.step;
    Ok(Checkpoint {
        trainer: t,
        cursor: h.stream,
    })
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint(t: &Trainer, cursor: Option<StreamCursor>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(t, cursor)?;
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let io = |e| HsaeError::io(path, e);
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| HsaeError::io(path, e))?;
    decode_checkpoint(&bytes)
}
