//! Checkpoint file (`EMOC`): hyperparameters, parameters, running
//! statistics and optionally the optimizer state.
//!
//! ```text
//! magic     "EMOC"
//! version   u16
//! hdr_len   u32, then hdr_len bytes of JSON (CheckpointHeader)
//! n_params  u32, then per parameter:
//!             name_len u16, name (UTF-8), rank u8, dims u32 * rank,
//!             data f64 * prod(dims)
//! n_stats   u32, then per batch norm slot:
//!             present u8; if 1: channels u32, mean f64 * C, var f64 * C
//! has_adam  u8; if 1: step u64, beta1 f64, beta2 f64, eps f64,
//!             then first moments and second moments of every parameter
//!             (f64, parameter order and shapes)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::model::{EmoAntiModel, ModelConfig};
use crate::ops::RunningStats;
use crate::tensor::Tensor;
use crate::trainer::AdamState;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EMOC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Seed of the run that produced the checkpoint.
    pub seed: u64,
    /// Epoch (1-based) after which the parameters were captured; 0 for an
    /// untrained model.
    pub epoch: u32,
    #[serde(default)]
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub header: CheckpointHeader,
    pub model: EmoAntiModel,
    pub adam: Option<AdamState>,
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &EmoAntiModel, header: &CheckpointHeader, adam: Option<&AdamState>) -> Result<Vec<u8>> {
    if header.model != *model.config() {
        return Err(Error::InvalidArgument("checkpoint header config differs from the model's".into()));
    }
    let json = serde_json::to_vec(header).map_err(|e| Error::InvalidArgument(format!("header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);

    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f64s(&mut out, t.data());
    }

    let stats = model.running_stats();
    out.extend_from_slice(&(stats.len() as u32).to_le_bytes());
    for slot in stats {
        match slot {
            None => out.push(0),
            Some(rs) => {
                out.push(1);
                out.extend_from_slice(&(rs.mean.len() as u32).to_le_bytes());
                put_f64s(&mut out, &rs.mean);
                put_f64s(&mut out, &rs.var);
            }
        }
    }

    match adam {
        None => out.push(0),
        Some(state) => {
            if state.first_moments().len() != params.len() {
                return Err(Error::InvalidArgument("optimizer state does not match the model".into()));
            }
            out.push(1);
            out.extend_from_slice(&state.timestep().to_le_bytes());
            put_f64s(&mut out, &[state.beta1, state.beta2, state.eps]);
            for m in state.first_moments().iter().chain(state.second_moments()) {
                put_f64s(&mut out, m.data());
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<LoadedCheckpoint> {
    let mut r = Reader::new(path, bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message,
    };
    let hdr_len = r.u32("header length")? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(hdr_len, "header")?).map_err(|e| parse_err(format!("header: {e}")))?;
    let mut model = EmoAntiModel::skeleton(header.model.clone()).map_err(|e| parse_err(format!("header: {e}")))?;

    let n_params = r.u32("parameter count")? as usize;
    if n_params != model.params().len() {
        return Err(parse_err(format!(
            "{n_params} parameters stored, model structure has {}",
            model.params().len()
        )));
    }
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name_len = r.u16("parameter name length")? as usize;
        let name = r.string(name_len, "parameter name")?;
        if name != model.params().name(id) {
            return Err(parse_err(format!("expected parameter `{}`, found `{name}`", model.params().name(id))));
        }
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let expected = model.params().get(id).shape().to_vec();
        if dims != expected {
            return Err(parse_err(format!("parameter `{name}`: shape {dims:?}, expected {expected:?}")));
        }
        let data = r.f64s(expected.iter().product(), "parameter data")?;
        *model.params_mut().get_mut(id) = Tensor::new(dims, data)?;
    }

    let n_stats = r.u32("running stats count")? as usize;
    if n_stats != model.running_stats().len() {
        return Err(parse_err(format!(
            "{n_stats} running stats stored, model has {}",
            model.running_stats().len()
        )));
    }
    for slot in 0..n_stats {
        let stats = match r.u8("running stats flag")? {
            0 => None,
            1 => {
                let c = r.u32("channels")? as usize;
                let mean = r.f64s(c, "running mean")?;
                let var = r.f64s(c, "running var")?;
                Some(RunningStats { mean, var })
            }
            other => return Err(parse_err(format!("bad running stats flag {other}"))),
        };
        model.running_stats_mut()[slot] = stats;
    }

    let adam = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let hyper = r.f64s(3, "optimizer hyperparameters")?;
            let shapes: Vec<Vec<usize>> = model.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
            let mut read_moments = |what: &str| -> Result<Vec<Tensor>> {
                shapes
                    .iter()
                    .map(|s| Tensor::new(s.clone(), r.f64s(s.iter().product(), what)?))
                    .collect()
            };
            let m = read_moments("first moments")?;
            let v = read_moments("second moments")?;
            Some(AdamState::from_parts(m, v, step, hyper[0], hyper[1], hyper[2]))
        }
        other => return Err(parse_err(format!("bad optimizer flag {other}"))),
    };
    r.finish()?;
    Ok(LoadedCheckpoint { header, model, adam })
}

pub fn save_checkpoint(path: &Path, model: &EmoAntiModel, header: &CheckpointHeader, adam: Option<&AdamState>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, header, adam)?)
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    decode_checkpoint(path, &read_file(path)?)
}
