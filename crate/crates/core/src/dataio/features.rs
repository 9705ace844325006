//! Feature file (`EMOF`): one utterance's hidden-state stack.
//!
//! ```text
//! magic    "EMOF"
//! version  u16
//! id_len   u32, then id_len bytes of UTF-8 utterance id
//! L, T, C  u32 each
//! data     L*T*C f32, layer-major, then frame, then channel
//! ```

use std::path::Path;

use super::{read_file, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::model::LayerFeatures;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"EMOF";
pub const FEATURE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureHeader {
    pub version: u16,
    pub utt_id: String,
    pub layers: usize,
    pub frames: usize,
    pub channels: usize,
}

pub fn encode_features(features: &LayerFeatures) -> Result<Vec<u8>> {
    let t = features.layers();
    let (l, f, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let id = features.utt_id.as_bytes();
    let mut out = Vec::with_capacity(4 + 2 + 4 + id.len() + 12 + 4 * t.numel());
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(id.len()).map_err(|_| too_large("utterance id"))?.to_le_bytes());
    out.extend_from_slice(id);
    for d in [l, f, c] {
        out.extend_from_slice(&u32::try_from(d).map_err(|_| too_large("dimension"))?.to_le_bytes());
    }
    for (i, &v) in t.data().iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::NonFinite(format!("feature element {i} does not fit in f32")));
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

fn too_large(what: &str) -> Error {
    Error::InvalidArgument(format!("{what} too large for the feature format"))
}

fn parse_header(r: &mut Reader<'_>) -> Result<FeatureHeader> {
    r.magic(FEATURE_MAGIC)?;
    let version = r.u16("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion {
            path: r.path().to_path_buf(),
            found: version,
            supported: FEATURE_VERSION,
        });
    }
    let id_len = r.u32("utterance id length")? as usize;
    let utt_id = r.string(id_len, "utterance id")?;
    let layers = r.u32("L")? as usize;
    let frames = r.u32("T")? as usize;
    let channels = r.u32("C")? as usize;
    if layers == 0 || frames == 0 || channels == 0 {
        return Err(Error::Parse {
            path: r.path().to_path_buf(),
            line: 0,
            message: format!("zero extent in L={layers} T={frames} C={channels}"),
        });
    }
    Ok(FeatureHeader {
        version,
        utt_id,
        layers,
        frames,
        channels,
    })
}

/// Decodes and fully validates a feature file held in memory.
pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<LayerFeatures> {
    let mut r = Reader::new(path, bytes);
    let h = parse_header(&mut r)?;
    let count = h
        .layers
        .checked_mul(h.frames)
        .and_then(|n| n.checked_mul(h.channels))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            context: "declared size overflows".into(),
        })?;
    let raw = r.array(count, 4, "payload")?;
    r.finish()?;
    let mut data = Vec::with_capacity(count);
    for (index, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                path: path.to_path_buf(),
                index,
            });
        }
        data.push(f64::from(v));
    }
    LayerFeatures::new(h.utt_id, Tensor::new(vec![h.layers, h.frames, h.channels], data)?)
}

pub fn read_features(path: &Path) -> Result<LayerFeatures> {
    decode_features(path, &read_file(path)?)
}

pub fn write_features(path: &Path, features: &LayerFeatures) -> Result<()> {
    write_atomic(path, &encode_features(features)?)
}

/// Reads only the header; the payload length is still checked against it.
pub fn read_feature_header(path: &Path) -> Result<FeatureHeader> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    let h = parse_header(&mut r)?;
    let needed = h.layers as u128 * h.frames as u128 * h.channels as u128 * 4;
    if (r.remaining() as u128) < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            context: format!("payload: need {needed} bytes, {} left", r.remaining()),
        });
    }
    if r.remaining() as u128 > needed {
        return Err(Error::TrailingData {
            path: path.to_path_buf(),
            extra: (r.remaining() as u128 - needed) as usize,
        });
    }
    Ok(h)
}
