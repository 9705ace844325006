//! On-disk formats and the synthetic dataset generator.
//!
//! All binary formats are little-endian. Files are written to a temporary
//! sibling and renamed into place.

mod checkpoint;
mod features;
mod manifest;
mod scores;
mod synth;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader, LoadedCheckpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use features::{
    decode_features, encode_features, read_feature_header, read_features, write_features, FeatureHeader,
    FEATURE_MAGIC, FEATURE_VERSION,
};
pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use scores::{join_with_key, read_key, read_scores, write_key, write_scores};
pub use synth::{generate, synth_gen, Labeled, SynthConfig, SynthDataset, SynthOutput, HIGH_SEPARATION};

use crate::error::{Error, Result};

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{}: not a file path", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Bounds-checked little-endian reader over an in-memory file.
pub(crate) struct Reader<'a> {
    path: PathBuf,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(path: &Path, buf: &'a [u8]) -> Self {
        Reader {
            path: path.to_path_buf(),
            buf,
            pos: 0,
        }
    }

    pub(crate) fn path(&self) -> &Path {
        &self.path
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Truncated {
                path: self.path.clone(),
                context: format!("{what}: need {n} bytes, {} left", self.remaining()),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().expect("4 bytes");
        if found != expected {
            return Err(Error::BadMagic {
                path: self.path.clone(),
                expected,
                found,
            });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Parse {
            path: self.path.clone(),
            line: 0,
            message: format!("{what} is not valid UTF-8"),
        })
    }

    /// Reads `count` values of `width` bytes, checking the size before
    /// allocating.
    pub(crate) fn array(&mut self, count: usize, width: usize, what: &str) -> Result<&'a [u8]> {
        let n = count.checked_mul(width).ok_or_else(|| Error::Truncated {
            path: self.path.clone(),
            context: format!("{what}: declared size overflows"),
        })?;
        self.take(n, what)
    }

    pub(crate) fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        Ok(self
            .array(count, 8, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::TrailingData {
                path: self.path.clone(),
                extra: self.remaining(),
            });
        }
        Ok(())
    }
}

/// Resolves a path listed in a text file relative to that file's directory.
pub(crate) fn resolve_relative(base_file: &Path, listed: &str) -> PathBuf {
    let p = Path::new(listed);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_file.parent().unwrap_or_else(|| Path::new(".")).join(p)
    }
}
