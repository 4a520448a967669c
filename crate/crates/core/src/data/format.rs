//! The "EEGE" epoch container format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    4 bytes  "EEGE"
//! version  u16      currently 1
//! flags    u16      bit 0: channel position table present
//! n        u32      trial count
//! d        u16      channels
//! t        u32      samples per trial
//! fs       f32      sampling rate in Hz
//! labels   n x u8   class labels, 0 or 1
//! names    d x (u16 length + UTF-8 bytes)
//! pos      d x 2 x f32, only when flags bit 0 is set
//! data     n x d x t x f32, trial-major, then channel, then time
//! ```
//!
//! Samples are stored in 32-bit precision; a write/read round trip is
//! bit-exact at that precision.

use std::fs;
use std::path::Path;

use crate::data::EpochSet;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: [u8; 4] = *b"EEGE";
const VERSION: u16 = 1;
const FLAG_POSITIONS: u16 = 1;

/// Serializes an epoch set to the EEGE byte layout.
pub fn write_epochs_bytes(epochs: &EpochSet) -> Result<Vec<u8>> {
    let n = epochs.len();
    let d = epochs.n_channels();
    let t = epochs.n_samples();
    if n > u32::MAX as usize || d > u16::MAX as usize || t > u32::MAX as usize {
        return Err(Error::InvalidArgument("epoch set too large for the format".into()));
    }
    let mut out = Vec::with_capacity(32 + n * d * t * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = if epochs.channel_positions().is_some() { FLAG_POSITIONS } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u16).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(epochs.fs() as f32).to_le_bytes());
    out.extend_from_slice(epochs.labels());
    for name in epochs.channel_names() {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("channel name too long: {name}")));
        }
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
    }
    if let Some(positions) = epochs.channel_positions() {
        for &(x, y) in positions {
            out.extend_from_slice(&(x as f32).to_le_bytes());
            out.extend_from_slice(&(y as f32).to_le_bytes());
        }
    }
    for trial in epochs.trials() {
        for &v in trial.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_epochs(path: impl AsRef<Path>, epochs: &EpochSet) -> Result<()> {
    fs::write(path, write_epochs_bytes(epochs)?)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::Truncated { needed: n - available, available });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses the EEGE byte layout. Every malformed input maps to a typed
/// error: wrong magic, unknown version, truncation, or an inconsistency
/// between the header and the payload.
pub fn read_epochs_bytes(bytes: &[u8]) -> Result<EpochSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: magic });
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version as u32));
    }
    let flags = cur.u16()?;
    if flags & !FLAG_POSITIONS != 0 {
        return Err(Error::Inconsistent(format!("unknown flag bits {flags:#06x}")));
    }
    let n = cur.u32()? as usize;
    let d = cur.u16()? as usize;
    let t = cur.u32()? as usize;
    let fs = cur.f32()? as f64;
    if !(fs.is_finite() && fs > 0.0) {
        return Err(Error::Inconsistent(format!("sampling rate {fs} is not positive")));
    }

    let labels = cur.take(n)?.to_vec();
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Inconsistent(format!("label {bad} outside {{0, 1}}")));
    }

    let mut channel_names = Vec::with_capacity(d);
    for i in 0..d {
        let len = cur.u16()? as usize;
        let raw = cur.take(len)?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| Error::Inconsistent(format!("channel name {i} is not UTF-8")))?;
        channel_names.push(name.to_owned());
    }

    let channel_positions = if flags & FLAG_POSITIONS != 0 {
        let mut pos = Vec::with_capacity(d);
        for _ in 0..d {
            let x = cur.f32()? as f64;
            let y = cur.f32()? as f64;
            pos.push((x, y));
        }
        Some(pos)
    } else {
        None
    };

    // capacity capped: n comes from an untrusted header
    let mut trials = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let raw = cur.take(d * t * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        trials.push(Tensor::new(vec![d, t], data)?);
    }
    if cur.remaining() != 0 {
        return Err(Error::Inconsistent(format!(
            "{} trailing bytes after payload",
            cur.remaining()
        )));
    }
    EpochSet::new(trials, labels, fs, channel_names, channel_positions)
}

pub fn read_epochs(path: impl AsRef<Path>) -> Result<EpochSet> {
    read_epochs_bytes(&fs::read(path)?)
}
