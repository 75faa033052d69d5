//! Binary checkpoints: `"SWCK"`, a `u32` format version, a `u32` length and
//! that many bytes of JSON layout, one precision byte (4 or 8), then every
//! parameter of every module in order, little-endian.

use std::path::Path;

use thiserror::Error;

use crate::network::{NetworkError, NetworkLayout, NetworkSpec};
use crate::tensor::{Precision, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SWCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"SWCK\"")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown precision tag {0}")]
    Precision(u8),
    #[error("bad layout: {0}")]
    Layout(#[from] serde_json::Error),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode_checkpoint<T: Scalar>(net: &NetworkSpec<T>) -> Vec<u8> {
    let layout = serde_json::to_vec(&net.layout()).expect("layout serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(layout.len() as u32).to_le_bytes());
    out.extend_from_slice(&layout);
    out.push(T::BYTES as u8);
    for m in &net.modules {
        for p in m.params() {
            for &v in p.data() {
                v.write_le(&mut out);
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Stored precision of a checkpoint.
pub fn checkpoint_precision(bytes: &[u8]) -> Result<Precision, CheckpointError> {
    let (_, precision, _) = header(bytes)?;
    Ok(precision)
}

fn header(bytes: &[u8]) -> Result<(NetworkLayout, Precision, usize), CheckpointError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic.to_vec()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = c.u32()? as usize;
    let layout: NetworkLayout = serde_json::from_slice(c.take(len)?)?;
    let precision = match c.take(1)?[0] {
        4 => Precision::Single,
        8 => Precision::Double,
        other => return Err(CheckpointError::Precision(other)),
    };
    Ok((layout, precision, c.pos))
}

/// Decodes a checkpoint, converting parameters to `T` if the stored precision differs.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<NetworkSpec<T>, CheckpointError> {
    let (layout, precision, start) = header(bytes)?;
    let mut net = NetworkSpec::<T>::from_layout(&layout)?;
    let mut c = Cursor { bytes, pos: start };
    for m in &mut net.modules {
        for p in m.params_mut() {
            for v in p.data_mut() {
                *v = match precision {
                    Precision::Single => T::from_f64(f64::from(f32::read_le(c.take(4)?))),
                    Precision::Double => T::from_f64(f64::read_le(c.take(8)?)),
                };
            }
        }
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - c.pos));
    }
    Ok(net)
}

pub fn write_checkpoint<T: Scalar>(path: impl AsRef<Path>, net: &NetworkSpec<T>) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(net))?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<NetworkSpec<T>, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_autoencoder, build_simple_cnn};

    #[test]
    fn round_trip_both_precisions() {
        let net = build_simple_cnn::<f64>(&[3, 4], 4, [8, 8, 3], 1).unwrap();
        let bytes = encode_checkpoint(&net);
        assert_eq!(&bytes[..4], b"SWCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back: NetworkSpec<f64> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.layout(), net.layout());
        for (a, b) in back.modules.iter().zip(&net.modules) {
            assert_eq!(a.params(), b.params());
        }
        let single = build_autoencoder::<f32>(&[2], [4, 4, 1], 2).unwrap();
        let bytes = encode_checkpoint(&single);
        assert_eq!(checkpoint_precision(&bytes).unwrap(), Precision::Single);
        let back: NetworkSpec<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let net = build_simple_cnn::<f32>(&[2], 2, [4, 4, 1], 3).unwrap();
        let bytes = encode_checkpoint(&net);
        assert!(matches!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(CheckpointError::Version(9))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(CheckpointError::BadMagic(_))));
    }
}
