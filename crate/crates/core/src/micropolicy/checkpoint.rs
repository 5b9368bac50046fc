//! Flat binary parameter files.
//!
//! Layout: 8-byte magic, `u32` format version, then `V`, `d`, `h`, `W` as
//! `u32`, then every parameter as an `f64`, all little-endian, in the order
//! of [`PolicyParams::as_slice`].

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{PolicyDims, PolicyError, PolicyParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TCPOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 5;

pub fn write_checkpoint<W: Write>(params: &PolicyParams, mut out: W) -> Result<(), PolicyError> {
    let d = params.dims();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for x in [CHECKPOINT_VERSION as usize, d.vocab, d.embed, d.hidden, d.context] {
        let x = u32::try_from(x).map_err(|_| PolicyError::Checkpoint(format!("dimension {x} exceeds u32")))?;
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for x in params.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<PolicyParams, PolicyError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    if buf.len() < HEADER_LEN || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(PolicyError::Checkpoint("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(buf[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != CHECKPOINT_VERSION as usize {
        return Err(PolicyError::Checkpoint(format!("unsupported version {}", word(0))));
    }
    let dims = PolicyDims::new(word(1), word(2), word(3), word(4));
    dims.validate()?;
    let body = &buf[HEADER_LEN..];
    if body.len() != 8 * dims.param_count() {
        return Err(PolicyError::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            8 * dims.param_count(),
            body.len()
        )));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    PolicyParams::from_vec(dims, data)
}

/// Writes atomically via a sibling temp file.
pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<(), PolicyError> {
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        write_checkpoint(params, &mut f)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams, PolicyError> {
    read_checkpoint(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let p = PolicyParams::init(3, PolicyDims::new(12, 3, 5, 4)).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&p, &mut bytes).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 12);
        assert_eq!(bytes.len(), HEADER_LEN + 8 * p.len());
        assert_eq!(read_checkpoint(&bytes[..]).unwrap(), p);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = PolicyParams::init(3, PolicyDims::new(12, 3, 5, 4)).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&p, &mut bytes).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        let mut nan = bytes;
        let last = nan.len() - 8;
        nan[last..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(read_checkpoint(&nan[..]), Err(PolicyError::NonFinite { .. })));
    }
}
