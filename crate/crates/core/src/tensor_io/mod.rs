//! On-disk formats: uncompressed checkpoints (`PQFN`), compressed models
//! (`PQFC`) and the plain-text architecture description.
//!
//! Both binary containers share one framing:
//!
//! ```text
//! magic [4] | version u32 | manifest_len u64 | manifest (UTF-8 JSON) | payloads
//! ```
//!
//! All integers are little-endian. Payload offsets in the manifest are
//! relative to the first byte after the manifest.

mod arch;
mod bitpack;
mod checkpoint;
mod compressed;

pub use arch::{format_arch, load_arch, parse_arch};
pub use bitpack::{code_bits, pack_codes, packed_len, unpack_codes};
pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, DType, LayerKind,
    LayerMeta, ModelCheckpoint, TensorRecord,
};
pub use compressed::{
    compressed_from_bytes, compressed_to_bytes, load_compressed, save_compressed, CompressedEntry,
    CompressedModel, EncodedLayer,
};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PQFN";
pub const COMPRESSED_MAGIC: &[u8; 4] = b"PQFC";
pub const FORMAT_VERSION: u32 = 1;

/// Size of the fixed part of the framing, before the manifest.
pub const FRAME_PREFIX_LEN: usize = 4 + 4 + 8;

pub(crate) fn write_frame(magic: &[u8; 4], manifest: &[u8], payload_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_PREFIX_LEN + manifest.len() + payload_len);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest);
    out
}

/// Splits a framed file into (manifest bytes, payload bytes).
pub(crate) fn read_frame<'a>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < FRAME_PREFIX_LEN {
        return Err(Error::MalformedFile("file shorter than header".into()));
    }
    if &bytes[..4] != magic {
        return Err(Error::MalformedFile(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::MalformedFile(format!("unsupported version {version}")));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let rest = &bytes[FRAME_PREFIX_LEN..];
    if manifest_len > rest.len() as u64 {
        return Err(Error::MalformedFile("truncated manifest".into()));
    }
    Ok(rest.split_at(manifest_len as usize))
}

pub(crate) fn payload_slice<'a>(payload: &'a [u8], offset: u64, len: u64, what: &str) -> Result<&'a [u8]> {
    let end = offset
        .checked_add(len)
        .ok_or_else(|| Error::MalformedFile(format!("{what}: offset overflow")))?;
    if end > payload.len() as u64 {
        return Err(Error::MalformedFile(format!("{what}: truncated payload")));
    }
    Ok(&payload[offset as usize..end as usize])
}
