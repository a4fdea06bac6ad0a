use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bitpack::{code_bits, pack_codes, packed_len, unpack_codes};
use super::checkpoint::{DType, LayerKind, LayerMeta, TensorRecord};
use super::{payload_slice, read_frame, write_frame, COMPRESSED_MAGIC};
use crate::error::{Error, Result};

/// Stored form of one quantized layer.
///
/// `codebook` holds `k_eff * d` IEEE half-precision bit patterns, row-major.
/// `codes` is indexed `j * m_hat + i` for subvector `i` of column `j`, and
/// `permutation` is the row gather order applied before carving subvectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedLayer {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub d: usize,
    pub k_eff: usize,
    pub codebook: Vec<u16>,
    pub codes: Vec<u32>,
    pub permutation: Vec<u32>,
    pub perm_block: usize,
}

impl EncodedLayer {
    pub fn rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn meta(&self) -> LayerMeta {
        LayerMeta::new(self.name.clone(), self.kind, self.kernel, self.c_in, self.c_out)
    }

    fn check(&self) -> Result<()> {
        let bad = |why: String| Error::MalformedFile(format!("encoding `{}`: {why}", self.name));
        if self.d == 0 || self.k_eff == 0 || !self.rows().is_multiple_of(self.d) {
            return Err(bad(format!("d={} does not divide {} rows", self.d, self.rows())));
        }
        if self.codebook.len() != self.k_eff * self.d {
            return Err(bad(format!("codebook has {} values", self.codebook.len())));
        }
        if self.codes.len() != self.rows() / self.d * self.c_out {
            return Err(bad(format!("{} codes", self.codes.len())));
        }
        if self.codes.iter().any(|&c| c as usize >= self.k_eff) {
            return Err(bad("code out of range".into()));
        }
        if self.permutation.len() != self.rows() {
            return Err(bad(format!("permutation has {} entries", self.permutation.len())));
        }
        let mut seen = vec![false; self.rows()];
        for &p in &self.permutation {
            match seen.get_mut(p as usize) {
                Some(s) if !*s => *s = true,
                _ => return Err(bad("permutation is not a bijection".into())),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CompressedEntry {
    Uncompressed(TensorRecord),
    Encoded(EncodedLayer),
}

impl CompressedEntry {
    pub fn name(&self) -> &str {
        match self {
            CompressedEntry::Uncompressed(t) => &t.name,
            CompressedEntry::Encoded(e) => &e.name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CompressedModel {
    pub layers: Vec<LayerMeta>,
    pub edges: Vec<(String, String)>,
    pub entries: Vec<CompressedEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum EntryManifest {
    Uncompressed {
        name: String,
        dtype: DType,
        shape: Vec<usize>,
        offset: u64,
        nbytes: u64,
    },
    Encoded {
        name: String,
        kind: LayerKind,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        d: usize,
        k_eff: usize,
        code_bits: u32,
        perm_block: usize,
        codebook_offset: u64,
        codes_offset: u64,
        codes_nbytes: u64,
        perm_offset: u64,
    },
}

#[derive(Serialize, Deserialize)]
struct CompressedManifest {
    entry_count: usize,
    layers: Vec<LayerMeta>,
    edges: Vec<(String, String)>,
    entries: Vec<EntryManifest>,
}

pub fn compressed_to_bytes(model: &CompressedModel) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(model.entries.len());
    for entry in &model.entries {
        match entry {
            CompressedEntry::Uncompressed(t) => {
                if t.data.len() != t.numel() * t.dtype.width() {
                    return Err(Error::ShapeMismatch(format!("tensor `{}` payload size", t.name)));
                }
                entries.push(EntryManifest::Uncompressed {
                    name: t.name.clone(),
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                    offset: payload.len() as u64,
                    nbytes: t.data.len() as u64,
                });
                payload.extend_from_slice(&t.data);
            }
            CompressedEntry::Encoded(e) => {
                e.check()?;
                let bits = code_bits(e.k_eff);
                let codebook_offset = payload.len() as u64;
                for v in &e.codebook {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                let codes_offset = payload.len() as u64;
                let packed = pack_codes(&e.codes, bits);
                payload.extend_from_slice(&packed);
                let perm_offset = payload.len() as u64;
                for p in &e.permutation {
                    payload.extend_from_slice(&p.to_le_bytes());
                }
                entries.push(EntryManifest::Encoded {
                    name: e.name.clone(),
                    kind: e.kind,
                    kernel: e.kernel,
                    c_in: e.c_in,
                    c_out: e.c_out,
                    d: e.d,
                    k_eff: e.k_eff,
                    code_bits: bits,
                    perm_block: e.perm_block,
                    codebook_offset,
                    codes_offset,
                    codes_nbytes: packed.len() as u64,
                    perm_offset,
                });
            }
        }
    }
    let manifest = CompressedManifest {
        entry_count: entries.len(),
        layers: model.layers.clone(),
        edges: model.edges.clone(),
        entries,
    };
    let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = write_frame(COMPRESSED_MAGIC, &manifest, payload.len());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn compressed_from_bytes(bytes: &[u8]) -> Result<CompressedModel> {
    let (manifest, payload) = read_frame(COMPRESSED_MAGIC, bytes)?;
    let manifest: CompressedManifest = serde_json::from_slice(manifest)
        .map_err(|e| Error::MalformedFile(format!("manifest: {e}")))?;
    if manifest.entry_count != manifest.entries.len() {
        return Err(Error::MalformedFile(format!(
            "entry count {} but {} entries listed",
            manifest.entry_count,
            manifest.entries.len()
        )));
    }
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in manifest.entries {
        let entry = match e {
            EntryManifest::Uncompressed { name, dtype, shape, offset, nbytes } => {
                let data = payload_slice(payload, offset, nbytes, &name)?.to_vec();
                let t = TensorRecord { name, dtype, shape, data };
                if t.data.len() != t.numel() * t.dtype.width() {
                    return Err(Error::MalformedFile(format!("tensor `{}` payload size", t.name)));
                }
                CompressedEntry::Uncompressed(t)
            }
            EntryManifest::Encoded {
                name,
                kind,
                kernel,
                c_in,
                c_out,
                d,
                k_eff,
                code_bits: bits,
                perm_block,
                codebook_offset,
                codes_offset,
                codes_nbytes,
                perm_offset,
            } => {
                if k_eff == 0 || d == 0 || bits != code_bits(k_eff) {
                    return Err(Error::MalformedFile(format!("encoding `{name}`: bad geometry")));
                }
                let rows = c_in * kernel * kernel;
                let n_codes = rows / d * c_out;
                let cb = payload_slice(payload, codebook_offset, (k_eff * d * 2) as u64, &name)?;
                let codebook = cb.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
                if codes_nbytes != packed_len(n_codes, bits) as u64 {
                    return Err(Error::MalformedFile(format!("encoding `{name}`: codes size")));
                }
                let codes = unpack_codes(payload_slice(payload, codes_offset, codes_nbytes, &name)?, bits, n_codes)?;
                let pm = payload_slice(payload, perm_offset, (rows * 4) as u64, &name)?;
                let permutation = pm.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
                let enc = EncodedLayer {
                    name,
                    kind,
                    kernel,
                    c_in,
                    c_out,
                    d,
                    k_eff,
                    codebook,
                    codes,
                    permutation,
                    perm_block,
                };
                enc.check()?;
                CompressedEntry::Encoded(enc)
            }
        };
        entries.push(entry);
    }
    Ok(CompressedModel { layers: manifest.layers, edges: manifest.edges, entries })
}

/// Writes `model` and returns the number of bytes on disk.
pub fn save_compressed(model: &CompressedModel, path: impl AsRef<Path>) -> Result<u64> {
    let bytes = compressed_to_bytes(model)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_compressed(path: impl AsRef<Path>) -> Result<CompressedModel> {
    compressed_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::FRAME_PREFIX_LEN;

    fn encoding(k_eff: usize, d: usize, c_in: usize, c_out: usize, kernel: usize) -> EncodedLayer {
        let rows = c_in * kernel * kernel;
        let n_codes = rows / d * c_out;
        EncodedLayer {
            name: "layer".into(),
            kind: if kernel == 1 { LayerKind::Fc } else { LayerKind::Conv },
            kernel,
            c_in,
            c_out,
            d,
            k_eff,
            codebook: (0..k_eff * d).map(|i| half::f16::from_f32(i as f32 * 0.01).to_bits()).collect(),
            codes: (0..n_codes).map(|i| ((i * 7919) % k_eff) as u32).collect(),
            permutation: (0..rows as u32).rev().collect(),
            perm_block: 1,
        }
    }

    #[test]
    fn empty_model_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.pqfc");
        let n = save_compressed(&CompressedModel::default(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(n as usize, bytes.len());
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(n as usize, FRAME_PREFIX_LEN + manifest_len);
        assert_eq!(load_compressed(&path).unwrap(), CompressedModel::default());
    }

    #[test]
    fn eight_bit_codes_section() {
        // 3x3 conv, 64 -> 64 channels, d = 9: a 64 x 64 code matrix
        let enc = encoding(256, 9, 64, 64, 3);
        let model = CompressedModel { entries: vec![CompressedEntry::Encoded(enc)], ..Default::default() };
        let bytes = compressed_to_bytes(&model).unwrap();
        let (manifest, _) = read_frame(COMPRESSED_MAGIC, &bytes).unwrap();
        let m: serde_json::Value = serde_json::from_slice(manifest).unwrap();
        assert_eq!(m["entries"][0]["codes_nbytes"], 4096);
        assert_eq!(compressed_from_bytes(&bytes).unwrap(), model);
    }

    #[test]
    fn eleven_bit_codes_section() {
        let enc = encoding(2048, 4, 512, 100, 1);
        let model = CompressedModel { entries: vec![CompressedEntry::Encoded(enc.clone())], ..Default::default() };
        let bytes = compressed_to_bytes(&model).unwrap();
        let (manifest, _) = read_frame(COMPRESSED_MAGIC, &bytes).unwrap();
        let m: serde_json::Value = serde_json::from_slice(manifest).unwrap();
        assert_eq!(m["entries"][0]["code_bits"], 11);
        assert_eq!(m["entries"][0]["codes_nbytes"], (128 * 100 * 11usize).div_ceil(8));
        let back = compressed_from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn truncated_file() {
        let model = CompressedModel {
            entries: vec![
                CompressedEntry::Uncompressed(TensorRecord::from_f32("t", vec![3], &[1.0, 2.0, 3.0])),
                CompressedEntry::Encoded(encoding(16, 4, 8, 4, 1)),
            ],
            ..Default::default()
        };
        let bytes = compressed_to_bytes(&model).unwrap();
        assert!(matches!(compressed_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::MalformedFile(_))));
        assert!(matches!(compressed_from_bytes(&bytes[..10]), Err(Error::MalformedFile(_))));
    }
}
