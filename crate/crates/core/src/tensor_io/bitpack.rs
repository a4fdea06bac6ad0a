use crate::error::{Error, Result};

/// Smallest number of bits that can index `k_eff` centroids.
pub fn code_bits(k_eff: usize) -> u32 {
    assert!(k_eff >= 1, "codebook must be non-empty");
    usize::BITS - (k_eff - 1).leading_zeros()
}

pub fn packed_len(count: usize, bits: u32) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Packs codes LSB-first into a contiguous bitstream.
pub fn pack_codes(codes: &[u32], bits: u32) -> Vec<u8> {
    assert!(bits <= 32);
    let mut out = Vec::with_capacity(packed_len(codes.len(), bits));
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &c in codes {
        debug_assert!(bits == 32 || u64::from(c) < (1u64 << bits));
        acc |= u64::from(c) << filled;
        filled += bits;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    out
}

pub fn unpack_codes(bytes: &[u8], bits: u32, count: usize) -> Result<Vec<u32>> {
    if bytes.len() != packed_len(count, bits) {
        return Err(Error::MalformedFile(format!(
            "codes section has {} bytes, expected {}",
            bytes.len(),
            packed_len(count, bits)
        )));
    }
    let mask: u64 = if bits == 32 { u32::MAX as u64 } else { (1u64 << bits) - 1 };
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut it = bytes.iter();
    for _ in 0..count {
        while filled < bits {
            acc |= u64::from(*it.next().unwrap()) << filled;
            filled += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= bits;
        filled -= bits;
    }
    Ok(out)
}
