//! 64-bit FNV-1a, used wherever a hash must be identical across runs,
//! platforms and crate versions: fold assignment, vocabulary fingerprints
//! and seed derivation. `std::hash` makes no such stability promise.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Derives an independent stream seed from a base seed, a purpose tag and an
/// index. Every randomized stage of a run draws its seed through this, so a
/// single `--seed` governs the whole pipeline without coupling the stages.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut buf = Vec::with_capacity(16 + tag.len());
    buf.extend_from_slice(&base.to_le_bytes());
    buf.extend_from_slice(tag.as_bytes());
    buf.extend_from_slice(&index.to_le_bytes());
    fnv1a(&buf)
}
