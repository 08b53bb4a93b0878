use super::codec::encode_value_into;
use super::types::Value;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |hash, &b| {
        (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Partition for a canonically encoded key. Every worker computes the same
/// index for the same key bytes.
pub fn hash_partition(key_bytes: &[u8], num_partitions: usize) -> usize {
    assert!(num_partitions >= 1, "num_partitions must be positive");
    (fnv1a64(key_bytes) % num_partitions as u64) as usize
}

/// Key material for a composite key: canonical encodings concatenated.
pub fn key_bytes<'a>(values: impl IntoIterator<Item = &'a Value>) -> Vec<u8> {
    let mut out = Vec::new();
    for value in values {
        encode_value_into(value, &mut out);
    }
    out
}
