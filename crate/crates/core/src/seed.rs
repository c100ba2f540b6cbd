//! Stable derivation of child seeds from a parent seed and a key.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Seed for the item `key` under `parent`, identical on every platform and
/// independent of iteration order.
pub fn derive_seed(parent: u64, key: &str) -> u64 {
    let mut bytes = parent.to_le_bytes().to_vec();
    bytes.extend_from_slice(key.as_bytes());
    splitmix(fnv1a(&bytes))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
