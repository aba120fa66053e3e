//! Per-component seed derivation.
//!
//! Every random stream in a run is keyed by `(global seed, component tag,
//! index)`. The tag is folded in with 64-bit FNV-1a and the result is passed
//! through the SplitMix64 finalizer, so changing any part of the key gives an
//! unrelated stream while the mapping stays stable across platforms.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(global: u64, tag: &str, index: u64) -> u64 {
    let mut h = FNV_OFFSET;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(splitmix64(global ^ h).wrapping_add(index))
}
