//! Deterministic seed derivation.
//!
//! All randomness in the crate flows from a single root seed. Independent
//! streams (one per stage, per probe, per pulse, per trial) are derived by
//! hashing the root seed together with a textual label and an index, so
//! results are reproducible regardless of how work is partitioned across
//! threads or re-ordered between runs.
//!
//! The derivation is two SplitMix64 finalization rounds over the root seed,
//! an FNV-1a hash of the label, and the index. SplitMix64 is the standard
//! seeding mixer for the xoshiro family and has full avalanche behavior;
//! two rounds over the combined words decorrelate even adjacent indices.

/// SplitMix64 finalization step.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive an independent sub-seed from `root` for stream `label` at `index`.
pub fn derive(root: u64, label: &str, index: u64) -> u64 {
    mix64(mix64(root ^ fnv1a(label)) ^ index)
}
