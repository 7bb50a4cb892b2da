//! Deterministic seed derivation. Every random stream in the project is a
//! ChaCha stream seeded through these helpers, so a run is a pure function
//! of (seed, config, corpus).

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_str(s: &str) -> u64 {
    // FNV-1a.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from a base seed and a label.
pub fn derive(base: u64, label: &str) -> u64 {
    mix(base ^ hash_str(label))
}

/// Derive a child seed from a base seed, a label and an index.
pub fn derive_n(base: u64, label: &str, n: u64) -> u64 {
    mix(mix(base ^ hash_str(label)) ^ n)
}
