//! Fan-out of a single root seed into independent stream seeds.

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `index` under `root`. Distinct indices give unrelated streams.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    mix(root ^ mix(index.wrapping_add(0x5EED)))
}
