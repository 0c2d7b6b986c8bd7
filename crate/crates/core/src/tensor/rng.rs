//! Counter-based random stream: every draw is a pure function of its key and
//! position, so dropout masks do not depend on evaluation order.

/// Identifies one dropout site at one optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u64,
    pub step: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a sequence of integers into one well-mixed seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |h, &p| splitmix64(h ^ p))
}

/// Uniform draw in `[0, 1)` at position `index` of the stream named by `key`.
pub fn uniform01(key: DropoutKey, index: u64) -> f64 {
    let h = mix_seed(&[key.seed, key.layer, key.step, index]);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
