//! Deterministic seed derivation for per-task RNG streams.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one `(layer, head)` task, independent of scheduling order.
pub fn task_seed(base: u64, layer: usize, head: usize) -> u64 {
    mix64(mix64(mix64(base) ^ layer as u64) ^ head as u64)
}

/// Seed for a numbered sub-stream (restart index, repeat index, ...).
pub fn stream_seed(base: u64, index: usize) -> u64 {
    mix64(mix64(base).wrapping_add(index as u64))
}
