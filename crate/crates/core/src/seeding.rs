//! Deterministic derivation of per-task RNG seeds from one master seed.

/// splitmix64 finaliser; bijective on u64.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A seed for sub-task `stream` of a run seeded by `master`. Distinct streams
/// give statistically independent generators; the mapping is pure, so any
/// scheduling of the sub-tasks reproduces the same draws.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    mix(master ^ mix(stream.wrapping_add(0x517cc1b727220a95)))
}
