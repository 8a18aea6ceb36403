//! Counter-based random number generation.
//!
//! Every draw is a pure function of (seed, stream, step, slot), so a path's
//! noise never depends on how many paths are simulated or on execution
//! order. This is what makes common-random-number comparisons between runs
//! of different sizes meaningful and keeps parallel simulation bit-exact.

/// splitmix64 finalizer; full-period 64-bit mixer.
#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a 4-tuple key into a single well-distributed 64-bit word.
#[inline]
fn mix_key(seed: u64, stream: u64, step: u64, slot: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    h = splitmix64(h ^ step.wrapping_mul(0xd1b5_4a32_d192_ed03));
    splitmix64(h ^ slot.wrapping_mul(0x8cb9_2ba7_2f3d_8dd7))
}

/// Uniform draw in the open interval (0, 1).
#[inline]
fn uniform_open01(word: u64) -> f64 {
    // 53 significant bits, offset by half an ulp to exclude 0
    ((word >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard normal draw keyed by (seed, stream, step, slot), via Box-Muller.
#[inline]
pub fn normal_draw(seed: u64, stream: u64, step: u64, slot: u64) -> f64 {
    let u1 = uniform_open01(mix_key(seed, stream, step, slot.wrapping_mul(2)));
    let u2 = uniform_open01(mix_key(seed, stream, step, slot.wrapping_mul(2).wrapping_add(1)));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform draw in (0, 1) keyed by (seed, stream, step, slot).
#[inline]
pub fn uniform_draw(seed: u64, stream: u64, step: u64, slot: u64) -> f64 {
    uniform_open01(mix_key(seed, stream, step, slot))
}

/// Index draw in `0..n` keyed by the tuple; used by bootstrap resampling.
#[inline]
pub fn index_draw(seed: u64, stream: u64, step: u64, slot: u64, n: usize) -> usize {
    debug_assert!(n > 0);
    (mix_key(seed, stream, step, slot) % n as u64) as usize
}
