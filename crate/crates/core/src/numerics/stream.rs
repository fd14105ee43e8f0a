//! Counter-based standard-normal stream.
//!
//! Every draw is a pure function of `(seed, key, coordinate)`: there is no
//! generator state, so the same key yields the same vector regardless of
//! which thread asks or in what order. Uniforms come from a SplitMix64-style
//! finalizer over the packed counter; pairs of uniforms become normals via
//! Box-Muller.

use std::f64::consts::TAU;

/// Identifies one Gaussian draw: the sample it belongs to, the exit that
/// consumes it, and the Monte-Carlo index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DrawKey {
    pub sample: u64,
    pub exit: u32,
    pub draw: u32,
}

impl DrawKey {
    pub const fn new(sample: u64, exit: u32, draw: u32) -> Self {
        Self { sample, exit, draw }
    }
}

/// Stateless keyed source of `N(0, 1)` variates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianStream {
    seed: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed for a named pipeline component.
///
/// The name is hashed with 64-bit FNV-1a and folded into the seed through
/// the SplitMix64 finalizer.
pub fn derive_seed(seed: u64, component: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in component.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix64(seed.wrapping_add(GOLDEN) ^ mix64(h))
}

impl GaussianStream {
    pub const fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub const fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    fn base(&self, key: DrawKey) -> u64 {
        let packed = (u64::from(key.exit) << 32) | u64::from(key.draw);
        mix64(self.seed ^ mix64(key.sample.wrapping_add(GOLDEN) ^ mix64(packed.wrapping_mul(GOLDEN))))
    }

    /// `n` standard-normal draws for `key`.
    pub fn draw(&self, key: DrawKey, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        self.fill(key, &mut out);
        out
    }

    /// Fills `out` with the first `out.len()` coordinates for `key`.
    pub fn fill(&self, key: DrawKey, out: &mut [f64]) {
        let base = self.base(key);
        for (pair, chunk) in out.chunks_mut(2).enumerate() {
            let a = mix64(base ^ (2 * pair as u64 + 1).wrapping_mul(GOLDEN));
            let b = mix64(a ^ 0x6a09_e667_f3bc_c909);
            // u1 in (0, 1], u2 in [0, 1)
            let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
            let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (TAU * u2).sin_cos();
            chunk[0] = r * c;
            if chunk.len() > 1 {
                chunk[1] = r * s;
            }
        }
    }
}

/// `n` standard-normal draws reproducible from `(stream, key)`.
pub fn draw_gaussian(stream: &GaussianStream, key: DrawKey, n: usize) -> Vec<f64> {
    stream.draw(key, n)
}
