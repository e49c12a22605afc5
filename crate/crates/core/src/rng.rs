//! Counter-based pseudo-random numbers.
//!
//! Every draw is a pure function of `(seed, stream, counter)`:
//!
//! ```text
//! key    = mix(seed)
//! bits   = mix(key ^ mix(stream · 0xD1B54A32D192ED03) + counter · 0x9E3779B97F4A7C15)
//! mix(z) = splitmix64 finalizer:
//!          z = (z ^ (z >> 30)) · 0xBF58476D1CE4E5B9
//!          z = (z ^ (z >> 27)) · 0x94D049BB133111EB
//!          z ^ (z >> 31)
//! ```
//!
//! Uniform reals use the top 53 bits: `u = (bits >> 11) · 2⁻⁵³ ∈ [0, 1)`.
//! Because there is no hidden state, replicate `k` at step `t` samples the
//! same values regardless of evaluation order or thread count.

use nalgebra::DVector;

use crate::model::BoxSet;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_MUL: u64 = 0xD1B5_4A32_D192_ED03;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: splitmix64(seed),
        }
    }

    pub fn bits(&self, stream: u64, counter: u64) -> u64 {
        let s = splitmix64(stream.wrapping_mul(STREAM_MUL));
        splitmix64((self.key ^ s).wrapping_add(counter.wrapping_mul(GOLDEN)))
    }

    pub fn uniform01(&self, stream: u64, counter: u64) -> f64 {
        (self.bits(stream, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi]`; returns `lo` exactly when the interval is degenerate.
    pub fn uniform(&self, lo: f64, hi: f64, stream: u64, counter: u64) -> f64 {
        if lo == hi {
            return lo;
        }
        let v = lo + (hi - lo) * self.uniform01(stream, counter);
        v.clamp(lo, hi)
    }

    /// One point of a finite box; coordinate `k` uses counter `base + k`.
    pub fn sample_box(&self, bounds: &BoxSet, stream: u64, base: u64) -> DVector<f64> {
        DVector::from_iterator(
            bounds.dim(),
            (0..bounds.dim()).map(|k| {
                self.uniform(bounds.lower()[k], bounds.upper()[k], stream, base + k as u64)
            }),
        )
    }
}
