//! Deterministic counter-based random source (`splitmix64-ctr-v1`).
//!
//! Every stochastic choice in this workspace draws from this generator, keyed
//! by an explicit `(seed, stream)` pair. The n-th output is a pure function of
//! `(seed, stream, n)`, so independent streams can be evaluated out of order
//! or in parallel and still reproduce byte-identical results. Manifests record
//! the generator name so other implementations can match the byte stream.

/// Golden-ratio increment used by the splitmix64 counter sequence.
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Stream salt (fractional bits of sqrt(2)); decorrelates stream ids from seeds.
const STREAM_SALT: u64 = 0x6a09_e667_f3bc_c909;

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds an ordered list of ids into a stream identifier.
///
/// Used to key sub-streams like "noise for sample 17 of dataset 3" without
/// bit-packing assumptions on the id widths.
pub fn derive_stream(parts: &[u64]) -> u64 {
    let mut acc = 0x243f_6a88_85a3_08d3u64; // pi fractional bits
    for &p in parts {
        acc = mix64(acc ^ p.wrapping_mul(GOLDEN));
    }
    acc
}

/// Stream domain tags. Each consumer owns one tag so identical numeric ids in
/// different subsystems never collide on the same stream.
pub mod domain {
    pub const DATAGEN: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const MASK: u64 = 4;
    pub const INIT: u64 = 5;
    pub const CONFLICT: u64 = 6;
    pub const EVAL: u64 = 7;
}

/// Counter-based PRNG: `out(n) = mix64(base + (n+1) * GOLDEN)`.
#[derive(Debug, Clone)]
pub struct CounterRng {
    base: u64,
    counter: u64,
    gauss_spare: Option<f64>,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let base = mix64(seed).wrapping_add(mix64(stream ^ STREAM_SALT));
        CounterRng {
            base,
            counter: 0,
            gauss_spare: None,
        }
    }

    /// The n-th raw output of this stream, independent of generator state.
    #[inline]
    pub fn at(&self, n: u64) -> u64 {
        mix64(self.base.wrapping_add(n.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a logarithm argument.
    #[inline]
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound) via rejection sampling (no modulo bias).
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be nonzero");
        let zone = u64::MAX - u64::MAX % bound;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Standard normal via Box-Muller; draws two uniforms per pair.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.gauss_spare.take() {
            return z;
        }
        let u1 = self.next_open01();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
