//! Seeded, counter-based random stream.
//!
//! Every draw is a pure function of `(seed, counter)`, so refactoring the
//! order in which call sites consume randomness never shifts the values a
//! given counter position produces. Identical seeds reproduce identical
//! sequences across runs and platforms.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic random stream (SplitMix64 with random access by counter).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, counter: 0 }
    }

    /// Independent sub-stream; used to give each worker, batch slot or
    /// experiment cell its own reproducible randomness.
    pub fn derive(&self, stream_id: u64) -> RngStream {
        RngStream::new(mix64(self.seed ^ mix64(stream_id.wrapping_add(GOLDEN))))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    #[inline]
    fn raw(&mut self) -> u64 {
        self.counter += 1;
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.raw() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; used where a logarithm must not see zero.
    #[inline]
    fn uniform_open(&mut self) -> f64 {
        ((self.raw() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// One normal draw via Box-Muller. Consumes exactly two counter slots.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        mean + std * r * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, n). Multiply-shift; n must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.raw() as u128 * n as u128) >> 64) as usize
    }

    /// Fair sign, +1.0 or -1.0.
    pub fn sign(&mut self) -> f64 {
        if self.raw() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f64], mean: f64, std: f64) {
        for v in out {
            *v = self.normal(mean, std);
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
