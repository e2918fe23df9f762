//! Deterministic per-purpose random streams.
//!
//! Every random decision in the framework draws from an [`RngStream`].
//! Streams are derived from `(master_seed, stream_index)` by a SplitMix64
//! avalanche mix of `master_seed XOR stream_index`, then advanced with a
//! xorshift64* generator. No OS entropy anywhere, so any run is a pure
//! function of its master seed.

use crate::scalar::Scalar;

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(SPLITMIX_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_index: u64,
    state: u64,
    spare_normal: Option<f64>,
}

/// Derive the stream `(master_seed, index)`. Equal pairs yield identical
/// sequences; distinct indices give statistically independent streams.
pub fn derive_stream(master_seed: u64, index: u64) -> RngStream {
    let mut state = splitmix64(master_seed ^ index);
    if state == 0 {
        state = SPLITMIX_GAMMA;
    }
    RngStream {
        master_seed,
        stream_index: index,
        state,
        spare_normal: None,
    }
}

impl RngStream {
    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_index(&self) -> u64 {
        self.stream_index
    }

    /// Derive a child stream; the child index is mixed into this stream's
    /// own identity so nested derivations never collide with siblings.
    pub fn substream(&self, index: u64) -> RngStream {
        derive_stream(splitmix64(self.master_seed ^ self.stream_index.rotate_left(17)), index)
    }

    pub fn next_u64(&mut self) -> u64 {
        // xorshift64*
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a log argument.
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box–Muller; pairs are generated and the
    /// second value cached.
    pub fn next_normal_f64(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn next_normal<T: Scalar>(&mut self) -> T {
        T::of(self.next_normal_f64())
    }

    pub fn fill_normal<T: Scalar>(&mut self, out: &mut [T]) {
        for x in out {
            *x = self.next_normal();
        }
    }

    /// Uniform in [lo, hi).
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n), unbiased via rejection.
    pub fn next_usize(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_usize bound must be positive");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_usize(i + 1);
            items.swap(i, j);
        }
    }

    /// Sample `k` distinct indices from [0, n) uniformly without
    /// replacement, in selection order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} of {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_usize(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}
