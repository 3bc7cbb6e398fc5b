//! Seedable counter-based random streams.
//!
//! A stream is identified by `(seed, stream_id)`. The generator is ChaCha8,
//! whose keystream is a pure function of key, stream id and block counter, so
//! substreams handed to worker threads are reproducible regardless of the
//! order in which workers run.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug)]
pub struct RngStream {
    inner: ChaCha8Rng,
    seed: u64,
    stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, seed, stream }
    }

    /// Child stream for `label`. Does not advance `self`.
    pub fn substream(&self, label: u64) -> Self {
        Self::new(self.seed, mix(self.stream ^ mix(label.wrapping_add(0x9E37_79B9_7F4A_7C15))))
    }

    /// Child stream addressed by a path of labels, e.g. `[iteration, prompt, sample]`.
    pub fn substream_path(&self, labels: &[u64]) -> Self {
        let mut s = self.stream;
        for &l in labels {
            s = mix(s ^ mix(l.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        }
        Self::new(self.seed, s)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Uniform sample in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `[0, n)`.
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // n is tiny at desk scale; modulo bias is below 2^-50.
        (self.inner.next_u64() % n as u64) as usize
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
