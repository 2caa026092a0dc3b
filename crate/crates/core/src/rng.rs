//! Counter-based splittable random number generator.
//!
//! Streams are keyed by a tuple of 64-bit labels, typically
//! (seed, purpose, replicate, particle, step). Each key yields an independent
//! output stream produced by the SplitMix64 finalizer in counter mode, so
//! simulations are reproducible under any parallel execution order and
//! particle 0's noise does not depend on N.

use rand::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    /// Derive an independent stream from a sequence of labels.
    pub fn from_stream(labels: &[u64]) -> Self {
        let mut key = 0x853C_49E6_748F_EA9B_u64;
        for &v in labels {
            key = mix64(key.wrapping_add(GOLDEN).wrapping_add(mix64(v)));
        }
        CounterRng { key, counter: 0 }
    }
}

impl RngCore for CounterRng {
    #[inline]
    fn next_u64(&mut self) -> u64 {
        let out = mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)).wrapping_add(GOLDEN));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        let mut chunks = dest.chunks_exact_mut(8);
        for chunk in &mut chunks {
            chunk.copy_from_slice(&self.next_u64().to_le_bytes());
        }
        let rem = chunks.into_remainder();
        if !rem.is_empty() {
            let bytes = self.next_u64().to_le_bytes();
            rem.copy_from_slice(&bytes[..rem.len()]);
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

/// One standard normal draw from a counter stream.
#[inline]
pub fn standard_normal(rng: &mut CounterRng) -> f64 {
    use rand::Rng;
    rng.sample(rand_distr::StandardNormal)
}

/// Stream purpose tags, kept distinct so draws never alias across uses.
pub mod purpose {
    pub const INIT_STATE: u64 = 1;
    pub const EM_STEP: u64 = 2;
    pub const LG_STEP: u64 = 3;
    pub const RESTART: u64 = 4;
}
