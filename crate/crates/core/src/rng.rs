//! Deterministic counter-based random number generator.
//!
//! Every experiment owns one `Rng` seeded from the run seed and derives
//! named substreams for independent purposes (init, batches, masking).
//! Identical seed plus identical call sequence yields an identical stream,
//! which is what the byte-identical-rerun guarantees rest on.

const GOLDEN: u64 = 0x9e3779b97f4a7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Splittable counter-based generator (SplitMix64 finalizer over a counter).
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// Derive an independent named substream. Substreams of equal name on
    /// equal parents are identical; distinct names decorrelate.
    pub fn substream(&self, name: &str) -> Rng {
        Rng {
            seed: mix64(self.seed ^ fnv1a(name.as_bytes()).wrapping_mul(GOLDEN)),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed ^ self.counter.wrapping_mul(GOLDEN))
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / ((1u64 << 53) as f64))
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Rejection-free modulo is fine here: streams
    /// are not adversarial and n is tiny relative to 2^64.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fill with uniform values in [-scale, scale].
    pub fn fill_uniform(&mut self, out: &mut [f64], scale: f64) {
        for v in out.iter_mut() {
            *v = self.uniform(-scale, scale);
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
