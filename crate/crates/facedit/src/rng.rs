//! Counter-based deterministic random numbers.
//!
//! Every draw is a pure function of `(seed, position)`: the generator hashes
//! `seed + (position + 1) * GOLDEN` through the splitmix64 finalizer. This
//! gives identical sequences on every platform and lets parallel producers
//! work from disjoint streams without coordination; a stream is just another
//! seed derived with [`RngState::stream`].

use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Seed plus stream position. Copyable by design: forks are explicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    position: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, position: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    /// Derives an independent named sub-stream. The child starts at
    /// position 0 and never collides with the parent or with other labels.
    pub fn stream(&self, label: &str) -> RngState {
        RngState::new(mix(self.seed ^ fnv1a(label.as_bytes())))
    }

    /// Derives an independent sub-stream by index (per-sample streams).
    pub fn stream_indexed(&self, label: &str, index: u64) -> RngState {
        RngState::new(mix(
            self.seed ^ fnv1a(label.as_bytes()) ^ index.wrapping_mul(GOLDEN),
        ))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.position = self.position.wrapping_add(1);
        mix(self.seed.wrapping_add(self.position.wrapping_mul(GOLDEN)))
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        // Toy-scale n; modulo bias is irrelevant at n << 2^64.
        self.next_u64() % n.max(1)
    }

    /// Pair of independent standard normals via Box-Muller.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let th = std::f64::consts::TAU * u2;
        (r * th.cos(), r * th.sin())
    }

    pub fn normal(&mut self) -> f64 {
        self.normal_pair().0
    }
}

/// Tensor of standard normal draws. Consumes draws pairwise in flat order,
/// so the result depends only on (state, shape).
pub fn seeded_normal(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let (a, b) = rng.normal_pair();
        data.push(a as f32);
        if data.len() < n {
            data.push(b as f32);
        }
    }
    Tensor::from_vec(shape, data).expect("shape/product match by construction")
}
