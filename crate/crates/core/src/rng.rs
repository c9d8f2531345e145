//! Deterministic, portable random streams.
//!
//! Every stochastic component draws from an [`RngStream`] derived from the
//! experiment root seed plus a structured stream id (for example
//! `(image_id, trial)`). Derivation hashes the seed and id with SHA-256 into a
//! ChaCha12 key, so identical `(root_seed, stream_id)` pairs produce identical
//! byte streams on any platform and distinct ids produce independent streams.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Identity of a derived random stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    root_seed: u64,
    stream_id: Vec<u64>,
}

/// Derives the stream for `(root_seed, stream_id)`.
pub fn rng_derive(root_seed: u64, stream_id: &[u64]) -> RngStream {
    RngStream {
        root_seed,
        stream_id: stream_id.to_vec(),
    }
}

impl RngStream {
    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn stream_id(&self) -> &[u64] {
        &self.stream_id
    }

    /// Child stream with `id` appended, for fan-out inside a component.
    pub fn child(&self, id: u64) -> RngStream {
        let mut stream_id = self.stream_id.clone();
        stream_id.push(id);
        RngStream {
            root_seed: self.root_seed,
            stream_id,
        }
    }

    /// Fresh generator positioned at the start of the stream.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut hasher = Sha256::new();
        hasher.update(b"akb-rng-v1");
        hasher.update(self.root_seed.to_le_bytes());
        hasher.update((self.stream_id.len() as u64).to_le_bytes());
        for id in &self.stream_id {
            hasher.update(id.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha12Rng::from_seed(seed)
    }

    /// First `n` bytes of the stream.
    pub fn first_bytes(&self, n: usize) -> Vec<u8> {
        let mut rng = self.rng();
        let mut out = vec![0u8; n];
        rng.fill_bytes(&mut out);
        out
    }
}

/// Standard normal draw helper used by the channel and the stub embedder.
pub fn sample_standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    StandardNormal.sample(rng)
}
