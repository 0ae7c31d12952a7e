//! Random sources.
//!
//! Everything stochastic in this crate draws through an explicit handle.
//! Per-image streams are derived from a global seed and the image id, so a
//! parallel run consumes exactly the same numbers as a serial one.

use std::collections::VecDeque;

use rand::distr::{Distribution, Open01};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The concrete generator used throughout the crate and the CLI.
pub type SeededRng = ChaCha8Rng;

/// A source of uniform draws on the open interval `(0, 1)`.
pub trait UniformSource {
    fn next_uniform(&mut self) -> f64;
}

impl<R: RngCore + ?Sized> UniformSource for R {
    fn next_uniform(&mut self) -> f64 {
        Open01.sample(self)
    }
}

/// Replays a fixed list of uniforms. Used to trace sampling code by hand.
#[derive(Debug, Clone)]
pub struct ScriptedUniforms {
    values: VecDeque<f64>,
}

impl ScriptedUniforms {
    pub fn new(values: impl IntoIterator<Item = f64>) -> Self {
        Self {
            values: values.into_iter().collect(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.values.len()
    }
}

impl UniformSource for ScriptedUniforms {
    /// # Panics
    ///
    /// Panics when the script is exhausted.
    fn next_uniform(&mut self) -> f64 {
        self.values
            .pop_front()
            .expect("scripted uniform source exhausted")
    }
}

pub fn rng_from_seed(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// Derives an independent stream from `seed` and a list of labels (image id,
/// trial number, ...). Stable across platforms and releases.
pub fn derive_rng(seed: u64, parts: &[&[u8]]) -> SeededRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    SeededRng::from_seed(key)
}
