//! Deterministic random-number streams.
//!
//! All randomness in the crate flows through seeded ChaCha generators derived
//! here. Streams are keyed by a root seed plus a label and optional integer
//! parts (worker id, example id, step), so parallel or reordered work always
//! sees the same draws for the same key.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Element, Tensor};
use crate::error::Result;

/// FNV-1a 64-bit hash, used to fold stream labels into seed material.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn key_from(words: &[u64]) -> [u8; 32] {
    let mut state = fnv1a(b"xfuse-rng-v1");
    for &w in words {
        state ^= w.wrapping_mul(0x9e3779b97f4a7c15);
        state = splitmix64(&mut state.clone()).wrapping_add(state.rotate_left(17));
    }
    let mut key = [0u8; 32];
    let mut s = state;
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    key
}

/// A generator for `(seed, label)`. Distinct labels give independent streams.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(key_from(&[seed, fnv1a(label.as_bytes())]))
}

/// A generator keyed by `(seed, label, parts...)`, for per-example or
/// per-step streams that must not depend on scheduling order.
pub fn stream_keyed(seed: u64, label: &str, parts: &[u64]) -> ChaCha8Rng {
    let mut words = Vec::with_capacity(parts.len() + 2);
    words.push(seed);
    words.push(fnv1a(label.as_bytes()));
    words.extend_from_slice(parts);
    ChaCha8Rng::from_seed(key_from(&words))
}

/// One standard-normal draw via Box–Muller (always consumes two uniforms).
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // u1 in (0, 1]: avoid ln(0).
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A vector of standard-normal draws.
pub fn normal_vec<E: Element, R: Rng>(rng: &mut R, n: usize) -> Vec<E> {
    (0..n).map(|_| E::from_f64(standard_normal(rng))).collect()
}

/// An untracked tensor of standard-normal draws.
pub fn normal_tensor<E: Element, R: Rng>(rng: &mut R, shape: &[usize]) -> Result<Tensor<E>> {
    let n = super::shape_numel(shape);
    Tensor::from_vec(normal_vec(rng, n), shape)
}

/// A vector of uniform draws in `[lo, hi)`.
pub fn uniform_vec<E: Element, R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<E> {
    (0..n)
        .map(|_| E::from_f64(lo + (hi - lo) * rng.gen::<f64>()))
        .collect()
}
