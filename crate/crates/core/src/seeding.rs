//! Per-stream RNG derivation.
//!
//! Every random stream is seeded from the master seed and a stable string tag
//! such as `"source/θ=45/rep=0"`: `SHA-256(master_seed as u64 LE ‖ tag)` is
//! used directly as the 32-byte ChaCha8 seed. Adding angles or repetitions
//! never perturbs existing streams, and each pipeline stage has its own tag so
//! reordering stages cannot silently shift another stage's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn derive_seed(master_seed: u64, tag: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.finalize().into()
}

/// First eight bytes of [`derive_seed`], for interfaces that take a `u64` seed.
pub fn derive_seed_u64(master_seed: u64, tag: &str) -> u64 {
    let s = derive_seed(master_seed, tag);
    u64::from_le_bytes(s[..8].try_into().expect("8 bytes"))
}

pub fn stream_rng(master_seed: u64, tag: &str) -> StreamRng {
    ChaCha8Rng::from_seed(derive_seed(master_seed, tag))
}

/// Tag for one pipeline stage of one angle/repetition stream.
pub fn stage_tag(stage: &str, theta_deg: f64, rep: u32) -> String {
    format!("{stage}/θ={theta_deg}/rep={rep}")
}
