//! Harmonic-mean reward GRPO, iterative preference DPO with a moving
//! reference, and ELO aggregation of blind pairwise votes, all on a small
//! speech-token environment where every quantity is exactly computable.

// Range checks are written `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::field_reassign_with_default))]

pub mod annotator;
pub mod config;
pub mod dpo;
pub mod elo;
pub mod env;
pub mod eval;
pub mod grpo;
pub mod pipeline;
pub mod policy;
pub mod report;
pub mod reward;
pub mod scenario;
pub mod service;

/// Mixes a base seed with a path of indices (splitmix64 finalizer per
/// component), so every sampled candidate gets an independent, reproducible
/// stream regardless of evaluation order or thread count.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
