//! Certified quantized attention over a tiered KV cache.
//!
//! Keys are stored as per-channel INT8 and values as per-group INT4 in Tier 1,
//! with the originals kept in Tier 2. Each decode step scores every block on
//! quantized keys, promotes the blocks that carry most of the estimated mass
//! to full precision, and emits a per-head certificate bounding the output
//! error against reference attention. When a runtime monitor cannot vouch for
//! the fast path the step escalates through a fallback ladder that ends in
//! dense attention on the originals.
//!
//! ```
//! use certkv::{PolicyConfig, TieredCache};
//! use certkv::harness::{run_decode_step, KvScratch};
//!
//! let mut cache = TieredCache::new(16, 8, 4).unwrap();
//! for t in 0..40 {
//!     let k: Vec<f32> = (0..8).map(|c| ((t * 8 + c) as f32).sin()).collect();
//!     let v: Vec<f32> = (0..8).map(|c| ((t + c) as f32).cos()).collect();
//!     cache.append_token(&k, &v).unwrap();
//! }
//! let policy = PolicyConfig::default();
//! let mut scratch = vec![KvScratch::new(&policy)];
//! let query = vec![vec![0.5f32; 8]];
//! let step = run_decode_step(0, &query, &[cache], &mut scratch, &policy, 7).unwrap();
//! assert_eq!(step.heads[0].output.len(), 8);
//! ```

pub mod cache;
pub mod certify;
pub mod engine;
pub mod error;
pub mod harness;
pub mod ladder;
pub mod quantizer;
pub mod verify;

pub use cache::{PageInReport, PayloadKind, QuantizedBlock, ScratchCache, StorageReport, TieredCache};
pub use certify::{
    assemble_certificate, brute_force_tv, compute_delta, compute_delta_all, e_key_bound, e_val_exact, mass_upper_bound,
    tail_mass_bound, tv_bound, tv_vertex_construction, Certificate, CertificateInputs, ExponentMode, ReturnedKind,
    CERTIFICATE_SLACK,
};
pub use engine::{
    adaptive_topk, dense_attention, phase1_score, phase2_attend, ref_attend, ref_attention, reference_block_scores,
    scaled_query_score, AttendResult, BlockScores, BlockStat, SelectionDecision, COVERAGE_EPSILON,
};
pub use error::{Error, Result};
pub use ladder::{
    boundary_check, exploration_select, exploration_spot_check, ranking_consistency, rung1_expand,
    rung2_value_promotions, rung3_per_head, rung4_all_heads, rung4_staging_bytes, score_canary, top_r, FallbackCause,
    FallbackEvent, PolicyConfig, Rung1Mode, Rung4Outcome,
};
pub use quantizer::{
    dequantize_key_block, dequantize_value_block, quantize_key_block, quantize_value_block, reconstruction_residual,
    residual_within, BlockAnnotations, KeyBlockQuant, ValueBlockQuant,
};
