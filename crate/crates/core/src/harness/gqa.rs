//! Expected size of the per-cache union of promoted sets under GQA.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnionReport {
    pub tokens: usize,
    pub blocks: usize,
    pub k_eff: usize,
    pub union_blocks: f64,
    pub fraction: f64,
}

/// `U = N_B (1 − (1 − K/N_B)^{H_Q})` with `K = min(2 K_max, N_B)` when Rung 1
/// is active and `min(K_max, N_B)` otherwise.
pub fn gqa_union(
    tokens: usize,
    block_size: usize,
    k_max: usize,
    query_heads: usize,
    rung1_active: bool,
) -> UnionReport {
    let blocks = tokens.div_ceil(block_size.max(1));
    let k = if rung1_active { 2 * k_max } else { k_max };
    let k_eff = k.min(blocks);
    let (union_blocks, fraction) = if blocks == 0 {
        (0.0, 0.0)
    } else {
        let miss = 1.0 - k_eff as f64 / blocks as f64;
        let fraction = 1.0 - miss.powi(query_heads as i32);
        (blocks as f64 * fraction, fraction)
    };
    UnionReport {
        tokens,
        blocks,
        k_eff,
        union_blocks,
        fraction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_context_examples() {
        let r = gqa_union(65_536, 16, 128, 32, true);
        assert_eq!(r.blocks, 4096);
        assert!((r.k_eff as f64 / 4096.0 - 0.0625).abs() < 1e-12);
        assert!((r.fraction - 0.873).abs() < 0.01);
        assert!((gqa_union(131_072, 16, 128, 32, true).fraction - 0.64).abs() < 0.01);
        assert!((gqa_union(262_144, 16, 128, 32, true).fraction - 0.39).abs() < 0.01);
    }

    #[test]
    fn full_coverage_and_single_head() {
        assert_eq!(gqa_union(4096, 16, 128, 32, true).fraction, 1.0);
        let r = gqa_union(65_536, 16, 128, 1, true);
        assert_eq!(r.fraction, 256.0 / 4096.0);
    }
}
