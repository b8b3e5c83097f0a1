//! Runtime error bounds and per-head, per-step certificates.
//!
//! The fast-path guarantee is
//! `‖O_quant − O_ref‖₂ ≤ E_key + E_val` with
//! `E_key = 2 V_max e^{eΔ} α̂_T (e^{2Δ} − 1)` (`e = 2` tight, `e = 3` as
//! emitted by default) and `E_val = Σ_b ρ_b η_b` over blocks still served from
//! INT4 values. All bound arithmetic is `f64`.

use serde::{Deserialize, Serialize};

use crate::cache::TieredCache;
use crate::error::{Error, Result};

/// Absolute slack added by [`Certificate::total_bound`] so that the bound
/// still dominates an `f32` computation of the quantities it covers.
pub const CERTIFICATE_SLACK: f64 = 1e-12;

/// Exponent applied to `Δ` in the mass-inflation factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ExponentMode {
    /// `e^{2Δ}`: the tight bound.
    Tight,
    /// `e^{3Δ}`: headroom for a quantized scaled query.
    Implementation,
}

impl ExponentMode {
    pub fn factor(self) -> f64 {
        match self {
            ExponentMode::Tight => 2.0,
            ExponentMode::Implementation => 3.0,
        }
    }
}

impl TryFrom<u8> for ExponentMode {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            2 => Ok(ExponentMode::Tight),
            3 => Ok(ExponentMode::Implementation),
            other => Err(format!("exponent mode must be 2 or 3, got {other}")),
        }
    }
}

impl From<ExponentMode> for u8 {
    fn from(m: ExponentMode) -> u8 {
        m.factor() as u8
    }
}

/// Per-block `Δ_b = (1 / 2√d) Σ_c |q_c| σ_c^{(b)}` for the given full blocks,
/// and `Δ_h`, their maximum.
pub fn compute_delta(query: &[f32], cache: &TieredCache, scored_blocks: &[usize]) -> Result<(Vec<f64>, f64)> {
    let d = cache.head_dim();
    if query.len() != d {
        return Err(Error::Shape {
            context: "query",
            expected: d,
            actual: query.len(),
        });
    }
    let inv = 1.0 / (2.0 * (d as f64).sqrt());
    let mut per_block = Vec::with_capacity(scored_blocks.len());
    for &b in scored_blocks {
        let keys = &cache.block(b)?.keys;
        let s: f64 = (0..d).map(|c| f64::from(query[c]).abs() * keys.error_scale(c)).sum();
        per_block.push(s * inv);
    }
    let head = per_block.iter().copied().fold(0.0, f64::max);
    Ok((per_block, head))
}

/// `Δ` for every full block of the cache.
pub fn compute_delta_all(query: &[f32], cache: &TieredCache) -> Result<(Vec<f64>, f64)> {
    let all: Vec<usize> = (0..cache.full_blocks()).collect();
    compute_delta(query, cache, &all)
}

/// Cauchy–Schwarz form `‖q‖₂ ‖σ‖₂ / (2√d)`; never smaller than the per-block sum.
pub fn delta_cauchy_schwarz(query: &[f32], scales: &[f64]) -> f64 {
    let qn = query.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    let sn = scales.iter().map(|s| s * s).sum::<f64>().sqrt();
    qn * sn / (2.0 * (query.len() as f64).sqrt())
}

/// Full-sequence TV bound `tanh(Δ)`.
pub fn tv_bound(delta: f64) -> Result<f64> {
    if delta < 0.0 || delta.is_nan() {
        return Err(Error::NegativeDelta(delta));
    }
    Ok(delta.tanh())
}

/// Upper bound on a block's true unnormalised mass relative to the
/// quantized global max: `S_b · exp(m_b' − m'_global + eΔ)`.
pub fn mass_upper_bound(block_sum: f64, block_max: f64, global_max: f64, delta: f64, mode: ExponentMode) -> f64 {
    block_sum * (block_max - global_max + mode.factor() * delta).exp()
}

/// True tail mass bound `min(1, e^{eΔ} α̂_T)`.
pub fn tail_mass_bound(est_tail_mass: f64, delta: f64, mode: ExponentMode) -> f64 {
    ((mode.factor() * delta).exp() * est_tail_mass).min(1.0)
}

/// `E_key = 2 V_max e^{eΔ} α̂_T (e^{2Δ} − 1)`.
pub fn e_key_bound(v_max: f64, delta: f64, est_tail_mass: f64, mode: ExponentMode) -> f64 {
    2.0 * v_max * (mode.factor() * delta).exp() * est_tail_mass * (2.0 * delta).exp_m1()
}

/// Achieved value error `Σ_b ρ_b η_b` over blocks not promoted to
/// full-precision values.
pub fn e_val_exact(block_masses: &[f64], etas: &[f64], value_promotions: &std::collections::BTreeSet<usize>) -> f64 {
    block_masses
        .iter()
        .zip(etas)
        .enumerate()
        .filter(|(b, _)| !value_promotions.contains(b))
        .fold(0.0, |acc, (_, (rho, eta))| acc + rho * eta)
}

/// Exact total variation `½ Σ_t |a_t − a'_t|` between two distributions.
pub fn brute_force_tv(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidDistribution(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    for (name, p) in [("first", a), ("second", b)] {
        let total: f64 = p.iter().sum();
        if p.iter().any(|&x| x.is_nan() || x < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("{name} vector sums to {total}")));
        }
    }
    Ok(0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// Which output the system actually returned for a head-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnedKind {
    Quantized,
    DensePerHead,
    DenseAllHeads,
}

impl ReturnedKind {
    pub fn is_dense(self) -> bool {
        !matches!(self, ReturnedKind::Quantized)
    }
}

/// Per-head, per-step certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub delta_h: f64,
    pub e_key_tight: f64,
    pub e_key_impl: f64,
    pub e_val: f64,
    pub est_tail_mass: f64,
    pub v_max: f64,
    pub k_star: usize,
    pub exponent_mode: ExponentMode,
    pub returned_kind: ReturnedKind,
    /// Whether rungs 1..=4 fired for this head-step.
    pub rung_flags: [bool; 4],
}

impl Certificate {
    /// The emitted pre-fallback `E_key` under the configured exponent mode.
    pub fn e_key(&self) -> f64 {
        match self.exponent_mode {
            ExponentMode::Tight => self.e_key_tight,
            ExponentMode::Implementation => self.e_key_impl,
        }
    }

    /// `E_key` of the output actually returned: zero after a dense fallback.
    pub fn returned_e_key(&self) -> f64 {
        if self.returned_kind.is_dense() {
            0.0
        } else {
            self.e_key()
        }
    }

    pub fn returned_e_val(&self) -> f64 {
        if self.returned_kind.is_dense() {
            0.0
        } else {
            self.e_val
        }
    }

    /// `E_key(tight) + E_val` plus [`CERTIFICATE_SLACK`].
    pub fn total_bound(&self) -> f64 {
        self.e_key_tight + self.e_val + CERTIFICATE_SLACK
    }
}

/// Inputs gathered over one decode step for one head.
#[derive(Debug, Clone, Copy)]
pub struct CertificateInputs {
    pub delta_h: f64,
    pub est_tail_mass: f64,
    pub v_max: f64,
    pub e_val: f64,
    pub k_star: usize,
    pub exponent_mode: ExponentMode,
    pub rung_flags: [bool; 4],
}

pub fn assemble_certificate(inputs: CertificateInputs) -> Certificate {
    let CertificateInputs {
        delta_h,
        est_tail_mass,
        v_max,
        e_val,
        k_star,
        exponent_mode,
        rung_flags,
    } = inputs;
    let returned_kind = if rung_flags[3] {
        ReturnedKind::DenseAllHeads
    } else if rung_flags[2] {
        ReturnedKind::DensePerHead
    } else {
        ReturnedKind::Quantized
    };
    Certificate {
        delta_h,
        e_key_tight: e_key_bound(v_max, delta_h, est_tail_mass, ExponentMode::Tight),
        e_key_impl: e_key_bound(v_max, delta_h, est_tail_mass, ExponentMode::Implementation),
        e_val,
        est_tail_mass,
        v_max,
        k_star,
        exponent_mode,
        returned_kind,
        rung_flags,
    }
}

/// Two-outcome distribution pair realising `TV = tanh(Δ)`: the first outcome
/// has mass `1 / (e^{2Δ} + 1)` and its ratio is pushed to `e^{2Δ}`, the second
/// to `e^{-2Δ}`.
pub fn tv_vertex_construction(delta: f64) -> (Vec<f64>, Vec<f64>) {
    let up = (2.0 * delta).exp();
    let p = 1.0 / (up + 1.0);
    let a = vec![p, 1.0 - p];
    let b = vec![p * up, (1.0 - p) / up];
    (a, b)
}
