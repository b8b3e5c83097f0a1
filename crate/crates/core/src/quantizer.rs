//! Per-channel INT8 key quantization and per-group INT4 value quantization.
//!
//! Keys: every channel of a completed block gets its own affine map fitted on
//! the block's min/max, `σ_c = (u_c - ℓ_c) / 255`, `z_c = u_c - 127 σ_c`, so the
//! fit data maps onto `[-128, 127]` without clipping and round-to-nearest keeps
//! every element within `σ_c / 2` of its original.
//!
//! Values: each token's value vector is split into groups of `g` channels,
//! each with `scale = (u - ℓ) / 15` and `offset = ℓ`; codes are unsigned
//! nibbles `0..=15`.
//!
//! Metadata is held in `f64`. Storage and bandwidth accounting charge the
//! on-device widths (FP32 key metadata, FP16 value metadata, packed nibbles)
//! regardless of the in-memory representation; see [`crate::cache::StorageReport`].

use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};

/// Round half to even, the single rounding mode used by both quantizers.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// `x − (code · scale + offset)` evaluated exactly, as an unevaluated sum
/// `hi + lo` with `hi = fl(hi + lo)`.
///
/// The stored grid `offset + k · scale` is uniform in exact arithmetic, but
/// its `f64` reconstruction is not: neighbouring points can sit an ulp more
/// than `scale` apart. Bounds are stated on the exact grid.
pub fn reconstruction_residual(x: f64, code: f64, scale: f64, offset: f64) -> (f64, f64) {
    let p = code * scale;
    let pe = code.mul_add(scale, -p);
    let (s, se) = two_sum(x, -offset);
    let (t, te) = two_sum(s, -p);
    two_sum(t, (te + se) - pe)
}

/// Whether an exact residual lies within `[-half, half]`.
pub fn residual_within(r: (f64, f64), half: f64) -> bool {
    let (hi, lo) = if r.0 < 0.0 || (r.0 == 0.0 && r.1 < 0.0) {
        (-r.0, -r.1)
    } else {
        r
    };
    hi < half || (hi == half && lo <= 0.0)
}

fn residual_abs_cmp(a: (f64, f64), b: (f64, f64)) -> std::cmp::Ordering {
    let abs = |r: (f64, f64)| {
        if r.0 < 0.0 || (r.0 == 0.0 && r.1 < 0.0) {
            (-r.0, -r.1)
        } else {
            r
        }
    };
    let (a, b) = (abs(a), abs(b));
    a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1))
}

/// Nearest code in `[lo, hi]` to `x` on the exact grid `code · scale + offset`,
/// ties to even. Round-half-even on the quotient proposes a candidate; its
/// neighbours are compared on exact residuals because the quotient can land
/// on the wrong side of a midpoint.
fn nearest_code(x: f64, scale: f64, offset: f64, lo: f64, hi: f64) -> f64 {
    let q = (x - offset) / scale;
    let mut best = q.round_ties_even().clamp(lo, hi);
    let slack = 8.0 * f64::EPSILON * ((x.abs() + offset.abs()) / scale + q.abs());
    if (q - best).abs() < 0.5 - slack {
        return best;
    }
    for cand in [best - 1.0, best + 1.0] {
        if cand < lo || cand > hi {
            continue;
        }
        let ord = residual_abs_cmp(
            reconstruction_residual(x, cand, scale, offset),
            reconstruction_residual(x, best, scale, offset),
        );
        if ord.is_lt() || (ord.is_eq() && cand % 2.0 == 0.0) {
            best = cand;
        }
    }
    best
}

/// INT8 payload of one block of keys.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyBlockQuant {
    rows: usize,
    dim: usize,
    codes: Vec<i8>,
    scales: Vec<f64>,
    offsets: Vec<f64>,
    constant: Vec<bool>,
    block_index: usize,
}

impl KeyBlockQuant {
    /// Assemble a block from raw parts. Every scale must be finite and positive.
    pub fn from_parts(
        rows: usize,
        dim: usize,
        codes: Vec<i8>,
        scales: Vec<f64>,
        offsets: Vec<f64>,
        block_index: usize,
    ) -> Result<Self> {
        check_len("key codes", rows * dim, codes.len())?;
        check_len("key scales", dim, scales.len())?;
        check_len("key offsets", dim, offsets.len())?;
        if let Some(c) = scales.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "key scale for channel {c} must be positive, got {}",
                scales[c]
            )));
        }
        Ok(Self {
            rows,
            dim,
            codes,
            scales,
            offsets,
            constant: vec![false; dim],
            block_index,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_index(&self) -> usize {
        self.block_index
    }

    /// Row-major `rows × dim` codes.
    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn code(&self, row: usize, channel: usize) -> i8 {
        self.codes[row * self.dim + channel]
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// Channels that were constant over the fit data and reconstruct exactly.
    pub fn constant_channels(&self) -> &[bool] {
        &self.constant
    }

    /// Half-width multiplier used by the score perturbation bound: `σ_c`, or 0
    /// for guarded constant channels whose reconstruction is exact.
    pub fn error_scale(&self, channel: usize) -> f64 {
        if self.constant[channel] {
            0.0
        } else {
            self.scales[channel]
        }
    }

    #[inline]
    pub fn reconstruct(&self, row: usize, channel: usize) -> f64 {
        f64::from(self.code(row, channel)) * self.scales[channel] + self.offsets[channel]
    }

    /// Stable digest of codes and metadata, used to check block immutability.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.rows.hash(&mut h);
        self.dim.hash(&mut h);
        self.block_index.hash(&mut h);
        self.codes.hash(&mut h);
        for v in self.scales.iter().chain(&self.offsets) {
            v.to_bits().hash(&mut h);
        }
        self.constant.hash(&mut h);
        h.finish()
    }

    /// Overwrite one stored code without touching metadata. Fault injection
    /// only: the block no longer matches its originals afterwards.
    #[doc(hidden)]
    pub fn inject_code_fault(&mut self, row: usize, channel: usize, code: i8) {
        self.codes[row * self.dim + channel] = code;
    }
}

/// INT4 payload of one block of values, one affine map per (token, group).
#[derive(Debug, Clone, PartialEq)]
pub struct ValueBlockQuant {
    rows: usize,
    dim: usize,
    group_size: usize,
    codes: Vec<u8>,
    group_scales: Vec<f64>,
    group_offsets: Vec<f64>,
}

impl ValueBlockQuant {
    pub fn from_parts(
        rows: usize,
        dim: usize,
        group_size: usize,
        codes: Vec<u8>,
        group_scales: Vec<f64>,
        group_offsets: Vec<f64>,
    ) -> Result<Self> {
        check_group(dim, group_size)?;
        let groups = rows * dim / group_size;
        check_len("value codes", rows * dim, codes.len())?;
        check_len("value group scales", groups, group_scales.len())?;
        check_len("value group offsets", groups, group_offsets.len())?;
        if codes.iter().any(|&c| c > 15) {
            return Err(Error::InvalidConfig("INT4 code above 15".into()));
        }
        if group_scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidConfig("value group scales must be non-negative".into()));
        }
        Ok(Self {
            rows,
            dim,
            group_size,
            codes,
            group_scales,
            group_offsets,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn groups_per_row(&self) -> usize {
        self.dim / self.group_size
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn group_scales(&self) -> &[f64] {
        &self.group_scales
    }

    pub fn group_offsets(&self) -> &[f64] {
        &self.group_offsets
    }

    #[inline]
    pub fn group_of(&self, row: usize, channel: usize) -> usize {
        row * self.groups_per_row() + channel / self.group_size
    }

    #[inline]
    pub fn reconstruct(&self, row: usize, channel: usize) -> f64 {
        let g = self.group_of(row, channel);
        f64::from(self.codes[row * self.dim + channel]) * self.group_scales[g] + self.group_offsets[g]
    }

    /// Codes packed two per byte, low nibble first. This is the layout the
    /// byte accounting assumes: `dim / 2` bytes per token.
    pub fn packed_codes(&self) -> Vec<u8> {
        self.codes
            .chunks(2)
            .map(|p| p[0] | (p.get(1).copied().unwrap_or(0) << 4))
            .collect()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.rows.hash(&mut h);
        self.dim.hash(&mut h);
        self.group_size.hash(&mut h);
        self.codes.hash(&mut h);
        for v in self.group_scales.iter().chain(&self.group_offsets) {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Write-time value annotations of a block.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BlockAnnotations {
    /// Max per-token l2 reconstruction error `‖V_t - V̂_t‖₂`.
    pub eta: f64,
    /// Max per-token value norm `‖V_t‖₂`.
    pub nu: f64,
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            actual,
        })
    }
}

fn check_group(dim: usize, group_size: usize) -> Result<()> {
    if group_size == 0 || dim % group_size != 0 {
        Err(Error::GroupSize {
            group_size,
            head_dim: dim,
        })
    } else {
        Ok(())
    }
}

fn check_finite(what: &'static str, data: &[f32], dim: usize) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite {
            what,
            row: i / dim,
            channel: i % dim,
        }),
    }
}

/// Fit per-channel affine INT8 metadata on a block of keys (`rows × dim`,
/// row-major) and encode it.
pub fn quantize_key_block(keys: &[f32], dim: usize, block_index: usize) -> Result<KeyBlockQuant> {
    if dim == 0 || keys.len() % dim != 0 || keys.is_empty() {
        return Err(Error::Shape {
            context: "key block",
            expected: dim.max(1) * (keys.len() / dim.max(1)).max(1),
            actual: keys.len(),
        });
    }
    check_finite("key", keys, dim)?;
    let rows = keys.len() / dim;

    let mut scales = vec![0.0; dim];
    let mut offsets = vec![0.0; dim];
    let mut constant = vec![false; dim];
    let mut codes = vec![0i8; rows * dim];

    for c in 0..dim {
        let (lo, hi) = (0..rows)
            .map(|t| f64::from(keys[t * dim + c]))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        if hi == lo {
            scales[c] = 1.0;
            offsets[c] = hi;
            constant[c] = true;
            continue;
        }
        let scale = (hi - lo) / 255.0;
        let offset = hi - 127.0 * scale;
        scales[c] = scale;
        offsets[c] = offset;
        for t in 0..rows {
            let x = f64::from(keys[t * dim + c]);
            let q = nearest_code(x, scale, offset, -128.0, 127.0);
            codes[t * dim + c] = q as i8;
        }
    }

    Ok(KeyBlockQuant {
        rows,
        dim,
        codes,
        scales,
        offsets,
        constant,
        block_index,
    })
}

/// Reconstruct `code · σ_c + z_c` for every element, row-major.
pub fn dequantize_key_block(q: &KeyBlockQuant) -> Vec<f64> {
    let mut out = Vec::with_capacity(q.rows * q.dim);
    for t in 0..q.rows {
        for c in 0..q.dim {
            out.push(q.reconstruct(t, c));
        }
    }
    out
}

/// Fit per-group INT4 metadata on a block of values and compute the
/// write-time annotations from the exact reconstruction.
pub fn quantize_value_block(
    values: &[f32],
    dim: usize,
    group_size: usize,
) -> Result<(ValueBlockQuant, BlockAnnotations)> {
    check_group(dim, group_size)?;
    if values.is_empty() || values.len() % dim != 0 {
        return Err(Error::Shape {
            context: "value block",
            expected: dim * (values.len() / dim).max(1),
            actual: values.len(),
        });
    }
    check_finite("value", values, dim)?;
    let rows = values.len() / dim;
    let groups_per_row = dim / group_size;

    let mut codes = vec![0u8; rows * dim];
    let mut scales = vec![0.0; rows * groups_per_row];
    let mut offsets = vec![0.0; rows * groups_per_row];

    for t in 0..rows {
        for j in 0..groups_per_row {
            let span = t * dim + j * group_size..t * dim + (j + 1) * group_size;
            let (lo, hi) = values[span.clone()]
                .iter()
                .map(|&x| f64::from(x))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
            let g = t * groups_per_row + j;
            offsets[g] = lo;
            if hi == lo {
                scales[g] = 1.0;
                continue;
            }
            let scale = (hi - lo) / 15.0;
            scales[g] = scale;
            for i in span {
                let q = nearest_code(f64::from(values[i]), scale, lo, 0.0, 15.0);
                codes[i] = q as u8;
            }
        }
    }

    let quant = ValueBlockQuant {
        rows,
        dim,
        group_size,
        codes,
        group_scales: scales,
        group_offsets: offsets,
    };
    let annotations = annotate(values, &quant);
    Ok((quant, annotations))
}

/// `η_b` and `ν_b` with a single canonical order: channels ascending within a
/// token, squared terms summed left to right, then a max over tokens.
pub fn annotate(values: &[f32], quant: &ValueBlockQuant) -> BlockAnnotations {
    let dim = quant.dim;
    let mut ann = BlockAnnotations::default();
    for t in 0..quant.rows {
        let mut err2 = 0.0f64;
        let mut norm2 = 0.0f64;
        for c in 0..dim {
            let v = f64::from(values[t * dim + c]);
            let e = v - quant.reconstruct(t, c);
            err2 += e * e;
            norm2 += v * v;
        }
        ann.eta = ann.eta.max(err2.sqrt());
        ann.nu = ann.nu.max(norm2.sqrt());
    }
    ann
}

pub fn dequantize_value_block(q: &ValueBlockQuant) -> Vec<f64> {
    let mut out = Vec::with_capacity(q.rows * q.dim);
    for t in 0..q.rows {
        for c in 0..q.dim {
            out.push(q.reconstruct(t, c));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_code_beats_its_neighbours() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20_000 {
            let scale: f64 = rng.random_range(1e-4..1.0);
            let offset: f64 = rng.random_range(-5.0..5.0);
            // Points on or next to a grid midpoint.
            let k = rng.random_range(-128..127) as f64;
            let x = (k + 0.5) * scale + offset + rng.random_range(-2.0..2.0) * f64::EPSILON;
            let best = nearest_code(x, scale, offset, -128.0, 127.0);
            let r = reconstruction_residual(x, best, scale, offset);
            assert!(residual_within(r, scale / 2.0), "{x} {scale} {offset}");
            for c in [best - 1.0, best + 1.0] {
                if (-128.0..=127.0).contains(&c) {
                    assert!(residual_abs_cmp(r, reconstruction_residual(x, c, scale, offset)).is_le());
                }
            }
        }
    }
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * scale).collect()
    }

    #[test]
    fn two_point_key_channel() {
        let q = quantize_key_block(&[-1.0, 1.0], 1, 0).unwrap();
        assert!((q.scales()[0] - 2.0 / 255.0).abs() < 1e-15);
        assert!((q.offsets()[0] - 1.0 / 255.0).abs() < 1e-15);
        assert_eq!(q.codes(), &[-128, 127]);
        let r = dequantize_key_block(&q);
        assert!((r[0] + 1.0).abs() <= 1e-15, "{}", r[0]);
        assert!((r[1] - 1.0).abs() <= 1e-15, "{}", r[1]);
    }

    #[test]
    fn constant_key_channel_is_exact() {
        let q = quantize_key_block(&[0.5; 8], 1, 3).unwrap();
        assert!(q.codes().iter().all(|&c| c == 0));
        assert_eq!(q.scales()[0], 1.0);
        assert_eq!(q.error_scale(0), 0.0);
        assert!(dequantize_key_block(&q).iter().all(|&x| x == 0.5));
    }

    #[test]
    fn non_finite_key_names_channel() {
        let err = quantize_key_block(&[0.0, 1.0, f32::NAN, 2.0], 2, 0).unwrap_err();
        assert_eq!(
            err,
            Error::NonFinite {
                what: "key",
                row: 1,
                channel: 0
            }
        );
    }

    #[test]
    fn offset_only_key_reconstruction() {
        let q = KeyBlockQuant::from_parts(2, 2, vec![0; 4], vec![0.1, 0.2], vec![0.5, 0.5], 0).unwrap();
        assert_eq!(dequantize_key_block(&q), vec![0.5; 4]);
        assert!(KeyBlockQuant::from_parts(1, 1, vec![0], vec![0.0], vec![0.0], 0).is_err());
    }

    #[test]
    fn key_bound_and_fixed_point_on_random_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..1000 {
            let d = [16, 64, 128][i % 3];
            let keys = gaussian(&mut rng, 16 * d, 1.0 + (i % 5) as f32);
            let q = quantize_key_block(&keys, d, i).unwrap();
            for t in 0..16 {
                for c in 0..d {
                    let r = reconstruction_residual(
                        f64::from(keys[t * d + c]),
                        f64::from(q.code(t, c)),
                        q.scales()[c],
                        q.offsets()[c],
                    );
                    assert!(residual_within(r, q.scales()[c] / 2.0), "block {i} t {t} c {c}");
                }
            }
            // Codes from fit data never saturate past the fitted endpoints.
            for c in 0..d {
                let col: Vec<i8> = (0..16).map(|t| q.code(t, c)).collect();
                assert_eq!(*col.iter().min().unwrap(), -128);
                assert_eq!(*col.iter().max().unwrap(), 127);
            }
            let recon: Vec<f32> = dequantize_key_block(&q).iter().map(|&x| x as f32).collect();
            let again = quantize_key_block(&recon, d, i).unwrap();
            assert_eq!(again.codes(), q.codes(), "block {i}");
        }
    }

    #[test]
    fn value_group_fit() {
        let (q, ann) = quantize_value_block(&[0.0, 1.5], 2, 2).unwrap();
        assert!((q.group_scales()[0] - 0.1).abs() < 1e-16);
        assert_eq!(q.group_offsets()[0], 0.0);
        assert_eq!(q.codes(), &[0, 15]);
        let r = dequantize_value_block(&q);
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 1.5).abs() < 1e-15);
        assert!(ann.eta < 1e-15);
    }

    #[test]
    fn zero_values_have_zero_annotations() {
        let (_, ann) = quantize_value_block(&[0.0; 64], 16, 4).unwrap();
        assert_eq!(ann, BlockAnnotations { eta: 0.0, nu: 0.0 });
    }

    #[test]
    fn constant_group_dequantizes_to_offset() {
        let q = ValueBlockQuant::from_parts(1, 4, 4, vec![8; 4], vec![0.0], vec![0.25]).unwrap();
        assert_eq!(dequantize_value_block(&q), vec![0.25; 4]);
        let (guarded, _) = quantize_value_block(&[0.25; 4], 4, 4).unwrap();
        assert_eq!(dequantize_value_block(&guarded), vec![0.25; 4]);
    }

    #[test]
    fn group_size_must_divide_dim() {
        assert_eq!(
            quantize_value_block(&[0.0; 12], 6, 4).unwrap_err(),
            Error::GroupSize {
                group_size: 4,
                head_dim: 6
            }
        );
    }

    #[test]
    fn value_bound_and_annotations_on_random_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..1000 {
            let d = [16, 64, 128][i % 3];
            let g = [4, 8, 16, 32][i % 4].min(d);
            let vals = gaussian(&mut rng, 16 * d, 1.0);
            let (q, ann) = quantize_value_block(&vals, d, g).unwrap();
            let mut eta: f64 = 0.0;
            let mut nu: f64 = 0.0;
            for t in 0..16 {
                let mut e2 = 0.0f64;
                let mut n2 = 0.0f64;
                for c in 0..d {
                    let v = f64::from(vals[t * d + c]);
                    let r = q.reconstruct(t, c);
                    let gi = q.group_of(t, c);
                    let res = reconstruction_residual(
                        v,
                        f64::from(q.codes()[t * d + c]),
                        q.group_scales()[gi],
                        q.group_offsets()[gi],
                    );
                    assert!(residual_within(res, q.group_scales()[gi] / 2.0));
                    e2 += (v - r) * (v - r);
                    n2 += v * v;
                }
                eta = eta.max(e2.sqrt());
                nu = nu.max(n2.sqrt());
            }
            assert_eq!(ann.eta, eta);
            assert_eq!(ann.nu, nu);
        }
    }

    #[test]
    fn nibble_packing_halves_bytes() {
        let vals: Vec<f32> = (0..32).map(|x| x as f32).collect();
        let (q, _) = quantize_value_block(&vals, 32, 16).unwrap();
        let packed = q.packed_codes();
        assert_eq!(packed.len(), 16);
        assert_eq!(packed[0] & 0x0f, q.codes()[0]);
        assert_eq!(packed[0] >> 4, q.codes()[1]);
    }
}
