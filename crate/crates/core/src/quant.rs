//! Group-wise affine weight quantization.
//!
//! `code = round(w / s + z)` clamped to `[0, 2^bits - 1]`, and
//! `w' = s * (code - z)`. Per-group `(z, s)` start from the min-max fit and are
//! refined by alternating least squares on the squared reconstruction error.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type a tensor can be quantized from.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Bytes for one stored `(scale, zero)` pair at 16-bit precision each.
const PARAM_PAIR_BYTES: u64 = 4;

/// Upper bound on refinement sweeps in [`fit_params`].
pub const MAX_REFINE_ITERS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    pub group_size: usize,
    pub zero_scale_group_size: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: 4,
            group_size: 64,
            zero_scale_group_size: 128,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 3 | 4 | 8) {
            return Err(Error::Validation(format!(
                "quantization bits must be 3, 4 or 8, got {}",
                self.bits
            )));
        }
        if self.group_size == 0 || self.zero_scale_group_size == 0 {
            return Err(Error::Validation("group sizes must be > 0".into()));
        }
        Ok(())
    }

    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

/// Bytes occupied by `elements` quantized values plus their group metadata.
///
/// Every group carries one 16-bit scale and one 16-bit zero point; an empty
/// tensor still pays for one group.
pub fn quantized_bytes(elements: u64, cfg: &QuantConfig) -> u64 {
    let payload = (elements * cfg.bits as u64).div_ceil(8);
    let groups = elements.div_ceil(cfg.group_size as u64).max(1);
    payload + groups * PARAM_PAIR_BYTES
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams<T> {
    pub zero: T,
    pub scale: T,
}

impl<T: Scalar> QuantParams<T> {
    pub fn encode(&self, w: T, max_code: u32) -> u32 {
        let x = (w / self.scale + self.zero).round();
        let hi = T::from_u32(max_code).unwrap();
        let c = if x < T::zero() {
            T::zero()
        } else if x > hi {
            hi
        } else {
            x
        };
        c.to_u32().unwrap_or(0)
    }

    pub fn decode(&self, code: u32) -> T {
        self.scale * (T::from_u32(code).unwrap() - self.zero)
    }
}

fn squared_error<T: Scalar>(group: &[T], p: &QuantParams<T>, max_code: u32) -> T {
    group.iter().fold(T::zero(), |acc, &w| {
        let d = w - p.decode(p.encode(w, max_code));
        acc + d * d
    })
}

fn min_max_params<T: Scalar>(group: &[T], max_code: u32) -> QuantParams<T> {
    let (lo, hi) = group
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &w| {
            (lo.min(w), hi.max(w))
        });
    if hi == lo {
        return QuantParams {
            zero: -lo,
            scale: T::one(),
        };
    }
    let scale = (hi - lo) / T::from_u32(max_code).unwrap();
    QuantParams {
        zero: -lo / scale,
        scale,
    }
}

/// Least-squares `(s, b)` for `w ~ s * code + b` with codes held fixed.
fn refit<T: Scalar>(group: &[T], p: &QuantParams<T>, max_code: u32) -> Option<QuantParams<T>> {
    let n = T::from_usize(group.len()).unwrap();
    let (mut sq, mut sw, mut sqq, mut sqw) = (T::zero(), T::zero(), T::zero(), T::zero());
    for &w in group {
        let q = T::from_u32(p.encode(w, max_code)).unwrap();
        sq = sq + q;
        sw = sw + w;
        sqq = sqq + q * q;
        sqw = sqw + q * w;
    }
    let denom = n * sqq - sq * sq;
    if denom <= T::zero() {
        return None;
    }
    let scale = (n * sqw - sq * sw) / denom;
    if !(scale > T::zero()) || !scale.is_finite() {
        return None;
    }
    let offset = (sw - scale * sq) / n;
    Some(QuantParams {
        zero: -offset / scale,
        scale,
    })
}

/// Fits `(z, s)` for one group: min-max start, then at most
/// [`MAX_REFINE_ITERS`] alternating sweeps (codes given params, params given
/// codes). Each accepted sweep lowers the squared error.
pub fn fit_params<T: Scalar>(group: &[T], bits: u32) -> Result<QuantParams<T>> {
    Ok(fit_params_traced(group, bits)?.0)
}

/// Like [`fit_params`] but also returns the squared error after the min-max
/// start and after every accepted refinement sweep.
pub fn fit_params_traced<T: Scalar>(group: &[T], bits: u32) -> Result<(QuantParams<T>, Vec<T>)> {
    if group.is_empty() {
        return Err(Error::Validation("cannot fit an empty group".into()));
    }
    if group.iter().any(|w| !w.is_finite()) {
        return Err(Error::Validation("group contains non-finite values".into()));
    }
    let max_code = (1u32 << bits) - 1;
    let mut best = min_max_params(group, max_code);
    let mut best_err = squared_error(group, &best, max_code);
    let mut history = vec![best_err];
    for _ in 0..MAX_REFINE_ITERS {
        let Some(next) = refit(group, &best, max_code) else {
            break;
        };
        let err = squared_error(group, &next, max_code);
        if !(err < best_err) {
            break;
        }
        best = next;
        best_err = err;
        history.push(err);
    }
    Ok((best, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor<T> {
    pub shape: Vec<usize>,
    pub config: QuantConfig,
    /// Codes packed little-endian, `bits` per element.
    pub packed: Vec<u8>,
    pub params: Vec<QuantParams<T>>,
    len: usize,
}

impl<T: Scalar> QuantizedTensor<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn code(&self, i: usize) -> u32 {
        let bits = self.config.bits as usize;
        let mut v = 0u32;
        for b in 0..bits {
            let pos = i * bits + b;
            if self.packed[pos / 8] >> (pos % 8) & 1 == 1 {
                v |= 1 << b;
            }
        }
        v
    }

    pub fn codes(&self) -> Vec<u32> {
        (0..self.len).map(|i| self.code(i)).collect()
    }

    /// Scale of the group element `i` belongs to.
    pub fn group_params(&self, i: usize) -> &QuantParams<T> {
        &self.params[i / self.config.group_size]
    }

    pub fn group_count(&self) -> usize {
        self.params.len()
    }
}

fn pack(codes: &[u32], bits: u32) -> Vec<u8> {
    let bits = bits as usize;
    let mut out = vec![0u8; (codes.len() * bits).div_ceil(8)];
    for (i, &c) in codes.iter().enumerate() {
        for b in 0..bits {
            if c >> b & 1 == 1 {
                let pos = i * bits + b;
                out[pos / 8] |= 1 << (pos % 8);
            }
        }
    }
    out
}

pub fn quantize<T: Scalar>(
    weights: &[T],
    shape: &[usize],
    cfg: &QuantConfig,
) -> Result<QuantizedTensor<T>> {
    cfg.validate()?;
    if weights.is_empty() {
        return Err(Error::Validation("cannot quantize an empty array".into()));
    }
    if shape.iter().product::<usize>() != weights.len() {
        return Err(Error::Validation(format!(
            "shape {shape:?} does not match {} elements",
            weights.len()
        )));
    }
    let max_code = cfg.max_code();
    let mut codes = Vec::with_capacity(weights.len());
    let mut params = Vec::with_capacity(weights.len().div_ceil(cfg.group_size));
    for group in weights.chunks(cfg.group_size) {
        let p = fit_params(group, cfg.bits)?;
        codes.extend(group.iter().map(|&w| p.encode(w, max_code)));
        params.push(p);
    }
    Ok(QuantizedTensor {
        shape: shape.to_vec(),
        config: *cfg,
        packed: pack(&codes, cfg.bits),
        params,
        len: weights.len(),
    })
}

pub fn dequantize<T: Scalar>(q: &QuantizedTensor<T>) -> Vec<T> {
    (0..q.len)
        .map(|i| q.group_params(i).decode(q.code(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
            .collect()
    }

    #[test]
    fn constant_array_is_exact() {
        let w = vec![0.37f64; 100];
        let q = quantize(&w, &[100], &QuantConfig::default()).unwrap();
        let codes = q.codes();
        assert!(codes.iter().all(|&c| c == codes[0]));
        assert_eq!(dequantize(&q), w);
    }

    #[test]
    fn linspace_error_within_half_step() {
        let w = linspace(-1.0, 1.0, 64);
        let q = quantize(&w, &[64], &QuantConfig::default()).unwrap();
        let back = dequantize(&q);
        let s = q.params[0].scale;
        for (a, b) in w.iter().zip(&back) {
            assert!((a - b).abs() <= s / 2.0 + 1e-12, "{a} vs {b} (s={s})");
        }
    }

    #[test]
    fn symmetric_group_centres_zero() {
        let w = linspace(-1.0, 1.0, 64);
        let (p, _) = fit_params_traced(&w, 4).unwrap();
        // 0 maps halfway through the 4-bit range
        assert!((p.zero - 7.5).abs() < 1e-9, "{p:?}");
        assert_eq!(p.encode(0.0, 15), 8);
    }

    #[test]
    fn two_point_group_is_exact() {
        let p = fit_params(&[0.0f64, 15.0], 4).unwrap();
        assert!(
            (p.scale - 1.0).abs() < 1e-12 && p.zero.abs() < 1e-12,
            "{p:?}"
        );
        assert_eq!(p.decode(p.encode(15.0, 15)), 15.0);
    }

    #[test]
    fn degenerate_group() {
        let p = fit_params(&[2.5f32; 7], 4).unwrap();
        assert_eq!(p.scale, 1.0);
        assert_eq!(p.zero, -2.5);
        assert_eq!(p.decode(p.encode(2.5, 15)), 2.5);
    }

    #[test]
    fn lattice_aligned_round_trip_is_exact() {
        // values already on the 4-bit lattice of their own min-max fit
        let w: Vec<f64> = (0..64).map(|i| (i % 16) as f64 * 0.25 - 1.0).collect();
        let q = quantize(&w, &[8, 8], &QuantConfig::default()).unwrap();
        assert_eq!(dequantize(&q), w);
        let again = quantize(&dequantize(&q), &[8, 8], &QuantConfig::default()).unwrap();
        assert_eq!(again.codes(), q.codes());
    }

    #[test]
    fn requantizing_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w: Vec<f32> = (0..256).map(|_| rng.random_range(-3.0..3.0)).collect();
        let cfg = QuantConfig::default();
        let q1 = quantize(&w, &[256], &cfg).unwrap();
        let d1 = dequantize(&q1);
        let q2 = quantize(&d1, &[256], &cfg).unwrap();
        let d2 = dequantize(&q2);
        let q3 = quantize(&d2, &[256], &cfg).unwrap();
        assert_eq!(q2.codes(), q3.codes());
    }

    #[test]
    fn refinement_beats_minmax_on_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let trials = 200;
        let mut strictly_better = 0;
        for _ in 0..trials {
            let mut g: Vec<f64> = (0..64).map(|_| rng.random_range(-0.1..0.1)).collect();
            let at = rng.random_range(0..64);
            g[at] = rng.random_range(2.0..6.0);
            let (_, hist) = fit_params_traced(&g, 4).unwrap();
            if hist.last().unwrap() < &hist[0] {
                strictly_better += 1;
            }
        }
        assert!(strictly_better * 2 >= trials, "{strictly_better}/{trials}");
    }

    #[test]
    fn bytes_examples() {
        let cfg = QuantConfig::default();
        assert_eq!(quantized_bytes(64, &cfg), 36);
        assert_eq!(quantized_bytes(64, &cfg) as f64 / 128.0, 0.28125);
        assert_eq!(quantized_bytes(0, &cfg), PARAM_PAIR_BYTES);
        let wide = QuantConfig { bits: 16, ..cfg };
        assert!(quantized_bytes(4096, &wide) >= 4096 * 2);
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = QuantConfig::default();
        assert!(quantize::<f64>(&[], &[0], &cfg).is_err());
        assert!(quantize(&[1.0f64, f64::NAN], &[2], &cfg).is_err());
        assert!(quantize(&[1.0f64, 2.0], &[3], &cfg).is_err());
        assert!(QuantConfig { bits: 5, ..cfg }.validate().is_err());
    }

    #[test]
    fn three_bit_packing_round_trips() {
        let codes: Vec<u32> = (0..37).map(|i| i % 8).collect();
        let t = QuantizedTensor::<f32> {
            shape: vec![37],
            config: QuantConfig {
                bits: 3,
                ..QuantConfig::default()
            },
            packed: pack(&codes, 3),
            params: vec![QuantParams {
                zero: 0.0,
                scale: 1.0,
            }],
            len: 37,
        };
        assert_eq!(t.codes(), codes);
        assert_eq!(t.packed.len(), (37 * 3usize).div_ceil(8));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn refinement_is_monotone(g in prop::collection::vec(-10.0f64..10.0, 1..128), bits in prop::sample::select(vec![3u32, 4, 8])) {
                let (_, hist) = fit_params_traced(&g, bits).unwrap();
                for w in hist.windows(2) {
                    prop_assert!(w[1] <= w[0]);
                }
                prop_assert!(hist.len() <= MAX_REFINE_ITERS + 1);
            }

            #[test]
            fn bytes_nondecreasing(e in 0u64..1 << 32, bits in prop::sample::select(vec![3u32, 4, 8])) {
                let cfg = QuantConfig { bits, ..QuantConfig::default() };
                prop_assert!(quantized_bytes(e + 1, &cfg) >= quantized_bytes(e, &cfg));
                prop_assert!(quantized_bytes(e + 64, &cfg) > quantized_bytes(e, &cfg));
                if bits < 8 {
                    let wider = QuantConfig { bits: if bits == 3 { 4 } else { 8 }, ..cfg };
                    prop_assert!(quantized_bytes(e + 8, &wider) > quantized_bytes(e + 8, &cfg));
                }
            }
        }
    }
}
