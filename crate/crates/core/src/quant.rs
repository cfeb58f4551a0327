//! Quantizers and their surrogate gradients.
//!
//! Weights binarize to `α·sign(w)` with `α = mean|w|` and a straight-through
//! backward. Activations either binarize with `sign(x)` and a piecewise
//! polynomial backward, or quantize uniformly to K bits on `[0, β]`.

use serde::{Deserialize, Serialize};

use crate::bitcore::{pack_signs, xnor_popcount_words, BitTensor, ZeroRule};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    #[default]
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationScheme {
    #[default]
    BinarySign,
    UniformKbit,
    FullPrecision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleGranularity {
    PerTensor,
    #[default]
    PerOutputChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSpec {
    pub weight_scheme: WeightScheme,
    pub activation_scheme: ActivationScheme,
    /// Bit-width for `uniform-kbit` activations.
    pub activation_bits: u32,
    /// Clip bound β for `uniform-kbit` activations.
    pub clip_bound: f64,
    pub weight_scale_granularity: ScaleGranularity,
    /// Zero the weight gradient where `|w|` exceeds this bound.
    pub ste_clip: Option<f64>,
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self {
            weight_scheme: WeightScheme::Binary,
            activation_scheme: ActivationScheme::BinarySign,
            activation_bits: 2,
            clip_bound: 1.0,
            weight_scale_granularity: ScaleGranularity::PerOutputChannel,
            ste_clip: None,
        }
    }
}

impl QuantSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Error::Config {
            field: format!("quant.{field}"),
            reason,
        };
        if self.activation_scheme == ActivationScheme::UniformKbit && self.activation_bits < 2 {
            return Err(bad(
                "activation_bits",
                format!("uniform-kbit needs at least 2 bits, got {} (use binary-sign)", self.activation_bits),
            ));
        }
        if self.activation_bits > 16 {
            return Err(bad("activation_bits", "at most 16 bits supported".into()));
        }
        if !(self.clip_bound.is_finite() && self.clip_bound > 0.0) {
            return Err(bad("clip_bound", format!("must be positive, got {}", self.clip_bound)));
        }
        if let Some(c) = self.ste_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(bad("ste_clip", format!("must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Sign bits and per-unit scales `α = mean|w|`. The leading dimension is the
/// output channel.
pub fn binarize_weights<T: Real>(w: &Tensor<T>, spec: &QuantSpec) -> Result<(BitTensor, Vec<T>)> {
    w.check_finite()?;
    let bits = pack_signs(w.data(), w.shape(), ZeroRule::PlusOne)?;
    Ok((bits, weight_scales(w, spec.weight_scale_granularity)))
}

pub fn weight_scales<T: Real>(w: &Tensor<T>, granularity: ScaleGranularity) -> Vec<T> {
    let mean_abs = |s: &[T]| {
        if s.is_empty() {
            T::zero()
        } else {
            s.iter().map(|x| x.abs()).sum::<T>() / T::of(s.len() as f64)
        }
    };
    match granularity {
        ScaleGranularity::PerTensor => vec![mean_abs(w.data())],
        ScaleGranularity::PerOutputChannel => {
            let rows = w.shape().first().copied().unwrap_or(1).max(1);
            let per = w.len() / rows;
            w.data().chunks(per.max(1)).map(mean_abs).collect()
        }
    }
}

/// `α·sign(w)` as a dense tensor, with α broadcast over its granularity unit.
pub fn binarized_weight_values<T: Real>(w: &Tensor<T>, granularity: ScaleGranularity) -> Tensor<T> {
    let scales = weight_scales(w, granularity);
    let per = w.len() / scales.len().max(1);
    let mut out = w.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let a = scales[if scales.len() == 1 { 0 } else { i / per }];
        *v = if ZeroRule::PlusOne.is_positive(*v) { a } else { -a };
    }
    out
}

/// Straight-through weight gradient, optionally zeroed where `|w| > ste_clip`.
pub fn weight_ste_backward<T: Real>(grad_out: &Tensor<T>, w: &Tensor<T>, spec: &QuantSpec) -> Result<Tensor<T>> {
    match spec.ste_clip {
        None => {
            grad_out.expect_shape(w.shape(), "weight_ste_backward")?;
            Ok(grad_out.clone())
        }
        Some(c) => {
            let c = T::of(c);
            grad_out.zip_map(w, |g, x| if x.abs() > c { T::zero() } else { g })
        }
    }
}

#[inline]
pub fn sign<T: Real>(x: T) -> T {
    if ZeroRule::PlusOne.is_positive(x) {
        T::one()
    } else {
        -T::one()
    }
}

/// Forward sign activation; returns the ±1 tensor and the saved input.
pub fn sign_activation<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    x.check_finite()?;
    Ok((x.map(sign), x.clone()))
}

/// Piecewise polynomial derivative surrogate for `sign`:
/// `2+2x` on [−1,0), `2−2x` on [0,1), 0 elsewhere.
#[inline]
pub fn sign_surrogate_factor<T: Real>(x: T) -> T {
    let one = T::one();
    let two = T::of(2.0);
    if x >= -one && x < T::zero() {
        two + two * x
    } else if x >= T::zero() && x < one {
        two - two * x
    } else {
        T::zero()
    }
}

/// Smooth stand-in for `sign` whose derivative is [`sign_surrogate_factor`].
#[inline]
pub fn approx_sign<T: Real>(x: T) -> T {
    let one = T::one();
    let two = T::of(2.0);
    if x < -one {
        -one
    } else if x < T::zero() {
        two * x + x * x
    } else if x < one {
        two * x - x * x
    } else {
        one
    }
}

pub fn sign_activation_backward<T: Real>(grad_out: &Tensor<T>, saved: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip_map(saved, |g, x| g * sign_surrogate_factor(x))
}

/// Uniform K-bit quantizer on `[0, β]`, rounding half away from zero.
#[inline]
pub fn uniform_quantize_scalar<T: Real>(y: T, bits: u32, beta: T) -> T {
    let levels = T::of(((1u64 << bits) - 1) as f64);
    let clipped = y.max(T::zero()).min(beta);
    (clipped * levels / beta).round() * beta / levels
}

pub fn uniform_quantize<T: Real>(y: &Tensor<T>, bits: u32, beta: T) -> Result<Tensor<T>> {
    if bits < 2 {
        return Err(Error::InvalidArgument(format!("uniform quantizer needs at least 2 bits, got {bits}")));
    }
    if beta <= T::zero() {
        return Err(Error::InvalidArgument("clip bound must be positive".into()));
    }
    Ok(y.map(|v| uniform_quantize_scalar(v, bits, beta)))
}

/// Clip-gradient STE: pass inside `[0, β]`, zero outside.
pub fn uniform_quantize_backward<T: Real>(grad_out: &Tensor<T>, y: &Tensor<T>, beta: T) -> Result<Tensor<T>> {
    grad_out.zip_map(y, |g, v| if v >= T::zero() && v <= beta { g } else { T::zero() })
}

/// Level index `q ∈ {0, …, 2^K−1}` of a value on the symmetric grid over [−1, 1].
#[inline]
pub fn fixedpoint_level(v: f64, bits: u32) -> u32 {
    let levels = ((1u64 << bits) - 1) as f64;
    let c = v.clamp(-1.0, 1.0);
    ((c + 1.0) / 2.0 * levels).round() as u32
}

/// Odd integer code `2q − (2^K−1)` of a level index.
#[inline]
pub fn fixedpoint_code(q: u32, bits: u32) -> i64 {
    2 * q as i64 - ((1i64 << bits) - 1)
}

/// Result of a bit-plane fixed-point inner product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointDot {
    /// `Σ code(w)·code(x)` computed from XNOR-popcount plane dots.
    pub integer: i64,
    pub bits: u32,
    /// Plane-pair dot products evaluated (K²).
    pub xnor_dots: u64,
}

impl FixedPointDot {
    /// Product of the dequantized operands, `integer / (2^K−1)²`.
    pub fn value(&self) -> f64 {
        let l = ((1u64 << self.bits) - 1) as f64;
        self.integer as f64 / (l * l)
    }

    /// Largest attainable `|integer|` for fan-in `m`.
    pub fn bound(bits: u32, m: usize) -> i64 {
        let l = (1i64 << bits) - 1;
        l * l * m as i64
    }
}

fn level_planes(levels: &[u32], bits: u32) -> Vec<BitTensor> {
    (0..bits)
        .map(|i| {
            BitTensor::from_bools(&[levels.len()], levels.iter().map(|q| (q >> i) & 1 == 1))
                .expect("plane length matches")
        })
        .collect()
}

/// Inner product of K-bit quantized vectors via `Σ_{i,j} 2^{i+j} (b_i^w ⊙ b_j^x)`
/// over ±1 bit planes of the level indices.
pub fn fixedpoint_dot<T: Real>(w: &[T], x: &[T], bits: u32) -> Result<FixedPointDot> {
    if bits < 1 || bits > 16 {
        return Err(Error::InvalidArgument(format!("bit-width must be in 1..=16, got {bits}")));
    }
    if w.len() != x.len() {
        return Err(Error::LengthMismatch {
            left: w.len(),
            right: x.len(),
        });
    }
    let qw: Vec<u32> = w.iter().map(|v| fixedpoint_level(v.as_f64(), bits)).collect();
    let qx: Vec<u32> = x.iter().map(|v| fixedpoint_level(v.as_f64(), bits)).collect();
    Ok(fixedpoint_dot_levels(&qw, &qx, bits))
}

pub fn fixedpoint_dot_levels(qw: &[u32], qx: &[u32], bits: u32) -> FixedPointDot {
    let m = qw.len();
    let pw = level_planes(qw, bits);
    let px = level_planes(qx, bits);
    let mut integer = 0i64;
    for (i, bw) in pw.iter().enumerate() {
        for (j, bx) in px.iter().enumerate() {
            integer += (1i64 << (i + j)) * xnor_popcount_words(bw.words(), bx.words(), m) as i64;
        }
    }
    FixedPointDot {
        integer,
        bits,
        xnor_dots: (bits as u64) * (bits as u64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn binarize_per_tensor_example() {
        let spec = QuantSpec {
            weight_scale_granularity: ScaleGranularity::PerTensor,
            ..Default::default()
        };
        let (bits, alpha) = binarize_weights(&t(&[0.5, -0.3, 0.2]), &spec).unwrap();
        assert_eq!(bits.unpack(), vec![1, -1, 1]);
        assert!((alpha[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn binarize_zero_weights() {
        let spec = QuantSpec {
            weight_scale_granularity: ScaleGranularity::PerTensor,
            ..Default::default()
        };
        let (bits, alpha) = binarize_weights(&t(&[0.0; 4]), &spec).unwrap();
        assert_eq!(bits.unpack(), vec![1; 4]);
        assert_eq!(alpha, vec![0.0]);
    }

    #[test]
    fn per_channel_scales_match_mean_abs() {
        let data: Vec<f64> = (0..4 * 9).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect();
        let w = Tensor::from_vec(&[4, 1, 3, 3], data.clone()).unwrap();
        let (_, alpha) = binarize_weights(&w, &QuantSpec::default()).unwrap();
        for (o, a) in alpha.iter().enumerate() {
            let oracle: f64 = data[o * 9..(o + 1) * 9].iter().map(|x| x.abs()).sum::<f64>() / 9.0;
            assert!((a - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn ste_pass_through_and_clip() {
        let g = t(&[0.3, -0.7]);
        let w = t(&[0.2, 1.5]);
        assert_eq!(weight_ste_backward(&g, &w, &QuantSpec::default()).unwrap(), g);
        let spec = QuantSpec {
            ste_clip: Some(1.0),
            ..Default::default()
        };
        assert_eq!(weight_ste_backward(&g, &w, &spec).unwrap().data(), &[0.3, 0.0]);
    }

    #[test]
    fn sign_examples() {
        let (b, saved) = sign_activation(&t(&[-2.0, -0.5, 0.0, 0.5])).unwrap();
        assert_eq!(b.data(), &[-1.0, -1.0, 1.0, 1.0]);
        assert_eq!(saved.data(), &[-2.0, -0.5, 0.0, 0.5]);
        let (bb, _) = sign_activation(&b).unwrap();
        assert_eq!(bb, b);
    }

    #[test]
    fn surrogate_factor_closed_form() {
        let xs = [-1.5, -0.5, 0.0, 0.5, 1.5, -1.0, 1.0];
        let want = [0.0, 1.0, 2.0, 1.0, 0.0, 0.0, 0.0];
        for (x, w) in xs.iter().zip(want) {
            assert_eq!(sign_surrogate_factor(*x), w, "x = {x}");
        }
        let g = sign_activation_backward(&t(&[0.0, 0.0]), &t(&[0.1, -0.2])).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn surrogate_factor_is_derivative_of_approx_sign() {
        let h = 1e-6;
        let mut x = -1.9;
        while x < 1.9 {
            let near_break = [-1.0, 0.0, 1.0].iter().any(|b: &f64| (x - b).abs() < 1e-3);
            if !near_break {
                let fd = (approx_sign(x + h) - approx_sign(x - h)) / (2.0 * h);
                assert!((fd - sign_surrogate_factor(x)).abs() < 1e-6, "x = {x}");
            }
            x += 0.0137;
        }
    }

    #[test]
    fn surrogate_integrates_to_two() {
        let n = 200_000;
        let h = 2.0 / n as f64;
        let s: f64 = (0..n).map(|i| sign_surrogate_factor(-1.0 + (i as f64 + 0.5) * h) * h).sum();
        assert!((s - 2.0).abs() < 1e-8);
    }

    #[test]
    fn uniform_quantize_examples() {
        let q = |y: f64| uniform_quantize_scalar(y, 2, 1.0);
        assert!((q(0.4) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(q(1.7), 1.0);
        // 0.5·3 = 1.5 ties away from zero to 2
        assert!((q(0.5) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(q(-0.2), 0.0);
        assert!(uniform_quantize(&t(&[0.1]), 1, 1.0).is_err());
        let g = uniform_quantize_backward(&t(&[1.0, 1.0, 1.0]), &t(&[-0.1, 0.5, 1.2]), 1.0).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn validate_rejects_bad_fields() {
        let spec = QuantSpec {
            activation_scheme: ActivationScheme::UniformKbit,
            activation_bits: 1,
            ..Default::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config { field, .. }) if field == "quant.activation_bits"));
        let spec = QuantSpec {
            clip_bound: 0.0,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn fixedpoint_examples() {
        assert_eq!(fixedpoint_dot(&[1.0], &[-1.0], 1).unwrap().integer, -1);
        assert_eq!(fixedpoint_dot(&[1.0, 1.0], &[1.0, 1.0], 1).unwrap().integer, 2);
        assert!(fixedpoint_dot(&[1.0], &[1.0], 0).is_err());
        assert!(fixedpoint_dot(&[1.0], &[1.0, 2.0], 2).is_err());
    }

    proptest! {
        #[test]
        fn quantizer_idempotent_and_monotone(a in -2.0f64..3.0, b in -2.0f64..3.0, bits in 2u32..6) {
            let qa = uniform_quantize_scalar(a, bits, 1.5);
            prop_assert_eq!(uniform_quantize_scalar(qa, bits, 1.5), qa);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(uniform_quantize_scalar(lo, bits, 1.5) <= uniform_quantize_scalar(hi, bits, 1.5));
        }

        #[test]
        fn mean_abs_minimizes_reconstruction(w in proptest::collection::vec(-2.0f64..2.0, 1..40), eps in 1e-3f64..0.1) {
            let s: Vec<f64> = w.iter().map(|&x| sign(x)).collect();
            let alpha = w.iter().map(|x| x.abs()).sum::<f64>() / w.len() as f64;
            let err = |a: f64| w.iter().zip(&s).map(|(x, s)| (x - a * s).powi(2)).sum::<f64>();
            prop_assert!(err(alpha) <= err(alpha + eps) + 1e-12);
            prop_assert!(err(alpha) <= err(alpha - eps) + 1e-12);
        }

        #[test]
        fn fixedpoint_matches_quantize_then_multiply(
            bits in 1u32..4,
            pairs in proptest::collection::vec((-1.2f64..1.2, -1.2f64..1.2), 1..64),
        ) {
            let (w, x): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let got = fixedpoint_dot(&w, &x, bits).unwrap();
            let oracle: i64 = w.iter().zip(&x)
                .map(|(a, b)| fixedpoint_code(fixedpoint_level(*a, bits), bits) * fixedpoint_code(fixedpoint_level(*b, bits), bits))
                .sum();
            prop_assert_eq!(got.integer, oracle);
            prop_assert!(got.integer.abs() <= FixedPointDot::bound(bits, w.len()));
            prop_assert_eq!(got.xnor_dots, (bits * bits) as u64);
        }
    }
}
