use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const WORD_BITS: usize = 64;

#[inline]
pub fn words_for(n: usize) -> usize {
    n.div_ceil(WORD_BITS)
}

/// Mask selecting the valid bits of the last word of an `n`-bit vector.
#[inline]
pub fn tail_mask(n: usize) -> u64 {
    match n % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// How `sign(0)` is encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ZeroRule {
    #[default]
    PlusOne,
    MinusOne,
}

impl ZeroRule {
    #[inline]
    pub fn is_positive<T: Real>(self, x: T) -> bool {
        x > T::zero() || (x == T::zero() && self == ZeroRule::PlusOne)
    }
}

/// A ±1 tensor packed LSB-first into 64-bit words, row-major over its logical
/// shape. Bit 1 is +1, bit 0 is −1, and pad bits past the last element are 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitTensor {
    shape: Vec<usize>,
    len: usize,
    words: Vec<u64>,
}

impl BitTensor {
    /// All elements −1.
    pub fn negative(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            len,
            words: vec![0; words_for(len)],
        }
    }

    pub fn from_bools(shape: &[usize], bits: impl IntoIterator<Item = bool>) -> Result<Self> {
        let mut t = Self::negative(shape);
        let mut count = 0;
        for (i, b) in bits.into_iter().enumerate() {
            if i >= t.len {
                count = i + 1;
                break;
            }
            if b {
                t.words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
            }
            count = i + 1;
        }
        if count != t.len {
            return Err(Error::LengthMismatch {
                left: t.len,
                right: count,
            });
        }
        Ok(t)
    }

    /// Wraps raw words, enforcing the zero-pad invariant.
    pub fn from_words(shape: &[usize], words: Vec<u64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if words.len() != words_for(len) {
            return Err(Error::LengthMismatch {
                left: words_for(len),
                right: words.len(),
            });
        }
        if let Some(&last) = words.last() {
            if last & !tail_mask(len) != 0 {
                return Err(Error::InvalidArgument("pad bits must be zero".into()));
            }
        }
        Ok(Self {
            shape: shape.to_vec(),
            len,
            words,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Number of valid elements.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    /// Element `i` as ±1.
    #[inline]
    pub fn sign(&self, i: usize) -> i32 {
        if self.bit(i) {
            1
        } else {
            -1
        }
    }

    pub fn unpack(&self) -> Vec<i8> {
        (0..self.len).map(|i| if self.bit(i) { 1 } else { -1 }).collect()
    }

    pub fn unpack_real<T: Real>(&self) -> Vec<T> {
        (0..self.len)
            .map(|i| if self.bit(i) { T::one() } else { -T::one() })
            .collect()
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }
}

/// Packs `sign(t)` under the given zero rule.
pub fn pack_signs<T: Real>(t: &[T], shape: &[usize], zero_rule: ZeroRule) -> Result<BitTensor> {
    let n: usize = shape.iter().product();
    if n != t.len() {
        return Err(Error::ShapeMismatch {
            context: "pack_signs",
            expected: vec![n],
            actual: vec![t.len()],
        });
    }
    let mut out = BitTensor::negative(shape);
    for (i, &x) in t.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite {
                index: i,
                value: x.as_f64(),
            });
        }
        if zero_rule.is_positive(x) {
            out.words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
        }
    }
    Ok(out)
}

/// ±1 dot product of two packed vectors of `n` valid elements:
/// `2·popcount(xnor(a, b)) − n` over the valid bits.
#[inline(always)]
pub fn xnor_popcount_words(a: &[u64], b: &[u64], n: usize) -> i32 {
    let nw = words_for(n);
    debug_assert!(a.len() >= nw && b.len() >= nw);
    if nw == 0 {
        return 0;
    }
    let mut matches = 0u32;
    for i in 0..nw - 1 {
        matches += (!(a[i] ^ b[i])).count_ones();
    }
    matches += (!(a[nw - 1] ^ b[nw - 1]) & tail_mask(n)).count_ones();
    2 * matches as i32 - n as i32
}

/// Like [`xnor_popcount_words`], counting only positions set in `mask`;
/// returns the dot over those positions and how many there were.
#[inline(always)]
pub fn xnor_popcount_masked(a: &[u64], b: &[u64], mask: &[u64]) -> (i32, u32) {
    let mut matches = 0u32;
    let mut valid = 0u32;
    for ((&x, &y), &m) in a.iter().zip(b).zip(mask) {
        matches += (!(x ^ y) & m).count_ones();
        valid += m.count_ones();
    }
    (2 * matches as i32 - valid as i32, valid)
}

/// Checked ±1 dot product of two bit tensors.
pub fn xnor_popcount_dot(a: &BitTensor, b: &BitTensor) -> Result<i32> {
    if a.len != b.len {
        return Err(Error::LengthMismatch {
            left: a.len,
            right: b.len,
        });
    }
    Ok(xnor_popcount_words(&a.words, &b.words, a.len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn packs_mixed_signs_lsb_first() {
        let t = pack_signs(&[0.5, -0.3, 0.0, 2.0], &[4], ZeroRule::PlusOne).unwrap();
        assert_eq!(t.words(), &[0b1101]);
        assert_eq!(t.unpack(), vec![1, -1, 1, 1]);
    }

    #[test]
    fn zero_rule_minus_one() {
        let t = pack_signs(&[0.0f64, 1.0], &[2], ZeroRule::MinusOne).unwrap();
        assert_eq!(t.unpack(), vec![-1, 1]);
    }

    #[test]
    fn all_negative_word_is_zero() {
        let v = vec![-1.0f64; 64];
        let t = pack_signs(&v, &[64], ZeroRule::PlusOne).unwrap();
        assert_eq!(t.words(), &[0]);
    }

    #[test]
    fn rejects_non_finite() {
        let err = pack_signs(&[1.0, f64::NAN], &[2], ZeroRule::PlusOne).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn rejects_dirty_pad_bits() {
        assert!(BitTensor::from_words(&[3], vec![0b1000]).is_err());
        assert!(BitTensor::from_words(&[3], vec![0b111]).is_ok());
    }

    #[test]
    fn dot_examples() {
        let a = pack_signs(&[1.0, 1.0, -1.0, -1.0], &[4], ZeroRule::PlusOne).unwrap();
        let b = pack_signs(&[1.0, -1.0, 1.0, -1.0], &[4], ZeroRule::PlusOne).unwrap();
        assert_eq!(xnor_popcount_dot(&a, &b).unwrap(), 0);
        assert_eq!(xnor_popcount_dot(&a, &a).unwrap(), 4);
        let c = BitTensor::negative(&[5]);
        assert!(xnor_popcount_dot(&a, &c).is_err());
    }

    fn signs(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-2.0f64..2.0, n)
    }

    proptest! {
        #[test]
        fn unpack_is_elementwise_sign(v in proptest::collection::vec(-3.0f64..3.0, 0..300)) {
            let t = pack_signs(&v, &[v.len()], ZeroRule::PlusOne).unwrap();
            let want: Vec<i8> = v.iter().map(|&x| if x >= 0.0 { 1 } else { -1 }).collect();
            prop_assert_eq!(t.unpack(), want);
            if let Some(&last) = t.words().last() {
                prop_assert_eq!(last & !tail_mask(v.len()), 0);
            }
        }

        #[test]
        fn dot_matches_float_oracle((a, b) in (1usize..200).prop_flat_map(|n| (signs(n), signs(n)))) {
            let n = a.len();
            let pa = pack_signs(&a, &[n], ZeroRule::PlusOne).unwrap();
            let pb = pack_signs(&b, &[n], ZeroRule::PlusOne).unwrap();
            let oracle: f64 = pa.unpack_real::<f64>().iter().zip(pb.unpack_real::<f64>()).map(|(x, y)| x * y).sum();
            let got = xnor_popcount_dot(&pa, &pb).unwrap();
            prop_assert_eq!(got as f64, oracle);
            prop_assert!(got.unsigned_abs() as usize <= n);
            prop_assert_eq!((got - n as i32).rem_euclid(2), 0);
            prop_assert_eq!(xnor_popcount_dot(&pa, &pa).unwrap(), n as i32);
        }
    }
}
