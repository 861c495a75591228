//! Exact accumulation of f64 sums.
//!
//! Merged summaries must agree bit-for-bit no matter how the merge tree is
//! shaped, and floating-point addition cannot provide that:
//! `(1e16 + 1.0) + 1.0 != 1e16 + (1.0 + 1.0)`. Every finite double is an
//! integer multiple of 2^-1074, so sums are carried as arbitrary-precision
//! integers in that fixed-point scale. Integer addition is associative and
//! commutative, and rounding back to f64 happens exactly once, at read time,
//! with round-to-nearest-even.

use num_bigint::{BigInt, BigUint, Sign};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Order-independent exact sum of finite f64 values.
///
/// Stored as `scaled * 2^-1074` with `scaled` an arbitrary-precision
/// integer. Serializes as the decimal string of `scaled`, so artifact
/// round-trips preserve the sum exactly.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExactSum {
    scaled: BigInt,
}

impl ExactSum {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_values(values: &[f64]) -> Self {
        let mut sum = Self::zero();
        for &v in values {
            sum.add(v);
        }
        sum
    }

    /// Adds a finite value. Panics on NaN or infinity; callers validate
    /// readings before accumulation.
    pub fn add(&mut self, x: f64) {
        assert!(x.is_finite(), "ExactSum::add requires finite input, got {x}");
        let bits = x.to_bits();
        let negative = bits >> 63 == 1;
        let exp_field = ((bits >> 52) & 0x7FF) as u32;
        let frac = bits & ((1u64 << 52) - 1);
        let mag = if exp_field == 0 {
            // Subnormal: value = frac * 2^-1074.
            BigUint::from(frac)
        } else {
            // Normal: value = (2^52 + frac) * 2^(exp_field - 1075).
            BigUint::from((1u64 << 52) | frac) << (exp_field - 1)
        };
        if mag == BigUint::ZERO {
            return;
        }
        let sign = if negative { Sign::Minus } else { Sign::Plus };
        self.scaled += BigInt::from_biguint(sign, mag);
    }

    pub fn merge(&mut self, other: &Self) {
        self.scaled += &other.scaled;
    }

    /// The sum rounded to the nearest f64 (ties to even). Saturates to
    /// infinity if the exact sum exceeds the f64 range.
    pub fn to_f64(&self) -> f64 {
        let (sign, mag) = self.scaled.clone().into_parts();
        if mag == BigUint::ZERO {
            return 0.0;
        }
        let nbits = mag.bits();
        let abs = if nbits <= 53 {
            let m = mag.iter_u64_digits().next().unwrap_or(0);
            libm::scalbn(m as f64, -1074)
        } else {
            let shift = nbits - 53;
            let top = (&mag >> shift).iter_u64_digits().next().unwrap_or(0);
            let round_up = mag.bit(shift - 1)
                && (top & 1 == 1
                    || mag
                        .trailing_zeros()
                        .is_some_and(|tz| tz < shift - 1));
            let m = top + u64::from(round_up);
            libm::scalbn(m as f64, (shift as i32) - 1074)
        };
        if sign == Sign::Minus {
            -abs
        } else {
            abs
        }
    }

    /// Mean over `n` observations; `n` must be positive.
    pub fn mean(&self, n: u64) -> f64 {
        assert!(n > 0, "mean of an empty accumulator");
        self.to_f64() / n as f64
    }
}

impl Serialize for ExactSum {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.scaled.to_str_radix(10))
    }
}

impl<'de> Deserialize<'de> for ExactSum {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        let scaled = text
            .parse::<BigInt>()
            .map_err(|e| D::Error::custom(format!("invalid exact sum {text:?}: {e}")))?;
        Ok(Self { scaled })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of(values: &[f64]) -> f64 {
        ExactSum::from_values(values).to_f64()
    }

    #[test]
    fn addition_order_cannot_change_the_result() {
        // Plain f64 accumulation loses one of the 1.0s here.
        let a = sum_of(&[1e16, 1.0, 1.0]);
        let b = sum_of(&[1.0, 1e16, 1.0]);
        let c = sum_of(&[1.0, 1.0, 1e16]);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(b.to_bits(), c.to_bits());
        assert_eq!(a, 1e16 + 2.0);
    }

    #[test]
    fn merge_is_associative_and_commutative() {
        let parts = [vec![0.1, 0.2, 0.3], vec![1e300, -1e300], vec![5e-324, 1.5]];
        let mut left = ExactSum::from_values(&parts[0]);
        left.merge(&ExactSum::from_values(&parts[1]));
        left.merge(&ExactSum::from_values(&parts[2]));

        let mut right = ExactSum::from_values(&parts[2]);
        let mut inner = ExactSum::from_values(&parts[1]);
        inner.merge(&ExactSum::from_values(&parts[0]));
        right.merge(&inner);

        assert_eq!(left, right);
        assert_eq!(left.to_f64().to_bits(), right.to_f64().to_bits());
    }

    #[test]
    fn exact_cancellation_yields_zero() {
        assert_eq!(sum_of(&[0.1, 0.2, -0.2, -0.1]), 0.0);
    }

    #[test]
    fn rounding_is_nearest_even() {
        // 1 + 2^-53 sits exactly on the midpoint: ties to even keeps 1.0.
        let tie = sum_of(&[1.0, 2f64.powi(-53)]);
        assert_eq!(tie, 1.0);
        // Nudging past the midpoint rounds up to the next representable.
        let above = sum_of(&[1.0, 2f64.powi(-53), 2f64.powi(-105)]);
        assert_eq!(above, 1.0 + f64::EPSILON);
    }

    #[test]
    fn subnormals_accumulate_exactly() {
        let tiny = 5e-324;
        assert_eq!(sum_of(&[tiny, tiny, tiny]), 3.0 * 5e-324);
        assert_eq!(sum_of(&[f64::MIN_POSITIVE, -tiny]), f64::MIN_POSITIVE - 5e-324);
    }

    #[test]
    fn overflowing_sums_saturate() {
        assert_eq!(sum_of(&[1e308, 1e308, 1e308]), f64::INFINITY);
        assert_eq!(sum_of(&[-1e308, -1e308, -1e308]), f64::NEG_INFINITY);
    }

    #[test]
    fn serde_round_trip_is_exact() {
        let sum = ExactSum::from_values(&[0.1, 1e16, -3.75, 5e-324]);
        let json = serde_json::to_string(&sum).unwrap();
        let back: ExactSum = serde_json::from_str(&json).unwrap();
        assert_eq!(sum, back);
    }

    #[test]
    #[should_panic(expected = "finite input")]
    fn non_finite_input_panics() {
        ExactSum::zero().add(f64::NAN);
    }
}
