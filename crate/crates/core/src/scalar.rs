//! Numeric abstraction used by every probability, share and mean in the crate.
//!
//! Probabilities are bandwidth ratios, so they are exactly representable as
//! rationals. Reports and simulations usually want `f64`; the threat
//! propagation checks want exact arithmetic so that sums such as
//! `0.0073 + 0.0014` compare equal to `0.0087` without a tolerance.

use std::fmt::Debug;
use std::iter::Sum;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Num, ToPrimitive};

/// A scalar that probabilities and averages can be computed in.
pub trait Scalar: Num + Clone + PartialOrd + Debug + Send + Sync + 'static {
    /// Builds `num / den`. `den` must be non-zero.
    fn from_ratio(num: u128, den: u128) -> Self;

    /// Lossy conversion for rendering and statistics.
    fn to_f64(&self) -> f64;

    /// Builds a signed ratio. `den` must be non-zero.
    fn from_signed_ratio(num: i128, den: i128) -> Self {
        let magnitude = Self::from_ratio(num.unsigned_abs(), den.unsigned_abs());
        if (num < 0) != (den < 0) && num != 0 {
            Self::zero() - magnitude
        } else {
            magnitude
        }
    }

    fn from_count(n: u128) -> Self {
        Self::from_ratio(n, 1)
    }

    /// Parses a plain decimal such as `0.0073` or `12`.
    fn parse_decimal(text: &str) -> Option<Self> {
        let text = text.trim();
        let (int_part, frac_part) = match text.split_once('.') {
            Some((i, f)) => (i, f),
            None => (text, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return None;
        }
        if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
            return None;
        }
        let digits = format!("{int_part}{frac_part}");
        let num: u128 = if digits.is_empty() { 0 } else { digits.parse().ok()? };
        let den = 10u128.checked_pow(frac_part.len() as u32)?;
        Some(Self::from_ratio(num, den))
    }
}

impl Scalar for f64 {
    fn from_ratio(num: u128, den: u128) -> Self {
        num as f64 / den as f64
    }

    fn to_f64(&self) -> f64 {
        *self
    }
}

impl Scalar for f32 {
    fn from_ratio(num: u128, den: u128) -> Self {
        (num as f64 / den as f64) as f32
    }

    fn to_f64(&self) -> f64 {
        f64::from(*self)
    }
}

impl Scalar for BigRational {
    fn from_ratio(num: u128, den: u128) -> Self {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }

    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
}

/// Sums an iterator of scalars.
pub fn sum<S: Scalar, I: IntoIterator<Item = S>>(items: I) -> S {
    items.into_iter().fold(S::zero(), |acc, x| acc + x)
}

/// Newtype so scalar sums can be collected with `Iterator::sum`.
#[derive(Debug, Clone, PartialEq, PartialOrd)]
pub struct Total<S>(pub S);

impl<S: Scalar> Sum<S> for Total<S> {
    fn sum<I: Iterator<Item = S>>(iter: I) -> Self {
        Total(sum(iter))
    }
}

/// Renders a share in `[0, 1]` (given as an exact integer ratio) as a
/// percentage with two decimals, rounding half up.
pub fn percent_2dp(part: u128, whole: u128) -> String {
    if whole == 0 {
        return "0.00".to_string();
    }
    // hundredths of a percent, half-up
    let scaled = (part * 10_000 * 2 + whole) / (whole * 2);
    format!("{}.{:02}", scaled / 100, scaled % 100)
}
