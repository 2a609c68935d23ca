//! Log-domain arithmetic shared by the estimators.
//!
//! Scores `u = v·q` on real embedding data exceed 30 and can legally reach
//! the hundreds, so every sum of `exp(u)` terms in this crate goes through
//! the max-shifted forms below instead of touching `exp` directly.

/// `ln Σ exp(xᵢ)` with max shift. Empty input yields `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        // all -inf (empty sum) or a +inf/NaN slipped in; propagate as-is
        return m;
    }
    let sum: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}

/// `ln(exp(a) + exp(b))`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(exp(a) - exp(b))` for `a >= b`; `-inf` when they cancel exactly.
pub fn log_sub_exp(a: f64, b: f64) -> f64 {
    debug_assert!(a >= b);
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a == b {
        return f64::NEG_INFINITY;
    }
    a + (-((b - a).exp())).ln_1p()
}

/// Pairwise (cascade) summation: deterministic and with `O(log n)` error
/// growth, used by the sweep aggregations so reports do not drift with
/// input length.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// A real number stored as `sign * exp(log_mag)`.
///
/// Feature map values are products of up to 64 dot products and overflow
/// `f64` long before the final estimate does; carrying them in log
/// magnitude keeps everything finite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignedLog {
    pub sign: i8,
    pub log_mag: f64,
}

impl SignedLog {
    pub const ZERO: SignedLog = SignedLog {
        sign: 0,
        log_mag: f64::NEG_INFINITY,
    };

    pub fn from_f64(x: f64) -> SignedLog {
        if x == 0.0 {
            SignedLog::ZERO
        } else if x > 0.0 {
            SignedLog {
                sign: 1,
                log_mag: x.ln(),
            }
        } else {
            SignedLog {
                sign: -1,
                log_mag: (-x).ln(),
            }
        }
    }

    pub fn to_f64(self) -> f64 {
        f64::from(self.sign) * self.log_mag.exp()
    }

    pub fn is_zero(self) -> bool {
        self.sign == 0
    }

    pub fn mul(self, other: SignedLog) -> SignedLog {
        if self.sign == 0 || other.sign == 0 {
            return SignedLog::ZERO;
        }
        SignedLog {
            sign: self.sign * other.sign,
            log_mag: self.log_mag + other.log_mag,
        }
    }

    /// Multiply by `exp(shift)`.
    pub fn scale_log(self, shift: f64) -> SignedLog {
        if self.sign == 0 {
            return self;
        }
        SignedLog {
            sign: self.sign,
            log_mag: self.log_mag + shift,
        }
    }
}

/// Σ terms, carried out as two max-shifted log sums (one per sign) followed
/// by one log-domain subtraction.
pub fn signed_log_sum<I: IntoIterator<Item = SignedLog>>(terms: I) -> SignedLog {
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for t in terms {
        match t.sign {
            1 => pos.push(t.log_mag),
            -1 => neg.push(t.log_mag),
            _ => {}
        }
    }
    let lp = log_sum_exp(&pos);
    let ln = log_sum_exp(&neg);
    if lp > ln {
        SignedLog {
            sign: 1,
            log_mag: log_sub_exp(lp, ln),
        }
    } else if ln > lp {
        SignedLog {
            sign: -1,
            log_mag: log_sub_exp(ln, lp),
        }
    } else if lp == f64::NEG_INFINITY {
        SignedLog::ZERO
    } else {
        // exact cancellation
        SignedLog::ZERO
    }
}

/// splitmix64 step; used to derive independent stream seeds from a base
/// seed plus a tag so that parallel work stays reproducible.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        let diff = a[i] - b[i];
        acc += diff * diff;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_naive_in_safe_range() {
        let xs = [0.3f64, -1.2, 2.5, 0.0];
        let naive: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-14);
    }

    #[test]
    fn lse_survives_large_scores() {
        let xs = [700.0, 699.0, 10.0];
        let got = log_sum_exp(&xs);
        // ln(e^700 + e^699 + e^10) = 700 + ln(1 + e^-1 + e^-690)
        let expected = 700.0 + (1.0 + (-1.0f64).exp()).ln();
        assert!((got - expected).abs() < 1e-12);
        assert!(got.is_finite());
    }

    #[test]
    fn lse_empty_is_neg_inf() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn signed_log_roundtrip_and_sum() {
        let terms = [3.5, -1.25, 0.75, -3.0];
        let sum: f64 = terms.iter().sum();
        let got = signed_log_sum(terms.iter().map(|&x| SignedLog::from_f64(x))).to_f64();
        assert!((got - sum).abs() < 1e-12);
    }

    #[test]
    fn signed_log_exact_cancellation() {
        let s = signed_log_sum([SignedLog::from_f64(2.0), SignedLog::from_f64(-2.0)]);
        assert!(s.is_zero());
    }

    #[test]
    fn pairwise_sum_matches_exact_on_integers() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500500.0);
    }

    #[test]
    fn derive_seed_spreads_tags() {
        let a = derive_seed(42, 0);
        let b = derive_seed(42, 1);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(42, 0));
    }
}
