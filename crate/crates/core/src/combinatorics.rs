//! Log-space binomials, beta moments and the row/column merge identity for
//! multinomial coefficients.
//!
//! Every density in the crate is carried as a natural logarithm. A weight of
//! zero is represented by [`LogValue::ZERO`] (negative infinity) rather than an
//! error so that kernel builders can treat forbidden moves like any other.

use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Natural logarithm of a nonnegative quantity.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct LogValue(f64);

impl LogValue {
    /// The log of zero weight.
    pub const ZERO: LogValue = LogValue(f64::NEG_INFINITY);
    /// The log of one.
    pub const ONE: LogValue = LogValue(0.0);

    pub fn new(value: f64) -> Self {
        LogValue(value)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == f64::NEG_INFINITY
    }

    pub fn exp(self) -> f64 {
        self.0.exp()
    }
}

impl Add for LogValue {
    type Output = LogValue;
    /// Product of the underlying quantities.
    fn add(self, rhs: LogValue) -> LogValue {
        LogValue(self.0 + rhs.0)
    }
}

impl Sub for LogValue {
    type Output = LogValue;
    /// Quotient of the underlying quantities.
    fn sub(self, rhs: LogValue) -> LogValue {
        LogValue(self.0 - rhs.0)
    }
}

/// `ln n!`.
pub fn log_factorial(n: u64) -> f64 {
    if n < 2 {
        0.0
    } else {
        ln_gamma(n as f64 + 1.0)
    }
}

/// `ln C(n, k)`, or [`LogValue::ZERO`] when `k` lies outside `0..=n`.
pub fn log_binomial(n: u64, k: i64) -> LogValue {
    if k < 0 || k as u64 > n {
        return LogValue::ZERO;
    }
    let k = k as u64;
    if k == 0 || k == n {
        return LogValue::ONE;
    }
    // Summing the two lower terms first keeps C(n,k) and C(n,n-k) bit-identical.
    LogValue(log_factorial(n) - (log_factorial(k) + log_factorial(n - k)))
}

/// `ln` of the multinomial coefficient `(Σ parts)! / Π parts!`.
pub fn log_multinomial(parts: &[u64]) -> f64 {
    let total: u64 = parts.iter().sum();
    log_factorial(total) - parts.iter().map(|&p| log_factorial(p)).sum::<f64>()
}

/// `E[X^k (1-X)^(n-k)]` for `X` uniform on `[0, 1]`, i.e. `1 / ((n+1) C(n,k))`.
pub fn beta_moment(n: u64, k: i64) -> Result<f64> {
    if k < 0 || k as u64 > n {
        return Err(Error::InvalidArgument(format!(
            "beta moment needs 0 <= k <= n, got n = {n}, k = {k}"
        )));
    }
    let lb = log_binomial(n, k).value();
    Ok((-((n as f64 + 1.0).ln()) - lb).exp())
}

/// Evaluates both sides of the 2×K merge identity
///
/// `C(S, r1) · M(r1; a1·) · M(r2; a2·) = M(S; c·) · Π_j C(c_j, a1j)`
///
/// in log space (`S` the grand total, `r` row sums, `c` column sums, `M` a
/// multinomial coefficient) and reports agreement within `1e-9`.
/// Malformed input (ragged rows or `K = 0`) yields `false`.
pub fn verify_merge_identity(rows: [&[u64]; 2]) -> bool {
    let k = rows[0].len();
    if k == 0 || rows[1].len() != k {
        return false;
    }
    let r1: u64 = rows[0].iter().sum();
    let r2: u64 = rows[1].iter().sum();
    let total = r1 + r2;
    let cols: Vec<u64> = (0..k).map(|j| rows[0][j] + rows[1][j]).collect();

    let lhs = log_binomial(total, r1 as i64).value()
        + log_multinomial(rows[0])
        + log_multinomial(rows[1]);
    let rhs = log_multinomial(&cols)
        + (0..k)
            .map(|j| log_binomial(cols[j], rows[0][j] as i64).value())
            .sum::<f64>();
    (lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0)
}

/// Numerically stable `ln Σ exp(x_i)`; returns `-inf` for an empty input.
pub fn log_sum_exp<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64>,
    I::IntoIter: Clone,
{
    let it = values.into_iter();
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + it.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `ln(e^a + e^b)`.
pub fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Probability `e^a / (e^a + e^b)` evaluated without overflow.
pub fn logistic_share(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return 0.0;
    }
    if b == f64::NEG_INFINITY {
        return 1.0;
    }
    1.0 / (1.0 + (b - a).exp())
}

/// Cached `ln n!` for `n` up to a fixed bound; used on the hot paths.
#[derive(Debug, Clone)]
pub struct LogFactorials {
    table: Vec<f64>,
}

impl LogFactorials {
    pub fn new(max_n: u64) -> Self {
        LogFactorials {
            table: (0..=max_n).map(log_factorial).collect(),
        }
    }

    #[inline]
    pub fn get(&self, n: u64) -> f64 {
        self.table[n as usize]
    }

    /// `ln C(n,k)` with `-inf` outside `0..=n`.
    #[inline]
    pub fn binomial(&self, n: u64, k: i64) -> f64 {
        if k < 0 || k as u64 > n {
            return f64::NEG_INFINITY;
        }
        let k = k as u64;
        self.table[n as usize] - (self.table[k as usize] + self.table[(n - k) as usize])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pascal(n: usize) -> Vec<Vec<u128>> {
        let mut rows = vec![vec![1u128]];
        for i in 1..=n {
            let prev = &rows[i - 1];
            let mut row = vec![1u128; i + 1];
            for k in 1..i {
                row[k] = prev[k - 1] + prev[k];
            }
            rows.push(row);
        }
        rows
    }

    fn multinomial_exact(parts: &[u64], tri: &[Vec<u128>]) -> u128 {
        let mut acc = 1u128;
        let mut run = 0usize;
        for &p in parts {
            run += p as usize;
            acc *= tri[run][p as usize];
        }
        acc
    }

    #[test]
    fn small_binomials() {
        assert!((log_binomial(4, 2).value() - 6f64.ln()).abs() < 1e-12);
        for n in [0u64, 1, 7, 300] {
            assert_eq!(log_binomial(n, 0).value(), 0.0);
        }
        assert!(log_binomial(5, -1).is_zero());
        assert!(log_binomial(5, 6).is_zero());
    }

    #[test]
    fn binomial_against_pascal() {
        let tri = pascal(20);
        assert_eq!(tri[20][7], 77520);
        let lg = ln_gamma(21.0) - ln_gamma(8.0) - ln_gamma(14.0);
        let v = log_binomial(20, 7).value();
        assert!((v - (77520f64).ln()).abs() < 1e-12);
        assert!((v - lg).abs() < 1e-12);
    }

    #[test]
    fn binomial_symmetry_is_exact() {
        for n in 0..=500u64 {
            for k in 0..=n {
                assert_eq!(
                    log_binomial(n, k as i64).value(),
                    log_binomial(n, (n - k) as i64).value()
                );
            }
        }
    }

    #[test]
    fn binomial_row_normalizes() {
        for n in 0..=200u64 {
            let s: f64 = (0..=n)
                .map(|k| (log_binomial(n, k as i64).value() - n as f64 * 2f64.ln()).exp())
                .sum();
            assert!((s - 1.0).abs() < 1e-10, "n = {n}: {s}");
        }
    }

    /// Composite Gauss–Legendre on [0,1] as an independent route to the moment.
    fn quad_moment(n: i32, k: i32) -> f64 {
        let nodes = [
            (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
            (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
            (0.0, 0.568_888_888_888_888_9),
            (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
            (0.906_179_845_938_664, 0.236_926_885_056_189_1),
        ];
        let panels = 64;
        let h = 1.0 / panels as f64;
        let mut s = 0.0;
        for p in 0..panels {
            let mid = (p as f64 + 0.5) * h;
            for (x, w) in nodes {
                let t: f64 = mid + 0.5 * h * x;
                s += 0.5 * h * w * t.powi(k) * (1.0 - t).powi(n - k);
            }
        }
        s
    }

    #[test]
    fn beta_moment_examples() {
        assert!((beta_moment(0, 0).unwrap() - 1.0).abs() < 1e-15);
        assert!((beta_moment(2, 1).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        let v = beta_moment(5, 2).unwrap();
        assert!((v - 1.0 / 60.0).abs() < 1e-15);
        assert!((v - quad_moment(5, 2)).abs() < 1e-10);
        assert!(beta_moment(3, 4).is_err());
        assert!(beta_moment(3, -1).is_err());
    }

    #[test]
    fn beta_moment_times_normalizer_is_one() {
        let tri = pascal(60);
        for n in 0..=60u64 {
            for k in 0..=n {
                let v = beta_moment(n, k as i64).unwrap() * (n as f64 + 1.0)
                    * tri[n as usize][k as usize] as f64;
                assert!((v - 1.0).abs() < 1e-10, "n={n} k={k}: {v}");
            }
        }
    }

    #[test]
    fn merge_identity_examples() {
        assert!(verify_merge_identity([&[1, 0], &[0, 1]]));
        assert!(verify_merge_identity([&[0, 0], &[0, 0]]));
        assert!(!verify_merge_identity([&[1, 0], &[0]]));
        assert!(!verify_merge_identity([&[], &[]]));

        let rows: [&[u64]; 2] = [&[3, 6, 1], &[2, 0, 5]];
        assert!(verify_merge_identity(rows));
        // Exact integer evaluation of both sides.
        let tri = pascal(40);
        let r1: u64 = rows[0].iter().sum();
        let r2: u64 = rows[1].iter().sum();
        let cols: Vec<u64> = (0..3).map(|j| rows[0][j] + rows[1][j]).collect();
        let lhs = tri[(r1 + r2) as usize][r1 as usize]
            * multinomial_exact(rows[0], &tri)
            * multinomial_exact(rows[1], &tri);
        let rhs = multinomial_exact(&cols, &tri)
            * (0..3)
                .map(|j| tri[cols[j] as usize][rows[0][j] as usize])
                .product::<u128>();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(log_sum_exp(Vec::<f64>::new()), f64::NEG_INFINITY);
        let v = log_sum_exp([1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_add(-1e308, 0.0)).abs() < 1e-300);
        assert_eq!(logistic_share(1.0, 1.0), 0.5);
        assert_eq!(logistic_share(f64::NEG_INFINITY, 0.0), 0.0);
    }

    #[test]
    fn table_matches_direct() {
        let t = LogFactorials::new(400);
        for n in [0u64, 3, 17, 400] {
            for k in 0..=n as i64 {
                assert_eq!(t.binomial(n, k), log_binomial(n, k).value());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn merge_identity_random(k in 1usize..=4, seed in proptest::collection::vec(0u64..=8, 8)) {
            let r1 = &seed[..k];
            let r2 = &seed[4..4 + k];
            prop_assert!(verify_merge_identity([r1, r2]));
        }
    }
}
