//! Classical group tests: independent-samples t (pooled and Welch), one-way
//! ANOVA, Levene, and the distribution functions behind their p-values.

use crate::error::{Error, Result};
use crate::scalar::{mean, median, variance_sample, Real};

/// Per-group summary with the sample (n − 1) standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupSummary<T> {
    pub n: usize,
    pub mean: T,
    pub sd: T,
}

impl<T: Real> GroupSummary<T> {
    pub fn new(n: usize, mean: T, sd: T) -> Result<Self> {
        let s = GroupSummary { n, mean, sd };
        s.validate()?;
        Ok(s)
    }

    pub fn from_samples(xs: &[T]) -> Result<Self> {
        Self::new(xs.len(), mean(xs), variance_sample(xs).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Data(format!("group needs at least 2 observations, got {}", self.n)));
        }
        if !(self.sd >= T::zero()) || !self.mean.is_finite() || !self.sd.is_finite() {
            return Err(Error::Data(format!(
                "invalid group summary: mean {}, sd {}",
                self.mean, self.sd
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Df<T> {
    Single(T),
    Pair(T, T),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult<T> {
    pub statistic: T,
    pub df: Df<T>,
    /// Two-sided p for t-tests, upper-tail p for F-based tests.
    pub p_two_sided: T,
    /// First group minus second; t-tests only.
    pub mean_difference: Option<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Center {
    #[default]
    Mean,
    Median,
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma<T: Real>(x: T) -> T {
    if x < T::lit(0.5) {
        // Reflection keeps the series in its accurate range.
        let pi = T::PI();
        return (pi / (pi * x).sin()).ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut acc = T::lit(LANCZOS[0]);
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc = acc + T::lit(c) / (x + T::from_usize_lossy(i));
    }
    let t = x + T::lit(LANCZOS_G + 0.5);
    T::lit(0.5) * (T::lit(2.0) * T::PI()).ln() + (x + T::lit(0.5)) * t.ln() - t + acc.ln()
}

fn beta_continued_fraction<T: Real>(a: T, b: T, x: T) -> T {
    let tiny = T::min_positive_value() / T::epsilon();
    let eps = T::epsilon();
    let one = T::one();
    let (qab, qap, qam) = (a + b, a + one, a - one);
    let mut c = one;
    let mut d = one - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = one / d;
    let mut h = d;
    for m in 1..=1000usize {
        let m = T::from_usize_lossy(m);
        let m2 = m + m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        h = h * d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        let del = d * c;
        h = h * del;
        if (del - one).abs() < eps {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn inc_beta<T: Real>(a: T, b: T, x: T) -> T {
    let (zero, one) = (T::zero(), T::one());
    if x <= zero {
        return zero;
    }
    if x >= one {
        return one;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (one - x).ln();
    let front = ln_front.exp();
    if x < (a + one) / (a + b + T::lit(2.0)) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        one - front * beta_continued_fraction(b, a, one - x) / b
    }
}

fn check_df<T: Real>(df: T) -> Result<()> {
    if df > T::zero() && df.is_finite() {
        Ok(())
    } else {
        Err(Error::Data(format!("degrees of freedom must be positive and finite, got {df}")))
    }
}

/// Student t cumulative distribution.
pub fn t_cdf<T: Real>(t: T, df: T) -> Result<T> {
    check_df(df)?;
    let half = T::lit(0.5);
    if t.is_infinite() {
        return Ok(if t > T::zero() { T::one() } else { T::zero() });
    }
    let tail = half * inc_beta(df * half, half, df / (df + t * t));
    Ok(if t >= T::zero() { T::one() - tail } else { tail })
}

/// Two-sided tail probability `P(|T| ≥ |t|)`, computed without cancellation.
pub fn t_two_sided_p<T: Real>(t: T, df: T) -> Result<T> {
    check_df(df)?;
    if t.is_infinite() {
        return Ok(T::zero());
    }
    let half = T::lit(0.5);
    Ok(inc_beta(df * half, half, df / (df + t * t)))
}

/// F cumulative distribution.
pub fn f_cdf<T: Real>(f: T, d1: T, d2: T) -> Result<T> {
    check_df(d1)?;
    check_df(d2)?;
    if f <= T::zero() {
        return Ok(T::zero());
    }
    if f.is_infinite() {
        return Ok(T::one());
    }
    let half = T::lit(0.5);
    Ok(inc_beta(d1 * half, d2 * half, d1 * f / (d1 * f + d2)))
}

/// Upper tail `P(F ≥ f)`.
pub fn f_sf<T: Real>(f: T, d1: T, d2: T) -> Result<T> {
    check_df(d1)?;
    check_df(d2)?;
    if f <= T::zero() {
        return Ok(T::one());
    }
    if f.is_infinite() {
        return Ok(T::zero());
    }
    let half = T::lit(0.5);
    Ok(inc_beta(d2 * half, d1 * half, d2 / (d2 + d1 * f)))
}

/// Independent-samples t-test from group summaries.
///
/// Two groups with zero spread and equal means give `t = 0, p = 1`.
pub fn t_test_from_summary<T: Real>(
    a: &GroupSummary<T>,
    b: &GroupSummary<T>,
    equal_variance: bool,
) -> Result<TestResult<T>> {
    a.validate()?;
    b.validate()?;
    let one = T::one();
    let (n1, n2) = (T::from_usize_lossy(a.n), T::from_usize_lossy(b.n));
    let (v1, v2) = (a.sd * a.sd, b.sd * b.sd);
    let diff = a.mean - b.mean;
    let (se, df) = if equal_variance {
        let df = n1 + n2 - T::lit(2.0);
        let sp2 = ((n1 - one) * v1 + (n2 - one) * v2) / df;
        ((sp2 * (one / n1 + one / n2)).sqrt(), df)
    } else {
        let (q1, q2) = (v1 / n1, v2 / n2);
        let denom = q1 * q1 / (n1 - one) + q2 * q2 / (n2 - one);
        let df = if denom > T::zero() {
            (q1 + q2) * (q1 + q2) / denom
        } else {
            n1 + n2 - T::lit(2.0)
        };
        ((q1 + q2).sqrt(), df)
    };
    let (statistic, p) = if se > T::zero() {
        let t = diff / se;
        (t, t_two_sided_p(t, df)?)
    } else if diff == T::zero() {
        (T::zero(), one)
    } else {
        (T::infinity() * diff.signum(), T::zero())
    };
    Ok(TestResult {
        statistic,
        df: Df::Single(df),
        p_two_sided: p,
        mean_difference: Some(diff),
    })
}

pub fn t_test<T: Real>(a: &[T], b: &[T], equal_variance: bool) -> Result<TestResult<T>> {
    t_test_from_summary(
        &GroupSummary::from_samples(a)?,
        &GroupSummary::from_samples(b)?,
        equal_variance,
    )
}

/// One-way ANOVA from group summaries. Zero within-group spread gives
/// `F = 0` when the means agree and `F = ∞` otherwise.
pub fn one_way_anova_from_summary<T: Real>(groups: &[GroupSummary<T>]) -> Result<TestResult<T>> {
    if groups.len() < 2 {
        return Err(Error::Data(format!("ANOVA needs at least 2 groups, got {}", groups.len())));
    }
    for g in groups {
        g.validate()?;
    }
    let k = T::from_usize_lossy(groups.len());
    let total: usize = groups.iter().map(|g| g.n).sum();
    let big_n = T::from_usize_lossy(total);
    let grand = groups
        .iter()
        .map(|g| T::from_usize_lossy(g.n) * g.mean)
        .sum::<T>()
        / big_n;
    let ss_between = groups
        .iter()
        .map(|g| T::from_usize_lossy(g.n) * (g.mean - grand) * (g.mean - grand))
        .sum::<T>();
    let ss_within = groups
        .iter()
        .map(|g| T::from_usize_lossy(g.n - 1) * g.sd * g.sd)
        .sum::<T>();
    let (d1, d2) = (k - T::one(), big_n - k);
    let ms_between = ss_between / d1;
    let ms_within = ss_within / d2;
    let (f, p) = if ms_within > T::zero() {
        let f = ms_between / ms_within;
        (f, f_sf(f, d1, d2)?)
    } else if ms_between > T::zero() {
        (T::infinity(), T::zero())
    } else {
        (T::zero(), T::one())
    };
    Ok(TestResult {
        statistic: f,
        df: Df::Pair(d1, d2),
        p_two_sided: p,
        mean_difference: None,
    })
}

pub fn one_way_anova<T: Real>(groups: &[Vec<T>]) -> Result<TestResult<T>> {
    let summaries = groups
        .iter()
        .map(|g| GroupSummary::from_samples(g))
        .collect::<Result<Vec<_>>>()?;
    one_way_anova_from_summary(&summaries)
}

/// Levene's test; `Center::Median` gives the Brown–Forsythe variant.
pub fn levene<T: Real>(groups: &[Vec<T>], center: Center) -> Result<TestResult<T>> {
    let deviations: Vec<Vec<T>> = groups
        .iter()
        .map(|g| {
            let c = match center {
                Center::Mean => mean(g),
                Center::Median => median(g),
            };
            g.iter().map(|&x| (x - c).abs()).collect()
        })
        .collect();
    one_way_anova(&deviations)
}
