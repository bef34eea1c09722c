//! Two-sample tests for survey analysis: one-tailed Mann-Whitney U on Likert
//! responses and one-tailed Fisher's exact test on 2x2 solve counts.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Pooled sample sizes up to this bound use exact enumeration.
pub const EXACT_MAX_TOTAL: usize = 12;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("sample is empty")]
    EmptySample,
    #[error("Likert value {0} is outside -2..=2")]
    OutOfRange(i64),
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("contingency table is empty")]
    InvalidTable,
}

/// Which group the one-tailed alternative says is larger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alternative {
    /// First group stochastically greater / higher success rate.
    #[default]
    Greater,
    Less,
}

/// Responses on a five-point scale coded -2 (strongly disagree) to +2 (strongly agree).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LikertSample(Vec<i8>);

impl LikertSample {
    pub fn new(values: &[i64]) -> Result<Self, StatsError> {
        if values.is_empty() {
            return Err(StatsError::EmptySample);
        }
        values
            .iter()
            .map(|v| if (-2..=2).contains(v) { Ok(*v as i8) } else { Err(StatsError::OutOfRange(*v)) })
            .collect::<Result<Vec<_>, _>>()
            .map(LikertSample)
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|v| *v as f64).collect()
    }
}

pub fn likert_mean(x: &LikertSample) -> f64 {
    x.0.iter().map(|v| *v as f64).sum::<f64>() / x.0.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    pub p: f64,
    pub method: PMethod,
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in &order[i..=j] {
            ranks[*k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn check(x: &[f64], y: &[f64]) -> Result<(), StatsError> {
    if x.is_empty() || y.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

fn pooled_ranks(x: &[f64], y: &[f64]) -> Vec<f64> {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    midranks(&pooled)
}

fn u_from_rank_sum(rank_sum: f64, nx: usize) -> f64 {
    rank_sum - (nx * (nx + 1)) as f64 / 2.0
}

/// Exact one-tailed p by enumerating every assignment of the pooled midranks to the first group.
pub fn mann_whitney_exact(x: &[f64], y: &[f64], alt: Alternative) -> Result<MannWhitney, StatsError> {
    check(x, y)?;
    let ranks = pooled_ranks(x, y);
    let (nx, total) = (x.len(), ranks.len());
    assert!(total < 63, "exact enumeration is limited to small samples");
    let u = u_from_rank_sum(ranks[..nx].iter().sum(), nx);

    let (mut hits, mut count) = (0u64, 0u64);
    for mask in 0u64..(1u64 << total) {
        if mask.count_ones() as usize != nx {
            continue;
        }
        let rank_sum: f64 = (0..total).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        let u_perm = u_from_rank_sum(rank_sum, nx);
        count += 1;
        let extreme = match alt {
            Alternative::Greater => u_perm >= u - 1e-9,
            Alternative::Less => u_perm <= u + 1e-9,
        };
        if extreme {
            hits += 1;
        }
    }
    Ok(MannWhitney { u, p: hits as f64 / count as f64, method: PMethod::Exact })
}

/// Normal approximation with tie and continuity corrections.
pub fn mann_whitney_normal(x: &[f64], y: &[f64], alt: Alternative) -> Result<MannWhitney, StatsError> {
    check(x, y)?;
    let ranks = pooled_ranks(x, y);
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let n = nx + ny;
    let u = u_from_rank_sum(ranks[..x.len()].iter().sum(), x.len());

    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|r| **r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let variance = nx * ny / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let mean = nx * ny / 2.0;
    if variance <= 0.0 {
        // every value tied: U is constant, so both tails carry all the mass
        return Ok(MannWhitney { u, p: 1.0, method: PMethod::Normal });
    }
    let sd = variance.sqrt();
    let normal = Normal::standard();
    let p = match alt {
        Alternative::Greater => normal.sf((u - mean - 0.5) / sd),
        Alternative::Less => normal.cdf((u - mean + 0.5) / sd),
    };
    Ok(MannWhitney { u, p, method: PMethod::Normal })
}

/// One-tailed Mann-Whitney U test; exact for pooled size up to [`EXACT_MAX_TOTAL`].
pub fn mann_whitney_one_tailed(x: &[f64], y: &[f64], alt: Alternative) -> Result<MannWhitney, StatsError> {
    if x.len() + y.len() <= EXACT_MAX_TOTAL {
        mann_whitney_exact(x, y, alt)
    } else {
        mann_whitney_normal(x, y, alt)
    }
}

pub fn mann_whitney_likert(x: &LikertSample, y: &LikertSample, alt: Alternative) -> Result<MannWhitney, StatsError> {
    mann_whitney_one_tailed(&x.as_f64(), &y.as_f64(), alt)
}

/// Rows are groups, columns are (success, failure).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency2x2 {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl Contingency2x2 {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Result<Self, StatsError> {
        if a + b + c + d == 0 {
            return Err(StatsError::InvalidTable);
        }
        Ok(Contingency2x2 { a, b, c, d })
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    /// Support of the first cell under fixed margins.
    pub fn support(&self) -> (u64, u64) {
        let row1 = self.a + self.b;
        let col1 = self.a + self.c;
        let lo = (row1 + col1).saturating_sub(self.total());
        (lo, row1.min(col1))
    }
}

fn ln_choose(n: u64, k: u64) -> f64 {
    statrs::function::factorial::ln_binomial(n, k)
}

/// Hypergeometric probability of each value of the first cell, lowest support value first.
pub fn hypergeometric_pmf(t: &Contingency2x2) -> Vec<f64> {
    let (lo, hi) = t.support();
    let n = t.total();
    let row1 = t.a + t.b;
    let col1 = t.a + t.c;
    let logs: Vec<f64> = (lo..=hi).map(|x| ln_choose(col1, x) + ln_choose(n - col1, row1 - x)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / sum).collect()
}

/// One-tailed Fisher exact test. `Greater` gives `P(X >= a)` with all margins fixed.
///
/// A table whose row or column sum is zero has a single-point support and yields `p = 1`.
pub fn fisher_exact_one_tailed(t: &Contingency2x2, alt: Alternative) -> f64 {
    let (lo, _) = t.support();
    let pmf = hypergeometric_pmf(t);
    let at = (t.a - lo) as usize;
    let p: f64 = match alt {
        Alternative::Greater => pmf[at..].iter().sum(),
        Alternative::Less => pmf[..=at].iter().sum(),
    };
    p.min(1.0)
}
