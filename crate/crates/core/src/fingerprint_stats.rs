//! Real/fake divergence statistics: per-article mean negative log
//! probability, paired differences, the Wilcoxon signed-rank test and
//! histogram/boxplot exports.
//!
//! All logarithms are natural.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::corpus::Label;
use crate::lm_scorer::{PromptId, WordProbSeq};

/// Default sample size up to which p-values are computed exactly.
pub const DEFAULT_EXACT_THRESHOLD: usize = 20;

/// Largest sample size for which exact enumeration counts fit in `u128`.
const MAX_EXACT_N: usize = 120;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("no words to score")]
    NoWords,
    #[error("all differences are zero; the signed-rank test is undefined")]
    AllZero,
    #[error("difference {0} is not finite")]
    NonFinite(f64),
    #[error("scores come from different conditions: {0}")]
    ConditionMismatch(String),
    #[error("bin count must be at least 1")]
    NoBins,
    #[error("no scores for label {0}")]
    EmptyClass(&'static str),
    #[error("no reports to summarize")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticleScore {
    pub article_id: String,
    /// Mean of `-ln p` over all words, in nats.
    pub mean_neg_log_prob: f64,
    pub word_count: usize,
    pub prompt_id: PromptId,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDifference {
    pub real_id: String,
    pub fake_id: String,
    /// `real - fake`; positive means the fake article was reconstructed with
    /// higher probability.
    pub d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonReport {
    /// Sample size after dropping zero differences.
    pub n_effective: usize,
    /// Sum of the ranks of positive differences.
    pub statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Mean negative log probability over every word of the given sentences.
pub fn mean_neg_log_prob(
    article_id: &str,
    seqs: &[WordProbSeq],
) -> Result<ArticleScore, StatsError> {
    let (sum, count) = seqs
        .iter()
        .flat_map(|s| s.neg_log_probs())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if count == 0 {
        return Err(StatsError::NoWords);
    }
    let first = &seqs[0];
    Ok(ArticleScore {
        article_id: article_id.to_string(),
        mean_neg_log_prob: (sum / count as f64).max(0.0),
        word_count: count,
        prompt_id: first.prompt_id,
        backend_id: first.backend_id.clone(),
    })
}

pub fn pair_difference(
    real: &ArticleScore,
    fake: &ArticleScore,
) -> Result<PairDifference, StatsError> {
    if real.prompt_id != fake.prompt_id || real.backend_id != fake.backend_id {
        return Err(StatsError::ConditionMismatch(format!(
            "{}@{} vs {}@{}",
            real.prompt_id, real.backend_id, fake.prompt_id, fake.backend_id
        )));
    }
    Ok(PairDifference {
        real_id: real.article_id.clone(),
        fake_id: fake.article_id.clone(),
        d: real.mean_neg_log_prob - fake.mean_neg_log_prob,
    })
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank. Returned
/// doubled so that they are always integers.
fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) have ranks i+1..=j+1, mean (i+j+2)/2
        let doubled = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            ranks[k] = doubled;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test.
///
/// Zero differences are dropped. Absolute values are ranked with average
/// ranks for ties. When at most `exact_threshold` differences remain the
/// p-value is the exact sign-flip probability `P(|W - mu| >= |w - mu|)`;
/// otherwise a normal approximation with continuity and tie corrections.
pub fn wilcoxon_signed_rank(
    differences: &[f64],
    exact_threshold: usize,
) -> Result<WilcoxonReport, StatsError> {
    if let Some(&bad) = differences.iter().find(|d| !d.is_finite()) {
        return Err(StatsError::NonFinite(bad));
    }
    let nonzero: Vec<f64> = differences.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return Err(StatsError::AllZero);
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let t_pos: u64 = ranks
        .iter()
        .zip(&nonzero)
        .filter(|(_, &d)| d > 0.0)
        .map(|(&r, _)| r)
        .sum();
    let statistic = t_pos as f64 / 2.0;
    if n <= exact_threshold.min(MAX_EXACT_N) {
        return Ok(WilcoxonReport {
            n_effective: n,
            statistic,
            p_value: exact_p(&ranks, t_pos),
            method: WilcoxonMethod::Exact,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let dev = ((statistic - mean).abs() - 0.5).max(0.0);
    let p = if var <= 0.0 {
        1.0
    } else {
        erfc(dev / var.sqrt() / std::f64::consts::SQRT_2)
    };
    Ok(WilcoxonReport {
        n_effective: n,
        statistic,
        p_value: p.clamp(0.0, 1.0),
        method: WilcoxonMethod::NormalApprox,
    })
}

/// Exact two-sided p-value by counting sign assignments through the
/// distribution of the doubled positive-rank sum.
fn exact_p(doubled: &[u64], observed: u64) -> f64 {
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0u128; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let obs_dev = (2 * observed as i128 - total as i128).abs();
    let extreme: u128 = counts
        .iter()
        .enumerate()
        .filter(|(s, _)| (2 * *s as i128 - total as i128).abs() >= obs_dev)
        .map(|(_, &c)| c)
        .sum();
    extreme as f64 / 2f64.powi(doubled.len() as i32)
}

/// Paired word-level test for one real/fake pair: the two articles' `-ln p`
/// sequences are aligned by position, truncated to the shorter one, and the
/// `real - fake` differences are tested.
pub fn pair_word_test(
    real: &[WordProbSeq],
    fake: &[WordProbSeq],
    exact_threshold: usize,
) -> Result<WilcoxonReport, StatsError> {
    let diffs: Vec<f64> = real
        .iter()
        .flat_map(|s| s.neg_log_probs())
        .zip(fake.iter().flat_map(|s| s.neg_log_probs()))
        .map(|(r, f)| r - f)
        .collect();
    if diffs.is_empty() {
        return Err(StatsError::NoWords);
    }
    wilcoxon_signed_rank(&diffs, exact_threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceSummary {
    pub significant: usize,
    pub insignificant: usize,
    pub total: usize,
    /// `significant / total`.
    pub ratio: f64,
}

impl SignificanceSummary {
    pub fn from_counts(significant: usize, total: usize) -> Self {
        SignificanceSummary {
            significant,
            insignificant: total - significant,
            total,
            ratio: if total == 0 {
                0.0
            } else {
                significant as f64 / total as f64
            },
        }
    }

    /// Ratio as a percentage with two decimals, e.g. `55.17%`.
    pub fn percent(&self) -> String {
        format!("{:.2}%", self.ratio * 100.0)
    }
}

/// Count p-values below `alpha`. A p-value equal to `alpha` is not significant.
pub fn significance_ratio(
    reports: &[WilcoxonReport],
    alpha: f64,
) -> Result<SignificanceSummary, StatsError> {
    if reports.is_empty() {
        return Err(StatsError::Empty);
    }
    let significant = reports.iter().filter(|r| r.p_value < alpha).count();
    Ok(SignificanceSummary::from_counts(significant, reports.len()))
}

/// Sample quantile with linear interpolation between order statistics
/// (R type 7). `sorted` must be ascending and non-empty.
pub fn quantile_type7(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub label: Label,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Most extreme data points within 1.5 IQR of the quartiles.
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: Vec<f64>,
}

impl BoxSummary {
    pub fn from_values(label: Label, values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q1 = quantile_type7(&v, 0.25);
        let q3 = quantile_type7(&v, 0.75);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside = || v.iter().copied().filter(|&x| x >= lo_fence && x <= hi_fence);
        Some(BoxSummary {
            label,
            min: v[0],
            q1,
            median: quantile_type7(&v, 0.5),
            q3,
            max: v[v.len() - 1],
            whisker_lo: inside().next().unwrap_or(v[0]),
            whisker_hi: inside().last().unwrap_or(v[v.len() - 1]),
            outliers: v
                .iter()
                .copied()
                .filter(|&x| x < lo_fence || x > hi_fence)
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count_real: usize,
    pub count_fake: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionExport {
    pub histogram: Vec<HistogramBin>,
    pub boxplots: Vec<BoxSummary>,
}

impl DistributionExport {
    pub fn write_histogram_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["bin_lo", "bin_hi", "count_real", "count_fake"])?;
        for b in &self.histogram {
            out.write_record([
                b.lo.to_string(),
                b.hi.to_string(),
                b.count_real.to_string(),
                b.count_fake.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_boxplot_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["label", "min", "q1", "median", "q3", "max", "outlier_count"])?;
        for b in &self.boxplots {
            out.write_record([
                b.label.name().to_string(),
                b.min.to_string(),
                b.q1.to_string(),
                b.median.to_string(),
                b.q3.to_string(),
                b.max.to_string(),
                b.outliers.len().to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-label histograms over shared, equal-width bin edges spanning the
/// pooled score range, plus per-label boxplot summaries.
pub fn export_distribution(
    real: &[ArticleScore],
    fake: &[ArticleScore],
    bins: usize,
) -> Result<DistributionExport, StatsError> {
    if bins < 1 {
        return Err(StatsError::NoBins);
    }
    let rv: Vec<f64> = real.iter().map(|s| s.mean_neg_log_prob).collect();
    let fv: Vec<f64> = fake.iter().map(|s| s.mean_neg_log_prob).collect();
    let real_box = BoxSummary::from_values(Label::Real, &rv).ok_or(StatsError::EmptyClass("real"))?;
    let fake_box = BoxSummary::from_values(Label::Fake, &fv).ok_or(StatsError::EmptyClass("fake"))?;
    let lo = real_box.min.min(fake_box.min);
    let hi = real_box.max.max(fake_box.max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let bin_of = |x: f64| (((x - lo) / width).floor() as usize).min(bins - 1);
    let mut histogram: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: lo + width * i as f64,
            hi: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            count_real: 0,
            count_fake: 0,
        })
        .collect();
    for &x in &rv {
        histogram[bin_of(x)].count_real += 1;
    }
    for &x in &fv {
        histogram[bin_of(x)].count_fake += 1;
    }
    Ok(DistributionExport {
        histogram,
        boxplots: vec![real_box, fake_box],
    })
}
