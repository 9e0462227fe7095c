//! Key fragment extraction by sentence masking.
//!
//! An anchor classifier scores the unmodified article body and each variant
//! with one sentence replaced by `[MASK]`. Sentences whose removal moves the
//! fake-probability the most are the key fragments.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, NewsArticle};
use crate::http::{HttpError, HttpSettings, JsonClient};
use crate::textproc::{is_punct_token, mask_ranges, split_sentences, tokenize_str};

pub const HASH_BITS: u32 = 18;
const HASH_BUCKETS: usize = 1 << HASH_BITS;

#[derive(Debug, Error)]
pub enum FragmentError {
    #[error("anchor training set needs both labels; only {0} present")]
    SingleClass(&'static str),
    #[error("anchor training set is empty")]
    EmptyTrainingSet,
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("classifier returned invalid probability {0}")]
    BadProbability(f64),
    #[error("article {0:?} has no sentences")]
    NoSentences(String),
    #[error("unknown delta mode {0:?} (expected abs or signed)")]
    UnknownDeltaMode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorDescriptor {
    pub backend_id: String,
    /// Free-form calibration notes (training accuracy, iterations, ...).
    pub calibration: String,
}

/// A text classifier returning the probability that a text is fake.
/// Implementations must be deterministic and shareable across threads.
pub trait AnchorClassifier: Send + Sync {
    fn descriptor(&self) -> AnchorDescriptor;
    fn predict(&self, text: &str) -> Result<f64, FragmentError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaMode {
    /// Rank by `|anchor - masked|`.
    #[default]
    Abs,
    /// Rank by `anchor - masked`.
    Signed,
}

impl FromStr for DeltaMode {
    type Err = FragmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "abs" => Ok(DeltaMode::Abs),
            "signed" => Ok(DeltaMode::Signed),
            other => Err(FragmentError::UnknownDeltaMode(other.to_string())),
        }
    }
}

impl fmt::Display for DeltaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeltaMode::Abs => "abs",
            DeltaMode::Signed => "signed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedSentence {
    pub sentence_index: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentSelection {
    pub article_id: String,
    pub k: usize,
    /// Ordered by document position.
    pub selected: Vec<SelectedSentence>,
    pub anchor_prob: f64,
}

impl FragmentSelection {
    pub fn indices(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.sentence_index).collect()
    }
}

/// Anchor probability plus the probability for each single-sentence mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedScores {
    pub anchor_prob: f64,
    pub masked: Vec<f64>,
}

impl MaskedScores {
    pub fn deltas(&self, mode: DeltaMode) -> Vec<f64> {
        self.masked
            .iter()
            .map(|&m| criterion(self.anchor_prob, m, mode))
            .collect()
    }
}

fn criterion(anchor: f64, masked: f64, mode: DeltaMode) -> f64 {
    match mode {
        DeltaMode::Abs => (anchor - masked).abs(),
        DeltaMode::Signed => anchor - masked,
    }
}

/// Classify the article body and each of its single-sentence masked variants
/// (n + 1 classifier calls). Variants are scored in parallel.
pub fn masked_scores(
    clf: &dyn AnchorClassifier,
    article: &NewsArticle,
) -> Result<MaskedScores, FragmentError> {
    let spans: Vec<(usize, usize)> = split_sentences(&article.text)
        .iter()
        .map(|s| (s.char_start, s.char_end))
        .collect();
    if spans.is_empty() {
        return Err(FragmentError::NoSentences(article.id.clone()));
    }
    let anchor_prob = clf.predict(&article.text)?;
    let masked = (0..spans.len())
        .into_par_iter()
        .map(|i| {
            let variant = mask_ranges(&article.text, &spans, i).expect("index in range");
            clf.predict(&variant.text)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MaskedScores {
        anchor_prob,
        masked,
    })
}

/// Pick the `min(k, n)` sentences with the largest selection criterion, ties
/// going to the lower sentence index, and return them in document order.
/// `k == 0` selects every sentence.
pub fn select_topk(anchor: f64, masked: &[f64], k: usize, mode: DeltaMode) -> FragmentSelection {
    let mut ranked: Vec<SelectedSentence> = masked
        .iter()
        .enumerate()
        .map(|(i, &m)| SelectedSentence {
            sentence_index: i,
            delta: criterion(anchor, m, mode),
        })
        .collect();
    ranked.sort_by(|a, b| match b.delta.total_cmp(&a.delta) {
        Ordering::Equal => a.sentence_index.cmp(&b.sentence_index),
        o => o,
    });
    let take = if k == 0 { ranked.len() } else { k.min(ranked.len()) };
    ranked.truncate(take);
    ranked.sort_by_key(|s| s.sentence_index);
    FragmentSelection {
        article_id: String::new(),
        k,
        selected: ranked,
        anchor_prob: anchor,
    }
}

/// Masking plus top-k selection for one article.
pub fn extract_fragments(
    clf: &dyn AnchorClassifier,
    article: &NewsArticle,
    k: usize,
    mode: DeltaMode,
) -> Result<(MaskedScores, FragmentSelection), FragmentError> {
    let scores = masked_scores(clf, article)?;
    let mut sel = select_topk(scores.anchor_prob, &scores.masked, k, mode);
    sel.article_id = article.id.clone();
    Ok((scores, sel))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hashed unigram+bigram counts of lowercased, punctuation-free tokens, as
/// sorted (bucket, count) pairs.
pub fn hashed_features(text: &str) -> Vec<(u32, f64)> {
    let tokens: Vec<String> = tokenize_str(text)
        .into_iter()
        .filter(|t| !is_punct_token(t))
        .map(|t| t.to_lowercase())
        .collect();
    let mut buckets: Vec<u32> = Vec::with_capacity(tokens.len() * 2);
    let mask = (HASH_BUCKETS - 1) as u64;
    for (i, t) in tokens.iter().enumerate() {
        buckets.push((fnv1a(format!("u\u{1}{t}").as_bytes()) & mask) as u32);
        if i > 0 {
            let bigram = format!("b\u{1}{}\u{1}{t}", tokens[i - 1]);
            buckets.push((fnv1a(bigram.as_bytes()) & mask) as u32);
        }
    }
    buckets.sort_unstable();
    let mut out: Vec<(u32, f64)> = Vec::new();
    for b in buckets {
        match out.last_mut() {
            Some((last, c)) if *last == b => *c += 1.0,
            _ => out.push((b, 1.0)),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// L2 penalty on the (non-bias) weights, applied to the mean log loss.
    pub l2: f64,
    pub max_iter: usize,
    /// Stop when the largest absolute gradient entry drops below this.
    pub tol: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            l2: 1e-3,
            max_iter: 500,
            tol: 1e-6,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression over hashed n-gram counts, fit by Nesterov-accelerated
/// full-batch gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashedLogReg {
    weights: Vec<f64>,
    bias: f64,
    iterations: usize,
    train_accuracy: f64,
}

impl HashedLogReg {
    pub fn fit(train: &[&NewsArticle], cfg: &AnchorConfig) -> Result<Self, FragmentError> {
        if train.is_empty() {
            return Err(FragmentError::EmptyTrainingSet);
        }
        let has = |l: Label| train.iter().any(|a| a.label == l);
        match (has(Label::Real), has(Label::Fake)) {
            (true, true) => {}
            (true, false) => return Err(FragmentError::SingleClass("real")),
            _ => return Err(FragmentError::SingleClass("fake")),
        }
        let docs: Vec<Vec<(u32, f64)>> = train.iter().map(|a| hashed_features(&a.text)).collect();
        let labels: Vec<f64> = train.iter().map(|a| a.label.as_f64()).collect();
        let n = docs.len() as f64;
        let max_sq = docs
            .iter()
            .map(|d| 1.0 + d.iter().map(|(_, v)| v * v).sum::<f64>())
            .fold(0.0, f64::max);
        let step = 1.0 / (0.25 * max_sq + cfg.l2);

        let dim = HASH_BUCKETS + 1; // last slot is the bias
        let mut w = vec![0.0; dim];
        let mut prev = w.clone();
        let mut look = w.clone();
        let mut grad = vec![0.0; dim];
        let mut iterations = 0;
        for it in 0..cfg.max_iter {
            iterations = it + 1;
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (doc, &y) in docs.iter().zip(&labels) {
                let z = look[HASH_BUCKETS] + doc.iter().map(|&(j, v)| look[j as usize] * v).sum::<f64>();
                let r = (sigmoid(z) - y) / n;
                for &(j, v) in doc {
                    grad[j as usize] += r * v;
                }
                grad[HASH_BUCKETS] += r;
            }
            let mut max_g: f64 = 0.0;
            for j in 0..HASH_BUCKETS {
                grad[j] += cfg.l2 * look[j];
                max_g = max_g.max(grad[j].abs());
            }
            max_g = max_g.max(grad[HASH_BUCKETS].abs());
            if max_g < cfg.tol {
                w.copy_from_slice(&look);
                break;
            }
            let momentum = it as f64 / (it as f64 + 3.0);
            for j in 0..dim {
                let next = look[j] - step * grad[j];
                look[j] = next + momentum * (next - prev[j]);
                prev[j] = next;
                w[j] = next;
            }
        }
        let bias = w.pop().unwrap_or(0.0);
        let mut model = HashedLogReg {
            weights: w,
            bias,
            iterations,
            train_accuracy: 0.0,
        };
        let correct = docs
            .iter()
            .zip(&labels)
            .filter(|(d, &y)| (model.prob_from_features(d) >= 0.5) == (y == 1.0))
            .count();
        model.train_accuracy = correct as f64 / n;
        Ok(model)
    }

    fn prob_from_features(&self, doc: &[(u32, f64)]) -> f64 {
        sigmoid(self.bias + doc.iter().map(|&(j, v)| self.weights[j as usize] * v).sum::<f64>())
    }

    pub fn train_accuracy(&self) -> f64 {
        self.train_accuracy
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl AnchorClassifier for HashedLogReg {
    fn descriptor(&self) -> AnchorDescriptor {
        AnchorDescriptor {
            backend_id: format!("builtin-hashed-logreg/{HASH_BITS}"),
            calibration: format!(
                "iterations={} train_accuracy={:.4}",
                self.iterations, self.train_accuracy
            ),
        }
    }

    fn predict(&self, text: &str) -> Result<f64, FragmentError> {
        Ok(self.prob_from_features(&hashed_features(text)))
    }
}

/// Fit the built-in anchor classifier.
pub fn fit_anchor(train: &[&NewsArticle], cfg: &AnchorConfig) -> Result<HashedLogReg, FragmentError> {
    HashedLogReg::fit(train, cfg)
}

#[derive(Serialize)]
struct ClassifyRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct ClassifyResponse {
    prob_fake: f64,
}

/// Remote anchor speaking `POST /v1/classify`.
#[derive(Debug, Clone)]
pub struct HttpClassifier {
    client: JsonClient,
}

impl HttpClassifier {
    pub fn new(settings: HttpSettings) -> Self {
        HttpClassifier {
            client: JsonClient::new(settings),
        }
    }
}

impl AnchorClassifier for HttpClassifier {
    fn descriptor(&self) -> AnchorDescriptor {
        AnchorDescriptor {
            backend_id: format!("http:{}", self.client.settings().endpoint),
            calibration: "remote".into(),
        }
    }

    fn predict(&self, text: &str) -> Result<f64, FragmentError> {
        let resp: ClassifyResponse = self.client.post("/v1/classify", &ClassifyRequest { text })?;
        if !(0.0..=1.0).contains(&resp.prob_fake) {
            return Err(FragmentError::BadProbability(resp.prob_fake));
        }
        Ok(resp.prob_fake)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn art(id: &str, text: &str, label: Label) -> NewsArticle {
        NewsArticle {
            id: id.into(),
            title: String::new(),
            text: text.into(),
            label,
            source: None,
            pair_id: None,
        }
    }

    #[test]
    fn topk_saturates() {
        let s = select_topk(0.5, &[0.1, 0.2], 5, DeltaMode::Abs);
        assert_eq!(s.indices(), vec![0, 1]);
    }

    #[test]
    fn topk_tie_prefers_lower_index() {
        // anchor 0.5, deltas 0.25, 0.25, 0.125
        let s = select_topk(0.5, &[0.25, 0.75, 0.375], 1, DeltaMode::Abs);
        assert_eq!(s.indices(), vec![0]);
    }

    #[test]
    fn topk_picks_largest_abs() {
        let s = select_topk(0.9, &[0.2, 0.85, 0.5], 2, DeltaMode::Abs);
        assert_eq!(s.indices(), vec![0, 2]);
        assert!((s.selected[0].delta - 0.7).abs() < 1e-12);
        assert!((s.selected[1].delta - 0.4).abs() < 1e-12);
    }

    #[test]
    fn signed_mode_ranks_by_signed_drop() {
        // masking sentence 1 raises the probability a lot, which signed mode ignores
        let s = select_topk(0.5, &[0.4, 0.95, 0.3], 1, DeltaMode::Signed);
        assert_eq!(s.indices(), vec![2]);
        let s = select_topk(0.5, &[0.4, 0.95, 0.3], 1, DeltaMode::Abs);
        assert_eq!(s.indices(), vec![1]);
    }

    #[test]
    fn k_zero_selects_all() {
        assert_eq!(select_topk(0.5, &[0.1, 0.2, 0.3], 0, DeltaMode::Abs).indices(), vec![0, 1, 2]);
    }

    #[test]
    fn delta_mode_parse() {
        assert_eq!("abs".parse::<DeltaMode>().unwrap(), DeltaMode::Abs);
        assert_eq!("signed".parse::<DeltaMode>().unwrap(), DeltaMode::Signed);
        assert!("max".parse::<DeltaMode>().is_err());
    }

    fn toy_corpus() -> Vec<NewsArticle> {
        let mut v = Vec::new();
        for i in 0..10 {
            v.push(art(&format!("f{i}"), &"aaa ".repeat(5 + i), Label::Fake));
            v.push(art(&format!("r{i}"), &"bbb ".repeat(5 + i), Label::Real));
        }
        v
    }

    #[test]
    fn separable_toy_fits_perfectly_and_deterministically() {
        let corpus = toy_corpus();
        let refs: Vec<&NewsArticle> = corpus.iter().collect();
        let a = fit_anchor(&refs, &AnchorConfig::default()).unwrap();
        assert_eq!(a.train_accuracy(), 1.0);
        let b = fit_anchor(&refs, &AnchorConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.predict("aaa aaa").unwrap() > 0.5);
        assert!(a.predict("bbb bbb").unwrap() < 0.5);
    }

    #[test]
    fn single_class_rejected() {
        let corpus = [art("a", "x", Label::Fake)];
        let refs: Vec<&NewsArticle> = corpus.iter().collect();
        assert!(matches!(
            fit_anchor(&refs, &AnchorConfig::default()),
            Err(FragmentError::SingleClass("fake"))
        ));
        assert!(matches!(
            fit_anchor(&[], &AnchorConfig::default()),
            Err(FragmentError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn single_sentence_article_masks_to_marker() {
        struct Echo;
        impl AnchorClassifier for Echo {
            fn descriptor(&self) -> AnchorDescriptor {
                AnchorDescriptor { backend_id: "echo".into(), calibration: String::new() }
            }
            fn predict(&self, text: &str) -> Result<f64, FragmentError> {
                Ok(if text == "[MASK]" { 0.25 } else { 0.75 })
            }
        }
        let a = art("x", "Only one sentence", Label::Real);
        let s = masked_scores(&Echo, &a).unwrap();
        assert_eq!(s.anchor_prob, 0.75);
        assert_eq!(s.masked, vec![0.25]);
    }

    #[test]
    fn hashed_features_counts_repeats() {
        let f = hashed_features("Dog dog, cat.");
        let total: f64 = f.iter().map(|(_, v)| v).sum();
        // 3 unigrams + 2 bigrams
        assert_eq!(total, 5.0);
        assert!(f.windows(2).all(|w| w[0].0 < w[1].0));
    }
}
