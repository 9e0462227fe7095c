//! Synthetic labeled corpus with a known separating mechanism.
//!
//! Articles mix two kinds of sentences. Topic sentences come from a sparse
//! Markov source over function words plus abstract topic slots;
//! fake articles realize the slots with one vocabulary, real articles with a
//! disjoint one of the same size, so the two classes are mirror images of
//! each other. Filler sentences come from a second source over a shared
//! vocabulary and are identical in distribution for both classes.
//!
//! A model fit on fake text therefore assigns real topic words the unseen
//! floor, while a model fit on all text treats both classes alike.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{pair_by_length, Label, NewsArticle};
use crate::derive_seed;

pub const FUNCTION_WORDS: &[&str] = &[
    "the", "a", "of", "to", "in", "on", "for", "with", "at", "by", "from", "and", "but", "as",
    "that", "this", "was", "were", "is", "has", "had", "will", "would", "their", "its", "after",
    "before", "about", "into", "over", "more", "very",
];

pub const FAKE_TOPIC_WORDS: &[&str] = &[
    "scandal", "secret", "insider", "shocking", "rumor", "affair", "breakup", "feud", "tabloid",
    "paparazzi", "starlet", "divorce", "romance", "betrayal", "exclusive", "leaked", "bombshell",
    "heartbreak", "mansion", "yacht", "diva", "rehab", "meltdown", "cheating", "engagement",
    "pregnancy", "hoax", "coverup", "miracle", "curse", "prophecy", "frenzy", "drama", "glamour",
    "heiress", "tycoon", "boyfriend", "girlfriend", "fiance", "wedding", "honeymoon", "jealousy",
    "revenge", "tantrum", "spotlight", "gala", "premiere", "redcarpet", "makeover", "surgery",
    "lawsuit", "tearful", "furious", "stunning", "flirty", "secretive", "cozy", "sizzling",
    "steamy", "rumored", "alleged", "smitten", "estranged", "superstar",
];

pub const REAL_TOPIC_WORDS: &[&str] = &[
    "council", "budget", "committee", "legislation", "senator", "ministry", "treasury", "tariff",
    "infrastructure", "parliament", "ordinance", "zoning", "referendum", "coalition", "amendment",
    "regulator", "inflation", "deficit", "subsidy", "procurement", "audit", "pension", "municipal",
    "federal", "provincial", "delegation", "treaty", "summit", "diplomat", "embassy", "quarterly",
    "revenue", "earnings", "dividend", "shareholder", "merger", "acquisition", "commodity",
    "exports", "imports", "manufacturing", "unemployment", "census", "survey", "statistics",
    "transit", "highway", "bridge", "reservoir", "irrigation", "harvest", "agriculture",
    "fisheries", "forestry", "hospital", "clinic", "enrollment", "curriculum", "tuition",
    "scholarship", "research", "laboratory", "regulation", "compliance",
];

pub const FILLER_WORDS: &[&str] = &[
    "reporters", "week", "city", "officials", "statement", "monday", "tuesday", "wednesday",
    "thursday", "friday", "morning", "evening", "afternoon", "people", "local", "residents",
    "according", "spokesperson", "interview", "year", "month", "earlier", "later", "today",
    "yesterday", "report", "update", "details", "information", "public", "news", "media",
    "comment", "confirmed", "announced", "described", "told", "asked", "noted", "added",
    "expected", "reported", "continued", "including", "recent", "new", "several", "other",
];

const SUCCESSORS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_fake: usize,
    pub n_real: usize,
    /// Bounds on the whitespace word count of title plus body.
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that a body sentence is a topic sentence.
    pub topic_ratio: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_fake: 500,
            n_real: 500,
            min_words: 200,
            max_words: 400,
            topic_ratio: 0.5,
            seed: 7,
        }
    }
}

/// Sparse Markov source over abstract token ids. Ids below `n_function` are
/// function words; the rest are content slots. Successor tables depend on the
/// previous token only, which keeps the set of reachable trigrams small
/// enough for a training corpus to cover. Each table is derived from a hash
/// of the token, so the source needs no storage.
struct MarkovSource {
    seed: u64,
    n_function: usize,
    n_content: usize,
}

impl MarkovSource {
    fn successors(&self, b: usize) -> ([usize; SUCCESSORS], [f64; SUCCESSORS]) {
        let key = self.seed ^ (b as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let prev_is_function = b < self.n_function;
        let mut ids = [0; SUCCESSORS];
        let mut weights = [0.0; SUCCESSORS];
        for i in 0..SUCCESSORS {
            let content = if prev_is_function { i < 3 } else { i < 2 };
            ids[i] = if content {
                self.n_function + zipf_index(&mut rng, self.n_content)
            } else {
                rng.random_range(0..self.n_function)
            };
            weights[i] = rng.random_range(1.0..3.0);
        }
        (ids, weights)
    }

    fn sentence(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
        // Start from a sentence-boundary marker past the id range.
        let mut b = self.n_function + self.n_content;
        let mut out = Vec::with_capacity(len);
        while out.len() < len {
            let (ids, weights) = self.successors(b);
            let pick = WeightedIndex::new(weights).expect("positive weights");
            let next = ids[pick.sample(rng)];
            out.push(next);
            b = next;
        }
        out
    }
}

/// Index in `0..n` drawn with probability proportional to `1 / (i + 1)`.
fn zipf_index<R: Rng>(rng: &mut R, n: usize) -> usize {
    let h: f64 = (1..=n).map(|i| 1.0 / i as f64).sum();
    let mut u = rng.random_range(0.0..h);
    for i in 0..n {
        u -= 1.0 / (i + 1) as f64;
        if u < 0.0 {
            return i;
        }
    }
    n - 1
}

fn render(ids: &[usize], content: &[&str]) -> String {
    let words: Vec<&str> = ids
        .iter()
        .map(|&i| {
            if i < FUNCTION_WORDS.len() {
                FUNCTION_WORDS[i]
            } else {
                content[i - FUNCTION_WORDS.len()]
            }
        })
        .collect();
    let mut s = capitalize(&words.join(" "));
    s.push('.');
    s
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Which kind each body sentence of a generated article is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SentenceKind {
    Topic,
    Filler,
}

pub struct Generator {
    cfg: SynthConfig,
    topic: MarkovSource,
    filler: MarkovSource,
}

impl Generator {
    pub fn new(cfg: SynthConfig) -> Self {
        assert_eq!(FAKE_TOPIC_WORDS.len(), REAL_TOPIC_WORDS.len());
        Generator {
            cfg,
            topic: MarkovSource {
                seed: derive_seed(cfg.seed, "synth-topic-source"),
                n_function: FUNCTION_WORDS.len(),
                n_content: FAKE_TOPIC_WORDS.len(),
            },
            filler: MarkovSource {
                seed: derive_seed(cfg.seed, "synth-filler-source"),
                n_function: FUNCTION_WORDS.len(),
                n_content: FILLER_WORDS.len(),
            },
        }
    }

    /// One article plus the kind of each body sentence.
    pub fn article(&self, label: Label, index: usize) -> (NewsArticle, Vec<SentenceKind>) {
        let topic_words = match label {
            Label::Fake => FAKE_TOPIC_WORDS,
            Label::Real => REAL_TOPIC_WORDS,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.cfg.seed,
            &format!("synth-article-{}-{index}", label.name()),
        ));
        let title_len = rng.random_range(3..=4);
        let title = (0..title_len)
            .map(|_| capitalize(topic_words[zipf_index(&mut rng, topic_words.len())]))
            .collect::<Vec<_>>()
            .join(" ");
        // Sentences are at most 16 words, so stopping at the first count
        // reaching `target` keeps the total within bounds.
        let lo = self.cfg.min_words.saturating_sub(title_len);
        let hi = self.cfg.max_words.saturating_sub(title_len + 16).max(lo);
        let target = rng.random_range(lo..=hi);
        let mut sentences = Vec::new();
        let mut kinds = Vec::new();
        let mut words = 0;
        while words < target {
            let len = rng.random_range(8..=16);
            let kind = if rng.random_bool(self.cfg.topic_ratio) {
                SentenceKind::Topic
            } else {
                SentenceKind::Filler
            };
            let text = match kind {
                SentenceKind::Topic => render(&self.topic.sentence(&mut rng, len), topic_words),
                SentenceKind::Filler => render(&self.filler.sentence(&mut rng, len), FILLER_WORDS),
            };
            words += len;
            sentences.push(text);
            kinds.push(kind);
        }
        let article = NewsArticle {
            id: format!("{}-{index:04}", label.name()),
            title,
            text: sentences.join(" "),
            label,
            source: Some("synthetic".to_string()),
            pair_id: None,
        };
        (article, kinds)
    }
}

/// Generate the corpus and link real/fake articles into length-matched pairs
/// via `pair_id`.
pub fn generate(cfg: &SynthConfig) -> Vec<NewsArticle> {
    let gen = Generator::new(*cfg);
    let mut articles: Vec<NewsArticle> = (0..cfg.n_fake)
        .map(|i| gen.article(Label::Fake, i).0)
        .chain((0..cfg.n_real).map(|i| gen.article(Label::Real, i).0))
        .collect();
    let pairing = pair_by_length(&articles);
    let mut pair_of = std::collections::HashMap::new();
    for (i, (r, f)) in pairing.pairs.iter().enumerate() {
        let pid = format!("pair-{i:04}");
        pair_of.insert(r.clone(), pid.clone());
        pair_of.insert(f.clone(), pid);
    }
    for a in &mut articles {
        a.pair_id = pair_of.get(&a.id).cloned();
    }
    articles
}
