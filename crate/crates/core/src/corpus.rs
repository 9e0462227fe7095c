//! News article records, the JSONL dataset format, train/test splitting and
//! length-based real/fake pairing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate article id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("pair_id {pair_id:?} (article {id:?}): {reason}")]
    BadPair {
        pair_id: String,
        id: String,
        reason: String,
    },
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    RatioOutOfRange(f64),
    #[error("need at least 2 articles to split, got {0}")]
    TooFewArticles(usize),
}

/// Veracity label; serialized as `0` (real) or `1` (fake).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    pub fn opposite(self) -> Label {
        match self {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        match l {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewsArticle {
    pub id: String,
    pub title: String,
    pub text: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
}

impl NewsArticle {
    /// Whitespace word count of title plus body; the length used for pairing.
    pub fn word_count(&self) -> usize {
        self.title.split_whitespace().count() + self.text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Result of [`pair_by_length`]: matched (real_id, fake_id) pairs plus the ids
/// left over on either side.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Pairing {
    pub pairs: Vec<(String, String)>,
    pub unmatched_real: Vec<String>,
    pub unmatched_fake: Vec<String>,
}

/// Read a JSONL dataset, validating every record and the pair links.
pub fn load_dataset(path: &Path) -> Result<Vec<NewsArticle>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut articles = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let article: NewsArticle =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: lineno,
                message: e.to_string(),
            })?;
        if article.text.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line: lineno,
                message: "text is empty".into(),
            });
        }
        if !seen.insert(article.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: lineno,
                id: article.id,
            });
        }
        articles.push(article);
    }
    validate_pairs(&articles)?;
    Ok(articles)
}

/// Check that every `pair_id` links exactly two articles of opposite labels.
pub fn validate_pairs(articles: &[NewsArticle]) -> Result<(), CorpusError> {
    let mut groups: BTreeMap<&str, Vec<&NewsArticle>> = BTreeMap::new();
    for a in articles {
        if let Some(p) = &a.pair_id {
            groups.entry(p.as_str()).or_default().push(a);
        }
    }
    for (pair_id, members) in groups {
        let bad = |reason: &str| CorpusError::BadPair {
            pair_id: pair_id.to_string(),
            id: members[0].id.clone(),
            reason: reason.to_string(),
        };
        match members.len() {
            1 => return Err(bad("dangling pair link, no partner article")),
            2 if members[0].label == members[1].label => {
                return Err(bad("paired articles share the same label"))
            }
            2 => {}
            _ => return Err(bad("pair link shared by more than two articles")),
        }
    }
    Ok(())
}

pub fn save_dataset(path: &Path, articles: &[NewsArticle]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for a in articles {
        let line = serde_json::to_string(a).expect("article serializes");
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Stratified, seeded train/test split.
///
/// Each label class is shuffled independently and `floor(ratio * class_size)`
/// of it goes to train. When that leaves the overall train size below
/// `floor(ratio * total)`, the remaining slots are filled from the test side
/// in shuffled order, so the overall train count is always exactly
/// `floor(ratio * total)`.
pub fn split_dataset(
    articles: &[NewsArticle],
    ratio: f64,
    seed: u64,
) -> Result<DatasetSplit, CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::RatioOutOfRange(ratio));
    }
    if articles.len() < 2 {
        return Err(CorpusError::TooFewArticles(articles.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = (ratio * articles.len() as f64).floor() as usize;
    let mut train = Vec::new();
    let mut rest = Vec::new();
    for label in [Label::Real, Label::Fake] {
        let mut ids: Vec<&str> = articles
            .iter()
            .filter(|a| a.label == label)
            .map(|a| a.id.as_str())
            .collect();
        ids.shuffle(&mut rng);
        let n = (ratio * ids.len() as f64).floor() as usize;
        train.extend(ids[..n].iter().map(|s| s.to_string()));
        rest.extend(ids[n..].iter().map(|s| s.to_string()));
    }
    // Per-class floors can undershoot the overall floor by at most one.
    while train.len() < target {
        train.push(rest.remove(0));
    }
    Ok(DatasetSplit {
        train,
        test: rest,
        seed,
    })
}

/// Greedily match each fake article to the unmatched real article with the
/// closest word count.
///
/// Fakes are processed in lexicographic id order; among equally close reals
/// the lexicographically smallest id wins.
pub fn pair_by_length(articles: &[NewsArticle]) -> Pairing {
    let mut reals: Vec<(usize, &str)> = articles
        .iter()
        .filter(|a| a.label == Label::Real)
        .map(|a| (a.word_count(), a.id.as_str()))
        .collect();
    let mut fakes: Vec<(usize, &str)> = articles
        .iter()
        .filter(|a| a.label == Label::Fake)
        .map(|a| (a.word_count(), a.id.as_str()))
        .collect();
    fakes.sort_by(|a, b| a.1.cmp(b.1));
    // Reals ordered by (length, id) so the nearest candidates sit next to the
    // insertion point of the fake's length.
    reals.sort();
    let mut taken = vec![false; reals.len()];
    let mut pairs = Vec::new();
    let mut unmatched_fake = Vec::new();
    for (len, fid) in fakes {
        let pos = reals.partition_point(|r| r.0 < len);
        // (distance, index into reals)
        let mut best: Option<(usize, usize)> = None;
        let consider = |i: usize, best: &mut Option<(usize, usize)>| {
            let dist = reals[i].0.abs_diff(len);
            let better = match *best {
                None => true,
                Some((bd, bi)) => dist < bd || (dist == bd && reals[i].1 < reals[bi].1),
            };
            if better {
                *best = Some((dist, i));
            }
        };
        // Scan outward in both directions; stop once a side's distance exceeds
        // the best found so far.
        let mut i = pos;
        while i < reals.len() {
            if !taken[i] {
                if let Some((bd, _)) = best {
                    if reals[i].0.abs_diff(len) > bd {
                        break;
                    }
                }
                consider(i, &mut best);
            }
            i += 1;
        }
        let mut j = pos;
        while j > 0 {
            j -= 1;
            if !taken[j] {
                if let Some((bd, _)) = best {
                    if reals[j].0.abs_diff(len) > bd {
                        break;
                    }
                }
                consider(j, &mut best);
            }
        }
        match best {
            Some((_, idx)) => {
                taken[idx] = true;
                pairs.push((reals[idx].1.to_string(), fid.to_string()));
            }
            None => unmatched_fake.push(fid.to_string()),
        }
    }
    let mut unmatched_real: Vec<String> = reals
        .iter()
        .zip(&taken)
        .filter(|(_, t)| !**t)
        .map(|(r, _)| r.1.to_string())
        .collect();
    unmatched_real.sort();
    Pairing {
        pairs,
        unmatched_real,
        unmatched_fake,
    }
}

/// Pairs declared through `pair_id`, as (real_id, fake_id) sorted by pair id.
pub fn declared_pairs(articles: &[NewsArticle]) -> Vec<(String, String)> {
    let mut by_pair: BTreeMap<&str, (Option<&str>, Option<&str>)> = BTreeMap::new();
    for a in articles {
        if let Some(p) = &a.pair_id {
            let slot = by_pair.entry(p).or_default();
            match a.label {
                Label::Real => slot.0 = Some(&a.id),
                Label::Fake => slot.1 = Some(&a.id),
            }
        }
    }
    by_pair
        .into_values()
        .filter_map(|(r, f)| Some((r?.to_string(), f?.to_string())))
        .collect()
}

/// Id-indexed view over a loaded dataset.
pub fn index_by_id(articles: &[NewsArticle]) -> HashMap<&str, &NewsArticle> {
    articles.iter().map(|a| (a.id.as_str(), a)).collect()
}
