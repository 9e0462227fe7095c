//! Evaluation metrics and pipeline orchestration: full runs, ablations, the
//! k sweep, prompt comparison, the divergence analysis, word frequencies and
//! case-study exports.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{split_dataset, CorpusError, DatasetSplit, Label, NewsArticle};
use crate::derive_seed;
use crate::fingerprint_stats::{
    export_distribution, mean_neg_log_prob, pair_difference, pair_word_test, significance_ratio,
    wilcoxon_signed_rank, DistributionExport, SignificanceSummary, StatsError, WilcoxonMethod,
    WilcoxonReport,
};
use crate::key_fragments::{
    fit_anchor, masked_scores, select_topk, AnchorClassifier, AnchorConfig, DeltaMode,
    FragmentError, FragmentSelection, MaskedScores,
};
use crate::lm_scorer::{
    score_article, PromptConditionedNgram, PromptId, PromptTemplate, ScorerBackend, ScorerError,
    WordProbSeq,
};
use crate::seq_classifier::{
    assemble_feature, predict, train, FingerprintFeature, ModelConfig, ModelError, SeqModel,
    TrainConfig, TrainingSummary,
};
use crate::textproc::{is_punct_token, split_sentences};

const STOPWORDS: &str = include_str!("stopwords.txt");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("scoring article {article}: {source}")]
    Scorer {
        article: String,
        #[source]
        source: ScorerError,
    },
    #[error("anchor classification: {0}")]
    Fragment(#[from] FragmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("{0} predictions but {1} labels")]
    LengthsDiffer(usize, usize),
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error("unknown article id {0:?}")]
    UnknownArticle(String),
    #[error("unknown ablation variant {0:?} (expected full, no-mp, no-kf, no-cnn or no-trm)")]
    UnknownVariant(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub root: u64,
    pub split: u64,
    pub model: u64,
    pub train: u64,
}

impl Seeds {
    pub fn from_root(root: u64) -> Self {
        Seeds {
            root,
            split: derive_seed(root, "split"),
            model: derive_seed(root, "model-init"),
            train: derive_seed(root, "train-shuffle"),
        }
    }
}

/// Effective settings of a run. `k == 0` means no fragment selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigFingerprint {
    pub prompt_id: PromptId,
    pub k: usize,
    pub use_cnn: bool,
    pub use_transformer: bool,
    pub delta_mode: DeltaMode,
    pub seeds: Seeds,
    /// SHA-256 over the canonical JSON of every setting that affects the run,
    /// including the dataset content and backend ids.
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<ConfigFingerprint>,
}

/// Binary metrics with fake as the positive class. Undefined ratios are 0.
pub fn compute_metrics(preds: &[bool], labels: &[bool]) -> Result<EvalReport, PipelineError> {
    if preds.len() != labels.len() {
        return Err(PipelineError::LengthsDiffer(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(PipelineError::Empty("no predictions"));
    }
    let mut c = Confusion::default();
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(EvalReport {
        accuracy: ratio(c.tp + c.tn, preds.len()),
        precision,
        recall,
        f1,
        confusion: c,
        n: preds.len(),
        fingerprint: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationVariant {
    Full,
    NoMP,
    NoKF,
    NoCNN,
    NoTRM,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::NoMP,
        AblationVariant::NoKF,
        AblationVariant::NoCNN,
        AblationVariant::NoTRM,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoMP => "no-mp",
            AblationVariant::NoKF => "no-kf",
            AblationVariant::NoCNN => "no-cnn",
            AblationVariant::NoTRM => "no-trm",
        }
    }

    /// Substitute this variant's stage into a base run.
    pub fn apply(self, base: RunSpec) -> RunSpec {
        match self {
            AblationVariant::Full => base,
            AblationVariant::NoMP => RunSpec {
                prompt: PromptId::Neutral,
                ..base
            },
            AblationVariant::NoKF => RunSpec { k: 0, ..base },
            AblationVariant::NoCNN => RunSpec {
                use_cnn: false,
                ..base
            },
            AblationVariant::NoTRM => RunSpec {
                use_transformer: false,
                ..base
            },
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationVariant {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "full" => Ok(AblationVariant::Full),
            "nomp" => Ok(AblationVariant::NoMP),
            "nokf" => Ok(AblationVariant::NoKF),
            "nocnn" => Ok(AblationVariant::NoCNN),
            "notrm" => Ok(AblationVariant::NoTRM),
            _ => Err(PipelineError::UnknownVariant(s.to_string())),
        }
    }
}

/// The knobs that differ between runs sharing one context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunSpec {
    pub prompt: PromptId,
    pub k: usize,
    pub use_cnn: bool,
    pub use_transformer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub prompt: PromptId,
    pub k: usize,
    pub delta_mode: DeltaMode,
    pub split_ratio: f64,
    pub model: ModelConfig,
    /// The `seed` field is replaced by the derived training seed.
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            prompt: PromptId::T2,
            k: 10,
            delta_mode: DeltaMode::Abs,
            split_ratio: 0.8,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineSettings {
    pub fn base_run(&self) -> RunSpec {
        RunSpec {
            prompt: self.prompt,
            k: self.k,
            use_cnn: self.model.use_cnn,
            use_transformer: self.model.use_transformer,
        }
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_root(self.seed)
    }
}

/// Per-sentence word probabilities for every article under one prompt,
/// indexed by sentence position.
pub type ScoredCorpus = HashMap<String, Vec<WordProbSeq>>;

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub spec: RunSpec,
    pub report: EvalReport,
    pub model: SeqModel,
    pub training: TrainingSummary,
    /// `(article_id, prob_fake)` for each test article in split order.
    pub test_predictions: Vec<(String, f64)>,
}

/// Shared state for runs over one dataset: the split, the backends, and
/// caches of anchor masking scores, per-prompt sentence scores and finished
/// runs. Caches are filled without holding locks during computation, so
/// concurrent callers may duplicate work but never deadlock.
pub struct PipelineContext {
    settings: PipelineSettings,
    articles: Vec<NewsArticle>,
    index: HashMap<String, usize>,
    split: DatasetSplit,
    anchor: Arc<dyn AnchorClassifier>,
    scorer: Arc<dyn ScorerBackend>,
    dataset_hash: String,
    masked: Mutex<Option<Arc<HashMap<String, MaskedScores>>>>,
    scored: Mutex<HashMap<PromptId, Arc<ScoredCorpus>>>,
    runs: Mutex<HashMap<RunSpec, Arc<RunOutcome>>>,
}

/// Hex SHA-256 of the dataset's canonical JSON lines.
pub fn dataset_hash(articles: &[NewsArticle]) -> String {
    let mut h = Sha256::new();
    for a in articles {
        h.update(serde_json::to_vec(a).expect("articles serialize"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn split_for(settings: &PipelineSettings, articles: &[NewsArticle]) -> Result<DatasetSplit, PipelineError> {
    Ok(split_dataset(articles, settings.split_ratio, settings.seeds().split)?)
}

/// Built-in backend parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuiltinBackends {
    pub ngram_order: usize,
    pub ngram_alpha: f64,
    pub anchor: AnchorConfig,
}

impl Default for BuiltinBackends {
    fn default() -> Self {
        BuiltinBackends {
            ngram_order: 3,
            ngram_alpha: 0.1,
            anchor: AnchorConfig::default(),
        }
    }
}

impl PipelineContext {
    pub fn new(
        settings: PipelineSettings,
        articles: Vec<NewsArticle>,
        split: DatasetSplit,
        anchor: Arc<dyn AnchorClassifier>,
        scorer: Arc<dyn ScorerBackend>,
    ) -> Result<Self, PipelineError> {
        let index: HashMap<String, usize> = articles
            .iter()
            .enumerate()
            .map(|(i, a)| (a.id.clone(), i))
            .collect();
        for id in split.train.iter().chain(&split.test) {
            if !index.contains_key(id) {
                return Err(PipelineError::UnknownArticle(id.clone()));
            }
        }
        if split.test.is_empty() {
            return Err(PipelineError::Empty("test split"));
        }
        Ok(PipelineContext {
            dataset_hash: dataset_hash(&articles),
            settings,
            articles,
            index,
            split,
            anchor,
            scorer,
            masked: Mutex::new(None),
            scored: Mutex::new(HashMap::new()),
            runs: Mutex::new(HashMap::new()),
        })
    }

    /// Split the data and fit the built-in anchor and n-gram scorer on the
    /// training portion.
    pub fn with_builtin_backends(
        settings: PipelineSettings,
        articles: Vec<NewsArticle>,
        backends: &BuiltinBackends,
    ) -> Result<Self, PipelineError> {
        let split = split_for(&settings, &articles)?;
        let by_id: HashMap<&str, &NewsArticle> = articles.iter().map(|a| (a.id.as_str(), a)).collect();
        let train: Vec<&NewsArticle> = split.train.iter().map(|id| by_id[id.as_str()]).collect();
        let anchor = fit_anchor(&train, &backends.anchor)?;
        let scorer = PromptConditionedNgram::fit(&train, backends.ngram_order, backends.ngram_alpha)
            .map_err(|source| PipelineError::Scorer {
                article: "<training corpus>".into(),
                source,
            })?;
        Self::new(settings, articles, split, Arc::new(anchor), Arc::new(scorer))
    }

    pub fn settings(&self) -> &PipelineSettings {
        &self.settings
    }

    pub fn articles(&self) -> &[NewsArticle] {
        &self.articles
    }

    pub fn split(&self) -> &DatasetSplit {
        &self.split
    }

    pub fn anchor(&self) -> &dyn AnchorClassifier {
        self.anchor.as_ref()
    }

    pub fn scorer(&self) -> &dyn ScorerBackend {
        self.scorer.as_ref()
    }

    pub fn article(&self, id: &str) -> Result<&NewsArticle, PipelineError> {
        self.index
            .get(id)
            .map(|&i| &self.articles[i])
            .ok_or_else(|| PipelineError::UnknownArticle(id.to_string()))
    }

    fn ids(&self) -> impl Iterator<Item = &String> {
        self.split.train.iter().chain(&self.split.test)
    }

    /// Anchor and masked-variant probabilities for every split article.
    pub fn masked_scores(&self) -> Result<Arc<HashMap<String, MaskedScores>>, PipelineError> {
        if let Some(m) = self.masked.lock().expect("lock").as_ref() {
            return Ok(m.clone());
        }
        let ids: Vec<&String> = self.ids().collect();
        let computed: HashMap<String, MaskedScores> = ids
            .par_iter()
            .map(|id| {
                let a = self.article(id)?;
                Ok(((*id).clone(), masked_scores(self.anchor.as_ref(), a)?))
            })
            .collect::<Result<_, PipelineError>>()?;
        let mut slot = self.masked.lock().expect("lock");
        Ok(slot.get_or_insert_with(|| Arc::new(computed)).clone())
    }

    /// Every sentence of every split article scored under `prompt`, each
    /// conditioned on the title and the full preceding body text.
    pub fn scored(&self, prompt: PromptId) -> Result<Arc<ScoredCorpus>, PipelineError> {
        if let Some(s) = self.scored.lock().expect("lock").get(&prompt) {
            return Ok(s.clone());
        }
        let template = PromptTemplate::builtin(prompt);
        let ids: Vec<&String> = self.ids().collect();
        let computed: ScoredCorpus = ids
            .par_iter()
            .map(|id| {
                let a = self.article(id)?;
                let seqs = score_article(self.scorer.as_ref(), &template, a).map_err(|source| {
                    PipelineError::Scorer {
                        article: a.id.clone(),
                        source,
                    }
                })?;
                Ok(((*id).clone(), seqs))
            })
            .collect::<Result<_, PipelineError>>()?;
        let mut map = self.scored.lock().expect("lock");
        Ok(map.entry(prompt).or_insert_with(|| Arc::new(computed)).clone())
    }

    /// Top-k selection for one article (`k == 0` keeps every sentence).
    pub fn selection(&self, id: &str, k: usize) -> Result<FragmentSelection, PipelineError> {
        let masked = self.masked_scores()?;
        let m = masked
            .get(id)
            .ok_or_else(|| PipelineError::UnknownArticle(id.to_string()))?;
        let mut sel = select_topk(m.anchor_prob, &m.masked, k, self.settings.delta_mode);
        sel.article_id = id.to_string();
        Ok(sel)
    }

    /// Word probability sequences of the selected sentences, in document
    /// order.
    pub fn fragment_seqs(
        &self,
        id: &str,
        k: usize,
        prompt: PromptId,
    ) -> Result<Vec<WordProbSeq>, PipelineError> {
        let scored = self.scored(prompt)?;
        let all = scored
            .get(id)
            .ok_or_else(|| PipelineError::UnknownArticle(id.to_string()))?;
        let sel = self.selection(id, k)?;
        Ok(sel.indices().into_iter().map(|i| all[i].clone()).collect())
    }

    fn feature(&self, id: &str, spec: &RunSpec) -> Result<FingerprintFeature, PipelineError> {
        let seqs = self.fragment_seqs(id, spec.k, spec.prompt)?;
        Ok(assemble_feature(id, &seqs, self.settings.model.feature_len, spec.k)?)
    }

    pub fn fingerprint(&self, spec: &RunSpec) -> ConfigFingerprint {
        let seeds = self.settings.seeds();
        let model = ModelConfig {
            use_cnn: spec.use_cnn,
            use_transformer: spec.use_transformer,
            ..self.settings.model
        };
        let canonical = serde_json::json!({
            "dataset": self.dataset_hash,
            "split": [self.split.train.len(), self.split.test.len(), self.split.seed],
            "scorer": self.scorer.backend_id(),
            "anchor": self.anchor.descriptor().backend_id,
            "prompt": spec.prompt,
            "k": spec.k,
            "delta_mode": self.settings.delta_mode,
            "model": model,
            "train": TrainConfig { seed: seeds.train, ..self.settings.train },
            "seeds": seeds,
        });
        ConfigFingerprint {
            prompt_id: spec.prompt,
            k: spec.k,
            use_cnn: spec.use_cnn,
            use_transformer: spec.use_transformer,
            delta_mode: self.settings.delta_mode,
            content_hash: hex::encode(Sha256::digest(canonical.to_string().as_bytes())),
            seeds,
        }
    }

    /// Select fragments, assemble features, train on the train split and
    /// evaluate on the test split. Results are memoized per [`RunSpec`].
    pub fn run(&self, spec: RunSpec) -> Result<Arc<RunOutcome>, PipelineError> {
        if let Some(r) = self.runs.lock().expect("lock").get(&spec) {
            return Ok(r.clone());
        }
        let outcome = self.run_uncached(spec)?;
        let mut runs = self.runs.lock().expect("lock");
        Ok(runs.entry(spec).or_insert_with(|| Arc::new(outcome)).clone())
    }

    fn run_uncached(&self, spec: RunSpec) -> Result<RunOutcome, PipelineError> {
        let seeds = self.settings.seeds();
        let build = |ids: &[String]| -> Result<(Vec<FingerprintFeature>, Vec<f64>), PipelineError> {
            let mut feats = Vec::with_capacity(ids.len());
            let mut labels = Vec::with_capacity(ids.len());
            for id in ids {
                feats.push(self.feature(id, &spec)?);
                labels.push(self.article(id)?.label.as_f64());
            }
            Ok((feats, labels))
        };
        let (train_x, train_y) = build(&self.split.train)?;
        let (test_x, test_y) = build(&self.split.test)?;
        let model_cfg = ModelConfig {
            use_cnn: spec.use_cnn,
            use_transformer: spec.use_transformer,
            ..self.settings.model
        };
        let mut model = SeqModel::new(model_cfg, seeds.model)?;
        let train_cfg = TrainConfig {
            seed: seeds.train,
            ..self.settings.train
        };
        let training = train(&mut model, &train_x, &train_y, &train_cfg)?;
        let preds = predict(&model, &test_x)?;
        let mut report = compute_metrics(
            &preds.iter().map(|p| p.fake).collect::<Vec<_>>(),
            &test_y.iter().map(|&y| y == 1.0).collect::<Vec<_>>(),
        )?;
        report.fingerprint = Some(self.fingerprint(&spec));
        Ok(RunOutcome {
            spec,
            report,
            model,
            training,
            test_predictions: self
                .split
                .test
                .iter()
                .cloned()
                .zip(preds.iter().map(|p| p.prob))
                .collect(),
        })
    }

    /// Run several specs, sharing cached scoring. Distinct specs run in
    /// parallel; duplicates are computed once.
    pub fn run_many(&self, specs: &[RunSpec]) -> Result<Vec<Arc<RunOutcome>>, PipelineError> {
        self.masked_scores()?;
        let mut prompts: Vec<PromptId> = specs.iter().map(|s| s.prompt).collect();
        prompts.dedup();
        for p in prompts {
            self.scored(p)?;
        }
        let mut unique: Vec<RunSpec> = Vec::new();
        for s in specs {
            if !unique.contains(s) {
                unique.push(*s);
            }
        }
        unique
            .par_iter()
            .map(|s| self.run(*s).map(|_| ()))
            .collect::<Result<Vec<()>, _>>()?;
        specs.iter().map(|s| self.run(*s)).collect()
    }
}

/// Run one ablation variant against the context's base settings.
pub fn run_ablation(ctx: &PipelineContext, variant: AblationVariant) -> Result<EvalReport, PipelineError> {
    Ok(ctx.run(variant.apply(ctx.settings().base_run()))?.report.clone())
}

pub fn run_ablations(
    ctx: &PipelineContext,
    variants: &[AblationVariant],
) -> Result<Vec<(AblationVariant, EvalReport)>, PipelineError> {
    let base = ctx.settings().base_run();
    let specs: Vec<RunSpec> = variants.iter().map(|v| v.apply(base)).collect();
    let outs = ctx.run_many(&specs)?;
    Ok(variants
        .iter()
        .zip(outs)
        .map(|(v, o)| (*v, o.report.clone()))
        .collect())
}

/// One full run per k with everything else fixed.
pub fn sweep_k(ctx: &PipelineContext, values: &[usize]) -> Result<Vec<(usize, EvalReport)>, PipelineError> {
    if values.is_empty() {
        return Err(PipelineError::Empty("k values"));
    }
    let base = ctx.settings().base_run();
    let specs: Vec<RunSpec> = values.iter().map(|&k| RunSpec { k, ..base }).collect();
    let outs = ctx.run_many(&specs)?;
    Ok(values
        .iter()
        .zip(outs)
        .map(|(&k, o)| (k, o.report.clone()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptComparison {
    pub rows: Vec<EvalReport>,
    /// Max minus min accuracy across rows.
    pub max_gap: f64,
}

pub fn compare_prompts(ctx: &PipelineContext, prompts: &[PromptId]) -> Result<PromptComparison, PipelineError> {
    if prompts.is_empty() {
        return Err(PipelineError::Empty("prompt templates"));
    }
    let base = ctx.settings().base_run();
    let specs: Vec<RunSpec> = prompts.iter().map(|&prompt| RunSpec { prompt, ..base }).collect();
    let rows: Vec<EvalReport> = ctx
        .run_many(&specs)?
        .iter()
        .map(|o| o.report.clone())
        .collect();
    let (lo, hi) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.accuracy), hi.max(r.accuracy)));
    Ok(PromptComparison {
        rows,
        max_gap: hi - lo,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub real_id: String,
    pub fake_id: String,
    /// Mean `-ln p` of the real article minus that of the fake article.
    pub d: f64,
    pub n_effective: usize,
    pub p_value: f64,
    pub method: Option<WilcoxonMethod>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub prompt_id: PromptId,
    pub backend_id: String,
    pub alpha: f64,
    /// Pairs whose word-level test rejects at `alpha`, versus the rest.
    pub summary: SignificanceSummary,
    pub ratio_percent: String,
    /// Test of the per-pair differences `d` against zero.
    pub aggregate: WilcoxonReport,
    pub mean_real: f64,
    pub mean_fake: f64,
    #[serde(skip)]
    pub pairs: Vec<PairResult>,
    #[serde(skip)]
    pub distribution: Option<DistributionExport>,
}

/// Score full texts under `prompt`, then test every (real, fake) pair.
/// A pair whose word differences are all zero counts as not significant.
pub fn divergence_analysis(
    ctx: &PipelineContext,
    pairs: &[(String, String)],
    prompt: PromptId,
    alpha: f64,
    exact_threshold: usize,
    bins: usize,
) -> Result<DivergenceReport, PipelineError> {
    if pairs.is_empty() {
        return Err(PipelineError::Empty("article pairs"));
    }
    let scored = ctx.scored(prompt)?;
    let get = |id: &str| {
        scored
            .get(id)
            .ok_or_else(|| PipelineError::UnknownArticle(id.to_string()))
    };
    let mut results = Vec::with_capacity(pairs.len());
    let mut real_scores = Vec::with_capacity(pairs.len());
    let mut fake_scores = Vec::with_capacity(pairs.len());
    let mut reports = Vec::with_capacity(pairs.len());
    for (rid, fid) in pairs {
        let (rs, fs) = (get(rid)?, get(fid)?);
        let r = mean_neg_log_prob(rid, rs)?;
        let f = mean_neg_log_prob(fid, fs)?;
        let diff = pair_difference(&r, &f)?;
        let test = match pair_word_test(rs, fs, exact_threshold) {
            Ok(t) => Some(t),
            Err(StatsError::AllZero) => None,
            Err(e) => return Err(e.into()),
        };
        let p_value = test.as_ref().map_or(1.0, |t| t.p_value);
        reports.push(WilcoxonReport {
            n_effective: test.as_ref().map_or(0, |t| t.n_effective),
            statistic: test.as_ref().map_or(0.0, |t| t.statistic),
            p_value,
            method: test.as_ref().map_or(WilcoxonMethod::Exact, |t| t.method),
        });
        results.push(PairResult {
            real_id: rid.clone(),
            fake_id: fid.clone(),
            d: diff.d,
            n_effective: test.as_ref().map_or(0, |t| t.n_effective),
            p_value,
            method: test.as_ref().map(|t| t.method),
            significant: p_value < alpha,
        });
        real_scores.push(r);
        fake_scores.push(f);
    }
    let summary = significance_ratio(&reports, alpha)?;
    let ds: Vec<f64> = results.iter().map(|p| p.d).collect();
    let aggregate = match wilcoxon_signed_rank(&ds, exact_threshold) {
        Ok(r) => r,
        Err(StatsError::AllZero) => WilcoxonReport {
            n_effective: 0,
            statistic: 0.0,
            p_value: 1.0,
            method: WilcoxonMethod::Exact,
        },
        Err(e) => return Err(e.into()),
    };
    let mean = |v: &[crate::fingerprint_stats::ArticleScore]| {
        v.iter().map(|s| s.mean_neg_log_prob).sum::<f64>() / v.len() as f64
    };
    Ok(DivergenceReport {
        prompt_id: prompt,
        backend_id: ctx.scorer().backend_id(),
        alpha,
        ratio_percent: summary.percent(),
        summary,
        aggregate,
        mean_real: mean(&real_scores),
        mean_fake: mean(&fake_scores),
        pairs: results,
        distribution: Some(export_distribution(&real_scores, &fake_scores, bins)?),
    })
}

pub fn write_pairs_csv(path: &Path, pairs: &[PairResult]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["real_id", "fake_id", "d", "n_effective", "p_value", "significant"])
        .map_err(|e| io_err(path, e))?;
    for p in pairs {
        w.write_record([
            p.real_id.clone(),
            p.fake_id.clone(),
            p.d.to_string(),
            p.n_effective.to_string(),
            p.p_value.to_string(),
            p.significant.to_string(),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn default_stopwords() -> HashSet<String> {
    STOPWORDS
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordCount {
    pub word: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordFrequency {
    pub real: Vec<WordCount>,
    pub fake: Vec<WordCount>,
}

impl WordFrequency {
    pub fn for_label(&self, label: Label) -> &[WordCount] {
        match label {
            Label::Real => &self.real,
            Label::Fake => &self.fake,
        }
    }
}

fn ranked(counts: HashMap<String, usize>) -> Vec<WordCount> {
    let mut v: Vec<WordCount> = counts
        .into_iter()
        .map(|(word, count)| WordCount { word, count })
        .collect();
    v.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.word.cmp(&b.word)));
    v
}

/// Per-label word counts inside the selected sentences: lowercased, with
/// punctuation tokens and stopwords removed, ranked by count then word.
pub fn word_frequency(
    articles: &[&NewsArticle],
    selections: &[FragmentSelection],
    stopwords: &HashSet<String>,
) -> Result<WordFrequency, PipelineError> {
    if selections.is_empty() {
        return Err(PipelineError::Empty("fragment selections"));
    }
    let by_id: HashMap<&str, &NewsArticle> = articles.iter().map(|a| (a.id.as_str(), *a)).collect();
    let mut real = HashMap::new();
    let mut fake = HashMap::new();
    for sel in selections {
        let a = by_id
            .get(sel.article_id.as_str())
            .ok_or_else(|| PipelineError::UnknownArticle(sel.article_id.clone()))?;
        let spans = split_sentences(&a.text);
        let counts = match a.label {
            Label::Real => &mut real,
            Label::Fake => &mut fake,
        };
        for i in sel.indices() {
            let Some(span) = spans.get(i) else { continue };
            for w in &span.words {
                if is_punct_token(w) {
                    continue;
                }
                let w = w.to_lowercase();
                if stopwords.contains(&w) {
                    continue;
                }
                *counts.entry(w).or_insert(0) += 1;
            }
        }
    }
    Ok(WordFrequency {
        real: ranked(real),
        fake: ranked(fake),
    })
}

pub fn write_word_counts_csv(path: &Path, counts: &[WordCount], top_n: usize) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["rank", "word", "count"]).map_err(|e| io_err(path, e))?;
    for (i, c) in counts.iter().take(top_n).enumerate() {
        w.write_record([(i + 1).to_string(), c.word.clone(), c.count.to_string()])
            .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Word position in the full article body.
    pub position: usize,
    pub sentence_index: usize,
    pub word: String,
    pub neg_log_prob: f64,
}

/// Per-word curve over all sentences, or only over `keep` when given.
/// Positions always refer to the full article.
pub fn curve(seqs: &[WordProbSeq], keep: Option<&[usize]>) -> Vec<CurvePoint> {
    let mut out = Vec::new();
    let mut pos = 0;
    for s in seqs {
        let included = keep.is_none_or(|k| k.contains(&s.sentence_index));
        for w in &s.words {
            if included {
                out.push(CurvePoint {
                    position: pos,
                    sentence_index: s.sentence_index,
                    word: w.word.clone(),
                    neg_log_prob: w.neg_log_prob(),
                });
            }
            pos += 1;
        }
    }
    out
}

fn curve_mean(points: &[CurvePoint]) -> f64 {
    if points.is_empty() {
        0.0
    } else {
        points.iter().map(|p| p.neg_log_prob).sum::<f64>() / points.len() as f64
    }
}

/// One side of a case-study pair.
pub struct CaseInput<'a> {
    pub article: &'a NewsArticle,
    pub full: &'a [WordProbSeq],
    pub selection: &'a FragmentSelection,
    pub masked: &'a MaskedScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudy {
    pub real_id: String,
    pub fake_id: String,
    pub prompt_id: PromptId,
    pub k: usize,
    pub real_full_mean: f64,
    pub fake_full_mean: f64,
    pub real_fragment_mean: f64,
    pub fake_fragment_mean: f64,
    /// Real minus fake mean `-ln p` over whole articles.
    pub full_gap: f64,
    /// Real minus fake mean `-ln p` over the selected fragments only.
    pub fragment_gap: f64,
}

fn write_curve(path: &Path, points: &[CurvePoint]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["position", "sentence_index", "word", "neg_log_prob"])
        .map_err(|e| io_err(path, e))?;
    for p in points {
        w.write_record([
            p.position.to_string(),
            p.sentence_index.to_string(),
            p.word.clone(),
            p.neg_log_prob.to_string(),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Compute the case-study gaps and write the four curve files, the sentence
/// weight table and a JSON summary into `out_dir`.
pub fn export_case_study(
    out_dir: &Path,
    real: &CaseInput<'_>,
    fake: &CaseInput<'_>,
    mode: DeltaMode,
) -> Result<CaseStudy, PipelineError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let prompt_id = real
        .full
        .first()
        .or(fake.full.first())
        .map_or(PromptId::T2, |s| s.prompt_id);
    let mut means = Vec::new();
    for (side, input) in [("real", real), ("fake", fake)] {
        let full = curve(input.full, None);
        let idx = input.selection.indices();
        let frag = curve(input.full, Some(&idx));
        write_curve(&out_dir.join(format!("case_full_{side}.csv")), &full)?;
        write_curve(&out_dir.join(format!("case_fragment_{side}.csv")), &frag)?;
        means.push((curve_mean(&full), curve_mean(&frag)));
    }
    let path = out_dir.join("case_weights.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
    w.write_record(["label", "article_id", "sentence_index", "delta", "selected"])
        .map_err(|e| io_err(&path, e))?;
    for (side, input) in [("real", real), ("fake", fake)] {
        let chosen = input.selection.indices();
        for (i, d) in input.masked.deltas(mode).iter().enumerate() {
            w.write_record([
                side.to_string(),
                input.article.id.clone(),
                i.to_string(),
                d.to_string(),
                chosen.contains(&i).to_string(),
            ])
            .map_err(|e| io_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    let study = CaseStudy {
        real_id: real.article.id.clone(),
        fake_id: fake.article.id.clone(),
        prompt_id,
        k: real.selection.k,
        real_full_mean: means[0].0,
        fake_full_mean: means[1].0,
        real_fragment_mean: means[0].1,
        fake_fragment_mean: means[1].1,
        full_gap: means[0].0 - means[1].0,
        fragment_gap: means[0].1 - means[1].1,
    };
    write_json(&out_dir.join("case_study.json"), &study)?;
    Ok(study)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// One row per report: a name column, the metrics and the fingerprint.
pub fn write_reports_csv(path: &Path, rows: &[(String, &EvalReport)]) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record([
            "name", "prompt_id", "k", "use_cnn", "use_transformer", "accuracy", "precision",
            "recall", "f1", "tp", "fp", "tn", "fn", "content_hash",
        ])
        .map_err(|e| io_err(path, e))?;
        for (name, r) in rows {
            let fp = r.fingerprint.as_ref();
            w.write_record([
                name.clone(),
                fp.map_or(String::new(), |f| f.prompt_id.to_string()),
                fp.map_or(String::new(), |f| f.k.to_string()),
                fp.map_or(String::new(), |f| f.use_cnn.to_string()),
                fp.map_or(String::new(), |f| f.use_transformer.to_string()),
                r.accuracy.to_string(),
                r.precision.to_string(),
                r.recall.to_string(),
                r.f1.to_string(),
                r.confusion.tp.to_string(),
                r.confusion.fp.to_string(),
                r.confusion.tn.to_string(),
                r.confusion.fn_.to_string(),
                fp.map_or(String::new(), |f| f.content_hash.clone()),
            ])
            .map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::key_fragments::SelectedSentence;

    fn bools(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == '1').collect()
    }

    #[test]
    fn perfect_predictions() {
        let y = bools("1100");
        let r = compute_metrics(&y, &y).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn all_real_predictions() {
        let r = compute_metrics(&bools("0000"), &bools("1100")).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.precision, 0.0);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn metrics_errors() {
        assert!(matches!(compute_metrics(&[], &[]), Err(PipelineError::Empty(_))));
        assert!(matches!(
            compute_metrics(&[true], &[]),
            Err(PipelineError::LengthsDiffer(1, 0))
        ));
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("NoMP".parse::<AblationVariant>().unwrap(), AblationVariant::NoMP);
        assert_eq!("no-kf".parse::<AblationVariant>().unwrap(), AblationVariant::NoKF);
        assert!("w/o TRM".parse::<AblationVariant>().is_err());
        for v in AblationVariant::ALL {
            assert_eq!(v.as_str().parse::<AblationVariant>().unwrap(), v);
        }
    }

    #[test]
    fn variant_substitutions() {
        let base = RunSpec {
            prompt: PromptId::T2,
            k: 10,
            use_cnn: true,
            use_transformer: true,
        };
        assert_eq!(AblationVariant::NoMP.apply(base).prompt, PromptId::Neutral);
        assert_eq!(AblationVariant::NoKF.apply(base).k, 0);
        assert!(!AblationVariant::NoCNN.apply(base).use_cnn);
        assert!(!AblationVariant::NoTRM.apply(base).use_transformer);
        assert_eq!(AblationVariant::Full.apply(base), base);
    }

    #[test]
    fn word_frequency_example() {
        let a = NewsArticle {
            id: "x".into(),
            title: "t".into(),
            text: "The cat cat.".into(),
            label: Label::Fake,
            source: None,
            pair_id: None,
        };
        let sel = FragmentSelection {
            article_id: "x".into(),
            k: 1,
            selected: vec![SelectedSentence { sentence_index: 0, delta: 0.1 }],
            anchor_prob: 0.5,
        };
        let stop: HashSet<String> = ["the".to_string()].into();
        let wf = word_frequency(&[&a], &[sel.clone()], &stop).unwrap();
        assert_eq!(wf.fake, vec![WordCount { word: "cat".into(), count: 2 }]);
        assert!(wf.real.is_empty());
        let raw = word_frequency(&[&a], &[sel], &HashSet::new()).unwrap();
        assert_eq!(raw.fake.len(), 2);
        assert_eq!(raw.fake[0], WordCount { word: "cat".into(), count: 2 });
    }

    #[test]
    fn stopword_list_covers_synthetic_function_words() {
        let stop = default_stopwords();
        assert!(stop.len() >= 170);
        for w in crate::synth::FUNCTION_WORDS {
            assert!(stop.contains(*w), "{w}");
        }
    }
}
