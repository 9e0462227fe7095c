//! Core algorithms for detecting fake news through the likelihood a
//! language model assigns to each word under malicious prompts.

pub mod corpus;
pub mod fingerprint_stats;
pub mod http;
pub mod key_fragments;
pub mod lm_scorer;
pub mod metrics_analysis;
pub mod seq_classifier;
pub mod synth;
pub mod textproc;

pub use corpus::{DatasetSplit, Label, NewsArticle, Pairing};
pub use fingerprint_stats::{ArticleScore, PairDifference, WilcoxonReport};
pub use key_fragments::{AnchorClassifier, DeltaMode, FragmentSelection};
pub use metrics_analysis::{AblationVariant, EvalReport, PipelineContext, PipelineSettings, RunSpec};
pub use lm_scorer::{PromptId, PromptTemplate, ScorerBackend, WordProb, WordProbSeq};
pub use seq_classifier::{FingerprintFeature, ModelConfig, SeqModel, TrainConfig};

/// Derive an independent seed for a named stage from a root seed.
pub fn derive_seed(root: u64, stage: &str) -> u64 {
    let mut z = root ^ stage.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    });
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
