//! Command implementations. Each command reads the validated config, runs
//! the relevant analysis and writes its artifacts under the output directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use life_core::corpus::{declared_pairs, load_dataset, pair_by_length, save_dataset};
use life_core::key_fragments::{fit_anchor, HttpClassifier};
use life_core::lm_scorer::{HttpScorer, PromptConditionedNgram};
use life_core::metrics_analysis::{
    compare_prompts, default_stopwords, divergence_analysis, export_case_study, run_ablations, split_for,
    sweep_k, word_frequency, write_json, write_pairs_csv, write_reports_csv, write_word_counts_csv, CaseInput,
    CaseStudy, DivergenceReport, PipelineError, PromptComparison, WordFrequency,
};
use life_core::synth::{generate, SynthConfig};
use life_core::{
    AblationVariant, AnchorClassifier, EvalReport, NewsArticle, PipelineContext, PromptId, ScorerBackend,
};
use serde::Serialize;

use crate::config::{load_config, probe_endpoint, AnchorChoice, Overrides, PipelineConfig, ScorerChoice};
use crate::error::CliError;

/// Name of the only output file that carries wall-clock timestamps.
pub const METADATA_FILE: &str = "run_metadata.json";

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

/// Validate a config file. With `probe`, also open a connection to every
/// remote backend. Nothing is written.
pub fn cmd_validate(path: &Path, ov: &Overrides, probe: bool) -> Result<PipelineConfig, CliError> {
    let cfg = load_config(path, ov).map_err(CliError::Config)?;
    let articles = load_dataset(&cfg.dataset).map_err(|e| CliError::Data(e.to_string()))?;
    if articles.is_empty() {
        return Err(CliError::Data(format!("{}: dataset contains no articles", cfg.dataset.display())));
    }
    split_for(&cfg.settings, &articles)?;
    if probe {
        for (section, s) in cfg.http_endpoints() {
            let timeout = Duration::from_secs_f64(s.timeout_secs.min(10.0));
            probe_endpoint(&s.endpoint, timeout)
                .map_err(|m| CliError::Backend(format!("{section}.endpoint unreachable: {m}")))?;
        }
    }
    Ok(cfg)
}

/// Write a synthetic corpus as a JSONL dataset.
pub fn cmd_synth(out: &Path, cfg: &SynthConfig) -> Result<Vec<NewsArticle>, CliError> {
    if cfg.n_fake == 0 || cfg.n_real == 0 {
        return Err(CliError::Usage("both --n-fake and --n-real must be at least 1".into()));
    }
    if cfg.min_words > cfg.max_words {
        return Err(CliError::Usage("--min-words exceeds --max-words".into()));
    }
    let articles = generate(cfg);
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    save_dataset(out, &articles).map_err(|e| CliError::Other(e.to_string()))?;
    Ok(articles)
}

/// A loaded config and dataset with a lazily built pipeline context, shared
/// by every command run through it.
pub struct App {
    config: PipelineConfig,
    articles: Vec<NewsArticle>,
    ctx: OnceLock<PipelineContext>,
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    version: &'a str,
    started_unix: u64,
    finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl App {
    pub fn from_path(path: &Path, ov: &Overrides) -> Result<Self, CliError> {
        Self::new(load_config(path, ov).map_err(CliError::Config)?)
    }

    pub fn new(config: PipelineConfig) -> Result<Self, CliError> {
        let articles = load_dataset(&config.dataset).map_err(|e| CliError::Data(e.to_string()))?;
        if articles.is_empty() {
            return Err(CliError::Data(format!(
                "{}: dataset contains no articles",
                config.dataset.display()
            )));
        }
        Ok(App {
            config,
            articles,
            ctx: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.out_dir
    }

    /// Fit or connect the backends and build the shared pipeline context.
    pub fn context(&self) -> Result<&PipelineContext, CliError> {
        if let Some(c) = self.ctx.get() {
            return Ok(c);
        }
        let cfg = &self.config;
        let settings = cfg.settings.clone();
        let split = split_for(&settings, &self.articles)?;
        let by_id: HashMap<&str, &NewsArticle> = self.articles.iter().map(|a| (a.id.as_str(), a)).collect();
        let train: Vec<&NewsArticle> = split.train.iter().map(|id| by_id[id.as_str()]).collect();
        let anchor: Arc<dyn AnchorClassifier> = match &cfg.anchor {
            AnchorChoice::Builtin(a) => Arc::new(fit_anchor(&train, a).map_err(PipelineError::from)?),
            AnchorChoice::Http { settings, .. } => Arc::new(HttpClassifier::new(settings.clone())),
        };
        let scorer: Arc<dyn ScorerBackend> = match &cfg.scorer {
            ScorerChoice::Builtin { order, alpha } => Arc::new(
                PromptConditionedNgram::fit(&train, *order, *alpha).map_err(|source| PipelineError::Scorer {
                    article: "<training corpus>".into(),
                    source,
                })?,
            ),
            ScorerChoice::Http {
                settings,
                max_context_chars,
                ..
            } => Arc::new(HttpScorer::new(settings.clone(), *max_context_chars)),
        };
        let ctx = PipelineContext::new(settings, self.articles.clone(), split, anchor, scorer)?;
        Ok(self.ctx.get_or_init(|| ctx))
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.config.out_dir.join(rel)
    }

    /// Record the resolved config and the run's timestamps.
    fn finish(&self, command: &str, started: u64) -> Result<(), CliError> {
        write_json(&self.path("config.resolved.json"), &self.config)?;
        write_json(
            &self.path(METADATA_FILE),
            &Metadata {
                command,
                version: env!("CARGO_PKG_VERSION"),
                started_unix: started,
                finished_unix: unix_now(),
            },
        )?;
        Ok(())
    }

    /// Real/fake pairs: declared `pair_id` links when present, otherwise
    /// nearest-length matching.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let declared = declared_pairs(&self.articles);
        if declared.is_empty() {
            pair_by_length(&self.articles).pairs
        } else {
            declared
        }
    }

    pub fn divergence(&self) -> Result<DivergenceReport, CliError> {
        let started = unix_now();
        let ctx = self.context()?;
        let pairs = self.pairs();
        let st = &self.config.stats;
        let report = divergence_analysis(ctx, &pairs, ctx.settings().prompt, st.alpha, st.exact_threshold, st.bins)?;
        write_json(&self.path("divergence.json"), &report)?;
        write_pairs_csv(&self.path("pairs.csv"), &report.pairs)?;
        if let Some(dist) = &report.distribution {
            for (name, hist) in [("histogram.csv", true), ("boxplot.csv", false)] {
                let p = self.path(name);
                let f = fs::File::create(&p).map_err(|e| io(&p, e))?;
                let res = if hist {
                    dist.write_histogram_csv(f)
                } else {
                    dist.write_boxplot_csv(f)
                };
                res.map_err(|e| io(&p, e))?;
            }
        }
        self.finish("divergence", started)?;
        Ok(report)
    }

    pub fn train(&self) -> Result<EvalReport, CliError> {
        let started = unix_now();
        let ctx = self.context()?;
        let outcome = ctx.run(ctx.settings().base_run())?;
        let ckpt = self.path("checkpoints/model.json");
        let dir = ckpt.parent().expect("has parent");
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        outcome
            .model
            .save(&ckpt, Some(outcome.training.clone()))
            .map_err(|e| CliError::Other(e.to_string()))?;
        write_json(&self.path("reports/train.json"), &outcome.report)?;
        let p = self.path("predictions.csv");
        let mut text = String::from("article_id,label,prob_fake,predicted_fake\n");
        for (id, prob) in &outcome.test_predictions {
            let label = ctx.article(id)?.label.name();
            text.push_str(&format!("{id},{label},{prob},{}\n", *prob >= 0.5));
        }
        fs::write(&p, text).map_err(|e| io(&p, e))?;
        self.finish("train", started)?;
        Ok(outcome.report.clone())
    }

    pub fn ablate(&self, variants: &[AblationVariant]) -> Result<Vec<(AblationVariant, EvalReport)>, CliError> {
        let started = unix_now();
        let variants = if variants.is_empty() {
            &AblationVariant::ALL[..]
        } else {
            variants
        };
        let rows = run_ablations(self.context()?, variants)?;
        for (v, r) in &rows {
            write_json(&self.path(&format!("reports/ablation_{v}.json")), r)?;
        }
        let named: Vec<(String, &EvalReport)> = rows.iter().map(|(v, r)| (v.to_string(), r)).collect();
        write_reports_csv(&self.path("ablation.csv"), &named)?;
        self.finish("ablate", started)?;
        Ok(rows)
    }

    pub fn sweep_k(&self, values: &[usize]) -> Result<Vec<(usize, EvalReport)>, CliError> {
        let started = unix_now();
        let values = if values.is_empty() {
            &self.config.sweep_k[..]
        } else {
            values
        };
        let rows = sweep_k(self.context()?, values)?;
        for (k, r) in &rows {
            write_json(&self.path(&format!("reports/sweep_k_{k}.json")), r)?;
        }
        let named: Vec<(String, &EvalReport)> = rows.iter().map(|(k, r)| (k.to_string(), r)).collect();
        write_reports_csv(&self.path("sweep_k.csv"), &named)?;
        self.finish("sweep-k", started)?;
        Ok(rows)
    }

    pub fn prompts(&self, prompts: &[PromptId]) -> Result<PromptComparison, CliError> {
        let started = unix_now();
        let prompts = if prompts.is_empty() {
            &[PromptId::T1, PromptId::T2, PromptId::T3][..]
        } else {
            prompts
        };
        let cmp = compare_prompts(self.context()?, prompts)?;
        for (p, r) in prompts.iter().zip(&cmp.rows) {
            write_json(&self.path(&format!("reports/prompt_{p}.json")), r)?;
        }
        write_json(&self.path("prompts.json"), &cmp)?;
        let named: Vec<(String, &EvalReport)> = prompts.iter().map(|p| p.to_string()).zip(&cmp.rows).collect();
        write_reports_csv(&self.path("prompts.csv"), &named)?;
        self.finish("prompts", started)?;
        Ok(cmp)
    }

    /// Word counts over each article's key fragments at the configured k.
    pub fn wordfreq(&self, top_n: Option<usize>) -> Result<WordFrequency, CliError> {
        let started = unix_now();
        let ctx = self.context()?;
        let k = ctx.settings().k;
        let mut ids: Vec<&String> = ctx.split().train.iter().chain(&ctx.split().test).collect();
        ids.sort();
        let selections = ids
            .iter()
            .map(|id| ctx.selection(id, k))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&NewsArticle> = self.articles.iter().collect();
        let freq = word_frequency(&refs, &selections, &default_stopwords())?;
        let n = top_n.unwrap_or(self.config.top_n);
        write_word_counts_csv(&self.path("wordfreq_real.csv"), &freq.real, n)?;
        write_word_counts_csv(&self.path("wordfreq_fake.csv"), &freq.fake, n)?;
        self.finish("wordfreq", started)?;
        Ok(freq)
    }

    /// Case-study export for one real/fake pair, by default the first pair.
    pub fn case(&self, real: Option<&str>, fake: Option<&str>) -> Result<CaseStudy, CliError> {
        let started = unix_now();
        let ctx = self.context()?;
        let (rid, fid) = match (real, fake) {
            (Some(r), Some(f)) => (r.to_string(), f.to_string()),
            (None, None) => self
                .pairs()
                .into_iter()
                .next()
                .ok_or_else(|| CliError::Data("no real/fake pair available".into()))?,
            _ => return Err(CliError::Usage("--real and --fake must be given together".into())),
        };
        let (ra, fa) = (ctx.article(&rid)?, ctx.article(&fid)?);
        if ra.label == fa.label || ra.label != life_core::Label::Real {
            return Err(CliError::Usage(format!("{rid:?} must be real and {fid:?} fake")));
        }
        let settings = ctx.settings();
        let scored = ctx.scored(settings.prompt)?;
        let masked = ctx.masked_scores()?;
        let missing = |id: &str| CliError::from(PipelineError::UnknownArticle(id.to_string()));
        let (rsel, fsel) = (ctx.selection(&rid, settings.k)?, ctx.selection(&fid, settings.k)?);
        let study = export_case_study(
            &self.config.out_dir,
            &CaseInput {
                article: ra,
                full: scored.get(&rid).ok_or_else(|| missing(&rid))?,
                selection: &rsel,
                masked: masked.get(&rid).ok_or_else(|| missing(&rid))?,
            },
            &CaseInput {
                article: fa,
                full: scored.get(&fid).ok_or_else(|| missing(&fid))?,
                selection: &fsel,
                masked: masked.get(&fid).ok_or_else(|| missing(&fid))?,
            },
            settings.delta_mode,
        )?;
        self.finish("case", started)?;
        Ok(study)
    }
}

/// Run `f` on a thread pool of `jobs` workers.
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Other(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
