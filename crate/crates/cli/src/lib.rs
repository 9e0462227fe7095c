//! Command-line driver: a TOML config selects the dataset, backends and
//! model settings, and each subcommand writes its reports under one output
//! directory.

pub mod commands;
pub mod config;
pub mod error;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use life_core::synth::SynthConfig;
use life_core::{AblationVariant, PromptId};

pub use commands::{cmd_synth, cmd_validate, with_jobs, App, METADATA_FILE};
pub use config::{load_config, parse_config, Diagnostic, Overrides, PipelineConfig};
pub use error::{exit, CliError};

#[derive(Debug, Parser)]
#[command(name = "life", version, about = "Fake news detection from prompted word likelihoods")]
pub struct Cli {
    /// Pipeline config file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dataset file; overrides `[dataset] path`.
    #[arg(long, global = true, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    /// Output directory; overrides `[output] dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Root seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for scoring and independent runs.
    #[arg(long, global = true, env = "LIFE_JOBS", default_value_t = 1)]
    pub jobs: usize,
    /// Scorer endpoint for the http backend; overrides `[scorer] endpoint`.
    #[arg(long, global = true, env = "LIFE_HTTP_ENDPOINT", value_name = "URL")]
    pub http_endpoint: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the config and dataset without writing anything.
    Validate {
        /// Also connect to every http backend.
        #[arg(long)]
        probe: bool,
    },
    /// Per-pair likelihood tests between real and fake articles.
    Divergence,
    /// Train and evaluate the classifier, saving a checkpoint.
    Train,
    /// Compare the full pipeline against its ablated variants.
    Ablate {
        /// Variants to run (full, no-mp, no-kf, no-cnn, no-trm); all by default.
        #[arg(long = "variant", value_parser = parse_variant)]
        variants: Vec<AblationVariant>,
    },
    /// Evaluate several fragment counts; 0 keeps whole articles.
    SweepK {
        /// Comma-separated k values; `[output] sweep_k` by default.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
    },
    /// Compare prompt templates.
    Prompts {
        /// Comma-separated template ids; T1,T2,T3 by default.
        #[arg(long, value_delimiter = ',', value_parser = parse_prompt)]
        prompts: Vec<PromptId>,
    },
    /// Word frequencies within key fragments, per label.
    Wordfreq {
        #[arg(long)]
        top_n: Option<usize>,
    },
    /// Export likelihood curves for one real/fake pair.
    Case {
        #[arg(long)]
        real: Option<String>,
        #[arg(long)]
        fake: Option<String>,
    },
    /// Write the synthetic benchmark corpus as JSONL.
    Synth {
        #[arg(long, value_name = "PATH")]
        output: PathBuf,
        #[arg(long, default_value_t = SynthConfig::default().n_fake)]
        n_fake: usize,
        #[arg(long, default_value_t = SynthConfig::default().n_real)]
        n_real: usize,
        #[arg(long, default_value_t = SynthConfig::default().min_words)]
        min_words: usize,
        #[arg(long, default_value_t = SynthConfig::default().max_words)]
        max_words: usize,
        /// Generator seed (independent of the pipeline's root seed).
        #[arg(long, default_value_t = SynthConfig::default().seed)]
        corpus_seed: u64,
    },
}

fn parse_variant(s: &str) -> Result<AblationVariant, String> {
    s.parse().map_err(|e: life_core::metrics_analysis::PipelineError| e.to_string())
}

fn parse_prompt(s: &str) -> Result<PromptId, String> {
    s.parse().map_err(|e: life_core::lm_scorer::ScorerError| e.to_string())
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            dataset: self.dataset.clone(),
            out_dir: self.out.clone(),
            http_endpoint: self.http_endpoint.clone(),
        }
    }

    fn config_path(&self) -> Result<&Path, CliError> {
        self.config
            .as_deref()
            .ok_or_else(|| CliError::Usage("--config is required for this command".into()))
    }
}

/// Execute a parsed command line, returning a short human summary.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let ov = cli.overrides();
    match &cli.command {
        Command::Synth {
            output,
            n_fake,
            n_real,
            min_words,
            max_words,
            corpus_seed,
        } => {
            let cfg = SynthConfig {
                n_fake: *n_fake,
                n_real: *n_real,
                min_words: *min_words,
                max_words: *max_words,
                seed: *corpus_seed,
                ..SynthConfig::default()
            };
            let articles = cmd_synth(output, &cfg)?;
            return Ok(format!("wrote {} articles to {}", articles.len(), output.display()));
        }
        Command::Validate { probe } => {
            let cfg = cmd_validate(cli.config_path()?, &ov, *probe)?;
            return Ok(format!("ok: {}", cfg.dataset.display()));
        }
        _ => {}
    }
    let app = App::from_path(cli.config_path()?, &ov)?;
    let jobs = match app.config().inflight_limit() {
        Some(limit) => cli.jobs.min(limit),
        None => cli.jobs,
    };
    with_jobs(jobs, || dispatch(&app, &cli.command))?
}

fn dispatch(app: &App, command: &Command) -> Result<String, CliError> {
    let f = |x: f64| format!("{x:.4}");
    Ok(match command {
        Command::Divergence => {
            let r = app.divergence()?;
            format!(
                "{} of {} pairs significant ({}); mean -ln p real {} fake {}",
                r.summary.significant,
                r.summary.total,
                r.ratio_percent,
                f(r.mean_real),
                f(r.mean_fake)
            )
        }
        Command::Train => {
            let r = app.train()?;
            format!("accuracy {} f1 {} (n = {})", f(r.accuracy), f(r.f1), r.n)
        }
        Command::Ablate { variants } => app
            .ablate(variants)?
            .iter()
            .map(|(v, r)| format!("{v}: accuracy {} f1 {}", f(r.accuracy), f(r.f1)))
            .collect::<Vec<_>>()
            .join("\n"),
        Command::SweepK { values } => app
            .sweep_k(values)?
            .iter()
            .map(|(k, r)| format!("k={k}: accuracy {} f1 {}", f(r.accuracy), f(r.f1)))
            .collect::<Vec<_>>()
            .join("\n"),
        Command::Prompts { prompts } => {
            let c = app.prompts(prompts)?;
            let mut lines: Vec<String> = c
                .rows
                .iter()
                .map(|r| {
                    let id = r.fingerprint.as_ref().map_or("?".to_string(), |p| p.prompt_id.to_string());
                    format!("{id}: accuracy {} f1 {}", f(r.accuracy), f(r.f1))
                })
                .collect();
            lines.push(format!("max accuracy gap {}", f(c.max_gap)));
            lines.join("\n")
        }
        Command::Wordfreq { top_n } => {
            let w = app.wordfreq(*top_n)?;
            let top = |v: &[life_core::metrics_analysis::WordCount]| {
                v.iter().take(5).map(|c| c.word.as_str()).collect::<Vec<_>>().join(", ")
            };
            format!("real: {}\nfake: {}", top(&w.real), top(&w.fake))
        }
        Command::Case { real, fake } => {
            let c = app.case(real.as_deref(), fake.as_deref())?;
            format!(
                "{} vs {}: full gap {} fragment gap {}",
                c.real_id,
                c.fake_id,
                f(c.full_gap),
                f(c.fragment_gap)
            )
        }
        Command::Validate { .. } | Command::Synth { .. } => unreachable!("handled before loading"),
    })
}
