//! TOML pipeline configuration and its validation.
//!
//! Numeric fields are parsed as signed or floating values first so that an
//! out-of-range entry produces a diagnostic naming the field instead of a
//! bare deserialization error.

use std::fmt;
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::Duration;

use life_core::http::HttpSettings;
use life_core::key_fragments::AnchorConfig;
use life_core::metrics_analysis::BuiltinBackends;
use life_core::{DeltaMode, ModelConfig, PipelineSettings, PromptId, TrainConfig};
use serde::{Deserialize, Serialize};

/// One problem found in a config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    /// Dotted key path such as `fragments.k`.
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub seed: Option<i64>,
    #[serde(default)]
    pub dataset: RawDataset,
    #[serde(default)]
    pub scorer: RawBackend,
    #[serde(default)]
    pub anchor: RawBackend,
    #[serde(default)]
    pub fragments: RawFragments,
    #[serde(default)]
    pub features: RawFeatures,
    #[serde(default)]
    pub model: RawModel,
    #[serde(default)]
    pub train: RawTrain,
    #[serde(default)]
    pub stats: RawStats,
    #[serde(default)]
    pub output: RawOutput,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawDataset {
    pub path: Option<PathBuf>,
    pub split_ratio: Option<f64>,
}

/// Shared shape of the `[scorer]` and `[anchor]` sections.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawBackend {
    pub backend: Option<String>,
    // builtin scorer
    pub order: Option<i64>,
    pub alpha: Option<f64>,
    // builtin anchor
    pub l2: Option<f64>,
    pub max_iter: Option<i64>,
    pub tol: Option<f64>,
    // http
    pub endpoint: Option<String>,
    pub timeout_secs: Option<f64>,
    pub retries: Option<i64>,
    pub inflight: Option<i64>,
    pub max_context_chars: Option<i64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawFragments {
    pub prompt: Option<String>,
    pub k: Option<i64>,
    pub delta_mode: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawFeatures {
    pub length: Option<i64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawModel {
    pub conv_channels: Option<i64>,
    pub kernel: Option<i64>,
    pub d_model: Option<i64>,
    pub heads: Option<i64>,
    pub ff_dim: Option<i64>,
    pub layers: Option<i64>,
    pub use_cnn: Option<bool>,
    pub use_transformer: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawTrain {
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub warmup_ratio: Option<f64>,
    pub batch_size: Option<i64>,
    pub epochs: Option<i64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawStats {
    pub alpha: Option<f64>,
    pub exact_threshold: Option<i64>,
    pub bins: Option<i64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawOutput {
    pub dir: Option<PathBuf>,
    pub top_n: Option<i64>,
    pub sweep_k: Option<Vec<i64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum ScorerChoice {
    Builtin { order: usize, alpha: f64 },
    Http {
        settings: HttpSettings,
        inflight: usize,
        max_context_chars: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum AnchorChoice {
    Builtin(AnchorConfig),
    Http { settings: HttpSettings, inflight: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsConfig {
    pub alpha: f64,
    pub exact_threshold: usize,
    pub bins: usize,
}

/// A validated configuration with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    pub settings: PipelineSettings,
    pub scorer: ScorerChoice,
    pub anchor: AnchorChoice,
    pub stats: StatsConfig,
    /// Where artifacts go; not part of the analysis, so not serialized.
    #[serde(skip)]
    pub out_dir: PathBuf,
    pub top_n: usize,
    pub sweep_k: Vec<usize>,
}

/// Overrides from flags and the environment, applied before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub http_endpoint: Option<String>,
}

struct Checker {
    diags: Vec<Diagnostic>,
}

impl Checker {
    fn fail(&mut self, field: &str, message: impl Into<String>) {
        self.diags.push(Diagnostic {
            field: field.to_string(),
            message: message.into(),
        });
    }

    fn int(&mut self, field: &str, v: Option<i64>, default: usize, min: i64) -> usize {
        match v {
            None => default,
            Some(x) if x < min => {
                self.fail(field, format!("must be at least {min}, got {x}"));
                default
            }
            Some(x) => x as usize,
        }
    }

    fn float(&mut self, field: &str, v: Option<f64>, default: f64, ok: impl Fn(f64) -> bool, want: &str) -> f64 {
        match v {
            None => default,
            Some(x) if !x.is_finite() || !ok(x) => {
                self.fail(field, format!("must be {want}, got {x}"));
                default
            }
            Some(x) => x,
        }
    }

    fn http(&mut self, section: &str, raw: &RawBackend, endpoint: Option<&str>) -> (HttpSettings, usize) {
        let endpoint = match endpoint.or(raw.endpoint.as_deref()) {
            Some(e) if endpoint_addr(e).is_some() => e.to_string(),
            Some(e) => {
                self.fail(&format!("{section}.endpoint"), format!("not an http(s) URL with a host: {e:?}"));
                String::new()
            }
            None => {
                self.fail(&format!("{section}.endpoint"), "required for the http backend");
                String::new()
            }
        };
        let defaults = HttpSettings::new("");
        let settings = HttpSettings {
            endpoint,
            timeout_secs: self.float(
                &format!("{section}.timeout_secs"),
                raw.timeout_secs,
                defaults.timeout_secs,
                |x| x > 0.0,
                "positive",
            ),
            retries: self.int(&format!("{section}.retries"), raw.retries, defaults.retries as usize, 0) as u32,
        };
        let inflight = self.int(&format!("{section}.inflight"), raw.inflight, 4, 1);
        (settings, inflight)
    }

    fn reject_foreign(&mut self, section: &str, backend: &str, fields: &[(&str, bool)]) {
        for (name, present) in fields {
            if *present {
                self.fail(&format!("{section}.{name}"), format!("not used by the {backend} backend"));
            }
        }
    }
}

/// `host:port` of an http(s) URL, or `None` if it does not parse.
pub fn endpoint_addr(url: &str) -> Option<String> {
    let (rest, port) = if let Some(r) = url.strip_prefix("http://") {
        (r, 80)
    } else if let Some(r) = url.strip_prefix("https://") {
        (r, 443)
    } else {
        return None;
    };
    let authority = rest.split(['/', '?', '#']).next().unwrap_or("");
    if authority.is_empty() || authority.contains('@') {
        return None;
    }
    let has_port = authority
        .rsplit_once(':')
        .is_some_and(|(h, p)| !h.is_empty() && !h.ends_with(':') && p.parse::<u16>().is_ok());
    if has_port {
        Some(authority.to_string())
    } else if authority.contains(':') && !authority.starts_with('[') {
        None
    } else {
        Some(format!("{authority}:{port}"))
    }
}

/// Open and close a TCP connection to the endpoint's host.
pub fn probe_endpoint(url: &str, timeout: Duration) -> Result<(), String> {
    let addr = endpoint_addr(url).ok_or_else(|| format!("cannot parse endpoint {url:?}"))?;
    let addrs: Vec<_> = addr
        .to_socket_addrs()
        .map_err(|e| format!("cannot resolve {addr}: {e}"))?
        .collect();
    let mut last = format!("no addresses for {addr}");
    for a in addrs {
        match TcpStream::connect_timeout(&a, timeout) {
            Ok(_) => return Ok(()),
            Err(e) => last = format!("cannot connect to {a}: {e}"),
        }
    }
    Err(last)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parse TOML text. Relative paths inside the file resolve against `base`.
pub fn parse_config(text: &str, base: &Path, ov: &Overrides) -> Result<PipelineConfig, Vec<Diagnostic>> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        vec![Diagnostic {
            field: "<file>".into(),
            message: e.to_string().trim_end().to_string(),
        }]
    })?;
    check(&raw, base, ov)
}

/// Read and validate a config file.
pub fn load_config(path: &Path, ov: &Overrides) -> Result<PipelineConfig, Vec<Diagnostic>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        vec![Diagnostic {
            field: "<file>".into(),
            message: format!("{}: {e}", path.display()),
        }]
    })?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    parse_config(&text, base, ov)
}

fn check(raw: &RawConfig, base: &Path, ov: &Overrides) -> Result<PipelineConfig, Vec<Diagnostic>> {
    let mut c = Checker { diags: Vec::new() };

    let seed = match (ov.seed, raw.seed) {
        (Some(s), _) => s,
        (None, Some(s)) if s < 0 => {
            c.fail("seed", format!("must be non-negative, got {s}"));
            0
        }
        (None, Some(s)) => s as u64,
        (None, None) => 0,
    };

    let dataset = match (&ov.dataset, &raw.dataset.path) {
        (None, None) => {
            c.fail("dataset.path", "required");
            PathBuf::new()
        }
        (Some(p), _) | (None, Some(p)) => {
            let p = if ov.dataset.is_some() { p.clone() } else { resolve(base, p) };
            if !p.is_file() {
                c.fail("dataset.path", format!("no such file: {}", p.display()));
            }
            p
        }
    };
    let split_ratio = c.float(
        "dataset.split_ratio",
        raw.dataset.split_ratio,
        0.8,
        |x| x > 0.0 && x < 1.0,
        "strictly between 0 and 1",
    );

    let scorer = match raw.scorer.backend.as_deref().unwrap_or("builtin") {
        "builtin" => {
            let s = &raw.scorer;
            c.reject_foreign(
                "scorer",
                "builtin",
                &[
                    ("endpoint", s.endpoint.is_some()),
                    ("timeout_secs", s.timeout_secs.is_some()),
                    ("retries", s.retries.is_some()),
                    ("inflight", s.inflight.is_some()),
                    ("max_context_chars", s.max_context_chars.is_some()),
                    ("l2", s.l2.is_some()),
                    ("max_iter", s.max_iter.is_some()),
                    ("tol", s.tol.is_some()),
                ],
            );
            ScorerChoice::Builtin {
                order: c.int("scorer.order", s.order, 3, 1),
                alpha: c.float("scorer.alpha", s.alpha, 0.1, |x| x > 0.0, "positive"),
            }
        }
        "http" => {
            let s = &raw.scorer;
            c.reject_foreign(
                "scorer",
                "http",
                &[
                    ("order", s.order.is_some()),
                    ("alpha", s.alpha.is_some()),
                    ("l2", s.l2.is_some()),
                    ("max_iter", s.max_iter.is_some()),
                    ("tol", s.tol.is_some()),
                ],
            );
            let (settings, inflight) = c.http("scorer", s, ov.http_endpoint.as_deref());
            let max_context_chars = s
                .max_context_chars
                .map(|_| c.int("scorer.max_context_chars", s.max_context_chars, 0, 1));
            ScorerChoice::Http {
                settings,
                inflight,
                max_context_chars,
            }
        }
        other => {
            c.fail("scorer.backend", format!("expected \"builtin\" or \"http\", got {other:?}"));
            ScorerChoice::Builtin { order: 3, alpha: 0.1 }
        }
    };

    let anchor = match raw.anchor.backend.as_deref().unwrap_or("builtin") {
        "builtin" => {
            let a = &raw.anchor;
            c.reject_foreign(
                "anchor",
                "builtin",
                &[
                    ("endpoint", a.endpoint.is_some()),
                    ("timeout_secs", a.timeout_secs.is_some()),
                    ("retries", a.retries.is_some()),
                    ("inflight", a.inflight.is_some()),
                    ("max_context_chars", a.max_context_chars.is_some()),
                    ("order", a.order.is_some()),
                    ("alpha", a.alpha.is_some()),
                ],
            );
            let d = AnchorConfig::default();
            AnchorChoice::Builtin(AnchorConfig {
                l2: c.float("anchor.l2", a.l2, d.l2, |x| x >= 0.0, "non-negative"),
                max_iter: c.int("anchor.max_iter", a.max_iter, d.max_iter, 1),
                tol: c.float("anchor.tol", a.tol, d.tol, |x| x > 0.0, "positive"),
            })
        }
        "http" => {
            let a = &raw.anchor;
            c.reject_foreign(
                "anchor",
                "http",
                &[
                    ("order", a.order.is_some()),
                    ("alpha", a.alpha.is_some()),
                    ("l2", a.l2.is_some()),
                    ("max_iter", a.max_iter.is_some()),
                    ("tol", a.tol.is_some()),
                    ("max_context_chars", a.max_context_chars.is_some()),
                ],
            );
            // The endpoint override targets the scorer only.
            let (settings, inflight) = c.http("anchor", a, None);
            AnchorChoice::Http { settings, inflight }
        }
        other => {
            c.fail("anchor.backend", format!("expected \"builtin\" or \"http\", got {other:?}"));
            AnchorChoice::Builtin(AnchorConfig::default())
        }
    };

    let prompt = match raw.fragments.prompt.as_deref() {
        None => PromptId::T2,
        Some(p) => p.parse().unwrap_or_else(|_| {
            c.fail("fragments.prompt", format!("expected T1, T2, T3 or NEUTRAL, got {p:?}"));
            PromptId::T2
        }),
    };
    let k = c.int("fragments.k", raw.fragments.k, 10, 0);
    let delta_mode = match raw.fragments.delta_mode.as_deref() {
        None => DeltaMode::Abs,
        Some(m) => m.parse().unwrap_or_else(|_| {
            c.fail("fragments.delta_mode", format!("expected \"abs\" or \"signed\", got {m:?}"));
            DeltaMode::Abs
        }),
    };

    let dm = ModelConfig::default();
    let m = &raw.model;
    let model = ModelConfig {
        feature_len: c.int("features.length", raw.features.length, dm.feature_len, 1),
        conv_channels: c.int("model.conv_channels", m.conv_channels, dm.conv_channels, 1),
        kernel: c.int("model.kernel", m.kernel, dm.kernel, 1),
        d_model: c.int("model.d_model", m.d_model, dm.d_model, 1),
        heads: c.int("model.heads", m.heads, dm.heads, 1),
        ff_dim: c.int("model.ff_dim", m.ff_dim, dm.ff_dim, 1),
        layers: c.int("model.layers", m.layers, dm.layers, 0),
        use_cnn: m.use_cnn.unwrap_or(dm.use_cnn),
        use_transformer: m.use_transformer.unwrap_or(dm.use_transformer),
    };
    if model.kernel % 2 == 0 {
        c.fail("model.kernel", format!("must be odd, got {}", model.kernel));
    } else if model.d_model % model.heads != 0 {
        c.fail(
            "model.heads",
            format!("must divide model.d_model ({}), got {}", model.d_model, model.heads),
        );
    } else if let Err(e) = model.validate() {
        c.fail("model", e.to_string());
    }

    let dt = TrainConfig::default();
    let t = &raw.train;
    let train = TrainConfig {
        learning_rate: c.float("train.learning_rate", t.learning_rate, dt.learning_rate, |x| x > 0.0, "positive"),
        weight_decay: c.float("train.weight_decay", t.weight_decay, dt.weight_decay, |x| x >= 0.0, "non-negative"),
        warmup_ratio: c.float(
            "train.warmup_ratio",
            t.warmup_ratio,
            dt.warmup_ratio,
            |x| (0.0..1.0).contains(&x),
            "in [0, 1)",
        ),
        batch_size: c.int("train.batch_size", t.batch_size, dt.batch_size, 1),
        epochs: c.int("train.epochs", t.epochs, dt.epochs, 1),
        seed: 0,
    };

    let stats = StatsConfig {
        alpha: c.float("stats.alpha", raw.stats.alpha, 0.05, |x| x > 0.0 && x < 1.0, "strictly between 0 and 1"),
        exact_threshold: c.int(
            "stats.exact_threshold",
            raw.stats.exact_threshold,
            life_core::fingerprint_stats::DEFAULT_EXACT_THRESHOLD,
            1,
        ),
        bins: c.int("stats.bins", raw.stats.bins, 20, 1),
    };

    let out_dir = match (&ov.out_dir, &raw.output.dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => resolve(base, d),
        (None, None) => resolve(base, Path::new("out")),
    };
    let top_n = c.int("output.top_n", raw.output.top_n, 100, 1);
    let sweep_k = match &raw.output.sweep_k {
        None => vec![0, 5, 10, 15, 20],
        Some(v) if v.is_empty() => {
            c.fail("output.sweep_k", "must list at least one value");
            Vec::new()
        }
        Some(v) => v
            .iter()
            .map(|&x| c.int("output.sweep_k", Some(x), 0, 0))
            .collect(),
    };

    if !c.diags.is_empty() {
        return Err(c.diags);
    }
    Ok(PipelineConfig {
        dataset,
        settings: PipelineSettings {
            prompt,
            k,
            delta_mode,
            split_ratio,
            model,
            train,
            seed,
        },
        scorer,
        anchor,
        stats,
        out_dir,
        top_n,
        sweep_k,
    })
}

impl PipelineConfig {
    /// Built-in backend parameters, for whichever backends are built in.
    pub fn builtin_backends(&self) -> BuiltinBackends {
        let d = BuiltinBackends::default();
        BuiltinBackends {
            ngram_order: match self.scorer {
                ScorerChoice::Builtin { order, .. } => order,
                _ => d.ngram_order,
            },
            ngram_alpha: match self.scorer {
                ScorerChoice::Builtin { alpha, .. } => alpha,
                _ => d.ngram_alpha,
            },
            anchor: match self.anchor {
                AnchorChoice::Builtin(a) => a,
                _ => d.anchor,
            },
        }
    }

    /// Endpoints of every remote backend, scorer first.
    pub fn http_endpoints(&self) -> Vec<(&'static str, &HttpSettings)> {
        let mut out = Vec::new();
        if let ScorerChoice::Http { settings, .. } = &self.scorer {
            out.push(("scorer", settings));
        }
        if let AnchorChoice::Http { settings, .. } = &self.anchor {
            out.push(("anchor", settings));
        }
        out
    }

    /// Upper bound on concurrent requests to remote backends, if any.
    pub fn inflight_limit(&self) -> Option<usize> {
        let s = match self.scorer {
            ScorerChoice::Http { inflight, .. } => Some(inflight),
            _ => None,
        };
        let a = match self.anchor {
            AnchorChoice::Http { inflight, .. } => Some(inflight),
            _ => None,
        };
        match (s, a) {
            (Some(x), Some(y)) => Some(x.min(y)),
            (x, y) => x.or(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<PipelineConfig, Vec<Diagnostic>> {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("d.jsonl"), "").unwrap();
        parse_config(text, dir.path(), &Overrides::default())
    }

    #[test]
    fn defaults_fill_in() {
        let c = parse("[dataset]\npath = \"d.jsonl\"\n").unwrap();
        assert_eq!(c.settings.k, 10);
        assert_eq!(c.settings.prompt, PromptId::T2);
        assert_eq!(c.scorer, ScorerChoice::Builtin { order: 3, alpha: 0.1 });
        assert_eq!(c.top_n, 100);
    }

    #[test]
    fn negative_k_names_the_field() {
        let e = parse("[dataset]\npath = \"d.jsonl\"\n[fragments]\nk = -1\n").unwrap_err();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].field, "fragments.k");
    }

    #[test]
    fn collects_every_problem() {
        let e = parse("[dataset]\npath = \"missing.jsonl\"\nsplit_ratio = 1.5\n[model]\nkernel = 4\n").unwrap_err();
        let fields: Vec<&str> = e.iter().map(|d| d.field.as_str()).collect();
        assert_eq!(fields, ["dataset.path", "dataset.split_ratio", "model.kernel"]);
    }

    #[test]
    fn unknown_key_rejected() {
        let e = parse("[dataset]\npath = \"d.jsonl\"\n[fragments]\nkay = 3\n").unwrap_err();
        assert!(e[0].message.contains("kay"), "{}", e[0].message);
    }

    #[test]
    fn http_needs_endpoint_and_override_applies() {
        let text = "[dataset]\npath = \"d.jsonl\"\n[scorer]\nbackend = \"http\"\n";
        let e = parse(text).unwrap_err();
        assert_eq!(e[0].field, "scorer.endpoint");
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("d.jsonl"), "").unwrap();
        let ov = Overrides {
            http_endpoint: Some("http://127.0.0.1:9/".into()),
            ..Overrides::default()
        };
        let c = parse_config(text, dir.path(), &ov).unwrap();
        assert_eq!(c.http_endpoints()[0].1.endpoint, "http://127.0.0.1:9/");
        assert_eq!(c.inflight_limit(), Some(4));
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!(endpoint_addr("http://localhost:8080/v1").as_deref(), Some("localhost:8080"));
        assert_eq!(endpoint_addr("https://example.org").as_deref(), Some("example.org:443"));
        assert_eq!(endpoint_addr("http://[::1]:7000").as_deref(), Some("[::1]:7000"));
        assert_eq!(endpoint_addr("ftp://x"), None);
        assert_eq!(endpoint_addr("http://"), None);
        assert_eq!(endpoint_addr("http://host:notaport"), None);
    }
}
