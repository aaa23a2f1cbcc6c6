//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated
//! keys are errors. [`RunConfig::to_text`] writes every key with its
//! resolved value, and parsing that text gives back an equal config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autodiff::{NodeId, Tape};
use crate::data::{Grid, SessionBatch};
use crate::error::{Error, Result};
use crate::metrics::MetricKind;
use crate::mixture::MixtureModel;
use crate::models::{default_min_log_prob, ClickModel, ClickPredictor, ModelKind, ProviderConfig, SampledSessions};
use crate::params::{Compression, EmbeddingConfig, ParameterStore, DEFAULT_INIT_PROB};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Single(ModelKind),
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMode {
    /// One parameter per query-document id.
    #[default]
    Embedding,
    /// A linear function of per-slot features.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CompressionMode {
    #[default]
    None,
    Hashing,
    QuotientRemainder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: Option<ModelChoice>,
    pub mixture_members: Vec<ModelKind>,
    pub temperature: f64,
    /// Mixture members use one attraction table.
    pub share_attraction: bool,
    pub positions: usize,
    /// Attraction table size.
    pub items: Option<u64>,
    /// Satisfaction table size.
    pub satisfaction_items: Option<u64>,
    pub features: FeatureMode,
    pub feature_dim: usize,
    pub compression: CompressionMode,
    pub compression_ratio: usize,
    pub compression_seed: u64,
    pub remainder_size: Option<usize>,
    pub baseline: bool,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    /// Parameter dump to load (evaluate, simulate).
    pub params: Option<PathBuf>,
    pub split: (f64, f64, f64),
    pub min_log_prob: f64,
    pub init_prob: f64,
    pub output_dir: PathBuf,
    /// Number of sessions to simulate.
    pub sessions: usize,
    pub metrics: Vec<MetricKind>,
    pub em_max_iters: usize,
    pub em_tol: f64,
    pub gradcheck_batches: usize,
    pub gradcheck_batch_size: usize,
    pub gradcheck_step: f64,
    pub gradcheck_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: None,
            mixture_members: Vec::new(),
            temperature: 1.0,
            share_attraction: false,
            positions: 10,
            items: None,
            satisfaction_items: None,
            features: FeatureMode::Embedding,
            feature_dim: 0,
            compression: CompressionMode::None,
            compression_ratio: 1,
            compression_seed: 0,
            remainder_size: None,
            baseline: false,
            train: TrainConfig::default(),
            data: None,
            test_data: None,
            params: None,
            split: (0.8, 0.1, 0.1),
            min_log_prob: default_min_log_prob(),
            init_prob: DEFAULT_INIT_PROB,
            output_dir: PathBuf::from("out"),
            sessions: 1000,
            metrics: vec![
                MetricKind::LogLikelihood,
                MetricKind::Perplexity,
                MetricKind::ConditionalPerplexity,
            ],
            em_max_iters: 1000,
            em_tol: 1e-10,
            gradcheck_batches: 3,
            gradcheck_batch_size: 4,
            gradcheck_step: 1e-6,
            gradcheck_tolerance: 1e-5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_owned()) {
                return Err(Error::config(format!("line {}: `{key}` set twice", n + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "model" => {
                self.model = Some(if value.eq_ignore_ascii_case("mixture") {
                    ModelChoice::Mixture
                } else {
                    ModelChoice::Single(value.parse()?)
                })
            }
            "mixture_members" => self.mixture_members = list(value).map(str::parse).collect::<Result<_>>()?,
            "temperature" => self.temperature = parse(key, value)?,
            "share_attraction" => self.share_attraction = parse_bool(key, value)?,
            "positions" => self.positions = parse(key, value)?,
            "items" => self.items = Some(parse(key, value)?),
            "satisfaction_items" => self.satisfaction_items = Some(parse(key, value)?),
            "features" => {
                self.features = match value {
                    "embedding" => FeatureMode::Embedding,
                    "linear" => FeatureMode::Linear,
                    _ => return Err(Error::config(format!("`features`: unknown mode `{value}`"))),
                }
            }
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "compression" => {
                self.compression = match value {
                    "none" => CompressionMode::None,
                    "hashing" => CompressionMode::Hashing,
                    "qr" | "quotient_remainder" => CompressionMode::QuotientRemainder,
                    _ => return Err(Error::config(format!("`compression`: unknown mode `{value}`"))),
                }
            }
            "compression_ratio" => self.compression_ratio = parse(key, value)?,
            "compression_seed" => self.compression_seed = parse(key, value)?,
            "remainder_size" => self.remainder_size = Some(parse(key, value)?),
            "baseline" => self.baseline = parse_bool(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "adam_beta1" => t.adam_beta1 = parse(key, value)?,
            "adam_beta2" => t.adam_beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "record_wall_time" => t.record_wall_time = parse_bool(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "test_data" => self.test_data = Some(PathBuf::from(value)),
            "params" => self.params = Some(PathBuf::from(value)),
            "split" => {
                let parts: Vec<f64> = list(value).map(|v| parse(key, v)).collect::<Result<_>>()?;
                let [a, b, c] = parts[..] else {
                    return Err(Error::config("`split`: expected three fractions"));
                };
                self.split = (a, b, c);
            }
            "min_log_prob" => self.min_log_prob = parse(key, value)?,
            "init_prob" => self.init_prob = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "sessions" => self.sessions = parse(key, value)?,
            "metrics" => self.metrics = list(value).map(str::parse).collect::<Result<_>>()?,
            "em_max_iters" => self.em_max_iters = parse(key, value)?,
            "em_tol" => self.em_tol = parse(key, value)?,
            "gradcheck_batches" => self.gradcheck_batches = parse(key, value)?,
            "gradcheck_batch_size" => self.gradcheck_batch_size = parse(key, value)?,
            "gradcheck_step" => self.gradcheck_step = parse(key, value)?,
            "gradcheck_tolerance" => self.gradcheck_tolerance = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its resolved value; optional keys that are unset are
    /// left out.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        match self.model {
            Some(ModelChoice::Single(k)) => put("model", k.to_string()),
            Some(ModelChoice::Mixture) => put("model", "mixture".into()),
            None => {}
        }
        if !self.mixture_members.is_empty() {
            put("mixture_members", join(&self.mixture_members));
        }
        put("temperature", self.temperature.to_string());
        put("share_attraction", self.share_attraction.to_string());
        put("positions", self.positions.to_string());
        if let Some(v) = self.items {
            put("items", v.to_string());
        }
        if let Some(v) = self.satisfaction_items {
            put("satisfaction_items", v.to_string());
        }
        put(
            "features",
            match self.features {
                FeatureMode::Embedding => "embedding",
                FeatureMode::Linear => "linear",
            }
            .into(),
        );
        put("feature_dim", self.feature_dim.to_string());
        put(
            "compression",
            match self.compression {
                CompressionMode::None => "none",
                CompressionMode::Hashing => "hashing",
                CompressionMode::QuotientRemainder => "qr",
            }
            .into(),
        );
        put("compression_ratio", self.compression_ratio.to_string());
        put("compression_seed", self.compression_seed.to_string());
        if let Some(v) = self.remainder_size {
            put("remainder_size", v.to_string());
        }
        put("baseline", self.baseline.to_string());
        let t = &self.train;
        put("learning_rate", t.learning_rate.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("patience", t.patience.to_string());
        put("seed", t.seed.to_string());
        put("adam_beta1", t.adam_beta1.to_string());
        put("adam_beta2", t.adam_beta2.to_string());
        put("adam_eps", t.adam_eps.to_string());
        put("record_wall_time", t.record_wall_time.to_string());
        for (k, v) in [("data", &self.data), ("test_data", &self.test_data), ("params", &self.params)] {
            if let Some(p) = v {
                put(k, p.display().to_string());
            }
        }
        put("split", format!("{},{},{}", self.split.0, self.split.1, self.split.2));
        put("min_log_prob", self.min_log_prob.to_string());
        put("init_prob", self.init_prob.to_string());
        put("output_dir", self.output_dir.display().to_string());
        put("sessions", self.sessions.to_string());
        put("metrics", join(&self.metrics));
        put("em_max_iters", self.em_max_iters.to_string());
        put("em_tol", self.em_tol.to_string());
        put("gradcheck_batches", self.gradcheck_batches.to_string());
        put("gradcheck_batch_size", self.gradcheck_batch_size.to_string());
        put("gradcheck_step", self.gradcheck_step.to_string());
        put("gradcheck_tolerance", self.gradcheck_tolerance.to_string());
        out
    }

    pub fn model_choice(&self) -> Result<ModelChoice> {
        self.model.ok_or_else(|| Error::config("`model` is required"))
    }

    fn compression_config(&self) -> Result<Compression> {
        Ok(match self.compression {
            CompressionMode::None => Compression::None,
            CompressionMode::Hashing => {
                if self.compression_ratio == 0 {
                    return Err(Error::config("`compression_ratio` must be at least 1"));
                }
                Compression::Hashing {
                    ratio: self.compression_ratio,
                    seed: self.compression_seed,
                }
            }
            CompressionMode::QuotientRemainder => Compression::QuotientRemainder {
                remainder_size: self
                    .remainder_size
                    .ok_or_else(|| Error::config("`remainder_size` is required for qr compression"))?,
            },
        })
    }

    fn provider(&self, size: Option<u64>) -> Result<Option<ProviderConfig>> {
        match self.features {
            FeatureMode::Linear => {
                if self.feature_dim == 0 {
                    return Err(Error::config("linear features need `feature_dim` >= 1"));
                }
                Ok(Some(ProviderConfig::Linear { dim: self.feature_dim }))
            }
            FeatureMode::Embedding => size
                .map(|s| {
                    Ok(ProviderConfig::Embedding(
                        EmbeddingConfig::new(s)
                            .with_compression(self.compression_config()?)
                            .with_baseline(self.baseline),
                    ))
                })
                .transpose(),
        }
    }

    fn build_member(
        &self,
        kind: ModelKind,
        store: &mut ParameterStore,
        prefix: &str,
        shared: Option<&ClickModel>,
    ) -> Result<ClickModel> {
        let mut b = ClickModel::builder(kind, self.positions)
            .init_prob(self.init_prob)
            .min_log_prob(self.min_log_prob)
            .prefix(prefix);
        match shared.and_then(ClickModel::attraction) {
            Some(p) => b = b.shared_attraction(p.clone()),
            None => {
                if let Some(p) = self.provider(self.items)? {
                    b = b.attraction(p);
                }
            }
        }
        if let Some(p) = self.provider(self.satisfaction_items)? {
            b = b.satisfaction(p);
        }
        b.build(store)
    }

    /// Allocates the configured model's parameters in `store`.
    pub fn build_predictor(&self, store: &mut ParameterStore) -> Result<Predictor> {
        match self.model_choice()? {
            ModelChoice::Single(kind) => Ok(Predictor::Single(self.build_member(kind, store, "", None)?)),
            ModelChoice::Mixture => {
                if self.mixture_members.is_empty() {
                    return Err(Error::config("a mixture needs `mixture_members`"));
                }
                let mut members: Vec<ClickModel> = Vec::with_capacity(self.mixture_members.len());
                for (i, &kind) in self.mixture_members.iter().enumerate() {
                    let shared = if self.share_attraction {
                        members.iter().find(|m| m.attraction().is_some())
                    } else {
                        None
                    };
                    let m = self.build_member(kind, store, &format!("m{i}.{kind}."), shared)?;
                    members.push(m);
                }
                Ok(Predictor::Mixture(MixtureModel::new(store, members, self.temperature)?))
            }
        }
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// A configured single model or mixture.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Single(ClickModel),
    Mixture(MixtureModel),
}

impl Predictor {
    fn inner(&self) -> &dyn ClickPredictor {
        match self {
            Predictor::Single(m) => m,
            Predictor::Mixture(m) => m,
        }
    }
}

impl ClickPredictor for Predictor {
    fn compute_loss(&self, store: &ParameterStore, tape: &mut Tape, batch: &SessionBatch) -> Result<NodeId> {
        self.inner().compute_loss(store, tape, batch)
    }

    fn loss_weight(&self, batch: &SessionBatch) -> usize {
        self.inner().loss_weight(batch)
    }

    fn predict_clicks(&self, store: &ParameterStore, batch: &SessionBatch) -> Result<Grid<f64>> {
        self.inner().predict_clicks(store, batch)
    }

    fn predict_conditional_clicks(&self, store: &ParameterStore, batch: &SessionBatch) -> Result<Grid<f64>> {
        self.inner().predict_conditional_clicks(store, batch)
    }

    fn predict_relevance(&self, store: &ParameterStore, batch: &SessionBatch) -> Result<Grid<f64>> {
        self.inner().predict_relevance(store, batch)
    }

    fn sample(&self, store: &ParameterStore, batch: &SessionBatch, seed: u64) -> Result<SampledSessions> {
        self.inner().sample(store, batch, seed)
    }
}
