//! The five commands behind the `clickgrad` binary.
//!
//! Each command is a function of its configuration and input files. Every
//! command writes its resolved configuration to `config.txt` in the
//! output directory next to its other artifacts.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{CompressionMode, FeatureMode, ModelChoice, Predictor, RunConfig};
use crate::data::{load_sessions, split, write_sessions, Dataset, Schema, SessionBatch, SessionRecord};
use crate::em::{marginal_log_likelihood, observations, run_em, Observation, PbmParams};
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, random_batch, randomize_parameters, GradCheck};
use crate::logspace::sigmoid;
use crate::metrics::{MetricReport, MetricSet};
use crate::models::{ClickModel, ClickPredictor, ModelKind};
use crate::params::{LogitProvider, ParameterStore};
use crate::train::{evaluate, train, History};

pub const CONFIG_FILE: &str = "config.txt";
pub const PARAMS_FILE: &str = "params.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SESSIONS_FILE: &str = "sessions.csv";
pub const LATENTS_FILE: &str = "latents.csv";
pub const EM_REPORT_FILE: &str = "em_compare.csv";
pub const EM_TRACE_FILE: &str = "em_trace.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

/// Sessions sampled per batch by `simulate`.
const SIMULATION_CHUNK: usize = 4096;
/// Evaluation batch size used regardless of the training batch size.
const EVAL_BATCH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Evaluate,
    Simulate,
    EmCompare,
    Gradcheck,
}

impl Command {
    pub const ALL: [Command; 5] = [
        Command::Train,
        Command::Evaluate,
        Command::Simulate,
        Command::EmCompare,
        Command::Gradcheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Simulate => "simulate",
            Command::EmCompare => "em-compare",
            Command::Gradcheck => "gradcheck",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown command `{s}`")))
    }
}

/// What a command printed and wrote.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub summary: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    fn note(&mut self, line: impl Into<String>) {
        self.summary.push(line.into());
    }
}

/// Runs `command`, applying the optional seed and output overrides first.
pub fn run(command: Command, mut config: RunConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<Outcome> {
    if let Some(s) = seed {
        config.train.seed = s;
    }
    if let Some(o) = out {
        config.output_dir = o;
    }
    match command {
        Command::Train => cmd_train(&config),
        Command::Evaluate => cmd_evaluate(&config),
        Command::Simulate => cmd_simulate(&config),
        Command::EmCompare => cmd_em_compare(&config),
        Command::Gradcheck => cmd_gradcheck(&config),
    }
}

fn prepare_output(config: &RunConfig, outcome: &mut Outcome) -> Result<PathBuf> {
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, config.to_text()).map_err(|e| Error::io(&path, e))?;
    outcome.files.push(path);
    Ok(dir)
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    value.as_ref().ok_or_else(|| Error::config(format!("`{key}` is required")))
}

fn metric_set(config: &RunConfig) -> MetricSet {
    MetricSet::new(&config.metrics)
}

fn save_report(report: &MetricReport, path: &Path, outcome: &mut Outcome) -> Result<()> {
    write_with(path, |b| report.write_csv(b))?;
    outcome.files.push(path.to_path_buf());
    for row in report.rows.iter().filter(|r| r.rank.is_none()) {
        outcome.note(format!("{} = {:.6}", row.metric, row.value));
    }
    Ok(())
}

/// Loads the data, trains and evaluates the model, and writes the
/// parameter dump, history and metrics.
pub fn cmd_train(config: &RunConfig) -> Result<Outcome> {
    let mut outcome = Outcome::default();
    let mut store = ParameterStore::new();
    let model = config.build_predictor(&mut store)?;
    let data = load_sessions(require(&config.data, "data")?, None)?;
    let (train_set, val_set, split_test) = split(&data, config.split, config.train.seed)?;
    let test_set = match &config.test_data {
        Some(p) => load_sessions(p, None)?,
        None => split_test,
    };
    if test_set.is_empty() {
        return Err(Error::config("no test sessions: set `test_data` or a non-zero test split"));
    }
    let dir = prepare_output(config, &mut outcome)?;
    let history_path = dir.join(HISTORY_FILE);
    let history = match train(&model, &mut store, &train_set, &val_set, &config.train) {
        Ok(h) => h,
        Err(Error::Diverged { message, history }) => {
            history.save(&history_path)?;
            return Err(Error::Diverged { message, history });
        }
        Err(e) => return Err(e),
    };
    history.save(&history_path)?;
    outcome.files.push(history_path);
    outcome.note(format!(
        "trained {} epochs, best epoch {}",
        history.epochs.len(),
        history.best_epoch.unwrap_or(0)
    ));
    let params_path = dir.join(PARAMS_FILE);
    store.save(&params_path)?;
    outcome.files.push(params_path);
    let report = evaluate(&model, &store, &test_set, metric_set(config), EVAL_BATCH)?;
    save_report(&report, &dir.join(METRICS_FILE), &mut outcome)?;
    Ok(outcome)
}

/// Loads a parameter dump and reports metrics on the test file.
pub fn cmd_evaluate(config: &RunConfig) -> Result<Outcome> {
    let mut outcome = Outcome::default();
    let mut store = ParameterStore::new();
    let model = config.build_predictor(&mut store)?;
    store.load(require(&config.params, "params")?)?;
    let path = config
        .test_data
        .as_ref()
        .or(config.data.as_ref())
        .ok_or_else(|| Error::config("`test_data` or `data` is required"))?;
    let data = load_sessions(path, None)?;
    let dir = prepare_output(config, &mut outcome)?;
    let report = evaluate(&model, &store, &data, metric_set(config), EVAL_BATCH)?;
    save_report(&report, &dir.join(METRICS_FILE), &mut outcome)?;
    Ok(outcome)
}

fn simulation_layout(config: &RunConfig, rng: &mut ChaCha8Rng) -> Dataset {
    let k = config.positions;
    let items = config.items.unwrap_or(1).max(1);
    let dim = if config.features == FeatureMode::Linear {
        config.feature_dim
    } else {
        0
    };
    let sessions = (0..config.sessions)
        .map(|s| {
            let ids = (0..k).map(|_| rng.gen_range(0..items)).collect();
            let mut rec = SessionRecord::new(s as u64, ids, vec![false; k]);
            if dim > 0 {
                rec.features = Some((0..k * dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
            }
            rec
        })
        .collect();
    Dataset::new(
        Schema {
            labels: false,
            feature_dim: dim,
        },
        sessions,
    )
}

/// Samples a click log from the configured model. Parameters come from the
/// `params` dump when given, otherwise every probability is `init_prob`.
pub fn cmd_simulate(config: &RunConfig) -> Result<Outcome> {
    let mut outcome = Outcome::default();
    let mut store = ParameterStore::new();
    let model = config.build_predictor(&mut store)?;
    if let Some(p) = &config.params {
        store.load(p)?;
    }
    if config.sessions == 0 {
        return Err(Error::config("`sessions` must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let layout = simulation_layout(config, &mut rng);
    let dir = prepare_output(config, &mut outcome)?;

    let mut sessions = Vec::with_capacity(layout.len());
    let mut latents = Vec::new();
    writeln!(latents, "session_id,rank,examined,attractive,satisfied").map_err(|e| Error::io(&dir, e))?;
    for chunk in layout.sessions.chunks(SIMULATION_CHUNK) {
        let batch = SessionBatch::from_sessions(layout.schema, chunk.iter());
        let drawn = model.sample(&store, &batch, rng.gen())?;
        for i in 0..batch.batch_size() {
            for k in 0..batch.session_len(i) {
                writeln!(
                    latents,
                    "{},{},{},{},{}",
                    batch.session_ids[i],
                    k + 1,
                    u8::from(drawn.examined[(i, k)]),
                    u8::from(drawn.attractive[(i, k)]),
                    u8::from(drawn.satisfied[(i, k)]),
                )
                .map_err(|e| Error::io(&dir, e))?;
            }
        }
        sessions.extend(drawn.to_dataset(&batch, &layout).sessions);
    }
    let simulated = Dataset::new(layout.schema, sessions);
    let clicks: usize = simulated.sessions.iter().map(|s| s.clicks.iter().filter(|&&c| c).count()).sum();
    let sessions_path = dir.join(SESSIONS_FILE);
    write_sessions(&sessions_path, &simulated)?;
    let latents_path = dir.join(LATENTS_FILE);
    std::fs::write(&latents_path, latents).map_err(|e| Error::io(&latents_path, e))?;
    let params_path = dir.join(PARAMS_FILE);
    store.save(&params_path)?;
    outcome.files.extend([sessions_path, latents_path, params_path]);
    outcome.note(format!(
        "simulated {} sessions, {} slots, {} clicks",
        simulated.len(),
        simulated.slot_count(),
        clicks
    ));
    Ok(outcome)
}

/// EM and gradient results on the same PBM training data.
#[derive(Debug, Clone, PartialEq)]
pub struct EmComparison {
    pub observations: usize,
    pub em_log_likelihood: f64,
    pub gradient_log_likelihood: f64,
    pub em_iterations: usize,
    pub gradient_epochs: usize,
    pub max_click_prob_difference: f64,
    pub mean_click_prob_difference: f64,
    /// Per-observation log-likelihood trace of EM.
    pub em_trace: Vec<f64>,
    pub history: History,
}

impl EmComparison {
    pub fn log_likelihood_difference(&self) -> f64 {
        self.gradient_log_likelihood - self.em_log_likelihood
    }

    pub fn em_trace_is_monotone(&self) -> bool {
        self.em_trace
            .windows(2)
            .all(|w| w[1] >= w[0] - 1e-12 * w[0].abs().max(1.0))
    }
}

fn pbm_params_from(model: &ClickModel, store: &ParameterStore, docs: usize) -> Result<PbmParams> {
    let exam = model
        .examination()
        .ok_or_else(|| Error::Internal("pbm without examination".into()))?;
    let Some(LogitProvider::Embedding(attraction)) = model.attraction() else {
        return Err(Error::config("em-compare requires an embedding attraction table"));
    };
    let theta = (1..=exam.positions()).map(|k| sigmoid(store.value(exam.param(k)))).collect();
    let gamma = (0..docs)
        .map(|d| Ok(sigmoid(attraction.logit_value(store, d as u64)?)))
        .collect::<Result<_>>()?;
    Ok(PbmParams { theta, gamma })
}

/// Fits a PBM to all of `data` with EM and with gradient training and
/// compares the two fits on that data. Gradient training monitors the same
/// data for early stopping, so both optimizers chase the same objective.
pub fn compare_em(config: &RunConfig, data: &Dataset) -> Result<EmComparison> {
    if config.model != Some(ModelChoice::Single(ModelKind::Pbm)) {
        return Err(Error::config("em-compare requires `model = pbm`"));
    }
    if config.features != FeatureMode::Embedding || config.compression != CompressionMode::None || config.baseline {
        return Err(Error::config("em-compare requires an uncompressed embedding table without baseline"));
    }
    let items = config
        .items
        .ok_or_else(|| Error::MissingBinding("pbm requires an attraction parameter".into()))?;
    let docs = usize::try_from(items).map_err(|_| Error::config("`items` too large"))?;
    let obs: Vec<Observation> = observations(data)?;
    if obs.is_empty() {
        return Err(Error::config("no training observations"));
    }
    let n = obs.len() as f64;

    let init = PbmParams::constant(config.positions, docs, config.init_prob);
    let em = run_em(&obs, &init, config.em_max_iters, config.em_tol * n)?;

    let mut store = ParameterStore::new();
    let Predictor::Single(model) = config.build_predictor(&mut store)? else {
        return Err(Error::Internal("expected a single model".into()));
    };
    let history = train(&model, &mut store, data, data, &config.train)?;
    let grad = pbm_params_from(&model, &store, docs)?;

    let mut max_diff: f64 = 0.0;
    let mut sum_diff = 0.0;
    for o in &obs {
        let d = (em.params.click_prob(o) - grad.click_prob(o)).abs();
        max_diff = max_diff.max(d);
        sum_diff += d;
    }
    Ok(EmComparison {
        observations: obs.len(),
        em_log_likelihood: marginal_log_likelihood(&em.params, &obs)? / n,
        gradient_log_likelihood: marginal_log_likelihood(&grad, &obs)? / n,
        em_iterations: em.iterations,
        gradient_epochs: history.epochs.len(),
        max_click_prob_difference: max_diff,
        mean_click_prob_difference: sum_diff / n,
        em_trace: em.trace.iter().map(|ll| ll / n).collect(),
        history,
    })
}

pub fn cmd_em_compare(config: &RunConfig) -> Result<Outcome> {
    let mut outcome = Outcome::default();
    if config.model != Some(ModelChoice::Single(ModelKind::Pbm)) {
        return Err(Error::config("em-compare requires `model = pbm`"));
    }
    let data = load_sessions(require(&config.data, "data")?, None)?;
    let cmp = compare_em(config, &data)?;
    let dir = prepare_output(config, &mut outcome)?;
    let report_path = dir.join(EM_REPORT_FILE);
    write_with(&report_path, |b| {
        writeln!(b, "key,value")?;
        writeln!(b, "observations,{}", cmp.observations)?;
        writeln!(b, "em_log_likelihood,{:.16e}", cmp.em_log_likelihood)?;
        writeln!(b, "gradient_log_likelihood,{:.16e}", cmp.gradient_log_likelihood)?;
        writeln!(b, "log_likelihood_difference,{:.16e}", cmp.log_likelihood_difference())?;
        writeln!(b, "em_iterations,{}", cmp.em_iterations)?;
        writeln!(b, "gradient_epochs,{}", cmp.gradient_epochs)?;
        writeln!(b, "max_click_prob_difference,{:.16e}", cmp.max_click_prob_difference)?;
        writeln!(b, "mean_click_prob_difference,{:.16e}", cmp.mean_click_prob_difference)?;
        writeln!(b, "em_trace_monotone,{}", cmp.em_trace_is_monotone())
    })?;
    let trace_path = dir.join(EM_TRACE_FILE);
    write_with(&trace_path, |b| {
        writeln!(b, "iteration,log_likelihood")?;
        for (i, ll) in cmp.em_trace.iter().enumerate() {
            writeln!(b, "{i},{ll:.16e}")?;
        }
        Ok(())
    })?;
    outcome.files.extend([report_path, trace_path]);
    outcome.note(format!(
        "em ll/obs = {:.6}, gradient ll/obs = {:.6}, difference = {:.2e}",
        cmp.em_log_likelihood,
        cmp.gradient_log_likelihood,
        cmp.log_likelihood_difference()
    ));
    outcome.note(format!("mean |theta*gamma difference| = {:.2e}", cmp.mean_click_prob_difference));
    Ok(outcome)
}

/// Finite-difference check of the configured model on seeded random
/// batches and parameters.
pub fn run_gradcheck(config: &RunConfig) -> Result<Vec<GradCheck>> {
    let docs = config.items.or(config.satisfaction_items).unwrap_or(10).max(1);
    let dim = if config.features == FeatureMode::Linear {
        config.feature_dim
    } else {
        0
    };
    let mut store = ParameterStore::new();
    let model = config.build_predictor(&mut store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    (0..config.gradcheck_batches)
        .map(|_| {
            randomize_parameters(&mut store, 2.0, rng.gen());
            let batch = random_batch(config.gradcheck_batch_size, config.positions, docs, dim, rng.gen());
            check_gradients(&model, &mut store, &batch, config.gradcheck_step)
        })
        .collect()
}

pub fn cmd_gradcheck(config: &RunConfig) -> Result<Outcome> {
    let mut outcome = Outcome::default();
    let checks = run_gradcheck(config)?;
    let dir = prepare_output(config, &mut outcome)?;
    let path = dir.join(GRADCHECK_FILE);
    write_with(&path, |b| {
        writeln!(b, "batch,parameters,max_relative_error")?;
        for (i, c) in checks.iter().enumerate() {
            writeln!(b, "{},{},{:.6e}", i, c.checked, c.max_relative_error)?;
        }
        Ok(())
    })?;
    outcome.files.push(path);
    let worst = checks.iter().copied().fold(GradCheck::default(), GradCheck::combine);
    outcome.note(format!("max relative error = {:.3e}", worst.max_relative_error));
    if worst.max_relative_error > config.gradcheck_tolerance {
        return Err(Error::Numerical(format!(
            "max relative gradient error {:.3e} exceeds {:.1e}",
            worst.max_relative_error, config.gradcheck_tolerance
        )));
    }
    Ok(outcome)
}
