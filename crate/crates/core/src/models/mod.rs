//! The ten click models behind one interface.
//!
//! Each model is a small program over the autodiff tape that maps a batch to
//! per-slot log click probabilities, either unconditionally or conditioned on
//! the clicks observed earlier in the same session. The loss, both
//! predictors and the relevance scorer are all built from those programs;
//! [`ClickPredictor::sample`] runs the matching generative process.

mod likelihood;
mod sample;

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{NodeId, ParamId, Tape};
use crate::data::{Grid, SessionBatch};
use crate::error::{Error, Result};
use crate::logspace::logit;
use crate::params::{
    EmbeddingConfig, EmbeddingTable, LinearModel, LogitProvider, ParameterStore, PositionTable,
    DEFAULT_INIT_PROB,
};

pub use sample::SampledSessions;

/// Default log probability assigned to cascade-model clicks after the first
/// click of a session.
pub fn default_min_log_prob() -> f64 {
    1e-6f64.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Global CTR.
    Gctr,
    /// Rank CTR.
    Rctr,
    /// Document CTR.
    Dctr,
    Pbm,
    Cm,
    Ubm,
    Dcm,
    Ccm,
    Dbn,
    /// DBN with continuation fixed at 1.
    Sdbn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 10] = [
        ModelKind::Gctr,
        ModelKind::Rctr,
        ModelKind::Dctr,
        ModelKind::Pbm,
        ModelKind::Cm,
        ModelKind::Ubm,
        ModelKind::Dcm,
        ModelKind::Ccm,
        ModelKind::Dbn,
        ModelKind::Sdbn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gctr => "gctr",
            ModelKind::Rctr => "rctr",
            ModelKind::Dctr => "dctr",
            ModelKind::Pbm => "pbm",
            ModelKind::Cm => "cm",
            ModelKind::Ubm => "ubm",
            ModelKind::Dcm => "dcm",
            ModelKind::Ccm => "ccm",
            ModelKind::Dbn => "dbn",
            ModelKind::Sdbn => "sdbn",
        }
    }

    pub fn uses_attraction(self) -> bool {
        !matches!(self, ModelKind::Gctr | ModelKind::Rctr)
    }

    pub fn uses_satisfaction(self) -> bool {
        matches!(self, ModelKind::Dbn | ModelKind::Sdbn)
    }

    /// Whether conditioning on earlier clicks changes predictions.
    pub fn is_sequential(self) -> bool {
        !matches!(
            self,
            ModelKind::Gctr | ModelKind::Rctr | ModelKind::Dctr | ModelKind::Pbm
        )
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::config(format!("unknown model kind `{s}`")))
    }
}

/// How a per-document parameter is produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProviderConfig {
    Embedding(EmbeddingConfig),
    Linear { dim: usize },
}

impl ProviderConfig {
    pub fn embedding(size: u64) -> Self {
        ProviderConfig::Embedding(EmbeddingConfig::new(size))
    }

    fn build(&self, store: &mut ParameterStore, name: &str, init: f64) -> Result<LogitProvider> {
        Ok(match *self {
            ProviderConfig::Embedding(cfg) => EmbeddingTable::new(store, name, cfg, init)?.into(),
            ProviderConfig::Linear { dim } => LinearModel::new(store, name, dim, init)?.into(),
        })
    }
}

enum Binding {
    Absent,
    New(ProviderConfig),
    Shared(LogitProvider),
}

pub struct ModelBuilder {
    kind: ModelKind,
    positions: usize,
    attraction: Binding,
    satisfaction: Binding,
    init_prob: f64,
    min_log_prob: f64,
    prefix: String,
}

impl ModelBuilder {
    pub fn attraction(mut self, config: ProviderConfig) -> Self {
        self.attraction = Binding::New(config);
        self
    }

    /// Reuses an existing provider, sharing its parameters.
    pub fn shared_attraction(mut self, provider: LogitProvider) -> Self {
        self.attraction = Binding::Shared(provider);
        self
    }

    pub fn satisfaction(mut self, config: ProviderConfig) -> Self {
        self.satisfaction = Binding::New(config);
        self
    }

    pub fn shared_satisfaction(mut self, provider: LogitProvider) -> Self {
        self.satisfaction = Binding::Shared(provider);
        self
    }

    pub fn init_prob(mut self, p: f64) -> Self {
        self.init_prob = p;
        self
    }

    pub fn min_log_prob(mut self, v: f64) -> Self {
        self.min_log_prob = v;
        self
    }

    /// Prefix for the names of every table this model allocates.
    pub fn prefix(mut self, prefix: impl Into<String>) -> Self {
        self.prefix = prefix.into();
        self
    }

    pub fn build(self, store: &mut ParameterStore) -> Result<ClickModel> {
        let kind = self.kind;
        if self.positions == 0 {
            return Err(Error::config("positions must be at least 1"));
        }
        if !(self.init_prob > 0.0 && self.init_prob < 1.0) {
            return Err(Error::config(format!(
                "init probability {} must be in (0, 1)",
                self.init_prob
            )));
        }
        if self.min_log_prob.is_nan() || self.min_log_prob >= 0.0 {
            return Err(Error::config(format!(
                "min_log_prob {} must be negative",
                self.min_log_prob
            )));
        }
        let init = logit(self.init_prob);
        let name = |s: &str| format!("{}{}", self.prefix, s);
        let bind = |binding: Binding, role: &str, store: &mut ParameterStore| -> Result<Option<LogitProvider>> {
            match binding {
                Binding::Absent => Err(Error::MissingBinding(format!("{kind} requires a {role} parameter"))),
                Binding::New(cfg) => cfg.build(store, &name(role), init).map(Some),
                Binding::Shared(p) => Ok(Some(p)),
            }
        };
        let attraction = if kind.uses_attraction() {
            bind(self.attraction, "attraction", store)?
        } else {
            None
        };
        let satisfaction = if kind.uses_satisfaction() {
            bind(self.satisfaction, "satisfaction", store)?
        } else {
            None
        };
        let k = self.positions;
        let examination = match kind {
            ModelKind::Rctr | ModelKind::Pbm => {
                Some(PositionTable::new(store, &name("examination"), k, false, init)?)
            }
            ModelKind::Ubm => Some(PositionTable::new(store, &name("examination"), k, true, init)?),
            _ => None,
        };
        let continuation = match kind {
            ModelKind::Dcm => Some(PositionTable::new(store, &name("continuation"), k, false, init)?),
            _ => None,
        };
        let rho = match kind {
            ModelKind::Gctr => Some(store.add_scalar(&name("ctr"), init)?),
            _ => None,
        };
        let lambda = match kind {
            ModelKind::Dbn => Some(store.add_scalar(&name("continuation"), init)?),
            _ => None,
        };
        let tau = match kind {
            ModelKind::Ccm => {
                let t = store.add_table(&name("tau"), 3, init)?;
                Some([t.param(0), t.param(1), t.param(2)])
            }
            _ => None,
        };
        Ok(ClickModel {
            kind,
            positions: k,
            attraction,
            satisfaction,
            examination,
            continuation,
            rho,
            lambda,
            tau,
            min_log_prob: self.min_log_prob,
        })
    }
}

/// A click model of one [`ModelKind`] bound to parameters in a store.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickModel {
    kind: ModelKind,
    positions: usize,
    attraction: Option<LogitProvider>,
    satisfaction: Option<LogitProvider>,
    /// Examination per rank (RCTR, PBM) or per rank and last click (UBM).
    examination: Option<PositionTable>,
    /// DCM continuation after a click, per rank.
    continuation: Option<PositionTable>,
    rho: Option<ParamId>,
    /// DBN continuation.
    lambda: Option<ParamId>,
    /// CCM continuation after no click, after an unsatisfying click and
    /// after a satisfying click.
    tau: Option<[ParamId; 3]>,
    min_log_prob: f64,
}

impl ClickModel {
    pub fn builder(kind: ModelKind, positions: usize) -> ModelBuilder {
        ModelBuilder {
            kind,
            positions,
            attraction: Binding::Absent,
            satisfaction: Binding::Absent,
            init_prob: DEFAULT_INIT_PROB,
            min_log_prob: default_min_log_prob(),
            prefix: String::new(),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn min_log_prob(&self) -> f64 {
        self.min_log_prob
    }

    pub fn attraction(&self) -> Option<&LogitProvider> {
        self.attraction.as_ref()
    }

    pub fn satisfaction(&self) -> Option<&LogitProvider> {
        self.satisfaction.as_ref()
    }

    pub fn examination(&self) -> Option<&PositionTable> {
        self.examination.as_ref()
    }

    pub fn continuation(&self) -> Option<&PositionTable> {
        self.continuation.as_ref()
    }

    pub fn ctr_param(&self) -> Option<ParamId> {
        self.rho
    }

    pub fn lambda_param(&self) -> Option<ParamId> {
        self.lambda
    }

    pub fn tau_params(&self) -> Option<[ParamId; 3]> {
        self.tau
    }

    fn check_batch(&self, batch: &SessionBatch) -> Result<()> {
        let widest = (0..batch.batch_size()).map(|i| batch.session_len(i)).max().unwrap_or(0);
        if widest > self.positions {
            return Err(Error::usage(format!(
                "session with {widest} documents exceeds the model's {} positions",
                self.positions
            )));
        }
        Ok(())
    }

    /// Per-slot log click probabilities recorded on `tape`, one vector per
    /// session covering its unmasked slots.
    pub fn log_click_nodes(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        batch: &SessionBatch,
        conditional: bool,
    ) -> Result<Vec<Vec<NodeId>>> {
        self.check_batch(batch)?;
        (0..batch.batch_size())
            .map(|i| likelihood::session_log_probs(self, store, tape, batch, i, conditional))
            .collect()
    }

    /// Per-session sum of click log-likelihoods under the conditional
    /// predictor.
    pub fn session_log_likelihoods(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        batch: &SessionBatch,
    ) -> Result<Vec<NodeId>> {
        let probs = self.log_click_nodes(store, tape, batch, true)?;
        probs
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let terms = slot_log_likelihoods(tape, batch, i, row)?;
                Ok(if terms.is_empty() {
                    tape.constant(0.0)
                } else {
                    tape.add(&terms)
                })
            })
            .collect()
    }

    fn grid_from_nodes(&self, tape: &Tape, batch: &SessionBatch, nodes: &[Vec<NodeId>]) -> Grid<f64> {
        let mut out = Grid::filled(batch.batch_size(), batch.width(), 0.0);
        for (i, row) in nodes.iter().enumerate() {
            for (k, &n) in row.iter().enumerate() {
                out[(i, k)] = tape.value(n);
            }
        }
        out
    }

    fn predict(&self, store: &ParameterStore, batch: &SessionBatch, conditional: bool) -> Result<Grid<f64>> {
        let mut tape = Tape::new();
        let nodes = self.log_click_nodes(store, &mut tape, batch, conditional)?;
        Ok(self.grid_from_nodes(&tape, batch, &nodes))
    }
}

/// `c log p + (1 - c) log(1 - p)` for every unmasked slot of session `i`.
pub(crate) fn slot_log_likelihoods(
    tape: &mut Tape,
    batch: &SessionBatch,
    i: usize,
    log_probs: &[NodeId],
) -> Result<Vec<NodeId>> {
    log_probs
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            if batch.clicked(i, k) {
                Ok(p)
            } else {
                tape.log1mexp(p)
            }
        })
        .collect()
}

/// The five operations every click model, including the mixture, provides.
pub trait ClickPredictor {
    /// Scalar training loss for `batch` recorded on `tape`.
    fn compute_loss(&self, store: &ParameterStore, tape: &mut Tape, batch: &SessionBatch) -> Result<NodeId>;

    /// Number of units the loss averages over, used to weight batch losses
    /// into a dataset mean.
    fn loss_weight(&self, batch: &SessionBatch) -> usize;

    /// `log P(C = 1 | d, k)`; masked slots hold 0.
    fn predict_clicks(&self, store: &ParameterStore, batch: &SessionBatch) -> Result<Grid<f64>>;

    /// `log P(C = 1 | d, k, c_<k)`; masked slots hold 0.
    fn predict_conditional_clicks(&self, store: &ParameterStore, batch: &SessionBatch) -> Result<Grid<f64>>;

    /// Ranking scores; higher is more relevant.
    fn predict_relevance(&self, store: &ParameterStore, batch: &SessionBatch) -> Result<Grid<f64>>;

    /// Draws clicks and latent variables top-down for every session in
    /// `batch`, ignoring its observed clicks.
    fn sample(&self, store: &ParameterStore, batch: &SessionBatch, seed: u64) -> Result<SampledSessions>;
}

impl ClickPredictor for ClickModel {
    /// Negative mean conditional log-likelihood over unmasked slots.
    fn compute_loss(&self, store: &ParameterStore, tape: &mut Tape, batch: &SessionBatch) -> Result<NodeId> {
        let n = batch.slot_count();
        if n == 0 {
            return Err(Error::usage("batch has no unmasked slots"));
        }
        let probs = self.log_click_nodes(store, tape, batch, true)?;
        let mut terms = Vec::with_capacity(n);
        for (i, row) in probs.iter().enumerate() {
            terms.extend(slot_log_likelihoods(tape, batch, i, row)?);
        }
        let total = tape.add(&terms);
        Ok(tape.scale(total, -1.0 / n as f64))
    }

    fn loss_weight(&self, batch: &SessionBatch) -> usize {
        batch.slot_count()
    }

    fn predict_clicks(&self, store: &ParameterStore, batch: &SessionBatch) -> Result<Grid<f64>> {
        self.predict(store, batch, false)
    }

    fn predict_conditional_clicks(&self, store: &ParameterStore, batch: &SessionBatch) -> Result<Grid<f64>> {
        self.predict(store, batch, true)
    }

    fn predict_relevance(&self, store: &ParameterStore, batch: &SessionBatch) -> Result<Grid<f64>> {
        self.check_batch(batch)?;
        let mut out = Grid::filled(batch.batch_size(), batch.width(), 0.0);
        let Some(attraction) = &self.attraction else {
            return Ok(out);
        };
        let mut tape = Tape::new();
        for i in 0..batch.batch_size() {
            for k in 0..batch.session_len(i) {
                let a = attraction.logit(store, &mut tape, batch, i, k)?;
                let mut score = tape.log_sigmoid(a);
                if let Some(sat) = &self.satisfaction {
                    let s = sat.logit(store, &mut tape, batch, i, k)?;
                    let ls = tape.log_sigmoid(s);
                    score = tape.add2(score, ls);
                }
                out[(i, k)] = tape.value(score);
            }
        }
        Ok(out)
    }

    fn sample(&self, store: &ParameterStore, batch: &SessionBatch, seed: u64) -> Result<SampledSessions> {
        self.check_batch(batch)?;
        sample::sample(self, store, batch, seed)
    }
}
