//! A learned prior over several click models, trained jointly with them.
//!
//! Each session's loss is `-lse_m[log P(m) + LL_m(s) / tau]`, where `LL_m(s)`
//! is member `m`'s click log-likelihood of the whole session. The batch
//! loss averages these over sessions.
//!
//! Click and relevance predictions weight members by the prior. Conditional
//! predictions weight them by the posterior given the clicks observed above
//! each rank, and sampling picks one member per session from the prior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::data::{Grid, SessionBatch};
use crate::error::{Error, Result};
use crate::logspace::{log_sum_exp_unchecked, log1mexp_unchecked};
use crate::models::{ClickModel, ClickPredictor, SampledSessions};
use crate::params::{ParameterStore, TableHandle};

pub const PRIOR_TABLE: &str = "mixture.prior";

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    members: Vec<ClickModel>,
    priors: TableHandle,
    temperature: f64,
}

impl MixtureModel {
    /// Allocates uniform prior logits for `members`. Members may share
    /// providers; see [`crate::models::ModelBuilder::shared_attraction`].
    pub fn new(store: &mut ParameterStore, members: Vec<ClickModel>, temperature: f64) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::config("a mixture needs at least one member"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::config(format!("temperature {temperature} must be positive")));
        }
        let priors = store.add_table(PRIOR_TABLE, members.len(), 0.0)?;
        Ok(MixtureModel {
            members,
            priors,
            temperature,
        })
    }

    pub fn members(&self) -> &[ClickModel] {
        &self.members
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn prior_table(&self) -> TableHandle {
        self.priors
    }

    /// Normalized log priors.
    pub fn log_priors(&self, store: &ParameterStore) -> Vec<f64> {
        let logits: Vec<f64> = self.priors.params().map(|p| store.value(p)).collect();
        let norm = log_sum_exp_unchecked(&logits);
        logits.iter().map(|l| l - norm).collect()
    }

    fn log_prior_nodes(&self, store: &ParameterStore, tape: &mut Tape) -> Vec<NodeId> {
        let logits: Vec<NodeId> = self.priors.params().map(|p| store.leaf(tape, p)).collect();
        let norm = tape.log_sum_exp(&logits);
        logits.iter().map(|&l| tape.sub(l, norm)).collect()
    }

    /// Per-session mixture losses; sessions without unmasked slots get `None`.
    pub fn session_losses(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        batch: &SessionBatch,
    ) -> Result<Vec<Option<NodeId>>> {
        let log_priors = self.log_prior_nodes(store, tape);
        let per_member: Vec<Vec<NodeId>> = self
            .members
            .iter()
            .map(|m| m.session_log_likelihoods(store, tape, batch))
            .collect::<Result<_>>()?;
        let inv_t = 1.0 / self.temperature;
        let mut out = Vec::with_capacity(batch.batch_size());
        for i in 0..batch.batch_size() {
            if batch.session_len(i) == 0 {
                out.push(None);
                continue;
            }
            let terms: Vec<NodeId> = per_member
                .iter()
                .zip(&log_priors)
                .map(|(ll, &lp)| {
                    let scaled = tape.scale(ll[i], inv_t);
                    tape.add2(lp, scaled)
                })
                .collect();
            let lse = tape.log_sum_exp(&terms);
            out.push(Some(tape.negate(lse)));
        }
        Ok(out)
    }

    fn member_grids(&self, f: impl Fn(&ClickModel) -> Result<Grid<f64>>) -> Result<Vec<Grid<f64>>> {
        self.members.iter().map(f).collect()
    }

    fn prior_weighted(&self, store: &ParameterStore, batch: &SessionBatch, grids: &[Grid<f64>]) -> Grid<f64> {
        let log_priors = self.log_priors(store);
        let mut out = Grid::filled(batch.batch_size(), batch.width(), 0.0);
        let mut terms = vec![0.0; grids.len()];
        for i in 0..batch.batch_size() {
            for k in 0..batch.session_len(i) {
                for (m, g) in grids.iter().enumerate() {
                    terms[m] = log_priors[m] + g[(i, k)];
                }
                out[(i, k)] = log_sum_exp_unchecked(&terms);
            }
        }
        out
    }
}

impl ClickPredictor for MixtureModel {
    fn compute_loss(&self, store: &ParameterStore, tape: &mut Tape, batch: &SessionBatch) -> Result<NodeId> {
        let losses: Vec<NodeId> = self.session_losses(store, tape, batch)?.into_iter().flatten().collect();
        if losses.is_empty() {
            return Err(Error::usage("batch has no unmasked slots"));
        }
        let total = tape.add(&losses);
        Ok(tape.scale(total, 1.0 / losses.len() as f64))
    }

    /// Number of non-empty sessions.
    fn loss_weight(&self, batch: &SessionBatch) -> usize {
        (0..batch.batch_size()).filter(|&i| batch.session_len(i) > 0).count()
    }

    fn predict_clicks(&self, store: &ParameterStore, batch: &SessionBatch) -> Result<Grid<f64>> {
        let grids = self.member_grids(|m| m.predict_clicks(store, batch))?;
        Ok(self.prior_weighted(store, batch, &grids))
    }

    /// Members are weighted by their posterior given the session's earlier
    /// clicks, starting from the prior at the first rank.
    fn predict_conditional_clicks(&self, store: &ParameterStore, batch: &SessionBatch) -> Result<Grid<f64>> {
        let grids = self.member_grids(|m| m.predict_conditional_clicks(store, batch))?;
        let log_priors = self.log_priors(store);
        let mut out = Grid::filled(batch.batch_size(), batch.width(), 0.0);
        let mut weights = vec![0.0; grids.len()];
        let mut terms = vec![0.0; grids.len()];
        for i in 0..batch.batch_size() {
            weights.copy_from_slice(&log_priors);
            for k in 0..batch.session_len(i) {
                let norm = log_sum_exp_unchecked(&weights);
                for (m, g) in grids.iter().enumerate() {
                    terms[m] = weights[m] + g[(i, k)];
                }
                out[(i, k)] = log_sum_exp_unchecked(&terms) - norm;
                for (m, g) in grids.iter().enumerate() {
                    let lp = g[(i, k)];
                    weights[m] += if batch.clicked(i, k) {
                        lp
                    } else {
                        log1mexp_unchecked(lp)
                    };
                }
            }
        }
        Ok(out)
    }

    fn predict_relevance(&self, store: &ParameterStore, batch: &SessionBatch) -> Result<Grid<f64>> {
        let grids = self.member_grids(|m| m.predict_relevance(store, batch))?;
        Ok(self.prior_weighted(store, batch, &grids))
    }

    /// Draws a member per session from the prior, then that member's
    /// clicks and latent variables.
    fn sample(&self, store: &ParameterStore, batch: &SessionBatch, seed: u64) -> Result<SampledSessions> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let priors: Vec<f64> = self.log_priors(store).iter().map(|l| l.exp()).collect();
        let choice: Vec<usize> = (0..batch.batch_size())
            .map(|_| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                priors
                    .iter()
                    .position(|&p| {
                        acc += p;
                        u < acc
                    })
                    .unwrap_or(priors.len() - 1)
            })
            .collect();
        let mut out = SampledSessions::empty(batch);
        for (m, member) in self.members.iter().enumerate() {
            if !choice.contains(&m) {
                continue;
            }
            let member_seed: u64 = rng.gen();
            let drawn = member.sample(store, batch, member_seed)?;
            for (i, _) in choice.iter().enumerate().filter(|(_, &c)| c == m) {
                out.copy_row(i, &drawn, i);
            }
        }
        Ok(out)
    }
}
