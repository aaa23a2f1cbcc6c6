//! Finite-difference validation of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, Tape};
use crate::data::{Schema, SessionBatch, SessionRecord};
use crate::error::Result;
use crate::models::ClickPredictor;
use crate::params::ParameterStore;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Floor on the denominator of [`relative_error`], so gradients that are
/// zero up to rounding are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Parameter with the largest error.
    pub worst: Option<ParamId>,
    pub checked: usize,
}

impl GradCheck {
    pub fn combine(self, other: GradCheck) -> GradCheck {
        let (max_relative_error, worst) = if other.max_relative_error > self.max_relative_error {
            (other.max_relative_error, other.worst)
        } else {
            (self.max_relative_error, self.worst)
        };
        GradCheck {
            max_relative_error,
            worst,
            checked: self.checked + other.checked,
        }
    }
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            max_relative_error: 0.0,
            worst: None,
            checked: 0,
        }
    }
}

/// `|a - b| / max(|a|, |b|, 1e-3)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

fn loss_value<M: ClickPredictor + ?Sized>(model: &M, store: &ParameterStore, batch: &SessionBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = model.compute_loss(store, &mut tape, batch)?;
    Ok(tape.value(loss))
}

/// Compares the tape gradient of the model's loss on `batch` with central
/// differences for every trainable parameter. `store` is restored before
/// returning.
pub fn check_gradients<M: ClickPredictor + ?Sized>(
    model: &M,
    store: &mut ParameterStore,
    batch: &SessionBatch,
    step: f64,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let loss = model.compute_loss(store, &mut tape, batch)?;
    let grads = tape.backward(loss)?;
    let mut report = GradCheck::default();
    for i in 0..store.len() {
        let id = ParamId(i);
        if !store.is_trainable(id) {
            continue;
        }
        let x = store.value(id);
        store.set(id, x + step);
        let up = loss_value(model, store, batch);
        store.set(id, x - step);
        let down = loss_value(model, store, batch);
        store.set(id, x);
        let fd = (up? - down?) / (2.0 * step);
        let err = relative_error(grads.get(id), fd);
        report = report.combine(GradCheck {
            max_relative_error: err,
            worst: Some(id),
            checked: 1,
        });
    }
    Ok(report)
}

/// Sets every parameter to a uniform draw from `[-spread, spread]`.
pub fn randomize_parameters(store: &mut ParameterStore, spread: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in store.values_mut() {
        *v = rng.gen_range(-spread..=spread);
    }
}

/// Random sessions with lengths between 1 and `positions`, document ids
/// below `docs` and fair-coin clicks. The first session always has full
/// length so the batch is `positions` wide.
pub fn random_batch(batch_size: usize, positions: usize, docs: u64, feature_dim: usize, seed: u64) -> SessionBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schema = Schema {
        labels: false,
        feature_dim,
    };
    let sessions: Vec<SessionRecord> = (0..batch_size)
        .map(|s| {
            let len = if s == 0 { positions } else { rng.gen_range(1..=positions) };
            let ids = (0..len).map(|_| rng.gen_range(0..docs)).collect();
            let clicks = (0..len).map(|_| rng.gen_bool(0.5)).collect();
            let mut rec = SessionRecord::new(s as u64, ids, clicks);
            if feature_dim > 0 {
                rec.features = Some((0..len * feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
            }
            rec
        })
        .collect();
    SessionBatch::from_sessions(schema, sessions.iter())
}
