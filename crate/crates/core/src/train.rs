//! Mini-batch AdamW training with validation-based early stopping.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape};
use crate::data::{batch_iterator, batch_iterator_with, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{MetricInputs, MetricReport, MetricSet};
use crate::models::ClickPredictor;
use crate::params::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Maximum number of epochs.
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Write measured epoch durations to the history. When off, the
    /// `seconds` column is 0 and history files are reproducible byte for
    /// byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.003,
            weight_decay: 1e-4,
            epochs: 100,
            batch_size: 256,
            patience: 1,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(())
    }
}

/// Adam moments for every parameter in a store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore) -> Self {
        OptimizerState {
            m: vec![0.0; store.len()],
            v: vec![0.0; store.len()],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One AdamW step over the parameters present in `grads`. Frozen
/// parameters are skipped; parameters absent from `grads` keep their value
/// and moments.
pub fn adamw_step(
    store: &mut ParameterStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::usage("optimizer state does not match the parameter store"));
    }
    if let Some((id, g)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "gradient {g} for parameter {} at optimizer step {}",
            id.0,
            state.t + 1
        )));
    }
    state.t += 1;
    let t = state.t as f64;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (id, g) in grads.iter() {
        if !store.is_trainable(id) {
            continue;
        }
        let i = id.0;
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let p = store.value(id);
        let next = p - config.learning_rate * (m_hat / (v_hat.sqrt() + config.adam_eps) + config.weight_decay * p);
        store.set(id, next);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Weighted mean of the batch losses seen during the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored at the end of training.
    pub best_epoch: Option<usize>,
}

impl History {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "epoch,train_loss,val_loss,seconds")?;
        for r in &self.epochs {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.6}",
                r.epoch, r.train_loss, r.val_loss, r.seconds
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Weighted mean loss over a dataset without touching any parameter.
pub fn dataset_loss<M: ClickPredictor + ?Sized>(
    model: &M,
    store: &ParameterStore,
    data: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut total = 0.0;
    let mut weight = 0usize;
    for batch in batch_iterator(data, batch_size, false, 0)? {
        let w = model.loss_weight(&batch);
        if w == 0 {
            continue;
        }
        tape.clear();
        let loss = model.compute_loss(store, &mut tape, &batch)?;
        total += tape.value(loss) * w as f64;
        weight += w;
    }
    if weight == 0 {
        return Err(Error::usage("dataset has no observations"));
    }
    Ok(total / weight as f64)
}

/// Trains `model` in place, stopping once the validation loss fails to
/// improve for `patience` epochs, then restores the best parameters.
///
/// A non-finite loss or gradient aborts training with
/// [`Error::Diverged`], which carries the history up to that point.
pub fn train<M: ClickPredictor + ?Sized>(
    model: &M,
    store: &mut ParameterStore,
    train_data: &Dataset,
    val_data: &Dataset,
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::usage("training and validation data must be non-empty"));
    }
    let mut history = History::default();
    let mut state = OptimizerState::new(store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tape = Tape::new();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0;
    let diverged = |history: &History, message: String| Error::Diverged {
        message,
        history: Box::new(history.clone()),
    };

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        let mut weight = 0usize;
        for batch in batch_iterator_with(train_data, config.batch_size, Some(&mut rng))? {
            let w = model.loss_weight(&batch);
            if w == 0 {
                continue;
            }
            tape.clear();
            let loss = model.compute_loss(store, &mut tape, &batch)?;
            let value = tape.value(loss);
            if !value.is_finite() {
                return Err(diverged(&history, format!("training loss {value} in epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            match adamw_step(store, &grads, &mut state, config) {
                Ok(()) => {}
                Err(Error::Numerical(m)) => return Err(diverged(&history, m)),
                Err(e) => return Err(e),
            }
            total += value * w as f64;
            weight += w;
        }
        if weight == 0 {
            return Err(Error::usage("training data has no observations"));
        }
        let val_loss = dataset_loss(model, store, val_data, config.batch_size)?;
        let seconds = if config.record_wall_time {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / weight as f64,
            val_loss,
            seconds,
        });
        if !val_loss.is_finite() {
            return Err(diverged(&history, format!("validation loss {val_loss} in epoch {epoch}")));
        }
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, store.snapshot()));
            history.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    if let Some((_, snapshot)) = best {
        store.restore(&snapshot)?;
    }
    Ok(history)
}

/// Streams `data` through `metrics` using the model's predictions.
pub fn evaluate<M: ClickPredictor + ?Sized>(
    model: &M,
    store: &ParameterStore,
    data: &Dataset,
    mut metrics: MetricSet,
    batch_size: usize,
) -> Result<MetricReport> {
    let ranking = metrics.needs_ranking_inputs();
    for batch in batch_iterator(data, batch_size, false, 0)? {
        let log_probs = model.predict_clicks(store, &batch)?;
        let cond = model.predict_conditional_clicks(store, &batch)?;
        let scores = if ranking {
            Some(model.predict_relevance(store, &batch)?)
        } else {
            None
        };
        metrics.update(&MetricInputs {
            log_probs: Some(&log_probs),
            cond_log_probs: Some(&cond),
            scores: scores.as_ref(),
            clicks: &batch.clicks,
            labels: batch.labels.as_ref(),
            mask: &batch.mask,
        })?;
    }
    metrics.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamId;
    use crate::data::{Schema, SessionRecord};
    use crate::metrics::MetricKind;
    use crate::models::{ClickModel, ModelKind, ProviderConfig};
    use crate::logspace::sigmoid;

    fn single_param_grads(g: f64) -> Gradients {
        let mut tape = Tape::new();
        let x = tape.parameter(ParamId(0), 0.0);
        let y = tape.scale(x, g);
        tape.backward(y).unwrap()
    }

    fn one_param_store(value: f64) -> ParameterStore {
        let mut store = ParameterStore::new();
        store.add_scalar("p", value).unwrap();
        store
    }

    #[test]
    fn adamw_examples() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut store = one_param_store(0.7);
        let mut state = OptimizerState::new(&store);
        adamw_step(&mut store, &single_param_grads(0.0), &mut state, &cfg).unwrap();
        assert_eq!(store.value(ParamId(0)), 0.7);

        let mut store = one_param_store(0.0);
        let mut state = OptimizerState::new(&store);
        adamw_step(&mut store, &single_param_grads(1.0), &mut state, &cfg).unwrap();
        assert!((store.value(ParamId(0)) + 0.003 / (1.0 + 1e-8)).abs() < 1e-15);

        let cfg = TrainConfig::default();
        let mut store = one_param_store(1.0);
        let mut state = OptimizerState::new(&store);
        adamw_step(&mut store, &single_param_grads(0.0), &mut state, &cfg).unwrap();
        assert!((store.value(ParamId(0)) - (1.0 - 3e-7)).abs() < 1e-15);
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn adam_three_step_trace() {
        // Hand-evaluated with lr 0.1 from p = 0.5 and gradients 1, -2, 0.5.
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let expected = [0.400000001, 0.43661035347207483, 0.45027941967382146];
        let mut store = one_param_store(0.5);
        let mut state = OptimizerState::new(&store);
        for (g, want) in [1.0, -2.0, 0.5].into_iter().zip(expected) {
            adamw_step(&mut store, &single_param_grads(g), &mut state, &cfg).unwrap();
            assert!((store.value(ParamId(0)) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn frozen_and_nan() {
        let mut store = ParameterStore::new();
        let h = store.add_table("fixed", 1, 2.0).unwrap();
        store.freeze(h);
        let mut state = OptimizerState::new(&store);
        adamw_step(&mut store, &single_param_grads(1.0), &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(store.value(ParamId(0)), 2.0);
        let err = adamw_step(&mut store, &single_param_grads(f64::NAN), &mut state, &TrainConfig::default());
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { patience: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    fn sessions(n: usize, k: usize, docs: u64, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sessions = (0..n)
            .map(|s| {
                let ids: Vec<u64> = (0..k).map(|_| rng.gen_range(0..docs)).collect();
                let clicks = (0..k).map(|r| rng.gen_bool(0.5 / (r + 1) as f64)).collect();
                SessionRecord::new(s as u64, ids, clicks)
            })
            .collect();
        Dataset::new(Schema::default(), sessions)
    }

    fn build(kind: ModelKind, store: &mut ParameterStore, k: usize, docs: u64) -> ClickModel {
        ClickModel::builder(kind, k)
            .attraction(ProviderConfig::embedding(docs))
            .satisfaction(ProviderConfig::embedding(docs))
            .build(store)
            .unwrap()
    }

    #[test]
    fn gctr_recovers_the_click_rate() {
        // Exactly one click in ten slots.
        let sessions = (0..400)
            .map(|s| SessionRecord::new(s, vec![0; 5], (0..5).map(|r| (s * 5 + r) % 10 == 0).collect()))
            .collect();
        let data = Dataset::new(Schema::default(), sessions);
        let mut store = ParameterStore::new();
        let model = build(ModelKind::Gctr, &mut store, 5, 1);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 32,
            patience: 3,
            epochs: 60,
            ..TrainConfig::default()
        };
        train(&model, &mut store, &data, &data, &cfg).unwrap();
        let rho = sigmoid(store.value(model.ctr_param().unwrap()));
        assert!((rho - 0.1).abs() < 0.005, "{rho}");
    }

    #[test]
    fn early_stopping_runs_patience_extra_epochs() {
        // Validation clicks are the opposite of the training clicks, so the
        // validation loss worsens after the first epoch.
        let mk = |click: bool| {
            Dataset::new(
                Schema::default(),
                (0..20).map(|s| SessionRecord::new(s, vec![0, 0], vec![click, click])).collect(),
            )
        };
        let mut store = ParameterStore::new();
        let model = build(ModelKind::Gctr, &mut store, 2, 1);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let history = train(&model, &mut store, &mk(true), &mk(false), &cfg).unwrap();
        assert_eq!(history.epochs.len(), 2);
        assert_eq!(history.best_epoch, Some(1));
        assert!(history.epochs[1].val_loss > history.epochs[0].val_loss);
    }

    #[test]
    fn best_snapshot_is_restored() {
        let train_data = sessions(30, 4, 6, 1);
        let val = sessions(10, 4, 6, 2);
        let mut store = ParameterStore::new();
        let model = build(ModelKind::Pbm, &mut store, 4, 6);
        let cfg = TrainConfig {
            learning_rate: 0.3,
            batch_size: 4,
            patience: 2,
            epochs: 30,
            ..TrainConfig::default()
        };
        let history = train(&model, &mut store, &train_data, &val, &cfg).unwrap();
        let best = history.best_epoch.unwrap();
        let restored = dataset_loss(&model, &store, &val, cfg.batch_size).unwrap();
        assert_eq!(restored, history.epochs[best - 1].val_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let train_data = sessions(40, 5, 8, 3);
        let val = sessions(10, 5, 8, 4);
        let run = || {
            let mut store = ParameterStore::new();
            let model = build(ModelKind::Dbn, &mut store, 5, 8);
            let cfg = TrainConfig {
                batch_size: 7,
                epochs: 4,
                seed: 11,
                record_wall_time: false,
                ..TrainConfig::default()
            };
            let h = train(&model, &mut store, &train_data, &val, &cfg).unwrap();
            let mut dump = Vec::new();
            store.write_dump(&mut dump).unwrap();
            let mut csv = Vec::new();
            h.write_csv(&mut csv).unwrap();
            (dump, csv)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_for_every_kind() {
        let data = sessions(10, 5, 6, 5);
        for kind in ModelKind::ALL {
            let mut store = ParameterStore::new();
            let model = build(kind, &mut store, 5, 6);
            let cfg = TrainConfig {
                epochs: 5,
                patience: 5,
                record_wall_time: false,
                ..TrainConfig::default()
            };
            let h = train(&model, &mut store, &data, &data, &cfg).unwrap();
            assert_eq!(h.epochs.len(), 5, "{kind}");
            for w in h.epochs.windows(2) {
                assert!(w[1].train_loss < w[0].train_loss, "{kind}: {:?}", h.epochs);
            }
        }
    }

    #[test]
    fn evaluate_reports_click_metrics() {
        let data = sessions(20, 3, 4, 6);
        let mut store = ParameterStore::new();
        let model = ClickModel::builder(ModelKind::Gctr, 3).init_prob(0.5).build(&mut store).unwrap();
        let report = evaluate(&model, &store, &data, MetricSet::click_metrics(), 8).unwrap();
        assert!((report.global(MetricKind::Perplexity).unwrap() - 2.0).abs() < 1e-15);
        assert!((report.global(MetricKind::ConditionalPerplexity).unwrap() - 2.0).abs() < 1e-15);
        let before = store.snapshot();
        evaluate(&model, &store, &data, MetricSet::click_metrics(), 8).unwrap();
        assert_eq!(before, store.snapshot());
    }

    #[test]
    fn history_csv_layout() {
        let h = History {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                seconds: 0.0,
            }],
            best_epoch: Some(1),
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,val_loss,seconds\n1,5.0000000000000000e-1,2.5000000000000000e-1,0.000000\n"
        );
    }
}
