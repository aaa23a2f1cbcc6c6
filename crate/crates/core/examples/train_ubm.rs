// Simulates sessions from a user browsing model with known parameters,
// then fits a fresh model to them and reports held-out metrics.

use clickgrad::data::{split, Dataset, Schema, SessionBatch, SessionRecord};
use clickgrad::gradcheck::randomize_parameters;
use clickgrad::metrics::MetricSet;
use clickgrad::models::{ClickModel, ClickPredictor, ModelKind, ProviderConfig};
use clickgrad::params::ParameterStore;
use clickgrad::train::{evaluate, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POSITIONS: usize = 8;
const ITEMS: u64 = 40;

fn ubm(store: &mut ParameterStore) -> clickgrad::Result<ClickModel> {
    ClickModel::builder(ModelKind::Ubm, POSITIONS)
        .attraction(ProviderConfig::embedding(ITEMS))
        .build(store)
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let mut truth_store = ParameterStore::new();
    let truth = ubm(&mut truth_store)?;
    randomize_parameters(&mut truth_store, 2.0, 7);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let blank: Vec<SessionRecord> = (0..4000)
        .map(|s| {
            let ids = (0..POSITIONS).map(|_| rng.gen_range(0..ITEMS)).collect();
            SessionRecord::new(s, ids, vec![false; POSITIONS])
        })
        .collect();
    let batch = SessionBatch::from_sessions(Schema::default(), blank.iter());
    let template = Dataset::new(Schema::default(), Vec::new());
    let data = truth.sample(&truth_store, &batch, 7)?.to_dataset(&batch, &template);

    let (train_set, val, test) = split(&data, (0.8, 0.1, 0.1), 7)?;
    let mut store = ParameterStore::new();
    let model = ubm(&mut store)?;
    let cfg = TrainConfig {
        learning_rate: 0.02,
        batch_size: 128,
        epochs: 30,
        patience: 2,
        ..TrainConfig::default()
    };
    let history = train(&model, &mut store, &train_set, &val, &cfg)?;
    println!("trained {} epochs, best epoch {:?}", history.epochs.len(), history.best_epoch);

    let report = evaluate(&model, &store, &test, MetricSet::click_metrics(), 512)?;
    let reference = evaluate(&truth, &truth_store, &test, MetricSet::click_metrics(), 512)?;
    for (fit, best) in report.rows.iter().zip(&reference.rows).filter(|(r, _)| r.rank.is_none()) {
        println!("{:<9} fitted {:.4}  true parameters {:.4}", fit.metric.to_string(), fit.value, best.value);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
