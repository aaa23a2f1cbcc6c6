// Trains a two-member mixture on traffic where half the users scan by
// position and half click on attractiveness alone.

use clickgrad::data::{split, Dataset, Schema, SessionRecord};
use clickgrad::metrics::{MetricKind, MetricSet};
use clickgrad::mixture::MixtureModel;
use clickgrad::models::{ClickModel, ModelKind, ProviderConfig};
use clickgrad::params::ParameterStore;
use clickgrad::train::{evaluate, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let (positions, docs) = (6usize, 30u64);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gamma: Vec<f64> = (0..docs).map(|_| rng.gen_range(0.05..0.6)).collect();
    let sessions = (0..6000)
        .map(|s| {
            let scanner = rng.gen_bool(0.5);
            let ids: Vec<u64> = (0..positions).map(|_| rng.gen_range(0..docs)).collect();
            let clicks = ids
                .iter()
                .enumerate()
                .map(|(k, &d)| {
                    let exam = if scanner { 1.0 / (k + 1) as f64 } else { 1.0 };
                    rng.gen_bool(exam * gamma[d as usize])
                })
                .collect();
            SessionRecord::new(s, ids, clicks)
        })
        .collect();
    let data = Dataset::new(Schema::default(), sessions);
    let (train_set, val, test) = split(&data, (0.8, 0.1, 0.1), 3)?;

    let mut store = ParameterStore::new();
    let members = vec![
        ClickModel::builder(ModelKind::Pbm, positions)
            .attraction(ProviderConfig::embedding(docs))
            .prefix("pbm.")
            .build(&mut store)?,
        ClickModel::builder(ModelKind::Dctr, positions)
            .attraction(ProviderConfig::embedding(docs))
            .prefix("dctr.")
            .build(&mut store)?,
    ];
    let mixture = MixtureModel::new(&mut store, members, 1.0)?;
    let cfg = TrainConfig {
        learning_rate: 0.02,
        batch_size: 128,
        epochs: 40,
        patience: 2,
        ..TrainConfig::default()
    };
    train(&mixture, &mut store, &train_set, &val, &cfg)?;

    let priors: Vec<String> = mixture.log_priors(&store).iter().map(|p| format!("{:.3}", p.exp())).collect();
    println!("member weights (pbm, dctr): {}", priors.join(", "));
    let report = evaluate(&mixture, &store, &test, MetricSet::new(&[MetricKind::ConditionalPerplexity]), 512)?;
    println!("test conditional perplexity {:.4}", report.global(MetricKind::ConditionalPerplexity).unwrap_or(f64::NAN));
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
