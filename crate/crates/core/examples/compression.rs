// Compares full, hashed and quotient-remainder attraction tables on the
// same data: how many rows each allocates and how well each fits.

use clickgrad::data::{split, Dataset, Schema, SessionRecord};
use clickgrad::metrics::{MetricKind, MetricSet};
use clickgrad::models::{ClickModel, ModelKind, ProviderConfig};
use clickgrad::params::{Compression, EmbeddingConfig, ParameterStore};
use clickgrad::train::{evaluate, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let (positions, items) = (5usize, 2000u64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gamma: Vec<f64> = (0..items).map(|_| rng.gen_range(0.05..0.6)).collect();
    let sessions = (0..8000)
        .map(|s| {
            let ids: Vec<u64> = (0..positions).map(|_| rng.gen_range(0..items)).collect();
            let clicks = ids
                .iter()
                .enumerate()
                .map(|(k, &d)| rng.gen_bool(gamma[d as usize] / (k + 1) as f64))
                .collect();
            SessionRecord::new(s, ids, clicks)
        })
        .collect();
    let data = Dataset::new(Schema::default(), sessions);
    let (train_set, val, test) = split(&data, (0.8, 0.1, 0.1), 5)?;

    let variants = [
        ("full", Compression::None),
        ("hashing 10x", Compression::Hashing { ratio: 10, seed: 0 }),
        ("quotient-remainder", Compression::QuotientRemainder { remainder_size: 45 }),
    ];
    let cfg = TrainConfig {
        learning_rate: 0.02,
        batch_size: 128,
        epochs: 20,
        patience: 2,
        ..TrainConfig::default()
    };
    for (name, compression) in variants {
        let mut store = ParameterStore::new();
        let model = ClickModel::builder(ModelKind::Pbm, positions)
            .attraction(ProviderConfig::Embedding(EmbeddingConfig::new(items).with_compression(compression)))
            .build(&mut store)?;
        train(&model, &mut store, &train_set, &val, &cfg)?;
        let ppl = evaluate(&model, &store, &test, MetricSet::new(&[MetricKind::Perplexity]), 512)?
            .global(MetricKind::Perplexity)
            .unwrap_or(f64::NAN);
        println!("{name:<19} {:>5} parameters  test perplexity {ppl:.4}", store.len());
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
