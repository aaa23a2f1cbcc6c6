// Draws synthetic sessions from a dynamic Bayesian network and compares
// the observed click-through rate per rank with the model's prediction.

use clickgrad::data::{Schema, SessionBatch, SessionRecord};
use clickgrad::models::{ClickModel, ClickPredictor, ModelKind, ProviderConfig};
use clickgrad::params::ParameterStore;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let positions = 5;
    let mut store = ParameterStore::new();
    let model = ClickModel::builder(ModelKind::Dbn, positions)
        .attraction(ProviderConfig::embedding(positions as u64))
        .satisfaction(ProviderConfig::embedding(positions as u64))
        .init_prob(0.4)
        .build(&mut store)?;

    let ranking: Vec<u64> = (0..positions as u64).collect();
    let sessions: Vec<SessionRecord> = (0..20_000)
        .map(|s| SessionRecord::new(s, ranking.clone(), vec![false; positions]))
        .collect();
    let batch = SessionBatch::from_sessions(Schema::default(), sessions.iter());
    let drawn = model.sample(&store, &batch, 42)?;
    let predicted = model.predict_clicks(&store, &batch)?;

    println!("rank  simulated  predicted");
    for k in 0..positions {
        let rate = (0..batch.batch_size()).filter(|&i| drawn.clicks[(i, k)] > 0.5).count() as f64
            / batch.batch_size() as f64;
        println!("{:>4}  {rate:>9.4}  {:>9.4}", k + 1, predicted[(0, k)].exp());
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
