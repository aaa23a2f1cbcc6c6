// Checks tape gradients against central finite differences for every
// model kind on small random batches.

use clickgrad::gradcheck::{check_gradients, random_batch, randomize_parameters, DEFAULT_STEP};
use clickgrad::models::{ClickModel, ModelKind, ProviderConfig};
use clickgrad::params::ParameterStore;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    for (seed, kind) in ModelKind::ALL.into_iter().enumerate() {
        let mut store = ParameterStore::new();
        let model = ClickModel::builder(kind, 5)
            .attraction(ProviderConfig::embedding(8))
            .satisfaction(ProviderConfig::embedding(8))
            .build(&mut store)?;
        randomize_parameters(&mut store, 2.0, seed as u64);
        let batch = random_batch(4, 5, 8, 0, seed as u64);
        let report = check_gradients(&model, &mut store, &batch, DEFAULT_STEP)?;
        println!("{:<5} {:>3} parameters  max relative error {:.2e}", kind.name(), report.checked, report.max_relative_error);
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
