// Fits a position-based model twice, once with expectation maximization
// and once by gradient descent on the marginal likelihood, and shows that
// both land on the same fit.

use clickgrad::cli::compare_em;
use clickgrad::config::RunConfig;
use clickgrad::data::{Dataset, Schema, SessionRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let docs = 30u64;
    let gamma: Vec<f64> = (0..docs).map(|_| rng.gen_range(0.05..0.6)).collect();
    let sessions = (0..600)
        .map(|s| {
            let ids: Vec<u64> = (0..6).map(|_| rng.gen_range(0..docs)).collect();
            let clicks = ids
                .iter()
                .enumerate()
                .map(|(k, &d)| rng.gen_bool(1.0 / (k + 1) as f64) && rng.gen_bool(gamma[d as usize]))
                .collect();
            SessionRecord::new(s, ids, clicks)
        })
        .collect();
    let data = Dataset::new(Schema::default(), sessions);

    let config = RunConfig::parse(
        "model = pbm\npositions = 6\nitems = 30\nlearning_rate = 0.02\nweight_decay = 0\n\
         batch_size = 64\npatience = 10\nepochs = 300\nem_tol = 1e-12",
    )?;
    let cmp = compare_em(&config, &data)?;
    println!("EM:       {:.6} nats/observation after {} iterations", cmp.em_log_likelihood, cmp.em_iterations);
    println!("gradient: {:.6} nats/observation after {} epochs", cmp.gradient_log_likelihood, cmp.gradient_epochs);
    println!("mean |click probability difference| = {:.2e}", cmp.mean_click_prob_difference);
    println!("EM likelihood never decreased: {}", cmp.em_trace_is_monotone());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
