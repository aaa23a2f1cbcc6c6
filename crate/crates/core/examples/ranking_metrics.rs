// Scores a handful of hand-made rankings with the click and ranking
// metrics, accumulating them in two shards and merging.

use clickgrad::data::Grid;
use clickgrad::metrics::{MetricInputs, MetricKind, MetricSet};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let kinds = [
        MetricKind::LogLikelihood,
        MetricKind::Perplexity,
        MetricKind::Dcg(3),
        MetricKind::Mrr(3),
    ];
    let clicks = Grid::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    let log_probs = Grid::from_vec(2, 3, [0.6, 0.3, 0.1, 0.4, 0.2, 0.3].map(f64::ln).to_vec());
    let scores = Grid::from_vec(2, 3, vec![2.0, 1.0, 0.5, 0.1, 0.4, 0.9]);
    let labels = Grid::from_vec(2, 3, vec![3, 1, 0, 0, 0, 2]);
    let mask = Grid::filled(2, 3, true);
    let inputs = MetricInputs {
        log_probs: Some(&log_probs),
        cond_log_probs: Some(&log_probs),
        scores: Some(&scores),
        clicks: &clicks,
        labels: Some(&labels),
        mask: &mask,
    };

    let mut left = MetricSet::new(&kinds);
    let mut right = MetricSet::new(&kinds);
    left.update(&inputs)?;
    right.update(&inputs)?;
    left.merge(&right)?;
    let report = left.report()?;
    for row in &report.rows {
        let rank = row.rank.map_or("all".to_string(), |r| r.to_string());
        println!("{:<6} rank {rank:<3} {:.4}", row.metric.to_string(), row.value);
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
