//! Streaming, mask-aware click-prediction and ranking metrics.
//!
//! Accumulators keep running sums globally and per rank, so results do not
//! depend on how the data was split into batches. Perplexities are reported
//! globally (one exponentiation of the global mean) and per rank; the per-rank
//! values are never averaged into a scalar.

use std::f64::consts::LN_2;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::data::Grid;
use crate::error::{Error, Result};
use crate::logspace::log1mexp_unchecked;

/// Compensated (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Sum {
    total: f64,
    carry: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.total + x;
        if !t.is_finite() {
            self.total = t;
            return;
        }
        if self.total.abs() >= x.abs() {
            self.carry += (self.total - t) + x;
        } else {
            self.carry += (x - t) + self.total;
        }
        self.total = t;
    }

    fn merge(&mut self, other: &Sum) {
        self.add(other.total);
        self.add(other.carry);
    }

    fn value(&self) -> f64 {
        self.total + self.carry
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricKind {
    /// Mean conditional log-likelihood (natural log).
    LogLikelihood,
    /// Perplexity of unconditional predictions.
    Perplexity,
    /// Perplexity of predictions conditioned on earlier clicks.
    ConditionalPerplexity,
    Dcg(usize),
    Mrr(usize),
}

impl MetricKind {
    pub fn is_ranking(self) -> bool {
        matches!(self, MetricKind::Dcg(_) | MetricKind::Mrr(_))
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKind::LogLikelihood => f.write_str("ll"),
            MetricKind::Perplexity => f.write_str("ppl"),
            MetricKind::ConditionalPerplexity => f.write_str("cond_ppl"),
            MetricKind::Dcg(k) => write!(f, "dcg@{k}"),
            MetricKind::Mrr(k) => write!(f, "mrr@{k}"),
        }
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let cutoff = |rest: &str| {
            rest.parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .ok_or_else(|| Error::config(format!("bad metric cutoff in `{s}`")))
        };
        match s {
            "ll" => Ok(MetricKind::LogLikelihood),
            "ppl" => Ok(MetricKind::Perplexity),
            "cond_ppl" => Ok(MetricKind::ConditionalPerplexity),
            _ => {
                if let Some(rest) = s.strip_prefix("dcg@") {
                    Ok(MetricKind::Dcg(cutoff(rest)?))
                } else if let Some(rest) = s.strip_prefix("mrr@") {
                    Ok(MetricKind::Mrr(cutoff(rest)?))
                } else {
                    Err(Error::config(format!("unknown metric `{s}`")))
                }
            }
        }
    }
}

/// Everything a metric may read from one batch. Each metric picks the
/// fields it needs.
#[derive(Debug, Clone, Copy)]
pub struct MetricInputs<'a> {
    pub log_probs: Option<&'a Grid<f64>>,
    pub cond_log_probs: Option<&'a Grid<f64>>,
    pub scores: Option<&'a Grid<f64>>,
    pub clicks: &'a Grid<f64>,
    pub labels: Option<&'a Grid<i64>>,
    pub mask: &'a Grid<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricValue {
    pub global: f64,
    /// Value per 1-based rank (index 0 is rank 1); `None` for ranks without
    /// observations. Empty for ranking metrics.
    pub per_rank: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricAccumulator {
    kind: MetricKind,
    sum: Sum,
    count: usize,
    rank_sums: Vec<Sum>,
    rank_counts: Vec<usize>,
}

/// `c log p + (1 - c) log(1 - p)` for one slot.
pub fn click_log_likelihood(log_p: f64, click: f64) -> Result<f64> {
    if log_p.is_nan() || log_p > 0.0 {
        return Err(Error::usage(format!("log click probability {log_p} is not <= 0")));
    }
    Ok(if click > 0.5 {
        log_p
    } else {
        log1mexp_unchecked(log_p)
    })
}

fn perplexity_of(mean_ln: f64) -> f64 {
    2f64.powf(-mean_ln / LN_2)
}

impl MetricAccumulator {
    pub fn new(kind: MetricKind) -> Self {
        MetricAccumulator {
            kind,
            sum: Sum::default(),
            count: 0,
            rank_sums: Vec::new(),
            rank_counts: Vec::new(),
        }
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    pub fn count(&self) -> usize {
        self.count
    }

    fn add_at(&mut self, rank_index: usize, x: f64) {
        if self.rank_sums.len() <= rank_index {
            self.rank_sums.resize(rank_index + 1, Sum::default());
            self.rank_counts.resize(rank_index + 1, 0);
        }
        self.sum.add(x);
        self.count += 1;
        self.rank_sums[rank_index].add(x);
        self.rank_counts[rank_index] += 1;
    }

    pub fn update(&mut self, inputs: &MetricInputs) -> Result<()> {
        match self.kind {
            MetricKind::LogLikelihood | MetricKind::ConditionalPerplexity => {
                let lp = inputs
                    .cond_log_probs
                    .ok_or_else(|| Error::usage(format!("{} needs conditional predictions", self.kind)))?;
                self.update_click(lp, inputs)
            }
            MetricKind::Perplexity => {
                let lp = inputs
                    .log_probs
                    .ok_or_else(|| Error::usage("ppl needs unconditional predictions"))?;
                self.update_click(lp, inputs)
            }
            MetricKind::Dcg(k) | MetricKind::Mrr(k) => {
                let scores = inputs
                    .scores
                    .ok_or_else(|| Error::usage(format!("{} needs relevance scores", self.kind)))?;
                let labels = inputs
                    .labels
                    .ok_or_else(|| Error::usage(format!("{} needs relevance labels", self.kind)))?;
                for i in 0..inputs.mask.rows() {
                    let idx: Vec<usize> = (0..inputs.mask.cols()).filter(|&j| inputs.mask[(i, j)]).collect();
                    if idx.is_empty() {
                        continue;
                    }
                    let s: Vec<f64> = idx.iter().map(|&j| scores[(i, j)]).collect();
                    let l: Vec<i64> = idx.iter().map(|&j| labels[(i, j)]).collect();
                    let v = match self.kind {
                        MetricKind::Dcg(_) => dcg_at_k(&s, &l, k)?,
                        _ => mrr_at_k(&s, &l, k)?,
                    };
                    self.sum.add(v);
                    self.count += 1;
                }
                Ok(())
            }
        }
    }

    fn update_click(&mut self, log_probs: &Grid<f64>, inputs: &MetricInputs) -> Result<()> {
        for i in 0..inputs.mask.rows() {
            for j in 0..inputs.mask.cols() {
                if inputs.mask[(i, j)] {
                    let ll = click_log_likelihood(log_probs[(i, j)], inputs.clicks[(i, j)])?;
                    self.add_at(j, ll);
                }
            }
        }
        Ok(())
    }

    /// Combines the sums of another accumulator of the same kind.
    pub fn merge(&mut self, other: &MetricAccumulator) -> Result<()> {
        if self.kind != other.kind {
            return Err(Error::usage(format!("cannot merge {} into {}", other.kind, self.kind)));
        }
        self.sum.merge(&other.sum);
        self.count += other.count;
        if self.rank_sums.len() < other.rank_sums.len() {
            self.rank_sums.resize(other.rank_sums.len(), Sum::default());
            self.rank_counts.resize(other.rank_counts.len(), 0);
        }
        for (r, s) in other.rank_sums.iter().enumerate() {
            self.rank_sums[r].merge(s);
            self.rank_counts[r] += other.rank_counts[r];
        }
        Ok(())
    }

    pub fn compute(&self) -> Result<MetricValue> {
        if self.count == 0 {
            return Err(Error::usage(format!("{}: no observations", self.kind)));
        }
        let finish = |mean: f64| match self.kind {
            MetricKind::Perplexity | MetricKind::ConditionalPerplexity => perplexity_of(mean),
            _ => mean,
        };
        let per_rank = self
            .rank_sums
            .iter()
            .zip(&self.rank_counts)
            .map(|(s, &n)| (n > 0).then(|| finish(s.value() / n as f64)))
            .collect();
        Ok(MetricValue {
            global: finish(self.sum.value() / self.count as f64),
            per_rank,
        })
    }
}

/// A set of metrics updated together from the same inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSet {
    metrics: Vec<MetricAccumulator>,
}

impl MetricSet {
    pub fn new(kinds: &[MetricKind]) -> Self {
        MetricSet {
            metrics: kinds.iter().map(|&k| MetricAccumulator::new(k)).collect(),
        }
    }

    /// Log-likelihood and both perplexities.
    pub fn click_metrics() -> Self {
        MetricSet::new(&[
            MetricKind::LogLikelihood,
            MetricKind::Perplexity,
            MetricKind::ConditionalPerplexity,
        ])
    }

    pub fn kinds(&self) -> Vec<MetricKind> {
        self.metrics.iter().map(|m| m.kind).collect()
    }

    pub fn needs_ranking_inputs(&self) -> bool {
        self.metrics.iter().any(|m| m.kind.is_ranking())
    }

    pub fn update(&mut self, inputs: &MetricInputs) -> Result<()> {
        self.metrics.iter_mut().try_for_each(|m| m.update(inputs))
    }

    pub fn merge(&mut self, other: &MetricSet) -> Result<()> {
        if self.kinds() != other.kinds() {
            return Err(Error::usage("metric sets differ"));
        }
        for (a, b) in self.metrics.iter_mut().zip(&other.metrics) {
            a.merge(b)?;
        }
        Ok(())
    }

    pub fn get(&self, kind: MetricKind) -> Option<&MetricAccumulator> {
        self.metrics.iter().find(|m| m.kind == kind)
    }

    pub fn report(&self) -> Result<MetricReport> {
        let mut rows = Vec::new();
        for m in &self.metrics {
            let v = m.compute()?;
            rows.push(MetricRow {
                metric: m.kind,
                rank: None,
                value: v.global,
            });
            for (r, value) in v.per_rank.iter().enumerate() {
                if let Some(value) = value {
                    rows.push(MetricRow {
                        metric: m.kind,
                        rank: Some(r + 1),
                        value: *value,
                    });
                }
            }
        }
        Ok(MetricReport { rows })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: MetricKind,
    /// `None` for the global value.
    pub rank: Option<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn global(&self, kind: MetricKind) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == kind && r.rank.is_none())
            .map(|r| r.value)
    }

    pub fn at_rank(&self, kind: MetricKind, rank: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == kind && r.rank == Some(rank))
            .map(|r| r.value)
    }

    /// `metric,rank,value` with `rank` either `all` or a 1-based rank.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "metric,rank,value")?;
        for r in &self.rows {
            match r.rank {
                Some(k) => writeln!(out, "{},{},{:.16e}", r.metric, k, r.value)?,
                None => writeln!(out, "{},all,{:.16e}", r.metric, r.value)?,
            }
        }
        Ok(())
    }
}

/// Positions sorted by descending score; ties keep display order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

fn check_ranking_input(scores: &[f64], labels: &[i64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::usage("scores and labels differ in length"));
    }
    if labels.iter().any(|&l| l < 0) {
        return Err(Error::usage("relevance labels must be non-negative"));
    }
    Ok(())
}

/// `sum_{i <= k} (2^label_i - 1) / log2(i + 1)` over the score ordering.
pub fn dcg_at_k(scores: &[f64], labels: &[i64], k: usize) -> Result<f64> {
    check_ranking_input(scores, labels)?;
    Ok(ranking(scores)
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, j)| (2f64.powi(labels[j] as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum())
}

/// Reciprocal rank of the first document with a positive label within the
/// top `k`, or 0.
pub fn mrr_at_k(scores: &[f64], labels: &[i64], k: usize) -> Result<f64> {
    check_ranking_input(scores, labels)?;
    Ok(ranking(scores)
        .into_iter()
        .take(k)
        .position(|j| labels[j] > 0)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64))
}
