//! Expectation-maximization for the position-based model.
//!
//! This is a full-batch reference optimizer in probability space. It exists
//! to check gradient training against an independent method, and to expose
//! the expected complete-data log-likelihood gradient that the gradient of
//! the marginal log-likelihood must equal.

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Lower and upper bounds EM keeps every probability within.
pub const EM_CLAMP: f64 = 1e-9;

/// One displayed document: 1-based rank, document index, click.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub rank: usize,
    pub doc: usize,
    pub click: bool,
}

/// Flattens every slot of a dataset into observations, using the
/// query-document id as the document index.
pub fn observations(dataset: &Dataset) -> Result<Vec<Observation>> {
    let mut out = Vec::with_capacity(dataset.slot_count());
    for s in &dataset.sessions {
        for (k, (&id, &click)) in s.query_doc_ids.iter().zip(&s.clicks).enumerate() {
            let doc = usize::try_from(id).map_err(|_| Error::InvalidData(format!("document id {id} too large")))?;
            out.push(Observation { rank: k + 1, doc, click });
        }
    }
    Ok(out)
}

/// Examination per rank (index 0 is rank 1) and attractiveness per document.
#[derive(Debug, Clone, PartialEq)]
pub struct PbmParams {
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl PbmParams {
    /// Every probability set to `p`.
    pub fn constant(positions: usize, docs: usize, p: f64) -> Self {
        PbmParams {
            theta: vec![p; positions],
            gamma: vec![p; docs],
        }
    }

    fn check(&self, obs: &[Observation]) -> Result<()> {
        for o in obs {
            if o.rank == 0 || o.rank > self.theta.len() {
                return Err(Error::usage(format!("rank {} outside 1..={}", o.rank, self.theta.len())));
            }
            if o.doc >= self.gamma.len() {
                return Err(Error::usage(format!("document {} outside the parameter table", o.doc)));
            }
        }
        Ok(())
    }

    pub fn click_prob(&self, o: &Observation) -> f64 {
        self.theta[o.rank - 1] * self.gamma[o.doc]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    pub e_hat: Vec<f64>,
    pub a_hat: Vec<f64>,
}

pub fn e_step(params: &PbmParams, obs: &[Observation]) -> Result<Posteriors> {
    params.check(obs)?;
    let mut e_hat = Vec::with_capacity(obs.len());
    let mut a_hat = Vec::with_capacity(obs.len());
    for o in obs {
        if o.click {
            e_hat.push(1.0);
            a_hat.push(1.0);
            continue;
        }
        let t = params.theta[o.rank - 1];
        let g = params.gamma[o.doc];
        let denom = 1.0 - t * g;
        if denom <= 0.0 {
            return Err(Error::Numerical(format!(
                "degenerate posterior: unclicked observation at rank {} with theta * gamma = 1",
                o.rank
            )));
        }
        e_hat.push((1.0 - g) * t / denom);
        a_hat.push((1.0 - t) * g / denom);
    }
    Ok(Posteriors { e_hat, a_hat })
}

/// Closed-form maximization: per-rank and per-document posterior means.
/// Ranks and documents without observations keep their previous values.
pub fn m_step(previous: &PbmParams, post: &Posteriors, obs: &[Observation]) -> Result<PbmParams> {
    if post.e_hat.len() != obs.len() || post.a_hat.len() != obs.len() {
        return Err(Error::usage("posteriors are not aligned with the observations"));
    }
    previous.check(obs)?;
    let mut theta_sum = vec![0.0; previous.theta.len()];
    let mut theta_n = vec![0usize; previous.theta.len()];
    let mut gamma_sum = vec![0.0; previous.gamma.len()];
    let mut gamma_n = vec![0usize; previous.gamma.len()];
    for (j, o) in obs.iter().enumerate() {
        theta_sum[o.rank - 1] += post.e_hat[j];
        theta_n[o.rank - 1] += 1;
        gamma_sum[o.doc] += post.a_hat[j];
        gamma_n[o.doc] += 1;
    }
    let mean = |prev: &[f64], sum: &[f64], n: &[usize]| -> Vec<f64> {
        prev.iter()
            .zip(sum.iter().zip(n))
            .map(|(&p, (&s, &n))| if n == 0 { p } else { s / n as f64 })
            .collect()
    };
    Ok(PbmParams {
        theta: mean(&previous.theta, &theta_sum, &theta_n),
        gamma: mean(&previous.gamma, &gamma_sum, &gamma_n),
    })
}

/// Total marginal log-likelihood `sum c log(tg) + (1 - c) log(1 - tg)`.
pub fn marginal_log_likelihood(params: &PbmParams, obs: &[Observation]) -> Result<f64> {
    params.check(obs)?;
    Ok(obs
        .iter()
        .map(|o| {
            let p = params.click_prob(o);
            if o.click {
                p.ln()
            } else {
                (-p).ln_1p()
            }
        })
        .sum())
}

/// Gradient of the expected complete-data log-likelihood with respect to
/// every probability, taken at the parameters the posteriors were computed
/// from.
pub fn q_gradient(params: &PbmParams, obs: &[Observation]) -> Result<PbmParams> {
    let post = e_step(params, obs)?;
    let mut grad = PbmParams::constant(params.theta.len(), params.gamma.len(), 0.0);
    for (j, o) in obs.iter().enumerate() {
        let t = params.theta[o.rank - 1];
        let g = params.gamma[o.doc];
        let (e, a) = (post.e_hat[j], post.a_hat[j]);
        grad.theta[o.rank - 1] += e / t - (1.0 - e) / (1.0 - t);
        grad.gamma[o.doc] += a / g - (1.0 - a) / (1.0 - g);
    }
    Ok(grad)
}

/// Gradient of the marginal log-likelihood in the same coordinates.
pub fn marginal_gradient(params: &PbmParams, obs: &[Observation]) -> Result<PbmParams> {
    params.check(obs)?;
    let mut grad = PbmParams::constant(params.theta.len(), params.gamma.len(), 0.0);
    for o in obs {
        let t = params.theta[o.rank - 1];
        let g = params.gamma[o.doc];
        if o.click {
            grad.theta[o.rank - 1] += 1.0 / t;
            grad.gamma[o.doc] += 1.0 / g;
        } else {
            grad.theta[o.rank - 1] -= g / (1.0 - t * g);
            grad.gamma[o.doc] -= t / (1.0 - t * g);
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmRun {
    pub params: PbmParams,
    /// Marginal log-likelihood at the initial parameters followed by the
    /// value after every iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

fn clamp(params: &mut PbmParams) {
    for p in params.theta.iter_mut().chain(params.gamma.iter_mut()) {
        *p = p.clamp(EM_CLAMP, 1.0 - EM_CLAMP);
    }
}

/// Alternates E and M steps until the log-likelihood changes by less than
/// `tol` or `max_iters` iterations ran.
pub fn run_em(obs: &[Observation], init: &PbmParams, max_iters: usize, tol: f64) -> Result<EmRun> {
    for &p in init.theta.iter().chain(&init.gamma) {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::config(format!("initial probability {p} must be in (0, 1)")));
        }
    }
    let mut params = init.clone();
    clamp(&mut params);
    let mut trace = vec![marginal_log_likelihood(&params, obs)?];
    let mut iterations = 0;
    while iterations < max_iters {
        let post = e_step(&params, obs)?;
        params = m_step(&params, &post, obs)?;
        clamp(&mut params);
        iterations += 1;
        let ll = marginal_log_likelihood(&params, obs)?;
        let delta = ll - trace[trace.len() - 1];
        trace.push(ll);
        if delta.abs() < tol {
            break;
        }
    }
    Ok(EmRun { params, trace, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(rank: usize, doc: usize, click: bool) -> Observation {
        Observation { rank, doc, click }
    }

    #[test]
    fn posterior_examples() {
        let p = PbmParams {
            theta: vec![0.5, 1.0],
            gamma: vec![0.5],
        };
        let data = [obs(1, 0, true), obs(1, 0, false), obs(2, 0, false)];
        let post = e_step(&p, &data).unwrap();
        assert_eq!((post.e_hat[0], post.a_hat[0]), (1.0, 1.0));
        assert!((post.e_hat[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((post.a_hat[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((post.e_hat[2], post.a_hat[2]), (1.0, 0.0));

        let certain = PbmParams {
            theta: vec![1.0],
            gamma: vec![1.0],
        };
        assert!(matches!(e_step(&certain, &[obs(1, 0, false)]), Err(Error::Numerical(_))));
        assert!(e_step(&certain, &[obs(1, 0, true)]).is_ok());
    }

    #[test]
    fn maximization_examples() {
        let prev = PbmParams {
            theta: vec![0.9, 0.9, 0.7],
            gamma: vec![0.2, 0.3],
        };
        let data = [obs(1, 0, false), obs(1, 0, false), obs(2, 1, true), obs(2, 0, false)];
        let post = Posteriors {
            e_hat: vec![0.5, 0.5, 1.0, 1.0 / 3.0],
            a_hat: vec![0.1, 0.1, 1.0, 0.4],
        };
        let next = m_step(&prev, &post, &data).unwrap();
        assert_eq!(next.theta[0], 0.5);
        assert!((next.theta[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(next.theta[2], 0.7);
        assert_eq!(next.gamma[1], 1.0);
        assert!((next.gamma[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn all_clicks_reach_the_boundary() {
        let data: Vec<_> = (0..20).map(|j| obs(j % 3 + 1, j % 4, true)).collect();
        let run = run_em(&data, &PbmParams::constant(3, 4, 0.3), 200, 0.0).unwrap();
        for &p in run.params.theta.iter().chain(&run.params.gamma) {
            assert_eq!(p, 1.0 - EM_CLAMP);
        }
    }

    #[test]
    fn q_gradient_matches_closed_form() {
        let p = PbmParams {
            theta: vec![0.7, 0.4],
            gamma: vec![0.3, 0.55],
        };
        let data = [obs(1, 0, true), obs(2, 0, false), obs(1, 1, false), obs(2, 1, false)];
        let q = q_gradient(&p, &data).unwrap();
        let m = marginal_gradient(&p, &data).unwrap();
        for (a, b) in q.theta.iter().chain(&q.gamma).zip(m.theta.iter().chain(&m.gamma)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    fn dataset() -> impl Strategy<Value = (PbmParams, Vec<Observation>)> {
        (
            prop::collection::vec(0.05f64..0.95, 3),
            prop::collection::vec(0.05f64..0.95, 4),
            prop::collection::vec((1usize..=3, 0usize..4, any::<bool>()), 1..80),
        )
            .prop_map(|(theta, gamma, raw)| {
                let data = raw.into_iter().map(|(r, d, c)| obs(r, d, c)).collect();
                (PbmParams { theta, gamma }, data)
            })
    }

    proptest! {
        #[test]
        fn log_likelihood_never_decreases((init, data) in dataset()) {
            let run = run_em(&data, &init, 50, 0.0).unwrap();
            for w in run.trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-12 * w[0].abs().max(1.0), "{} then {}", w[0], w[1]);
            }
        }

        #[test]
        fn posteriors_are_probabilities((p, data) in dataset()) {
            let post = e_step(&p, &data).unwrap();
            for (j, o) in data.iter().enumerate() {
                prop_assert!((0.0..=1.0).contains(&post.e_hat[j]));
                prop_assert!((0.0..=1.0).contains(&post.a_hat[j]));
                if o.click {
                    prop_assert_eq!((post.e_hat[j], post.a_hat[j]), (1.0, 1.0));
                }
            }
        }
    }
}
