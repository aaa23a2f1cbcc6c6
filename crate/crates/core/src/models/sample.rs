use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClickModel, ModelKind};
use crate::data::{Dataset, Grid, SessionBatch, SessionRecord};
use crate::error::Result;
use crate::logspace::sigmoid;
use crate::params::ParameterStore;

/// Clicks and latent variables drawn by a model's generative process.
/// Masked slots hold zeros and `false`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSessions {
    pub clicks: Grid<f64>,
    pub examined: Grid<bool>,
    pub attractive: Grid<bool>,
    pub satisfied: Grid<bool>,
}

impl SampledSessions {
    pub(crate) fn empty(batch: &SessionBatch) -> Self {
        let (n, w) = (batch.batch_size(), batch.width());
        SampledSessions {
            clicks: Grid::filled(n, w, 0.0),
            examined: Grid::filled(n, w, false),
            attractive: Grid::filled(n, w, false),
            satisfied: Grid::filled(n, w, false),
        }
    }

    /// Copies row `src` of `other` into row `dst` of `self`.
    pub(crate) fn copy_row(&mut self, dst: usize, other: &SampledSessions, src: usize) {
        for k in 0..self.clicks.cols().min(other.clicks.cols()) {
            self.clicks[(dst, k)] = other.clicks[(src, k)];
            self.examined[(dst, k)] = other.examined[(src, k)];
            self.attractive[(dst, k)] = other.attractive[(src, k)];
            self.satisfied[(dst, k)] = other.satisfied[(src, k)];
        }
    }

    /// Replaces the clicks of the batch's sessions with the sampled ones.
    pub fn to_dataset(&self, batch: &SessionBatch, template: &Dataset) -> Dataset {
        let sessions = (0..batch.batch_size())
            .map(|i| {
                let len = batch.session_len(i);
                let mut rec = SessionRecord::new(
                    batch.session_ids[i],
                    batch.query_doc_ids.row(i)[..len].to_vec(),
                    self.clicks.row(i)[..len].iter().map(|&c| c > 0.5).collect(),
                );
                rec.features = batch.slot_features(i, 0).map(|_| {
                    (0..len)
                        .flat_map(|k| batch.slot_features(i, k).unwrap().to_vec())
                        .collect()
                });
                rec.labels = batch.labels.as_ref().map(|l| l.row(i)[..len].to_vec());
                rec
            })
            .collect();
        Dataset::new(template.schema, sessions)
    }
}

fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> bool {
    rng.gen::<f64>() < p
}

pub(super) fn sample(
    model: &ClickModel,
    store: &ParameterStore,
    batch: &SessionBatch,
    seed: u64,
) -> Result<SampledSessions> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SampledSessions::empty(batch);
    let prob = |id| sigmoid(store.value(id));
    for i in 0..batch.batch_size() {
        let len = batch.session_len(i);
        let attr = match &model.attraction {
            Some(p) => (0..len)
                .map(|k| p.logit_value(store, batch, i, k).map(sigmoid))
                .collect::<Result<Vec<_>>>()?,
            None => vec![1.0; len],
        };
        let sat = match &model.satisfaction {
            Some(p) => (0..len)
                .map(|k| p.logit_value(store, batch, i, k).map(sigmoid))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        // Whether the user reaches the current rank (cascade family).
        let mut reached = true;
        let mut last_click = 0;
        for k in 0..len {
            let rank = k + 1;
            let examined = match model.kind {
                ModelKind::Gctr => bernoulli(&mut rng, prob(model.rho.unwrap())),
                ModelKind::Rctr | ModelKind::Pbm => {
                    bernoulli(&mut rng, prob(model.examination.unwrap().param(rank)))
                }
                ModelKind::Ubm => bernoulli(
                    &mut rng,
                    prob(model.examination.unwrap().param_after(rank, last_click)),
                ),
                ModelKind::Dctr => true,
                _ => reached,
            };
            let attractive = bernoulli(&mut rng, attr[k]);
            let click = examined && attractive;
            let mut satisfied = false;
            match model.kind {
                ModelKind::Cm => reached = examined && !click,
                ModelKind::Dcm => {
                    if click {
                        let lam = prob(model.continuation.unwrap().param(rank));
                        reached = bernoulli(&mut rng, lam);
                    }
                }
                ModelKind::Ccm => {
                    if examined {
                        let [t1, t2, t3] = model.tau.unwrap();
                        let stay = if click {
                            satisfied = bernoulli(&mut rng, attr[k]);
                            if satisfied { prob(t3) } else { prob(t2) }
                        } else {
                            prob(t1)
                        };
                        reached = bernoulli(&mut rng, stay);
                    }
                }
                ModelKind::Dbn | ModelKind::Sdbn => {
                    if examined {
                        if click {
                            satisfied = bernoulli(&mut rng, sat[k]);
                        }
                        reached = !satisfied
                            && model.lambda.is_none_or(|l| bernoulli(&mut rng, prob(l)));
                    }
                }
                _ => {}
            }
            if click {
                last_click = rank;
            }
            out.clicks[(i, k)] = if click { 1.0 } else { 0.0 };
            out.examined[(i, k)] = examined;
            out.attractive[(i, k)] = attractive;
            out.satisfied[(i, k)] = satisfied;
        }
    }
    Ok(out)
}
