//! Per-session log click probability programs.
//!
//! `eps` is the running log examination probability of the cascade family;
//! it starts at `log 1 = 0` on the first rank.

use super::{ClickModel, ModelKind};
use crate::autodiff::{NodeId, ParamId, Tape};
use crate::data::SessionBatch;
use crate::error::Result;
use crate::params::ParameterStore;

struct Ctx<'a> {
    store: &'a ParameterStore,
    tape: &'a mut Tape,
}

impl Ctx<'_> {
    fn log_prob(&mut self, id: ParamId) -> NodeId {
        let leaf = self.store.leaf(self.tape, id);
        self.tape.log_sigmoid(leaf)
    }

    fn add(&mut self, terms: &[NodeId]) -> NodeId {
        self.tape.add(terms)
    }
}

/// Log attraction and its complement for each slot.
fn attraction(
    model: &ClickModel,
    ctx: &mut Ctx,
    batch: &SessionBatch,
    i: usize,
    len: usize,
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    let provider = model
        .attraction
        .as_ref()
        .expect("builder guarantees an attraction provider");
    let mut attr = Vec::with_capacity(len);
    let mut comp = Vec::with_capacity(len);
    for k in 0..len {
        let x = provider.logit(ctx.store, ctx.tape, batch, i, k)?;
        attr.push(ctx.tape.log_sigmoid(x));
        comp.push(ctx.tape.log1m_sigmoid(x));
    }
    Ok((attr, comp))
}

/// Posterior log examination of the next rank after no click:
/// `log(1 - g) + eps - log(1 - g * e)`.
fn no_click_posterior(tape: &mut Tape, log_attr: NodeId, log_not_attr: NodeId, eps: NodeId) -> Result<NodeId> {
    let joint = tape.add2(log_attr, eps);
    let denom = tape.log1mexp(joint)?;
    let neg = tape.negate(denom);
    Ok(tape.add(&[log_not_attr, eps, neg]))
}

pub(super) fn session_log_probs(
    model: &ClickModel,
    store: &ParameterStore,
    tape: &mut Tape,
    batch: &SessionBatch,
    i: usize,
    conditional: bool,
) -> Result<Vec<NodeId>> {
    let len = batch.session_len(i);
    let mut ctx = Ctx { store, tape };
    let mut out = Vec::with_capacity(len);
    if len == 0 {
        return Ok(out);
    }
    match model.kind {
        ModelKind::Gctr => {
            let rho = model.rho.expect("gctr ctr");
            let lp = ctx.log_prob(rho);
            out.resize(len, lp);
        }
        ModelKind::Rctr => {
            let exam = model.examination.expect("rctr examination");
            for k in 0..len {
                out.push(ctx.log_prob(exam.param(k + 1)));
            }
        }
        ModelKind::Dctr => {
            out = attraction(model, &mut ctx, batch, i, len)?.0;
        }
        ModelKind::Pbm => {
            let exam = model.examination.expect("pbm examination");
            let (attr, _) = attraction(model, &mut ctx, batch, i, len)?;
            for (k, &a) in attr.iter().enumerate() {
                let e = ctx.log_prob(exam.param(k + 1));
                out.push(ctx.tape.add2(e, a));
            }
        }
        ModelKind::Cm => {
            let (attr, comp) = attraction(model, &mut ctx, batch, i, len)?;
            if conditional {
                let mut clicked = false;
                for (k, &a) in attr.iter().enumerate() {
                    out.push(if clicked {
                        ctx.tape.constant(model.min_log_prob)
                    } else {
                        a
                    });
                    clicked |= batch.clicked(i, k);
                }
            } else {
                let mut skipped: Vec<NodeId> = Vec::with_capacity(len);
                for (k, &a) in attr.iter().enumerate() {
                    skipped.push(a);
                    out.push(ctx.add(&skipped));
                    skipped[k] = comp[k];
                }
            }
        }
        ModelKind::Ubm => ubm(model, &mut ctx, batch, i, len, conditional, &mut out)?,
        ModelKind::Dcm => {
            let lam = model.continuation.expect("dcm continuation");
            let (attr, comp) = attraction(model, &mut ctx, batch, i, len)?;
            let mut eps = ctx.tape.constant(0.0);
            for k in 0..len {
                out.push(ctx.tape.add2(attr[k], eps));
                if k + 1 == len {
                    break;
                }
                let log_lam = ctx.log_prob(lam.param(k + 1));
                eps = if conditional {
                    if batch.clicked(i, k) {
                        log_lam
                    } else {
                        no_click_posterior(ctx.tape, attr[k], comp[k], eps)?
                    }
                } else {
                    let click_and_stay = ctx.tape.add2(attr[k], log_lam);
                    let step = ctx.tape.log_sum_exp(&[click_and_stay, comp[k]]);
                    ctx.tape.add2(eps, step)
                };
            }
        }
        ModelKind::Ccm => {
            let [t1, t2, t3] = model.tau.expect("ccm tau");
            let (attr, comp) = attraction(model, &mut ctx, batch, i, len)?;
            let log_t1 = ctx.log_prob(t1);
            let log_t2 = ctx.log_prob(t2);
            let log_t3 = ctx.log_prob(t3);
            let mut eps = ctx.tape.constant(0.0);
            for k in 0..len {
                out.push(ctx.tape.add2(attr[k], eps));
                if k + 1 == len {
                    break;
                }
                let (a, na) = (attr[k], comp[k]);
                eps = if conditional {
                    if batch.clicked(i, k) {
                        let satisfied = ctx.tape.add2(a, log_t3);
                        let unsatisfied = ctx.tape.add2(na, log_t2);
                        ctx.tape.log_sum_exp(&[satisfied, unsatisfied])
                    } else {
                        let post = no_click_posterior(ctx.tape, a, na, eps)?;
                        ctx.tape.add2(post, log_t1)
                    }
                } else {
                    let click_unsat = ctx.add(&[a, na, log_t2]);
                    let click_sat = ctx.add(&[a, a, log_t3]);
                    let skip = ctx.tape.add2(na, log_t1);
                    let step = ctx.tape.log_sum_exp(&[click_unsat, click_sat, skip]);
                    ctx.tape.add2(eps, step)
                };
            }
        }
        ModelKind::Dbn | ModelKind::Sdbn => {
            let (attr, comp) = attraction(model, &mut ctx, batch, i, len)?;
            let sat = model
                .satisfaction
                .as_ref()
                .expect("builder guarantees a satisfaction provider");
            let log_lam = model.lambda.map(|l| ctx.log_prob(l));
            let mut eps = ctx.tape.constant(0.0);
            for k in 0..len {
                out.push(ctx.tape.add2(attr[k], eps));
                if k + 1 == len {
                    break;
                }
                let s_logit = sat.logit(ctx.store, ctx.tape, batch, i, k)?;
                let mut next = if conditional {
                    if batch.clicked(i, k) {
                        ctx.tape.log1m_sigmoid(s_logit)
                    } else {
                        no_click_posterior(ctx.tape, attr[k], comp[k], eps)?
                    }
                } else {
                    let log_s = ctx.tape.log_sigmoid(s_logit);
                    let stop = ctx.tape.add2(attr[k], log_s);
                    let go_on = ctx.tape.log1mexp(stop)?;
                    ctx.tape.add2(eps, go_on)
                };
                if let Some(l) = log_lam {
                    next = ctx.tape.add2(next, l);
                }
                eps = next;
            }
        }
    }
    Ok(out)
}

fn ubm(
    model: &ClickModel,
    ctx: &mut Ctx,
    batch: &SessionBatch,
    i: usize,
    len: usize,
    conditional: bool,
    out: &mut Vec<NodeId>,
) -> Result<()> {
    let exam = model.examination.expect("ubm examination");
    let (attr, _) = attraction(model, ctx, batch, i, len)?;
    if conditional {
        let mut last = 0;
        for (k, &a) in attr.iter().enumerate() {
            let rank = k + 1;
            let e = ctx.log_prob(exam.param_after(rank, last));
            out.push(ctx.tape.add2(e, a));
            if batch.clicked(i, k) {
                last = rank;
            }
        }
        return Ok(());
    }
    // gap[j] holds the log probability of no clicks strictly after rank j up
    // to the current rank, given that j was the last click (j = 0: none).
    let mut gap: Vec<Vec<NodeId>> = vec![Vec::new()];
    for (k, &a) in attr.iter().enumerate() {
        let rank = k + 1;
        let mut paths = Vec::with_capacity(rank);
        for last in 0..rank {
            let e = ctx.log_prob(exam.param_after(rank, last));
            let mut terms = Vec::with_capacity(gap[last].len() + 3);
            if last > 0 {
                terms.push(out[last - 1]);
            }
            terms.extend_from_slice(&gap[last]);
            terms.push(e);
            terms.push(a);
            paths.push(ctx.add(&terms));
        }
        out.push(ctx.tape.log_sum_exp(&paths));
        if rank == len {
            break;
        }
        // Skipping rank `rank` after last click at `last`.
        for (last, g) in gap.iter_mut().enumerate() {
            let e = ctx.log_prob(exam.param_after(rank, last));
            let click = ctx.tape.add2(e, a);
            g.push(ctx.tape.log1mexp(click)?);
        }
        gap.push(Vec::new());
    }
    Ok(())
}
