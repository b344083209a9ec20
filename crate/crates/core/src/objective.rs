//! Masked causal-LM translation loss and the cross-lingual consistency term.
//!
//! The consistency term is `KL(f(x, y, I) || f(y, y, I))`: the next-token
//! distributions over the target segment under the real pair against those
//! under the copied pair `(y, y)`, aligned by target position and averaged
//! over positions. Both sides stay on the tape, so gradients reach the copy
//! forward as well as the direct one.
//!
//! Batch losses are the mean of per-example losses, each of which is already a
//! per-token mean.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::{LanguageSuite, ParallelExample};
use crate::error::{Error, Result};
use crate::model::{Batch, ModelParams};
use crate::prompt::{render, render_copy, PromptRendering, PromptStrategy};

/// The default consistency-weight sweep.
pub const ALPHA_GRID: [f64; 3] = [0.05, 0.1, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Nats per target token.
    pub ce: f64,
    /// Nats per target position.
    pub kl: f64,
    pub total: f64,
    pub alpha: f64,
    pub tokens_counted: usize,
}

/// Rows of a padded `[batch * len, V]` logit matrix that predict labels.
#[derive(Debug, Clone)]
struct LabelPlan {
    rows: Vec<usize>,
    targets: Vec<usize>,
    /// `1 / (count_i * batch)` for every row of example `i`.
    weights: Vec<f64>,
    counts: Vec<usize>,
}

impl LabelPlan {
    fn new(renderings: &[&PromptRendering], len: usize) -> Result<Self> {
        let b = renderings.len();
        let mut plan = LabelPlan { rows: Vec::new(), targets: Vec::new(), weights: Vec::new(), counts: Vec::new() };
        for (i, r) in renderings.iter().enumerate() {
            if r.loss_mask.len() != r.token_ids.len() {
                return Err(Error::Contract("loss mask and token ids differ in length".into()));
            }
            let labels = r.label_positions();
            if labels.is_empty() {
                return Err(Error::NoTarget);
            }
            if labels[0] == 0 {
                return Err(Error::Contract("position 0 has no preceding context to predict it".into()));
            }
            let w = 1.0 / (labels.len() * b) as f64;
            for &p in &labels {
                plan.rows.push(i * len + p - 1);
                plan.targets.push(r.token_ids[p]);
                plan.weights.push(w);
            }
            plan.counts.push(labels.len());
        }
        Ok(plan)
    }
}

/// `-Σ_r w_r log softmax(logits_r)[target_r]` over gathered rows `[n, V]`.
fn weighted_ce(g: &mut Graph, rows: Var, plan: &LabelPlan) -> Result<Var> {
    let lp = g.log_softmax(rows, 1)?;
    let picked = g.pick(lp, &plan.targets)?;
    let w = g.constant(Tensor::new(vec![plan.weights.len()], plan.weights.clone())?)?;
    let weighted = g.mul(picked, w)?;
    let s = g.sum(weighted)?;
    g.scale(s, -1.0)
}

/// `Σ_r w_r Σ_v p_r(v) (ln p_r(v) - ln q_r(v))` with `p` from `direct`, `q` from `copy`.
fn weighted_kl(g: &mut Graph, direct: Var, copy: Var, weights: &[f64]) -> Result<Var> {
    let v = g.shape(direct)[1];
    let p = g.softmax(direct, 1)?;
    let lp = g.log_softmax(direct, 1)?;
    let lq = g.log_softmax(copy, 1)?;
    let ratio = g.sub(lp, lq)?;
    let terms = g.mul(p, ratio)?;
    let w: Vec<f64> = weights.iter().flat_map(|&w| std::iter::repeat_n(w, v)).collect();
    let w = g.constant(Tensor::new(vec![weights.len(), v], w)?)?;
    let weighted = g.mul(terms, w)?;
    g.sum(weighted)
}

fn as_rows(g: &mut Graph, logits: Var, rendering: &PromptRendering) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let (t, v) = match shape.as_slice() {
        [t, v] | [1, t, v] => (*t, *v),
        _ => return Err(Error::Shape(format!("expected logits [T, V] or [1, T, V], got {shape:?}"))),
    };
    if t != rendering.token_ids.len() {
        return Err(Error::Shape(format!(
            "logits cover {t} positions but the rendering has {}",
            rendering.token_ids.len()
        )));
    }
    g.reshape(logits, &[t, v])
}

/// Mean negative log-likelihood of the masked labels; `logits` is `[T, V]`.
pub fn clm_loss_var(g: &mut Graph, logits: Var, rendering: &PromptRendering) -> Result<Var> {
    let logits = as_rows(g, logits, rendering)?;
    let plan = LabelPlan::new(&[rendering], rendering.token_ids.len())?;
    let rows = g.gather_rows(logits, &plan.rows)?;
    weighted_ce(g, rows, &plan)
}

/// Position-aligned KL between the direct and copy label distributions.
pub fn xconst_kl_var(
    g: &mut Graph,
    logits_direct: Var,
    rendering_direct: &PromptRendering,
    logits_copy: Var,
    rendering_copy: &PromptRendering,
) -> Result<Var> {
    let (nd, nc) = (rendering_direct.target_count(), rendering_copy.target_count());
    if nd != nc {
        return Err(Error::Alignment { direct: nd, copy: nc });
    }
    let ld = as_rows(g, logits_direct, rendering_direct)?;
    let lc = as_rows(g, logits_copy, rendering_copy)?;
    let pd = LabelPlan::new(&[rendering_direct], rendering_direct.token_ids.len())?;
    let pc = LabelPlan::new(&[rendering_copy], rendering_copy.token_ids.len())?;
    let rd = g.gather_rows(ld, &pd.rows)?;
    let rc = g.gather_rows(lc, &pc.rows)?;
    weighted_kl(g, rd, rc, &pd.weights)
}

pub fn clm_loss(logits: &Tensor, rendering: &PromptRendering) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone())?;
    let loss = clm_loss_var(&mut g, l, rendering)?;
    Ok(g.value(loss).item())
}

pub fn xconst_kl(
    logits_direct: &Tensor,
    rendering_direct: &PromptRendering,
    logits_copy: &Tensor,
    rendering_copy: &PromptRendering,
) -> Result<f64> {
    let mut g = Graph::new();
    let ld = g.constant(logits_direct.clone())?;
    let lc = g.constant(logits_copy.clone())?;
    let kl = xconst_kl_var(&mut g, ld, rendering_direct, lc, rendering_copy)?;
    Ok(g.value(kl).item())
}

/// Training loss recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn sequences(renderings: &[&PromptRendering]) -> Vec<Vec<usize>> {
    renderings.iter().map(|r| r.token_ids.clone()).collect()
}

/// Mean per-example loss `ce + alpha * kl` over a batch. With `alpha == 0` the
/// copy forward is skipped and `copies` is ignored, so the result is exactly
/// the plain translation loss. `vars` must come from `params.store().bind(g)`.
pub fn batch_loss(
    g: &mut Graph,
    vars: &[Var],
    params: &ModelParams,
    direct: &[&PromptRendering],
    copies: Option<&[&PromptRendering]>,
    alpha: f64,
) -> Result<BatchLoss> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    let batch = Batch::from_sequences(&sequences(direct))?;
    let plan = LabelPlan::new(direct, batch.len)?;
    let hidden = params.hidden(g, vars, &batch)?;
    let rows = g.gather_rows(hidden, &plan.rows)?;
    let logits = params.head(g, vars, rows)?;
    let ce = weighted_ce(g, logits, &plan)?;
    let ce_value = g.value(ce).item();
    let tokens_counted = plan.rows.len();

    if alpha == 0.0 {
        let breakdown = LossBreakdown { ce: ce_value, kl: 0.0, total: ce_value, alpha, tokens_counted };
        return Ok(BatchLoss { total: ce, breakdown });
    }

    let copies = copies.ok_or_else(|| Error::Contract("alpha > 0 requires copy renderings".into()))?;
    if copies.len() != direct.len() {
        return Err(Error::Contract(format!("{} direct renderings but {} copies", direct.len(), copies.len())));
    }
    for (d, c) in direct.iter().zip(copies) {
        if d.target_count() != c.target_count() {
            return Err(Error::Alignment { direct: d.target_count(), copy: c.target_count() });
        }
    }
    let copy_batch = Batch::from_sequences(&sequences(copies))?;
    let copy_plan = LabelPlan::new(copies, copy_batch.len)?;
    let copy_hidden = params.hidden(g, vars, &copy_batch)?;
    let copy_rows = g.gather_rows(copy_hidden, &copy_plan.rows)?;
    let copy_logits = params.head(g, vars, copy_rows)?;
    let kl = weighted_kl(g, logits, copy_logits, &plan.weights)?;
    let scaled = g.scale(kl, alpha)?;
    let total = g.add(ce, scaled)?;
    let breakdown =
        LossBreakdown { ce: ce_value, kl: g.value(kl).item(), total: g.value(total).item(), alpha, tokens_counted };
    Ok(BatchLoss { total, breakdown })
}

/// Loss for a single translation example under one prompt strategy.
pub fn xconst_loss(
    params: &ModelParams,
    example: &ParallelExample,
    strategy: PromptStrategy,
    alpha: f64,
    suite: &LanguageSuite,
) -> Result<LossBreakdown> {
    let direct =
        render(strategy, suite, example.src_lang, example.tgt_lang, &example.src_tokens, Some(&example.tgt_tokens))?;
    let copy = render_copy(strategy, suite, example.tgt_lang, &example.tgt_tokens)?;
    let mut g = Graph::new();
    let vars = params.store().bind(&mut g)?;
    Ok(batch_loss(&mut g, &vars, params, &[&direct], Some(&[&copy]), alpha)?.breakdown)
}
