//! Masked-LM and sentence-order losses and their sum.

use crate::batch::Batch;
use crate::error::{Result, SlmError};
use crate::model::{pointer_scores, Net};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::text::PackedExample;

/// Scalar losses of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub l_mlm: f64,
    pub l_slm: f64,
    pub total: f64,
    pub masked_count: usize,
    pub slm_steps: usize,
}

/// Mean cross-entropy of the tied-embedding logits at the labelled rows of
/// `h`. `None` when nothing is labelled.
pub fn mlm_loss<T: Real>(g: &mut Graph<T>, net: &Net<'_>, h: Var, labelled: &[(usize, usize)]) -> Result<Option<Var>> {
    if labelled.is_empty() {
        log::warn!("batch has no masked positions; MLM loss is 0");
        return Ok(None);
    }
    let rows: Vec<usize> = labelled.iter().map(|&(r, _)| r).collect();
    let labels: Vec<usize> = labelled.iter().map(|&(_, l)| l).collect();
    let lay = net.layout();
    let x = g.gather_rows(h, &rows)?;
    let logits = g.matmul_nt(x, net.var(lay.token))?;
    let logits = g.add_bias(logits, net.var(lay.mlm_bias))?;
    g.cross_entropy_rows(logits, &labels).map(Some)
}

fn check_targets(targets: &[usize], candidates: usize) -> Result<()> {
    if let Some(&t) = targets.iter().find(|&&t| t == 0 || t >= candidates) {
        return Err(SlmError::contract(format!(
            "order target {t} outside 1..{} (h_cls is never a target)",
            candidates
        )));
    }
    Ok(())
}

/// `-(1/(N+1)) Σ_i log softmax(logits_i)[targets_i]` over pointer logits.
pub fn slm_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    check_targets(targets, g.value(logits).cols())?;
    g.cross_entropy_rows(logits, targets)
}

/// The same loss evaluated on row-stochastic pointer distributions.
pub fn slm_loss_from_probs(p: &Tensor<f64>, targets: &[usize]) -> Result<f64> {
    if p.rows() != targets.len() {
        return Err(SlmError::contract(format!(
            "{} targets for {} pointer rows",
            targets.len(),
            p.rows()
        )));
    }
    check_targets(targets, p.cols())?;
    let sum: f64 = targets.iter().enumerate().map(|(i, &t)| -p.row(i)[t].ln()).sum();
    Ok(sum / targets.len() as f64)
}

/// Unweighted sum. A non-finite term aborts training.
pub fn total_loss<T: Real>(g: &mut Graph<T>, l_mlm: Var, l_slm: Var) -> Result<Var> {
    for v in [l_mlm, l_slm] {
        if !g.value(v).is_finite() {
            return Err(SlmError::Abort("non-finite loss term".into()));
        }
    }
    g.add(l_mlm, l_slm)
}

/// Forward pass of the pre-training objective over a batch. The returned
/// var is the scalar total; it is a constant zero node when neither loss has
/// terms.
pub fn forward_batch<T: Real>(
    g: &mut Graph<T>,
    net: &Net<'_>,
    batch: &Batch,
    sr_enabled: bool,
) -> Result<(Var, LossBundle)> {
    let examples: Vec<&PackedExample> = batch.examples.iter().map(|m| &m.example).collect();
    let enc = net.encode(g, examples.iter().copied())?;
    let labelled: Vec<(usize, usize)> = batch
        .examples
        .iter()
        .enumerate()
        .flat_map(|(b, m)| {
            let enc = &enc;
            m.mlm_labels
                .iter()
                .enumerate()
                .filter_map(move |(i, l)| l.map(|l| (enc.row(b, i), l)))
        })
        .collect();
    let zero = g.input(Tensor::scalar(T::zero()));
    let l_mlm = mlm_loss(g, net, enc.h, &labelled)?.unwrap_or(zero);
    let mut slm_steps = 0;
    let l_slm = if sr_enabled && !examples.is_empty() {
        let (c, offsets) = net.extract_summary(g, &enc, examples.iter().copied())?;
        let lens: Vec<usize> = examples.iter().map(|e| e.n_sentences() + 2).collect();
        let dec = net.decode_sequence(g, c, &offsets, &lens, &batch.targets)?;
        let mut acc: Option<Var> = None;
        for b in 0..examples.len() {
            let w = g.slice_rows(dec.w, dec.offsets[b], dec.steps[b])?;
            let cb = g.slice_rows(c, offsets[b], lens[b])?;
            let logits = pointer_scores(g, w, cb)?;
            let l = slm_loss(g, logits, &batch.targets[b])?;
            slm_steps += dec.steps[b];
            acc = Some(match acc {
                Some(a) => g.add(a, l)?,
                None => l,
            });
        }
        let sum = acc.expect("non-empty batch");
        g.scale(sum, T::of(1.0 / examples.len() as f64))?
    } else {
        zero
    };
    let total = total_loss(g, l_mlm, l_slm)?;
    let (m, s) = (g.value(l_mlm).item().as_f64(), g.value(l_slm).item().as_f64());
    let bundle = LossBundle {
        l_mlm: m,
        l_slm: s,
        total: m + s,
        masked_count: labelled.len(),
        slm_steps,
    };
    Ok((total, bundle))
}
