use std::rc::Rc;

use super::Net;
use crate::error::{Result, SlmError};
use crate::tensor::{AttnLayout, AttnSegment, Graph, Real, Var};

#[derive(Clone, Debug)]
pub struct DecoderOut {
    /// `[sum of steps, hidden]` step outputs.
    pub w: Var,
    pub offsets: Vec<usize>,
    pub steps: Vec<usize>,
}

impl Net<'_> {
    /// Runs the reconstructor. `inputs[b]` lists the rows of example `b`'s
    /// summary block (local indices) fed at each step; every step attends
    /// causally to earlier steps and to the whole block.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        c: Var,
        c_offsets: &[usize],
        c_lens: &[usize],
        inputs: &[Vec<usize>],
    ) -> Result<DecoderOut> {
        let cfg = &self.model.config;
        if c_offsets.len() != inputs.len() || c_lens.len() != inputs.len() {
            return Err(SlmError::contract("decoder inputs and summary blocks differ in count"));
        }
        let mut index = Vec::new();
        let mut offsets = Vec::with_capacity(inputs.len());
        let mut self_segments = Vec::with_capacity(inputs.len());
        let mut cross_segments = Vec::with_capacity(inputs.len());
        for (b, rows) in inputs.iter().enumerate() {
            if rows.is_empty() {
                return Err(SlmError::contract("decoder needs at least one step"));
            }
            offsets.push(index.len());
            self_segments.push(AttnSegment::causal(index.len(), rows.len()));
            cross_segments.push(AttnSegment::cross(index.len(), rows.len(), c_offsets[b], c_lens[b]));
            for &r in rows {
                if r >= c_lens[b] {
                    return Err(SlmError::Index {
                        op: "decode",
                        index: r,
                        bound: c_lens[b],
                    });
                }
                index.push(c_offsets[b] + r);
            }
        }
        let self_layout = Rc::new(AttnLayout {
            heads: cfg.heads,
            segments: self_segments,
        });
        let cross_layout = Rc::new(AttnLayout {
            heads: cfg.heads,
            segments: cross_segments,
        });
        let mut x = g.gather_rows(c, &index)?;
        for layer in &self.layout().decoder {
            let a = self.attention(g, x, x, layer.self_attn, self_layout.clone())?;
            let a = g.dropout(a, cfg.dropout)?;
            let r = g.add(x, a)?;
            x = self.norm(g, r, layer.ln1)?;
            let a = self.attention(g, x, c, layer.cross_attn, cross_layout.clone())?;
            let a = g.dropout(a, cfg.dropout)?;
            let r = g.add(x, a)?;
            x = self.norm(g, r, layer.ln2)?;
            let f = self.ffn(g, x, layer.ffn)?;
            let f = g.dropout(f, cfg.dropout)?;
            let r = g.add(x, f)?;
            x = self.norm(g, r, layer.ln3)?;
        }
        Ok(DecoderOut {
            w: x,
            offsets,
            steps: inputs.iter().map(Vec::len).collect(),
        })
    }

    /// Teacher forcing: step 0 reads `h_cls`, step `i > 0` reads the gold
    /// sentence of step `i - 1`. `targets[b]` has `N + 1` entries.
    pub fn decode_sequence<T: Real>(
        &self,
        g: &mut Graph<T>,
        c: Var,
        c_offsets: &[usize],
        c_lens: &[usize],
        targets: &[Vec<usize>],
    ) -> Result<DecoderOut> {
        let mut inputs = Vec::with_capacity(targets.len());
        for (t, &len) in targets.iter().zip(c_lens) {
            if t.len() + 1 != len {
                return Err(SlmError::contract(format!(
                    "{} order targets for a summary of {len} rows",
                    t.len()
                )));
            }
            inputs.push(std::iter::once(0).chain(t[..t.len() - 1].iter().copied()).collect());
        }
        self.decode(g, c, c_offsets, c_lens, &inputs)
    }
}

/// Unnormalized pointer logits `W Cᵀ`: one row per step, one column per
/// summary row.
pub fn pointer_scores<T: Real>(g: &mut Graph<T>, w: Var, c: Var) -> Result<Var> {
    g.matmul_nt(w, c)
}

/// Autoregressive reconstruction of the order of the `n` sentences whose
/// summary block starts at row `c_offset` of `c`. Each step takes the best
/// unused sentence or `[SEP]`; after an early `[SEP]` the rest follow in
/// memory order. Returns memory indices in predicted order.
pub fn greedy_unshuffle<T: Real>(
    net: &Net<'_>,
    g: &mut Graph<T>,
    c: Var,
    c_offset: usize,
    n: usize,
) -> Result<Vec<usize>> {
    let block = g.slice_rows(c, c_offset, n + 2)?;
    let mut inputs = vec![0];
    let mut used = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let out = net.decode(g, block, &[0], &[n + 2], std::slice::from_ref(&inputs))?;
        let last = g.slice_rows(out.w, inputs.len() - 1, 1)?;
        let scores = pointer_scores(g, last, block)?;
        let row = g.value(scores).data();
        // ties go to the lowest index
        let mut best = None;
        for j in (1..=n).filter(|&j| !used[j - 1]).chain([n + 1]) {
            if best.is_none_or(|b: usize| row[j] > row[b]) {
                best = Some(j);
            }
        }
        let best = best.expect("candidate set includes [SEP]");
        if best == n + 1 {
            break;
        }
        used[best - 1] = true;
        order.push(best - 1);
        inputs.push(best);
    }
    order.extend((0..n).filter(|&s| !used[s]));
    Ok(order)
}
