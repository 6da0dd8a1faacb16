use std::rc::Rc;

use super::Net;
use crate::error::Result;
use crate::tensor::{AttnLayout, AttnSegment, Graph, Real, Var};
use crate::text::PackedExample;

/// The non-padding rows of several examples laid end to end.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PackedRows {
    pub token_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub sentence_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// First row of each example.
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl PackedRows {
    pub fn new<'a>(examples: impl IntoIterator<Item = &'a PackedExample>) -> Self {
        let mut rows = PackedRows::default();
        for ex in examples {
            let n = ex.attention_len;
            rows.offsets.push(rows.token_ids.len());
            rows.lens.push(n);
            rows.token_ids.extend_from_slice(&ex.token_ids[..n]);
            rows.position_ids.extend_from_slice(&ex.position_ids[..n]);
            rows.sentence_ids.extend_from_slice(&ex.sentence_ids[..n]);
            rows.segment_ids.extend_from_slice(&ex.segment_ids[..n]);
        }
        rows
    }

    pub fn total(&self) -> usize {
        self.token_ids.len()
    }

    fn self_attention(&self, heads: usize) -> Rc<AttnLayout> {
        Rc::new(AttnLayout {
            heads,
            segments: self
                .offsets
                .iter()
                .zip(&self.lens)
                .map(|(&o, &n)| AttnSegment::full(o, n))
                .collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOut {
    /// `[rows.total(), hidden]` contextual outputs.
    pub h: Var,
    pub rows: PackedRows,
}

impl EncoderOut {
    /// Global row of local row `i` of example `b`.
    pub fn row(&self, b: usize, i: usize) -> usize {
        self.rows.offsets[b] + i
    }
}

impl Net<'_> {
    /// Sum of token, position, sentence and segment embeddings, normalized,
    /// with dropout.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, rows: &PackedRows) -> Result<Var> {
        let lay = self.layout();
        let tok = g.gather_rows(self.var(lay.token), &rows.token_ids)?;
        let pos = g.gather_rows(self.var(lay.position), &rows.position_ids)?;
        let sent = g.gather_rows(self.var(lay.sentence), &rows.sentence_ids)?;
        let seg = g.gather_rows(self.var(lay.segment), &rows.segment_ids)?;
        let x = g.add(tok, pos)?;
        let x = g.add(x, sent)?;
        let x = g.add(x, seg)?;
        let x = self.norm(g, x, lay.emb_ln)?;
        g.dropout(x, self.model.config.dropout)
    }

    /// Post-norm transformer stack over already embedded rows.
    pub fn encode_rows<T: Real>(&self, g: &mut Graph<T>, h0: Var, rows: &PackedRows) -> Result<Var> {
        let cfg = &self.model.config;
        let layout = rows.self_attention(cfg.heads);
        let mut x = h0;
        for layer in &self.layout().encoder {
            let a = self.attention(g, x, x, layer.attn, layout.clone())?;
            let a = g.dropout(a, cfg.dropout)?;
            let r = g.add(x, a)?;
            x = self.norm(g, r, layer.ln1)?;
            let f = self.ffn(g, x, layer.ffn)?;
            let f = g.dropout(f, cfg.dropout)?;
            let r = g.add(x, f)?;
            x = self.norm(g, r, layer.ln2)?;
        }
        Ok(x)
    }

    pub fn encode<'e, T: Real>(
        &self,
        g: &mut Graph<T>,
        examples: impl IntoIterator<Item = &'e PackedExample>,
    ) -> Result<EncoderOut> {
        let rows = PackedRows::new(examples);
        let h0 = self.embed(g, &rows)?;
        let h = self.encode_rows(g, h0, &rows)?;
        Ok(EncoderOut { h, rows })
    }

    /// Gathers C for every example: `[CLS]`, each `[SENT]`, `[SEP]`. Returns
    /// the stacked rows and the first row of each example's block.
    pub fn extract_summary<'e, T: Real>(
        &self,
        g: &mut Graph<T>,
        enc: &EncoderOut,
        examples: impl IntoIterator<Item = &'e PackedExample>,
    ) -> Result<(Var, Vec<usize>)> {
        let mut index = Vec::new();
        let mut offsets = Vec::new();
        for (b, ex) in examples.into_iter().enumerate() {
            offsets.push(index.len());
            for i in ex.summary_indices()? {
                index.push(enc.row(b, i));
            }
        }
        Ok((g.gather_rows(enc.h, &index)?, offsets))
    }

    pub(crate) fn attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        queries: Var,
        keys: Var,
        block: super::AttnBlock,
        layout: Rc<AttnLayout>,
    ) -> Result<Var> {
        let q = self.linear(g, queries, block.q)?;
        let k = self.linear(g, keys, block.k)?;
        let v = self.linear(g, keys, block.v)?;
        let a = g.attention(q, k, v, layout, self.model.config.attn_dropout)?;
        self.linear(g, a, block.o)
    }
}
