//! Export of contextual sentence representations and exact cosine
//! nearest-neighbour retrieval over them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Result, SlmError};
use crate::model::{Model, Net};
use crate::tensor::Graph;
use crate::text::{pack_sentences, PackOptions, Vocab};

/// Where an index row came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub doc: usize,
    pub sentence: usize,
    pub text: String,
    pub previous: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub hidden: usize,
    /// `[n, hidden]` row-major.
    pub rows: Vec<f32>,
    pub records: Vec<ProbeRecord>,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.hidden..(i + 1) * self.hidden]
    }

    /// Binary rows go to `path`, records to `path` + `.jsonl`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.rows.len() * 4);
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.hidden as u64).to_le_bytes());
        for x in &self.rows {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| SlmError::io(path, e))?;
        let side = sidecar(path);
        let mut f = fs::File::create(&side).map_err(|e| SlmError::io(&side, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r).expect("records serialize");
            writeln!(f, "{line}").map_err(|e| SlmError::io(&side, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| SlmError::io(path, e))?;
        let header = |i: usize| -> Result<usize> {
            let b = buf
                .get(i * 8..i * 8 + 8)
                .ok_or_else(|| SlmError::format("index header truncated"))?;
            Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        };
        let (n, hidden) = (header(0)?, header(1)?);
        if n.checked_mul(hidden).and_then(|x| x.checked_mul(4)).map(|x| x + 16) != Some(buf.len()) {
            return Err(SlmError::format(format!(
                "index body does not hold {n} rows of {hidden}"
            )));
        }
        let rows = buf[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let side = sidecar(path);
        let text = fs::read_to_string(&side).map_err(|e| SlmError::io(&side, e))?;
        let records = text
            .lines()
            .map(|l| serde_json::from_str(l).map_err(|e| SlmError::format(format!("index records: {e}"))))
            .collect::<Result<Vec<ProbeRecord>>>()?;
        if records.len() != n {
            return Err(SlmError::format(format!("{} records for {n} rows", records.len())));
        }
        Ok(EmbeddingIndex { hidden, rows, records })
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".jsonl");
    PathBuf::from(s)
}

/// `[SENT]` outputs of every sentence, documents taken unshuffled in chunks
/// of `max_sentences`, dropout off. Sentences lost to truncation are
/// skipped.
pub fn export_reps(model: &Model, cfg: &Config, vocab: &Vocab, docs: &[Vec<String>]) -> Result<EmbeddingIndex> {
    if !cfg.sentence_reps_enabled {
        return Err(SlmError::contract("probing needs sentence tokens"));
    }
    let opts = PackOptions {
        max_len: cfg.max_len,
        max_sentences: cfg.max_sentences,
        sentence_tokens: true,
    };
    let mut index = EmbeddingIndex {
        hidden: model.config.hidden,
        rows: Vec::new(),
        records: Vec::new(),
    };
    for (d, doc) in docs.iter().enumerate() {
        let encoded: Vec<(usize, Vec<usize>)> = doc
            .iter()
            .enumerate()
            .map(|(i, s)| (i, vocab.encode(s)))
            .filter(|(_, s)| !s.is_empty())
            .collect();
        for chunk in encoded.chunks(cfg.max_sentences.max(1)) {
            let sentences: Vec<(Vec<usize>, usize)> = chunk.iter().map(|(_, s)| (s.clone(), 0)).collect();
            let Some(packed) = pack_sentences(&sentences, opts) else {
                continue;
            };
            let mut g = Graph::<f32>::new();
            let vars = model.bind(&mut g);
            let net = Net::new(model, &vars)?;
            let enc = net.encode(&mut g, [&packed])?;
            let h = g.value(enc.h);
            for (span, (i, _)) in packed.spans.iter().zip(chunk) {
                index
                    .rows
                    .extend_from_slice(h.row(span.sent_token.expect("sentence tokens on")));
                index.records.push(ProbeRecord {
                    doc: d,
                    sentence: *i,
                    text: doc[*i].clone(),
                    previous: if *i > 0 { doc[i - 1].clone() } else { String::new() },
                });
            }
        }
    }
    Ok(index)
}

fn norm(x: &[f32]) -> f64 {
    x.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    dot / (norm(a) * norm(b))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    pub similarity: f64,
}

/// The `k` rows most cosine-similar to row `query`, itself excluded,
/// descending; ties go to the earlier record. Exact scan.
pub fn nearest_neighbors(index: &EmbeddingIndex, query: usize, k: usize) -> Result<Vec<Neighbor>> {
    let n = index.len();
    if query >= n {
        return Err(SlmError::Index {
            op: "nearest_neighbors",
            index: query,
            bound: n,
        });
    }
    if k >= n {
        return Err(SlmError::contract(format!("k = {k} needs more than {n} rows")));
    }
    let q = index.row(query);
    let qn = norm(q);
    if qn == 0.0 {
        return Err(SlmError::contract(format!("row {query} is zero")));
    }
    let mut all: Vec<Neighbor> = (0..n)
        .filter(|&i| i != query)
        .map(|i| {
            let r = index.row(i);
            let dot: f64 = q.iter().zip(r).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
            Neighbor {
                row: i,
                similarity: dot / (qn * norm(r)),
            }
        })
        .collect();
    // stable: equal similarities keep record order
    all.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
    all.truncate(k);
    Ok(all)
}

/// Plain-text ranked list for each query row.
pub fn report(index: &EmbeddingIndex, queries: &[usize], k: usize) -> Result<String> {
    let mut out = String::new();
    for &q in queries {
        let r = &index.records[q];
        out.push_str(&format!("query doc {} sentence {}: {}\n", r.doc, r.sentence, r.text));
        if !r.previous.is_empty() {
            out.push_str(&format!("  previous: {}\n", r.previous));
        }
        for (rank, nb) in nearest_neighbors(index, q, k)?.iter().enumerate() {
            let m = &index.records[nb.row];
            out.push_str(&format!(
                "  {}. {:.4} doc {} sentence {}: {}\n",
                rank + 1,
                nb.similarity,
                m.doc,
                m.sentence,
                m.text
            ));
            if !m.previous.is_empty() {
                out.push_str(&format!("     previous: {}\n", m.previous));
            }
        }
        out.push('\n');
    }
    Ok(out)
}
