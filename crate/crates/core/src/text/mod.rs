//! Corpus ingestion: segmentation, vocabulary, merging and packing.

mod pack;
mod segment;
mod vocab;

pub use pack::{merge_to_max, pack_example, pack_sentences, Document, PackOptions, PackedExample, SentenceSpan};
pub use segment::{segment_sentences, tokenize};
pub use vocab::{Vocab, CLS, MASK, NUM_SPECIAL, PAD, SENT, SEP, SPECIAL_TOKENS, UNK};

/// Raw corpus: documents separated by blank lines. Lines of one document are
/// joined with a space.
pub fn parse_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(cur.join(" "));
                cur.clear();
            }
        } else {
            cur.push(line.trim());
        }
    }
    if !cur.is_empty() {
        docs.push(cur.join(" "));
    }
    docs
}

/// Segments a raw corpus into the prepared format: one sentence per line,
/// documents separated by a blank line.
pub fn prepare(text: &str) -> String {
    let blocks: Vec<String> = parse_documents(text)
        .iter()
        .map(|d| segment_sentences(d))
        .filter(|s| !s.is_empty())
        .map(|s| s.join("\n"))
        .collect();
    let mut out = blocks.join("\n\n");
    if !out.is_empty() {
        out.push('\n');
    }
    out
}

/// Prepared corpus: a list of documents, each a list of sentence strings.
pub fn parse_prepared(text: &str) -> Vec<Vec<String>> {
    let mut docs = Vec::new();
    let mut cur = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(line.to_string());
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    docs
}

/// Tokenizes prepared documents. Sentences without tokens and documents
/// without sentences are dropped.
pub fn encode_documents(docs: &[Vec<String>], vocab: &Vocab) -> Vec<Document> {
    docs.iter()
        .filter_map(|d| {
            let sentences: Vec<Vec<usize>> = d.iter().map(|s| vocab.encode(s)).filter(|s| !s.is_empty()).collect();
            Document::new(sentences).ok()
        })
        .collect()
}
