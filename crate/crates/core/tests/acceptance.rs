//! Acceptance suite. Each test writes one `PASS`/`FAIL` line straight to
//! stdout (bypassing capture) and then asserts.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rand::Rng;

use slm_core::batch::Batch;
use slm_core::config::Config;
use slm_core::diagnostics::{end_to_end_grad_check, learning_check};
use slm_core::heads::{
    build_cls_example, build_qa_example, cls_metric, finetune_cls, infer_cls_task, init_qa_head, predict_cls,
    qa_logits, qa_loss, ClsExample, ClsRecord, FineTune, QaRecord,
};
use slm_core::masking::{apply_span_masking, sample_span_length, MaskingConfig};
use slm_core::model::{Model, ModelConfig, Net};
use slm_core::objectives::{forward_batch, slm_loss, slm_loss_from_probs, LossBundle};
use slm_core::probe::{export_reps, nearest_neighbors, EmbeddingIndex, ProbeRecord};
use slm_core::rng::stream;
use slm_core::shuffle::{apply_shuffle, order_targets, physical_shuffle, sample_permutation, PositionMode};
use slm_core::synthetic::ordered_corpus;
use slm_core::tensor::{Graph, Tensor, Var};
use slm_core::text::{encode_documents, pack_example, parse_prepared, Document, PackOptions, Vocab, NUM_SPECIAL};
use slm_core::trainer::{batch_gradients, pretrain, Trainer};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {id} [{name}]: {verdict} ({detail})");
    let _ = out.flush();
}

#[test]
fn c1_gradient_correctness() {
    let start = Instant::now();
    let r = end_to_end_grad_check::<f64>(&Config::tiny(), 1e-5).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = r.max_rel_err < 1e-3 && secs < 60.0;
    report(
        1,
        "gradient check",
        pass,
        &format!(
            "max rel err {:.2e} over {} entries in {secs:.1}s",
            r.max_rel_err, r.checked
        ),
    );
    assert!(pass, "{r:?} in {secs}s");
}

/// Independent double loop: softmax of each row, then the mean negative log
/// probability of the target.
fn slm_oracle(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, row) in logits.iter().enumerate() {
        let mut m = f64::NEG_INFINITY;
        for &z in row {
            m = m.max(z);
        }
        let mut s = 0.0;
        for &z in row {
            s += (z - m).exp();
        }
        total += -(row[targets[i]] - m - s.ln());
    }
    total / logits.len() as f64
}

#[test]
fn c2_slm_loss_oracle() {
    let mut r = stream(2, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.gen_range(1..=8usize);
        let logits: Vec<Vec<f64>> = (0..n + 1)
            .map(|_| (0..n + 2).map(|_| r.gen_range(-6.0..6.0)).collect())
            .collect();
        let perm = sample_permutation(n, &mut r);
        let targets = order_targets(&perm);
        let want = slm_oracle(&logits, &targets);

        let mut g = Graph::<f64>::new();
        let v = g.input(Tensor::from_rows(&logits).unwrap());
        let l = slm_loss(&mut g, v, &targets).unwrap();
        worst = worst.max((g.value(l).item() - want).abs());

        let probs: Vec<Vec<f64>> = logits
            .iter()
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                row.iter().map(|x| (x - m).exp() / z).collect()
            })
            .collect();
        let p = slm_loss_from_probs(&Tensor::from_rows(&probs).unwrap(), &targets).unwrap();
        worst = worst.max((p - want).abs());
    }
    let mut g = Graph::<f64>::new();
    let v = g.input(Tensor::zeros(&[2, 3]));
    let l = slm_loss(&mut g, v, &[1, 2]).unwrap();
    let uniform = g.value(l).item();
    let uniform_err = (uniform - 3f64.ln()).abs();
    let pass = worst <= 1e-6 && uniform_err <= 1e-6;
    report(
        2,
        "order loss oracle",
        pass,
        &format!("max abs diff {worst:.1e} on 1000 cases; N=1 uniform {uniform:.9} vs ln 3"),
    );
    assert!(pass);
}

fn equivalence_config() -> Config {
    Config {
        vocab_size: 40,
        hidden: 16,
        heads: 2,
        ffn: 32,
        max_len: 48,
        max_sentences: 5,
        dropout: 0.0,
        attn_dropout: 0.0,
        mask_rate: 0.3,
        ..Config::tiny()
    }
}

fn random_document(r: &mut impl Rng, cfg: &Config, sentences: usize, max_words: usize) -> Document {
    Document::new(
        (0..sentences)
            .map(|_| {
                (0..r.gen_range(1..=max_words))
                    .map(|_| r.gen_range(NUM_SPECIAL..cfg.vocab_size))
                    .collect()
            })
            .collect(),
    )
    .unwrap()
}

fn single(ex: slm_core::masking::MaskedExample, targets: Vec<usize>, perm: Vec<usize>) -> Batch {
    Batch {
        examples: vec![ex],
        targets: vec![targets],
        perms: vec![perm],
        shuffled: true,
    }
}

/// Forward pass in f64 so that the comparison is not dominated by the f32
/// rounding of reductions taken in a different row order.
fn run(model: &Model, batch: &Batch) -> (LossBundle, Vec<Vec<f64>>) {
    let mut g = Graph::<f64>::new();
    let vars = model.bind(&mut g);
    let net = Net::new(model, &vars).unwrap();
    let (_, bundle) = forward_batch(&mut g, &net, batch, true).unwrap();
    let examples = batch.examples.iter().map(|m| &m.example);
    let enc = net.encode(&mut g, examples).unwrap();
    (bundle, g.value(enc.h).to_rows())
}

#[test]
fn c3_shuffle_equivalence() {
    let cfg = equivalence_config();
    let mut model = Model::new(ModelConfig::from_config(&cfg), 11).unwrap();
    let mut r = stream(3, 0, 0);
    for p in model.params.iter_mut() {
        for x in p.value.data_mut() {
            *x += r.gen_range(-0.2f32..0.2);
        }
    }
    let opts = PackOptions {
        max_len: cfg.max_len,
        max_sentences: cfg.max_sentences,
        sentence_tokens: true,
    };
    let (mut loss_diff, mut row_diff) = (0.0f64, 0.0f64);
    let mut cases = 0;
    while cases < 100 {
        let n = r.gen_range(2..=cfg.max_sentences);
        let doc = random_document(&mut r, &cfg, n, 6);
        let Some(packed) = pack_example(&doc, opts, &mut r) else {
            continue;
        };
        let n = packed.n_sentences();
        let masked = apply_span_masking(packed, &cfg.masking(), cfg.vocab_size, &mut r);
        let perm = sample_permutation(n, &mut r);

        let mut by_ids = masked.clone();
        apply_shuffle(&mut by_ids, &perm, PositionMode::Resequence).unwrap();
        let identity: Vec<usize> = (0..n).collect();
        let a = single(by_ids.clone(), order_targets(&identity), perm.clone());
        let moved = physical_shuffle(&masked, &perm, PositionMode::Resequence).unwrap();
        let b = single(moved.clone(), order_targets(&perm), perm.clone());

        let (la, ha) = run(&model, &a);
        let (lb, hb) = run(&model, &b);
        assert_eq!((la.masked_count, la.slm_steps), (lb.masked_count, lb.slm_steps));
        for (x, y) in [(la.l_mlm, lb.l_mlm), (la.l_slm, lb.l_slm), (la.total, lb.total)] {
            loss_diff = loss_diff.max((x - y).abs());
        }
        // row map from memory order to the physically moved layout
        let src = &by_ids.example;
        let mut map: Vec<(usize, usize)> = vec![(0, 0), (src.sep_index(), moved.example.sep_index())];
        for (s, span) in src.spans.iter().enumerate() {
            let dst = moved.example.spans[perm[s]];
            map.extend((span.first()..span.end).zip(dst.first()..dst.end));
        }
        for (i, j) in map {
            for (x, y) in ha[i].iter().zip(&hb[j]) {
                row_diff = row_diff.max((x - y).abs());
            }
        }
        cases += 1;
    }
    let pass = loss_diff <= 1e-6 && row_diff <= 1e-5;
    report(
        3,
        "shuffle equivalence",
        pass,
        &format!("100 examples: loss diff {loss_diff:.1e}, encoder row diff {row_diff:.1e}"),
    );
    assert!(pass);
}

#[test]
fn c4_masking_statistics() {
    let m = MaskingConfig::default();
    let want = [0.40984, 0.32787, 0.26230];
    let mut r = stream(4, 0, 0);
    let mut counts = [0usize; 3];
    for _ in 0..100_000 {
        counts[sample_span_length(&m, &mut r) - 1] += 1;
    }
    let pmf: Vec<f64> = counts.iter().map(|&c| c as f64 / 100_000.0).collect();
    let pmf_ok = pmf.iter().zip(want).all(|(p, w)| (p - w).abs() <= 0.01);

    let cfg = Config {
        vocab_size: 500,
        max_len: 128,
        max_sentences: 8,
        ..Config::tiny()
    };
    let opts = PackOptions {
        max_len: cfg.max_len,
        max_sentences: cfg.max_sentences,
        sentence_tokens: true,
    };
    let (mut masked, mut eligible, mut special_hits, mut examples) = (0usize, 0usize, 0usize, 0usize);
    while examples < 10_000 {
        let n = r.gen_range(1..=8);
        let doc = random_document(&mut r, &cfg, n, 20);
        let Some(packed) = pack_example(&doc, opts, &mut r) else {
            continue;
        };
        eligible += packed.word_positions().count();
        let before = packed.token_ids.clone();
        let out = apply_span_masking(packed, &m, cfg.vocab_size, &mut r);
        masked += out.masked_count();
        for (i, &t) in before.iter().enumerate() {
            if Vocab::is_special(t) && (out.mlm_labels[i].is_some() || out.example.token_ids[i] != t) {
                special_hits += 1;
            }
        }
        examples += 1;
    }
    let fraction = masked as f64 / eligible as f64;
    let pass = pmf_ok && (0.13..=0.17).contains(&fraction) && special_hits == 0;
    report(
        4,
        "masking statistics",
        pass,
        &format!(
            "span pmf {:.4}/{:.4}/{:.4}, masked fraction {fraction:.4}, {special_hits} special tokens masked in 10000 examples",
            pmf[0], pmf[1], pmf[2]
        ),
    );
    assert!(pass);
}

#[test]
fn c5_learning_check() {
    let docs = parse_prepared(&ordered_corpus(5000, 0));
    let four = docs.len() == 5000 && docs.iter().all(|d| d.len() == 4);
    let r = learning_check(3000, 0).unwrap();
    let mlm_bound = 0.8 * r.ln_vocab;
    let pass = four
        && r.config.hidden == 128
        && r.config.enc_layers == 4
        && r.held_out.exact_match >= 0.90
        && r.held_out.kendall_tau >= 0.90
        && r.final_mlm < mlm_bound
        && r.seconds <= 1800.0;
    report(
        5,
        "learning check",
        pass,
        &format!(
            "{} held-out docs: exact match {:.3}, tau {:.3}; mlm {:.3} < {mlm_bound:.3}; {:.0}s",
            r.held_out.documents, r.held_out.exact_match, r.held_out.kendall_tau, r.final_mlm, r.seconds
        ),
    );
    assert!(pass, "{r:?}");
}

fn small_pretrain_setup() -> (Config, Vec<Document>) {
    let text = parse_prepared(&ordered_corpus(40, 9));
    let vocab = Vocab::build(text.iter().flatten().map(String::as_str), 1000).unwrap();
    let cfg = Config {
        vocab_size: vocab.len(),
        hidden: 32,
        heads: 2,
        ffn: 64,
        max_len: 64,
        batch_size: 4,
        steps: 12,
        warmup: 2,
        checkpoint_every: 0,
        ..Config::tiny()
    };
    (cfg, encode_documents(&text, &vocab))
}

#[test]
fn c6_ablation_plumbing() {
    let (base, docs) = small_pretrain_setup();
    let dir = tempfile::tempdir().unwrap();
    let grid = [
        (0.5, true, true),
        (1.0, true, true),
        (1.0, false, true),
        (0.0, false, true),
        (0.0, false, false),
    ];
    let mut files = Vec::new();
    let mut completed = 0;
    for (i, &(fraction, sr, reps)) in grid.iter().enumerate() {
        let cfg = Config {
            shuffle_fraction: fraction,
            sr_enabled: sr,
            sentence_reps_enabled: reps,
            ..base.clone()
        };
        let out = dir.path().join(format!("run{i}"));
        let summary = pretrain(&cfg, &docs, &out).unwrap();
        if summary.last.as_ref().map(|l| l.step) == Some(cfg.steps as u64) {
            completed += 1;
        }
        files.push(std::fs::read(&summary.metrics).unwrap());
    }
    let distinct = (0..files.len()).all(|i| (i + 1..files.len()).all(|j| files[i] != files[j]));

    let cfg = Config {
        sr_enabled: false,
        shuffle_fraction: 1.0,
        ..base.clone()
    };
    let trainer = Trainer::new(cfg.clone(), &docs).unwrap();
    let batch = slm_core::batch::BatchBuilder::new(&docs, &cfg)
        .unwrap()
        .batch(0)
        .unwrap();
    let (grads, _) = batch_gradients(&trainer.model, &batch, false, Some(1)).unwrap();
    let mut decoder_params = 0;
    let mut nonzero = 0usize;
    for (p, g) in trainer.model.params.iter().zip(&grads) {
        if Model::is_decoder_param(&p.name) {
            decoder_params += 1;
            nonzero += g.as_ref().map_or(0, |g| g.iter().filter(|&&x| x != 0.0).count());
        }
    }
    let pass = completed == grid.len() && distinct && decoder_params > 0 && nonzero == 0;
    report(
        6,
        "ablation plumbing",
        pass,
        &format!(
            "{completed}/5 runs complete, distinct metrics files: {distinct}; {nonzero} nonzero decoder gradient entries over {decoder_params} tensors with reconstruction off"
        ),
    );
    assert!(pass);
}

#[test]
fn c7_reference_profile() {
    let cfg = Config::profile("paper").unwrap();
    let echo: HashMap<String, String> = cfg
        .echo()
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let num = |k: &str| echo.get(k).and_then(|v| v.parse::<f64>().ok());
    let expected = [
        ("enc_layers", 12.0),
        ("dec_layers", 3.0),
        ("hidden", 768.0),
        ("vocab_size", 30522.0),
        ("warmup", 10_000.0),
        ("peak_lr", 1.5e-4),
        ("adam_eps", 1e-6),
        ("dropout", 0.1),
    ];
    let mismatched: Vec<&str> = expected
        .iter()
        .filter(|(k, v)| num(k) != Some(*v))
        .map(|(k, _)| *k)
        .collect();
    let model = Model::new(ModelConfig::from_config(&cfg), 0).unwrap();
    let ratio = model.decoder_param_count() as f64 / model.encoder_param_count() as f64;
    let pass = mismatched.is_empty() && ratio < 0.30;
    report(
        7,
        "reference profile",
        pass,
        &format!("echo mismatches {mismatched:?}; decoder/encoder parameters {ratio:.3}"),
    );
    assert!(pass);
}

fn toy_records() -> Vec<ClsRecord> {
    let good = ["great", "lovely", "fine", "superb"];
    let bad = ["awful", "poor", "dull", "broken"];
    let things = ["film", "meal", "trip", "book", "song", "game", "room", "show"];
    let mut out = Vec::new();
    for (i, thing) in things.iter().enumerate() {
        for k in 0..2 {
            for (label, words) in [("pos", &good), ("neg", &bad)] {
                out.push(ClsRecord {
                    label: label.into(),
                    text_a: format!("The {thing} was {}.", words[(i + k) % 4]),
                    text_b: None,
                });
            }
        }
    }
    out
}

fn head_config(vocab_size: usize) -> Config {
    Config {
        vocab_size,
        hidden: 32,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        ffn: 64,
        max_len: 48,
        max_sentences: 6,
        dropout: 0.0,
        attn_dropout: 0.0,
        ft_steps: 200,
        ft_batch_size: 16,
        ft_lr: 2e-3,
        ..Config::tiny()
    }
}

fn toy_accuracy() -> f64 {
    let recs = toy_records();
    let vocab = Vocab::build(recs.iter().map(|r| r.text_a.as_str()), 500).unwrap();
    let cfg = head_config(vocab.len());
    let task = infer_cls_task(&recs, false).unwrap();
    let data: Vec<ClsExample> = recs
        .iter()
        .map(|r| build_cls_example(&vocab, &cfg, &task, r).unwrap())
        .collect();
    let mut ft = FineTune::new(
        Model::new(ModelConfig::from_config(&cfg), 1).unwrap(),
        task.init_head(&cfg),
    );
    finetune_cls(&mut ft, &cfg, &data).unwrap();
    cls_metric(&predict_cls(&ft.model, &ft.head, &data).unwrap(), &data)
}

fn qa_triple_gap() -> f64 {
    let items = ["box", "lamp", "chair", "clock", "map", "boat", "key", "bag"];
    let recs: Vec<QaRecord> = (0..8)
        .map(|i| QaRecord {
            context: format!("The {} costs {i} dollars. The {} is red.", items[i], items[(i + 3) % 8]),
            question: format!("What does the {} cost?", items[i]),
            answer_start_token: 3,
            answer_end_token: 3,
        })
        .collect();
    let texts = recs.iter().flat_map(|r| [r.context.as_str(), r.question.as_str()]);
    let vocab = Vocab::build(texts, 500).unwrap();
    let cfg = head_config(vocab.len());
    let model = Model::new(ModelConfig::from_config(&cfg), 2).unwrap();
    let mut head = init_qa_head(&cfg);
    for p in head.iter_mut() {
        for (i, x) in p.value.data_mut().iter_mut().enumerate() {
            *x += (i as f32 * 0.37).sin();
        }
    }
    let mut worst = 0.0f64;
    for rec in &recs {
        let ex = build_qa_example(&vocab, &cfg, rec).unwrap();
        let mut g = Graph::<f32>::new();
        let vars = model.bind(&mut g);
        let hv: Vec<Var> = head.iter().map(|p| g.param(p.value.clone())).collect();
        let net = Net::new(&model, &vars).unwrap();
        let enc = net.encode(&mut g, [&ex.packed]).unwrap();
        let l = qa_logits(&mut g, &enc, 0, &ex, &hv).unwrap();
        let total = qa_loss(&mut g, &l, &ex).unwrap();
        let loss = f64::from(g.value(total).item());
        let ce = |v: Var, t: usize| {
            let z: Vec<f64> = g.value(v).data().iter().map(|&x| f64::from(x)).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln() - z[t]
        };
        let want = ce(l.start, ex.gold.0) + ce(l.end, ex.gold.1) + ce(l.sentence, ex.gold.2);
        worst = worst.max((loss - want).abs() / want.max(1.0));
    }
    worst
}

/// Brute-force neighbours in f64 with ties broken by row order.
fn neighbor_oracle(index: &EmbeddingIndex, q: usize, k: usize) -> Vec<(usize, f64)> {
    let row = |i: usize| -> Vec<f64> { index.row(i).iter().map(|&x| f64::from(x)).collect() };
    let a = row(q);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut all: Vec<(usize, f64)> = (0..index.len())
        .filter(|&i| i != q)
        .map(|i| {
            let b = row(i);
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let d = norm(&a) * norm(&b);
            (i, if d == 0.0 { 0.0 } else { dot / d })
        })
        .collect();
    all.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    all.truncate(k);
    all
}

fn probe_mismatches() -> (usize, usize) {
    let text = parse_prepared(&ordered_corpus(40, 5));
    let vocab = Vocab::build(text.iter().flatten().map(String::as_str), 1000).unwrap();
    let cfg = Config {
        vocab_size: vocab.len(),
        hidden: 24,
        heads: 2,
        ffn: 48,
        max_len: 64,
        ..Config::tiny()
    };
    let model = Model::new(ModelConfig::from_config(&cfg), 8).unwrap();
    let index = export_reps(&model, &cfg, &vocab, &text).unwrap();
    assert!(index.records.iter().all(|r: &ProbeRecord| !r.text.is_empty()));
    let mut r = stream(8, 0, 0);
    let mut bad = 0;
    for _ in 0..100 {
        let q = r.gen_range(0..index.len());
        let got = nearest_neighbors(&index, q, 5).unwrap();
        let want = neighbor_oracle(&index, q, 5);
        let same = got.len() == want.len()
            && got
                .iter()
                .zip(&want)
                .all(|(g, &(row, sim))| g.row == row && (g.similarity - sim).abs() < 1e-9);
        bad += usize::from(!same);
    }
    (bad, index.len())
}

#[test]
fn c8_heads() {
    let accuracy = toy_accuracy();
    let qa_gap = qa_triple_gap();
    let (probe_bad, rows) = probe_mismatches();
    let pass = accuracy == 1.0 && qa_gap <= 1e-6 && probe_bad == 0;
    report(
        8,
        "heads",
        pass,
        &format!(
            "toy train accuracy {accuracy:.3} after 200 steps; QA loss vs three CE terms {qa_gap:.1e}; {probe_bad}/100 probe queries differ from the f64 oracle over {rows} rows"
        ),
    );
    assert!(pass);
}

#[test]
fn c9_determinism() {
    let (cfg, docs) = small_pretrain_setup();
    let dir = tempfile::tempdir().unwrap();
    let a = pretrain(&cfg, &docs, &dir.path().join("a")).unwrap();
    let b = pretrain(&cfg, &docs, &dir.path().join("b")).unwrap();
    let (x, y) = (std::fs::read(&a.metrics).unwrap(), std::fs::read(&b.metrics).unwrap());
    let pass = x == y && !x.is_empty();
    report(
        9,
        "determinism",
        pass,
        &format!("metrics CSV of {} bytes, identical: {}", x.len(), x == y),
    );
    assert!(pass);
}
