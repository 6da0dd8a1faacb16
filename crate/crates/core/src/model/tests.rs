use super::*;
use crate::masking::MaskedExample;
use crate::rng::stream;
use crate::shuffle::{sample_permutation, PositionMode};
use crate::text::{pack_example, Document, PackOptions, PackedExample};

pub(crate) fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 30,
        hidden: 16,
        enc_layers: 2,
        dec_layers: 1,
        heads: 2,
        ffn: 32,
        max_len: 32,
        max_sentences: 4,
        dropout: 0.0,
        attn_dropout: 0.0,
        layer_norm_eps: 1e-12,
        init_std: 0.02,
    }
}

fn example(lens: &[usize], opts: PackOptions) -> PackedExample {
    let mut next = 6;
    let doc = Document::new(
        lens.iter()
            .map(|&n| {
                let s = (next..next + n).collect();
                next += n;
                s
            })
            .collect(),
    )
    .unwrap();
    pack_example(&doc, opts, &mut stream(0, 0, 0)).unwrap()
}

fn opts(cfg: &ModelConfig) -> PackOptions {
    PackOptions {
        max_len: cfg.max_len,
        max_sentences: cfg.max_sentences,
        sentence_tokens: true,
    }
}

fn rows_of(g: &Graph<f64>, v: Var) -> Vec<Vec<f64>> {
    g.value(v).to_rows()
}

#[test]
fn single_token_embedding_is_the_hand_sum() {
    let cfg = ModelConfig {
        enc_layers: 0,
        ..small_config()
    };
    let model = Model::new(cfg, 3).unwrap();
    let mut g = Graph::<f64>::new();
    let vars = model.bind(&mut g);
    let net = Net::new(&model, &vars).unwrap();
    let rows = PackedRows {
        token_ids: vec![7],
        position_ids: vec![2],
        sentence_ids: vec![1],
        segment_ids: vec![0],
        offsets: vec![0],
        lens: vec![1],
    };
    let h = net.embed(&mut g, &rows).unwrap();
    let p = model.params.by_name();
    let d = cfg.hidden;
    let sum: Vec<f64> = (0..d)
        .map(|j| {
            (p["emb.token"].row(7)[j]
                + p["emb.position"].row(2)[j]
                + p["emb.sentence"].row(1)[j]
                + p["emb.segment"].row(0)[j]) as f64
        })
        .collect();
    let mean = sum.iter().sum::<f64>() / d as f64;
    let var = sum.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
    for (j, &got) in g.value(h).data().iter().enumerate() {
        let want = (sum[j] - mean) / (var + cfg.layer_norm_eps).sqrt();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn zero_layer_encoder_is_identity() {
    let cfg = ModelConfig {
        enc_layers: 0,
        ..small_config()
    };
    let model = Model::new(cfg, 1).unwrap();
    let ex = example(&[2, 3], opts(&cfg));
    let mut g = Graph::<f64>::new();
    let vars = model.bind(&mut g);
    let net = Net::new(&model, &vars).unwrap();
    let rows = PackedRows::new([&ex]);
    let h0 = net.embed(&mut g, &rows).unwrap();
    let h = net.encode_rows(&mut g, h0, &rows).unwrap();
    assert_eq!(h, h0);
}

#[test]
fn encoder_is_permutation_equivariant() {
    let cfg = small_config();
    let model = Model::new(cfg, 5).unwrap();
    let ex = example(&[3, 2, 4], opts(&cfg));
    let rows = PackedRows::new([&ex]);
    let n = rows.total();
    let perm = sample_permutation(n, &mut stream(2, 0, 0));
    let permuted = PackedRows {
        token_ids: perm.iter().map(|&i| rows.token_ids[i]).collect(),
        position_ids: perm.iter().map(|&i| rows.position_ids[i]).collect(),
        sentence_ids: perm.iter().map(|&i| rows.sentence_ids[i]).collect(),
        segment_ids: perm.iter().map(|&i| rows.segment_ids[i]).collect(),
        ..rows.clone()
    };
    let run = |r: &PackedRows| {
        let mut g = Graph::<f32>::new();
        let vars = model.bind(&mut g);
        let net = Net::new(&model, &vars).unwrap();
        let h0 = net.embed(&mut g, r).unwrap();
        let h = net.encode_rows(&mut g, h0, r).unwrap();
        g.value(h).to_rows()
    };
    let a = run(&rows);
    let b = run(&permuted);
    for (k, &i) in perm.iter().enumerate() {
        for (x, y) in a[i].iter().zip(&b[k]) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn summary_rows_are_exact_copies() {
    let cfg = small_config();
    let model = Model::new(cfg, 1).unwrap();
    let two = example(&[2, 3], opts(&cfg));
    let four = example(&[1, 1, 2, 1], opts(&cfg));
    let mut g = Graph::<f64>::new();
    let vars = model.bind(&mut g);
    let net = Net::new(&model, &vars).unwrap();
    let enc = net.encode(&mut g, [&two, &four]).unwrap();
    let (c, offsets) = net.extract_summary(&mut g, &enc, [&two, &four]).unwrap();
    assert_eq!(g.shape(c), &[4 + 6, 16]);
    assert_eq!(offsets, vec![0, 4]);
    let h = rows_of(&g, enc.h);
    let c = rows_of(&g, c);
    for (k, i) in four.summary_indices().unwrap().into_iter().enumerate() {
        assert_eq!(c[4 + k], h[enc.row(1, i)]);
    }
}

#[test]
fn one_sentence_decodes_in_two_steps() {
    let cfg = small_config();
    let model = Model::new(cfg, 1).unwrap();
    let ex = example(&[3], opts(&cfg));
    let mut g = Graph::<f64>::new();
    let vars = model.bind(&mut g);
    let net = Net::new(&model, &vars).unwrap();
    let enc = net.encode(&mut g, [&ex]).unwrap();
    let (c, off) = net.extract_summary(&mut g, &enc, [&ex]).unwrap();
    let dec = net.decode_sequence(&mut g, c, &off, &[3], &[vec![1, 2]]).unwrap();
    assert_eq!(dec.steps, vec![2]);
    assert!(net.decode_sequence(&mut g, c, &off, &[3], &[vec![1]]).is_err());
    let mut gg = Graph::<f32>::new();
    let vars = model.bind(&mut gg);
    let net = Net::new(&model, &vars).unwrap();
    let enc = net.encode(&mut gg, [&ex]).unwrap();
    let (c, _) = net.extract_summary(&mut gg, &enc, [&ex]).unwrap();
    assert_eq!(greedy_unshuffle(&net, &mut gg, c, 0, 1).unwrap(), vec![0]);
}

#[test]
fn zero_layer_decoder_copies_inputs() {
    let cfg = ModelConfig {
        dec_layers: 0,
        ..small_config()
    };
    let model = Model::new(cfg, 1).unwrap();
    let mut g = Graph::<f64>::new();
    let vars = model.bind(&mut g);
    let net = Net::new(&model, &vars).unwrap();
    let c = g.input(Tensor::new(&[4, 16], (0..64).map(f64::from).collect()).unwrap());
    let dec = net.decode_sequence(&mut g, c, &[0], &[4], &[vec![2, 1, 3]]).unwrap();
    let c_rows = rows_of(&g, c);
    assert_eq!(
        rows_of(&g, dec.w),
        vec![c_rows[0].clone(), c_rows[2].clone(), c_rows[1].clone()]
    );
}

/// With cross-attention removed, step `i` depends only on inputs `0..=i`.
#[test]
fn decoder_self_attention_is_causal() {
    let cfg = small_config();
    let mut model = Model::new(cfg, 8).unwrap();
    for p in model.params.iter_mut() {
        if p.name.starts_with("dec.0.cross.v") || p.name.starts_with("dec.0.cross.o") {
            p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let run = |c_data: Vec<f64>| {
        let mut g = Graph::<f64>::new();
        let vars = model.bind(&mut g);
        let net = Net::new(&model, &vars).unwrap();
        let c = g.input(Tensor::new(&[5, 16], c_data).unwrap());
        let dec = net.decode_sequence(&mut g, c, &[0], &[5], &[vec![1, 2, 3, 4]]).unwrap();
        rows_of(&g, dec.w)
    };
    let base: Vec<f64> = (0..80).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
    let mut bumped = base.clone();
    // row 3 feeds step 3 only
    for x in &mut bumped[3 * 16..4 * 16] {
        *x += 1.5;
    }
    let (a, b) = (run(base), run(bumped));
    for i in 0..3 {
        assert_eq!(a[i], b[i], "step {i}");
    }
    assert_ne!(a[3], b[3]);
}

#[test]
fn pointer_row_orthogonal_to_candidates_is_uniform() {
    let mut g = Graph::<f64>::new();
    let w = g.input(Tensor::new(&[1, 3], vec![0.0, 0.0, 1.0]).unwrap());
    let c = g.input(
        Tensor::new(
            &[4, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0, 3.0, 0.0, -1.0, 1.0, 0.0],
        )
        .unwrap(),
    );
    let s = pointer_scores(&mut g, w, c).unwrap();
    let p = g.softmax_rows(s).unwrap();
    for &x in g.value(p).data() {
        assert!((x - 0.25).abs() < 1e-12);
    }
}

#[test]
fn greedy_output_is_a_permutation_near_chance_when_untrained() {
    let cfg = small_config();
    let model = Model::new(cfg, 11).unwrap();
    let mut exact = 0;
    let trials = 480;
    for t in 0..trials {
        let mut m = MaskedExample::unmasked(example(&[2, 3, 1, 2], opts(&cfg)));
        let perm = sample_permutation(4, &mut stream(t, 9, 0));
        let phys = crate::shuffle::physical_shuffle(&m, &perm, PositionMode::Resequence).unwrap();
        m = phys;
        let mut g = Graph::<f32>::new();
        let vars = model.bind(&mut g);
        let net = Net::new(&model, &vars).unwrap();
        let enc = net.encode(&mut g, [&m.example]).unwrap();
        let (c, _) = net.extract_summary(&mut g, &enc, [&m.example]).unwrap();
        let order = greedy_unshuffle(&net, &mut g, c, 0, 4).unwrap();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        exact += usize::from(order == perm);
    }
    // chance is 1/24 = 20 of 480; allow a wide band for a fixed random net
    assert!(exact < 80, "{exact}");
}

#[test]
fn decoder_is_lightweight_at_reference_scale() {
    let cfg = ModelConfig::from_config(&crate::config::Config::paper());
    let model = Model::new(cfg, 0).unwrap();
    let ratio = model.decoder_param_count() as f64 / model.encoder_param_count() as f64;
    assert!(ratio < 0.30, "{ratio}");
}

#[test]
fn from_params_reports_missing_names() {
    let cfg = small_config();
    let model = Model::new(cfg, 1).unwrap();
    let mut store = model.params.clone();
    store.take("mlm.bias");
    store.take("dec.0.ln3.gamma");
    match Model::from_params(cfg, store) {
        Err(crate::SlmError::MissingTensors(names)) => {
            assert_eq!(names, vec!["mlm.bias".to_string(), "dec.0.ln3.gamma".to_string()])
        }
        other => panic!("{other:?}"),
    }
    let back = Model::from_params(cfg, model.params.clone()).unwrap();
    assert_eq!(back.params, model.params);
}
