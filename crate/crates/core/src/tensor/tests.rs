use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, grad_check_at, Objective};
use super::*;

fn t(rows: &[&[f32]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f32>::new();
    let i = g.input(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let b = g.input(t(&[&[3.0, 4.0], &[5.0, 6.0]]));
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.input(t(&[&[1.0, 2.0]]));
    let b = g.input(t(&[&[3.0], &[4.0]]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);

    let z = g.input(Tensor::zeros(&[2, 3]));
    let any = g.input(t(&[&[1.0, -2.0], &[3.5, 4.0], &[7.0, 0.25]]));
    let c = g.matmul(z, any).unwrap();
    assert_eq!(g.shape(c), &[2, 2]);
    assert!(g.value(c).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut g = Graph::<f32>::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(crate::SlmError::Dimension { .. })));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.input(t(&[&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0], &[1000.0, 0.0, 0.0]]));
    let y = g.softmax_rows(x).unwrap();
    let v = g.value(y);
    assert!(close(v.row(0), &[1.0 / 3.0; 3], 1e-6));
    assert!(close(v.row(1), &[0.09003, 0.24473, 0.66524], 1e-5));
    assert!(close(v.row(2), &[1.0, 0.0, 0.0], 1e-6));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f32>::new();
    let ones = g.input(Tensor::filled(&[2], 1.0));
    let zeros = g.input(Tensor::zeros(&[2]));
    let x = g.input(t(&[&[4.0, 4.0], &[1.0, 3.0]]));
    let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
    assert_eq!(g.value(y).row(0), &[0.0, 0.0]);
    assert!(close(g.value(y).row(1), &[-1.0, 1.0], 1e-6));

    let gamma0 = g.input(Tensor::zeros(&[2]));
    let beta = g.input(t(&[&[0.5, -2.0]]));
    let y = g.layer_norm(x, gamma0, beta, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -2.0, 0.5, -2.0]);
}

#[test]
fn gelu_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.input(t(&[&[0.0, 1.0, 10.0, -10.0]]));
    let y = g.gelu(x).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 0.8412).abs() < 1e-4);
    assert!((v[2] - 10.0).abs() < 1e-5);
    assert!(v[3].abs() < 1e-5);
}

#[test]
fn gelu_is_monotone_on_positive_range() {
    let xs: Vec<f32> = (0..2000).map(|i| -0.7 + i as f32 * 0.005).collect();
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::new(&[xs.len()], xs).unwrap());
    let y = g.gelu(x).unwrap();
    assert!(g.value(y).data().windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f32>::new();
    let u = g.input(Tensor::zeros(&[4]));
    let l = g.cross_entropy(u, 2).unwrap();
    assert!((g.value(l).item() - 4f32.ln()).abs() < 1e-6);

    let c = g.input(t(&[&[0.0, 30.0, 0.0]]));
    let l = g.cross_entropy(c, 1).unwrap();
    assert!(g.value(l).item() < 1e-6);

    let x = g.input(t(&[&[1.0, 2.0, 3.0]]));
    let l = g.cross_entropy(x, 2).unwrap();
    assert!((g.value(l).item() - 0.40761).abs() < 1e-5);

    assert!(matches!(g.cross_entropy(x, 3), Err(crate::SlmError::Index { .. })));
}

#[test]
fn cross_entropy_grad_is_softmax_minus_onehot() {
    let mut g = Graph::<f32>::new();
    let x = g.param(t(&[&[1.0, 2.0, 3.0]]));
    let l = g.cross_entropy(x, 0).unwrap();
    g.backward(l).unwrap();
    assert!(close(g.grad(x).unwrap(), &[0.09003 - 1.0, 0.24473, 0.66524], 1e-5));
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.param(t(&[&[1.0, -2.0, 3.0]]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::scalar(1.5));
    let sq = g.mul(x, x).unwrap();
    g.backward(sq).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[3.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::zeros(&[2, 2]));
    let y = g.gelu(x).unwrap();
    assert!(matches!(g.backward(y), Err(crate::SlmError::Contract(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::scalar(f32::MAX));
    let y = g.input(Tensor::scalar(f32::MAX));
    assert!(matches!(g.add(x, y), Err(crate::SlmError::NonFinite { .. })));
}

struct Composed {
    target: usize,
}

impl Objective for Composed {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: &[Var]) -> crate::Result<Var> {
        let h = g.matmul(p[0], p[1])?;
        let s = g.softmax_rows(h)?;
        let row = g.slice_rows(s, 1, 1)?;
        g.cross_entropy(row, self.target)
    }
}

#[test]
fn composed_matmul_softmax_ce_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = vec![random(&mut rng, &[3, 3], 1.0), random(&mut rng, &[3, 3], 1.0)];
    let r = grad_check(&Composed { target: 2 }, &params, 1e-3).unwrap();
    assert!(r.max_rel_err < 1e-3, "{r:?}");
}

struct Quadratic;

impl Objective for Quadratic {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: &[Var]) -> crate::Result<Var> {
        let sq = g.mul(p[0], p[0])?;
        let s = g.scale(sq, T::of(0.5))?;
        g.sum(s)
    }
}

struct Constant;

impl Objective for Constant {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: &[Var]) -> crate::Result<Var> {
        let z = g.scale(p[0], T::zero())?;
        let s = g.sum(z)?;
        let c = g.input(Tensor::scalar(T::of(2.5)));
        g.add(s, c)
    }
}

#[test]
fn grad_check_examples() {
    let params = vec![t(&[&[0.5, -1.25, 2.0, 3.0]])];
    let r = grad_check(&Quadratic, &params, 1e-3).unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
    let (_, grads) = gradcheck::analytic_grads::<f32, _>(&Constant, &params).unwrap();
    assert!(grads[0].iter().all(|g| g.abs() < 1e-12));
}

/// A composition touching every kernel used by the model.
struct Everything {
    layout: std::rc::Rc<AttnLayout>,
}

impl Objective for Everything {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: &[Var]) -> crate::Result<Var> {
        let x = g.gather_rows(p[0], &[0, 2, 1, 3, 2])?;
        let q = g.matmul(x, p[1])?;
        let k = g.matmul(x, p[2])?;
        let v = g.add_bias(x, p[3])?;
        let a = g.attention(q, k, v, self.layout.clone(), 0.0)?;
        let r = g.add(a, x)?;
        let n = g.layer_norm(r, p[4], p[3], 1e-5)?;
        let h = g.gelu(n)?;
        let c = g.concat_cols(&[h, x])?;
        let logits = g.matmul_nt(c, p[5])?;
        let ce = g.cross_entropy_rows(logits, &[1, 0, 2, 2, 1])?;
        let sm = g.softmax_rows(logits)?;
        let d = g.sub(sm, logits)?;
        let m = g.mean(d)?;
        let m2 = g.mul(m, m)?;
        g.add(ce, m2)
    }
}

#[test]
fn every_kernel_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let layout = std::rc::Rc::new(AttnLayout {
        heads: 2,
        segments: vec![
            AttnSegment::causal(0, 3),
            AttnSegment {
                k_valid: 1,
                ..AttnSegment::full(3, 2)
            },
        ],
    });
    let params = vec![
        random(&mut rng, &[4, 4], 1.0),
        random(&mut rng, &[4, 4], 1.0),
        random(&mut rng, &[4, 4], 1.0),
        random(&mut rng, &[4], 0.5),
        random(&mut rng, &[4], 1.5),
        random(&mut rng, &[3, 8], 1.0),
    ];
    let r = grad_check(&Everything { layout }, &params, 1e-3).unwrap();
    assert!(r.max_rel_err < 1e-3, "{r:?}");
}

#[test]
fn attention_rows_sum_to_one_over_unmasked_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f32>::new();
    let x = g.input(random(&mut rng, &[5, 4], 1.0));
    let layout = std::rc::Rc::new(AttnLayout {
        heads: 2,
        segments: vec![AttnSegment {
            k_valid: 3,
            ..AttnSegment::full(0, 5)
        }],
    });
    let a = g.attention(x, x, x, layout, 0.0).unwrap();
    let probs = g.attention_probs(a).unwrap();
    for row in probs.chunks(5) {
        let s: f32 = row[..3].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(row[3..].iter().all(|&p| p == 0.0));
    }
}

#[test]
fn dropout_is_identity_outside_training() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::filled(&[3, 3], 2.0));
    assert_eq!(g.dropout(x, 0.5).unwrap(), x);

    let mut g = Graph::<f32>::training(1);
    let x = g.input(Tensor::filled(&[100, 10], 1.0));
    let y = g.dropout(x, 0.5).unwrap();
    let kept = g.value(y).data().iter().filter(|&&v| v != 0.0).count();
    assert!((400..600).contains(&kept));
    assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f32>::new();
        let a = g.input(random(&mut rng, &[17, 33], 1.0));
        let b = g.input(random(&mut rng, &[33, 9], 1.0));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax_rows(c).unwrap();
        g.value(s).clone()
    };
    assert_eq!(run().data(), run().data());
}

struct RandomChain {
    targets: Vec<usize>,
}

impl Objective for RandomChain {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: &[Var]) -> crate::Result<Var> {
        let h = g.matmul(p[0], p[1])?;
        let h = g.gelu(h)?;
        // a larger eps keeps near-constant rows from amplifying f32 rounding
        let h = g.layer_norm(h, p[2], p[3], 1e-2)?;
        g.cross_entropy_rows(h, &self.targets)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(rows in proptest::collection::vec(
        proptest::collection::vec(-1000.0f32..1000.0, 1..64), 1..8)) {
        for row in rows {
            let mut g = Graph::<f32>::new();
            let n = row.len();
            let x = g.input(Tensor::new(&[1, n], row).unwrap());
            let y = g.softmax_rows(x).unwrap();
            let s: f64 = g.value(y).data().iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn random_compositions_match_finite_differences(
        seed in 0u64..10_000, m in 1usize..5, k in 1usize..6, n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            random(&mut rng, &[m, k], 1.0),
            random(&mut rng, &[k, n], 1.0),
            random(&mut rng, &[n], 1.0),
            random(&mut rng, &[n], 1.0),
        ];
        let targets = (0..m).map(|_| rng.gen_range(0..n)).collect();
        let f = RandomChain { targets };
        let r = grad_check_at::<f32, _>(&f, &params, 1e-5).unwrap();
        // Entries whose true gradient is ~0 are dominated by f32 rounding;
        // the f64 analytic pass pins the formulas themselves.
        let exact = grad_check_at::<f64, _>(&f, &params, 1e-5).unwrap();
        prop_assert!(exact.max_rel_err < 1e-5 || (exact.analytic - exact.numeric).abs() < 1e-9, "{:?}", exact);
        prop_assert!(r.max_rel_err < 1e-3 || (r.analytic - r.numeric).abs() < 1e-6, "{:?}", r);
    }
}
