use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use study_core::numkernel::{Graph, KernelError, MaskApplication, Real, Result, Tensor, Var};

fn t2(rows: &[&[f32]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn eval_one(build: impl FnOnce(&mut Graph<f32>) -> Result<Var>) -> Tensor {
    let mut g = Graph::new(&[]);
    let v = build(&mut g).unwrap();
    g.value(v).clone()
}

#[test]
fn matmul_identity_and_hand_cases() {
    let out = eval_one(|g| {
        let a = g.constant(t2(&[&[1., 0.], &[0., 1.]]))?;
        let b = g.constant(t2(&[&[3., 4.], &[5., 6.]]))?;
        g.matmul(a, b)
    });
    assert_eq!(out.data(), &[3., 4., 5., 6.]);

    let out = eval_one(|g| {
        let a = g.constant(t2(&[&[1., 2.]]))?;
        let b = g.constant(t2(&[&[3.], &[4.]]))?;
        g.matmul(a, b)
    });
    assert_eq!(out.shape(), &[1, 1]);
    assert_eq!(out.data(), &[11.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[4, 5], &mut rng).cast::<f32>();
    let b = random(&[5, 3], &mut rng).cast::<f32>();
    let out = eval_one(|g| {
        let x = g.constant(a.clone())?;
        let y = g.constant(b.clone())?;
        g.matmul(x, y)
    });
    for i in 0..4 {
        for j in 0..3 {
            let mut acc = 0.0f64;
            for k in 0..5 {
                acc += a.at(&[i, k]) as f64 * b.at(&[k, j]) as f64;
            }
            assert!((out.at(&[i, j]) as f64 - acc).abs() < 1e-6);
        }
    }
}

#[test]
fn batched_matmul_matches_per_batch_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(&[3, 2, 4], &mut rng).cast::<f32>();
    let b = random(&[3, 4, 5], &mut rng).cast::<f32>();
    let out = eval_one(|g| {
        let x = g.constant(a.clone())?;
        let y = g.constant(b.clone())?;
        g.matmul(x, y)
    });
    assert_eq!(out.shape(), &[3, 2, 5]);
    for bi in 0..3 {
        for i in 0..2 {
            for j in 0..5 {
                let acc: f64 = (0..4).map(|k| a.at(&[bi, i, k]) as f64 * b.at(&[bi, k, j]) as f64).sum();
                assert!((out.at(&[bi, i, j]) as f64 - acc).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn matmul_shape_mismatch_is_an_error() {
    let mut g: Graph<f32> = Graph::new(&[]);
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(g.matmul(a, b), Err(KernelError::Shape { .. })));
}

fn softmax_of(scores: &[f32], allow: &[bool], mode: MaskApplication) -> Result<Tensor> {
    let mut g: Graph<f32> = Graph::new(&[]);
    let x = g.constant(Tensor::new(vec![1, scores.len()], scores.to_vec())?)?;
    let y = g.masked_softmax(x, Arc::from(allow), mode)?;
    Ok(g.value(y).clone())
}

#[test]
fn masked_softmax_examples() {
    let pre = MaskApplication::PreSoftmax;
    let y = softmax_of(&[0., 0., 0.], &[true, true, true], pre).unwrap();
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
    let y = softmax_of(&[5., 100.], &[true, false], pre).unwrap();
    assert_eq!(y.data(), &[1.0, 0.0]);

    let y = softmax_of(&[1., 2., 3.], &[true, true, false], pre).unwrap();
    let (e1, e2) = (1f64.exp(), 2f64.exp());
    assert!((y.data()[0] as f64 - e1 / (e1 + e2)).abs() < 1e-6);
    assert!((y.data()[1] as f64 - e2 / (e1 + e2)).abs() < 1e-6);
    assert_eq!(y.data()[2], 0.0);
}

#[test]
fn masked_softmax_rows_renormalize_over_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(1..12);
        let scores: Vec<f32> = (0..n).map(|_| rng.random_range(-20.0..20.0)).collect();
        let mut allow: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let keep = rng.random_range(0..n);
        allow[keep] = true;
        let y = softmax_of(&scores, &allow, MaskApplication::PreSoftmax).unwrap();
        let total: f64 = y.data().iter().map(|&v| v as f64).sum();
        assert!((total - 1.0).abs() <= 1e-6);
        for (v, a) in y.data().iter().zip(&allow) {
            if !a {
                assert_eq!(*v, 0.0);
            }
        }
    }
}

#[test]
fn post_multiply_mode_leaves_rows_unnormalized() {
    let y = softmax_of(&[0., 0.], &[true, false], MaskApplication::PostMultiply).unwrap();
    assert!((y.data()[0] - 0.5).abs() < 1e-7);
    assert_eq!(y.data()[1], 0.0);
}

#[test]
fn all_disallowed_row_is_degenerate() {
    let err = softmax_of(&[1., 2.], &[false, false], MaskApplication::PreSoftmax).unwrap_err();
    assert_eq!(err, KernelError::DegenerateRow { row: 0 });
}

fn layer_norm_of(row: &[f32], eps: f64) -> Result<Tensor> {
    let w = row.len();
    let params = vec![Tensor::full(&[w], 1.0), Tensor::zeros(&[w])];
    let mut g = Graph::new(&params);
    let x = g.constant(Tensor::new(vec![1, w], row.to_vec())?)?;
    let y = g.layer_norm(x, g.param(0), g.param(1), eps)?;
    Ok(g.value(y).clone())
}

#[test]
fn layer_norm_examples() {
    let y = layer_norm_of(&[0.1, 0.1, 0.1], 1e-5).unwrap();
    assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

    let y = layer_norm_of(&[1., -1.], 1e-12).unwrap();
    assert!((y.data()[0] - 1.0).abs() < 1e-6 && (y.data()[1] + 1.0).abs() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let row: Vec<f32> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
    let y = layer_norm_of(&row, 1e-9).unwrap();
    let mean: f64 = y.data().iter().map(|&v| v as f64).sum::<f64>() / 64.0;
    let var: f64 = y.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 64.0;
    assert!(mean.abs() <= 1e-6);
    assert!((var - 1.0).abs() <= 1e-4);

    assert!(matches!(layer_norm_of(&[1., 2.], 0.0), Err(KernelError::Config(_))));
}

fn ce_of(logits: &[Vec<f32>], targets: &[usize], mask: &[bool]) -> Result<f32> {
    let mut g: Graph<f32> = Graph::new(&[]);
    let x = g.constant(Tensor::from_rows(logits)?)?;
    let l = g.cross_entropy_masked(x, targets, mask)?;
    Ok(g.value(l).item())
}

#[test]
fn cross_entropy_examples() {
    let certain = ce_of(&[vec![0., 200., 0.]], &[1], &[true]).unwrap();
    assert!(certain.abs() < 1e-6);

    let v = 7;
    let uniform = ce_of(&[vec![0.3; v]], &[4], &[true]).unwrap();
    assert!((uniform as f64 - (v as f64).ln()).abs() < 1e-6);

    let rows = vec![vec![1.0, 2.0, 0.5], vec![9.0, -3.0, 4.0]];
    let two = ce_of(&rows, &[0, 2], &[false, true]).unwrap();
    let z = 9f64.exp() + (-3f64).exp() + 4f64.exp();
    let expected = -(4f64.exp() / z).ln();
    assert!((two as f64 - expected).abs() < 1e-5);

    assert_eq!(ce_of(&rows, &[0, 2], &[false, false]), Err(KernelError::EmptyLoss));
}

#[test]
fn backward_simple_roots() {
    let params = vec![Tensor::new(vec![3], vec![1.0f32, -2.0, 0.5]).unwrap()];
    let mut g = Graph::new(&params);
    let x = g.param(0);
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap().into_param_grads(&params);
    assert_eq!(grads[0].data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new(&params);
    let x = g.param(0);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap().into_param_grads(&params);
    assert_eq!(grads[0].data(), &[2.0, -4.0, 1.0]);

    let g = Graph::new(&params);
    assert!(matches!(g.backward(g.param(0)), Err(KernelError::NonScalarRoot(_))));
}

// ---- finite-difference checks -------------------------------------------

#[derive(Clone, Copy, Debug)]
enum Case {
    MatMul,
    MatMulBatched,
    MatMulShared,
    MatMulNt,
    SoftmaxPre,
    SoftmaxPost,
    LayerNorm,
    Gelu,
    CrossEntropy,
    SliceConcat,
    Gather,
    AddBiasScale,
}

const ALLOW: [bool; 12] = [
    true, false, true, false, //
    true, true, false, false, //
    false, false, false, true,
];

fn case_shapes(case: Case) -> Vec<Vec<usize>> {
    match case {
        Case::MatMul => vec![vec![3, 4], vec![4, 2]],
        Case::MatMulBatched => vec![vec![2, 3, 4], vec![2, 4, 2]],
        Case::MatMulShared => vec![vec![2, 3, 4], vec![4, 2]],
        Case::MatMulNt => vec![vec![3, 4], vec![5, 4]],
        Case::SoftmaxPre | Case::SoftmaxPost => vec![vec![3, 4]],
        Case::LayerNorm => vec![vec![3, 5], vec![5], vec![5]],
        Case::Gelu => vec![vec![4, 3]],
        Case::CrossEntropy => vec![vec![3, 6]],
        Case::SliceConcat => vec![vec![3, 6]],
        Case::Gather => vec![vec![5, 3]],
        Case::AddBiasScale => vec![vec![3, 4], vec![4]],
    }
}

/// Scalar objective: weighted sum of the op output with fixed weights so
/// every output element contributes a distinct sensitivity.
fn objective<T: Real>(case: Case, params: &[Tensor<T>]) -> (T, Option<Vec<Tensor<T>>>) {
    let mut g = Graph::new(params);
    let p = |i| g.param(i);
    let (a, b, c) = (p(0), if params.len() > 1 { p(1) } else { p(0) }, if params.len() > 2 { p(2) } else { p(0) });
    let out = match case {
        Case::MatMul | Case::MatMulBatched | Case::MatMulShared => g.matmul(a, b),
        Case::MatMulNt => g.matmul_nt(a, b),
        Case::SoftmaxPre => g.masked_softmax(a, Arc::from(&ALLOW[..]), MaskApplication::PreSoftmax),
        Case::SoftmaxPost => g.masked_softmax(a, Arc::from(&ALLOW[..]), MaskApplication::PostMultiply),
        Case::LayerNorm => g.layer_norm(a, b, c, 1e-5),
        Case::Gelu => g.gelu(a),
        Case::CrossEntropy => g.cross_entropy_masked(a, &[2, 0, 5], &[true, false, true]),
        Case::SliceConcat => {
            let l = g.slice_cols(a, 0, 2).unwrap();
            let r = g.slice_cols(a, 3, 3).unwrap();
            g.concat_cols(&[r, l, r])
        }
        Case::Gather => g.gather(a, &[4, 1, 1, 0]),
        Case::AddBiasScale => {
            let s = g.add_bias(a, b).unwrap();
            let t = g.scale(s, T::from_f64(-1.7)).unwrap();
            g.add(t, a)
        }
    }
    .unwrap();
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let weights = Tensor::new(shape, (0..n).map(|i| T::from_f64(((i * 7 + 3) % 11) as f64 / 11.0 - 0.4)).collect())
        .unwrap();
    let w = g.constant(weights).unwrap();
    let prod = g.mul(out, w).unwrap();
    let root = g.sum(prod).unwrap();
    let value = g.value(root).item();
    let grads = g.backward(root).ok().map(|gr| gr.into_param_grads(params));
    (value, grads)
}

fn max_relative_error(case: Case, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params64: Vec<Tensor<f64>> = case_shapes(case).iter().map(|s| random(s, &mut rng)).collect();
    let params32: Vec<Tensor<f32>> = params64.iter().map(|t| t.cast()).collect();
    let analytic = objective(case, &params32).1.unwrap();
    // replay at the exact f32 inputs in f64
    let base: Vec<Tensor<f64>> = params32.iter().map(|t| t.cast()).collect();
    let h = 1e-3;
    let mut worst = 0.0f64;
    for (pi, p) in base.iter().enumerate() {
        for k in 0..p.len() {
            let mut plus = base.clone();
            plus[pi].data_mut()[k] += h;
            let mut minus = base.clone();
            minus[pi].data_mut()[k] -= h;
            let fd = (objective(case, &plus).0 - objective(case, &minus).0) / (2.0 * h);
            let an = analytic[pi].data()[k] as f64;
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(GRAD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// Relative errors are measured against max(|analytic|, |numeric|, floor)
/// so entries whose true gradient is near zero are compared absolutely.
const GRAD_FLOOR: f64 = 1e-2;

#[test]
fn every_op_passes_finite_difference_check() {
    let cases = [
        Case::MatMul,
        Case::MatMulBatched,
        Case::MatMulShared,
        Case::MatMulNt,
        Case::SoftmaxPre,
        Case::SoftmaxPost,
        Case::LayerNorm,
        Case::Gelu,
        Case::CrossEntropy,
        Case::SliceConcat,
        Case::Gather,
        Case::AddBiasScale,
    ];
    for case in cases {
        for seed in 0..3 {
            let err = max_relative_error(case, seed);
            assert!(err <= 1e-3, "{case:?} seed {seed}: max relative error {err:e}");
        }
    }
}

#[test]
fn ops_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params: Vec<Tensor> = case_shapes(Case::LayerNorm).iter().map(|s| random(s, &mut rng).cast()).collect();
        let (v, g) = objective(Case::LayerNorm, &params);
        (v.to_bits(), g.unwrap().iter().flat_map(|t| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn dropout_zero_rate_is_identity() {
    let mut g: Graph<f32> = Graph::new(&[]);
    let x = g.constant(Tensor::full(&[2, 2], 3.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = g.dropout(x, 0.0, &mut rng).unwrap();
    assert_eq!(x, y);
    let z = g.dropout(x, 0.5, &mut rng).unwrap();
    for &v in g.value(z).data() {
        assert!(v == 0.0 || v == 6.0);
    }
}

#[test]
fn non_finite_inputs_are_rejected() {
    let mut g: Graph<f32> = Graph::new(&[]);
    assert_eq!(
        g.constant(Tensor::full(&[2], f32::NAN)).unwrap_err(),
        KernelError::NonFinite("constant")
    );
    let x = g.constant(Tensor::full(&[1, 2], 3e38)).unwrap();
    assert!(matches!(g.add(x, x), Err(KernelError::NonFinite("add"))));
}
