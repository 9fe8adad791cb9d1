use approx::assert_abs_diff_eq;
use detr3d_autograd::gradcheck::{numeric_gradient, relative_error};
use detr3d_autograd::{BnMode, ConvGeom, Graph, Init, ParamStore, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t32(rows: &[&[f32]]) -> Tensor<f32> {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
}

#[test]
fn linear_identity_weight() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t32(&[&[1.0, 2.0]]));
    let w = g.constant(t32(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let b = g.constant(Tensor::zeros(&[2]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);
}

#[test]
fn linear_zero_weight_passes_bias() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t32(&[&[4.0, -1.0], &[0.5, 7.0], &[2.0, 2.0]]));
    let w = g.constant(Tensor::zeros(&[2, 2]));
    let b = g.constant(Tensor::new(&[2], vec![3.0, 3.0]).unwrap());
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[3.0; 6]);
}

#[test]
fn linear_hand_matmul() {
    // [1,2]·[[1,0],[2,1]] = [1+4, 0+2] = [5,2]; + [0,1] = [5,3]
    let mut g = Graph::<f32>::new();
    let x = g.constant(t32(&[&[1.0, 2.0]]));
    let w = g.constant(t32(&[&[1.0, 0.0], &[2.0, 1.0]]));
    let b = g.constant(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 3.0]);
}

#[test]
fn linear_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[2, 4]));
    let err = g.linear(x, w, None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
}

#[test]
fn gelu_reference_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[3], vec![0.0, 10.0, 1.0]).unwrap());
    let y = g.gelu(x);
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    assert_abs_diff_eq!(v[1], 10.0, epsilon = 1e-6);
    // x·Φ(x) at x = 1 from a 30-digit normal CDF
    assert_abs_diff_eq!(v[2], 0.841_344_746_068_543, epsilon = 1e-12);
}

#[test]
fn batchnorm_constant_batch_is_zero() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[4, 2], 3.5));
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let (y, stats) = g.batchnorm(x, gamma, beta, BnMode::Train).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    assert_eq!(stats.unwrap().mean, vec![3.5, 3.5]);
}

#[test]
fn batchnorm_eval_identity() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[2, 1], vec![0.7, -2.0]).unwrap());
    let gamma = g.constant(Tensor::ones(&[1]));
    let beta = g.constant(Tensor::zeros(&[1]));
    let (y, stats) = g
        .batchnorm(x, gamma, beta, BnMode::Eval { mean: &[0.0], var: &[1.0] })
        .unwrap();
    assert!(stats.is_none());
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert_abs_diff_eq!(g.value(y).data()[0], 0.7 * s, epsilon = 1e-15);
    assert_abs_diff_eq!(g.value(y).data()[0], 0.7, epsilon = 1e-5);
}

#[test]
fn batchnorm_two_rows() {
    // mean 2, biased var 1: (x - 2)/sqrt(1 + 1e-5)
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap());
    let gamma = g.constant(Tensor::ones(&[1]));
    let beta = g.constant(Tensor::zeros(&[1]));
    let (y, stats) = g.batchnorm(x, gamma, beta, BnMode::Train).unwrap();
    let d = 0.999_995_000_037_499_7;
    assert_abs_diff_eq!(g.value(y).data()[0], -d, epsilon = 1e-12);
    assert_abs_diff_eq!(g.value(y).data()[1], d, epsilon = 1e-12);
    // running statistics use the unbiased variance
    assert_eq!(stats.unwrap().var, vec![2.0]);
}

#[test]
fn batchnorm_rejects_empty_shape() {
    assert!(Tensor::<f32>::new(&[0, 3], vec![]).is_err());
}

#[test]
fn softmax_reference_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]));
    let y = g.softmax_rows(x);
    let v = g.value(y).data();
    assert_eq!(&v[..2], &[0.5, 0.5]);
    assert_abs_diff_eq!(v[2], 1.0, epsilon = 1e-9);
    assert_abs_diff_eq!(v[3], 0.0, epsilon = 1e-9);

    let x = g.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.softmax_rows(x);
    let want = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
    for (a, b) in g.value(y).data().iter().zip(want) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
    }
}

#[test]
fn backward_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let id = store.add("w", &[1], Init::Zeros, &mut rng).unwrap();
    store.get_mut(id).value = Tensor::new(&[1], vec![3.0]).unwrap();
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let sq = g.square(w);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param(&store, id), vec![6.0]);
}

#[test]
fn backward_bias_gradient_counts_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let w = store.add("w", &[2, 3], Init::UniformFanIn, &mut rng).unwrap();
    let b = store.add("b", &[3], Init::Zeros, &mut rng).unwrap();
    let unused = store.add("unused", &[5], Init::Ones, &mut rng).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[4, 2], 0.3));
    let (wv, bv) = (g.param(&store, w), g.param(&store, b));
    let y = g.linear(x, wv, Some(bv)).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param(&store, b), vec![4.0; 3]);
    assert_eq!(grads.param(&store, unused), vec![0.0; 5]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn nonfinite_is_attributed_to_op() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
    let _ok = g.exp(x);
    let y = g.log(x);
    let _after = g.abs(y);
    assert_eq!(g.first_nonfinite(), Some("log"));
    assert!(g.check_finite().is_err());
}

// ---- finite-difference checks for every op ----------------------------------

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Builds `sum(op(inputs) ⊙ R)` for fixed random `R` and compares the
/// gradient of every input against central differences.
fn fd_check<F>(inputs: Vec<Tensor<f64>>, seed: u64, op: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let run = |vals: &[Tensor<f64>]| -> (Graph<f64>, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let y = op(&mut g, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rand_tensor(&mut rng, g.shape(y), -1.0, 1.0);
        let r = g.constant(r);
        let prod = g.mul(y, r).unwrap();
        let loss = g.sum(prod);
        (g, vars, loss)
    };
    let (g, vars, loss) = run(&inputs);
    let grads = g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let idx: Vec<usize> = (0..inputs[k].numel()).collect();
        let numeric = numeric_gradient(inputs[k].data(), &idx, 1e-3, |x| {
            let mut vals = inputs.clone();
            vals[k] = Tensor::new(inputs[k].shape(), x.to_vec()).unwrap();
            let (g, _, l) = run(&vals);
            g.value(l).item()
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

const TOL: f64 = 1e-4;

#[test]
fn fd_matmul_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    let bt = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    let bias = rand_tensor(&mut rng, &[2], -1.0, 1.0);
    assert!(fd_check(vec![a.clone(), b.clone()], 2, |g, v| g.matmul(v[0], v[1]).unwrap()) < TOL);
    assert!(fd_check(vec![a.clone(), bt], 3, |g, v| g.matmul_nt(v[0], v[1]).unwrap()) < TOL);
    assert!(fd_check(vec![a.clone(), b, bias], 4, |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap()) < TOL);
    assert!(fd_check(vec![a], 5, |g, v| g.transpose(v[0]).unwrap()) < TOL);
}

#[test]
fn fd_binary_broadcasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 4], 0.5, 2.0);
    let same = rand_tensor(&mut rng, &[3, 4], 0.5, 2.0);
    let row = rand_tensor(&mut rng, &[1, 4], 0.5, 2.0);
    let col = rand_tensor(&mut rng, &[3, 1], 0.5, 2.0);
    let sc = rand_tensor(&mut rng, &[1], 0.5, 2.0);
    for b in [same, row, col, sc] {
        assert!(fd_check(vec![a.clone(), b.clone()], 6, |g, v| g.add(v[0], v[1]).unwrap()) < TOL);
        assert!(fd_check(vec![a.clone(), b.clone()], 7, |g, v| g.sub(v[0], v[1]).unwrap()) < TOL);
        assert!(fd_check(vec![a.clone(), b.clone()], 8, |g, v| g.mul(v[0], v[1]).unwrap()) < TOL);
        assert!(fd_check(vec![a.clone(), b.clone()], 9, |g, v| g.div(v[0], v[1]).unwrap()) < TOL);
    }
}

#[test]
fn fd_min_max_away_from_ties() {
    let a = Tensor::new(&[2, 2], vec![0.1, 0.9, -0.4, 0.3]).unwrap();
    let b = Tensor::new(&[2, 2], vec![0.5, 0.2, -0.8, 0.7]).unwrap();
    assert!(fd_check(vec![a.clone(), b.clone()], 10, |g, v| g.minimum(v[0], v[1]).unwrap()) < TOL);
    assert!(fd_check(vec![a, b], 11, |g, v| g.maximum(v[0], v[1]).unwrap()) < TOL);
}

#[test]
fn fd_unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[3, 3], -2.0, 2.0);
    let pos = rand_tensor(&mut rng, &[3, 3], 0.2, 2.0);
    let far = Tensor::new(&[1, 4], vec![-1.3, -0.4, 0.6, 1.7]).unwrap();
    assert!(fd_check(vec![x.clone()], 12, |g, v| g.gelu(v[0])) < TOL);
    assert!(fd_check(vec![x.clone()], 13, |g, v| g.exp(v[0])) < TOL);
    assert!(fd_check(vec![pos], 14, |g, v| g.log(v[0])) < TOL);
    assert!(fd_check(vec![x.clone()], 15, |g, v| g.sin(v[0])) < TOL);
    assert!(fd_check(vec![x.clone()], 16, |g, v| g.cos(v[0])) < TOL);
    assert!(fd_check(vec![x.clone()], 17, |g, v| g.neg(v[0])) < TOL);
    assert!(fd_check(vec![x.clone()], 18, |g, v| g.square(v[0])) < TOL);
    assert!(fd_check(vec![far.clone()], 19, |g, v| g.relu(v[0])) < TOL);
    assert!(fd_check(vec![far], 20, |g, v| g.abs(v[0])) < TOL);
    assert!(fd_check(vec![x.clone()], 21, |g, v| g.scale(v[0], -2.5)) < TOL);
    assert!(fd_check(vec![x], 22, |g, v| g.add_scalar(v[0], 0.7)) < TOL);
}

#[test]
fn fd_atan2() {
    let y = Tensor::new(&[1, 3], vec![0.3, -0.8, 0.1]).unwrap();
    let x = Tensor::new(&[1, 3], vec![1.2, 0.4, -0.9]).unwrap();
    assert!(fd_check(vec![y, x], 23, |g, v| g.atan2(v[0], v[1]).unwrap()) < TOL);
}

#[test]
fn fd_box_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let center = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
    let yaw = rand_tensor(&mut rng, &[3, 1], -3.0, 3.0);
    let log_size = rand_tensor(&mut rng, &[3, 3], -0.7, 0.5);
    let points = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
    let err = fd_check(vec![center, yaw, log_size, points], 41, |g, v| g.box_local(v[0], v[1], v[2], v[3]).unwrap());
    assert!(err < TOL, "{err}");
}

#[test]
fn box_local_quarter_turn() {
    let mut g = Graph::<f64>::new();
    let c = g.input(Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap());
    let y = g.input(Tensor::new(&[1, 1], vec![std::f64::consts::FRAC_PI_2]).unwrap());
    let ls = g.input(Tensor::new(&[1, 3], vec![2f64.ln(), 0.0, 0.0]).unwrap());
    let p = g.input(Tensor::new(&[1, 3], vec![1.0, 1.0, 0.5]).unwrap());
    let q = g.box_local(c, y, ls, p).unwrap();
    // the point sits along the box's local +x axis, one unit out, halved by size 2
    assert_abs_diff_eq!(g.value(q).data()[0], 0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(g.value(q).data()[1], 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(g.value(q).data()[2], 0.5, epsilon = 1e-12);
}

#[test]
fn fd_softmax_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[3, 5], -3.0, 3.0);
    assert!(fd_check(vec![x.clone()], 24, |g, v| g.softmax_rows(v[0])) < TOL);
    assert!(fd_check(vec![x.clone()], 25, |g, v| g.log_softmax_rows(v[0])) < TOL);
    assert!(fd_check(vec![x.clone()], 26, |g, v| g.sum_rows(v[0])) < TOL);
    assert!(fd_check(vec![x.clone()], 27, |g, v| g.sum_cols(v[0])) < TOL);
    assert!(fd_check(vec![x], 28, |g, v| g.mean(v[0])) < TOL);
}

#[test]
fn fd_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[6, 3], -2.0, 2.0);
    let gamma = rand_tensor(&mut rng, &[3], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    let train = fd_check(vec![x.clone(), gamma.clone(), beta.clone()], 29, |g, v| {
        g.batchnorm(v[0], v[1], v[2], BnMode::Train).unwrap().0
    });
    assert!(train < TOL, "{train}");
    let eval = fd_check(vec![x.clone(), gamma.clone(), beta.clone()], 30, |g, v| {
        g.batchnorm(v[0], v[1], v[2], BnMode::Eval { mean: &[0.1, -0.2, 0.3], var: &[0.5, 1.5, 2.0] })
            .unwrap()
            .0
    });
    assert!(eval < TOL, "{eval}");
    let ln = fd_check(vec![x, gamma, beta], 31, |g, v| g.layernorm(v[0], v[1], v[2]).unwrap());
    assert!(ln < TOL, "{ln}");
}

#[test]
fn fd_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    assert!(fd_check(vec![a.clone(), b.clone()], 32, |g, v| g.concat_cols(&[v[0], v[1]]).unwrap()) < TOL);
    assert!(fd_check(vec![b.clone()], 33, |g, v| g.slice_cols(v[0], 1, 2).unwrap()) < TOL);
    let c = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    assert!(fd_check(vec![b.clone(), c], 38, |g, v| g.concat_rows(&[v[0], v[1], v[0]]).unwrap()) < TOL);
    assert!(fd_check(vec![b.clone()], 39, |g, v| g.slice_rows(v[0], 1, 2).unwrap()) < TOL);
    assert!(fd_check(vec![b.clone()], 34, |g, v| g.reshape(v[0], &[2, 6]).unwrap()) < TOL);
    assert!(fd_check(vec![b.clone()], 35, |g, v| {
        g.gather_rows(v[0], 2, vec![0, 3, 1, 1, 2, 0], vec![0.25, 0.75, 1.0, 0.5, -1.0, 2.0])
            .unwrap()
    }) < TOL);
    // distinct values in each group keep the argmax away from ties
    let grouped = Tensor::new(&[4, 2], vec![0.1, 0.8, 0.5, -0.3, -0.2, 0.4, 0.9, 0.0]).unwrap();
    assert!(fd_check(vec![grouped], 36, |g, v| g.group_max(v[0], 2).unwrap()) < TOL);
    let geom = ConvGeom { h: 5, w: 4, c: 2, kernel: 3, stride: 2, pad: 1 };
    let img = rand_tensor(&mut rng, &[20, 2], -1.0, 1.0);
    assert!(fd_check(vec![img], 37, |g, v| g.im2col(v[0], geom).unwrap()) < TOL);
}

#[test]
fn parameter_used_twice_accumulates() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", &[3, 3], Init::UniformFanIn, &mut rng).unwrap();
    let x0 = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let build = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let wv = g.param(s, w);
        let h = g.matmul(x, wv).unwrap();
        let h = g.gelu(h);
        let wv2 = g.param(s, w);
        let y = g.matmul(h, wv2).unwrap();
        let y = g.square(y);
        let l = g.sum(y);
        Ok::<_, TensorError>((g, l))
    };
    let report = detr3d_autograd::gradcheck::check_params(&store, &[w], Default::default(), build).unwrap();
    assert!(report[0].rel_err < TOL, "{report:?}");
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Tensor<f32> = rand_tensor(&mut rng, &[17, 33], -1.0, 1.0).cast();
        let b: Tensor<f32> = rand_tensor(&mut rng, &[33, 9], -1.0, 1.0).cast();
        let mut g = Graph::new();
        let (a, b) = (g.constant(a), g.constant(b));
        let y = g.matmul(a, b).unwrap();
        let y = g.softmax_rows(y);
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in proptest::collection::vec(-1e4f64..1e4, 1..12)) {
        let mut g = Graph::<f32>::new();
        let n = row.len();
        let x = g.constant(Tensor::new(&[1, n], row.iter().map(|&v| v as f32).collect()).unwrap());
        let y = g.softmax_rows(x);
        let s: f64 = g.value(y).data().iter().map(|&v| v as f64).sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
    }
}
