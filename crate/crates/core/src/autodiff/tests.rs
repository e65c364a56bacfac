use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![3.0, 4.0]));
    let sq = tape.square(x).unwrap();
    let s = tape.sum(sq).unwrap();
    assert_eq!(tape.value(s).item().unwrap(), 25.0);
}

#[test]
fn logsumexp_of_zeros_is_ln2() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![0.0, 0.0]));
    let y = tape.logsumexp(x).unwrap();
    assert!((tape.value(y).item().unwrap() - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn identity_kernel_conv_is_noop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = random(&[2, 5, 4], &mut rng);
    let mut kernel = Tensor::zeros(&[2, 2, 1, 1]);
    kernel.data_mut()[0] = 1.0;
    kernel.data_mut()[3] = 1.0;
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let k = tape.leaf(kernel);
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.value(y), &input);
}

#[test]
fn square_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.square(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).item().unwrap(), 6.0);
}

#[test]
fn relu_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![-1.0, 2.0]));
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).data(), &[0.0, 1.0]);
}

#[test]
fn unused_nodes_get_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let unused = tape.leaf(Tensor::zeros(&[3, 2]));
    let y = tape.exp(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(unused), Tensor::zeros(&[3, 2]));
}

#[test]
fn errors_are_structured() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[2, 2]));
    match tape.add(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "add");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(matches!(
        tape.matmul(a, a),
        Err(Error::Shape { op: "matmul", .. })
    ));
    assert!(matches!(tape.log(a), Err(Error::Domain { op: "log", .. })));
    assert!(matches!(
        tape.sqrt(a),
        Err(Error::Domain { op: "sqrt", .. })
    ));
    assert!(tape.backward(a).is_err());
    let big = tape.leaf(Tensor::scalar(1000.0));
    assert!(matches!(tape.exp(big), Err(Error::NonFinite(_))));
}

#[test]
fn reshape_preserves_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[4, 6], &mut rng));
    let y = tape.reshape(x, &[2, 3, 4]).unwrap();
    assert_eq!(tape.value(x).sum(), tape.value(y).sum());
}

#[test]
fn conv_transpose_shape() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[2, 3, 4, 4]));
    let k = tape.leaf(Tensor::ones(&[3, 5, 2, 2]));
    let y = tape.conv_transpose2d(x, k, 2, 0).unwrap();
    assert_eq!(tape.shape(y), &[2, 5, 8, 8]);
    // non-overlapping 2x2 taps: every output sums the 3 input channels
    assert!(tape.value(y).data().iter().all(|&v| v == 3.0));
}

#[test]
fn gather_and_slice() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
    let g = tape.gather_rows(x, &[2, 0, 2]).unwrap();
    assert_eq!(tape.value(g).data(), &[5., 6., 1., 2., 5., 6.]);
    let s = tape.slice(x, 1, 1, 2).unwrap();
    assert_eq!(tape.value(s).data(), &[2., 4., 6.]);
    let total = tape.sum(g).unwrap();
    let grads = tape.backward(total).unwrap();
    assert_eq!(grads.wrt(x).data(), &[1., 1., 0., 0., 2., 2.]);
}

/// Three-layer tanh MLP checked against central differences.
#[test]
fn mlp_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[5, 4], &mut rng);
    let params = vec![
        random(&[4, 6], &mut rng),
        random(&[6], &mut rng),
        random(&[6, 6], &mut rng),
        random(&[6], &mut rng),
        random(&[6, 2], &mut rng),
    ];
    let loss = |ps: &[Tensor]| -> (Tape, Var, Vec<Var>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let xv = tape.leaf(x.clone());
        let mut h = tape.matmul(xv, vars[0]).unwrap();
        h = tape.add(h, vars[1]).unwrap();
        h = tape.tanh(h).unwrap();
        h = tape.matmul(h, vars[2]).unwrap();
        h = tape.add(h, vars[3]).unwrap();
        h = tape.tanh(h).unwrap();
        h = tape.matmul(h, vars[4]).unwrap();
        let sq = tape.square(h).unwrap();
        let l = tape.mean(sq).unwrap();
        (tape, l, vars)
    };
    let (tape, l, vars) = loss(&params);
    let grads = tape.backward(l).unwrap();
    let step = 1e-5;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.wrt(vars[pi]);
        let mut numeric = vec![0.0; p.numel()];
        for i in 0..p.numel() {
            let mut plus = params.clone();
            plus[pi].data_mut()[i] += step;
            let mut minus = params.clone();
            minus[pi].data_mut()[i] -= step;
            let (tp, lp, _) = loss(&plus);
            let (tm, lm, _) = loss(&minus);
            numeric[i] =
                (tp.value(lp).item().unwrap() - tm.value(lm).item().unwrap()) / (2.0 * step);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-5, "param {pi}: rel err {}", diff / norm);
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 3, 6, 6], &mut rng);
    let k = random(&[4, 3, 3, 3], &mut rng);
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let kv = tape.leaf(k.clone());
        let y = tape.conv2d(xv, kv, 2, 1).unwrap();
        let y = tape.tanh(y).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        (g.wrt(xv), g.wrt(kv))
    };
    assert_eq!(run(), run());
}
