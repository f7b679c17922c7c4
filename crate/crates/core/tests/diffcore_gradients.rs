use hba_flow::diffcore::check::{finite_diff_gradient, relative_error, DEFAULT_STEP};
use hba_flow::diffcore::{Array, DiffError, Tape, Var};
use proptest::prelude::*;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>;

/// Scalarize an op output with fixed weights so every output entry matters.
fn weighted_loss(tape: &mut Tape, out: Var) -> Var {
    let n = tape.value(out).len();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 7 + 3) % 11) as f64 / 11.0).collect();
    let w = tape.constant(Array::new(tape.shape(out).to_vec(), w).unwrap());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn eval(build: &Build, inputs: &[Array]) -> Result<f64, DiffError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.constant(a.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = weighted_loss(&mut tape, out);
    Ok(tape.value(loss).item())
}

fn max_rel_error(build: &Build, inputs: &[Array]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = weighted_loss(&mut tape, out);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let numeric = finite_diff_gradient(
            |probe| {
                let mut probed = inputs.to_vec();
                probed[k] = probe.clone();
                eval(build, &probed)
            },
            input,
            DEFAULT_STEP,
        )
        .unwrap();
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            worst = worst.max(relative_error(*a, *n, 1e-6));
        }
    }
    worst
}

fn arr(shape: &[usize], vals: &[f64]) -> Array {
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), vals[..n].to_vec()).unwrap()
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn positive(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.5f64..3.0, n)
}

const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn add_sub_mul_broadcast(a in vals(12), b in vals(4)) {
        let inputs = [arr(&[3, 4], &a), arr(&[4], &b)];
        prop_assert!(max_rel_error(&|t, v| t.add(v[0], v[1]), &inputs) < TOL);
        prop_assert!(max_rel_error(&|t, v| t.sub(v[0], v[1]), &inputs) < TOL);
        prop_assert!(max_rel_error(&|t, v| t.mul(v[0], v[1]), &inputs) < TOL);
    }

    #[test]
    fn div_broadcast(a in vals(6), b in positive(3)) {
        let inputs = [arr(&[2, 3], &a), arr(&[3], &b)];
        prop_assert!(max_rel_error(&|t, v| t.div(v[0], v[1]), &inputs) < TOL);
    }

    #[test]
    fn elementwise_unary(a in vals(5), p in positive(5)) {
        let x = [arr(&[5], &a)];
        prop_assert!(max_rel_error(&|t, v| Ok(t.exp(v[0])), &x) < TOL);
        prop_assert!(max_rel_error(&|t, v| Ok(t.tanh(v[0])), &x) < TOL);
        prop_assert!(max_rel_error(&|t, v| Ok(t.sigmoid(v[0])), &x) < TOL);
        prop_assert!(max_rel_error(&|t, v| Ok(t.square(v[0])), &x) < TOL);
        prop_assert!(max_rel_error(&|t, v| Ok(t.neg(v[0])), &x) < TOL);
        prop_assert!(max_rel_error(&|t, v| Ok(t.scale(v[0], -1.7)), &x) < TOL);
        prop_assert!(max_rel_error(&|t, v| Ok(t.add_scalar(v[0], 0.4)), &x) < TOL);
        prop_assert!(max_rel_error(&|t, v| Ok(t.log(v[0])), &[arr(&[5], &p)]) < TOL);
    }

    #[test]
    fn clamp_interior(a in prop::collection::vec(-0.9f64..0.9, 4)) {
        prop_assert!(max_rel_error(&|t, v| Ok(t.clamp(v[0], -1.0, 1.0)), &[arr(&[4], &a)]) < TOL);
    }

    #[test]
    fn affine_matrix_vector(x in vals(6), w in vals(12), b in vals(4)) {
        let inputs = [arr(&[2, 3], &x), arr(&[4, 3], &w), arr(&[4], &b)];
        prop_assert!(max_rel_error(&|t, v| t.affine(v[0], v[1], v[2]), &inputs) < TOL);
    }

    #[test]
    fn dilated_conv(x in vals(2 * 2 * 7), w in vals(3 * 2 * 3), b in vals(3), dil in 1usize..4) {
        let inputs = [arr(&[2, 2, 7], &x), arr(&[3, 2, 3], &w), arr(&[3], &b)];
        prop_assert!(max_rel_error(&move |t, v| t.conv1d(v[0], v[1], v[2], dil), &inputs) < TOL);
    }

    #[test]
    fn structural_ops(a in vals(12), b in vals(12)) {
        let inputs = [arr(&[2, 2, 3], &a), arr(&[2, 2, 3], &b)];
        prop_assert!(max_rel_error(&|t, v| t.concat(&[v[0], v[1]], 1), &inputs) < TOL);
        prop_assert!(max_rel_error(&|t, v| t.interleave(v[0], v[1]), &inputs) < TOL);
        let uneven = [arr(&[2, 2, 3], &a), arr(&[2, 2, 2], &b[..8])];
        prop_assert!(max_rel_error(&|t, v| t.interleave(v[0], v[1]), &uneven) < TOL);
        let one = [arr(&[2, 2, 3], &a)];
        prop_assert!(max_rel_error(&|t, v| t.slice(v[0], 2, 1, 2, 1), &one) < TOL);
        prop_assert!(max_rel_error(&|t, v| t.slice(v[0], 2, 0, 2, 2), &one) < TOL);
        prop_assert!(max_rel_error(&|t, v| Ok(t.sum(v[0])), &one) < TOL);
        prop_assert!(max_rel_error(&|t, v| Ok(t.mean(v[0])), &one) < TOL);
        prop_assert!(max_rel_error(&|t, v| t.sum_axis(v[0], 1), &one) < TOL);
        prop_assert!(max_rel_error(&|t, v| t.mean_axis(v[0], 2), &one) < TOL);
        prop_assert!(max_rel_error(&|t, v| t.reshape(v[0], &[4, 3]), &one) < TOL);
        let small = [arr(&[2, 1, 3], &a)];
        prop_assert!(max_rel_error(&|t, v| t.broadcast_to(v[0], &[2, 4, 3]), &small) < TOL);
    }
}

#[test]
fn forward_examples() {
    let mut t = Tape::new();
    let a = t.constant(Array::from_vec(vec![1.0, 2.0]));
    let b = t.constant(Array::from_vec(vec![3.0, 4.0]));
    let s = t.add(a, b).unwrap();
    assert_eq!(t.value(s).data(), &[4.0, 6.0]);

    let x = t.constant(Array::new(vec![1, 1, 2], vec![5.0, 7.0]).unwrap());
    let w = t.constant(Array::new(vec![1, 1, 1], vec![1.0]).unwrap());
    let bias = t.constant(Array::scalar(0.0));
    let y = t.conv1d(x, w, bias, 2).unwrap();
    assert_eq!(t.value(y).data(), &[5.0, 7.0]);

    let z = t.constant(Array::scalar(0.0));
    let sg = t.sigmoid(z);
    assert_eq!(t.value(sg).item(), 0.5);
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.param(Array::scalar(3.0));
    let sq = t.mul(x, x).unwrap();
    assert_eq!(t.backward(sq).unwrap().wrt(x).item(), 6.0);

    let mut t = Tape::new();
    let x = t.param(Array::from_vec(vec![0.0, 0.0]));
    let e = t.exp(x);
    let s = t.sum(e);
    assert_eq!(t.backward(s).unwrap().wrt(x).data(), &[1.0, 1.0]);

    // d/dx log(sigmoid(x)) = 1 - sigmoid(x) = 0.5 at 0
    let mut t = Tape::new();
    let x = t.param(Array::scalar(0.0));
    let sg = t.sigmoid(x);
    let l = t.log(sg);
    let g = t.backward(l).unwrap().wrt(x).item();
    assert!((g - 0.5).abs() < 1e-15);
    let fd = finite_diff_gradient(
        |p| {
            let s = 1.0 / (1.0 + (-p.item()).exp());
            Ok::<_, DiffError>(s.ln())
        },
        &Array::scalar(0.0),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!((fd.item() - 0.5).abs() < 1e-9);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut t = Tape::new();
    let x = t.param(Array::from_vec(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(DiffError::Contract(_))));
}

#[test]
fn shape_error_names_op_and_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Array::zeros(&[2, 3]));
    let b = t.constant(Array::zeros(&[2]));
    let err = t.add(a, b).unwrap_err();
    assert_eq!(
        err,
        DiffError::Shape {
            op: "add",
            lhs: vec![2, 3],
            rhs: vec![2]
        }
    );
    assert!(err.to_string().contains("add"));
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut t = Tape::new();
    let x = t.param(Array::scalar(1.0));
    let unused = t.param(Array::from_vec(vec![1.0, 2.0]));
    let y = t.square(x);
    let g = t.backward(y).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut t = Tape::new();
        let x = t.constant(Array::new(vec![1, 2, 5], (0..10).map(|i| i as f64 * 0.37).collect()).unwrap());
        let w = t.constant(Array::new(vec![3, 2, 3], (0..18).map(|i| (i as f64).sin()).collect()).unwrap());
        let b = t.constant(Array::from_vec(vec![0.1, 0.2, 0.3]));
        let y = t.conv1d(x, w, b, 2).unwrap();
        let y = t.tanh(y);
        t.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
