use globalmind::gradcheck::{grad_check, DEFAULT_STEP};
use globalmind::kernels::LAYER_NORM_EPS;
use globalmind::{Error, ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_dot() {
    let mut tape = Tape::new();
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
    let p = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

    let r = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
    let c = tape.constant(t(&[2, 1], &[3.0, 4.0])).unwrap();
    let d = tape.matmul(r, c).unwrap();
    assert_eq!(tape.value(d).data(), &[11.0]);
}

#[test]
fn batched_matmul_matches_single_slices() {
    let a: Vec<f64> = (0..9).map(|i| i as f64 * 0.3 - 1.0).collect();
    let b: Vec<f64> = (0..9).map(|i| 2.0 - i as f64 * 0.1).collect();
    let mut tape = Tape::new();
    let single = {
        let (x, y) = (tape.constant(t(&[3, 3], &a)).unwrap(), tape.constant(t(&[3, 3], &b)).unwrap());
        let p = tape.matmul(x, y).unwrap();
        tape.value(p).data().to_vec()
    };
    let aa = [a.clone(), a].concat();
    let bb = [b.clone(), b].concat();
    let x = tape.constant(t(&[2, 3, 3], &aa)).unwrap();
    let y = tape.constant(t(&[2, 3, 3], &bb)).unwrap();
    let p = tape.matmul(x, y).unwrap();
    assert_eq!(&tape.value(p).data()[..9], single.as_slice());
    assert_eq!(&tape.value(p).data()[9..], single.as_slice());
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[4, 2])).unwrap();
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn conv_examples() {
    let mut tape = Tape::<f64>::new();
    // identity 1×1 map
    let x = tape.constant(Tensor::from_fn(&[3, 2, 2], |i| i as f64 - 4.0)).unwrap();
    let w = tape.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2])).unwrap();
    let y = tape.conv2d_same(x, w, b).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    // overlap counts with zero padding
    let ones = tape.constant(Tensor::ones(&[4, 4, 1])).unwrap();
    let k = tape.constant(Tensor::ones(&[3, 3, 1, 1])).unwrap();
    let zb = tape.constant(Tensor::zeros(&[1])).unwrap();
    let y = tape.conv2d_same(ones, k, zb).unwrap();
    let v = tape.value(y);
    assert_eq!(v.at(&[0, 0, 0]), 4.0);
    assert_eq!(v.at(&[3, 3, 0]), 4.0);
    assert_eq!(v.at(&[0, 1, 0]), 6.0);
    assert_eq!(v.at(&[1, 1, 0]), 9.0);
    assert_eq!(v.at(&[2, 2, 0]), 9.0);

    // bias only
    let w0 = tape.constant(Tensor::zeros(&[5, 5, 2, 3])).unwrap();
    let cb = tape.constant(Tensor::full(&[3], 2.5)).unwrap();
    let y = tape.conv2d_same(x, w0, cb).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
}

#[test]
fn conv_config_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[3, 3, 2])).unwrap();
    let even = tape.constant(Tensor::zeros(&[2, 2, 2, 1])).unwrap();
    let b = tape.constant(Tensor::zeros(&[1])).unwrap();
    assert!(matches!(tape.conv2d_same(x, even, b), Err(Error::Config(_))));
    let wrong_cin = tape.constant(Tensor::zeros(&[3, 3, 4, 1])).unwrap();
    assert!(matches!(tape.conv2d_same(x, wrong_cin, b), Err(Error::Config(_))));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[4])).unwrap();
    let s = tape.softmax_lastdim(x).unwrap();
    assert_eq!(tape.value(s).data(), &[0.25; 4]);
    let x = tape.constant(t(&[2], &[1000.0, 0.0])).unwrap();
    let s = tape.softmax_lastdim(x).unwrap();
    assert!((tape.value(s).data()[0] - 1.0).abs() < 1e-12);
    assert!(tape.value(s).data()[1] < 1e-300);
    let x = tape.constant(t(&[2], &[2f64.ln(), 0.0])).unwrap();
    let s = tape.softmax_lastdim(x).unwrap();
    assert!((tape.value(s).data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((tape.value(s).data()[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let g = tape.constant(Tensor::ones(&[2])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2])).unwrap();
    let c = tape.constant(Tensor::full(&[1, 1, 2], 3.0)).unwrap();
    let y = tape.layer_norm(c, g, b).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

    let x = tape.constant(t(&[1, 1, 2], &[1.0, -1.0])).unwrap();
    let y = tape.layer_norm(x, g, b).unwrap();
    let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
    assert!((tape.value(y).data()[0] - expect).abs() < 1e-12);
    assert!((tape.value(y).data()[1] + expect).abs() < 1e-12);

    let g0 = tape.constant(Tensor::zeros(&[2])).unwrap();
    let b5 = tape.constant(Tensor::full(&[2], 5.0)).unwrap();
    let y = tape.layer_norm(x, g0, b5).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0, 5.0]);
}

#[test]
fn backward_linear_case_and_accumulation() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", t(&[3], &[0.5, -2.0, 1.0]));
    let x = t(&[3], &[1.0, 2.0, 3.0]);
    let run = |store: &mut ParamStore<f64>| {
        let mut tape = Tape::new();
        let wv = tape.param(store, w);
        let xv = tape.constant(x.clone()).unwrap();
        let p = tape.mul(wv, xv).unwrap();
        let l = tape.sum(p).unwrap();
        tape.backward(l, store).unwrap();
    };
    run(&mut store);
    assert_eq!(store.grad(w).data(), x.data());
    run(&mut store);
    assert_eq!(store.grad(w).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn abs_gradient_is_sign_pattern() {
    let mut store = ParamStore::<f64>::new();
    let u = store.add("u", t(&[4], &[1.0, -2.0, 0.5, -0.1]));
    let v = t(&[4], &[0.0, 0.0, 1.0, -1.0]);
    let mut tape = Tape::new();
    let uv = tape.param(&store, u);
    let vv = tape.constant(v).unwrap();
    let d = tape.sub(uv, vv).unwrap();
    let a = tape.abs(d).unwrap();
    let l = tape.sum(a).unwrap();
    tape.backward(l, &mut store).unwrap();
    assert_eq!(store.grad(u).data(), &[1.0, -1.0, -1.0, 1.0]);
}

#[test]
fn non_scalar_backward_is_usage_error() {
    let mut store = ParamStore::<f64>::new();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(tape.backward(x, &mut store), Err(Error::Usage(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1], &[1e300])).unwrap();
    let y = tape.mul(x, x);
    assert!(matches!(y, Err(Error::NonFinite { .. })));
    assert!(tape.constant(t(&[1], &[f64::NAN])).is_err());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin()));
    let grad = |store: &mut ParamStore<f64>| {
        store.zero_grad();
        let mut tape = Tape::new();
        let wv = tape.param(store, w);
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5)).unwrap();
        let p = tape.matmul(x, wv).unwrap();
        let s = tape.softmax_lastdim(p).unwrap();
        let g = tape.gelu(s).unwrap();
        let l = tape.sum(g).unwrap();
        tape.backward(l, store).unwrap();
        store.grad(w).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(grad(&mut store), grad(&mut store));
}

#[test]
fn grad_check_reports_breaking_perturbation() {
    let mut store = ParamStore::<f64>::new();
    let th = store.add("theta", t(&[2], &[1.0, 1e-6]));
    let err = grad_check(&mut store, th, 1e-5, |tape, s| {
        let v = tape.param(s, th);
        let m = tape.mul(v, v).unwrap();
        let sum = tape.sum(m)?;
        // log of a quantity that goes negative under perturbation
        let data = tape.value(v).data().to_vec();
        tape.constant(Tensor::scalar(data[1].ln() + tape.value(sum).item()))
    })
    .unwrap_err();
    assert!(err.is_numeric());
    assert!(err.to_string().contains("theta[1] - step"), "{err}");
}

#[test]
fn grad_check_quadratic_and_cross_entropy() {
    let mut store = ParamStore::<f64>::new();
    let th = store.add("theta", t(&[3], &[0.4, -1.1, 2.0]));
    let r = grad_check(&mut store, th, DEFAULT_STEP, |tape, s| {
        let v = tape.param(s, th);
        let m = tape.mul(v, v)?;
        tape.sum(m)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");

    let mut store = ParamStore::<f64>::new();
    let logits = store.add("logits", Tensor::from_fn(&[2, 2, 2], |i| (i as f64 * 1.3).cos()));
    let r = grad_check(&mut store, logits, DEFAULT_STEP, |tape, s| {
        let l = tape.param(s, logits);
        let p = tape.softmax_lastdim(l)?;
        let a = tape.binary_cross_entropy(p, &[0, 1, 2, 3], &[1, 0, 0, 1], 1e-7)?;
        let q = tape.scale(l, -0.5)?;
        let q = tape.softmax_lastdim(q)?;
        let b = tape.binary_cross_entropy(q, &[0, 1, 2, 3], &[1, 0, 0, 1], 1e-7)?;
        tape.add(a, b)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, n in 1usize..9, data in prop::collection::vec(-50.0f64..50.0, 40)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[rows, n], |i| data[i % data.len()])).unwrap();
        let s = tape.softmax_lastdim(x).unwrap();
        for row in tape.value(s).data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_preserves_spatial_dims(h in 1usize..7, w in 1usize..7, k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[h, w, 2], |i| i as f32 * 0.01)).unwrap();
        let wt = tape.constant(Tensor::ones(&[k, k, 2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[3])).unwrap();
        let y = tape.conv2d_same(x, wt, b).unwrap();
        prop_assert_eq!(tape.shape(y), &[h, w, 3]);
    }
}
