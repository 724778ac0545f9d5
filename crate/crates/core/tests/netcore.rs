use edac::netcore::{
    finite_diff_grad, forward_logits, grad_input, grad_params, init_model, predict_label, predict_labels,
    relative_error, Activation, Graph, ModelSpec, ModelState, Tensor,
};
use edac::objective::cross_entropy_rows;
use edac::Error;
use proptest::prelude::*;

fn spec(input_dim: usize, widths: &[usize], activation: Activation, seed: u64) -> ModelSpec {
    ModelSpec {
        input_dim,
        layer_widths: widths.to_vec(),
        activation,
        init_seed: seed,
    }
}

fn ce_sum(model: &ModelState, x: &Tensor, labels: &[usize]) -> f64 {
    let logits = forward_logits(model, x).unwrap();
    (0..labels.len())
        .map(|i| edac::objective::cross_entropy(logits.row(i), labels[i]).unwrap())
        .sum()
}

#[test]
fn init_is_deterministic_and_bounded() {
    let s = spec(5, &[7, 3], Activation::Relu, 4);
    let a = init_model(&s).unwrap();
    assert_eq!(a, init_model(&s).unwrap());
    let w0 = a.params().get("w0").unwrap();
    assert_eq!(w0.shape(), &[7, 5]);
    let bound = 1.0 / 5f64.sqrt();
    assert!(w0.data().iter().all(|v| v.abs() <= bound));
    let w1 = a.params().get("w1").unwrap();
    assert!(w1.data().iter().all(|v| v.abs() <= 1.0 / 7f64.sqrt()));
    assert_ne!(a, init_model(&spec(5, &[7, 3], Activation::Relu, 5)).unwrap());
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(init_model(&spec(0, &[3], Activation::Relu, 0)).is_err());
    assert!(init_model(&spec(3, &[], Activation::Relu, 0)).is_err());
    assert!(init_model(&spec(3, &[4, 0, 2], Activation::Relu, 0)).is_err());
}

#[test]
fn forward_shape_mismatch_is_a_shape_error() {
    let m = init_model(&spec(3, &[4, 2], Activation::Tanh, 0)).unwrap();
    let x = Tensor::zeros(&[2, 5]);
    assert!(matches!(forward_logits(&m, &x), Err(Error::Shape(_))));
}

#[test]
fn batched_prediction_matches_single() {
    let m = init_model(&spec(3, &[6, 4], Activation::Relu, 9)).unwrap();
    let x = Tensor::from_rows(&[vec![0.1, -0.4, 2.0], vec![1.5, 0.2, -0.3]]).unwrap();
    let batch = predict_labels(&m, &x).unwrap();
    for (i, &label) in batch.iter().enumerate() {
        assert_eq!(predict_label(&m, &Tensor::vector(x.row(i).to_vec())).unwrap(), label);
    }
}

#[test]
fn sign_has_no_backward_rule() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, -2.0]));
    let s = g.sign(x);
    let total = g.sum(s);
    assert!(matches!(g.backward(total), Err(Error::Capability(_))));
}

#[test]
fn finite_diff_rejects_nonpositive_step() {
    assert!(finite_diff_grad(|p| Ok(p[0]), &[1.0], 0.0).is_err());
    assert!(finite_diff_grad(|p| Ok(p[0]), &[1.0], -1e-5).is_err());
}

#[test]
fn param_gradient_of_two_layer_tanh_net() {
    let m = init_model(&spec(4, &[5, 3], Activation::Tanh, 2)).unwrap();
    let x = Tensor::from_rows(&[vec![0.3, -1.0, 0.5, 2.0], vec![-0.7, 0.1, 0.9, -1.2]]).unwrap();
    let labels = [2, 0];
    let (value, g) = grad_params(&m, |g, net| {
        let xv = g.constant(x.clone());
        let logits = net.logits(g, xv)?;
        let ce = cross_entropy_rows(g, logits, &labels)?;
        Ok(g.sum(ce))
    })
    .unwrap();
    assert!((value - ce_sum(&m, &x, &labels)).abs() < 1e-12);
    let template = m.params();
    let fd = finite_diff_grad(
        |p| Ok(ce_sum(&m.with_params(template.unflatten(p)?)?, &x, &labels)),
        &template.flatten(),
        1e-5,
    )
    .unwrap();
    assert!(relative_error(&g.flatten(), &fd) < 1e-6);
}

/// Smallest |pre-activation| of any hidden unit, for skipping ReLU kinks.
fn kink_margin(m: &ModelState, x: &Tensor) -> f64 {
    edac::runner::preactivation_margin(m, x).unwrap()
}

fn random_rows(rows: usize, cols: usize, vals: &[f64]) -> Tensor {
    Tensor::new(vec![rows, cols], vals[..rows * cols].to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn param_gradients_match_finite_differences(
        seed in any::<u64>(),
        n in 1usize..5,
        hidden in 1usize..6,
        k in 2usize..5,
        rows in 1usize..4,
        tanh in any::<bool>(),
        vals in prop::collection::vec(-2.0f64..2.0, 20),
        label_seed in any::<u64>(),
    ) {
        let act = if tanh { Activation::Tanh } else { Activation::Relu };
        let m = init_model(&spec(n, &[hidden, k], act, seed)).unwrap();
        let x = random_rows(rows, n, &vals);
        prop_assume!(kink_margin(&m, &x) > 1e-3);
        let labels: Vec<usize> = (0..rows).map(|i| ((label_seed >> (i * 8)) % k as u64) as usize).collect();
        let (_, g) = grad_params(&m, |g, net| {
            let xv = g.constant(x.clone());
            let logits = net.logits(g, xv)?;
            let ce = cross_entropy_rows(g, logits, &labels)?;
            Ok(g.mean(ce))
        }).unwrap();
        let template = m.params();
        let fd = finite_diff_grad(
            |p| Ok(ce_sum(&m.with_params(template.unflatten(p)?)?, &x, &labels) / rows as f64),
            &template.flatten(),
            1e-5,
        ).unwrap();
        prop_assert!(relative_error(&g.flatten(), &fd) < 1e-4);
    }

    #[test]
    fn input_gradients_match_finite_differences(
        seed in any::<u64>(),
        n in 1usize..6,
        rows in 1usize..4,
        tanh in any::<bool>(),
        vals in prop::collection::vec(-2.0f64..2.0, 20),
    ) {
        let act = if tanh { Activation::Tanh } else { Activation::Relu };
        let m = init_model(&spec(n, &[4, 4, 3], act, seed)).unwrap();
        let x = random_rows(rows, n, &vals);
        prop_assume!(kink_margin(&m, &x) > 1e-3);
        let labels: Vec<usize> = (0..rows).map(|i| i % 3).collect();
        let (_, gx) = grad_input(&m, &x, |g, net, xv| {
            let logits = net.logits(g, xv)?;
            let ce = cross_entropy_rows(g, logits, &labels)?;
            Ok(g.sum(ce))
        }).unwrap();
        let fd = finite_diff_grad(
            |p| Ok(ce_sum(&m, &Tensor::new(vec![rows, n], p.to_vec())?, &labels)),
            x.data(),
            1e-5,
        ).unwrap();
        prop_assert!(relative_error(gx.data(), &fd) < 1e-4);
    }

    #[test]
    fn flatten_unflatten_round_trips(seed in any::<u64>(), n in 1usize..5, h in 1usize..5) {
        let m = init_model(&spec(n, &[h, 2], Activation::Relu, seed)).unwrap();
        let flat = m.params().flatten();
        prop_assert_eq!(m.params().unflatten(&flat).unwrap(), m.params().clone());
        prop_assert!(m.params().unflatten(&flat[1..]).is_err());
    }
}
