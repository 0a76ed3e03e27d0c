//! Reverse-mode gradient checks against independent oracles: closed forms,
//! central finite differences, and a straight-line scalar dual-number
//! re-implementation.

use fisherlab::autodiff::{
    finite_diff_grad, per_example_param_grads, value_and_input_grad, value_and_param_grad,
};
use fisherlab::nets::{forward_logits, init_params, softmax_cross_entropy};
use fisherlab::rng::seeded_rng;
use fisherlab::stats::max_rel_err;
use fisherlab::testing::ScalarMlpOracle;
use fisherlab::{Activation, InitScheme, Labels, ModelOracle, ModelSpec, ParamVector, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

fn random_inputs(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let data: Vec<f64> = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![n, d], data).unwrap()
}

fn random_labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded_rng(seed ^ 0xabcd);
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

#[test]
fn logistic_zero_theta_closed_form() {
    // 2-class logistic, single example x=(1,0), label 0, theta=0:
    // loss = ln 2; d/dw[i][class0] = (p0 - 1) * x_i = (-0.5, 0).
    let spec = ModelSpec::linear(2, 2);
    let theta = init_params(&spec, InitScheme::Zeros, 0);
    let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let oracle = ModelOracle::new(&spec, &x, Labels::Hard(vec![0]));
    let (loss, grad) = value_and_param_grad(&oracle, &theta).unwrap();
    assert!((loss - 2.0f64.ln()).abs() < 1e-15);
    let w = grad.slice("w0").unwrap(); // (input 2, class 2) row-major
    assert!((w[0] - (-0.5)).abs() < 1e-15); // w[0][0]: label-0 weight of x0
    assert!((w[2] - 0.0).abs() < 1e-15); // w[1][0]: label-0 weight of x1
    assert!((w[1] - 0.5).abs() < 1e-15); // mass moves to the other class
}

#[test]
fn reverse_grad_matches_finite_differences_on_all_fixtures() {
    let fixtures: Vec<(ModelSpec, usize, u64)> = vec![
        (ModelSpec::linear(3, 2), 4, 100),
        (ModelSpec::mlp(4, vec![8], 3, Activation::Tanh), 6, 101),
        (ModelSpec::mlp(4, vec![6, 5], 3, Activation::Relu), 6, 102),
        (ModelSpec::mlp(2, vec![16], 2, Activation::Relu), 8, 103),
    ];
    for (spec, n, seed) in fixtures {
        let theta = init_params(&spec, InitScheme::HeNormal, seed);
        let x = random_inputs(n, spec.input_dim(), seed + 1);
        let labels = random_labels(n, spec.classes, seed + 2);
        let oracle = ModelOracle::new(&spec, &x, Labels::Hard(labels));
        let (_, grad) = value_and_param_grad(&oracle, &theta).unwrap();
        let fd = finite_diff_grad(&oracle, &theta, 1e-5).unwrap();
        let err = max_rel_err(grad.data(), fd.data());
        assert!(err < 1e-6, "{spec:?}: max rel err {err}");
    }
}

#[test]
fn reverse_grad_matches_finite_differences_on_conv() {
    let spec = ModelSpec::small_conv(1, 8, 8, 3, 4, 2, Activation::Tanh);
    let theta = init_params(&spec, InitScheme::HeNormal, 42);
    let x = random_inputs(3, 64, 45).reshaped(vec![3, 1, 8, 8]).unwrap();
    let oracle = ModelOracle::new(&spec, &x, Labels::Hard(vec![0, 1, 1]));
    let (_, grad) = value_and_param_grad(&oracle, &theta).unwrap();
    let fd = finite_diff_grad(&oracle, &theta, 1e-5).unwrap();
    let err = max_rel_err(grad.data(), fd.data());
    assert!(err < 1e-6, "conv max rel err {err}");
}

#[test]
fn scalar_oracle_value_table_mlp_4_8_3() {
    // Random MLP widths 4-8-3, 16 examples, seed 7. The expected loss below
    // was produced by the straight-line dual-number oracle and frozen; the
    // full gradient vector is compared oracle-vs-tape at near machine
    // precision.
    let spec = ModelSpec::mlp(4, vec![8], 3, Activation::Tanh);
    let theta = init_params(&spec, InitScheme::HeNormal, 7);
    let x = random_inputs(16, 4, 7);
    let labels = random_labels(16, 3, 7);

    let rows: Vec<Vec<f64>> = (0..16).map(|i| x.row(i).to_vec()).collect();
    let oracle = ScalarMlpOracle::new(&spec, rows, labels.clone());
    let (oracle_loss, oracle_grad) = fisherlab::GradOracle::eval(&oracle, &theta).unwrap();

    let model_oracle = ModelOracle::new(&spec, &x, Labels::Hard(labels));
    let (loss, grad) = value_and_param_grad(&model_oracle, &theta).unwrap();

    const FROZEN_LOSS: f64 = 1.1954614858427601;
    assert!(
        (oracle_loss - FROZEN_LOSS).abs() < 1e-12,
        "scalar oracle loss drifted: {oracle_loss:.16}"
    );
    assert!((loss - FROZEN_LOSS).abs() < 1e-12, "tape loss {loss:.16}");
    assert!((loss - oracle_loss).abs() < 1e-13);
    for (g, o) in grad.data().iter().zip(oracle_grad.data()) {
        assert!((g - o).abs() < 1e-12, "grad entry {g} vs oracle {o}");
    }
}

#[test]
fn per_example_rows_degenerate_and_mean() {
    let spec = ModelSpec::mlp(3, vec![5], 2, Activation::Relu);
    let theta = init_params(&spec, InitScheme::HeNormal, 8);

    // B=1: the single row equals the mean gradient.
    let x1 = random_inputs(1, 3, 9);
    let l1 = Labels::Hard(vec![1]);
    let rows = per_example_param_grads(&spec, &theta, &x1, &l1).unwrap();
    let oracle = ModelOracle::new(&spec, &x1, l1);
    let (_, mean_grad) = value_and_param_grad(&oracle, &theta).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].data(), mean_grad.data());

    // B=4 duplicated copies of one example -> 4 identical rows.
    let dup = x1.gather_rows(&[0, 0, 0, 0]);
    let rows = per_example_param_grads(&spec, &theta, &dup, &Labels::Hard(vec![1; 4])).unwrap();
    for r in &rows[1..] {
        assert_eq!(r.data(), rows[0].data());
    }

    // B=8 random: row-mean equals mean gradient within 1e-12 absolute.
    let x8 = random_inputs(8, 3, 10);
    let labels = random_labels(8, 2, 10);
    let rows = per_example_param_grads(&spec, &theta, &x8, &Labels::Hard(labels.clone())).unwrap();
    let oracle = ModelOracle::new(&spec, &x8, Labels::Hard(labels));
    let (_, mean_grad) = value_and_param_grad(&oracle, &theta).unwrap();
    let mut acc = ParamVector::zeros(theta.layout().clone());
    for r in &rows {
        acc.axpy(1.0 / 8.0, r);
    }
    for (a, b) in acc.data().iter().zip(mean_grad.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn input_grad_constant_model_is_zero() {
    // all weights into logits zero, bias fixed -> output independent of input
    let spec = ModelSpec::linear(3, 2);
    let mut theta = init_params(&spec, InitScheme::Zeros, 0);
    let boff = spec.layout().entry("b0").unwrap().offset;
    theta.data_mut()[boff] = 0.3;
    theta.data_mut()[boff + 1] = -0.7;
    let x = random_inputs(4, 3, 11);
    let (_, gx) = value_and_input_grad(&spec, &theta, &x, &Labels::Hard(vec![0, 1, 0, 1])).unwrap();
    assert!(gx.data().iter().all(|&v| v == 0.0));
}

#[test]
fn input_grad_logistic_closed_form() {
    // logistic weights w: d loss/d x = W (p - e_y); for C=2 this is
    // (p0 - y0) * (w_col0 - w_col1) ... computed directly below.
    let spec = ModelSpec::linear(2, 2);
    let mut theta = init_params(&spec, InitScheme::Zeros, 0);
    let w = [[0.8, -0.2], [0.1, 0.5]]; // w[input][class]
    {
        let off = spec.layout().entry("w0").unwrap().offset;
        theta.data_mut()[off..off + 4].copy_from_slice(&[w[0][0], w[0][1], w[1][0], w[1][1]]);
    }
    let xv = [0.9, -1.4];
    let x = Tensor::new(vec![1, 2], xv.to_vec()).unwrap();
    let label = 0usize;
    let logits = forward_logits(&spec, &theta, &x).unwrap();
    let p = logits.softmax();
    let mut diff = [p[0], p[1]];
    diff[label] -= 1.0;
    let want = [
        w[0][0] * diff[0] + w[0][1] * diff[1],
        w[1][0] * diff[0] + w[1][1] * diff[1],
    ];
    let (_, gx) = value_and_input_grad(&spec, &theta, &x, &Labels::Hard(vec![label])).unwrap();
    for (g, e) in gx.data().iter().zip(want) {
        assert!((g - e).abs() < 1e-14, "{g} vs {e}");
    }
}

#[test]
fn input_grad_matches_finite_differences() {
    let spec = ModelSpec::mlp(3, vec![6], 3, Activation::Tanh);
    let theta = init_params(&spec, InitScheme::HeNormal, 14);
    let x = random_inputs(4, 3, 15);
    let labels = random_labels(4, 3, 15);
    let (_, gx) = value_and_input_grad(&spec, &theta, &x, &Labels::Hard(labels.clone())).unwrap();

    let step = 1e-5;
    let mut fd = vec![0.0; x.len()];
    for i in 0..4 {
        for k in 0..3 {
            let bump = |delta: f64| {
                let mut data = x.data().to_vec();
                data[i * 3 + k] += delta;
                let xp = Tensor::new(vec![4, 3], data).unwrap();
                let xi = xp.select_row(i);
                let lg = forward_logits(&spec, &theta, &xi).unwrap();
                softmax_cross_entropy(&lg, &labels[i..i + 1]).unwrap()
            };
            fd[i * 3 + k] = (bump(step) - bump(-step)) / (2.0 * step);
        }
    }
    let err = max_rel_err(gx.data(), &fd);
    assert!(err < 1e-6, "input grad max rel err {err}");
}

#[test]
fn evaluation_is_bit_deterministic() {
    let spec = ModelSpec::mlp(4, vec![7], 3, Activation::Relu);
    let theta = init_params(&spec, InitScheme::HeNormal, 20);
    let x = random_inputs(10, 4, 21);
    let labels = random_labels(10, 3, 21);
    let oracle = ModelOracle::new(&spec, &x, Labels::Hard(labels));
    let (l1, g1) = value_and_param_grad(&oracle, &theta).unwrap();
    let (l2, g2) = value_and_param_grad(&oracle, &theta).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    for (a, b) in g1.data().iter().zip(g2.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn finite_diff_step_insensitivity() {
    // step 1e-5 vs 1e-6 agree within 1e-4 relative on a cross-entropy MLP
    let spec = ModelSpec::mlp(3, vec![5], 2, Activation::Tanh);
    let theta = init_params(&spec, InitScheme::HeNormal, 22);
    let x = random_inputs(5, 3, 23);
    let labels = random_labels(5, 2, 23);
    let oracle = ModelOracle::new(&spec, &x, Labels::Hard(labels));
    let a = finite_diff_grad(&oracle, &theta, 1e-5).unwrap();
    let b = finite_diff_grad(&oracle, &theta, 1e-6).unwrap();
    assert!(max_rel_err(a.data(), b.data()) < 1e-4);
}

#[test]
fn layout_mismatch_is_rejected() {
    let spec = ModelSpec::mlp(3, vec![5], 2, Activation::Relu);
    let other = ModelSpec::mlp(3, vec![6], 2, Activation::Relu);
    let theta = init_params(&other, InitScheme::HeNormal, 0);
    let x = random_inputs(2, 3, 0);
    let oracle = ModelOracle::new(&spec, &x, Labels::Hard(vec![0, 1]));
    assert!(value_and_param_grad(&oracle, &theta).is_err());
}
