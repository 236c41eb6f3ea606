//! Backpropagation through time checked against central finite differences
//! and a scripted single-step forward evaluation.

use ndarray::{Array1, Array3};
use rand::Rng;

use privrel_core::engine::{lstm_step, HeadActivation, LayerStack, LstmCellParams, LstmState, StackArch};
use privrel_core::rng::rng_from_seed;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
const FLOOR: f64 = 1e-6;

fn weighted_sum(stack: &LayerStack, inputs: &Array3<f64>, weights: &Array3<f64>) -> f64 {
    let out = stack.predict(inputs.view()).unwrap();
    (&out * weights).sum()
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Largest relative error over every parameter and every input of a random
/// stack.
fn worst_error(seed: u64, head: HeadActivation) -> f64 {
    let mut rng = rng_from_seed(seed);
    let layers = rng.gen_range(1..=2);
    let arch = StackArch {
        input_size: rng.gen_range(1..=3),
        hidden_sizes: (0..layers).map(|_| rng.gen_range(1..=8)).collect(),
        output_size: if head == HeadActivation::Softmax { rng.gen_range(2..=3) } else { rng.gen_range(1..=2) },
        head,
    };
    let mut stack = LayerStack::init(&arch, seed ^ 0xABCD).unwrap();
    for (_, t) in stack.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let batch = rng.gen_range(1..=2);
    let steps = rng.gen_range(1..=5);
    let inputs = Array3::from_shape_simple_fn((batch, steps, arch.input_size), || rng.gen_range(-1.0..1.0));
    let weights = Array3::from_shape_simple_fn((batch, steps, arch.output_size), || rng.gen_range(-1.0..1.0));

    let (_, tape) = stack.forward(inputs.view()).unwrap();
    let (grads, grad_inputs) = stack.backward(&tape, weights.view()).unwrap();

    let mut worst: f64 = 0.0;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, t)| t.to_vec()).collect();
    for (ti, tensor) in analytic.iter().enumerate() {
        for (i, &a) in tensor.iter().enumerate() {
            let mut plus = stack.clone();
            plus.tensors_mut()[ti].1[i] += STEP;
            let mut minus = stack.clone();
            minus.tensors_mut()[ti].1[i] -= STEP;
            let numeric = (weighted_sum(&plus, &inputs, &weights) - weighted_sum(&minus, &inputs, &weights)) / (2.0 * STEP);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    for (idx, &a) in grad_inputs.indexed_iter() {
        let mut plus = inputs.clone();
        plus[idx] += STEP;
        let mut minus = inputs.clone();
        minus[idx] -= STEP;
        let numeric = (weighted_sum(&stack, &plus, &weights) - weighted_sum(&stack, &minus, &weights)) / (2.0 * STEP);
        worst = worst.max(relative_error(a, numeric));
    }
    worst
}

#[test]
fn bptt_matches_finite_differences() {
    for seed in 0..24 {
        for head in [HeadActivation::Linear, HeadActivation::Softmax, HeadActivation::Sigmoid] {
            let err = worst_error(seed, head);
            assert!(err < REL_TOL, "seed {seed}, {head:?}: relative error {err}");
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn single_step_matches_scripted_formulas() {
    let mut rng = rng_from_seed(11);
    let hidden = 2;
    let mut params = LstmCellParams::zeros(1, hidden);
    params.bias.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
    params.input_weights.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
    params.recurrent_weights.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
    let state = LstmState {
        h: Array1::from_vec(vec![0.3, -0.2]),
        c: Array1::from_vec(vec![-0.5, 0.8]),
    };
    let w = 0.7;
    let (next, _) = lstm_step(&params, &state, &[w]).unwrap();

    // Rows are stacked forget, input, candidate, output.
    let pre = |block: usize, j: usize| {
        let row = block * hidden + j;
        let mut v = params.bias[row] + params.input_weights[[row, 0]] * w;
        for k in 0..hidden {
            v += params.recurrent_weights[[row, k]] * state.h[k];
        }
        v
    };
    for j in 0..hidden {
        let forget = sigmoid(pre(0, j));
        let input = sigmoid(pre(1, j));
        let candidate = pre(2, j).tanh();
        let output = sigmoid(pre(3, j));
        let cell = forget * state.c[j] + input * candidate;
        let hidden_out = output * cell.tanh();
        assert!((next.c[j] - cell).abs() < 1e-12);
        assert!((next.h[j] - hidden_out).abs() < 1e-12);
    }
}

#[test]
fn outputs_never_read_future_inputs() {
    let arch = StackArch {
        input_size: 2,
        hidden_sizes: vec![5, 3],
        output_size: 2,
        head: HeadActivation::Softmax,
    };
    let stack = LayerStack::init(&arch, 5).unwrap();
    let mut rng = rng_from_seed(6);
    let inputs = Array3::from_shape_simple_fn((2, 6, 2), || rng.gen_range(-1.0..1.0));
    let base = stack.predict(inputs.view()).unwrap();
    for cut in 0..6 {
        let mut perturbed = inputs.clone();
        for t in cut..6 {
            for b in 0..2 {
                for d in 0..2 {
                    perturbed[[b, t, d]] += 3.0;
                }
            }
        }
        let out = stack.predict(perturbed.view()).unwrap();
        for t in 0..cut {
            for b in 0..2 {
                for k in 0..2 {
                    assert_eq!(out[[b, t, k]].to_bits(), base[[b, t, k]].to_bits());
                }
            }
        }
    }
}

#[test]
fn checkpoint_reload_is_bit_exact() {
    let arch = StackArch {
        input_size: 3,
        hidden_sizes: vec![4, 4],
        output_size: 1,
        head: HeadActivation::Linear,
    };
    let stack = LayerStack::init(&arch, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stack.json");
    stack.save(&path).unwrap();
    let back = LayerStack::load(&path).unwrap();
    assert_eq!(back.fingerprint(), stack.fingerprint());
    assert_eq!(back, stack);
}
