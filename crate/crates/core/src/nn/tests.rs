use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn seq(data: &[f64]) -> Tensor {
    Tensor::new(&[1, data.len(), 1], data.to_vec()).unwrap()
}

#[test]
fn conv_kernel_one_is_identity() {
    let mut g = Graph::new();
    let x = g.constant(seq(&[1.0, -2.0, 3.5]));
    let w = g.constant(Tensor::new(&[1, 1, 1], vec![1.0]).unwrap());
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv1d(x, w, Some(b), 1, true).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.5]);
}

#[test]
fn causal_conv_last_tap_is_current_position() {
    let mut g = Graph::new();
    let x = g.constant(seq(&[1.0, 0.0, 0.0, 0.0]));
    let w = g.constant(Tensor::new(&[2, 1, 1], vec![0.0, 1.0]).unwrap());
    let y = g.conv1d(x, w, None, 1, true).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0, 0.0]);

    // The earlier tap reaches one step back.
    let w = g.constant(Tensor::new(&[2, 1, 1], vec![1.0, 0.0]).unwrap());
    let y = g.conv1d(x, w, None, 1, true).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn causal_conv_ignores_future_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..20 {
        let len = 24;
        let x = rand_tensor(&mut rng, &[1, len, 3]);
        let w = rand_tensor(&mut rng, &[3, 3, 4]);
        let dilation = 1 + trial % 3;
        let t = rng.random_range(0..len - 1);
        let mut x2 = x.clone();
        for tt in t + 1..len {
            for c in 0..3 {
                x2.data_mut()[tt * 3 + c] += rng.random_range(-5.0..5.0);
            }
        }
        let run = |input: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(input.clone());
            let wv = g.constant(w.clone());
            let y = g.conv1d(xv, wv, None, dilation, true).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(&x), run(&x2));
        assert_eq!(a.data()[..(t + 1) * 4], b.data()[..(t + 1) * 4]);
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 4, 2]));
    let w = g.constant(Tensor::zeros(&[3, 3, 1]));
    assert!(matches!(g.conv1d(x, w, None, 1, true), Err(NnError::Shape(_))));
}

#[test]
fn group_norm_sets_have_zero_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[2, 5, 8], |_| rng.random_range(-3.0..7.0)));
    let gamma = g.constant(Tensor::full(&[8], 1.0));
    let beta = g.constant(Tensor::zeros(&[8]));
    let y = g.group_norm(x, gamma, beta, 4, 1e-5).unwrap();
    for set in g.value(y).data().chunks(2) {
        let mean = (set[0] + set[1]) / 2.0;
        assert!(mean.abs() < 1e-6);
    }
}

#[test]
fn group_norm_with_zero_gain_outputs_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, &[1, 3, 4]));
    let gamma = g.constant(Tensor::zeros(&[4]));
    let beta = g.constant(Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap());
    let y = g.group_norm(x, gamma, beta, 2, 1e-5).unwrap();
    for row in g.value(y).data().chunks(4) {
        assert_eq!(row, &[0.5, -1.0, 2.0, 0.0]);
    }
}

#[test]
fn group_norm_rejects_indivisible_groups() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 6]));
    let gamma = g.constant(Tensor::full(&[6], 1.0));
    let beta = g.constant(Tensor::zeros(&[6]));
    assert!(matches!(g.group_norm(x, gamma, beta, 4, 1e-5), Err(NnError::Config(_))));
}

#[test]
fn layer_norm_leaves_normalized_rows_unchanged() {
    let row = [1.0, -1.0, 1.0, -1.0];
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 4], row.to_vec()).unwrap());
    let gamma = g.constant(Tensor::full(&[4], 1.0));
    let beta = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    for (a, b) in g.value(y).data().iter().zip(row) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn batch_norm_train_normalizes_columns_and_reports_stats() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap());
    let gamma = g.constant(Tensor::full(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    let (y, stats) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
    assert_eq!(stats.mean, vec![2.5, 25.0]);
    assert!((stats.var[0] - 5.0 / 3.0).abs() < 1e-12);
    let col0: f64 = g.value(y).data().iter().step_by(2).sum();
    assert!(col0.abs() < 1e-9);
}

#[test]
fn activation_reference_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[3], vec![0.0, -3.0, 3.0]).unwrap());
    let s = g.activation(Activation::Sigmoid, x).unwrap();
    let ge = g.activation(Activation::Gelu, x).unwrap();
    let r = g.activation(Activation::Relu, x).unwrap();
    assert_eq!(g.value(s).data()[0], 0.5);
    assert_eq!(g.value(ge).data()[0], 0.0);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
    // Exact GELU: x·Φ(x) with Φ(3) = 0.998650101968...
    assert!((g.value(ge).data()[2] - 3.0 * 0.998_650_101_968_369_9).abs() < 1e-12);
}

#[test]
fn attention_with_constant_logits_is_uniform() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::full(&[1, 3, 4], 0.3));
    let k = g.constant(Tensor::full(&[1, 5, 4], 0.3));
    let v = g.constant(Tensor::from_fn(&[1, 5, 4], |i| i as f64));
    let out = g.attention(q, k, v, 2).unwrap();
    let (shape, w) = g.attention_weights(out).unwrap();
    assert_eq!(shape, vec![1, 2, 3, 5]);
    assert!(w.iter().all(|x| (x - 0.2).abs() < 1e-12));
    // Each output row is the mean of the value rows.
    let mean_row: Vec<f64> = (0..4).map(|c| (0..5).map(|t| (t * 4 + c) as f64).sum::<f64>() / 5.0).collect();
    for row in g.value(out).data().chunks(4) {
        for (a, b) in row.iter().zip(&mean_row) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_with_single_key_broadcasts_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let q = g.constant(rand_tensor(&mut rng, &[1, 4, 2]));
    let k = g.constant(rand_tensor(&mut rng, &[1, 1, 2]));
    let v = g.constant(Tensor::new(&[1, 1, 2], vec![0.7, -0.2]).unwrap());
    let out = g.attention(q, k, v, 1).unwrap();
    assert!(g.attention_weights(out).unwrap().1.iter().all(|&w| w == 1.0));
    for row in g.value(out).data().chunks(2) {
        assert_eq!(row, &[0.7, -0.2]);
    }
}

#[test]
fn attention_rows_are_stochastic_and_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = rand_tensor(&mut rng, &[2, 6, 8]);
    let k = rand_tensor(&mut rng, &[2, 7, 8]);
    let v = rand_tensor(&mut rng, &[2, 7, 4]);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = g.attention(qv, kv, vv, 2).unwrap();
    let (_, w) = g.attention_weights(out).unwrap();
    for row in w.chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    // Shifting every key by the same vector adds a per-row constant to the logits.
    let mut k2 = k.clone();
    for row in k2.data_mut().chunks_mut(8) {
        for (c, x) in row.iter_mut().enumerate() {
            *x += 0.5 + c as f64 * 0.0;
        }
    }
    let mut g2 = Graph::new();
    let (qv, kv, vv) = (g2.constant(q), g2.constant(k2), g2.constant(v));
    let out2 = g2.attention(qv, kv, vv, 2).unwrap();
    for (a, b) in g.value(out).data().iter().zip(g2.value(out2).data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn pooling_examples() {
    let mut g = Graph::new();
    let x = g.constant(seq(&[1.0, 2.0, 3.0]));
    let avg = g.pool(Pool::GlobalAvg, x).unwrap();
    assert_eq!(g.value(avg).data(), &[2.0]);
    let x = g.constant(seq(&[1.0, 5.0, 3.0]));
    let max = g.pool(Pool::GlobalMax, x).unwrap();
    assert_eq!(g.value(max).data(), &[5.0]);
    let x = g.constant(seq(&[1.0, 2.0, 3.0, 4.0]));
    let ad = g.pool(Pool::AdaptiveAvg(2), x).unwrap();
    assert_eq!(g.value(ad).data(), &[1.5, 3.5]);
    assert!(matches!(g.pool(Pool::AdaptiveAvg(5), x), Err(NnError::Shape(_))));
}

#[test]
fn adaptive_bins_partition_with_balanced_sizes() {
    for len in 1..40 {
        for target in 1..=len {
            let bins = adaptive_bins(len, target);
            assert_eq!(bins[0].0, 0);
            assert_eq!(bins.last().unwrap().1, len);
            let sizes: Vec<usize> = bins.iter().map(|(s, e)| e - s).collect();
            assert!(bins.windows(2).all(|w| w[0].1 == w[1].0));
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(g.backward(x), Err(NnError::Contract(_))));
}

#[test]
fn interior_gradients_are_exposed() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[2], vec![1.0, -2.0]).unwrap(), true);
    let h = g.scale(x, 3.0).unwrap();
    let y = g.mul(h, h).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(h).unwrap().data(), &[6.0, -12.0]);
    assert_eq!(grads.get(x).unwrap().data(), &[18.0, -36.0]);
}

#[test]
fn non_finite_values_abort_naming_the_op() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[2], vec![1.0, f64::MAX]).unwrap(), true);
    assert_eq!(g.scale(x, 10.0), Err(NnError::NonFinite { op: "scale" }));
}

#[test]
fn grad_check_linear_map_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2]), rand_tensor(&mut rng, &[2])];
    let err = grad_check(
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            g.sum(y)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_sigmoid_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = [rand_tensor(&mut rng, &[6])];
    let err = grad_check(
        |g, v| {
            let a = g.activation(Activation::Sigmoid, v[0])?;
            let b = g.scale(a, 2.5)?;
            let c = g.activation(Activation::Sigmoid, b)?;
            let d = g.mul(c, a)?;
            g.sum(d)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_three_layer_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = [
        rand_tensor(&mut rng, &[2, 5, 3]),
        rand_tensor(&mut rng, &[3, 3, 4]),
        rand_tensor(&mut rng, &[4, 4]),
        rand_tensor(&mut rng, &[4, 1]),
    ];
    let err = grad_check(
        |g, v| {
            let h = g.conv1d(v[0], v[1], None, 2, true)?;
            let h = g.activation(Activation::Gelu, h)?;
            let h = g.linear(h, v[2], None)?;
            let h = g.activation(Activation::Sigmoid, h)?;
            let h = g.pool(Pool::GlobalAvg, h)?;
            let y = g.linear(h, v[3], None)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

/// Finite-difference check of every primitive on small random shapes.
#[test]
fn every_primitive_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    // Random weights to turn arbitrary outputs into a generic scalar.
    let mut project = |g: &mut Graph, y: Var| -> Result<Var, NnError> {
        let shape = g.shape(y).to_vec();
        let w = g.constant(Tensor::from_fn(&shape, |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4));
        let p = g.mul(y, w)?;
        g.sum(p)
    };
    let mut cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, NnError>>)> = Vec::new();
    cases.push(("add", vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 3])], Box::new(|g, v| g.add(v[0], v[1]))));
    cases.push(("mul", vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 3])], Box::new(|g, v| g.mul(v[0], v[1]))));
    cases.push(("scale", vec![rand_tensor(&mut rng, &[4])], Box::new(|g, v| g.scale(v[0], -1.7))));
    cases.push(("add_bias", vec![rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[4])], Box::new(|g, v| g.add_bias(v[0], v[1]))));
    cases.push(("mul_channel", vec![rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[4])], Box::new(|g, v| g.mul_channel(v[0], v[1]))));
    cases.push((
        "linear",
        vec![rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[4, 5]), rand_tensor(&mut rng, &[5])],
        Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
    ));
    cases.push((
        "conv1d_causal",
        vec![rand_tensor(&mut rng, &[2, 9, 3]), rand_tensor(&mut rng, &[3, 3, 2]), rand_tensor(&mut rng, &[2])],
        Box::new(|g, v| g.conv1d(v[0], v[1], Some(v[2]), 2, true)),
    ));
    cases.push((
        "conv1d_same",
        vec![rand_tensor(&mut rng, &[1, 8, 2]), rand_tensor(&mut rng, &[3, 2, 3])],
        Box::new(|g, v| g.conv1d(v[0], v[1], None, 1, false)),
    ));
    cases.push((
        "depthwise",
        vec![rand_tensor(&mut rng, &[2, 8, 3]), rand_tensor(&mut rng, &[3, 3]), rand_tensor(&mut rng, &[3])],
        Box::new(|g, v| g.depthwise_conv1d(v[0], v[1], Some(v[2]), 1, false)),
    ));
    for (name, kind) in [("gelu", Activation::Gelu), ("sigmoid", Activation::Sigmoid)] {
        cases.push((name, vec![rand_tensor(&mut rng, &[3, 4])], Box::new(move |g, v| g.activation(kind, v[0]))));
    }
    // ReLU away from the kink.
    cases.push((
        "relu",
        vec![Tensor::new(&[4], vec![0.5, -0.3, 1.2, -2.0]).unwrap()],
        Box::new(|g, v| g.activation(Activation::Relu, v[0])),
    ));
    cases.push((
        "group_norm",
        vec![rand_tensor(&mut rng, &[2, 3, 6]), rand_tensor(&mut rng, &[6]), rand_tensor(&mut rng, &[6])],
        Box::new(|g, v| g.group_norm(v[0], v[1], v[2], 3, 1e-5)),
    ));
    cases.push((
        "layer_norm",
        vec![rand_tensor(&mut rng, &[2, 5]), rand_tensor(&mut rng, &[5]), rand_tensor(&mut rng, &[5])],
        Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
    ));
    cases.push((
        "batch_norm_train",
        vec![rand_tensor(&mut rng, &[5, 3]), rand_tensor(&mut rng, &[3]), rand_tensor(&mut rng, &[3])],
        Box::new(|g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|(y, _)| y)),
    ));
    cases.push((
        "batch_norm_eval",
        vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[3]), rand_tensor(&mut rng, &[3])],
        Box::new(|g, v| g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)),
    ));
    cases.push((
        "concat",
        vec![rand_tensor(&mut rng, &[2, 3, 2]), rand_tensor(&mut rng, &[2, 3, 4])],
        Box::new(|g, v| g.concat(&[v[0], v[1]])),
    ));
    cases.push(("global_avg", vec![rand_tensor(&mut rng, &[2, 5, 3])], Box::new(|g, v| g.pool(Pool::GlobalAvg, v[0]))));
    cases.push(("global_max", vec![rand_tensor(&mut rng, &[2, 5, 3])], Box::new(|g, v| g.pool(Pool::GlobalMax, v[0]))));
    cases.push(("adaptive_avg", vec![rand_tensor(&mut rng, &[2, 7, 3])], Box::new(|g, v| g.pool(Pool::AdaptiveAvg(3), v[0]))));
    cases.push((
        "attention",
        vec![rand_tensor(&mut rng, &[2, 4, 6]), rand_tensor(&mut rng, &[2, 5, 6]), rand_tensor(&mut rng, &[2, 5, 4])],
        Box::new(|g, v| g.attention(v[0], v[1], v[2], 2)),
    ));
    cases.push((
        "self_attention_shared_input",
        vec![rand_tensor(&mut rng, &[1, 4, 4])],
        Box::new(|g, v| g.attention(v[0], v[0], v[0], 2)),
    ));
    cases.push(("mean", vec![rand_tensor(&mut rng, &[3, 2])], Box::new(|g, v| g.mean(v[0]))));

    for (name, inputs, f) in cases {
        let err = grad_check(
            |g, v| {
                let y = f(g, v)?;
                if g.value(y).len() == 1 {
                    Ok(y)
                } else {
                    project(g, y)
                }
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: max relative error {err}");
    }
    let _ = &mut project;
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let inputs = [Tensor::new(&[3], vec![0.2, 0.7, 0.45]).unwrap()];
    let err = grad_check(|g, v| g.bce(v[0], &[0.0, 1.0, 1.0], 1e-7), &inputs, 1e-6).unwrap();
    assert!(err < 1e-6, "{err}");
}
