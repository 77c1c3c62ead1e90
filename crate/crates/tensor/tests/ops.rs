use drivestyle_tensor::{
    adam_step, AdamConfig, BatchNorm, Init, Mode, NnError, NormStats, OptimizerState, ParamStore,
    Tape, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn linear_identity_and_summation() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    let b = tape.constant(t(&[1], &[3.0]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1]);
    assert_eq!(tape.value(y).data(), &[6.0]);
}

#[test]
fn linear_shape_mismatch_names_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    let w = tape.constant(Tensor::zeros(&[2, 2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    match tape.linear(x, w, b) {
        Err(NnError::Dimension { axis, .. }) => assert_eq!(axis, "input features"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn conv1d_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 5, 1], 1.0));
    let k = tape.constant(t(&[1, 1, 1], &[1.0]));
    let b = tape.constant(t(&[1], &[0.0]));
    let y = tape.conv1d(x, k, b).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 5, 1]);
    assert_eq!(tape.value(y).data(), &[1.0; 5]);

    let x = tape.constant(t(&[1, 3, 1], &[1.0, 2.0, 3.0]));
    let k = tape.constant(t(&[1, 2, 1], &[1.0, 1.0]));
    let y = tape.conv1d(x, k, b).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
}

#[test]
fn conv1d_full_width_collapses_time() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 100, 8]));
    let k = tape.constant(Tensor::zeros(&[4, 100, 8]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.conv1d(x, k, b).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 1, 4]);
}

#[test]
fn conv1d_rejects_wide_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 1]));
    let k = tape.constant(Tensor::zeros(&[1, 4, 1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(
        tape.conv1d(x, k, b),
        Err(NnError::Dimension { .. })
    ));
}

#[test]
fn conv2d_identity_and_bias() {
    let data: Vec<f64> = (0..16).map(f64::from).collect();
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 4, 4, 1], &data));
    let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let b = tape.constant(t(&[1], &[0.0]));
    let y = tape.conv2d(x, k, b, 1).unwrap();
    assert_eq!(tape.value(y).data(), data.as_slice());

    let x = tape.constant(Tensor::zeros(&[1, 4, 4, 1]));
    let k = tape.constant(Tensor::full(&[2, 3, 3, 1], 0.7));
    let b = tape.constant(t(&[2], &[1.5, -2.0]));
    let y = tape.conv2d(x, k, b, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 2, 2, 2]);
    assert_eq!(
        tape.value(y).data(),
        &[1.5, -2.0, 1.5, -2.0, 1.5, -2.0, 1.5, -2.0]
    );
}

#[test]
fn conv2d_stride_arithmetic() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 100, 100, 1]));
    let k = tape.constant(Tensor::zeros(&[3, 5, 5, 1]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.conv2d(x, k, b, 5).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 20, 20, 3]);
}

#[test]
fn lstm_zero_weights_give_zero_output() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 6, 3], 0.8));
    let w_ih = tape.constant(Tensor::zeros(&[3, 16]));
    let w_hh = tape.constant(Tensor::zeros(&[4, 16]));
    let b = tape.constant(Tensor::zeros(&[16]));
    let y = tape.lstm(x, w_ih, w_hh, b).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 4]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_single_step_is_one_cell_application() {
    let (input, hidden) = (3, 2);
    let xs = [0.5, -1.0, 2.0];
    let w_ih: Vec<f64> = (0..input * 4 * hidden)
        .map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0)
        .collect();
    let w_hh: Vec<f64> = (0..hidden * 4 * hidden)
        .map(|i| (i as f64 - 8.0) / 20.0)
        .collect();
    let bias: Vec<f64> = (0..4 * hidden).map(|i| i as f64 / 10.0 - 0.3).collect();

    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, input], &xs));
    let wi = tape.constant(t(&[input, 4 * hidden], &w_ih));
    let wh = tape.constant(t(&[hidden, 4 * hidden], &w_hh));
    let b = tape.constant(t(&[4 * hidden], &bias));
    let y = tape.lstm(x, wi, wh, b).unwrap();

    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let z: Vec<f64> = (0..4 * hidden)
        .map(|col| {
            bias[col]
                + (0..input)
                    .map(|r| xs[r] * w_ih[r * 4 * hidden + col])
                    .sum::<f64>()
        })
        .collect();
    let expected: Vec<f64> = (0..hidden)
        .map(|j| {
            let i = sig(z[j]);
            let g = z[2 * hidden + j].tanh();
            let o = sig(z[3 * hidden + j]);
            o * (i * g).tanh()
        })
        .collect();
    close(tape.value(y).data(), &expected, 1e-14);
}

#[test]
fn lstm_reports_non_finite_step() {
    let mut tape = Tape::new();
    let mut data = vec![0.1; 4 * 2];
    data[5] = f64::NAN;
    let x = tape.constant(t(&[1, 4, 2], &data));
    let w_ih = tape.constant(Tensor::full(&[2, 4], 0.1));
    let w_hh = tape.constant(Tensor::full(&[1, 4], 0.1));
    let b = tape.constant(Tensor::zeros(&[4]));
    match tape.lstm(x, w_ih, w_hh, b) {
        Err(NnError::NonFinite { step, .. }) => assert_eq!(step, 2),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(a);
    close(tape.value(y).data(), &[1.0 / 3.0; 3], 1e-15);

    let a = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
    let y = tape.softmax(a);
    let out = tape.value(y).data();
    assert!(out.iter().all(|v| v.is_finite()));
    assert!((out[0] - 1.0).abs() < 1e-12 && out[1] < 1e-12);

    let a = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
    let y = tape.softmax(a);
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    let oracle: Vec<f64> = e.iter().map(|v| v / s).collect();
    close(tape.value(y).data(), &oracle, 1e-15);
    close(tape.value(y).data(), &[0.09003, 0.24473, 0.66524], 1e-5);
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let p = tape.constant(t(&[1, 3], &[0.0, 1.0, 0.0]));
    let l = tape.cross_entropy(p, &[1]).unwrap();
    assert!(tape.value(l).data()[0].abs() < 1e-12);

    let p = tape.constant(Tensor::full(&[2, 3], 1.0 / 3.0));
    let l = tape.cross_entropy(p, &[0, 2]).unwrap();
    assert!((tape.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);
    assert!((tape.value(l).data()[0] - 1.09861).abs() < 1e-5);

    let p = tape.constant(t(&[1, 3], &[0.5, 0.3, 0.2]));
    let l = tape.cross_entropy(p, &[1]).unwrap();
    assert!((tape.value(l).data()[0] - -(0.3f64.ln())).abs() < 1e-12);
    assert!((tape.value(l).data()[0] - 1.20397).abs() < 1e-5);

    let p = tape.constant(t(&[1, 3], &[1.0, 0.0, 0.0]));
    let l = tape.cross_entropy(p, &[1]).unwrap();
    assert!((tape.value(l).data()[0] + 1e-12f64.ln()).abs() < 1e-9);

    assert!(matches!(
        tape.cross_entropy(p, &[3]),
        Err(NnError::Index {
            index: 3,
            classes: 3
        })
    ));
}

#[test]
fn batchnorm_train_mode_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 3, &mut rng).unwrap();
    let data: Vec<f64> = (0..24)
        .map(|i| ((i * 37 % 17) as f64) * 0.3 - 1.0 + i as f64)
        .collect();
    let mut tape = Tape::new();
    let x = tape.constant(t(&[8, 3], &data));
    let (y, stats) = bn.forward(&mut tape, &store, x, Mode::Train).unwrap();
    assert!(stats.is_some());
    let out = tape.value(y).data();
    for j in 0..3 {
        let col: Vec<f64> = out.iter().skip(j).step_by(3).copied().collect();
        let mean = col.iter().sum::<f64>() / 8.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn batchnorm_zero_gamma_yields_beta() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3, 2], &[1.0, 5.0, -2.0, 0.5, 4.0, 9.0]));
    let g = tape.constant(Tensor::zeros(&[2]));
    let b = tape.constant(t(&[2], &[0.25, -0.75]));
    let (y, _) = tape.batchnorm(x, g, b, NormStats::Batch).unwrap();
    assert_eq!(
        tape.value(y).data(),
        &[0.25, -0.75, 0.25, -0.75, 0.25, -0.75]
    );
}

#[test]
fn batchnorm_eval_with_unit_stats_is_affine() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[3.0, -4.0]));
    let g = tape.constant(t(&[2], &[2.0, 0.5]));
    let b = tape.constant(t(&[2], &[1.0, 0.0]));
    let (y, stats) = tape
        .batchnorm(
            x,
            g,
            b,
            NormStats::Running {
                mean: &[0.0, 0.0],
                var: &[1.0, 1.0],
            },
        )
        .unwrap();
    assert!(stats.is_none());
    let scale = 1.0 / (1.0 + 1e-5f64).sqrt();
    close(
        tape.value(y).data(),
        &[2.0 * 3.0 * scale + 1.0, 0.5 * -4.0 * scale],
        1e-15,
    );
    close(tape.value(y).data(), &[7.0, -2.0], 1e-4);
}

#[test]
fn batchnorm_single_row_train_is_config_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2]));
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(
        tape.batchnorm(x, g, b, NormStats::Batch),
        Err(NnError::Config(_))
    ));
}

#[test]
fn dropout_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[100, 100], 1.0));
    for mode in [Mode::Train, Mode::Eval] {
        let y = tape.dropout(x, 0.0, mode, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }
    let y = tape.dropout(x, 0.7, Mode::Eval, &mut rng).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let y = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
    let out = tape.value(y).data();
    let survivors = out.iter().filter(|&&v| v != 0.0).count() as f64 / 10_000.0;
    assert!(
        (survivors - 0.5).abs() <= 0.02,
        "survivor fraction {survivors}"
    );
    assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));

    assert!(matches!(
        tape.dropout(x, 1.0, Mode::Train, &mut rng),
        Err(NnError::Config(_))
    ));
    assert!(matches!(
        tape.dropout(x, -0.1, Mode::Eval, &mut rng),
        Err(NnError::Config(_))
    ));
}

#[test]
fn dropout_mask_is_seeded() {
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[50], 1.0));
        let y = tape.dropout(x, 0.3, Mode::Train, &mut rng).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

fn scalar_param(
    store: &mut ParamStore,
    name: &str,
    shape: &[usize],
    value: f64,
) -> drivestyle_tensor::ParamId {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    store
        .add(name, shape, Init::Constant(value), &mut rng)
        .unwrap()
}

#[test]
fn backward_of_sum_is_ones_and_zero_scale_is_zero() {
    let mut store = ParamStore::new();
    let id = scalar_param(&mut store, "w", &[2, 3], 0.4);
    let mut tape = Tape::new();
    let w = tape.param(&store, id);
    let s = tape.sum(w);
    tape.backward(s, &mut store).unwrap();
    assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[1.0; 6]);

    store.clear_grads();
    let mut tape = Tape::new();
    let w = tape.param(&store, id);
    let z = tape.scale(w, 0.0);
    let s = tape.sum(z);
    tape.backward(s, &mut store).unwrap();
    assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[0.0; 6]);
}

#[test]
fn backward_accumulates_and_refuses_second_call() {
    let mut store = ParamStore::new();
    let id = scalar_param(&mut store, "w", &[3], 1.0);
    for _ in 0..2 {
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let s = tape.sum(w);
        tape.backward(s, &mut store).unwrap();
        assert!(matches!(
            tape.backward(s, &mut store),
            Err(NnError::State(_))
        ));
    }
    assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[2.0; 3]);

    let mut tape = Tape::new();
    let w = tape.param(&store, id);
    let s = tape.sum(w);
    tape.backward(s, &mut store).unwrap();
    tape.reset();
    let w = tape.param(&store, id);
    let s = tape.sum(w);
    assert!(tape.backward(s, &mut store).is_ok());
}

#[test]
fn adam_examples() {
    let mut store = ParamStore::new();
    let id = scalar_param(&mut store, "w", &[1], 0.0);
    let mut state = OptimizerState::new(&store, AdamConfig::default());

    store.get_mut(id).grad = Some(Tensor::scalar(0.0));
    adam_step(&mut store, &mut state).unwrap();
    assert_eq!(store.get(id).value.data(), &[0.0]);

    let mut store = ParamStore::new();
    let id = scalar_param(&mut store, "w", &[1], 0.0);
    let mut state = OptimizerState::new(&store, AdamConfig::default());
    store.get_mut(id).grad = Some(Tensor::scalar(1.0));
    adam_step(&mut store, &mut state).unwrap();
    let delta = store.get(id).value.data()[0];
    assert!((delta - -1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    assert_eq!(state.step_count, 1);

    let mut last = 0.0;
    for _ in 0..2000 {
        let before = store.get(id).value.data()[0];
        store.get_mut(id).grad = Some(Tensor::scalar(0.37));
        adam_step(&mut store, &mut state).unwrap();
        last = before - store.get(id).value.data()[0];
    }
    assert!((last - 1e-3).abs() < 1e-6);
    assert_eq!(state.step_count, 2001);
}

#[test]
fn adam_missing_grad_names_parameter() {
    let mut store = ParamStore::new();
    scalar_param(&mut store, "dense.weight", &[2], 0.0);
    let mut state = OptimizerState::new(&store, AdamConfig::default());
    match adam_step(&mut store, &mut state) {
        Err(NnError::State(msg)) => assert!(msg.contains("dense.weight")),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(state.step_count, 0);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in proptest::collection::vec(proptest::collection::vec(-1e4f64..1e4, 1..6), 1..6)
    ) {
        let width = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().filter(|r| r.len() == width).collect();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&rows).unwrap());
        let y = tape.softmax(a);
        for row in tape.value(y).data().chunks(width) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn eval_mode_layers_are_bit_deterministic(
        data in proptest::collection::vec(-5.0f64..5.0, 12),
        rate in 0.0f64..0.9,
        seed in any::<u64>(),
    ) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![4, 3], data.clone()).unwrap());
            let d = tape.dropout(x, rate, Mode::Eval, &mut rng).unwrap();
            let g = tape.constant(Tensor::full(&[3], 1.3));
            let b = tape.constant(Tensor::full(&[3], -0.2));
            let (y, _) = tape.batchnorm(d, g, b, NormStats::Running { mean: &[0.1, 0.2, 0.3], var: &[1.0, 2.0, 0.5] }).unwrap();
            tape.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>()
        };
        prop_assert_eq!(run(), run());
    }
}
