use drivestyle_core::recurrence::{
    channel_epsilons, joint_recurrence_plot, recurrence_plot, rp_to_image, window_jrp, write_pgm,
    RecurrencePlot,
};
use drivestyle_core::signal::Window;
use drivestyle_core::Error;
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_force(signal: &[f64], epsilon: f64) -> Vec<bool> {
    let n = signal.len();
    let mut bits = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            bits.push((signal[i] - signal[j]).abs() <= epsilon);
        }
    }
    bits
}

fn random_plot(rng: &mut ChaCha8Rng, n: usize) -> RecurrencePlot {
    let signal: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    recurrence_plot(&signal, rng.random::<f64>() * 0.5).unwrap()
}

#[test]
fn constant_signal_recurs_everywhere() {
    for eps in [0.0, 0.1, 3.0] {
        let plot = recurrence_plot(&[2.5; 7], eps).unwrap();
        assert_eq!(
            plot,
            RecurrencePlot {
                epsilon: Some(eps),
                ..RecurrencePlot::ones(7)
            }
        );
    }
}

#[test]
fn separated_pair_gives_identity() {
    let plot = recurrence_plot(&[0.0, 10.0], 1.0).unwrap();
    assert_eq!(plot.bits, vec![true, false, false, true]);
}

#[test]
fn negative_epsilon_is_rejected() {
    assert!(matches!(
        recurrence_plot(&[1.0, 2.0], -0.1),
        Err(Error::Config(_))
    ));
}

#[test]
fn random_signals_match_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let signal: Vec<f64> = (0..50).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let eps = rng.random::<f64>();
        assert_eq!(
            recurrence_plot(&signal, eps).unwrap().bits,
            brute_force(&signal, eps)
        );
    }
}

#[test]
fn joint_plot_of_a_plot_with_itself_is_the_plot() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_plot(&mut rng, 20);
    assert_eq!(
        joint_recurrence_plot(&[p.clone(), p.clone()]).unwrap().bits,
        p.bits
    );
}

#[test]
fn all_ones_plot_is_the_identity_element() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = random_plot(&mut rng, 20);
    let joint = joint_recurrence_plot(&[p.clone(), RecurrencePlot::ones(20)]).unwrap();
    assert_eq!(joint.bits, p.bits);
}

#[test]
fn joint_plot_is_order_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let plots: Vec<RecurrencePlot> = (0..5).map(|_| random_plot(&mut rng, 15)).collect();
    let forward = joint_recurrence_plot(&plots).unwrap();
    let mut reversed = plots.clone();
    reversed.reverse();
    assert_eq!(joint_recurrence_plot(&reversed).unwrap().bits, forward.bits);
    let pairwise = plots[1..].iter().fold(plots[0].clone(), |acc, p| {
        joint_recurrence_plot(&[acc, p.clone()]).unwrap()
    });
    assert_eq!(pairwise.bits, forward.bits);
}

#[test]
fn mismatched_sizes_are_a_dimension_error() {
    let a = RecurrencePlot::ones(3);
    let b = RecurrencePlot::ones(4);
    assert!(matches!(
        joint_recurrence_plot(&[a, b]),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn full_size_image_is_the_plot() {
    let plot = recurrence_plot(&[0.0, 1.0, 0.1, 5.0], 0.2).unwrap();
    let image = rp_to_image(&plot, 4).unwrap();
    let expected: Vec<f64> = plot
        .bits
        .iter()
        .map(|b| if *b { 1.0 } else { 0.0 })
        .collect();
    assert_eq!(image, expected);
}

#[test]
fn all_ones_plot_gives_all_ones_image() {
    for side in [1, 3, 6, 13] {
        assert!(rp_to_image(&RecurrencePlot::ones(6), side)
            .unwrap()
            .iter()
            .all(|v| *v == 1.0));
    }
}

#[test]
fn checkerboard_blocks_average_to_one_half() {
    let bits = (0..16).map(|k| (k / 4 + k % 4) % 2 == 0).collect();
    let plot = RecurrencePlot {
        n: 4,
        bits,
        epsilon: None,
    };
    assert_eq!(rp_to_image(&plot, 2).unwrap(), vec![0.5; 4]);
}

#[test]
fn zero_side_is_rejected() {
    assert!(matches!(
        rp_to_image(&RecurrencePlot::ones(4), 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn window_joint_plot_combines_every_channel() {
    let window = Window {
        source_id: "w".into(),
        start_index: 0,
        length: 4,
        sample_rate_hz: 10.0,
        channel_names: vec!["a".into(), "b".into()],
        data: vec![vec![0.0, 0.0, 1.0, 1.0], vec![0.0, 1.0, 0.0, 1.0]],
        label: None,
    };
    let jrp = window_jrp(&window, &[0.5, 0.5]).unwrap();
    let identity: Vec<bool> = (0..16).map(|k| k / 4 == k % 4).collect();
    assert_eq!(jrp.bits, identity);
    let eps = channel_epsilons(&[window], 0.2).unwrap();
    assert!((eps[0] - 0.1).abs() < 1e-12 && (eps[1] - 0.1).abs() < 1e-12);
}

#[test]
fn pgm_has_header_and_one_byte_per_pixel() {
    let mut out = Vec::new();
    write_pgm(&mut out, &[0.0, 1.0, 0.5, 1.0], 2).unwrap();
    assert!(out.starts_with(b"P5\n2 2\n255\n"));
    assert_eq!(out.len(), b"P5\n2 2\n255\n".len() + 4);
    assert_eq!(out[out.len() - 3], 255);
}

proptest! {
    #[test]
    fn plots_are_symmetric_with_unit_diagonal(
        signal in prop::collection::vec(-5.0f64..5.0, 1..40),
        eps in 0.0f64..2.0,
    ) {
        let p = recurrence_plot(&signal, eps).unwrap();
        for i in 0..p.n {
            prop_assert!(p.get(i, i));
            for j in 0..p.n {
                prop_assert_eq!(p.get(i, j), p.get(j, i));
            }
        }
    }

    #[test]
    fn recurrence_grows_with_epsilon(
        signal in prop::collection::vec(-5.0f64..5.0, 1..40),
        a in 0.0f64..2.0,
        b in 0.0f64..2.0,
    ) {
        let (lo, hi) = (a.min(b), a.max(b));
        let small = recurrence_plot(&signal, lo).unwrap();
        let large = recurrence_plot(&signal, hi).unwrap();
        prop_assert!(small.bits.iter().zip(&large.bits).all(|(s, l)| !s | l));
    }

    #[test]
    fn joint_plot_is_below_every_input(seed in 0u64..1000, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plots: Vec<RecurrencePlot> = (0..k).map(|_| random_plot(&mut rng, 12)).collect();
        let joint = joint_recurrence_plot(&plots).unwrap();
        for p in &plots {
            prop_assert!(joint.bits.iter().zip(&p.bits).all(|(j, b)| !j | b));
        }
    }

    #[test]
    fn image_values_are_fractions(seed in 0u64..1000, side in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = rp_to_image(&random_plot(&mut rng, 17), side).unwrap();
        prop_assert_eq!(image.len(), side * side);
        prop_assert!(image.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
