//! Focal loss and overlap metrics.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lwanet::loss::{focal_loss_backward, focal_loss_forward, focal_loss_per_pixel, FocalConfig, LabelMap};
use lwanet::metrics::{ConfusionAccumulator, MeanOptions};
use lwanet::tensor::Tensor;

fn random_problem(seed: u64, c: usize) -> (Tensor<f64>, LabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::randn([2, c, 3, 4], 2.0, &mut rng);
    let target = LabelMap::new([2, 3, 4], (0..24).map(|_| rng.gen_range(0..c) as u8).collect()).unwrap();
    (logits, target)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn focal_decreases_pointwise_in_gamma(seed in any::<u64>(), c in 2usize..6, g in 0.0f64..6.0, dg in 0.1f64..3.0) {
        let (logits, target) = random_problem(seed, c);
        let lo = focal_loss_per_pixel(&logits, &target, &FocalConfig::with_gamma(g)).unwrap();
        let hi = focal_loss_per_pixel(&logits, &target, &FocalConfig::with_gamma(g + dg)).unwrap();
        for (a, b) in lo.data().iter().zip(hi.data()) {
            prop_assert!(*b <= *a && *b >= 0.0);
        }
    }

    #[test]
    fn focal_is_shift_invariant_per_pixel(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let (logits, target) = random_problem(seed, 4);
        let shifted = logits.map(|v| v + shift);
        let cfg = FocalConfig::with_gamma(2.0);
        let a = focal_loss_forward(&logits, &target, &cfg).unwrap();
        let b = focal_loss_forward(&shifted, &target, &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
    }

    #[test]
    fn focal_gradient_sums_to_zero_over_classes(seed in any::<u64>(), g in 0.0f64..6.0) {
        let (logits, target) = random_problem(seed, 5);
        let grad = focal_loss_backward(&logits, &target, &FocalConfig::with_gamma(g)).unwrap();
        for i in 0..2 {
            for p in 0..12 {
                let s: f64 = (0..5).map(|j| grad.plane(i, j)[p]).sum();
                prop_assert!(s.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dice_and_iou_are_linked(pred in prop::collection::vec(0u8..4, 1..200), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target: Vec<u8> = pred.iter().map(|&p| if rng.gen_bool(0.7) { p } else { rng.gen_range(0..4) }).collect();
        let mut acc = ConfusionAccumulator::new(4);
        acc.update(&pred, &target).unwrap();
        let dice = acc.dice_per_class().unwrap();
        let iou = acc.iou_per_class().unwrap();
        for (d, j) in dice.iter().zip(&iou) {
            match (d, j) {
                (Some(d), Some(j)) => prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12),
                (None, None) => {}
                _ => prop_assert!(false, "presence disagrees"),
            }
        }
        let mut halves = ConfusionAccumulator::new(4);
        let mid = pred.len() / 2;
        halves.update(&pred[..mid], &target[..mid]).unwrap();
        halves.update(&pred[mid..], &target[mid..]).unwrap();
        prop_assert_eq!(halves, acc);
    }
}

#[test]
fn ignored_pixels_do_not_contribute() {
    let (logits, mut target) = random_problem(3, 4);
    let cfg = FocalConfig {
        gamma: 2.0,
        ignore_index: Some(255),
    };
    let full = focal_loss_per_pixel(&logits, &target, &cfg).unwrap();
    target.data_mut()[5] = 255;
    let partial = focal_loss_per_pixel(&logits, &target, &cfg).unwrap();
    assert_eq!(partial.data()[5], 0.0);
    let grad = focal_loss_backward(&logits, &target, &cfg).unwrap();
    assert!((0..4).all(|j| grad.plane(0, j)[5] == 0.0));
    let mean = focal_loss_forward(&logits, &target, &cfg).unwrap();
    let expected = (partial.data().iter().sum::<f64>()) / 23.0;
    assert!((mean - expected).abs() < 1e-14);
    assert_ne!(full, partial);
}

#[test]
fn perfect_prediction_scores_one() {
    let labels: Vec<u8> = (0..60).map(|i| (i % 3) as u8).collect();
    let mut acc = ConfusionAccumulator::new(5);
    acc.update(&labels, &labels).unwrap();
    let opts = MeanOptions::default();
    assert_eq!(acc.mean_dice(opts).unwrap(), 1.0);
    assert_eq!(acc.mean_iou(opts).unwrap(), 1.0);
    let strict = MeanOptions {
        present_only: false,
        include_background: true,
    };
    // Classes 3 and 4 never appear and count as zero when absent classes are included.
    assert!((acc.mean_dice(strict).unwrap() - 0.6).abs() < 1e-15);
}
