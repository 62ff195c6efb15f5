//! Property tests for the numeric invariants the library guarantees.

use flatscape::attacks::{adversarial_accuracy, pgd, AttackConfig};
use flatscape::data::synthetic_blobs;
use flatscape::landscape::{sample_direction_pair, GridSpec, LandscapePlane};
use flatscape::models::{ArchitectureConfig, Model};
use flatscape::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn logsumexp_bounds(vals in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
        let k = vals.len();
        let t = Tensor::<f64>::new(vec![k], vals.clone()).unwrap();
        let tape = Tape::new();
        let lse = tape.leaf(t, false).logsumexp(0).unwrap().item().unwrap();
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lse >= max);
        prop_assert!(lse <= max + (k as f64).ln() + 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(vals in proptest::collection::vec(-30.0f64..30.0, 2..10)) {
        let k = vals.len();
        let t = Tensor::<f64>::new(vec![k], vals).unwrap();
        let tape = Tape::new();
        let s = tape.leaf(t, false).softmax(0).unwrap().value();
        let mut total = 0.0;
        for &v in s.data() {
            prop_assert!((0.0..=1.0).contains(&v));
            total += v;
        }
        prop_assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn plane_direction_invariants(seed in 0u64..10_000, dim in 2usize..64) {
        let (d, dp) = sample_direction_pair::<f64>(dim, seed).unwrap();
        let dot = d.dot(&dp).unwrap().abs();
        prop_assert!(dot <= 1e-6 * d.frob_norm() * dp.frob_norm());
        prop_assert!((d.frob_norm() - dp.frob_norm()).abs() <= 1e-6 * d.frob_norm());
        for &v in d.data() {
            prop_assert!(v == 1.0 || v == -1.0);
        }
    }

    #[test]
    fn pgd_budget_and_box(seed in 0u64..300) {
        let model = Model::<f64>::build(&ArchitectureConfig::mlp(3, vec![4], 2), 5).unwrap();
        let x = Tensor::<f64>::rand_uniform(&[3], 0.0, 1.0, &mut rng(seed));
        let cfg = AttackConfig { random_start: seed % 2 == 0, ..AttackConfig::pgd(0.08, 0.03, 4) };
        let adv = pgd(&model, &x, (seed % 2) as usize, &cfg, seed).unwrap();
        for (a, o) in adv.data().iter().zip(x.data()) {
            prop_assert!((a - o).abs() <= 0.08);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }
}

#[test]
fn direction_pair_sweep_over_seeds() {
    for seed in 0..1000 {
        let (d, dp) = sample_direction_pair::<f64>(784, seed).unwrap();
        let dot = d.dot(&dp).unwrap().abs();
        assert!(dot <= 1e-6 * d.frob_norm() * dp.frob_norm(), "seed {seed}");
        assert!((d.frob_norm() - dp.frob_norm()).abs() <= 1e-6 * d.frob_norm());
    }
}

#[test]
fn plane_grid_always_contains_center() {
    for res in [1usize, 3, 10] {
        let grid = GridSpec::new(8.0 / 255.0, res);
        let eps = grid.eps_values();
        assert_eq!(eps.len(), 2 * res + 1);
        assert_eq!(eps[res], 0.0);
    }
}

#[test]
fn adversarial_accuracy_non_increasing_in_eps() {
    let data = synthetic_blobs::<f64>(30, 3, 6, 5.0, 21).unwrap();
    let mut model = Model::<f64>::build(&ArchitectureConfig::mlp(6, vec![10], 3), 9).unwrap();
    let tcfg = flatscape::training::TrainConfig {
        epochs: 15,
        batch_size: 16,
        learning_rate: 0.02,
        lr_decay_epochs: vec![],
        ..Default::default()
    };
    flatscape::training::train(
        &mut model,
        &data,
        &tcfg,
        &flatscape::training::DefenseConfig::None,
        None,
    )
    .unwrap();

    let eps = 25.0 / 255.0;
    let accs: Vec<f64> = [0.0, eps / 2.0, eps, 2.0 * eps]
        .iter()
        .map(|&e| {
            let cfg = AttackConfig::pgd(e, (e / 4.0).max(1e-3), 5);
            adversarial_accuracy(&model, &data, &cfg, 3).unwrap()
        })
        .collect();
    for w in accs.windows(2) {
        assert!(
            w[1] <= w[0] + 1e-12,
            "adversarial accuracy increased along the sweep: {accs:?}"
        );
    }
}

#[test]
fn batch_forward_matches_per_sample_within_tolerance() {
    let model = Model::<f32>::build(&ArchitectureConfig::lenet_small([1, 8, 8], 3), 13).unwrap();
    let mut r = rng(77);
    let batch = Tensor::<f32>::rand_uniform(&[4, 1, 8, 8], 0.0, 1.0, &mut r);
    let out = model.forward_logits(&batch).unwrap();
    for i in 0..4 {
        let x = Tensor::<f32>::new(
            vec![1, 8, 8],
            batch.data()[i * 64..(i + 1) * 64].to_vec(),
        )
        .unwrap();
        let single = model.logits_single(&x).unwrap();
        for (a, b) in out.data()[i * 3..(i + 1) * 3].iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn landscape_plane_rejects_mismatched_directions() {
    let center = Tensor::<f64>::zeros(&[4]);
    let d = Tensor::<f64>::zeros(&[5]);
    let dp = Tensor::<f64>::zeros(&[4]);
    assert!(LandscapePlane::new(
        center,
        d,
        dp,
        GridSpec::new(0.1, 1),
        flatscape::landscape::DirectionKind::Random
    )
    .is_err());
}
