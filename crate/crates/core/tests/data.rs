use proptest::prelude::*;

use rigidreg::data::*;
use rigidreg::geom3d::{compose, rot_error};

#[test]
fn outlier_count_for_three_thousand() {
    let cfg = GenConfig {
        pairs: 1,
        n: 3000,
        ..GenConfig::default()
    };
    let set = &gen_synthetic(&cfg).unwrap()[0];
    let outliers = set.labels.as_ref().unwrap().iter().filter(|&&y| !y).count();
    assert!((outliers as f64 - 1500.0).abs() <= 30.0, "{outliers}");
}

#[test]
fn file_round_trip_is_exact() {
    let sets = gen_synthetic(&GenConfig {
        pairs: 5,
        n: 64,
        seed: 3,
        ..GenConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.bin");
    write_dataset(&path, &sets).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, sets.iter().map(to_stored_precision).collect::<Vec<_>>());
    let again = dir.path().join("again.bin");
    write_dataset(&again, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn calibration_recovers_half() {
    let sets = gen_synthetic(&GenConfig {
        pairs: 20,
        n: 100,
        ..GenConfig::default()
    })
    .unwrap();
    let thr = calibrate_threshold(&sets, 0.5).unwrap();
    let total: usize = sets.iter().map(|s| s.len()).sum();
    let outliers: usize = sets
        .iter()
        .map(|s| label_inliers(s, s.gt.as_ref().unwrap(), thr).iter().filter(|&&y| !y).count())
        .sum();
    assert!((outliers as f64 / total as f64 - 0.5).abs() <= 0.01);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn labels_reproduce_generator_assignment(seed in 0u64..10_000, n in 10usize..200, f in 0.0f64..1.0) {
        // Displacement above 10x the label threshold, noise below a tenth of it.
        let cfg = GenConfig {
            pairs: 1,
            n,
            outlier_fraction: f,
            outlier_displacement: [0.6, 1.0],
            noise_sigma: 0.004,
            seed,
            ..GenConfig::default()
        };
        let set = gen_pair(&cfg, 0).unwrap();
        let outliers = set.labels.as_ref().unwrap().iter().filter(|&&y| !y).count();
        prop_assert_eq!(outliers, (f * n as f64).round() as usize);
    }

    #[test]
    fn curriculum_is_lipschitz(tau in 0.0f64..1.0, delta in 0.0f64..0.2, max in 0.0f64..90.0) {
        let t2 = (tau + delta).min(1.0);
        let d = (curriculum_theta(t2, max) - curriculum_theta(tau, max)).abs();
        prop_assert!(d <= 2.0 * max * (t2 - tau) + 1e-12);
    }

    #[test]
    fn augmentation_composes_exact_angle(seed in 0u64..1000, theta in 0.0f64..170.0) {
        let cfg = GenConfig { pairs: 1, n: 8, seed, ..GenConfig::default() };
        let pair = gen_pair(&cfg, 0).unwrap();
        let out = augment_pair(&pair, theta, seed);
        let gt = pair.gt.unwrap();
        let new_gt = out.gt.unwrap();
        // new_gt = A ∘ gt, so A = new_gt ∘ gt⁻¹ has angle θ.
        let a = compose(&new_gt, &gt.inverse());
        prop_assert!((rot_error(&a.rotation, &nalgebra::Matrix3::identity()) - theta).abs() < 1e-6);
        prop_assert_eq!(&out.labels, &pair.labels);
        for (p, q) in out.p.iter().zip(&out.q).zip(out.labels.as_ref().unwrap()).filter(|(_, &y)| y).map(|(pq, _)| pq) {
            prop_assert!((q - new_gt.apply(p)).norm() < 0.05);
        }
    }
}
