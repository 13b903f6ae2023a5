mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use twinspec::speccube::{extract_labeled_spectra, valid_pair_coordinates};
use twinspec::synthgen::{generate_paired_scene, AbioticModel, SyntheticSceneConfig};

use common::{small_abiotic, small_scene};

fn scene_with_seed(seed: u64) -> SyntheticSceneConfig {
    SyntheticSceneConfig { seed, ..small_scene() }
}

fn gain_only() -> AbioticModel {
    AbioticModel {
        noise_rel: 0.0,
        offset_amplitude: 0.0,
        ramp_amplitude: 0.0,
        ..small_abiotic()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn crowns_are_pixel_disjoint(seed in 0u64..10_000) {
        let config = scene_with_seed(seed);
        let scene = generate_paired_scene(&config, &small_abiotic(), &small_abiotic(), seed).unwrap();
        let crowns = &scene.crowns.crowns;
        for (a, ca) in crowns.iter().enumerate() {
            for cb in &crowns[a + 1..] {
                for p in &ca.pixels {
                    prop_assert!(!cb.pixels.contains(p), "crowns {} and {} share {:?}", ca.id, cb.id, p);
                }
            }
        }
        let total: usize = crowns.iter().map(|c| c.pixels.len()).sum();
        let distinct: HashSet<_> = crowns.iter().flat_map(|c| c.pixels.iter().copied()).collect();
        prop_assert_eq!(total, distinct.len());
    }

    #[test]
    fn both_dates_share_labels_and_coordinates(seed in 0u64..10_000) {
        let config = scene_with_seed(seed);
        let scene = generate_paired_scene(&config, &small_abiotic(), &small_abiotic(), seed).unwrap();
        let l1 = extract_labeled_spectra(&scene.t1, &scene.crowns).unwrap();
        let l2 = extract_labeled_spectra(&scene.t2, &scene.crowns).unwrap();
        prop_assert_eq!(&l1.labels, &l2.labels);
        prop_assert_eq!(&l1.crown_ids, &l2.crown_ids);
        // brute force: one row per crown pixel, in crown order
        let expected: Vec<usize> = scene.crowns.crowns.iter().flat_map(|c| vec![c.species; c.pixels.len()]).collect();
        let mut got = l1.labels.clone();
        got.sort_unstable();
        let mut want = expected;
        want.sort_unstable();
        prop_assert_eq!(got, want);
        let pairs = valid_pair_coordinates(&scene.t1, &scene.t2).unwrap();
        prop_assert_eq!(pairs.len(), config.rows * config.cols);
        prop_assert!(scene.t1.data().iter().chain(scene.t2.data()).all(|v| *v >= 0.0));
    }

    #[test]
    fn gain_only_dates_differ_by_a_per_domain_factor(seed in 0u64..10_000) {
        let config = scene_with_seed(seed);
        let scene = generate_paired_scene(&config, &gain_only(), &gain_only(), seed).unwrap();
        let ranges = config.layout.ranges();
        for (i, j) in [(0, 0), (3, 7), (config.rows - 1, config.cols - 1), (10, 4)] {
            let (a, b) = (scene.t1.pixel_f64(i, j), scene.t2.pixel_f64(i, j));
            for r in &ranges {
                // background bands clipped to zero carry no ratio
                let ratios: Vec<f64> = r.clone().filter(|&k| b[k] > 1e-6).map(|k| a[k] / b[k]).collect();
                if ratios.is_empty() {
                    continue;
                }
                let spread = ratios.iter().fold(0.0f64, |m, q| m.max((q - ratios[0]).abs()));
                // cubes store f32 samples
                prop_assert!(spread < 1e-5 * ratios[0].abs(), "pixel ({i},{j}) ratios {ratios:?}");
            }
        }
    }
}

#[test]
fn paired_generation_is_deterministic() {
    let config = small_scene();
    let a = generate_paired_scene(&config, &small_abiotic(), &small_abiotic(), 3).unwrap();
    let b = generate_paired_scene(&config, &small_abiotic(), &small_abiotic(), 3).unwrap();
    assert_eq!(a.t1, b.t1);
    assert_eq!(a.t2, b.t2);
    assert_eq!(a.crowns, b.crowns);
    assert_ne!(a.t1.data(), a.t2.data());
}
