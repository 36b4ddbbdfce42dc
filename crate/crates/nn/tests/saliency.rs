use biastrial_core::phantom::{Region, RegionAtlas, RegionRole};
use biastrial_core::simba_gen::{BiasGroup, ClassLabel};
use biastrial_core::{Error, Grid};
use biastrial_nn::model::{init_params, input_gradient, predict, CnnConfig, ModelParams};
use biastrial_nn::saliency::{group_average_map, smoothgrad, smoothgrad_with, weighted_saliency_score, SaliencyConfig};
use biastrial_nn::train::Example;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: [usize; 3] = [8, 8, 8];

fn model(seed: u64) -> ModelParams<f32> {
    let mut p = init_params::<f32>(&CnnConfig { filters: vec![3, 4], ..CnnConfig::desk() }, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let n = p.tensors.len();
    for v in &mut p.tensors[n - 2].data {
        *v = rng.random_range(-3.0..3.0);
    }
    p
}

fn volume(seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..512).map(|_| rng.random_range(0.0..1.0)).collect()
}

#[test]
fn linear_surrogate_gives_absolute_weights() {
    let w: Vec<f64> = (0..50).map(|i| ((i as f64) * 0.7).sin()).collect();
    let x: Vec<f64> = (0..50).map(|i| i as f64 / 50.0).collect();
    for abs_before_mean in [false, true] {
        let cfg = SaliencyConfig { samples: 7, seed: 3, abs_before_mean, ..Default::default() };
        let s = smoothgrad_with(|_: &[f64]| Ok(w.clone()), &x, &cfg).unwrap();
        for (a, b) in s.iter().zip(&w) {
            assert!((a - b.abs()).abs() < 1e-12);
        }
    }
}

#[test]
fn single_noiseless_draw_is_the_absolute_gradient() {
    let p = model(1);
    let x = volume(2);
    let cfg = SaliencyConfig { samples: 1, noise_fraction: 0.0, ..Default::default() };
    let s = smoothgrad(&p, &x, DIMS, &cfg).unwrap();
    let g = input_gradient(&p, &x, DIMS, ClassLabel::Disease).unwrap();
    assert!(g.iter().any(|&v| v != 0.0));
    for (a, b) in s.iter().zip(&g) {
        assert_eq!(*a, (*b as f64).abs());
    }
}

#[test]
fn noise_draws_are_seeded() {
    let p = model(3);
    let x = volume(4);
    let cfg = SaliencyConfig { samples: 4, seed: 9, ..Default::default() };
    let a = smoothgrad(&p, &x, DIMS, &cfg).unwrap();
    assert_eq!(a, smoothgrad(&p, &x, DIMS, &cfg).unwrap());
    assert_ne!(a, smoothgrad(&p, &x, DIMS, &SaliencyConfig { seed: 10, ..cfg }).unwrap());
}

#[test]
fn one_more_draw_barely_moves_a_large_average() {
    let p = model(5);
    let x = volume(6);
    let run = |samples| smoothgrad(&p, &x, DIMS, &SaliencyConfig { samples, seed: 1, ..Default::default() }).unwrap();
    let (a, b) = (run(50), run(51));
    let diff: f64 = a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = a.iter().map(|u| u * u).sum::<f64>().sqrt();
    assert!(diff / norm < 0.05, "relative change {}", diff / norm);
}

#[test]
fn invalid_configurations_are_rejected() {
    let x = vec![0.0f64; 4];
    let grad = |_: &[f64]| Ok(vec![1.0; 4]);
    assert!(smoothgrad_with(grad, &x, &SaliencyConfig { samples: 0, ..Default::default() }).is_err());
    assert!(smoothgrad_with(grad, &x, &SaliencyConfig { noise_fraction: -0.1, ..Default::default() }).is_err());
    let bad = |_: &[f64]| Ok(vec![f64::NAN; 4]);
    assert!(matches!(smoothgrad_with(bad, &x, &SaliencyConfig::default()), Err(Error::Numeric(_))));
}

/// Labels: 0 background in the first slab, 1 in the next three, 2 in the rest.
fn atlas() -> RegionAtlas {
    let labels = Grid::from_fn(DIMS, |_, _, z| match z {
        0 => 0,
        1..=3 => 1,
        _ => 2,
    });
    let region = |label, name: &str, role| Region { label, name: name.into(), role };
    RegionAtlas {
        spacing: [1.0; 3],
        labels,
        regions: vec![region(1, "a", RegionRole::Disease), region(2, "b", RegionRole::Other), region(3, "empty", RegionRole::Other)],
    }
}

#[test]
fn weighted_score_reference_values() {
    let atlas = atlas();
    let uniform = Grid::filled(DIMS, 0.3f32);
    assert!((weighted_saliency_score(&uniform, &atlas, 1).unwrap() - 1.0).abs() < 1e-12);
    // all mass in region 1: ratio of labelled voxels to region voxels
    let inside = Grid::from_fn(DIMS, |_, _, z| if (1..=3).contains(&z) { 2.0f32 } else { 0.0 });
    let b = 7.0 * 64.0;
    let r = 3.0 * 64.0;
    assert!((weighted_saliency_score(&inside, &atlas, 1).unwrap() - b / r).abs() < 1e-12);
    assert_eq!(weighted_saliency_score(&inside, &atlas, 2).unwrap(), 0.0);
    // background mass is ignored
    let background = Grid::from_fn(DIMS, |_, _, z| if z == 0 { 100.0f32 } else { 1.0 });
    assert!((weighted_saliency_score(&background, &atlas, 2).unwrap() - 1.0).abs() < 1e-12);

    assert!(matches!(weighted_saliency_score(&uniform, &atlas, 3), Err(Error::Undefined(_))));
    assert!(matches!(weighted_saliency_score(&Grid::filled(DIMS, 0.0f32), &atlas, 1), Err(Error::Undefined(_))));
    assert!(weighted_saliency_score(&uniform, &atlas, 9).is_err());
    assert!(weighted_saliency_score(&Grid::filled([4, 4, 4], 1.0f32), &atlas, 1).is_err());
}

proptest! {
    #[test]
    fn weighted_score_is_scale_invariant_and_monotone(
        values in prop::collection::vec(0.01f32..10.0, 512),
        scale in 0.01f32..100.0,
        bump in 0.1f32..5.0,
        voxel in 64usize..256,
    ) {
        let atlas = atlas();
        let map = Grid::from_vec(DIMS, values).unwrap();
        let s = weighted_saliency_score(&map, &atlas, 1).unwrap();
        let scaled = map.map(|v| v * scale);
        let t = weighted_saliency_score(&scaled, &atlas, 1).unwrap();
        prop_assert!((s - t).abs() <= 1e-5 * s.abs());
        // voxel 64..256 lies in region 1
        let mut bumped = map.clone();
        bumped.as_mut_slice()[voxel] += bump;
        prop_assert!(weighted_saliency_score(&bumped, &atlas, 1).unwrap() > s);
        prop_assert!(weighted_saliency_score(&bumped, &atlas, 2).unwrap() < weighted_saliency_score(&map, &atlas, 2).unwrap());
    }
}

fn examples(p: &ModelParams<f32>) -> Vec<Example<f32>> {
    (0..12)
        .map(|i| {
            let input = volume(100 + i);
            let prob = predict(p, &[input.as_slice()], DIMS).unwrap()[0];
            // half the subjects get the label the model predicts
            let label = if i % 2 == 0 { prob >= 0.5 } else { prob < 0.5 };
            Example { id: i as u32, input, label, group: if i % 3 == 0 { BiasGroup::NonBias } else { BiasGroup::Bias } }
        })
        .collect()
}

#[test]
fn group_average_uses_only_correctly_classified_members() {
    let p = model(7);
    let ex = examples(&p);
    let cfg = SaliencyConfig { samples: 2, seed: 4, ..Default::default() };
    for class in [ClassLabel::Disease, ClassLabel::NonDisease] {
        for group in [BiasGroup::Bias, BiasGroup::NonBias] {
            let map = group_average_map(&p, &ex, DIMS, class, group, 100, &cfg).unwrap();
            assert!(map.short);
            for &id in &map.subjects {
                let e = &ex[id as usize];
                assert_eq!(e.group, group);
                assert_eq!(e.label, class.is_positive());
                let prob = predict(&p, &[e.input.as_slice()], DIMS).unwrap()[0];
                assert_eq!(prob >= 0.5, e.label);
            }
            let correct = ex
                .iter()
                .filter(|e| e.group == group && e.label == class.is_positive() && e.id % 2 == 0)
                .count();
            assert_eq!(map.subjects.len(), correct);
        }
    }
}

#[test]
fn group_average_of_one_subject_is_its_map() {
    let p = model(8);
    let ex = examples(&p);
    let cfg = SaliencyConfig { samples: 1, noise_fraction: 0.0, ..Default::default() };
    let map = group_average_map(&p, &ex, DIMS, ClassLabel::Disease, BiasGroup::Bias, 1, &cfg).unwrap();
    assert_eq!(map.subjects.len(), 1);
    let e = &ex[map.subjects[0] as usize];
    let single = smoothgrad(&p, &e.input, DIMS, &cfg).unwrap();
    for (a, b) in map.values.as_slice().iter().zip(&single) {
        assert_eq!(*a, *b as f32);
    }

    // identical inputs without noise average to the same map
    let twins: Vec<Example<f32>> = (0..3).map(|i| Example { id: i, ..e.clone() }).collect();
    let avg = group_average_map(&p, &twins, DIMS, ClassLabel::Disease, BiasGroup::Bias, 3, &cfg).unwrap();
    assert!(!avg.short);
    for (a, b) in avg.values.as_slice().iter().zip(map.values.as_slice()) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12));
    }
}
