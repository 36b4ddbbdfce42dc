use biastrial_core::simba_gen::{BiasGroup, ClassLabel};
use biastrial_nn::checkpoint;
use biastrial_nn::model::{encode, forward, init_params, input_gradient, predict, CnnConfig, Freeze, Mode, ModelParams};
use biastrial_nn::train::{evaluate, train, Example, History, SplitData, TrainConfig, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: [usize; 3] = [16, 16, 16];

fn small() -> CnnConfig {
    CnnConfig { filters: vec![4, 8], ..CnnConfig::desk() }
}

fn noisy_volume(rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..DIMS.iter().product::<usize>()).map(|_| rng.random_range(0.0..0.2)).collect()
}

/// Positive examples carry a bright cube in one octant.
fn toy_examples(n: usize, seed: u64) -> Vec<Example<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2 == 0;
            let mut input = noisy_volume(&mut rng);
            if label {
                for z in 2..7 {
                    for y in 2..7 {
                        for x in 2..7 {
                            input[(z * 16 + y) * 16 + x] += 0.8;
                        }
                    }
                }
            }
            let group = if i % 3 == 0 { BiasGroup::Bias } else { BiasGroup::NonBias };
            Example { id: i as u32, input, label, group }
        })
        .collect()
}

fn with_random_head(mut p: ModelParams<f32>, seed: u64) -> ModelParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.tensors.len();
    for v in &mut p.tensors[n - 2].data {
        *v = rng.random_range(-2.0..2.0);
    }
    p
}

#[test]
fn desk_parameter_count_matches_closed_form() {
    let cfg = CnnConfig::desk();
    let p = init_params::<f32>(&cfg, 0).unwrap();
    // conv kernel + conv bias + four batch-norm vectors per block, then dense
    let mut cin = 1;
    let mut expected = 0;
    let mut moving = 0;
    for &c in &cfg.filters {
        expected += c * cin * 27 + c + 4 * c;
        moving += 2 * c;
        cin = c;
    }
    expected += cin + 1;
    assert_eq!(expected, 17_809);
    assert_eq!(p.param_count(), 17_809);
    assert_eq!(p.trainable_count(), 17_809 - moving);
}

#[test]
fn initialization_is_deterministic_per_seed() {
    let a = init_params::<f32>(&CnnConfig::desk(), 5).unwrap();
    let b = init_params::<f32>(&CnnConfig::desk(), 5).unwrap();
    let c = init_params::<f32>(&CnnConfig::desk(), 6).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
    let limit = (6.0f32 / (27.0 + 8.0 * 27.0)).sqrt();
    assert!(a.tensors[0].data.iter().all(|w| w.abs() <= limit));
}

#[test]
fn fresh_model_is_indifferent() {
    let p = init_params::<f32>(&small(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vols: Vec<Vec<f32>> = (0..3).map(|_| noisy_volume(&mut rng)).collect();
    let refs: Vec<&[f32]> = vols.iter().map(|v| v.as_slice()).collect();
    assert!(predict(&p, &refs, DIMS).unwrap().iter().all(|&q| q == 0.5));
    let g = input_gradient(&p, &vols[0], DIMS, ClassLabel::Disease).unwrap();
    assert_eq!(g.len(), vols[0].len());
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn eval_outputs_are_probabilities_and_repeatable() {
    let p = with_random_head(init_params::<f32>(&small(), 1).unwrap(), 3);
    let ex = toy_examples(6, 4);
    let refs = SplitData::inputs(&ex);
    let a = predict(&p, &refs, DIMS).unwrap();
    let b = predict(&p, &refs, DIMS).unwrap();
    assert_eq!(a.len(), 6);
    assert!(a.iter().all(|&q| q > 0.0 && q < 1.0));
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let batch: Vec<f32> = refs.iter().flat_map(|v| v.iter().copied()).collect();
    let direct = forward(&p, &batch, DIMS, Mode::Eval, &Freeze::none(2)).unwrap().probabilities();
    assert_eq!(a, direct);
}

#[test]
fn eval_predictions_do_not_couple_samples() {
    let p = with_random_head(init_params::<f32>(&small(), 8).unwrap(), 9);
    let ex = toy_examples(7, 10);
    let refs = SplitData::inputs(&ex);
    let all = predict(&p, &refs, DIMS).unwrap();
    let perm = [3usize, 6, 0, 5, 1, 4, 2];
    let permuted: Vec<&[f32]> = perm.iter().map(|&i| refs[i]).collect();
    let out = predict(&p, &permuted, DIMS).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(out[k].to_bits(), all[i].to_bits());
        let alone = predict(&p, &[refs[i]], DIMS).unwrap()[0];
        assert_eq!(alone.to_bits(), all[i].to_bits());
    }
    assert_eq!(encode(&p, &refs, DIMS).unwrap().len(), 7 * 8);
}

#[test]
fn shape_errors_are_reported() {
    let p = init_params::<f32>(&small(), 1).unwrap();
    assert!(predict(&p, &[&[0.0f32; 10][..]], DIMS).is_err());
    assert!(predict(&p, &[&[0.0f32; 27][..]], [3, 3, 3]).is_err());
    assert!(init_params::<f32>(&CnnConfig { filters: vec![], ..small() }, 0).is_err());
    assert!(init_params::<f32>(&CnnConfig { filters: vec![4, 0], ..small() }, 0).is_err());
}

fn toy_split(seed: u64) -> SplitData<f32> {
    SplitData { dims: DIMS, train: toy_examples(8, seed), val: toy_examples(4, seed + 100), test: Vec::new() }
}

#[test]
fn constant_validation_loss_stops_after_patience_plus_one() {
    let data = toy_split(1);
    let p = init_params::<f32>(&small(), 1).unwrap();
    for (patience, start) in [(3, 0), (15, 0), (3, 10)] {
        let cfg = TrainConfig { patience, start_from_epoch: start, max_epochs: 100, ..Default::default() };
        let frozen = Freeze { blocks: vec![true, true], dense: true };
        let opts = TrainOptions { freeze: Some(frozen), ..Default::default() };
        let (out, h) = train(p.clone(), &data, &cfg, &opts).unwrap();
        assert_eq!(h.records.len(), start + patience + 1);
        assert!(h.stopped_early);
        assert_eq!(h.best_epoch, start + 1);
        assert_eq!(out.checksum(), p.checksum());
    }
}

#[test]
fn training_is_deterministic() {
    let data = toy_split(2);
    let cfg = TrainConfig { learning_rate: 1e-2, max_epochs: 6, seed: 4, ..Default::default() };
    let p = init_params::<f32>(&small(), 3).unwrap();
    let (a, ha) = train(p.clone(), &data, &cfg, &TrainOptions::default()).unwrap();
    let (b, hb) = train(p, &data, &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a.checksum(), b.checksum());
}

#[test]
fn toy_set_is_memorized() {
    let data = toy_split(3);
    let cfg = TrainConfig { learning_rate: 1e-2, max_epochs: 300, seed: 1, ..Default::default() };
    let p = init_params::<f32>(&small(), 2).unwrap();
    let mut reached = None;
    let opts = TrainOptions { run_all_epochs: true, ..Default::default() };
    let (_, h) = biastrial_nn::train::train_observed(p, &data, &cfg, &opts, &mut |epoch, params| {
        if reached.is_none() && evaluate(params, &data.train, DIMS).unwrap().1 == 1.0 {
            reached = Some(epoch);
        }
    })
    .unwrap();
    let epoch = reached.expect("training accuracy never reached 1.0");
    assert!(epoch <= 300);
    assert!(!h.stopped_early);
}

#[test]
fn empty_splits_and_missing_weights_are_configuration_errors() {
    let p = init_params::<f32>(&small(), 1).unwrap();
    let mut data = toy_split(4);
    data.val.clear();
    let err = train(p.clone(), &data, &TrainConfig::default(), &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, biastrial_core::Error::Config(_)));

    let data = toy_split(4);
    let weights = biastrial_nn::SampleWeights { by_id: [(0u32, 1.0)].into(), cells: Default::default() };
    let opts = TrainOptions { weights: Some(&weights), ..Default::default() };
    assert!(matches!(train(p, &data, &TrainConfig::default(), &opts), Err(biastrial_core::Error::Config(_))));
}

#[test]
fn checkpoints_round_trip_and_detect_corruption() {
    let p = with_random_head(init_params::<f32>(&CnnConfig::desk(), 4).unwrap(), 5);
    let bytes = checkpoint::encode(&p).unwrap();
    assert_eq!(&bytes[..4], b"SBNN");
    let back: ModelParams<f32> = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, p);
    assert_eq!(back.checksum(), p.checksum());

    let mut bad = bytes.clone();
    bad[40] ^= 0x10;
    assert!(checkpoint::decode::<f32>(&bad).is_err());
    assert!(checkpoint::decode::<f32>(&bytes[..bytes.len() - 1]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sbnn");
    checkpoint::save(&p, &path).unwrap();
    assert_eq!(checkpoint::load::<f32>(&path).unwrap(), p);
}

#[test]
fn history_csv_has_the_documented_columns() {
    let data = toy_split(5);
    let cfg = TrainConfig { learning_rate: 1e-2, max_epochs: 3, ..Default::default() };
    let (_, h) = train(init_params::<f32>(&small(), 1).unwrap(), &data, &cfg, &TrainOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    h.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,train_loss,val_loss,val_acc");
    assert_eq!(History::read_csv(&path).unwrap(), h.records);
}
