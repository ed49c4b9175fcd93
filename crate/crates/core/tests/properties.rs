use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pqid::chaos01::{featurize, rasterize, translation_vars, PqParams, PqTrajectory};
use pqid::net::adam::Adam;
use pqid::net::data::{fixed_pairs, split_data, FeatureBank, SplitFractions, SplitMode};
use pqid::net::model::hwc_to_batch;
use pqid::net::train::{best_epoch, score_pairs, validation_pairs};
use pqid::net::{build_model, sigmoid, train, ModelConfig, SiameseModel, Tensor, TrainConfig, TrainData};
use pqid::signal::{
    bandpass, default_registry, normalize01, segment, synth_ppg, FilterSpec, PpgRecord, SegmentStrategy, SEGMENT_LEN,
};

fn record(samples: Vec<f64>) -> PpgRecord {
    PpgRecord::new("p", 250.0, samples).unwrap()
}

fn signal(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bandpass_is_linear(
        (x, y) in (64usize..1500).prop_flat_map(|n| (prop::collection::vec(-10.0f64..10.0, n), prop::collection::vec(-10.0f64..10.0, n))),
        a in -5.0f64..5.0,
        b in -5.0f64..5.0,
    ) {
        let spec = FilterSpec::new(0.5, 8.0);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let fm = bandpass(&record(mix), &spec).unwrap();
        let fx = bandpass(&record(x), &spec).unwrap();
        let fy = bandpass(&record(y), &spec).unwrap();
        let scale = fm.samples.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..fm.samples.len() {
            let want = a * fx.samples[i] + b * fy.samples[i];
            prop_assert!((fm.samples[i] - want).abs() <= 1e-9 * scale, "i {i}: {} vs {want}", fm.samples[i]);
        }
    }

    #[test]
    fn bandpass_output_is_finite(x in signal(16..3000), lo in 0.05f64..2.0, hi in 3.0f64..40.0) {
        let out = bandpass(&record(x), &FilterSpec::new(lo, hi)).unwrap();
        prop_assert!(out.samples.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn normalize_is_idempotent(x in signal(2..500)) {
        prop_assume!(x.iter().any(|&v| v != x[0]));
        let once = normalize01(&record(x)).unwrap();
        let twice = normalize01(&once).unwrap();
        for (u, v) in once.samples.iter().zip(&twice.samples) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn consecutive_windows_tile_a_prefix(n in SEGMENT_LEN..6000usize) {
        let segs = segment(&record((0..n).map(|i| i as f64).collect()), SegmentStrategy::Consecutive).unwrap();
        prop_assert_eq!(segs.len(), n / SEGMENT_LEN);
        for (k, s) in segs.iter().enumerate() {
            prop_assert_eq!(s.start_index, k * SEGMENT_LEN);
            prop_assert_eq!(s.samples[0], (k * SEGMENT_LEN) as f64);
            prop_assert_eq!(s.samples.len(), SEGMENT_LEN);
        }
    }

    #[test]
    fn translation_vars_scale_with_the_signal(s in signal(2..1200), c in 0.63f64..2.51, a in -8.0f64..8.0, e in -4i32..5) {
        let base = translation_vars(&s, PqParams::new(c)).unwrap();
        // Power-of-two scaling commutes with every rounding step.
        let k = 2f64.powi(e);
        let pow = translation_vars(&s.iter().map(|v| k * v).collect::<Vec<_>>(), PqParams::new(c)).unwrap();
        for i in 0..s.len() {
            prop_assert_eq!(pow.p[i], k * base.p[i]);
            prop_assert_eq!(pow.q[i], k * base.q[i]);
        }
        let scaled = translation_vars(&s.iter().map(|v| a * v).collect::<Vec<_>>(), PqParams::new(c)).unwrap();
        let tol = 1e-12 * s.len() as f64 * 10.0 * a.abs().max(1.0);
        for i in 0..s.len() {
            prop_assert!((scaled.p[i] - a * base.p[i]).abs() <= tol);
            prop_assert!((scaled.q[i] - a * base.q[i]).abs() <= tol);
        }
    }

    #[test]
    fn rasterize_ignores_translation(
        pts in prop::collection::vec((-256i32..256, -256i32..256), 2..400),
        dx in -1000i32..1000,
        dy in -1000i32..1000,
    ) {
        let traj = |ox: i32, oy: i32| PqTrajectory {
            p: pts.iter().map(|&(x, _)| x as f64 / 64.0 + ox as f64).collect(),
            q: pts.iter().map(|&(_, y)| y as f64 / 64.0 + oy as f64).collect(),
            phi: vec![0.0; pts.len()],
            params: PqParams::default(),
        };
        prop_assert_eq!(rasterize(&traj(0, 0)), rasterize(&traj(dx, dy)));
    }

    #[test]
    fn featurize_is_deterministic(seed in 0u64..1000, c in 0.63f64..2.51) {
        let rec = synth_ppg(&default_registry()[(seed % 8) as usize], 12.0, seed).unwrap();
        let segs = segment(&rec, SegmentStrategy::Consecutive).unwrap();
        let params = [PqParams::new(c); 3];
        prop_assert_eq!(featurize(&segs, &params).unwrap(), featurize(&segs, &params).unwrap());
    }
}

#[test]
fn white_noise_paths_grow_sublinearly() {
    let n = 10_000;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = translation_vars(&s, PqParams::new(rng.random_range(0.63..2.51))).unwrap();
        let peak = t.p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak / (n as f64) < 0.5, "seed {seed}: max |p| = {peak}");
    }
}

fn tiny(seed: u64) -> SiameseModel {
    build_model(&ModelConfig::tiny().with_seed(seed)).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, hw: usize) -> Tensor<f32> {
    let data = (0..hw * hw * 3).map(|_| if rng.random_bool(0.2) { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(&[hw, hw, 3], data)
}

#[test]
fn score_is_symmetric_and_bounded() {
    let m = tiny(1);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (a, b) = (random_image(&mut rng, 16), random_image(&mut rng, 16));
        let (ab, ba) = (m.score(&a, &b).unwrap(), m.score(&b, &a).unwrap());
        assert!((0.0..=1.0).contains(&ab));
        assert!((ab - ba).abs() <= 1e-6, "{ab} vs {ba}");
    }
}

/// Head evaluated by hand on two independently computed embeddings.
fn manual_score(m: &SiameseModel, a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let fa = m.net.encode(&hwc_to_batch(a).unwrap()).unwrap();
    let fb = m.net.encode(&hwc_to_batch(b).unwrap()).unwrap();
    let params = m.net.params();
    let w = params.iter().find(|(n, _)| n == "head.weight").unwrap().1.value.data();
    let bias = params.iter().find(|(n, _)| n == "head.bias").unwrap().1.value.data()[0] as f64;
    let z: f64 = fa.data().iter().zip(fb.data()).zip(w).map(|((x, y), w)| (*w as f64) * ((x - y).abs() as f64)).sum();
    sigmoid(z + bias)
}

#[test]
fn both_branches_share_one_weight_set() {
    let mut m = tiny(2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (random_image(&mut rng, 16), random_image(&mut rng, 16));
    assert!((m.score(&a, &b).unwrap() - manual_score(&m, &a, &b)).abs() < 1e-6);
    let before = m.embed(&a).unwrap();
    for (name, p) in m.net.params_mut() {
        if name.starts_with("encoder.") && name.ends_with("weight") {
            for v in p.value.data_mut() {
                *v *= 1.5;
            }
        }
    }
    assert_ne!(m.embed(&a).unwrap(), before);
    assert!((m.score(&a, &b).unwrap() - manual_score(&m, &a, &b)).abs() < 1e-6);
    let bias = m.net.params().last().unwrap().1.value.data()[0] as f64;
    assert!((m.score(&b, &b).unwrap() - sigmoid(bias)).abs() < 1e-12);
}

#[test]
fn inference_embedding_is_pure() {
    let m = tiny(3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_image(&mut rng, 16);
    let first = m.embed(&a).unwrap();
    for _ in 0..5 {
        let _ = m.score(&random_image(&mut rng, 16), &a).unwrap();
        assert_eq!(m.embed(&a).unwrap(), first);
    }
}

#[test]
fn one_adam_step_lowers_the_pair_loss() {
    let mut wins = 0;
    for seed in 0..20u64 {
        let mut m = tiny(100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = hwc_to_batch(&random_image(&mut rng, 16)).unwrap();
        let b = hwc_to_batch(&random_image(&mut rng, 16)).unwrap();
        let t = [if seed % 2 == 0 { 1.0 } else { 0.0 }];
        let mut opt = Adam::new(1e-4);
        m.net.zero_grad();
        let before = m.net.forward_train(&a, &b, &t).unwrap();
        m.net.backward();
        opt.step(&mut m.net);
        let after = m.net.forward_train(&a, &b, &t).unwrap();
        if after < before {
            wins += 1;
        }
    }
    assert!(wins >= 18, "{wins}/20 steps lowered the loss");
}

fn tiny_data(seed: u64) -> TrainData {
    let segs: Vec<_> = default_registry()[..4]
        .iter()
        .map(|p| {
            let rec = synth_ppg(p, 20.0, seed).unwrap();
            segment(&rec, SegmentStrategy::RandomStarts { count: 20, seed }).unwrap()
        })
        .collect();
    let bank = FeatureBank::build(&segs, [PqParams::default(); 3], 16).unwrap();
    let part = split_data(&[20; 4], SplitMode::DataDisjoint, SplitFractions::default(), seed).unwrap();
    TrainData {
        train: bank.subset(&part.train),
        val: bank.subset(&part.val),
    }
}

fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        epochs: 6,
        batch_size: 4,
        early_stop_patience: 3,
        steps_per_epoch: 4,
        val_pairs: 16,
        seed,
    }
}

#[test]
fn training_is_deterministic() {
    let data = tiny_data(4);
    let run = || {
        let mut m = tiny(4);
        let h = train(&mut m, &data, &tiny_train_config(4)).unwrap();
        (m.to_bytes(), h)
    };
    assert_eq!(run(), run());
}

#[test]
fn early_stopping_restores_the_best_epoch() {
    for seed in 0..3 {
        let data = tiny_data(seed);
        let cfg = tiny_train_config(seed);
        let mut m = tiny(seed);
        let history = train(&mut m, &data, &cfg).unwrap();
        let best = best_epoch(&history).unwrap();
        let (_, loss) = score_pairs(&m, &validation_pairs(&data, &cfg).unwrap()).unwrap();
        assert!(
            (loss - history[best].val_loss).abs() < 1e-12,
            "seed {seed}: restored loss {loss}, best {:?}",
            history[best]
        );
        assert!(m.meta.eer_threshold.is_some());
    }
}

#[test]
fn training_lowers_the_loss_on_two_subjects() {
    let segs: Vec<_> = default_registry()[..2]
        .iter()
        .map(|p| segment(&synth_ppg(p, 60.0, 1).unwrap(), SegmentStrategy::RandomStarts { count: 30, seed: 1 }).unwrap())
        .collect();
    let cfg = ModelConfig::mini().with_seed(1);
    let bank = FeatureBank::build(&segs, [PqParams::default(); 3], cfg.input_hw).unwrap();
    let part = split_data(&[30; 2], SplitMode::DataDisjoint, SplitFractions::default(), 1).unwrap();
    let data = TrainData {
        train: bank.subset(&part.train),
        val: bank.subset(&part.val),
    };
    let mut m = build_model(&cfg).unwrap();
    let probe = fixed_pairs(&data.train, 32, 16, 99).unwrap();
    let (_, initial) = score_pairs(&m, &probe).unwrap();
    let tc = TrainConfig {
        learning_rate: 1e-3,
        epochs: 10,
        steps_per_epoch: 8,
        val_pairs: 16,
        early_stop_patience: 10,
        seed: 1,
        ..TrainConfig::default()
    };
    let h = train(&mut m, &data, &tc).unwrap();
    assert_eq!(h.len(), 10);
    let (_, trained) = score_pairs(&m, &probe).unwrap();
    assert!(trained < initial, "{trained} >= {initial}: {h:?}");
}
