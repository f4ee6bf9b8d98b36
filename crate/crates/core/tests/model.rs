use lstcn_core::checkpoint::read_checkpoint_config;
use lstcn_core::harness::fusion_trial;
use lstcn_core::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, Adam, AdamConfig, CheckpointError,
    DType, Mode, Model32, Model64, ModelConfig, ParamStore, PartTag, PoolMode, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        stem_channels: 4,
        static_channels: [8, 8],
        lstc_channels: [8, 8],
        stem_stride: 2,
        embed_dim: 8,
        static_strips: 4,
        n_classes: 5,
        ..ModelConfig::default()
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn clip(t: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(
        &[t, 1, cfg.in_height, cfg.in_width],
        0.0,
        1.0,
        &mut rng(seed),
    )
}

fn frames_reordered(x: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let frame = x.numel() / x.dim(0);
    let data = order
        .iter()
        .flat_map(|&i| x.data()[i * frame..(i + 1) * frame].iter().copied())
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data).unwrap()
}

fn part_rows(f: &Tensor<f64>, tags: &[PartTag], keep: impl Fn(&PartTag) -> bool) -> Vec<f64> {
    let d = f.dim(1);
    tags.iter()
        .enumerate()
        .filter(|(_, t)| keep(t))
        .flat_map(|(i, _)| f.data()[i * d..(i + 1) * d].to_vec())
        .collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn default_network_shapes() {
    let cfg = ModelConfig::default();
    let model = Model32::with_init(cfg.clone(), &mut rng(0)).unwrap();
    assert_eq!(model.n_parts(), 43);
    for t in [3, 15, 30, 61] {
        let x = Tensor::<f32>::rand_uniform(&[t, 1, 64, 44], 0.0, 1.0, &mut rng(t as u64));
        let out = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out.features.shape(), &[43, 256], "T = {t}");
        assert_eq!(out.parts.len(), 43);
        assert!(out.features.first_non_finite().is_none());
    }
}

#[test]
fn too_short_sequence_rejected() {
    let cfg = small_config();
    let model = Model64::with_init(cfg.clone(), &mut rng(0)).unwrap();
    assert!(model.forward(&clip(2, &cfg, 0), Mode::Eval).is_err());
}

#[test]
fn init_matches_fan_in_std() {
    let cfg = small_config();
    let names: Vec<String> = Model64::new(cfg.clone())
        .unwrap()
        .store()
        .entries()
        .iter()
        .map(|e| e.name.clone())
        .collect();
    let mut checked = 0;
    for name in &names {
        let mut values = Vec::new();
        let mut target = None;
        for seed in 0..10 {
            let m = Model64::with_init(cfg.clone(), &mut rng(seed)).unwrap();
            target = m.init_std(name);
            if target.is_none() {
                break;
            }
            let id = m.store().find(name).unwrap();
            values.extend_from_slice(m.store().get(id).data());
        }
        let Some(target) = target else { continue };
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(
            (std / target - 1.0).abs() <= 0.2,
            "{name}: std {std} target {target}"
        );
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} weight tensors");
}

#[test]
fn static_parts_ignore_frame_order() {
    let cfg = small_config();
    let model = Model64::with_init(cfg.clone(), &mut rng(1)).unwrap();
    let x = clip(12, &cfg, 2);
    let order: Vec<usize> = vec![5, 0, 11, 3, 8, 1, 10, 2, 7, 4, 9, 6];
    let a = model.forward(&x, Mode::Eval).unwrap();
    let b = model
        .forward(&frames_reordered(&x, &order), Mode::Eval)
        .unwrap();
    let stat = |t: &PartTag| matches!(t, PartTag::StaticStrip(_));
    let d = max_diff(
        &part_rows(&a.features, &a.parts, stat),
        &part_rows(&b.features, &b.parts, stat),
    );
    assert!(d <= 1e-12, "static parts moved by {d}");
}

#[test]
fn dynamic_parts_see_time_reversal() {
    let cfg = small_config();
    let model = Model64::with_init(cfg.clone(), &mut rng(3)).unwrap();
    let x = clip(12, &cfg, 4);
    let order: Vec<usize> = (0..12).rev().collect();
    let a = model.forward(&x, Mode::Eval).unwrap();
    let b = model
        .forward(&frames_reordered(&x, &order), Mode::Eval)
        .unwrap();
    let dynamic = |t: &PartTag| !matches!(t, PartTag::StaticStrip(_));
    let d = max_diff(
        &part_rows(&a.features, &a.parts, dynamic),
        &part_rows(&b.features, &b.parts, dynamic),
    );
    assert!(d > 1e-6, "dynamic parts unchanged under reversal ({d})");
}

#[test]
fn fused_bank_matches_three_branches() {
    let mut r = rng(7);
    let worst = (0..100)
        .map(|_| fusion_trial(&mut r).unwrap())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-5, "{worst}");
}

#[test]
fn fused_model_matches_unfused() {
    for pool in [PoolMode::Max, PoolMode::Mean, PoolMode::Gem] {
        let cfg = ModelConfig {
            strip_pool: pool,
            temporal_pool: pool,
            ..small_config()
        };
        let model = Model64::with_init(cfg.clone(), &mut rng(5)).unwrap();
        let mut fused = model.clone();
        fused.fuse().unwrap();
        assert!(fused.is_fused());
        let x = clip(9, &cfg, 6);
        let a = model.forward(&x, Mode::Eval).unwrap();
        let b = fused.forward(&x, Mode::Eval).unwrap();
        let d = a.features.max_abs_diff(&b.features);
        assert!(d <= 1e-5, "{pool:?}: {d}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = small_config();
    let model = Model64::with_init(cfg.clone(), &mut rng(8)).unwrap();
    save_checkpoint(&model, &path, DType::F64).unwrap();
    assert_eq!(read_checkpoint_config(&path).unwrap(), cfg);
    let back = load_checkpoint::<f64>(&path).unwrap();
    for (a, b) in model.store().entries().iter().zip(back.store().entries()) {
        assert_eq!(a.name, b.name);
        let same = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{}", a.name);
    }
    let x = clip(5, &cfg, 9);
    let fa = model.forward(&x, Mode::Eval).unwrap().features;
    let fb = back.forward(&x, Mode::Eval).unwrap().features;
    assert!(fa
        .data()
        .iter()
        .zip(fb.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&back, &again, DType::F64).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&again).unwrap()
    );
}

#[test]
fn f32_storage_rounds_within_single_precision() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m32.ckpt");
    let model = Model64::with_init(small_config(), &mut rng(10)).unwrap();
    save_checkpoint(&model, &path, DType::F32).unwrap();
    let back = load_checkpoint::<f64>(&path).unwrap();
    for (a, b) in model.store().entries().iter().zip(back.store().entries()) {
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert!((x - y).abs() <= 1e-7 * x.abs(), "{}: {x} vs {y}", a.name);
        }
    }
}

#[test]
fn config_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model64::with_init(small_config(), &mut rng(11)).unwrap();
    save_checkpoint(&model, &path, DType::F64).unwrap();
    let other = ModelConfig {
        embed_dim: 16,
        ..small_config()
    };
    match load_checkpoint_expecting::<f64>(&path, &other) {
        Err(CheckpointError::ConfigMismatch(msg)) => assert!(msg.contains("embed_dim"), "{msg}"),
        r => panic!("expected a config mismatch, got {:?}", r.map(|_| ())),
    }
}

#[test]
fn corrupt_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(
        load_checkpoint::<f64>(&path),
        Err(CheckpointError::Magic)
    ));
}

#[test]
fn adam_steps_match_hand_computation() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::scalar(1.0), true);
    let mut adam = Adam::new(AdamConfig::default());
    let expected = [0.9000000019999999, 0.9366103542405653, 0.950279420338976];
    for (g, want) in [0.5, -1.0, 0.25].into_iter().zip(expected) {
        adam.step(&mut store, &[Some(Tensor::scalar(g))], 0.1);
        let got = store.entries()[0].value.item();
        assert!((got - want).abs() <= 1e-15, "{got} vs {want}");
    }
    assert_eq!(adam.steps(), 3);
}

#[test]
fn default_network_layer_shapes() {
    let model = Model32::new(ModelConfig::default()).unwrap();
    let t = 7;
    let trace = model.layer_shapes(t).unwrap();
    let want: Vec<(&str, Vec<usize>)> = vec![
        ("stem", vec![t, 64, 32, 22]),
        ("static.0", vec![t, 128, 16, 11]),
        ("static.1", vec![t, 256, 16, 11]),
        ("static.parts", vec![1, 256, 16]),
        ("lstc.h.strips", vec![1, 64, t, 32]),
        ("lstc.h.0", vec![1, 128, t, 16]),
        ("lstc.h.1", vec![1, 256, t, 16]),
        ("lstc.h.head", vec![1, 256, 16]),
        ("lstc.v.strips", vec![1, 64, t, 22]),
        ("lstc.v.0", vec![1, 128, t, 11]),
        ("lstc.v.1", vec![1, 256, t, 11]),
        ("lstc.v.head", vec![1, 256, 11]),
        ("parts", vec![1, 256, 43]),
        ("features", vec![1, 43, 256]),
    ];
    let got: Vec<(&str, Vec<usize>)> = trace.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
    assert_eq!(got, want);
}
