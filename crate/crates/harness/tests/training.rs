use baris_core::{ParamStore, Tape};
use baris_harness::dataset::generate_scenes;
use baris_harness::model::is_frozen;
use baris_harness::*;

fn samples(first: u64, n: u64) -> Vec<Sample> {
    let seeds: Vec<u64> = (first..first + n).collect();
    generate_scenes(&seeds, &SceneConfig::default()).iter().map(Sample::from_scene).collect()
}

fn with_adapters(freeze: FreezeMode) -> PipelineConfig {
    PipelineConfig {
        adapters: Some(AdapterSettings::default()),
        freeze,
        ..Default::default()
    }
}

#[test]
fn fresh_adapters_leave_logits_bit_identical() {
    let batch = samples(100, 4);
    let refs: Vec<&Sample> = batch.iter().collect();
    let (images, _) = baris_harness::train::collate(&refs).unwrap();
    for seed in [0, 7, 123] {
        let logits = |cfg: PipelineConfig| {
            let mut store = ParamStore::<f32>::new();
            let pipe = Pipeline::new(&mut store, seed, cfg).unwrap();
            let tape = Tape::new();
            let out = pipe.forward(&store.bind(&tape), &tape.constant(images.clone())).unwrap();
            out.value().clone()
        };
        let plain = logits(PipelineConfig::default());
        assert!(plain.bit_eq(&logits(with_adapters(FreezeMode::None))), "seed {seed}");
        assert!(plain.bit_eq(&logits(with_adapters(FreezeMode::Era))), "seed {seed}");
    }
}

#[test]
fn frozen_backbone_never_moves() {
    let data = samples(0, 16);
    let cfg = TrainConfig {
        epochs: 3,
        pipeline: with_adapters(FreezeMode::Era),
        ..Default::default()
    };
    let frozen = |e: &baris_core::ParamEntry<f32>| is_frozen(&e.name, FreezeMode::Era);
    let mut sums = Vec::new();
    let mut first_grads = None;
    let out = train(&cfg, &data, &data[..4], None, &mut |s| {
        sums.push(s.store.checksum(frozen));
        if s.step == 0 {
            first_grads = Some(s.grads.to_vec());
        }
    })
    .unwrap();
    assert_eq!(out.steps, 6);
    let mut fresh = ParamStore::<f32>::new();
    Pipeline::new(&mut fresh, cfg.seed, cfg.pipeline.clone()).unwrap();
    let initial = fresh.checksum(frozen);
    assert!(sums.iter().all(|s| *s == initial));
    for (e, g) in out.store.entries().iter().zip(first_grads.unwrap()) {
        assert_eq!(g.is_some(), e.trainable, "{}", e.name);
    }
    assert_ne!(out.store.checksum(|e| e.name.starts_with("adapter.")), fresh.checksum(|e| e.name.starts_with("adapter.")));
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data = samples(0, 8);
    let cfg = TrainConfig {
        epochs: 1,
        learning_rate: 0.0,
        optimizer: OptimizerKind::Sgd,
        ..Default::default()
    };
    let out = train(&cfg, &data, &data[..2], None, &mut |_| {}).unwrap();
    let mut fresh = ParamStore::<f32>::new();
    Pipeline::new(&mut fresh, cfg.seed, cfg.pipeline.clone()).unwrap();
    assert_eq!(out.store.checksum(|_| true), fresh.checksum(|_| true));
    assert_eq!(out.records.len(), 1);
}

#[test]
fn zero_lambda_matches_cross_entropy() {
    let data = samples(0, 24);
    let run = |loss| {
        let cfg = TrainConfig {
            epochs: 4,
            max_steps: Some(10),
            loss,
            bace_lambda: 0.0,
            ..Default::default()
        };
        let mut trace = Vec::new();
        let out = train(&cfg, &data, &data[..4], None, &mut |s| trace.push((s.loss.to_bits(), s.store.checksum(|_| true)))).unwrap();
        (trace, out.records)
    };
    let (ce, ce_records) = run(LossKind::CeOnly);
    let (bace, bace_records) = run(LossKind::CePlusBace);
    assert_eq!(ce.len(), 10);
    assert_eq!(ce, bace);
    assert_eq!(ce_records, bace_records);
}

#[test]
fn runs_are_reproducible_on_disk() {
    let data = samples(0, 16);
    let cfg = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    let metrics = || {
        let dir = tempfile::tempdir().unwrap();
        train(&cfg, &data[..12], &data[12..], Some(dir.path()), &mut |_| {}).unwrap();
        assert!(dir.path().join("checkpoints/epoch_001").is_dir());
        std::fs::read(dir.path().join("metrics.jsonl")).unwrap()
    };
    let a = metrics();
    assert_eq!(a, metrics());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 2);
}

#[test]
fn non_finite_loss_reports_the_step() {
    let mut data = samples(0, 4);
    data[0].image.data_mut()[0] = f32::NAN;
    let cfg = TrainConfig::default();
    match train(&cfg, &data, &data, None, &mut |_| {}) {
        Err(HarnessError::Divergence { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.steps)),
    }
}

#[test]
fn noise_hurts_a_trained_model() {
    let train_set = samples(1000, 200);
    let cfg = TrainConfig {
        epochs: 6,
        ..Default::default()
    };
    let out = train(&cfg, &train_set, &[], None, &mut |_| {}).unwrap();
    let at_noise = |sigma: f32| {
        let mut scene_cfg = SceneConfig::default();
        scene_cfg.degradation.noise_sigma = baris_harness::scene::Range::fixed(sigma);
        let seeds: Vec<u64> = (5000..5050).collect();
        let eval: Vec<Sample> = generate_scenes(&seeds, &scene_cfg).iter().map(Sample::from_scene).collect();
        baris_harness::train::validate(&out.pipeline, &out.store, &eval, 25).unwrap().mask_iou
    };
    let (clean, noisy) = (at_noise(0.0), at_noise(0.1));
    // Only meaningful for a model that segments at all.
    assert!(clean > 0.3, "model did not learn: {clean}");
    assert!(noisy <= clean + 0.02, "clean {clean} noisy {noisy}");
}
