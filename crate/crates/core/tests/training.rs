use vinpaint::checkpoint::CheckpointBundle;
use vinpaint::losses::LossReport;
use vinpaint::model::ModelConfig;
use vinpaint::synth::{write_manifest, CorpusConfig};
use vinpaint::train::{train_loop, train_step, OptimConfig, TrainConfig, TrainSample, Trainer};
use vinpaint::Error;

fn samples(clips: usize, model: &ModelConfig) -> Vec<TrainSample> {
    let corpus = CorpusConfig {
        height: 32,
        width: 32,
        frames_per_clip: 4,
        train_clips: clips,
        noise_patches: 2,
        ..CorpusConfig::default()
    };
    let bank = corpus.noise_bank();
    (0..clips)
        .flat_map(|i| {
            let clip = corpus.synthesize(&bank, "train", i).unwrap();
            TrainSample::all_from_clip(&clip, model).unwrap()
        })
        .collect()
}

fn tiny(lr: f64, batch_size: usize, crop_size: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            channels: 8,
            res_blocks: 1,
            dca_blocks: 1,
            ref_radius: 1,
            ..ModelConfig::default()
        },
        optim: OptimConfig {
            learning_rate: lr,
            batch_size,
            crop_size,
            seed: 5,
            ..OptimConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn check_identities(r: &LossReport, cfg: &TrainConfig) {
    let w = &cfg.loss;
    assert!((r.l_c - (r.l_m + w.lambda_y * r.l_y)).abs() < 1e-6);
    let total = w.lambda_f * r.l_f + w.lambda_s * r.l_s + w.lambda_c * r.l_c;
    assert!((r.total - total).abs() < 1e-6);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = tiny(0.0, 2, 16);
    let mut t = Trainer::new(cfg.clone(), samples(1, &cfg.model)).unwrap();
    let before = t.model.params.clone();
    for _ in 0..3 {
        let r = t.step().unwrap();
        assert!(r.report.total.is_finite() && r.report.total > 0.0);
    }
    assert_eq!(t.model.params, before);
    assert_eq!(t.step_count(), 3);
}

#[test]
fn same_seed_gives_identical_report_streams() {
    let cfg = tiny(1e-3, 2, 16);
    let data = samples(2, &cfg.model);
    let run = || {
        let mut t = Trainer::new(cfg.clone(), data.clone()).unwrap();
        (0..4).map(|_| t.step().unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
    let mut other = cfg.clone();
    other.optim.seed += 1;
    let mut t = Trainer::new(other, data.clone()).unwrap();
    let shuffled: Vec<_> = (0..4).map(|_| t.step().unwrap()).collect();
    assert_ne!(shuffled, run());
}

#[test]
fn resumed_trainer_continues_bit_identically() {
    let cfg = tiny(1e-3, 2, 16);
    let data = samples(2, &cfg.model);
    let mut straight = Trainer::new(cfg.clone(), data.clone()).unwrap();
    let full: Vec<_> = (0..6).map(|_| straight.step().unwrap()).collect();

    let mut first = Trainer::new(cfg.clone(), data.clone()).unwrap();
    let mut split: Vec<_> = (0..3).map(|_| first.step().unwrap()).collect();
    let bytes = first.bundle().to_bytes().unwrap();
    let bundle = CheckpointBundle::from_bytes(&bytes).unwrap();
    assert_eq!(bundle.step, 3);
    let mut second = Trainer::resume(cfg.clone(), data, bundle.model, bundle.adam).unwrap();
    split.extend((0..3).map(|_| second.step().unwrap()));
    assert_eq!(split, full);
    assert_eq!(second.model.params, straight.model.params);
    assert_eq!(second.bundle().to_bytes().unwrap(), straight.bundle().to_bytes().unwrap());
}

#[test]
fn empty_dataset_is_a_configuration_error() {
    let tmp = tempfile::tempdir().unwrap();
    write_manifest(tmp.path(), &[]).unwrap();
    let cfg = tiny(1e-4, 1, 16);
    let err = train_loop(tmp.path(), &cfg, &tmp.path().join("out"), false).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(matches!(Trainer::new(cfg, Vec::new()), Err(Error::Config(_))));
}

#[test]
fn non_finite_input_aborts_without_touching_parameters() {
    let cfg = tiny(1e-3, 1, 32);
    let mut data = samples(1, &cfg.model);
    data.truncate(1);
    data[0].y_t.data_mut()[7] = f32::NAN;
    let mut t = Trainer::new(cfg.clone(), data.clone()).unwrap();
    let (params, adam) = (t.model.params.clone(), t.adam.clone());
    let err = train_step(&mut t.model, &mut t.adam, &data, &cfg).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(t.model.params, params);
    assert_eq!(t.adam, adam);
}

#[test]
fn fixed_batch_loss_falls_across_every_fifty_step_window() {
    let cfg = tiny(1e-4, 1, 32);
    let mut data = samples(1, &cfg.model);
    data.truncate(1);
    let mut t = Trainer::new(cfg.clone(), data).unwrap();
    let totals: Vec<f64> = (0..200)
        .map(|_| {
            let r = t.step().unwrap().report;
            check_identities(&r, &cfg);
            r.total
        })
        .collect();
    for i in 0..totals.len() - 50 {
        assert!(
            totals[i + 50] < totals[i],
            "step {} total {} not below step {} total {}",
            i + 51,
            totals[i + 50],
            i + 1,
            totals[i]
        );
    }
}
