use nnclr::augment::AugmentMode;
use nnclr::checkpoint::{decode_checkpoint, encode_checkpoint};
use nnclr::config::ConfigDoc;
use nnclr::data::{
    gen_blobs, load_cifar10_subset, write_cifar_file, BlobSpec, CifarRecord, Dataset, Split,
    CIFAR_PIXELS, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES,
};
use nnclr::eval::{linear_probe, ProbeConfig};
use nnclr::train::{pretrain, EncoderConfig, NnKind, Objective, TrainConfig, Trainer};
use nnclr::Error;

fn blobs<T: nnclr::Scalar>(split: Split) -> Dataset<T> {
    gen_blobs(
        &BlobSpec {
            num_classes: 4,
            samples_per_class: 24,
            ambient_dim: 6,
            cluster_std: 0.1,
            seed: 9,
        },
        split,
    )
    .unwrap()
}

fn config(objective: Objective) -> TrainConfig {
    let mut c = TrainConfig::new(objective, 48, 16, 3);
    c.encoder = EncoderConfig {
        backbone_dims: vec![16],
        feature_dim: 12,
        projection_hidden: [12, 12],
        prediction_hidden: 16,
        embed_dim: 8,
    };
    c.augment.mode = AugmentMode::CropOnly;
    c.base_lr = 0.5;
    c.seed = 21;
    c.deterministic = true;
    c
}

#[test]
fn label_buffer_leaves_the_trajectory_alone() {
    let data = blobs::<f64>(Split::Train);
    let cfg = config(Objective::Nnclr);
    let with = pretrain(&cfg, &data, Some(&data.labels)).unwrap();
    let without = pretrain(&cfg, &data, None).unwrap();
    let losses = |m: &[nnclr::train::StepMetrics]| m.iter().map(|s| s.loss).collect::<Vec<_>>();
    assert_eq!(losses(&with.metrics), losses(&without.metrics));
    assert!(with.metrics.iter().all(|m| m.nn_match.is_some()));
    assert!(without.metrics.iter().all(|m| m.nn_match.is_none()));
}

const RESUME_CONFIG: &str = "
objective = nnclr
queue_size = 48
batch_size = 16
epochs = 3
seed = 21
optim.base_lr = 0.5
augment.mode = crop_only
encoder.backbone_dims = 16
encoder.feature_dim = 12
encoder.projection_hidden = 12,12
encoder.prediction_hidden = 16
encoder.embed_dim = 8
data.kind = blobs
data.classes = 4
data.samples_per_class = 24
data.dim = 6
data.std = 0.1
precision = f64
";

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let run = ConfigDoc::parse(RESUME_CONFIG).unwrap().build().unwrap();
    let (data, _) = run.data.load::<f64>().unwrap();
    let cfg = run.train;
    let straight = pretrain(&cfg, &data, None).unwrap();

    let mut t = Trainer::for_dataset(cfg.clone(), &data, false).unwrap();
    let mut seen = Vec::new();
    t.run_epoch(&data, None, &mut |_, m| {
        seen.push(m.clone());
        Ok(())
    })
    .unwrap();
    let bytes = encode_checkpoint(RESUME_CONFIG, &t);
    let restored = decode_checkpoint::<f64>(&bytes).unwrap();
    assert_eq!(restored.config_text, RESUME_CONFIG);
    let mut resumed = restored.trainer;
    for _ in 1..cfg.epochs {
        resumed
            .run_epoch(&data, None, &mut |_, m| {
                seen.push(m.clone());
                Ok(())
            })
            .unwrap();
    }
    assert_eq!(seen, straight.metrics);
}

#[test]
fn both_precisions_learn_separable_blobs() {
    fn run<T: nnclr::Scalar>() -> f64 {
        let (train, test) = (blobs::<T>(Split::Train), blobs::<T>(Split::Test));
        let mut cfg = config(Objective::Nnclr);
        cfg.epochs = 10;
        let out = pretrain(&cfg, &train, None).unwrap();
        let probe = ProbeConfig {
            epochs: 30,
            batch_size: 32,
            ..ProbeConfig::default()
        };
        linear_probe(&out.trainer.model, &train, &test, &probe)
            .unwrap()
            .top1
    }
    assert!(run::<f32>() > 0.9);
    assert!(run::<f64>() > 0.9);
}

#[test]
fn every_objective_and_retrieval_runs() {
    let data = blobs::<f64>(Split::Train);
    for objective in [Objective::Simclr, Objective::Nnclr, Objective::Nnsiam] {
        for kind in [NnKind::Hard, NnKind::Soft, NnKind::Oracle] {
            let mut cfg = config(objective);
            cfg.nn_kind = kind;
            cfg.epochs = 1;
            let labels = (kind == NnKind::Oracle).then_some(data.labels.as_slice());
            let out = pretrain(&cfg, &data, labels).unwrap();
            assert!(
                out.metrics.iter().all(|m| m.loss.is_finite()),
                "{objective:?} {kind:?}"
            );
        }
    }
}

#[test]
fn oracle_without_labels_is_refused() {
    let data = blobs::<f64>(Split::Train);
    let mut cfg = config(Objective::Nnclr);
    cfg.nn_kind = NnKind::Oracle;
    assert!(pretrain(&cfg, &data, None).is_err());
}

fn record(i: usize) -> CifarRecord {
    CifarRecord {
        label: (i % 10) as u8,
        pixels: (0..CIFAR_PIXELS)
            .map(|p| ((p * 7 + i * 13) % 256) as u8)
            .collect(),
    }
}

#[test]
fn cifar_directory_loads_scaled_pixels() {
    let dir = tempfile::tempdir().unwrap();
    for (f, name) in CIFAR_TRAIN_FILES.iter().enumerate() {
        let recs: Vec<_> = (0..3).map(|i| record(f * 3 + i)).collect();
        write_cifar_file(&dir.path().join(name), &recs).unwrap();
    }
    write_cifar_file(&dir.path().join(CIFAR_TEST_FILE), &[record(99)]).unwrap();

    let (train, test) = load_cifar10_subset::<f32>(dir.path(), Some(7), None).unwrap();
    assert_eq!((train.len(), test.len()), (7, 1));
    assert_eq!(train.dim(), CIFAR_PIXELS);
    assert_eq!(train.labels, (0..7).map(|i| i % 10).collect::<Vec<_>>());
    let first = record(0);
    for (got, raw) in train.samples.row(0).iter().zip(&first.pixels) {
        assert_eq!(*got, *raw as f32 / 255.0);
    }

    std::fs::remove_file(dir.path().join(CIFAR_TEST_FILE)).unwrap();
    assert!(matches!(
        load_cifar10_subset::<f32>(dir.path(), None, None),
        Err(Error::FileMissing(_))
    ));
}
