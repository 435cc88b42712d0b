//! Blob pretraining sweep: NNCLR vs SimCLR under mask-only views.
//!
//! `cargo run --release -p nnclr --example blob_trend -- <objective> <seed> [lr] [trust] [epochs] [nn_kind] [sigma] [augment]`

use std::time::Instant;

use nnclr::augment::AugmentMode;
use nnclr::data::{gen_blobs, BlobSpec, Split};
use nnclr::eval::{linear_probe, ProbeConfig};
use nnclr::train::{pretrain, EncoderConfig, TrainConfig};

fn main() -> nnclr::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let spec = BlobSpec {
        num_classes: 8,
        samples_per_class: 1000,
        ambient_dim: 16,
        cluster_std: arg(6, "0.15").parse().unwrap(),
        seed: arg(1, "0").parse().unwrap(),
    };
    let train = gen_blobs::<f32>(&spec, Split::Train)?;
    let test = gen_blobs::<f32>(
        &BlobSpec {
            samples_per_class: 250,
            ..spec.clone()
        },
        Split::Test,
    )?;
    let mut c = TrainConfig::new(
        arg(0, "nnclr").parse()?,
        4096,
        256,
        arg(4, "100").parse().unwrap(),
    );
    c.seed = spec.seed;
    c.base_lr = arg(2, "1.0").parse().unwrap();
    c.optim.trust_coefficient = arg(3, "0.001").parse().unwrap();
    c.nn_kind = arg(5, "hard").parse()?;
    c.augment.mode = arg(7, "crop_only").parse::<AugmentMode>()?;
    c.encoder = EncoderConfig {
        backbone_dims: vec![64],
        feature_dim: 64,
        projection_hidden: [64, 64],
        prediction_hidden: 64,
        embed_dim: 16,
    };
    let t0 = Instant::now();
    let out = pretrain(&c, &train, Some(&train.labels))?;
    let secs = t0.elapsed().as_secs_f64();
    let probe = linear_probe(
        &out.trainer.model,
        &train,
        &test,
        &ProbeConfig {
            epochs: 20,
            ..Default::default()
        },
    )?;
    let first = &out.metrics[0];
    let last = out.metrics.last().unwrap();
    println!(
        "{} seed={} top1={:.4} loss {:.3}->{:.3} nn_match {:?}->{:?} pretrain {:.1}s total {:.1}s",
        c.objective.as_str(),
        c.seed,
        probe.top1,
        first.loss,
        last.loss,
        first.nn_match,
        last.nn_match,
        secs,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
