//! Trains the toy detector on synthetic data, then scores the best epoch's
//! parameters on a held-out synthetic set.
//!
//! cargo run --example train_toy [-- <loss> <attention> <epochs> <images> <seed>]
//!
//! Defaults: `central coordinated 5 40 0`. The full toy task uses
//! 100 epochs on 200 images (a few minutes on one core).

use std::time::Instant;

use coorlandmark::attention::AttentionKind;
use coorlandmark::data::{generate_synthetic, prepare, SyntheticSpec};
use coorlandmark::detector::DetectorConfig;
use coorlandmark::evaluation::evaluate;
use coorlandmark::heatmap::HeatmapSpec;
use coorlandmark::losses::{LossConfig, LossFamily};
use coorlandmark::metrics::DEFAULT_THRESHOLDS;
use coorlandmark::training::{train_with_hook, TrainConfig};

fn arg<T: std::str::FromStr>(n: usize, default: T) -> T {
    std::env::args().nth(n).and_then(|a| a.parse().ok()).unwrap_or(default)
}

fn main() -> coorlandmark::Result<()> {
    let family: LossFamily = arg(1, LossFamily::Central);
    let attention: AttentionKind = arg(2, AttentionKind::Coordinated);
    let epochs: usize = arg(3, 5);
    let images: usize = arg(4, 40);
    let seed: u64 = arg(5, 0);

    let detector = DetectorConfig::toy();
    let config = TrainConfig {
        loss: LossConfig::with_family(family),
        attention,
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let spec = HeatmapSpec::new(64, 64, config.sigma, config.peak)?;
    let train_images = generate_synthetic(&SyntheticSpec {
        num_images: images,
        seed,
        ..Default::default()
    })?;
    let test_images = generate_synthetic(&SyntheticSpec {
        num_images: 50,
        seed: seed + 1000,
        ..Default::default()
    })?;
    let data = train_images.iter().map(|i| prepare(i, &spec)).collect::<coorlandmark::Result<Vec<_>>>()?;

    println!("training {family} / {attention} for {epochs} epochs on {images} images");
    let started = Instant::now();
    let outcome = train_with_hook(&detector, &config, &data, &mut |e, best| {
        println!(
            "epoch {:>3}  train {:.6}  val {:.6}  lr {:.1e}{}",
            e.epoch,
            e.train_loss,
            e.val_loss,
            e.lr,
            if best { "  best" } else { "" }
        );
    })?;
    println!("trained in {:.1} s, best epoch {}", started.elapsed().as_secs_f64(), outcome.best_epoch);

    let ev = evaluate(&outcome.best_state, &test_images, &spec, &DEFAULT_THRESHOLDS, attention)?;
    println!("held-out set (50 images):\n{}", ev.report);
    Ok(())
}
