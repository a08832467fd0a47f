//! Loads a checkpoint (for example one written by `coorlandmark train`) and
//! evaluates it on a dataset directory holding `images/` and
//! `annotations/`.
//!
//! cargo run --example evaluate_checkpoint -- <checkpoint> <dataset dir>
//!
//! Without arguments a freshly initialized toy detector is scored on
//! generated data, which shows the untrained baseline.

use std::path::PathBuf;

use coorlandmark::data::{generate_synthetic, load_dataset, LoadOptions, SyntheticSpec};
use coorlandmark::detector::{build, DetectorConfig};
use coorlandmark::evaluation::evaluate;
use coorlandmark::heatmap::HeatmapSpec;
use coorlandmark::metrics::DEFAULT_THRESHOLDS;

fn main() -> coorlandmark::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (state, images) = match args.as_slice() {
        [ckpt, dir] => {
            let (state, meta) = coorlandmark::checkpoint::load(&PathBuf::from(ckpt))?;
            println!("checkpoint from epoch {} (validation loss {:.6})", meta.epoch, meta.validation_loss);
            let dir = PathBuf::from(dir);
            let options = LoadOptions {
                spacing: 1.0,
                channels: state.config().in_channels,
                ..LoadOptions::default()
            };
            let report = load_dataset(&dir.join("images"), &dir.join("annotations"), &options)?;
            for (path, why) in &report.errors {
                println!("skipped {}: {why}", path.display());
            }
            (state, report.images)
        }
        _ => {
            println!("no checkpoint given: scoring an untrained toy detector");
            let state = build(&DetectorConfig::toy(), 0)?;
            let images = generate_synthetic(&SyntheticSpec {
                num_images: 16,
                ..Default::default()
            })?;
            (state, images)
        }
    };
    let config = state.config().clone();
    let spec = HeatmapSpec::new(config.input_size.0, config.input_size.1, 3.0, 1.0)?;
    let ev = evaluate(&state, &images, &spec, &DEFAULT_THRESHOLDS, config.attention)?;
    println!("{}", ev.report);
    for (img, pred) in images.iter().zip(&ev.predictions).take(2) {
        for (p, t) in pred.iter().zip(&img.landmarks) {
            println!(
                "  {} landmark {}: predicted ({:.1}, {:.1}), annotated ({:.1}, {:.1})",
                img.name, p.index, p.x, p.y, t.x, t.y
            );
        }
    }
    Ok(())
}
