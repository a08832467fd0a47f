//! Saves a detector checkpoint, loads it back and compares predictions.
//! Values are stored as 32-bit floats, so the restored network equals the
//! original rounded to f32, bit for bit.
//!
//! cargo run --example checkpoint_roundtrip

use coorlandmark::checkpoint::{load, round_trip_precision, save, TrainingMeta};
use coorlandmark::detector::{build, forward, DetectorConfig};
use coorlandmark::Tensor;

fn main() -> coorlandmark::Result<()> {
    let config = DetectorConfig::tiny();
    let state = build(&config, 11)?;
    let path = std::env::temp_dir().join("coorlandmark-example.ckpt");
    let meta = TrainingMeta {
        epoch: 42,
        validation_loss: 0.0123,
    };
    save(&path, &state, &meta)?;
    let bytes = std::fs::metadata(&path)?.len();
    println!("saved {} parameters to {} ({bytes} bytes)", state.parameter_count(), path.display());

    let (restored, restored_meta) = load(&path)?;
    println!("restored meta: epoch {}, validation loss {}", restored_meta.epoch, restored_meta.validation_loss);

    let (h, w) = config.input_size;
    let input = Tensor::from_fn(&[config.in_channels, h, w], |i| ((i * 37) % 101) as f64 / 100.0);
    let original = forward(&state, &input)?;
    let reloaded = forward(&restored, &input)?;
    let drift = original
        .data()
        .iter()
        .zip(reloaded.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("largest prediction change after reload: {drift:.2e}");
    let rounded = forward(&round_trip_precision(&state), &input)?;
    println!("identical to the f32-rounded original: {}", rounded == reloaded);

    // Corrupting the file is detected on load.
    let mut corrupt = std::fs::read(&path)?;
    let mid = corrupt.len() / 2;
    corrupt.truncate(mid);
    std::fs::write(&path, &corrupt)?;
    match load(&path) {
        Ok(_) => println!("truncated checkpoint loaded (unexpected)"),
        Err(e) => println!("truncated checkpoint rejected: {e}"),
    }
    Ok(())
}
