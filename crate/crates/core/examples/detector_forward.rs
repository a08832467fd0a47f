//! Builds the toy detector, lists its layout and runs a forward pass with
//! both attention variants.
//!
//! cargo run --example detector_forward

use coorlandmark::data::{generate_synthetic, prepare, SyntheticSpec};
use coorlandmark::detector::{build, forward, forward_vanilla, DetectorConfig};
use coorlandmark::evaluation::decode_prediction;
use coorlandmark::heatmap::HeatmapSpec;

fn main() -> coorlandmark::Result<()> {
    let config = DetectorConfig::toy();
    let state = build(&config, 0)?;
    println!(
        "toy detector: {}x{} input, {} landmarks, {} parameters in {} tensors",
        config.input_size.0,
        config.input_size.1,
        config.num_landmarks,
        state.parameter_count(),
        state.params().len()
    );
    println!("encoder channels {:?}", config.encoder_channels());
    println!("decoder channels {:?}, heads {:?}", config.decoder_channels(), config.heads_per_stage);

    let image = &generate_synthetic(&SyntheticSpec { num_images: 1, ..Default::default() })?[0];
    let spec = HeatmapSpec::new(64, 64, 3.0, 1.0)?;
    let input = prepare(image, &spec)?.pixels;

    let coor = forward(&state, &input)?;
    let vanilla = forward_vanilla(&state, &input)?;
    println!("output shape {:?}, values in [{:.4}, {:.4}]", coor.shape(), min(coor.data()), max(coor.data()));
    // Offsets start at zero, so an untrained detector gives the same
    // heatmaps with either attention.
    println!("coordinated == vanilla at initialization: {}", coor == vanilla);
    for l in decode_prediction(&coor)? {
        println!("  untrained landmark {}: ({}, {})", l.index, l.x, l.y);
    }
    Ok(())
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}
