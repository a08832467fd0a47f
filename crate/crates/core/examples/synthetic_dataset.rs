//! Generates the synthetic landmark dataset, writes it to disk in the
//! loader's layout and reads it back.
//!
//! cargo run --example synthetic_dataset [-- <output dir>]

use std::path::PathBuf;

use coorlandmark::data::{generate_synthetic, load_dataset, write_dataset, LoadOptions, SyntheticSpec};

fn main() -> coorlandmark::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("coorlandmark-synthetic"));
    let spec = SyntheticSpec {
        num_images: 8,
        seed: 3,
        ..Default::default()
    };
    let images = generate_synthetic(&spec)?;
    for img in images.iter().take(3) {
        let points: Vec<String> = img.landmarks.iter().map(|l| format!("({:.1}, {:.1})", l.x, l.y)).collect();
        println!("{}: {}", img.name, points.join(" "));
    }

    let written = write_dataset(&dir, &images)?;
    println!("wrote {} files under {}", written.len(), dir.display());

    let options = LoadOptions {
        spacing: 1.0,
        ..LoadOptions::default()
    };
    let report = load_dataset(&dir.join("images"), &dir.join("annotations"), &options)?;
    println!(
        "loaded {} images ({} errors, {} warnings)",
        report.images.len(),
        report.errors.len(),
        report.warnings.len()
    );
    // Annotations are written with full precision; pixels are quantized to
    // 8 bits by the PNG round trip.
    let max_landmark_diff = images
        .iter()
        .zip(&report.images)
        .flat_map(|(a, b)| a.landmarks.iter().zip(&b.landmarks))
        .map(|(a, b)| a.distance(b))
        .fold(0.0, f64::max);
    let max_pixel_diff = images
        .iter()
        .zip(&report.images)
        .flat_map(|(a, b)| a.pixels.data().iter().zip(b.pixels.data()))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("round trip: landmark drift {max_landmark_diff:.2e}, pixel drift {max_pixel_diff:.4}");
    Ok(())
}
