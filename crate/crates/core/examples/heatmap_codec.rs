//! Encodes landmarks as Gaussian heatmaps, decodes them back with arg-max
//! and maps coordinates between image and network resolutions.
//!
//! cargo run --example heatmap_codec

use coorlandmark::heatmap::{
    decode_argmax, decode_with, encode_gaussian, rescale_coords, DecodeOptions, HeatmapSpec,
    Landmark,
};

fn main() -> coorlandmark::Result<()> {
    let spec = HeatmapSpec::new(16, 16, 2.0, 1.0)?;
    let landmark = Landmark::new(5.0, 11.0, 0);
    let encoded = encode_gaussian(&landmark, &spec)?;
    let hm = &encoded.heatmap;

    println!("16x16 target, sigma 2, centred on (x=5, y=11):");
    for row in 6..16 {
        let line: String = (0..12)
            .map(|col| match hm.get(row, col) {
                v if v > 0.8 => '#',
                v if v > 0.4 => '+',
                v if v > 0.1 => '.',
                _ => ' ',
            })
            .collect();
        println!("  |{line}|");
    }

    let decoded = decode_argmax(hm);
    println!("arg-max decode: ({}, {}) score {:.3}", decoded.x, decoded.y, decoded.score);

    // A fractional landmark decodes to the nearest pixel; the optional
    // quarter-pixel refinement moves towards the true position.
    let fractional = Landmark::new(5.4, 10.7, 0);
    let hm = encode_gaussian(&fractional, &spec)?.heatmap;
    let plain = decode_argmax(&hm);
    let refined = decode_with(&hm, DecodeOptions { subpixel: true });
    println!(
        "fractional (5.4, 10.7): arg-max ({}, {}), refined ({}, {})",
        plain.x, plain.y, refined.x, refined.y
    );

    // Landmarks outside the field are moved onto its border and flagged.
    let outside = encode_gaussian(&Landmark::new(-3.0, 8.0, 0), &spec)?;
    println!("landmark at x=-3 clamped: {}", outside.clamped);

    // Image (1935x2400) to network (64x64) and back.
    let image = Landmark::new(812.0, 1460.0, 0);
    let net = rescale_coords(&image, (2400, 1935), (64, 64))?;
    let back = rescale_coords(&net, (64, 64), (2400, 1935))?;
    println!(
        "image ({}, {}) -> network ({:.3}, {:.3}) -> image ({:.3}, {:.3})",
        image.x, image.y, net.x, net.y, back.x, back.y
    );
    Ok(())
}
