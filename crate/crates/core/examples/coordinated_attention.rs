//! Runs one coordinated attention block next to plain self-attention on the
//! same weights, and shows where the learned offsets move the sampling grid.
//!
//! cargo run --example coordinated_attention

use coorlandmark::attention::{
    coordinate_module, evaluate_attention, make_grid, AttentionConfig, AttentionKind,
    CoorAttentionState,
};
use coorlandmark::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> coorlandmark::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let config = AttentionConfig::new(8, 2)?;
    let mut state = CoorAttentionState::init(&config, &mut rng)?;
    let x = Tensor::from_fn(&[8, 4, 4], |_| rng.random_range(-1.0..1.0));

    // Fresh blocks have zero offsets, so they sample exactly on the grid
    // and match plain attention bit for bit.
    let coor = evaluate_attention(&x, &state, &config, AttentionKind::Coordinated)?;
    let vanilla = evaluate_attention(&x, &state, &config, AttentionKind::Vanilla)?;
    println!("zero offsets, outputs identical: {}", coor.output == vanilla.output);

    // Each attention row is a probability distribution over the 16 tokens.
    let row: f64 = coor.weights[..16].iter().sum();
    println!("first attention row sums to {row:.12}");

    // Give the offset head some weights and look at the sampling positions.
    for w in state.offset_head.weight.data_mut() {
        *w = rng.random_range(-0.5..0.5);
    }
    let grid = make_grid(4, 4)?;
    let (_, coords) = coordinate_module(&x, &state, &grid, config.offset_scale)?;
    println!("token   grid (x, y)        sampled (x, y)");
    for token in [0, 5, 10, 15] {
        let g = (grid.points.data()[token], grid.points.data()[16 + token]);
        let c = (coords.data()[token], coords.data()[16 + token]);
        println!("{token:>5}   ({:+.3}, {:+.3})   ({:+.3}, {:+.3})", g.0, g.1, c.0, c.1);
    }
    let moved = evaluate_attention(&x, &state, &config, AttentionKind::Coordinated)?;
    let diff = moved
        .output
        .data()
        .iter()
        .zip(vanilla.output.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("after moving the samples, max output change vs plain attention: {diff:.4}");
    Ok(())
}
