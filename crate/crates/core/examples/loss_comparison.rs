//! Evaluates the four per-pixel losses on soft targets and shows where each
//! one reaches its minimum.
//!
//! cargo run --example loss_comparison

use coorlandmark::losses::{central_loss, cross_entropy, focal_loss, weighted_cross_entropy};

fn main() -> coorlandmark::Result<()> {
    for target in [0.1, 0.9] {
        println!("target p_y = {target}");
        println!("  {:>5} {:>10} {:>10} {:>10} {:>10}", "p_x", "central", "ce", "wce", "focal");
        for k in (5..=95).step_by(10) {
            let p = k as f64 / 100.0;
            let (central, _) = central_loss(p, target, 2.0)?;
            let (ce, _) = cross_entropy(p, target);
            let (wce, _) = weighted_cross_entropy(p, target, 0.75);
            let (focal, _) = focal_loss(p, target, 2.0, None);
            println!("  {p:>5.2} {central:>10.5} {ce:>10.5} {wce:>10.5} {focal:>10.5}");
        }
        let (at_target, grad) = central_loss(target, target, 2.0)?;
        let (ce, _) = cross_entropy(target, target);
        println!("  at p_x = p_y: central {at_target} (gradient {grad}), cross-entropy {ce:.5}\n");
    }

    // The difference term sharpens the loss around the target as r grows.
    println!("central loss at p_y = 0.9, p_x = 0.5 for increasing r:");
    for r in [0.0, 1.0, 2.0, 3.0] {
        println!("  r = {r}: {:.5}", central_loss(0.5, 0.9, r)?.0);
    }
    Ok(())
}
