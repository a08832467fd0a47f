//! Checks every analytic gradient against central finite differences:
//! the four per-pixel losses, one attention block and the toy detector.
//!
//! cargo run --example gradient_check

use coorlandmark::gradcheck::{check_attention, check_detector, check_losses};

fn main() -> coorlandmark::Result<()> {
    let mut reports = check_losses(1000, 0);
    reports.push(check_attention(0)?);
    reports.push(check_detector(0, 20)?);
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", reports.len() - failed, reports.len());
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
