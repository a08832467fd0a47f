//! Computes radial errors, MRE and SDR for a handful of predictions and
//! compares two methods with a paired t-test.
//!
//! cargo run --example metrics_and_ttest

use coorlandmark::heatmap::Landmark;
use coorlandmark::metrics::{paired_t_test, radial_errors, MetricsReport, DEFAULT_THRESHOLDS};

fn main() -> coorlandmark::Result<()> {
    let truth = [Landmark::new(10.0, 10.0, 0), Landmark::new(40.0, 25.0, 1)];
    let pred = [Landmark::new(13.0, 14.0, 0), Landmark::new(40.5, 25.0, 1)];
    // Pixel size 0.1 mm: a 3-4-5 triangle of 5 px is 0.5 mm.
    println!("radial errors: {:?} mm", radial_errors(&pred, &truth, 0.1)?);

    // errors[image][landmark] for two methods on the same eight images.
    let method_a = [
        [1.2, 1.9], [1.4, 2.2], [0.9, 1.7], [1.1, 2.6],
        [1.6, 1.8], [1.0, 2.1], [1.3, 2.4], [0.8, 1.5],
    ];
    let method_b = [
        [1.5, 2.3], [1.6, 2.9], [1.2, 1.8], [1.4, 3.1],
        [1.7, 2.2], [1.5, 2.4], [1.2, 3.0], [1.1, 1.9],
    ];
    let a: Vec<Vec<f64>> = method_a.iter().map(|r| r.to_vec()).collect();
    let b: Vec<Vec<f64>> = method_b.iter().map(|r| r.to_vec()).collect();
    let report_a = MetricsReport::from_errors(&a, &DEFAULT_THRESHOLDS, None, "mm")?;
    let report_b = MetricsReport::from_errors(&b, &DEFAULT_THRESHOLDS, None, "mm")?;
    println!("method A\n{report_a}");
    println!("method B\n{report_b}");

    let test = paired_t_test(&report_a.per_image_errors, &report_b.per_image_errors)?;
    println!(
        "paired t-test on per-image MRE: t = {:.4}, p = {:.6} (n = {})",
        test.t_statistic, test.p_value, test.n
    );
    print!("metrics CSV:\n{}", report_a.to_csv());
    Ok(())
}
