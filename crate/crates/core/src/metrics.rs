//! Landmark accuracy metrics and the paired t-test.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};
use crate::heatmap::{Heatmap, Landmark};

/// Default success thresholds, in the unit of the errors (mm or px).
pub const DEFAULT_THRESHOLDS: [f64; 4] = [2.0, 2.5, 3.0, 4.0];

/// Euclidean distance per landmark pair, scaled by `spacing` (mm/px).
pub fn radial_errors(pred: &[Landmark], truth: &[Landmark], spacing: f64) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(invalid_input(format!(
            "{} predicted landmarks vs {} ground-truth landmarks",
            pred.len(),
            truth.len()
        )));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(invalid_input(format!("spacing must be > 0, got {spacing}")));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| p.distance(t) * spacing)
        .collect())
}

/// Percentage of `errors` at or below each threshold, in threshold order.
pub fn sdr(errors: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    thresholds
        .iter()
        .map(|&th| {
            let hits = errors.iter().filter(|&&e| e <= th).count();
            let rate = if errors.is_empty() {
                0.0
            } else {
                100.0 * hits as f64 / errors.len() as f64
            };
            (th, rate)
        })
        .collect()
}

/// Root-mean-square per-pixel difference, so fields that differ by a
/// constant `c` everywhere are `|c|` apart.
pub fn heatmap_l2(pred: &Heatmap, truth: &Heatmap) -> Result<f64> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(invalid_input(format!(
            "heatmap sizes differ: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let sq: f64 = pred
        .values()
        .iter()
        .zip(truth.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sq / pred.values().len() as f64).sqrt())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mre: f64,
    /// Sample standard deviation of all radial errors.
    pub mre_std: f64,
    /// `(threshold, percentage)` pairs in increasing threshold order.
    pub sdr: Vec<(f64, f64)>,
    /// Mean error of each landmark index across images.
    pub per_landmark_errors: Vec<f64>,
    /// Mean error of each image across landmarks.
    pub per_image_errors: Vec<f64>,
    /// Mean heatmap RMS difference, when heatmaps were compared.
    pub l2_heatmap: Option<f64>,
    pub unit: String,
}

impl MetricsReport {
    /// Summarizes `errors[image][landmark]`.
    pub fn from_errors(
        errors: &[Vec<f64>],
        thresholds: &[f64],
        l2_heatmap: Option<f64>,
        unit: &str,
    ) -> Result<Self> {
        let landmarks = errors.first().map_or(0, Vec::len);
        if landmarks == 0 || errors.iter().any(|e| e.len() != landmarks) {
            return Err(invalid_input(
                "need at least one image, all with the same non-zero landmark count",
            ));
        }
        let all: Vec<f64> = errors.iter().flatten().copied().collect();
        let mut thresholds = thresholds.to_vec();
        thresholds.sort_by(f64::total_cmp);
        Ok(Self {
            mre: mean(&all),
            mre_std: sample_std(&all),
            sdr: sdr(&all, &thresholds),
            per_landmark_errors: (0..landmarks)
                .map(|l| errors.iter().map(|e| e[l]).sum::<f64>() / errors.len() as f64)
                .collect(),
            per_image_errors: errors.iter().map(|e| mean(e)).collect(),
            l2_heatmap,
            unit: unit.to_string(),
        })
    }

    pub fn sdr_at(&self, threshold: f64) -> Option<f64> {
        self.sdr.iter().find(|(t, _)| *t == threshold).map(|p| p.1)
    }

    /// `metric,value` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out += &format!("mre_{},{}\n", self.unit, self.mre);
        out += &format!("mre_std_{},{}\n", self.unit, self.mre_std);
        for (t, r) in &self.sdr {
            out += &format!("sdr_{t}{},{r}\n", self.unit);
        }
        if let Some(l2) = self.l2_heatmap {
            out += &format!("heatmap_l2,{l2}\n");
        }
        for (i, e) in self.per_landmark_errors.iter().enumerate() {
            out += &format!("landmark_{i}_mre_{},{e}\n", self.unit);
        }
        out
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let u = &self.unit;
        writeln!(f, "MRE      {:.3} ± {:.3} {u}", self.mre, self.mre_std)?;
        for (t, r) in &self.sdr {
            writeln!(f, "SDR@{t}{u}  {r:.2}%")?;
        }
        if let Some(l2) = self.l2_heatmap {
            writeln!(f, "heatmap L2  {l2:.5}")?;
        }
        for (i, e) in self.per_landmark_errors.iter().enumerate() {
            writeln!(f, "landmark {i:<3} {e:.3} {u}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Statistics

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, 9 terms; ~1e-15 relative).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const TOL: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < TOL {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_fraction(b, a, 1.0 - x) / b
    }
}

/// Two-sided tail probability `P(|T| >= |t|)` of Student's t with `df`
/// degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t_statistic: f64,
    pub p_value: f64,
    pub n: usize,
    /// All differences were identical, so the variance is zero. `t` is then
    /// 0 with `p = 1` for zero differences, else ±∞ with `p = 0`.
    pub degenerate: bool,
}

/// Paired two-sided t-test of `a` against `b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(invalid_input(format!(
            "paired t-test needs two equal-length samples of >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if !d.iter().all(|v| v.is_finite()) {
        return Err(invalid_input("non-finite sample values"));
    }
    let n = d.len();
    let m = mean(&d);
    if d.iter().all(|&v| v == d[0]) {
        let (t, p) = if m == 0.0 { (0.0, 1.0) } else { (m.signum() * f64::INFINITY, 0.0) };
        return Ok(TTestResult {
            t_statistic: t,
            p_value: p,
            n,
            degenerate: true,
        });
    }
    let se = sample_std(&d) / (n as f64).sqrt();
    let t = m / se;
    Ok(TTestResult {
        t_statistic: t,
        p_value: t_two_sided_p(t, (n - 1) as f64),
        n,
        degenerate: false,
    })
}
