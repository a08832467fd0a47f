//! Acceptance suite: one PASS/FAIL line per criterion, with the measured
//! value, the pinned tolerance and the runtime against its budget.
//!
//! Run everything with `cargo test --test system_acceptance`, or a subset with
//! `cargo test --test system_acceptance -- 1 3 9`. Criteria 6-8 train twelve toy
//! detectors and dominate the runtime (tens of minutes on one core).
//! Criterion 8 is soft: a miss prints WARN and does not fail the suite.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use coorlandmark::attention::{
    bilinear_sample, evaluate_attention, make_grid, AttentionConfig, AttentionKind, CoorAttentionState,
};
use coorlandmark::data::{generate_synthetic, prepare, SyntheticSpec};
use coorlandmark::detector::{build, forward, forward_vanilla, DetectorConfig};
use coorlandmark::evaluation::evaluate;
use coorlandmark::gradcheck::{check_attention, check_detector, check_losses, LOSS_TOLERANCE, NETWORK_TOLERANCE};
use coorlandmark::heatmap::{decode_argmax, encode_gaussian, HeatmapSpec, Landmark};
use coorlandmark::losses::{central_loss, LossConfig, LossFamily, DEFAULT_EPSILON};
use coorlandmark::metrics::{paired_t_test, radial_errors, sdr, MetricsReport, DEFAULT_THRESHOLDS};
use coorlandmark::training::{train_with_hook, TrainConfig};

// ---------------------------------------------------------------------------
// Pinned tolerances and budgets

/// Central loss against the double-double oracle, relative.
const LOSS_ORACLE_REL: f64 = 1e-12;
const LOSS_ORACLE_PAIRS: usize = 10_000;
/// Loss values that must stand out at a perfect soft prediction.
const HIGH_LOSS: f64 = 0.1;
/// Row sums of attention weights.
const ROW_SUM_TOL: f64 = 1e-6;
const CODEC_SAMPLES: usize = 1000;
/// Paired t-test p-values against numerical integration, absolute.
const P_VALUE_TOL: f64 = 1e-6;
/// Accepted null rejection rate at alpha = 0.05.
const NULL_RATE: (f64, f64) = (0.03, 0.07);
const NULL_DATASETS: usize = 4000;
/// SDR@2px the central-loss toy model must reach (percent).
const SDR2_TARGET: f64 = 90.0;

const TOY_SEEDS: [u64; 3] = [0, 1, 2];
const TOY_TRAIN_IMAGES: usize = 200;
const TOY_TEST_IMAGES: usize = 50;
const TOY_EPOCHS: usize = 100;
/// The held-out set of seed `s` is generated with seed `s + TEST_SEED_OFFSET`.
const TEST_SEED_OFFSET: u64 = 1000;

fn budget(criterion: u32) -> Duration {
    Duration::from_secs(match criterion {
        1 => 5,
        2 => 1,
        3 => 120,
        4 => 30,
        5 => 10,
        6 => 30 * 60,
        9 => 60,
        _ => u64::MAX / 4,
    })
}

// ---------------------------------------------------------------------------
// Reporting

#[derive(Clone, Copy, PartialEq)]
enum Verdict {
    Pass,
    Fail,
    Warn,
}

struct Outcome {
    criterion: String,
    verdict: Verdict,
    detail: String,
}

struct Suite {
    outcomes: Vec<Outcome>,
}

impl Suite {
    #[allow(clippy::too_many_arguments)]
    fn report(&mut self, criterion: impl Into<String>, name: &str, passed: bool, soft: bool, detail: String, elapsed: Duration, budget: Option<Duration>) {
        let within = budget.is_none_or(|b| elapsed <= b);
        let verdict = match (passed && within, soft) {
            (true, _) => Verdict::Pass,
            (false, true) => Verdict::Warn,
            (false, false) => Verdict::Fail,
        };
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Warn => "WARN",
        };
        let time = match budget {
            Some(b) => format!("{:.2} s (budget {} s{})", elapsed.as_secs_f64(), b.as_secs(), if within { "" } else { ", EXCEEDED" }),
            None => format!("{:.2} s", elapsed.as_secs_f64()),
        };
        let criterion = criterion.into();
        println!("{tag} [{criterion:>2}] {name}: {detail} | {time}");
        self.outcomes.push(Outcome { criterion, verdict, detail });
    }
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |c: u32| selected.is_empty() || selected.contains(&c);
    let started = Instant::now();
    let mut suite = Suite { outcomes: Vec::new() };

    if wanted(1) {
        criterion_1(&mut suite);
    }
    if wanted(2) {
        criterion_2(&mut suite);
    }
    if wanted(3) {
        criterion_3(&mut suite);
    }
    if wanted(4) {
        criterion_4(&mut suite);
    }
    if wanted(5) {
        criterion_5(&mut suite);
    }
    if wanted(6) || wanted(7) || wanted(8) {
        criteria_6_to_8(&mut suite, wanted(6), wanted(7), wanted(8));
    }
    if wanted(9) {
        criterion_9(&mut suite);
    }
    if wanted(10) {
        criterion_10(&mut suite);
    }

    let count = |v: Verdict| suite.outcomes.iter().filter(|o| o.verdict == v).count();
    println!(
        "acceptance: {} passed, {} failed, {} warnings in {:.1} s",
        count(Verdict::Pass),
        count(Verdict::Fail),
        count(Verdict::Warn),
        started.elapsed().as_secs_f64()
    );
    let failed: Vec<&Outcome> = suite.outcomes.iter().filter(|o| o.verdict == Verdict::Fail).collect();
    if !failed.is_empty() {
        for o in failed {
            eprintln!("failed criterion {}: {}", o.criterion, o.detail);
        }
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1. Central loss against a double-double oracle

/// Unevaluated sum `hi + lo` carrying about 106 bits.
#[derive(Clone, Copy, Debug)]
struct Dd {
    hi: f64,
    lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    Dd { hi: s, lo: (a - (s - bb)) + (b - bb) }
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    fn from(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn add(self, o: Dd) -> Dd {
        let s = two_sum(self.hi, o.hi);
        let t = two_sum(self.lo, o.lo);
        let u = quick_two_sum(s.hi, s.lo + t.hi);
        quick_two_sum(u.hi, u.lo + t.lo)
    }

    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let err = self.hi.mul_add(o.hi, -p);
        quick_two_sum(p, err + (self.hi * o.lo + self.lo * o.hi))
    }

    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::from(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Dd::from(q2)));
        let q3 = r.hi / o.hi;
        quick_two_sum(q1, q2).add(Dd::from(q3))
    }
}

/// Natural log of a positive normal `x` in double-double: `x = m 2^e`
/// with `m` in `[1/sqrt 2, sqrt 2)`, `ln m = 2 atanh((m-1)/(m+1))` summed
/// as a series, `ln x = e ln 2 + ln m`. Shares nothing with libm's `ln`.
fn dd_ln(x: f64) -> Dd {
    assert!(x > 0.0 && x.is_normal());
    let bits = x.to_bits();
    let mut e = ((bits >> 52) & 0x7ff) as i64 - 1022;
    let mut m = f64::from_bits((bits & !(0x7ff << 52)) | (1022 << 52)); // [0.5, 1)
    if m < std::f64::consts::FRAC_1_SQRT_2 {
        m *= 2.0;
        e -= 1;
    }
    // m - 1 is exact for m in [0.5, 2].
    let s = Dd::from(m - 1.0).div(two_sum(m, 1.0));
    let s2 = s.mul(s);
    let mut term = s;
    let mut sum = s;
    for k in 1..60 {
        term = term.mul(s2);
        let next = term.div(Dd::from((2 * k + 1) as f64));
        sum = sum.add(next);
        if next.hi.abs() < 1e-34 {
            break;
        }
    }
    let ln_m = sum.add(sum);
    LN2.mul(Dd::from(e as f64)).add(ln_m)
}

/// `-t |t - p|^r ln(clamp(p))` for integer `r`, in double-double. The
/// probability clamp `[eps, 1 - eps]` applies inside the logarithm only.
fn central_oracle(p: f64, t: f64, r: u32) -> f64 {
    let pc = p.clamp(DEFAULT_EPSILON, 1.0 - DEFAULT_EPSILON);
    let mut d = two_sum(t, -p);
    if d.hi < 0.0 {
        d = d.neg();
    }
    let mut modulating = Dd::from(1.0);
    for _ in 0..r {
        modulating = modulating.mul(d);
    }
    Dd::from(t).mul(modulating).mul(dd_ln(pc)).neg().hi
}

fn criterion_1(suite: &mut Suite) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut zero_mismatch = 0;
    let mut ce_mismatch = 0;
    let mut oracle_zero_mismatch = 0;
    let mut checked = 0;
    for _ in 0..LOSS_ORACLE_PAIRS {
        let p: f64 = rng.random_range(DEFAULT_EPSILON..1.0 - DEFAULT_EPSILON);
        let t: f64 = rng.random_range(0.0..=1.0);
        for r in 0..4u32 {
            let value = central_loss(p, t, r as f64).unwrap().0;
            let oracle = central_oracle(p, t, r);
            checked += 1;
            if oracle == 0.0 {
                if value != 0.0 {
                    oracle_zero_mismatch += 1;
                }
            } else {
                worst = worst.max((value - oracle).abs() / oracle.abs());
            }
            if r > 0 && central_loss(p, p, r as f64).unwrap().0 != 0.0 {
                zero_mismatch += 1;
            }
        }
        if central_loss(p, t, 0.0).unwrap().0 != -t * p.ln() {
            ce_mismatch += 1;
        }
    }
    let passed = worst <= LOSS_ORACLE_REL && zero_mismatch == 0 && ce_mismatch == 0 && oracle_zero_mismatch == 0;
    suite.report(
        "1",
        "central loss oracle",
        passed,
        false,
        format!(
            "{checked} values, max rel err {worst:.2e} (tol {LOSS_ORACLE_REL:.0e}); \
             loss(p,p,r>0)!=0: {zero_mismatch}; loss(p,t,0)!=-t ln p: {ce_mismatch}; \
             zero-oracle mismatches: {oracle_zero_mismatch}"
        ),
        t0.elapsed(),
        Some(budget(1)),
    );
}

// ---------------------------------------------------------------------------
// 2. Loss comparison through the command line

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_coorlandmark"));
    c.env("RUST_LOG", "warn");
    c
}

fn criterion_2(suite: &mut Suite) {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("losses");
    let status = bin()
        .args(["compare-losses", "--targets", "0.1,0.9", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    let mut detail = Vec::new();
    let mut passed = status.status.success();
    if passed {
        let text = std::fs::read_to_string(out.join("losses.csv")).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        passed &= header == ["family", "setting", "p_y", "p_x", "loss", "gradient"];
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        for target in ["0.1", "0.9"] {
            let at = |family: &str| -> Option<f64> {
                rows.iter()
                    .find(|r| r[0] == family && r[2] == target && r[3] == target)
                    .map(|r| r[4].parse().unwrap())
            };
            let (central, ce, focal) = (at("central"), at("cross_entropy"), at("focal"));
            match (central, ce, focal) {
                (Some(c), Some(x), Some(f)) => {
                    passed &= c == 0.0 && x > HIGH_LOSS && f > HIGH_LOSS;
                    detail.push(format!("p_y={target}: central {c}, ce {x:.5}, focal {f:.5}"));
                }
                _ => {
                    passed = false;
                    detail.push(format!("p_y={target}: rows missing"));
                }
            }
        }
    } else {
        detail.push(format!("exit {:?}", status.status.code()));
    }
    suite.report(
        "2",
        "loss curves at p_x = p_y",
        passed,
        false,
        format!("{} (central == 0, others > {HIGH_LOSS})", detail.join("; ")),
        t0.elapsed(),
        Some(budget(2)),
    );
}

// ---------------------------------------------------------------------------
// 3. Gradient checks

fn criterion_3(suite: &mut Suite) {
    let t0 = Instant::now();
    let mut reports = check_losses(1000, 0);
    let losses_ok = reports.iter().all(|r| r.tolerance == LOSS_TOLERANCE && r.checked == 1000);
    reports.push(check_attention(0).unwrap());
    reports.push(check_detector(0, 50).unwrap());
    let network_ok = reports[4..].iter().all(|r| r.tolerance == NETWORK_TOLERANCE);
    let passed = losses_ok && network_ok && reports.iter().all(|r| r.passed);
    let detail = reports
        .iter()
        .map(|r| format!("{} {:.1e}/{:.0e}", r.scope, r.max_error, r.tolerance))
        .collect::<Vec<_>>()
        .join(", ");
    suite.report("3", "gradient checks", passed, false, detail, t0.elapsed(), Some(budget(3)));
}

// ---------------------------------------------------------------------------
// 4. Attention invariants

fn criterion_4(suite: &mut Suite) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let mut worst_row = 0.0f64;
    for _ in 0..200 {
        let heads = rng.random_range(1..4usize);
        let channels = heads * rng.random_range(1..4usize);
        let (h, w) = (rng.random_range(1..6usize), rng.random_range(1..6usize));
        let config = AttentionConfig::new(channels, heads).unwrap();
        let mut state = CoorAttentionState::init(&config, &mut rng).unwrap();
        for v in state.offset_head.weight.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let x = coorlandmark::Tensor::from_fn(&[channels, h, w], |_| rng.random_range(-2.0..2.0));
        let out = evaluate_attention(&x, &state, &config, AttentionKind::Coordinated).unwrap();
        for row in out.weights.chunks(h * w) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }

    let mut node_exact = true;
    for (c, h, w) in [(1, 1, 1), (3, 4, 4), (2, 5, 7), (8, 16, 16), (4, 32, 32)] {
        let x = coorlandmark::Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0));
        let grid = make_grid(h, w).unwrap();
        node_exact &= bilinear_sample(&x, &grid.points).unwrap() == x;
    }

    let mut block_equal = true;
    for seed in 0..20 {
        let config = AttentionConfig::new(8, 2).unwrap();
        let state = CoorAttentionState::init(&config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x = coorlandmark::Tensor::from_fn(&[8, 4, 4], |_| rng.random_range(-1.0..1.0));
        let a = evaluate_attention(&x, &state, &config, AttentionKind::Coordinated).unwrap();
        let b = evaluate_attention(&x, &state, &config, AttentionKind::Vanilla).unwrap();
        block_equal &= a.output == b.output && a.weights == b.weights;
    }
    let det = build(&DetectorConfig::toy(), 0).unwrap();
    let image = &generate_synthetic(&SyntheticSpec { num_images: 1, ..Default::default() }).unwrap()[0];
    let input = prepare(image, &HeatmapSpec::new(64, 64, 3.0, 1.0).unwrap()).unwrap().pixels;
    let detector_equal = forward(&det, &input).unwrap() == forward_vanilla(&det, &input).unwrap();

    let passed = worst_row <= ROW_SUM_TOL && node_exact && block_equal && detector_equal;
    suite.report(
        "4",
        "attention invariants",
        passed,
        false,
        format!(
            "max |row sum - 1| {worst_row:.1e} (tol {ROW_SUM_TOL:.0e}); grid-node sampling exact: {node_exact}; \
             zero-offset block == vanilla bitwise: {block_equal}; toy detector == vanilla bitwise: {detector_equal}"
        ),
        t0.elapsed(),
        Some(budget(4)),
    );
}

// ---------------------------------------------------------------------------
// 5. Codec round trip

fn criterion_5(suite: &mut Suite) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut misses = 0;
    for i in 0..CODEC_SAMPLES {
        let n = [16usize, 32, 64][i % 3];
        let spec = HeatmapSpec::new(n, n, 3.0, 1.0).unwrap();
        let l = Landmark::new(rng.random_range(0..n) as f64, rng.random_range(0..n) as f64, 0);
        let d = decode_argmax(&encode_gaussian(&l, &spec).unwrap().heatmap);
        if (d.x, d.y) != (l.x, l.y) {
            misses += 1;
        }
    }
    suite.report(
        "5",
        "codec round trip",
        misses == 0,
        false,
        format!("{CODEC_SAMPLES} integer landmarks on 16/32/64 fields, {misses} mismatches (exact)"),
        t0.elapsed(),
        Some(budget(5)),
    );
}

// ---------------------------------------------------------------------------
// 6-8. Toy training runs

struct ToyRun {
    mre: f64,
    sdr2: f64,
    /// Mean training loss of each epoch.
    epoch_losses: Vec<f64>,
    step_losses: Vec<f64>,
    seconds: f64,
}

fn toy_run(label: &str, loss: LossConfig, attention: AttentionKind, seed: u64) -> ToyRun {
    let t0 = Instant::now();
    let detector = DetectorConfig::toy();
    let config = TrainConfig {
        loss,
        attention,
        epochs: TOY_EPOCHS,
        seed,
        ..TrainConfig::default()
    };
    let spec = HeatmapSpec::new(64, 64, config.sigma, config.peak).unwrap();
    let train_images = generate_synthetic(&SyntheticSpec {
        num_images: TOY_TRAIN_IMAGES,
        seed,
        ..Default::default()
    })
    .unwrap();
    let test_images = generate_synthetic(&SyntheticSpec {
        num_images: TOY_TEST_IMAGES,
        seed: seed + TEST_SEED_OFFSET,
        ..Default::default()
    })
    .unwrap();
    let data: Vec<_> = train_images.iter().map(|i| prepare(i, &spec).unwrap()).collect();
    let outcome = train_with_hook(&detector, &config, &data, &mut |e, _| {
        if e.epoch % 25 == 0 {
            eprintln!("  {label} seed {seed}: epoch {} train {:.6} val {:.6}", e.epoch, e.train_loss, e.val_loss);
        }
    })
    .unwrap();
    let ev = evaluate(&outcome.best_state, &test_images, &spec, &DEFAULT_THRESHOLDS, attention).unwrap();
    let run = ToyRun {
        mre: ev.report.mre,
        sdr2: ev.report.sdr_at(2.0).unwrap(),
        epoch_losses: outcome.log.epochs.iter().map(|e| e.train_loss).collect(),
        step_losses: outcome.log.steps.iter().map(|s| s.train_loss).collect(),
        seconds: t0.elapsed().as_secs_f64(),
    };
    eprintln!(
        "  {label} seed {seed}: best epoch {}, MRE {:.3} px, SDR@2 {:.1}% ({:.0} s)",
        outcome.best_epoch, run.mre, run.sdr2, run.seconds
    );
    run
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_list(v: &[f64], digits: usize) -> String {
    v.iter().map(|x| format!("{x:.digits$}")).collect::<Vec<_>>().join("/")
}

fn criteria_6_to_8(suite: &mut Suite, want6: bool, want7: bool, want8: bool) {
    let runs = |label: &str, loss: LossConfig, attention: AttentionKind| -> Vec<ToyRun> {
        TOY_SEEDS.iter().map(|&s| toy_run(label, loss, attention, s)).collect()
    };
    let central2 = LossConfig::central(2.0);
    let t6 = Instant::now();
    let central = runs("central r=2", central2, AttentionKind::Coordinated);
    let ce = if want6 {
        runs("cross-entropy", LossConfig::with_family(LossFamily::CrossEntropy), AttentionKind::Coordinated)
    } else {
        Vec::new()
    };
    let elapsed6 = t6.elapsed();
    let cpu6: f64 = central.iter().chain(&ce).map(|r| r.seconds).sum();

    let mres = |r: &[ToyRun]| r.iter().map(|x| x.mre).collect::<Vec<_>>();
    if want6 {
        let (c_mre, x_mre) = (mean(&mres(&central)), mean(&mres(&ce)));
        let sdr2: Vec<f64> = central.iter().map(|r| r.sdr2).collect();
        let c_sdr = mean(&sdr2);
        suite.report(
            "6",
            "toy convergence, central vs cross-entropy",
            c_mre <= x_mre && c_sdr >= SDR2_TARGET,
            false,
            format!(
                "MRE central {c_mre:.3} px ({}) vs ce {x_mre:.3} px ({}), need <=; \
                 central SDR@2 {c_sdr:.1}% ({}), need >= {SDR2_TARGET}%",
                fmt_list(&mres(&central), 2),
                fmt_list(&mres(&ce), 2),
                fmt_list(&sdr2, 1)
            ),
            elapsed6,
            Some(budget(6)),
        );
    }

    let t7 = Instant::now();
    if want7 {
        let r0 = runs("central r=0", LossConfig::central(0.0), AttentionKind::Coordinated);
        let (m2, m0) = (mean(&mres(&central)), mean(&mres(&r0)));
        suite.report(
            "7",
            "r ablation, r=2 vs r=0",
            m2 <= m0,
            false,
            format!(
                "3-seed MRE r=2 {m2:.3} px ({}) vs r=0 {m0:.3} px ({}), need <=",
                fmt_list(&mres(&central), 2),
                fmt_list(&mres(&r0), 2)
            ),
            t7.elapsed() + elapsed6,
            None,
        );
    }

    let t8 = Instant::now();
    if want8 {
        let vanilla = runs("vanilla attention", central2, AttentionKind::Vanilla);
        let mut reached = Vec::new();
        for (c, v) in central.iter().zip(&vanilla) {
            let goal = *v.epoch_losses.last().unwrap();
            reached.push(c.epoch_losses.iter().position(|&l| l <= goal).map(|i| i + 1));
        }
        let hits = reached.iter().filter(|r| r.is_some()).count();
        let detail = reached
            .iter()
            .zip(TOY_SEEDS)
            .map(|(r, s)| match r {
                Some(e) => format!("seed {s}: epoch {e}"),
                None => format!("seed {s}: not reached"),
            })
            .collect::<Vec<_>>()
            .join(", ");
        suite.report(
            "8",
            "convergence speed vs vanilla attention (soft)",
            hits >= 2,
            true,
            format!("coordinated reaches vanilla's epoch-{TOY_EPOCHS} training loss: {detail}; {hits}/3, need >= 2"),
            t8.elapsed(),
            None,
        );
    }

    // Training-module invariant on the same central-loss runs.
    let mut decreasing = Vec::new();
    for r in &central {
        let k = (r.step_losses.len() / 10).max(1);
        let first = mean(&r.step_losses[..k]);
        let last = mean(&r.step_losses[r.step_losses.len() - k..]);
        decreasing.push((first, last));
    }
    suite.report(
        "T",
        "training loss decreases (central r=2, first vs last 10% of steps)",
        decreasing.iter().all(|(f, l)| l < f),
        false,
        decreasing
            .iter()
            .zip(TOY_SEEDS)
            .map(|((f, l), s)| format!("seed {s}: {f:.5} -> {l:.5}"))
            .collect::<Vec<_>>()
            .join(", "),
        Duration::ZERO,
        None,
    );
    println!("     toy training CPU time for criterion 6 runs: {:.1} min", cpu6 / 60.0);
}

// ---------------------------------------------------------------------------
// 9. Metrics oracles

/// `Gamma((nu + 1) / 2) / Gamma(nu / 2)` for integer `nu` by the
/// recurrence `R(nu + 2) = R(nu) (nu + 1) / nu`.
fn gamma_ratio(nu: usize) -> f64 {
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let (mut r, mut k) = if nu % 2 == 1 { (1.0 / sqrt_pi, 1) } else { (sqrt_pi / 2.0, 2) };
    while k < nu {
        r *= (k + 1) as f64 / k as f64;
        k += 2;
    }
    r
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (f(a) + 4.0 * f((a + b) / 2.0) + f(b))
    }
    fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = (a + b) / 2.0;
        let (left, right) = (simpson(f, a, m), simpson(f, m, b));
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        recurse(f, a, m, left, tol / 2.0, depth - 1) + recurse(f, m, b, right, tol / 2.0, depth - 1)
    }
    recurse(f, a, b, simpson(f, a, b), tol, depth)
}

/// Two-sided p-value of a Student t statistic by integrating the density.
fn p_value_oracle(t: f64, nu: usize) -> f64 {
    let n = nu as f64;
    let c = gamma_ratio(nu) / (n * std::f64::consts::PI).sqrt();
    let density = move |x: f64| c * (1.0 + x * x / n).powf(-(n + 1.0) / 2.0);
    1.0 - 2.0 * adaptive_simpson(&density, 0.0, t.abs(), 1e-14, 50)
}

fn criterion_9(suite: &mut Suite) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let mut sdr_mismatch = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..60);
        let errors: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..6.0)).collect();
        let got = sdr(&errors, &DEFAULT_THRESHOLDS);
        for (i, &th) in DEFAULT_THRESHOLDS.iter().enumerate() {
            let mut hits = 0;
            for &e in &errors {
                if e <= th {
                    hits += 1;
                }
            }
            if got[i] != (th, 100.0 * hits as f64 / n as f64) {
                sdr_mismatch += 1;
            }
        }
    }

    let e345 = radial_errors(&[Landmark::new(3.0, 4.0, 0)], &[Landmark::new(0.0, 0.0, 0)], 1.0).unwrap();
    let report = MetricsReport::from_errors(std::slice::from_ref(&e345), &DEFAULT_THRESHOLDS, None, "px").unwrap();
    let mre_exact = e345 == [5.0] && report.mre == 5.0;

    let mut worst_p = 0.0f64;
    for i in 0..20u64 {
        let mut data_rng = ChaCha8Rng::seed_from_u64(100 + i);
        let n = 3 + 2 * i as usize;
        let shift = 0.05 * i as f64;
        let noise = Normal::new(0.0, 0.5).unwrap();
        let a: Vec<f64> = (0..n).map(|_| data_rng.random_range(1.0..5.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + shift + noise.sample(&mut data_rng)).collect();
        let got = paired_t_test(&a, &b).unwrap();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let m = mean(&d);
        let sd = (d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt();
        let t = m / (sd / (n as f64).sqrt());
        worst_p = worst_p.max((got.p_value - p_value_oracle(t, n - 1)).abs());
    }

    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rejections = 0;
    for _ in 0..NULL_DATASETS {
        let a: Vec<f64> = (0..20).map(|_| normal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..20).map(|_| normal.sample(&mut rng)).collect();
        if paired_t_test(&a, &b).unwrap().p_value < 0.05 {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / NULL_DATASETS as f64;

    let passed = sdr_mismatch == 0
        && mre_exact
        && worst_p <= P_VALUE_TOL
        && (NULL_RATE.0..=NULL_RATE.1).contains(&rate);
    suite.report(
        "9",
        "metrics oracles",
        passed,
        false,
        format!(
            "SDR brute-force mismatches {sdr_mismatch}/400; 3-4-5 MRE exact: {mre_exact}; \
             t-test max |dp| {worst_p:.1e} (tol {P_VALUE_TOL:.0e}); null rejection rate {rate:.4} (need {}..{})",
            NULL_RATE.0, NULL_RATE.1
        ),
        t0.elapsed(),
        Some(budget(9)),
    );
}

// ---------------------------------------------------------------------------
// 10. Deterministic training through the command line

fn criterion_10(suite: &mut Suite) {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ok = |c: &mut Command| c.output().map(|o| o.status.success()).unwrap_or(false);
    let mut passed = ok(bin().args(["--seed", "0", "generate", "--num-images", "20", "--out"]).arg(&data));
    let train = |out: &Path| {
        ok(bin()
            .args(["--deterministic", "--seed", "3", "train", "--epochs", "3", "--data"])
            .arg(&data)
            .arg("--out")
            .arg(out))
    };
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    passed &= train(&a) && train(&b);
    // Third run: every setting comes from the first run's manifest.
    passed &= ok(bin().arg("--config").arg(a.join("manifest.json")).arg("--out").arg(&c).arg("train"));
    let mut identical = Vec::new();
    for f in ["checkpoint.ckpt", "train_log.csv", "epochs.csv"] {
        let bytes = |d: &Path| std::fs::read(d.join(f)).ok();
        let same = passed && bytes(&a).is_some() && bytes(&a) == bytes(&b) && bytes(&a) == bytes(&c);
        identical.push(format!("{f} {}", if same { "identical x3" } else { "DIFFERENT" }));
        passed &= same;
    }
    // Apart from the output directory, the manifests record the same run.
    let manifest = |d: &Path| -> serde_json::Value {
        let text = std::fs::read_to_string(d.join("manifest.json")).unwrap_or_default();
        let mut m: serde_json::Value = serde_json::from_str(&text).unwrap_or_default();
        if let Some(obj) = m.as_object_mut() {
            obj.remove("output_dir");
            if let Some(config) = obj.get_mut("config").and_then(|c| c.as_object_mut()) {
                config.remove("out");
            }
            if let Some(artifacts) = obj.get_mut("artifacts").and_then(|a| a.as_array_mut()) {
                artifacts.retain(|a| a["path"] != "config.txt");
            }
        }
        m
    };
    let manifests_equal = !manifest(&a).is_null() && manifest(&a) == manifest(&b) && manifest(&a) == manifest(&c);
    passed &= manifests_equal;
    suite.report(
        "10",
        "deterministic training",
        passed,
        false,
        format!("two runs plus a rerun from the manifest: {}; manifests equal up to output path: {manifests_equal}", identical.join(", ")),
        t0.elapsed(),
        None,
    );
}
