//! Finite-difference verification of every analytic gradient: the four
//! pixel losses, one attention block, and a whole (tiny) detector.
//!
//! Each check compares the tape's gradient with a central difference
//! `(f(x + h) - f(x - h)) / 2h` computed from forward evaluations only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    make_grid, record_attention, AttentionConfig, AttentionKind, AttentionVars,
    CoorAttentionState, LinearMap,
};
use crate::detector::{self, DetectorConfig, DetectorState, Mode};
use crate::error::Result;
use crate::losses::{tensor_loss, LossConfig, LossFamily};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Step for the pixel-loss checks.
pub const LOSS_STEP: f64 = 1e-6;
pub const LOSS_TOLERANCE: f64 = 1e-5;
/// Step for the network-level checks.
pub const NETWORK_STEP: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
/// Gradient magnitude below which network errors are measured absolutely:
/// the central difference at `NETWORK_STEP` carries O(1e-9) truncation
/// error, so relative error is meaningless for smaller gradients.
pub const NETWORK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub scope: String,
    pub checked: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// `(analytic, numeric)` at the worst entry.
    pub worst: (f64, f64),
}

impl GradCheckReport {
    fn new(scope: impl Into<String>, tolerance: f64) -> Self {
        Self {
            scope: scope.into(),
            checked: 0,
            max_error: 0.0,
            tolerance,
            passed: true,
            worst: (0.0, 0.0),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, error: f64) {
        self.checked += 1;
        if !(error <= self.max_error) {
            self.max_error = error;
            self.worst = (analytic, numeric);
        }
        self.passed = self.max_error <= self.tolerance;
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {} gradients, max error {:.3e} (tolerance {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.scope,
            self.checked,
            self.max_error,
            self.tolerance
        )
    }
}

pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Error relative to the larger magnitude, or absolute below `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks each loss family on `samples` random `(p, t)` pairs with
/// `|t - p| > 1e-3`. The error is absolute for gradients up to 1 and
/// relative above (near `p = 0.01` the derivatives reach ~1e2).
pub fn check_losses(samples: usize, seed: u64) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for family in LossFamily::ALL {
        let mut report = GradCheckReport::new(format!("loss/{family}"), LOSS_TOLERANCE);
        let mut n = 0;
        while n < samples {
            let p: f64 = rng.random_range(0.01..0.99);
            let t = rng.random_range(0.0..1.0);
            if (t - p).abs() <= 1e-3 {
                continue;
            }
            let mut cfg = LossConfig::with_family(family);
            if family == LossFamily::Central {
                cfg.r = [0.0, 1.0, 2.0, 3.0][n % 4];
            }
            let analytic = cfg.eval(p, t).1;
            let numeric = central_difference(|q| cfg.eval(q, t).0, p, LOSS_STEP);
            report.record(analytic, numeric, relative_error(analytic, numeric, 1.0));
            n += 1;
        }
        reports.push(report);
    }
    reports
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Checks gradients of `sum(w * attention(x))` with respect to the input
/// and all nine tensors of the block, on a 4×4 map with 4 channels and two
/// heads. The offset head is randomized so sampling is off the grid.
pub fn check_attention(seed: u64) -> Result<GradCheckReport> {
    let (c, h, w) = (4, 4, 4);
    let cfg = AttentionConfig::new(c, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = CoorAttentionState::init(&cfg, &mut rng)?;
    state.offset_head = LinearMap {
        weight: random_tensor(&[2, c], &mut rng, 1.0),
        bias: Some(random_tensor(&[2], &mut rng, 0.5)),
    };
    let x = random_tensor(&[h * w, c], &mut rng, 1.0);
    let weights = random_tensor(&[h * w, c], &mut rng, 1.0);
    let grid = make_grid(h, w)?;

    let run = |x: &Tensor, state: &CoorAttentionState| {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let vars = AttentionVars::record(&mut tape, state);
        let nodes =
            record_attention(&mut tape, xv, 1, &grid, &vars, &cfg, AttentionKind::Coordinated);
        let out = tape.weighted_sum(nodes.output, weights.clone());
        let value = tape.value(out).data()[0];
        (tape, xv, vars, out, value)
    };

    let (tape, xv, vars, out, _) = run(&x, &state);
    let grads = tape.backward(out);
    let mut report = GradCheckReport::new("attention", NETWORK_TOLERANCE);

    let gx = grads.get(xv).expect("input gradient").clone();
    for i in 0..x.len() {
        let numeric = central_difference(
            |v| {
                let mut xp = x.clone();
                xp.data_mut()[i] = v;
                run(&xp, &state).4
            },
            x.data()[i],
            NETWORK_STEP,
        );
        let a = gx.data()[i];
        report.record(a, numeric, relative_error(a, numeric, NETWORK_FLOOR));
    }

    let leaves = vars.all();
    for (slot, leaf) in leaves.iter().enumerate() {
        let g = grads.get(*leaf).expect("parameter gradient").clone();
        for i in 0..g.len() {
            let base = param_slot(&state, slot).data()[i];
            let numeric = central_difference(
                |v| {
                    let mut s = state.clone();
                    param_slot_mut(&mut s, slot).data_mut()[i] = v;
                    run(&x, &s).4
                },
                base,
                NETWORK_STEP,
            );
            let a = g.data()[i];
            report.record(a, numeric, relative_error(a, numeric, NETWORK_FLOOR));
        }
    }
    Ok(report)
}

fn param_slot(state: &CoorAttentionState, slot: usize) -> &Tensor {
    state.maps().into_iter().flat_map(LinearMap::tensors).nth(slot).expect("slot in range")
}

fn param_slot_mut(state: &mut CoorAttentionState, slot: usize) -> &mut Tensor {
    state
        .maps_mut()
        .into_iter()
        .flat_map(LinearMap::tensors_mut)
        .nth(slot)
        .expect("slot in range")
}

/// Training-mode loss of `state` on a fixed batch, and its gradients.
fn detector_loss(
    state: &DetectorState,
    images: &Tensor,
    targets: &Tensor,
    loss: &LossConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let rec = detector::record(&mut tape, state, images, Mode::Train, AttentionKind::Coordinated)?;
    let (value, grad) = tensor_loss(tape.value(rec.output), targets, loss)?;
    let out = tape.field_loss(rec.output, value, grad);
    let grads = tape.backward(out);
    let per_param = rec
        .params
        .iter()
        .zip(state.params())
        .map(|(v, p)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
        })
        .collect();
    Ok((value, per_param))
}

/// End-to-end check on the 8×8 two-stage detector: `count` randomly chosen
/// scalar parameters, central loss against random targets, batch of two.
pub fn check_detector(seed: u64, count: usize) -> Result<GradCheckReport> {
    let config = DetectorConfig::tiny();
    let mut state = detector::build(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in state.params_mut() {
        if p.name.contains(".attn.offset.weight") {
            p.value = random_tensor(p.value.shape(), &mut rng, 1.0);
        }
    }
    let (h, w) = config.input_size;
    let images = Tensor::from_fn(&[2, config.in_channels, h, w], |_| rng.random_range(0.0..1.0));
    let targets =
        Tensor::from_fn(&[2, config.num_landmarks, h, w], |_| rng.random_range(0.0..1.0));
    let loss = LossConfig::central(2.0);

    let (_, grads) = detector_loss(&state, &images, &targets, &loss)?;
    let total = state.parameter_count();
    let mut report = GradCheckReport::new("detector", NETWORK_TOLERANCE);
    for _ in 0..count {
        let mut flat = rng.random_range(0..total);
        let mut slot = 0;
        while flat >= state.params()[slot].value.len() {
            flat -= state.params()[slot].value.len();
            slot += 1;
        }
        let base = state.params()[slot].value.data()[flat];
        let mut probe = state.clone();
        let mut eval = |v: f64| {
            probe.params_mut()[slot].value.data_mut()[flat] = v;
            detector_loss(&probe, &images, &targets, &loss)
                .map(|r| r.0)
                .unwrap_or(f64::NAN)
        };
        let numeric = central_difference(&mut eval, base, NETWORK_STEP);
        let analytic = grads[slot].data()[flat];
        report.record(analytic, numeric, relative_error(analytic, numeric, NETWORK_FLOOR));
    }
    Ok(report)
}
