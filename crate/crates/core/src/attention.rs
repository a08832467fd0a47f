//! Coordinate-sampled ("structure-aware") multi-head attention.
//!
//! A uniform grid of normalized coordinates covers the feature map. A small
//! linear head predicts a bounded per-position offset from the features,
//! the map is resampled bilinearly at `grid + offset`, and queries and keys
//! are projected from the resampled features while values come from the
//! original ones. With the offset head at its zero initialization the block
//! computes exactly the same function as plain multi-head self-attention.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_OFFSET_SCALE: f64 = 0.25;

/// Normalized sampling positions, `points: [2, H, W]` with channel 0 the x
/// (column) coordinate and channel 1 the y (row) coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid {
    pub height: usize,
    pub width: usize,
    pub points: Tensor,
}

fn linspace_coord(k: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * k as f64 / (n - 1) as f64
    }
}

/// Linearly spaced coordinates in `[-1, 1]`; `(-1, -1)` is the top-left
/// pixel centre, `(1, 1)` the bottom-right one. A length-1 axis maps to 0.
pub fn make_grid(height: usize, width: usize) -> Result<CoordinateGrid> {
    if height == 0 || width == 0 {
        return Err(invalid_input("grid dims must be >= 1"));
    }
    let hw = height * width;
    let points = Tensor::from_fn(&[2, height, width], |i| {
        let (axis, s) = (i / hw, i % hw);
        if axis == 0 {
            linspace_coord(s % width, width)
        } else {
            linspace_coord(s / width, height)
        }
    });
    Ok(CoordinateGrid {
        height,
        width,
        points,
    })
}

/// Bilinear interpolation of `features: [C, H, W]` at normalized
/// `coords: [2, H', W']`. Out-of-range coordinates are clamped to the border.
pub fn bilinear_sample(features: &Tensor, coords: &Tensor) -> Result<Tensor> {
    if features.shape().len() != 3 || coords.shape().len() != 3 || coords.shape()[0] != 2 {
        return Err(invalid_input(format!(
            "expected features [C,H,W] and coords [2,H,W], got {:?} and {:?}",
            features.shape(),
            coords.shape()
        )));
    }
    if !coords.all_finite() {
        return Err(invalid_input("non-finite sampling coordinates"));
    }
    let mut tape = Tape::new();
    let x = tape.constant(batch1(features)?);
    let c = tape.constant(batch1(coords)?);
    let out = tape.grid_sample(x, c);
    unbatch(tape.value(out))
}

fn batch1(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape)
}

fn unbatch(t: &Tensor) -> Result<Tensor> {
    t.clone().reshape(&t.shape()[1..])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    /// Largest offset, as a fraction of the normalized half-range.
    pub offset_scale: f64,
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize) -> Result<Self> {
        let cfg = Self {
            channels,
            heads,
            offset_scale: DEFAULT_OFFSET_SCALE,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels == 0 || self.channels % self.heads != 0 {
            return Err(invalid_config(format!(
                "{} channels not divisible into {} heads",
                self.channels, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.offset_scale) {
            return Err(invalid_config(format!(
                "offset_scale must be in [0, 1], got {}",
                self.offset_scale
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Weight `[out, in]` and optional bias `[out]` of an affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearMap {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Some(Tensor::zeros(&[out_dim])),
        }
    }

    pub fn random(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).expect("valid std");
        Self {
            weight: Tensor::from_fn(&[out_dim, in_dim], |_| normal.sample(rng)),
            bias: Some(Tensor::zeros(&[out_dim])),
        }
    }

    pub fn without_bias(self) -> Self {
        Self { bias: None, ..self }
    }

    /// Weight followed by the bias, if any.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        std::iter::once(&self.weight).chain(self.bias.as_ref())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut())
    }
}

/// Learnable maps of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct CoorAttentionState {
    pub proj_q: LinearMap,
    /// Bias-free: a key bias only adds a per-query constant to the scores,
    /// which the softmax cancels.
    pub proj_k: LinearMap,
    pub proj_v: LinearMap,
    pub proj_out: LinearMap,
    /// `C -> 2` offset predictor; zero at initialization.
    pub offset_head: LinearMap,
}

impl CoorAttentionState {
    pub fn init(config: &AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        Ok(Self {
            proj_q: LinearMap::random(c, c, rng),
            proj_k: LinearMap::random(c, c, rng).without_bias(),
            proj_v: LinearMap::random(c, c, rng),
            proj_out: LinearMap::random(c, c, rng),
            offset_head: LinearMap::zeros(2, c),
        })
    }

    pub fn maps(&self) -> [&LinearMap; 5] {
        [
            &self.proj_q,
            &self.proj_k,
            &self.proj_v,
            &self.proj_out,
            &self.offset_head,
        ]
    }

    pub fn maps_mut(&mut self) -> [&mut LinearMap; 5] {
        [
            &mut self.proj_q,
            &mut self.proj_k,
            &mut self.proj_v,
            &mut self.proj_out,
            &mut self.offset_head,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Queries and keys from coordinate-resampled features.
    Coordinated,
    /// Plain self-attention on the input features.
    Vanilla,
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coor" | "coordinated" | "coor_transformer" => Ok(AttentionKind::Coordinated),
            "vanilla" => Ok(AttentionKind::Vanilla),
            other => Err(invalid_config(format!("unknown attention kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionKind::Coordinated => "coordinated",
            AttentionKind::Vanilla => "vanilla",
        })
    }
}

/// Tape handles of the tensors in a [`CoorAttentionState`], in
/// `q, k, v, out, offset` order, weight before bias.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q: (Var, Option<Var>),
    pub k: (Var, Option<Var>),
    pub v: (Var, Option<Var>),
    pub out: (Var, Option<Var>),
    pub offset: (Var, Option<Var>),
}

impl AttentionVars {
    pub fn record(tape: &mut Tape, state: &CoorAttentionState) -> Self {
        let mut leaf = |m: &LinearMap| {
            let w = tape.param(m.weight.clone());
            (w, m.bias.as_ref().map(|b| tape.param(b.clone())))
        };
        Self {
            q: leaf(&state.proj_q),
            k: leaf(&state.proj_k),
            v: leaf(&state.proj_v),
            out: leaf(&state.proj_out),
            offset: leaf(&state.offset_head),
        }
    }

    /// Every handle, in the order of [`LinearMap::tensors`] over
    /// [`CoorAttentionState::maps`].
    pub fn all(&self) -> Vec<Var> {
        [self.q, self.k, self.v, self.out, self.offset]
            .iter()
            .flat_map(|(w, b)| std::iter::once(*w).chain(*b))
            .collect()
    }
}

/// Nodes produced by [`record_attention`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    /// `[N*H*W, C]` block output.
    pub output: Var,
    /// The softmax node; see [`Tape::attention_probs`].
    pub attention: Var,
    /// Sampling coordinates `[N, 2, H, W]` before clamping.
    pub coords: Option<Var>,
    /// Features the queries and keys were projected from, `[N*H*W, C]`.
    pub sampled: Var,
}

/// Records the attention block on `tape` for token input `x: [N*H*W, C]`.
#[allow(clippy::too_many_arguments)]
pub fn record_attention(
    tape: &mut Tape,
    x: Var,
    batch: usize,
    grid: &CoordinateGrid,
    vars: &AttentionVars,
    config: &AttentionConfig,
    kind: AttentionKind,
) -> AttentionNodes {
    let (sampled, coords) = match kind {
        AttentionKind::Coordinated => {
            let raw = tape.linear(x, vars.offset.0, vars.offset.1);
            let coords = tape.offset_coords(raw, &grid.points, config.offset_scale);
            let map = tape.from_tokens(x, batch, grid.height, grid.width);
            let resampled = tape.grid_sample(map, coords);
            (tape.to_tokens(resampled), Some(coords))
        }
        AttentionKind::Vanilla => (x, None),
    };
    let q = tape.linear(sampled, vars.q.0, vars.q.1);
    let k = tape.linear(sampled, vars.k.0, vars.k.1);
    let v = tape.linear(x, vars.v.0, vars.v.1);
    let attention = tape.attention(q, k, v, config.heads, batch);
    let output = tape.linear(attention, vars.out.0, vars.out.1);
    AttentionNodes {
        output,
        attention,
        coords,
        sampled,
    }
}

fn check_input(x: &Tensor, config: &AttentionConfig) -> Result<(usize, usize)> {
    config.validate()?;
    if x.shape().len() != 3 || x.shape()[0] != config.channels {
        return Err(Error::ShapeMismatch {
            expected: vec![config.channels, 0, 0],
            actual: x.shape().to_vec(),
        });
    }
    if !x.all_finite() {
        return Err(invalid_input("non-finite features"));
    }
    Ok((x.shape()[1], x.shape()[2]))
}

/// Output of one attention evaluation on a single `[C, H, W]` map.
#[derive(Clone, Debug)]
pub struct AttentionResult {
    pub output: Tensor,
    /// Softmax weights `[heads, HW, HW]`.
    pub weights: Vec<f64>,
    /// Clamped sampling coordinates `[2, H, W]` (the grid for vanilla).
    pub coords: Tensor,
}

pub fn evaluate_attention(
    x: &Tensor,
    state: &CoorAttentionState,
    config: &AttentionConfig,
    kind: AttentionKind,
) -> Result<AttentionResult> {
    let (h, w) = check_input(x, config)?;
    let grid = make_grid(h, w)?;
    let mut tape = Tape::new();
    let map = tape.constant(batch1(x)?);
    let tokens = tape.to_tokens(map);
    let vars = AttentionVars::record(&mut tape, state);
    let nodes = record_attention(&mut tape, tokens, 1, &grid, &vars, config, kind);
    let out_map = tape.from_tokens(nodes.output, 1, h, w);
    let coords = match nodes.coords {
        Some(c) => unbatch(tape.value(c))?.map(|v| v.clamp(-1.0, 1.0)),
        None => grid.points.clone(),
    };
    Ok(AttentionResult {
        output: unbatch(tape.value(out_map))?,
        weights: tape.attention_probs(nodes.attention).unwrap_or_default().to_vec(),
        coords,
    })
}

/// Coordinate-indexed features: `x` resampled at the clamped
/// `grid + offset_scale * tanh(offset_head(x))`. Returns the sampled map and
/// the coordinates used, both `[*, H, W]`.
pub fn coordinate_module(
    x: &Tensor,
    state: &CoorAttentionState,
    grid: &CoordinateGrid,
    offset_scale: f64,
) -> Result<(Tensor, Tensor)> {
    if x.shape().len() != 3 || (x.shape()[1], x.shape()[2]) != (grid.height, grid.width) {
        return Err(invalid_input(format!(
            "features {:?} do not match a {}x{} grid",
            x.shape(),
            grid.height,
            grid.width
        )));
    }
    let mut tape = Tape::new();
    let map = tape.constant(batch1(x)?);
    let tokens = tape.to_tokens(map);
    let w = tape.constant(state.offset_head.weight.clone());
    let b = state.offset_head.bias.as_ref().map(|b| tape.constant(b.clone()));
    let raw = tape.linear(tokens, w, b);
    let coords = tape.offset_coords(raw, &grid.points, offset_scale);
    let sampled = tape.grid_sample(map, coords);
    Ok((
        unbatch(tape.value(sampled))?,
        unbatch(tape.value(coords))?.map(|v| v.clamp(-1.0, 1.0)),
    ))
}

/// `softmax(Q^p K^pT / sqrt(d)) V` per head, projected back to `C` channels;
/// `x: [C, H, W]` in, `[C, H, W]` out.
pub fn structure_aware_attention(
    x: &Tensor,
    state: &CoorAttentionState,
    config: &AttentionConfig,
) -> Result<Tensor> {
    Ok(evaluate_attention(x, state, config, AttentionKind::Coordinated)?.output)
}

/// Plain multi-head self-attention with the same projections.
pub fn vanilla_attention(
    x: &Tensor,
    state: &CoorAttentionState,
    config: &AttentionConfig,
) -> Result<Tensor> {
    Ok(evaluate_attention(x, state, config, AttentionKind::Vanilla)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn grid_corners_and_degenerate_axis() {
        let g = make_grid(2, 2).unwrap();
        let p = g.points.data();
        // (x, y) at (0,0), (0,1), (1,0), (1,1)
        assert_eq!((p[0], p[4]), (-1.0, -1.0));
        assert_eq!((p[1], p[5]), (1.0, -1.0));
        assert_eq!((p[2], p[6]), (-1.0, 1.0));
        assert_eq!((p[3], p[7]), (1.0, 1.0));

        let g = make_grid(3, 3).unwrap();
        assert_eq!((g.points.data()[4], g.points.data()[9 + 4]), (0.0, 0.0));

        let g = make_grid(1, 3).unwrap();
        assert_eq!(&g.points.data()[..3], &[-1.0, 0.0, 1.0]);
        assert_eq!(&g.points.data()[3..], &[0.0, 0.0, 0.0]);
        assert!(make_grid(0, 3).is_err());
    }

    #[test]
    fn sampling_identity_grid_is_exact() {
        for (h, w) in [(1, 1), (3, 5), (7, 4), (16, 16)] {
            let x = random_map(3, h, w, 1);
            let g = make_grid(h, w).unwrap();
            assert_eq!(bilinear_sample(&x, &g.points).unwrap(), x);
        }
    }

    #[test]
    fn sampling_constant_field() {
        let x = Tensor::full(&[2, 4, 5], 0.37);
        let coords = random_map(2, 3, 3, 2).map(|v| v * 1.5);
        let out = bilinear_sample(&x, &coords).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn sampling_centre_of_2x2() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let c = Tensor::from_vec(&[2, 1, 1], vec![0.0, 0.0]).unwrap();
        assert_eq!(bilinear_sample(&x, &c).unwrap().data(), &[1.5]);
        let bad = Tensor::from_vec(&[2, 1, 1], vec![f64::NAN, 0.0]).unwrap();
        assert!(bilinear_sample(&x, &bad).is_err());
    }

    #[test]
    fn coordinate_module_identities() {
        let cfg = AttentionConfig::new(4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut state = CoorAttentionState::init(&cfg, &mut rng).unwrap();
        let x = random_map(4, 5, 6, 4);
        let grid = make_grid(5, 6).unwrap();
        let (sampled, coords) = coordinate_module(&x, &state, &grid, 0.25).unwrap();
        assert_eq!(sampled, x);
        assert_eq!(coords, grid.points);

        state.offset_head = LinearMap::random(2, 4, &mut rng);
        let (gated, _) = coordinate_module(&x, &state, &grid, 0.0).unwrap();
        assert_eq!(gated, x);
        let (moved, coords) = coordinate_module(&x, &state, &grid, 0.25).unwrap();
        assert_ne!(moved, x);
        assert!(coords.data().iter().all(|c| (-1.0..=1.0).contains(c)));

        let flat = Tensor::full(&[4, 5, 6], -0.8);
        let (still, _) = coordinate_module(&flat, &state, &grid, 0.25).unwrap();
        assert!(still.data().iter().all(|v| (v + 0.8).abs() < 1e-15));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = AttentionConfig::new(8, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state = CoorAttentionState::init(&cfg, &mut rng).unwrap();
        state.offset_head = LinearMap::random(2, 8, &mut rng);
        let res = evaluate_attention(&random_map(8, 4, 5, 6), &state, &cfg, AttentionKind::Coordinated)
            .unwrap();
        assert_eq!(res.weights.len(), 4 * 20 * 20);
        for row in res.weights.chunks(20) {
            assert!(row.iter().all(|p| *p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_input_attends_uniformly() {
        let cfg = AttentionConfig::new(4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let state = CoorAttentionState::init(&cfg, &mut rng).unwrap();
        let x = Tensor::from_fn(&[4, 3, 3], |i| (i / 9) as f64 * 0.3 - 0.2);
        let res = evaluate_attention(&x, &state, &cfg, AttentionKind::Coordinated).unwrap();
        assert!(res.weights.iter().all(|p| (p - 1.0 / 9.0).abs() < 1e-6));
    }

    #[test]
    fn zero_offsets_match_vanilla_bitwise() {
        let cfg = AttentionConfig::new(8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let state = CoorAttentionState::init(&cfg, &mut rng).unwrap();
        let x = random_map(8, 6, 6, 9);
        assert_eq!(
            structure_aware_attention(&x, &state, &cfg).unwrap(),
            vanilla_attention(&x, &state, &cfg).unwrap()
        );
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(AttentionConfig::new(6, 4).is_err());
        let cfg = AttentionConfig {
            channels: 6,
            heads: 4,
            offset_scale: 0.25,
        };
        let state = CoorAttentionState {
            proj_q: LinearMap::zeros(6, 6),
            proj_k: LinearMap::zeros(6, 6),
            proj_v: LinearMap::zeros(6, 6),
            proj_out: LinearMap::zeros(6, 6),
            offset_head: LinearMap::zeros(2, 6),
        };
        assert!(matches!(
            structure_aware_attention(&Tensor::zeros(&[6, 2, 2]), &state, &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn transposing_input_transposes_output() {
        let cfg = AttentionConfig::new(4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut state = CoorAttentionState::init(&cfg, &mut rng).unwrap();
        // identical x/y rows keep the offsets symmetric under transposition
        let row = LinearMap::random(1, 4, &mut rng);
        let mut w = row.weight.data().to_vec();
        w.extend_from_slice(row.weight.data());
        state.offset_head = LinearMap {
            weight: Tensor::from_vec(&[2, 4], w).unwrap(),
            bias: Some(Tensor::from_vec(&[2], vec![0.1, 0.1]).unwrap()),
        };
        let n = 5;
        let x = random_map(4, n, n, 11);
        let xt = transpose(&x, n);
        let out = structure_aware_attention(&x, &state, &cfg).unwrap();
        let out_t = structure_aware_attention(&xt, &state, &cfg).unwrap();
        for (a, b) in transpose(&out, n).data().iter().zip(out_t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn transpose(x: &Tensor, n: usize) -> Tensor {
        let c = x.shape()[0];
        Tensor::from_fn(&[c, n, n], |i| {
            let (ch, s) = (i / (n * n), i % (n * n));
            x.data()[ch * n * n + (s % n) * n + s / n]
        })
    }
}
