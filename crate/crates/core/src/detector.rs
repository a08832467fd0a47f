//! Encoder–decoder heatmap detector.
//!
//! A stride-2 stem and `stages` stride-2 convolution blocks form the
//! encoder. The decoder walks back up from the deepest level; at each level
//! it applies coordinate-attention transformer blocks, upsamples, fuses the
//! matching skip connection with a convolution block, and re-weights the
//! result with channel and spatial attention gates. A last block at full
//! resolution sees the input image again before the per-landmark 1×1 head
//! and sigmoid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    make_grid, record_attention, AttentionConfig, AttentionKind, AttentionVars, CoordinateGrid,
    DEFAULT_OFFSET_SCALE,
};
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Initial foreground probability of the head (sets the head bias).
pub const HEAD_PRIOR: f64 = 0.05;
/// Channel-attention bottleneck ratio.
pub const GATE_REDUCTION: usize = 4;
pub const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub stages: usize,
    pub base_channels: usize,
    /// Transformer blocks per decoder stage, deepest first.
    pub blocks_per_stage: Vec<usize>,
    /// Attention heads per decoder stage, deepest first.
    pub heads_per_stage: Vec<usize>,
    /// Feed-forward hidden width as a multiple of the channel count.
    pub expansion: f64,
    pub num_landmarks: usize,
    /// `(height, width)` of network input.
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub offset_scale: f64,
    /// Attention used by [`predict`]; [`forward`] and [`forward_vanilla`]
    /// choose explicitly.
    pub attention: AttentionKind,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl DetectorConfig {
    /// 64×64 grayscale input, 4 landmarks, 4 stages of width 8..64.
    pub fn toy() -> Self {
        Self {
            stages: 4,
            base_channels: 8,
            blocks_per_stage: vec![1; 4],
            heads_per_stage: vec![8, 4, 2, 1],
            expansion: 4.0,
            num_landmarks: 4,
            input_size: (64, 64),
            in_channels: 1,
            offset_scale: DEFAULT_OFFSET_SCALE,
            attention: AttentionKind::Coordinated,
        }
    }

    /// Two-stage 8×8 network small enough for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            stages: 2,
            base_channels: 4,
            blocks_per_stage: vec![1, 1],
            heads_per_stage: vec![2, 1],
            expansion: 2.0,
            num_landmarks: 2,
            input_size: (8, 8),
            in_channels: 1,
            offset_scale: DEFAULT_OFFSET_SCALE,
            attention: AttentionKind::Coordinated,
        }
    }

    pub fn stem_channels(&self) -> usize {
        (self.base_channels / 2).max(1)
    }

    /// Output channels of encoder stages `1..=stages`.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.stages).map(|s| self.base_channels << s).collect()
    }

    /// Transformer widths of the decoder stages, deepest first.
    pub fn decoder_channels(&self) -> Vec<usize> {
        let mut c = self.encoder_channels();
        c.reverse();
        c
    }

    /// Input-resolution divisor every side must satisfy.
    pub fn size_divisor(&self) -> usize {
        1 << (self.stages + 1)
    }

    fn ffn_width(&self, channels: usize) -> usize {
        ((self.expansion * channels as f64).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.stages > 8 {
            return Err(invalid_config(format!("stages must be 1..=8, got {}", self.stages)));
        }
        if self.base_channels == 0 || self.num_landmarks == 0 || self.in_channels == 0 {
            return Err(invalid_config(
                "base_channels, num_landmarks and in_channels must be >= 1",
            ));
        }
        if self.blocks_per_stage.len() != self.stages || self.heads_per_stage.len() != self.stages
        {
            return Err(invalid_config(format!(
                "blocks_per_stage and heads_per_stage need {} entries, got {} and {}",
                self.stages,
                self.blocks_per_stage.len(),
                self.heads_per_stage.len()
            )));
        }
        for (c, h) in self.decoder_channels().iter().zip(&self.heads_per_stage) {
            if *h == 0 || c % h != 0 {
                return Err(invalid_config(format!(
                    "{c} decoder channels not divisible into {h} heads"
                )));
            }
        }
        if !(self.expansion.is_finite() && self.expansion > 0.0) {
            return Err(invalid_config(format!("expansion must be > 0, got {}", self.expansion)));
        }
        if !(0.0..=1.0).contains(&self.offset_scale) {
            return Err(invalid_config(format!(
                "offset_scale must be in [0, 1], got {}",
                self.offset_scale
            )));
        }
        let (h, w) = self.input_size;
        let d = self.size_divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(invalid_config(format!(
                "input size {h}x{w} must be a positive multiple of {d}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvBlockIdx {
    conv: ConvIdx,
    bn: BnIdx,
}

#[derive(Clone, Copy, Debug)]
struct LinIdx {
    w: usize,
    b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct LnIdx {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug)]
struct TransformerIdx {
    ln1: LnIdx,
    /// q, k, v, out, offset
    attn: [LinIdx; 5],
    ln2: LnIdx,
    ffn1: LinIdx,
    ffn2: LinIdx,
}

#[derive(Clone, Debug)]
struct DecoderIdx {
    blocks: Vec<TransformerIdx>,
    attention: AttentionConfig,
    grid: CoordinateGrid,
    fuse: ConvBlockIdx,
    gate1: LinIdx,
    gate2: LinIdx,
    spatial: ConvIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ConvBlockIdx,
    encoder: Vec<ConvBlockIdx>,
    decoder: Vec<DecoderIdx>,
    last: ConvBlockIdx,
    head: ConvIdx,
    batch_norms: Vec<BnIdx>,
}

enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
    batch_norms: Vec<BnIdx>,
}

impl Builder {
    fn tensor(&mut self, shape: &[usize], init: Init) -> Tensor {
        match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Const(v) => Tensor::full(shape, v),
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| normal.sample(rng))
            }
        }
    }

    fn param(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let value = self.tensor(shape, init);
        self.params.push(NamedTensor { name, value });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let value = self.tensor(shape, init);
        self.buffers.push(NamedTensor { name, value });
        self.buffers.len() - 1
    }

    fn conv(&mut self, name: &str, ci: usize, co: usize, k: usize, stride: usize, bias: bool) -> ConvIdx {
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        let w = self.param(format!("{name}.weight"), &[co, ci, k, k], Init::Normal(std));
        let b = bias.then(|| self.param(format!("{name}.bias"), &[co], Init::Zeros));
        ConvIdx {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn conv_block(&mut self, name: &str, ci: usize, co: usize, stride: usize) -> ConvBlockIdx {
        let conv = self.conv(&format!("{name}.conv"), ci, co, 3, stride, false);
        let bn = BnIdx {
            gamma: self.param(format!("{name}.bn.gamma"), &[co], Init::Const(1.0)),
            beta: self.param(format!("{name}.bn.beta"), &[co], Init::Zeros),
            mean: self.buffer(format!("{name}.bn.running_mean"), &[co], Init::Zeros),
            var: self.buffer(format!("{name}.bn.running_var"), &[co], Init::Const(1.0)),
        };
        self.batch_norms.push(bn);
        ConvBlockIdx { conv, bn }
    }

    fn linear(&mut self, name: &str, ci: usize, co: usize, init: Init) -> LinIdx {
        LinIdx {
            w: self.param(format!("{name}.weight"), &[co, ci], init),
            b: Some(self.param(format!("{name}.bias"), &[co], Init::Zeros)),
        }
    }

    fn dense(&mut self, name: &str, ci: usize, co: usize) -> LinIdx {
        self.linear(name, ci, co, Init::Normal(1.0 / (ci as f64).sqrt()))
    }

    fn dense_unbiased(&mut self, name: &str, ci: usize, co: usize) -> LinIdx {
        let std = 1.0 / (ci as f64).sqrt();
        LinIdx {
            w: self.param(format!("{name}.weight"), &[co, ci], Init::Normal(std)),
            b: None,
        }
    }

    fn layer_norm(&mut self, name: &str, c: usize) -> LnIdx {
        LnIdx {
            gamma: self.param(format!("{name}.gamma"), &[c], Init::Const(1.0)),
            beta: self.param(format!("{name}.beta"), &[c], Init::Zeros),
        }
    }

    fn transformer(&mut self, name: &str, c: usize, hidden: usize) -> TransformerIdx {
        let ln1 = self.layer_norm(&format!("{name}.norm1"), c);
        let attn = [
            self.dense(&format!("{name}.attn.query"), c, c),
            self.dense_unbiased(&format!("{name}.attn.key"), c, c),
            self.dense(&format!("{name}.attn.value"), c, c),
            self.dense(&format!("{name}.attn.out"), c, c),
            self.linear(&format!("{name}.attn.offset"), c, 2, Init::Zeros),
        ];
        let ln2 = self.layer_norm(&format!("{name}.norm2"), c);
        let ffn1 = self.dense(&format!("{name}.ffn.expand"), c, hidden);
        let ffn2 = self.dense(&format!("{name}.ffn.project"), hidden, c);
        TransformerIdx {
            ln1,
            attn,
            ln2,
            ffn1,
            ffn2,
        }
    }
}

fn build_layout(config: &DetectorConfig, builder: &mut Builder) -> Result<Layout> {
    let enc = config.encoder_channels();
    let dec = config.decoder_channels();
    let c0 = config.stem_channels();
    let (h, w) = config.input_size;

    let stem = builder.conv_block("stem", config.in_channels, c0, 2);
    let mut encoder = Vec::with_capacity(config.stages);
    let mut prev = c0;
    for (s, &c) in enc.iter().enumerate() {
        encoder.push(builder.conv_block(&format!("encoder.{s}"), prev, c, 2));
        prev = c;
    }

    let mut decoder = Vec::with_capacity(config.stages);
    for j in 0..config.stages {
        let c = dec[j];
        // decoder stage j runs at encoder level `stages - j` (stem = level 0)
        let level = config.stages - j;
        let (lh, lw) = (h >> (level + 1), w >> (level + 1));
        let skip = if level == 1 { c0 } else { enc[level - 2] };
        let out = dec.get(j + 1).copied().unwrap_or(config.base_channels);
        let hidden = config.ffn_width(c);
        let blocks = (0..config.blocks_per_stage[j])
            .map(|b| builder.transformer(&format!("decoder.{j}.block.{b}"), c, hidden))
            .collect();
        let fuse = builder.conv_block(&format!("decoder.{j}.fuse"), c + skip, out, 1);
        let squeeze = (out / GATE_REDUCTION).max(1);
        let gate1 = builder.dense(&format!("decoder.{j}.channel_gate.squeeze"), out, squeeze);
        let gate2 = builder.dense(&format!("decoder.{j}.channel_gate.excite"), squeeze, out);
        let spatial = builder.conv(
            &format!("decoder.{j}.spatial_gate"),
            2,
            1,
            SPATIAL_KERNEL,
            1,
            true,
        );
        decoder.push(DecoderIdx {
            blocks,
            attention: AttentionConfig {
                channels: c,
                heads: config.heads_per_stage[j],
                offset_scale: config.offset_scale,
            },
            grid: make_grid(lh, lw)?,
            fuse,
            gate1,
            gate2,
            spatial,
        });
    }

    let last = builder.conv_block(
        "last",
        config.base_channels + config.in_channels,
        config.base_channels,
        1,
    );
    let head = builder.conv("head", config.base_channels, config.num_landmarks, 1, 1, true);
    let prior_logit = (HEAD_PRIOR / (1.0 - HEAD_PRIOR)).ln();
    builder.params[head.b.expect("head has a bias")].value =
        Tensor::full(&[config.num_landmarks], prior_logit);
    Ok(Layout {
        stem,
        encoder,
        decoder,
        last,
        head,
        batch_norms: std::mem::take(&mut builder.batch_norms),
    })
}

/// All learnable parameters plus batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct DetectorState {
    config: DetectorConfig,
    seed: u64,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
    layout: Layout,
}

impl PartialEq for DetectorState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.seed == other.seed
            && self.params == other.params
            && self.buffers == other.buffers
    }
}

/// Initializes a detector deterministically from `seed`.
pub fn build(config: &DetectorConfig, seed: u64) -> Result<DetectorState> {
    config.validate()?;
    let mut builder = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Vec::new(),
        buffers: Vec::new(),
        batch_norms: Vec::new(),
    };
    let layout = build_layout(config, &mut builder)?;
    Ok(DetectorState {
        config: config.clone(),
        seed,
        params: builder.params,
        buffers: builder.buffers,
        layout,
    })
}

impl DetectorState {
    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    /// Non-learned state (batch-norm running statistics).
    pub fn buffers(&self) -> &[NamedTensor] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.buffers
    }

    /// Number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .chain(&self.buffers)
            .all(|p| p.value.all_finite())
    }

    /// Replaces parameters and buffers with `values`, matched by name.
    /// Every tensor must be present with its exact shape.
    pub fn load_named(&mut self, values: &[NamedTensor]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor> =
            values.iter().map(|t| (t.name.as_str(), &t.value)).collect();
        for slot in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            let v = lookup
                .get(slot.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{}'", slot.name)))?;
            if v.shape() != slot.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    slot.name,
                    v.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = (*v).clone();
        }
        if lookup.len() != self.params.len() + self.buffers.len() {
            return Err(Error::Checkpoint("unexpected extra tensors".into()));
        }
        Ok(())
    }

    /// Sets every attention offset head to zero.
    pub fn zero_offsets(&mut self) {
        for p in &mut self.params {
            if p.name.contains(".attn.offset.") {
                p.value.data_mut().fill(0.0);
            }
        }
    }

    /// Folds the batch statistics recorded by a training-mode pass into the
    /// running averages.
    pub fn update_running_stats(&mut self, tape: &Tape, recorded: &Recorded) {
        for (bn, node) in self.layout.batch_norms.iter().zip(&recorded.batch_norms) {
            let Some(stats) = tape.batch_stats(*node) else { continue };
            let unbias = if stats.count > 1 {
                stats.count as f64 / (stats.count - 1) as f64
            } else {
                1.0
            };
            let mean = self.buffers[bn.mean].value.data_mut();
            for (m, b) in mean.iter_mut().zip(&stats.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
            }
            let var = self.buffers[bn.var].value.data_mut();
            for (v, b) in var.iter_mut().zip(&stats.var) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b * unbias;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Handles produced by [`record`].
#[derive(Clone, Debug)]
pub struct Recorded {
    /// Heatmaps `[N, L, H, W]` in `(0, 1)`.
    pub output: Var,
    /// One leaf per entry of [`DetectorState::params`].
    pub params: Vec<Var>,
    batch_norms: Vec<Var>,
}

struct Recorder<'a> {
    tape: &'a mut Tape,
    state: &'a DetectorState,
    leaves: Vec<Var>,
    mode: Mode,
    batch_norms: Vec<Var>,
}

impl Recorder<'_> {
    fn p(&self, i: usize) -> Var {
        self.leaves[i]
    }

    fn conv(&mut self, x: Var, c: &ConvIdx) -> Var {
        let b = c.b.map(|b| self.p(b));
        self.tape.conv2d(x, self.p(c.w), b, c.stride, c.pad)
    }

    fn conv_block(&mut self, x: Var, blk: &ConvBlockIdx) -> Var {
        let y = self.conv(x, &blk.conv);
        let bn = &blk.bn;
        let running = match self.mode {
            Mode::Train => None,
            Mode::Eval => Some((
                self.state.buffers[bn.mean].value.data(),
                self.state.buffers[bn.var].value.data(),
            )),
        };
        let y = self
            .tape
            .batch_norm(y, self.p(bn.gamma), self.p(bn.beta), BN_EPS, running);
        self.batch_norms.push(y);
        self.tape.relu(y)
    }

    fn linear(&mut self, x: Var, l: &LinIdx) -> Var {
        self.tape.linear(x, self.p(l.w), l.b.map(|b| self.p(b)))
    }

    fn transformer(
        &mut self,
        tokens: Var,
        batch: usize,
        blk: &TransformerIdx,
        stage: &DecoderIdx,
        kind: AttentionKind,
    ) -> Var {
        let normed = self
            .tape
            .layer_norm(tokens, self.p(blk.ln1.gamma), self.p(blk.ln1.beta), LN_EPS);
        let pair = |l: &LinIdx| (self.p(l.w), l.b.map(|b| self.p(b)));
        let vars = AttentionVars {
            q: pair(&blk.attn[0]),
            k: pair(&blk.attn[1]),
            v: pair(&blk.attn[2]),
            out: pair(&blk.attn[3]),
            offset: pair(&blk.attn[4]),
        };
        let attn = record_attention(
            self.tape,
            normed,
            batch,
            &stage.grid,
            &vars,
            &stage.attention,
            kind,
        );
        let tokens = self.tape.add(tokens, attn.output);
        let normed = self
            .tape
            .layer_norm(tokens, self.p(blk.ln2.gamma), self.p(blk.ln2.beta), LN_EPS);
        let hidden = self.linear(normed, &blk.ffn1);
        let hidden = self.tape.gelu(hidden);
        let ffn = self.linear(hidden, &blk.ffn2);
        self.tape.add(tokens, ffn)
    }

    fn gates(&mut self, x: Var, stage: &DecoderIdx) -> Var {
        let pooled = self.tape.avg_pool(x);
        let squeezed = self.linear(pooled, &stage.gate1);
        let squeezed = self.tape.relu(squeezed);
        let excited = self.linear(squeezed, &stage.gate2);
        let channel = self.tape.sigmoid(excited);
        let x = self.tape.channel_gate(x, channel);
        let summary = self.tape.mean_max(x);
        let spatial = self.conv(summary, &stage.spatial);
        let spatial = self.tape.sigmoid(spatial);
        self.tape.spatial_gate(x, spatial)
    }
}

fn check_batch(config: &DetectorConfig, images: &Tensor) -> Result<()> {
    let (h, w) = config.input_size;
    let shape = images.shape();
    if shape.len() != 4 || shape[0] == 0 || shape[1..] != [config.in_channels, h, w] {
        return Err(invalid_input(format!(
            "expected images [N, {}, {h}, {w}], got {shape:?}",
            config.in_channels
        )));
    }
    if !images.all_finite() {
        return Err(invalid_input("non-finite pixel values"));
    }
    Ok(())
}

/// Records a forward pass over `images: [N, C, H, W]` on `tape`.
pub fn record(
    tape: &mut Tape,
    state: &DetectorState,
    images: &Tensor,
    mode: Mode,
    kind: AttentionKind,
) -> Result<Recorded> {
    check_batch(&state.config, images)?;
    let n = images.shape()[0];
    let leaves = state
        .params
        .iter()
        .map(|p| tape.param(p.value.clone()))
        .collect();
    let layout = &state.layout;
    let mut r = Recorder {
        tape,
        state,
        leaves,
        mode,
        batch_norms: Vec::with_capacity(layout.batch_norms.len()),
    };
    let input = r.tape.constant(images.clone());
    let stem = r.conv_block(input, &layout.stem);
    let mut skips = vec![stem];
    for blk in &layout.encoder {
        let next = r.conv_block(*skips.last().expect("non-empty"), blk);
        skips.push(next);
    }

    let mut x = skips.pop().expect("deepest level");
    for stage in &layout.decoder {
        if !stage.blocks.is_empty() {
            let mut tokens = r.tape.to_tokens(x);
            for blk in &stage.blocks {
                tokens = r.transformer(tokens, n, blk, stage, kind);
            }
            x = r.tape.from_tokens(tokens, n, stage.grid.height, stage.grid.width);
        }
        let up = r.tape.upsample2(x);
        let skip = skips.pop().expect("one skip per decoder stage");
        let merged = r.tape.concat(up, skip);
        let fused = r.conv_block(merged, &stage.fuse);
        x = r.gates(fused, stage);
    }

    let up = r.tape.upsample2(x);
    let merged = r.tape.concat(up, input);
    let feat = r.conv_block(merged, &layout.last);
    let logits = r.conv(feat, &layout.head);
    let output = r.tape.sigmoid(logits);
    Ok(Recorded {
        output,
        params: r.leaves,
        batch_norms: r.batch_norms,
    })
}

/// Heatmaps `[N, L, H, W]` for a batch of images.
pub fn forward_batch(
    state: &DetectorState,
    images: &Tensor,
    mode: Mode,
    kind: AttentionKind,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let rec = record(&mut tape, state, images, mode, kind)?;
    Ok(tape.value(rec.output).clone())
}

fn single(state: &DetectorState, image: &Tensor, kind: AttentionKind) -> Result<Tensor> {
    if image.shape().len() != 3 {
        return Err(invalid_input(format!(
            "expected an image [C, H, W], got {:?}",
            image.shape()
        )));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let out = forward_batch(state, &image.clone().reshape(&shape)?, Mode::Eval, kind)?;
    Ok(out.select(0))
}

/// Inference-mode heatmaps `[L, H, W]` for one image `[C, H, W]`, with
/// coordinate attention.
pub fn forward(state: &DetectorState, image: &Tensor) -> Result<Tensor> {
    single(state, image, AttentionKind::Coordinated)
}

/// As [`forward`] but with plain self-attention in every transformer block.
pub fn forward_vanilla(state: &DetectorState, image: &Tensor) -> Result<Tensor> {
    single(state, image, AttentionKind::Vanilla)
}

/// Inference with the attention kind the detector was configured with.
pub fn predict(state: &DetectorState, image: &Tensor) -> Result<Tensor> {
    single(state, image, state.config.attention)
}
