//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node that
//! depends on a trainable leaf.
//!
//! Operations are coarse-grained (a whole convolution, a whole multi-head
//! attention) so that each backward rule is a handful of matrix products.

use crate::tensor::{gemm, gemm_strided, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics recorded by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over the batch and spatial positions.
    pub var: Vec<f64>,
    /// Number of values each statistic was computed from.
    pub count: usize,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        stats: Option<BatchStats>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Add(Var, Var),
    ChannelGate {
        x: Var,
        gate: Var,
    },
    SpatialGate {
        x: Var,
        gate: Var,
    },
    Concat(Var, Var),
    Upsample2(Var),
    AvgPool(Var),
    MeanMax {
        x: Var,
        argmax: Vec<u32>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ToTokens(Var),
    FromTokens {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        tokens: usize,
        probs: Vec<f64>,
    },
    OffsetCoords {
        raw: Var,
        scale: f64,
    },
    GridSample {
        x: Var,
        coords: Var,
    },
    FieldLoss {
        pred: Var,
        grad: Tensor,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batch statistics of a training-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    /// Softmax attention weights of an attention node, laid out as
    /// `[batch, heads, tokens, tokens]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    /// 2-D convolution, `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, ci, h, wd) = xv.dims4();
        let (co, wci, k, k2) = wv.dims4();
        assert_eq!(ci, wci, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d expects square kernels");
        let geo = ConvGeom::new(ci, h, wd, k, stride, pad);
        let hw = geo.ho * geo.wo;
        let mut out = Tensor::zeros(&[n, co, geo.ho, geo.wo]);
        let mut col = vec![0.0; geo.rows() * hw];
        for bi in 0..n {
            let xb = &xv.data()[bi * ci * h * wd..(bi + 1) * ci * h * wd];
            let cols = geo.im2col(xb, &mut col);
            let ob = &mut out.data_mut()[bi * co * hw..(bi + 1) * co * hw];
            gemm(co, geo.rows(), hw, wv.data(), false, cols, false, ob, 0.0);
            if let Some(b) = b {
                let bv = self.nodes[b.0].value.data();
                for (c, row) in ob.chunks_mut(hw).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[c]);
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &parents,
        )
    }

    /// Batch normalization over `N, H, W` per channel.
    ///
    /// With `running = Some((mean, var))` the given statistics are used as
    /// constants (inference mode); otherwise the batch statistics are used
    /// and recorded on the node.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let count = n * hw;
        let (mean, var, stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for bi in 0..n {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let s = &xv.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                        *m += s.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for bi in 0..n {
                    for ch in 0..c {
                        let s = &xv.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                        var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                let src = &xv.data()[off..off + hw];
                let dst = &mut out.data_mut()[off..off + hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = g[ch] * (s - mean[ch]) * inv_std[ch] + be[ch];
                }
            }
        }
        let stats = stats.then(|| BatchStats {
            mean: mean.clone(),
            var,
            count,
        });
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Layer normalization over the last axis of a `[M, C]` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (m, c) = xv.dims2();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = Tensor::zeros(&[m, c]);
        let mut means = Vec::with_capacity(m);
        let mut inv = Vec::with_capacity(m);
        for (row, dst) in xv.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                dst[j] = g[j] * (row[j] - mean) * is + be[j];
            }
            means.push(mean);
            inv.push(is);
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                inv_std: inv,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu(v).0);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// `x: [N, C, H, W]` scaled per channel by `gate: [N, C]`.
    pub fn channel_gate(&mut self, x: Var, gate: Var) -> Var {
        let xv = self.value(x);
        let gv = self.value(gate);
        let (n, c, h, w) = xv.dims4();
        assert_eq!(gv.shape(), &[n, c]);
        let hw = h * w;
        let mut out = xv.clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let g = gv.data()[i];
            chunk.iter_mut().for_each(|v| *v *= g);
        }
        self.push(out, Op::ChannelGate { x, gate }, &[x, gate])
    }

    /// `x: [N, C, H, W]` scaled per position by `gate: [N, 1, H, W]`.
    pub fn spatial_gate(&mut self, x: Var, gate: Var) -> Var {
        let xv = self.value(x);
        let gv = self.value(gate);
        let (n, c, h, w) = xv.dims4();
        assert_eq!(gv.shape(), &[n, 1, h, w]);
        let hw = h * w;
        let mut out = xv.clone();
        for bi in 0..n {
            let g = &gv.data()[bi * hw..(bi + 1) * hw];
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for (v, gg) in out.data_mut()[off..off + hw].iter_mut().zip(g) {
                    *v *= gg;
                }
            }
        }
        self.push(out, Op::SpatialGate { x, gate }, &[x, gate])
    }

    /// Channel concatenation of two `[N, _, H, W]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, ca, h, w) = av.dims4();
        let (nb, cb, hb, wb) = bv.dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for bi in 0..n {
            data.extend_from_slice(&av.data()[bi * ca * hw..(bi + 1) * ca * hw]);
            data.extend_from_slice(&bv.data()[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let out = Tensor::from_vec(&[n, ca + cb, h, w], data).expect("concat size");
        self.push(out, Op::Concat(a, b), &[a, b])
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        for (plane, dst) in xv
            .data()
            .chunks(h * w)
            .zip(out.data_mut().chunks_mut(4 * h * w))
        {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, Op::Upsample2(x), &[x])
    }

    /// Global average pool `[N, C, H, W] -> [N, C]`.
    pub fn avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = (h * w) as f64;
        let data = xv.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        let out = Tensor::from_vec(&[n, c], data).expect("pool size");
        self.push(out, Op::AvgPool(x), &[x])
    }

    /// Channel-wise mean and max, `[N, C, H, W] -> [N, 2, H, W]`.
    pub fn mean_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, 2, h, w]);
        let mut argmax = vec![0u32; n * hw];
        for bi in 0..n {
            for s in 0..hw {
                let mut sum = 0.0;
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for ch in 0..c {
                    let v = xv.data()[(bi * c + ch) * hw + s];
                    sum += v;
                    if v > best {
                        best = v;
                        arg = ch;
                    }
                }
                out.data_mut()[bi * 2 * hw + s] = sum / c as f64;
                out.data_mut()[(bi * 2 + 1) * hw + s] = best;
                argmax[bi * hw + s] = arg as u32;
            }
        }
        self.push(out, Op::MeanMax { x, argmax }, &[x])
    }

    /// Affine map of rows, `x: [M, Ci]`, `w: [Co, Ci]`, `b: [Co]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (m, ci) = xv.dims2();
        let (co, wci) = wv.dims2();
        assert_eq!(ci, wci, "linear input mismatch");
        let mut out = Tensor::zeros(&[m, co]);
        gemm(m, ci, co, xv.data(), false, wv.data(), true, out.data_mut(), 0.0);
        if let Some(b) = b {
            let bv = self.nodes[b.0].value.data();
            for row in out.data_mut().chunks_mut(co) {
                row.iter_mut().zip(bv).for_each(|(v, bb)| *v += bb);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(out, Op::Linear { x, w, b }, &parents)
    }

    /// `[N, C, H, W] -> [N*H*W, C]`, tokens in row-major spatial order.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n * hw, c]);
        for bi in 0..n {
            for ch in 0..c {
                for s in 0..hw {
                    out.data_mut()[(bi * hw + s) * c + ch] = xv.data()[(bi * c + ch) * hw + s];
                }
            }
        }
        self.push(out, Op::ToTokens(x), &[x])
    }

    /// Inverse of [`Tape::to_tokens`].
    pub fn from_tokens(&mut self, x: Var, n: usize, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let (m, c) = xv.dims2();
        assert_eq!(m, n * h * w, "token count mismatch");
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for bi in 0..n {
            for s in 0..hw {
                for ch in 0..c {
                    out.data_mut()[(bi * c + ch) * hw + s] = xv.data()[(bi * hw + s) * c + ch];
                }
            }
        }
        self.push(out, Op::FromTokens { x }, &[x])
    }

    /// Multi-head scaled dot-product attention over `tokens` positions per
    /// batch item. `q`, `k`, `v` are `[batch*tokens, C]`; each head uses a
    /// contiguous block of `C / heads` channels.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, batch: usize) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (m, c) = qv.dims2();
        assert_eq!(kv.dims2(), (m, c));
        assert_eq!(vv.dims2(), (m, c));
        assert_eq!(c % heads, 0, "channels not divisible by heads");
        assert_eq!(m % batch, 0);
        let t = m / batch;
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Tensor::zeros(&[m, c]);
        let mut probs = vec![0.0; batch * heads * t * t];
        for bi in 0..batch {
            for hd in 0..heads {
                let off = bi * t * c + hd * d;
                let p = &mut probs[(bi * heads + hd) * t * t..(bi * heads + hd + 1) * t * t];
                gemm_strided(
                    t,
                    d,
                    t,
                    &qv.data()[off..],
                    c,
                    1,
                    &kv.data()[off..],
                    1,
                    c,
                    p,
                    t,
                    1,
                    0.0,
                );
                for row in p.chunks_mut(t) {
                    softmax_row(row, scale);
                }
                gemm_strided(
                    t,
                    t,
                    d,
                    p,
                    t,
                    1,
                    &vv.data()[off..],
                    c,
                    1,
                    &mut out.data_mut()[off..],
                    c,
                    1,
                    0.0,
                );
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                tokens: t,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Sampling coordinates `grid + scale * tanh(raw)`.
    ///
    /// `raw` is `[N*H*W, 2]` (per-token x/y offsets), `grid` is `[2, H, W]`;
    /// the result is `[N, 2, H, W]`.
    pub fn offset_coords(&mut self, raw: Var, grid: &Tensor, scale: f64) -> Var {
        let rv = self.value(raw);
        let (m, two) = rv.dims2();
        assert_eq!(two, 2);
        let (h, w) = (grid.shape()[1], grid.shape()[2]);
        let hw = h * w;
        assert_eq!(m % hw, 0);
        let n = m / hw;
        let mut out = Tensor::zeros(&[n, 2, h, w]);
        for bi in 0..n {
            for axis in 0..2 {
                for s in 0..hw {
                    let delta = scale * rv.data()[(bi * hw + s) * 2 + axis].tanh();
                    out.data_mut()[(bi * 2 + axis) * hw + s] = grid.data()[axis * hw + s] + delta;
                }
            }
        }
        self.push(out, Op::OffsetCoords { raw, scale }, &[raw])
    }

    /// Bilinear sampling of `x: [N, C, H, W]` at normalized coordinates
    /// `coords: [N, 2, Ho, Wo]` (channel 0 = x/column, 1 = y/row), with
    /// `-1` and `+1` at the first and last pixel centres. Coordinates are
    /// clamped to `[-1, 1]`.
    pub fn grid_sample(&mut self, x: Var, coords: Var) -> Var {
        let xv = self.value(x);
        let cv = self.value(coords);
        let (n, c, h, w) = xv.dims4();
        let (nc, two, ho, wo) = cv.dims4();
        assert_eq!((nc, two), (n, 2), "grid_sample coords must be [N, 2, H, W]");
        let ohw = ho * wo;
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        for bi in 0..n {
            for s in 0..ohw {
                let sx = SamplePos::new(cv.data()[bi * 2 * ohw + s], w);
                let sy = SamplePos::new(cv.data()[(bi * 2 + 1) * ohw + s], h);
                for ch in 0..c {
                    let plane = &xv.data()[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
                    out.data_mut()[(bi * c + ch) * ohw + s] = bilinear(plane, w, &sx, &sy);
                }
            }
        }
        self.push(out, Op::GridSample { x, coords }, &[x, coords])
    }

    /// Scalar loss node whose gradient w.r.t. `pred` was computed analytically
    /// by the caller.
    pub fn field_loss(&mut self, pred: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(self.value(pred).shape(), grad.shape());
        self.push(Tensor::scalar(value), Op::FieldLoss { pred, grad }, &[pred])
    }

    /// `sum(x * weights)` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Var {
        assert_eq!(self.value(x).len(), weights.len());
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x])
    }

    /// Back-propagates from the scalar node `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, ci, h, wd) = xv.dims4();
                let (co, _, k, _) = wv.dims4();
                let geo = ConvGeom::new(ci, h, wd, k, *stride, *pad);
                let hw = geo.ho * geo.wo;
                let rows = geo.rows();
                let mut dw = self.needs(*w).then(|| Tensor::zeros(wv.shape()));
                let mut dx = self.needs(*x).then(|| Tensor::zeros(xv.shape()));
                let mut col = vec![0.0; rows * hw];
                let mut dcol = vec![0.0; rows * hw];
                for bi in 0..n {
                    let gb = &g.data()[bi * co * hw..(bi + 1) * co * hw];
                    if let Some(dw) = dw.as_mut() {
                        let xb = &xv.data()[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                        let cols = geo.im2col(xb, &mut col);
                        gemm(co, hw, rows, gb, false, cols, true, dw.data_mut(), 1.0);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(rows, co, hw, wv.data(), true, gb, false, &mut dcol, 0.0);
                        let dxb = &mut dx.data_mut()[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                        geo.col2im(&dcol, dxb);
                    }
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = Tensor::zeros(&[co]);
                    for bi in 0..n {
                        for c in 0..co {
                            let off = (bi * co + c) * hw;
                            db.data_mut()[c] += g.data()[off..off + hw].iter().sum::<f64>();
                        }
                    }
                    accumulate(grads, b, db);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                stats,
            } => {
                let xv = self.value(*x);
                let gm = self.value(*gamma).data();
                let (n, c, h, w) = xv.dims4();
                let hw = h * w;
                let count = (n * hw) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..n {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        for s in off..off + hw {
                            let xhat = (xv.data()[s] - mean[ch]) * inv_std[ch];
                            dgamma[ch] += g.data()[s] * xhat;
                            dbeta[ch] += g.data()[s];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    for bi in 0..n {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            for s in off..off + hw {
                                let xhat = (xv.data()[s] - mean[ch]) * inv_std[ch];
                                dx.data_mut()[s] = if stats.is_some() {
                                    gm[ch] * inv_std[ch]
                                        * (g.data()[s]
                                            - dbeta[ch] / count
                                            - xhat * dgamma[ch] / count)
                                } else {
                                    gm[ch] * inv_std[ch] * g.data()[s]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma).unwrap());
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta).unwrap());
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let gm = self.value(*gamma).data();
                let (m, c) = xv.dims2();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = Tensor::zeros(&[m, c]);
                let mut dxhat = vec![0.0; c];
                for r in 0..m {
                    let row = &xv.data()[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        let xhat = (row[j] - mean[r]) * inv_std[r];
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gm[j];
                        sum_d += dxhat[j];
                        sum_dx += dxhat[j] * xhat;
                    }
                    let dst = &mut dx.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        let xhat = (row[j] - mean[r]) * inv_std[r];
                        dst[j] = inv_std[r] * (dxhat[j] - sum_d / c as f64 - xhat * sum_dx / c as f64);
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma).unwrap());
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta).unwrap());
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (1.0 - y);
                }
                accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let mut dx = g.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *d *= gelu(*v).1;
                }
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::ChannelGate { x, gate } => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                let (_, _, h, w) = xv.dims4();
                let hw = h * w;
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (i, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                        let s = gv.data()[i];
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gate) {
                    let data = g
                        .data()
                        .chunks(hw)
                        .zip(xv.data().chunks(hw))
                        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
                        .collect();
                    accumulate(grads, *gate, Tensor::from_vec(gv.shape(), data).unwrap());
                }
            }
            Op::SpatialGate { x, gate } => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                let (n, c, h, w) = xv.dims4();
                let hw = h * w;
                let mut dx = self.needs(*x).then(|| g.clone());
                let mut dg = Tensor::zeros(gv.shape());
                for bi in 0..n {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        for s in 0..hw {
                            dg.data_mut()[bi * hw + s] += g.data()[off + s] * xv.data()[off + s];
                            if let Some(dx) = dx.as_mut() {
                                dx.data_mut()[off + s] *= gv.data()[bi * hw + s];
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gate) {
                    accumulate(grads, *gate, dg);
                }
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let hw = h * w;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for bi in 0..n {
                    let base = bi * (ca + cb) * hw;
                    da.extend_from_slice(&g.data()[base..base + ca * hw]);
                    db.extend_from_slice(&g.data()[base + ca * hw..base + (ca + cb) * hw]);
                }
                if self.needs(*a) {
                    accumulate(grads, *a, Tensor::from_vec(&[n, ca, h, w], da).unwrap());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, Tensor::from_vec(&[n, cb, h, w], db).unwrap());
                }
            }
            Op::Upsample2(x) => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4();
                let mut dx = Tensor::zeros(xv.shape());
                for (src, dst) in g.data().chunks(4 * h * w).zip(dx.data_mut().chunks_mut(h * w)) {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::AvgPool(x) => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4();
                let hw = h * w;
                let mut dx = Tensor::zeros(xv.shape());
                for (i, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                    let v = g.data()[i] / hw as f64;
                    chunk.iter_mut().for_each(|d| *d = v);
                }
                accumulate(grads, *x, dx);
            }
            Op::MeanMax { x, argmax } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let hw = h * w;
                let mut dx = Tensor::zeros(xv.shape());
                for bi in 0..n {
                    for s in 0..hw {
                        let gm = g.data()[bi * 2 * hw + s] / c as f64;
                        for ch in 0..c {
                            dx.data_mut()[(bi * c + ch) * hw + s] += gm;
                        }
                        let arg = argmax[bi * hw + s] as usize;
                        dx.data_mut()[(bi * c + arg) * hw + s] += g.data()[(bi * 2 + 1) * hw + s];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (m, ci) = xv.dims2();
                let co = wv.dims2().0;
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(&[m, ci]);
                    gemm(m, co, ci, g.data(), false, wv.data(), false, dx.data_mut(), 0.0);
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(&[co, ci]);
                    gemm(co, m, ci, g.data(), true, xv.data(), false, dw.data_mut(), 0.0);
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = Tensor::zeros(&[co]);
                    for row in g.data().chunks(co) {
                        db.data_mut().iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, b, db);
                }
            }
            Op::ToTokens(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for bi in 0..n {
                    for ch in 0..c {
                        for s in 0..hw {
                            dx.data_mut()[(bi * c + ch) * hw + s] = g.data()[(bi * hw + s) * c + ch];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::FromTokens { x } => {
                let (n, c, h, w) = node.value.dims4();
                let hw = h * w;
                let mut dx = Tensor::zeros(&[n * hw, c]);
                for bi in 0..n {
                    for ch in 0..c {
                        for s in 0..hw {
                            dx.data_mut()[(bi * hw + s) * c + ch] = g.data()[(bi * c + ch) * hw + s];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                tokens,
                probs,
            } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let (m, c) = qv.dims2();
                let t = *tokens;
                let d = c / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let mut dq = Tensor::zeros(&[m, c]);
                let mut dk = Tensor::zeros(&[m, c]);
                let mut dv = Tensor::zeros(&[m, c]);
                let mut dp = vec![0.0; t * t];
                for bi in 0..*batch {
                    for hd in 0..*heads {
                        let off = bi * t * c + hd * d;
                        let p = &probs[(bi * heads + hd) * t * t..(bi * heads + hd + 1) * t * t];
                        let go = &g.data()[off..];
                        gemm_strided(t, d, t, go, c, 1, &vv.data()[off..], 1, c, &mut dp, t, 1, 0.0);
                        gemm_strided(
                            t,
                            t,
                            d,
                            p,
                            1,
                            t,
                            go,
                            c,
                            1,
                            &mut dv.data_mut()[off..],
                            c,
                            1,
                            1.0,
                        );
                        for (drow, prow) in dp.chunks_mut(t).zip(p.chunks(t)) {
                            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                            for (dd, pp) in drow.iter_mut().zip(prow) {
                                *dd = pp * (*dd - dot) * scale;
                            }
                        }
                        gemm_strided(
                            t,
                            t,
                            d,
                            &dp,
                            t,
                            1,
                            &kv.data()[off..],
                            c,
                            1,
                            &mut dq.data_mut()[off..],
                            c,
                            1,
                            1.0,
                        );
                        gemm_strided(
                            t,
                            t,
                            d,
                            &dp,
                            1,
                            t,
                            &qv.data()[off..],
                            c,
                            1,
                            &mut dk.data_mut()[off..],
                            c,
                            1,
                            1.0,
                        );
                    }
                }
                if self.needs(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.needs(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.needs(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::OffsetCoords { raw, scale } => {
                let rv = self.value(*raw);
                let (n, _, h, w) = node.value.dims4();
                let hw = h * w;
                let mut dr = Tensor::zeros(rv.shape());
                for bi in 0..n {
                    for axis in 0..2 {
                        for s in 0..hw {
                            let i = (bi * hw + s) * 2 + axis;
                            let th = rv.data()[i].tanh();
                            dr.data_mut()[i] =
                                g.data()[(bi * 2 + axis) * hw + s] * scale * (1.0 - th * th);
                        }
                    }
                }
                accumulate(grads, *raw, dr);
            }
            Op::GridSample { x, coords } => {
                let xv = self.value(*x);
                let cv = self.value(*coords);
                let (n, c, h, w) = xv.dims4();
                let (_, _, ho, wo) = cv.dims4();
                let ohw = ho * wo;
                let mut dx = self.needs(*x).then(|| Tensor::zeros(xv.shape()));
                let mut dc = self.needs(*coords).then(|| Tensor::zeros(cv.shape()));
                for bi in 0..n {
                    for s in 0..ohw {
                        let sx = SamplePos::new(cv.data()[bi * 2 * ohw + s], w);
                        let sy = SamplePos::new(cv.data()[(bi * 2 + 1) * ohw + s], h);
                        let mut gx = 0.0;
                        let mut gy = 0.0;
                        for ch in 0..c {
                            let go = g.data()[(bi * c + ch) * ohw + s];
                            let base = (bi * c + ch) * h * w;
                            if let Some(dx) = dx.as_mut() {
                                let plane = &mut dx.data_mut()[base..base + h * w];
                                scatter_bilinear(plane, w, &sx, &sy, go);
                            }
                            if dc.is_some() {
                                let plane = &xv.data()[base..base + h * w];
                                gx += go * axis_slope(plane, w, &sx, &sy, true);
                                gy += go * axis_slope(plane, w, &sy, &sx, false);
                            }
                        }
                        if let Some(dc) = dc.as_mut() {
                            dc.data_mut()[bi * 2 * ohw + s] = gx * sx.scale;
                            dc.data_mut()[(bi * 2 + 1) * ohw + s] = gy * sy.scale;
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dc) = dc {
                    accumulate(grads, *coords, dc);
                }
            }
            Op::FieldLoss { pred, grad } => {
                let s = g.data()[0];
                accumulate(grads, *pred, grad.map(|v| v * s));
            }
            Op::WeightedSum { x, weights } => {
                let s = g.data()[0];
                accumulate(grads, *x, weights.map(|v| v * s));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// GELU (tanh form) and its derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (value, deriv)
}

fn softmax_row(row: &mut [f64], scale: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)) * scale;
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v * scale - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(ci: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            ci,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is
    /// inside the image.
    fn valid_cols(&self, kx: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.w + self.pad > kx {
            ((self.w - 1 + self.pad - kx) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        lo.min(hi)..hi
    }

    /// Column matrix `[ci*k*k, ho*wo]`; pointwise convolutions reuse the input.
    fn im2col<'a>(&self, x: &'a [f64], col: &'a mut [f64]) -> &'a [f64] {
        if self.is_pointwise() {
            return x;
        }
        let hw = self.ho * self.wo;
        for c in 0..self.ci {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    let cols = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        line[..cols.start].fill(0.0);
                        line[cols.end..].fill(0.0);
                        if cols.is_empty() {
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..];
                        let ix0 = cols.start * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            line[cols.clone()].copy_from_slice(&src[ix0..ix0 + cols.len()]);
                        } else {
                            for (j, d) in line[cols.clone()].iter_mut().enumerate() {
                                *d = src[ix0 + j * self.stride];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        if self.is_pointwise() {
            dx.iter_mut().zip(col).for_each(|(d, c)| *d += c);
            return;
        }
        let hw = self.ho * self.wo;
        for c in 0..self.ci {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &col[row * hw..(row + 1) * hw];
                    let cols = self.valid_cols(kx);
                    if cols.is_empty() {
                        continue;
                    }
                    let ix0 = cols.start * self.stride + kx - self.pad;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w + ix0;
                        let line = &src[oy * self.wo + cols.start..oy * self.wo + cols.end];
                        if self.stride == 1 {
                            dx[base..base + line.len()]
                                .iter_mut()
                                .zip(line)
                                .for_each(|(d, s)| *d += s);
                        } else {
                            for (j, s) in line.iter().enumerate() {
                                dx[base + j * self.stride] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Position of a normalized coordinate along one axis of length `size`.
pub(crate) struct SamplePos {
    i0: usize,
    i1: usize,
    frac: f64,
    /// Exact grid node the coordinate sits on, if any.
    node: Option<usize>,
    /// Coordinate was outside `[-1, 1]` and got clamped.
    clamped: bool,
    size: usize,
    /// d(pixel position) / d(normalized coordinate).
    scale: f64,
}

impl SamplePos {
    pub(crate) fn new(coord: f64, size: usize) -> Self {
        let clamped = !(-1.0..=1.0).contains(&coord);
        let c = coord.clamp(-1.0, 1.0);
        if size == 1 {
            return Self {
                i0: 0,
                i1: 0,
                frac: 0.0,
                node: Some(0),
                clamped,
                size,
                scale: 0.0,
            };
        }
        let last = (size - 1) as f64;
        let mut pos = (c + 1.0) * 0.5 * last;
        let rounded = pos.round();
        let node = if (pos - rounded).abs() <= 1e-9 {
            pos = rounded;
            Some(rounded as usize)
        } else {
            None
        };
        let i0 = (pos.floor() as usize).min(size - 2);
        Self {
            i0,
            i1: i0 + 1,
            frac: pos - i0 as f64,
            node,
            clamped,
            size,
            scale: 0.5 * last,
        }
    }
}

fn bilinear(plane: &[f64], w: usize, sx: &SamplePos, sy: &SamplePos) -> f64 {
    let top = (1.0 - sx.frac) * plane[sy.i0 * w + sx.i0] + sx.frac * plane[sy.i0 * w + sx.i1];
    let bot = (1.0 - sx.frac) * plane[sy.i1 * w + sx.i0] + sx.frac * plane[sy.i1 * w + sx.i1];
    (1.0 - sy.frac) * top + sy.frac * bot
}

fn scatter_bilinear(plane: &mut [f64], w: usize, sx: &SamplePos, sy: &SamplePos, g: f64) {
    plane[sy.i0 * w + sx.i0] += g * (1.0 - sy.frac) * (1.0 - sx.frac);
    plane[sy.i0 * w + sx.i1] += g * (1.0 - sy.frac) * sx.frac;
    plane[sy.i1 * w + sx.i0] += g * sy.frac * (1.0 - sx.frac);
    plane[sy.i1 * w + sx.i1] += g * sy.frac * sx.frac;
}

/// Derivative of the bilinear sample w.r.t. the pixel position along one
/// axis (`along`), holding the other axis (`across`) fixed.
///
/// On an exact grid node the two one-sided slopes are averaged, with the
/// side beyond the field edge contributing zero (the clamp is flat there).
/// This is the value a central difference converges to.
fn axis_slope(plane: &[f64], w: usize, along: &SamplePos, across: &SamplePos, is_x: bool) -> f64 {
    if along.clamped || along.size == 1 {
        return 0.0;
    }
    let line = |i: usize| -> f64 {
        let (a, b) = if is_x {
            (plane[across.i0 * w + i], plane[across.i1 * w + i])
        } else {
            (plane[i * w + across.i0], plane[i * w + across.i1])
        };
        (1.0 - across.frac) * a + across.frac * b
    };
    match along.node {
        Some(k) => {
            let left = if k >= 1 { line(k) - line(k - 1) } else { 0.0 };
            let right = if k + 1 < along.size {
                line(k + 1) - line(k)
            } else {
                0.0
            };
            0.5 * (left + right)
        }
        None => line(along.i1) - line(along.i0),
    }
}
