//! Parameterized building blocks: causal dilated residual blocks, temporal
//! fusion, positional encoding and the cross-attention transformer layer.

use crate::autodiff::{ConvGeometry, Var};
use crate::config::FusionMode;
use crate::error::{Error, Result};
use crate::params::{Graph, Initializer, ParamId};
use crate::tensor::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Convolution kernel `[k_w × D_in × D_out]` and bias `[D_out]`.
#[derive(Clone, Debug)]
pub struct Conv1dParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Conv1dParams {
    pub fn init<F: Real>(init: &mut Initializer<'_, F>, name: &str, kernel: usize, d_in: usize, d_out: usize) -> Self {
        assert!(kernel >= 1, "kernel width must be at least 1");
        let fan_in = kernel * d_in;
        Self {
            weight: init.fan_in_uniform(format!("{name}.weight"), &[kernel, d_in, d_out], fan_in),
            bias: init.fan_in_uniform(format!("{name}.bias"), &[d_out], fan_in),
            kernel,
            d_in,
            d_out,
        }
    }
}

/// Dense projection `[D_in × D_out]` plus bias.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearParams {
    pub fn init<F: Real>(init: &mut Initializer<'_, F>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: init.fan_in_uniform(format!("{name}.weight"), &[d_in, d_out], d_in),
            bias: bias.then(|| init.fan_in_uniform(format!("{name}.bias"), &[d_out], d_in)),
        }
    }

    pub fn apply<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.tape.add_bias(y, b)
            }
            None => y,
        }
    }
}

/// Residual causal dilated layer: a dilated kernel followed by a 1×1 kernel.
#[derive(Clone, Debug)]
pub struct RcdlParams {
    pub dilated: Conv1dParams,
    pub pointwise: Conv1dParams,
}

impl RcdlParams {
    pub fn init<F: Real>(init: &mut Initializer<'_, F>, name: &str, kernel: usize, dim: usize) -> Self {
        Self {
            dilated: Conv1dParams::init(init, &format!("{name}.dilated"), kernel, dim, dim),
            pointwise: Conv1dParams::init(init, &format!("{name}.pointwise"), 1, dim, dim),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Per-head projections `[D × D/N_head]` and the output projection `[D × D]`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    pub output: LinearParams,
    pub dim: usize,
}

impl AttentionParams {
    pub fn init<F: Real>(init: &mut Initializer<'_, F>, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "D={dim} not divisible by {heads} heads");
        let hd = dim / heads;
        let heads = (0..heads)
            .map(|h| HeadParams {
                query: init.fan_in_uniform(format!("{name}.head{h}.query"), &[dim, hd], dim),
                key: init.fan_in_uniform(format!("{name}.head{h}.key"), &[dim, hd], dim),
                value: init.fan_in_uniform(format!("{name}.head{h}.value"), &[dim, hd], dim),
            })
            .collect();
        Self {
            heads,
            output: LinearParams::init(init, &format!("{name}.output"), dim, dim, true),
            dim,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init<F: Real>(init: &mut Initializer<'_, F>, name: &str, dim: usize) -> Self {
        Self {
            gamma: init.constant(format!("{name}.gamma"), &[dim], 1.0),
            beta: init.constant(format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn apply<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.tape.layer_norm(x, gamma, beta, F::of(LAYER_NORM_EPS))
    }
}

/// Cross-attention, layer norms and the relu feed-forward network.
#[derive(Clone, Debug)]
pub struct TransLayerParams {
    pub attention: AttentionParams,
    pub ffn_in: LinearParams,
    pub ffn_out: LinearParams,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
}

impl TransLayerParams {
    pub fn init<F: Real>(init: &mut Initializer<'_, F>, name: &str, dim: usize, heads: usize, ffn_dim: usize) -> Self {
        assert!(ffn_dim >= dim, "feed-forward width must be at least D");
        Self {
            attention: AttentionParams::init(init, &format!("{name}.attention"), dim, heads),
            ffn_in: LinearParams::init(init, &format!("{name}.ffn_in"), dim, ffn_dim, true),
            ffn_out: LinearParams::init(init, &format!("{name}.ffn_out"), ffn_dim, dim, true),
            norm1: LayerNormParams::init(init, &format!("{name}.norm1"), dim),
            norm2: LayerNormParams::init(init, &format!("{name}.norm2"), dim),
        }
    }
}

/// Learned positional table `[T_max × D]`.
#[derive(Clone, Debug)]
pub struct PositionalTable {
    pub table: ParamId,
    pub capacity: usize,
}

impl PositionalTable {
    pub fn init<F: Real>(init: &mut Initializer<'_, F>, name: &str, capacity: usize, dim: usize) -> Self {
        Self {
            table: init.normal(format!("{name}.table"), &[capacity, dim], 0.02),
            capacity,
        }
    }
}

/// Causal dilated convolution: output `t` reads inputs
/// `t - j * dilation` for `j` in `0..k_w`, zero before the sequence start.
pub fn causal_dilated_conv1d<F: Real>(g: &mut Graph<F>, x: Var, params: &Conv1dParams, dilation: usize) -> Var {
    assert!(dilation >= 1, "dilation must be at least 1, got {dilation}");
    let w = g.param(params.weight);
    let b = g.param(params.bias);
    g.tape
        .conv1d(x, w, Some(b), ConvGeometry::causal(params.kernel, dilation))
}

/// `x + W₂ · dropout(relu(dilated_conv(x))) + b₂`.
pub fn rcdl_block<F: Real>(g: &mut Graph<F>, x: Var, block: &RcdlParams, dilation: usize, dropout: f64) -> Var {
    let d = g.tape.shape(x)[1];
    assert_eq!(d, block.dilated.d_in, "residual block expects {} features, got {d}", block.dilated.d_in);
    assert_eq!(block.pointwise.d_out, d, "residual block must preserve the feature width");
    let z = causal_dilated_conv1d(g, x, &block.dilated, dilation);
    let z = g.tape.relu(z);
    let z = g.dropout(z, dropout);
    let y = causal_dilated_conv1d(g, z, &block.pointwise, 1);
    g.tape.add(x, y)
}

/// Non-overlapping windows of `k` rows fused into one row each. Trailing
/// `T mod k` rows are dropped. `conv` supplies the kernel for [`FusionMode::Conv`].
pub fn temporal_fusion<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    k: usize,
    mode: FusionMode,
    conv: Option<&Conv1dParams>,
) -> Result<Var> {
    let t = g.tape.shape(x)[0];
    if t < k {
        return Err(Error::TooShort { len: t, k });
    }
    Ok(match mode {
        FusionMode::Max => g.tape.max_pool(x, k),
        FusionMode::Avg => g.tape.avg_pool(x, k),
        FusionMode::Conv => {
            let p = conv.expect("conv fusion requires kernel parameters");
            assert_eq!(p.kernel, k, "fusion kernel width must equal the stride");
            let w = g.param(p.weight);
            let b = g.param(p.bias);
            g.tape.conv1d(x, w, Some(b), ConvGeometry::windowed(k))
        }
    })
}

pub fn add_positional<F: Real>(g: &mut Graph<F>, x: Var, table: &PositionalTable) -> Result<Var> {
    let t = g.tape.shape(x)[0];
    if t > table.capacity {
        return Err(Error::Capacity {
            len: t,
            capacity: table.capacity,
        });
    }
    let e = g.param(table.table);
    Ok(g.tape.add_positional(x, e))
}

/// Result of [`multi_head_cross_attention`]: the projected output and each
/// head's `[T_q × T_k]` attention weights.
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Per head `softmax(Q Kᵀ / √D) V`; heads are concatenated and projected.
///
/// `mask[t * T_k + p] == false` excludes key `p` for query `t`. A query with
/// no admitted key attends to nothing and its head outputs are zero.
pub fn multi_head_cross_attention<F: Real>(
    g: &mut Graph<F>,
    q: Var,
    kv: Var,
    params: &AttentionParams,
    mask: Option<&[bool]>,
) -> Attended {
    let (tq, d) = (g.tape.shape(q)[0], g.tape.shape(q)[1]);
    let (tk, d2) = (g.tape.shape(kv)[0], g.tape.shape(kv)[1]);
    assert_eq!(d, params.dim, "attention: query width {d} != {}", params.dim);
    assert_eq!(d2, params.dim, "attention: key width {d2} != {}", params.dim);
    if let Some(m) = mask {
        assert_eq!(m.len(), tq * tk, "attention: mask must be [T_q × T_k]");
    }
    let scale = F::one() / F::of(params.dim as f64).sqrt();
    let mut outputs = Vec::with_capacity(params.heads.len());
    let mut weights = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let wq = g.param(head.query);
        let wk = g.param(head.key);
        let wv = g.param(head.value);
        let qh = g.tape.matmul(q, wq);
        let kh = g.tape.matmul(kv, wk);
        let vh = g.tape.matmul(kv, wv);
        let scores = g.tape.matmul_nt(qh, kh);
        let scores = g.tape.scale(scores, scale);
        let attn = match mask {
            Some(m) => g.tape.masked_softmax(scores, m),
            None => g.tape.softmax(scores, 1),
        };
        outputs.push(g.tape.matmul(attn, vh));
        weights.push(attn);
    }
    let cat = g.tape.concat_cols(&outputs);
    let output = params.output.apply(g, cat);
    Attended { output, weights }
}

/// `out₁ = LN(q + attn(q, kv))`, `out = LN(out₁ + FFN(out₁))`.
pub fn transformer_layer<F: Real>(
    g: &mut Graph<F>,
    q: Var,
    kv: Var,
    params: &TransLayerParams,
    mask: Option<&[bool]>,
) -> Var {
    let attended = multi_head_cross_attention(g, q, kv, &params.attention, mask).output;
    let h = g.tape.add(q, attended);
    let h = params.norm1.apply(g, h);
    let f = params.ffn_in.apply(g, h);
    let f = g.tape.relu(f);
    let f = params.ffn_out.apply(g, f);
    let out = g.tape.add(h, f);
    params.norm2.apply(g, out)
}
