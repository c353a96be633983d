//! The full network: frame encoder, segment hierarchy, segment-frame
//! attention, prediction heads and frame-by-frame streaming inference.

use crate::autodiff::Var;
use crate::config::{FusionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::{
    add_positional, rcdl_block, temporal_fusion, transformer_layer, Conv1dParams, LinearParams,
    PositionalTable, RcdlParams, TransLayerParams,
};
use crate::params::{Graph, Initializer, Mode, ParamStore};
use crate::tensor::{Real, Tensor};

/// Parameters of one segment level: the optional fusion kernel and the
/// residual stack that runs at that scale.
#[derive(Clone, Debug)]
pub struct LevelParams {
    pub fusion: Option<Conv1dParams>,
    pub blocks: Vec<RcdlParams>,
}

/// Where each layer's tensors live inside the store.
#[derive(Clone, Debug)]
pub struct Layout {
    pub input: Conv1dParams,
    pub frame_blocks: Vec<RcdlParams>,
    pub levels: Vec<LevelParams>,
    pub positional: Option<PositionalTable>,
    pub transformer: Option<TransLayerParams>,
    pub frame_head: LinearParams,
    pub segment_head: Option<LinearParams>,
}

/// Configuration, every learnable tensor, and the layout that names them.
#[derive(Clone, Debug)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub layout: Layout,
}

fn build_layout<F: Real>(config: &ModelConfig, init: &mut Initializer<'_, F>) -> Layout {
    let d = config.model_dim;
    let kw = config.kernel_width;
    let input = Conv1dParams::init(init, "input", 1, config.input_dim, d);
    let frame_blocks = (0..config.frame_layers)
        .map(|l| RcdlParams::init(init, &format!("frame.{l}"), kw, d))
        .collect();
    let levels = (1..=config.levels())
        .map(|i| LevelParams {
            fusion: (config.fusion == FusionMode::Conv)
                .then(|| Conv1dParams::init(init, &format!("level{i}.fusion"), config.fusion_kernel, d, d)),
            blocks: (0..config.segment_layers)
                .map(|l| RcdlParams::init(init, &format!("level{i}.{l}"), kw, d))
                .collect(),
        })
        .collect();
    let (positional, transformer) = if config.attention {
        (
            Some(PositionalTable::init(init, "positional", config.max_len, d)),
            Some(TransLayerParams::init(init, "sfa", d, config.heads, config.ffn_dim)),
        )
    } else {
        (None, None)
    };
    let frame_head = LinearParams::init(init, "head.frame", config.fused_dim(), config.num_classes, true);
    let segment_head = config
        .hierarchy
        .then(|| LinearParams::init(init, "head.segment", d, config.num_classes, true));
    Layout {
        input,
        frame_blocks,
        levels,
        positional,
        transformer,
        frame_head,
        segment_head,
    }
}

/// Fresh parameters, deterministic in `seed`.
pub fn init_model<F: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let layout = build_layout(config, &mut Initializer::new(&mut store, seed));
    Ok(ModelParams {
        config: config.clone(),
        store,
        layout,
    })
}

impl<F: Real> ModelParams<F> {
    /// Adopts an externally loaded store after checking that its names and
    /// shapes match what `config` would create.
    pub fn from_store(config: &ModelConfig, store: ParamStore<F>) -> Result<Self> {
        let expected: ModelParams<F> = init_model(config, 0)?;
        if expected.store.len() != store.len() {
            return Err(Error::Incompatible(format!(
                "expected {} tensors, found {}",
                expected.store.len(),
                store.len()
            )));
        }
        for ((en, et), (n, t)) in expected.store.iter().zip(store.iter()) {
            if en != n {
                return Err(Error::Incompatible(format!("expected tensor `{en}`, found `{n}`")));
            }
            if et.shape() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "tensor `{n}` has shape {:?}, configuration needs {:?}",
                    t.shape(),
                    et.shape()
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            store,
            layout: expected.layout,
        })
    }

    pub fn graph(&self, mode: Mode, seed: u64) -> Graph<F> {
        Graph::new(&self.store, mode, seed)
    }

    /// Eval-mode frame probabilities `[T × C]` for a whole video.
    pub fn predict(&self, features: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = self.graph(Mode::Eval, 0);
        let h = g.input(features.clone());
        let out = forward(&mut g, self, h)?;
        let probs = g.tape.softmax(out.frame_logits, 1);
        Ok(g.value(probs).clone())
    }
}

/// Segment features `F^1..F^depth`, each a fusion of the level below.
pub struct Hierarchy {
    pub levels: Vec<Var>,
}

impl Hierarchy {
    /// Number of levels actually built.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

/// Tape handles of one forward pass.
pub struct ForwardOutput {
    /// `ŷ⁰`, `[T × C]`.
    pub frame_logits: Var,
    /// `ŷ^i` for each built level, `[T^i × C]`.
    pub segment_logits: Vec<Var>,
    /// Input of the frame head, `[T × fused_dim]`.
    pub fused: Var,
    pub frames: Var,
    pub hierarchy: Hierarchy,
}

fn blocks<F: Real>(g: &mut Graph<F>, mut x: Var, blocks: &[RcdlParams], dropout: f64) -> Var {
    for (l, b) in blocks.iter().enumerate() {
        x = rcdl_block(g, x, b, 1usize << l.min(usize::BITS as usize - 1), dropout);
    }
    x
}

/// Input projection followed by the frame residual stack, dilation `2^l` at depth `l`.
pub fn encode_frames<F: Real>(g: &mut Graph<F>, params: &ModelParams<F>, h: Var) -> Var {
    let cfg = &params.config;
    let d_in = g.tape.shape(h)[1];
    assert_eq!(d_in, cfg.input_dim, "input features have width {d_in}, model expects {}", cfg.input_dim);
    let w = g.param(params.layout.input.weight);
    let b = g.param(params.layout.input.bias);
    let x = g.tape.conv1d(h, w, Some(b), crate::autodiff::ConvGeometry::causal(1, 1));
    blocks(g, x, &params.layout.frame_blocks, cfg.dropout)
}

/// Builds levels until the configured depth or until a level would be
/// empty, whichever comes first.
pub fn build_hierarchy<F: Real>(g: &mut Graph<F>, params: &ModelParams<F>, f0: Var) -> Result<Hierarchy> {
    let cfg = &params.config;
    let mut levels = Vec::with_capacity(params.layout.levels.len());
    let mut below = f0;
    for level in &params.layout.levels {
        let fused = match temporal_fusion(g, below, cfg.fusion_kernel, cfg.fusion, level.fusion.as_ref()) {
            Ok(v) => v,
            Err(Error::TooShort { .. }) => break,
            Err(e) => return Err(e),
        };
        below = blocks(g, fused, &level.blocks, cfg.dropout);
        levels.push(below);
    }
    Ok(Hierarchy { levels })
}

/// Frames covered by one segment at `level`, saturating on overflow.
fn span(k: usize, level: usize) -> usize {
    k.saturating_pow(level as u32)
}

/// `mask[t * T_i + p]`: segment `p` of `level` has been completed by frame `t`.
pub fn causal_mask(frames: usize, segments: usize, k: usize, level: usize) -> Vec<bool> {
    let s = span(k, level);
    let mut mask = vec![false; frames * segments];
    for t in 0..frames {
        let admitted = ((t + 1) / s).min(segments);
        mask[t * segments..t * segments + admitted].fill(true);
    }
    mask
}

/// Frames attend to every level with one shared transformer layer; the
/// result is `concat(F⁰, F̂¹, …, F̂^M)`.
///
/// In causal mode a frame that has not completed any segment of a level gets
/// a zero row for that level, the same value a prefix too short to build the
/// level produces. Missing levels are zero-filled.
pub fn segment_frame_attention<F: Real>(
    g: &mut Graph<F>,
    params: &ModelParams<F>,
    f0: Var,
    hierarchy: &Hierarchy,
) -> Result<Var> {
    let cfg = &params.config;
    let positional = params.layout.positional.as_ref().expect("attention parameters");
    let trans = params.layout.transformer.as_ref().expect("attention parameters");
    let (t, d) = (g.tape.shape(f0)[0], g.tape.shape(f0)[1]);
    let queries = add_positional(g, f0, positional)?;
    let mut parts = vec![f0];
    for (i, &level) in hierarchy.levels.iter().enumerate() {
        let keys = add_positional(g, level, positional)?;
        let attended = if cfg.causal_attention {
            let n = g.tape.shape(level)[0];
            let mask = causal_mask(t, n, cfg.fusion_kernel, i + 1);
            let y = transformer_layer(g, queries, keys, trans, Some(&mask));
            let first = span(cfg.fusion_kernel, i + 1).saturating_sub(1).min(t);
            if first > 0 {
                let mut keep = Tensor::full([t, d], F::one());
                keep.data_mut()[..first * d].fill(F::zero());
                let keep = g.input(keep);
                g.tape.mul(y, keep)
            } else {
                y
            }
        } else {
            transformer_layer(g, queries, keys, trans, None)
        };
        parts.push(attended);
    }
    for _ in hierarchy.depth()..cfg.depth {
        parts.push(g.input(Tensor::zeros([t, d])));
    }
    Ok(g.tape.concat_cols(&parts))
}

/// Frame head on the fused features; one shared segment head on every level.
pub fn predict_all<F: Real>(
    g: &mut Graph<F>,
    params: &ModelParams<F>,
    fused: Var,
    hierarchy: &Hierarchy,
) -> (Var, Vec<Var>) {
    let frame = params.layout.frame_head.apply(g, fused);
    let segments = match &params.layout.segment_head {
        Some(head) => hierarchy.levels.iter().map(|&f| head.apply(g, f)).collect(),
        None => Vec::new(),
    };
    (frame, segments)
}

fn forward_impl<F: Real>(g: &mut Graph<F>, params: &ModelParams<F>, h: Var, warn: bool) -> Result<ForwardOutput> {
    let cfg = &params.config;
    let t = g.tape.shape(h)[0];
    if cfg.attention && t > cfg.max_len {
        return Err(Error::Capacity {
            len: t,
            capacity: cfg.max_len,
        });
    }
    let frames = encode_frames(g, params, h);
    let hierarchy = build_hierarchy(g, params, frames)?;
    if warn && hierarchy.depth() < cfg.levels() {
        log::warn!(
            "sequence of {t} frames supports only {} of {} segment levels",
            hierarchy.depth(),
            cfg.levels()
        );
    }
    let fused = if cfg.attention {
        segment_frame_attention(g, params, frames, &hierarchy)?
    } else {
        frames
    };
    let (frame_logits, segment_logits) = predict_all(g, params, fused, &hierarchy);
    Ok(ForwardOutput {
        frame_logits,
        segment_logits,
        fused,
        frames,
        hierarchy,
    })
}

/// Whole-network forward pass of features `h: [T × D_in]`. The graph must
/// be bound to `params.store`.
pub fn forward<F: Real>(g: &mut Graph<F>, params: &ModelParams<F>, h: Var) -> Result<ForwardOutput> {
    forward_impl(g, params, h, true)
}

/// Frames received so far by a streaming session.
#[derive(Clone, Debug, Default)]
pub struct StreamState<F> {
    buffer: Vec<F>,
    width: usize,
    emitted: usize,
}

impl<F: Real> StreamState<F> {
    pub fn new(width: usize) -> Self {
        Self {
            buffer: Vec::new(),
            width,
            emitted: 0,
        }
    }

    /// Number of predictions emitted so far.
    pub fn emitted(&self) -> usize {
        self.emitted
    }
}

/// Appends one frame, reruns the network over the prefix and returns the
/// class probabilities of the new frame.
pub fn stream_step<F: Real>(params: &ModelParams<F>, state: &mut StreamState<F>, frame: &[F]) -> Result<Vec<F>> {
    if !params.config.causal_attention {
        return Err(Error::config("streaming inference requires causal attention"));
    }
    assert_eq!(frame.len(), state.width, "frame width mismatch");
    assert_eq!(state.width, params.config.input_dim, "stream width differs from model input width");
    state.buffer.extend_from_slice(frame);
    let t = state.emitted + 1;
    let mut g = params.graph(Mode::Eval, 0);
    let h = g.input(Tensor::new([t, state.width], state.buffer.clone()));
    let out = forward_impl(&mut g, params, h, false)?;
    let last = g.tape.slice_rows(out.frame_logits, t - 1, t);
    let probs = g.tape.softmax(last, 1);
    state.emitted = t;
    Ok(g.value(probs).data().to_vec())
}
