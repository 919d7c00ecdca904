//! The two acoustic-model architectures: a dilated 1D-convolution baseline
//! and a conv-frontend streaming Transformer, plus sinusoidal absolute
//! embeddings, parameter accounting and the checkpoint format.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{
    multi_head_attend_extended, AttentionParams, BoundAttention, BoundRelEmbedding,
    RelativeEmbedding,
};
use crate::autodiff::{Binder, Tape, Var};
use crate::error::{Error, Result};
use crate::streaming::{forward_streaming, PosMode, StreamConfig, StreamState};
use crate::tensor::{Dtype, Scalar, StridedTensor};

const LAYER_NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Dilated 1D convolution
// ---------------------------------------------------------------------------

/// Same-padded dilated cross-correlation, stride 1.
///
/// `x` is `[c_in, t]`, `w` is `[c_out, c_in, k]` with odd `k`, `b` is
/// `[c_out, 1]`. Output frame `t` reads input frames
/// `t + (κ - (k-1)/2)·dilation`; out-of-range taps contribute zero, so the
/// output keeps the input length.
pub fn conv1d_forward<E: Scalar>(
    x: &StridedTensor<E>,
    w: &StridedTensor<E>,
    b: &StridedTensor<E>,
    dilation: usize,
) -> Result<StridedTensor<E>> {
    let (c_in, t) = x.dims2("conv1d input")?;
    let wshape = w.shape().to_vec();
    if wshape.len() != 3 {
        return Err(Error::Dimension(format!(
            "conv1d weight must be [out, in, k], got {wshape:?}"
        )));
    }
    let (c_out, w_in, k) = (wshape[0], wshape[1], wshape[2]);
    if w_in != c_in {
        return Err(Error::Dimension(format!(
            "conv1d: weight expects {w_in} input channels, signal has {c_in}"
        )));
    }
    if k % 2 == 0 {
        return Err(Error::Dimension(format!("conv1d kernel must be odd, got {k}")));
    }
    if b.shape() != [c_out, 1] {
        return Err(Error::Dimension(format!(
            "conv1d bias is {:?}, expected [{c_out}, 1]",
            b.shape()
        )));
    }
    if dilation == 0 {
        return Err(Error::Config("conv1d dilation must be at least 1".into()));
    }
    let center = (k - 1) / 2;
    let xv = x.to_vec();
    let wv = w.to_vec();
    let bv = b.to_vec();
    let mut out = vec![E::ZERO; c_out * t];
    for o in 0..c_out {
        for frame in 0..t {
            let mut acc = bv[o];
            for i in 0..c_in {
                for tap in 0..k {
                    let rel = (tap as isize - center as isize) * dilation as isize;
                    let src = frame as isize + rel;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    acc = acc + wv[(o * c_in + i) * k + tap] * xv[i * t + src as usize];
                }
            }
            out[o * t + frame] = acc;
        }
    }
    StridedTensor::from_shape_vec(&[c_out, t], out)
}

/// Gradients of [`conv1d_forward`] w.r.t. input, weight and bias.
pub(crate) fn conv1d_grads<E: Scalar>(
    g: &StridedTensor<E>,
    x: &StridedTensor<E>,
    w: &StridedTensor<E>,
    dilation: usize,
) -> Result<(StridedTensor<E>, StridedTensor<E>, StridedTensor<E>)> {
    let (c_in, t) = x.dims2("conv1d grad input")?;
    let wshape = w.shape().to_vec();
    let (c_out, _, k) = (wshape[0], wshape[1], wshape[2]);
    let center = (k - 1) / 2;
    let gv = g.to_vec();
    let xv = x.to_vec();
    let wv = w.to_vec();
    let mut dx = vec![E::ZERO; c_in * t];
    let mut dw = vec![E::ZERO; c_out * c_in * k];
    let mut db = vec![E::ZERO; c_out];
    for o in 0..c_out {
        for frame in 0..t {
            let go = gv[o * t + frame];
            db[o] = db[o] + go;
            for i in 0..c_in {
                for tap in 0..k {
                    let rel = (tap as isize - center as isize) * dilation as isize;
                    let src = frame as isize + rel;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    dx[i * t + src] = dx[i * t + src] + wv[(o * c_in + i) * k + tap] * go;
                    dw[(o * c_in + i) * k + tap] =
                        dw[(o * c_in + i) * k + tap] + xv[i * t + src] * go;
                }
            }
        }
    }
    Ok((
        StridedTensor::from_shape_vec(&[c_in, t], dx)?,
        StridedTensor::from_shape_vec(&[c_out, c_in, k], dw)?,
        StridedTensor::from_shape_vec(&[c_out, 1], db)?,
    ))
}

/// One dilated convolution layer's parameters.
#[derive(Clone)]
pub struct Conv1dParams<E: Scalar> {
    /// `[out_channels, in_channels, kernel]`
    pub weight: StridedTensor<E>,
    /// `[out_channels, 1]`
    pub bias: StridedTensor<E>,
    pub dilation: usize,
    /// Always 1; downsampling variants are out of scope.
    pub stride: usize,
}

impl<E: Scalar> Conv1dParams<E> {
    pub fn new(weight: StridedTensor<E>, bias: StridedTensor<E>, dilation: usize) -> Result<Self> {
        if weight.rank() != 3 {
            return Err(Error::Dimension(format!(
                "conv weight must be rank 3, got {:?}",
                weight.shape()
            )));
        }
        if weight.shape()[2] % 2 == 0 {
            return Err(Error::Dimension("conv kernel must be odd".into()));
        }
        Ok(Conv1dParams { weight, bias, dilation, stride: 1 })
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Frames of context added on each side: `dilation · (kernel-1)/2`.
    pub fn context(&self) -> usize {
        self.dilation * (self.kernel() - 1) / 2
    }
}

// ---------------------------------------------------------------------------
// Sinusoidal absolute embedding
// ---------------------------------------------------------------------------

/// Parameter-free absolute position encoding: interleaved sin/cos at
/// geometric wavelengths. The same position always maps to the same vector.
#[derive(Debug, Clone, Copy)]
pub struct SinusoidalEmbedding {
    pub d_model: usize,
}

impl SinusoidalEmbedding {
    pub fn new(d_model: usize) -> Result<Self> {
        if d_model == 0 || d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "sinusoidal embedding needs an even width, got {d_model}"
            )));
        }
        Ok(SinusoidalEmbedding { d_model })
    }

    /// Embedding columns for positions `start .. start+t`.
    pub fn columns<E: Scalar>(&self, start: usize, t: usize) -> StridedTensor<E> {
        let d = self.d_model;
        let out = StridedTensor::zeros(&[d, t]);
        for c in 0..t {
            let pos = (start + c) as f64;
            for i in 0..d / 2 {
                let wavelength = 10000f64.powf(2.0 * i as f64 / d as f64);
                let angle = pos / wavelength;
                out.set(&[2 * i, c], E::from_f64(angle.sin()));
                out.set(&[2 * i + 1, c], E::from_f64(angle.cos()));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TdnnBaseline,
    StreamingTransformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TdnnConfig {
    pub layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
}

impl Default for TdnnConfig {
    fn default() -> Self {
        TdnnConfig { layers: 5, filters: 48, kernel: 5, dilations: vec![1, 2, 3, 4, 5] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    /// Output width of each frontend conv layer; the last must equal
    /// `d_model`.
    pub frontend_channels: Vec<usize>,
    pub frontend_kernel: usize,
    pub attention_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_width: usize,
    pub tie_kv: bool,
    /// One relative-embedding table shared by all layers instead of one per
    /// layer.
    pub rel_shared_all_layers: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            frontend_channels: vec![28, 32],
            frontend_kernel: 5,
            attention_layers: 3,
            d_model: 32,
            n_heads: 4,
            ff_width: 128,
            tie_kv: false,
            rel_shared_all_layers: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub n_classes: usize,
    pub tdnn: TdnnConfig,
    pub transformer: TransformerConfig,
    pub stream: StreamConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::StreamingTransformer,
            input_dim: 40,
            n_classes: 4,
            tdnn: TdnnConfig::default(),
            transformer: TransformerConfig::default(),
            stream: StreamConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_classes == 0 {
            return Err(Error::Config("input_dim and n_classes must be positive".into()));
        }
        match self.kind {
            ModelKind::TdnnBaseline => {
                let t = &self.tdnn;
                if t.layers == 0 || t.filters == 0 {
                    return Err(Error::Config("tdnn needs layers and filters".into()));
                }
                if t.kernel % 2 == 0 {
                    return Err(Error::Config("tdnn kernel must be odd".into()));
                }
                if t.dilations.len() != t.layers {
                    return Err(Error::Config(format!(
                        "tdnn lists {} dilations for {} layers",
                        t.dilations.len(),
                        t.layers
                    )));
                }
            }
            ModelKind::StreamingTransformer => {
                let t = &self.transformer;
                if t.frontend_channels.is_empty() {
                    return Err(Error::Config("transformer needs a conv frontend".into()));
                }
                if *t.frontend_channels.last().expect("non-empty") != t.d_model {
                    return Err(Error::Config(format!(
                        "last frontend width {} must equal d_model {}",
                        t.frontend_channels.last().expect("non-empty"),
                        t.d_model
                    )));
                }
                if t.frontend_kernel % 2 == 0 {
                    return Err(Error::Config("frontend kernel must be odd".into()));
                }
                if t.attention_layers == 0 {
                    return Err(Error::Config("transformer needs attention layers".into()));
                }
                if t.n_heads == 0 || t.d_model % t.n_heads != 0 {
                    return Err(Error::Config(format!(
                        "d_model {} not divisible by n_heads {}",
                        t.d_model, t.n_heads
                    )));
                }
                if self.stream.pos_mode == PosMode::Absolute && t.d_model % 2 != 0 {
                    return Err(Error::Config(
                        "absolute embedding needs an even d_model".into(),
                    ));
                }
                self.stream.validate_with(t.tie_kv)?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Weight initialisation
// ---------------------------------------------------------------------------

struct Init {
    rng: rand_chacha::ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Init { rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed) }
    }

    fn uniform<E: Scalar>(&mut self, shape: &[usize], limit: f64) -> StridedTensor<E> {
        use rand::Rng;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| E::from_f64((self.rng.random::<f64>() * 2.0 - 1.0) * limit))
            .collect();
        StridedTensor::from_shape_vec(shape, data).expect("shape/data agree")
    }

    fn xavier<E: Scalar>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> StridedTensor<E> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(shape, limit)
    }

    fn conv<E: Scalar>(&mut self, out_c: usize, in_c: usize, k: usize) -> StridedTensor<E> {
        self.xavier(&[out_c, in_c, k], in_c * k, out_c * k)
    }

    /// Small positive bias keeps ReLU units live at initialisation, which
    /// the dependency-footprint measurements rely on.
    fn bias<E: Scalar>(&mut self, d: usize) -> StridedTensor<E> {
        StridedTensor::filled(&[d, 1], E::from_f64(0.01))
    }
}

// ---------------------------------------------------------------------------
// Model structures
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct Linear<E: Scalar> {
    /// `[out, in]`
    pub w: StridedTensor<E>,
    /// `[out, 1]`
    pub b: StridedTensor<E>,
}

#[derive(Clone)]
pub struct AttnBlock<E: Scalar> {
    pub ln1_gamma: StridedTensor<E>,
    pub ln1_beta: StridedTensor<E>,
    pub attn: AttentionParams<E>,
    pub rel_emb: Option<RelativeEmbedding<E>>,
    pub ln2_gamma: StridedTensor<E>,
    pub ln2_beta: StridedTensor<E>,
    pub ff_w1: StridedTensor<E>,
    pub ff_b1: StridedTensor<E>,
    pub ff_w2: StridedTensor<E>,
    pub ff_b2: StridedTensor<E>,
}

#[derive(Clone)]
pub struct TdnnModel<E: Scalar> {
    pub convs: Vec<Conv1dParams<E>>,
    pub head: Linear<E>,
    pub cfg: ModelConfig,
}

#[derive(Clone)]
pub struct TransformerModel<E: Scalar> {
    pub frontend: Vec<Conv1dParams<E>>,
    pub blocks: Vec<AttnBlock<E>>,
    pub head: Linear<E>,
    pub sinusoidal: Option<SinusoidalEmbedding>,
    pub cfg: ModelConfig,
}

#[derive(Clone)]
pub enum Model<E: Scalar> {
    Tdnn(TdnnModel<E>),
    Transformer(TransformerModel<E>),
}

/// Baseline: stacked dilated convolutions with ReLU, then a linear head.
pub fn build_baseline_tdnn<E: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<E>> {
    let mut cfg = cfg.clone();
    cfg.kind = ModelKind::TdnnBaseline;
    cfg.validate()?;
    let t = cfg.tdnn.clone();
    let mut init = Init::new(seed);
    let mut convs = Vec::with_capacity(t.layers);
    let mut in_c = cfg.input_dim;
    for layer in 0..t.layers {
        let weight = init.conv::<E>(t.filters, in_c, t.kernel);
        let bias = init.bias::<E>(t.filters);
        convs.push(Conv1dParams::new(weight, bias, t.dilations[layer])?);
        in_c = t.filters;
    }
    let head = Linear {
        w: init.xavier::<E>(&[cfg.n_classes, t.filters], t.filters, cfg.n_classes),
        b: StridedTensor::zeros(&[cfg.n_classes, 1]),
    };
    Ok(Model::Tdnn(TdnnModel { convs, head, cfg }))
}

/// Streaming Transformer: conv frontend, pre-norm attention blocks with a
/// feed-forward sublayer, linear head. Positional machinery follows the
/// stream config: sinusoids for absolute mode, per-layer (or shared)
/// relative tables for the relative modes, sized to the largest window the
/// stream can produce.
pub fn build_streaming_transformer<E: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<E>> {
    let mut cfg = cfg.clone();
    cfg.kind = ModelKind::StreamingTransformer;
    cfg.validate()?;
    let t = cfg.transformer.clone();
    let mut init = Init::new(seed);

    let mut frontend = Vec::with_capacity(t.frontend_channels.len());
    let mut in_c = cfg.input_dim;
    for &out_c in &t.frontend_channels {
        let weight = init.conv::<E>(out_c, in_c, t.frontend_kernel);
        let bias = init.bias::<E>(out_c);
        frontend.push(Conv1dParams::new(weight, bias, 1)?);
        in_c = out_c;
    }

    let d = t.d_model;
    let d_head = d / t.n_heads;
    let l_k_max = cfg.stream.max_extended_key();
    let rel_modes = matches!(cfg.stream.pos_mode, PosMode::RelKey | PosMode::RelKeyValue);
    let with_value = cfg.stream.pos_mode == PosMode::RelKeyValue;

    let shared_emb = if rel_modes && t.rel_shared_all_layers {
        Some(make_rel_embedding::<E>(&mut init, d_head, l_k_max, with_value)?)
    } else {
        None
    };

    let mut blocks = Vec::with_capacity(t.attention_layers);
    for _ in 0..t.attention_layers {
        let w_q = init.xavier::<E>(&[d, d], d, d);
        let attn = if t.tie_kv {
            let w_kv = init.xavier::<E>(&[d, d], d, d);
            let w_o = init.xavier::<E>(&[d, d], d, d);
            AttentionParams::new_tied(w_q, w_kv, Some(w_o), t.n_heads)?
        } else {
            let w_k = init.xavier::<E>(&[d, d], d, d);
            let w_v = init.xavier::<E>(&[d, d], d, d);
            let w_o = init.xavier::<E>(&[d, d], d, d);
            AttentionParams::new(w_q, w_k, w_v, Some(w_o), t.n_heads)?
        };
        let rel_emb = if rel_modes {
            Some(match &shared_emb {
                Some(shared) => shared.clone(), // tensors alias: one table for all layers
                None => make_rel_embedding::<E>(&mut init, d_head, l_k_max, with_value)?,
            })
        } else {
            None
        };
        blocks.push(AttnBlock {
            ln1_gamma: StridedTensor::filled(&[d, 1], E::ONE),
            ln1_beta: StridedTensor::zeros(&[d, 1]),
            attn,
            rel_emb,
            ln2_gamma: StridedTensor::filled(&[d, 1], E::ONE),
            ln2_beta: StridedTensor::zeros(&[d, 1]),
            ff_w1: init.xavier::<E>(&[t.ff_width, d], d, t.ff_width),
            ff_b1: init.bias::<E>(t.ff_width),
            ff_w2: init.xavier::<E>(&[d, t.ff_width], t.ff_width, d),
            ff_b2: StridedTensor::zeros(&[d, 1]),
        });
    }

    let head = Linear {
        w: init.xavier::<E>(&[cfg.n_classes, d], d, cfg.n_classes),
        b: StridedTensor::zeros(&[cfg.n_classes, 1]),
    };
    let sinusoidal = if cfg.stream.pos_mode == PosMode::Absolute {
        Some(SinusoidalEmbedding::new(d)?)
    } else {
        None
    };
    Ok(Model::Transformer(TransformerModel { frontend, blocks, head, sinusoidal, cfg }))
}

fn make_rel_embedding<E: Scalar>(
    init: &mut Init,
    d_head: usize,
    l_k_max: usize,
    with_value: bool,
) -> Result<RelativeEmbedding<E>> {
    let e_key = init.uniform::<E>(&[d_head, 2 * l_k_max - 1], 0.05);
    let e_value = with_value.then(|| init.uniform::<E>(&[d_head, 2 * l_k_max - 1], 0.05));
    RelativeEmbedding::new(e_key, e_value, l_k_max)
}

impl<E: Scalar> Model<E> {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        match cfg.kind {
            ModelKind::TdnnBaseline => build_baseline_tdnn(cfg, seed),
            ModelKind::StreamingTransformer => build_streaming_transformer(cfg, seed),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Tdnn(m) => &m.cfg,
            Model::Transformer(m) => &m.cfg,
        }
    }

    /// Named trainable tensors, storage-deduplicated: tied key/value weights
    /// and layer-shared embedding tables appear once.
    pub fn named_params(&self) -> Vec<(String, StridedTensor<E>)> {
        let mut out: Vec<(String, StridedTensor<E>)> = Vec::new();
        let mut push = |name: String, t: &StridedTensor<E>| {
            out.push((name, t.clone()));
        };
        match self {
            Model::Tdnn(m) => {
                for (i, conv) in m.convs.iter().enumerate() {
                    push(format!("conv.{i}.weight"), &conv.weight);
                    push(format!("conv.{i}.bias"), &conv.bias);
                }
                push("head.weight".into(), &m.head.w);
                push("head.bias".into(), &m.head.b);
            }
            Model::Transformer(m) => {
                for (i, conv) in m.frontend.iter().enumerate() {
                    push(format!("frontend.{i}.weight"), &conv.weight);
                    push(format!("frontend.{i}.bias"), &conv.bias);
                }
                for (i, blk) in m.blocks.iter().enumerate() {
                    push(format!("block.{i}.ln1.gamma"), &blk.ln1_gamma);
                    push(format!("block.{i}.ln1.beta"), &blk.ln1_beta);
                    push(format!("block.{i}.w_q"), &blk.attn.w_q);
                    if blk.attn.tie_kv {
                        push(format!("block.{i}.w_kv"), &blk.attn.w_k);
                    } else {
                        push(format!("block.{i}.w_k"), &blk.attn.w_k);
                        push(format!("block.{i}.w_v"), &blk.attn.w_v);
                    }
                    if let Some(w_o) = &blk.attn.w_o {
                        push(format!("block.{i}.w_o"), w_o);
                    }
                    if let Some(emb) = &blk.rel_emb {
                        push(format!("block.{i}.rel.key"), &emb.e_key);
                        if let Some(ev) = &emb.e_value {
                            push(format!("block.{i}.rel.value"), ev);
                        }
                    }
                    push(format!("block.{i}.ln2.gamma"), &blk.ln2_gamma);
                    push(format!("block.{i}.ln2.beta"), &blk.ln2_beta);
                    push(format!("block.{i}.ff.w1"), &blk.ff_w1);
                    push(format!("block.{i}.ff.b1"), &blk.ff_b1);
                    push(format!("block.{i}.ff.w2"), &blk.ff_w2);
                    push(format!("block.{i}.ff.b2"), &blk.ff_b2);
                }
                push("head.weight".into(), &m.head.w);
                push("head.bias".into(), &m.head.b);
            }
        }
        // Storage dedup: keep the first name of any shared buffer.
        let mut seen = HashSet::new();
        let mut deduped = Vec::with_capacity(out.len());
        for (name, t) in out {
            if seen.insert(t.buffer_addr()) {
                deduped.push((name, t));
            }
        }
        deduped
    }

    /// Exact count of trainable scalars (shared storage counted once).
    pub fn count_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.elem_count()).sum()
    }

    /// Per-parameter breakdown for reports.
    pub fn param_report(&self) -> Vec<(String, usize)> {
        self.named_params().iter().map(|(n, t)| (n.clone(), t.elem_count())).collect()
    }

    /// Whole-sequence forward pass: the reference-style non-streaming path,
    /// used by equivalence tests and the quadratic benchmark arm. Parameters
    /// are trainable when the tape records.
    pub fn forward_full(&self, tape: &Tape<E>, x: &Var<E>) -> Result<Var<E>> {
        match self {
            Model::Tdnn(m) => m.bind(tape, tape.is_recording()).forward(tape, x),
            Model::Transformer(m) => {
                let bound = m.bind(tape, tape.is_recording());
                bound.forward_full(tape, x)
            }
        }
    }

    /// Bind every named parameter as a trainable leaf and hand back the
    /// bound model plus the `(name, var)` pairs, in [`Model::named_params`]
    /// order, for the optimizer to read gradients from.
    pub fn bind_trainable(&self, tape: &Tape<E>) -> (BoundAny<E>, Vec<(String, Var<E>)>) {
        let binder = Binder::new(tape, true);
        let vars: Vec<(String, Var<E>)> = self
            .named_params()
            .iter()
            .map(|(name, t)| (name.clone(), binder.var(t)))
            .collect();
        let bound = match self {
            Model::Tdnn(m) => BoundAny::Tdnn(m.bind_with(&binder)),
            Model::Transformer(m) => BoundAny::Transformer(m.bind_with(&binder)),
        };
        (bound, vars)
    }

    /// Whole-sequence streaming pass with a fresh stream state.
    pub fn forward_streaming_full(&self, tape: &Tape<E>, x: &Var<E>) -> Result<Var<E>> {
        match self {
            Model::Tdnn(_) => Err(Error::Usage(
                "streaming drives the transformer; the convolutional baseline is already \
                 streamable frame by frame"
                    .into(),
            )),
            Model::Transformer(m) => {
                let bound = m.bind(tape, tape.is_recording());
                forward_streaming(tape, &bound, &m.cfg.stream, x, 0)
            }
        }
    }
}

/// Spec-level free function mirror of [`Model::count_params`].
pub fn count_params<E: Scalar>(model: &Model<E>) -> usize {
    model.count_params()
}

// ---------------------------------------------------------------------------
// Bound (on-tape) forms
// ---------------------------------------------------------------------------

pub struct BoundConv<E: Scalar> {
    pub weight: Var<E>,
    pub bias: Var<E>,
    pub dilation: usize,
}

pub struct BoundLinear<E: Scalar> {
    pub w: Var<E>,
    pub b: Var<E>,
}

impl<E: Scalar> BoundLinear<E> {
    pub fn forward(&self, tape: &Tape<E>, x: &Var<E>) -> Result<Var<E>> {
        let y = tape.matmul(&self.w, x)?;
        tape.add_col_broadcast(&y, &self.b)
    }
}

/// Projections of one window through a block's attention weights.
pub struct ProjectedQkv<E: Scalar> {
    pub q: Var<E>,
    pub k: Var<E>,
    pub v: Var<E>,
}

/// Output of one block over one window.
pub struct BlockForward<E: Scalar> {
    /// Block output (residual + feed-forward applied).
    pub y: Var<E>,
    /// Concatenated-heads attention output before `w_o` — what a same-layer
    /// cache stores.
    pub h_win: Var<E>,
}

pub struct BoundBlock<E: Scalar> {
    pub ln1_gamma: Var<E>,
    pub ln1_beta: Var<E>,
    pub attn: BoundAttention<E>,
    pub rel_emb: Option<BoundRelEmbedding<E>>,
    pub ln2_gamma: Var<E>,
    pub ln2_beta: Var<E>,
    pub ff_w1: Var<E>,
    pub ff_b1: Var<E>,
    pub ff_w2: Var<E>,
    pub ff_b2: Var<E>,
}

impl<E: Scalar> BoundBlock<E> {
    /// Pre-norm projections: `q,k,v = W · LN(x)`. The returned `k`/`v`
    /// cover the window only; caches extend them afterwards.
    pub fn project_window(&self, tape: &Tape<E>, x: &Var<E>) -> Result<ProjectedQkv<E>> {
        let zn = tape.layer_norm_cols(x, &self.ln1_gamma, &self.ln1_beta, LAYER_NORM_EPS)?;
        let q = tape.matmul(&self.attn.w_q, &zn)?;
        let k = tape.matmul(&self.attn.w_k, &zn)?;
        let v = if self.attn.tie_kv { k.clone() } else { tape.matmul(&self.attn.w_v, &zn)? };
        Ok(ProjectedQkv { q, k, v })
    }

    /// Multi-head attention over (possibly cache-extended) keys/values, then
    /// residual mixing and the feed-forward sublayer.
    pub fn attend_and_mix(
        &self,
        tape: &Tape<E>,
        x: &Var<E>,
        q: &Var<E>,
        k_ext: &Var<E>,
        v_ext: &Var<E>,
        mask: Option<&crate::attention::AttentionMask>,
    ) -> Result<BlockForward<E>> {
        let mh = multi_head_attend_extended(
            tape,
            q,
            k_ext,
            v_ext,
            &self.attn,
            self.rel_emb.as_ref(),
            mask,
            None,
        )?;
        let y1 = tape.add(x, &mh.mixed)?;
        let y1n = tape.layer_norm_cols(&y1, &self.ln2_gamma, &self.ln2_beta, LAYER_NORM_EPS)?;
        let ff1 = tape.relu(&tape.add_col_broadcast(&tape.matmul(&self.ff_w1, &y1n)?, &self.ff_b1)?);
        let ff2 = tape.add_col_broadcast(&tape.matmul(&self.ff_w2, &ff1)?, &self.ff_b2)?;
        let y = tape.add(&y1, &ff2)?;
        Ok(BlockForward { y, h_win: mh.heads_concat })
    }
}

/// Either architecture, bound to a tape.
pub enum BoundAny<E: Scalar> {
    Tdnn(BoundTdnn<E>),
    Transformer(BoundTransformer<E>),
}

pub struct BoundTdnn<E: Scalar> {
    pub convs: Vec<BoundConv<E>>,
    pub head: BoundLinear<E>,
}

impl<E: Scalar> BoundTdnn<E> {
    pub fn forward(&self, tape: &Tape<E>, x: &Var<E>) -> Result<Var<E>> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = tape.relu(&tape.conv1d(&h, &conv.weight, &conv.bias, conv.dilation)?);
        }
        self.head.forward(tape, &h)
    }
}

pub struct BoundTransformer<E: Scalar> {
    pub frontend: Vec<BoundConv<E>>,
    pub blocks: Vec<BoundBlock<E>>,
    pub head: BoundLinear<E>,
    pub sinusoidal: Option<SinusoidalEmbedding>,
    pub pos_mode: PosMode,
    pub tie_kv: bool,
}

impl<E: Scalar> BoundTransformer<E> {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, i: usize) -> &BoundBlock<E> {
        &self.blocks[i]
    }

    pub fn tie_kv(&self) -> bool {
        self.tie_kv
    }

    pub fn pos_mode(&self) -> PosMode {
        self.pos_mode
    }

    pub fn frontend_forward(&self, tape: &Tape<E>, x: &Var<E>) -> Result<Var<E>> {
        let mut h = x.clone();
        for conv in &self.frontend {
            h = tape.relu(&tape.conv1d(&h, &conv.weight, &conv.bias, conv.dilation)?);
        }
        Ok(h)
    }

    /// Add sinusoidal columns for absolute positions `start ..`; identity
    /// when the model was built without absolute embeddings.
    pub fn add_absolute_positions(
        &self,
        tape: &Tape<E>,
        h: &Var<E>,
        start: usize,
    ) -> Result<Var<E>> {
        match &self.sinusoidal {
            Some(emb) => {
                let cols = emb.columns::<E>(start, h.shape()[1]);
                tape.add(h, &tape.constant(cols))
            }
            None => Ok(h.clone()),
        }
    }

    pub fn head_forward(&self, tape: &Tape<E>, h: &Var<E>) -> Result<Var<E>> {
        self.head.forward(tape, h)
    }

    /// Plain whole-sequence pass: frontend, positions from zero, every block
    /// with full self-attention (optionally block-masked), head.
    pub fn forward_full(&self, tape: &Tape<E>, x: &Var<E>) -> Result<Var<E>> {
        self.forward_full_masked(tape, x, None)
    }

    pub fn forward_full_masked(
        &self,
        tape: &Tape<E>,
        x: &Var<E>,
        mask: Option<&crate::attention::AttentionMask>,
    ) -> Result<Var<E>> {
        let mut z = self.frontend_forward(tape, x)?;
        z = self.add_absolute_positions(tape, &z, 0)?;
        for block in &self.blocks {
            let p = block.project_window(tape, &z)?;
            let out = block.attend_and_mix(tape, &z, &p.q, &p.k, &p.v, mask)?;
            z = out.y;
        }
        self.head_forward(tape, &z)
    }
}

impl<E: Scalar> TdnnModel<E> {
    pub fn bind(&self, tape: &Tape<E>, trainable: bool) -> BoundTdnn<E> {
        self.bind_with(&Binder::new(tape, trainable))
    }

    fn bind_with(&self, binder: &Binder<'_, E>) -> BoundTdnn<E> {
        BoundTdnn {
            convs: self
                .convs
                .iter()
                .map(|c| BoundConv {
                    weight: binder.var(&c.weight),
                    bias: binder.var(&c.bias),
                    dilation: c.dilation,
                })
                .collect(),
            head: BoundLinear { w: binder.var(&self.head.w), b: binder.var(&self.head.b) },
        }
    }

    /// Analytic one-sided receptive field of the stack, in frames.
    pub fn receptive_field(&self) -> usize {
        self.convs.iter().map(Conv1dParams::context).sum()
    }
}

impl<E: Scalar> TransformerModel<E> {
    pub fn bind(&self, tape: &Tape<E>, trainable: bool) -> BoundTransformer<E> {
        self.bind_with(&Binder::new(tape, trainable))
    }

    fn bind_with(&self, binder: &Binder<'_, E>) -> BoundTransformer<E> {
        BoundTransformer {
            frontend: self
                .frontend
                .iter()
                .map(|c| BoundConv {
                    weight: binder.var(&c.weight),
                    bias: binder.var(&c.bias),
                    dilation: c.dilation,
                })
                .collect(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    ln1_gamma: binder.var(&b.ln1_gamma),
                    ln1_beta: binder.var(&b.ln1_beta),
                    attn: b.attn.bind_with(binder),
                    rel_emb: b.rel_emb.as_ref().map(|e| e.bind_with(binder)),
                    ln2_gamma: binder.var(&b.ln2_gamma),
                    ln2_beta: binder.var(&b.ln2_beta),
                    ff_w1: binder.var(&b.ff_w1),
                    ff_b1: binder.var(&b.ff_b1),
                    ff_w2: binder.var(&b.ff_w2),
                    ff_b2: binder.var(&b.ff_b2),
                })
                .collect(),
            head: BoundLinear { w: binder.var(&self.head.w), b: binder.var(&self.head.b) },
            sinusoidal: self.sinusoidal,
            pos_mode: self.cfg.stream.pos_mode,
            tie_kv: self.cfg.transformer.tie_kv,
        }
    }

    pub fn n_attention_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn tie_kv(&self) -> bool {
        self.cfg.transformer.tie_kv
    }

    /// One-sided conv context of the frontend, in frames.
    pub fn frontend_context(&self) -> usize {
        self.frontend.iter().map(Conv1dParams::context).sum()
    }

    pub fn forward_streaming(
        &self,
        tape: &Tape<E>,
        x: &Var<E>,
        start_offset: usize,
    ) -> Result<Var<E>> {
        let bound = self.bind(tape, tape.is_recording());
        forward_streaming(tape, &bound, &self.cfg.stream, x, start_offset)
    }

    /// Fresh per-stream state sized to this model.
    pub fn new_state(&self) -> StreamState<E> {
        StreamState::new(self.n_attention_layers())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

/// Write the model's parameters: a text index (name, dtype, shape, byte
/// offset, byte length per parameter), a `DATA` marker, then raw
/// little-endian payloads.
pub fn save_checkpoint<E: Scalar>(model: &Model<E>, path: &Path) -> Result<()> {
    let params = model.named_params();
    let mut header = String::new();
    let mut payload: Vec<u8> = Vec::new();
    header.push_str(&format!("CKPT1 {}\n", params.len()));
    for (name, t) in &params {
        let offset = payload.len() as u64;
        for x in t.to_vec() {
            x.write_le(&mut payload);
        }
        let len = payload.len() as u64 - offset;
        let shape =
            t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let dtype = match E::DTYPE {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        };
        header.push_str(&format!("{name} {dtype} {shape} {offset} {len}\n"));
    }
    header.push_str("DATA\n");
    let mut file = std::fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    file.write_all(&payload)?;
    Ok(())
}

/// Parse a checkpoint's text index (DATA payload untouched).
pub fn read_checkpoint_index(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    read_index(&mut reader)
}

fn read_index<R: BufRead>(reader: &mut R) -> Result<Vec<CheckpointEntry>> {
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let first = first.trim_end();
    let count: usize = match first.strip_prefix("CKPT1 ") {
        Some(n) => n
            .parse()
            .map_err(|_| Error::Format(format!("bad checkpoint count {n:?}")))?,
        None => {
            return Err(Error::Format(format!(
                "bad checkpoint magic at byte offset 0: {first:?}"
            )))
        }
    };
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let parts: Vec<&str> = line.trim_end().split(' ').collect();
        if parts.len() != 5 {
            return Err(Error::Format(format!(
                "checkpoint index line {i} has {} fields, expected 5",
                parts.len()
            )));
        }
        let dtype = match parts[1] {
            "f32" => Dtype::F32,
            "f64" => Dtype::F64,
            other => return Err(Error::Format(format!("unknown dtype {other:?}"))),
        };
        let shape: Vec<usize> = parts[2]
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::Format(format!("bad extent {d:?}"))))
            .collect::<Result<_>>()?;
        let offset: u64 =
            parts[3].parse().map_err(|_| Error::Format("bad offset".into()))?;
        let len: u64 = parts[4].parse().map_err(|_| Error::Format("bad length".into()))?;
        entries.push(CheckpointEntry { name: parts[0].to_string(), dtype, shape, offset, len });
    }
    let mut marker = String::new();
    reader.read_line(&mut marker)?;
    if marker.trim_end() != "DATA" {
        return Err(Error::Format(format!(
            "expected DATA marker after index, found {:?}",
            marker.trim_end()
        )));
    }
    Ok(entries)
}

/// Rebuild a model from its config and overwrite every parameter from the
/// checkpoint. Every name must match and every shape must agree with what
/// the config implies; dtype must match `E`.
pub fn load_checkpoint<E: Scalar>(cfg: &ModelConfig, path: &Path) -> Result<Model<E>> {
    let model = Model::build(cfg, 0)?;
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let entries = read_index(&mut reader)?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;

    let params = model.named_params();
    if entries.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, model expects {}",
            entries.len(),
            params.len()
        )));
    }
    let width = E::DTYPE.byte_width();
    for (name, tensor) in &params {
        let entry = entries
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {name}")))?;
        if entry.dtype != E::DTYPE {
            return Err(Error::Format(format!(
                "parameter {name}: dtype {:?} in file, model wants {:?}",
                entry.dtype,
                E::DTYPE
            )));
        }
        if entry.shape != tensor.shape() {
            return Err(Error::Format(format!(
                "parameter {name}: shape {:?} in file, config implies {:?}",
                entry.shape,
                tensor.shape()
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "parameter {name}: payload range {start}..{end} exceeds {} bytes",
                payload.len()
            )));
        }
        if entry.len as usize != tensor.elem_count() * width {
            return Err(Error::Format(format!(
                "parameter {name}: {} bytes for {} elements",
                entry.len,
                tensor.elem_count()
            )));
        }
        let data: Vec<E> = payload[start..end].chunks_exact(width).map(E::read_le).collect();
        tensor.write_row_major(&data)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, DEFAULT_FD_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> StridedTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        StridedTensor::from_shape_vec(shape, (0..n).map(|_| rng.random::<f64>() - 0.5).collect())
            .unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = rand_tensor(&[2, 9], 1);
        let w = StridedTensor::zeros(&[2, 2, 5]);
        w.set(&[0, 0, 2], 1.0);
        w.set(&[1, 1, 2], 1.0);
        let b = StridedTensor::zeros(&[2, 1]);
        let y = conv1d_forward(&x, &w, &b, 1).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn ones_kernel_on_constant_input() {
        let c = 0.5;
        let x = StridedTensor::filled(&[1, 10], c);
        let w = StridedTensor::filled(&[1, 1, 5], 1.0);
        let b = StridedTensor::zeros(&[1, 1]);
        let y = conv1d_forward(&x, &w, &b, 1).unwrap();
        // Interior frames see all five taps; edges lose what zero padding eats.
        for frame in 2..8 {
            assert!((y.get(&[0, frame]) - 5.0 * c).abs() < 1e-12);
        }
        assert!((y.get(&[0, 0]) - 3.0 * c).abs() < 1e-12);
        assert!((y.get(&[0, 1]) - 4.0 * c).abs() < 1e-12);
        assert!((y.get(&[0, 9]) - 3.0 * c).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_sliding_window_oracle_exactly() {
        let (c_in, c_out, t, k, dil) = (3, 4, 12, 5, 2);
        let x = rand_tensor(&[c_in, t], 2);
        let w = rand_tensor(&[c_out, c_in, k], 3);
        let b = rand_tensor(&[c_out, 1], 4);
        let y = conv1d_forward(&x, &w, &b, dil).unwrap();
        let center = (k - 1) / 2;
        for o in 0..c_out {
            for frame in 0..t {
                let mut acc = b.get(&[o, 0]);
                for i in 0..c_in {
                    for tap in 0..k {
                        let src = frame as isize + (tap as isize - center as isize) * dil as isize;
                        if src >= 0 && (src as usize) < t {
                            acc += w.get(&[o, i, tap]) * x.get(&[i, src as usize]);
                        }
                    }
                }
                assert!(y.get(&[o, frame]).to_bits() == acc.to_bits());
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = rand_tensor(&[3, 8], 5);
        let w = rand_tensor(&[4, 2, 5], 6); // wrong in-channels
        let b = StridedTensor::zeros(&[4, 1]);
        assert!(matches!(conv1d_forward(&x, &w, &b, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = rand_tensor(&[2, 7], 7);
        let w = rand_tensor(&[3, 2, 3], 8);
        let b = rand_tensor(&[3, 1], 9);
        let report = finite_diff_check(
            &[(x, true), (w, true), (b, true)],
            DEFAULT_FD_EPS,
            |tape, vars| {
                let y = tape.conv1d(&vars[0], &vars[1], &vars[2], 2)?;
                let sq = tape.mul(&y, &y)?;
                Ok(tape.sum_all(&sq))
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn sinusoidal_embedding_is_deterministic_and_interleaved() {
        let emb = SinusoidalEmbedding::new(8).unwrap();
        let a = emb.columns::<f64>(40, 3);
        let b = emb.columns::<f64>(40, 3);
        assert!(a.bit_eq(&b));
        // Row 0/1 pair: sin/cos of the same angle.
        for c in 0..3 {
            let s = a.get(&[0, c]);
            let co = a.get(&[1, c]);
            assert!((s * s + co * co - 1.0).abs() < 1e-12);
        }
        assert!(SinusoidalEmbedding::new(7).is_err());
    }

    #[test]
    fn linear_param_count_example() {
        // 10 -> 5 with bias: 55 scalars.
        let lin = Linear::<f32> {
            w: StridedTensor::zeros(&[5, 10]),
            b: StridedTensor::zeros(&[5, 1]),
        };
        assert_eq!(lin.w.elem_count() + lin.b.elem_count(), 55);
    }

    #[test]
    fn tdnn_parameter_count_near_58k() {
        let cfg = ModelConfig { kind: ModelKind::TdnnBaseline, ..Default::default() };
        let model = Model::<f32>::build(&cfg, 0).unwrap();
        let n = model.count_params() as f64;
        assert!((n - 58_000.0).abs() / 58_000.0 < 0.15, "got {n}");
    }

    #[test]
    fn transformer_parameter_counts_and_strict_ordering() {
        let base = ModelConfig::default();
        let count = |pos: PosMode| {
            let mut cfg = base.clone();
            cfg.stream.pos_mode = pos;
            Model::<f32>::build(&cfg, 0).unwrap().count_params() as f64
        };
        let plain = count(PosMode::None);
        let abs = count(PosMode::Absolute);
        let key = count(PosMode::RelKey);
        let keyval = count(PosMode::RelKeyValue);
        assert!((plain - 48_000.0).abs() / 48_000.0 < 0.15, "plain {plain}");
        assert_eq!(plain, abs, "sinusoids are parameter-free");
        assert!((key - 52_000.0).abs() / 52_000.0 < 0.15, "key {key}");
        assert!((keyval - 57_000.0).abs() / 57_000.0 < 0.15, "key+value {keyval}");
        assert!(plain < key && key < keyval, "strict ordering violated");
    }

    #[test]
    fn tied_kv_counts_once() {
        let mut cfg = ModelConfig::default();
        let untied = Model::<f32>::build(&cfg, 0).unwrap().count_params();
        cfg.transformer.tie_kv = true;
        let tied = Model::<f32>::build(&cfg, 0).unwrap().count_params();
        // One 32x32 projection per block disappears.
        assert_eq!(untied - tied, 3 * 32 * 32);
    }

    #[test]
    fn shared_embedding_tables_count_once() {
        let mut cfg = ModelConfig::default();
        cfg.stream.pos_mode = PosMode::RelKey;
        let per_layer = Model::<f32>::build(&cfg, 0).unwrap().count_params();
        cfg.transformer.rel_shared_all_layers = true;
        let shared = Model::<f32>::build(&cfg, 0).unwrap().count_params();
        let table = 8 * (2 * cfg.stream.max_extended_key() - 1);
        assert_eq!(per_layer - shared, 2 * table, "two of three per-layer tables collapse");
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let cfg = ModelConfig::default();
        let a = Model::<f32>::build(&cfg, 7).unwrap();
        let b = Model::<f32>::build(&cfg, 7).unwrap();
        let c = Model::<f32>::build(&cfg, 8).unwrap();
        for ((_, ta), (_, tb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert!(ta.bit_eq(tb));
        }
        let differs = a
            .named_params()
            .iter()
            .zip(c.named_params().iter())
            .any(|((_, ta), (_, tc))| !ta.bit_eq(tc));
        assert!(differs);
    }

    #[test]
    fn zero_input_tdnn_is_constant_on_interior_frames() {
        // Zero input turns every layer into bias propagation; interior
        // frames (full receptive field) are translation-invariant. Edge
        // frames differ once a layer's constant output meets zero padding.
        let cfg = ModelConfig { kind: ModelKind::TdnnBaseline, input_dim: 6, ..Default::default() };
        let model = Model::<f64>::build(&cfg, 3).unwrap();
        let field = match &model {
            Model::Tdnn(m) => m.receptive_field(),
            _ => unreachable!(),
        };
        assert_eq!(field, 30);
        let t = 70;
        let tape = Tape::eval();
        let x = tape.constant(StridedTensor::zeros(&[6, t]));
        let y = model.forward_full(&tape, &x).unwrap();
        for r in 0..cfg.n_classes {
            let reference = y.value().get(&[r, field]);
            for c in field..(t - field) {
                assert_eq!(y.value().get(&[r, c]), reference);
            }
        }
    }

    #[test]
    fn forward_shapes_are_class_by_time() {
        let mut cfg = ModelConfig::default();
        cfg.input_dim = 9;
        cfg.transformer.frontend_channels = vec![10, 12];
        cfg.transformer.d_model = 12;
        cfg.transformer.n_heads = 3;
        cfg.transformer.ff_width = 16;
        cfg.transformer.attention_layers = 2;
        cfg.stream.chunk_size = 5;
        cfg.stream.look_ahead_chunks = 0;
        let model = Model::<f64>::build(&cfg, 4).unwrap();
        let tape = Tape::eval();
        let x = tape.constant(rand_tensor(&[9, 17], 10));
        let full = model.forward_full(&tape, &x).unwrap();
        assert_eq!(full.shape(), &[4, 17]);
        let streamed = model.forward_streaming_full(&tape, &x).unwrap();
        assert_eq!(streamed.shape(), &[4, 17]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut cfg = ModelConfig::default();
        cfg.stream.pos_mode = PosMode::RelKeyValue;
        let model = Model::<f32>::build(&cfg, 11).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint::<f32>(&cfg, &path).unwrap();
        for ((na, ta), (nb, tb)) in model.named_params().iter().zip(loaded.named_params().iter())
        {
            assert_eq!(na, nb);
            assert!(ta.bit_eq(tb), "{na} changed across save/load");
        }
    }

    #[test]
    fn checkpoint_shape_validation_rejects_mismatched_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = ModelConfig::default();
        let model = Model::<f32>::build(&cfg, 12).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let mut other = cfg.clone();
        other.transformer.ff_width = 64;
        assert!(matches!(load_checkpoint::<f32>(&other, &path), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_index_is_readable_standalone() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = ModelConfig { kind: ModelKind::TdnnBaseline, ..Default::default() };
        let model = Model::<f32>::build(&cfg, 13).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let index = read_checkpoint_index(&path).unwrap();
        assert_eq!(index.len(), model.named_params().len());
        assert_eq!(index[0].name, "conv.0.weight");
        assert_eq!(index[0].shape, vec![48, 40, 5]);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // Compact two-block model, all parameters and the input checked.
        let mut cfg = ModelConfig::default();
        cfg.input_dim = 4;
        cfg.n_classes = 3;
        cfg.transformer.frontend_channels = vec![5, 6];
        cfg.transformer.d_model = 6;
        cfg.transformer.n_heads = 2;
        cfg.transformer.ff_width = 8;
        cfg.transformer.attention_layers = 2;
        cfg.stream.chunk_size = 6;
        cfg.stream.pos_mode = PosMode::None;
        let model = match Model::<f64>::build(&cfg, 14).unwrap() {
            Model::Transformer(m) => m,
            _ => unreachable!(),
        };
        // A healthy input scale keeps pre-norm variance away from zero,
        // where layer-norm curvature would swamp the central difference;
        // enough frames keep every feed-forward unit live, which keeps
        // gradient magnitudes above the difference's noise floor.
        let t_frames = 40;
        let x = rand_tensor(&[4, t_frames], 15).mul_scalar(3.0);
        let readout = {
            let raw = rand_tensor(&[3, t_frames], 16);
            raw.map(|u| if u >= 0.0 { 0.5 + u } else { -0.5 + u })
        };

        let mut leaves: Vec<(StridedTensor<f64>, bool)> = vec![(x, true)];
        let named = Model::Transformer(model.clone()).named_params();
        for (_, t) in &named {
            leaves.push((t.clone(), true));
        }
        let n_frontend = model.frontend.len();
        let n_blocks = model.blocks.len();
        let dilations: Vec<usize> = model.frontend.iter().map(|c| c.dilation).collect();
        let n_heads = model.cfg.transformer.n_heads;
        // Assemble the bound model straight from the leaf vars, in
        // named_params order, so analytic gradients land on them.
        let report = finite_diff_check(&leaves, DEFAULT_FD_EPS, move |tape, vars| {
            let mut it = vars.iter().skip(1).cloned();
            let mut grab = || it.next().expect("leaf per parameter");
            let mut frontend = Vec::new();
            for layer in 0..n_frontend {
                frontend.push(BoundConv {
                    weight: grab(),
                    bias: grab(),
                    dilation: dilations[layer],
                });
            }
            let mut blocks = Vec::new();
            for _ in 0..n_blocks {
                blocks.push(BoundBlock {
                    ln1_gamma: grab(),
                    ln1_beta: grab(),
                    attn: BoundAttention {
                        w_q: grab(),
                        w_k: grab(),
                        w_v: grab(),
                        w_o: Some(grab()),
                        n_heads,
                        tie_kv: false,
                    },
                    rel_emb: None,
                    ln2_gamma: grab(),
                    ln2_beta: grab(),
                    ff_w1: grab(),
                    ff_b1: grab(),
                    ff_w2: grab(),
                    ff_b2: grab(),
                });
            }
            let head = BoundLinear { w: grab(), b: grab() };
            let bound = BoundTransformer {
                frontend,
                blocks,
                head,
                sinusoidal: None,
                pos_mode: PosMode::None,
                tie_kv: false,
            };
            let logits = bound.forward_full(tape, &vars[0])?;
            let weighted = tape.mul(&logits, &tape.constant(readout.clone()))?;
            Ok(tape.sum_all(&weighted))
        });
        let report = report.unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
