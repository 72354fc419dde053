//! The separator network and its pooled-activation embedding.
//!
//! Layout conventions: 2-D feature maps are `(channels, frames, bins)`;
//! inside the conformer stack activations are token arrays
//! `(frames, bins, channels)`, permuted to `(bins, frames, channels)` for the
//! time-axis stage so that attention always runs along axis 1.
//!
//! ```text
//! (re, im, |X|) ─ 1x1 conv ─ freq-strided conv ─ dense block ─ + freq embedding   ← tap: encoder
//!      └─ conformer block 1 … N (time stage, then frequency stage)              ← taps: blocks
//!          ├─ mask head:    dense ─ sub-pixel up ─ 1x1 ─ 2·sigmoid ─ ⊙ X ─┐
//!          └─ complex head: dense ─ sub-pixel up ─ 1x1 ──────────────────── + ─ Y ─ iSTFT ─ y
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayD, ArrayView3, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Conv2dGeometry, Tape, Var};
use crate::dsp::{DspError, Spectrogram, StftConfig, StftPlan};

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("invalid separator config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in {0}")]
    NonFinite(String),
    #[error("checkpoint config mismatch: expected {expected}, found {found}")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderStyle {
    /// Magnitude mask applied to the input spectrum plus an additive complex refinement.
    MaskPlusComplex,
    ComplexOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparatorConfig {
    pub channels: usize,
    pub num_blocks: usize,
    /// 1-based conformer blocks pooled as the middle and last taps.
    /// Defaults to `[2, num_blocks]`.
    pub tap_blocks: Option<[usize; 2]>,
    pub attention_heads: usize,
    pub freq_downsample: usize,
    pub decoder_style: DecoderStyle,
    pub dense_depth: usize,
    pub ffn_mult: usize,
    pub conv_kernel: usize,
    /// Learned per-bin embedding added to the encoder output.
    pub freq_embedding: bool,
    /// Optional power-law compression exponent for the input magnitudes.
    pub input_compression: Option<f64>,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            num_blocks: 4,
            tap_blocks: None,
            attention_heads: 4,
            freq_downsample: 2,
            decoder_style: DecoderStyle::MaskPlusComplex,
            dense_depth: 4,
            ffn_mult: 4,
            conv_kernel: 31,
            freq_embedding: true,
            input_compression: None,
        }
    }
}

impl SeparatorConfig {
    pub fn taps(&self) -> [usize; 2] {
        self.tap_blocks.unwrap_or([2, self.num_blocks])
    }

    pub fn embedding_dim(&self) -> usize {
        3 * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.channels == 0 {
            return bad("channels must be > 0".into());
        }
        if self.num_blocks < 2 {
            return bad(format!("num_blocks = {} but at least 2 are needed", self.num_blocks));
        }
        let taps = self.taps();
        if taps.iter().any(|&b| b == 0 || b > self.num_blocks) {
            return bad(format!("tap_blocks {taps:?} outside 1..={}", self.num_blocks));
        }
        if self.attention_heads == 0 || !self.channels.is_multiple_of(self.attention_heads) {
            return bad(format!(
                "attention_heads = {} must divide channels = {}",
                self.attention_heads, self.channels
            ));
        }
        if self.freq_downsample == 0 {
            return bad("freq_downsample must be >= 1".into());
        }
        if self.dense_depth == 0 || self.ffn_mult == 0 {
            return bad("dense_depth and ffn_mult must be >= 1".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv_kernel = {} must be odd", self.conv_kernel));
        }
        if let Some(c) = self.input_compression {
            if !(c > 0.0 && c <= 1.0) {
                return bad(format!("input_compression = {c} must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Per-channel means of the three tapped activation maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledTaps {
    pub encoder_vec: Vec<f64>,
    pub mid_vec: Vec<f64>,
    pub last_vec: Vec<f64>,
}

/// Concatenates the taps into the `3·channels` embedding.
pub fn pooled_embedding(taps: &PooledTaps) -> Vec<f64> {
    let mut v = Vec::with_capacity(taps.encoder_vec.len() * 3);
    v.extend_from_slice(&taps.encoder_vec);
    v.extend_from_slice(&taps.mid_vec);
    v.extend_from_slice(&taps.last_vec);
    v
}

/// Mean over every axis except `channel_axis` of a rank-3 map.
pub fn pool_channels(map: ArrayView3<f64>, channel_axis: usize) -> Vec<f64> {
    map.axis_iter(Axis(channel_axis))
        .map(|c| c.sum() / c.len() as f64)
        .collect()
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: ArrayD<f64>,
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    w: usize,
    b: usize,
    geom: Conv2dGeometry,
}

#[derive(Debug, Clone, Copy)]
struct LinearLayer {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
struct DenseBlock {
    layers: Vec<(ConvLayer, usize)>,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    norm: Norm,
    up: LinearLayer,
    down: LinearLayer,
}

#[derive(Debug, Clone, Copy)]
struct SelfAttention {
    norm: Norm,
    qkv: LinearLayer,
    out: LinearLayer,
}

#[derive(Debug, Clone, Copy)]
struct ConvModule {
    norm: Norm,
    pointwise_in: LinearLayer,
    depthwise_w: usize,
    depthwise_b: usize,
    pointwise_out: LinearLayer,
}

#[derive(Debug, Clone, Copy)]
struct ConformerLayer {
    ff1: FeedForward,
    attn: SelfAttention,
    conv: ConvModule,
    ff2: FeedForward,
    post_norm: Norm,
}

#[derive(Debug, Clone, Copy)]
struct TwoStageBlock {
    time: ConformerLayer,
    freq: ConformerLayer,
}

#[derive(Debug, Clone)]
struct Encoder {
    in_conv: ConvLayer,
    in_act: usize,
    down_conv: ConvLayer,
    down_act: usize,
    dense: DenseBlock,
    freq_embedding: Option<usize>,
}

#[derive(Debug, Clone)]
struct DecoderHead {
    dense: DenseBlock,
    up_conv: ConvLayer,
    up_act: usize,
    out_conv: ConvLayer,
}

struct Builder {
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let rng = &mut self.rng;
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound));
        self.push(name, value)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> usize {
        self.push(name, ArrayD::from_elem(IxDyn(shape), v))
    }

    fn push(&mut self, name: String, value: ArrayD<f64>) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kt: usize, kf: usize, geom: Conv2dGeometry) -> ConvLayer {
        let bound = 1.0 / ((cin * kt * kf) as f64).sqrt();
        ConvLayer {
            w: self.uniform(format!("{name}.weight"), &[cout, cin, kt, kf], bound),
            b: self.uniform(format!("{name}.bias"), &[cout], bound),
            geom,
        }
    }

    fn prelu(&mut self, name: &str, c: usize) -> usize {
        self.constant(format!("{name}.alpha"), &[c], 0.25)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinearLayer {
        let bound = 1.0 / (din as f64).sqrt();
        LinearLayer {
            w: self.uniform(format!("{name}.weight"), &[din, dout], bound),
            b: self.uniform(format!("{name}.bias"), &[dout], bound),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.constant(format!("{name}.gamma"), &[d], 1.0),
            beta: self.constant(format!("{name}.beta"), &[d], 0.0),
        }
    }

    fn dense(&mut self, name: &str, c: usize, depth: usize) -> DenseBlock {
        let layers = (0..depth)
            .map(|i| {
                let dil = 1 << i;
                let geom = Conv2dGeometry {
                    stride_f: 1,
                    dilation_t: dil,
                    pad_t: (dil, 0),
                    pad_f: (1, 1),
                };
                let conv = self.conv(&format!("{name}.{i}.conv"), c * (i + 1), c, 2, 3, geom);
                let act = self.prelu(&format!("{name}.{i}.act"), c);
                (conv, act)
            })
            .collect();
        DenseBlock { layers }
    }

    fn feed_forward(&mut self, name: &str, d: usize, mult: usize) -> FeedForward {
        FeedForward {
            norm: self.norm(&format!("{name}.norm"), d),
            up: self.linear(&format!("{name}.up"), d, d * mult),
            down: self.linear(&format!("{name}.down"), d * mult, d),
        }
    }

    fn conformer(&mut self, name: &str, cfg: &SeparatorConfig) -> ConformerLayer {
        let d = cfg.channels;
        let k = cfg.conv_kernel;
        ConformerLayer {
            ff1: self.feed_forward(&format!("{name}.ff1"), d, cfg.ffn_mult),
            attn: SelfAttention {
                norm: self.norm(&format!("{name}.attn.norm"), d),
                qkv: self.linear(&format!("{name}.attn.qkv"), d, 3 * d),
                out: self.linear(&format!("{name}.attn.out"), d, d),
            },
            conv: ConvModule {
                norm: self.norm(&format!("{name}.conv.norm"), d),
                pointwise_in: self.linear(&format!("{name}.conv.pointwise_in"), d, 2 * d),
                depthwise_w: self.uniform(format!("{name}.conv.depthwise.weight"), &[d, k], 1.0 / (k as f64).sqrt()),
                depthwise_b: self.uniform(format!("{name}.conv.depthwise.bias"), &[d], 1.0 / (k as f64).sqrt()),
                pointwise_out: self.linear(&format!("{name}.conv.pointwise_out"), d, d),
            },
            ff2: self.feed_forward(&format!("{name}.ff2"), d, cfg.ffn_mult),
            post_norm: self.norm(&format!("{name}.post_norm"), d),
        }
    }

    fn head(&mut self, name: &str, cfg: &SeparatorConfig, out_planes: usize) -> DecoderHead {
        let c = cfg.channels;
        let r = cfg.freq_downsample;
        let up_geom = Conv2dGeometry {
            pad_f: (1, 1),
            ..Conv2dGeometry::POINTWISE
        };
        DecoderHead {
            dense: self.dense(&format!("{name}.dense"), c, cfg.dense_depth),
            up_conv: self.conv(&format!("{name}.up_conv"), c, c * r, 1, 3, up_geom),
            up_act: self.prelu(&format!("{name}.up_act"), c),
            out_conv: self.conv(&format!("{name}.out_conv"), c, out_planes, 1, 1, Conv2dGeometry::POINTWISE),
        }
    }
}

/// Outputs of one inference pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub y: Vec<f64>,
    pub spec: Spectrogram,
    pub taps: PooledTaps,
}

/// Handles to the differentiable outputs of a pass recorded on a [`Tape`].
pub struct TapeForward {
    /// Time-domain estimate, shape `(length)`.
    pub y: Var,
    /// Spectral estimate, shape `(2, frames, bins)` holding (real, imag).
    pub spec: Var,
    pub taps: PooledTaps,
    /// Tape handles of every parameter, in [`SeparatorNet::param_names`] order.
    pub params: Vec<Var>,
}

/// Parameter count and layout summary.
#[derive(Debug, Clone, PartialEq)]
pub struct NetDescription {
    pub parameter_count: usize,
    pub tensors: usize,
    pub embedding_dim: usize,
    pub downsampled_bins: usize,
}

pub struct SeparatorNet {
    config: SeparatorConfig,
    stft: StftConfig,
    plan: Arc<StftPlan>,
    params: Vec<Param>,
    encoder: Encoder,
    blocks: Vec<TwoStageBlock>,
    mask_head: Option<DecoderHead>,
    complex_head: DecoderHead,
}

impl std::fmt::Debug for SeparatorNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SeparatorNet")
            .field("config", &self.config)
            .field("stft", &self.stft)
            .field("parameters", &self.describe().parameter_count)
            .finish()
    }
}

impl SeparatorNet {
    pub fn new(config: &SeparatorConfig, stft: &StftConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let [mid, last] = config.taps();
        if mid == last {
            log::warn!("middle and last taps both read conformer block {mid}; half the embedding is duplicated");
        }
        let plan = Arc::new(StftPlan::new(stft)?);
        let bins = stft.bins();
        let c = config.channels;
        let r = config.freq_downsample;
        let fd = downsampled_bins(bins, r);
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let down_geom = Conv2dGeometry {
            stride_f: r,
            pad_f: (1, 1),
            ..Conv2dGeometry::POINTWISE
        };
        let in_conv = b.conv("encoder.in_conv", 3, c, 1, 1, Conv2dGeometry::POINTWISE);
        let in_act = b.prelu("encoder.in_act", c);
        let down_conv = b.conv("encoder.down_conv", c, c, 1, 3, down_geom);
        let down_act = b.prelu("encoder.down_act", c);
        let dense = b.dense("encoder.dense", c, config.dense_depth);
        let freq_embedding = config.freq_embedding.then(|| {
            let normal = Normal::new(0.0, 0.1).expect("valid normal");
            let rng = &mut b.rng;
            let value = Array2::from_shape_fn((c, fd), |_| normal.sample(rng)).into_dyn();
            b.push("encoder.freq_embedding".into(), value)
        });
        let encoder = Encoder {
            in_conv,
            in_act,
            down_conv,
            down_act,
            dense,
            freq_embedding,
        };
        let blocks = (0..config.num_blocks)
            .map(|i| TwoStageBlock {
                time: b.conformer(&format!("blocks.{i}.time"), config),
                freq: b.conformer(&format!("blocks.{i}.freq"), config),
            })
            .collect();
        let mask_head = match config.decoder_style {
            DecoderStyle::MaskPlusComplex => Some(b.head("mask_head", config, 1)),
            DecoderStyle::ComplexOnly => None,
        };
        let complex_head = b.head("complex_head", config, 2);
        Ok(Self {
            config: config.clone(),
            stft: stft.clone(),
            plan,
            params: b.params,
            encoder,
            blocks,
            mask_head,
            complex_head,
        })
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.config
    }

    pub fn stft_config(&self) -> &StftConfig {
        &self.stft
    }

    pub fn stft_plan(&self) -> &StftPlan {
        &self.plan
    }

    pub fn describe(&self) -> NetDescription {
        NetDescription {
            parameter_count: self.params.iter().map(|p| p.value.len()).sum(),
            tensors: self.params.len(),
            embedding_dim: self.config.embedding_dim(),
            downsampled_bins: downsampled_bins(self.stft.bins(), self.config.freq_downsample),
        }
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn param_values(&self) -> impl Iterator<Item = &ArrayD<f64>> {
        self.params.iter().map(|p| &p.value)
    }

    pub fn param_values_mut(&mut self) -> impl Iterator<Item = &mut ArrayD<f64>> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    fn check_features(&self, features: &Array3<f64>, length: usize) -> Result<()> {
        let (planes, frames, bins) = features.dim();
        if planes != 3 || bins != self.stft.bins() {
            return Err(ModelError::ShapeMismatch(format!(
                "features {planes}x{frames}x{bins}, expected 3 x frames x {}",
                self.stft.bins()
            )));
        }
        if frames != self.stft.frames(length) {
            return Err(ModelError::ShapeMismatch(format!(
                "{frames} frames but a {length}-sample output needs {}",
                self.stft.frames(length)
            )));
        }
        Ok(())
    }

    fn register_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    fn conv(tape: &mut Tape, p: &[Var], x: Var, layer: &ConvLayer) -> Var {
        tape.conv2d(x, p[layer.w], p[layer.b], layer.geom)
    }

    fn dense(tape: &mut Tape, p: &[Var], x: Var, block: &DenseBlock) -> Var {
        let mut skip = x;
        let mut out = x;
        for (i, (conv, act)) in block.layers.iter().enumerate() {
            let h = Self::conv(tape, p, skip, conv);
            out = tape.prelu(h, p[*act]);
            if i + 1 < block.layers.len() {
                skip = tape.concat_channels(&[out, skip]);
            }
        }
        out
    }

    fn linear(tape: &mut Tape, p: &[Var], x: Var, l: &LinearLayer) -> Var {
        tape.linear(x, p[l.w], p[l.b])
    }

    fn norm(tape: &mut Tape, p: &[Var], x: Var, n: &Norm) -> Var {
        tape.layer_norm(x, p[n.gamma], p[n.beta])
    }

    fn feed_forward(tape: &mut Tape, p: &[Var], x: Var, ff: &FeedForward) -> Var {
        let h = Self::norm(tape, p, x, &ff.norm);
        let h = Self::linear(tape, p, h, &ff.up);
        let h = tape.silu(h);
        Self::linear(tape, p, h, &ff.down)
    }

    fn conformer(&self, tape: &mut Tape, p: &[Var], x: Var, layer: &ConformerLayer) -> Var {
        let h = Self::feed_forward(tape, p, x, &layer.ff1);
        let x = tape.add_scaled(x, h, 0.5);

        let h = Self::norm(tape, p, x, &layer.attn.norm);
        let h = Self::linear(tape, p, h, &layer.attn.qkv);
        let h = tape.attention(h, self.config.attention_heads);
        let h = Self::linear(tape, p, h, &layer.attn.out);
        let x = tape.add(x, h);

        let cm = &layer.conv;
        let h = Self::norm(tape, p, x, &cm.norm);
        let h = Self::linear(tape, p, h, &cm.pointwise_in);
        let h = tape.glu(h);
        let h = tape.depthwise_conv_seq(h, p[cm.depthwise_w], p[cm.depthwise_b]);
        let h = tape.silu(h);
        let h = Self::linear(tape, p, h, &cm.pointwise_out);
        let x = tape.add(x, h);

        let h = Self::feed_forward(tape, p, x, &layer.ff2);
        let x = tape.add_scaled(x, h, 0.5);
        Self::norm(tape, p, x, &layer.post_norm)
    }

    /// One two-stage block on `(frames, bins, channels)` tokens.
    fn two_stage(&self, tape: &mut Tape, p: &[Var], x: Var, block: &TwoStageBlock) -> Var {
        let xt = tape.permute(x, &[1, 0, 2]);
        let h = self.conformer(tape, p, xt, &block.time);
        let xt = tape.add(xt, h);
        let xf = tape.permute(xt, &[1, 0, 2]);
        let h = self.conformer(tape, p, xf, &block.freq);
        tape.add(xf, h)
    }

    fn head(&self, tape: &mut Tape, p: &[Var], x: Var, head: &DecoderHead, bins: usize) -> Var {
        let h = Self::dense(tape, p, x, &head.dense);
        let h = Self::conv(tape, p, h, &head.up_conv);
        let h = tape.subpixel_freq(h, self.config.freq_downsample, bins);
        let h = tape.prelu(h, p[head.up_act]);
        Self::conv(tape, p, h, &head.out_conv)
    }

    /// Encoder and conformer stack; returns the last block's tokens and the taps.
    fn trunk(&self, tape: &mut Tape, p: &[Var], features: &Array3<f64>) -> Result<(Var, PooledTaps)> {
        let x = tape.leaf(features.clone().into_dyn());
        let enc = &self.encoder;
        let h = Self::conv(tape, p, x, &enc.in_conv);
        let h = tape.prelu(h, p[enc.in_act]);
        let h = Self::conv(tape, p, h, &enc.down_conv);
        let h = tape.prelu(h, p[enc.down_act]);
        let mut h = Self::dense(tape, p, h, &enc.dense);
        if let Some(e) = enc.freq_embedding {
            h = tape.add_freq_embedding(h, p[e]);
        }
        let encoder_vec = self.pool(tape, h, 0, "encoder")?;
        let mut tokens = tape.permute(h, &[1, 2, 0]);
        let [mid_tap, last_tap] = self.config.taps();
        let mut mid_vec = Vec::new();
        let mut last_vec = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            tokens = self.two_stage(tape, p, tokens, block);
            if i + 1 == mid_tap {
                mid_vec = self.pool(tape, tokens, 2, "conformer block")?;
            }
            if i + 1 == last_tap {
                last_vec = self.pool(tape, tokens, 2, "conformer block")?;
            }
        }
        Ok((
            tokens,
            PooledTaps {
                encoder_vec,
                mid_vec,
                last_vec,
            },
        ))
    }

    fn pool(&self, tape: &Tape, v: Var, channel_axis: usize, what: &str) -> Result<Vec<f64>> {
        let map = tape.value(v).view().into_dimensionality().expect("rank-3 map");
        let pooled = pool_channels(map, channel_axis);
        if pooled.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite(what.into()));
        }
        Ok(pooled)
    }

    /// Records a full pass (trunk, decoder, inverse STFT) on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, features: &Array3<f64>, length: usize) -> Result<TapeForward> {
        self.check_features(features, length)?;
        let bins = self.stft.bins();
        let p = self.register_params(tape);
        let (tokens, taps) = self.trunk(tape, &p, features)?;
        let maps = tape.permute(tokens, &[2, 0, 1]);
        let complex = self.head(tape, &p, maps, &self.complex_head, bins);
        let spec = match &self.mask_head {
            Some(mh) => {
                let m = self.head(tape, &p, maps, mh, bins);
                let mask = tape.scaled_sigmoid(m, 2.0);
                let planes = tape.leaf(input_planes(features, self.config.input_compression).into_dyn());
                let masked = tape.mask_planes(mask, planes);
                tape.add(masked, complex)
            }
            None => complex,
        };
        if tape.value(spec).iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("decoder output".into()));
        }
        let y = istft_op(tape, self.plan.clone(), spec, length)?;
        Ok(TapeForward { y, spec, taps, params: p })
    }

    /// Deterministic inference pass.
    pub fn forward(&self, features: &Array3<f64>, length: usize) -> Result<ForwardOutput> {
        let mut tape = Tape::inference();
        let out = self.forward_on_tape(&mut tape, features, length)?;
        let y = tape.value(out.y).iter().copied().collect();
        let s = tape.value(out.spec);
        Ok(ForwardOutput {
            y,
            spec: Spectrogram {
                real: s.index_axis(Axis(0), 0).to_owned().into_dimensionality().expect("plane"),
                imag: s.index_axis(Axis(0), 1).to_owned().into_dimensionality().expect("plane"),
            },
            taps: out.taps,
        })
    }

    /// Pooled taps only; the decoder is not evaluated.
    pub fn taps(&self, features: &Array3<f64>) -> Result<PooledTaps> {
        let (planes, _, bins) = features.dim();
        if planes != 3 || bins != self.stft.bins() {
            return Err(ModelError::ShapeMismatch(format!(
                "features {planes} x _ x {bins}, expected 3 x _ x {}",
                self.stft.bins()
            )));
        }
        let mut tape = Tape::inference();
        let p = self.register_params(&mut tape);
        Ok(self.trunk(&mut tape, &p, features)?.1)
    }

    pub fn embed(&self, features: &Array3<f64>) -> Result<Vec<f64>> {
        Ok(pooled_embedding(&self.taps(features)?))
    }

    pub fn save_params(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&CheckpointHeader {
            model: self.config.clone(),
            stft: self.stft.clone(),
        })
        .expect("config serialises");
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.value.ndim() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.value.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint, optionally insisting on a specific architecture.
    pub fn load_params(path: &Path, expected: Option<&SeparatorConfig>) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ModelError::CheckpointNotFound(path.display().to_string()),
            _ => ModelError::Io(e),
        })?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::CorruptCheckpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r, "version")?);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(read_array(&mut r, "header length")?) as usize;
        if header_len > 1 << 20 {
            return Err(ModelError::CorruptCheckpoint("implausible header length".into()));
        }
        let mut header = vec![0u8; header_len];
        read_exact(&mut r, &mut header, "header")?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| ModelError::CorruptCheckpoint(format!("header: {e}")))?;
        if let Some(exp) = expected {
            if exp != &header.model {
                return Err(ModelError::ConfigMismatch {
                    expected: serde_json::to_string(exp).expect("serialises"),
                    found: serde_json::to_string(&header.model).expect("serialises"),
                });
            }
        }
        let mut net = SeparatorNet::new(&header.model, &header.stft, 0)?;
        let count = u64::from_le_bytes(read_array(&mut r, "tensor count")?) as usize;
        if count != net.params.len() {
            return Err(ModelError::CorruptCheckpoint(format!(
                "{count} tensors, architecture has {}",
                net.params.len()
            )));
        }
        for p in net.params.iter_mut() {
            let name_len = u32::from_le_bytes(read_array(&mut r, "name length")?) as usize;
            if name_len > 4096 {
                return Err(ModelError::CorruptCheckpoint("implausible name length".into()));
            }
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name, "name")?;
            if name != p.name.as_bytes() {
                return Err(ModelError::CorruptCheckpoint(format!(
                    "tensor {:?} where {} was expected",
                    String::from_utf8_lossy(&name),
                    p.name
                )));
            }
            let ndim = u32::from_le_bytes(read_array(&mut r, "rank")?) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim.min(8) {
                shape.push(u64::from_le_bytes(read_array(&mut r, "shape")?) as usize);
            }
            if shape != p.value.shape() {
                return Err(ModelError::CorruptCheckpoint(format!(
                    "{} has shape {shape:?}, expected {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            for v in p.value.iter_mut() {
                *v = f64::from_le_bytes(read_array(&mut r, "tensor data")?);
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(ModelError::CorruptCheckpoint("trailing bytes".into()));
        }
        Ok(net)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SEPADNET";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: SeparatorConfig,
    stft: StftConfig,
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => ModelError::CorruptCheckpoint(format!("truncated while reading {what}")),
        _ => ModelError::Io(e),
    })
}

fn read_array<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b, what)?;
    Ok(b)
}

pub fn downsampled_bins(bins: usize, factor: usize) -> usize {
    (bins + 2 - 3) / factor + 1
}

/// Recovers the uncompressed (real, imag) planes from the input features.
fn input_planes(features: &Array3<f64>, compression: Option<f64>) -> Array3<f64> {
    let mut planes = features.slice(ndarray::s![0..2, .., ..]).to_owned();
    if let Some(c) = compression {
        let mag = features.index_axis(Axis(0), 2);
        for mut p in planes.outer_iter_mut() {
            ndarray::Zip::from(&mut p).and(&mag).for_each(|v, &mc| {
                if mc > 0.0 {
                    *v *= mc.powf(1.0 / c) / mc;
                }
            });
        }
    }
    planes
}

/// Inverse STFT as a tape operation on a `(2, frames, bins)` node.
pub fn istft_op(tape: &mut Tape, plan: Arc<StftPlan>, spec: Var, length: usize) -> Result<Var> {
    let s = tape.value(spec);
    if s.ndim() != 3 || s.shape()[0] != 2 {
        return Err(ModelError::ShapeMismatch(format!("spectral node shape {:?}", s.shape())));
    }
    let frames = s.shape()[1];
    let real = s.index_axis(Axis(0), 0).into_dimensionality().expect("plane");
    let imag = s.index_axis(Axis(0), 1).into_dimensionality().expect("plane");
    let y = plan.istft_planes(real, imag, length)?;
    let y = ArrayD::from_shape_vec(IxDyn(&[length]), y).expect("length");
    Ok(tape.push_op(y, move |_, g, grads| {
        let g = g.as_slice().expect("contiguous");
        let (dr, di) = plan.istft_adjoint(g, frames).expect("shape checked in forward");
        let d = ndarray::stack(Axis(0), &[dr.view(), di.view()]).expect("planes");
        grads.accumulate(spec, d.into_dyn());
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::make_input_features;

    fn small_stft() -> StftConfig {
        StftConfig {
            n_fft: 32,
            hop: 8,
            ..StftConfig::default()
        }
    }

    fn desk(channels: usize) -> SeparatorConfig {
        SeparatorConfig {
            channels,
            num_blocks: 2,
            attention_heads: 2,
            dense_depth: 1,
            ffn_mult: 2,
            conv_kernel: 3,
            ..SeparatorConfig::default()
        }
    }

    fn features(stft: &StftConfig, len: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        make_input_features(&crate::dsp::stft(&x, stft).unwrap(), None)
    }

    #[test]
    fn config_validation() {
        assert!(SeparatorConfig::default().validate().is_ok());
        assert_eq!(SeparatorConfig::default().taps(), [2, 4]);
        let one_block = SeparatorConfig {
            num_blocks: 1,
            ..SeparatorConfig::default()
        };
        assert!(one_block.validate().is_err());
        let bad_tap = SeparatorConfig {
            tap_blocks: Some([0, 4]),
            ..SeparatorConfig::default()
        };
        assert!(bad_tap.validate().is_err());
        let bad_heads = SeparatorConfig {
            attention_heads: 3,
            ..SeparatorConfig::default()
        };
        assert!(bad_heads.validate().is_err());
    }

    #[test]
    fn output_shapes_and_determinism() {
        let stft = small_stft();
        let net = SeparatorNet::new(&desk(4), &stft, 1).unwrap();
        let len = 200;
        let f = features(&stft, len, 2);
        let a = net.forward(&f, len).unwrap();
        let b = net.forward(&f, len).unwrap();
        assert_eq!(a.y.len(), len);
        assert_eq!(a.spec.real.dim(), (stft.frames(len), stft.bins()));
        assert_eq!(a.taps.encoder_vec.len(), 4);
        assert_eq!(a.taps.mid_vec.len(), 4);
        assert_eq!(a.taps.last_vec.len(), 4);
        assert_eq!(a.y, b.y);
        assert_eq!(a.spec, b.spec);
        assert_eq!(a.taps, b.taps);
        assert_eq!(net.embed(&f).unwrap(), pooled_embedding(&a.taps));
    }

    #[test]
    fn y_is_inverse_stft_of_spectral_output() {
        let stft = small_stft();
        let net = SeparatorNet::new(&desk(4), &stft, 3).unwrap();
        let len = 160;
        let out = net.forward(&features(&stft, len, 4), len).unwrap();
        let y = crate::dsp::istft(&out.spec, &stft, len).unwrap();
        assert_eq!(y, out.y);
    }

    #[test]
    fn rejects_mismatched_features() {
        let stft = small_stft();
        let net = SeparatorNet::new(&desk(4), &stft, 1).unwrap();
        let f = features(&stft, 200, 2);
        assert!(matches!(net.forward(&f, 300), Err(ModelError::ShapeMismatch(_))));
        let wrong = Array3::zeros((2, f.dim().1, f.dim().2));
        assert!(matches!(net.forward(&wrong, 200), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn pooling_constant_and_permuted_maps() {
        let constant = Array3::from_elem((3, 5, 7), 2.5);
        assert!(pool_channels(constant.view(), 0).iter().all(|&v| v == 2.5));
        let taps = PooledTaps {
            encoder_vec: vec![2.5; 3],
            mid_vec: vec![2.5; 3],
            last_vec: vec![2.5; 3],
        };
        assert_eq!(pooled_embedding(&taps), vec![2.5; 9]);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let map = Array3::from_shape_fn((4, 6, 5), |_| rng.gen_range(-1.0..1.0));
        let order = [3, 0, 5, 1, 4, 2];
        let permuted = map.select(Axis(1), &order);
        let a = pool_channels(map.view(), 0);
        let b = pool_channels(permuted.view(), 0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn decoder_style_keeps_tap_shapes() {
        let stft = small_stft();
        let f = features(&stft, 200, 5);
        let a = SeparatorNet::new(&desk(4), &stft, 1).unwrap();
        let b = SeparatorNet::new(
            &SeparatorConfig {
                decoder_style: DecoderStyle::ComplexOnly,
                ..desk(4)
            },
            &stft,
            1,
        )
        .unwrap();
        let ta = a.forward(&f, 200).unwrap().taps;
        let tb = b.forward(&f, 200).unwrap().taps;
        assert_eq!(pooled_embedding(&ta).len(), pooled_embedding(&tb).len());
    }

    #[test]
    fn fresh_net_output_envelope() {
        let stft = StftConfig::default();
        let cfg = SeparatorConfig {
            channels: 8,
            ..desk(8)
        };
        let net = SeparatorNet::new(&cfg, &stft, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let len = 4000;
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = crate::dsp::rms(&x);
        let x: Vec<f64> = x.iter().map(|v| v / r).collect();
        let f = make_input_features(&crate::dsp::stft(&x, &stft).unwrap(), None);
        let y = net.forward(&f, len).unwrap().y;
        let ry = crate::dsp::rms(&y);
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((1e-8..=1e3).contains(&ry), "rms {ry}");
    }

    #[test]
    fn compressed_input_planes_recover_spectrum() {
        let stft = small_stft();
        let spec = crate::dsp::stft(&(0..100).map(|i| (i as f64 * 0.3).sin()).collect::<Vec<_>>(), &stft).unwrap();
        let f = make_input_features(&spec, Some(0.3));
        let planes = input_planes(&f, Some(0.3));
        for ((a, b), (c, d)) in planes
            .index_axis(Axis(0), 0)
            .iter()
            .zip(planes.index_axis(Axis(0), 1).iter())
            .zip(spec.real.iter().zip(spec.imag.iter()))
        {
            assert!((a - c).abs() < 1e-9 * (1.0 + c.abs()));
            assert!((b - d).abs() < 1e-9 * (1.0 + d.abs()));
        }
    }

    /// Scalar probe loss `Σ y·a + Σ Y·b` and its parameter gradients.
    fn probe_loss(net: &SeparatorNet, f: &Array3<f64>, len: usize, a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        let out = net.forward(f, len).unwrap();
        let y: f64 = out.y.iter().zip(a.iter()).map(|(u, v)| u * v).sum();
        let spec = ndarray::stack(Axis(0), &[out.spec.real.view(), out.spec.imag.view()]).unwrap();
        y + (&spec.into_dyn() * b).sum()
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let stft = small_stft();
        let cfg = SeparatorConfig {
            channels: 8,
            num_blocks: 2,
            attention_heads: 2,
            dense_depth: 2,
            ffn_mult: 2,
            conv_kernel: 3,
            ..SeparatorConfig::default()
        };
        let mut net = SeparatorNet::new(&cfg, &stft, 21).unwrap();
        let len = 96;
        let f = features(&stft, len, 22);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let frames = stft.frames(len);
        let a = ArrayD::from_shape_fn(IxDyn(&[len]), |_| rng.gen_range(-1.0..1.0));
        let b = ArrayD::from_shape_fn(IxDyn(&[2, frames, stft.bins()]), |_| rng.gen_range(-1.0..1.0));

        let mut tape = Tape::new();
        let out = net.forward_on_tape(&mut tape, &f, len).unwrap();
        let mut grads = tape.backward(out.y, a.clone());
        // Second root: accumulate the spectral probe by hand through a fresh pass.
        let mut tape2 = Tape::new();
        let out2 = net.forward_on_tape(&mut tape2, &f, len).unwrap();
        let mut grads2 = tape2.backward(out2.spec, b.clone());
        let analytic: Vec<ArrayD<f64>> = out
            .params
            .iter()
            .zip(&out2.params)
            .map(|(p, q)| grads.take(*p).unwrap() + grads2.take(*q).unwrap())
            .collect();
        for g in &analytic {
            assert!(g.iter().all(|v| v.is_finite()));
        }

        let h = 1e-5;
        let mut checked = 0;
        while checked < 20 {
            let ti = rng.gen_range(0..analytic.len());
            let ei = rng.gen_range(0..analytic[ti].len());
            let an = analytic[ti].as_slice().unwrap()[ei];
            let orig = net.params[ti].value.as_slice().unwrap()[ei];
            net.params[ti].value.as_slice_mut().unwrap()[ei] = orig + h;
            let lp = probe_loss(&net, &f, len, &a, &b);
            net.params[ti].value.as_slice_mut().unwrap()[ei] = orig - h;
            let lm = probe_loss(&net, &f, len, &a, &b);
            net.params[ti].value.as_slice_mut().unwrap()[ei] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3),
                "{}[{ei}]: fd {fd} analytic {an}",
                net.params[ti].name
            );
            checked += 1;
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let stft = small_stft();
        let net = SeparatorNet::new(&desk(4), &stft, 9).unwrap();
        net.save_params(&path).unwrap();
        let loaded = SeparatorNet::load_params(&path, Some(&desk(4))).unwrap();
        let f = features(&stft, 200, 1);
        let a = net.forward(&f, 200).unwrap();
        let b = loaded.forward(&f, 200).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.taps, b.taps);

        let err = SeparatorNet::load_params(&path, Some(&desk(8))).unwrap_err();
        assert!(matches!(err, ModelError::ConfigMismatch { .. }));

        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("truncated.bin");
        std::fs::write(&truncated, &bytes[..bytes.len() - 17]).unwrap();
        let err = SeparatorNet::load_params(&truncated, None).unwrap_err();
        assert!(matches!(err, ModelError::CorruptCheckpoint(_)));

        let mut bumped = bytes.clone();
        bumped[8..12].copy_from_slice(&99u32.to_le_bytes());
        let versioned = dir.path().join("v99.bin");
        std::fs::write(&versioned, bumped).unwrap();
        let err = SeparatorNet::load_params(&versioned, None).unwrap_err();
        assert!(matches!(err, ModelError::VersionMismatch { found: 99, .. }));

        let err = SeparatorNet::load_params(&dir.path().join("missing.bin"), None).unwrap_err();
        assert!(matches!(err, ModelError::CheckpointNotFound(_)));
    }
}
