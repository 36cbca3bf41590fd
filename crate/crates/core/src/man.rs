//! Multi-modal adaptive normalization.
//!
//! A feature map is instance-normalized, then five conditioning sources
//! (identity image, predicted optical flow or keypoint heatmaps, mel
//! spectrogram, pitch, energy) each contribute an affine transform. A
//! learned gate combines the transformed maps:
//!
//! `y = sum_s rho_s * (gamma_s * x_in + beta_s)` with `sum_s rho_s = 1`
//! enforced by a softmax over the gate logits. Video sources produce
//! spatially varying gamma/beta; audio sources produce per-channel ones.

use crate::autodiff::ops::concat;
use crate::autodiff::{join_path, Module, Param, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{zeros, Conv1d, Conv2d, InitRng, Linear, Lstm};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

pub const NUM_SOURCES: usize = 5;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// The five conditioning sources, in gate-logit order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Image,
    FlowOrHeatmap,
    Mel,
    Pitch,
    Energy,
}

impl Source {
    pub const ALL: [Source; NUM_SOURCES] = [
        Source::Image,
        Source::FlowOrHeatmap,
        Source::Mel,
        Source::Pitch,
        Source::Energy,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Source::Image => "image",
            Source::FlowOrHeatmap => "flow_or_heatmap",
            Source::Mel => "mel",
            Source::Pitch => "pitch",
            Source::Energy => "energy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoBranch {
    Conv2d,
    PartialConv2d,
    Conv2dEca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AudioBranch {
    Conv1d,
    Lstm,
}

/// Per-block configuration (also the ablation axes).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManConfig {
    pub video_branch: VideoBranch,
    pub audio_branch: AudioBranch,
    pub enabled_sources: Vec<Source>,
    /// Hidden width of the affine extractors.
    pub channel_width: usize,
    pub eps: f64,
}

impl Default for ManConfig {
    fn default() -> Self {
        ManConfig {
            video_branch: VideoBranch::Conv2d,
            audio_branch: AudioBranch::Conv1d,
            enabled_sources: Source::ALL.to_vec(),
            channel_width: 16,
            eps: INSTANCE_NORM_EPS,
        }
    }
}

impl ManConfig {
    pub fn enabled_mask(&self) -> [bool; NUM_SOURCES] {
        let mut mask = [false; NUM_SOURCES];
        for s in &self.enabled_sources {
            mask[s.index()] = true;
        }
        mask
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled_sources.is_empty() {
            return Err(Error::Config("enabled_sources must be non-empty".into()));
        }
        Ok(())
    }
}

/// Normalize each (batch, channel) plane to zero mean / unit variance over
/// the spatial dimensions only.
pub fn instance_normalize<'t>(x: &Tensor<'t>, eps: f64) -> Tensor<'t> {
    assert_eq!(x.ndim(), 4, "instance norm expects (B,C,H,W)");
    let mu = x.mean_axes_keep(&[2, 3]);
    let centered = x.sub(&mu);
    let var = centered.square().mean_axes_keep(&[2, 3]);
    centered.div(&var.add_scalar(eps).sqrt())
}

/// The learnable gate: five logits squashed to a simplex by softmax.
/// Disabled sources are masked to an effective -inf before the softmax, so
/// the enabled subset is re-normalized and disabled weights are exactly 0.
pub struct GateParams {
    pub logits: Param,
}

impl GateParams {
    pub fn new() -> Self {
        GateParams {
            logits: Param::new(zeros(&[NUM_SOURCES])),
        }
    }

    pub fn from_shared(logits: Param) -> Self {
        assert_eq!(logits.shape(), vec![NUM_SOURCES]);
        GateParams { logits }
    }

    /// Softmax weights over the enabled subset, shape [5]; disabled entries
    /// come out exactly zero.
    pub fn weights<'t>(&self, tape: &'t Tape, enabled: &[bool; NUM_SOURCES]) -> Tensor<'t> {
        let logits = tape.param(&self.logits);
        softmax_masked(&logits, enabled)
    }

    /// Gate weights as plain numbers (all sources enabled).
    pub fn weights_value(&self) -> [f64; NUM_SOURCES] {
        let tape = Tape::new();
        let w = self.weights(&tape, &[true; NUM_SOURCES]).value();
        let mut out = [0.0; NUM_SOURCES];
        for i in 0..NUM_SOURCES {
            out[i] = w[[i]];
        }
        out
    }
}

impl Default for GateParams {
    fn default() -> Self {
        Self::new()
    }
}

impl Module for GateParams {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join_path(prefix, "logits"), &self.logits);
    }
}

/// Numerically stable masked softmax over a 1-D logit vector. The max of the
/// enabled logits is subtracted as a constant (softmax is shift-invariant),
/// and disabled logits are pushed far enough down that their exp underflows
/// to exactly zero.
pub fn softmax_masked<'t>(logits: &Tensor<'t>, enabled: &[bool]) -> Tensor<'t> {
    assert_eq!(logits.ndim(), 1);
    let n = logits.shape()[0];
    assert_eq!(enabled.len(), n);
    assert!(enabled.iter().any(|&e| e), "at least one source enabled");
    let tape = logits.tape();
    let vals = logits.value();
    let max_enabled = (0..n)
        .filter(|&i| enabled[i])
        .map(|i| vals[[i]])
        .fold(f64::NEG_INFINITY, f64::max);
    let mask: Vec<f64> = enabled
        .iter()
        .map(|&e| if e { -max_enabled } else { -1e300 })
        .collect();
    let shifted = logits.add(&tape.constant(ArrayD::from_shape_vec(IxDyn(&[n]), mask).unwrap()));
    let e = shifted.exp();
    e.div(&e.sum_all())
}

/// One source's contribution: broadcastable scale and shift.
pub struct AffinePair<'t> {
    pub gamma: Tensor<'t>,
    pub beta: Tensor<'t>,
    pub source: Source,
}

/// Eq-style gated combination: `y = sum_i w_i * (gamma_i * x + beta_i)`.
/// `weights` is 1-D with one entry per affine pair.
pub fn man_combine<'t>(
    x_in: &Tensor<'t>,
    affines: &[AffinePair<'t>],
    weights: &Tensor<'t>,
) -> Tensor<'t> {
    assert!(!affines.is_empty());
    assert_eq!(weights.ndim(), 1);
    assert_eq!(weights.shape()[0], affines.len());
    let mut acc: Option<Tensor<'t>> = None;
    for (i, pair) in affines.iter().enumerate() {
        let w = weights.slice_axis(0, i, i + 1);
        let term = pair.gamma.mul(x_in).add(&pair.beta).mul(&w);
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term),
        });
    }
    acc.unwrap()
}

/// Efficient channel attention: sigmoid weights from a 1-D convolution over
/// the channel axis of globally average-pooled descriptors.
pub struct EcaAttention {
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
}

impl EcaAttention {
    pub fn new(kernel: usize, rng: &mut InitRng) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::EvenKernel(kernel));
        }
        Ok(EcaAttention {
            weight: Param::new(crate::nn::uniform_init(&[1, 1, kernel], kernel, rng)),
            bias: Param::new(zeros(&[1])),
            kernel,
        })
    }

    pub fn forward<'t>(&self, x: &Tensor<'t>) -> Tensor<'t> {
        let tape = x.tape();
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let desc = x.global_avg_pool().reshape(&[b, 1, c]);
        let w = tape.param(&self.weight);
        let bias = tape.param(&self.bias);
        let gated = desc
            .conv1d(&w, 1, (self.kernel - 1) / 2)
            .add(&bias.reshape(&[1, 1, 1]))
            .sigmoid()
            .reshape(&[b, c, 1, 1]);
        x.mul(&gated)
    }
}

impl Module for EcaAttention {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join_path(prefix, "weight"), &self.weight);
        f(&join_path(prefix, "bias"), &self.bias);
    }
}

/// Mask-renormalized convolution. The mask marks valid pixels; each output
/// is rescaled by (window size / valid taps in window) and positions whose
/// window saw no valid pixel emit zero. Returns the output and the updated
/// mask.
pub fn partial_conv2d<'t>(
    x: &Tensor<'t>,
    mask: &ArrayD<f64>,
    weight: &Tensor<'t>,
    bias: &Tensor<'t>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<'t>, ArrayD<f64>)> {
    if x.shape()[2] != mask.shape()[0] || x.shape()[3] != mask.shape()[1] {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs input spatial {:?}",
            mask.shape(),
            &x.shape()[2..]
        )));
    }
    let tape = x.tape();
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let window = (kh * kw) as f64;

    // coverage[oy,ox] = number of in-bounds valid taps under the kernel
    let mut ratio = ArrayD::<f64>::zeros(IxDyn(&[1, 1, ho, wo]));
    let mut new_mask = ArrayD::<f64>::zeros(IxDyn(&[ho, wo]));
    for oy in 0..ho {
        for ox in 0..wo {
            let mut cov = 0.0;
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        cov += mask[[iy as usize, ix as usize]];
                    }
                }
            }
            if cov > 0.0 {
                ratio[[0, 0, oy, ox]] = window / cov;
                new_mask[[oy, ox]] = 1.0;
            }
        }
    }

    let mask4 = mask
        .clone()
        .into_shape_with_order(IxDyn(&[1, 1, h, w]))
        .unwrap();
    let masked = x.mul(&tape.constant(mask4));
    let cout = weight.shape()[0];
    let valid4 = {
        let mut v = ArrayD::<f64>::zeros(IxDyn(&[1, 1, ho, wo]));
        for oy in 0..ho {
            for ox in 0..wo {
                v[[0, 0, oy, ox]] = new_mask[[oy, ox]];
            }
        }
        v
    };
    let out = masked
        .conv2d(weight, stride, pad)
        .mul(&tape.constant(ratio))
        .add(&bias.reshape(&[1, cout, 1, 1]))
        .mul(&tape.constant(valid4));
    Ok((out, new_mask))
}

/// Layer wrapper around [`partial_conv2d`] with an all-ones default mask.
pub struct PartialConv2dLayer {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl PartialConv2dLayer {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut InitRng,
    ) -> Self {
        PartialConv2dLayer {
            weight: Param::new(crate::nn::uniform_init(
                &[cout, cin, k, k],
                cin * k * k,
                rng,
            )),
            bias: Param::new(zeros(&[cout])),
            stride,
            pad,
        }
    }

    pub fn new_zero(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        PartialConv2dLayer {
            weight: Param::new(zeros(&[cout, cin, k, k])),
            bias: Param::new(zeros(&[cout])),
            stride,
            pad,
        }
    }

    pub fn forward<'t>(
        &self,
        x: &Tensor<'t>,
        mask: &ArrayD<f64>,
    ) -> Result<(Tensor<'t>, ArrayD<f64>)> {
        let tape = x.tape();
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        partial_conv2d(x, mask, &w, &b, self.stride, self.pad)
    }
}

impl Module for PartialConv2dLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join_path(prefix, "weight"), &self.weight);
        f(&join_path(prefix, "bias"), &self.bias);
    }
}

enum VideoStage {
    Plain(Conv2d),
    Partial(PartialConv2dLayer),
}

/// Spatially varying affine parameters from a video-domain source. The
/// conditioning map is resized to the target resolution, passed through a
/// hidden conv (optionally with channel attention), and a zero-initialized
/// head emits 2*C channels split into gamma and beta.
pub struct VideoAffineExtractor {
    stage1: VideoStage,
    eca: Option<EcaAttention>,
    head: VideoStage,
    out_channels: usize,
    source: Source,
}

impl VideoAffineExtractor {
    pub fn new(
        source: Source,
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        branch: VideoBranch,
        rng: &mut InitRng,
    ) -> Result<Self> {
        let (stage1, head, eca) = match branch {
            VideoBranch::Conv2d => (
                VideoStage::Plain(Conv2d::new(in_channels, hidden, 3, 1, 1, rng)),
                VideoStage::Plain(Conv2d::new_zero(hidden, 2 * out_channels, 3, 1, 1)),
                None,
            ),
            VideoBranch::PartialConv2d => (
                VideoStage::Partial(PartialConv2dLayer::new(in_channels, hidden, 3, 1, 1, rng)),
                VideoStage::Partial(PartialConv2dLayer::new_zero(hidden, 2 * out_channels, 3, 1, 1)),
                None,
            ),
            VideoBranch::Conv2dEca => (
                VideoStage::Plain(Conv2d::new(in_channels, hidden, 3, 1, 1, rng)),
                VideoStage::Plain(Conv2d::new_zero(hidden, 2 * out_channels, 3, 1, 1)),
                Some(EcaAttention::new(3, rng)?),
            ),
        };
        Ok(VideoAffineExtractor {
            stage1,
            eca,
            head,
            out_channels,
            source,
        })
    }

    /// cond: (B, Cin, Hc, Wc) resized to (target_h, target_w).
    pub fn forward<'t>(
        &self,
        cond: &Tensor<'t>,
        target_h: usize,
        target_w: usize,
        mask: Option<&ArrayD<f64>>,
    ) -> Result<AffinePair<'t>> {
        if cond.ndim() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "video conditioning must be (B,C,H,W), got {:?}",
                cond.shape()
            )));
        }
        let x = cond.resize_bilinear(target_h, target_w);
        let ones = ArrayD::<f64>::ones(IxDyn(&[target_h, target_w]));
        let mask0 = match mask {
            Some(m) => {
                let m4 = m
                    .clone()
                    .into_shape_with_order(IxDyn(&[1, 1, m.shape()[0], m.shape()[1]]))
                    .unwrap();
                x.tape()
                    .constant(m4)
                    .resize_bilinear(target_h, target_w)
                    .value()
                    .mapv(|v| f64::from(v > 0.5))
                    .into_shape_with_order(IxDyn(&[target_h, target_w]))
                    .unwrap()
            }
            None => ones,
        };
        let (h1, mask1) = match &self.stage1 {
            VideoStage::Plain(conv) => (conv.forward(&x), mask0),
            VideoStage::Partial(pconv) => pconv.forward(&x, &mask0)?,
        };
        let mut h = h1.leaky_relu(LEAKY_SLOPE);
        if let Some(eca) = &self.eca {
            h = eca.forward(&h);
        }
        let out = match &self.head {
            VideoStage::Plain(conv) => conv.forward(&h),
            VideoStage::Partial(pconv) => pconv.forward(&h, &mask1)?.0,
        };
        let c = self.out_channels;
        Ok(AffinePair {
            gamma: out.slice_axis(1, 0, c),
            beta: out.slice_axis(1, c, 2 * c),
            source: self.source,
        })
    }
}

impl Module for VideoAffineExtractor {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match &self.stage1 {
            VideoStage::Plain(c) => c.visit_params(&join_path(prefix, "conv1"), f),
            VideoStage::Partial(c) => c.visit_params(&join_path(prefix, "pconv1"), f),
        }
        if let Some(eca) = &self.eca {
            eca.visit_params(&join_path(prefix, "eca"), f);
        }
        match &self.head {
            VideoStage::Plain(c) => c.visit_params(&join_path(prefix, "head"), f),
            VideoStage::Partial(c) => c.visit_params(&join_path(prefix, "phead"), f),
        }
    }
}

enum AudioStage {
    Conv { c1: Conv1d, c2: Conv1d },
    Lstm(Lstm),
}

/// Per-channel affine parameters from an audio-domain vector, broadcast
/// spatially as (B, C, 1, 1).
pub struct AudioAffineExtractor {
    stage: AudioStage,
    head: Linear,
    in_len: usize,
    out_channels: usize,
    source: Source,
}

fn lstm_chunks(len: usize) -> (usize, usize) {
    if len % 8 == 0 {
        (len / 8, 8)
    } else {
        (len, 1)
    }
}

impl AudioAffineExtractor {
    pub fn new(
        source: Source,
        in_len: usize,
        hidden: usize,
        out_channels: usize,
        branch: AudioBranch,
        rng: &mut InitRng,
    ) -> Self {
        let stage = match branch {
            AudioBranch::Conv1d => AudioStage::Conv {
                c1: Conv1d::new(1, hidden, 5, 2, 2, rng),
                c2: Conv1d::new(hidden, hidden, 3, 2, 1, rng),
            },
            AudioBranch::Lstm => {
                let (_t, f) = lstm_chunks(in_len);
                AudioStage::Lstm(Lstm::new(f, hidden, rng))
            }
        };
        AudioAffineExtractor {
            stage,
            head: Linear::new_zero(hidden, 2 * out_channels),
            in_len,
            out_channels,
            source,
        }
    }

    /// vec: (B, in_len)
    pub fn forward<'t>(&self, vec: &Tensor<'t>) -> Result<AffinePair<'t>> {
        if vec.ndim() != 2 || vec.shape()[1] != self.in_len {
            return Err(Error::ShapeMismatch(format!(
                "audio conditioning must be (B,{}), got {:?}",
                self.in_len,
                vec.shape()
            )));
        }
        let b = vec.shape()[0];
        let hidden = match &self.stage {
            AudioStage::Conv { c1, c2 } => {
                let x = vec.reshape(&[b, 1, self.in_len]);
                let h = c1.forward(&x).leaky_relu(LEAKY_SLOPE);
                let h = c2.forward(&h).leaky_relu(LEAKY_SLOPE);
                let c = h.shape()[1];
                h.mean_axes_keep(&[2]).reshape(&[b, c])
            }
            AudioStage::Lstm(lstm) => {
                let (t, f) = lstm_chunks(self.in_len);
                lstm.forward(&vec.reshape(&[b, t, f]))
            }
        };
        let out = self.head.forward(&hidden);
        let c = self.out_channels;
        Ok(AffinePair {
            gamma: out.slice_axis(1, 0, c).reshape(&[b, c, 1, 1]),
            beta: out.slice_axis(1, c, 2 * c).reshape(&[b, c, 1, 1]),
            source: self.source,
        })
    }
}

impl Module for AudioAffineExtractor {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match &self.stage {
            AudioStage::Conv { c1, c2 } => {
                c1.visit_params(&join_path(prefix, "conv1"), f);
                c2.visit_params(&join_path(prefix, "conv2"), f);
            }
            AudioStage::Lstm(l) => l.visit_params(&join_path(prefix, "lstm"), f),
        }
        self.head.visit_params(&join_path(prefix, "head"), f);
    }
}

/// Everything one normalization layer may condition on. Disabled sources can
/// be left out.
pub struct ModalityBundle<'t> {
    pub image: Option<Tensor<'t>>,
    pub flow_or_heatmap: Option<Tensor<'t>>,
    pub mel: Option<Tensor<'t>>,
    pub pitch: Option<Tensor<'t>>,
    pub energy: Option<Tensor<'t>>,
    /// Optional validity mask for the flow/heatmap source (partial conv).
    pub flow_mask: Option<ArrayD<f64>>,
}

impl<'t> ModalityBundle<'t> {
    pub fn get(&self, source: Source) -> Option<&Tensor<'t>> {
        match source {
            Source::Image => self.image.as_ref(),
            Source::FlowOrHeatmap => self.flow_or_heatmap.as_ref(),
            Source::Mel => self.mel.as_ref(),
            Source::Pitch => self.pitch.as_ref(),
            Source::Energy => self.energy.as_ref(),
        }
    }
}

/// One adaptive-normalization block: instance norm, per-source affine
/// extraction, gated combination.
pub struct ManBlock {
    pub gate: GateParams,
    image_ext: VideoAffineExtractor,
    flow_ext: VideoAffineExtractor,
    mel_ext: AudioAffineExtractor,
    pitch_ext: AudioAffineExtractor,
    energy_ext: AudioAffineExtractor,
    pub cfg: ManConfig,
    channels: usize,
}

impl ManBlock {
    /// `channels` is the width of the normalized map; `image_channels` and
    /// `flow_channels` describe the video conditioning inputs (3 for RGB
    /// identity, 2 for flow / 15 for heatmaps). `shared_gate` ties the gate
    /// logits across blocks when set.
    pub fn new(
        channels: usize,
        image_channels: usize,
        flow_channels: usize,
        audio_len: usize,
        cfg: &ManConfig,
        shared_gate: Option<Param>,
        rng: &mut InitRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.channel_width;
        Ok(ManBlock {
            gate: match shared_gate {
                Some(p) => GateParams::from_shared(p),
                None => GateParams::new(),
            },
            image_ext: VideoAffineExtractor::new(
                Source::Image,
                image_channels,
                hidden,
                channels,
                cfg.video_branch,
                rng,
            )?,
            flow_ext: VideoAffineExtractor::new(
                Source::FlowOrHeatmap,
                flow_channels,
                hidden,
                channels,
                cfg.video_branch,
                rng,
            )?,
            mel_ext: AudioAffineExtractor::new(
                Source::Mel,
                audio_len,
                hidden,
                channels,
                cfg.audio_branch,
                rng,
            ),
            pitch_ext: AudioAffineExtractor::new(
                Source::Pitch,
                audio_len,
                hidden,
                channels,
                cfg.audio_branch,
                rng,
            ),
            energy_ext: AudioAffineExtractor::new(
                Source::Energy,
                audio_len,
                hidden,
                channels,
                cfg.audio_branch,
                rng,
            ),
            cfg: cfg.clone(),
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward<'t>(&self, x: &Tensor<'t>, bundle: &ModalityBundle<'t>) -> Result<Tensor<'t>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let x_in = instance_normalize(x, self.cfg.eps);
        let enabled = self.cfg.enabled_mask();
        let weights5 = self.gate.weights(x.tape(), &enabled);

        let mut affines = Vec::new();
        let mut weight_slices = Vec::new();
        for source in Source::ALL {
            if !enabled[source.index()] {
                continue;
            }
            let cond = bundle
                .get(source)
                .ok_or_else(|| Error::MissingSource(source.name().into()))?;
            let pair = match source {
                Source::Image => self.image_ext.forward(cond, h, w, None)?,
                Source::FlowOrHeatmap => {
                    self.flow_ext
                        .forward(cond, h, w, bundle.flow_mask.as_ref())?
                }
                Source::Mel => self.mel_ext.forward(cond)?,
                Source::Pitch => self.pitch_ext.forward(cond)?,
                Source::Energy => self.energy_ext.forward(cond)?,
            };
            let i = source.index();
            weight_slices.push(weights5.slice_axis(0, i, i + 1));
            affines.push(pair);
        }
        let weights = concat(&weight_slices, 0);
        Ok(man_combine(&x_in, &affines, &weights))
    }
}

impl Module for ManBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.gate.visit_params(&join_path(prefix, "gate"), f);
        self.image_ext
            .visit_params(&join_path(prefix, "image_ext"), f);
        self.flow_ext.visit_params(&join_path(prefix, "flow_ext"), f);
        self.mel_ext.visit_params(&join_path(prefix, "mel_ext"), f);
        self.pitch_ext
            .visit_params(&join_path(prefix, "pitch_ext"), f);
        self.energy_ext
            .visit_params(&join_path(prefix, "energy_ext"), f);
    }
}

/// Residual block around two MAN blocks and two 3x3 convolutions, with a
/// learned 1x1 skip projection when the channel count changes.
pub struct ManResnetBlock {
    pub man1: ManBlock,
    pub man2: ManBlock,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ManResnetBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        image_channels: usize,
        flow_channels: usize,
        audio_len: usize,
        cfg: &ManConfig,
        spectral: bool,
        shared_gate: Option<Param>,
        rng: &mut InitRng,
    ) -> Result<Self> {
        let man1 = ManBlock::new(
            in_channels,
            image_channels,
            flow_channels,
            audio_len,
            cfg,
            shared_gate.clone(),
            rng,
        )?;
        let man2 = ManBlock::new(
            out_channels,
            image_channels,
            flow_channels,
            audio_len,
            cfg,
            shared_gate,
            rng,
        )?;
        let mut conv1 = Conv2d::new(in_channels, out_channels, 3, 1, 1, rng);
        let mut conv2 = Conv2d::new(out_channels, out_channels, 3, 1, 1, rng);
        let mut skip = if in_channels != out_channels {
            Some(Conv2d::new(in_channels, out_channels, 1, 1, 0, rng))
        } else {
            None
        };
        if spectral {
            conv1 = conv1.with_spectral_norm(rng);
            conv2 = conv2.with_spectral_norm(rng);
            skip = skip.map(|s| s.with_spectral_norm(rng));
        }
        Ok(ManResnetBlock {
            man1,
            man2,
            conv1,
            conv2,
            skip,
        })
    }

    pub fn forward<'t>(&self, x: &Tensor<'t>, bundle: &ModalityBundle<'t>) -> Result<Tensor<'t>> {
        let h = self.man1.forward(x, bundle)?.leaky_relu(LEAKY_SLOPE);
        let h = self.conv1.forward(&h);
        let h = self.man2.forward(&h, bundle)?.leaky_relu(LEAKY_SLOPE);
        let h = self.conv2.forward(&h);
        let s = match &self.skip {
            Some(conv) => conv.forward(x),
            None => x.clone(),
        };
        Ok(s.add(&h))
    }
}

impl Module for ManResnetBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.man1.visit_params(&join_path(prefix, "man1"), f);
        self.man2.visit_params(&join_path(prefix, "man2"), f);
        self.conv1.visit_params(&join_path(prefix, "conv1"), f);
        self.conv2.visit_params(&join_path(prefix, "conv2"), f);
        if let Some(skip) = &self.skip {
            skip.visit_params(&join_path(prefix, "skip"), f);
        }
    }
}

/// Randomize every trainable parameter of a module (tests use this to make
/// the zero-initialized extractor heads produce nonzero affines).
pub fn randomize_params<M: Module>(module: &M, scale: f64, rng: &mut InitRng) {
    use rand::RngExt;
    for (_, p) in module.parameters() {
        if !p.is_trainable() {
            continue;
        }
        let shape = p.shape();
        let n: usize = shape.iter().product();
        let v = ArrayD::from_shape_vec(
            IxDyn(&shape),
            (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
        )
        .unwrap();
        p.set_value(v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, check_param_gradients};
    use crate::nn::init_rng;
    use rand::RngExt;

    fn randn(shape: &[usize], rng: &mut InitRng) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn full_bundle<'t>(
        tape: &'t Tape,
        b: usize,
        rng: &mut InitRng,
    ) -> ModalityBundle<'t> {
        ModalityBundle {
            image: Some(tape.constant(randn(&[b, 3, 8, 8], rng))),
            flow_or_heatmap: Some(tape.constant(randn(&[b, 2, 8, 8], rng))),
            mel: Some(tape.constant(randn(&[b, 256], rng))),
            pitch: Some(tape.constant(randn(&[b, 256], rng))),
            energy: Some(tape.constant(randn(&[b, 256], rng))),
            flow_mask: None,
        }
    }

    #[test]
    fn instance_norm_zeroes_a_constant_map() {
        let tape = Tape::new();
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[1, 2, 3, 3]), 7.0));
        let y = instance_normalize(&x, INSTANCE_NORM_EPS).value();
        assert!(y.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn instance_norm_matches_hand_computed_standardization() {
        // per-channel {1,2,3,4}: mean 2.5, population var 1.25
        let tape = Tape::new();
        let x = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let y = instance_normalize(&x, INSTANCE_NORM_EPS).value();
        let want = [-1.342, -0.447, 0.447, 1.342];
        for (got, want) in y.iter().zip(want.iter()) {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
    }

    #[test]
    fn instance_norm_statistics_and_near_idempotence() {
        let mut rng = init_rng(1);
        let tape = Tape::new();
        let x = tape.constant(randn(&[2, 3, 6, 6], &mut rng).mapv(|v| 3.0 * v + 1.0));
        let y = instance_normalize(&x, INSTANCE_NORM_EPS);
        let v = y.value();
        for b in 0..2 {
            for c in 0..3 {
                let plane: Vec<f64> = (0..36).map(|i| v[[b, c, i / 6, i % 6]]).collect();
                let mean = plane.iter().sum::<f64>() / 36.0;
                let var = plane.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 36.0;
                assert!(mean.abs() < 1e-5);
                assert!((var - 1.0).abs() < 1e-4);
            }
        }
        let twice = instance_normalize(&y, INSTANCE_NORM_EPS).value();
        for (a, b) in v.iter().zip(twice.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn gate_weights_form_a_simplex_and_shift_invariant() {
        let mut rng = init_rng(2);
        for _ in 0..200 {
            let logits = randn(&[5], &mut rng).mapv(|v| 10.0 * v);
            let tape = Tape::new();
            let l = tape.constant(logits.clone());
            let w = softmax_masked(&l, &[true; 5]).value();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));

            let shifted = tape.constant(logits.mapv(|v| v + 3.7));
            let w2 = softmax_masked(&shifted, &[true; 5]).value();
            for (a, b) in w.iter().zip(w2.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masked_gate_renormalizes_over_enabled_subset() {
        let tape = Tape::new();
        let l = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[5]), vec![0.3, -0.1, 0.9, 0.0, 0.5]).unwrap(),
        );
        let w = softmax_masked(&l, &[true, false, true, false, true]).value();
        assert_eq!(w[[1]], 0.0);
        assert_eq!(w[[3]], 0.0);
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn man_combine_reduces_to_adain_under_one_hot_gate() {
        let mut rng = init_rng(3);
        let tape = Tape::new();
        let x = tape.constant(randn(&[1, 3, 4, 4], &mut rng));
        let mut pairs = Vec::new();
        let mut gammas = Vec::new();
        let mut betas = Vec::new();
        for s in Source::ALL {
            let g = randn(&[1, 3, 4, 4], &mut rng);
            let b = randn(&[1, 3, 4, 4], &mut rng);
            gammas.push(g.clone());
            betas.push(b.clone());
            pairs.push(AffinePair {
                gamma: tape.constant(g),
                beta: tape.constant(b),
                source: s,
            });
        }
        let logits = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[5]), vec![40.0, -40.0, -40.0, -40.0, -40.0]).unwrap(),
        );
        let w = softmax_masked(&logits, &[true; 5]);
        let y = man_combine(&x, &pairs, &w).value();
        let want = &gammas[0] * &x.value() + &betas[0];
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_affines_pass_input_through() {
        let mut rng = init_rng(4);
        let tape = Tape::new();
        let x = tape.constant(randn(&[2, 3, 4, 4], &mut rng));
        let pairs: Vec<AffinePair> = Source::ALL
            .iter()
            .map(|&s| AffinePair {
                gamma: tape.constant(ArrayD::ones(IxDyn(&[2, 3, 4, 4]))),
                beta: tape.constant(ArrayD::zeros(IxDyn(&[2, 3, 4, 4]))),
                source: s,
            })
            .collect();
        let logits = tape.constant(randn(&[5], &mut rng));
        let w = softmax_masked(&logits, &[true; 5]);
        let y = man_combine(&x, &pairs, &w).value();
        for (a, b) in y.iter().zip(x.value().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn man_combine_matches_scalar_loop_oracle() {
        let mut rng = init_rng(5);
        for _ in 0..20 {
            let tape = Tape::new();
            let shape = [2usize, 3, 4, 4];
            let x = randn(&shape, &mut rng);
            let mut pairs = Vec::new();
            let mut raw = Vec::new();
            for s in Source::ALL {
                let g = randn(&shape, &mut rng);
                let b = randn(&shape, &mut rng);
                raw.push((g.clone(), b.clone()));
                pairs.push(AffinePair {
                    gamma: tape.constant(g),
                    beta: tape.constant(b),
                    source: s,
                });
            }
            let logits = randn(&[5], &mut rng);
            let lt = tape.constant(logits.clone());
            let w = softmax_masked(&lt, &[true; 5]);
            let xt = tape.constant(x.clone());
            let got = man_combine(&xt, &pairs, &w).value();

            // scalar oracle: softmax then elementwise loop
            let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let rho: Vec<f64> = exps.iter().map(|e| e / z).collect();
            for bi in 0..2 {
                for ci in 0..3 {
                    for yi in 0..4 {
                        for xi in 0..4 {
                            let xin = x[[bi, ci, yi, xi]];
                            let mut want = 0.0;
                            for (s, (g, b)) in raw.iter().enumerate() {
                                want += rho[s] * (g[[bi, ci, yi, xi]] * xin + b[[bi, ci, yi, xi]]);
                            }
                            let got = got[[bi, ci, yi, xi]];
                            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn man_combine_is_linear_in_x_when_betas_are_zero() {
        let mut rng = init_rng(6);
        let tape = Tape::new();
        let shape = [1usize, 2, 3, 3];
        let x1 = randn(&shape, &mut rng);
        let x2 = randn(&shape, &mut rng);
        let (a, b) = (1.7, -0.4);
        fn make_pairs<'t>(tape: &'t Tape, gammas: &[ArrayD<f64>], shape: &[usize]) -> Vec<AffinePair<'t>> {
            Source::ALL
                .iter()
                .zip(gammas)
                .map(|(&s, g)| AffinePair {
                    gamma: tape.constant(g.clone()),
                    beta: tape.constant(ArrayD::zeros(IxDyn(shape))),
                    source: s,
                })
                .collect()
        }
        let gammas: Vec<ArrayD<f64>> = (0..5).map(|_| randn(&shape, &mut rng)).collect();
        let logits = tape.constant(randn(&[5], &mut rng));
        let w = softmax_masked(&logits, &[true; 5]);

        let mix = tape.constant(&x1 * a + &x2 * b);
        let y_mix = man_combine(&mix, &make_pairs(&tape, &gammas, &shape), &w).value();
        let y1 = man_combine(&tape.constant(x1), &make_pairs(&tape, &gammas, &shape), &w).value();
        let y2 = man_combine(&tape.constant(x2), &make_pairs(&tape, &gammas, &shape), &w).value();
        for ((m, v1), v2) in y_mix.iter().zip(y1.iter()).zip(y2.iter()) {
            assert!((m - (a * v1 + b * v2)).abs() < 1e-9);
        }
    }

    #[test]
    fn man_block_zero_init_outputs_zero() {
        let mut rng = init_rng(7);
        let cfg = ManConfig::default();
        let block = ManBlock::new(4, 3, 2, 256, &cfg, None, &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(randn(&[1, 4, 8, 8], &mut rng));
        let bundle = full_bundle(&tape, 1, &mut rng);
        let y = block.forward(&x, &bundle).unwrap().value();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn man_block_single_source_degenerates_to_image_denormalization() {
        let mut rng = init_rng(8);
        let cfg = ManConfig {
            enabled_sources: vec![Source::Image],
            ..ManConfig::default()
        };
        let block = ManBlock::new(4, 3, 2, 256, &cfg, None, &mut rng).unwrap();
        randomize_params(&block, 0.3, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(randn(&[1, 4, 8, 8], &mut rng));
        let img = tape.constant(randn(&[1, 3, 8, 8], &mut rng));
        let bundle = ModalityBundle {
            image: Some(img.clone()),
            flow_or_heatmap: None,
            mel: None,
            pitch: None,
            energy: None,
            flow_mask: None,
        };
        let got = block.forward(&x, &bundle).unwrap().value();

        // reference: gamma/beta from the image extractor applied directly
        let x_in = instance_normalize(&x, cfg.eps);
        let pair = block.image_ext.forward(&img, 8, 8, None).unwrap();
        let want = pair.gamma.mul(&x_in).add(&pair.beta).value();
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn man_block_missing_enabled_source_errors() {
        let mut rng = init_rng(9);
        let cfg = ManConfig::default();
        let block = ManBlock::new(4, 3, 2, 256, &cfg, None, &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(randn(&[1, 4, 8, 8], &mut rng));
        let bundle = ModalityBundle {
            image: Some(tape.constant(randn(&[1, 3, 8, 8], &mut rng))),
            flow_or_heatmap: None,
            mel: None,
            pitch: None,
            energy: None,
            flow_mask: None,
        };
        assert!(matches!(
            block.forward(&x, &bundle),
            Err(Error::MissingSource(_))
        ));
    }

    #[test]
    fn man_resnet_block_is_identity_at_init_and_preserves_shape() {
        let mut rng = init_rng(10);
        let cfg = ManConfig::default();
        let block =
            ManResnetBlock::new(4, 4, 3, 2, 256, &cfg, false, None, &mut rng).unwrap();
        let tape = Tape::new();
        let xv = randn(&[1, 4, 8, 8], &mut rng);
        let x = tape.constant(xv.clone());
        let bundle = full_bundle(&tape, 1, &mut rng);
        let y = block.forward(&x, &bundle).unwrap();
        assert_eq!(y.shape(), &[1, 4, 8, 8]);
        // zero-init extractors drive both MAN blocks to zero, so the residual
        // path contributes conv2's (zero) bias only
        assert_eq!(y.value(), xv);
    }

    #[test]
    fn man_resnet_with_channel_change_uses_skip_projection() {
        let mut rng = init_rng(11);
        let cfg = ManConfig::default();
        let block =
            ManResnetBlock::new(4, 6, 3, 2, 256, &cfg, false, None, &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(randn(&[2, 4, 8, 8], &mut rng));
        let bundle = full_bundle(&tape, 2, &mut rng);
        let y = block.forward(&x, &bundle).unwrap();
        assert_eq!(y.shape(), &[2, 6, 8, 8]);
    }

    #[test]
    fn eca_sigmoid_weights_stay_in_unit_interval_and_match_oracle() {
        let mut rng = init_rng(12);
        let eca = EcaAttention::new(3, &mut rng).unwrap();
        assert!(matches!(
            EcaAttention::new(4, &mut rng),
            Err(Error::EvenKernel(4))
        ));
        let tape = Tape::new();
        let xv = randn(&[1, 4, 2, 2], &mut rng);
        let x = tape.constant(xv.clone());
        let y = eca.forward(&x).value();

        // loop oracle: gap per channel, pad-1 conv over channel axis, sigmoid
        let w = eca.weight.value();
        let bias = eca.bias.value()[[0]];
        let gap: Vec<f64> = (0..4)
            .map(|c| (0..4).map(|i| xv[[0, c, i / 2, i % 2]]).sum::<f64>() / 4.0)
            .collect();
        for c in 0..4usize {
            let mut acc = bias;
            for (t, dk) in [-1isize, 0, 1].iter().enumerate() {
                let idx = c as isize + dk;
                if idx >= 0 && idx < 4 {
                    acc += w[[0, 0, t]] * gap[idx as usize];
                }
            }
            let gate = 1.0 / (1.0 + (-acc).exp());
            assert!(gate > 0.0 && gate < 1.0);
            for i in 0..4 {
                let want = xv[[0, c, i / 2, i % 2]] * gate;
                let got = y[[0, c, i / 2, i % 2]];
                assert!((got - want).abs() < 1e-6, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn eca_with_huge_bias_behaves_as_identity() {
        let mut rng = init_rng(13);
        let eca = EcaAttention::new(3, &mut rng).unwrap();
        eca.weight.set_value(zeros(&[1, 1, 3]));
        eca.bias
            .set_value(ArrayD::from_elem(IxDyn(&[1]), 50.0));
        let tape = Tape::new();
        let xv = randn(&[2, 3, 4, 4], &mut rng);
        let x = tape.constant(xv.clone());
        let y = eca.forward(&x).value();
        for (a, b) in y.iter().zip(xv.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn partial_conv_with_full_mask_equals_standard_conv() {
        let mut rng = init_rng(14);
        let tape = Tape::new();
        let x = tape.constant(randn(&[1, 2, 5, 5], &mut rng));
        let w = tape.constant(randn(&[3, 2, 3, 3], &mut rng));
        let b = tape.constant(zeros(&[3]));
        let mask = ArrayD::<f64>::ones(IxDyn(&[5, 5]));
        // pad 0: every window is fully in bounds, so coverage is k*k
        let (y, m2) = partial_conv2d(&x, &mask, &w, &b, 1, 0).unwrap();
        let want = x.conv2d(&w, 1, 0).value();
        for (a, b) in y.value().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(m2.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn partial_conv_with_empty_mask_outputs_zero_and_keeps_mask() {
        let mut rng = init_rng(15);
        let tape = Tape::new();
        let x = tape.constant(randn(&[1, 2, 4, 4], &mut rng));
        let w = tape.constant(randn(&[2, 2, 3, 3], &mut rng));
        let b = tape.constant(zeros(&[2]));
        let mask = ArrayD::<f64>::zeros(IxDyn(&[4, 4]));
        let (y, m2) = partial_conv2d(&x, &mask, &w, &b, 1, 1).unwrap();
        assert!(y.value().iter().all(|&v| v == 0.0));
        assert!(m2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partial_conv_checkerboard_matches_windowed_oracle() {
        let mut rng = init_rng(16);
        let xv = randn(&[1, 1, 4, 4], &mut rng);
        let wv = randn(&[1, 1, 3, 3], &mut rng);
        let mut mask = ArrayD::<f64>::zeros(IxDyn(&[4, 4]));
        for y in 0..4 {
            for x in 0..4 {
                if (x + y) % 2 == 0 {
                    mask[[y, x]] = 1.0;
                }
            }
        }
        let tape = Tape::new();
        let x = tape.constant(xv.clone());
        let w = tape.constant(wv.clone());
        let b = tape.constant(zeros(&[1]));
        let (y, _) = partial_conv2d(&x, &mask, &w, &b, 1, 1).unwrap();
        let got = y.value();

        // brute-force windowed renormalization oracle
        for oy in 0..4usize {
            for ox in 0..4usize {
                let mut acc = 0.0;
                let mut cov = 0.0;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let iy = oy as isize + ky as isize - 1;
                        let ix = ox as isize + kx as isize - 1;
                        if iy < 0 || ix < 0 || iy >= 4 || ix >= 4 {
                            continue;
                        }
                        let m = mask[[iy as usize, ix as usize]];
                        cov += m;
                        acc += wv[[0, 0, ky, kx]] * xv[[0, 0, iy as usize, ix as usize]] * m;
                    }
                }
                let want = if cov > 0.0 { acc * 9.0 / cov } else { 0.0 };
                let g = got[[0, 0, oy, ox]];
                assert!((g - want).abs() < 1e-6, "({oy},{ox}): {g} vs {want}");
            }
        }
    }

    #[test]
    fn extractor_shape_contracts() {
        let mut rng = init_rng(17);
        // video: 64x64 conditioning onto a 16x16 map
        for branch in [VideoBranch::Conv2d, VideoBranch::PartialConv2d, VideoBranch::Conv2dEca] {
            let ext =
                VideoAffineExtractor::new(Source::Image, 3, 8, 4, branch, &mut rng).unwrap();
            let tape = Tape::new();
            let cond = tape.constant(randn(&[1, 3, 64, 64], &mut rng));
            let pair = ext.forward(&cond, 16, 16, None).unwrap();
            assert_eq!(pair.gamma.shape(), &[1, 4, 16, 16]);
            assert_eq!(pair.beta.shape(), &[1, 4, 16, 16]);
        }
        // audio: both branches share the (B,C,1,1) contract
        for branch in [AudioBranch::Conv1d, AudioBranch::Lstm] {
            let ext = AudioAffineExtractor::new(Source::Mel, 256, 8, 4, branch, &mut rng);
            let tape = Tape::new();
            let vec = tape.constant(randn(&[2, 256], &mut rng));
            let pair = ext.forward(&vec).unwrap();
            assert_eq!(pair.gamma.shape(), &[2, 4, 1, 1]);
            assert_eq!(pair.beta.shape(), &[2, 4, 1, 1]);
        }
    }

    #[test]
    fn zero_conditioning_with_zero_head_gives_zero_affines() {
        let mut rng = init_rng(18);
        let ext =
            VideoAffineExtractor::new(Source::Image, 3, 8, 4, VideoBranch::Conv2d, &mut rng)
                .unwrap();
        let tape = Tape::new();
        let cond = tape.constant(zeros(&[1, 3, 8, 8]));
        let pair = ext.forward(&cond, 8, 8, None).unwrap();
        assert!(pair.gamma.value().iter().all(|&v| v == 0.0));
        assert!(pair.beta.value().iter().all(|&v| v == 0.0));

        let aext = AudioAffineExtractor::new(Source::Mel, 256, 8, 4, AudioBranch::Conv1d, &mut rng);
        let vec = tape.constant(zeros(&[1, 256]));
        let pair = aext.forward(&vec).unwrap();
        assert!(pair.gamma.value().iter().all(|&v| v == 0.0));
        assert!(pair.beta.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn video_extractor_gradient_wrt_conditioning() {
        let mut rng = init_rng(19);
        let ext = VideoAffineExtractor::new(Source::Image, 2, 4, 3, VideoBranch::Conv2d, &mut rng)
            .unwrap();
        randomize_params(&ext, 0.4, &mut rng);
        let cond = randn(&[2, 4, 8, 8], &mut rng);
        // reinterpret first two channels as the conditioning input
        let cond = cond.slice_axis(ndarray::Axis(1), ndarray::Slice::from(0..2)).to_owned();
        check_gradients(
            |_t, xs| {
                let pair = ext.forward(&xs[0], 8, 8, None).unwrap();
                pair.gamma.square().add(&pair.beta.square()).mean_all()
            },
            &[cond],
        )
        .unwrap();
    }

    #[test]
    fn audio_extractor_gradient_wrt_conditioning() {
        let mut rng = init_rng(20);
        for branch in [AudioBranch::Conv1d, AudioBranch::Lstm] {
            let ext = AudioAffineExtractor::new(Source::Pitch, 16, 4, 3, branch, &mut rng);
            randomize_params(&ext, 0.4, &mut rng);
            let vec = randn(&[1, 16], &mut rng);
            check_gradients(
                |_t, xs| {
                    let pair = ext.forward(&xs[0]).unwrap();
                    pair.gamma.square().add(&pair.beta.square()).mean_all()
                },
                &[vec],
            )
            .unwrap();
        }
    }

    #[test]
    fn man_block_gradient_wrt_input_map() {
        let mut rng = init_rng(21);
        let cfg = ManConfig {
            channel_width: 4,
            ..ManConfig::default()
        };
        let block = ManBlock::new(4, 3, 2, 16, &cfg, None, &mut rng).unwrap();
        randomize_params(&block, 0.3, &mut rng);
        let x = Param::new(randn(&[1, 4, 8, 8], &mut rng));
        let img = randn(&[1, 3, 8, 8], &mut rng);
        let flow = randn(&[1, 2, 8, 8], &mut rng);
        let mel = randn(&[1, 16], &mut rng);
        let pitch = randn(&[1, 16], &mut rng);
        let energy = randn(&[1, 16], &mut rng);
        check_param_gradients(
            |tape| {
                let bundle = ModalityBundle {
                    image: Some(tape.constant(img.clone())),
                    flow_or_heatmap: Some(tape.constant(flow.clone())),
                    mel: Some(tape.constant(mel.clone())),
                    pitch: Some(tape.constant(pitch.clone())),
                    energy: Some(tape.constant(energy.clone())),
                    flow_mask: None,
                };
                block
                    .forward(&tape.param(&x), &bundle)
                    .unwrap()
                    .square()
                    .mean_all()
            },
            &[x.clone()],
        )
        .unwrap();
    }

    #[test]
    fn shared_gate_ties_blocks_together() {
        let mut rng = init_rng(22);
        let cfg = ManConfig::default();
        let shared = Param::new(zeros(&[5]));
        let b1 = ManBlock::new(4, 3, 2, 256, &cfg, Some(shared.clone()), &mut rng).unwrap();
        let b2 = ManBlock::new(4, 3, 2, 256, &cfg, Some(shared.clone()), &mut rng).unwrap();
        shared.set_value(
            ArrayD::from_shape_vec(IxDyn(&[5]), vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
        );
        assert_eq!(b1.gate.weights_value(), b2.gate.weights_value());
    }
}
