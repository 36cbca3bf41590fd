//! Generator, multi-scale discriminator, and the autoregressive inference
//! rollout.
//!
//! The generator maps the 13-dim mel vector to a 4x4 seed, refines it
//! through 8 MAN-ResNet blocks with nearest-neighbor upsampling spread
//! between them, applies a class-activation attention layer before the last
//! block, and emits a tanh-bounded RGB frame. Every normalization layer is
//! driven by the full modality bundle (identity image, predicted flow or
//! heatmaps, mel, pitch, energy).
//!
//! The discriminator evaluates frames at full and 2x-downsampled scale;
//! each scale is a spectral-normalized patch classifier that also produces
//! a CAM logit and keeps its intermediate features for feature matching.

use crate::audio::{build_feature_frames, AudioFeatureFrame, AudioTrack, QuantRanges};
use crate::autodiff::{join_path, Module, Param, Tape, Tensor};
use crate::error::{Error, Result};
use crate::man::{ManConfig, ManResnetBlock, ModalityBundle, NUM_SOURCES};
use crate::nn::{zeros, Conv2d, InitRng, Linear};
use crate::predictors::{FlowPredictor, FlowPredictorConfig, KeypointPredictor, KeypointPredictorConfig, CONTEXT_FRAMES};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

pub const SEED_SIZE: usize = 4;

/// Which predictor feeds the flow/heatmap conditioning source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondKind {
    OpticalFlow,
    KeypointHeatmap,
}

impl CondKind {
    pub fn channels(self) -> usize {
        match self {
            CondKind::OpticalFlow => 2,
            CondKind::KeypointHeatmap => crate::predictors::NUM_KEYPOINTS,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub frame_size: usize,
    pub base_channels: usize,
    pub n_man_blocks: usize,
    pub flow_or_heatmap: CondKind,
    pub man: ManConfig,
    /// Spectral norm on generator convolutions (the zero-initialized
    /// extractor heads are always exempt).
    pub spectral_norm: bool,
    /// One gate parameter shared by every MAN layer instead of per-layer.
    pub shared_gate: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            frame_size: 64,
            base_channels: 64,
            n_man_blocks: 8,
            flow_or_heatmap: CondKind::OpticalFlow,
            man: ManConfig::default(),
            spectral_norm: true,
            shared_gate: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_size < 32 || !self.frame_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "frame_size must be a power of two >= 32, got {}",
                self.frame_size
            )));
        }
        if self.n_man_blocks == 0 {
            return Err(Error::Config("n_man_blocks must be >= 1".into()));
        }
        self.man.validate()
    }

    /// Per-block output channel widths and pre-block upsample counts. The
    /// counts sum to log2(frame_size / seed), spread evenly; channel widths
    /// halve (min 8) at each upsampling step.
    pub fn block_plan(&self) -> Vec<(usize, usize)> {
        let n = self.n_man_blocks;
        let k = (self.frame_size / SEED_SIZE).trailing_zeros() as usize;
        let mut plan = Vec::with_capacity(n);
        let mut width = self.base_channels;
        for i in 0..n {
            let ups = (i + 1) * k / n - i * k / n;
            for _ in 0..ups {
                width = (width / 2).max(8);
            }
            plan.push((width, ups));
        }
        plan
    }
}

/// Class-activation layer: global average and max pooled channel
/// descriptors each pass through a weight vector; the two logits sum into
/// one, the same weights reweight the channels, and the attention map is
/// the non-negative channel sum of the reweighted features.
pub struct CamLayer {
    pub w_avg: Linear,
    pub w_max: Linear,
}

pub struct CamOutput<'t> {
    pub features: Tensor<'t>,
    pub logit: Tensor<'t>,
    pub attention_map: Tensor<'t>,
}

impl CamLayer {
    pub fn new(channels: usize, rng: &mut InitRng) -> Self {
        CamLayer {
            w_avg: Linear::new(channels, 1, rng),
            w_max: Linear::new(channels, 1, rng),
        }
    }

    pub fn forward<'t>(&self, x: &Tensor<'t>) -> CamOutput<'t> {
        let tape = x.tape();
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let gap = x.global_avg_pool().reshape(&[b, c]);
        let gmp = x.global_max_pool().reshape(&[b, c]);
        let logit = self.w_avg.forward(&gap).add(&self.w_max.forward(&gmp));
        let w = tape
            .param(&self.w_avg.weight)
            .add(&tape.param(&self.w_max.weight))
            .reshape(&[1, c, 1, 1]);
        let features = x.mul(&w);
        let attention_map = features.sum_axes_keep(&[1]).relu();
        CamOutput {
            features,
            logit,
            attention_map,
        }
    }
}

impl Module for CamLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.w_avg.visit_params(&join_path(prefix, "w_avg"), f);
        self.w_max.visit_params(&join_path(prefix, "w_max"), f);
    }
}

pub struct Generator {
    stem: Linear,
    blocks: Vec<ManResnetBlock>,
    upsample_before: Vec<usize>,
    pub cam: CamLayer,
    head1: Conv2d,
    head2: Conv2d,
    pub cfg: GeneratorConfig,
    pub shared_gate: Option<Param>,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, rng: &mut InitRng) -> Result<Self> {
        cfg.validate()?;
        let plan = cfg.block_plan();
        let shared_gate = cfg.shared_gate.then(|| Param::new(zeros(&[NUM_SOURCES])));
        let mut blocks = Vec::with_capacity(cfg.n_man_blocks);
        let mut upsample_before = Vec::with_capacity(cfg.n_man_blocks);
        let mut in_ch = cfg.base_channels;
        for &(out_ch, up) in &plan {
            blocks.push(ManResnetBlock::new(
                in_ch,
                out_ch,
                3,
                cfg.flow_or_heatmap.channels(),
                crate::audio::MEL_LARGE,
                &cfg.man,
                cfg.spectral_norm,
                shared_gate.clone(),
                rng,
            )?);
            upsample_before.push(up);
            in_ch = out_ch;
        }
        let last = plan.last().unwrap().0;
        let mut head1 = Conv2d::new(last, last, 3, 1, 1, rng);
        let mut head2 = Conv2d::new(last, 3, 3, 1, 1, rng);
        if cfg.spectral_norm {
            head1 = head1.with_spectral_norm(rng);
            head2 = head2.with_spectral_norm(rng);
        }
        // CAM sits after block n-1 (of n), i.e. third-from-last layer ahead
        // of the two head convolutions.
        let cam_ch = if cfg.n_man_blocks >= 2 {
            plan[cfg.n_man_blocks - 2].0
        } else {
            cfg.base_channels
        };
        Ok(Generator {
            stem: Linear::new(crate::audio::MEL_SMALL, cfg.base_channels * SEED_SIZE * SEED_SIZE, rng),
            blocks,
            upsample_before,
            cam: CamLayer::new(cam_ch, rng),
            head1,
            head2,
            cfg: cfg.clone(),
        shared_gate,
        })
    }

    /// mel_small: (B,13); the bundle carries the other conditioning sources.
    /// Output is (B, 3, frame_size, frame_size) in [-1, 1].
    pub fn forward<'t>(
        &self,
        mel_small: &Tensor<'t>,
        bundle: &ModalityBundle<'t>,
    ) -> Result<Tensor<'t>> {
        if mel_small.ndim() != 2 || mel_small.shape()[1] != crate::audio::MEL_SMALL {
            return Err(Error::ShapeMismatch(format!(
                "mel_small must be (B,{}), got {:?}",
                crate::audio::MEL_SMALL,
                mel_small.shape()
            )));
        }
        let b = mel_small.shape()[0];
        let mut h = self
            .stem
            .forward(mel_small)
            .reshape(&[b, self.cfg.base_channels, SEED_SIZE, SEED_SIZE]);
        let n = self.blocks.len();
        for (i, block) in self.blocks.iter().enumerate() {
            for _ in 0..self.upsample_before[i] {
                h = h.upsample_nearest2x();
            }
            if n >= 2 && i == n - 1 {
                h = self.cam.forward(&h).features;
            }
            h = block.forward(&h, bundle)?;
        }
        let h = self.head1.forward(&h).leaky_relu(0.2);
        Ok(self.head2.forward(&h).tanh())
    }
}

impl Module for Generator {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit_params(&join_path(prefix, "stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join_path(prefix, &format!("block{i}")), f);
        }
        self.cam.visit_params(&join_path(prefix, "cam"), f);
        self.head1.visit_params(&join_path(prefix, "head1"), f);
        self.head2.visit_params(&join_path(prefix, "head2"), f);
        if let Some(g) = &self.shared_gate {
            f(&join_path(prefix, "shared_gate"), g);
        }
    }
}

/// One scale of the discriminator: strided spectral-normalized convs, a
/// fully convolutional patch head, and a CAM branch.
pub struct PatchDiscriminator {
    convs: Vec<Conv2d>,
    head: Conv2d,
    pub cam: CamLayer,
}

impl PatchDiscriminator {
    pub fn new(base: usize, rng: &mut InitRng) -> Self {
        let convs = vec![
            Conv2d::new(3, base, 4, 2, 1, rng).with_spectral_norm(rng),
            Conv2d::new(base, 2 * base, 4, 2, 1, rng).with_spectral_norm(rng),
            Conv2d::new(2 * base, 4 * base, 4, 1, 1, rng).with_spectral_norm(rng),
        ];
        let head = Conv2d::new(4 * base, 1, 4, 1, 1, rng).with_spectral_norm(rng);
        let cam = CamLayer::new(4 * base, rng);
        PatchDiscriminator { convs, head, cam }
    }

    pub fn forward<'t>(&self, x: &Tensor<'t>) -> ScaleOutput<'t> {
        let mut features = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h).leaky_relu(0.2);
            features.push(h.clone());
        }
        let cam = self.cam.forward(&h);
        ScaleOutput {
            patch_logits: self.head.forward(&cam.features),
            cam_logit: cam.logit,
            features,
        }
    }
}

impl Module for PatchDiscriminator {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit_params(&join_path(prefix, &format!("conv{i}")), f);
        }
        self.head.visit_params(&join_path(prefix, "head"), f);
        self.cam.visit_params(&join_path(prefix, "cam"), f);
    }
}

pub struct ScaleOutput<'t> {
    pub patch_logits: Tensor<'t>,
    pub cam_logit: Tensor<'t>,
    /// Intermediate features ordered shallow to deep.
    pub features: Vec<Tensor<'t>>,
}

pub struct DiscriminatorOutput<'t> {
    pub per_scale: Vec<ScaleOutput<'t>>,
}

impl<'t> DiscriminatorOutput<'t> {
    pub fn patch_logits(&self) -> Vec<Tensor<'t>> {
        self.per_scale.iter().map(|s| s.patch_logits.clone()).collect()
    }

    pub fn cam_logits(&self) -> Vec<Tensor<'t>> {
        self.per_scale.iter().map(|s| s.cam_logit.clone()).collect()
    }

    pub fn features(&self) -> Vec<Vec<Tensor<'t>>> {
        self.per_scale.iter().map(|s| s.features.clone()).collect()
    }
}

/// Frame discriminator evaluated at `scales` resolutions (full, then
/// repeatedly 2x average-pooled).
pub struct MultiScaleDiscriminator {
    pub scales: Vec<PatchDiscriminator>,
}

impl MultiScaleDiscriminator {
    pub fn new(n_scales: usize, base: usize, rng: &mut InitRng) -> Self {
        assert!(n_scales >= 2, "the discriminator needs >= 2 scales");
        MultiScaleDiscriminator {
            scales: (0..n_scales).map(|_| PatchDiscriminator::new(base, rng)).collect(),
        }
    }

    pub fn forward<'t>(&self, frame: &Tensor<'t>) -> DiscriminatorOutput<'t> {
        let mut per_scale = Vec::with_capacity(self.scales.len());
        let mut x = frame.clone();
        for (i, d) in self.scales.iter().enumerate() {
            if i > 0 {
                x = x.avg_pool2d(2, 2);
            }
            per_scale.push(d.forward(&x));
        }
        DiscriminatorOutput { per_scale }
    }
}

impl Module for MultiScaleDiscriminator {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, d) in self.scales.iter().enumerate() {
            d.visit_params(&join_path(prefix, &format!("scale{i}")), f);
        }
    }
}

/// Generator plus the predictor configured as its conditioning source.
pub struct SynthesisModel {
    pub generator: Generator,
    pub flow_predictor: Option<FlowPredictor>,
    pub keypoint_predictor: Option<KeypointPredictor>,
}

impl SynthesisModel {
    pub fn new(cfg: &GeneratorConfig, rng: &mut InitRng) -> Result<Self> {
        let generator = Generator::new(cfg, rng)?;
        let (flow_predictor, keypoint_predictor) = match cfg.flow_or_heatmap {
            CondKind::OpticalFlow => (
                Some(FlowPredictor::new(&FlowPredictorConfig::default(), rng)),
                None,
            ),
            CondKind::KeypointHeatmap => (
                None,
                Some(KeypointPredictor::new(&KeypointPredictorConfig::default(), rng)),
            ),
        };
        Ok(SynthesisModel {
            generator,
            flow_predictor,
            keypoint_predictor,
        })
    }

    /// Run the configured predictor on stacked context frames + mel.
    pub fn predict_cond<'t>(
        &self,
        frames: &Tensor<'t>,
        mel_large: &Tensor<'t>,
    ) -> Result<Tensor<'t>> {
        match self.generator.cfg.flow_or_heatmap {
            CondKind::OpticalFlow => self
                .flow_predictor
                .as_ref()
                .ok_or_else(|| Error::MissingSource("flow predictor".into()))?
                .forward(frames, mel_large),
            CondKind::KeypointHeatmap => self
                .keypoint_predictor
                .as_ref()
                .ok_or_else(|| Error::MissingSource("keypoint predictor".into()))?
                .forward(frames, mel_large),
        }
    }
}

impl Module for SynthesisModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.generator.visit_params(&join_path(prefix, "gen"), f);
        if let Some(p) = &self.flow_predictor {
            p.visit_params(&join_path(prefix, "flow_pred"), f);
        }
        if let Some(p) = &self.keypoint_predictor {
            p.visit_params(&join_path(prefix, "kp_pred"), f);
        }
    }
}

/// Assemble the conditioning bundle for one generator step.
pub fn make_bundle<'t>(
    tape: &'t Tape,
    identity: &ArrayD<f64>,
    cond: Tensor<'t>,
    feats: &AudioFeatureFrame,
) -> ModalityBundle<'t> {
    let b = cond.shape()[0];
    let ident4 = identity
        .clone()
        .into_shape_with_order(IxDyn(&[1, identity.shape()[0], identity.shape()[1], identity.shape()[2]]))
        .unwrap();
    let tile = |v: &[f64]| {
        let one = ArrayD::from_shape_vec(IxDyn(&[1, v.len()]), v.to_vec()).unwrap();
        tape.constant(one).broadcast_to(&[b, v.len()])
    };
    ModalityBundle {
        image: Some(tape.constant(ident4).broadcast_to(&[
            b,
            identity.shape()[0],
            identity.shape()[1],
            identity.shape()[2],
        ])),
        flow_or_heatmap: Some(cond),
        mel: Some(tile(&feats.mel_large)),
        pitch: Some(tile(&feats.pitch_onehot)),
        energy: Some(tile(&feats.energy_onehot)),
        flow_mask: None,
    }
}

/// Stack the last `CONTEXT_FRAMES` frames (oldest first) along channels:
/// (1, 15, H, W).
pub fn stack_context(context: &VecDeque<ArrayD<f64>>) -> ArrayD<f64> {
    assert_eq!(context.len(), CONTEXT_FRAMES);
    let (c, h, w) = {
        let f = &context[0];
        (f.shape()[0], f.shape()[1], f.shape()[2])
    };
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[1, CONTEXT_FRAMES * c, h, w]));
    for (i, frame) in context.iter().enumerate() {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[0, i * c + ci, y, x]] = frame[[ci, y, x]];
                }
            }
        }
    }
    out
}

/// Autoregressive rollout: one generated frame per audio-aligned feature
/// frame at 25 fps. The 5-frame context starts as five copies of the
/// identity frame; each step runs the configured predictor, then the
/// generator, and pushes the new frame into the context.
pub fn run_inference(
    model: &SynthesisModel,
    identity: &ArrayD<f64>,
    track: &AudioTrack,
    ranges: &QuantRanges,
) -> Result<Vec<ArrayD<f64>>> {
    let f = model.generator.cfg.frame_size;
    if identity.ndim() != 3 || identity.shape() != [3, f, f] {
        return Err(Error::ShapeMismatch(format!(
            "identity frame must be (3,{f},{f}), got {:?}",
            identity.shape()
        )));
    }
    let feats = build_feature_frames(track, crate::audio::DEFAULT_FPS, ranges)?;
    let mut context: VecDeque<ArrayD<f64>> = VecDeque::with_capacity(CONTEXT_FRAMES);
    for _ in 0..CONTEXT_FRAMES {
        context.push_back(identity.clone());
    }
    let mut out = Vec::with_capacity(feats.len());
    for feat in &feats {
        let tape = Tape::new();
        let frames = tape.constant(stack_context(&context));
        let mel_large = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, feat.mel_large.len()]), feat.mel_large.clone())
                .unwrap(),
        );
        let cond = model.predict_cond(&frames, &mel_large)?;
        let bundle = make_bundle(&tape, identity, cond, feat);
        let mel_small = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, feat.mel_small.len()]), feat.mel_small.clone())
                .unwrap(),
        );
        let frame = model
            .generator
            .forward(&mel_small, &bundle)?
            .value()
            .into_shape_with_order(IxDyn(&[3, f, f]))
            .unwrap();
        context.pop_front();
        context.push_back(frame.clone());
        out.push(frame);
    }
    Ok(out)
}
