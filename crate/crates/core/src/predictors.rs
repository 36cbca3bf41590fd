//! Auxiliary predictors for the flow/heatmap conditioning source, plus the
//! desk-scale oracles that stand in for pretrained detectors: an isotropic
//! Gaussian keypoint renderer and a brute-force block-matching flow
//! estimator.
//!
//! Both networks consume the previous 5 frames stacked along channels
//! (5 x RGB = 15 planes) plus one extra plane tiled from a linear projection
//! of the 256-dim mel vector.

use crate::autodiff::ops::concat;
use crate::autodiff::{join_path, Module, Param, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, InitRng, Linear};
use ndarray::{ArrayD, IxDyn};

pub const NUM_KEYPOINTS: usize = 15;
pub const HEATMAP_SIZE: usize = 96;
pub const CONTEXT_FRAMES: usize = 5;
pub const KEYPOINT_SIGMA: f64 = 2.0;
const LEAKY: f64 = 0.2;

/// K per-keypoint confidence maps in [0,1].
#[derive(Debug, Clone)]
pub struct HeatmapSet {
    pub maps: ArrayD<f64>,
}

impl HeatmapSet {
    pub fn new(maps: ArrayD<f64>) -> Result<Self> {
        if maps.ndim() != 3 || maps.shape()[0] != NUM_KEYPOINTS {
            return Err(Error::ShapeMismatch(format!(
                "heatmaps must be ({NUM_KEYPOINTS},S,S), got {:?}",
                maps.shape()
            )));
        }
        if maps.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::ShapeMismatch(
                "heatmap entries must lie in [0,1]".into(),
            ));
        }
        Ok(HeatmapSet { maps })
    }

    pub fn size(&self) -> usize {
        self.maps.shape()[1]
    }
}

/// Dense per-pixel (dx, dy) displacement.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub flow: ArrayD<f64>,
}

impl FlowField {
    pub fn new(flow: ArrayD<f64>) -> Result<Self> {
        if flow.ndim() != 3 || flow.shape()[0] != 2 {
            return Err(Error::ShapeMismatch(format!(
                "flow must be (2,H,W), got {:?}",
                flow.shape()
            )));
        }
        Ok(FlowField { flow })
    }

    pub fn height(&self) -> usize {
        self.flow.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.flow.shape()[2]
    }
}

/// Per-channel spatial argmax, ties broken by row-major first occurrence.
/// Returns (x, y) per keypoint.
pub fn heatmaps_to_keypoints(h: &HeatmapSet) -> Vec<(usize, usize)> {
    let s = h.size();
    let mut out = Vec::with_capacity(NUM_KEYPOINTS);
    for k in 0..NUM_KEYPOINTS {
        let mut best = f64::NEG_INFINITY;
        let mut at = (0usize, 0usize);
        for y in 0..s {
            for x in 0..s {
                let v = h.maps[[k, y, x]];
                if v > best {
                    best = v;
                    at = (x, y);
                }
            }
        }
        out.push(at);
    }
    out
}

/// Ground-truth heatmaps for known landmark positions: one isotropic
/// Gaussian blob per keypoint with peak 1.0 at the landmark.
pub fn keypoint_oracle(
    landmarks: &[(usize, usize)],
    size: usize,
    sigma: f64,
) -> Result<HeatmapSet> {
    if landmarks.len() != NUM_KEYPOINTS {
        return Err(Error::UnknownScene(format!(
            "expected {NUM_KEYPOINTS} landmarks, got {}",
            landmarks.len()
        )));
    }
    let mut maps = ArrayD::<f64>::zeros(IxDyn(&[NUM_KEYPOINTS, size, size]));
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (k, &(cx, cy)) in landmarks.iter().enumerate() {
        if cx >= size || cy >= size {
            return Err(Error::UnknownScene(format!(
                "landmark {k} at ({cx},{cy}) outside the {size} grid"
            )));
        }
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 - cx as f64;
                let dy = y as f64 - cy as f64;
                maps[[k, y, x]] = (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    HeatmapSet::new(maps)
}

/// Brute-force block-matching optical flow between two grayscale frames.
/// Each `block`-sized tile of `frame_a` is matched against every integer
/// displacement within `radius` in `frame_b` by sum of squared differences.
/// Ties prefer the smallest displacement magnitude, then the earliest
/// candidate in row-major (dy, dx) order. Tiles whose search window leaves
/// the frame keep only in-bounds candidates.
pub fn flow_oracle(
    frame_a: &ArrayD<f64>,
    frame_b: &ArrayD<f64>,
    block: usize,
    radius: usize,
) -> Result<FlowField> {
    if frame_a.ndim() != 2 || frame_b.ndim() != 2 || frame_a.shape() != frame_b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "grayscale frames must match: {:?} vs {:?}",
            frame_a.shape(),
            frame_b.shape()
        )));
    }
    assert!(block > 0 && radius > 0);
    let (h, w) = (frame_a.shape()[0], frame_a.shape()[1]);
    let mut flow = ArrayD::<f64>::zeros(IxDyn(&[2, h, w]));
    let r = radius as isize;
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let bh = block.min(h - by);
            let bw = block.min(w - bx);
            let mut best_ssd = f64::INFINITY;
            let mut best_mag = i64::MAX;
            let mut best = (0isize, 0isize);
            for dy in -r..=r {
                for dx in -r..=r {
                    let ty = by as isize + dy;
                    let tx = bx as isize + dx;
                    if ty < 0
                        || tx < 0
                        || ty + bh as isize > h as isize
                        || tx + bw as isize > w as isize
                    {
                        continue;
                    }
                    let mut ssd = 0.0;
                    for y in 0..bh {
                        for x in 0..bw {
                            let d = frame_a[[by + y, bx + x]]
                                - frame_b[[(ty as usize) + y, (tx as usize) + x]];
                            ssd += d * d;
                        }
                    }
                    let mag = (dy * dy + dx * dx) as i64;
                    if ssd < best_ssd || (ssd == best_ssd && mag < best_mag) {
                        best_ssd = ssd;
                        best_mag = mag;
                        best = (dx, dy);
                    }
                }
            }
            for y in 0..bh {
                for x in 0..bw {
                    flow[[0, by + y, bx + x]] = best.0 as f64;
                    flow[[1, by + y, bx + x]] = best.1 as f64;
                }
            }
        }
    }
    FlowField::new(flow)
}

/// Mean squared error between prediction and target (re-exported from the
/// loss module for callers that think in predictor terms).
pub use crate::losses::predictor_mse_loss;

/// Tile a linear projection of the mel vector into one conditioning plane
/// and concatenate it under the stacked frames.
fn attach_mel_plane<'t>(
    frames: &Tensor<'t>,
    mel: &Tensor<'t>,
    proj: &Linear,
) -> Result<Tensor<'t>> {
    if frames.ndim() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "frames must be (B,C,H,W), got {:?}",
            frames.shape()
        )));
    }
    if mel.ndim() != 2 || mel.shape()[0] != frames.shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "mel must be (B,256) matching batch, got {:?}",
            mel.shape()
        )));
    }
    let (b, h, w) = (frames.shape()[0], frames.shape()[2], frames.shape()[3]);
    let plane = proj
        .forward(mel)
        .reshape(&[b, 1, 1, 1])
        .broadcast_to(&[b, 1, h, w]);
    Ok(concat(&[frames.clone(), plane], 1))
}

/// One encoder-decoder hourglass level with skip connections and nearest
/// upsampling.
struct Hourglass {
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    skip: Vec<Conv2d>,
    bottom: Conv2d,
}

impl Hourglass {
    fn new(channels: usize, depth: usize, rng: &mut InitRng) -> Self {
        let down = (0..depth)
            .map(|_| Conv2d::new(channels, channels, 3, 1, 1, rng))
            .collect();
        let up = (0..depth)
            .map(|_| Conv2d::new(channels, channels, 3, 1, 1, rng))
            .collect();
        let skip = (0..depth)
            .map(|_| Conv2d::new(channels, channels, 3, 1, 1, rng))
            .collect();
        Hourglass {
            down,
            up,
            skip,
            bottom: Conv2d::new(channels, channels, 3, 1, 1, rng),
        }
    }

    fn forward<'t>(&self, x: &Tensor<'t>) -> Tensor<'t> {
        self.recurse(x, 0)
    }

    fn recurse<'t>(&self, x: &Tensor<'t>, level: usize) -> Tensor<'t> {
        if level == self.down.len() {
            return self.bottom.forward(x).leaky_relu(LEAKY);
        }
        let skip = self.skip[level].forward(x).leaky_relu(LEAKY);
        let down = self.down[level]
            .forward(&x.avg_pool2d(2, 2))
            .leaky_relu(LEAKY);
        let inner = self.recurse(&down, level + 1);
        let up = self.up[level]
            .forward(&inner.upsample_nearest2x())
            .leaky_relu(LEAKY);
        skip.add(&up)
    }
}

impl Module for Hourglass {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, c) in self.down.iter().enumerate() {
            c.visit_params(&join_path(prefix, &format!("down{i}")), f);
        }
        for (i, c) in self.up.iter().enumerate() {
            c.visit_params(&join_path(prefix, &format!("up{i}")), f);
        }
        for (i, c) in self.skip.iter().enumerate() {
            c.visit_params(&join_path(prefix, &format!("skip{i}")), f);
        }
        self.bottom.visit_params(&join_path(prefix, "bottom"), f);
    }
}

/// Stacked-hourglass keypoint-heatmap predictor. Input frames at any
/// resolution are resized to the heatmap grid; output is
/// (B, 15, heatmap_size, heatmap_size) through a sigmoid.
pub struct KeypointPredictor {
    mel_proj: Linear,
    stem: Conv2d,
    stages: Vec<Hourglass>,
    head: Conv2d,
    pub heatmap_size: usize,
}

pub struct KeypointPredictorConfig {
    pub base_channels: usize,
    pub stages: usize,
    pub depth: usize,
    pub heatmap_size: usize,
}

impl Default for KeypointPredictorConfig {
    fn default() -> Self {
        KeypointPredictorConfig {
            base_channels: 8,
            stages: 2,
            depth: 2,
            heatmap_size: HEATMAP_SIZE,
        }
    }
}

impl KeypointPredictor {
    pub fn new(cfg: &KeypointPredictorConfig, rng: &mut InitRng) -> Self {
        let c = cfg.base_channels;
        KeypointPredictor {
            mel_proj: Linear::new(crate::audio::MEL_LARGE, 1, rng),
            stem: Conv2d::new(3 * CONTEXT_FRAMES + 1, c, 3, 1, 1, rng),
            stages: (0..cfg.stages).map(|_| Hourglass::new(c, cfg.depth, rng)).collect(),
            head: Conv2d::new(c, NUM_KEYPOINTS, 1, 1, 0, rng),
            heatmap_size: cfg.heatmap_size,
        }
    }

    /// frames: (B, 15, H, W); mel: (B, 256) -> (B, 15, S, S) in [0,1].
    pub fn forward<'t>(&self, frames: &Tensor<'t>, mel: &Tensor<'t>) -> Result<Tensor<'t>> {
        if frames.ndim() != 4 || frames.shape()[1] != 3 * CONTEXT_FRAMES {
            return Err(Error::ShapeMismatch(format!(
                "expected (B,{},H,W) stacked frames, got {:?}",
                3 * CONTEXT_FRAMES,
                frames.shape()
            )));
        }
        let x = attach_mel_plane(frames, mel, &self.mel_proj)?;
        let x = x.resize_bilinear(self.heatmap_size, self.heatmap_size);
        let mut h = self.stem.forward(&x).leaky_relu(LEAKY);
        for stage in &self.stages {
            h = stage.forward(&h);
        }
        Ok(self.head.forward(&h).sigmoid())
    }
}

impl Module for KeypointPredictor {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.mel_proj.visit_params(&join_path(prefix, "mel_proj"), f);
        self.stem.visit_params(&join_path(prefix, "stem"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit_params(&join_path(prefix, &format!("stage{i}")), f);
        }
        self.head.visit_params(&join_path(prefix, "head"), f);
    }
}

/// Encoder-decoder flow predictor with skip connections between matching
/// resolutions and a zero-initialized head, so the initial flow is zero.
pub struct FlowPredictor {
    mel_proj: Linear,
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    dec2: Conv2d,
    dec1: Conv2d,
    head: Conv2d,
}

pub struct FlowPredictorConfig {
    pub base_channels: usize,
}

impl Default for FlowPredictorConfig {
    fn default() -> Self {
        FlowPredictorConfig { base_channels: 12 }
    }
}

impl FlowPredictor {
    pub fn new(cfg: &FlowPredictorConfig, rng: &mut InitRng) -> Self {
        let c = cfg.base_channels;
        FlowPredictor {
            mel_proj: Linear::new(crate::audio::MEL_LARGE, 1, rng),
            enc1: Conv2d::new(3 * CONTEXT_FRAMES + 1, c, 3, 1, 1, rng),
            enc2: Conv2d::new(c, 2 * c, 3, 2, 1, rng),
            enc3: Conv2d::new(2 * c, 4 * c, 3, 2, 1, rng),
            dec2: Conv2d::new(4 * c + 2 * c, 2 * c, 3, 1, 1, rng),
            dec1: Conv2d::new(2 * c + c, c, 3, 1, 1, rng),
            head: Conv2d::new_zero(c, 2, 3, 1, 1),
        }
    }

    /// frames: (B, 15, H, W); mel: (B, 256) -> (B, 2, H, W).
    pub fn forward<'t>(&self, frames: &Tensor<'t>, mel: &Tensor<'t>) -> Result<Tensor<'t>> {
        if frames.ndim() != 4 || frames.shape()[1] != 3 * CONTEXT_FRAMES {
            return Err(Error::ShapeMismatch(format!(
                "expected (B,{},H,W) stacked frames, got {:?}",
                3 * CONTEXT_FRAMES,
                frames.shape()
            )));
        }
        let (h, w) = (frames.shape()[2], frames.shape()[3]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "frame size must be divisible by 4, got {h}x{w}"
            )));
        }
        let x = attach_mel_plane(frames, mel, &self.mel_proj)?;
        let e1 = self.enc1.forward(&x).leaky_relu(LEAKY);
        let e2 = self.enc2.forward(&e1).leaky_relu(LEAKY);
        let e3 = self.enc3.forward(&e2).leaky_relu(LEAKY);
        let d2 = self
            .dec2
            .forward(&concat(&[e3.upsample_nearest2x(), e2], 1))
            .leaky_relu(LEAKY);
        let d1 = self
            .dec1
            .forward(&concat(&[d2.upsample_nearest2x(), e1], 1))
            .leaky_relu(LEAKY);
        Ok(self.head.forward(&d1))
    }
}

impl Module for FlowPredictor {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.mel_proj.visit_params(&join_path(prefix, "mel_proj"), f);
        self.enc1.visit_params(&join_path(prefix, "enc1"), f);
        self.enc2.visit_params(&join_path(prefix, "enc2"), f);
        self.enc3.visit_params(&join_path(prefix, "enc3"), f);
        self.dec2.visit_params(&join_path(prefix, "dec2"), f);
        self.dec1.visit_params(&join_path(prefix, "dec1"), f);
        self.head.visit_params(&join_path(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_param_gradients;
    use crate::autodiff::Tape;
    use crate::losses::Adam;
    use crate::nn::init_rng;
    use rand::RngExt;

    fn randn(shape: &[usize], rng: &mut crate::nn::InitRng) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn argmax_decoding_basic_cases() {
        let mut maps = ArrayD::<f64>::zeros(IxDyn(&[NUM_KEYPOINTS, 48, 48]));
        maps[[3, 34, 12]] = 1.0;
        let h = HeatmapSet::new(maps).unwrap();
        let kps = heatmaps_to_keypoints(&h);
        assert_eq!(kps[3], (12, 34));
        // untouched channels are uniform zero: tie-break lands on (0,0)
        assert_eq!(kps[0], (0, 0));
    }

    #[test]
    fn argmax_matches_exhaustive_scan_oracle() {
        let mut rng = init_rng(1);
        let maps = randn(&[NUM_KEYPOINTS, 32, 32], &mut rng).mapv(|v| (v + 1.0) / 2.0);
        let h = HeatmapSet::new(maps.clone()).unwrap();
        let got = heatmaps_to_keypoints(&h);
        for k in 0..NUM_KEYPOINTS {
            let mut best = f64::NEG_INFINITY;
            let mut want = (0, 0);
            for y in 0..32 {
                for x in 0..32 {
                    if maps[[k, y, x]] > best {
                        best = maps[[k, y, x]];
                        want = (x, y);
                    }
                }
            }
            assert_eq!(got[k], want);
        }
    }

    #[test]
    fn keypoint_oracle_peaks_at_landmarks_and_round_trips() {
        let mut rng = init_rng(2);
        for _ in 0..20 {
            let landmarks: Vec<(usize, usize)> = (0..NUM_KEYPOINTS)
                .map(|_| {
                    (
                        rng.random_range(0..HEATMAP_SIZE),
                        rng.random_range(0..HEATMAP_SIZE),
                    )
                })
                .collect();
            let h = keypoint_oracle(&landmarks, HEATMAP_SIZE, KEYPOINT_SIGMA).unwrap();
            for (k, &(x, y)) in landmarks.iter().enumerate() {
                assert_eq!(h.maps[[k, y, x]], 1.0);
            }
            assert_eq!(heatmaps_to_keypoints(&h), landmarks);
        }
    }

    #[test]
    fn keypoint_oracle_rejects_bad_scenes() {
        assert!(matches!(
            keypoint_oracle(&[(0, 0); 3], HEATMAP_SIZE, 2.0),
            Err(Error::UnknownScene(_))
        ));
        let mut lm = [(5usize, 5usize); NUM_KEYPOINTS];
        lm[7] = (HEATMAP_SIZE, 2);
        assert!(matches!(
            keypoint_oracle(&lm, HEATMAP_SIZE, 2.0),
            Err(Error::UnknownScene(_))
        ));
    }

    #[test]
    fn two_nearby_landmarks_decode_distinctly() {
        let mut lm = [(48usize, 48usize); NUM_KEYPOINTS];
        lm[0] = (30, 40);
        lm[1] = (40, 40);
        let h = keypoint_oracle(&lm, HEATMAP_SIZE, KEYPOINT_SIGMA).unwrap();
        let kps = heatmaps_to_keypoints(&h);
        assert_eq!(kps[0], (30, 40));
        assert_eq!(kps[1], (40, 40));
    }

    #[test]
    fn blob_mass_matches_gaussian_quadrature_oracle() {
        let mut lm = [(48usize, 48usize); NUM_KEYPOINTS];
        lm[0] = (48, 48);
        let h = keypoint_oracle(&lm, HEATMAP_SIZE, KEYPOINT_SIGMA).unwrap();
        let got: f64 = (0..HEATMAP_SIZE)
            .flat_map(|y| (0..HEATMAP_SIZE).map(move |x| (x, y)))
            .map(|(x, y)| h.maps[[0, y, x]])
            .sum();
        // midpoint quadrature of the continuous Gaussian over the grid,
        // 5x5 subsamples per cell
        let sub = 5;
        let inv = 1.0 / (2.0 * KEYPOINT_SIGMA * KEYPOINT_SIGMA);
        let mut want = 0.0;
        for y in 0..HEATMAP_SIZE {
            for x in 0..HEATMAP_SIZE {
                let mut cell = 0.0;
                for sy in 0..sub {
                    for sx in 0..sub {
                        let fx = x as f64 - 0.5 + (sx as f64 + 0.5) / sub as f64 - 48.0;
                        let fy = y as f64 - 0.5 + (sy as f64 + 0.5) / sub as f64 - 48.0;
                        cell += (-(fx * fx + fy * fy) * inv).exp();
                    }
                }
                want += cell / (sub * sub) as f64;
            }
        }
        let rel = (got - want).abs() / want;
        assert!(rel < 0.01, "mass {got} vs quadrature {want} (rel {rel})");
    }

    #[test]
    fn flow_oracle_zero_for_identical_frames() {
        let mut rng = init_rng(3);
        let a = randn(&[24, 24], &mut rng);
        let f = flow_oracle(&a, &a, 4, 3).unwrap();
        assert!(f.flow.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flow_oracle_recovers_pure_translation_on_interior_blocks() {
        let mut rng = init_rng(4);
        let h = 32;
        let a = randn(&[h, h], &mut rng);
        // b(x) = a(x - 3) horizontally: content moves right by 3
        let mut b = ArrayD::<f64>::zeros(IxDyn(&[h, h]));
        for y in 0..h {
            for x in 0..h {
                let sx = x as isize - 3;
                if sx >= 0 {
                    b[[y, x]] = a[[y, sx as usize]];
                }
            }
        }
        let f = flow_oracle(&a, &b, 4, 4).unwrap();
        for y in 8..h - 8 {
            for x in 8..h - 8 {
                assert_eq!(f.flow[[0, y, x]], 3.0, "dx at ({x},{y})");
                assert_eq!(f.flow[[1, y, x]], 0.0, "dy at ({x},{y})");
            }
        }
    }

    #[test]
    fn flow_oracle_cross_checks_an_independent_reimplementation() {
        // independent search: iterate candidates sorted by (magnitude,
        // row-major) and keep the strictly best SSD, which encodes the same
        // tie-break differently
        let mut rng = init_rng(5);
        let h = 20;
        let a = randn(&[h, h], &mut rng);
        let mut b = ArrayD::<f64>::zeros(IxDyn(&[h, h]));
        for y in 0..h {
            for x in 0..h {
                let (sy, sx) = (y as isize - 1, x as isize - 2);
                if sy >= 0 && sx >= 0 {
                    b[[y, x]] = a[[sy as usize, sx as usize]];
                }
            }
        }
        let block = 4;
        let radius = 3;
        let got = flow_oracle(&a, &b, block, radius).unwrap();

        let r = radius as isize;
        let mut candidates: Vec<(isize, isize)> = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                candidates.push((dy, dx));
            }
        }
        candidates.sort_by_key(|&(dy, dx)| {
            let mag = dy * dy + dx * dx;
            let rm = (dy + r) * (2 * r + 1) + (dx + r);
            (mag, rm)
        });
        for by in (0..h).step_by(block) {
            for bx in (0..h).step_by(block) {
                let bh = block.min(h - by);
                let bw = block.min(h - bx);
                let mut best = f64::INFINITY;
                let mut pick = (0isize, 0isize);
                for &(dy, dx) in &candidates {
                    let ty = by as isize + dy;
                    let tx = bx as isize + dx;
                    if ty < 0
                        || tx < 0
                        || ty + bh as isize > h as isize
                        || tx + bw as isize > w_of(h) as isize
                    {
                        continue;
                    }
                    let mut ssd = 0.0;
                    for y in 0..bh {
                        for x in 0..bw {
                            let d = a[[by + y, bx + x]]
                                - b[[(ty as usize) + y, (tx as usize) + x]];
                            ssd += d * d;
                        }
                    }
                    if ssd < best {
                        best = ssd;
                        pick = (dx, dy);
                    }
                }
                for y in 0..bh {
                    for x in 0..bw {
                        assert_eq!(got.flow[[0, by + y, bx + x]], pick.0 as f64);
                        assert_eq!(got.flow[[1, by + y, bx + x]], pick.1 as f64);
                    }
                }
            }
        }

        fn w_of(h: usize) -> usize {
            h
        }
    }

    #[test]
    fn keypoint_predictor_shape_and_range() {
        let mut rng = init_rng(6);
        let cfg = KeypointPredictorConfig {
            base_channels: 4,
            stages: 1,
            depth: 1,
            heatmap_size: HEATMAP_SIZE,
        };
        let net = KeypointPredictor::new(&cfg, &mut rng);
        let tape = Tape::new();
        let frames = tape.constant(randn(&[1, 15, 32, 32], &mut rng));
        let mel = tape.constant(randn(&[1, 256], &mut rng));
        let out = net.forward(&frames, &mel).unwrap();
        assert_eq!(out.shape(), &[1, NUM_KEYPOINTS, HEATMAP_SIZE, HEATMAP_SIZE]);
        assert!(out.value().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn flow_predictor_shape_and_zero_init() {
        let mut rng = init_rng(7);
        let net = FlowPredictor::new(&FlowPredictorConfig { base_channels: 6 }, &mut rng);
        let tape = Tape::new();
        let frames = tape.constant(randn(&[2, 15, 16, 16], &mut rng));
        let mel = tape.constant(randn(&[2, 256], &mut rng));
        let out = net.forward(&frames, &mel).unwrap();
        assert_eq!(out.shape(), &[2, 2, 16, 16]);
        assert!(out.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn both_predictors_pass_gradient_checks_on_tiny_instances() {
        let mut rng = init_rng(8);
        let kp = KeypointPredictor::new(
            &KeypointPredictorConfig {
                base_channels: 2,
                stages: 1,
                depth: 1,
                heatmap_size: 8,
            },
            &mut rng,
        );
        let frames = Param::new(randn(&[1, 15, 8, 8], &mut rng));
        let mel = randn(&[1, 256], &mut rng);
        check_param_gradients(
            |tape| {
                kp.forward(&tape.param(&frames), &tape.constant(mel.clone()))
                    .unwrap()
                    .square()
                    .mean_all()
            },
            &[frames.clone()],
        )
        .unwrap();

        let fp = FlowPredictor::new(&FlowPredictorConfig { base_channels: 2 }, &mut rng);
        crate::man::randomize_params(&fp, 0.3, &mut rng);
        let frames2 = Param::new(randn(&[1, 15, 8, 8], &mut rng));
        check_param_gradients(
            |tape| {
                fp.forward(&tape.param(&frames2), &tape.constant(mel.clone()))
                    .unwrap()
                    .square()
                    .mean_all()
            },
            &[frames2.clone()],
        )
        .unwrap();
    }

    #[test]
    fn keypoint_predictor_overfits_a_fixed_target() {
        let mut rng = init_rng(9);
        let cfg = KeypointPredictorConfig {
            base_channels: 6,
            stages: 1,
            depth: 2,
            heatmap_size: 24,
        };
        let net = KeypointPredictor::new(&cfg, &mut rng);
        let frames = randn(&[1, 15, 24, 24], &mut rng);
        let mel = randn(&[1, 256], &mut rng);
        let mut lm = [(12usize, 12usize); NUM_KEYPOINTS];
        for (i, p) in lm.iter_mut().enumerate() {
            *p = (4 + (i * 13) % 16, 4 + (i * 7) % 16);
        }
        let target = keypoint_oracle(&lm, 24, 2.0)
            .unwrap()
            .maps
            .into_shape_with_order(IxDyn(&[1, NUM_KEYPOINTS, 24, 24]))
            .unwrap();

        let mut opt = Adam::new(net.trainable_parameters(), 0.01);
        let mut initial = None;
        let mut last = f64::INFINITY;
        for _ in 0..300 {
            opt.zero_grad();
            let tape = Tape::training();
            let pred = net
                .forward(&tape.constant(frames.clone()), &tape.constant(mel.clone()))
                .unwrap();
            let loss = predictor_mse_loss(&pred, &tape.constant(target.clone())).unwrap();
            last = loss.item();
            initial.get_or_insert(last);
            if last < 0.1 * initial.unwrap() {
                break;
            }
            tape.backward(&loss);
            opt.step();
        }
        let initial = initial.unwrap();
        assert!(
            last < 0.1 * initial,
            "MSE fell from {initial} only to {last}"
        );
    }

    #[test]
    fn flow_predictor_overfits_a_constant_flow() {
        let mut rng = init_rng(10);
        let net = FlowPredictor::new(&FlowPredictorConfig { base_channels: 6 }, &mut rng);
        let frames = randn(&[1, 15, 16, 16], &mut rng);
        let mel = randn(&[1, 256], &mut rng);
        let mut target = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 16, 16]));
        for y in 0..16 {
            for x in 0..16 {
                target[[0, 0, y, x]] = 2.0;
            }
        }
        let mut opt = Adam::new(net.trainable_parameters(), 0.01);
        let mut last = f64::INFINITY;
        for _ in 0..300 {
            opt.zero_grad();
            let tape = Tape::training();
            let pred = net
                .forward(&tape.constant(frames.clone()), &tape.constant(mel.clone()))
                .unwrap();
            let loss = predictor_mse_loss(&pred, &tape.constant(target.clone())).unwrap();
            last = loss.item();
            if last < 0.05 {
                break;
            }
            tape.backward(&loss);
            opt.step();
        }
        assert!(last < 0.05, "flow MSE stayed at {last}");
    }
}
