//! Procedural "talking shapes" scenes: a face whose mouth aperture tracks
//! the audio energy of the aligned window and whose eyes blink on a known
//! schedule, with full ground truth (landmarks, EAR, block-matching flow).

use crate::audio::{
    align_audio_to_frames, build_feature_frames, compute_energy, AudioFeatureFrame, AudioTrack,
    QuantRanges, DEFAULT_FPS, PITCH_FRAME,
};
use crate::error::{Error, Result};
use crate::metrics::eye_aspect_ratio;
use crate::predictors::{flow_oracle, keypoint_oracle, HEATMAP_SIZE, KEYPOINT_SIGMA};
use ndarray::{ArrayD, IxDyn};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Landmark order: left eye p1..p6, right eye p1..p6, mouth left corner,
/// mouth right corner, mouth bottom mid.
pub const SYNTH_LANDMARKS: usize = 15;

const EYE_OPENNESS_CLOSED: f64 = 0.05;
const FLOW_BLOCK: usize = 4;
const FLOW_RADIUS: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub frame_size: usize,
    /// Face half-extents as fractions of the frame.
    pub face_rx: f64,
    pub face_ry: f64,
    /// Eye geometry relative to the face center.
    pub eye_dx: f64,
    pub eye_y: f64,
    pub eye_half_width: f64,
    pub eye_half_height: f64,
    /// Mouth geometry.
    pub mouth_y: f64,
    pub mouth_half_width: f64,
    pub mouth_max_open: f64,
    /// Head drift amplitude (pixels) and period (frames).
    pub drift_amp: f64,
    pub drift_period: f64,
    /// RGB skin / feature colors in [-1,1].
    pub skin: [f64; 3],
    pub feature: [f64; 3],
    pub background: [f64; 3],
    pub blink_schedule: Vec<(usize, usize)>,
    /// Per-frame mouth aperture in [0,1] (normalized window energy).
    pub mouth_aperture: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct VideoClip {
    /// (3, F, F) frames in [-1, 1] at 25 fps.
    pub frames: Vec<ArrayD<f64>>,
    /// 15 ground-truth landmarks per frame, frame-pixel coordinates.
    pub landmarks: Vec<Vec<(f64, f64)>>,
    /// Ground-truth eye aspect ratio per frame.
    pub ear: Vec<f64>,
    /// Block-matching flow from frame t to frame t+1 (len = frames-1).
    pub flow_to_next: Vec<ArrayD<f64>>,
    pub fps: u32,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Deterministic synthetic speech-like audio: syllable-rate energy bursts
/// over a per-syllable sine carrier plus a little noise, so pitch and
/// energy quantization bins both vary.
pub fn synthesize_audio(seed: u64, duration_sec: f64) -> AudioTrack {
    let sr = crate::audio::CANONICAL_SAMPLE_RATE;
    let n = (duration_sec * sr as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA0D10);
    let syllable = sr as usize / 3; // ~3 syllables per second
    let mut samples = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let len = (syllable as f64 * rng.random_range(0.7..1.3)) as usize;
        let voiced = rng.random_range(0.0..1.0) > 0.25;
        let f0: f64 = rng.random_range(90.0..250.0);
        let amp: f64 = if voiced {
            rng.random_range(0.35..0.8)
        } else {
            0.0
        };
        for j in 0..len.min(n - i) {
            let t = j as f64 / sr as f64;
            // raised-cosine envelope per syllable
            let env = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * j as f64 / len as f64).cos();
            let carrier = (2.0 * std::f64::consts::PI * f0 * t).sin();
            let noise: f64 = rng.random_range(-0.05..0.05);
            samples[i + j] = amp * env * carrier + amp * 0.1 * noise;
        }
        i += len;
    }
    AudioTrack::new(samples, sr)
}

fn blink_schedule(rng: &mut ChaCha8Rng, n_frames: usize) -> Vec<(usize, usize)> {
    let mut blinks = Vec::new();
    let mut t = rng.random_range(8..20);
    while t + 4 < n_frames {
        blinks.push((t, 3));
        t += rng.random_range(20..40);
    }
    blinks
}

impl SyntheticScene {
    fn sample(seed: u64, frame_size: usize, n_frames: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SyntheticScene {
            seed,
            frame_size,
            face_rx: rng.random_range(0.30..0.36),
            face_ry: rng.random_range(0.36..0.42),
            eye_dx: rng.random_range(0.13..0.17),
            eye_y: -rng.random_range(0.08..0.12),
            eye_half_width: rng.random_range(0.07..0.09),
            eye_half_height: rng.random_range(0.045..0.055),
            mouth_y: rng.random_range(0.20..0.26),
            mouth_half_width: rng.random_range(0.10..0.14),
            mouth_max_open: rng.random_range(0.10..0.14),
            drift_amp: rng.random_range(0.6..1.4),
            drift_period: rng.random_range(40.0..70.0),
            skin: [
                rng.random_range(0.3..0.7),
                rng.random_range(0.1..0.4),
                rng.random_range(-0.2..0.2),
            ],
            feature: [-0.8, -0.8, -0.7],
            background: [
                rng.random_range(-0.95..-0.7),
                rng.random_range(-0.95..-0.7),
                rng.random_range(-0.9..-0.6),
            ],
            blink_schedule: blink_schedule(&mut rng, n_frames),
            mouth_aperture: Vec::new(),
        }
    }

    fn drift(&self, t: usize) -> (f64, f64) {
        let phase = 2.0 * std::f64::consts::PI * t as f64 / self.drift_period;
        (self.drift_amp * phase.sin(), 0.5 * self.drift_amp * phase.cos())
    }

    fn eye_openness(&self, t: usize) -> f64 {
        for &(start, len) in &self.blink_schedule {
            if t >= start && t < start + len {
                return EYE_OPENNESS_CLOSED;
            }
        }
        1.0
    }

    /// The 15 landmarks for frame `t`, in frame-pixel coordinates.
    pub fn landmarks(&self, t: usize) -> Vec<(f64, f64)> {
        let f = self.frame_size as f64;
        let (dx, dy) = self.drift(t);
        let cx = f / 2.0 + dx;
        let cy = f / 2.0 + dy;
        let open = self.eye_openness(t);
        let aperture = self.mouth_aperture.get(t).copied().unwrap_or(0.0);

        let mut pts = Vec::with_capacity(SYNTH_LANDMARKS);
        for side in [-1.0, 1.0] {
            let ex = cx + side * self.eye_dx * f;
            let ey = cy + self.eye_y * f;
            let we = self.eye_half_width * f;
            let he = self.eye_half_height * f * open;
            pts.push((ex - we, ey)); // p1
            pts.push((ex - we / 3.0, ey - he)); // p2
            pts.push((ex + we / 3.0, ey - he)); // p3
            pts.push((ex + we, ey)); // p4
            pts.push((ex + we / 3.0, ey + he)); // p5
            pts.push((ex - we / 3.0, ey + he)); // p6
        }
        let my = cy + self.mouth_y * f;
        let mw = self.mouth_half_width * f;
        pts.push((cx - mw, my));
        pts.push((cx + mw, my));
        pts.push((cx, my + (1.0 + aperture * self.mouth_max_open * f)));
        pts
    }

    /// Ground-truth EAR for frame `t` from the landmark geometry.
    pub fn ear(&self, t: usize) -> f64 {
        let pts = self.landmarks(t);
        let eye: [(f64, f64); 6] = std::array::from_fn(|i| pts[i]);
        eye_aspect_ratio(&eye).unwrap_or(0.0)
    }

    fn render(&self, t: usize) -> ArrayD<f64> {
        let fsz = self.frame_size;
        let f = fsz as f64;
        let (dx, dy) = self.drift(t);
        let cx = f / 2.0 + dx;
        let cy = f / 2.0 + dy;
        let open = self.eye_openness(t);
        let aperture = self.mouth_aperture.get(t).copied().unwrap_or(0.0);

        let mut img = ArrayD::<f64>::zeros(IxDyn(&[3, fsz, fsz]));
        let inside =
            |x: f64, y: f64, ox: f64, oy: f64, rx: f64, ry: f64| -> bool {
                let nx = (x - ox) / rx.max(1e-9);
                let ny = (y - oy) / ry.max(1e-9);
                nx * nx + ny * ny <= 1.0
            };
        for y in 0..fsz {
            for x in 0..fsz {
                let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut color = self.background;
                if inside(xf, yf, cx, cy, self.face_rx * f, self.face_ry * f) {
                    color = self.skin;
                    // eyes
                    for side in [-1.0, 1.0] {
                        let ex = cx + side * self.eye_dx * f;
                        let ey = cy + self.eye_y * f;
                        if inside(
                            xf,
                            yf,
                            ex,
                            ey,
                            self.eye_half_width * f,
                            (self.eye_half_height * f * open).max(0.4),
                        ) {
                            color = self.feature;
                        }
                    }
                    // mouth
                    let my = cy + self.mouth_y * f;
                    if inside(
                        xf,
                        yf,
                        cx,
                        my,
                        self.mouth_half_width * f,
                        (1.0 + aperture * self.mouth_max_open * f) / 2.0 + 0.5,
                    ) {
                        color = self.feature;
                    }
                }
                for c in 0..3 {
                    img[[c, y, x]] = color[c];
                }
            }
        }
        img
    }
}

fn gray_of(frame: &ArrayD<f64>) -> ArrayD<f64> {
    crate::metrics::frame_to_gray01(frame)
}

/// Deterministically synthesize one clip whose mouth tracks the audio
/// energy. `duration_sec` must match the audio length at 25 fps.
pub fn synthesize_clip(
    seed: u64,
    duration_sec: f64,
    audio: &AudioTrack,
    frame_size: usize,
) -> Result<(VideoClip, SyntheticScene)> {
    let windows = align_audio_to_frames(audio, DEFAULT_FPS, PITCH_FRAME)?;
    let n_frames = windows.len();
    let expected = (duration_sec * DEFAULT_FPS as f64).round() as usize;
    if expected != n_frames {
        return Err(Error::DurationMismatch {
            video_frames: expected,
            audio_frames: n_frames,
        });
    }

    let mut scene = SyntheticScene::sample(seed, frame_size, n_frames);
    let energies: Vec<f64> = windows
        .iter()
        .map(|w| compute_energy(w))
        .collect::<Result<_>>()?;
    let max_e = energies.iter().cloned().fold(0.0, f64::max);
    scene.mouth_aperture = energies
        .iter()
        .map(|&e| if max_e > 0.0 { e / max_e } else { 0.0 })
        .collect();

    let frames: Vec<ArrayD<f64>> = (0..n_frames).map(|t| scene.render(t)).collect();
    let landmarks: Vec<Vec<(f64, f64)>> = (0..n_frames).map(|t| scene.landmarks(t)).collect();
    let ear: Vec<f64> = (0..n_frames).map(|t| scene.ear(t)).collect();
    let mut flow_to_next = Vec::with_capacity(n_frames.saturating_sub(1));
    for t in 0..n_frames.saturating_sub(1) {
        let fa = gray_of(&frames[t]);
        let fb = gray_of(&frames[t + 1]);
        flow_to_next.push(flow_oracle(&fa, &fb, FLOW_BLOCK, FLOW_RADIUS)?.flow);
    }

    Ok((
        VideoClip {
            frames,
            landmarks,
            ear,
            flow_to_next,
            fps: DEFAULT_FPS,
        },
        scene,
    ))
}

/// A clip with its audio features precomputed.
pub struct ClipData {
    pub clip: VideoClip,
    pub scene: SyntheticScene,
    pub audio: AudioTrack,
    pub feats: Vec<AudioFeatureFrame>,
}

/// Synthesize `n_clips` clips and their features; the energy quantization
/// range is frozen to the maximum observed across the set.
pub fn build_dataset(
    seed: u64,
    n_clips: usize,
    duration_sec: f64,
    frame_size: usize,
    ranges: &mut QuantRanges,
) -> Result<Vec<ClipData>> {
    let mut audios = Vec::with_capacity(n_clips);
    let mut max_e = 0.0f64;
    for i in 0..n_clips {
        let audio = synthesize_audio(seed.wrapping_add(i as u64), duration_sec);
        max_e = max_e.max(crate::audio::max_frame_energy(&audio, DEFAULT_FPS)?);
        audios.push(audio);
    }
    if max_e > 0.0 {
        ranges.energy_hi = max_e;
    }
    let mut out = Vec::with_capacity(n_clips);
    for (i, audio) in audios.into_iter().enumerate() {
        let (clip, scene) = synthesize_clip(
            seed.wrapping_add(i as u64),
            duration_sec,
            &audio,
            frame_size,
        )?;
        let feats = build_feature_frames(&audio, DEFAULT_FPS, ranges)?;
        out.push(ClipData {
            clip,
            scene,
            audio,
            feats,
        });
    }
    Ok(out)
}

/// Everything one training step needs for frame `t` of a clip.
pub struct TrainingSample {
    /// (15, F, F): frames t-5..t-1, indices before 0 clamped to frame 0.
    pub context: ArrayD<f64>,
    pub feats: AudioFeatureFrame,
    /// (3, F, F) frame t.
    pub target: ArrayD<f64>,
    /// (3, F, F) frame 0 of the clip.
    pub identity: ArrayD<f64>,
    /// (2, F, F) block-matching flow from frame t-1 to t (zeros at t=0).
    pub gt_flow: ArrayD<f64>,
    /// (15, 96, 96) heatmaps for frame t's landmarks.
    pub gt_heatmaps: ArrayD<f64>,
    pub landmarks: Vec<(f64, f64)>,
}

pub fn make_training_batch(data: &ClipData, t: usize) -> Result<TrainingSample> {
    let n = data.clip.len();
    if t >= n || t >= data.feats.len() {
        return Err(Error::IndexOutOfRange { index: t, len: n });
    }
    let fsz = data.clip.frames[0].shape()[1];
    let mut context = ArrayD::<f64>::zeros(IxDyn(&[15, fsz, fsz]));
    for k in 0..crate::predictors::CONTEXT_FRAMES {
        // offsets -5..-1 relative to t, clamped at frame 0
        let idx = (t + k).saturating_sub(crate::predictors::CONTEXT_FRAMES);
        let frame = &data.clip.frames[idx.min(n - 1)];
        for c in 0..3 {
            for y in 0..fsz {
                for x in 0..fsz {
                    context[[k * 3 + c, y, x]] = frame[[c, y, x]];
                }
            }
        }
    }
    let gt_flow = if t == 0 {
        ArrayD::zeros(IxDyn(&[2, fsz, fsz]))
    } else {
        data.clip.flow_to_next[t - 1].clone()
    };
    let grid_scale = HEATMAP_SIZE as f64 / fsz as f64;
    let grid_landmarks: Vec<(usize, usize)> = data.clip.landmarks[t]
        .iter()
        .map(|&(x, y)| {
            (
                ((x * grid_scale).round() as usize).min(HEATMAP_SIZE - 1),
                ((y * grid_scale).round() as usize).min(HEATMAP_SIZE - 1),
            )
        })
        .collect();
    let gt_heatmaps = keypoint_oracle(&grid_landmarks, HEATMAP_SIZE, KEYPOINT_SIGMA)?.maps;
    Ok(TrainingSample {
        context,
        feats: data.feats[t].clone(),
        target: data.clip.frames[t].clone(),
        identity: data.clip.frames[0].clone(),
        gt_flow,
        gt_heatmaps,
        landmarks: data.clip.landmarks[t].clone(),
    })
}
