//! Evaluation metrics: PSNR, SSIM, CPBD sharpness, landmark distance,
//! eye-aspect-ratio blink detection, and average content distance with a
//! pluggable frame embedder.
//!
//! Conventions: grayscale images are 2-D arrays, RGB frames are (3,H,W);
//! generated frames live in [-1,1] and are mapped to [0,1] before scoring.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const BLINK_EAR_THRESHOLD: f64 = 0.2;
pub const BLINK_MIN_FRAMES: usize = 2;

// CPBD constants from the published algorithm: probability-model exponent,
// cumulative threshold, JNB widths by block contrast, block geometry.
pub const CPBD_BETA: f64 = 3.6;
pub const CPBD_PJNB: f64 = 0.63;
pub const CPBD_BLOCK: usize = 64;
pub const CPBD_EDGE_BLOCK_FRACTION: f64 = 0.002;
pub const CPBD_CONTRAST_SPLIT: f64 = 50.0;
pub const CPBD_EDGE_THRESHOLD: f64 = 20.0;

/// 10*log10(peak^2 / MSE), capped for identical images.
pub fn psnr(a: &ArrayD<f64>, b: &ArrayD<f64>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n - 1) as f64 / 2.0;
    let mut w: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Windowed SSIM over a 2-D grayscale pair: 11x11 Gaussian weights
/// (sigma 1.5), valid positions only, averaged.
pub fn ssim(a: &ArrayD<f64>, b: &ArrayD<f64>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.ndim() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "ssim expects 2-D grayscale, got {:?}",
            a.shape()
        )));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW} window"
        )));
    }
    let win = gaussian_window(SSIM_WINDOW, 1.5);
    let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
    let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - SSIM_WINDOW {
        for ox in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wgt = win[dy] * win[dx];
                    ma += wgt * a[[oy + dy, ox + dx]];
                    mb += wgt * b[[oy + dy, ox + dx]];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wgt = win[dy] * win[dx];
                    let da = a[[oy + dy, ox + dx]] - ma;
                    let db = b[[oy + dy, ox + dx]] - mb;
                    va += wgt * da * da;
                    vb += wgt * db * db;
                    cov += wgt * da * db;
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Separable Gaussian blur on a 2-D image (used by the CPBD sweep and
/// available to callers for test fixtures).
pub fn gaussian_blur(img: &ArrayD<f64>, sigma: f64) -> ArrayD<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut tmp = ArrayD::<f64>::zeros(IxDyn(&[h, w]));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let sx = (x as isize + i as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += k * img[[y, sx]];
            }
            tmp[[y, x]] = acc / ksum;
        }
    }
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[h, w]));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let sy = (y as isize + i as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[[sy, x]];
            }
            out[[y, x]] = acc / ksum;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CpbdReport {
    pub value: f64,
    pub no_edges: bool,
    pub edge_pixels: usize,
}

/// Cumulative probability of blur detection on a [0,1] grayscale image.
///
/// Vertical edges come from a horizontal Sobel response; each edge pixel's
/// width is measured along its row between the local intensity extrema
/// (Marziliano), the just-noticeable width depends on block contrast, and
/// the score is the fraction of edges whose blur probability stays below
/// the JNB threshold. Images with no detected edges score 0 with a flag.
pub fn cpbd(gray01: &ArrayD<f64>) -> Result<CpbdReport> {
    if gray01.ndim() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "cpbd expects 2-D grayscale, got {:?}",
            gray01.shape()
        )));
    }
    let (h, w) = (gray01.shape()[0], gray01.shape()[1]);
    let img = gray01.mapv(|v| v * 255.0);
    let block = CPBD_BLOCK.min(h).min(w).max(1);

    let sobel_x = |y: usize, x: usize| -> f64 {
        let p = |yy: isize, xx: isize| -> f64 {
            img[[
                yy.clamp(0, h as isize - 1) as usize,
                xx.clamp(0, w as isize - 1) as usize,
            ]]
        };
        let (yi, xi) = (y as isize, x as isize);
        (p(yi - 1, xi + 1) + 2.0 * p(yi, xi + 1) + p(yi + 1, xi + 1))
            - (p(yi - 1, xi - 1) + 2.0 * p(yi, xi - 1) + p(yi + 1, xi - 1))
    };

    let mut below = 0usize;
    let mut edges = 0usize;
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let bh = block.min(h - by);
            let bw = block.min(w - bx);
            // block edge census and contrast
            let mut edge_px = Vec::new();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for y in by..by + bh {
                for x in bx..bx + bw {
                    lo = lo.min(img[[y, x]]);
                    hi = hi.max(img[[y, x]]);
                    if x == 0 || x + 1 >= w {
                        continue;
                    }
                    if sobel_x(y, x).abs() / 4.0 >= CPBD_EDGE_THRESHOLD {
                        edge_px.push((y, x));
                    }
                }
            }
            if (edge_px.len() as f64) < CPBD_EDGE_BLOCK_FRACTION * (bh * bw) as f64 {
                continue;
            }
            let w_jnb = if hi - lo <= CPBD_CONTRAST_SPLIT { 5.0 } else { 3.0 };
            for (y, x) in edge_px {
                let width = edge_width(&img, y, x);
                if width == 0 {
                    continue;
                }
                let p_blur = 1.0 - (-(width as f64 / w_jnb).powf(CPBD_BETA)).exp();
                edges += 1;
                if p_blur <= CPBD_PJNB {
                    below += 1;
                }
            }
        }
    }
    if edges == 0 {
        return Ok(CpbdReport {
            value: 0.0,
            no_edges: true,
            edge_pixels: 0,
        });
    }
    Ok(CpbdReport {
        value: below as f64 / edges as f64,
        no_edges: false,
        edge_pixels: edges,
    })
}

/// Horizontal edge width: steps along the row in both directions while the
/// intensity keeps rising/falling in the edge's direction.
fn edge_width(img: &ArrayD<f64>, y: usize, x: usize) -> usize {
    let w = img.shape()[1];
    if x == 0 || x + 1 >= w {
        return 0;
    }
    let dir = (img[[y, x + 1]] - img[[y, x - 1]]).signum();
    if dir == 0.0 {
        return 0;
    }
    let mut right = x;
    while right + 1 < w && (img[[y, right + 1]] - img[[y, right]]) * dir > 0.0 {
        right += 1;
    }
    let mut left = x;
    while left > 0 && (img[[y, left]] - img[[y, left - 1]]) * dir > 0.0 {
        left -= 1;
    }
    right - left
}

/// 68-point landmark set at 256x256 scale; slots may be unmapped when the
/// landmarks come from the 15-point synthetic scenes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<(f64, f64)>,
    pub valid: Vec<bool>,
}

pub const LANDMARK_COUNT: usize = 68;
/// Lip region: 1-based points 49-68, i.e. 0-based 48..68.
pub const LIP_RANGE: std::ops::Range<usize> = 48..68;
/// 0-based left-eye slots (p1..p6 of the aspect-ratio formula).
pub const LEFT_EYE: [usize; 6] = [36, 37, 38, 39, 40, 41];
pub const RIGHT_EYE: [usize; 6] = [42, 43, 44, 45, 46, 47];

/// Fixed embedding of the 15 synthetic landmarks into 68-point slots:
/// 6 left-eye points, 6 right-eye points, lip left corner (49), lip right
/// corner (55), lip bottom mid (58) in the 1-based convention.
pub const SYNTH_TO_68: [usize; 15] = [
    36, 37, 38, 39, 40, 41, 42, 43, 44, 45, 46, 47, 48, 54, 57,
];

impl LandmarkSet {
    pub fn full(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::ShapeMismatch(format!(
                "expected {LANDMARK_COUNT} landmarks, got {}",
                points.len()
            )));
        }
        Ok(LandmarkSet {
            points,
            valid: vec![true; LANDMARK_COUNT],
        })
    }

    /// Embed 15 synthetic landmarks into their 68-slot positions.
    pub fn from_synthetic(pts: &[(f64, f64)]) -> Result<Self> {
        if pts.len() != SYNTH_TO_68.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} synthetic landmarks, got {}",
                SYNTH_TO_68.len(),
                pts.len()
            )));
        }
        let mut points = vec![(0.0, 0.0); LANDMARK_COUNT];
        let mut valid = vec![false; LANDMARK_COUNT];
        for (&slot, &p) in SYNTH_TO_68.iter().zip(pts) {
            points[slot] = p;
            valid[slot] = true;
        }
        Ok(LandmarkSet { points, valid })
    }

    pub fn eye(&self, slots: &[usize; 6]) -> Result<[(f64, f64); 6]> {
        let mut out = [(0.0, 0.0); 6];
        for (i, &s) in slots.iter().enumerate() {
            if !self.valid[s] {
                return Err(Error::StructureMismatch(format!(
                    "eye landmark slot {s} unmapped"
                )));
            }
            out[i] = self.points[s];
        }
        Ok(out)
    }
}

/// Mean Euclidean distance between corresponding lip landmarks, averaged
/// over frames and points. Only slots valid on both sides participate.
pub fn lmd(real: &[LandmarkSet], fake: &[LandmarkSet]) -> Result<f64> {
    if real.len() != fake.len() {
        return Err(Error::LengthMismatch {
            a: real.len(),
            b: fake.len(),
        });
    }
    if real.is_empty() {
        return Err(Error::LengthMismatch { a: 0, b: 0 });
    }
    let mut total = 0.0;
    let mut per_frame_points = None;
    for (r, f) in real.iter().zip(fake) {
        let mut count = 0usize;
        for i in LIP_RANGE {
            if r.valid[i] && f.valid[i] {
                let (dx, dy) = (r.points[i].0 - f.points[i].0, r.points[i].1 - f.points[i].1);
                total += (dx * dx + dy * dy).sqrt();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::StructureMismatch(
                "no mutually valid lip landmarks".into(),
            ));
        }
        match per_frame_points {
            None => per_frame_points = Some(count),
            Some(p) if p == count => {}
            Some(p) => {
                return Err(Error::StructureMismatch(format!(
                    "inconsistent lip point counts: {p} vs {count}"
                )))
            }
        }
    }
    Ok(total / (real.len() * per_frame_points.unwrap()) as f64)
}

/// (|p2-p6| + |p3-p5|) / (2 |p1-p4|) over the six-point eye contour.
pub fn eye_aspect_ratio(eye: &[(f64, f64); 6]) -> Result<f64> {
    let d = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let horizontal = d(eye[0], eye[3]);
    if horizontal == 0.0 {
        return Err(Error::DegenerateEye);
    }
    Ok((d(eye[1], eye[5]) + d(eye[2], eye[4])) / (2.0 * horizontal))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlinkReport {
    pub ear_series: Vec<f64>,
    /// Maximal runs of low-EAR frames as (start, end) inclusive indices.
    pub blink_events: Vec<(usize, usize)>,
    pub blinks_per_sec: f64,
}

/// A blink is a maximal run of at least `min_frames` consecutive frames
/// with EAR strictly below `threshold`.
pub fn detect_blinks(
    ear_series: &[f64],
    fps: f64,
    threshold: f64,
    min_frames: usize,
) -> BlinkReport {
    assert!(fps > 0.0);
    let mut events = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, &e) in ear_series.iter().enumerate() {
        if e < threshold {
            run_start.get_or_insert(i);
        } else if let Some(s) = run_start.take() {
            if i - s >= min_frames {
                events.push((s, i - 1));
            }
        }
    }
    if let Some(s) = run_start {
        if ear_series.len() - s >= min_frames {
            events.push((s, ear_series.len() - 1));
        }
    }
    let blinks_per_sec = if ear_series.is_empty() {
        0.0
    } else {
        events.len() as f64 * fps / ear_series.len() as f64
    };
    BlinkReport {
        ear_series: ear_series.to_vec(),
        blink_events: events,
        blinks_per_sec,
    }
}

/// Maps a (3,H,W) frame to an embedding vector.
pub trait FrameEmbedder {
    fn embed(&self, frame: &ArrayD<f64>) -> Vec<f64>;
}

/// Desk-scale identity embedder: per-channel mean and standard deviation
/// over a coarse spatial grid.
pub struct PatchStatsEmbedder {
    pub grid: usize,
}

impl Default for PatchStatsEmbedder {
    fn default() -> Self {
        PatchStatsEmbedder { grid: 4 }
    }
}

impl FrameEmbedder for PatchStatsEmbedder {
    fn embed(&self, frame: &ArrayD<f64>) -> Vec<f64> {
        let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
        let g = self.grid.min(h).min(w);
        let mut out = Vec::with_capacity(c * g * g * 2);
        for ci in 0..c {
            for gy in 0..g {
                for gx in 0..g {
                    let y0 = gy * h / g;
                    let y1 = ((gy + 1) * h / g).max(y0 + 1);
                    let x0 = gx * w / g;
                    let x1 = ((gx + 1) * w / g).max(x0 + 1);
                    let mut vals = Vec::new();
                    for y in y0..y1 {
                        for x in x0..x1 {
                            vals.push(frame[[ci, y, x]]);
                        }
                    }
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / vals.len() as f64;
                    out.push(mean);
                    out.push(var.sqrt());
                }
            }
        }
        out
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 0.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

fn euclid_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Average content distance between paired real/fake frames:
/// (mean cosine distance, mean Euclidean distance) of their embeddings.
pub fn acd(
    real_frames: &[ArrayD<f64>],
    fake_frames: &[ArrayD<f64>],
    embedder: Option<&dyn FrameEmbedder>,
) -> Result<(f64, f64)> {
    let embedder = embedder.ok_or(Error::EmbedderMissing)?;
    if real_frames.len() != fake_frames.len() {
        return Err(Error::LengthMismatch {
            a: real_frames.len(),
            b: fake_frames.len(),
        });
    }
    if real_frames.is_empty() {
        return Err(Error::LengthMismatch { a: 0, b: 0 });
    }
    let (mut cos, mut euc) = (0.0, 0.0);
    for (r, f) in real_frames.iter().zip(fake_frames) {
        let er = embedder.embed(r);
        let ef = embedder.embed(f);
        cos += cosine_distance(&er, &ef);
        euc += euclid_distance(&er, &ef);
    }
    let n = real_frames.len() as f64;
    Ok((cos / n, euc / n))
}

/// Convert a (3,H,W) frame in [-1,1] to 2-D grayscale luminance in [0,1].
pub fn frame_to_gray01(frame: &ArrayD<f64>) -> ArrayD<f64> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[h, w]));
    for y in 0..h {
        for x in 0..w {
            let r = (frame[[0, y, x]] + 1.0) / 2.0;
            let g = (frame[[1, y, x]] + 1.0) / 2.0;
            let b = (frame[[2, y, x]] + 1.0) / 2.0;
            out[[y, x]] = (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0);
        }
    }
    out
}
