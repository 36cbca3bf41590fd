//! Audio ingestion and per-video-frame feature extraction.
//!
//! A mono 16 kHz track is cut into one window per video frame (stride =
//! sample_rate / fps, centered, zero-padded at the edges). Each window
//! yields log-mel vectors (13-dim for the generator stem, 256-dim for the
//! normalization layers and predictors), plus fundamental frequency and
//! STFT energy quantized into 256-bin one-hot vectors.

use crate::error::{Error, Result};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_FPS: u32 = 25;
pub const PITCH_FRAME: usize = 1024;
pub const PITCH_HOP: usize = 256;
pub const F0_MIN_HZ: f64 = 60.0;
pub const F0_MAX_HZ: f64 = 400.0;
pub const MEL_SMALL: usize = 13;
pub const MEL_LARGE: usize = 256;
pub const ONEHOT_BINS: usize = 256;
/// Log floor (dB) emitted for silent mel bands.
pub const MEL_LOG_FLOOR: f64 = -80.0;

#[derive(Debug, Clone)]
pub struct AudioTrack {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioTrack {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0);
        AudioTrack {
            samples,
            sample_rate,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// How audio windows line up with video frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignmentSpec {
    /// Samples per video frame: sample_rate / fps, exact.
    pub stride: usize,
    /// Window length in samples, centered on each frame's midpoint.
    pub window: usize,
    /// Zero padding applied on each side of the window at the track edges.
    pub pad: usize,
}

pub fn alignment(sample_rate: u32, fps: u32, window: usize) -> Result<AlignmentSpec> {
    if fps == 0 || sample_rate % fps != 0 {
        return Err(Error::NonDivisibleRate { sample_rate, fps });
    }
    let stride = (sample_rate / fps) as usize;
    Ok(AlignmentSpec {
        stride,
        window: window.max(stride),
        pad: window.saturating_sub(stride) / 2,
    })
}

/// One window per video frame, centered on the frame's temporal midpoint and
/// zero-padded where it overhangs the track. Frame count is
/// ceil(len / stride).
pub fn align_audio_to_frames(
    track: &AudioTrack,
    fps: u32,
    window: usize,
) -> Result<Vec<Vec<f64>>> {
    let spec = alignment(track.sample_rate, fps, window)?;
    let n = track.samples.len();
    let frames = n.div_ceil(spec.stride);
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let mid = (f * spec.stride + spec.stride / 2) as isize;
        let start = mid - (spec.window / 2) as isize;
        let mut w = vec![0.0; spec.window];
        for (i, slot) in w.iter_mut().enumerate() {
            let idx = start + i as isize;
            if idx >= 0 && (idx as usize) < n {
                *slot = track.samples[idx as usize];
            }
        }
        out.push(w);
    }
    Ok(out)
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn fft_magnitude_sq(signal: &[f64], n_fft: usize) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = signal
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n_fft)
        .collect();
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    buf.iter().map(|c| c.norm_sqr()).collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the one-sided spectrum: (n_mels, n_fft/2+1).
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    let centers: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut bank = vec![vec![0.0; n_bins]; n_mels];
    for m in 0..n_mels {
        let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        for (k, w) in bank[m].iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            if f > lo && f < hi {
                *w = if f <= mid {
                    (f - lo) / (mid - lo).max(1e-12)
                } else {
                    (hi - f) / (hi - mid).max(1e-12)
                };
            }
        }
    }
    bank
}

/// Log-mel filterbank energies of one Hann-windowed frame, in dB with a
/// fixed floor for silent bands.
pub fn compute_mel(window: &[f64], n_mels: usize) -> Result<Vec<f64>> {
    compute_mel_floored(window, n_mels, MEL_LOG_FLOOR)
}

pub fn compute_mel_floored(window: &[f64], n_mels: usize, floor_db: f64) -> Result<Vec<f64>> {
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let n_fft = window.len().next_power_of_two();
    let h = hann(window.len());
    let windowed: Vec<f64> = window.iter().zip(&h).map(|(x, w)| x * w).collect();
    let power = fft_magnitude_sq(&windowed, n_fft);
    let bank = mel_filterbank(n_mels, n_fft, CANONICAL_SAMPLE_RATE);
    Ok(bank
        .iter()
        .map(|filt| {
            let e: f64 = filt.iter().zip(power.iter()).map(|(w, p)| w * p).sum();
            if e > 0.0 {
                (10.0 * e.log10()).max(floor_db)
            } else {
                floor_db
            }
        })
        .collect())
}

/// L2 norm of the DFT magnitudes of one (rectangular) frame. Linear in the
/// input amplitude and zero exactly for silence.
pub fn compute_energy(window: &[f64]) -> Result<f64> {
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let n_fft = window.len().next_power_of_two();
    let mag2 = fft_magnitude_sq(window, n_fft);
    Ok(mag2.iter().sum::<f64>().sqrt())
}

/// Autocorrelation F0 (Hz, 0 = unvoiced) over frames of `PITCH_FRAME`
/// samples hopped by `PITCH_HOP`, searched in [`F0_MIN_HZ`, `F0_MAX_HZ`].
pub fn compute_pitch_f0(track: &AudioTrack) -> Vec<f64> {
    let sr = track.sample_rate as f64;
    let n = track.samples.len();
    if n < PITCH_FRAME {
        return Vec::new();
    }
    let n_frames = (n - PITCH_FRAME) / PITCH_HOP + 1;
    let lag_min = (sr / F0_MAX_HZ).ceil() as usize;
    let lag_max = ((sr / F0_MIN_HZ).floor() as usize).min(PITCH_FRAME - 2);
    let voicing_threshold = 0.3;
    let mut out = Vec::with_capacity(n_frames);
    for fi in 0..n_frames {
        let frame = &track.samples[fi * PITCH_HOP..fi * PITCH_HOP + PITCH_FRAME];
        let r0: f64 = frame.iter().map(|x| x * x).sum();
        if r0 < 1e-10 {
            out.push(0.0);
            continue;
        }
        let autocorr = |lag: usize| -> f64 {
            frame[..PITCH_FRAME - lag]
                .iter()
                .zip(&frame[lag..])
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut best_lag = 0;
        let mut best = f64::NEG_INFINITY;
        for lag in lag_min..=lag_max {
            let r = autocorr(lag);
            if r > best {
                best = r;
                best_lag = lag;
            }
        }
        if best / r0 < voicing_threshold {
            out.push(0.0);
            continue;
        }
        // parabolic refinement around the integer-lag peak
        let lag = best_lag as f64
            + if best_lag > lag_min && best_lag < lag_max {
                let rm = autocorr(best_lag - 1);
                let rp = autocorr(best_lag + 1);
                let denom = rm - 2.0 * best + rp;
                if denom.abs() > 1e-12 {
                    (0.5 * (rm - rp) / denom).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            } else {
                0.0
            };
        out.push((sr / lag).clamp(F0_MIN_HZ, F0_MAX_HZ));
    }
    out
}

/// One-hot encode `value` into `n_bins` uniform bins over [lo, hi), clamping
/// out-of-range values to the end bins.
pub fn quantize_onehot(value: f64, n_bins: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    let bin = quantize_bin(value, n_bins, lo, hi)?;
    let mut v = vec![0.0; n_bins];
    v[bin] = 1.0;
    Ok(v)
}

pub fn quantize_bin(value: f64, n_bins: usize, lo: f64, hi: f64) -> Result<usize> {
    assert!(n_bins >= 2, "need at least two bins");
    if lo >= hi {
        return Err(Error::InvalidRange { lo, hi });
    }
    let raw = ((value - lo) / (hi - lo) * n_bins as f64).floor();
    Ok(raw.clamp(0.0, (n_bins - 1) as f64) as usize)
}

/// Quantization ranges frozen at training time and persisted in checkpoints.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct QuantRanges {
    pub pitch_lo: f64,
    pub pitch_hi: f64,
    pub energy_lo: f64,
    pub energy_hi: f64,
}

impl Default for QuantRanges {
    fn default() -> Self {
        QuantRanges {
            pitch_lo: 0.0,
            pitch_hi: 400.0,
            energy_lo: 0.0,
            energy_hi: 512.0,
        }
    }
}

/// Per-video-frame audio feature bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AudioFeatureFrame {
    pub frame_index: usize,
    pub mel_small: Vec<f64>,
    pub mel_large: Vec<f64>,
    pub pitch_onehot: Vec<f64>,
    pub energy_onehot: Vec<f64>,
}

impl AudioFeatureFrame {
    pub fn pitch_bin(&self) -> usize {
        argmax(&self.pitch_onehot)
    }

    pub fn energy_bin(&self) -> usize {
        argmax(&self.energy_onehot)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Build one [`AudioFeatureFrame`] per video frame.
pub fn build_feature_frames(
    track: &AudioTrack,
    fps: u32,
    ranges: &QuantRanges,
) -> Result<Vec<AudioFeatureFrame>> {
    let windows = align_audio_to_frames(track, fps, PITCH_FRAME)?;
    let spec = alignment(track.sample_rate, fps, PITCH_FRAME)?;
    let f0 = compute_pitch_f0(track);
    let mut out = Vec::with_capacity(windows.len());
    for (i, w) in windows.iter().enumerate() {
        let mid = i * spec.stride + spec.stride / 2;
        let pitch = if f0.is_empty() {
            0.0
        } else {
            let idx = (mid as isize - (PITCH_FRAME / 2) as isize).max(0) as usize / PITCH_HOP;
            f0[idx.min(f0.len() - 1)]
        };
        let energy = compute_energy(w)?;
        out.push(AudioFeatureFrame {
            frame_index: i,
            mel_small: compute_mel(w, MEL_SMALL)?,
            mel_large: compute_mel(w, MEL_LARGE)?,
            pitch_onehot: quantize_onehot(pitch, ONEHOT_BINS, ranges.pitch_lo, ranges.pitch_hi)?,
            energy_onehot: quantize_onehot(
                energy,
                ONEHOT_BINS,
                ranges.energy_lo,
                ranges.energy_hi,
            )?,
        });
    }
    Ok(out)
}

/// Largest per-frame energy in a track, used to freeze the energy
/// quantization range on the training split.
pub fn max_frame_energy(track: &AudioTrack, fps: u32) -> Result<f64> {
    let windows = align_audio_to_frames(track, fps, PITCH_FRAME)?;
    let mut hi = 0.0f64;
    for w in &windows {
        hi = hi.max(compute_energy(w)?);
    }
    Ok(hi)
}

// ---- WAV I/O ----

/// Read a mono 16 kHz WAV (16-bit PCM or 32-bit float). Anything else is
/// rejected rather than resampled.
pub fn read_wav(path: &Path) -> Result<AudioTrack> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::BadAudio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::BadAudio(format!(
            "expected mono audio, got {} channels",
            spec.channels
        )));
    }
    if spec.sample_rate != CANONICAL_SAMPLE_RATE {
        return Err(Error::BadAudio(format!(
            "expected {CANONICAL_SAMPLE_RATE} Hz, got {} Hz",
            spec.sample_rate
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::BadAudio(e.to_string()))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::BadAudio(e.to_string()))?,
        (fmt, bits) => {
            return Err(Error::BadAudio(format!(
                "unsupported sample format {fmt:?}/{bits}-bit"
            )))
        }
    };
    Ok(AudioTrack::new(samples, CANONICAL_SAMPLE_RATE))
}

pub fn write_wav(path: &Path, track: &AudioTrack) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: track.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| Error::BadAudio(e.to_string()))?;
    for &s in &track.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::BadAudio(e.to_string()))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::BadAudio(e.to_string()))?;
    Ok(())
}

// ---- feature serialization ----

/// Columnar little-endian binary layout:
/// magic "MVAF" + u32 version + u32 n_frames, then per column in order:
/// frame_index (u32 each), mel_small (13 f64 each), mel_large (256 f64 each),
/// pitch_bin (u16 each), energy_bin (u16 each).
pub fn write_feature_frames_binary(path: &Path, frames: &[AudioFeatureFrame]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(b"MVAF")?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(frames.len() as u32).to_le_bytes())?;
    for f in frames {
        w.write_all(&(f.frame_index as u32).to_le_bytes())?;
    }
    for f in frames {
        for v in &f.mel_small {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for f in frames {
        for v in &f.mel_large {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for f in frames {
        w.write_all(&(f.pitch_bin() as u16).to_le_bytes())?;
    }
    for f in frames {
        w.write_all(&(f.energy_bin() as u16).to_le_bytes())?;
    }
    Ok(())
}

/// One JSON object per line, for debugging.
pub fn write_feature_frames_jsonl(path: &Path, frames: &[AudioFeatureFrame]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for f in frames {
        serde_json::to_writer(&mut w, f)?;
        writeln!(w)?;
    }
    Ok(())
}
