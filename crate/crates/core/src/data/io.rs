//! On-disk formats: PNG frames, clip directories with ground truth, and
//! raw little-endian flow files.

use crate::audio::{read_wav, write_wav, AudioTrack};
use crate::data::synth::VideoClip;
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// (3,H,W) in [-1,1] -> 8-bit RGB PNG.
pub fn frame_to_png(frame: &ArrayD<f64>, path: &Path) -> Result<()> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| -> u8 {
                (((frame[[c, y, x]].clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
            };
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

pub fn frame_from_png(path: &Path) -> Result<ArrayD<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[3, h, w]));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[c, y, x]] = p.0[c] as f64 / 255.0 * 2.0 - 1.0;
            }
        }
    }
    Ok(out)
}

/// Per-clip ground truth stored as `truth.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipTruth {
    pub fps: u32,
    /// 15 (x, y) landmarks per frame in frame-pixel coordinates.
    pub landmarks: Vec<Vec<(f64, f64)>>,
    pub ear: Vec<f64>,
    pub blink_schedule: Vec<(usize, usize)>,
}

/// Write `clips/<id>/{frames/%05d.png, audio.wav, truth.json}`.
pub fn write_clip_dir(
    root: &Path,
    id: &str,
    clip: &VideoClip,
    audio: &AudioTrack,
    blink_schedule: &[(usize, usize)],
) -> Result<()> {
    let dir = root.join("clips").join(id);
    std::fs::create_dir_all(dir.join("frames"))?;
    for (i, frame) in clip.frames.iter().enumerate() {
        frame_to_png(frame, &dir.join("frames").join(format!("{i:05}.png")))?;
    }
    write_wav(&dir.join("audio.wav"), audio)?;
    let truth = ClipTruth {
        fps: clip.fps,
        landmarks: clip.landmarks.clone(),
        ear: clip.ear.clone(),
        blink_schedule: blink_schedule.to_vec(),
    };
    let f = std::fs::File::create(dir.join("truth.json"))?;
    serde_json::to_writer_pretty(f, &truth)?;
    Ok(())
}

pub fn list_clip_ids(root: &Path) -> Result<Vec<String>> {
    let clips = root.join("clips");
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&clips)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Read one clip directory back: frames, audio, and truth.
pub fn read_clip_dir(root: &Path, id: &str) -> Result<(Vec<ArrayD<f64>>, AudioTrack, ClipTruth)> {
    let dir = root.join("clips").join(id);
    let frames_dir = dir.join("frames");
    let mut names: Vec<String> = std::fs::read_dir(&frames_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    let frames = names
        .iter()
        .map(|n| frame_from_png(&frames_dir.join(n)))
        .collect::<Result<Vec<_>>>()?;
    let audio = read_wav(&dir.join("audio.wav"))?;
    let truth: ClipTruth = serde_json::from_reader(std::fs::File::open(dir.join("truth.json"))?)?;
    Ok((frames, audio, truth))
}

/// Flow file: magic "MVFL", u32 version, u32 h, u32 w, then 2*h*w f64
/// little-endian values (dx plane then dy plane).
pub fn write_flow_file(path: &Path, flow: &ArrayD<f64>) -> Result<()> {
    let (h, w) = (flow.shape()[1], flow.shape()[2]);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(b"MVFL")?;
    f.write_all(&1u32.to_le_bytes())?;
    f.write_all(&(h as u32).to_le_bytes())?;
    f.write_all(&(w as u32).to_le_bytes())?;
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                f.write_all(&flow[[c, y, x]].to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_flow_file(path: &Path) -> Result<ArrayD<f64>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != b"MVFL" {
        return Err(Error::CorruptFile("bad flow magic".into()));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != 1 {
        return Err(Error::VersionMismatch {
            found: version,
            expected: 1,
        });
    }
    f.read_exact(&mut u32buf)?;
    let h = u32::from_le_bytes(u32buf) as usize;
    f.read_exact(&mut u32buf)?;
    let w = u32::from_le_bytes(u32buf) as usize;
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[2, h, w]));
    let mut f64buf = [0u8; 8];
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                f.read_exact(&mut f64buf)?;
                out[[c, y, x]] = f64::from_le_bytes(f64buf);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synthesize_audio, synthesize_clip};

    #[test]
    fn png_round_trip_is_lossless_to_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let mut frame = ArrayD::<f64>::zeros(IxDyn(&[3, 8, 8]));
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    frame[[c, y, x]] = ((c + y + x) as f64 / 18.0) * 2.0 - 1.0;
                }
            }
        }
        frame_to_png(&frame, &path).unwrap();
        let back = frame_from_png(&path).unwrap();
        for (a, b) in frame.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1.0 / 127.0);
        }
        // a second encode of the decoded frame is exact
        frame_to_png(&back, &path).unwrap();
        let again = frame_from_png(&path).unwrap();
        assert_eq!(back, again);
    }

    #[test]
    fn clip_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let audio = synthesize_audio(2, 1.0);
        let (clip, scene) = synthesize_clip(2, 1.0, &audio, 32).unwrap();
        write_clip_dir(dir.path(), "clip000", &clip, &audio, &scene.blink_schedule).unwrap();
        let ids = list_clip_ids(dir.path()).unwrap();
        assert_eq!(ids, vec!["clip000"]);
        let (frames, audio2, truth) = read_clip_dir(dir.path(), "clip000").unwrap();
        assert_eq!(frames.len(), clip.len());
        assert_eq!(audio2.samples.len(), audio.samples.len());
        assert_eq!(truth.landmarks.len(), clip.len());
        assert_eq!(truth.blink_schedule, scene.blink_schedule);
    }

    #[test]
    fn flow_file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("0.bin");
        let mut flow = ArrayD::<f64>::zeros(IxDyn(&[2, 4, 5]));
        flow[[0, 1, 2]] = 3.0;
        flow[[1, 3, 4]] = -1.5;
        write_flow_file(&path, &flow).unwrap();
        assert_eq!(read_flow_file(&path).unwrap(), flow);

        std::fs::write(&path, b"JUNKjunk").unwrap();
        assert!(read_flow_file(&path).is_err());
    }
}
