//! On-disk formats: PGM frames, JSONL annotations, split manifests,
//! binary parameter checkpoints and CSV logs.
//!
//! Dataset layout, one directory per split:
//!
//! ```text
//! <root>/<split>/manifest.json
//! <root>/<split>/annotations.jsonl
//! <root>/<split>/<video_id>/<frame_index>.pgm
//! ```
//!
//! Annotation lines are either `{"video_id", "frame_index", "boxes": [[cx,cy,w,h], ...]}`
//! (one per frame) or `{"video_id", "video_label": 0|1}` (one per video).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};
use serde::{Deserialize, Serialize};

use crate::detector::ParameterVector;
use crate::error::{Error, Result};
use crate::types::{validate_split, BoundingBox, DatasetSplit, Frame, FrameAnnotation, SplitRole, VideoRecord};

fn data_err(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}

pub fn write_pgm(path: &Path, frame: &Frame) -> Result<()> {
    let mut img = GrayImage::new(frame.width as u32, frame.height as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = frame.get(x as usize, y as usize).clamp(0.0, 1.0);
        *px = Luma([(v * 255.0).round() as u8]);
    }
    img.save_with_format(path, ImageFormat::Pnm)
        .map_err(|e| data_err(format!("{}: {e}", path.display())))
}

pub fn read_pgm(path: &Path) -> Result<Frame> {
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| data_err(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Frame::new(w as usize, h as usize, pixels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnnotationLine {
    Frame { video_id: String, frame_index: usize, boxes: Vec<[f64; 4]> },
    Video { video_id: String, video_label: u8 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: String,
    pub videos: Vec<ManifestEntry>,
}

fn annotation_lines(video: &VideoRecord) -> Vec<AnnotationLine> {
    let mut lines = Vec::new();
    if let Some(anns) = &video.annotations {
        for a in anns {
            lines.push(AnnotationLine::Frame {
                video_id: video.video_id.clone(),
                frame_index: a.frame_index,
                boxes: a.boxes.iter().map(|b| [b.cx, b.cy, b.w, b.h]).collect(),
            });
        }
    }
    if let Some(z) = video.video_label {
        lines.push(AnnotationLine::Video { video_id: video.video_id.clone(), video_label: u8::from(z) });
    }
    lines
}

/// Writes all splits below `root`. Refuses to touch existing split
/// directories unless `force` is set.
pub fn write_dataset(root: &Path, split: &DatasetSplit, force: bool) -> Result<()> {
    for role in SplitRole::ALL {
        let dir = root.join(role.name());
        if dir.exists() {
            if !force {
                return Err(Error::InvalidInput(format!("{} exists; pass force to overwrite", dir.display())));
            }
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        let mut ann = BufWriter::new(File::create(dir.join("annotations.jsonl"))?);
        let mut entries = Vec::new();
        for video in split.videos(role) {
            let vdir = dir.join(&video.video_id);
            fs::create_dir_all(&vdir)?;
            for (t, frame) in video.frames.iter().enumerate() {
                write_pgm(&vdir.join(format!("{t}.pgm")), frame)?;
            }
            for line in annotation_lines(video) {
                serde_json::to_writer(&mut ann, &line)?;
                ann.write_all(b"\n")?;
            }
            let (width, height) = video.frames.first().map(|f| (f.width, f.height)).unwrap_or((0, 0));
            entries.push(ManifestEntry { video_id: video.video_id.clone(), num_frames: video.num_frames(), width, height });
        }
        ann.flush()?;
        let manifest = SplitManifest { split: role.name().to_string(), videos: entries };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(())
}

fn read_split(dir: &Path, role: SplitRole) -> Result<Vec<VideoRecord>> {
    let manifest: SplitManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.split != role.name() {
        return Err(data_err(format!("manifest in {} names split {}", dir.display(), manifest.split)));
    }
    let mut frames_ann: BTreeMap<String, Vec<FrameAnnotation>> = BTreeMap::new();
    let mut labels: BTreeMap<String, bool> = BTreeMap::new();
    let reader = BufReader::new(File::open(dir.join("annotations.jsonl"))?);
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: AnnotationLine =
            serde_json::from_str(&line).map_err(|e| data_err(format!("annotations line {}: {e}", n + 1)))?;
        match parsed {
            AnnotationLine::Frame { video_id, frame_index, boxes } => {
                let boxes = boxes
                    .iter()
                    .map(|b| BoundingBox::new(b[0], b[1], b[2], b[3]))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| data_err(format!("annotations line {}: {e}", n + 1)))?;
                frames_ann.entry(video_id).or_default().push(FrameAnnotation::new(frame_index, boxes));
            }
            AnnotationLine::Video { video_id, video_label } => {
                if video_label > 1 {
                    return Err(data_err(format!("annotations line {}: video_label must be 0 or 1", n + 1)));
                }
                labels.insert(video_id, video_label == 1);
            }
        }
    }
    manifest
        .videos
        .iter()
        .map(|entry| {
            let vdir = dir.join(&entry.video_id);
            let frames = (0..entry.num_frames)
                .map(|t| read_pgm(&vdir.join(format!("{t}.pgm"))))
                .collect::<Result<Vec<_>>>()?;
            Ok(VideoRecord {
                video_id: entry.video_id.clone(),
                frames,
                annotations: frames_ann.remove(&entry.video_id),
                video_label: labels.remove(&entry.video_id),
            })
        })
        .collect()
}

/// Loads and validates a dataset written by [`write_dataset`].
pub fn read_dataset(root: &Path) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::default();
    for role in SplitRole::ALL {
        *split.videos_mut(role) = read_split(&root.join(role.name()), role)?;
    }
    let violations = validate_split(&split);
    if let Some(v) = violations.first() {
        return Err(data_err(format!(
            "{} violations, first: {} video {}: {}",
            violations.len(),
            v.role.name(),
            v.video_id,
            v.message
        )));
    }
    Ok(split)
}

/// Little-endian `u64` element count followed by the `f64` values.
pub fn save_params(path: &Path, params: &ParameterVector) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint, rejecting truncated files and, when `expected` is
/// given, a different parameter count.
pub fn load_params(path: &Path, expected: Option<usize>) -> Result<ParameterVector> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(data_err(format!("{}: missing length header", path.display())));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 8 + 8 * n {
        return Err(data_err(format!("{}: header says {n} values, file holds {} bytes", path.display(), bytes.len())));
    }
    if let Some(e) = expected {
        if e != n {
            return Err(data_err(format!("{}: checkpoint has {n} parameters, model needs {e}", path.display())));
        }
    }
    Ok(ParameterVector(
        bytes[8..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
    ))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| data_err(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| data_err(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(|e| data_err(format!("{}: {e}", path.display())))).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
