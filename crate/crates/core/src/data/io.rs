//! On-disk dataset layout: a JSON manifest plus one raw little-endian
//! float32 file per video, row-major `[L, C, H, W]`, no header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotatedVideo, Dataset, ScoreRange, Split};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const VIDEO_DIR: &str = "videos";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    num_stages: usize,
    score_range: (f64, f64),
    /// `[C, H, W]`.
    frame_shape: [usize; 3],
    split: Split,
    videos: Vec<VideoEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoEntry {
    id: String,
    class_code: String,
    score: f64,
    num_frames: usize,
    stage_labels: Vec<usize>,
    file: String,
}

pub fn save_dataset(d: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let vdir = dir.join(VIDEO_DIR);
    fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
    let [_, c, h, w] = d.frame_shape().unwrap_or([0, 0, 0, 0]);
    let mut entries = Vec::with_capacity(d.videos.len());
    for v in &d.videos {
        let file = format!("{VIDEO_DIR}/{}.f32", v.id);
        let mut bytes = Vec::with_capacity(v.frames.len() * 4);
        for &x in v.frames.data() {
            x.write_le(&mut bytes);
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(VideoEntry {
            id: v.id.clone(),
            class_code: v.class_code.clone(),
            score: v.score,
            num_frames: v.num_frames(),
            stage_labels: v.stage_labels.clone(),
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        num_stages: d.num_stages,
        score_range: (d.score_range.min, d.score_range.max),
        frame_shape: [c, h, w],
        split: d.split.clone(),
        videos: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    match raw.get("format_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(Error::Version {
                found: u32::try_from(v).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(Error::Format("manifest: missing format_version".into())),
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let score_range = ScoreRange::new(m.score_range.0, m.score_range.1).map_err(|e| Error::Format(e.to_string()))?;
    let [c, h, w] = m.frame_shape;
    let mut videos = Vec::with_capacity(m.videos.len());
    for e in m.videos {
        if e.stage_labels.len() != e.num_frames {
            return Err(Error::Shape(format!(
                "video {}: num_frames {} but {} stage labels",
                e.id,
                e.num_frames,
                e.stage_labels.len()
            )));
        }
        let vpath = dir.join(&e.file);
        let bytes = fs::read(&vpath).map_err(|err| Error::io(&vpath, err))?;
        let expected = e.num_frames * c * h * w;
        if bytes.len() != expected * 4 {
            return Err(Error::Shape(format!(
                "video {}: manifest declares [{}, {c}, {h}, {w}] ({expected} floats) but {} holds {} bytes",
                e.id,
                e.num_frames,
                e.file,
                bytes.len()
            )));
        }
        let data = bytes.chunks_exact(4).map(f32::read_le).collect();
        let frames = Tensor::new([e.num_frames, c, h, w], data)?;
        videos.push(AnnotatedVideo::new(
            e.id,
            frames,
            e.class_code,
            e.score,
            e.stage_labels,
            m.num_stages,
        )?);
    }
    Dataset::new(videos, score_range, m.num_stages, m.split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SynthSpec};

    fn tiny() -> Dataset {
        let mut s = SynthSpec::new(4, 2, 5).with_layout(24, 3);
        s.height = 8;
        s.width = 8;
        generate_synthetic_dataset(&s).unwrap()
    }

    #[test]
    fn round_trip() {
        let d = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn short_payload_is_shape_error() {
        let d = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let f = dir.path().join("videos").join(format!("{}.f32", d.videos[0].id));
        let bytes = fs::read(&f).unwrap();
        let frame = 3 * 8 * 8 * 4;
        fs::write(&f, &bytes[..bytes.len() - frame]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Shape(_))));
    }

    #[test]
    fn missing_score_range_is_format_error() {
        let d = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("score_range");
        fs::write(&p, v.to_string()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let d = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        v["format_version"] = 99.into();
        fs::write(&p, v.to_string()).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Version { found: 99, .. })
        ));
    }
}
