//! Binary feature files and JSON-lines annotations.
//!
//! Feature file layout (little-endian): magic `SCNF`, version `u32`, video count `u32`,
//! then per video: id length `u16`, UTF-8 id, `n_frames u32`, `dim u32`, and
//! `n_frames * dim` `f32` values in row-major order.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{stopword_importance, QueryRecord, VideoRecord};
use crate::autograd::Mat;
use crate::binio::{read_f32s, read_u16, read_u32, write_f32s};
use crate::error::{Error, Result};
use crate::temporal::Proposal;

pub const FEATURE_MAGIC: &[u8; 4] = b"SCNF";
pub const FEATURE_VERSION: u32 = 1;

/// Bounds enforced while reading a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetLimits {
    pub max_frames: usize,
    pub max_words: usize,
}

impl Default for DatasetLimits {
    fn default() -> Self {
        Self {
            max_frames: 200,
            max_words: 20,
        }
    }
}

pub fn write_features(path: &Path, videos: &[VideoRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(FEATURE_MAGIC).map_err(io)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(videos.len() as u32).to_le_bytes()).map_err(io)?;
    for (i, v) in videos.iter().enumerate() {
        let id = v.video_id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| Error::Parse {
            path: path.into(),
            record: i,
            reason: format!("video id `{}` longer than 65535 bytes", v.video_id),
        })?;
        w.write_all(&id_len.to_le_bytes()).map_err(io)?;
        w.write_all(id).map_err(io)?;
        w.write_all(&(v.n_frames() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(v.feature_dim() as u32).to_le_bytes()).map_err(io)?;
        write_f32s(&mut w, v.features.iter().copied()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_features(path: &Path, limits: &DatasetLimits) -> Result<Vec<VideoRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let parse = |record: usize, reason: String| Error::Parse {
        path: path.into(),
        record,
        reason,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| parse(0, "file too short for header".into()))?;
    if &magic != FEATURE_MAGIC {
        return Err(parse(0, format!("bad magic bytes {magic:?}, expected \"SCNF\"")));
    }
    let version = read_u32(&mut r).map_err(|_| parse(0, "truncated header".into()))?;
    if version != FEATURE_VERSION {
        return Err(parse(0, format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r).map_err(|_| parse(0, "truncated header".into()))? as usize;
    let mut videos = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for i in 0..count {
        let trunc = |what: &str| parse(i, format!("truncated {what}"));
        let id_len = read_u16(&mut r).map_err(|_| trunc("id length"))? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(|_| trunc("id"))?;
        let video_id = String::from_utf8(id).map_err(|_| parse(i, "id is not UTF-8".into()))?;
        let n_frames = read_u32(&mut r).map_err(|_| trunc("frame count"))? as usize;
        let dim = read_u32(&mut r).map_err(|_| trunc("feature width"))? as usize;
        if n_frames == 0 || n_frames > limits.max_frames {
            return Err(parse(
                i,
                format!("video `{video_id}` has {n_frames} frames, allowed 1..={}", limits.max_frames),
            ));
        }
        if dim == 0 {
            return Err(parse(i, format!("video `{video_id}` has zero feature width")));
        }
        let values = read_f32s(&mut r, n_frames * dim).map_err(|_| {
            parse(
                i,
                format!("video `{video_id}` declares {n_frames}x{dim} values but the file ends early"),
            )
        })?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse(i, format!("video `{video_id}` has non-finite features")));
        }
        if !seen.insert(video_id.clone()) {
            return Err(parse(i, format!("duplicate video id `{video_id}`")));
        }
        let features = Mat::from_shape_vec((n_frames, dim), values).expect("sized above");
        videos.push(VideoRecord { video_id, features });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(parse(count, "trailing bytes after last video".into()));
    }
    Ok(videos)
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    video_id: String,
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    importance: Option<Vec<u8>>,
    gt: Option<[usize; 2]>,
}

pub fn write_annotations(path: &Path, queries: &[QueryRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for q in queries {
        let line = AnnotationLine {
            video_id: q.video_id.clone(),
            tokens: q.tokens.clone(),
            importance: Some(q.importance.iter().map(|&b| b as u8).collect()),
            gt: q.gt_interval.map(|p| [p.start, p.end]),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads annotations; `importance` falls back to a stopword heuristic when absent.
pub fn read_annotations(path: &Path, limits: &DatasetLimits) -> Result<Vec<QueryRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |reason: String| Error::Parse {
            path: path.into(),
            record: i + 1,
            reason,
        };
        let a: AnnotationLine =
            serde_json::from_str(&line).map_err(|e| parse(format!("invalid JSON: {e}")))?;
        if a.tokens.is_empty() || a.tokens.len() > limits.max_words {
            return Err(parse(format!(
                "query has {} tokens, allowed 1..={}",
                a.tokens.len(),
                limits.max_words
            )));
        }
        let importance = match a.importance {
            Some(flags) => {
                if flags.len() != a.tokens.len() {
                    return Err(parse(format!(
                        "{} importance flags for {} tokens",
                        flags.len(),
                        a.tokens.len()
                    )));
                }
                if let Some(bad) = flags.iter().find(|&&f| f > 1) {
                    return Err(parse(format!("importance flag {bad} is not 0 or 1")));
                }
                flags.into_iter().map(|f| f == 1).collect()
            }
            None => stopword_importance(&a.tokens),
        };
        let gt = match a.gt {
            Some([s, e]) => Some(Proposal::new(s, e).map_err(|err| parse(err.to_string()))?),
            None => None,
        };
        out.push(QueryRecord::new(a.video_id, a.tokens, importance, gt));
    }
    Ok(out)
}

/// Reads both files and checks that every query resolves to a video it fits in.
pub fn read_dataset(
    features_path: &Path,
    annotations_path: &Path,
    limits: &DatasetLimits,
) -> Result<(Vec<VideoRecord>, Vec<QueryRecord>)> {
    let videos = read_features(features_path, limits)?;
    let queries = read_annotations(annotations_path, limits)?;
    let frames: std::collections::HashMap<&str, usize> = videos
        .iter()
        .map(|v| (v.video_id.as_str(), v.n_frames()))
        .collect();
    for (i, q) in queries.iter().enumerate() {
        let parse = |reason: String| Error::Parse {
            path: annotations_path.into(),
            record: i + 1,
            reason,
        };
        let n = frames
            .get(q.video_id.as_str())
            .ok_or_else(|| parse(format!("unknown video_id `{}`", q.video_id)))?;
        if let Some(gt) = q.gt_interval {
            if !gt.fits(*n) {
                return Err(parse(format!(
                    "gt {gt} outside video `{}` of {n} frames",
                    q.video_id
                )));
            }
        }
    }
    Ok((videos, queries))
}

pub fn write_dataset(
    features_path: &Path,
    annotations_path: &Path,
    videos: &[VideoRecord],
    queries: &[QueryRecord],
) -> Result<()> {
    write_features(features_path, videos)?;
    write_annotations(annotations_path, queries)
}
