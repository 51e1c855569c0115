//! Synthetic grounding corpus.
//!
//! Each pattern owns a centroid in feature space and a content word. A video is a
//! run of i.i.d. background frames (low-amplitude noise, occasionally a frame from
//! some other pattern) with one contiguous event segment drawn around the query
//! pattern's centroid. The paired query is the pattern's verb and object amid random
//! filler.

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{QueryRecord, VideoRecord};
use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::temporal::Proposal;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub feature_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Event length as a fraction of the video length.
    pub event_ratio: f64,
    pub n_patterns: usize,
    /// Probability that a background frame is drawn from a non-query pattern.
    pub distractor_rate: f64,
    /// Standard deviation of the per-frame noise.
    pub noise: f64,
    pub min_fillers: usize,
    pub max_fillers: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 32,
            feature_dim: 16,
            min_frames: 32,
            max_frames: 64,
            event_ratio: 0.3,
            n_patterns: 6,
            distractor_rate: 0.15,
            noise: 0.5,
            min_fillers: 3,
            max_fillers: 6,
            seed: 7,
        }
    }
}

/// Generated records plus the ground-truth generative structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub videos: Vec<VideoRecord>,
    pub queries: Vec<QueryRecord>,
    /// One row per pattern.
    pub centroids: Mat,
    pub pattern_words: Vec<String>,
    pub pattern_objects: Vec<String>,
    /// Pattern index of each query.
    pub patterns: Vec<usize>,
}

const PATTERN_WORDS: &[&str] = &[
    "opens", "closes", "jumps", "sits", "runs", "throws", "pours", "cuts", "laughs", "reads",
    "washes", "climbs", "dances", "eats", "kicks", "paints",
];

const PATTERN_OBJECTS: &[&str] = &[
    "door", "window", "ball", "chair", "track", "frisbee", "water", "bread", "joke", "book",
    "dishes", "ladder", "floor", "sandwich", "can", "wall",
];

const FILLERS: &[&str] = &[
    "a", "the", "person", "someone", "in", "then", "slowly", "room", "again", "quickly", "at",
    "scene", "there", "while", "near", "camera",
];

fn word(list: &[&str], i: usize, fallback: &str) -> String {
    list.get(i)
        .map(|w| w.to_string())
        .unwrap_or_else(|| format!("{fallback}{i}"))
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim", "must be positive"));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::config(
                "min_frames",
                format!("need 1 <= min_frames <= max_frames, got {}..{}", self.min_frames, self.max_frames),
            ));
        }
        if !(self.event_ratio > 0.0 && self.event_ratio <= 1.0) {
            return Err(Error::config(
                "event_ratio",
                format!("event segment of ratio {} does not fit in the video", self.event_ratio),
            ));
        }
        if self.n_patterns == 0 {
            return Err(Error::config("n_patterns", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::config("distractor_rate", "must lie in [0, 1]"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise", "must be a finite non-negative value"));
        }
        if self.min_fillers > self.max_fillers {
            return Err(Error::config("min_fillers", "exceeds max_fillers"));
        }
        Ok(())
    }
}

/// Generates a reproducible corpus from `config.seed`.
pub fn generate_synthetic_corpus(config: &SynthConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.feature_dim;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = Normal::new(0.0, config.noise).expect("validated noise");
    let centroids = Array2::from_shape_fn((config.n_patterns, d), |_| unit.sample(&mut rng));
    let pattern_words: Vec<String> = (0..config.n_patterns)
        .map(|i| word(PATTERN_WORDS, i, "action"))
        .collect();
    let pattern_objects: Vec<String> = (0..config.n_patterns)
        .map(|i| word(PATTERN_OBJECTS, i, "thing"))
        .collect();

    let mut videos = Vec::with_capacity(config.n_videos);
    let mut queries = Vec::with_capacity(config.n_videos);
    let mut patterns = Vec::with_capacity(config.n_videos);
    for i in 0..config.n_videos {
        let n_frames = rng.random_range(config.min_frames..=config.max_frames);
        let event_len = ((config.event_ratio * n_frames as f64).round() as usize).max(1);
        if event_len > n_frames {
            return Err(Error::config("event_ratio", "event segment longer than video"));
        }
        let start = rng.random_range(0..=n_frames - event_len);
        let pattern = rng.random_range(0..config.n_patterns);

        let mut features = Mat::zeros((n_frames, d));
        for t in 0..n_frames {
            let source = if (start..start + event_len).contains(&t) {
                Some(pattern)
            } else if config.n_patterns > 1 && rng.random::<f64>() < config.distractor_rate {
                let mut other = rng.random_range(0..config.n_patterns - 1);
                if other >= pattern {
                    other += 1;
                }
                Some(other)
            } else {
                None
            };
            for c in 0..d {
                let base = source.map_or(0.0, |p| centroids[[p, c]]);
                features[[t, c]] = base + noise.sample(&mut rng);
            }
        }
        let video_id = format!("vid{i:05}");
        videos.push(VideoRecord {
            video_id: video_id.clone(),
            features,
        });

        let n_fill = rng.random_range(config.min_fillers..=config.max_fillers);
        let mut tokens: Vec<String> = (0..n_fill)
            .map(|_| FILLERS.choose(&mut rng).expect("fillers").to_string())
            .collect();
        let at = rng.random_range(0..=n_fill);
        tokens.insert(at, pattern_objects[pattern].clone());
        tokens.insert(at, pattern_words[pattern].clone());
        let importance = (0..tokens.len()).map(|j| j == at || j == at + 1).collect();
        let gt = Proposal::new(start, start + event_len)?;
        queries.push(QueryRecord::new(video_id, tokens, importance, Some(gt)));
        patterns.push(pattern);
    }
    Ok(SyntheticCorpus {
        videos,
        queries,
        centroids,
        pattern_words,
        pattern_objects,
        patterns,
    })
}
