//! Videos, queries, vocabulary, synthetic data, and the on-disk dataset formats.

mod io;
mod synth;
mod vocab;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::temporal::Proposal;

pub use io::{
    read_annotations, read_dataset, read_features, write_annotations, write_dataset,
    write_features, DatasetLimits,
};
pub use synth::{generate_synthetic_corpus, SynthConfig, SyntheticCorpus};
pub use vocab::{build_vocabulary, stopword_importance, Vocabulary, BOS, MASK, PAD, UNK};

/// One video: an identifier and its `n_frames x feature_dim` frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub features: Mat,
}

impl VideoRecord {
    pub fn n_frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }
}

static TRAINING_SCOPES: AtomicUsize = AtomicUsize::new(0);
static GT_READS_IN_TRAINING: AtomicUsize = AtomicUsize::new(0);

/// Marks a region where ground-truth intervals must not be read.
///
/// While any scope is alive, every call to [`QueryRecord::gt`] is counted.
pub struct TrainingScope(());

impl TrainingScope {
    pub fn enter() -> Self {
        TRAINING_SCOPES.fetch_add(1, Ordering::SeqCst);
        TrainingScope(())
    }
}

impl Drop for TrainingScope {
    fn drop(&mut self) {
        TRAINING_SCOPES.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Number of ground-truth reads observed inside training scopes since process start.
pub fn gt_reads_during_training() -> usize {
    GT_READS_IN_TRAINING.load(Ordering::SeqCst)
}

/// A natural-language query paired with a video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub video_id: String,
    pub tokens: Vec<String>,
    /// `true` for content words (preferentially masked), `false` for filler.
    pub importance: Vec<bool>,
    gt_interval: Option<Proposal>,
}

impl QueryRecord {
    pub fn new(
        video_id: impl Into<String>,
        tokens: Vec<String>,
        importance: Vec<bool>,
        gt_interval: Option<Proposal>,
    ) -> Self {
        Self {
            video_id: video_id.into(),
            tokens,
            importance,
            gt_interval,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Ground-truth interval, for evaluation only.
    pub fn gt(&self) -> Option<Proposal> {
        if TRAINING_SCOPES.load(Ordering::SeqCst) > 0 {
            GT_READS_IN_TRAINING.fetch_add(1, Ordering::SeqCst);
        }
        self.gt_interval
    }

    /// The same query with the ground truth removed.
    pub fn without_gt(&self) -> Self {
        Self {
            gt_interval: None,
            ..self.clone()
        }
    }
}

/// Looks up the video each query refers to.
pub fn pair_up<'a>(
    videos: &'a [VideoRecord],
    queries: &'a [QueryRecord],
) -> Vec<(&'a VideoRecord, &'a QueryRecord)> {
    let index: std::collections::HashMap<&str, &VideoRecord> =
        videos.iter().map(|v| (v.video_id.as_str(), v)).collect();
    queries
        .iter()
        .filter_map(|q| index.get(q.video_id.as_str()).map(|v| (*v, q)))
        .collect()
}
