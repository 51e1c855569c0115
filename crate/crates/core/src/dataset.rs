//! Turning raw records into encoded training pairs and labelled evaluation items.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Mat;
use crate::config::RunConfig;
use crate::corpus::{build_vocabulary, pair_up, QueryRecord, VideoRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::temporal::Proposal;

/// One encoded video-query pair with no ground truth attached.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub query_id: String,
    pub features: Arc<Mat>,
    pub tokens: Vec<usize>,
    pub importance: Vec<bool>,
}

/// An encoded pair plus its ground-truth interval, for evaluation only.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub pair: TrainPair,
    pub gt: Proposal,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub train: Vec<TrainPair>,
    pub val: Vec<EvalItem>,
    pub test: Vec<EvalItem>,
}

/// Seeded shuffle split into (train, val, test) index lists.
pub fn split_indices(
    n: usize,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (val_fraction * n as f64).round() as usize;
    let n_test = ((test_fraction * n as f64).round() as usize).min(n - n_val.min(n));
    let n_val = n_val.min(n);
    let test = idx.split_off(n - n_test);
    let val = idx.split_off(idx.len() - n_val);
    (idx, val, test)
}

fn query_id(q: &QueryRecord, i: usize) -> String {
    format!("{}#{i}", q.video_id)
}

pub fn encode_pair(vocab: &Vocabulary, video: &VideoRecord, query: &QueryRecord, id: String) -> TrainPair {
    TrainPair {
        query_id: id,
        features: Arc::new(video.features.clone()),
        tokens: vocab.encode(&query.tokens),
        importance: query.importance.clone(),
    }
}

/// Labels an encoded pair for evaluation; fails when the query has no ground truth.
pub fn eval_item(pair: TrainPair, query: &QueryRecord) -> Result<EvalItem> {
    let gt = query.gt().ok_or(Error::Empty("ground-truth interval"))?;
    Ok(EvalItem { pair, gt })
}

/// Splits queries, builds the vocabulary from training queries, and encodes everything.
/// Training pairs are built from copies stripped of ground truth.
pub fn prepare(videos: &[VideoRecord], queries: &[QueryRecord], cfg: &RunConfig) -> Result<Prepared> {
    let pairs = pair_up(videos, queries);
    if pairs.len() != queries.len() {
        return Err(Error::Empty("video for one or more queries"));
    }
    let (tr, va, te) = split_indices(pairs.len(), cfg.val_fraction, cfg.test_fraction, cfg.seed);
    if tr.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let vocab = build_vocabulary(tr.iter().map(|&i| pairs[i].1.tokens.as_slice()), cfg.vocab_size)?;
    let train = tr
        .iter()
        .map(|&i| {
            let (v, q) = pairs[i];
            encode_pair(&vocab, v, &q.without_gt(), query_id(q, i))
        })
        .collect();
    let label = |ids: &[usize]| -> Result<Vec<EvalItem>> {
        ids.iter()
            .map(|&i| {
                let (v, q) = pairs[i];
                eval_item(encode_pair(&vocab, v, q, query_id(q, i)), q)
            })
            .collect()
    };
    let val = label(&va)?;
    let test = label(&te)?;
    Ok(Prepared {
        vocab,
        train,
        val,
        test,
    })
}

/// Encodes every labelled query with an existing vocabulary.
pub fn encode_eval_items(
    vocab: &Vocabulary,
    videos: &[VideoRecord],
    queries: &[QueryRecord],
) -> Result<Vec<EvalItem>> {
    pair_up(videos, queries)
        .into_iter()
        .enumerate()
        .map(|(i, (v, q))| eval_item(encode_pair(vocab, v, q, query_id(q, i)), q))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SynthConfig};

    #[test]
    fn split_is_a_partition() {
        let (a, b, c) = split_indices(50, 0.1, 0.1, 3);
        assert_eq!((a.len(), b.len(), c.len()), (40, 5, 5));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(split_indices(50, 0.1, 0.1, 3), (a, b, c));
    }

    #[test]
    fn training_pairs_carry_no_gt() {
        let corpus = generate_synthetic_corpus(&SynthConfig {
            n_videos: 20,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = RunConfig::default();
        let p = prepare(&corpus.videos, &corpus.queries, &cfg).unwrap();
        assert_eq!(p.train.len() + p.val.len() + p.test.len(), 20);
        assert!(p.val.iter().all(|e| e.gt.fits(e.pair.features.nrows())));
    }
}
