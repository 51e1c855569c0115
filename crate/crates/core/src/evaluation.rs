//! Inference, R@n,IoU=m, the random baseline, and qualitative reports.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autograd::Mat;
use crate::backbone::{Forward, Model};
use crate::completion::{mask_query, reconstruct, reconstruction_loss_var, RecObjective, ReconTarget};
use crate::corpus::Vocabulary;
use crate::dataset::EvalItem;
use crate::error::{Error, Result};
use crate::grounding::{fuse_video_query, score_candidates, select_top_k};
use crate::temporal::{enumerate_candidates, iou, Proposal};

/// Ranked predictions for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub query_id: String,
    /// Sorted by confidence, highest first.
    pub predictions: Vec<(Proposal, f64)>,
    pub gt: Proposal,
}

/// Greedy, exploration-free top-`n` with NMS. Returns fewer than `n` only when the
/// video has fewer valid candidates.
pub fn localize_top_n(
    model: &Model,
    video: &Mat,
    query_tokens: &[usize],
    ratios: &[f64],
    n: usize,
    nms_threshold: f64,
) -> Result<Vec<(Proposal, f64)>> {
    if n == 0 {
        return Err(Error::config("n", "must be at least 1"));
    }
    let grid = enumerate_candidates(video.nrows(), ratios)?;
    let fused = fuse_video_query(model, video, query_tokens)?;
    let scores = score_candidates(model, &fused)?;
    let k = n.min(grid.valid_count());
    let sel = select_top_k(&grid, &scores, k, 0.0, nms_threshold, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut out: Vec<(Proposal, f64)> = sel.picks.iter().map(|p| (p.proposal, p.confidence)).collect();
    // Refills can rank below later greedy picks; keep the output sorted.
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(out)
}

/// Runs inference over every item in parallel; order follows `items`.
pub fn evaluate(
    model: &Model,
    items: &[EvalItem],
    ratios: &[f64],
    n: usize,
    nms_threshold: f64,
) -> Result<Vec<EvalRecord>> {
    items
        .par_iter()
        .map(|it| {
            Ok(EvalRecord {
                query_id: it.pair.query_id.clone(),
                predictions: localize_top_n(model, &it.pair.features, &it.pair.tokens, ratios, n, nms_threshold)?,
                gt: it.gt,
            })
        })
        .collect()
}

/// Fraction of records whose top-`n` predictions include one with IoU strictly above `m`.
pub fn recall_at_n_iou(records: &[EvalRecord], n: usize, m: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    if records.iter().any(|r| r.predictions.is_empty()) {
        return Err(Error::Empty("predictions"));
    }
    let hits = records
        .iter()
        .filter(|r| r.predictions.iter().take(n).any(|(p, _)| iou(p, &r.gt) > m))
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// `R@n,IoU=m` for every combination, in `ns`-major order.
pub fn metric_table(records: &[EvalRecord], ns: &[usize], ms: &[f64]) -> Result<Vec<(usize, f64, f64)>> {
    let mut out = Vec::new();
    for &n in ns {
        for &m in ms {
            out.push((n, m, recall_at_n_iou(records, n, m)?));
        }
    }
    Ok(out)
}

pub fn metric_name(n: usize, m: f64) -> String {
    format!("R@{n},IoU={m}")
}

/// Mean recall when each query's predictions are `n` uniform draws from its valid grid.
pub fn random_baseline(
    items: &[(usize, Proposal)],
    ratios: &[f64],
    n: usize,
    m: f64,
    seed: u64,
    trials: usize,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::config("baseline_trials", "must be at least 1"));
    }
    if items.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    let grids: Vec<Vec<Proposal>> = items
        .iter()
        .map(|&(frames, _)| Ok(enumerate_candidates(frames, ratios)?.valid_cells().map(|(_, p)| p).collect()))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..trials {
        for (grid, &(_, gt)) in grids.iter().zip(items) {
            if grid.is_empty() {
                continue;
            }
            if (0..n).any(|_| iou(&grid[rng.random_range(0..grid.len())], &gt) > m) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (trials * items.len()) as f64)
}

/// `(n_frames, gt)` for each item, the input of [`random_baseline`].
pub fn baseline_inputs(items: &[EvalItem]) -> Vec<(usize, Proposal)> {
    items.iter().map(|it| (it.pair.features.nrows(), it.gt)).collect()
}

#[derive(Debug, Serialize)]
struct PredictionLine<'a> {
    query_id: &'a str,
    predictions: Vec<[f64; 3]>,
}

pub fn write_predictions(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        let line = PredictionLine {
            query_id: &r.query_id,
            predictions: r
                .predictions
                .iter()
                .map(|(p, c)| [p.start as f64, p.end as f64, *c])
                .collect(),
        };
        serde_json::to_writer(&mut out, &line).expect("serializable");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_metric_summary(path: &Path, table: &[(usize, f64, f64)]) -> Result<()> {
    let mut s = String::from("n,m,value\n");
    for (n, m, v) in table {
        s.push_str(&format!("{n},{m},{v}\n"));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// One scored proposal inside a report line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportProposal {
    pub start: usize,
    pub end: usize,
    pub confidence: f64,
    pub rec_loss: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportLine {
    pub query_id: String,
    pub gt: [usize; 2],
    pub proposals: Vec<ReportProposal>,
    pub masked_words: Vec<String>,
}

/// Settings for [`report_examples`].
#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub ratios: Vec<f64>,
    pub nms_threshold: f64,
    pub mask_fraction: f64,
    pub w_imp: f64,
    pub seed: u64,
}

fn report_line(model: &Model, vocab: &Vocabulary, item: &EvalItem, index: usize, opt: &ReportOptions) -> Result<ReportLine> {
    let pair = &item.pair;
    let top = localize_top_n(model, &pair.features, &pair.tokens, &opt.ratios, 2, opt.nms_threshold)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let masked = mask_query(&pair.tokens, &pair.importance, opt.mask_fraction, opt.w_imp, &mut rng)?;
    let target = ReconTarget::new(&masked, RecObjective::Masked);
    let mut fwd = Forward::new(model);
    let projected = fwd.project_video(&pair.features)?;
    let mut proposals = Vec::with_capacity(top.len());
    for (p, c) in top {
        let e = reconstruct(&mut fwd, projected, p, &target.decoder_input)?;
        let l = reconstruction_loss_var(&mut fwd.graph, e, &target)?;
        proposals.push(ReportProposal {
            start: p.start,
            end: p.end,
            confidence: c,
            rec_loss: fwd.graph.scalar(l),
            iou: iou(&p, &item.gt),
        });
    }
    Ok(ReportLine {
        query_id: pair.query_id.clone(),
        gt: [item.gt.start, item.gt.end],
        proposals,
        masked_words: masked
            .originals
            .iter()
            .map(|&id| vocab.token(id).unwrap_or("<unk>").to_string())
            .collect(),
    })
}

/// Top-2 proposals per query with their reconstruction losses under a fixed per-query
/// mask. Written as JSON lines to `path` when given.
pub fn report_examples(
    model: &Model,
    vocab: &Vocabulary,
    items: &[EvalItem],
    options: &ReportOptions,
    path: Option<&Path>,
) -> Result<Vec<ReportLine>> {
    let lines: Vec<ReportLine> = items
        .par_iter()
        .enumerate()
        .map(|(i, it)| report_line(model, vocab, it, i, options))
        .collect::<Result<_>>()?;
    if let Some(path) = path {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for l in &lines {
            let s = serde_json::to_string(l).expect("serializable");
            writeln!(file, "{s}").map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(lines)
}

/// Share of two-proposal lines where the higher-IoU proposal also has the lower loss.
/// Lines whose two IoUs tie are skipped.
pub fn iou_loss_agreement(lines: &[ReportLine]) -> Option<f64> {
    let decided: Vec<bool> = lines
        .iter()
        .filter(|l| l.proposals.len() == 2 && l.proposals[0].iou != l.proposals[1].iou)
        .map(|l| {
            let (a, b) = (&l.proposals[0], &l.proposals[1]);
            (a.iou > b.iou) == (a.rec_loss < b.rec_loss)
        })
        .collect();
    (!decided.is_empty()).then(|| decided.iter().filter(|&&x| x).count() as f64 / decided.len() as f64)
}
