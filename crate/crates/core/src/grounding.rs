//! Proposal generation: fuse video with query, score every candidate in one pass,
//! then pick `K` proposals mixing greedy exploitation with random exploration.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Var};
use crate::backbone::{FeatureSequence, Forward, Model, Role};
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::temporal::{iou, nms_filter, CandidateGrid, Cell, Proposal, ScoredProposal};

/// Tape handles produced by fusing one video with one query.
#[derive(Debug, Clone, Copy)]
pub struct Fused {
    /// Cross-modal representation, one row per frame.
    pub cross_modal: Var,
    /// Frame features after the input projection, without positions.
    pub projected: Var,
}

/// `Dec_v(project(v) + pos, Enc_q(embed(q)))` on the forward's tape.
pub fn fuse(fwd: &mut Forward<'_>, video: &Mat, query_ids: &[usize]) -> Result<Fused> {
    if query_ids.is_empty() {
        return Err(Error::Empty("query"));
    }
    let q = fwd.embed_tokens(query_ids, Some(PAD))?;
    let q_enc = fwd.encode(&q, Role::QueryEncoder)?;
    let projected = fwd.project_video(video)?;
    let v = fwd.positioned_rows(projected, 0..video.nrows());
    let c = fwd.decode(&v, &q_enc, Role::VideoDecoder)?;
    Ok(Fused {
        cross_modal: c.var,
        projected,
    })
}

/// Value-level fusion, one `n_frames x d_model` row per frame.
pub fn fuse_video_query(model: &Model, video: &Mat, query_ids: &[usize]) -> Result<FeatureSequence> {
    let mut fwd = Forward::new(model);
    let fused = fuse(&mut fwd, video, query_ids)?;
    Ok(FeatureSequence::new(fwd.graph.value(fused.cross_modal).clone()))
}

/// Sigmoid confidences for every (time step, ratio) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    pub scores: Mat,
}

impl ScoreGrid {
    pub fn get(&self, cell: Cell) -> f64 {
        self.scores[[cell.step, cell.ratio]]
    }
}

/// Scores a fused sequence with the model's scoring head.
pub fn score_candidates(model: &Model, cross_modal: &FeatureSequence) -> Result<ScoreGrid> {
    if cross_modal.width() != model.dims().d_model {
        return Err(Error::Shape {
            context: "score_candidates",
            detail: format!(
                "width {} but model width {}",
                cross_modal.width(),
                model.dims().d_model
            ),
        });
    }
    let mut fwd = Forward::new(model);
    let c = fwd.graph.constant(cross_modal.values.clone());
    let s = fwd.score(c);
    Ok(ScoreGrid {
        scores: fwd.graph.value(s).clone(),
    })
}

/// Probability of a random pick: `lambda1 * exp(-n_update / lambda2)`.
pub fn exploration_probability(n_update: u64, lambda1: f64, lambda2: f64) -> Result<f64> {
    if !(lambda2 > 0.0) {
        return Err(Error::config("lambda2", format!("{lambda2} must be positive")));
    }
    if !(0.0..=1.0).contains(&lambda1) {
        return Err(Error::config("lambda1", format!("{lambda1} outside [0, 1]")));
    }
    Ok(lambda1 * (-(n_update as f64) / lambda2).exp())
}

/// How a proposal entered the selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Greedy,
    Random,
    /// Taken from already-suppressed candidates after the pool ran dry.
    Refill,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pick {
    pub proposal: Proposal,
    pub cell: Cell,
    pub confidence: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub picks: Vec<Pick>,
}

impl SelectionResult {
    pub fn proposals(&self) -> Vec<Proposal> {
        self.picks.iter().map(|p| p.proposal).collect()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.picks.iter().map(|p| p.confidence).collect()
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.picks.iter().filter(|p| p.provenance == provenance).count()
    }
}

/// Higher score first, then earlier start, then shorter length.
fn rank(a: &ScoredProposal, b: &ScoredProposal) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.proposal.start.cmp(&b.proposal.start))
        .then(a.proposal.len().cmp(&b.proposal.len()))
        .then(a.cell.cmp(&b.cell))
}

fn best_index(pool: &[ScoredProposal]) -> Option<usize> {
    (0..pool.len()).min_by(|&i, &j| rank(&pool[i], &pool[j]))
}

/// Picks `k` proposals. Each pick is uniform over the surviving pool with probability
/// `p`, otherwise the best-ranked survivor; NMS against each pick shrinks the pool.
/// When the pool empties early, suppressed candidates refill it in rank order.
///
/// With `p == 0` the random source is never touched.
pub fn select_top_k<R: Rng + ?Sized>(
    grid: &CandidateGrid,
    scores: &ScoreGrid,
    k: usize,
    p: f64,
    nms_threshold: f64,
    rng: &mut R,
) -> Result<SelectionResult> {
    if k == 0 {
        return Err(Error::config("k", "must select at least one proposal"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config("p", format!("{p} outside [0, 1]")));
    }
    if scores.scores.dim() != (grid.n_frames(), grid.n_ratios()) {
        return Err(Error::Shape {
            context: "select_top_k",
            detail: format!(
                "scores {:?} for a {}x{} grid",
                scores.scores.dim(),
                grid.n_frames(),
                grid.n_ratios()
            ),
        });
    }
    if grid.valid_count() < k {
        return Err(Error::Shape {
            context: "select_top_k",
            detail: format!("{} valid candidates, need {k}", grid.valid_count()),
        });
    }
    let mut pool: Vec<ScoredProposal> = grid
        .valid_cells()
        .map(|(cell, proposal)| ScoredProposal {
            proposal,
            score: scores.get(cell),
            cell,
        })
        .collect();
    let mut suppressed: Vec<ScoredProposal> = Vec::new();
    let mut picks = Vec::with_capacity(k);
    while picks.len() < k {
        if pool.is_empty() {
            let i = best_index(&suppressed).expect("enough valid candidates checked above");
            let s = suppressed.remove(i);
            picks.push(Pick {
                proposal: s.proposal,
                cell: s.cell,
                confidence: s.score,
                provenance: Provenance::Refill,
            });
            continue;
        }
        let explore = p > 0.0 && rng.random::<f64>() < p;
        let (idx, provenance) = if explore {
            (rng.random_range(0..pool.len()), Provenance::Random)
        } else {
            (best_index(&pool).expect("non-empty pool"), Provenance::Greedy)
        };
        let chosen = pool[idx];
        let kept = nms_filter(&chosen.proposal, &pool, nms_threshold);
        suppressed.extend(
            pool.iter()
                .filter(|c| {
                    c.cell != chosen.cell
                        && (c.proposal == chosen.proposal
                            || iou(&c.proposal, &chosen.proposal) > nms_threshold)
                })
                .copied(),
        );
        pool = kept;
        picks.push(Pick {
            proposal: chosen.proposal,
            cell: chosen.cell,
            confidence: chosen.score,
            provenance,
        });
    }
    Ok(SelectionResult { picks })
}
