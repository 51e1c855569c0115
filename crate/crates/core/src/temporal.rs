//! Temporal intervals, the multi-scale candidate grid, and non-maximum suppression.
//!
//! Intervals are half-open `[start, end)` over integer frame indices. The candidate
//! grid holds, for every 0-based time step `t` and every scale ratio `r_k`, the
//! proposal `(round(t + 1 - r_k * n_v), t + 1)`, or nothing when that start would
//! fall before the first frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A half-open temporal interval `[start, end)` in frame units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Proposal {
    pub start: usize,
    pub end: usize,
}

impl Proposal {
    /// Builds a proposal, rejecting empty or reversed intervals.
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if end <= start {
            return Err(Error::InvalidProposal { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn intersection(&self, other: &Proposal) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        hi.saturating_sub(lo)
    }

    /// Whether the interval fits inside a video of `n_frames` frames.
    pub fn fits(&self, n_frames: usize) -> bool {
        self.start < self.end && self.end <= n_frames
    }
}

impl std::fmt::Display for Proposal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Temporal intersection over union of two intervals.
pub fn iou(a: &Proposal, b: &Proposal) -> f64 {
    let inter = a.intersection(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Grid coordinate of a candidate: time step and ratio index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub step: usize,
    pub ratio: usize,
}

/// The fixed set of multi-scale candidates for a video of `n_frames` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrid {
    n_frames: usize,
    ratios: Vec<f64>,
    // row-major: step * n_ratios + ratio
    cells: Vec<Option<Proposal>>,
}

impl CandidateGrid {
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_ratios(&self) -> usize {
        self.ratios.len()
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn get(&self, cell: Cell) -> Option<Proposal> {
        if cell.step >= self.n_frames || cell.ratio >= self.ratios.len() {
            return None;
        }
        self.cells[cell.step * self.ratios.len() + cell.ratio]
    }

    pub fn is_valid(&self, cell: Cell) -> bool {
        self.get(cell).is_some()
    }

    /// Validity mask, `n_frames` rows by `n_ratios` columns.
    pub fn validity_mask(&self) -> Vec<Vec<bool>> {
        self.cells
            .chunks(self.ratios.len())
            .map(|row| row.iter().map(Option::is_some).collect())
            .collect()
    }

    /// Every valid cell with its proposal, in step-major order.
    pub fn valid_cells(&self) -> impl Iterator<Item = (Cell, Proposal)> + '_ {
        let n_k = self.ratios.len();
        self.cells.iter().enumerate().filter_map(move |(i, p)| {
            p.map(|p| {
                (
                    Cell {
                        step: i / n_k,
                        ratio: i % n_k,
                    },
                    p,
                )
            })
        })
    }

    pub fn valid_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn total_cells(&self) -> usize {
        self.cells.len()
    }
}

/// Enumerates candidates `(round(t + 1 - r * n_frames), t + 1)` for every step and ratio.
///
/// Candidates whose start would be negative are marked invalid rather than clamped.
pub fn enumerate_candidates(n_frames: usize, ratios: &[f64]) -> Result<CandidateGrid> {
    if ratios.is_empty() {
        return Err(Error::Config {
            key: "ratios".into(),
            reason: "at least one ratio is required".into(),
        });
    }
    if n_frames == 0 {
        return Err(Error::Config {
            key: "n_frames".into(),
            reason: "a video needs at least one frame".into(),
        });
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::Config {
            key: "ratios".into(),
            reason: format!("ratio {r} outside (0, 1]"),
        });
    }
    let mut cells = Vec::with_capacity(n_frames * ratios.len());
    for t in 0..n_frames {
        let end = t + 1;
        for &r in ratios {
            let raw = (end as f64 - r * n_frames as f64).round();
            let cell = if raw < 0.0 || (raw as usize) >= end {
                None
            } else {
                Some(Proposal {
                    start: raw as usize,
                    end,
                })
            };
            cells.push(cell);
        }
    }
    Ok(CandidateGrid {
        n_frames,
        ratios: ratios.to_vec(),
        cells,
    })
}

/// A candidate with its confidence and grid coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredProposal {
    pub proposal: Proposal,
    pub score: f64,
    pub cell: Cell,
}

/// Removes `chosen` and every pool entry overlapping it by more than `threshold`.
pub fn nms_filter(
    chosen: &Proposal,
    pool: &[ScoredProposal],
    threshold: f64,
) -> Vec<ScoredProposal> {
    pool.iter()
        .filter(|p| p.proposal != *chosen && iou(&p.proposal, chosen) <= threshold)
        .copied()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(s: usize, e: usize) -> Proposal {
        Proposal::new(s, e).unwrap()
    }

    fn sp(s: usize, e: usize, score: f64) -> ScoredProposal {
        ScoredProposal {
            proposal: p(s, e),
            score,
            cell: Cell {
                step: e - 1,
                ratio: 0,
            },
        }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&p(2, 8), &p(2, 8)), 1.0);
        assert_eq!(iou(&p(0, 4), &p(4, 8)), 0.0);
        assert_eq!(iou(&p(2, 8), &p(4, 10)), 0.5);
    }

    #[test]
    fn rejects_empty_interval() {
        assert!(Proposal::new(3, 3).is_err());
        assert!(Proposal::new(4, 3).is_err());
    }

    #[test]
    fn grid_boundary_examples() {
        let g = enumerate_candidates(6, &[0.5, 1.0]).unwrap();
        assert_eq!(g.get(Cell { step: 2, ratio: 0 }), Some(p(0, 3)));
        assert_eq!(g.get(Cell { step: 2, ratio: 1 }), None);
        let g = enumerate_candidates(6, &[1.0]).unwrap();
        assert_eq!(g.get(Cell { step: 5, ratio: 0 }), Some(p(0, 6)));
        assert_eq!(g.total_cells(), 6);
    }

    #[test]
    fn grid_rejects_bad_config() {
        assert!(enumerate_candidates(10, &[]).is_err());
        assert!(enumerate_candidates(10, &[0.0]).is_err());
        assert!(enumerate_candidates(10, &[1.5]).is_err());
        assert!(enumerate_candidates(0, &[0.5]).is_err());
    }

    #[test]
    fn grid_valid_count_matches_loop_oracle() {
        let ratios = [0.167, 0.333, 0.500, 0.667, 0.834, 1.0];
        let n = 200usize;
        let g = enumerate_candidates(n, &ratios).unwrap();
        assert_eq!(g.total_cells(), 1200);
        // oracle: count integer starts s with s >= 0 and s < t+1
        let mut expected = 0;
        for t in 1..=n {
            for r in ratios {
                let s = (t as f64 - r * n as f64).round() as i64;
                if s >= 0 && s < t as i64 {
                    expected += 1;
                }
            }
        }
        assert_eq!(g.valid_count(), expected);
    }

    #[test]
    fn nms_examples() {
        let chosen = p(0, 10);
        let pool = vec![sp(0, 10, 0.9), sp(0, 9, 0.8), sp(20, 30, 0.1)];
        let out = nms_filter(&chosen, &pool, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].proposal, p(20, 30));

        let pool = vec![sp(50, 60, 0.3)];
        assert_eq!(nms_filter(&chosen, &pool, 0.5), pool);
    }

    #[test]
    fn nms_matches_pairwise_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let chosen = p(5, 15);
        let pool: Vec<_> = (0..100)
            .map(|_| {
                let s = rng.random_range(0..40);
                let e = rng.random_range(s + 1..=50);
                sp(s, e, rng.random())
            })
            .collect();
        let out = nms_filter(&chosen, &pool, 0.55);
        let mut oracle = Vec::new();
        for cand in &pool {
            let lo = cand.proposal.start.max(5);
            let hi = cand.proposal.end.min(15);
            let inter = hi.saturating_sub(lo) as f64;
            let union = (cand.proposal.end - cand.proposal.start + 10) as f64 - inter;
            if inter / union <= 0.55 && cand.proposal != chosen {
                oracle.push(*cand);
            }
        }
        assert_eq!(out, oracle);
    }

    fn arb_proposal() -> impl Strategy<Value = Proposal> {
        (0usize..100, 1usize..50).prop_map(|(s, l)| Proposal {
            start: s,
            end: s + l,
        })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_proposal(), b in arb_proposal()) {
            let x = iou(&a, &b);
            prop_assert_eq!(x, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x == 1.0, a == b);
            prop_assert_eq!(x == 0.0, a.intersection(&b) == 0);
        }

        #[test]
        fn valid_cells_end_at_step(n in 1usize..120, r in prop::collection::vec(0.01f64..=1.0, 1..7)) {
            let g = enumerate_candidates(n, &r).unwrap();
            prop_assert_eq!(g.total_cells(), n * r.len());
            for (cell, prop) in g.valid_cells() {
                prop_assert_eq!(prop.end, cell.step + 1);
                prop_assert!(prop.fits(n));
            }
            prop_assert_eq!(&g, &enumerate_candidates(n, &r).unwrap());
        }

        #[test]
        fn greedy_nms_leaves_low_overlap(pool in prop::collection::vec((arb_proposal(), 0.0f64..1.0), 1..40), thr in 0.0f64..0.99) {
            let mut pool: Vec<_> = pool
                .into_iter()
                .map(|(proposal, score)| ScoredProposal { proposal, score, cell: Cell { step: 0, ratio: 0 } })
                .collect();
            let mut picked: Vec<Proposal> = Vec::new();
            while let Some(best) = pool
                .iter()
                .copied()
                .max_by(|a, b| a.score.total_cmp(&b.score))
            {
                picked.push(best.proposal);
                pool = nms_filter(&best.proposal, &pool, thr);
            }
            for i in 0..picked.len() {
                for j in i + 1..picked.len() {
                    prop_assert!(iou(&picked[i], &picked[j]) <= thr);
                }
            }
        }
    }
}
