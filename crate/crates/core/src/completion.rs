//! Semantic completion: mask important query words, rebuild them from a proposal's
//! frames, and score the proposal by the negative log-likelihood of the rebuild.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::backbone::{Forward, Model, Role};
use crate::corpus::{BOS, MASK, PAD};
use crate::error::{Error, Result};
use crate::temporal::Proposal;

/// A query with some positions replaced by the MASK id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedQuery {
    pub masked_tokens: Vec<usize>,
    /// Sorted masked positions.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub originals: Vec<usize>,
}

impl MaskedQuery {
    /// The unmasked query.
    pub fn original_tokens(&self) -> Vec<usize> {
        let mut out = self.masked_tokens.clone();
        for (&p, &id) in self.positions.iter().zip(&self.originals) {
            out[p] = id;
        }
        out
    }
}

/// Number of positions masked for a query of `n` tokens.
pub fn mask_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Samples `max(1, round(fraction * n))` positions without replacement; important
/// tokens carry weight `important_weight`, filler tokens weight 1.
pub fn mask_query<R: Rng + ?Sized>(
    tokens: &[usize],
    importance: &[bool],
    fraction: f64,
    important_weight: f64,
    rng: &mut R,
) -> Result<MaskedQuery> {
    if tokens.is_empty() {
        return Err(Error::Empty("query"));
    }
    if importance.len() != tokens.len() {
        return Err(Error::Shape {
            context: "mask_query",
            detail: format!("{} flags for {} tokens", importance.len(), tokens.len()),
        });
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("mask_fraction", format!("{fraction} outside (0, 1]")));
    }
    if !(important_weight > 0.0) {
        return Err(Error::config("w_imp", "must be positive"));
    }
    let n = tokens.len();
    let mut weights: Vec<f64> = importance
        .iter()
        .map(|&imp| if imp { important_weight } else { 1.0 })
        .collect();
    let mut positions = Vec::new();
    for _ in 0..mask_count(n, fraction) {
        let total: f64 = weights.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut chosen = None;
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            chosen = Some(i);
            if target < w {
                break;
            }
            target -= w;
        }
        let i = chosen.expect("a positive weight remains");
        weights[i] = 0.0;
        positions.push(i);
    }
    positions.sort_unstable();
    let originals = positions.iter().map(|&p| tokens[p]).collect();
    let mut masked_tokens = tokens.to_vec();
    for &p in &positions {
        masked_tokens[p] = MASK;
    }
    Ok(MaskedQuery {
        masked_tokens,
        positions,
        originals,
    })
}

/// Which tokens the query decoder reconstructs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecObjective {
    /// Negative log-likelihood summed over masked positions.
    Masked,
    /// Masked input, but every position is a target.
    AllPositions,
    /// No masking: shifted input behind BOS with a causal decoder, every position a target.
    Autoregressive,
}

/// Decoder input plus `(row, target id)` pairs for one reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconTarget {
    pub decoder_input: Vec<usize>,
    pub targets: Vec<(usize, usize)>,
}

impl ReconTarget {
    pub fn new(masked: &MaskedQuery, objective: RecObjective) -> Self {
        match objective {
            RecObjective::Masked => Self {
                decoder_input: masked.masked_tokens.clone(),
                targets: masked
                    .positions
                    .iter()
                    .copied()
                    .zip(masked.originals.iter().copied())
                    .collect(),
            },
            RecObjective::AllPositions => Self {
                decoder_input: masked.masked_tokens.clone(),
                targets: masked.original_tokens().into_iter().enumerate().collect(),
            },
            RecObjective::Autoregressive => {
                let tokens = masked.original_tokens();
                let mut input = vec![BOS];
                input.extend_from_slice(&tokens[..tokens.len() - 1]);
                Self {
                    decoder_input: input,
                    targets: tokens.into_iter().enumerate().collect(),
                }
            }
        }
    }

    fn onehot(&self, n_words: usize) -> Mat {
        let mut m = Mat::zeros((self.decoder_input.len(), n_words));
        for &(row, id) in &self.targets {
            m[[row, id]] = 1.0;
        }
        m
    }
}

/// Energies `Dec_q(embed(input), Enc_v(project(v[s..e]) + pos)) W_v + b_v` on the tape.
pub fn reconstruct(
    fwd: &mut Forward<'_>,
    projected_video: Var,
    proposal: Proposal,
    decoder_input: &[usize],
) -> Result<Var> {
    let n_frames = fwd.graph.shape(projected_video).0;
    if proposal.is_empty() || proposal.end > n_frames {
        return Err(Error::InvalidProposal {
            start: proposal.start,
            end: proposal.end,
        });
    }
    let frames = fwd.positioned_rows(projected_video, proposal.start..proposal.end);
    let memory = fwd.encode(&frames, Role::VideoEncoder)?;
    let q = fwd.embed_tokens(decoder_input, Some(PAD))?;
    let f = fwd.decode(&q, &memory, Role::QueryDecoder)?;
    Ok(fwd.energies(f.var))
}

/// `-sum log softmax(energies)[row, id]` over the target cells, on the tape.
pub fn reconstruction_loss_var(graph: &mut Graph, energies: Var, target: &ReconTarget) -> Result<Var> {
    let (rows, n_words) = graph.shape(energies);
    if target.targets.is_empty() {
        return Err(Error::Empty("masked positions"));
    }
    if rows != target.decoder_input.len() {
        return Err(Error::Shape {
            context: "reconstruction_loss",
            detail: format!("{rows} energy rows for {} tokens", target.decoder_input.len()),
        });
    }
    if let Some(&(r, id)) = target.targets.iter().find(|(r, id)| *r >= rows || *id >= n_words) {
        return Err(Error::Shape {
            context: "reconstruction_loss",
            detail: format!("target ({r}, {id}) outside {rows}x{n_words} energies"),
        });
    }
    let logp = graph.log_softmax(energies);
    let picked = graph.dot_const(logp, Arc::new(target.onehot(n_words)));
    Ok(graph.scale(picked, -1.0))
}

/// Pre-softmax vocabulary scores, one row per query position.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGrid {
    pub energies: Mat,
}

/// Value-level reconstruction from the raw frames of one proposal.
pub fn reconstruct_energies(
    model: &Model,
    masked: &MaskedQuery,
    proposal_features: &Mat,
) -> Result<EnergyGrid> {
    if proposal_features.nrows() == 0 {
        return Err(Error::Empty("proposal frames"));
    }
    let mut fwd = Forward::new(model);
    let projected = fwd.project_video(proposal_features)?;
    let whole = Proposal::new(0, proposal_features.nrows())?;
    let e = reconstruct(&mut fwd, projected, whole, &masked.masked_tokens)?;
    Ok(EnergyGrid {
        energies: fwd.graph.value(e).clone(),
    })
}

/// Masked-position negative log-likelihood of `energies`.
pub fn reconstruction_loss(energies: &EnergyGrid, masked: &MaskedQuery) -> Result<f64> {
    let mut g = Graph::new();
    let e = g.constant(energies.energies.clone());
    let target = ReconTarget::new(masked, RecObjective::Masked);
    let loss = reconstruction_loss_var(&mut g, e, &target)?;
    Ok(g.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn masked(tokens: Vec<usize>, positions: Vec<usize>) -> MaskedQuery {
        let originals = positions.iter().map(|&p| tokens[p]).collect();
        let mut masked_tokens = tokens;
        for &p in &positions {
            masked_tokens[p] = MASK;
        }
        MaskedQuery {
            masked_tokens,
            positions,
            originals,
        }
    }

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = mask_query(&[7], &[false], 1.0 / 3.0, 4.0, &mut rng).unwrap();
        assert_eq!(m.positions, vec![0]);
        assert_eq!(m.masked_tokens, vec![MASK]);
        let ids: Vec<usize> = (4..13).collect();
        let m = mask_query(&ids, &[false; 9], 1.0 / 3.0, 4.0, &mut rng).unwrap();
        assert_eq!(m.positions.len(), 3);
        for (i, &t) in m.masked_tokens.iter().enumerate() {
            assert_eq!(t == MASK, m.positions.contains(&i));
        }
        assert_eq!(m.original_tokens(), ids);
    }

    #[test]
    fn masking_is_seeded() {
        let ids: Vec<usize> = (4..16).collect();
        let imp: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        let a = mask_query(&ids, &imp, 0.33, 4.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = mask_query(&ids, &imp, 0.33, 4.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn important_tokens_masked_four_times_as_often() {
        // Monte-Carlo: 10 tokens, 5 important, one mask per draw (fraction 0.1)
        let ids: Vec<usize> = (4..14).collect();
        let imp: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 10_000;
        let mut important_hits = 0usize;
        for _ in 0..draws {
            let m = mask_query(&ids, &imp, 0.1, 4.0, &mut rng).unwrap();
            if imp[m.positions[0]] {
                important_hits += 1;
            }
        }
        // P(important) = 5*4 / (5*4 + 5) = 0.8, i.e. 4x the filler rate
        let p = 0.8;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        let observed = important_hits as f64 / draws as f64;
        assert!((observed - p).abs() < 3.0 * se, "observed {observed}");
    }

    #[test]
    fn recon_targets_per_objective() {
        let m = masked(vec![4, 5, 6], vec![1]);
        let t = ReconTarget::new(&m, RecObjective::Masked);
        assert_eq!(t.decoder_input, vec![4, MASK, 6]);
        assert_eq!(t.targets, vec![(1, 5)]);
        let t = ReconTarget::new(&m, RecObjective::AllPositions);
        assert_eq!(t.targets, vec![(0, 4), (1, 5), (2, 6)]);
        let t = ReconTarget::new(&m, RecObjective::Autoregressive);
        assert_eq!(t.decoder_input, vec![BOS, 4, 5]);
        assert_eq!(t.targets, vec![(0, 4), (1, 5), (2, 6)]);
    }

    #[test]
    fn loss_examples() {
        let m = masked(vec![4, 5, 6, 7], vec![1, 3]);
        let uniform = EnergyGrid {
            energies: Mat::zeros((4, 100)),
        };
        let l = reconstruction_loss(&uniform, &m).unwrap();
        assert!((l - 2.0 * 100f64.ln()).abs() < 1e-12);
        assert!((l - 9.2103).abs() < 1e-4);

        let m = masked(vec![4, 5], vec![0]);
        let mut e = Mat::zeros((2, 10));
        e[[0, 4]] = 1e3;
        let l = reconstruction_loss(&EnergyGrid { energies: e }, &m).unwrap();
        assert!((0.0..1e-12).contains(&l));
    }

    #[test]
    fn loss_matches_log_sum_exp_oracle_and_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = Mat::from_shape_fn((3, 10), |_| rng.random_range(-3.0..3.0));
        let m = masked(vec![4, 5, 6], vec![0, 2]);
        let got = reconstruction_loss(&EnergyGrid { energies: e.clone() }, &m).unwrap();
        let mut oracle = 0.0;
        for (&row, &id) in m.positions.iter().zip(&m.originals) {
            let lse = e.row(row).iter().map(|v| v.exp()).sum::<f64>().ln();
            oracle += lse - e[[row, id]];
        }
        assert!((got - oracle).abs() / oracle < 1e-10);

        let mut shifted = e.clone();
        shifted.row_mut(2).mapv_inplace(|v| v + 17.0);
        let again = reconstruction_loss(&EnergyGrid { energies: shifted }, &m).unwrap();
        assert!((again - got).abs() < 1e-8);
    }

    #[test]
    fn energy_gradient_is_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = Mat::from_shape_fn((3, 6), |_| rng.random_range(-2.0..2.0));
        let m = masked(vec![4, 5, 2], vec![1]);
        let target = ReconTarget::new(&m, RecObjective::Masked);
        let mut g = Graph::new();
        let ev = g.param(0, &e);
        let loss = reconstruction_loss_var(&mut g, ev, &target).unwrap();
        let grad = g.backward(loss).grads[&0].clone();
        let eval = |x: &Mat| reconstruction_loss(&EnergyGrid { energies: x.clone() }, &m).unwrap();
        for r in 0..3 {
            let z: f64 = e.row(r).iter().map(|v| v.exp()).sum();
            for c in 0..6 {
                let mut plus = e.clone();
                plus[[r, c]] += 1e-6;
                let mut minus = e.clone();
                minus[[r, c]] -= 1e-6;
                let fd = (eval(&plus) - eval(&minus)) / 2e-6;
                let expected = if r == 1 {
                    e[[r, c]].exp() / z - if c == 5 { 1.0 } else { 0.0 }
                } else {
                    0.0
                };
                assert!((grad[[r, c]] - expected).abs() < 1e-12);
                assert!((fd - expected).abs() < 1e-7);
            }
        }
    }

    fn tiny_model() -> Model {
        Model::init(
            ModelDims {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                ffn_dim: 16,
                n_words: 100,
                n_ratios: 2,
                feature_dim: 4,
                share_encoder_decoder: true,
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn energies_shape_zero_head_and_sensitivity() {
        let mut model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames_a = Mat::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let frames_b = Mat::from_shape_fn((7, 4), |_| rng.random_range(-1.0..1.0));
        let m = masked(vec![10, 11, 12, 13, 14, 15], vec![2, 4]);
        let a = reconstruct_energies(&model, &m, &frames_a).unwrap();
        assert_eq!(a.energies.dim(), (6, 100));
        let b = reconstruct_energies(&model, &m, &frames_b).unwrap();
        assert!(m
            .positions
            .iter()
            .any(|&p| (0..100).any(|c| a.energies[[p, c]] != b.energies[[p, c]])));
        assert!(reconstruct_energies(&model, &m, &Mat::zeros((0, 4))).is_err());

        let (w, bias) = model.vocab_head_slots();
        model.params_mut().tensor_mut(w).fill(0.0);
        model.params_mut().tensor_mut(bias).fill(0.0);
        let z = reconstruct_energies(&model, &m, &frames_a).unwrap();
        assert!(z.energies.iter().all(|&v| v == 0.0));
    }
}
