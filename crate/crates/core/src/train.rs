//! The weakly supervised training loop: select, reconstruct, reward, update.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Mat, ParamGrads};
use crate::backbone::{Forward, ForwardOptions, Model};
use crate::completion::{mask_query, reconstruct, reconstruction_loss_var, RecObjective, ReconTarget};
use crate::config::RunConfig;
use crate::corpus::TrainingScope;
use crate::dataset::{EvalItem, TrainPair};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, metric_name, metric_table};
use crate::grounding::{exploration_probability, fuse, select_top_k, Provenance, ScoreGrid};
use crate::objective::{learning_rate, multi_task_loss_var, rank_loss_var, rewards};
use crate::temporal::enumerate_candidates;

/// splitmix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed ^ tag) ^ a) ^ b))
}

/// Adam with a global gradient-norm cap.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl Adam {
    pub fn new(model: &Model, beta1: f64, beta2: f64, eps: f64, clip: f64) -> Self {
        let zeros: Vec<Mat> = model.params().iter().map(|(_, t)| Mat::zeros(t.dim())).collect();
        Self {
            beta1,
            beta2,
            eps,
            clip,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn step(&mut self, model: &mut Model, grads: &ParamGrads, lr: f64) -> f64 {
        let n_slots = model.params().len();
        let norm = (0..n_slots)
            .filter_map(|slot| grads.get(slot))
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let params = model.params_mut();
        for slot in 0..params.len() {
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            if let Some(g) = grads.get(slot) {
                m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g * scale);
                v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * (g * scale).powi(2));
            } else {
                m.mapv_inplace(|x| b1 * x);
                v.mapv_inplace(|x| b2 * x);
            }
            let w = params.tensor_mut(slot);
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                *w -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
        norm
    }
}

/// Metrics for one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub rec_loss: f64,
    pub rank_loss: f64,
    pub p: f64,
    pub random_picks: usize,
    pub refill_picks: usize,
    pub lr: f64,
}

/// Validation recall after one epoch, aligned with the configured metric grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRow {
    pub step: u64,
    pub epoch: usize,
    pub recalls: Vec<(usize, f64, f64)>,
}

pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub n_update: u64,
    pub seed: u64,
    pub history: Vec<StepMetrics>,
}

impl TrainState {
    pub fn new(model: Model, cfg: &RunConfig) -> Self {
        let optimizer = Adam::new(&model, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.grad_clip);
        Self {
            model,
            optimizer,
            n_update: 0,
            seed: cfg.seed,
            history: Vec::new(),
        }
    }
}

/// Scalars and gradients from one pair.
pub struct PairOutcome {
    pub loss: f64,
    pub rec_loss: f64,
    pub rank_loss: f64,
    pub random_picks: usize,
    pub refill_picks: usize,
    pub grads: ParamGrads,
}

/// Forward and backward for one pair under exploration probability `p`.
pub fn pair_loss(model: &Model, pair: &TrainPair, cfg: &RunConfig, p: f64, mut rng: ChaCha8Rng) -> Result<PairOutcome> {
    let options = ForwardOptions {
        dropout: cfg.dropout,
        causal_query_decoder: cfg.rec_objective == RecObjective::Autoregressive,
    };
    let dropout_rng = ChaCha8Rng::seed_from_u64(rand::Rng::random(&mut rng));
    let mut fwd = Forward::new(model).with_options(options, dropout_rng);
    let fused = fuse(&mut fwd, &pair.features, &pair.tokens)?;
    let scores = fwd.score(fused.cross_modal);
    let grid = enumerate_candidates(pair.features.nrows(), &cfg.ratios)?;
    let score_grid = ScoreGrid {
        scores: fwd.graph.value(scores).clone(),
    };
    let selection = select_top_k(&grid, &score_grid, cfg.k, p, cfg.nms_threshold, &mut rng)?;
    let masked = mask_query(&pair.tokens, &pair.importance, cfg.mask_fraction, cfg.w_imp, &mut rng)?;
    let target = ReconTarget::new(&masked, cfg.rec_objective);

    let mut recs = Vec::with_capacity(cfg.k);
    let mut rec_values = Vec::with_capacity(cfg.k);
    for pick in &selection.picks {
        let e = reconstruct(&mut fwd, fused.projected, pick.proposal, &target.decoder_input)?;
        let l = reconstruction_loss_var(&mut fwd.graph, e, &target)?;
        rec_values.push(fwd.graph.scalar(l));
        recs.push(l);
    }
    let reward = rewards(cfg.reward, &rec_values)?;
    let cells = selection.picks.iter().map(|p| (p.cell.step, p.cell.ratio)).collect();
    let confidences = fwd.graph.gather_cells(scores, cells);
    let rank = rank_loss_var(&mut fwd.graph, confidences, &reward)?;
    let total = multi_task_loss_var(&mut fwd.graph, &recs, rank, cfg.beta)?;
    let loss = fwd.graph.scalar(total);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss} on pair `{}` (tokens {:?}, {} frames, proposals {:?}, rec losses {:?})",
            pair.query_id,
            pair.tokens,
            pair.features.nrows(),
            selection.proposals(),
            rec_values
        )));
    }
    Ok(PairOutcome {
        loss,
        rec_loss: rec_values.iter().sum::<f64>() / rec_values.len() as f64,
        rank_loss: fwd.graph.scalar(rank),
        random_picks: selection.count(Provenance::Random),
        refill_picks: selection.count(Provenance::Refill),
        grads: fwd.graph.backward(total),
    })
}

/// Batch-averaged gradients for the current state without updating it.
pub fn batch_gradients(batch: &[&TrainPair], state: &TrainState, cfg: &RunConfig) -> Result<(Vec<PairOutcome>, ParamGrads, f64)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let p = exploration_probability(state.n_update, cfg.lambda1, cfg.lambda2)?;
    let outcomes: Vec<PairOutcome> = batch
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let rng = stream(state.seed, 0x54_5241_494E, state.n_update, i as u64);
            pair_loss(&state.model, pair, cfg, p, rng)
        })
        .collect::<Result<_>>()?;
    let mut grads = ParamGrads::default();
    let w = 1.0 / batch.len() as f64;
    for o in &outcomes {
        grads.accumulate(&o.grads, w);
    }
    Ok((outcomes, grads, p))
}

/// One optimizer step over `batch`. Ground truth is never read in here.
pub fn train_step(batch: &[&TrainPair], state: &mut TrainState, cfg: &RunConfig, epoch: usize) -> Result<StepMetrics> {
    let _scope = TrainingScope::enter();
    let (outcomes, grads, p) = batch_gradients(batch, state, cfg)?;
    let step = state.n_update + 1;
    let lr = learning_rate(step, cfg.lr_max, cfg.warmup)?;
    state.optimizer.step(&mut state.model, &grads, lr);
    state.n_update = step;
    let n = outcomes.len() as f64;
    let metrics = StepMetrics {
        step,
        epoch,
        loss: outcomes.iter().map(|o| o.loss).sum::<f64>() / n,
        rec_loss: outcomes.iter().map(|o| o.rec_loss).sum::<f64>() / n,
        rank_loss: outcomes.iter().map(|o| o.rank_loss).sum::<f64>() / n,
        p,
        random_picks: outcomes.iter().map(|o| o.random_picks).sum(),
        refill_picks: outcomes.iter().map(|o| o.refill_picks).sum(),
        lr,
    };
    state.history.push(metrics.clone());
    Ok(metrics)
}

pub struct TrainOutcome {
    pub state: TrainState,
    /// Parameters with the best validation `R@1,IoU=0.5` (or the initial ones).
    pub best_model: Model,
    pub best_score: Option<f64>,
    pub best_epoch: usize,
    pub validation: Vec<ValidationRow>,
}

/// Validation recall used for checkpoint selection.
pub fn selection_metric(recalls: &[(usize, f64, f64)]) -> Option<f64> {
    recalls.iter().find(|(n, m, _)| *n == 1 && (*m - 0.5).abs() < 1e-12).map(|r| r.2)
}

/// Runs `cfg.epochs` epochs of seeded shuffled mini-batches, validating after each.
pub fn train(model: Model, pairs: &[TrainPair], val: &[EvalItem], cfg: &RunConfig) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    let mut state = TrainState::new(model, cfg);
    let mut best_model = state.model.clone();
    let mut best_score = None;
    let mut best_epoch = 0;
    let mut validation = Vec::new();
    let max_n = cfg.eval_n.iter().copied().max().unwrap_or(1);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut stream(cfg.seed, 0x5348_5546, epoch as u64, 0));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            train_step(&batch, &mut state, cfg, epoch)?;
        }
        if val.is_empty() {
            continue;
        }
        let records = evaluate(&state.model, val, &cfg.ratios, max_n, cfg.nms_threshold)?;
        let recalls = metric_table(&records, &cfg.eval_n, &cfg.eval_m)?;
        let score = selection_metric(&recalls).unwrap_or(recalls[0].2);
        if best_score.is_none_or(|b| score > b) {
            best_score = Some(score);
            best_epoch = epoch;
            best_model = state.model.clone();
        }
        validation.push(ValidationRow {
            step: state.n_update,
            epoch,
            recalls,
        });
    }
    Ok(TrainOutcome {
        state,
        best_model,
        best_score,
        best_epoch,
        validation,
    })
}

/// Step rows, then one validation row per epoch with the recall columns filled.
pub fn metrics_csv(history: &[StepMetrics], validation: &[ValidationRow], cfg: &RunConfig) -> String {
    let mut s = String::from("step,epoch,loss,rec_loss,rank_loss,p,random_picks,lr");
    for &n in &cfg.eval_n {
        for &m in &cfg.eval_m {
            let _ = write!(s, ",\"{}\"", metric_name(n, m));
        }
    }
    s.push('\n');
    let blanks = ",".repeat(cfg.eval_n.len() * cfg.eval_m.len());
    let mut vi = validation.iter().peekable();
    for h in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}{blanks}",
            h.step, h.epoch, h.loss, h.rec_loss, h.rank_loss, h.p, h.random_picks, h.lr
        );
        while let Some(v) = vi.next_if(|v| v.step == h.step && v.epoch == h.epoch) {
            let _ = write!(s, "{},{},,,,,,", v.step, v.epoch);
            for (_, _, r) in &v.recalls {
                let _ = write!(s, ",{r}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn write_metrics(path: &Path, history: &[StepMetrics], validation: &[ValidationRow], cfg: &RunConfig) -> Result<()> {
    std::fs::write(path, metrics_csv(history, validation, cfg)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        use rand::Rng;
        let a: u64 = stream(1, 2, 3, 4).random();
        let b: u64 = stream(1, 2, 3, 5).random();
        let c: u64 = stream(1, 2, 3, 4).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn csv_layout() {
        let cfg = RunConfig {
            eval_n: vec![1],
            eval_m: vec![0.5],
            ..RunConfig::default()
        };
        let h = StepMetrics {
            step: 1,
            epoch: 1,
            loss: 2.0,
            rec_loss: 1.5,
            rank_loss: 0.5,
            p: 0.5,
            random_picks: 2,
            refill_picks: 0,
            lr: 1e-3,
        };
        let v = ValidationRow {
            step: 1,
            epoch: 1,
            recalls: vec![(1, 0.5, 0.25)],
        };
        let csv = metrics_csv(&[h], &[v], &cfg);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,epoch,loss,rec_loss,rank_loss,p,random_picks,lr,\"R@1,IoU=0.5\"");
        assert_eq!(lines[1], "1,1,2,1.5,0.5,0.5,2,0.001,");
        assert_eq!(lines[2], "1,1,,,,,,,0.25");
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 9));
    }
}
