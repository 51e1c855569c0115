//! Rewards, rank loss, the multi-task loss, and the learning-rate schedule.

use std::sync::Arc;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};

/// How reconstruction losses turn into rewards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardRule {
    /// `1, 1 - 1/(K-1), ..., 0` by ascending reconstruction loss.
    Ladder,
    /// 1 for the lowest-loss proposal, 0 elsewhere.
    OneHot,
}

/// Ascending-loss order; ties keep selection order.
fn loss_order(rec_losses: &[f64]) -> Result<Vec<usize>> {
    if let Some(bad) = rec_losses.iter().find(|l| l.is_nan()) {
        return Err(Error::NonFinite(format!("reconstruction loss {bad}")));
    }
    let mut order: Vec<usize> = (0..rec_losses.len()).collect();
    order.sort_by(|&a, &b| rec_losses[a].total_cmp(&rec_losses[b]).then(a.cmp(&b)));
    Ok(order)
}

/// Reward per proposal, aligned with `rec_losses`: rank `j` earns `1 - j/(K-1)`.
pub fn assign_rewards(rec_losses: &[f64]) -> Result<Vec<f64>> {
    let k = rec_losses.len();
    if k < 2 {
        return Err(Error::config("k", "the reward ladder needs at least two proposals"));
    }
    let order = loss_order(rec_losses)?;
    let mut rewards = vec![0.0; k];
    for (rank, &i) in order.iter().enumerate() {
        rewards[i] = (k - 1 - rank) as f64 / (k - 1) as f64;
    }
    Ok(rewards)
}

/// One-hot reward on the lowest-loss proposal.
pub fn onehot_rewards(rec_losses: &[f64]) -> Result<Vec<f64>> {
    if rec_losses.is_empty() {
        return Err(Error::Empty("reconstruction losses"));
    }
    let order = loss_order(rec_losses)?;
    let mut rewards = vec![0.0; rec_losses.len()];
    rewards[order[0]] = 1.0;
    Ok(rewards)
}

pub fn rewards(rule: RewardRule, rec_losses: &[f64]) -> Result<Vec<f64>> {
    match rule {
        RewardRule::Ladder => assign_rewards(rec_losses),
        RewardRule::OneHot => onehot_rewards(rec_losses),
    }
}

/// `(1/K) * sum_k -R_k log softmax(S)_k` on the tape; `confidences` is a `1 x K` row.
pub fn rank_loss_var(graph: &mut Graph, confidences: Var, rewards: &[f64]) -> Result<Var> {
    let (rows, k) = graph.shape(confidences);
    if rows != 1 || k != rewards.len() || k == 0 {
        return Err(Error::Shape {
            context: "rank_loss",
            detail: format!("{rows}x{k} confidences for {} rewards", rewards.len()),
        });
    }
    let logp = graph.log_softmax(confidences);
    let weights = Mat::from_shape_vec((1, k), rewards.to_vec()).expect("1 x K");
    let weighted = graph.dot_const(logp, Arc::new(weights));
    Ok(graph.scale(weighted, -1.0 / k as f64))
}

pub fn rank_loss(confidences: &[f64], rewards: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(Mat::from_shape_vec((1, confidences.len()), confidences.to_vec()).map_err(
        |_| Error::Empty("confidences"),
    )?);
    let l = rank_loss_var(&mut g, s, rewards)?;
    Ok(g.scalar(l))
}

/// `mean(rec) + beta * rank`, composed on the tape from `K` scalar losses.
pub fn multi_task_loss_var(
    graph: &mut Graph,
    rec_losses: &[Var],
    rank: Var,
    beta: f64,
) -> Result<Var> {
    if rec_losses.is_empty() {
        return Err(Error::Empty("reconstruction losses"));
    }
    let mut total = rec_losses[0];
    for &l in &rec_losses[1..] {
        total = graph.add(total, l);
    }
    let mean = graph.scale(total, 1.0 / rec_losses.len() as f64);
    let weighted = graph.scale(rank, beta);
    Ok(graph.add(mean, weighted))
}

pub fn multi_task_loss(rec_losses: &[f64], confidences: &[f64], rewards: &[f64], beta: f64) -> Result<f64> {
    if beta < 0.0 {
        return Err(Error::config("beta", "must be non-negative"));
    }
    if rec_losses.len() != confidences.len() {
        return Err(Error::Shape {
            context: "multi_task_loss",
            detail: format!("{} losses for {} confidences", rec_losses.len(), confidences.len()),
        });
    }
    let mut g = Graph::new();
    let recs: Vec<Var> = rec_losses
        .iter()
        .map(|&l| g.constant(Mat::from_elem((1, 1), l)))
        .collect();
    let s = g.constant(Mat::from_shape_vec((1, confidences.len()), confidences.to_vec()).expect("row"));
    let rank = rank_loss_var(&mut g, s, rewards)?;
    let total = multi_task_loss_var(&mut g, &recs, rank, beta)?;
    Ok(g.scalar(total))
}

/// Linear warm-up to `lr_max` at `warmup`, then inverse-square-root decay.
pub fn learning_rate(step: u64, lr_max: f64, warmup: u64) -> Result<f64> {
    if warmup < 1 {
        return Err(Error::config("warmup", "must be at least 1"));
    }
    if step < 1 {
        return Err(Error::config("step", "steps are counted from 1"));
    }
    let ratio = step as f64 / warmup as f64;
    Ok(lr_max * ratio.min(ratio.powf(-0.5)))
}
