//! Run configuration: flat `key = value` text with documented defaults.
//!
//! Lines are `key = value`; `#` starts a comment; lists are comma separated and may be
//! wrapped in brackets. Values are applied in order: defaults, then the file, then
//! overrides, then the whole config is validated.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::ModelDims;
use crate::completion::RecObjective;
use crate::corpus::{DatasetLimits, SynthConfig};
use crate::error::{Error, Result};
use crate::objective::RewardRule;

/// Model variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoRand,
    NoReward,
    NoMask,
    NoShare,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoRand,
        Variant::NoReward,
        Variant::NoMask,
        Variant::NoShare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRand => "no_rand",
            Variant::NoReward => "no_reward",
            Variant::NoMask => "no_mask",
            Variant::NoShare => "no_share",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which labelled split `eval` and `report` score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // corpus
    pub n_videos: usize,
    pub feature_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub event_ratio: f64,
    pub n_patterns: usize,
    pub distractor_rate: f64,
    pub noise: f64,
    pub vocab_size: usize,
    pub max_words: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    // model
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub share_encoder_decoder: bool,
    // proposal generation
    pub ratios: Vec<f64>,
    pub k: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub nms_threshold: f64,
    // semantic completion
    pub mask_fraction: f64,
    pub w_imp: f64,
    pub rec_objective: RecObjective,
    // training
    pub beta: f64,
    pub reward: RewardRule,
    pub lr_max: f64,
    pub warmup: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub variant: Variant,
    // evaluation
    pub eval_n: Vec<usize>,
    pub eval_m: Vec<f64>,
    pub baseline_trials: usize,
    pub eval_split: EvalSplit,
    // paths
    pub data_dir: PathBuf,
    pub run_root: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_videos: 320,
            feature_dim: 16,
            min_frames: 32,
            max_frames: 64,
            event_ratio: 0.3,
            n_patterns: 6,
            distractor_rate: 0.15,
            noise: 0.5,
            vocab_size: 1000,
            max_words: 20,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed: 7,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
            share_encoder_decoder: true,
            ratios: vec![0.167, 0.25, 0.333, 0.5],
            k: 4,
            lambda1: 0.5,
            lambda2: 2000.0,
            nms_threshold: 0.55,
            mask_fraction: 1.0 / 3.0,
            w_imp: 4.0,
            rec_objective: RecObjective::Masked,
            beta: 0.1,
            reward: RewardRule::Ladder,
            lr_max: 2e-4,
            warmup: 400,
            batch_size: 16,
            epochs: 30,
            grad_clip: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            variant: Variant::Full,
            eval_n: vec![1, 5],
            eval_m: vec![0.1, 0.3, 0.5, 0.7],
            baseline_trials: 1000,
            eval_split: EvalSplit::Test,
            data_dir: PathBuf::from("data"),
            run_root: PathBuf::from("runs"),
            checkpoint: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let inner = value.trim().trim_start_matches('[').trim_end_matches(']');
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(key, format!("`{other}` is not a boolean"))),
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "n_videos" => self.n_videos = parse_value(key, v)?,
            "feature_dim" => self.feature_dim = parse_value(key, v)?,
            "min_frames" => self.min_frames = parse_value(key, v)?,
            "max_frames" => self.max_frames = parse_value(key, v)?,
            "event_ratio" => self.event_ratio = parse_value(key, v)?,
            "n_patterns" => self.n_patterns = parse_value(key, v)?,
            "distractor_rate" => self.distractor_rate = parse_value(key, v)?,
            "noise" => self.noise = parse_value(key, v)?,
            "vocab_size" => self.vocab_size = parse_value(key, v)?,
            "max_words" => self.max_words = parse_value(key, v)?,
            "val_fraction" => self.val_fraction = parse_value(key, v)?,
            "test_fraction" => self.test_fraction = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "d_model" => self.d_model = parse_value(key, v)?,
            "n_layers" => self.n_layers = parse_value(key, v)?,
            "n_heads" => self.n_heads = parse_value(key, v)?,
            "ffn_dim" => self.ffn_dim = parse_value(key, v)?,
            "dropout" => self.dropout = parse_value(key, v)?,
            "share_encoder_decoder" => self.share_encoder_decoder = parse_bool(key, v)?,
            "ratios" => self.ratios = parse_list(key, v)?,
            "k" => self.k = parse_value(key, v)?,
            "lambda1" => self.lambda1 = parse_value(key, v)?,
            "lambda2" => self.lambda2 = parse_value(key, v)?,
            "nms_threshold" => self.nms_threshold = parse_value(key, v)?,
            "mask_fraction" => self.mask_fraction = parse_value(key, v)?,
            "w_imp" => self.w_imp = parse_value(key, v)?,
            "rec_objective" => {
                self.rec_objective = match v {
                    "masked" => RecObjective::Masked,
                    "all_positions" => RecObjective::AllPositions,
                    "autoregressive" => RecObjective::Autoregressive,
                    other => {
                        return Err(Error::config(key, format!("unknown objective `{other}`")))
                    }
                }
            }
            "beta" => self.beta = parse_value(key, v)?,
            "reward" => {
                self.reward = match v {
                    "ladder" => RewardRule::Ladder,
                    "onehot" => RewardRule::OneHot,
                    other => return Err(Error::config(key, format!("unknown rule `{other}`"))),
                }
            }
            "lr_max" => self.lr_max = parse_value(key, v)?,
            "warmup" => self.warmup = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "grad_clip" => self.grad_clip = parse_value(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, v)?,
            "adam_eps" => self.adam_eps = parse_value(key, v)?,
            "variant" => self.variant = v.parse().map_err(|e: Error| Error::config(key, e.to_string()))?,
            "eval_n" => self.eval_n = parse_list(key, v)?,
            "eval_m" => self.eval_m = parse_list(key, v)?,
            "baseline_trials" => self.baseline_trials = parse_value(key, v)?,
            "eval_split" => {
                self.eval_split = match v {
                    "val" => EvalSplit::Val,
                    "test" => EvalSplit::Test,
                    other => return Err(Error::config(key, format!("unknown split `{other}`"))),
                }
            }
            "data_dir" => self.data_dir = PathBuf::from(v),
            "run_root" => self.run_root = PathBuf::from(v),
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(line, format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key in a fixed order; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("n_videos", self.n_videos.to_string());
        kv("feature_dim", self.feature_dim.to_string());
        kv("min_frames", self.min_frames.to_string());
        kv("max_frames", self.max_frames.to_string());
        kv("event_ratio", self.event_ratio.to_string());
        kv("n_patterns", self.n_patterns.to_string());
        kv("distractor_rate", self.distractor_rate.to_string());
        kv("noise", self.noise.to_string());
        kv("vocab_size", self.vocab_size.to_string());
        kv("max_words", self.max_words.to_string());
        kv("val_fraction", self.val_fraction.to_string());
        kv("test_fraction", self.test_fraction.to_string());
        kv("seed", self.seed.to_string());
        kv("d_model", self.d_model.to_string());
        kv("n_layers", self.n_layers.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("ffn_dim", self.ffn_dim.to_string());
        kv("dropout", self.dropout.to_string());
        kv("share_encoder_decoder", self.share_encoder_decoder.to_string());
        kv("ratios", join(&self.ratios));
        kv("k", self.k.to_string());
        kv("lambda1", self.lambda1.to_string());
        kv("lambda2", self.lambda2.to_string());
        kv("nms_threshold", self.nms_threshold.to_string());
        kv("mask_fraction", self.mask_fraction.to_string());
        kv("w_imp", self.w_imp.to_string());
        kv(
            "rec_objective",
            match self.rec_objective {
                RecObjective::Masked => "masked",
                RecObjective::AllPositions => "all_positions",
                RecObjective::Autoregressive => "autoregressive",
            }
            .into(),
        );
        kv("beta", self.beta.to_string());
        kv(
            "reward",
            match self.reward {
                RewardRule::Ladder => "ladder",
                RewardRule::OneHot => "onehot",
            }
            .into(),
        );
        kv("lr_max", self.lr_max.to_string());
        kv("warmup", self.warmup.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("variant", self.variant.to_string());
        kv("eval_n", join(&self.eval_n));
        kv("eval_m", join(&self.eval_m));
        kv("baseline_trials", self.baseline_trials.to_string());
        kv(
            "eval_split",
            match self.eval_split {
                EvalSplit::Val => "val",
                EvalSplit::Test => "test",
            }
            .into(),
        );
        kv("data_dir", self.data_dir.display().to_string());
        kv("run_root", self.run_root.display().to_string());
        kv(
            "checkpoint",
            self.checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        s
    }

    /// Checks every constraint, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, reason: String| Err(Error::config(key, reason));
        let in_open_unit = |x: f64| x > 0.0 && x <= 1.0;
        if self.feature_dim == 0 {
            return fail("feature_dim", "must be positive".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return fail("min_frames", "need 1 <= min_frames <= max_frames".into());
        }
        if !in_open_unit(self.event_ratio) {
            return fail("event_ratio", format!("{} outside (0, 1]", self.event_ratio));
        }
        if self.n_patterns == 0 {
            return fail("n_patterns", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return fail("distractor_rate", "outside [0, 1]".into());
        }
        if !(self.noise >= 0.0) {
            return fail("noise", "must be non-negative".into());
        }
        if self.vocab_size < 5 {
            return fail("vocab_size", "must be at least 5".into());
        }
        if self.max_words == 0 {
            return fail("max_words", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction)
            || !(0.0..1.0).contains(&self.test_fraction)
            || self.val_fraction + self.test_fraction >= 1.0
        {
            return fail("val_fraction", "split fractions must leave a training share".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model", format!("{} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 {
            return fail("n_layers", "must be positive".into());
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout", "outside [0, 1)".into());
        }
        if self.ratios.is_empty() || !self.ratios.iter().all(|&r| in_open_unit(r)) {
            return fail("ratios", "need one or more ratios in (0, 1]".into());
        }
        if self.k < 2 {
            return fail("k", "reward ladder needs K >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.lambda1) {
            return fail("lambda1", format!("{} outside [0, 1]", self.lambda1));
        }
        if !(self.lambda2 > 0.0) {
            return fail("lambda2", format!("{} must be positive", self.lambda2));
        }
        if !(0.0..1.0).contains(&self.nms_threshold) {
            return fail("nms_threshold", "outside [0, 1)".into());
        }
        if !in_open_unit(self.mask_fraction) {
            return fail("mask_fraction", "outside (0, 1]".into());
        }
        if !(self.w_imp > 0.0) {
            return fail("w_imp", "must be positive".into());
        }
        if !(self.beta >= 0.0) {
            return fail("beta", "must be non-negative".into());
        }
        if !(self.lr_max > 0.0) {
            return fail("lr_max", "must be positive".into());
        }
        if self.warmup < 1 {
            return fail("warmup", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be positive".into());
        }
        if !(self.grad_clip > 0.0) {
            return fail("grad_clip", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam_beta1", "Adam decay rates must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps", "must be positive".into());
        }
        if self.eval_n.is_empty() || self.eval_n.contains(&0) {
            return fail("eval_n", "need positive n values".into());
        }
        if self.eval_m.is_empty() || !self.eval_m.iter().all(|m| (0.0..=1.0).contains(m)) {
            return fail("eval_m", "need IoU thresholds in [0, 1]".into());
        }
        if self.baseline_trials == 0 {
            return fail("baseline_trials", "must be positive".into());
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_videos: self.n_videos,
            feature_dim: self.feature_dim,
            min_frames: self.min_frames,
            max_frames: self.max_frames,
            event_ratio: self.event_ratio,
            n_patterns: self.n_patterns,
            distractor_rate: self.distractor_rate,
            noise: self.noise,
            seed: self.seed,
            ..SynthConfig::default()
        }
    }

    pub fn limits(&self) -> DatasetLimits {
        DatasetLimits {
            max_frames: self.max_frames.max(1),
            max_words: self.max_words,
        }
    }

    pub fn model_dims(&self, n_words: usize) -> ModelDims {
        ModelDims {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            n_words,
            n_ratios: self.ratios.len(),
            feature_dim: self.feature_dim,
            share_encoder_decoder: self.share_encoder_decoder,
        }
    }

    pub fn features_path(&self) -> PathBuf {
        self.data_dir.join("features.scnf")
    }

    pub fn annotations_path(&self) -> PathBuf {
        self.data_dir.join("annotations.jsonl")
    }
}

/// Reads `path` (when given) over the defaults, then applies `overrides` in order.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Rewrites `base` into the named ablation variant.
pub fn ablation_config(base: &RunConfig, variant: Variant) -> RunConfig {
    let mut cfg = base.clone();
    cfg.variant = variant;
    match variant {
        Variant::Full => {}
        Variant::NoRand => cfg.lambda1 = 0.0,
        Variant::NoReward => cfg.reward = RewardRule::OneHot,
        Variant::NoMask => cfg.rec_objective = RecObjective::Autoregressive,
        Variant::NoShare => cfg.share_encoder_decoder = false,
    }
    cfg
}

/// Parses a variant name and applies it.
pub fn ablation_config_named(base: &RunConfig, variant: &str) -> Result<RunConfig> {
    Ok(ablation_config(base, variant.parse()?))
}
