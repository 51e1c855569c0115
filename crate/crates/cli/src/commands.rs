use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use scn_core::backbone::Model;
use scn_core::checkpoint::{load_checkpoint, save_checkpoint};
use scn_core::config::{ablation_config, EvalSplit, RunConfig, Variant};
use scn_core::corpus::{generate_synthetic_corpus, read_dataset, write_dataset};
use scn_core::dataset::{prepare, EvalItem, Prepared};
use scn_core::evaluation::{
    baseline_inputs, evaluate, metric_name, metric_table, random_baseline, report_examples,
    write_metric_summary, write_predictions, ReportOptions,
};
use scn_core::train::{train, write_metrics};

/// Creates `<run_root>/<timestamp>-seed<seed>-<command>` and echoes the config into it.
pub fn run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-seed{}-{command}", cfg.seed);
    let mut dir = cfg.run_root.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = cfg.run_root.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(dir)
}

pub fn gen_data(cfg: &RunConfig) -> Result<String> {
    let dir = run_dir(cfg, "gen-data")?;
    let corpus = generate_synthetic_corpus(&cfg.synth())?;
    fs::create_dir_all(&cfg.data_dir).with_context(|| format!("creating {}", cfg.data_dir.display()))?;
    write_dataset(&cfg.features_path(), &cfg.annotations_path(), &corpus.videos, &corpus.queries)?;
    Ok(format!(
        "run {}\nwrote {} videos to {} and {}",
        dir.display(),
        corpus.videos.len(),
        cfg.features_path().display(),
        cfg.annotations_path().display()
    ))
}

fn load(cfg: &RunConfig) -> Result<Prepared> {
    let (videos, queries) = read_dataset(&cfg.features_path(), &cfg.annotations_path(), &cfg.limits())
        .with_context(|| format!("reading dataset from {} (run gen-data first?)", cfg.data_dir.display()))?;
    Ok(prepare(&videos, &queries, cfg)?)
}

fn split(p: &Prepared, which: EvalSplit) -> Result<&[EvalItem]> {
    let items = match which {
        EvalSplit::Val => &p.val,
        EvalSplit::Test => &p.test,
    };
    if items.is_empty() {
        bail!("the {which:?} split is empty; raise val_fraction or test_fraction");
    }
    Ok(items)
}

pub struct Trained {
    pub best_score: Option<f64>,
    pub best_epoch: usize,
    pub checkpoint: PathBuf,
}

/// Trains one model, writing `metrics.csv` and `checkpoint.scnc` into `dir`.
pub fn train_into(cfg: &RunConfig, dir: &Path) -> Result<Trained> {
    let prepared = load(cfg)?;
    let model = Model::init(cfg.model_dims(prepared.vocab.len()), cfg.seed)?;
    let out = train(model, &prepared.train, &prepared.val, cfg)?;
    write_metrics(&dir.join("metrics.csv"), &out.state.history, &out.validation, cfg)?;
    let checkpoint = dir.join("checkpoint.scnc");
    save_checkpoint(&checkpoint, cfg, &prepared.vocab, &out.best_model)?;
    Ok(Trained {
        best_score: out.best_score,
        best_epoch: out.best_epoch,
        checkpoint,
    })
}

pub fn train_cmd(cfg: &RunConfig) -> Result<String> {
    let dir = run_dir(cfg, "train")?;
    let t = train_into(cfg, &dir)?;
    let best = t
        .best_score
        .map_or("n/a (no validation split)".to_string(), |s| format!("{s:.4} at epoch {}", t.best_epoch));
    Ok(format!(
        "run {}\nbest validation R@1,IoU=0.5: {best}\ncheckpoint {}",
        dir.display(),
        t.checkpoint.display()
    ))
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&Path> {
    match &cfg.checkpoint {
        Some(p) if p.exists() => Ok(p),
        Some(p) => bail!("checkpoint {} does not exist", p.display()),
        None => bail!("no checkpoint given; pass --checkpoint=PATH"),
    }
}

/// Loads the checkpoint and the split it should be scored on. The data split and the
/// vocabulary come from the checkpoint's own config.
fn load_for_eval(cfg: &RunConfig) -> Result<(scn_core::checkpoint::Checkpoint, Vec<EvalItem>)> {
    let ck = load_checkpoint(checkpoint_path(cfg)?)?;
    let data_cfg = RunConfig {
        data_dir: cfg.data_dir.clone(),
        ..ck.config.clone()
    };
    let prepared = load(&data_cfg)?;
    if prepared.vocab != ck.vocab {
        bail!("dataset in {} differs from the one the checkpoint was trained on", cfg.data_dir.display());
    }
    let items = split(&prepared, cfg.eval_split)?.to_vec();
    Ok((ck, items))
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<String> {
    let (ck, items) = load_for_eval(cfg)?;
    let dir = run_dir(cfg, "eval")?;
    let max_n = cfg.eval_n.iter().copied().max().unwrap_or(1);
    let records = evaluate(&ck.model, &items, &ck.config.ratios, max_n, ck.config.nms_threshold)?;
    let table = metric_table(&records, &cfg.eval_n, &cfg.eval_m)?;
    write_metric_summary(&dir.join("metrics.csv"), &table)?;
    write_predictions(&dir.join("predictions.jsonl"), &records)?;
    let mut out = format!("run {}\n{} queries\n", dir.display(), records.len());
    let inputs = baseline_inputs(&items);
    for (n, m, v) in &table {
        let base = random_baseline(&inputs, &ck.config.ratios, *n, *m, cfg.seed, cfg.baseline_trials)?;
        let _ = writeln!(out, "{:<14} {v:.4}  (random {base:.4})", metric_name(*n, *m));
    }
    Ok(out)
}

pub fn report_cmd(cfg: &RunConfig) -> Result<String> {
    let (ck, items) = load_for_eval(cfg)?;
    let dir = run_dir(cfg, "report")?;
    let options = ReportOptions {
        ratios: ck.config.ratios.clone(),
        nms_threshold: ck.config.nms_threshold,
        mask_fraction: ck.config.mask_fraction,
        w_imp: ck.config.w_imp,
        seed: cfg.seed,
    };
    let path = dir.join("report.jsonl");
    let lines = report_examples(&ck.model, &ck.vocab, &items, &options, Some(&path))?;
    Ok(format!("wrote {} report lines to {}", lines.len(), path.display()))
}

/// Trains every variant with the shared seed and tabulates test-split recall.
pub fn ablate_cmd(cfg: &RunConfig) -> Result<String> {
    let dir = run_dir(cfg, "ablate")?;
    let max_n = cfg.eval_n.iter().copied().max().unwrap_or(1);
    let mut csv = String::from("variant");
    for &n in &cfg.eval_n {
        for &m in &cfg.eval_m {
            let _ = write!(csv, ",\"{}\"", metric_name(n, m));
        }
    }
    csv.push('\n');
    for variant in Variant::ALL {
        let vcfg = ablation_config(cfg, variant);
        let vdir = dir.join(variant.name());
        fs::create_dir_all(&vdir)?;
        fs::write(vdir.join("config.txt"), vcfg.to_text())?;
        let trained = train_into(&vcfg, &vdir)?;
        let ck = load_checkpoint(&trained.checkpoint)?;
        let prepared = load(&vcfg)?;
        let items = split(&prepared, cfg.eval_split)?;
        let records = evaluate(&ck.model, items, &vcfg.ratios, max_n, vcfg.nms_threshold)?;
        let table = metric_table(&records, &cfg.eval_n, &cfg.eval_m)?;
        csv.push_str(variant.name());
        for (_, _, v) in &table {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    let path = dir.join("ablation.csv");
    fs::write(&path, &csv)?;
    Ok(format!("run {}\n{csv}", dir.display()))
}
