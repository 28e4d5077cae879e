//! The training loop: seeded window sampling, warmup+cosine schedule, JSONL
//! logging, best/final checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flowencode::FlowConfig;
use crate::nn::Adam;
use crate::policymodel::{
    load_checkpoint, save_checkpoint, CheckpointMeta, ModelConfig, PolicyModel, StageTag,
};
use crate::rng::stream;

use super::{build_window, compute_batch_loss, Stage, TrainConfig, TrainEpisode, Window};

#[derive(Debug, Clone)]
pub enum InitFrom {
    Fresh,
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub epoch_mean_total: Vec<f64>,
    /// Per-step totals for the first 100 steps; the determinism harness
    /// compares these bit-for-bit.
    pub step_loss_trace: Vec<f64>,
}

/// Linear warmup over warmup_epochs, then cosine decay to
/// base_lr * min_lr_scale.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warm = (cfg.warmup_epochs * steps_per_epoch).max(1);
    if step < warm {
        return cfg.base_lr * (step + 1) as f64 / warm as f64;
    }
    let total = (cfg.epochs * steps_per_epoch).max(warm + 1);
    let min_lr = cfg.base_lr * cfg.min_lr_scale;
    let progress = (step - warm) as f64 / (total - warm) as f64;
    let progress = progress.clamp(0.0, 1.0);
    min_lr + 0.5 * (cfg.base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Serialize)]
struct LogRecord<'a> {
    step: usize,
    epoch: usize,
    lr: f64,
    #[serde(flatten)]
    loss: &'a super::LossReport,
    wall_ms: f64,
}

fn validate_dataset(dataset: &[TrainEpisode], cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Stage("empty training dataset".into()));
    }
    for (i, ep) in dataset.iter().enumerate() {
        if ep.len() < 2 {
            return Err(Error::Stage(format!("episode {i} has fewer than 2 frames")));
        }
        if ep.flows.ncols() != model_cfg.d {
            return Err(Error::Stage(format!(
                "episode {i} flow width {} != model d {}",
                ep.flows.ncols(),
                model_cfg.d
            )));
        }
        match cfg.stage {
            Stage::Pretrain => {
                if ep.actions.is_some() {
                    return Err(Error::Stage(format!(
                        "episode {i} carries actions; pretraining consumes action-free source data"
                    )));
                }
            }
            Stage::Finetune => {
                if ep.actions.is_none() || ep.states.is_none() {
                    return Err(Error::Stage(format!(
                        "episode {i} lacks actions/states; finetuning needs target demonstrations"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Run one training stage to completion. Deterministic given (dataset order,
/// config, seed): windows come from a seeded stream and every reduction is
/// ordered.
pub fn run_stage(
    dataset: &[TrainEpisode],
    model_cfg: &ModelConfig,
    flow_cfg: &FlowConfig,
    cfg: &TrainConfig,
    init: InitFrom,
    out_dir: &Path,
) -> Result<(PolicyModel<f32>, StageResult)> {
    validate_dataset(dataset, cfg, model_cfg)?;
    std::fs::create_dir_all(out_dir)?;

    let mut model: PolicyModel<f32> = match &init {
        InitFrom::Fresh => PolicyModel::new(model_cfg.clone())?,
        InitFrom::Checkpoint(path) => {
            let (m, meta) = load_checkpoint(path)?;
            if meta.model != *model_cfg {
                return Err(Error::VersionMismatch(format!(
                    "checkpoint model config does not match run config ({})",
                    path.display()
                )));
            }
            if meta.flow != *flow_cfg {
                return Err(Error::VersionMismatch(format!(
                    "checkpoint flow config does not match run config ({})",
                    path.display()
                )));
            }
            m
        }
    };

    let stage_tag = match cfg.stage {
        Stage::Pretrain => StageTag::Pretrained,
        Stage::Finetune => StageTag::Finetuned,
    };
    let meta = CheckpointMeta::new(model_cfg.clone(), flow_cfg.clone(), stage_tag);

    let n_windows = dataset.len() * cfg.windows_per_episode.max(1);
    let steps_per_epoch = n_windows.div_ceil(cfg.batch_size).max(1);
    let mut opt = Adam::new(&model.params, cfg.beta1, cfg.beta2);
    let mut rng = stream("trainer/run", &[cfg.seed, cfg.stage as u64]);

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::fs::File::create(&log_path)?;
    let best_path = out_dir.join("best.ckpt");
    let final_path = out_dir.join("final.ckpt");

    let mut step = 0usize;
    let mut best = f64::INFINITY;
    let mut epoch_mean_total = Vec::new();
    let mut step_loss_trace = Vec::new();
    let t0 = Instant::now();

    for epoch in 0..cfg.epochs {
        let mut anchors: Vec<(usize, usize)> = Vec::with_capacity(n_windows);
        for (ei, ep) in dataset.iter().enumerate() {
            for _ in 0..cfg.windows_per_episode.max(1) {
                anchors.push((ei, rng.random_range(0..ep.len())));
            }
        }
        anchors.shuffle(&mut rng);

        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0usize;
        for (batch_id, chunk) in anchors.chunks(cfg.batch_size).enumerate() {
            let mut windows: Vec<Window<f32>> = Vec::with_capacity(chunk.len());
            let mut outs = Vec::with_capacity(chunk.len());
            let mut caches = Vec::with_capacity(chunk.len());
            for &(ei, anchor) in chunk {
                let w = build_window::<f32>(&dataset[ei], anchor, model_cfg)?;
                let (o, c) = model.forward_cached(w.input.clone())?;
                outs.push(o);
                caches.push(c);
                windows.push(w);
            }
            let batch = compute_batch_loss(&outs, &windows, cfg, model_cfg, true)?;
            if !batch.report.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} batch {batch_id} (windows {chunk:?})"
                )));
            }
            model.params.zero_grads();
            for (cache, g) in caches.iter().zip(batch.grads.as_ref().unwrap()) {
                model.backward(cache, g);
            }
            if !model.params.grads_are_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradients at epoch {epoch} batch {batch_id} (windows {chunk:?})"
                )));
            }
            let lr = lr_at(step, steps_per_epoch, cfg);
            opt.step(&mut model.params, lr);

            let record = LogRecord {
                step,
                epoch,
                lr,
                loss: &batch.report,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            };
            writeln!(log, "{}", serde_json::to_string(&record)?)?;
            if step_loss_trace.len() < 100 {
                step_loss_trace.push(batch.report.total);
            }
            epoch_sum += batch.report.total;
            epoch_batches += 1;
            step += 1;
        }

        let mean = epoch_sum / epoch_batches.max(1) as f64;
        epoch_mean_total.push(mean);
        if mean < best {
            best = mean;
            save_checkpoint(&best_path, &model, &meta)?;
        }
    }

    save_checkpoint(&final_path, &model, &meta)?;
    // A stage that never improved still writes a best checkpoint.
    if !best_path.exists() {
        save_checkpoint(&best_path, &model, &meta)?;
    }
    Ok((
        model,
        StageResult {
            final_checkpoint: final_path,
            best_checkpoint: best_path,
            log_path,
            epoch_mean_total,
            step_loss_trace,
        },
    ))
}

/// Held-out Eq-3 loss over every window anchor of the given episodes.
pub fn eval_pretrain_loss(model: &PolicyModel<f32>, episodes: &[TrainEpisode], model_cfg: &ModelConfig) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for ep in episodes {
        for anchor in 0..ep.len() {
            let w = build_window::<f32>(ep, anchor, model_cfg)?;
            let out = model.forward(w.input.clone())?;
            for j in 0..model_cfg.h {
                for i in 0..model_cfg.n {
                    if !w.flow_valid[[j, i]] {
                        continue;
                    }
                    for c in 0..model_cfg.d {
                        let e = (out.pred_future_flow[[j, i, c]] - w.target_flows[[j, i, c]]) as f64;
                        sum += e * e;
                        count += 1;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Validation("no valid targets in held-out set".into()));
    }
    Ok(sum / count as f64)
}

/// The constant-predictor baseline on the same windows: mean squared
/// deviation of valid targets from their per-dimension mean.
pub fn constant_baseline(episodes: &[TrainEpisode], model_cfg: &ModelConfig) -> Result<f64> {
    let d = model_cfg.d;
    let mut mean = vec![0.0f64; d];
    let mut count = 0usize;
    let mut targets: Vec<Vec<f32>> = Vec::new();
    for ep in episodes {
        for anchor in 0..ep.len() {
            let w = build_window::<f32>(ep, anchor, model_cfg)?;
            for j in 0..model_cfg.h {
                for i in 0..model_cfg.n {
                    if !w.flow_valid[[j, i]] {
                        continue;
                    }
                    let row: Vec<f32> = (0..d).map(|c| w.target_flows[[j, i, c]]).collect();
                    for (m, v) in mean.iter_mut().zip(row.iter()) {
                        *m += *v as f64;
                    }
                    targets.push(row);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Validation("no valid targets for the baseline".into()));
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut sum = 0.0f64;
    for row in &targets {
        for (v, m) in row.iter().zip(mean.iter()) {
            let e = *v as f64 - m;
            sum += e * e;
        }
    }
    Ok(sum / (count * d) as f64)
}
