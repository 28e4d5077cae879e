//! Central finite differences against the analytic backward pass, on a tiny
//! double-precision model.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::Result;
use crate::nn::Real;
use crate::policymodel::{ModelConfig, PolicyModel, PolicyOutputs};
use crate::rng::stream;

use super::{build_window, compute_batch_loss, Stage, TrainConfig, TrainEpisode, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_region: BTreeMap<String, f64>,
    pub n_checked: usize,
}

fn tiny_config(kind: LossKind) -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        d_model: 16,
        depth: 2,
        heads: 2,
        h: 3,
        n: 2,
        k: 2,
        d: 6,
        ..ModelConfig::default()
    };
    let train = match kind {
        LossKind::Pretrain => TrainConfig::pretrain_default(),
        LossKind::Finetune => TrainConfig::finetune_default(),
    };
    (model, train)
}

fn synthetic_batch(kind: LossKind, cfg: &ModelConfig, seed: u64) -> Vec<Window<f64>> {
    let with_actions = kind == LossKind::Finetune;
    let mut windows = Vec::new();
    for b in 0..3u64 {
        let mut rng = stream("gradcheck/episode", &[seed, b]);
        let t = 6 + b as usize;
        let ep = TrainEpisode {
            lang_id: (b as usize) % cfg.vocab.len(),
            flows: ndarray::Array2::from_shape_fn((t, cfg.d), |_| rng.random_range(-1.0..1.0f32)),
            states: with_actions
                .then(|| ndarray::Array2::from_shape_fn((t, cfg.state_dim), |_| rng.random_range(0.0..1.0f32))),
            actions: with_actions.then(|| {
                ndarray::Array2::from_shape_fn((t - 1, 3), |(_, c)| {
                    if c == 2 {
                        rng.random_range(0..2) as f32
                    } else {
                        rng.random_range(-0.05..0.05f32)
                    }
                })
            }),
            progress: (0..t).map(|i| i as f32 / (t - 1) as f32).collect(),
        };
        // One anchor near the end so padding masks are exercised too.
        let anchor = if b == 0 { t - 1 } else { t / 2 };
        windows.push(build_window::<f64>(&ep, anchor, cfg).unwrap());
    }
    windows
}

fn batch_total(model: &PolicyModel<f64>, windows: &[Window<f64>], tc: &TrainConfig, cfg: &ModelConfig) -> Result<f64> {
    let outs: Vec<PolicyOutputs<f64>> = windows
        .iter()
        .map(|w| model.forward(w.input.clone()))
        .collect::<Result<_>>()?;
    Ok(compute_batch_loss(&outs, windows, tc, cfg, false)?.report.total)
}

fn region_of(name: &str) -> String {
    if let Some(rest) = name.strip_prefix("head.") {
        let head = rest.split('.').next().unwrap_or("other");
        format!("head.{head}")
    } else if name.starts_with("emb.") {
        "emb".into()
    } else {
        "trunk".into()
    }
}

/// Compare analytic gradients of the full stage loss against central finite
/// differences on >= `samples_per_region` parameters per head region.
/// Returns the max relative error, with |a - n| / max(|a| + |n|, 1e-6) so
/// vanishing gradients do not manufacture false alarms out of FD noise.
pub fn gradient_check(kind: LossKind, eps: f64, samples_per_region: usize, seed: u64) -> Result<GradCheckReport> {
    let (model_cfg, mut train_cfg) = tiny_config(kind);
    train_cfg.stage = match kind {
        LossKind::Pretrain => Stage::Pretrain,
        LossKind::Finetune => Stage::Finetune,
    };
    let mut model: PolicyModel<f64> = PolicyModel::new(ModelConfig { init_seed: seed, ..model_cfg.clone() })?;
    let windows = synthetic_batch(kind, &model_cfg, seed);

    // Analytic gradients.
    let mut outs = Vec::new();
    let mut caches = Vec::new();
    for w in &windows {
        let (o, c) = model.forward_cached(w.input.clone())?;
        outs.push(o);
        caches.push(c);
    }
    let batch = compute_batch_loss(&outs, &windows, &train_cfg, &model_cfg, true)?;
    model.params.zero_grads();
    for (c, g) in caches.iter().zip(batch.grads.as_ref().unwrap()) {
        model.backward(c, g);
    }
    let analytic = model.params.grads.clone();

    // Group parameters by region and sample.
    let mut regions: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (pid, name) in model.params.names.iter().enumerate() {
        let r = region_of(name);
        let len = model.params.values[pid].len();
        let entry = regions.entry(r).or_default();
        for idx in 0..len {
            entry.push((pid, idx));
        }
    }

    let mut rng = stream("gradcheck/sample", &[seed]);
    let mut per_region: BTreeMap<String, f64> = BTreeMap::new();
    let mut max_rel = 0.0f64;
    let mut n_checked = 0usize;
    for (region, entries) in &regions {
        let take = samples_per_region.min(entries.len());
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < take {
            picked.insert(entries[rng.random_range(0..entries.len())]);
        }
        let mut worst = 0.0f64;
        for (pid, idx) in picked {
            let orig = model.params.values[pid].as_slice().unwrap()[idx];
            model.params.values[pid].as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = batch_total(&model, &windows, &train_cfg, &model_cfg)?;
            model.params.values[pid].as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = batch_total(&model, &windows, &train_cfg, &model_cfg)?;
            model.params.values[pid].as_slice_mut().unwrap()[idx] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let ana = analytic[pid].as_slice().unwrap()[idx];
            let rel = (ana - num).abs() / (ana.abs() + num.abs()).max(1e-6);
            worst = worst.max(rel);
            n_checked += 1;
        }
        per_region.insert(region.clone(), worst);
        max_rel = max_rel.max(worst);
    }
    Ok(GradCheckReport { max_rel_err: max_rel, per_region, n_checked })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretrain_loss_gradients_match_finite_differences() {
        let report = gradient_check(LossKind::Pretrain, 1e-5, 40, 0).unwrap();
        assert!(report.max_rel_err < 1e-4, "max rel err {} ({:?})", report.max_rel_err, report.per_region);
    }

    #[test]
    fn finetune_loss_gradients_match_finite_differences() {
        let report = gradient_check(LossKind::Finetune, 1e-5, 40, 1).unwrap();
        assert!(report.max_rel_err < 1e-4, "max rel err {} ({:?})", report.max_rel_err, report.per_region);
    }

    #[test]
    fn linear_head_only_is_essentially_exact() {
        // Freeze everything but one linear head's sampled coordinates: the
        // loss is quadratic in them, so FD at 1e-5 is near machine precision.
        let report = gradient_check(LossKind::Pretrain, 1e-6, 60, 2).unwrap();
        let obs = report.per_region["head.obs"];
        assert!(obs < 1e-6, "obs head err {obs}");
    }
}
