//! Stage-1 pretraining and Stage-2 finetuning: loss decomposition, window
//! batching, the optimizer schedule, and finite-difference gradient checks.
//!
//! Losses are means over valid entries only; targets past the episode end
//! repeat the final step and are masked out. Every total is the weighted sum
//! of its components, computed in one fixed expression so the reconstruction
//! invariant holds to machine precision.

mod gradcheck;
mod run;

pub use gradcheck::{gradient_check, GradCheckReport, LossKind};
pub use run::{constant_baseline, eval_pretrain_loss, run_stage, InitFrom, StageResult};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;
use crate::policymodel::{ModelConfig, OutputGrads, PolicyInput, PolicyOutputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub min_lr_scale: f64,
    pub epochs: usize,
    pub lambda_fwd: f64,
    pub lambda_prog: f64,
    pub lambda_kl: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    /// Windows sampled per episode per epoch.
    pub windows_per_episode: usize,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            batch_size: 32,
            base_lr: 3.6e-4,
            warmup_epochs: 5,
            min_lr_scale: 1e-2,
            epochs: 30,
            lambda_fwd: 1.0,
            lambda_prog: 0.0,
            lambda_kl: 0.01,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            windows_per_episode: 4,
        }
    }

    pub fn finetune_default() -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            batch_size: 16,
            base_lr: 3.6e-4,
            warmup_epochs: 5,
            min_lr_scale: 1e-2,
            epochs: 20,
            lambda_fwd: 0.1,
            lambda_prog: 1.0,
            lambda_kl: 0.01,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            windows_per_episode: 4,
        }
    }
}

/// Per-batch loss decomposition. `total` is exactly the weighted sum of the
/// components under the stage's declared formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub l_obs: f64,
    pub l_act_smoothl1: f64,
    pub l_act_bce: f64,
    pub l_act_kl: f64,
    pub l_prog: f64,
    pub lambda_fwd: f64,
    pub lambda_prog: f64,
    pub lambda_kl: f64,
}

impl LossReport {
    /// Recompute the total from stored components with the same expression
    /// the trainer uses; the reconstruction invariant compares against this.
    pub fn reconstruct_total(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Pretrain => self.lambda_fwd * self.l_obs,
            Stage::Finetune => {
                (self.l_act_smoothl1 + self.l_act_bce + self.lambda_kl * self.l_act_kl)
                    + self.lambda_fwd * self.l_obs
                    + self.lambda_prog * self.l_prog
            }
        }
    }
}

/// A prepared training episode: flows plus whatever the domain supplies.
#[derive(Debug, Clone)]
pub struct TrainEpisode {
    pub lang_id: usize,
    /// T x d flow representations.
    pub flows: Array2<f32>,
    /// T x state_dim proprioception (target domain only).
    pub states: Option<Array2<f32>>,
    /// (T-1) x 3 actions as (dx, dy, gripper in {0,1}) (target domain only).
    pub actions: Option<Array2<f32>>,
    /// T progress labels.
    pub progress: Vec<f32>,
}

impl TrainEpisode {
    pub fn len(&self) -> usize {
        self.flows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.nrows() == 0
    }
}

/// One training window anchored at a "current" frame: model inputs plus
/// padded-and-masked targets.
#[derive(Debug, Clone)]
pub struct Window<T> {
    pub input: PolicyInput<T>,
    /// (h, n, d) future-flow targets.
    pub target_flows: Array3<T>,
    /// (h, n) validity; padded horizons contribute nothing.
    pub flow_valid: Array2<bool>,
    /// (h, k, 3) action targets as (dx, dy, gripper), when actions exist.
    pub target_actions: Option<Array3<T>>,
    /// (h, k) validity for action chunks.
    pub act_valid: Option<Array2<bool>>,
    /// (h,) progress targets.
    pub target_progress: Array1<T>,
}

/// Build the window whose latest context frame is `current`; earlier context
/// clamps to frame 0, mirroring rollout bootstrap.
pub fn build_window<T: Real>(ep: &TrainEpisode, current: usize, cfg: &ModelConfig) -> Result<Window<T>> {
    let t_len = ep.len();
    if current >= t_len {
        return Err(Error::Validation(format!("window anchor {current} out of range (T={t_len})")));
    }
    if ep.flows.ncols() != cfg.d {
        return Err(Error::Validation(format!(
            "episode flow width {} != model d {}",
            ep.flows.ncols(),
            cfg.d
        )));
    }
    let abs = |j: usize| -> usize { (current + 1 + j).saturating_sub(cfg.h).min(t_len - 1) };

    let flows = Array2::from_shape_fn((cfg.h, cfg.d), |(j, c)| T::from64(ep.flows[[abs(j), c]] as f64));
    let states = ep.states.as_ref().map(|s| {
        Array2::from_shape_fn((cfg.h, cfg.state_dim), |(j, c)| T::from64(s[[abs(j), c]] as f64))
    });

    let mut target_flows = Array3::from_elem((cfg.h, cfg.n, cfg.d), T::zero());
    let mut flow_valid = Array2::from_elem((cfg.h, cfg.n), false);
    for j in 0..cfg.h {
        for i in 0..cfg.n {
            let want = abs(j) + 1 + i;
            let idx = want.min(t_len - 1);
            flow_valid[[j, i]] = want <= t_len - 1;
            for c in 0..cfg.d {
                target_flows[[j, i, c]] = T::from64(ep.flows[[idx, c]] as f64);
            }
        }
    }

    let (target_actions, act_valid) = match &ep.actions {
        Some(actions) => {
            let mut ta = Array3::from_elem((cfg.h, cfg.k, 3), T::zero());
            let mut av = Array2::from_elem((cfg.h, cfg.k), false);
            for j in 0..cfg.h {
                for m in 0..cfg.k {
                    let want = abs(j) + m;
                    let idx = want.min(t_len.saturating_sub(2));
                    av[[j, m]] = want <= t_len.saturating_sub(2) && t_len >= 2;
                    for c in 0..3 {
                        // Arm deltas are regressed in units of the action
                        // bound so Huber/KL operate at O(1) scale.
                        let v = if c < 2 {
                            actions[[idx, c]] / crate::envsim::MAX_DELTA
                        } else {
                            actions[[idx, c]]
                        };
                        ta[[j, m, c]] = T::from64(v as f64);
                    }
                }
            }
            (Some(ta), Some(av))
        }
        None => (None, None),
    };

    let target_progress = Array1::from_shape_fn(cfg.h, |j| T::from64(ep.progress[abs(j)] as f64));

    Ok(Window {
        input: PolicyInput { lang_id: ep.lang_id, flows, states, goal: None },
        target_flows,
        flow_valid,
        target_actions,
        act_valid,
        target_progress,
    })
}

/// Batch loss with optional per-window output cotangents.
pub(crate) struct BatchLoss<T> {
    pub report: LossReport,
    pub grads: Option<Vec<OutputGrads<T>>>,
}

pub(crate) fn compute_batch_loss<T: Real>(
    outs: &[PolicyOutputs<T>],
    windows: &[Window<T>],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    with_grads: bool,
) -> Result<BatchLoss<T>> {
    if outs.len() != windows.len() || outs.is_empty() {
        return Err(Error::Validation("empty or mismatched batch".into()));
    }
    let (h, n, d, k, ad) = (model_cfg.h, model_cfg.n, model_cfg.d, model_cfg.k, model_cfg.action_dim);

    // Denominators across the whole batch.
    let n_obs: usize = windows.iter().map(|w| w.flow_valid.iter().filter(|&&v| v).count()).sum::<usize>() * d;
    if n_obs == 0 {
        return Err(Error::Validation("degenerate batch: every flow target is padding".into()));
    }
    let n_act_entries: usize = windows
        .iter()
        .filter_map(|w| w.act_valid.as_ref())
        .map(|av| av.iter().filter(|&&v| v).count())
        .sum();
    let n_prog = outs.len() * h;

    let mut grads: Vec<OutputGrads<T>> =
        if with_grads { outs.iter().map(|_| OutputGrads::zeros(model_cfg)).collect() } else { Vec::new() };

    let mut sum_obs = 0.0f64;
    let mut sum_sl1 = 0.0f64;
    let mut sum_bce = 0.0f64;
    let mut sum_kl = 0.0f64;
    let mut sum_prog = 0.0f64;

    for (b, (out, win)) in outs.iter().zip(windows.iter()).enumerate() {
        // Eq-3 style MSE on future flows.
        for j in 0..h {
            for i in 0..n {
                if !win.flow_valid[[j, i]] {
                    continue;
                }
                for c in 0..d {
                    let e = (out.pred_future_flow[[j, i, c]] - win.target_flows[[j, i, c]]).to64();
                    sum_obs += e * e;
                    if with_grads {
                        grads[b].pred_future_flow[[j, i, c]] = T::from64(2.0 * e / n_obs as f64);
                    }
                }
            }
        }
        // Action losses.
        if let (Some(ta), Some(av)) = (&win.target_actions, &win.act_valid) {
            if n_act_entries == 0 {
                continue;
            }
            let n_arm = (n_act_entries * ad) as f64;
            let n_grip = n_act_entries as f64;
            let n_kl = (n_act_entries * ad) as f64;
            for j in 0..h {
                for m in 0..k {
                    if !av[[j, m]] {
                        continue;
                    }
                    for a in 0..ad {
                        let mu = out.action_mean[[j, m, a]].to64();
                        let lv = out.action_logvar[[j, m, a]].to64();
                        let tgt = ta[[j, m, a]].to64();
                        let e = mu - tgt;
                        // Huber with beta = 1.
                        let (l, dl) = if e.abs() < 1.0 { (0.5 * e * e, e) } else { (e.abs() - 0.5, e.signum()) };
                        sum_sl1 += l;
                        // KL(N(mu, e^lv) || N(0, 1)) per dimension.
                        sum_kl += 0.5 * (mu * mu + lv.exp() - 1.0 - lv);
                        if with_grads {
                            grads[b].action_mean[[j, m, a]] =
                                T::from64(dl / n_arm + cfg.lambda_kl * mu / n_kl);
                            grads[b].action_logvar[[j, m, a]] =
                                T::from64(cfg.lambda_kl * 0.5 * (lv.exp() - 1.0) / n_kl);
                        }
                    }
                    let x = out.gripper_logit[[j, m]].to64();
                    let y = ta[[j, m, 2]].to64();
                    if y != 0.0 && y != 1.0 {
                        return Err(Error::Validation(format!("non-binary gripper target {y}")));
                    }
                    sum_bce += x.max(0.0) - x * y + (1.0 + (-x.abs()).exp()).ln();
                    if with_grads {
                        let sig = 1.0 / (1.0 + (-x).exp());
                        grads[b].gripper_logit[[j, m]] = T::from64((sig - y) / n_grip);
                    }
                }
            }
        }
        // Progress MSE over every context slot.
        for j in 0..h {
            let e = out.progress[j].to64() - win.target_progress[j].to64();
            sum_prog += e * e;
            if with_grads {
                grads[b].progress[j] = T::from64(cfg.lambda_prog * 2.0 * e / n_prog as f64);
            }
        }
    }

    let l_obs = sum_obs / n_obs as f64;
    let (l_sl1, l_bce, l_kl) = if n_act_entries > 0 {
        (
            sum_sl1 / (n_act_entries * ad) as f64,
            sum_bce / n_act_entries as f64,
            sum_kl / (n_act_entries * ad) as f64,
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    let l_prog = sum_prog / n_prog as f64;

    let mut report = LossReport {
        total: 0.0,
        l_obs,
        l_act_smoothl1: l_sl1,
        l_act_bce: l_bce,
        l_act_kl: l_kl,
        l_prog,
        lambda_fwd: cfg.lambda_fwd,
        lambda_prog: cfg.lambda_prog,
        lambda_kl: cfg.lambda_kl,
    };
    report.total = report.reconstruct_total(cfg.stage);

    // Scale flow grads by lambda_fwd for the stage total (pretrain has 1.0).
    if with_grads && cfg.lambda_fwd != 1.0 {
        let s = T::from64(cfg.lambda_fwd);
        for g in &mut grads {
            g.pred_future_flow.mapv_inplace(|v| v * s);
        }
    }

    Ok(BatchLoss { report, grads: with_grads.then_some(grads) })
}

/// Eq-3 pretraining loss: masked MSE between predicted and realized future
/// flows, averaged over valid (timestep, horizon, dim) entries.
pub fn pretrain_loss<T: Real>(
    outs: &[PolicyOutputs<T>],
    windows: &[Window<T>],
    model_cfg: &ModelConfig,
) -> Result<LossReport> {
    let cfg = TrainConfig::pretrain_default();
    Ok(compute_batch_loss(outs, windows, &cfg, model_cfg, false)?.report)
}

/// The three action-loss components (smooth L1, BCE, KL), each a mean over
/// valid entries, plus their combination smoothl1 + bce + lambda_kl * kl.
pub fn action_loss<T: Real>(
    outs: &[PolicyOutputs<T>],
    windows: &[Window<T>],
    lambda_kl: f64,
    model_cfg: &ModelConfig,
) -> Result<(f64, f64, f64, f64)> {
    if windows.iter().any(|w| w.target_actions.is_none()) {
        return Err(Error::Stage("action loss needs target-domain windows with actions".into()));
    }
    let cfg = TrainConfig { lambda_kl, ..TrainConfig::finetune_default() };
    let r = compute_batch_loss(outs, windows, &cfg, model_cfg, false)?.report;
    let combined = r.l_act_smoothl1 + r.l_act_bce + lambda_kl * r.l_act_kl;
    Ok((r.l_act_smoothl1, r.l_act_bce, r.l_act_kl, combined))
}

/// Eq-4 finetuning loss: action loss + lambda_fwd * flow MSE + lambda_prog *
/// progress MSE.
pub fn finetune_loss<T: Real>(
    outs: &[PolicyOutputs<T>],
    windows: &[Window<T>],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<LossReport> {
    if windows.iter().any(|w| w.target_actions.is_none()) {
        return Err(Error::Stage("finetune loss on a source-domain batch (missing actions)".into()));
    }
    let cfg = TrainConfig { stage: Stage::Finetune, ..cfg.clone() };
    Ok(compute_batch_loss(outs, windows, &cfg, model_cfg, false)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policymodel::PolicyModel;
    use rand::Rng;

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            depth: 1,
            heads: 2,
            h: 3,
            n: 2,
            k: 2,
            d: 4,
            ..ModelConfig::default()
        }
    }

    fn synthetic_episode(t_len: usize, with_actions: bool, seed: u64, cfg: &ModelConfig) -> TrainEpisode {
        let mut rng = crate::rng::stream("test/trainer-ep", &[seed]);
        TrainEpisode {
            lang_id: 0,
            flows: Array2::from_shape_fn((t_len, cfg.d), |_| rng.random_range(-1.0..1.0f32)),
            states: with_actions
                .then(|| Array2::from_shape_fn((t_len, cfg.state_dim), |_| rng.random_range(0.0..1.0f32))),
            actions: with_actions.then(|| {
                Array2::from_shape_fn((t_len - 1, 3), |(_, c)| {
                    if c == 2 {
                        rng.random_range(0..2) as f32
                    } else {
                        rng.random_range(-0.05..0.05f32)
                    }
                })
            }),
            progress: (0..t_len).map(|i| i as f32 / (t_len - 1) as f32).collect(),
        }
    }

    fn outputs_equal_targets(w: &Window<f64>, cfg: &ModelConfig) -> PolicyOutputs<f64> {
        PolicyOutputs {
            pred_future_flow: w.target_flows.clone(),
            action_mean: Array3::from_shape_fn((cfg.h, cfg.k, cfg.action_dim), |(j, m, a)| {
                w.target_actions.as_ref().map(|t| t[[j, m, a]]).unwrap_or(0.0)
            }),
            action_logvar: Array3::zeros((cfg.h, cfg.k, cfg.action_dim)),
            gripper_logit: Array2::from_shape_fn((cfg.h, cfg.k), |(j, m)| {
                // +-30 logits: BCE ~ 1e-13.
                w.target_actions.as_ref().map(|t| if t[[j, m, 2]] > 0.5 { 30.0 } else { -30.0 }).unwrap_or(0.0)
            }),
            progress: w.target_progress.clone(),
        }
    }

    #[test]
    fn perfect_predictions_give_zero_pretrain_loss() {
        let cfg = tiny_model_cfg();
        let ep = synthetic_episode(8, false, 0, &cfg);
        let w: Window<f64> = build_window(&ep, 5, &cfg).unwrap();
        let out = outputs_equal_targets(&w, &cfg);
        let r = pretrain_loss(&[out], &[w], &cfg).unwrap();
        assert_eq!(r.l_obs, 0.0);
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn scalar_squared_error_case() {
        // d=1, n=1: pred 0, target 2 -> 4.0.
        let cfg = ModelConfig { d_model: 16, depth: 1, heads: 2, h: 1, n: 1, k: 1, d: 1, ..ModelConfig::default() };
        let ep = TrainEpisode {
            lang_id: 0,
            flows: Array2::from_shape_vec((2, 1), vec![0.0, 2.0]).unwrap(),
            states: None,
            actions: None,
            progress: vec![0.0, 1.0],
        };
        let w: Window<f64> = build_window(&ep, 0, &cfg).unwrap();
        assert!(w.flow_valid[[0, 0]]);
        assert_eq!(w.target_flows[[0, 0, 0]], 2.0);
        let out = PolicyOutputs {
            pred_future_flow: Array3::zeros((1, 1, 1)),
            action_mean: Array3::zeros((1, 1, 2)),
            action_logvar: Array3::zeros((1, 1, 2)),
            gripper_logit: Array2::zeros((1, 1)),
            progress: Array1::from_elem(1, 0.0),
        };
        let r = pretrain_loss(&[out], &[w], &cfg).unwrap();
        assert_eq!(r.l_obs, 4.0);
    }

    #[test]
    fn all_padding_is_degenerate() {
        let cfg = tiny_model_cfg();
        let ep = synthetic_episode(8, false, 1, &cfg);
        let mut w: Window<f64> = build_window(&ep, 7, &cfg).unwrap();
        w.flow_valid.fill(false);
        let out = outputs_equal_targets(&w, &cfg);
        assert!(pretrain_loss(&[out], &[w], &cfg).is_err());
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let cfg = tiny_model_cfg();
        let ep = synthetic_episode(10, true, 2, &cfg);
        let w: Window<f64> = build_window(&ep, 6, &cfg).unwrap();
        let mut out = outputs_equal_targets(&w, &cfg);
        out.gripper_logit.fill(0.0);
        let (_, bce, _, _) = action_loss(&[out], &[w], 0.01, &cfg).unwrap();
        assert!((bce - std::f64::consts::LN_2).abs() < 1e-12, "bce {bce}");
    }

    #[test]
    fn kl_closed_form_with_zero_logvar() {
        let cfg = tiny_model_cfg();
        let ep = synthetic_episode(10, true, 3, &cfg);
        let w: Window<f64> = build_window(&ep, 6, &cfg).unwrap();
        let out = outputs_equal_targets(&w, &cfg);
        let (sl1, _, kl, _) = action_loss(&[out.clone()], &[w.clone()], 0.01, &cfg).unwrap();
        assert_eq!(sl1, 0.0);
        // mean == target, logvar == 0: KL per entry = target^2 / 2.
        let (av, ta) = (w.act_valid.as_ref().unwrap(), w.target_actions.as_ref().unwrap());
        let mut expect = 0.0;
        let mut count = 0;
        for j in 0..cfg.h {
            for m in 0..cfg.k {
                if av[[j, m]] {
                    for a in 0..cfg.action_dim {
                        expect += ta[[j, m, a]] * ta[[j, m, a]] / 2.0;
                        count += 1;
                    }
                }
            }
        }
        assert!((kl - expect / count as f64).abs() < 1e-12);
    }

    #[test]
    fn lambda_zeroing_reduces_finetune_to_action_loss() {
        let cfg = tiny_model_cfg();
        let ep = synthetic_episode(9, true, 4, &cfg);
        let w: Window<f64> = build_window(&ep, 5, &cfg).unwrap();
        let mut rng = crate::rng::stream("test/rand-out", &[0]);
        let out = PolicyOutputs {
            pred_future_flow: Array3::from_shape_fn((cfg.h, cfg.n, cfg.d), |_| rng.random_range(-1.0..1.0)),
            action_mean: Array3::from_shape_fn((cfg.h, cfg.k, 2), |_| rng.random_range(-0.1..0.1)),
            action_logvar: Array3::from_shape_fn((cfg.h, cfg.k, 2), |_| rng.random_range(-0.5..0.5)),
            gripper_logit: Array2::from_shape_fn((cfg.h, cfg.k), |_| rng.random_range(-2.0..2.0)),
            progress: Array1::from_shape_fn(cfg.h, |_| rng.random_range(0.01..0.99)),
        };
        let tc = TrainConfig { lambda_fwd: 0.0, lambda_prog: 0.0, ..TrainConfig::finetune_default() };
        let r = finetune_loss(&[out.clone()], &[w.clone()], &tc, &cfg).unwrap();
        let (_, _, _, combined) = action_loss(&[out], &[w], tc.lambda_kl, &cfg).unwrap();
        assert_eq!(r.total, combined);
    }

    #[test]
    fn source_batch_in_finetune_is_stage_error() {
        let cfg = tiny_model_cfg();
        let ep = synthetic_episode(8, false, 5, &cfg);
        let w: Window<f64> = build_window(&ep, 4, &cfg).unwrap();
        let out = outputs_equal_targets(&w, &cfg);
        match finetune_loss(&[out], &[w], &TrainConfig::finetune_default(), &cfg) {
            Err(Error::Stage(_)) => {}
            other => panic!("expected stage error, got {other:?}"),
        }
    }

    /// Independent elementwise-loop oracle for the full Eq-4 loss.
    fn loop_oracle(outs: &[PolicyOutputs<f64>], ws: &[Window<f64>], tc: &TrainConfig, cfg: &ModelConfig) -> LossReport {
        let (mut so, mut ss, mut sb, mut sk, mut sp) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let (mut no, mut na, mut np) = (0usize, 0usize, 0usize);
        for (out, w) in outs.iter().zip(ws) {
            for j in 0..cfg.h {
                for i in 0..cfg.n {
                    if w.flow_valid[[j, i]] {
                        for c in 0..cfg.d {
                            let e = out.pred_future_flow[[j, i, c]] - w.target_flows[[j, i, c]];
                            so += e * e;
                            no += 1;
                        }
                    }
                }
                if let (Some(ta), Some(av)) = (&w.target_actions, &w.act_valid) {
                    for m in 0..cfg.k {
                        if av[[j, m]] {
                            na += 1;
                            for a in 0..2 {
                                let e = out.action_mean[[j, m, a]] - ta[[j, m, a]];
                                ss += if e.abs() < 1.0 { 0.5 * e * e } else { e.abs() - 0.5 };
                                let (mu, lv) = (out.action_mean[[j, m, a]], out.action_logvar[[j, m, a]]);
                                sk += 0.5 * (mu * mu + lv.exp() - 1.0 - lv);
                            }
                            let (x, y) = (out.gripper_logit[[j, m]], ta[[j, m, 2]]);
                            let p = 1.0 / (1.0 + (-x).exp());
                            sb += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                        }
                    }
                }
                let e = out.progress[j] - w.target_progress[j];
                sp += e * e;
                np += 1;
            }
        }
        let l_obs = so / no as f64;
        let l_s = if na > 0 { ss / (na * 2) as f64 } else { 0.0 };
        let l_b = if na > 0 { sb / na as f64 } else { 0.0 };
        let l_k = if na > 0 { sk / (na * 2) as f64 } else { 0.0 };
        let l_p = sp / np as f64;
        LossReport {
            total: (l_s + l_b + tc.lambda_kl * l_k) + tc.lambda_fwd * l_obs + tc.lambda_prog * l_p,
            l_obs,
            l_act_smoothl1: l_s,
            l_act_bce: l_b,
            l_act_kl: l_k,
            l_prog: l_p,
            lambda_fwd: tc.lambda_fwd,
            lambda_prog: tc.lambda_prog,
            lambda_kl: tc.lambda_kl,
        }
    }

    #[test]
    fn random_batch_matches_loop_oracle() {
        let cfg = tiny_model_cfg();
        let model: PolicyModel<f64> = PolicyModel::new(cfg.clone()).unwrap();
        let mut outs = Vec::new();
        let mut ws = Vec::new();
        for seed in 0..4u64 {
            let ep = synthetic_episode(7 + seed as usize, true, 10 + seed, &cfg);
            let w: Window<f64> = build_window(&ep, 4 + seed as usize, &cfg).unwrap();
            let out = model.forward(w.input.clone()).unwrap();
            outs.push(out);
            ws.push(w);
        }
        let tc = TrainConfig::finetune_default();
        let r = finetune_loss(&outs, &ws, &tc, &cfg).unwrap();
        let o = loop_oracle(&outs, &ws, &tc, &cfg);
        assert!((r.l_obs - o.l_obs).abs() < 1e-9, "obs {} vs {}", r.l_obs, o.l_obs);
        assert!((r.l_act_smoothl1 - o.l_act_smoothl1).abs() < 1e-9);
        assert!((r.l_act_bce - o.l_act_bce).abs() < 1e-9);
        assert!((r.l_act_kl - o.l_act_kl).abs() < 1e-9);
        assert!((r.l_prog - o.l_prog).abs() < 1e-9);
        assert!((r.total - o.total).abs() < 1e-9);

        // Reconstruction invariant, exactly.
        assert_eq!(r.total, r.reconstruct_total(Stage::Finetune));

        // Affinity in lambda_fwd: three-point linearity check.
        let mut totals = Vec::new();
        for lf in [0.0, 0.5, 1.0] {
            let tcl = TrainConfig { lambda_fwd: lf, ..tc.clone() };
            totals.push(finetune_loss(&outs, &ws, &tcl, &cfg).unwrap().total);
        }
        let slope_a = totals[1] - totals[0];
        let slope_b = totals[2] - totals[1];
        assert!((slope_a - slope_b).abs() < 1e-12);
        assert!((slope_a - 0.5 * r.l_obs).abs() < 1e-12);
    }

    #[test]
    fn window_padding_masks_episode_end() {
        let cfg = tiny_model_cfg();
        let ep = synthetic_episode(5, true, 6, &cfg);
        // Anchor at the final frame: every future flow is padding.
        let w: Window<f64> = build_window(&ep, 4, &cfg).unwrap();
        for i in 0..cfg.n {
            assert!(!w.flow_valid[[cfg.h - 1, i]]);
        }
        // Padded targets repeat the final flow.
        assert_eq!(w.target_flows[[cfg.h - 1, 0, 0]], ep.flows[[4, 0]] as f64);
        // Action chunks past T-2 are masked.
        let av = w.act_valid.as_ref().unwrap();
        assert!(av[[cfg.h - 1, 0]] == false);
    }

    #[test]
    fn early_window_bootstraps_from_frame_zero() {
        let cfg = tiny_model_cfg();
        let ep = synthetic_episode(9, true, 7, &cfg);
        let w: Window<f64> = build_window(&ep, 0, &cfg).unwrap();
        // All context rows equal frame 0's flow.
        for j in 0..cfg.h {
            for c in 0..cfg.d {
                assert_eq!(w.input.flows[[j, c]], ep.flows[[0, c]] as f64);
            }
        }
    }
}
