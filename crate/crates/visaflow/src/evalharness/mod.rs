//! Chained-subtask evaluation: per sequence, five subtasks sampled with
//! replacement roll out in one un-reset world; the chain stops at the first
//! failure. SR_i is the fraction of sequences completing at least i
//! subtasks and Avg. Len. is their sum.

mod matrix;
mod report;

pub use matrix::{ablation_variants, run_ablation_matrix, run_data_scaling, AblationSpec, AblationVariant, MatrixConfig};
pub use report::{report, plot_reports};

use ndarray::Array1;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envsim::{
    check_success, oracle_ground, render, sample_eval_layout, Domain, ObjColor, RenderSize,
    SubtaskKind, SubtaskSpec, WorldState, STEP_CAP,
};
use crate::error::{Error, Result};
use crate::flowencode::{amplify, build_mask, FlowConfig, FrozenEncoder, TrackerKind};
use crate::flowtrace::{sample_points, GroundMode, OnlineTracker};
use crate::policymodel::{predict_action, CheckpointMeta, PolicyModel, RolloutContext};
use crate::rng::{derive_seed, stream};

pub const CHAIN_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_sequences: usize,
    pub seed: u64,
    /// Per-subtask step cap; reaching it fails the chain.
    pub step_cap: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_sequences: 100, seed: 0, step_cap: STEP_CAP }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub chain: Vec<(SubtaskKind, ObjColor)>,
    pub completed: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sr: [f64; CHAIN_LEN],
    pub avg_len: f64,
    pub n_sequences: usize,
    pub eval_seed: u64,
    pub per_sequence_records: Vec<SequenceRecord>,
}

impl EvalReport {
    /// Aggregate records: sr_i = |{completed >= i}| / n; avg_len = sum sr_i.
    pub fn from_records(records: Vec<SequenceRecord>, eval_seed: u64) -> Self {
        let n = records.len();
        let mut sr = [0.0; CHAIN_LEN];
        for (i, s) in sr.iter_mut().enumerate() {
            let c = records.iter().filter(|r| r.completed >= i + 1).count();
            *s = c as f64 / n as f64;
        }
        EvalReport {
            sr,
            avg_len: Self::avg_len_from_rates(&sr),
            n_sequences: n,
            eval_seed,
            per_sequence_records: records,
        }
    }

    /// The metric identity: average successful length equals the sum of the
    /// consecutive-task success rates.
    pub fn avg_len_from_rates(rates: &[f64; CHAIN_LEN]) -> f64 {
        rates.iter().sum()
    }

    /// Independent route: mean completed count straight from the records.
    pub fn mean_completed(&self) -> f64 {
        let total: usize = self.per_sequence_records.iter().map(|r| r.completed).sum();
        total as f64 / self.per_sequence_records.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.sr.windows(2) {
            if w[1] > w[0] + 1e-12 {
                return Err(Error::Validation("sr must be non-increasing".into()));
            }
        }
        if (self.avg_len - Self::avg_len_from_rates(&self.sr)).abs() > 1e-12 {
            return Err(Error::Validation("avg_len != sum of rates".into()));
        }
        if !self.per_sequence_records.is_empty()
            && (self.mean_completed() - self.avg_len).abs() > 1e-9
        {
            return Err(Error::Validation("avg_len disagrees with mean completed count".into()));
        }
        Ok(())
    }
}

/// Everything a rollout needs besides the environment.
pub struct Rollout<'a> {
    pub model: &'a PolicyModel<f32>,
    pub flow: &'a FlowConfig,
    pub encoder: &'a FrozenEncoder,
    pub eval: &'a EvalConfig,
}

fn flow_rep_for(
    rollout: &Rollout<'_>,
    frame: &crate::envsim::Frame,
    points: &[[f32; 2]],
    size: RenderSize,
) -> Result<Array1<f32>> {
    let mask = build_mask(points, rollout.flow.radius, size.h, size.w);
    let amped = amplify(frame, &mask, rollout.flow.alpha)?;
    Ok(rollout.encoder.encode(&amped)?.vector)
}

/// Roll one subtask from `state` under the policy; returns (success, final
/// state). The policy window resets at the subtask boundary and grounding
/// happens once on the entry frame.
pub fn rollout_subtask(
    rollout: &Rollout<'_>,
    state: WorldState,
    spec: &SubtaskSpec,
    instruction: &str,
    point_seed: u64,
) -> Result<(bool, WorldState)> {
    let size = RenderSize::default();
    let lang_id = rollout.model.cfg.lang_id(instruction)?;
    let mut state = state;

    // Entry check: a subtask can already be satisfied mid-chain.
    if check_success(&state, spec)? {
        return Ok((true, state));
    }

    let frame0 = render(&state, size);
    let mut masks = oracle_ground(&state, instruction, size)?;
    if rollout.flow.ground_mode() == GroundMode::NoHand {
        masks.masks.remove("manipulator");
        masks.bindings.remove("manipulator");
    }
    let initial = sample_points(&masks, rollout.flow.density, rollout.flow.point_cap, point_seed)?;
    let mut tracker = match rollout.flow.tracker {
        TrackerKind::BlockMatch => OnlineTracker::new_block_match(&initial, frame0.clone(), size),
        _ => OnlineTracker::new_oracle(&initial, &masks, &state, size)?,
    };
    let static_points: Vec<[f32; 2]> = initial.iter().map(|p| [p.x, p.y]).collect();

    let mut ctx = RolloutContext::new(rollout.model.cfg.h, true);
    let z0 = flow_rep_for(rollout, &frame0, if rollout.flow.no_trace { &static_points } else { tracker.points() }, size)?;
    ctx.push(z0, Some(state.proprio()));

    for _ in 0..rollout.eval.step_cap {
        let (action, _) = predict_action(rollout.model, &ctx, lang_id)?;
        state = crate::envsim::step(&state, &action)?;
        if check_success(&state, spec)? {
            return Ok((true, state));
        }
        let frame = render(&state, size);
        if !rollout.flow.no_trace {
            tracker.advance(&state, &frame)?;
        }
        let z = flow_rep_for(rollout, &frame, if rollout.flow.no_trace { &static_points } else { tracker.points() }, size)?;
        ctx.push(z, Some(state.proprio()));
    }
    Ok((false, state))
}

/// Roll one evaluation sequence: a fresh layout, then up to five chained
/// subtasks without resetting the world; only the instruction changes.
pub fn rollout_sequence(rollout: &Rollout<'_>, sequence_index: u64) -> Result<SequenceRecord> {
    let seq_seed = derive_seed("eval/sequence", &[rollout.eval.seed, sequence_index]);
    let mut rng = stream("eval/chain", &[seq_seed]);
    let mut state = sample_eval_layout(seq_seed, Domain::Target)?;

    let kinds = SubtaskKind::all();
    let colors = ObjColor::all();
    let mut chain = Vec::with_capacity(CHAIN_LEN);
    let mut templates = Vec::with_capacity(CHAIN_LEN);
    for _ in 0..CHAIN_LEN {
        let kind = kinds[rng.random_range(0..kinds.len())];
        let color = colors[rng.random_range(0..colors.len())];
        templates.push(rng.random_range(0..3usize));
        chain.push((kind, color));
    }

    let mut completed = 0;
    for (i, &(kind, color)) in chain.iter().enumerate() {
        let spec = SubtaskSpec::new(kind, color);
        let instruction = spec.instruction(templates[i]);
        let point_seed = derive_seed("eval/points", &[seq_seed, i as u64]);
        let (ok, next) = rollout_subtask(rollout, state, &spec, &instruction, point_seed)?;
        state = next;
        if !ok {
            break;
        }
        completed += 1;
    }
    Ok(SequenceRecord { chain, completed, seed: seq_seed })
}

/// Evaluate a policy over seeded chained-subtask sequences.
pub fn evaluate(
    model: &PolicyModel<f32>,
    meta: &CheckpointMeta,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let encoder = FrozenEncoder::new(meta.flow.encoder_seed, meta.flow.encoder_dim, meta.flow.patch);
    let rollout = Rollout { model, flow: &meta.flow, encoder: &encoder, eval };
    let records: Vec<SequenceRecord> = (0..eval.n_sequences as u64)
        .into_par_iter()
        .map(|i| rollout_sequence(&rollout, i))
        .collect::<Result<_>>()?;
    let report = EvalReport::from_records(records, eval.seed);
    report.validate()?;
    Ok(report)
}

/// Evaluate straight from a checkpoint file; loading enforces pipeline/env
/// version compatibility.
pub fn evaluate_checkpoint(path: &std::path::Path, eval: &EvalConfig) -> Result<EvalReport> {
    let (model, meta) = crate::policymodel::load_checkpoint(path)?;
    evaluate(&model, &meta, eval)
}
