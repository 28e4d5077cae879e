//! The policy transformer: multimodal token sequences, causal temporal
//! attention, and query-token heads for future-flow prediction, action
//! chunks, and progress.
//!
//! Sequence layout: [LANG (, GOAL)] then per timestep [Z, STATE, OBSQ x n,
//! ACTQ]. A token at timestep t attends to the prefix and to non-query
//! tokens with timestep <= t; query tokens additionally attend to
//! themselves, and nothing attends to a query token — queries read the
//! stream, they never write into it.

mod io;

pub use io::{load_checkpoint, save_checkpoint, CheckpointMeta, StageTag};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::envsim::{Action, GripperCmd, MAX_DELTA};
use crate::error::{Error, Result};
use crate::nn::{linear_fwd, sigmoid, Init, ParamId, ParamSet, Real, TransformerCore, TransformerCoreCache};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    /// History length (past observations fed to the policy).
    pub h: usize,
    /// Predicted future-flow horizon per [OBS] query block.
    pub n: usize,
    /// Action chunk length from the [ACT] query.
    pub k: usize,
    /// Flow representation width.
    pub d: usize,
    /// Closed instruction vocabulary.
    pub vocab: Vec<String>,
    pub goal_conditioning: bool,
    pub state_dim: usize,
    pub action_dim: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            depth: 4,
            heads: 4,
            h: 10,
            n: 3,
            k: 5,
            d: 128,
            vocab: crate::envsim::instruction_vocabulary(),
            goal_conditioning: false,
            state_dim: 3,
            action_dim: 2,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h < 1 || self.n < 1 || self.k < 1 {
            return Err(Error::Config("h, n, k must all be >= 1".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config("d_model must be divisible by heads".into()));
        }
        if self.vocab.is_empty() {
            return Err(Error::Config("empty instruction vocabulary".into()));
        }
        Ok(())
    }

    pub fn prefix_len(&self) -> usize {
        if self.goal_conditioning {
            2
        } else {
            1
        }
    }

    pub fn block_len(&self) -> usize {
        // Z, STATE, OBSQ x n, ACTQ
        3 + self.n
    }

    pub fn seq_len(&self) -> usize {
        self.prefix_len() + self.h * self.block_len()
    }

    pub fn lang_id(&self, instruction: &str) -> Result<usize> {
        self.vocab
            .iter()
            .position(|s| s == instruction)
            .ok_or_else(|| Error::Config(format!("instruction {instruction:?} not in vocabulary")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Lang,
    Goal,
    Z,
    State,
    ObsQ,
    ActQ,
}

impl TokenKind {
    pub fn is_query(&self) -> bool {
        matches!(self, TokenKind::ObsQ | TokenKind::ActQ)
    }
}

/// The embedded multimodal input: rows are tokens in model space.
pub struct TokenSequence<T> {
    pub tokens: Array2<T>,
    pub kinds: Vec<TokenKind>,
    /// Timestep per token; -1 for prefix tokens.
    pub timestep_of_token: Vec<i32>,
    pub attention_mask: Array2<bool>,
}

/// Kinds and timesteps for a given config — the fixed sequence skeleton.
pub fn sequence_skeleton(cfg: &ModelConfig) -> (Vec<TokenKind>, Vec<i32>) {
    let mut kinds = vec![TokenKind::Lang];
    if cfg.goal_conditioning {
        kinds.push(TokenKind::Goal);
    }
    let mut ts: Vec<i32> = vec![-1; kinds.len()];
    for t in 0..cfg.h {
        kinds.push(TokenKind::Z);
        kinds.push(TokenKind::State);
        for _ in 0..cfg.n {
            kinds.push(TokenKind::ObsQ);
        }
        kinds.push(TokenKind::ActQ);
        for _ in 0..cfg.block_len() {
            ts.push(t as i32);
        }
    }
    (kinds, ts)
}

/// Causality rule as a boolean mask. allow[i][j]: row i may attend to col j.
pub fn build_attention_mask(kinds: &[TokenKind], ts: &[i32]) -> Array2<bool> {
    let l = kinds.len();
    Array2::from_shape_fn((l, l), |(i, j)| {
        let (ki, kj) = (kinds[i], kinds[j]);
        if ki == TokenKind::Lang || ki == TokenKind::Goal {
            return kj == TokenKind::Lang || kj == TokenKind::Goal;
        }
        if kj == TokenKind::Lang || kj == TokenKind::Goal {
            return true;
        }
        if kj.is_query() {
            // Nothing attends to a query except the query itself.
            return i == j;
        }
        ts[j] <= ts[i]
    })
}

/// One policy invocation's inputs.
#[derive(Debug, Clone)]
pub struct PolicyInput<T> {
    pub lang_id: usize,
    /// h x d flow representations, oldest first.
    pub flows: Array2<T>,
    /// h x state_dim proprioception; None for the action-free source domain.
    pub states: Option<Array2<T>>,
    /// Flow representation of the goal frame, when goal conditioning is on.
    pub goal: Option<Array1<T>>,
}

/// Per-timestep head outputs for a whole sequence.
#[derive(Debug, Clone)]
pub struct PolicyOutputs<T> {
    /// (h, n, d) predicted future flows.
    pub pred_future_flow: Array3<T>,
    /// (h, k, action_dim) Gaussian means.
    pub action_mean: Array3<T>,
    /// (h, k, action_dim) log-variances.
    pub action_logvar: Array3<T>,
    /// (h, k) gripper logits.
    pub gripper_logit: Array2<T>,
    /// (h,) progress in (0, 1), sigmoid-squashed.
    pub progress: Array1<T>,
}

/// The latest timestep's slice — what the policy acts on.
#[derive(Debug, Clone)]
pub struct PolicyOutput<T> {
    pub pred_future_flow: Array2<T>,
    pub action_mean: Array2<T>,
    pub action_logvar: Array2<T>,
    pub gripper_logit: Array1<T>,
    pub progress: T,
}

impl<T: Real> PolicyOutputs<T> {
    pub fn latest(&self) -> PolicyOutput<T> {
        let h = self.progress.len();
        PolicyOutput {
            pred_future_flow: self.pred_future_flow.index_axis(ndarray::Axis(0), h - 1).to_owned(),
            action_mean: self.action_mean.index_axis(ndarray::Axis(0), h - 1).to_owned(),
            action_logvar: self.action_logvar.index_axis(ndarray::Axis(0), h - 1).to_owned(),
            gripper_logit: self.gripper_logit.index_axis(ndarray::Axis(0), h - 1).to_owned(),
            progress: self.progress[h - 1],
        }
    }
}

/// Cotangents for every head output; same shapes as PolicyOutputs.
pub struct OutputGrads<T> {
    pub pred_future_flow: Array3<T>,
    pub action_mean: Array3<T>,
    pub action_logvar: Array3<T>,
    pub gripper_logit: Array2<T>,
    pub progress: Array1<T>,
}

impl<T: Real> OutputGrads<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        OutputGrads {
            pred_future_flow: Array3::from_elem((cfg.h, cfg.n, cfg.d), T::zero()),
            action_mean: Array3::from_elem((cfg.h, cfg.k, cfg.action_dim), T::zero()),
            action_logvar: Array3::from_elem((cfg.h, cfg.k, cfg.action_dim), T::zero()),
            gripper_logit: Array2::from_elem((cfg.h, cfg.k), T::zero()),
            progress: Array1::from_elem(cfg.h, T::zero()),
        }
    }
}

struct HeadIds {
    lang_emb: ParamId,
    goal_w: Option<ParamId>,
    goal_b: Option<ParamId>,
    z_w: ParamId,
    z_b: ParamId,
    state_w: ParamId,
    state_b: ParamId,
    state_placeholder: ParamId,
    obsq: ParamId,
    actq: ParamId,
    pos: ParamId,
    obs_head_w: ParamId,
    obs_head_b: ParamId,
    mean_w: ParamId,
    mean_b: ParamId,
    logvar_w: ParamId,
    logvar_b: ParamId,
    grip_w: ParamId,
    grip_b: ParamId,
    prog_w: ParamId,
    prog_b: ParamId,
}

pub struct PolicyModel<T> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
    core: TransformerCore,
    ids: HeadIds,
    skeleton: (Vec<TokenKind>, Vec<i32>),
    mask: Array2<bool>,
}

pub struct PolicyCache<T> {
    input: PolicyInput<T>,
    x: Array2<T>,
    core: TransformerCoreCache<T>,
    y: Array2<T>,
    obs_rows: Array2<T>,
    act_rows: Array2<T>,
    progress: Array1<T>,
}

const INIT_STD: f64 = 0.02;

impl<T: Real> PolicyModel<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream("policymodel/init", &[cfg.init_seed]);
        let mut ps = ParamSet::new();
        let dm = cfg.d_model;
        let ids = HeadIds {
            lang_emb: ps.add("emb.lang", (cfg.vocab.len(), dm), Init::Normal(INIT_STD), &mut rng),
            goal_w: cfg
                .goal_conditioning
                .then(|| ps.add("emb.goal.w", (cfg.d, dm), Init::Normal(INIT_STD), &mut rng)),
            goal_b: cfg.goal_conditioning.then(|| ps.add("emb.goal.b", (1, dm), Init::Zeros, &mut rng)),
            z_w: ps.add("emb.z.w", (cfg.d, dm), Init::Normal(INIT_STD), &mut rng),
            z_b: ps.add("emb.z.b", (1, dm), Init::Zeros, &mut rng),
            state_w: ps.add("emb.state.w", (cfg.state_dim, dm), Init::Normal(INIT_STD), &mut rng),
            state_b: ps.add("emb.state.b", (1, dm), Init::Zeros, &mut rng),
            state_placeholder: ps.add("emb.state.placeholder", (1, dm), Init::Normal(INIT_STD), &mut rng),
            obsq: ps.add("emb.obsq", (cfg.n, dm), Init::Normal(INIT_STD), &mut rng),
            actq: ps.add("emb.actq", (1, dm), Init::Normal(INIT_STD), &mut rng),
            pos: ps.add("emb.pos", (cfg.h, dm), Init::Normal(INIT_STD), &mut rng),
            obs_head_w: ps.add("head.obs.w", (dm, cfg.d), Init::Normal(INIT_STD), &mut rng),
            obs_head_b: ps.add("head.obs.b", (1, cfg.d), Init::Zeros, &mut rng),
            mean_w: ps.add("head.mean.w", (dm, cfg.k * cfg.action_dim), Init::Normal(INIT_STD), &mut rng),
            mean_b: ps.add("head.mean.b", (1, cfg.k * cfg.action_dim), Init::Zeros, &mut rng),
            logvar_w: ps.add("head.logvar.w", (dm, cfg.k * cfg.action_dim), Init::Normal(INIT_STD), &mut rng),
            logvar_b: ps.add("head.logvar.b", (1, cfg.k * cfg.action_dim), Init::Zeros, &mut rng),
            grip_w: ps.add("head.grip.w", (dm, cfg.k), Init::Normal(INIT_STD), &mut rng),
            grip_b: ps.add("head.grip.b", (1, cfg.k), Init::Zeros, &mut rng),
            prog_w: ps.add("head.prog.w", (dm, 1), Init::Normal(INIT_STD), &mut rng),
            prog_b: ps.add("head.prog.b", (1, 1), Init::Zeros, &mut rng),
        };
        let core = TransformerCore::new(&mut ps, "trunk", dm, cfg.depth, cfg.heads, INIT_STD, &mut rng);
        let skeleton = sequence_skeleton(&cfg);
        let mask = build_attention_mask(&skeleton.0, &skeleton.1);
        Ok(PolicyModel { cfg, params: ps, core, ids, skeleton, mask })
    }

    pub fn n_params(&self) -> usize {
        self.params.n_scalars()
    }

    fn validate_input(&self, input: &PolicyInput<T>) -> Result<()> {
        let cfg = &self.cfg;
        if input.lang_id >= cfg.vocab.len() {
            return Err(Error::Validation(format!("lang id {} out of vocabulary", input.lang_id)));
        }
        if input.flows.dim() != (cfg.h, cfg.d) {
            return Err(Error::Validation(format!(
                "flows shape {:?}, expected ({}, {})",
                input.flows.dim(),
                cfg.h,
                cfg.d
            )));
        }
        if let Some(s) = &input.states {
            if s.dim() != (cfg.h, cfg.state_dim) {
                return Err(Error::Validation("states shape mismatch".into()));
            }
        }
        if cfg.goal_conditioning != input.goal.is_some() {
            return Err(Error::Validation("goal presence must match goal_conditioning".into()));
        }
        Ok(())
    }

    /// Embed the inputs into the token sequence (modality projection plus
    /// per-timestep positional embedding).
    pub fn build_token_sequence(&self, input: &PolicyInput<T>) -> Result<TokenSequence<T>> {
        self.validate_input(input)?;
        let cfg = &self.cfg;
        let (kinds, ts) = &self.skeleton;
        let l = cfg.seq_len();
        let dm = cfg.d_model;
        let ps = &self.params;
        let mut x = Array2::from_elem((l, dm), T::zero());

        x.row_mut(0).assign(&ps.v(self.ids.lang_emb).row(input.lang_id));
        if cfg.goal_conditioning {
            let goal = input.goal.as_ref().unwrap();
            let gm = goal.view().insert_axis(ndarray::Axis(0)).to_owned();
            let g = linear_fwd(&gm, ps.v(self.ids.goal_w.unwrap()), ps.v(self.ids.goal_b.unwrap()));
            x.row_mut(1).assign(&g.row(0));
        }

        let z_rows = linear_fwd(&input.flows, ps.v(self.ids.z_w), ps.v(self.ids.z_b));
        let state_rows = input
            .states
            .as_ref()
            .map(|s| linear_fwd(s, ps.v(self.ids.state_w), ps.v(self.ids.state_b)));
        let pos = ps.v(self.ids.pos);
        let placeholder = ps.v(self.ids.state_placeholder);
        let obsq = ps.v(self.ids.obsq);
        let actq = ps.v(self.ids.actq);

        let prefix = cfg.prefix_len();
        for t in 0..cfg.h {
            let base = prefix + t * cfg.block_len();
            for j in 0..dm {
                x[[base, j]] = z_rows[[t, j]] + pos[[t, j]];
                x[[base + 1, j]] = match &state_rows {
                    Some(s) => s[[t, j]] + pos[[t, j]],
                    None => placeholder[[0, j]] + pos[[t, j]],
                };
                for i in 0..cfg.n {
                    x[[base + 2 + i, j]] = obsq[[i, j]] + pos[[t, j]];
                }
                x[[base + 2 + cfg.n, j]] = actq[[0, j]] + pos[[t, j]];
            }
        }
        Ok(TokenSequence {
            tokens: x,
            kinds: kinds.clone(),
            timestep_of_token: ts.clone(),
            attention_mask: self.mask.clone(),
        })
    }

    fn obs_row_index(&self, t: usize, i: usize) -> usize {
        self.cfg.prefix_len() + t * self.cfg.block_len() + 2 + i
    }

    fn act_row_index(&self, t: usize) -> usize {
        self.cfg.prefix_len() + t * self.cfg.block_len() + 2 + self.cfg.n
    }

    /// Full forward pass with caches for backward.
    pub fn forward_cached(&self, input: PolicyInput<T>) -> Result<(PolicyOutputs<T>, PolicyCache<T>)> {
        let seq = self.build_token_sequence(&input)?;
        self.forward_from_tokens(input, seq.tokens)
    }

    /// Forward from pre-embedded tokens; exposed so tests can perturb
    /// individual rows.
    pub fn forward_from_tokens(
        &self,
        input: PolicyInput<T>,
        x: Array2<T>,
    ) -> Result<(PolicyOutputs<T>, PolicyCache<T>)> {
        let cfg = &self.cfg;
        let ps = &self.params;
        let (y, core_cache) = self.core.forward(ps, x.clone(), Some(&self.mask));
        if y.iter().any(|v| !v.is_finite()) {
            let layer = core_cache.first_nonfinite_block().map(|i| i.to_string()).unwrap_or_else(|| "final".into());
            return Err(Error::Numeric(format!("non-finite activations at layer {layer}")));
        }

        // Gather query rows.
        let mut obs_rows = Array2::from_elem((cfg.h * cfg.n, cfg.d_model), T::zero());
        let mut act_rows = Array2::from_elem((cfg.h, cfg.d_model), T::zero());
        for t in 0..cfg.h {
            for i in 0..cfg.n {
                obs_rows.row_mut(t * cfg.n + i).assign(&y.row(self.obs_row_index(t, i)));
            }
            act_rows.row_mut(t).assign(&y.row(self.act_row_index(t)));
        }

        let obs_flat = linear_fwd(&obs_rows, ps.v(self.ids.obs_head_w), ps.v(self.ids.obs_head_b));
        let mean_flat = linear_fwd(&act_rows, ps.v(self.ids.mean_w), ps.v(self.ids.mean_b));
        let logvar_flat = linear_fwd(&act_rows, ps.v(self.ids.logvar_w), ps.v(self.ids.logvar_b));
        let grip = linear_fwd(&act_rows, ps.v(self.ids.grip_w), ps.v(self.ids.grip_b));
        let prog_raw = linear_fwd(&act_rows, ps.v(self.ids.prog_w), ps.v(self.ids.prog_b));

        let pred_future_flow = Array3::from_shape_fn((cfg.h, cfg.n, cfg.d), |(t, i, j)| obs_flat[[t * cfg.n + i, j]]);
        let action_mean =
            Array3::from_shape_fn((cfg.h, cfg.k, cfg.action_dim), |(t, m, a)| mean_flat[[t, m * cfg.action_dim + a]]);
        let action_logvar =
            Array3::from_shape_fn((cfg.h, cfg.k, cfg.action_dim), |(t, m, a)| logvar_flat[[t, m * cfg.action_dim + a]]);
        let progress = Array1::from_shape_fn(cfg.h, |t| sigmoid(prog_raw[[t, 0]]));

        let outputs = PolicyOutputs {
            pred_future_flow,
            action_mean,
            action_logvar,
            gripper_logit: grip.clone(),
            progress: progress.clone(),
        };
        let cache = PolicyCache { input, x, core: core_cache, y, obs_rows, act_rows, progress };
        Ok((outputs, cache))
    }

    /// Inference-only forward.
    pub fn forward(&self, input: PolicyInput<T>) -> Result<PolicyOutputs<T>> {
        Ok(self.forward_cached(input)?.0)
    }

    /// Accumulate parameter gradients for one window given head cotangents.
    pub fn backward(&mut self, cache: &PolicyCache<T>, grads: &OutputGrads<T>) {
        let cfg = self.cfg.clone();
        let mut dy = Array2::from_elem(cache.y.dim(), T::zero());
        {
            let mut ps = self.params.split_mut();

            // Head backward: obs head.
            let mut dobs_flat = Array2::from_elem((cfg.h * cfg.n, cfg.d), T::zero());
            for t in 0..cfg.h {
                for i in 0..cfg.n {
                    for j in 0..cfg.d {
                        dobs_flat[[t * cfg.n + i, j]] = grads.pred_future_flow[[t, i, j]];
                    }
                }
            }
            let dobs_rows = ps.linear_bwd(&cache.obs_rows, self.ids.obs_head_w, self.ids.obs_head_b, &dobs_flat);

            // Action heads.
            let mut dmean_flat = Array2::from_elem((cfg.h, cfg.k * cfg.action_dim), T::zero());
            let mut dlogvar_flat = Array2::from_elem((cfg.h, cfg.k * cfg.action_dim), T::zero());
            for t in 0..cfg.h {
                for m in 0..cfg.k {
                    for a in 0..cfg.action_dim {
                        dmean_flat[[t, m * cfg.action_dim + a]] = grads.action_mean[[t, m, a]];
                        dlogvar_flat[[t, m * cfg.action_dim + a]] = grads.action_logvar[[t, m, a]];
                    }
                }
            }
            // Progress passed through a sigmoid: chain its derivative.
            let mut dprog_raw = Array2::from_elem((cfg.h, 1), T::zero());
            for t in 0..cfg.h {
                let p = cache.progress[t];
                dprog_raw[[t, 0]] = grads.progress[t] * p * (T::one() - p);
            }

            let mut dact_rows = ps.linear_bwd(&cache.act_rows, self.ids.mean_w, self.ids.mean_b, &dmean_flat);
            dact_rows = &dact_rows
                + &ps.linear_bwd(&cache.act_rows, self.ids.logvar_w, self.ids.logvar_b, &dlogvar_flat);
            dact_rows = &dact_rows + &ps.linear_bwd(&cache.act_rows, self.ids.grip_w, self.ids.grip_b, &grads.gripper_logit);
            dact_rows = &dact_rows + &ps.linear_bwd(&cache.act_rows, self.ids.prog_w, self.ids.prog_b, &dprog_raw);

            // Scatter query-row grads back to sequence positions.
            for t in 0..cfg.h {
                for i in 0..cfg.n {
                    let r = self.obs_row_index(t, i);
                    for j in 0..cfg.d_model {
                        dy[[r, j]] = dobs_rows[[t * cfg.n + i, j]];
                    }
                }
                let r = self.act_row_index(t);
                for j in 0..cfg.d_model {
                    dy[[r, j]] = dact_rows[[t, j]];
                }
            }
        }

        let dx = self.core.backward(&mut self.params, &cache.core, &dy);

        // Embedding backward.
        let mut ps = self.params.split_mut();
        let prefix = cfg.prefix_len();
        {
            // LANG row.
            let g = &mut ps.grads[self.ids.lang_emb.0];
            for j in 0..cfg.d_model {
                g[[cache.input.lang_id, j]] = g[[cache.input.lang_id, j]] + dx[[0, j]];
            }
        }
        if cfg.goal_conditioning {
            let goal = cache.input.goal.as_ref().unwrap();
            let gm = goal.view().insert_axis(ndarray::Axis(0)).to_owned();
            let dgoal = dx.row(1).insert_axis(ndarray::Axis(0)).to_owned();
            ps.linear_bwd(&gm, self.ids.goal_w.unwrap(), self.ids.goal_b.unwrap(), &dgoal);
        }

        // Z / STATE / query / positional rows.
        let mut dz_rows = Array2::from_elem((cfg.h, cfg.d_model), T::zero());
        let mut dstate_rows = Array2::from_elem((cfg.h, cfg.d_model), T::zero());
        for t in 0..cfg.h {
            let base = prefix + t * cfg.block_len();
            for j in 0..cfg.d_model {
                dz_rows[[t, j]] = dx[[base, j]];
                dstate_rows[[t, j]] = dx[[base + 1, j]];
                // Every token of timestep t contributes to pos[t].
                let mut dpos = dx[[base, j]] + dx[[base + 1, j]];
                for i in 0..cfg.n {
                    let v = dx[[base + 2 + i, j]];
                    ps.grads[self.ids.obsq.0][[i, j]] = ps.grads[self.ids.obsq.0][[i, j]] + v;
                    dpos = dpos + v;
                }
                let va = dx[[base + 2 + cfg.n, j]];
                ps.grads[self.ids.actq.0][[0, j]] = ps.grads[self.ids.actq.0][[0, j]] + va;
                dpos = dpos + va;
                ps.grads[self.ids.pos.0][[t, j]] = ps.grads[self.ids.pos.0][[t, j]] + dpos;
            }
        }
        ps.linear_bwd(&cache.input.flows, self.ids.z_w, self.ids.z_b, &dz_rows);
        match &cache.input.states {
            Some(s) => {
                ps.linear_bwd(s, self.ids.state_w, self.ids.state_b, &dstate_rows);
            }
            None => {
                for t in 0..cfg.h {
                    for j in 0..cfg.d_model {
                        ps.grads[self.ids.state_placeholder.0][[0, j]] =
                            ps.grads[self.ids.state_placeholder.0][[0, j]] + dstate_rows[[t, j]];
                    }
                }
            }
        }
    }
}

/// Rolling observation window for closed-loop control; bootstraps by
/// repeating the first observation until h frames have been seen.
pub struct RolloutContext {
    h: usize,
    flows: Vec<Array1<f32>>,
    states: Vec<[f32; 3]>,
    with_states: bool,
}

impl RolloutContext {
    pub fn new(h: usize, with_states: bool) -> Self {
        RolloutContext { h, flows: Vec::new(), states: Vec::new(), with_states }
    }

    pub fn push(&mut self, flow: Array1<f32>, state: Option<[f32; 3]>) {
        self.flows.push(flow);
        if self.with_states {
            self.states.push(state.expect("state required in target domain"));
        }
        if self.flows.len() > self.h {
            self.flows.remove(0);
            if self.with_states {
                self.states.remove(0);
            }
        }
    }

    pub fn is_primed(&self) -> bool {
        !self.flows.is_empty()
    }

    /// Window as model input, repeating the oldest entry to fill history.
    pub fn as_input(&self, d: usize, lang_id: usize) -> PolicyInput<f32> {
        assert!(self.is_primed(), "rollout context is empty");
        let take = |idx: usize| -> usize {
            let pad = self.h - self.flows.len();
            idx.saturating_sub(pad)
        };
        let flows = Array2::from_shape_fn((self.h, d), |(t, j)| self.flows[take(t).min(self.flows.len() - 1)][j]);
        let states = self.with_states.then(|| {
            Array2::from_shape_fn((self.h, 3), |(t, j)| self.states[take(t).min(self.states.len() - 1)][j])
        });
        PolicyInput { lang_id, flows, states, goal: None }
    }
}

/// Decode the executed action from the latest [ACT] output: clip the first
/// chunk element to the action bounds; gripper closes iff
/// sigmoid(logit) > 0.5 (the boundary itself stays open).
pub fn decode_action(out: &PolicyOutput<f32>) -> Action {
    let dx = out.action_mean[[0, 0]].clamp(-MAX_DELTA, MAX_DELTA);
    let dy = out.action_mean[[0, 1]].clamp(-MAX_DELTA, MAX_DELTA);
    let grip = if sigmoid(out.gripper_logit[0]) > 0.5 { GripperCmd::Close } else { GripperCmd::Open };
    Action::new(dx, dy, grip)
}

/// One closed-loop policy step: forward on the rolling window, execute chunk
/// element one.
pub fn predict_action(model: &PolicyModel<f32>, ctx: &RolloutContext, lang_id: usize) -> Result<(Action, PolicyOutput<f32>)> {
    let input = ctx.as_input(model.cfg.d, lang_id);
    let out = model.forward(input)?.latest();
    Ok((decode_action(&out), out))
}
