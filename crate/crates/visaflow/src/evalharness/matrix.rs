//! The ablation matrix and the data-scaling sweep.
//!
//! Variants never touch the datasets on disk: each one extracts its own
//! representation in memory, so `alpha_zero` and friends cannot clobber the
//! full pipeline's arrays or each other's.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::read_manifest;
use crate::envsim::Domain;
use crate::error::{Error, Result};
use crate::flowencode::{extract_flowrep_sequence, FlowConfig, FrozenEncoder};
use crate::policymodel::{CheckpointMeta, ModelConfig, PolicyModel, StageTag};
use crate::trainer::{run_stage, InitFrom, Stage, TrainConfig, TrainEpisode};

use super::{evaluate, EvalConfig, EvalReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoPretrain,
    AlphaZero,
    NoTrace,
    NoHand,
}

impl AblationVariant {
    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoPretrain => "no_pretrain",
            AblationVariant::AlphaZero => "alpha_zero",
            AblationVariant::NoTrace => "no_trace",
            AblationVariant::NoHand => "no_hand",
        }
    }

    pub fn all() -> [AblationVariant; 5] {
        [
            AblationVariant::Full,
            AblationVariant::NoPretrain,
            AblationVariant::AlphaZero,
            AblationVariant::NoTrace,
            AblationVariant::NoHand,
        ]
    }
}

/// One ablation: the variant plus the config deltas that define it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub variant: AblationVariant,
}

impl AblationSpec {
    pub fn new(variant: AblationVariant) -> Self {
        AblationSpec { variant }
    }

    /// Apply this variant's config deltas; only the fields that define the
    /// variant may differ from the base.
    pub fn apply(&self, base: &FlowConfig) -> FlowConfig {
        let mut flow = base.clone();
        match self.variant {
            AblationVariant::Full | AblationVariant::NoPretrain => {}
            AblationVariant::AlphaZero => flow.alpha = 0.0,
            AblationVariant::NoTrace => flow.no_trace = true,
            AblationVariant::NoHand => flow.no_hand = true,
        }
        flow
    }

    pub fn skips_pretraining(&self) -> bool {
        self.variant == AblationVariant::NoPretrain
    }
}

pub fn ablation_variants() -> Vec<AblationSpec> {
    AblationVariant::all().into_iter().map(AblationSpec::new).collect()
}

/// Shared experiment configuration for matrix/scaling runs.
#[derive(Debug, Clone)]
pub struct MatrixConfig {
    pub model: ModelConfig,
    pub flow: FlowConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    /// Replicate seeds, shared across variants for paired comparisons.
    pub seeds: Vec<u64>,
}

/// Load raw episodes and extract this configuration's flow representation in
/// memory, in manifest order.
pub fn prepare_train_episodes(
    root: &Path,
    domain: Domain,
    flow: &FlowConfig,
    vocab: &[String],
) -> Result<Vec<TrainEpisode>> {
    let manifest = read_manifest(root)?;
    let encoder = FrozenEncoder::new(flow.encoder_seed, flow.encoder_dim, flow.patch);
    let entries: Vec<_> = manifest.entries.iter().filter(|e| e.domain == domain).collect();
    if entries.is_empty() {
        return Err(Error::Stage(format!("no {} episodes under {}", domain.as_str(), root.display())));
    }
    entries
        .par_iter()
        .map(|entry| -> Result<TrainEpisode> {
            let (episode, _, _) = crate::dataset::load_episode(root, entry.domain, entry.subtask, entry.seed)?;
            let ext = extract_flowrep_sequence(&episode, flow, &encoder)?;
            let t = episode.len();
            let flows = ndarray::Array2::from_shape_fn((t, flow.encoder_dim), |(i, j)| ext.flows[i].vector[j]);
            let states = episode.states.as_ref().map(|ss| {
                ndarray::Array2::from_shape_fn((t, 3), |(i, j)| ss[i].proprio()[j])
            });
            let actions = episode.actions.as_ref().map(|aa| {
                ndarray::Array2::from_shape_fn((t - 1, 3), |(i, j)| match j {
                    0 => aa[i].arm_delta[0],
                    1 => aa[i].arm_delta[1],
                    _ => aa[i].gripper_cmd.as_f32(),
                })
            });
            let lang_id = vocab
                .iter()
                .position(|s| s == &episode.instruction)
                .ok_or_else(|| Error::Config(format!("instruction {:?} not in vocabulary", episode.instruction)))?;
            Ok(TrainEpisode { lang_id, flows, states, actions, progress: episode.progress.clone() })
        })
        .collect()
}

/// Pretrain (unless skipped) and finetune/evaluate one variant across the
/// replicate seeds. Returns one report per seed.
#[allow(clippy::too_many_arguments)]
pub fn run_variant(
    spec: &AblationSpec,
    source_root: &Path,
    target_root: &Path,
    cfg: &MatrixConfig,
    work_dir: &Path,
) -> Result<Vec<EvalReport>> {
    let flow = spec.apply(&cfg.flow);
    let vocab = &cfg.model.vocab;
    let target_eps = prepare_train_episodes(target_root, Domain::Target, &flow, vocab)?;

    let variant_dir = work_dir.join(spec.variant.name());
    std::fs::create_dir_all(&variant_dir)?;

    let pretrained = if spec.skips_pretraining() {
        None
    } else {
        let source_eps = prepare_train_episodes(source_root, Domain::Source, &flow, vocab)?;
        let model_cfg = ModelConfig { init_seed: cfg.pretrain.seed, ..cfg.model.clone() };
        let (_, result) = run_stage(
            &source_eps,
            &model_cfg,
            &flow,
            &cfg.pretrain,
            InitFrom::Fresh,
            &variant_dir.join("pretrain"),
        )?;
        Some(result.final_checkpoint)
    };

    let mut reports = Vec::with_capacity(cfg.seeds.len());
    for (ri, &seed) in cfg.seeds.iter().enumerate() {
        let ft_cfg = TrainConfig { stage: Stage::Finetune, seed, ..cfg.finetune.clone() };
        let model_cfg = ModelConfig { init_seed: seed, ..cfg.model.clone() };
        let init = match &pretrained {
            Some(p) => InitFrom::Checkpoint(p.clone()),
            None => InitFrom::Fresh,
        };
        let (model, _) = run_stage(
            &target_eps,
            &model_cfg,
            &flow,
            &ft_cfg,
            init,
            &variant_dir.join(format!("finetune_seed{seed}")),
        )?;
        let meta = CheckpointMeta::new(model_cfg, flow.clone(), StageTag::Finetuned);
        let eval_cfg = EvalConfig { seed: cfg.eval.seed + ri as u64, ..cfg.eval.clone() };
        reports.push(evaluate(&model, &meta, &eval_cfg)?);
    }
    Ok(reports)
}

/// Train and evaluate every ablation variant with shared seeds, data splits,
/// and budgets.
pub fn run_ablation_matrix(
    source_root: &Path,
    target_root: &Path,
    cfg: &MatrixConfig,
    work_dir: &Path,
) -> Result<BTreeMap<String, Vec<EvalReport>>> {
    let mut out = BTreeMap::new();
    for spec in ablation_variants() {
        let reports = run_variant(&spec, source_root, target_root, cfg, work_dir)?;
        out.insert(spec.variant.name().to_string(), reports);
    }
    Ok(out)
}

/// Finetune nested target subsets from one shared pretrained checkpoint and
/// evaluate each with shared eval seeds. `counts` are demo counts.
pub fn run_data_scaling(
    source_root: &Path,
    target_root: &Path,
    cfg: &MatrixConfig,
    counts: &[usize],
    work_dir: &Path,
) -> Result<BTreeMap<usize, EvalReport>> {
    let vocab = &cfg.model.vocab;
    let target_eps = prepare_train_episodes(target_root, Domain::Target, &cfg.flow, vocab)?;
    for &c in counts {
        if c == 0 || c > target_eps.len() {
            return Err(Error::Validation(format!(
                "subset of {c} episodes not available from {}",
                target_eps.len()
            )));
        }
    }

    let source_eps = prepare_train_episodes(source_root, Domain::Source, &cfg.flow, vocab)?;
    let model_cfg = ModelConfig { init_seed: cfg.pretrain.seed, ..cfg.model.clone() };
    let (_, pre) = run_stage(
        &source_eps,
        &model_cfg,
        &cfg.flow,
        &cfg.pretrain,
        InitFrom::Fresh,
        &work_dir.join("pretrain"),
    )?;

    // A fixed seeded permutation makes smaller subsets prefixes of larger
    // ones: nested by construction.
    let mut order: Vec<usize> = (0..target_eps.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut crate::rng::stream("scale/permutation", &[cfg.finetune.seed]));

    let seed = *cfg.seeds.first().unwrap_or(&cfg.finetune.seed);
    let mut out = BTreeMap::new();
    for &count in counts {
        let subset: Vec<TrainEpisode> = order[..count].iter().map(|&i| target_eps[i].clone()).collect();
        let ft_cfg = TrainConfig { stage: Stage::Finetune, seed, ..cfg.finetune.clone() };
        let run_model_cfg = ModelConfig { init_seed: seed, ..cfg.model.clone() };
        let (model, _) = run_stage(
            &subset,
            &run_model_cfg,
            &cfg.flow,
            &ft_cfg,
            InitFrom::Checkpoint(pre.final_checkpoint.clone()),
            &work_dir.join(format!("finetune_n{count}")),
        )?;
        let meta = CheckpointMeta::new(run_model_cfg, cfg.flow.clone(), StageTag::Finetuned);
        out.insert(count, evaluate(&model, &meta, &cfg.eval)?);
    }
    Ok(out)
}

/// The nested-subset order used by the scaling sweep (exposed for tests).
pub fn scaling_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut crate::rng::stream("scale/permutation", &[seed]));
    order
}
