//! Episode datasets on disk.
//!
//! Layout: `<root>/<domain>/<subtask>/<seed>.episode` (named-array container)
//! with a `<seed>.meta.json` sidecar, plus `<root>/manifest.json` listing
//! every episode with content hashes. Flow extraction augments the container
//! with `tracks`, `visibility`, `entity_of_point`, and `visaflow` arrays and
//! records the pipeline configuration in the sidecar; mixing representations
//! across different flow configs is a hard error at load time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{Container, NamedArray};
use crate::envsim::{
    generate_episode, Action, Domain, Episode, Frame, GripperCmd, ObjColor, SubtaskKind, TaskSpec,
    WorldState,
};
use crate::error::{Error, Result};
use crate::flowencode::{extract_flowrep_sequence, FlowConfig, FrozenEncoder};
use crate::trainer::TrainEpisode;
use crate::{ENV_VERSION, FORMAT_VERSION, PIPELINE_VERSION};

/// Sidecar flow-extraction record; part of the representation identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMeta {
    pub pipeline_version: u32,
    pub config: FlowConfig,
    /// Entity label per index used by the `entity_of_point` array.
    pub entity_labels: Vec<String>,
}

/// Structured-text sidecar: everything about an episode except bulk arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub format_version: u32,
    pub env_version: u32,
    pub instruction: String,
    pub subtask: SubtaskKind,
    pub target_color: ObjColor,
    pub domain: Domain,
    pub seed: u64,
    pub frame_h: usize,
    pub frame_w: usize,
    /// Ground-truth scene states (target domain only); lets an episode
    /// round-trip exactly without re-simulation.
    pub scene_states: Option<Vec<WorldState>>,
    pub flow: Option<FlowMeta>,
}

pub fn episode_rel_path(domain: Domain, subtask: SubtaskKind, seed: u64) -> PathBuf {
    PathBuf::from(domain.as_str()).join(subtask.as_str()).join(format!("{seed}.episode"))
}

pub fn meta_rel_path(domain: Domain, subtask: SubtaskKind, seed: u64) -> PathBuf {
    PathBuf::from(domain.as_str()).join(subtask.as_str()).join(format!("{seed}.meta.json"))
}

fn quantize_frames(frames: &[Frame]) -> NamedArray {
    let (h, w) = (frames[0].height(), frames[0].width());
    let mut data = Vec::with_capacity(frames.len() * h * w * 3);
    for f in frames {
        for v in f.pixels.iter() {
            data.push((v * 255.0).round() as u8);
        }
    }
    NamedArray::u8(vec![frames.len(), h, w, 3], data)
}

fn dequantize_frames(arr: &NamedArray, path: &str) -> Result<Vec<Frame>> {
    let dims = &arr.shape;
    if dims.len() != 4 || dims[3] != 3 {
        return Err(Error::Format { path: path.into(), reason: "frames array must be (T,H,W,3)".into() });
    }
    let (t, h, w) = (dims[0], dims[1], dims[2]);
    let raw = arr.as_u8().ok_or_else(|| Error::Format { path: path.into(), reason: "frames must be u8".into() })?;
    let mut out = Vec::with_capacity(t);
    for ti in 0..t {
        let base = ti * h * w * 3;
        let pixels = Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
            raw[base + (i * w + j) * 3 + c] as f32 / 255.0
        });
        out.push(Frame { pixels, timestamp: ti });
    }
    Ok(out)
}

/// Write one episode (container + sidecar) under the dataset root.
pub fn save_episode(root: &Path, ep: &Episode) -> Result<()> {
    ep.validate()?;
    let dir = root.join(ep.domain.as_str()).join(ep.subtask.as_str());
    std::fs::create_dir_all(&dir)?;

    let mut c = Container::new();
    c.insert("frames", quantize_frames(&ep.frames));
    c.insert("progress", NamedArray::f32(vec![ep.progress.len()], ep.progress.clone()));
    if let Some(states) = &ep.states {
        let data: Vec<f32> = states.iter().flat_map(|s| s.proprio()).collect();
        c.insert("states", NamedArray::f32(vec![states.len(), 3], data));
    }
    if let Some(actions) = &ep.actions {
        let data: Vec<f32> = actions
            .iter()
            .flat_map(|a| [a.arm_delta[0], a.arm_delta[1], a.gripper_cmd.as_f32()])
            .collect();
        c.insert("actions", NamedArray::f32(vec![actions.len(), 3], data));
    }
    c.write_to(&root.join(episode_rel_path(ep.domain, ep.subtask, ep.seed)))?;

    let meta = EpisodeMeta {
        format_version: FORMAT_VERSION,
        env_version: ENV_VERSION,
        instruction: ep.instruction.clone(),
        subtask: ep.subtask,
        target_color: ep.target_color,
        domain: ep.domain,
        seed: ep.seed,
        frame_h: ep.frames[0].height(),
        frame_w: ep.frames[0].width(),
        scene_states: ep.states.clone(),
        flow: None,
    };
    write_meta(root, &meta)
}

fn write_meta(root: &Path, meta: &EpisodeMeta) -> Result<()> {
    let path = root.join(meta_rel_path(meta.domain, meta.subtask, meta.seed));
    std::fs::write(&path, serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_meta(root: &Path, domain: Domain, subtask: SubtaskKind, seed: u64) -> Result<EpisodeMeta> {
    let path = root.join(meta_rel_path(domain, subtask, seed));
    let meta: EpisodeMeta = serde_json::from_slice(&std::fs::read(&path)?)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "{}: format v{}, expected v{FORMAT_VERSION}",
            path.display(),
            meta.format_version
        )));
    }
    if meta.env_version != ENV_VERSION {
        return Err(Error::VersionMismatch(format!(
            "{}: env v{}, expected v{ENV_VERSION}",
            path.display(),
            meta.env_version
        )));
    }
    Ok(meta)
}

/// Reload an episode from disk (frames dequantized losslessly — the palette
/// only emits k/255 values).
pub fn load_episode(root: &Path, domain: Domain, subtask: SubtaskKind, seed: u64) -> Result<(Episode, EpisodeMeta, Container)> {
    let meta = read_meta(root, domain, subtask, seed)?;
    let epath = root.join(episode_rel_path(domain, subtask, seed));
    let c = Container::read_from(&epath)?;
    let loc = epath.display().to_string();
    let frames = dequantize_frames(c.require("frames", &loc)?, &loc)?;
    let progress = c.require("progress", &loc)?.as_f32().unwrap_or(&[]).to_vec();
    let actions = c.get("actions").map(|arr| -> Result<Vec<Action>> {
        let raw = arr.as_f32().ok_or_else(|| Error::Format { path: loc.clone(), reason: "actions must be f32".into() })?;
        Ok(raw
            .chunks_exact(3)
            .map(|ch| Action {
                arm_delta: [ch[0], ch[1]],
                gripper_cmd: if ch[2] > 0.5 { GripperCmd::Close } else { GripperCmd::Open },
            })
            .collect())
    });
    let episode = Episode {
        frames,
        instruction: meta.instruction.clone(),
        states: meta.scene_states.clone(),
        actions: actions.transpose()?,
        subtask: meta.subtask,
        target_color: meta.target_color,
        domain: meta.domain,
        progress,
        seed: meta.seed,
    };
    episode.validate()?;
    Ok((episode, meta, c))
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub domain: Domain,
    pub subtask: SubtaskKind,
    pub seed: u64,
    pub episode_path: String,
    pub meta_path: String,
    pub episode_sha256: String,
    pub meta_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub entries: Vec<ManifestEntry>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(crate::rng::hex(&h.finalize()))
}

/// Scan the dataset tree and (re)write `manifest.json`. Entries are sorted by
/// (domain, subtask, seed), so identical contents give identical manifests.
pub fn write_manifest(root: &Path) -> Result<Manifest> {
    let mut entries = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        for subtask in SubtaskKind::all() {
            let dir = root.join(domain.as_str()).join(subtask.as_str());
            if !dir.is_dir() {
                continue;
            }
            let mut seeds: Vec<u64> = Vec::new();
            for entry in std::fs::read_dir(&dir)? {
                let name = entry?.file_name().to_string_lossy().into_owned();
                if let Some(stem) = name.strip_suffix(".episode") {
                    if let Ok(seed) = stem.parse::<u64>() {
                        seeds.push(seed);
                    }
                }
            }
            seeds.sort_unstable();
            for seed in seeds {
                let ep_rel = episode_rel_path(domain, subtask, seed);
                let meta_rel = meta_rel_path(domain, subtask, seed);
                entries.push(ManifestEntry {
                    domain,
                    subtask,
                    seed,
                    episode_path: ep_rel.to_string_lossy().into_owned(),
                    meta_path: meta_rel.to_string_lossy().into_owned(),
                    episode_sha256: sha256_file(&root.join(&ep_rel))?,
                    meta_sha256: sha256_file(&root.join(&meta_rel))?,
                });
            }
        }
    }
    let manifest = Manifest { format_version: FORMAT_VERSION, entries };
    std::fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let m: Manifest = serde_json::from_slice(&std::fs::read(&path)?)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "{}: manifest format v{}, expected v{FORMAT_VERSION}",
            path.display(),
            m.format_version
        )));
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize)]
pub struct GenStats {
    pub per_subtask: BTreeMap<String, usize>,
    pub expert_failures: u64,
}

/// Generate `count` episodes round-robin over `subtasks`, skipping (and
/// counting) expert failures by advancing the seed stream.
pub fn generate_dataset(
    root: &Path,
    domain: Domain,
    subtasks: &[SubtaskKind],
    count: usize,
    base_seed: u64,
) -> Result<GenStats> {
    if subtasks.is_empty() {
        return Err(Error::Config("no subtasks selected".into()));
    }
    // Resolve (subtask, seed) pairs serially so failures advance the seed
    // stream deterministically; rendering/writing then parallelizes.
    let mut picks: Vec<(SubtaskKind, u64)> = Vec::with_capacity(count);
    let mut failures = 0u64;
    let mut seed = base_seed;
    for i in 0..count {
        let kind = subtasks[i % subtasks.len()];
        loop {
            match crate::envsim::run_expert(TaskSpec { kind, domain }, seed) {
                Ok(_) => {
                    picks.push((kind, seed));
                    seed += 1;
                    break;
                }
                Err(Error::Expert(_)) => {
                    failures += 1;
                    seed += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    picks
        .par_iter()
        .map(|&(kind, seed)| -> Result<()> {
            let ep = generate_episode(TaskSpec { kind, domain }, seed)?;
            save_episode(root, &ep)
        })
        .collect::<Result<Vec<()>>>()?;

    let mut stats = GenStats { expert_failures: failures, ..Default::default() };
    for (kind, _) in &picks {
        *stats.per_subtask.entry(kind.as_str().to_string()).or_insert(0) += 1;
    }
    write_manifest(root)?;
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Flow augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize)]
pub struct AugmentStats {
    pub processed: usize,
    pub skipped_up_to_date: usize,
}

/// Augment every episode with tracks + visaflow arrays. Idempotent: episodes
/// whose sidecar already records the same flow config are skipped; a
/// different existing config is a hard error unless `force`.
pub fn augment_with_flows(root: &Path, cfg: &FlowConfig, force: bool) -> Result<AugmentStats> {
    let manifest = read_manifest(root)?;
    let encoder = FrozenEncoder::new(cfg.encoder_seed, cfg.encoder_dim, cfg.patch);

    let results: Vec<Result<bool>> = manifest
        .entries
        .par_iter()
        .map(|entry| -> Result<bool> {
            let (episode, mut meta, mut container) =
                load_episode(root, entry.domain, entry.subtask, entry.seed)?;
            if let Some(existing) = &meta.flow {
                let same = existing.pipeline_version == PIPELINE_VERSION && existing.config == *cfg;
                if same && container.contains("visaflow") && !force {
                    return Ok(false);
                }
                if !same && !force {
                    return Err(Error::VersionMismatch(format!(
                        "{}: existing flow arrays were extracted with a different config; rerun with --force to replace",
                        entry.episode_path
                    )));
                }
            }
            let ext = extract_flowrep_sequence(&episode, cfg, &encoder)?;
            let (j, t) = (ext.tracks.n_points(), ext.tracks.n_frames());
            container.insert(
                "tracks",
                NamedArray::f32(vec![j, t, 2], ext.tracks.points.iter().copied().collect()),
            );
            container.insert(
                "visibility",
                NamedArray::u8(vec![j, t], ext.tracks.visibility.iter().map(|&b| b as u8).collect()),
            );
            let mut labels: Vec<String> = ext.tracks.entity_of_point.clone();
            labels.dedup();
            let label_idx: Vec<i64> = ext
                .tracks
                .entity_of_point
                .iter()
                .map(|l| labels.iter().position(|x| x == l).unwrap() as i64)
                .collect();
            container.insert("entity_of_point", NamedArray::i64(vec![j], label_idx));
            let d = cfg.encoder_dim;
            let mut flat = Vec::with_capacity(t * d);
            for rep in &ext.flows {
                flat.extend(rep.vector.iter().copied());
            }
            container.insert("visaflow", NamedArray::f32(vec![t, d], flat));
            container.write_to(&root.join(&entry.episode_path))?;
            meta.flow = Some(FlowMeta {
                pipeline_version: PIPELINE_VERSION,
                config: cfg.clone(),
                entity_labels: labels,
            });
            write_meta(root, &meta)?;
            Ok(true)
        })
        .collect();

    let mut stats = AugmentStats::default();
    for r in results {
        if r? {
            stats.processed += 1;
        } else {
            stats.skipped_up_to_date += 1;
        }
    }
    if stats.processed > 0 {
        write_manifest(root)?;
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Training-set loading
// ---------------------------------------------------------------------------

/// Load every episode of `domain` as a TrainEpisode, in manifest order.
/// Verifies that all episodes share exactly the expected flow config.
pub fn load_train_episodes(
    root: &Path,
    domain: Domain,
    expect_flow: &FlowConfig,
    vocab: &[String],
) -> Result<Vec<TrainEpisode>> {
    let manifest = read_manifest(root)?;
    let mut out = Vec::new();
    for entry in manifest.entries.iter().filter(|e| e.domain == domain) {
        let meta = read_meta(root, entry.domain, entry.subtask, entry.seed)?;
        let flow = meta.flow.as_ref().ok_or_else(|| {
            Error::Stage(format!("{}: no flow arrays; run extract-flow first", entry.episode_path))
        })?;
        if flow.pipeline_version != PIPELINE_VERSION || flow.config != *expect_flow {
            return Err(Error::VersionMismatch(format!(
                "{}: flow metadata does not match the run's flow config",
                entry.episode_path
            )));
        }
        let epath = root.join(&entry.episode_path);
        let c = Container::read_from(&epath)?;
        let loc = epath.display().to_string();
        let flows_arr = c.require("visaflow", &loc)?;
        let (t, d) = (flows_arr.shape[0], flows_arr.shape[1]);
        let flows = Array2::from_shape_vec((t, d), flows_arr.as_f32().unwrap().to_vec())
            .map_err(|e| Error::Format { path: loc.clone(), reason: e.to_string() })?;
        let states = c
            .get("states")
            .map(|arr| Array2::from_shape_vec((arr.shape[0], arr.shape[1]), arr.as_f32().unwrap().to_vec()))
            .transpose()
            .map_err(|e| Error::Format { path: loc.clone(), reason: e.to_string() })?;
        let actions = c
            .get("actions")
            .map(|arr| Array2::from_shape_vec((arr.shape[0], arr.shape[1]), arr.as_f32().unwrap().to_vec()))
            .transpose()
            .map_err(|e| Error::Format { path: loc.clone(), reason: e.to_string() })?;
        let progress = c.require("progress", &loc)?.as_f32().unwrap().to_vec();
        let lang_id = vocab
            .iter()
            .position(|s| s == &meta.instruction)
            .ok_or_else(|| Error::Config(format!("instruction {:?} not in vocabulary", meta.instruction)))?;
        out.push(TrainEpisode { lang_id, flows, states, actions, progress });
    }
    if out.is_empty() {
        return Err(Error::Stage(format!("no {} episodes under {}", domain.as_str(), root.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_flow_cfg() -> FlowConfig {
        FlowConfig { encoder_dim: 16, ..FlowConfig::default() }
    }

    #[test]
    fn episode_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        for domain in [Domain::Target, Domain::Source] {
            let ep = generate_episode(TaskSpec { kind: SubtaskKind::Pick, domain }, 3).unwrap();
            save_episode(dir.path(), &ep).unwrap();
            let (back, _, _) = load_episode(dir.path(), domain, SubtaskKind::Pick, 3).unwrap();
            assert_eq!(ep, back, "{domain:?}");
        }
    }

    #[test]
    fn generation_writes_count_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let stats =
            generate_dataset(dir.path(), Domain::Target, &SubtaskKind::all(), 8, 100).unwrap();
        assert_eq!(stats.per_subtask.values().sum::<usize>(), 8);
        let manifest = read_manifest(dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 8);
    }

    #[test]
    fn regenerated_dataset_has_identical_manifest() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(a.path(), Domain::Source, &[SubtaskKind::Reach, SubtaskKind::Pick], 6, 0).unwrap();
        generate_dataset(b.path(), Domain::Source, &[SubtaskKind::Reach, SubtaskKind::Pick], 6, 0).unwrap();
        let ma = std::fs::read(a.path().join("manifest.json")).unwrap();
        let mb = std::fs::read(b.path().join("manifest.json")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn augment_is_idempotent_and_conflicts_are_hard_errors() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), Domain::Target, &[SubtaskKind::Reach], 2, 7).unwrap();
        let cfg = small_flow_cfg();
        let s1 = augment_with_flows(dir.path(), &cfg, false).unwrap();
        assert_eq!((s1.processed, s1.skipped_up_to_date), (2, 0));
        let s2 = augment_with_flows(dir.path(), &cfg, false).unwrap();
        assert_eq!((s2.processed, s2.skipped_up_to_date), (0, 2));

        let other = FlowConfig { alpha: 0.0, ..small_flow_cfg() };
        match augment_with_flows(dir.path(), &other, false) {
            Err(Error::VersionMismatch(_)) => {}
            other => panic!("expected version mismatch, got {other:?}"),
        }
        // --force replaces.
        let s3 = augment_with_flows(dir.path(), &other, true).unwrap();
        assert_eq!(s3.processed, 2);
    }

    #[test]
    fn augmented_flows_are_deterministic_across_datasets() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [&a, &b] {
            generate_dataset(d.path(), Domain::Source, &[SubtaskKind::PushToZone], 2, 5).unwrap();
            augment_with_flows(d.path(), &small_flow_cfg(), false).unwrap();
        }
        let ma = read_manifest(a.path()).unwrap();
        let mb = read_manifest(b.path()).unwrap();
        assert_eq!(ma.entries, mb.entries);
    }

    #[test]
    fn load_train_episodes_checks_flow_compat() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), Domain::Target, &[SubtaskKind::Place], 2, 11).unwrap();
        augment_with_flows(dir.path(), &small_flow_cfg(), false).unwrap();
        let vocab = crate::envsim::instruction_vocabulary();
        let eps = load_train_episodes(dir.path(), Domain::Target, &small_flow_cfg(), &vocab).unwrap();
        assert_eq!(eps.len(), 2);
        assert!(eps[0].actions.is_some());
        assert_eq!(eps[0].flows.ncols(), 16);

        let other = FlowConfig { encoder_seed: 9, ..small_flow_cfg() };
        match load_train_episodes(dir.path(), Domain::Target, &other, &vocab) {
            Err(Error::VersionMismatch(_)) => {}
            other => panic!("expected version mismatch, got {:?}", other.map(|_| ())),
        }
    }
}
