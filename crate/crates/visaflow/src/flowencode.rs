//! Amplification mask, selective frame amplification, and the frozen
//! encoder that turns amplified frames into flow representations.
//!
//! The mask marks every pixel within L2 distance r of a tracked point
//! (pixel-center convention, inclusive). Amplification scales pixel values
//! by (1 + alpha * M) with clipping to [0, 1]; pixels outside the mask are
//! bit-identical to the input, and alpha = 0 is an exact identity — the
//! `w/o Seg.` ablation falls out of that.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::envsim::{Episode, EntityMaskSet, Frame, RenderSize};
use crate::error::{Error, Result};
use crate::flowtrace::{
    ground, sample_points, BlockMatchTracker, GroundMode, Grounder, OracleGrounder, OracleTracker,
    PointTrackSet, Tracker,
};
use crate::nn::{Init, ParamId, ParamSet, TransformerCore};
use crate::rng::stream;

/// Which tracker the pipeline uses; externals attach through the Tracker trait.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TrackerKind {
    Oracle,
    BlockMatch,
    External(String),
}

impl TrackerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(TrackerKind::Oracle),
            "block_match" => Ok(TrackerKind::BlockMatch),
            other => match other.strip_prefix("external:") {
                Some(name) if !name.is_empty() => Ok(TrackerKind::External(name.to_string())),
                _ => Err(Error::Config(format!(
                    "unknown tracker {other:?}; expected oracle | block_match | external:<name>"
                ))),
            },
        }
    }

    pub fn as_string(&self) -> String {
        match self {
            TrackerKind::Oracle => "oracle".into(),
            TrackerKind::BlockMatch => "block_match".into(),
            TrackerKind::External(n) => format!("external:{n}"),
        }
    }
}

impl TryFrom<String> for TrackerKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        TrackerKind::parse(&s)
    }
}

impl From<TrackerKind> for String {
    fn from(k: TrackerKind) -> String {
        k.as_string()
    }
}

/// Flow-extraction configuration; every field is part of the representation
/// identity and is recorded in episode metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub alpha: f32,
    pub radius: f32,
    pub density: f32,
    pub point_cap: usize,
    pub encoder_seed: u64,
    pub encoder_dim: usize,
    pub patch: usize,
    pub tracker: TrackerKind,
    /// `w/o Trace.` ablation: build every mask from the frame-0 points.
    pub no_trace: bool,
    /// `w/o Hand` ablation: drop the manipulator mask before sampling.
    pub no_hand: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            alpha: 0.5,
            radius: 3.0,
            density: 4.0,
            point_cap: 64,
            encoder_seed: 0,
            encoder_dim: 128,
            patch: 8,
            tracker: TrackerKind::Oracle,
            no_trace: false,
            no_hand: false,
        }
    }
}

impl FlowConfig {
    pub fn ground_mode(&self) -> GroundMode {
        if self.no_hand {
            GroundMode::NoHand
        } else {
            GroundMode::Full
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmplificationMask {
    pub values: Array2<u8>,
    pub radius_r: f32,
    pub source_points: Vec<[f32; 2]>,
}

/// M(x, y) = 1 iff some point lies within r of the pixel center (x, y).
/// Implemented by stamping per-point disks; the brute-force per-pixel
/// min-distance oracle lives in the tests.
pub fn build_mask(points: &[[f32; 2]], r: f32, h: usize, w: usize) -> AmplificationMask {
    let mut values = Array2::zeros((h, w));
    let r2 = r * r;
    for p in points {
        let (px, py) = (p[0], p[1]);
        let i0 = ((py - r).ceil().max(0.0)) as i64;
        let i1 = ((py + r).floor().min((h - 1) as f32)) as i64;
        let j0 = ((px - r).ceil().max(0.0)) as i64;
        let j1 = ((px + r).floor().min((w - 1) as f32)) as i64;
        for i in i0..=i1 {
            for j in j0..=j1 {
                let dx = j as f32 - px;
                let dy = i as f32 - py;
                if dx * dx + dy * dy <= r2 {
                    values[[i as usize, j as usize]] = 1;
                }
            }
        }
    }
    AmplificationMask { values, radius_r: r, source_points: points.to_vec() }
}

/// out = clip(frame * (1 + alpha * M), 0, 1); M = 0 pixels pass through
/// untouched.
pub fn amplify(frame: &Frame, mask: &AmplificationMask, alpha: f32) -> Result<Frame> {
    let (h, w) = (frame.height(), frame.width());
    if mask.values.shape() != [h, w] {
        return Err(Error::Validation(format!(
            "mask shape {:?} does not match frame {h}x{w}",
            mask.values.shape()
        )));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Validation(format!("alpha must be >= 0, got {alpha}")));
    }
    let gain = 1.0 + alpha;
    let mut pixels = frame.pixels.clone();
    for i in 0..h {
        for j in 0..w {
            if mask.values[[i, j]] == 1 {
                for c in 0..3 {
                    pixels[[i, j, c]] = (pixels[[i, j, c]] * gain).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(Frame { pixels, timestamp: frame.timestamp })
}

/// The flow representation of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRep {
    pub vector: Array1<f32>,
    pub frame_index: usize,
    pub alpha_used: f32,
}

/// Frozen, seeded patch encoder: patchify -> linear embed (+ positional
/// embedding) -> 2 attention/MLP blocks -> mean-pool. Weights are random
/// but immutable; the seed is part of the run configuration so source and
/// target share the same encoder.
pub struct FrozenEncoder {
    params: ParamSet<f32>,
    core: TransformerCore,
    proj_w: ParamId,
    proj_b: ParamId,
    pos_emb: ParamId,
    pub seed: u64,
    pub d: usize,
    pub patch: usize,
    max_tokens: usize,
}

impl FrozenEncoder {
    pub fn new(seed: u64, d: usize, patch: usize) -> Self {
        // Smooth 2D sinusoidal positions with a slightly hot core make the
        // pooled features position-decodable (probed to ~2-3 px at realistic
        // sample densities).
        Self::with_init(seed, d, patch, 1.0, 1.0, 2.0, true)
    }

    /// Init-scale knobs, exposed for tuning experiments: positional-embedding
    /// std, patch-projection gain, core weight gain, and a 2D sinusoidal
    /// positional table instead of a random one.
    pub fn with_init(
        seed: u64,
        d: usize,
        patch: usize,
        pos_std: f64,
        proj_gain: f64,
        core_gain: f64,
        sinusoidal_pos: bool,
    ) -> Self {
        // Token budget assumes frames up to 128 px on a side.
        let side = 128 / patch;
        let max_tokens = side * side;
        let mut rng = stream("flowencode/frozen", &[seed, d as u64, patch as u64]);
        let mut params = ParamSet::new();
        let in_dim = 3 * patch * patch;
        // Variance-preserving projections plus a strong positional signature
        // keep random features spatially informative after mean pooling.
        let proj_w =
            params.add("proj.w", (in_dim, d), Init::Normal(proj_gain / (in_dim as f64).sqrt()), &mut rng);
        let proj_b = params.add("proj.b", (1, d), Init::Zeros, &mut rng);
        let pos_emb = params.add("pos", (max_tokens, d), Init::Normal(pos_std), &mut rng);
        if sinusoidal_pos {
            let q = d / 4;
            let table = params.v(pos_emb).clone();
            let mut table = table;
            for ti in 0..side {
                for tj in 0..side {
                    let t = ti * side + tj;
                    for k in 0..d {
                        let group = k / q; // 0: sin row, 1: cos row, 2: sin col, 3: cos col
                        let f = 0.7 * 1.45f64.powi((k % q.max(1)) as i32);
                        let (coord, is_cos) = match group {
                            0 => (ti as f64, false),
                            1 => (ti as f64, true),
                            2 => (tj as f64, false),
                            _ => (tj as f64, true),
                        };
                        let v = if is_cos { (coord * f).cos() } else { (coord * f).sin() };
                        table[[t, k]] = (v * pos_std) as f32;
                    }
                }
            }
            params.values[pos_emb.0] = table;
        }
        let core =
            TransformerCore::new(&mut params, "enc", d, 2, 4, core_gain / (d as f64).sqrt(), &mut rng);
        FrozenEncoder { params, core, proj_w, proj_b, pos_emb, seed, d, patch, max_tokens }
    }

    /// Digest of all weights; must be invariant across any training run.
    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn encode(&self, frame: &Frame) -> Result<FlowRep> {
        let (h, w) = (frame.height(), frame.width());
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Validation(format!(
                "frame {h}x{w} not divisible by patch {}",
                self.patch
            )));
        }
        let (th, tw) = (h / self.patch, w / self.patch);
        let n_tokens = th * tw;
        if n_tokens > self.max_tokens {
            return Err(Error::Validation(format!("{n_tokens} patch tokens exceed encoder budget")));
        }
        let in_dim = 3 * self.patch * self.patch;
        let mut tokens = Array2::zeros((n_tokens, in_dim));
        for ti in 0..th {
            for tj in 0..tw {
                let mut k = 0;
                for pi in 0..self.patch {
                    for pj in 0..self.patch {
                        for c in 0..3 {
                            tokens[[ti * tw + tj, k]] =
                                frame.pixels[[ti * self.patch + pi, tj * self.patch + pj, c]];
                            k += 1;
                        }
                    }
                }
            }
        }
        let mut x = crate::nn::linear_fwd(&tokens, self.params.v(self.proj_w), self.params.v(self.proj_b));
        let pos = self.params.v(self.pos_emb);
        for t in 0..n_tokens {
            for j in 0..self.d {
                x[[t, j]] += pos[[t, j]];
            }
        }
        let (y, _) = self.core.forward(&self.params, x, None);
        let mut pooled = Array1::<f32>::zeros(self.d);
        for row in y.rows() {
            for (p, v) in pooled.iter_mut().zip(row.iter()) {
                *p += *v;
            }
        }
        pooled.mapv_inplace(|v| v / n_tokens as f32);
        if pooled.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite encoder output".into()));
        }
        Ok(FlowRep { vector: pooled, frame_index: frame.timestamp, alpha_used: f32::NAN })
    }
}

/// Everything the pipeline extracts from one episode.
#[derive(Debug, Clone)]
pub struct FlowExtraction {
    pub masks0: EntityMaskSet,
    pub tracks: PointTrackSet,
    pub flows: Vec<FlowRep>,
}

/// Run the full pipeline on an episode with the built-in oracle grounder and
/// the configured tracker. Source episodes have no carried states; their
/// ground truth is re-simulated from (subtask, domain, seed).
pub fn extract_flowrep_sequence(
    episode: &Episode,
    cfg: &FlowConfig,
    encoder: &FrozenEncoder,
) -> Result<FlowExtraction> {
    let size = RenderSize { h: episode.frames[0].height(), w: episode.frames[0].width() };
    let state0 = match &episode.states {
        Some(states) => states[0].clone(),
        None => crate::envsim::replay_states(episode.subtask, episode.domain, episode.seed)?.0[0].clone(),
    };
    let grounder = OracleGrounder { state0, size };
    let masks = ground(&episode.frames[0], &episode.instruction, &grounder, cfg.ground_mode())?;
    let tracker: Box<dyn Tracker> = match &cfg.tracker {
        TrackerKind::Oracle => Box::new(OracleTracker::for_episode(episode, &masks, size)?),
        TrackerKind::BlockMatch => Box::new(BlockMatchTracker::default()),
        TrackerKind::External(name) => {
            return Err(Error::Config(format!(
                "external tracker {name:?} is not registered; use extract_with"
            )))
        }
    };
    extract_from_masks(episode, cfg, encoder, masks, tracker.as_ref())
}

/// Same pipeline with caller-supplied grounder/tracker implementations.
pub fn extract_with(
    episode: &Episode,
    cfg: &FlowConfig,
    encoder: &FrozenEncoder,
    grounder: &dyn Grounder,
    tracker: &dyn Tracker,
) -> Result<FlowExtraction> {
    let masks = ground(&episode.frames[0], &episode.instruction, grounder, cfg.ground_mode())?;
    extract_from_masks(episode, cfg, encoder, masks, tracker)
}

fn extract_from_masks(
    episode: &Episode,
    cfg: &FlowConfig,
    encoder: &FrozenEncoder,
    masks: EntityMaskSet,
    tracker: &dyn Tracker,
) -> Result<FlowExtraction> {
    if encoder.seed != cfg.encoder_seed || encoder.d != cfg.encoder_dim || encoder.patch != cfg.patch {
        return Err(Error::VersionMismatch(
            "encoder instance does not match flow config (seed/dim/patch)".into(),
        ));
    }
    let (h, w) = (episode.frames[0].height(), episode.frames[0].width());
    let initial = sample_points(&masks, cfg.density, cfg.point_cap, episode.seed)?;
    let t_len = episode.frames.len();
    let tracks = if cfg.no_trace {
        // Static frame-0 mask for every t.
        let j = initial.len();
        let mut points = Array3::zeros((j, t_len, 2));
        for (jj, p) in initial.iter().enumerate() {
            for t in 0..t_len {
                points[[jj, t, 0]] = p.x;
                points[[jj, t, 1]] = p.y;
            }
        }
        PointTrackSet {
            points,
            entity_of_point: initial.iter().map(|p| p.label.clone()).collect(),
            visibility: Array2::from_elem((j, t_len), true),
        }
    } else {
        tracker.track(&episode.frames, &initial)?
    };
    tracks.validate(h, w)?;

    let mut flows = Vec::with_capacity(t_len);
    for (t, frame) in episode.frames.iter().enumerate() {
        // Invisible points keep their frozen coordinate: Eq-1 input needs a
        // coordinate every step.
        let pts = tracks.frame_points(t);
        let mask = build_mask(&pts, cfg.radius, h, w);
        let amplified = amplify(frame, &mask, cfg.alpha)?;
        let mut rep = encoder.encode(&amplified)?;
        rep.frame_index = t;
        rep.alpha_used = cfg.alpha;
        flows.push(rep);
    }
    Ok(FlowExtraction { masks0: masks, tracks, flows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{generate_episode, Domain, SubtaskKind, TaskSpec};
    use rand::Rng;

    /// Independent oracle: per-pixel minimum distance over all points.
    fn brute_force_mask(points: &[[f32; 2]], r: f32, h: usize, w: usize) -> Array2<u8> {
        let mut m = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let inside = points.iter().any(|p| {
                    let dx = j as f32 - p[0];
                    let dy = i as f32 - p[1];
                    dx * dx + dy * dy <= r * r
                });
                m[[i, j]] = if inside { 1 } else { 0 };
            }
        }
        m
    }

    #[test]
    fn unit_disk_membership() {
        let m = build_mask(&[[0.0, 0.0]], 1.0, 3, 3);
        let expect = [((0, 0), 1), ((0, 1), 1), ((1, 0), 1), ((1, 1), 0), ((2, 2), 0)];
        for ((i, j), v) in expect {
            assert_eq!(m.values[[i, j]], v, "pixel ({i}, {j})");
        }
        assert_eq!(m.values.iter().map(|&v| v as usize).sum::<usize>(), 3);
    }

    #[test]
    fn empty_points_all_zero() {
        let m = build_mask(&[], 5.0, 8, 8);
        assert!(m.values.iter().all(|&v| v == 0));
    }

    #[test]
    fn union_equals_elementwise_max() {
        let a = build_mask(&[[1.0, 1.0]], 1.5, 6, 6);
        let b = build_mask(&[[4.0, 4.0]], 1.5, 6, 6);
        let both = build_mask(&[[1.0, 1.0], [4.0, 4.0]], 1.5, 6, 6);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(both.values[[i, j]], a.values[[i, j]].max(b.values[[i, j]]));
            }
        }
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = stream("test/mask-oracle", &[0]);
        for _ in 0..60 {
            let h = rng.random_range(1..=64);
            let w = rng.random_range(1..=64);
            let n = rng.random_range(0..=64);
            let r = rng.random_range(0.5..8.0f32);
            let pts: Vec<[f32; 2]> = (0..n)
                .map(|_| {
                    [
                        rng.random_range(-2.0..w as f32 + 2.0),
                        rng.random_range(-2.0..h as f32 + 2.0),
                    ]
                })
                .collect();
            let fast = build_mask(&pts, r, h, w);
            let slow = brute_force_mask(&pts, r, h, w);
            assert_eq!(fast.values, slow, "h={h} w={w} n={n} r={r}");
        }
    }

    #[test]
    fn mask_monotone_in_radius() {
        let pts = [[3.0, 4.0], [10.0, 2.0]];
        let small = build_mask(&pts, 1.2, 16, 16);
        let large = build_mask(&pts, 3.7, 16, 16);
        for (s, l) in small.values.iter().zip(large.values.iter()) {
            assert!(l >= s);
        }
    }

    fn flat_frame(v: f32, h: usize, w: usize) -> Frame {
        Frame { pixels: Array3::from_elem((h, w, 3), v), timestamp: 0 }
    }

    #[test]
    fn amplify_formula_and_clipping() {
        let mask = build_mask(&[[1.0, 1.0]], 0.5, 4, 4);
        let f = flat_frame(0.4, 4, 4);
        let out = amplify(&f, &mask, 1.0).unwrap();
        assert_eq!(out.pixels[[1, 1, 0]], 0.8);
        assert_eq!(out.pixels[[0, 0, 0]], 0.4); // outside mask: untouched

        let f2 = flat_frame(0.8, 4, 4);
        let out2 = amplify(&f2, &mask, 0.5).unwrap();
        assert_eq!(out2.pixels[[1, 1, 0]], 1.0); // 1.2 clipped
    }

    #[test]
    fn amplify_alpha_zero_is_bit_identity() {
        let mask = build_mask(&[[2.0, 2.0]], 1.5, 6, 6);
        let mut rng = stream("test/amp", &[1]);
        let f = Frame {
            pixels: Array3::from_shape_fn((6, 6, 3), |_| rng.random_range(0.0..1.0f32)),
            timestamp: 3,
        };
        let out = amplify(&f, &mask, 0.0).unwrap();
        assert_eq!(out.pixels, f.pixels);
    }

    #[test]
    fn amplify_shape_mismatch_is_error() {
        let mask = build_mask(&[[0.0, 0.0]], 1.0, 5, 5);
        assert!(amplify(&flat_frame(0.1, 4, 4), &mask, 0.5).is_err());
    }

    #[test]
    fn encoder_is_deterministic_and_seeded() {
        let e1 = FrozenEncoder::new(7, 32, 8);
        let e2 = FrozenEncoder::new(7, 32, 8);
        assert_eq!(e1.checksum(), e2.checksum());
        let e3 = FrozenEncoder::new(8, 32, 8);
        assert_ne!(e1.checksum(), e3.checksum());

        let f = flat_frame(0.3, 64, 64);
        let a = e1.encode(&f).unwrap();
        let b = e2.encode(&f).unwrap();
        assert_eq!(a.vector, b.vector);
        assert_eq!(a.vector.len(), 32);
    }

    #[test]
    fn encode_shape_contract() {
        let enc = FrozenEncoder::new(0, 128, 8);
        let f = flat_frame(0.5, 64, 64);
        let rep = enc.encode(&f).unwrap();
        assert_eq!(rep.vector.len(), 128);
        assert!(enc.encode(&flat_frame(0.5, 60, 60)).is_err()); // indivisible
    }

    #[test]
    fn amplified_region_changes_encoding() {
        let enc = FrozenEncoder::new(0, 32, 8);
        let f = flat_frame(0.4, 64, 64);
        let mask = build_mask(&[[20.0, 20.0]], 3.0, 64, 64);
        let amped = amplify(&f, &mask, 0.5).unwrap();
        let za = enc.encode(&f).unwrap();
        let zb = enc.encode(&amped).unwrap();
        let l2: f32 = za.vector.iter().zip(zb.vector.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(l2 > 0.0);
    }

    #[test]
    fn alpha_zero_pipeline_equals_raw_encoding() {
        let e = generate_episode(TaskSpec { kind: SubtaskKind::Reach, domain: Domain::Target }, 2).unwrap();
        let enc = FrozenEncoder::new(0, 32, 8);
        let cfg = FlowConfig { alpha: 0.0, encoder_dim: 32, ..FlowConfig::default() };
        let ext = extract_flowrep_sequence(&e, &cfg, &enc).unwrap();
        for (t, frame) in e.frames.iter().enumerate() {
            let raw = enc.encode(frame).unwrap();
            assert_eq!(ext.flows[t].vector, raw.vector, "frame {t}");
        }
    }

    #[test]
    fn extraction_is_deterministic_end_to_end() {
        let e = generate_episode(TaskSpec { kind: SubtaskKind::Pick, domain: Domain::Source }, 5).unwrap();
        let enc = FrozenEncoder::new(3, 32, 8);
        let cfg = FlowConfig { encoder_seed: 3, encoder_dim: 32, ..FlowConfig::default() };
        let a = extract_flowrep_sequence(&e, &cfg, &enc).unwrap();
        let b = extract_flowrep_sequence(&e, &cfg, &enc).unwrap();
        assert_eq!(a.flows.len(), e.len());
        for (x, y) in a.flows.iter().zip(b.flows.iter()) {
            assert_eq!(x.vector, y.vector);
        }
        assert_eq!(a.tracks, b.tracks);
    }

    #[test]
    fn no_trace_uses_static_frame0_mask() {
        let e = generate_episode(TaskSpec { kind: SubtaskKind::PushToZone, domain: Domain::Target }, 4).unwrap();
        let enc = FrozenEncoder::new(0, 32, 8);
        let cfg = FlowConfig { encoder_dim: 32, no_trace: true, ..FlowConfig::default() };
        let ext = extract_flowrep_sequence(&e, &cfg, &enc).unwrap();
        let t_last = e.len() - 1;
        for j in 0..ext.tracks.n_points() {
            assert_eq!(ext.tracks.points[[j, 0, 0]], ext.tracks.points[[j, t_last, 0]]);
            assert_eq!(ext.tracks.points[[j, 0, 1]], ext.tracks.points[[j, t_last, 1]]);
        }
        let full =
            extract_flowrep_sequence(&e, &FlowConfig { encoder_dim: 32, ..FlowConfig::default() }, &enc).unwrap();
        // The manipulator moves, so late-episode masks differ.
        assert_ne!(ext.flows[t_last].vector, full.flows[t_last].vector);
    }

    #[test]
    fn no_hand_drops_manipulator_points() {
        let e = generate_episode(TaskSpec { kind: SubtaskKind::Place, domain: Domain::Target }, 6).unwrap();
        let enc = FrozenEncoder::new(0, 32, 8);
        let cfg = FlowConfig { encoder_dim: 32, no_hand: true, ..FlowConfig::default() };
        let ext = extract_flowrep_sequence(&e, &cfg, &enc).unwrap();
        assert!(!ext.masks0.masks.contains_key("manipulator"));
        assert!(ext.tracks.entity_of_point.iter().all(|l| l.starts_with("object_")));
    }

    use crate::rng::stream;
}
