//! Semantic entity grounding and hand-object interaction tracking.
//!
//! A grounder resolves the instruction to initial entity masks on frame 0;
//! points are densely sampled inside those masks; a tracker estimates their
//! 2D trajectories across the sequence. Both stages are pluggable: the
//! oracle implementations read ground-truth geometry from the environment,
//! the block-matching tracker works on pixels alone, and external
//! implementations attach through the same traits.

mod online;
mod track;

pub use online::OnlineTracker;
pub use track::{BlockMatchTracker, OracleTracker};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::envsim::{EntityMaskSet, Frame, RenderSize, WorldState};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Default sampling density: points per 100 mask pixels.
pub const DEFAULT_DENSITY: f32 = 4.0;
/// Default cap on the total number of tracked points (bounds mask cost).
pub const DEFAULT_POINT_CAP: usize = 64;

/// A sampled point in pixel coordinates, tagged with its entity label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub label: String,
    pub x: f32,
    pub y: f32,
}

/// Per-entity 2D point trajectories over a frame sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTrackSet {
    /// J x T x 2 pixel coordinates (x, y).
    pub points: Array3<f32>,
    /// Length-J entity labels, matching the masks points were sampled from.
    pub entity_of_point: Vec<String>,
    /// J x T visibility flags; identity is never dropped.
    pub visibility: Array2<bool>,
}

impl PointTrackSet {
    pub fn n_points(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.points.shape()[1]
    }

    /// Coordinates at frame `t` as (x, y) pairs.
    pub fn frame_points(&self, t: usize) -> Vec<[f32; 2]> {
        (0..self.n_points()).map(|j| [self.points[[j, t, 0]], self.points[[j, t, 1]]]).collect()
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let (j, t) = (self.n_points(), self.n_frames());
        if j == 0 {
            return Err(Error::Validation("track set has no points".into()));
        }
        if self.entity_of_point.len() != j || self.visibility.shape() != [j, t] {
            return Err(Error::Validation("track set field shapes disagree".into()));
        }
        for jj in 0..j {
            for tt in 0..t {
                if self.visibility[[jj, tt]] {
                    let (x, y) = (self.points[[jj, tt, 0]], self.points[[jj, tt, 1]]);
                    if !(0.0..=(w - 1) as f32).contains(&x) || !(0.0..=(h - 1) as f32).contains(&y) {
                        return Err(Error::Validation(format!(
                            "visible point {jj} at frame {tt} is out of bounds: ({x}, {y})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-entity sample count: max(1, round(density * area / 100)).
pub fn points_for_area(area: usize, density: f32) -> usize {
    ((density * area as f32 / 100.0).round() as usize).max(1)
}

/// Densely sample points inside the initial masks, deterministically.
///
/// Entities are visited in label order; if the total would exceed `cap`,
/// per-entity counts are scaled down proportionally (floor, min 1).
pub fn sample_points(masks: &EntityMaskSet, density: f32, cap: usize, seed: u64) -> Result<Vec<LabeledPoint>> {
    if density <= 0.0 {
        return Err(Error::Validation(format!("density must be positive, got {density}")));
    }
    let mut counts: Vec<(String, Vec<(usize, usize)>, usize)> = Vec::new();
    for (label, mask) in &masks.masks {
        let pixels: Vec<(usize, usize)> = mask
            .indexed_iter()
            .filter_map(|((i, j), &b)| if b { Some((i, j)) } else { None })
            .collect();
        if pixels.is_empty() {
            return Err(Error::Sampling(format!("mask {label} is empty")));
        }
        let n = points_for_area(pixels.len(), density);
        counts.push((label.clone(), pixels, n));
    }
    let total: usize = counts.iter().map(|(_, _, n)| n).sum();
    if total > cap {
        for entry in counts.iter_mut() {
            entry.2 = ((entry.2 * cap) / total).max(1);
        }
    }
    let mut rng = stream("flow/sample_points", &[seed]);
    let mut out = Vec::new();
    for (label, mut pixels, n) in counts {
        pixels.shuffle(&mut rng);
        for k in 0..n {
            let (i, j) = pixels[k % pixels.len()];
            out.push(LabeledPoint { label: label.clone(), x: j as f32, y: i as f32 });
        }
    }
    Ok(out)
}

/// Resolves an instruction to initial entity masks on frame 0.
pub trait Grounder {
    fn name(&self) -> &str;
    fn ground(&self, frame0: &Frame, instruction: &str) -> Result<EntityMaskSet>;
}

/// Adapter over the environment's ground-truth grounding.
pub struct OracleGrounder {
    pub state0: WorldState,
    pub size: RenderSize,
}

impl Grounder for OracleGrounder {
    fn name(&self) -> &str {
        "oracle"
    }

    fn ground(&self, _frame0: &Frame, instruction: &str) -> Result<EntityMaskSet> {
        crate::envsim::oracle_ground(&self.state0, instruction, self.size)
    }
}

/// Grounding mode: the `no_hand` ablation drops the manipulator mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundMode {
    Full,
    NoHand,
}

/// Ground frame 0 through a grounder and enforce the mask-set contract:
/// exactly one manipulator mask (unless `NoHand`) and at least one object.
pub fn ground(
    frame0: &Frame,
    instruction: &str,
    grounder: &dyn Grounder,
    mode: GroundMode,
) -> Result<EntityMaskSet> {
    let mut set = grounder.ground(frame0, instruction)?;
    match mode {
        GroundMode::Full => {
            if !set.masks.contains_key("manipulator") {
                return Err(Error::Grounding {
                    noun: "manipulator".into(),
                    context: format!("grounder {:?} returned no manipulator mask", grounder.name()),
                });
            }
        }
        GroundMode::NoHand => {
            set.masks.remove("manipulator");
            set.bindings.remove("manipulator");
        }
    }
    if !set.masks.keys().any(|k| k.starts_with("object_")) {
        return Err(Error::Grounding {
            noun: "<object>".into(),
            context: format!("no object masks for {instruction:?}"),
        });
    }
    set.validate()?;
    Ok(set)
}

/// Estimates point trajectories across a frame sequence.
pub trait Tracker {
    fn name(&self) -> &str;
    fn track(&self, frames: &[Frame], initial: &[LabeledPoint]) -> Result<PointTrackSet>;
}

/// Shared track assembly: step proposals come from the tracker, the
/// out-of-frame policy is uniform — a point whose proposed coordinate leaves
/// the frame goes invisible from that step and keeps its last coordinate.
pub(crate) fn assemble_tracks(
    initial: &[LabeledPoint],
    n_frames: usize,
    h: usize,
    w: usize,
    mut propose: impl FnMut(usize, usize, f32, f32) -> (f32, f32),
) -> PointTrackSet {
    let j = initial.len();
    let mut points = Array3::zeros((j, n_frames, 2));
    let mut visibility = Array2::from_elem((j, n_frames), true);
    for (jj, p) in initial.iter().enumerate() {
        points[[jj, 0, 0]] = p.x;
        points[[jj, 0, 1]] = p.y;
    }
    let in_frame = |x: f32, y: f32| (0.0..=(w - 1) as f32).contains(&x) && (0.0..=(h - 1) as f32).contains(&y);
    for t in 0..n_frames - 1 {
        for jj in 0..j {
            let (x, y) = (points[[jj, t, 0]], points[[jj, t, 1]]);
            if !visibility[[jj, t]] {
                points[[jj, t + 1, 0]] = x;
                points[[jj, t + 1, 1]] = y;
                visibility[[jj, t + 1]] = false;
                continue;
            }
            let (nx, ny) = propose(jj, t, x, y);
            if in_frame(nx, ny) {
                points[[jj, t + 1, 0]] = nx;
                points[[jj, t + 1, 1]] = ny;
            } else {
                points[[jj, t + 1, 0]] = x;
                points[[jj, t + 1, 1]] = y;
                visibility[[jj, t + 1]] = false;
            }
        }
    }
    PointTrackSet {
        points,
        entity_of_point: initial.iter().map(|p| p.label.clone()).collect(),
        visibility,
    }
}

/// Validate tracker preconditions shared by all implementations.
pub(crate) fn validate_track_inputs(frames: &[Frame], initial: &[LabeledPoint]) -> Result<(usize, usize)> {
    if frames.len() < 2 {
        return Err(Error::Validation("tracking needs at least 2 frames".into()));
    }
    if initial.is_empty() {
        return Err(Error::Validation("no initial points".into()));
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    for f in frames {
        if f.height() != h || f.width() != w {
            return Err(Error::Validation("frame sizes differ within episode".into()));
        }
    }
    for p in initial {
        if !(0.0..=(w - 1) as f32).contains(&p.x) || !(0.0..=(h - 1) as f32).contains(&p.y) {
            return Err(Error::Validation(format!("initial point ({}, {}) outside frame 0", p.x, p.y)));
        }
    }
    Ok((h, w))
}
