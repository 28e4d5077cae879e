//! Built-in trackers: ground-truth advection and exhaustive block matching.

use std::collections::BTreeMap;

use crate::envsim::{arena_to_px, Episode, EntityBinding, EntityMaskSet, Frame, RenderSize, WorldState};
use crate::error::{Error, Result};

use super::{assemble_tracks, validate_track_inputs, LabeledPoint, PointTrackSet, Tracker};

/// Advects points by the ground-truth motion of the entity they were sampled
/// from. The default tracker for synthetic data.
pub struct OracleTracker {
    /// Per entity label, the pixel-space reference trajectory (x, y) per frame.
    entity_px: BTreeMap<String, Vec<(f32, f32)>>,
}

impl OracleTracker {
    pub fn from_states(states: &[WorldState], masks: &EntityMaskSet, size: RenderSize) -> Result<Self> {
        let mut entity_px = BTreeMap::new();
        for (label, binding) in &masks.bindings {
            let mut track = Vec::with_capacity(states.len());
            for s in states {
                let pos = match binding {
                    EntityBinding::Manipulator => s.manip_pos,
                    EntityBinding::Object(color) => {
                        s.object(*color)
                            .ok_or_else(|| Error::Validation(format!("entity {label} missing from state")))?
                            .pos
                    }
                };
                track.push(arena_to_px(pos, size));
            }
            entity_px.insert(label.clone(), track);
        }
        Ok(OracleTracker { entity_px })
    }

    /// Build from an episode: uses carried states when present, otherwise
    /// re-simulates them from (subtask, domain, seed).
    pub fn for_episode(episode: &Episode, masks: &EntityMaskSet, size: RenderSize) -> Result<Self> {
        match &episode.states {
            Some(states) => Self::from_states(states, masks, size),
            None => {
                let (states, _) = crate::envsim::replay_states(episode.subtask, episode.domain, episode.seed)?;
                if states.len() != episode.len() {
                    return Err(Error::Validation(
                        "replayed state count does not match episode length".into(),
                    ));
                }
                Self::from_states(&states, masks, size)
            }
        }
    }
}

impl Tracker for OracleTracker {
    fn name(&self) -> &str {
        "oracle"
    }

    fn track(&self, frames: &[Frame], initial: &[LabeledPoint]) -> Result<PointTrackSet> {
        let (h, w) = validate_track_inputs(frames, initial)?;
        for p in initial {
            let track = self.entity_px.get(&p.label).ok_or_else(|| {
                Error::Validation(format!("oracle tracker has no trajectory for entity {:?}", p.label))
            })?;
            if track.len() != frames.len() {
                return Err(Error::Validation("oracle trajectory length != frame count".into()));
            }
        }
        let set = assemble_tracks(initial, frames.len(), h, w, |jj, t, x, y| {
            let track = &self.entity_px[&initial[jj].label];
            let (cx0, cy0) = track[t];
            let (cx1, cy1) = track[t + 1];
            (x + (cx1 - cx0), y + (cy1 - cy0))
        });
        Ok(set)
    }
}

/// Exhaustive patch search: for each point, try every integer displacement in
/// a square window and keep the one with the lowest sum of squared
/// differences over a patch. Ties break toward the smallest displacement,
/// then row-major order.
pub struct BlockMatchTracker {
    pub radius: i64,
    pub patch: i64,
}

impl Default for BlockMatchTracker {
    fn default() -> Self {
        // Radius covers the maximum per-step motion (0.05 arena = 3.2 px at 64).
        BlockMatchTracker { radius: 5, patch: 7 }
    }
}

fn sample_clamped(f: &Frame, i: i64, j: i64, c: usize) -> f32 {
    let h = f.height() as i64;
    let w = f.width() as i64;
    f.pixels[[i.clamp(0, h - 1) as usize, j.clamp(0, w - 1) as usize, c]]
}

impl BlockMatchTracker {
    fn patch_ssd(&self, a: &Frame, b: &Frame, ai: i64, aj: i64, bi: i64, bj: i64) -> f64 {
        let half = self.patch / 2;
        let mut ssd = 0.0f64;
        for di in -half..=half {
            for dj in -half..=half {
                for c in 0..3 {
                    let va = sample_clamped(a, ai + di, aj + dj, c) as f64;
                    let vb = sample_clamped(b, bi + di, bj + dj, c) as f64;
                    ssd += (va - vb) * (va - vb);
                }
            }
        }
        ssd
    }
}

impl Tracker for BlockMatchTracker {
    fn name(&self) -> &str {
        "block_match"
    }

    fn track(&self, frames: &[Frame], initial: &[LabeledPoint]) -> Result<PointTrackSet> {
        let (h, w) = validate_track_inputs(frames, initial)?;
        let set = assemble_tracks(initial, frames.len(), h, w, |_, t, x, y| {
            let ci = y.round() as i64;
            let cj = x.round() as i64;
            let mut best: Option<(f64, i64, i64, i64)> = None; // (ssd, norm2, dy, dx)
            for dy in -self.radius..=self.radius {
                for dx in -self.radius..=self.radius {
                    let (ni, nj) = (ci + dy, cj + dx);
                    if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                        continue;
                    }
                    let ssd = self.patch_ssd(&frames[t], &frames[t + 1], ci, cj, ni, nj);
                    let norm2 = dx * dx + dy * dy;
                    let wins = match best {
                        None => true,
                        Some((bs, bn, _, _)) => ssd < bs || (ssd == bs && norm2 < bn),
                    };
                    if wins {
                        best = Some((ssd, norm2, dy, dx));
                    }
                }
            }
            let (_, _, dy, dx) = best.expect("window always contains the zero displacement");
            (x + dx as f32, y + dy as f32)
        });
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{
        check_success, generate_episode, oracle_ground, Domain, SubtaskKind, SubtaskSpec, TaskSpec,
    };
    use crate::flowtrace::sample_points;
    use ndarray::Array3;
    use rand::Rng;

    fn noise_frame(seed: u64, h: usize, w: usize, shift: (usize, usize)) -> Frame {
        // A fixed noise field viewed through a sliding window: pure integer
        // translation for everything away from the leading border.
        let mut rng = crate::rng::stream("test/noise", &[seed]);
        let big = 96usize;
        let field: Vec<f32> = (0..big * big * 3).map(|_| (rng.random_range(0..256) as f32) / 255.0).collect();
        let mut px = Array3::zeros((h, w, 3));
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    px[[i, j, c]] = field[((i + shift.0) * big + (j + shift.1)) * 3 + c];
                }
            }
        }
        Frame { pixels: px, timestamp: shift.0 }
    }

    #[test]
    fn static_scene_gives_constant_tracks() {
        let f = noise_frame(1, 48, 48, (0, 0));
        let frames = vec![f.clone(), f.clone(), f];
        let initial = vec![
            LabeledPoint { label: "object_1".into(), x: 20.0, y: 22.0 },
            LabeledPoint { label: "object_1".into(), x: 30.0, y: 10.0 },
        ];
        let tracker = BlockMatchTracker::default();
        let set = tracker.track(&frames, &initial).unwrap();
        for j in 0..2 {
            for t in 0..3 {
                assert_eq!(set.points[[j, t, 0]], initial[j].x);
                assert_eq!(set.points[[j, t, 1]], initial[j].y);
                assert!(set.visibility[[j, t]]);
            }
        }
    }

    #[test]
    fn integer_translation_is_recovered_exactly() {
        let (dy, dx) = (2usize, 3usize);
        let frames: Vec<Frame> = (0..4).map(|t| noise_frame(2, 48, 48, (t * dy, t * dx))).collect();
        // The window slides by (+dy, +dx), so scene content moves by (-dy, -dx).
        let initial = vec![LabeledPoint { label: "object_1".into(), x: 30.0, y: 32.0 }];
        let set = BlockMatchTracker::default().track(&frames, &initial).unwrap();
        for t in 0..4 {
            assert_eq!(set.points[[0, t, 0]], 30.0 - (t * dx) as f32, "t={t}");
            assert_eq!(set.points[[0, t, 1]], 32.0 - (t * dy) as f32, "t={t}");
        }
    }

    #[test]
    fn block_match_is_deterministic() {
        let frames: Vec<Frame> = (0..3).map(|t| noise_frame(5, 40, 40, (t, 2 * t))).collect();
        let initial = vec![LabeledPoint { label: "object_1".into(), x: 20.0, y: 20.0 }];
        let t = BlockMatchTracker::default();
        assert_eq!(t.track(&frames, &initial).unwrap(), t.track(&frames, &initial).unwrap());
    }

    #[test]
    fn oracle_tracks_follow_entity_motion_with_constant_offset() {
        let e = generate_episode(TaskSpec { kind: SubtaskKind::Pick, domain: Domain::Target }, 11).unwrap();
        let states = e.states.as_ref().unwrap();
        let spec = SubtaskSpec::new(e.subtask, e.target_color);
        assert!(check_success(states.last().unwrap(), &spec).unwrap());
        let size = RenderSize::default();
        let masks = oracle_ground(&states[0], &e.instruction, size).unwrap();
        let tracker = OracleTracker::for_episode(&e, &masks, size).unwrap();
        let initial = sample_points(&masks, 4.0, 64, 0).unwrap();
        let set = tracker.track(&e.frames, &initial).unwrap();
        set.validate(64, 64).unwrap();

        for (j, p) in initial.iter().enumerate() {
            let binding = masks.bindings[&p.label];
            for (t, s) in states.iter().enumerate() {
                if !set.visibility[[j, t]] {
                    continue;
                }
                let center = match binding {
                    EntityBinding::Manipulator => s.manip_pos,
                    EntityBinding::Object(c) => s.object(c).unwrap().pos,
                };
                let (cx, cy) = arena_to_px(center, size);
                let (ox, oy) = (set.points[[j, t, 0]] - cx, set.points[[j, t, 1]] - cy);
                let (cx0, cy0) = arena_to_px(
                    match binding {
                        EntityBinding::Manipulator => states[0].manip_pos,
                        EntityBinding::Object(c) => states[0].object(c).unwrap().pos,
                    },
                    size,
                );
                let (ox0, oy0) = (p.x - cx0, p.y - cy0);
                assert!(
                    (ox - ox0).abs() <= 0.5 && (oy - oy0).abs() <= 0.5,
                    "offset drift for point {j} frame {t}: ({ox}, {oy}) vs ({ox0}, {oy0})"
                );
            }
        }
    }

    #[test]
    fn source_episode_oracle_tracking_via_replay() {
        let e = generate_episode(TaskSpec { kind: SubtaskKind::PushToZone, domain: Domain::Source }, 21).unwrap();
        assert!(e.states.is_none());
        let size = RenderSize::default();
        let (states, _) = crate::envsim::replay_states(e.subtask, e.domain, e.seed).unwrap();
        let masks = oracle_ground(&states[0], &e.instruction, size).unwrap();
        let tracker = OracleTracker::for_episode(&e, &masks, size).unwrap();
        let initial = sample_points(&masks, 4.0, 64, e.seed).unwrap();
        let set = tracker.track(&e.frames, &initial).unwrap();
        assert_eq!(set.n_frames(), e.len());
        assert_eq!(set.n_points(), initial.len());
        // Identity conservation: labels never change, J constant over time.
        assert_eq!(set.entity_of_point, initial.iter().map(|p| p.label.clone()).collect::<Vec<_>>());
    }
}
