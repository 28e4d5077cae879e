//! Step-at-a-time tracking for closed-loop rollouts. Same policies as the
//! batch trackers: rigid ground-truth advection or block matching, with the
//! out-of-frame freeze rule.

use crate::envsim::{arena_to_px, EntityBinding, EntityMaskSet, Frame, RenderSize, WorldState};
use crate::error::{Error, Result};

use super::{BlockMatchTracker, LabeledPoint, Tracker};

enum Mode {
    /// Points ride their entity at a fixed pixel offset.
    Oracle { bindings: Vec<EntityBinding> },
    /// Patch search between consecutive frames.
    BlockMatch { tracker: BlockMatchTracker, prev: Frame },
}

pub struct OnlineTracker {
    points: Vec<[f32; 2]>,
    offsets: Vec<[f32; 2]>,
    visible: Vec<bool>,
    size: RenderSize,
    mode: Mode,
}

impl OnlineTracker {
    pub fn new_oracle(
        initial: &[LabeledPoint],
        masks: &EntityMaskSet,
        state0: &WorldState,
        size: RenderSize,
    ) -> Result<Self> {
        let mut bindings = Vec::with_capacity(initial.len());
        let mut offsets = Vec::with_capacity(initial.len());
        for p in initial {
            let binding = *masks
                .bindings
                .get(&p.label)
                .ok_or_else(|| Error::Validation(format!("no binding for entity {:?}", p.label)))?;
            let center = match binding {
                EntityBinding::Manipulator => state0.manip_pos,
                EntityBinding::Object(c) => {
                    state0
                        .object(c)
                        .ok_or_else(|| Error::Validation(format!("{:?} missing from state", c)))?
                        .pos
                }
            };
            let (cx, cy) = arena_to_px(center, size);
            bindings.push(binding);
            offsets.push([p.x - cx, p.y - cy]);
        }
        Ok(OnlineTracker {
            points: initial.iter().map(|p| [p.x, p.y]).collect(),
            offsets,
            visible: vec![true; initial.len()],
            size,
            mode: Mode::Oracle { bindings },
        })
    }

    pub fn new_block_match(initial: &[LabeledPoint], frame0: Frame, size: RenderSize) -> Self {
        OnlineTracker {
            points: initial.iter().map(|p| [p.x, p.y]).collect(),
            offsets: vec![[0.0, 0.0]; initial.len()],
            visible: vec![true; initial.len()],
            size,
            mode: Mode::BlockMatch { tracker: BlockMatchTracker::default(), prev: frame0 },
        }
    }

    /// Advance to the next observation. The oracle mode reads the new world
    /// state; block matching reads the new frame.
    pub fn advance(&mut self, state: &WorldState, frame: &Frame) -> Result<()> {
        let (w, h) = (self.size.w, self.size.h);
        let in_frame =
            |x: f32, y: f32| (0.0..=(w - 1) as f32).contains(&x) && (0.0..=(h - 1) as f32).contains(&y);
        match &mut self.mode {
            Mode::Oracle { bindings } => {
                for j in 0..self.points.len() {
                    if !self.visible[j] {
                        continue;
                    }
                    let center = match bindings[j] {
                        EntityBinding::Manipulator => state.manip_pos,
                        EntityBinding::Object(c) => {
                            state
                                .object(c)
                                .ok_or_else(|| Error::Validation("tracked object vanished".into()))?
                                .pos
                        }
                    };
                    let (cx, cy) = arena_to_px(center, self.size);
                    let (nx, ny) = (cx + self.offsets[j][0], cy + self.offsets[j][1]);
                    if in_frame(nx, ny) {
                        self.points[j] = [nx, ny];
                    } else {
                        self.visible[j] = false;
                    }
                }
            }
            Mode::BlockMatch { tracker, prev } => {
                for j in 0..self.points.len() {
                    if !self.visible[j] {
                        continue;
                    }
                    let [x, y] = self.points[j];
                    let frames = [prev.clone(), frame.clone()];
                    let lp = vec![LabeledPoint { label: "p".into(), x, y }];
                    let set = tracker.track(&frames, &lp)?;
                    let (nx, ny) = (set.points[[0, 1, 0]], set.points[[0, 1, 1]]);
                    if set.visibility[[0, 1]] && in_frame(nx, ny) {
                        self.points[j] = [nx, ny];
                    } else {
                        self.visible[j] = false;
                    }
                }
                *prev = frame.clone();
            }
        }
        Ok(())
    }

    pub fn points(&self) -> &[[f32; 2]] {
        &self.points
    }
}
