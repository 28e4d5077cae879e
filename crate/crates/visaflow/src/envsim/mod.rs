//! Deterministic 2D two-domain manipulation world.
//!
//! The arena is the unit square. The source domain renders a hand-styled
//! manipulator over a textured background and produces action-free videos;
//! the target domain renders a gripper-styled manipulator and produces full
//! state/action demonstrations. Layout sampling is domain-independent, so
//! matched (subtask, seed) pairs differ only in rendering — the nuisance
//! variation the flow representation is supposed to suppress.

mod expert;
mod render;

pub use expert::{generate_episode, replay_states, run_expert, sample_eval_layout, ExpertRun};
pub use render::{render, render_entity_mask, RenderSize};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Arena-fraction step bound per action component.
pub const MAX_DELTA: f32 = 0.05;
/// Gripper-object distance below which a closed gripper attaches the object.
pub const ATTACH_RADIUS: f32 = 0.06;
/// Success tolerance for the reach subtask.
pub const REACH_TOL: f32 = 0.05;
/// Per-subtask step cap; an expert or policy that has not succeeded by now fails.
pub const STEP_CAP: usize = 120;
/// Default frame edge in pixels.
pub const FRAME_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Config(format!("unknown domain {other:?}"))),
        }
    }

    pub fn index(&self) -> u64 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f32,
    pub y: f32,
}

impl Vec2 {
    pub fn new(x: f32, y: f32) -> Self {
        Vec2 { x, y }
    }

    pub fn dist(&self, o: Vec2) -> f32 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2)).sqrt()
    }

    pub fn add(&self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(&self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    pub fn clamp_unit(&self) -> Vec2 {
        Vec2::new(self.x.clamp(0.0, 1.0), self.y.clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjColor {
    Red,
    Blue,
}

impl ObjColor {
    pub fn word(&self) -> &'static str {
        match self {
            ObjColor::Red => "red",
            ObjColor::Blue => "blue",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "red" => Ok(ObjColor::Red),
            "blue" => Ok(ObjColor::Blue),
            other => Err(Error::Config(format!("unknown color {other:?}"))),
        }
    }

    pub fn all() -> [ObjColor; 2] {
        [ObjColor::Red, ObjColor::Blue]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjShape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    pub shape: ObjShape,
    pub color: ObjColor,
    pub pos: Vec2,
}

/// Axis-aligned rectangle stored as center + half extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub cx: f32,
    pub cy: f32,
    pub half_w: f32,
    pub half_h: f32,
}

impl Rect {
    pub fn contains(&self, p: Vec2) -> bool {
        (p.x - self.cx).abs() <= self.half_w && (p.y - self.cy).abs() <= self.half_h
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(self.cx, self.cy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: String,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub manip_pos: Vec2,
    pub gripper_closed: bool,
    pub objects: Vec<SceneObject>,
    pub zones: Vec<Zone>,
    pub domain: Domain,
    pub step_index: usize,
}

impl WorldState {
    pub fn object(&self, color: ObjColor) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.color == color)
    }

    /// Proprioceptive state vector fed to the policy: (x, y, gripper flag).
    pub fn proprio(&self) -> [f32; 3] {
        [self.manip_pos.x, self.manip_pos.y, if self.gripper_closed { 1.0 } else { 0.0 }]
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |p: Vec2| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y);
        if !in_unit(self.manip_pos) {
            return Err(Error::Validation("manipulator outside arena".into()));
        }
        let mut ids = std::collections::HashSet::new();
        for o in &self.objects {
            if !in_unit(o.pos) {
                return Err(Error::Validation(format!("object {} outside arena", o.id)));
            }
            if !ids.insert(&o.id) {
                return Err(Error::Validation(format!("duplicate object id {}", o.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperCmd {
    Open,
    Close,
}

impl GripperCmd {
    pub fn as_f32(&self) -> f32 {
        match self {
            GripperCmd::Open => 0.0,
            GripperCmd::Close => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub arm_delta: [f32; 2],
    pub gripper_cmd: GripperCmd,
}

impl Action {
    pub fn new(dx: f32, dy: f32, gripper_cmd: GripperCmd) -> Self {
        Action { arm_delta: [dx, dy], gripper_cmd }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, d) in self.arm_delta.iter().enumerate() {
            if !d.is_finite() || d.abs() > MAX_DELTA + 1e-6 {
                return Err(Error::Validation(format!(
                    "arm_delta[{i}] = {d} outside [-{MAX_DELTA}, {MAX_DELTA}]"
                )));
            }
        }
        Ok(())
    }
}

/// Rendered observation: H x W x 3 reals in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: Array3<f32>,
    pub timestamp: usize,
}

impl Frame {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtaskKind {
    Reach,
    PushToZone,
    Pick,
    Place,
}

impl SubtaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SubtaskKind::Reach => "reach",
            SubtaskKind::PushToZone => "push_to_zone",
            SubtaskKind::Pick => "pick",
            SubtaskKind::Place => "place",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reach" => Ok(SubtaskKind::Reach),
            "push_to_zone" => Ok(SubtaskKind::PushToZone),
            "pick" => Ok(SubtaskKind::Pick),
            "place" => Ok(SubtaskKind::Place),
            other => Err(Error::Config(format!("unknown subtask {other:?}"))),
        }
    }

    pub fn all() -> [SubtaskKind; 4] {
        [SubtaskKind::Reach, SubtaskKind::PushToZone, SubtaskKind::Pick, SubtaskKind::Place]
    }

    pub fn index(&self) -> u64 {
        Self::all().iter().position(|k| k == self).unwrap() as u64
    }

    /// Instruction templates; `{color}` is filled with the target color word.
    pub fn templates(&self) -> [&'static str; 3] {
        match self {
            SubtaskKind::Reach => [
                "reach the {color} block",
                "move to the {color} block",
                "go to the {color} block",
            ],
            SubtaskKind::PushToZone => [
                "push the {color} block into the zone",
                "slide the {color} block into the zone",
                "shove the {color} block into the zone",
            ],
            SubtaskKind::Pick => [
                "pick up the {color} block",
                "grasp the {color} block",
                "lift the {color} block",
            ],
            SubtaskKind::Place => [
                "place the {color} block in the zone",
                "put the {color} block in the zone",
                "set the {color} block in the zone",
            ],
        }
    }
}

/// A concrete subtask instance: kind plus the object it refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskSpec {
    pub kind: SubtaskKind,
    pub target: ObjColor,
}

impl SubtaskSpec {
    pub fn new(kind: SubtaskKind, target: ObjColor) -> Self {
        SubtaskSpec { kind, target }
    }

    pub fn instruction(&self, template_idx: usize) -> String {
        self.kind.templates()[template_idx % 3].replace("{color}", self.target.word())
    }
}

/// What to generate: one registered subtask in one domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: SubtaskKind,
    pub domain: Domain,
}

/// One demonstration. Source-domain episodes carry frames + instruction only.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub frames: Vec<Frame>,
    pub instruction: String,
    pub states: Option<Vec<WorldState>>,
    pub actions: Option<Vec<Action>>,
    pub subtask: SubtaskKind,
    pub target_color: ObjColor,
    pub domain: Domain,
    pub progress: Vec<f32>,
    pub seed: u64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if self.progress.len() != t {
            return Err(Error::Validation("progress length != frame count".into()));
        }
        match self.domain {
            Domain::Source => {
                if self.actions.is_some() {
                    return Err(Error::Validation("source episode carries actions".into()));
                }
            }
            Domain::Target => {
                let n_actions = self.actions.as_ref().map(|a| a.len());
                if n_actions != Some(t.saturating_sub(1)) {
                    return Err(Error::Validation("target episode needs len(actions) == len(frames) - 1".into()));
                }
                let n_states = self.states.as_ref().map(|s| s.len());
                if n_states != Some(t) {
                    return Err(Error::Validation("target episode needs len(states) == len(frames)".into()));
                }
            }
        }
        for w in self.progress.windows(2) {
            if w[1] < w[0] {
                return Err(Error::Validation("progress must be non-decreasing".into()));
            }
        }
        if let Some(last) = self.progress.last() {
            if (last - 1.0).abs() > 1e-6 {
                return Err(Error::Validation("progress must end at 1.0".into()));
            }
        }
        Ok(())
    }
}

/// Advance the world by one action. A closed gripper within
/// [`ATTACH_RADIUS`] of an object drags it rigidly (clipped to the arena).
pub fn step(state: &WorldState, action: &Action) -> Result<WorldState> {
    action.validate()?;
    let mut next = state.clone();
    next.gripper_closed = action.gripper_cmd == GripperCmd::Close;

    let proposed = Vec2::new(
        state.manip_pos.x + action.arm_delta[0],
        state.manip_pos.y + action.arm_delta[1],
    );
    let new_pos = proposed.clamp_unit();
    let disp = new_pos.sub(state.manip_pos);

    // Attachment is evaluated against the pre-move pose; nearest object wins,
    // ties broken by id order.
    if next.gripper_closed {
        let mut best: Option<(usize, f32)> = None;
        for (i, o) in state.objects.iter().enumerate() {
            let d = o.pos.dist(state.manip_pos);
            if d <= ATTACH_RADIUS {
                let better = match best {
                    None => true,
                    Some((bi, bd)) => d < bd || (d == bd && state.objects[i].id < state.objects[bi].id),
                };
                if better {
                    best = Some((i, d));
                }
            }
        }
        if let Some((i, _)) = best {
            next.objects[i].pos = next.objects[i].pos.add(disp).clamp_unit();
        }
    }

    next.manip_pos = new_pos;
    next.step_index = state.step_index + 1;
    Ok(next)
}

/// Ground-truth success predicate for one subtask instance.
pub fn check_success(state: &WorldState, spec: &SubtaskSpec) -> Result<bool> {
    let obj = state
        .object(spec.target)
        .ok_or_else(|| Error::Config(format!("no {} object in scene", spec.target.word())))?;
    let zone = state
        .zones
        .first()
        .ok_or_else(|| Error::Config("scene has no zone".into()))?;
    Ok(match spec.kind {
        SubtaskKind::Reach => state.manip_pos.dist(obj.pos) <= REACH_TOL,
        SubtaskKind::Pick => state.gripper_closed && state.manip_pos.dist(obj.pos) <= ATTACH_RADIUS,
        SubtaskKind::PushToZone => zone.rect.contains(obj.pos),
        SubtaskKind::Place => zone.rect.contains(obj.pos) && !state.gripper_closed,
    })
}

/// Binding of a mask label to the scene entity it was grounded from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntityBinding {
    Manipulator,
    Object(ObjColor),
}

/// One binary mask per grounded entity, labeled `manipulator` / `object_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityMaskSet {
    pub masks: BTreeMap<String, Array2<bool>>,
    pub bindings: BTreeMap<String, EntityBinding>,
    pub frame_index: usize,
}

impl EntityMaskSet {
    pub fn height(&self) -> usize {
        self.masks.values().next().map(|m| m.shape()[0]).unwrap_or(0)
    }

    pub fn width(&self) -> usize {
        self.masks.values().next().map(|m| m.shape()[1]).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for (label, m) in &self.masks {
            if m.shape() != [h, w] {
                return Err(Error::Validation(format!("mask {label} has mismatched shape")));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::Validation(format!("mask {label} is empty")));
            }
        }
        Ok(())
    }
}

/// Ground-truth grounding: resolve instruction color nouns against the scene
/// and rasterize masks from geometry (stand-in for a VLM + segmenter).
pub fn oracle_ground(state: &WorldState, instruction: &str, size: RenderSize) -> Result<EntityMaskSet> {
    let mut mentioned: Vec<ObjColor> = Vec::new();
    for tok in instruction.split(|c: char| !c.is_alphanumeric()) {
        let color = match tok {
            "red" => Some(ObjColor::Red),
            "blue" => Some(ObjColor::Blue),
            _ => None,
        };
        if let Some(c) = color {
            if !mentioned.contains(&c) {
                mentioned.push(c);
            }
        }
    }
    if mentioned.is_empty() {
        return Err(Error::Grounding {
            noun: "<no object noun>".into(),
            context: instruction.to_string(),
        });
    }
    let mut masks = BTreeMap::new();
    let mut bindings = BTreeMap::new();
    for (k, color) in mentioned.iter().enumerate() {
        if state.object(*color).is_none() {
            return Err(Error::Grounding { noun: color.word().to_string(), context: instruction.to_string() });
        }
        let label = format!("object_{}", k + 1);
        masks.insert(label.clone(), render_entity_mask(state, EntityBinding::Object(*color), size));
        bindings.insert(label, EntityBinding::Object(*color));
    }
    masks.insert("manipulator".into(), render_entity_mask(state, EntityBinding::Manipulator, size));
    bindings.insert("manipulator".into(), EntityBinding::Manipulator);
    let set = EntityMaskSet { masks, bindings, frame_index: state.step_index };
    set.validate()?;
    Ok(set)
}

/// Pixel-center coordinate of the arena point `p` (x right, y down).
pub fn arena_to_px(p: Vec2, size: RenderSize) -> (f32, f32) {
    (p.x * size.w as f32 - 0.5, p.y * size.h as f32 - 0.5)
}

/// The closed instruction vocabulary: every (subtask, template, color)
/// combination, sorted. Language conditioning is an embedding lookup over
/// this list.
pub fn instruction_vocabulary() -> Vec<String> {
    let mut v = Vec::new();
    for kind in SubtaskKind::all() {
        for t in 0..3 {
            for color in ObjColor::all() {
                v.push(SubtaskSpec::new(kind, color).instruction(t));
            }
        }
    }
    v.sort();
    v.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_state() -> WorldState {
        WorldState {
            manip_pos: Vec2::new(0.2, 0.3),
            gripper_closed: false,
            objects: vec![
                SceneObject { id: "blue_block".into(), shape: ObjShape::Circle, color: ObjColor::Blue, pos: Vec2::new(0.7, 0.7) },
                SceneObject { id: "red_block".into(), shape: ObjShape::Square, color: ObjColor::Red, pos: Vec2::new(0.5, 0.5) },
            ],
            zones: vec![Zone { id: "zone".into(), rect: Rect { cx: 0.8, cy: 0.2, half_w: 0.12, half_h: 0.12 } }],
            domain: Domain::Target,
            step_index: 0,
        }
    }

    #[test]
    fn zero_delta_only_bumps_step_index() {
        let s = demo_state();
        let next = step(&s, &Action::new(0.0, 0.0, GripperCmd::Open)).unwrap();
        assert_eq!(next.manip_pos, s.manip_pos);
        assert_eq!(next.objects, s.objects);
        assert_eq!(next.step_index, s.step_index + 1);
    }

    #[test]
    fn manipulator_clips_to_arena() {
        let mut s = demo_state();
        s.manip_pos = Vec2::new(0.99, 0.5);
        let next = step(&s, &Action::new(0.05, 0.0, GripperCmd::Open)).unwrap();
        assert_eq!(next.manip_pos.x, 1.0);
    }

    #[test]
    fn out_of_bounds_action_rejected() {
        let s = demo_state();
        assert!(step(&s, &Action::new(0.06, 0.0, GripperCmd::Open)).is_err());
    }

    #[test]
    fn closed_gripper_drags_object() {
        let mut s = demo_state();
        s.manip_pos = Vec2::new(0.5, 0.5); // on the red block
        let grabbed = step(&s, &Action::new(0.03, 0.0, GripperCmd::Close)).unwrap();
        let red = grabbed.object(ObjColor::Red).unwrap();
        assert!((red.pos.x - 0.53).abs() < 1e-6);
        assert!((red.pos.y - 0.5).abs() < 1e-6);
        // Blue is out of reach and must not move.
        assert_eq!(grabbed.object(ObjColor::Blue).unwrap().pos, Vec2::new(0.7, 0.7));
    }

    #[test]
    fn open_gripper_never_drags() {
        let mut s = demo_state();
        s.manip_pos = Vec2::new(0.5, 0.5);
        let next = step(&s, &Action::new(0.03, 0.0, GripperCmd::Open)).unwrap();
        assert_eq!(next.object(ObjColor::Red).unwrap().pos, Vec2::new(0.5, 0.5));
    }

    #[test]
    fn success_predicates() {
        let mut s = demo_state();
        // Object exactly at zone center -> push succeeds.
        s.objects[1].pos = Vec2::new(0.8, 0.2);
        assert!(check_success(&s, &SubtaskSpec::new(SubtaskKind::PushToZone, ObjColor::Red)).unwrap());
        // Place additionally needs an open gripper.
        assert!(check_success(&s, &SubtaskSpec::new(SubtaskKind::Place, ObjColor::Red)).unwrap());
        s.gripper_closed = true;
        assert!(!check_success(&s, &SubtaskSpec::new(SubtaskKind::Place, ObjColor::Red)).unwrap());
        // Reach requires proximity.
        assert!(!check_success(&s, &SubtaskSpec::new(SubtaskKind::Reach, ObjColor::Blue)).unwrap());
        s.manip_pos = Vec2::new(0.7, 0.7);
        assert!(check_success(&s, &SubtaskSpec::new(SubtaskKind::Reach, ObjColor::Blue)).unwrap());
        // Pick: closed near the object.
        assert!(check_success(&s, &SubtaskSpec::new(SubtaskKind::Pick, ObjColor::Blue)).unwrap());
        s.gripper_closed = false;
        assert!(!check_success(&s, &SubtaskSpec::new(SubtaskKind::Pick, ObjColor::Blue)).unwrap());
    }

    #[test]
    fn unknown_subtask_is_config_error() {
        assert!(SubtaskKind::parse("juggle").is_err());
    }

    #[test]
    fn grounding_resolves_mentioned_colors() {
        let s = demo_state();
        let size = RenderSize::default();
        let set = oracle_ground(&s, "push the red block into the zone", size).unwrap();
        assert_eq!(set.masks.len(), 2);
        assert!(set.masks.contains_key("manipulator"));
        assert_eq!(set.bindings["object_1"], EntityBinding::Object(ObjColor::Red));

        let set2 = oracle_ground(&s, "move the red block to the blue block", size).unwrap();
        assert_eq!(set2.masks.len(), 3); // manipulator + 2 objects
    }

    #[test]
    fn grounding_unresolvable_noun_errors() {
        let mut s = demo_state();
        s.objects.retain(|o| o.color == ObjColor::Red);
        let err = oracle_ground(&s, "pick up the blue cup", RenderSize::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("blue"), "error should name the noun: {msg}");
    }
}
