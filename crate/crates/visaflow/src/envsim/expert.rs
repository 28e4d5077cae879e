//! Layout sampling, the scripted expert, and episode generation.
//!
//! Everything here is a pure function of (task spec, seed). Layouts and the
//! expert trajectory do not depend on the domain tag, so a (subtask, seed)
//! pair yields matched source/target episodes that differ only in rendering
//! and in which fields the episode keeps.

use rand::Rng;

use super::{
    check_success, render, step, Action, Domain, Episode, GripperCmd, ObjColor, ObjShape, Rect,
    RenderSize, SceneObject, SubtaskKind, SubtaskSpec, TaskSpec, Vec2, WorldState, Zone,
    ATTACH_RADIUS, MAX_DELTA, STEP_CAP,
};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Distance at which the expert issues the close command while approaching.
const CLOSE_DIST: f32 = 0.036;
/// Zone shrink margin the expert aims for before releasing (place) so the
/// success predicate holds with slack.
const PLACE_MARGIN: f32 = 0.025;
/// Minimum initial manipulator-object distance; keeps tasks unsolved at t=0
/// and episodes long enough to carry training windows.
const MIN_START_DIST: f32 = 0.25;

#[derive(Debug, Clone)]
pub struct ExpertRun {
    pub states: Vec<WorldState>,
    pub actions: Vec<Action>,
    pub instruction: String,
    pub spec: SubtaskSpec,
    pub domain: Domain,
    pub seed: u64,
}

fn sample_layout<R: Rng>(rng: &mut R, domain: Domain) -> Result<WorldState> {
    let zone = Zone {
        id: "zone".into(),
        rect: Rect {
            cx: rng.random_range(0.22..0.78),
            cy: rng.random_range(0.22..0.78),
            half_w: 0.12,
            half_h: 0.12,
        },
    };
    let manip = Vec2::new(rng.random_range(0.08..0.92), rng.random_range(0.08..0.92));
    let shapes = [ObjShape::Square, ObjShape::Circle, ObjShape::Triangle];
    let mut objects: Vec<SceneObject> = Vec::new();
    for color in ObjColor::all() {
        let shape = shapes[rng.random_range(0..3)];
        let mut placed = false;
        for _ in 0..1000 {
            let pos = Vec2::new(rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
            let expanded = Rect {
                half_w: zone.rect.half_w + ATTACH_RADIUS,
                half_h: zone.rect.half_h + ATTACH_RADIUS,
                ..zone.rect
            };
            let clear_of_zone = !expanded.contains(pos);
            let clear_of_manip = pos.dist(manip) >= MIN_START_DIST;
            let clear_of_others = objects.iter().all(|o| o.pos.dist(pos) >= 0.18);
            if clear_of_zone && clear_of_manip && clear_of_others {
                objects.push(SceneObject {
                    id: format!("{}_block", color.word()),
                    shape,
                    color,
                    pos,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Expert("layout rejection sampling exhausted".into()));
        }
    }
    Ok(WorldState {
        manip_pos: manip,
        gripper_closed: false,
        objects,
        zones: vec![zone],
        domain,
        step_index: 0,
    })
}

fn toward(from: Vec2, to: Vec2) -> [f32; 2] {
    [
        (to.x - from.x).clamp(-MAX_DELTA, MAX_DELTA),
        (to.y - from.y).clamp(-MAX_DELTA, MAX_DELTA),
    ]
}

/// Proportional controller toward per-subtask waypoints with gripper toggles
/// at proximity thresholds.
pub fn expert_action(state: &WorldState, spec: &SubtaskSpec) -> Result<Action> {
    let obj = state
        .object(spec.target)
        .ok_or_else(|| Error::Config(format!("no {} object in scene", spec.target.word())))?;
    let zone = state.zones.first().ok_or_else(|| Error::Config("scene has no zone".into()))?;
    let manip = state.manip_pos;
    let dist = manip.dist(obj.pos);
    let holding = state.gripper_closed && dist <= ATTACH_RADIUS;

    let action = match spec.kind {
        SubtaskKind::Reach => Action { arm_delta: toward(manip, obj.pos), gripper_cmd: GripperCmd::Open },
        SubtaskKind::Pick => {
            let cmd = if dist <= CLOSE_DIST { GripperCmd::Close } else { GripperCmd::Open };
            Action { arm_delta: toward(manip, obj.pos), gripper_cmd: cmd }
        }
        SubtaskKind::PushToZone | SubtaskKind::Place => {
            if !holding {
                let cmd = if dist <= CLOSE_DIST { GripperCmd::Close } else { GripperCmd::Open };
                Action { arm_delta: toward(manip, obj.pos), gripper_cmd: cmd }
            } else {
                let inner = Rect {
                    half_w: zone.rect.half_w - PLACE_MARGIN,
                    half_h: zone.rect.half_h - PLACE_MARGIN,
                    ..zone.rect
                };
                if spec.kind == SubtaskKind::Place && inner.contains(obj.pos) {
                    // Release in place; success needs an open gripper.
                    Action { arm_delta: [0.0, 0.0], gripper_cmd: GripperCmd::Open }
                } else {
                    // Steer so the held object (at a fixed grab offset) lands
                    // on the zone center.
                    let aim = zone.rect.center().add(manip.sub(obj.pos));
                    Action { arm_delta: toward(manip, aim), gripper_cmd: GripperCmd::Close }
                }
            }
        }
    };
    Ok(action)
}

/// Roll the scripted expert from a seeded layout until success or step cap.
pub fn run_expert(task: TaskSpec, seed: u64) -> Result<ExpertRun> {
    let mut rng = stream("env/episode", &[task.kind.index(), seed]);
    let state0 = sample_layout(&mut rng, task.domain)?;
    let target = ObjColor::all()[rng.random_range(0..2)];
    let template_idx = rng.random_range(0..3usize);
    let spec = SubtaskSpec::new(task.kind, target);
    let instruction = spec.instruction(template_idx);

    let mut states = vec![state0];
    let mut actions = Vec::new();
    loop {
        let last = states.last().unwrap();
        if check_success(last, &spec)? {
            break;
        }
        if actions.len() >= STEP_CAP {
            return Err(Error::Expert(format!(
                "no success within {STEP_CAP} steps ({} seed {seed})",
                task.kind.as_str()
            )));
        }
        let a = expert_action(last, &spec)?;
        let next = step(last, &a)?;
        actions.push(a);
        states.push(next);
    }
    Ok(ExpertRun { states, actions, instruction, spec, domain: task.domain, seed })
}

/// Deterministically regenerate the ground-truth states of an episode.
/// Oracle grounding/tracking of action-free source videos runs through this.
pub fn replay_states(kind: SubtaskKind, domain: Domain, seed: u64) -> Result<(Vec<WorldState>, SubtaskSpec)> {
    let run = run_expert(TaskSpec { kind, domain }, seed)?;
    Ok((run.states, run.spec))
}

/// Fresh seeded layout for evaluation rollouts, drawn from the same
/// distribution as episode layouts but a disjoint stream.
pub fn sample_eval_layout(seed: u64, domain: Domain) -> Result<WorldState> {
    let mut rng = stream("env/eval-layout", &[seed]);
    sample_layout(&mut rng, domain)
}

/// Generate one episode. Target episodes carry states/actions; source
/// episodes carry frames + instruction only.
pub fn generate_episode(task: TaskSpec, seed: u64) -> Result<Episode> {
    let run = run_expert(task, seed)?;
    let size = RenderSize::default();
    let frames: Vec<_> = run.states.iter().map(|s| render(s, size)).collect();
    let t = frames.len();
    let progress: Vec<f32> = (0..t).map(|i| i as f32 / (t - 1) as f32).collect();
    let episode = Episode {
        frames,
        instruction: run.instruction,
        states: match task.domain {
            Domain::Target => Some(run.states),
            Domain::Source => None,
        },
        actions: match task.domain {
            Domain::Target => Some(run.actions),
            Domain::Source => None,
        },
        subtask: task.kind,
        target_color: run.spec.target,
        domain: task.domain,
        progress,
        seed,
    };
    episode.validate()?;
    Ok(episode)
}
