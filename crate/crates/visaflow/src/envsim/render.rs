//! Deterministic rasterization of world states.
//!
//! Pixel (row i, col j) covers the arena point ((j+0.5)/W, (i+0.5)/H); a
//! shape owns a pixel iff it contains that center point. No anti-aliasing,
//! and every emitted channel value is k/255 for integer k, so frames survive
//! a u8 round trip on disk bit-exactly.
//!
//! Source and target differ in background texture, palette, and manipulator
//! glyph (hand vs gripper); object geometry is domain-independent.

use ndarray::{Array2, Array3};

use super::{Domain, EntityBinding, Frame, ObjShape, SceneObject, Vec2, WorldState};

/// Object half-extent in arena units (squares: half side; circles: radius).
pub const OBJ_HALF: f32 = 0.055;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderSize {
    pub h: usize,
    pub w: usize,
}

impl Default for RenderSize {
    fn default() -> Self {
        RenderSize { h: super::FRAME_SIZE, w: super::FRAME_SIZE }
    }
}

fn rgb(r: u8, g: u8, b: u8) -> [f32; 3] {
    [r as f32 / 255.0, g as f32 / 255.0, b as f32 / 255.0]
}

const RED: [u8; 3] = [220, 40, 40];
const BLUE: [u8; 3] = [40, 90, 220];
const GRIPPER: [u8; 3] = [208, 208, 216];
const HAND: [u8; 3] = [226, 176, 138];

fn object_color(o: &SceneObject) -> [f32; 3] {
    match o.color {
        super::ObjColor::Red => rgb(RED[0], RED[1], RED[2]),
        super::ObjColor::Blue => rgb(BLUE[0], BLUE[1], BLUE[2]),
    }
}

/// Uniform manipulator glyph color per domain.
pub fn manipulator_color(domain: Domain) -> [f32; 3] {
    match domain {
        Domain::Target => rgb(GRIPPER[0], GRIPPER[1], GRIPPER[2]),
        Domain::Source => rgb(HAND[0], HAND[1], HAND[2]),
    }
}

fn background(domain: Domain, i: usize, j: usize) -> [f32; 3] {
    match domain {
        Domain::Target => {
            let v = (36 + (i / 4) as u8).min(60);
            rgb(v, v, v + 8)
        }
        Domain::Source => {
            if (i / 8 + j / 8) % 2 == 0 {
                rgb(186, 178, 164)
            } else {
                rgb(168, 160, 148)
            }
        }
    }
}

fn zone_fill(domain: Domain) -> [f32; 3] {
    match domain {
        Domain::Target => rgb(58, 94, 58),
        Domain::Source => rgb(104, 126, 88),
    }
}

fn zone_outline(domain: Domain) -> [f32; 3] {
    match domain {
        Domain::Target => rgb(94, 138, 94),
        Domain::Source => rgb(140, 162, 124),
    }
}

fn shape_covers(shape: ObjShape, center: Vec2, p: Vec2) -> bool {
    let dx = p.x - center.x;
    let dy = p.y - center.y;
    match shape {
        ObjShape::Square => dx.abs() <= OBJ_HALF && dy.abs() <= OBJ_HALF,
        ObjShape::Circle => dx * dx + dy * dy <= OBJ_HALF * OBJ_HALF,
        ObjShape::Triangle => {
            // Up-pointing: apex at center.y - OBJ_HALF, base at center.y + OBJ_HALF.
            dy.abs() <= OBJ_HALF && dx.abs() <= (dy + OBJ_HALF) * 0.5
        }
    }
}

fn gripper_covers(pose: Vec2, closed: bool, p: Vec2) -> bool {
    let dx = p.x - pose.x;
    let dy = p.y - pose.y;
    // Crossbar above the tool point, two prongs descending to it.
    let bar = dx.abs() <= 0.055 && (-0.065..=-0.035).contains(&dy);
    let gap = if closed { 0.022 } else { 0.042 };
    let prong = ((dx - gap).abs() <= 0.012 || (dx + gap).abs() <= 0.012) && (-0.035..=0.035).contains(&dy);
    bar || prong
}

fn hand_covers(pose: Vec2, closed: bool, p: Vec2) -> bool {
    let palm_r = 0.045;
    let dxp = p.x - pose.x;
    let dyp = p.y - pose.y;
    if dxp * dxp + dyp * dyp <= palm_r * palm_r {
        return true;
    }
    // Three finger pads fanned upward; they pull in when the hand closes.
    let reach = if closed { 0.034 } else { 0.058 };
    let finger_r = 0.018;
    for angle_deg in [60.0f32, 90.0, 120.0] {
        let a = angle_deg.to_radians();
        let fx = pose.x + reach * a.cos();
        let fy = pose.y - reach * a.sin();
        let dx = p.x - fx;
        let dy = p.y - fy;
        if dx * dx + dy * dy <= finger_r * finger_r {
            return true;
        }
    }
    false
}

fn manipulator_covers(state: &WorldState, p: Vec2) -> bool {
    match state.domain {
        Domain::Target => gripper_covers(state.manip_pos, state.gripper_closed, p),
        Domain::Source => hand_covers(state.manip_pos, state.gripper_closed, p),
    }
}

fn pixel_center(i: usize, j: usize, size: RenderSize) -> Vec2 {
    Vec2::new((j as f32 + 0.5) / size.w as f32, (i as f32 + 0.5) / size.h as f32)
}

/// Rasterize a world state. Draw order: background, zone, objects, manipulator.
pub fn render(state: &WorldState, size: RenderSize) -> Frame {
    let mut pixels = Array3::zeros((size.h, size.w, 3));
    for i in 0..size.h {
        for j in 0..size.w {
            let p = pixel_center(i, j, size);
            let mut c = background(state.domain, i, j);
            for zone in &state.zones {
                if zone.rect.contains(p) {
                    let inner = super::Rect {
                        half_w: zone.rect.half_w - 0.015,
                        half_h: zone.rect.half_h - 0.015,
                        ..zone.rect
                    };
                    c = if inner.contains(p) { zone_fill(state.domain) } else { zone_outline(state.domain) };
                }
            }
            for o in &state.objects {
                if shape_covers(o.shape, o.pos, p) {
                    c = object_color(o);
                }
            }
            if manipulator_covers(state, p) {
                c = manipulator_color(state.domain);
            }
            for (ch, v) in c.iter().enumerate() {
                pixels[[i, j, ch]] = *v;
            }
        }
    }
    Frame { pixels, timestamp: state.step_index }
}

/// Pure geometry mask for one entity — the ground-truth segmenter.
pub fn render_entity_mask(state: &WorldState, binding: EntityBinding, size: RenderSize) -> Array2<bool> {
    let mut mask = Array2::from_elem((size.h, size.w), false);
    for i in 0..size.h {
        for j in 0..size.w {
            let p = pixel_center(i, j, size);
            let covered = match binding {
                EntityBinding::Manipulator => manipulator_covers(state, p),
                EntityBinding::Object(color) => state
                    .object(color)
                    .map(|o| shape_covers(o.shape, o.pos, p))
                    .unwrap_or(false),
            };
            mask[[i, j]] = covered;
        }
    }
    mask
}
