//! Deterministic 2-D tabletop simulator: scene state, action mechanics, a
//! scripted expert per task template, a milestone oracle, and a software
//! renderer producing RGB frames in [0, 1].
//!
//! The world is a unit square viewed top-down, y growing downward. A drawer
//! analog sits along the top edge; objects live on the table below it. The
//! gripper carries a height channel `z` that gates grasping, and orientation
//! slot `theta_zx` knocks over or rights a held object.

use crate::actionspace::{ActionVector, Mode};
use crate::config::EnvConfig;
use crate::error::{Error, Result};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const Z_TABLE: f64 = 0.15;
pub const Z_LIFT: f64 = 0.6;
pub const KNOCK_ANGLE: f64 = 1.0;
pub const UPRIGHT_ANGLE: f64 = 0.3;
const Z_GRASP_MAX: f64 = 0.35;
const Z_HANDLE_MAX: f64 = 0.5;
const Z_APPROACH: f64 = 0.25;
const Z_CARRY: f64 = 0.45;
const Z_PICK_RAISE: f64 = 0.8;
const ANG_RATE: f64 = 6.25;
const CLOSE_RATE: f64 = 12.0;
const NEAR_RADIUS: f64 = 0.20;
const DRAWER_X0: f64 = 0.35;
const DRAWER_X1: f64 = 0.65;
const DRAWER_TOP: f64 = 0.02;
const FRONT_Y_CLOSED: f64 = 0.20;
const FRONT_Y_OPEN: f64 = 0.30;
const PLACE_X: (f64, f64) = (0.15, 0.85);
const PLACE_Y: (f64, f64) = (0.38, 0.85);
const MIN_SEP: f64 = 0.16;
const TASK_PAIR_SEP: f64 = 0.30;
const HOME: [f64; 3] = [0.5, 0.92, 0.8];
const MIN_TARGET_DIST: f64 = 0.35;
const THETA_INIT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Cube,
    Can,
    Bottle,
    Block,
    Ball,
    Cup,
}

impl Shape {
    pub fn all() -> [Shape; 6] {
        [Shape::Cube, Shape::Can, Shape::Bottle, Shape::Block, Shape::Ball, Shape::Cup]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Shape::Cube => "cube",
            Shape::Can => "can",
            Shape::Bottle => "bottle",
            Shape::Block => "block",
            Shape::Ball => "ball",
            Shape::Cup => "cup",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl ColorName {
    pub fn all() -> [ColorName; 6] {
        [
            ColorName::Red,
            ColorName::Green,
            ColorName::Blue,
            ColorName::Yellow,
            ColorName::Purple,
            ColorName::Orange,
        ]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::Purple => "purple",
            ColorName::Orange => "orange",
        }
    }

    pub fn rgb(&self) -> [f64; 3] {
        match self {
            ColorName::Red => [0.85, 0.12, 0.12],
            ColorName::Green => [0.10, 0.65, 0.15],
            ColorName::Blue => [0.15, 0.25, 0.85],
            ColorName::Yellow => [0.90, 0.85, 0.10],
            ColorName::Purple => [0.55, 0.15, 0.70],
            ColorName::Orange => [0.95, 0.55, 0.10],
        }
    }
}

/// A catalog entry: one shape in one color. Scenes hold at most one object
/// per spec so instructions stay unambiguous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: ColorName,
}

impl ObjectSpec {
    pub fn new(color: ColorName, shape: Shape) -> ObjectSpec {
        ObjectSpec { shape, color }
    }

    pub fn phrase(&self) -> String {
        format!("{} {}", self.color.as_str(), self.shape.as_str())
    }
}

/// All shape and color combinations available to scene sampling.
pub fn catalog() -> Vec<ObjectSpec> {
    let mut out = Vec::new();
    for shape in Shape::all() {
        for color in ColorName::all() {
            out.push(ObjectSpec { shape, color });
        }
    }
    out
}

/// Every word that can appear in a rendered instruction.
pub fn vocabulary() -> Vec<&'static str> {
    let mut words = vec![
        "pick", "up", "the", "place", "on", "put", "into", "drawer", "open", "close", "move",
        "near", "knock", "over", "upright",
    ];
    for s in Shape::all() {
        words.push(s.as_str());
    }
    for c in ColorName::all() {
        words.push(c.as_str());
    }
    words
}

/// The eight task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Template {
    Pick,
    PickPlaceOn,
    PlaceInto,
    Open,
    Close,
    MoveNear,
    KnockOver,
    PlaceUpright,
}

impl Template {
    pub fn all() -> [Template; 8] {
        [
            Template::Pick,
            Template::PickPlaceOn,
            Template::PlaceInto,
            Template::Open,
            Template::Close,
            Template::MoveNear,
            Template::KnockOver,
            Template::PlaceUpright,
        ]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Template::Pick => "pick",
            Template::PickPlaceOn => "pick-place-on",
            Template::PlaceInto => "place-into",
            Template::Open => "open",
            Template::Close => "close",
            Template::MoveNear => "move-near",
            Template::KnockOver => "knock-over",
            Template::PlaceUpright => "place-upright",
        }
    }

    pub fn from_str(s: &str) -> Result<Template> {
        Template::all()
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task template {s:?}")))
    }

    fn needs_object(&self) -> bool {
        !matches!(self, Template::Open | Template::Close)
    }

    fn needs_target(&self) -> bool {
        matches!(self, Template::PickPlaceOn | Template::MoveNear)
    }
}

/// A grounded task: template plus argument objects and the instruction text
/// rendered from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub template: Template,
    pub object: Option<ObjectSpec>,
    pub target: Option<ObjectSpec>,
    pub instruction: String,
}

impl TaskSpec {
    pub fn new(
        template: Template,
        object: Option<ObjectSpec>,
        target: Option<ObjectSpec>,
    ) -> Result<TaskSpec> {
        if template.needs_object() != object.is_some() {
            return Err(Error::Config(format!(
                "template {} and object argument disagree",
                template.as_str()
            )));
        }
        if template.needs_target() != target.is_some() {
            return Err(Error::Config(format!(
                "template {} and target argument disagree",
                template.as_str()
            )));
        }
        if let (Some(a), Some(b)) = (object, target) {
            if a == b {
                return Err(Error::Config("object and target must differ".into()));
            }
        }
        let instruction = match template {
            Template::Pick => format!("pick up the {}", object.unwrap().phrase()),
            Template::PickPlaceOn => format!(
                "place the {} on the {}",
                object.unwrap().phrase(),
                target.unwrap().phrase()
            ),
            Template::PlaceInto => {
                format!("put the {} into the drawer", object.unwrap().phrase())
            }
            Template::Open => "open the drawer".to_string(),
            Template::Close => "close the drawer".to_string(),
            Template::MoveNear => format!(
                "move the {} near the {}",
                object.unwrap().phrase(),
                target.unwrap().phrase()
            ),
            Template::KnockOver => format!("knock over the {}", object.unwrap().phrase()),
            Template::PlaceUpright => {
                format!("place the {} upright", object.unwrap().phrase())
            }
        };
        Ok(TaskSpec { template, object, target, instruction })
    }

    /// Objects the scene must contain for this task.
    pub fn required_specs(&self) -> Vec<ObjectSpec> {
        self.object.iter().chain(self.target.iter()).cloned().collect()
    }
}

/// Visual and temporal identity of the demonstrating agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentStyle {
    pub name: String,
    pub hand_sprite: bool,
    /// 0 = cool robot palette, 1 = warm human palette.
    pub palette_warmth: f64,
    pub speed_factor: f64,
    pub camera_jitter: f64,
    pub background_texture: u8,
    /// Extra distractors added on top of the sampled count.
    pub distractor_count: usize,
}

impl EmbodimentStyle {
    pub fn robot() -> EmbodimentStyle {
        EmbodimentStyle {
            name: "robot".to_string(),
            hand_sprite: false,
            palette_warmth: 0.0,
            speed_factor: 1.0,
            camera_jitter: 0.0,
            background_texture: 0,
            distractor_count: 0,
        }
    }

    pub fn human_like(cfg: &EnvConfig) -> EmbodimentStyle {
        EmbodimentStyle {
            name: "human-like".to_string(),
            hand_sprite: true,
            palette_warmth: 1.0,
            speed_factor: cfg.human_speed_factor,
            camera_jitter: 0.012,
            background_texture: 1,
            distractor_count: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub spec: ObjectSpec,
    pub pos: [f64; 2],
    pub z: f64,
    pub upright: bool,
    pub deformable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    pub pos: [f64; 3],
    pub angles: [f64; 3],
    pub closedness: f64,
}

/// Complete simulator state. `speed` is the per-step displacement bound
/// copied from the style at reset so stepping needs no style argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub objects: Vec<SceneObject>,
    /// Drawer front position: 0 = closed, 1 = fully open.
    pub drawer_slide: f64,
    pub gripper: GripperState,
    pub held: Option<usize>,
    pub holding_handle: bool,
    pub seed: u64,
    pub step_count: usize,
    pub speed: f64,
    pub done: bool,
}

/// A named axis-aligned rectangle `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub name: String,
    pub rect: [f64; 4],
}

fn front_y(slide: f64) -> f64 {
    FRONT_Y_CLOSED + (FRONT_Y_OPEN - FRONT_Y_CLOSED) * slide
}

/// The drawer's grab point, at the middle of its front edge.
pub fn handle_point(slide: f64) -> [f64; 2] {
    [0.5 * (DRAWER_X0 + DRAWER_X1), front_y(slide)]
}

/// Interior cavity revealed by the slide; zero-height when closed.
pub fn drawer_interior(slide: f64) -> [f64; 4] {
    [DRAWER_X0 + 0.02, DRAWER_TOP + 0.02, DRAWER_X1 - 0.02, (front_y(slide) - 0.02).max(DRAWER_TOP + 0.02)]
}

fn in_rect(p: [f64; 2], r: [f64; 4]) -> bool {
    p[0] >= r[0] && p[0] <= r[2] && p[1] >= r[1] && p[1] <= r[3]
}

/// Live zone set for a state: the counter (whole table) and the drawer cavity.
pub fn zones(s: &SceneState) -> Vec<Zone> {
    vec![
        Zone { name: "counter".to_string(), rect: [0.0, FRONT_Y_OPEN, 1.0, 1.0] },
        Zone { name: "drawer".to_string(), rect: drawer_interior(s.drawer_slide) },
    ]
}

fn dist2d(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn find_object(s: &SceneState, spec: ObjectSpec) -> Option<usize> {
    s.objects.iter().position(|o| o.spec == spec)
}

/// Deterministic scene construction with an explicit distractor roster.
/// Required task objects come first; duplicates are rejected.
pub fn reset_with_roster(
    cfg: &EnvConfig,
    task: &TaskSpec,
    style: &EmbodimentStyle,
    seed: u64,
    distractors: &[ObjectSpec],
) -> Result<SceneState> {
    let mut roster = task.required_specs();
    for d in distractors {
        if roster.contains(d) {
            return Err(Error::Config(format!("duplicate object {} in scene", d.phrase())));
        }
        roster.push(*d);
    }
    let n_required = task.required_specs().len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<[f64; 2]> = Vec::new();
    for (i, _) in roster.iter().enumerate() {
        let mut placed = false;
        for _ in 0..2000 {
            let p = [
                rng.gen_range(PLACE_X.0..PLACE_X.1) * cfg.workspace,
                rng.gen_range(PLACE_Y.0..PLACE_Y.1) * cfg.workspace,
            ];
            let clear = positions.iter().all(|q| dist2d(p, *q) >= MIN_SEP);
            let far_enough =
                i != 0 || dist2d(p, [HOME[0], HOME[1]]) >= MIN_TARGET_DIST;
            // The manipulated object and its destination start well apart so
            // no task is satisfied at reset.
            let pair_ok =
                i != 1 || n_required < 2 || dist2d(p, positions[0]) >= TASK_PAIR_SEP;
            if clear && far_enough && pair_ok {
                positions.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place {} objects with seed {seed}",
                roster.len()
            )));
        }
    }
    let objects = roster
        .iter()
        .enumerate()
        .map(|(id, spec)| SceneObject {
            id,
            spec: *spec,
            pos: positions[id],
            z: Z_TABLE,
            upright: !(task.template == Template::PlaceUpright && id == 0),
            deformable: spec.shape == Shape::Cup,
        })
        .collect();
    let drawer_slide = match task.template {
        Template::Close | Template::PlaceInto => 1.0,
        _ => 0.0,
    };
    Ok(SceneState {
        objects,
        drawer_slide,
        gripper: GripperState {
            pos: HOME,
            angles: [0.0, 0.0, THETA_INIT],
            closedness: 0.0,
        },
        held: None,
        holding_handle: false,
        seed,
        step_count: 0,
        speed: cfg.robot_speed * style.speed_factor,
        done: false,
    })
}

/// Standard reset: required objects plus a seed-sampled number of catalog
/// distractors.
pub fn reset(
    cfg: &EnvConfig,
    task: &TaskSpec,
    style: &EmbodimentStyle,
    seed: u64,
) -> Result<SceneState> {
    let required = task.required_specs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let n = rng.gen_range(cfg.distractors_min..=cfg.distractors_max) + style.distractor_count;
    let pool: Vec<ObjectSpec> =
        catalog().into_iter().filter(|o| !required.contains(o)).collect();
    let mut extras = Vec::new();
    while extras.len() < n {
        let pick = pool[rng.gen_range(0..pool.len())];
        if !extras.contains(&pick) {
            extras.push(pick);
        }
    }
    reset_with_roster(cfg, task, style, seed, &extras)
}

fn approach(current: f64, target: f64, max_delta: f64) -> f64 {
    let d = target - current;
    current + d.clamp(-max_delta, max_delta)
}

/// Advances the state by one action. Pure: returns the successor state.
///
/// Terminate freezes the state permanently. Base slots are ignored; a
/// base-only action leaves the arm untouched. Arm motion is rate-limited,
/// closedness crossings trigger grasp and release, and the orientation slot
/// `theta_zx` knocks over (> 1) or rights (< 0.3) a held object.
pub fn step(cfg: &EnvConfig, s: &SceneState, a: &ActionVector) -> SceneState {
    let mut n = s.clone();
    if n.done {
        return n;
    }
    n.step_count += 1;
    if a.mode == Mode::Terminate {
        n.done = true;
        return n;
    }
    if a.mode == Mode::BaseOnly {
        return n;
    }
    let sp = n.speed;
    let g = &mut n.gripper;
    let dx = a.g_x - g.pos[0];
    let dy = a.g_y - g.pos[1];
    let norm = (dx * dx + dy * dy).sqrt();
    if norm > sp {
        g.pos[0] += dx / norm * sp;
        g.pos[1] += dy / norm * sp;
    } else {
        g.pos[0] = a.g_x;
        g.pos[1] = a.g_y;
    }
    g.pos[2] = approach(g.pos[2], a.g_z, sp);
    g.pos[0] = g.pos[0].clamp(0.0, cfg.workspace);
    g.pos[1] = g.pos[1].clamp(0.0, cfg.workspace);
    g.pos[2] = g.pos[2].clamp(0.0, 1.0);
    let ang_max = ANG_RATE * sp;
    for (angle, target) in
        g.angles.iter_mut().zip([a.theta_xy, a.theta_yz, a.theta_zx])
    {
        *angle = approach(*angle, target, ang_max);
    }
    let prev_closed = g.closedness;
    g.closedness = approach(prev_closed, a.closedness.clamp(0.0, 1.0), CLOSE_RATE * sp);
    let gxy = [g.pos[0], g.pos[1]];
    let gz = g.pos[2];
    let closed_now = g.closedness;

    if prev_closed <= 0.5 && closed_now > 0.5 && n.held.is_none() && !n.holding_handle {
        if gz <= Z_GRASP_MAX {
            let candidate = n
                .objects
                .iter()
                .filter(|o| dist2d(o.pos, gxy) <= cfg.grasp_radius)
                .min_by(|a, b| {
                    dist2d(a.pos, gxy).partial_cmp(&dist2d(b.pos, gxy)).unwrap()
                })
                .map(|o| o.id);
            n.held = candidate;
        }
        if n.held.is_none()
            && gz <= Z_HANDLE_MAX
            && dist2d(gxy, handle_point(n.drawer_slide)) <= cfg.grasp_radius
        {
            n.holding_handle = true;
        }
    }
    if prev_closed > 0.5 && closed_now <= 0.5 {
        if let Some(id) = n.held.take() {
            let obj = &mut n.objects[id];
            obj.pos = gxy;
            obj.z = Z_TABLE;
        }
        if n.holding_handle {
            n.holding_handle = false;
            n.drawer_slide = if n.drawer_slide >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    if n.holding_handle {
        n.drawer_slide =
            ((gxy[1] - FRONT_Y_CLOSED) / (FRONT_Y_OPEN - FRONT_Y_CLOSED)).clamp(0.0, 1.0);
    }
    if let Some(id) = n.held {
        let theta = n.gripper.angles[2];
        let obj = &mut n.objects[id];
        obj.pos = gxy;
        obj.z = gz.max(Z_TABLE);
        if theta > KNOCK_ANGLE {
            obj.upright = false;
        } else if theta < UPRIGHT_ANGLE {
            obj.upright = true;
        }
    }
    n
}

fn arm_act(x: f64, y: f64, z: f64, theta_zx: f64, closedness: f64) -> ActionVector {
    ActionVector {
        mode: Mode::ArmOnly,
        g_x: x,
        g_y: y,
        g_z: z,
        theta_xy: 0.0,
        theta_yz: 0.0,
        theta_zx,
        closedness,
        b_x: 0.0,
        b_y: 0.0,
        b_theta: 0.0,
    }
}

/// Greedy waypoint expert. A pure function of the current state, so it is
/// idempotent after terminate and never replans.
pub fn scripted_expert(cfg: &EnvConfig, task: &TaskSpec, s: &SceneState) -> Result<ActionVector> {
    if s.done {
        return Ok(ActionVector::terminate());
    }
    let g = &s.gripper;
    let gxy = [g.pos[0], g.pos[1]];
    let theta = g.angles[2];
    let close_range = 0.8 * cfg.grasp_radius;

    let obj_idx = match task.object {
        Some(spec) => match find_object(s, spec) {
            Some(i) => Some(i),
            None => {
                return Err(Error::Config(format!(
                    "task object {} missing from scene",
                    spec.phrase()
                )))
            }
        },
        None => None,
    };

    // Approach then grasp the task object, keeping theta at its current value.
    let grasp_or_approach = |obj: &SceneObject| {
        if dist2d(obj.pos, gxy) <= close_range && g.pos[2] <= 0.3 {
            arm_act(obj.pos[0], obj.pos[1], Z_APPROACH, theta, 1.0)
        } else {
            arm_act(obj.pos[0], obj.pos[1], Z_APPROACH, theta, 0.0)
        }
    };

    let act = match task.template {
        Template::Pick => {
            let obj = &s.objects[obj_idx.unwrap()];
            if s.held == Some(obj.id) {
                if obj.z >= Z_PICK_RAISE - 0.02 {
                    ActionVector::terminate()
                } else {
                    arm_act(gxy[0], gxy[1], Z_PICK_RAISE, theta, 1.0)
                }
            } else {
                grasp_or_approach(obj)
            }
        }
        Template::PickPlaceOn | Template::MoveNear | Template::PlaceInto => {
            let obj = &s.objects[obj_idx.unwrap()];
            let (dest, radius) = match task.template {
                Template::PickPlaceOn => {
                    let t = &s.objects[find_object(s, task.target.unwrap()).ok_or_else(
                        || Error::Config("target object missing from scene".into()),
                    )?];
                    (t.pos, cfg.place_radius)
                }
                Template::MoveNear => {
                    let t = &s.objects[find_object(s, task.target.unwrap()).ok_or_else(
                        || Error::Config("target object missing from scene".into()),
                    )?];
                    (t.pos, NEAR_RADIUS)
                }
                _ => {
                    let r = drawer_interior(s.drawer_slide);
                    ([(r[0] + r[2]) / 2.0, (r[1] + r[3]) / 2.0], 0.06)
                }
            };
            if s.held == Some(obj.id) {
                if dist2d(gxy, dest) <= 0.6 * radius {
                    arm_act(gxy[0], gxy[1], g.pos[2], theta, 0.0)
                } else {
                    arm_act(dest[0], dest[1], Z_CARRY, theta, 1.0)
                }
            } else if dist2d(obj.pos, dest) <= radius && obj.z <= Z_TABLE + 0.01 {
                ActionVector::terminate()
            } else {
                grasp_or_approach(obj)
            }
        }
        Template::Open | Template::Close => {
            let target_slide = if task.template == Template::Open { 1.0 } else { 0.0 };
            let finished = (s.drawer_slide - target_slide).abs() < 0.01;
            if finished && !s.holding_handle {
                ActionVector::terminate()
            } else if s.holding_handle {
                if finished {
                    arm_act(gxy[0], gxy[1], g.pos[2], theta, 0.0)
                } else {
                    let pull_y = if target_slide > 0.5 { 0.36 } else { 0.14 };
                    arm_act(handle_point(s.drawer_slide)[0], pull_y, 0.3, theta, 1.0)
                }
            } else {
                let h = handle_point(s.drawer_slide);
                if dist2d(h, gxy) <= close_range && g.pos[2] <= 0.45 {
                    arm_act(h[0], h[1], 0.3, theta, 1.0)
                } else {
                    arm_act(h[0], h[1], 0.3, theta, 0.0)
                }
            }
        }
        Template::KnockOver | Template::PlaceUpright => {
            let want_upright = task.template == Template::PlaceUpright;
            let obj = &s.objects[obj_idx.unwrap()];
            if obj.upright == want_upright {
                if s.held == Some(obj.id) {
                    arm_act(gxy[0], gxy[1], g.pos[2], theta, 0.0)
                } else {
                    ActionVector::terminate()
                }
            } else if s.held == Some(obj.id) {
                let spin = if want_upright { 0.0 } else { 1.5 };
                arm_act(gxy[0], gxy[1], g.pos[2], spin, 1.0)
            } else {
                grasp_or_approach(obj)
            }
        }
    };
    Ok(act)
}

/// Progressive milestone flags; a later flag only counts when every earlier
/// one is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Milestones {
    pub reached: bool,
    pub grasped: bool,
    pub released: bool,
    pub terminated: bool,
}

impl Milestones {
    pub fn none() -> Milestones {
        Milestones { reached: false, grasped: false, released: false, terminated: false }
    }

    pub fn all_true(&self) -> bool {
        self.reached && self.grasped && self.released && self.terminated
    }

    pub fn as_flags(&self) -> [bool; 4] {
        [self.reached, self.grasped, self.released, self.terminated]
    }

    pub fn count(&self) -> usize {
        self.as_flags().iter().filter(|&&f| f).count()
    }

    /// Enforces the progressive reading: flags after the first false are
    /// cleared. Idempotent.
    pub fn cascade(mut self) -> Milestones {
        self.grasped &= self.reached;
        self.released &= self.grasped;
        self.terminated &= self.released;
        self
    }
}

/// The trajectory evidence the oracle scores: the task and every state from
/// reset through the final action.
#[derive(Debug, Clone)]
pub struct Trace {
    pub task: TaskSpec,
    pub states: Vec<SceneState>,
}

/// [`milestone_oracle_raw`] followed by the cascade.
pub fn milestone_oracle(cfg: &EnvConfig, rec: &Trace) -> Milestones {
    milestone_oracle_raw(cfg, rec).cascade()
}

/// Scores the four milestones from ground-truth states, without cascading.
/// The release analog is per family: lift for pick, placement for the place
/// and move families, the slide change for open and close, and the
/// orientation change for knock-over and place-upright.
pub fn milestone_oracle_raw(cfg: &EnvConfig, rec: &Trace) -> Milestones {
    let states = &rec.states;
    if states.is_empty() {
        return Milestones::none();
    }
    let reach_radius = 2.0 * cfg.grasp_radius;
    let target_idx = rec.task.object.and_then(|spec| find_object(&states[0], spec));
    let gxy = |s: &SceneState| [s.gripper.pos[0], s.gripper.pos[1]];

    let (reached, grasped) = match rec.task.template {
        Template::Open | Template::Close => (
            states
                .iter()
                .any(|s| dist2d(gxy(s), handle_point(s.drawer_slide)) <= reach_radius),
            states.iter().any(|s| s.holding_handle),
        ),
        _ => match target_idx {
            Some(i) => (
                states
                    .iter()
                    .any(|s| dist2d(gxy(s), s.objects[i].pos) <= reach_radius),
                states.iter().any(|s| s.held == Some(i)),
            ),
            None => (false, false),
        },
    };

    let released = match rec.task.template {
        Template::Pick => target_idx.map_or(false, |i| {
            states.iter().any(|s| s.held == Some(i) && s.objects[i].z > Z_LIFT)
        }),
        Template::PickPlaceOn | Template::MoveNear => {
            let radius = if rec.task.template == Template::PickPlaceOn {
                cfg.place_radius
            } else {
                NEAR_RADIUS
            };
            match (target_idx, rec.task.target.and_then(|t| find_object(&states[0], t))) {
                (Some(i), Some(j)) => states.windows(2).any(|w| {
                    w[0].held == Some(i)
                        && w[1].held.is_none()
                        && dist2d(w[1].objects[i].pos, w[1].objects[j].pos) <= radius
                }),
                _ => false,
            }
        }
        Template::PlaceInto => target_idx.map_or(false, |i| {
            states.windows(2).any(|w| {
                w[0].held == Some(i)
                    && w[1].held.is_none()
                    && w[1].drawer_slide > 0.5
                    && in_rect(w[1].objects[i].pos, drawer_interior(w[1].drawer_slide))
            })
        }),
        Template::Open => {
            states[0].drawer_slide <= 0.05 && states.iter().any(|s| s.drawer_slide >= 0.95)
        }
        Template::Close => {
            states[0].drawer_slide >= 0.95 && states.iter().any(|s| s.drawer_slide <= 0.05)
        }
        Template::KnockOver => target_idx.map_or(false, |i| {
            states
                .windows(2)
                .any(|w| w[0].objects[i].upright && !w[1].objects[i].upright)
        }),
        Template::PlaceUpright => target_idx.map_or(false, |i| {
            states
                .windows(2)
                .any(|w| !w[0].objects[i].upright && w[1].objects[i].upright)
        }),
    };

    let terminated = states.last().map_or(false, |s| s.done);
    Milestones { reached, grasped, released, terminated }
}

/// One demonstration: frames, the aligned actions, and bookkeeping.
#[derive(Debug, Clone)]
pub struct Episode {
    pub frames: Vec<Array3<f64>>,
    pub actions: Vec<ActionVector>,
    pub instruction: String,
    pub task: TaskSpec,
    pub style: EmbodimentStyle,
    pub milestones: Milestones,
    pub seed: u64,
}

/// Rolls the scripted expert to completion, rendering every state. Fails if
/// the expert cannot finish within `cfg.max_steps` actions.
pub fn expert_episode(
    cfg: &EnvConfig,
    task: &TaskSpec,
    style: &EmbodimentStyle,
    seed: u64,
) -> Result<Episode> {
    let state = reset(cfg, task, style, seed)?;
    expert_rollout_from(cfg, task, style, seed, state)
}

/// Like [`expert_episode`] but with an explicit extra-object roster instead of
/// sampled distractors. Used by corpus generation, where every scene must
/// contain the full set of task objects regardless of which task is shown.
pub fn expert_episode_with_roster(
    cfg: &EnvConfig,
    task: &TaskSpec,
    style: &EmbodimentStyle,
    seed: u64,
    extras: &[ObjectSpec],
) -> Result<Episode> {
    let state = reset_with_roster(cfg, task, style, seed, extras)?;
    expert_rollout_from(cfg, task, style, seed, state)
}

fn expert_rollout_from(
    cfg: &EnvConfig,
    task: &TaskSpec,
    style: &EmbodimentStyle,
    seed: u64,
    mut state: SceneState,
) -> Result<Episode> {
    let mut frames = vec![render(cfg, &state, style)];
    let mut actions = Vec::new();
    let mut states = vec![state.clone()];
    while !state.done {
        if actions.len() >= cfg.max_steps {
            return Err(Error::Input(format!(
                "expert failed to finish {} within {} steps (seed {seed})",
                task.instruction, cfg.max_steps
            )));
        }
        let a = scripted_expert(cfg, task, &state)?;
        state = step(cfg, &state, &a);
        actions.push(a);
        frames.push(render(cfg, &state, style));
        states.push(state.clone());
    }
    let milestones =
        milestone_oracle(cfg, &Trace { task: task.clone(), states });
    Ok(Episode {
        frames,
        actions,
        instruction: task.instruction.clone(),
        task: task.clone(),
        style: style.clone(),
        milestones,
        seed,
    })
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn hash_unit(seed: u64, step: usize, salt: u64) -> f64 {
    let h = splitmix(seed ^ (step as u64).wrapping_mul(0x517c_c1b7_2722_0a95) ^ salt);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

struct Canvas {
    img: Array3<f64>,
    size: usize,
    jitter: [f64; 2],
}

impl Canvas {
    fn new(size: usize) -> Canvas {
        Canvas { img: Array3::zeros((size, size, 3)), size, jitter: [0.0, 0.0] }
    }

    fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: [f64; 3]) {
        let s = self.size as f64;
        let px0 = ((x0 + self.jitter[0]) * s).round().max(0.0) as usize;
        let py0 = ((y0 + self.jitter[1]) * s).round().max(0.0) as usize;
        let px1 = (((x1 + self.jitter[0]) * s).round() as usize).min(self.size);
        let py1 = (((y1 + self.jitter[1]) * s).round() as usize).min(self.size);
        for y in py0..py1 {
            for x in px0..px1 {
                for ch in 0..3 {
                    self.img[(y, x, ch)] = c[ch];
                }
            }
        }
    }

    fn fill_circle(&mut self, cx: f64, cy: f64, r: f64, c: [f64; 3]) {
        let s = self.size as f64;
        let cxp = (cx + self.jitter[0]) * s;
        let cyp = (cy + self.jitter[1]) * s;
        let rp = r * s;
        let y0 = ((cyp - rp).floor().max(0.0)) as usize;
        let y1 = (((cyp + rp).ceil() as usize) + 1).min(self.size);
        let x0 = ((cxp - rp).floor().max(0.0)) as usize;
        let x1 = (((cxp + rp).ceil() as usize) + 1).min(self.size);
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - cxp;
                let dy = y as f64 + 0.5 - cyp;
                if dx * dx + dy * dy <= rp * rp {
                    for ch in 0..3 {
                        self.img[(y, x, ch)] = c[ch];
                    }
                }
            }
        }
    }
}

fn shade(c: [f64; 3], k: f64) -> [f64; 3] {
    [
        (c[0] * k).clamp(0.0, 1.0),
        (c[1] * k).clamp(0.0, 1.0),
        (c[2] * k).clamp(0.0, 1.0),
    ]
}

fn draw_object(cv: &mut Canvas, o: &SceneObject) {
    let scale = 1.0 + 0.6 * (o.z - Z_TABLE).clamp(0.0, 1.0);
    let base = o.spec.color.rgb();
    let color = if o.upright { base } else { shade(base, 0.7) };
    let [x, y] = o.pos;
    let (mut w, mut h) = match o.spec.shape {
        Shape::Cube => (0.045, 0.045),
        Shape::Can => (0.042, 0.042),
        Shape::Bottle => (0.028, 0.058),
        Shape::Block => (0.055, 0.030),
        Shape::Ball => (0.038, 0.038),
        Shape::Cup => (0.040, 0.040),
    };
    if !o.upright {
        std::mem::swap(&mut w, &mut h);
    }
    let (w, h) = (w * scale, h * scale);
    match o.spec.shape {
        Shape::Can | Shape::Ball => {
            cv.fill_circle(x, y, w, color);
            if o.spec.shape == Shape::Can {
                cv.fill_rect(x - 0.006 * scale, y - w, x + 0.006 * scale, y + w, shade(color, 1.35));
            } else {
                cv.fill_circle(x - w * 0.3, y - w * 0.3, w * 0.25, shade(color, 1.6));
            }
        }
        Shape::Bottle => {
            cv.fill_rect(x - w, y - h, x + w, y + h, color);
            let neck = shade(color, 1.3);
            if o.upright {
                cv.fill_rect(x - w * 0.4, y - h - 0.018, x + w * 0.4, y - h, neck);
            } else {
                cv.fill_rect(x - w - 0.018, y - h * 0.4, x - w, y + h * 0.4, neck);
            }
        }
        Shape::Cup => {
            cv.fill_rect(x - w, y - h, x + w, y + h, color);
            cv.fill_rect(x - w * 0.55, y - h * 0.55, x + w * 0.55, y + h * 0.55, shade(color, 0.45));
        }
        Shape::Cube | Shape::Block => {
            cv.fill_rect(x - w, y - h, x + w, y + h, color);
            cv.fill_rect(x - w, y - h, x + w, y - h + 0.008, shade(color, 1.3));
        }
    }
}

fn draw_gripper(cv: &mut Canvas, g: &GripperState, style: &EmbodimentStyle) {
    let [x, y, z] = g.pos;
    let scale = 0.9 + 0.5 * z;
    let gap = (0.020 + 0.030 * (1.0 - g.closedness)) * scale;
    if style.hand_sprite {
        let skin = [0.87, 0.66, 0.50];
        cv.fill_circle(x, y + 0.03 * scale, 0.035 * scale, skin);
        cv.fill_circle(x - gap, y - 0.01 * scale, 0.016 * scale, shade(skin, 1.1));
        cv.fill_circle(x + gap, y - 0.01 * scale, 0.016 * scale, shade(skin, 1.1));
    } else {
        let steel = [0.55, 0.58, 0.66];
        let w = 0.011 * scale;
        let h = 0.030 * scale;
        cv.fill_rect(x - gap - w, y - h, x - gap + w, y + h, steel);
        cv.fill_rect(x + gap - w, y - h, x + gap + w, y + h, steel);
        cv.fill_rect(x - gap, y - h - 0.014 * scale, x + gap, y - h, shade(steel, 0.8));
    }
}

/// Renders a state at an arbitrary square resolution.
pub fn render_at(
    _cfg: &EnvConfig,
    s: &SceneState,
    style: &EmbodimentStyle,
    size: usize,
) -> Array3<f64> {
    let mut cv = Canvas::new(size);
    // Background first, unjittered so the border stays filled.
    let warm = style.palette_warmth;
    let base = [
        0.32 + 0.23 * warm,
        0.33 + 0.17 * warm,
        0.35 + 0.07 * warm,
    ];
    if style.background_texture == 0 {
        cv.fill_rect(0.0, 0.0, 1.0, 1.0, base);
        let cell = 8.0 / 64.0;
        let n = (1.0 / cell) as usize;
        for cy in 0..n {
            for cx in 0..n {
                if (cx + cy) % 2 == 0 {
                    cv.fill_rect(
                        cx as f64 * cell,
                        cy as f64 * cell,
                        (cx + 1) as f64 * cell,
                        (cy + 1) as f64 * cell,
                        shade(base, 1.09),
                    );
                }
            }
        }
    } else {
        let bands = 16;
        for b in 0..bands {
            let k = 0.94 + 0.10 * b as f64 / bands as f64;
            cv.fill_rect(0.0, b as f64 / bands as f64, 1.0, (b + 1) as f64 / bands as f64, shade(base, k));
        }
    }
    cv.jitter = [
        style.camera_jitter * hash_unit(s.seed, s.step_count, 0x1),
        style.camera_jitter * hash_unit(s.seed, s.step_count, 0x2),
    ];

    // Drawer: cavity, then the sliding front panel with its handle.
    let body = [0.24, 0.18, 0.12];
    let cavity = [0.10, 0.07, 0.05];
    let front = [0.46, 0.33, 0.20];
    let fy = front_y(s.drawer_slide);
    cv.fill_rect(DRAWER_X0 - 0.02, DRAWER_TOP - 0.02, DRAWER_X1 + 0.02, fy + 0.004, body);
    let interior = drawer_interior(s.drawer_slide);
    cv.fill_rect(interior[0], interior[1], interior[2], interior[3], cavity);
    cv.fill_rect(DRAWER_X0, fy - 0.035, DRAWER_X1, fy + 0.004, front);
    let h = handle_point(s.drawer_slide);
    cv.fill_rect(h[0] - 0.035, h[1] - 0.022, h[0] + 0.035, h[1] - 0.010, [0.80, 0.80, 0.83]);

    let mut order: Vec<usize> = (0..s.objects.len()).collect();
    order.sort_by(|&a, &b| {
        s.objects[a].z.partial_cmp(&s.objects[b].z).unwrap().then(a.cmp(&b))
    });
    for i in order {
        draw_object(&mut cv, &s.objects[i]);
    }
    draw_gripper(&mut cv, &s.gripper, style);
    cv.img
}

/// Renders at the configured training resolution.
pub fn render(cfg: &EnvConfig, s: &SceneState, style: &EmbodimentStyle) -> Array3<f64> {
    render_at(cfg, s, style, cfg.frame_size)
}
