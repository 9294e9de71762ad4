//! Closed-loop obstacle-course trials: a walker following belt commands (or a
//! cane alone), the virtual cane, and per-trial metrics.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belt::{Millis, NullTransport, Publisher, PublisherConfig};
use crate::error::{Error, Result};
use crate::grid::{BeltCommand, MotorRow, UNITS};
use crate::pipeline::{
    NavMode, Perception, Session, SessionConfig, SyntheticPerception, TickReport,
};
use crate::scene::{build_course, CameraModel, Point2, Scene};

/// Trial condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OpenPath,
    Depth,
    CaneOnly,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Self::OpenPath, Self::Depth, Self::CaneOnly];

    pub fn name(self) -> &'static str {
        match self {
            Self::OpenPath => "open_path",
            Self::Depth => "depth",
            Self::CaneOnly => "cane_only",
        }
    }

    pub fn nav(self) -> Option<NavMode> {
        match self {
            Self::OpenPath => Some(NavMode::OpenPath),
            Self::Depth => Some(NavMode::Depth),
            Self::CaneOnly => None,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!("unknown mode `{s}` (open_path, depth, cane_only)"))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Point2,
    /// Counter-clockwise from `+x`.
    pub heading: f64,
    pub speed: f64,
}

/// Behavioral constants of the simulated walker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub v_max: f64,
    pub omega_max: f64,
    pub omega_scan: f64,
    /// Turn rate toward the target while walking an open direction.
    pub goal_bias: f64,
    /// Bearing error beyond which the walker turns on the spot.
    pub turn_in_place: f64,
    /// Bearing error at which a turn on the spot ends.
    pub turn_done: f64,
    pub body_radius: f64,
    pub hesitation_speed: f64,
    pub hesitation_min_s: f64,
    pub reflex_min: f64,
    pub reflex_max: f64,
    pub depth_gain: f64,
    /// Spread of the initial heading, uniform in `[-x, x]`.
    pub heading_jitter: f64,
    pub timeout_s: f64,
    pub substep_ms: Millis,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            v_max: 0.8,
            omega_max: 1.5,
            omega_scan: 0.8,
            goal_bias: 0.4,
            turn_in_place: 100f64.to_radians(),
            turn_done: 15f64.to_radians(),
            body_radius: 0.20,
            hesitation_speed: 0.05,
            hesitation_min_s: 0.3,
            reflex_min: 30f64.to_radians(),
            reflex_max: 90f64.to_radians(),
            depth_gain: 0.5,
            heading_jitter: 0.05,
            timeout_s: 300.0,
            substep_ms: 10,
        }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.v_max,
            self.omega_max,
            self.omega_scan,
            self.body_radius,
            self.hesitation_speed,
            self.timeout_s,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(
                "policy speeds, radius and timeout must be positive".into(),
            ));
        }
        if !(0.0 <= self.reflex_min && self.reflex_min <= self.reflex_max) {
            return Err(Error::Config("reflex angle range is empty".into()));
        }
        if self.substep_ms == 0 {
            return Err(Error::Config("substep must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaneModel {
    pub reach: f64,
    pub half_angle: f64,
    pub period_s: f64,
}

impl Default for CaneModel {
    fn default() -> Self {
        Self {
            reach: 1.2,
            half_angle: 0.61,
            period_s: 1.0,
        }
    }
}

impl CaneModel {
    pub fn validate(&self, body_radius: f64) -> Result<()> {
        if !(self.reach > body_radius) || !(self.period_s > 0.0) || !(self.half_angle >= 0.0) {
            return Err(Error::Config(
                "cane reach must exceed the body radius and the period be positive".into(),
            ));
        }
        Ok(())
    }

    /// Cane direction relative to the heading at trial time `t`.
    pub fn angle_at(&self, t_s: f64) -> f64 {
        self.half_angle * (TAU * t_s / self.period_s).sin()
    }

    /// Half-cycles run from one sweep extreme to the other.
    pub fn half_cycle(&self, t_s: f64) -> i64 {
        (2.0 * t_s / self.period_s + 0.5).floor() as i64
    }

    pub fn segment(&self, agent: &AgentState, t_s: f64) -> (Point2, Point2) {
        let a = agent.heading + self.angle_at(t_s);
        let p = agent.position;
        (
            p,
            Point2::new(p.x + self.reach * a.cos(), p.y + self.reach * a.sin()),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Obstacle(usize),
    Divider(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contact {
    pub t: Millis,
    pub target: Target,
}

fn closest_on_segment(p: Point2, a: Point2, b: Point2) -> Point2 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return a;
    }
    let s = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    Point2::new(a.x + s * dx, a.y + s * dy)
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn segments_touch(p1: Point2, p2: Point2, q1: Point2, q2: Point2) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |a: Point2, b: Point2, p: Point2| closest_on_segment(p, a, b).dist(p) < 1e-12;
    on(q1, q2, p1) || on(q1, q2, p2) || on(p1, p2, q1) || on(p1, p2, q2)
}

/// Everything the cane segment touches at trial time `t_s`.
pub fn cane_touches(agent: &AgentState, scene: &Scene, cane: &CaneModel, t_s: f64) -> Vec<Target> {
    let (a, b) = cane.segment(agent, t_s);
    let mut out = Vec::new();
    for (i, o) in scene.obstacles.iter().enumerate() {
        if closest_on_segment(o.center, a, b).dist(o.center) <= o.radius {
            out.push(Target::Obstacle(i));
        }
    }
    for (i, d) in scene.dividers.iter().enumerate() {
        if segments_touch(a, b, d.a, d.b) {
            out.push(Target::Divider(i));
        }
    }
    out
}

/// Cane sweep with per-target, per-half-cycle debouncing.
#[derive(Debug, Clone, Default)]
pub struct CaneSweep {
    last: BTreeMap<Target, i64>,
}

impl CaneSweep {
    /// New contacts at `t` (ms of trial time).
    pub fn step(
        &mut self,
        agent: &AgentState,
        scene: &Scene,
        cane: &CaneModel,
        t: Millis,
    ) -> Vec<Contact> {
        let t_s = t as f64 / 1e3;
        let hc = cane.half_cycle(t_s);
        cane_touches(agent, scene, cane, t_s)
            .into_iter()
            .filter(|target| self.last.insert(*target, hc) != Some(hc))
            .map(|target| Contact { t, target })
            .collect()
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// What the walker wants to do over the next step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    pub speed: f64,
    /// Signed heading change for the whole step.
    pub turn: f64,
}

/// Walker memory between steps.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WalkerMemory {
    /// Remaining signed turn of a cane reflex.
    pub reflex: f64,
    /// Rotation sense while scanning for open floor; 0 when not scanning.
    pub scan_dir: f64,
    /// Rotation sense of a turn on the spot; 0 when not turning around.
    pub spin_dir: f64,
    /// Where the current scan sense was chosen; it holds until the walker
    /// gets [`SCAN_RESET_M`] away from here.
    pub scan_anchor: Option<Point2>,
    /// Set when the leg flips. Belt walkers turn on the spot only then.
    pub turnaround: bool,
    /// Scan angle still owed after the body bumped into something; the belt
    /// is ignored until it is paid off.
    pub bump: f64,
}

pub const SCAN_RESET_M: f64 = 0.5;
/// How far a bumped belt walker rotates before trusting the belt again.
pub const BUMP_SCAN: f64 = std::f64::consts::FRAC_PI_3;
/// A step that covers less than this share of its intended length is a bump.
pub const BUMP_RATIO: f64 = 0.25;

/// Bearing of belt unit `unit` relative to straight ahead, counter-clockwise
/// positive. Unit 3 is straight ahead; each unit spans a fifth of the lens.
pub fn unit_bearing(unit: usize, hfov: f64) -> f64 {
    (3.0 - unit as f64) * hfov / UNITS as f64
}

fn limit_turn(delta: f64, omega: f64, dt: f64) -> f64 {
    delta.clamp(-omega * dt, omega * dt)
}

fn toward(sign_hint: f64, fallback: f64) -> f64 {
    if sign_hint > 0.0 {
        1.0
    } else if sign_hint < 0.0 {
        -1.0
    } else {
        fallback
    }
}

/// One control decision. `cmd` pairs the latest published command with the
/// heading of the frame it was scored from; `None` until the first scored
/// command has been published.
#[allow(clippy::too_many_arguments)]
pub fn decide(
    params: &PolicyParams,
    hfov: f64,
    mode: Mode,
    cmd: Option<(&BeltCommand, f64)>,
    agent: &AgentState,
    target: Point2,
    memory: &mut WalkerMemory,
    dt: f64,
    rng: &mut impl Rng,
) -> Intent {
    let p = agent.position;
    let goal_err = wrap_angle((target.y - p.y).atan2(target.x - p.x) - agent.heading);

    if memory.reflex != 0.0 {
        let turn = limit_turn(memory.reflex, params.omega_max, dt);
        memory.reflex -= turn;
        if memory.reflex.abs() < 1e-9 {
            memory.reflex = 0.0;
        }
        return Intent { speed: 0.0, turn };
    }
    if memory.scan_anchor.is_some_and(|a| a.dist(p) > SCAN_RESET_M) {
        memory.scan_dir = 0.0;
        memory.scan_anchor = None;
    }
    let spinning = memory.spin_dir != 0.0 && goal_err.abs() > params.turn_done;
    let may_spin = mode == Mode::CaneOnly || memory.turnaround;
    if may_spin && (goal_err.abs() > params.turn_in_place || spinning) {
        memory.scan_dir = 0.0;
        memory.scan_anchor = None;
        if memory.spin_dir == 0.0 {
            memory.spin_dir = toward(goal_err, 1.0);
        }
        let left = if goal_err * memory.spin_dir > 0.0 {
            goal_err.abs()
        } else {
            TAU - goal_err.abs()
        };
        return Intent {
            speed: 0.0,
            turn: memory.spin_dir * (params.omega_max * dt).min(left),
        };
    }
    memory.spin_dir = 0.0;
    memory.turnaround = false;
    let bias = limit_turn(goal_err, params.goal_bias, dt);

    let (cmd, captured) = match (mode, cmd) {
        (Mode::CaneOnly, _) => {
            return Intent {
                speed: params.v_max,
                turn: bias,
            }
        }
        (_, None) => {
            return Intent {
                speed: 0.0,
                turn: 0.0,
            }
        }
        (_, Some(c)) => c,
    };
    if memory.bump > 0.0 {
        if memory.scan_dir == 0.0 {
            memory.scan_dir = toward(goal_err, if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
            memory.scan_anchor = Some(p);
        }
        let turn = memory.scan_dir * (params.omega_scan * dt).min(memory.bump);
        memory.bump -= turn.abs();
        return Intent { speed: 0.0, turn };
    }
    // turn already made since the frame was captured
    let since = wrap_angle(agent.heading - captured);

    match mode {
        Mode::OpenPath => {
            let Some(&unit) = cmd.active_units().first() else {
                if memory.scan_dir == 0.0 {
                    memory.scan_dir = toward(goal_err, if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
                    memory.scan_anchor = Some(p);
                }
                return Intent {
                    speed: 0.0,
                    turn: memory.scan_dir * params.omega_scan * dt,
                };
            };
            let speed = if cmd.get(unit, MotorRow::Top).is_on() {
                params.v_max
            } else {
                params.v_max / 2.0
            };
            let turn = if unit == 3 {
                bias
            } else {
                limit_turn(unit_bearing(unit, hfov) - since, params.omega_max, dt)
            };
            Intent { speed, turn }
        }
        Mode::Depth => {
            let level = |u: usize| {
                cmd.get(u, MotorRow::Top)
                    .level()
                    .max(cmd.get(u, MotorRow::Bottom).level()) as f64
            };
            if level(3) >= 3.0 {
                let left = level(1) + level(2);
                let right = level(4) + level(5);
                if memory.scan_dir == 0.0 {
                    let fallback = toward(goal_err, if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
                    memory.scan_dir = toward(right - left, fallback);
                    memory.scan_anchor = Some(p);
                }
                return Intent {
                    speed: 0.0,
                    turn: memory.scan_dir * params.omega_max * dt,
                };
            }
            let push: f64 = (1..=UNITS)
                .map(|u| -level(u) / 3.0 * unit_bearing(u, hfov))
                .sum();
            let quiet = (1..=UNITS).all(|u| level(u) <= 1.0);
            let steer = params.depth_gain * push - since;
            let mut turn = limit_turn(steer, params.omega_max, dt);
            if quiet {
                turn += bias;
            }
            let speed = if level(3) > 0.0 {
                params.v_max / 2.0
            } else {
                params.v_max
            };
            Intent { speed, turn }
        }
        Mode::CaneOnly => unreachable!(),
    }
}

/// Free-space kinematics of one decision: the agent after `dt` seconds with
/// no obstacles in the way.
pub fn policy_step(
    params: &PolicyParams,
    hfov: f64,
    mode: Mode,
    cmd: &BeltCommand,
    agent: &AgentState,
    target: Point2,
    dt: f64,
    rng: &mut impl Rng,
) -> AgentState {
    let mut memory = WalkerMemory::default();
    let intent = decide(
        params,
        hfov,
        mode,
        Some((cmd, agent.heading)),
        agent,
        target,
        &mut memory,
        dt,
        rng,
    );
    let heading = wrap_angle(agent.heading + intent.turn);
    let mid = agent.heading + intent.turn / 2.0;
    AgentState {
        position: Point2::new(
            agent.position.x + intent.speed * dt * mid.cos(),
            agent.position.y + intent.speed * dt * mid.sin(),
        ),
        heading,
        speed: intent.speed,
    }
}

/// Smallest gap between the body and any obstacle or divider (negative on overlap).
pub fn clearance(scene: &Scene, p: Point2, r: f64) -> f64 {
    let obst = scene
        .obstacles
        .iter()
        .map(|o| p.dist(o.center) - o.radius - r);
    let walls = scene
        .dividers
        .iter()
        .map(|d| closest_on_segment(p, d.a, d.b).dist(p) - r);
    obst.chain(walls).fold(f64::INFINITY, f64::min)
}

fn floor_clamp(scene: &Scene, p: Point2, r: f64) -> Point2 {
    let (x0, y0) = (scene.origin.x, scene.origin.y);
    Point2::new(
        p.x.clamp(x0 + r, x0 + scene.field_width - r),
        p.y.clamp(
            y0 - scene.apron + r,
            y0 + scene.field_length + scene.apron - r,
        ),
    )
}

/// Moves the body to `to` if possible, sliding along surfaces it would
/// overlap. Returns `from` when no overlap-free position near `to` exists.
pub fn resolve_motion(scene: &Scene, from: Point2, to: Point2, r: f64) -> Point2 {
    const SKIN: f64 = 1e-9;
    let mut p = floor_clamp(scene, to, r);
    for _ in 0..4 {
        for o in &scene.obstacles {
            let need = o.radius + r + SKIN;
            let d = p.dist(o.center);
            if d < need {
                let (ux, uy) = if d > 0.0 {
                    ((p.x - o.center.x) / d, (p.y - o.center.y) / d)
                } else {
                    (1.0, 0.0)
                };
                p = Point2::new(o.center.x + ux * need, o.center.y + uy * need);
            }
        }
        for w in &scene.dividers {
            let c = closest_on_segment(p, w.a, w.b);
            let d = c.dist(p);
            let need = r + SKIN;
            if d < need && d > 0.0 {
                p = Point2::new(c.x + (p.x - c.x) / d * need, c.y + (p.y - c.y) / d * need);
            }
        }
        p = floor_clamp(scene, p, r);
    }
    // sliding may lengthen a step a little, never jump it past a surface
    if clearance(scene, p, r) >= 0.0 && p.dist(from) <= 1.5 * from.dist(to) + 1e-9 {
        p
    } else {
        from
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: Millis,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    /// Mean speed over the interval that starts at `t`.
    pub speed: f64,
    pub belt: BeltCommand,
}

impl Sample {
    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub policy: PolicyParams,
    pub cane: CaneModel,
    pub session: SessionConfig,
    /// Intrinsics of the shoulder camera; its pose follows the walker.
    pub camera: CameraModel,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            policy: PolicyParams::default(),
            cane: CaneModel::default(),
            session: SessionConfig::default(),
            camera: CameraModel::shoulder(0.0, 0.0, 0.0),
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.cane.validate(self.policy.body_radius)?;
        self.session.validate()?;
        self.camera.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub layout: String,
    pub mode: Mode,
    pub seed: u64,
    pub config: TrialConfig,
    pub samples: Vec<Sample>,
    pub contacts: Vec<Contact>,
    pub completed: bool,
    /// Time the goal line was crossed.
    pub goal_at: Option<Millis>,
    pub end: Millis,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line<'a> {
    Header {
        layout: &'a str,
        mode: Mode,
        seed: u64,
        config: &'a TrialConfig,
    },
    Sample(&'a Sample),
    Contact(&'a Contact),
    End {
        completed: bool,
        goal_at: Option<Millis>,
        t: Millis,
    },
}

impl TrialRecord {
    /// One JSON object per line: header, samples, contacts, end marker.
    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![Line::Header {
            layout: &self.layout,
            mode: self.mode,
            seed: self.seed,
            config: &self.config,
        }];
        lines.extend(self.samples.iter().map(Line::Sample));
        lines.extend(self.contacts.iter().map(Line::Contact));
        lines.push(Line::End {
            completed: self.completed,
            goal_at: self.goal_at,
            t: self.end,
        });
        let mut out = String::new();
        for l in &lines {
            out.push_str(&serde_json::to_string(l).expect("trial lines serialize"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Leg {
    Out,
    Back,
}

/// Runs one trial on the emulated clock. The loop, per 150 ms tick: finish
/// the previous tick, publish if due, render and score the current pose,
/// then walk the step in 10 ms substeps, sweeping the cane at each.
pub fn run_trial(scene: &Scene, mode: Mode, seed: u64, cfg: &TrialConfig) -> Result<TrialRecord> {
    scene.validate()?;
    cfg.validate()?;
    let params = &cfg.policy;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tick_ms = cfg.session.tick_budget_ms;
    let timeout_ms = (params.timeout_s * 1e3).round() as Millis;
    let sub_ms = params.substep_ms.min(tick_ms);

    let mut session_cfg = cfg.session.clone();
    if let Some(nav) = mode.nav() {
        session_cfg.mode = nav;
    }
    let mut session = Session::new(session_cfg)?;
    let mut publisher = Publisher::new(
        PublisherConfig {
            period_ms: cfg.session.publish_period_ms,
            ..PublisherConfig::default()
        },
        NullTransport,
        session.slot(),
    )?;
    let mut perception = SyntheticPerception::new(scene.clone(), cfg.camera);

    let jitter = if params.heading_jitter > 0.0 {
        rng.gen_range(-params.heading_jitter..=params.heading_jitter)
    } else {
        0.0
    };
    let mut agent = AgentState {
        position: scene.start,
        heading: (scene.goal.y - scene.start.y).atan2(scene.goal.x - scene.start.x) + jitter,
        speed: 0.0,
    };
    if clearance(scene, agent.position, params.body_radius) < 0.0 {
        return Err(Error::Scene(
            "start position overlaps an obstacle or divider".into(),
        ));
    }
    let mut memory = WalkerMemory::default();
    let mut sweep = CaneSweep::default();
    let mut leg = Leg::Out;
    let mut goal_at = None;
    let mut samples = Vec::new();
    let mut contacts = Vec::new();
    let mut pending: Option<TickReport> = None;
    let mut published: Option<(BeltCommand, f64)> = None;
    let mut captured: Vec<(Millis, f64)> = Vec::new();
    let mut end = None;
    let forward = (scene.goal.y - scene.start.y).signum();
    let forward = if forward == 0.0 { 1.0 } else { forward };

    let mut t: Millis = 0;
    while t < timeout_ms {
        if let Some(r) = pending.take() {
            session.complete(&r);
        }
        if publisher.poll(t).is_some() {
            // the all-zero publish before any tick finished is not a scored command
            if let Some((cmd, ready)) = session.slot().load() {
                let shot = ready - tick_ms;
                let heading = captured
                    .iter()
                    .rev()
                    .find(|c| c.0 == shot)
                    .map_or(agent.heading, |c| c.1);
                published = Some((cmd, heading));
            }
        }
        if mode.nav().is_some() {
            captured.push((t, agent.heading));
            perception.set_pose(agent.position.x, agent.position.y, agent.heading);
            let frame = perception.perceive(t);
            pending = Some(session.tick(t, frame));
        }

        let step_ms = tick_ms.min(timeout_ms - t);
        let dt = step_ms as f64 / 1e3;
        let target = match leg {
            Leg::Out => scene.goal,
            Leg::Back => scene.start,
        };
        let cmd = published.as_ref().map(|(c, h)| (c, *h));
        let intent = decide(
            params,
            cfg.camera.hfov,
            mode,
            cmd,
            &agent,
            target,
            &mut memory,
            dt,
            &mut rng,
        );
        let (start_pos, start_heading) = (agent.position, agent.heading);
        let n_sub = step_ms.div_ceil(sub_ms);
        let mut travelled = 0.0;
        let mut elapsed = 0;
        for k in 1..=n_sub {
            let now = (t + k * sub_ms).min(t + step_ms);
            let h = (now - (t + (k - 1) * sub_ms)) as f64 / 1e3;
            let turn = intent.turn * h / dt;
            let mid = agent.heading + turn / 2.0;
            let to = Point2::new(
                agent.position.x + intent.speed * h * mid.cos(),
                agent.position.y + intent.speed * h * mid.sin(),
            );
            let next = resolve_motion(scene, agent.position, to, params.body_radius);
            travelled += next.dist(agent.position);
            agent.position = next;
            agent.heading = wrap_angle(agent.heading + turn);
            elapsed = now - t;

            for c in sweep.step(&agent, scene, &cfg.cane, now) {
                // belt walkers steer by the belt alone; the cane-only walker
                // recoils from whatever it hits while moving forward
                if mode == Mode::CaneOnly && memory.reflex == 0.0 && intent.speed > 0.0 {
                    let rel = match c.target {
                        Target::Obstacle(i) => {
                            let o = scene.obstacles[i].center;
                            let a = agent.position;
                            wrap_angle((o.y - a.y).atan2(o.x - a.x) - agent.heading)
                        }
                        Target::Divider(_) => cfg.cane.angle_at(now as f64 / 1e3),
                    };
                    let away = toward(-rel, if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
                    memory.reflex = away * rng.gen_range(params.reflex_min..=params.reflex_max);
                    memory.scan_dir = 0.0;
                    memory.scan_anchor = None;
                    memory.spin_dir = 0.0;
                }
                contacts.push(c);
            }

            let along = (agent.position.y - scene.start.y) * forward;
            let length = (scene.goal.y - scene.start.y) * forward;
            if leg == Leg::Out && along >= length {
                leg = Leg::Back;
                goal_at = Some(now);
                memory.turnaround = true;
            } else if leg == Leg::Back && along <= 0.0 {
                end = Some(now);
                break;
            }
        }
        agent.speed = if elapsed > 0 {
            travelled / (elapsed as f64 / 1e3)
        } else {
            0.0
        };
        if mode.nav().is_some() && intent.speed > 0.0 && agent.speed < BUMP_RATIO * intent.speed {
            memory.bump = BUMP_SCAN;
        }
        samples.push(Sample {
            t,
            x: start_pos.x,
            y: start_pos.y,
            heading: start_heading,
            speed: agent.speed,
            belt: cmd.map_or(BeltCommand::ZERO, |c| *c.0),
        });
        if let Some(e) = end {
            samples.push(Sample {
                t: e,
                x: agent.position.x,
                y: agent.position.y,
                heading: agent.heading,
                speed: 0.0,
                belt: cmd.map_or(BeltCommand::ZERO, |c| *c.0),
            });
            break;
        }
        t += step_ms;
    }
    let completed = end.is_some();
    let end = end.unwrap_or(timeout_ms);
    if !completed {
        samples.push(Sample {
            t: end,
            x: agent.position.x,
            y: agent.position.y,
            heading: agent.heading,
            speed: 0.0,
            belt: published.map_or(BeltCommand::ZERO, |c| c.0),
        });
    }
    Ok(TrialRecord {
        layout: scene.name.clone(),
        mode,
        seed,
        config: cfg.clone(),
        samples,
        contacts,
        completed,
        goal_at,
        end,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    /// Seconds; the timeout for incomplete trials.
    pub completion_time: f64,
    pub hesitation_pct: f64,
    pub cane_contacts: u64,
    /// Metres; 0 on a course without obstacles.
    pub safety_window: f64,
    pub completed: bool,
}

/// Seconds spent in stationary spells of at least `min_s`, counted from the
/// first sample that moves.
pub fn hesitation_time(samples: &[Sample], speed_threshold: f64, min_s: f64) -> f64 {
    let Some(first) = samples.iter().position(|s| s.speed >= speed_threshold) else {
        return 0.0;
    };
    let mut total = 0.0;
    let mut spell = 0.0;
    for w in samples[first..].windows(2) {
        let span = (w[1].t - w[0].t) as f64 / 1e3;
        if w[0].speed < speed_threshold {
            spell += span;
        } else {
            if spell >= min_s - 1e-9 {
                total += spell;
            }
            spell = 0.0;
        }
    }
    if spell >= min_s - 1e-9 {
        total += spell;
    }
    total
}

pub fn compute_metrics(record: &TrialRecord, scene: &Scene) -> Result<TrialMetrics> {
    let (Some(first), Some(last)) = (record.samples.first(), record.samples.last()) else {
        return Err(Error::Config("trial record has no samples".into()));
    };
    let p = &record.config.policy;
    let start = record
        .samples
        .iter()
        .find(|s| s.speed >= p.hesitation_speed)
        .map_or(first.t, |s| s.t);
    let moving_window = last.t.saturating_sub(start) as f64 / 1e3;
    let completion_time = if record.completed {
        moving_window
    } else {
        p.timeout_s
    };
    let hesitation = hesitation_time(&record.samples, p.hesitation_speed, p.hesitation_min_s);
    let hesitation_pct = if moving_window > 0.0 {
        (hesitation / moving_window).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let safety_window = if scene.obstacles.is_empty() {
        0.0
    } else {
        let per: Vec<f64> = scene
            .obstacles
            .iter()
            .map(|o| {
                record
                    .samples
                    .iter()
                    .map(|s| s.position().dist(o.center) - o.radius)
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        (per.iter().sum::<f64>() / per.len() as f64).max(0.0)
    };
    Ok(TrialMetrics {
        completion_time,
        hesitation_pct,
        cane_contacts: record.contacts.len() as u64,
        safety_window,
        completed: record.completed,
    })
}

/// One row of the per-trial metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub layout: String,
    pub mode: Mode,
    pub seed: u64,
    pub completion_time: f64,
    pub hesitation_pct: f64,
    pub contacts: u64,
    pub safety_window: f64,
}

impl MetricsRow {
    pub fn new(record: &TrialRecord, m: &TrialMetrics) -> Self {
        Self {
            layout: record.layout.clone(),
            mode: record.mode,
            seed: record.seed,
            completion_time: m.completion_time,
            hesitation_pct: m.hesitation_pct,
            contacts: m.cane_contacts,
            safety_window: m.safety_window,
        }
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record([
            "layout",
            "mode",
            "seed",
            "completion_time",
            "hesitation_pct",
            "contacts",
            "safety_window",
        ])
        .map_err(|e| Error::Io(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

/// Parses a metrics table; rows with non-finite or negative metrics are rejected.
pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<MetricsRow>().enumerate() {
        let row = row.map_err(|e| Error::Config(format!("metrics row {}: {e}", i + 1)))?;
        let values = [row.completion_time, row.hesitation_pct, row.safety_window];
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "metrics row {} has an invalid value",
                i + 1
            )));
        }
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub record: TrialRecord,
    pub metrics: TrialMetrics,
}

/// All `layouts x modes x seeds` trials, run in parallel, returned in that order.
pub fn run_experiment(
    layouts: &[String],
    modes: &[Mode],
    seeds: &[u64],
    cfg: &TrialConfig,
) -> Result<Vec<TrialOutcome>> {
    let scenes = layouts
        .iter()
        .map(|l| build_course(l))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(&Scene, Mode, u64)> = scenes
        .iter()
        .flat_map(|s| {
            modes
                .iter()
                .flat_map(move |&m| seeds.iter().map(move |&seed| (s, m, seed)))
        })
        .collect();
    jobs.into_par_iter()
        .map(|(scene, mode, seed)| {
            let record = run_trial(scene, mode, seed, cfg)?;
            let metrics = compute_metrics(&record, scene)?;
            Ok(TrialOutcome { record, metrics })
        })
        .collect()
}
