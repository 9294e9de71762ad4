//! One perception-to-belt session: frames in, a scored command per tick, and
//! the latest-value slot the publisher samples.
//!
//! Ticks start every 150 ms. A tick's command becomes visible to the publisher
//! when the tick completes at the next boundary, so a publish at `t` carries
//! the command of the tick that started at `t - 150`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::belt::{CommandSlot, Millis, PublishEvent, Publisher, PublisherConfig, Transport};
use crate::depth::{analyze_depth, DepthAnalysis, DepthBinConfig};
use crate::error::{Error, Result};
use crate::grid::{BeltCommand, BoundingBox, DepthMap, FloorMask, GridSpec};
use crate::open_path::{CellScoreGrid, OpenPathConfig, OpenPathSession};
use crate::scene::{render_views, CameraModel, Scene};

pub const TICK_MS: Millis = 150;
pub const PUBLISH_MS: Millis = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NavMode {
    OpenPath,
    Depth,
}

impl NavMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::OpenPath => "open_path",
            Self::Depth => "depth",
        }
    }
}

impl std::str::FromStr for NavMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open_path" => Ok(Self::OpenPath),
            "depth" => Ok(Self::Depth),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendId {
    Synthetic,
    Fixtures,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    Real,
    Emulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub mode: NavMode,
    pub tick_budget_ms: Millis,
    pub publish_period_ms: Millis,
    pub perception: BackendId,
    pub clock: ClockKind,
    pub open_path: OpenPathConfig,
    pub depth: DepthBinConfig,
    pub grid: GridSpec,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            mode: NavMode::OpenPath,
            tick_budget_ms: TICK_MS,
            publish_period_ms: PUBLISH_MS,
            perception: BackendId::Synthetic,
            clock: ClockKind::Emulated,
            open_path: OpenPathConfig::default(),
            depth: DepthBinConfig::default(),
            grid: GridSpec::default(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tick_budget_ms == 0 || self.tick_budget_ms > self.publish_period_ms {
            return Err(Error::Config(format!(
                "tick budget {} ms must be positive and at most the publish period {} ms",
                self.tick_budget_ms, self.publish_period_ms
            )));
        }
        self.open_path.validate()?;
        self.depth.validate()?;
        self.grid.validate()
    }
}

/// What perception hands the pipeline for one frame. Either half may be
/// missing when the backend only serves one mode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Frame {
    pub detection: Option<BoundingBox>,
    pub floor: Option<FloorMask>,
    pub depth: Option<DepthMap>,
}

pub trait Perception {
    fn perceive(&mut self, t: Millis) -> Result<Frame>;
}

/// Floor detector stand-in: the tight box around all floor pixels.
pub fn detect_floor(mask: &FloorMask) -> Option<BoundingBox> {
    mask.floor_bounds()
        .map(|r| BoundingBox::new(r.x0, r.y0, r.x1, r.y1, 1.0))
}

/// Renders views of a synthetic scene from a movable camera.
#[derive(Debug, Clone)]
pub struct SyntheticPerception {
    pub scene: Scene,
    pub camera: CameraModel,
}

impl SyntheticPerception {
    pub fn new(scene: Scene, camera: CameraModel) -> Self {
        Self { scene, camera }
    }

    pub fn set_pose(&mut self, x: f64, y: f64, yaw: f64) {
        self.camera.x = x;
        self.camera.y = y;
        self.camera.yaw = yaw;
    }
}

impl Perception for SyntheticPerception {
    fn perceive(&mut self, _t: Millis) -> Result<Frame> {
        let views = render_views(&self.scene, &self.camera)?;
        Ok(Frame {
            detection: detect_floor(&views.mask),
            floor: Some(views.mask),
            depth: Some(views.depth),
        })
    }
}

/// Replays recorded frames in order, holding the last one.
#[derive(Debug, Clone)]
pub struct FixturePerception {
    frames: Vec<Frame>,
    next: usize,
}

impl FixturePerception {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Config(
                "fixture backend needs at least one frame".into(),
            ));
        }
        Ok(Self { frames, next: 0 })
    }

    pub fn from_mask(mask: FloorMask) -> Self {
        Self {
            frames: vec![Frame {
                detection: detect_floor(&mask),
                floor: Some(mask),
                depth: None,
            }],
            next: 0,
        }
    }

    pub fn from_depth(depth: DepthMap) -> Self {
        Self {
            frames: vec![Frame {
                depth: Some(depth),
                ..Frame::default()
            }],
            next: 0,
        }
    }
}

impl Perception for FixturePerception {
    fn perceive(&mut self, _t: Millis) -> Result<Frame> {
        let f = self.frames[self.next.min(self.frames.len() - 1)].clone();
        self.next += 1;
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    BudgetOverrun { elapsed_ms: f64, budget_ms: Millis },
    PerceptionFailed { message: String },
}

/// Everything one tick produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TickReport {
    pub tick: u64,
    pub t: Millis,
    /// When the command becomes the latest one.
    pub ready_at: Millis,
    pub mode: NavMode,
    pub command: BeltCommand,
    pub open_path: Option<CellScoreGrid>,
    pub depth: Option<DepthAnalysis>,
    pub diagnostics: Vec<Diagnostic>,
    pub compute_ms: f64,
}

/// Mode state plus the latest-command slot.
#[derive(Debug, Clone)]
pub struct Session {
    cfg: SessionConfig,
    open_path: OpenPathSession,
    slot: CommandSlot,
    ticks: u64,
}

impl Session {
    pub fn new(cfg: SessionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            open_path: OpenPathSession::new(cfg.open_path, cfg.grid),
            cfg,
            slot: CommandSlot::new(),
            ticks: 0,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn mode(&self) -> NavMode {
        self.cfg.mode
    }

    /// Switching modes drops the open-path box history.
    pub fn set_mode(&mut self, mode: NavMode) {
        if mode != self.cfg.mode {
            self.cfg.mode = mode;
            self.open_path.reset();
        }
    }

    pub fn slot(&self) -> CommandSlot {
        self.slot.clone()
    }

    pub fn reset(&mut self) {
        self.open_path.reset();
        self.slot.clear();
        self.ticks = 0;
    }

    /// Scores one frame started at `t`. Does not touch the slot; see [`Session::complete`].
    pub fn tick(&mut self, t: Millis, frame: Result<Frame>) -> TickReport {
        let started = Instant::now();
        let mut diagnostics = Vec::new();
        let mut report = TickReport {
            tick: self.ticks,
            t,
            ready_at: t + self.cfg.tick_budget_ms,
            mode: self.cfg.mode,
            command: BeltCommand::ZERO,
            open_path: None,
            depth: None,
            diagnostics: Vec::new(),
            compute_ms: 0.0,
        };
        self.ticks += 1;
        match frame.and_then(|f| self.score(f, &mut report)) {
            Ok(cmd) => report.command = cmd,
            Err(e) => {
                self.open_path.reset();
                diagnostics.push(Diagnostic::PerceptionFailed {
                    message: e.to_string(),
                });
            }
        }
        let elapsed = started.elapsed().as_secs_f64() * 1e3;
        report.compute_ms = elapsed;
        if self.cfg.clock == ClockKind::Real && elapsed > self.cfg.tick_budget_ms as f64 {
            diagnostics.push(Diagnostic::BudgetOverrun {
                elapsed_ms: elapsed,
                budget_ms: self.cfg.tick_budget_ms,
            });
        }
        report.diagnostics = diagnostics;
        report
    }

    fn score(&mut self, frame: Frame, report: &mut TickReport) -> Result<BeltCommand> {
        match self.cfg.mode {
            NavMode::OpenPath => {
                let floor = frame
                    .floor
                    .ok_or_else(|| Error::Perception("frame has no floor mask".into()))?;
                let out = self.open_path.process(frame.detection, &floor);
                report.open_path = out.scores;
                Ok(out.command)
            }
            NavMode::Depth => {
                let depth = frame
                    .depth
                    .ok_or_else(|| Error::Perception("frame has no depth map".into()))?;
                let analysis = analyze_depth(&depth, &self.cfg.grid, &self.cfg.depth)?;
                let cmd = analysis.command;
                report.depth = Some(analysis);
                Ok(cmd)
            }
        }
    }

    /// Makes a finished tick's command the latest one.
    pub fn complete(&self, report: &TickReport) {
        self.slot.store(&report.command, report.ready_at);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionEvent {
    Tick(TickReport),
    Publish(PublishEvent),
}

impl SessionEvent {
    pub fn t(&self) -> Millis {
        match self {
            Self::Tick(r) => r.t,
            Self::Publish(p) => p.t,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<SessionEvent>,
}

impl EventLog {
    pub fn ticks(&self) -> impl Iterator<Item = &TickReport> {
        self.events.iter().filter_map(|e| match e {
            SessionEvent::Tick(r) => Some(r),
            _ => None,
        })
    }

    pub fn publishes(&self) -> impl Iterator<Item = &PublishEvent> {
        self.events.iter().filter_map(|e| match e {
            SessionEvent::Publish(p) => Some(p),
            _ => None,
        })
    }
}

/// Emulated-clock session over `[0, duration]`. Ticks start at every multiple
/// of the budget below `duration` (and always at 0); publishes happen at every
/// multiple of the period up to and including `duration`. `mode_switches` are
/// applied to the first tick starting at or after their time.
pub fn run_session<T: Transport>(
    session: &mut Session,
    perception: &mut dyn Perception,
    transport: T,
    topic: &str,
    duration: Millis,
    mode_switches: &[(Millis, NavMode)],
) -> Result<EventLog> {
    let tick_ms = session.cfg.tick_budget_ms;
    let cfg = PublisherConfig {
        topic: topic.to_string(),
        period_ms: session.cfg.publish_period_ms,
        ..PublisherConfig::default()
    };
    let mut publisher = Publisher::new(cfg, transport, session.slot())?;
    let mut log = EventLog::default();
    let mut pending: Option<TickReport> = None;
    let mut switches: Vec<(Millis, NavMode)> = mode_switches.to_vec();
    switches.sort_by_key(|s| s.0);
    let mut switches = switches.into_iter().peekable();

    // event times: tick boundaries and publish instants, merged
    let mut t: Millis = 0;
    loop {
        if let Some(r) = pending.take_if(|r| r.ready_at <= t) {
            session.complete(&r);
        }
        if t <= duration {
            if let Some(ev) = publisher.poll(t) {
                log.events.push(SessionEvent::Publish(ev));
            }
        }
        if t.is_multiple_of(tick_ms) && (t < duration || t == 0) {
            while let Some((_, mode)) = switches.next_if(|s| s.0 <= t) {
                session.set_mode(mode);
            }
            let frame = perception.perceive(t);
            let report = session.tick(t, frame);
            log.events.push(SessionEvent::Tick(report.clone()));
            pending = Some(report);
        }
        let next_tick = (t / tick_ms + 1) * tick_ms;
        let next_pub = publisher.next_due();
        let next = next_tick.min(next_pub);
        if next > duration && pending.is_none() {
            break;
        }
        if next > duration {
            // let the last tick finish, nothing else is due
            if let Some(r) = pending.take() {
                session.complete(&r);
            }
            break;
        }
        t = next;
    }
    Ok(log)
}
