//! Server side of the interactive cockpit: the line-delimited JSON wire
//! messages and a human-steered course session that produces them.
//!
//! A person steers the walker with [`Control`] messages; perception, scoring
//! and the belt publisher run exactly as they do for a simulated walker, and
//! every tick yields a [`Snapshot`] of what a belt wearer would feel.

use serde::{Deserialize, Serialize};

use crate::belt::{Millis, NullTransport, PublishEvent, Publisher, PublisherConfig, Transport};
use crate::depth::DepthCell;
use crate::error::{Error, Result};
use crate::grid::BeltCommand;
use crate::pipeline::{Perception, Session, SyntheticPerception, TickReport};
use crate::scene::{build_course, Point2, Scene};
use crate::sim::{resolve_motion, wrap_angle, AgentState, CaneSweep, Contact, Mode, TrialConfig};

/// Upper bound accepted by `set_speed`, m/s.
pub const MAX_SPEED: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Steer {
    Forward,
    Stop,
    TurnLeft,
    TurnRight,
}

/// Client-to-server message. One JSON object per line, keyed by the variant:
/// `{"steer":"turn_left"}`, `{"set_mode":"depth"}`, `{"load_layout":"hard-g"}`,
/// `{"reset":null}`, `{"set_speed":0.5}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Control {
    Steer(Steer),
    SetMode(Mode),
    LoadLayout(String),
    Reset(()),
    /// Walking speed in m/s for `forward`.
    SetSpeed(f64),
}

impl Control {
    pub fn validate(&self) -> Result<()> {
        match self {
            Control::SetSpeed(v) if !(v.is_finite() && *v > 0.0 && *v <= MAX_SPEED) => Err(
                Error::MalformedPayload(format!("speed {v} outside (0, {MAX_SPEED}]")),
            ),
            Control::LoadLayout(name) if name.trim().is_empty() => {
                Err(Error::MalformedPayload("empty layout name".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Parses one line of client traffic.
pub fn parse_control(line: &str) -> Result<Control> {
    let c: Control = serde_json::from_str(line.trim())
        .map_err(|e| Error::MalformedPayload(format!("control message: {e}")))?;
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleView {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldView {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub length: f64,
}

/// Per-cell scores behind the current belt command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridView {
    /// Rows bottom-up: 3x7 raw cell scores and 2x5 adjusted belt scores.
    OpenPath {
        raw: Vec<Vec<f64>>,
        adjusted: Vec<Vec<f64>>,
        /// Selected belt unit (1-based), absent when nothing is selected.
        selected: Option<usize>,
    },
    Depth {
        cells: Vec<DepthCell>,
    },
    None,
}

impl GridView {
    fn of(report: Option<&TickReport>) -> Self {
        let Some(r) = report else {
            return GridView::None;
        };
        if let Some(s) = &r.open_path {
            return GridView::OpenPath {
                raw: s.raw.rows_bottom_up().to_vec(),
                adjusted: s.adjusted.rows_bottom_up().to_vec(),
                selected: s.selected.map(|sel| sel.col),
            };
        }
        match &r.depth {
            Some(d) => GridView::Depth {
                cells: d.cells.clone(),
            },
            None => GridView::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    /// Not moved yet since the last reset.
    Ready,
    Outbound,
    Returning,
    Finished,
}

/// Server-to-client message, one per tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tick: u64,
    pub t: Millis,
    pub layout: String,
    pub mode: Mode,
    pub status: TrialStatus,
    pub agent: Pose,
    pub field: FieldView,
    pub obstacles: Vec<ObstacleView>,
    /// The command the belt is currently playing.
    pub belt: BeltCommand,
    pub grid: GridView,
    pub contacts: usize,
}

/// Serializes a message as one newline-terminated JSON line.
pub fn encode_line<T: Serialize>(msg: &T) -> Result<String> {
    let mut s = serde_json::to_string(msg).map_err(|e| Error::MalformedPayload(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Parses every non-blank line of a snapshot stream.
pub fn decode_snapshots(text: &str) -> Result<Vec<Snapshot>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::MalformedPayload(format!("snapshot: {e}")))
        })
        .collect()
}

/// One human-steered run over a course. Each [`step`](Self::step) advances
/// the trial clock by one pipeline tick.
pub struct CockpitSession<T: Transport = NullTransport> {
    cfg: TrialConfig,
    scene: Scene,
    mode: Mode,
    steer: Steer,
    speed: f64,
    agent: AgentState,
    t: Millis,
    status: TrialStatus,
    session: Session,
    publisher: Publisher<T>,
    perception: SyntheticPerception,
    pending: Option<TickReport>,
    shown: Option<TickReport>,
    playing: BeltCommand,
    sweep: CaneSweep,
    contacts: Vec<Contact>,
}

impl CockpitSession<NullTransport> {
    pub fn new(layout: &str, mode: Mode, cfg: TrialConfig) -> Result<Self> {
        Self::with_transport(layout, mode, cfg, NullTransport)
    }
}

impl<T: Transport> CockpitSession<T> {
    /// Session whose belt commands also go out over `transport`.
    /// `layout` is a canonical layout name or a JSON course file.
    pub fn with_transport(
        layout: &str,
        mode: Mode,
        cfg: TrialConfig,
        transport: T,
    ) -> Result<Self> {
        cfg.validate()?;
        let scene = build_course(layout)?;
        let mut session_cfg = cfg.session.clone();
        if let Some(nav) = mode.nav() {
            session_cfg.mode = nav;
        }
        let session = Session::new(session_cfg)?;
        let publisher = Publisher::new(
            PublisherConfig {
                period_ms: cfg.session.publish_period_ms,
                ..PublisherConfig::from_env()
            },
            transport,
            session.slot(),
        )?;
        let perception = SyntheticPerception::new(scene.clone(), cfg.camera);
        let mut s = Self {
            speed: cfg.policy.v_max,
            agent: start_pose(&scene),
            cfg,
            scene,
            mode,
            steer: Steer::Stop,
            t: 0,
            status: TrialStatus::Ready,
            session,
            publisher,
            perception,
            pending: None,
            shown: None,
            playing: BeltCommand::ZERO,
            sweep: CaneSweep::default(),
            contacts: Vec::new(),
        };
        s.reset();
        Ok(s)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn t(&self) -> Millis {
        self.t
    }

    pub fn agent(&self) -> &AgentState {
        &self.agent
    }

    pub fn contacts(&self) -> &[Contact] {
        &self.contacts
    }

    pub fn apply(&mut self, control: &Control) -> Result<()> {
        control.validate()?;
        match control {
            Control::Steer(s) => self.steer = *s,
            Control::SetSpeed(v) => self.speed = *v,
            Control::SetMode(m) => {
                self.mode = *m;
                match m.nav() {
                    Some(nav) => self.session.set_mode(nav),
                    None => {
                        self.session.reset();
                        self.pending = None;
                        self.shown = None;
                    }
                }
            }
            Control::LoadLayout(name) => {
                let scene = build_course(name)?;
                self.perception = SyntheticPerception::new(scene.clone(), self.cfg.camera);
                self.scene = scene;
                self.reset();
            }
            Control::Reset(()) => self.reset(),
        }
        Ok(())
    }

    /// Back to the start line with the trial clock at zero.
    pub fn reset(&mut self) {
        self.agent = start_pose(&self.scene);
        self.t = 0;
        self.steer = Steer::Stop;
        self.status = TrialStatus::Ready;
        self.session.reset();
        self.pending = None;
        self.shown = None;
        self.playing = BeltCommand::ZERO;
        self.sweep = CaneSweep::default();
        self.contacts.clear();
        self.publisher.restart();
    }

    /// Runs one tick and walks the current steer for its duration.
    pub fn step(&mut self) -> Snapshot {
        let tick_ms = self.cfg.session.tick_budget_ms;
        if let Some(r) = self.pending.take() {
            self.session.complete(&r);
            self.shown = Some(r);
        }
        if let Some(PublishEvent { command, .. }) = self.publisher.poll(self.t) {
            self.playing = command;
        }
        if self.mode.nav().is_some() {
            self.perception.set_pose(
                self.agent.position.x,
                self.agent.position.y,
                self.agent.heading,
            );
            let frame = self.perception.perceive(self.t);
            self.pending = Some(self.session.tick(self.t, frame));
        } else {
            self.playing = BeltCommand::ZERO;
        }

        let p = self.cfg.policy;
        let (speed, omega) = match self.steer {
            Steer::Forward => (self.speed, 0.0),
            Steer::Stop => (0.0, 0.0),
            Steer::TurnLeft => (0.0, p.omega_max),
            Steer::TurnRight => (0.0, -p.omega_max),
        };
        if self.status == TrialStatus::Ready && self.steer != Steer::Stop {
            self.status = TrialStatus::Outbound;
        }
        let sub = p.substep_ms.min(tick_ms);
        let mut now = self.t;
        while now < self.t + tick_ms {
            let next = (now + sub).min(self.t + tick_ms);
            let h = (next - now) as f64 / 1e3;
            let a = self.agent.heading + omega * h / 2.0;
            let from = self.agent.position;
            let to = Point2::new(from.x + speed * h * a.cos(), from.y + speed * h * a.sin());
            self.agent.position =
                resolve_motion(&self.scene, self.agent.position, to, p.body_radius);
            self.agent.heading = wrap_angle(self.agent.heading + omega * h);
            self.agent.speed = speed;
            now = next;
            self.contacts.extend(
                self.sweep
                    .step(&self.agent, &self.scene, &self.cfg.cane, now),
            );
            self.update_status();
        }
        self.t += tick_ms;
        self.snapshot()
    }

    fn update_status(&mut self) {
        let forward = if self.scene.goal.y >= self.scene.start.y {
            1.0
        } else {
            -1.0
        };
        let along = (self.agent.position.y - self.scene.start.y) * forward;
        let length = (self.scene.goal.y - self.scene.start.y) * forward;
        self.status = match self.status {
            TrialStatus::Outbound if along >= length => TrialStatus::Returning,
            TrialStatus::Returning if along <= 0.0 => TrialStatus::Finished,
            s => s,
        };
    }

    pub fn snapshot(&self) -> Snapshot {
        let shown = if self.mode.nav().is_some() {
            self.shown.as_ref()
        } else {
            None
        };
        Snapshot {
            tick: self.t / self.cfg.session.tick_budget_ms,
            t: self.t,
            layout: self.scene.name.clone(),
            mode: self.mode,
            status: self.status,
            agent: Pose {
                x: self.agent.position.x,
                y: self.agent.position.y,
                heading: self.agent.heading,
            },
            field: FieldView {
                x: self.scene.origin.x,
                y: self.scene.origin.y,
                width: self.scene.field_width,
                length: self.scene.field_length,
            },
            obstacles: self
                .scene
                .obstacles
                .iter()
                .map(|o| ObstacleView {
                    x: o.center.x,
                    y: o.center.y,
                    r: o.radius,
                })
                .collect(),
            belt: self.playing,
            grid: GridView::of(shown),
            contacts: self.contacts.len(),
        }
    }
}

fn start_pose(scene: &Scene) -> AgentState {
    AgentState {
        position: scene.start,
        heading: (scene.goal.y - scene.start.y).atan2(scene.goal.x - scene.start.x),
        speed: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belt::MemoryBus;

    const EMPTY: &str = r#"{"name":"empty"}"#;

    #[test]
    fn control_wire_format() {
        let cases = [
            (r#"{"steer":"turn_left"}"#, Control::Steer(Steer::TurnLeft)),
            (r#"{"steer":"forward"}"#, Control::Steer(Steer::Forward)),
            (r#"{"set_mode":"depth"}"#, Control::SetMode(Mode::Depth)),
            (
                r#"{"load_layout":"hard-g"}"#,
                Control::LoadLayout("hard-g".into()),
            ),
            (r#"{"reset":null}"#, Control::Reset(())),
            (r#"{"set_speed":0.5}"#, Control::SetSpeed(0.5)),
        ];
        for (text, control) in cases {
            assert_eq!(parse_control(text).unwrap(), control);
            assert_eq!(encode_line(&control).unwrap(), format!("{text}\n"));
        }
    }

    #[test]
    fn control_rejects_anything_else() {
        for bad in [
            r#"{"steer":"jump"}"#,
            r#"{"fly":1}"#,
            r#"{"set_mode":"sonar"}"#,
            r#"{"set_speed":-1}"#,
            r#"{"set_speed":0}"#,
            r#"{"steer":"stop","reset":null}"#,
            r#""reset""#,
            "",
            "not json",
        ] {
            assert!(
                matches!(parse_control(bad), Err(Error::MalformedPayload(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn empty_field_snapshot_stream() {
        let mut s = CockpitSession::new(EMPTY, Mode::OpenPath, TrialConfig::default()).unwrap();
        let snaps: Vec<Snapshot> = (0..4).map(|_| s.step()).collect();
        assert_eq!(snaps[0].belt, BeltCommand::ZERO);
        assert_eq!(snaps[0].grid, GridView::None);
        // the first tick completes at 150 ms and is published at 300 ms
        assert_eq!(snaps[2].belt.levels(), [0, 0, 0, 0, 3, 3, 0, 0, 0, 0]);
        let GridView::OpenPath {
            raw,
            adjusted,
            selected,
        } = &snaps[2].grid
        else {
            panic!("expected open-path scores")
        };
        assert_eq!((raw.len(), raw[0].len()), (3, 7));
        assert_eq!((adjusted.len(), adjusted[0].len()), (2, 5));
        assert_eq!(*selected, Some(3));
        assert!(snaps
            .iter()
            .all(|s| s.status == TrialStatus::Ready && s.contacts == 0));

        let text: String = snaps.iter().map(|s| encode_line(s).unwrap()).collect();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(decode_snapshots(&text).unwrap(), snaps);
    }

    #[test]
    fn steering_moves_the_walker() {
        let mut s = CockpitSession::new(EMPTY, Mode::Depth, TrialConfig::default()).unwrap();
        let y0 = s.agent().position.y;
        s.apply(&Control::SetSpeed(0.5)).unwrap();
        s.apply(&Control::Steer(Steer::Forward)).unwrap();
        for _ in 0..10 {
            s.step();
        }
        assert!((s.agent().position.y - y0 - 0.75).abs() < 1e-9);
        let h = s.agent().heading;
        s.apply(&Control::Steer(Steer::TurnLeft)).unwrap();
        let snap = s.step();
        assert!((wrap_angle(snap.agent.heading - h) - 1.5 * 0.15).abs() < 1e-9);
        assert_eq!(snap.status, TrialStatus::Outbound);
        assert!(matches!(snap.grid, GridView::Depth { ref cells } if cells.len() == 10));
    }

    #[test]
    fn reset_restarts_the_clock() {
        let mut s = CockpitSession::new("easy-a", Mode::OpenPath, TrialConfig::default()).unwrap();
        s.apply(&Control::Steer(Steer::Forward)).unwrap();
        for _ in 0..8 {
            s.step();
        }
        assert!(s.t() > 0);
        s.apply(&Control::Reset(())).unwrap();
        let snap = s.snapshot();
        assert_eq!((snap.t, snap.tick, snap.contacts), (0, 0, 0));
        assert_eq!(snap.status, TrialStatus::Ready);
        assert_eq!(snap.belt, BeltCommand::ZERO);
        assert_eq!(s.step().t, 150);
    }

    #[test]
    fn layout_and_mode_controls() {
        let mut s = CockpitSession::new(EMPTY, Mode::OpenPath, TrialConfig::default()).unwrap();
        assert!(matches!(
            s.apply(&Control::LoadLayout("nowhere".into())),
            Err(Error::Scene(_)) | Err(Error::Config(_))
        ));
        s.apply(&Control::LoadLayout("hard-h".into())).unwrap();
        assert_eq!(s.snapshot().layout, "hard-h");
        assert_eq!(s.snapshot().obstacles.len(), 12);
        s.apply(&Control::SetMode(Mode::CaneOnly)).unwrap();
        for _ in 0..4 {
            let snap = s.step();
            assert_eq!(snap.belt, BeltCommand::ZERO);
            assert_eq!(snap.grid, GridView::None);
        }
    }

    #[test]
    fn belt_commands_reach_the_transport() {
        let bus = MemoryBus::new();
        let rx = bus.subscribe(&PublisherConfig::default().topic);
        let mut s =
            CockpitSession::with_transport(EMPTY, Mode::OpenPath, TrialConfig::default(), bus)
                .unwrap();
        for _ in 0..6 {
            s.step();
        }
        // publishes at 0, 300 and 600 ms
        let got: Vec<_> = rx.try_iter().collect();
        assert_eq!(got.len(), 3);
        assert_eq!(
            crate::belt::decode_command(&got[2].payload)
                .unwrap()
                .levels(),
            [0, 0, 0, 0, 3, 3, 0, 0, 0, 0]
        );
    }
}
