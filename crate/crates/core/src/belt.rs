//! Wire protocol between the pipeline host and the five belt units.
//!
//! Payload: ASCII, ten single-digit intensities joined by commas, no whitespace,
//! no trailing newline, e.g. `0,0,0,0,3,3,0,0,0,0`. Every unit subscribes to the
//! same topic and takes the two slots at its position.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BeltCommand, Intensity, MotorRow, MOTORS, UNITS};

pub const DEFAULT_TOPIC: &str = "vw/belt/command";
pub const TOPIC_ENV: &str = "VW_BELT_TOPIC";
pub const BROKER_ENV: &str = "VW_BROKER";

/// Milliseconds on a session timeline.
pub type Millis = u64;

pub fn encode_command(cmd: &BeltCommand) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 * MOTORS - 1);
    for (k, level) in cmd.levels().iter().enumerate() {
        if k > 0 {
            out.push(b',');
        }
        out.push(b'0' + level);
    }
    out
}

pub fn decode_command(payload: &[u8]) -> Result<BeltCommand> {
    let text =
        std::str::from_utf8(payload).map_err(|_| Error::MalformedPayload("not ASCII".into()))?;
    let fields: Vec<&str> = text.split(',').collect();
    if fields.len() != MOTORS {
        return Err(Error::MalformedPayload(format!(
            "expected {MOTORS} fields, got {}",
            fields.len()
        )));
    }
    let mut levels = [0u8; MOTORS];
    for (k, f) in fields.iter().enumerate() {
        let b = f.as_bytes();
        if b.len() != 1 || !b[0].is_ascii_digit() {
            return Err(Error::MalformedPayload(format!(
                "field {k} is `{f}`, not a single digit"
            )));
        }
        let v = b[0] - b'0';
        if v > 3 {
            return Err(Error::MalformedPayload(format!(
                "field {k} = {v} outside 0..=3"
            )));
        }
        levels[k] = v;
    }
    BeltCommand::from_levels(&levels).map_err(|e| Error::MalformedPayload(e.to_string()))
}

/// `client1` .. `client5`, left to right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ClientId(u8);

impl ClientId {
    pub fn new(position: usize) -> Result<Self> {
        if (1..=UNITS).contains(&position) {
            Ok(Self(position as u8))
        } else {
            Err(Error::UnknownClient(format!("client{position}")))
        }
    }

    pub fn position(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = ClientId> {
        (1..=UNITS).map(|p| ClientId(p as u8))
    }
}

impl FromStr for ClientId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownClient(s.to_string());
        let digits = s.strip_prefix("client").ok_or_else(unknown)?;
        if digits.len() != 1 {
            return Err(unknown());
        }
        let p: usize = digits.parse().map_err(|_| unknown())?;
        Self::new(p).map_err(|_| unknown())
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "client{}", self.0)
    }
}

impl TryFrom<String> for ClientId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ClientId> for String {
    fn from(c: ClientId) -> String {
        c.to_string()
    }
}

/// `(top, bottom)` intensities addressed to one unit.
pub fn unit_slice(cmd: &BeltCommand, id: ClientId) -> (Intensity, Intensity) {
    (
        cmd.get(id.position(), MotorRow::Top),
        cmd.get(id.position(), MotorRow::Bottom),
    )
}

/// Same as [`unit_slice`] for an unparsed id.
pub fn unit_slice_by_name(cmd: &BeltCommand, id: &str) -> Result<(Intensity, Intensity)> {
    Ok(unit_slice(cmd, id.parse()?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublisherConfig {
    pub topic: String,
    pub period_ms: Millis,
    pub broker: String,
}

impl Default for PublisherConfig {
    fn default() -> Self {
        Self {
            topic: DEFAULT_TOPIC.into(),
            period_ms: 300,
            broker: "localhost:1883".into(),
        }
    }
}

impl PublisherConfig {
    /// Defaults overridden by `VW_BELT_TOPIC` / `VW_BROKER` when set.
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Ok(t) = std::env::var(TOPIC_ENV) {
            if !t.is_empty() {
                cfg.topic = t;
            }
        }
        if let Ok(b) = std::env::var(BROKER_ENV) {
            if !b.is_empty() {
                cfg.broker = b;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.period_ms == 0 {
            return Err(Error::Config("publish period must be positive".into()));
        }
        if self.topic.is_empty() {
            return Err(Error::Config("empty topic".into()));
        }
        Ok(())
    }
}

/// Time source for the periodic loops.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> Millis;
    /// Blocks (or, when emulated, jumps) until `t`.
    fn sleep_until(&self, t: Millis);
}

/// Discrete millisecond clock that advances only when told to.
#[derive(Debug, Default)]
pub struct EmulatedClock {
    now: AtomicU64,
}

impl EmulatedClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance_to(&self, t: Millis) {
        self.now.fetch_max(t, Ordering::SeqCst);
    }
}

impl Clock for EmulatedClock {
    fn now_ms(&self) -> Millis {
        self.now.load(Ordering::SeqCst)
    }

    fn sleep_until(&self, t: Millis) {
        self.advance_to(t);
    }
}

#[derive(Debug, Clone)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> Millis {
        self.origin.elapsed().as_millis() as Millis
    }

    fn sleep_until(&self, t: Millis) {
        let now = self.now_ms();
        if t > now {
            std::thread::sleep(Duration::from_millis(t - now));
        }
    }
}

const PRESENT: u64 = 1 << 63;
const LEVEL_BITS: u32 = 2 * MOTORS as u32;

/// Latest-value slot between the scoring loop and the publisher. Lock-free:
/// the command and its stamp are packed into one atomic word.
#[derive(Debug, Clone, Default)]
pub struct CommandSlot(Arc<AtomicU64>);

impl CommandSlot {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces the slot content; `stamp` is truncated to 40 bits.
    pub fn store(&self, cmd: &BeltCommand, stamp: Millis) {
        let mut word = 0u64;
        for (k, l) in cmd.levels().iter().enumerate() {
            word |= (*l as u64) << (2 * k);
        }
        word |= (stamp & ((1 << 40) - 1)) << LEVEL_BITS;
        self.0.store(word | PRESENT, Ordering::Release);
    }

    /// Most recent command and its stamp, if any was stored.
    pub fn load(&self) -> Option<(BeltCommand, Millis)> {
        let word = self.0.load(Ordering::Acquire);
        if word & PRESENT == 0 {
            return None;
        }
        let mut levels = [0u8; MOTORS];
        for (k, l) in levels.iter_mut().enumerate() {
            *l = ((word >> (2 * k)) & 0b11) as u8;
        }
        let stamp = (word & !PRESENT) >> LEVEL_BITS;
        Some((
            BeltCommand::from_levels(&levels).expect("2-bit fields are in range"),
            stamp,
        ))
    }

    /// Latest command, or silence before the first store.
    pub fn latest(&self) -> BeltCommand {
        self.load().map_or(BeltCommand::ZERO, |(c, _)| c)
    }

    pub fn clear(&self) {
        self.0.store(0, Ordering::Release);
    }
}

/// Outbound side of the network.
pub trait Transport {
    fn publish(&mut self, topic: &str, payload: &[u8]) -> Result<()>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn publish(&mut self, topic: &str, payload: &[u8]) -> Result<()> {
        (**self).publish(topic, payload)
    }
}

/// Publish sink with no listeners.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullTransport;

impl Transport for NullTransport {
    fn publish(&mut self, _topic: &str, _payload: &[u8]) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusMessage {
    pub topic: String,
    pub payload: Vec<u8>,
}

/// In-process broker used in test mode. Cloning shares the broker.
#[derive(Debug, Clone, Default)]
pub struct MemoryBus {
    subscribers: Arc<Mutex<Vec<(String, mpsc::Sender<BusMessage>)>>>,
}

impl MemoryBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(&self, topic: &str) -> mpsc::Receiver<BusMessage> {
        let (tx, rx) = mpsc::channel();
        self.subscribers
            .lock()
            .expect("bus lock")
            .push((topic.to_string(), tx));
        rx
    }
}

impl Transport for MemoryBus {
    fn publish(&mut self, topic: &str, payload: &[u8]) -> Result<()> {
        let mut subs = self.subscribers.lock().expect("bus lock");
        subs.retain(|(t, tx)| {
            t != topic
                || tx
                    .send(BusMessage {
                        topic: topic.to_string(),
                        payload: payload.to_vec(),
                    })
                    .is_ok()
        });
        Ok(())
    }
}

/// One publish attempt on the cadence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishEvent {
    pub t: Millis,
    pub command: BeltCommand,
    pub delivered: bool,
}

const BACKOFF_START_MS: Millis = 300;
const BACKOFF_MAX_MS: Millis = 5_000;

/// Periodic latest-value publisher.
pub struct Publisher<T> {
    cfg: PublisherConfig,
    transport: T,
    slot: CommandSlot,
    next_due: Millis,
    backoff: Millis,
    retry_at: Millis,
    connected: Arc<AtomicBool>,
}

impl<T: Transport> Publisher<T> {
    pub fn new(cfg: PublisherConfig, transport: T, slot: CommandSlot) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            transport,
            slot,
            next_due: 0,
            backoff: 0,
            retry_at: 0,
            connected: Arc::new(AtomicBool::new(true)),
        })
    }

    /// Shared connectivity flag; false while publishes are failing.
    pub fn connectivity(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.connected)
    }

    pub fn next_due(&self) -> Millis {
        self.next_due
    }

    /// Restarts the cadence at t = 0, as for a fresh publisher.
    pub fn restart(&mut self) {
        self.next_due = 0;
        self.backoff = 0;
        self.retry_at = 0;
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    /// Publishes once if the cadence is due at `now`. A late call publishes a
    /// single time and realigns to the next multiple of the period.
    pub fn poll(&mut self, now: Millis) -> Option<PublishEvent> {
        if now < self.next_due {
            return None;
        }
        let period = self.cfg.period_ms;
        self.next_due = (now / period + 1) * period;
        let command = self.slot.latest();
        let delivered = if now < self.retry_at {
            false
        } else {
            match self
                .transport
                .publish(&self.cfg.topic, &encode_command(&command))
            {
                Ok(()) => {
                    self.backoff = 0;
                    self.connected.store(true, Ordering::Release);
                    true
                }
                Err(_) => {
                    self.backoff = if self.backoff == 0 {
                        BACKOFF_START_MS
                    } else {
                        (self.backoff * 2).min(BACKOFF_MAX_MS)
                    };
                    self.retry_at = now + self.backoff;
                    self.connected.store(false, Ordering::Release);
                    false
                }
            }
        };
        Some(PublishEvent {
            t: now,
            command,
            delivered,
        })
    }

    /// Runs the cadence until `until` (inclusive) or until `stop` is raised.
    pub fn run(
        &mut self,
        clock: &dyn Clock,
        until: Option<Millis>,
        stop: &AtomicBool,
        mut on_publish: impl FnMut(&PublishEvent),
    ) {
        loop {
            let due = self.next_due.max(clock.now_ms());
            if until.is_some_and(|u| due > u) || stop.load(Ordering::Acquire) {
                return;
            }
            clock.sleep_until(due);
            if let Some(ev) = self.poll(clock.now_ms()) {
                on_publish(&ev);
            }
        }
    }
}

/// Emulated-clock publisher run over `[0, window]`, driven by a provider that
/// reports which command (if any) became available at each millisecond.
pub fn run_publisher_emulated<T: Transport>(
    transport: T,
    cfg: &PublisherConfig,
    window: Millis,
    mut provider: impl FnMut(Millis) -> Option<BeltCommand>,
) -> Result<Vec<PublishEvent>> {
    let slot = CommandSlot::new();
    let mut publisher = Publisher::new(cfg.clone(), transport, slot.clone())?;
    let mut out = Vec::new();
    for t in 0..=window {
        if let Some(cmd) = provider(t) {
            slot.store(&cmd, t);
        }
        if let Some(ev) = publisher.poll(t) {
            out.push(ev);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cmd(levels: [u8; 10]) -> BeltCommand {
        BeltCommand::from_levels(&levels).unwrap()
    }

    #[test]
    fn encode_examples() {
        assert_eq!(
            encode_command(&cmd([3, 3, 0, 0, 0, 0, 0, 0, 0, 0])),
            b"3,3,0,0,0,0,0,0,0,0"
        );
        assert_eq!(encode_command(&BeltCommand::ZERO), b"0,0,0,0,0,0,0,0,0,0");
    }

    #[test]
    fn decode_rejects_bad_payloads() {
        for bad in [
            &b"1,2,3,0,0,0,0,0,0,4"[..],
            b"0,0,0,0,0,0,0,0,0",
            b"0,0,0,0,0,0,0,0,0,0,0",
            b"0,0,0,0,0,0,0,0,0,0\n",
            b" 0,0,0,0,0,0,0,0,0,0",
            b"0,0,0,0,0,0,0,0,0,",
            b"00,0,0,0,0,0,0,0,0,0",
            b"0,0,0,0,0,0,0,0,0,-1",
            b"",
            b"\xff,0,0,0,0,0,0,0,0,0",
        ] {
            assert!(
                matches!(decode_command(bad), Err(Error::MalformedPayload(_))),
                "{bad:?}"
            );
        }
        assert_eq!(
            decode_command(b"1,2,3,0,0,0,0,0,0,3").unwrap().levels(),
            [1, 2, 3, 0, 0, 0, 0, 0, 0, 3]
        );
    }

    #[test]
    fn slices() {
        let c = cmd([3, 1, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(
            unit_slice(&c, "client1".parse().unwrap()),
            (Intensity::High, Intensity::Low)
        );
        let c = cmd([0, 0, 0, 0, 0, 0, 0, 0, 2, 3]);
        assert_eq!(
            unit_slice_by_name(&c, "client5").unwrap(),
            (Intensity::Medium, Intensity::High)
        );
        assert!(matches!(
            unit_slice_by_name(&c, "client6"),
            Err(Error::UnknownClient(_))
        ));
        for bad in ["client0", "client", "Client1", "client12", "unit1", ""] {
            assert!(bad.parse::<ClientId>().is_err(), "{bad}");
        }
        assert_eq!(ClientId::new(3).unwrap().to_string(), "client3");
    }

    #[test]
    fn slot_is_latest_value() {
        let slot = CommandSlot::new();
        assert_eq!(slot.load(), None);
        assert_eq!(slot.latest(), BeltCommand::ZERO);
        let a = cmd([1, 2, 3, 0, 1, 2, 3, 0, 1, 2]);
        slot.store(&a, 450);
        assert_eq!(slot.load(), Some((a, 450)));
        slot.store(&BeltCommand::ZERO, 600);
        assert_eq!(slot.load(), Some((BeltCommand::ZERO, 600)));
    }

    #[test]
    fn four_publishes_in_one_second() {
        let evs =
            run_publisher_emulated(MemoryBus::new(), &PublisherConfig::default(), 1000, |_| {
                None
            })
            .unwrap();
        let ts: Vec<Millis> = evs.iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![0, 300, 600, 900]);
        assert!(evs
            .iter()
            .all(|e| e.command == BeltCommand::ZERO && e.delivered));
    }

    #[test]
    fn latest_value_semantics() {
        let a = cmd([0, 0, 0, 0, 3, 3, 0, 0, 0, 0]);
        let b = cmd([3, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let c = cmd([0, 0, 0, 0, 0, 0, 0, 0, 0, 3]);
        let evs = run_publisher_emulated(
            MemoryBus::new(),
            &PublisherConfig::default(),
            1000,
            |t| match t {
                310 => Some(a),
                650 => Some(b),
                700 => Some(c),
                _ => None,
            },
        )
        .unwrap();
        let cmds: Vec<BeltCommand> = evs.iter().map(|e| e.command).collect();
        assert_eq!(cmds, vec![BeltCommand::ZERO, BeltCommand::ZERO, a, c]);
    }

    #[test]
    fn bus_delivers_to_topic_subscribers() {
        let mut bus = MemoryBus::new();
        let rx = bus.subscribe(DEFAULT_TOPIC);
        let other = bus.subscribe("elsewhere");
        bus.publish(DEFAULT_TOPIC, b"x").unwrap();
        assert_eq!(rx.try_recv().unwrap().payload, b"x");
        assert!(other.try_recv().is_err());
    }

    struct Flaky {
        fail_until: usize,
        calls: usize,
    }

    impl Transport for Flaky {
        fn publish(&mut self, _: &str, _: &[u8]) -> Result<()> {
            self.calls += 1;
            if self.calls <= self.fail_until {
                Err(Error::Transport("broker down".into()))
            } else {
                Ok(())
            }
        }
    }

    #[test]
    fn disconnect_backs_off_and_recovers() {
        let slot = CommandSlot::new();
        let mut p = Publisher::new(
            PublisherConfig::default(),
            Flaky {
                fail_until: 2,
                calls: 0,
            },
            slot,
        )
        .unwrap();
        let flag = p.connectivity();
        let mut delivered = Vec::new();
        for t in 0..=3000 {
            if let Some(ev) = p.poll(t) {
                delivered.push((ev.t, ev.delivered, flag.load(Ordering::Acquire)));
            }
        }
        // fail at 0 (retry after 300), fail at 300 (retry after 600 more), skip 600, succeed at 900
        assert_eq!(delivered[0], (0, false, false));
        assert_eq!(delivered[1], (300, false, false));
        assert_eq!(delivered[2], (600, false, false));
        assert_eq!(delivered[3], (900, true, true));
        // eleven ticks, one skipped while backing off
        assert_eq!(p.transport().calls, 10);
        assert!(delivered[4..].iter().all(|d| d.1));
    }

    #[test]
    fn run_on_emulated_clock_is_exact() {
        let clock = EmulatedClock::new();
        let mut p = Publisher::new(
            PublisherConfig::default(),
            MemoryBus::new(),
            CommandSlot::new(),
        )
        .unwrap();
        let mut ts = Vec::new();
        p.run(&clock, Some(3000), &AtomicBool::new(false), |e| {
            ts.push(e.t)
        });
        assert_eq!(ts, (0..=10).map(|k| k * 300).collect::<Vec<_>>());
    }

    #[test]
    fn config_from_env_and_validation() {
        assert!(PublisherConfig {
            period_ms: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(PublisherConfig::default().topic, "vw/belt/command");
    }
}
