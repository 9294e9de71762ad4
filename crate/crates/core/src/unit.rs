//! Emulation of one modular unit's firmware.
//!
//! Each motor runs atomic episodes: 100 ms of vibration at the mapped frequency,
//! then 200 ms of silence. Triggers that arrive mid-episode are ignored for that
//! motor; a trigger exactly at the end of an episode starts the next one.

use serde::{Deserialize, Serialize};

use crate::belt::{decode_command, unit_slice, ClientId, Millis};
use crate::grid::{Intensity, MotorRow};

pub const VIBRATE_MS: Millis = 100;
pub const SILENT_MS: Millis = 200;
pub const EPISODE_MS: Millis = VIBRATE_MS + SILENT_MS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Vibrating,
    Refractory,
}

/// Observable state of one motor at an instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotorState {
    pub phase: Phase,
    pub intensity: Intensity,
    pub frequency_hz: u32,
    /// Start of the current phase; `None` for an idle motor that never ran.
    pub phase_start: Option<Millis>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub start: Millis,
    pub intensity: Intensity,
}

/// One motor's schedule: the episodes it has run, latest last.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Motor {
    episodes: Vec<Episode>,
}

impl Motor {
    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    fn episode_at(&self, t: Millis) -> Option<&Episode> {
        let idx = self.episodes.partition_point(|e| e.start <= t);
        self.episodes[..idx]
            .last()
            .filter(|e| t < e.start + EPISODE_MS)
    }

    pub fn state_at(&self, t: Millis) -> MotorState {
        match self.episode_at(t) {
            Some(e) if t < e.start + VIBRATE_MS => MotorState {
                phase: Phase::Vibrating,
                intensity: e.intensity,
                frequency_hz: e.intensity.frequency_hz(),
                phase_start: Some(e.start),
            },
            Some(e) => MotorState {
                phase: Phase::Refractory,
                intensity: Intensity::Off,
                frequency_hz: 0,
                phase_start: Some(e.start + VIBRATE_MS),
            },
            None => MotorState {
                phase: Phase::Idle,
                intensity: Intensity::Off,
                frequency_hz: 0,
                phase_start: self
                    .episodes
                    .iter()
                    .rev()
                    .find(|e| e.start <= t)
                    .map(|e| e.start + EPISODE_MS),
            },
        }
    }

    /// Starts an episode if the motor is idle at `now`. Returns whether it did.
    pub fn trigger(&mut self, level: Intensity, now: Millis) -> bool {
        if !level.is_on() || self.episode_at(now).is_some() {
            return false;
        }
        if self.episodes.last().is_some_and(|e| e.start > now) {
            // events must arrive in time order
            return false;
        }
        self.episodes.push(Episode {
            start: now,
            intensity: level,
        });
        true
    }

    /// Total vibrating time inside `[from, to)`.
    pub fn active_ms(&self, from: Millis, to: Millis) -> Millis {
        self.episodes
            .iter()
            .map(|e| {
                let s = e.start.max(from);
                let f = (e.start + VIBRATE_MS).min(to);
                f.saturating_sub(s)
            })
            .sum()
    }
}

/// A phase change reported on the unit's status line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub t: Millis,
    pub row: MotorRow,
    pub phase: Phase,
    pub frequency_hz: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitState {
    pub id: ClientId,
    pub top: Motor,
    pub bottom: Motor,
    /// Battery LED analog.
    pub battery_ok: bool,
    /// Link LED analog.
    pub link_ok: bool,
    pub messages: u64,
    pub malformed: u64,
}

impl UnitState {
    pub fn new(id: ClientId) -> Self {
        Self {
            id,
            top: Motor::default(),
            bottom: Motor::default(),
            battery_ok: true,
            link_ok: false,
            messages: 0,
            malformed: 0,
        }
    }

    pub fn motor(&self, row: MotorRow) -> &Motor {
        match row {
            MotorRow::Top => &self.top,
            MotorRow::Bottom => &self.bottom,
        }
    }

    /// Handles one payload from the belt topic. Malformed payloads only bump the counter.
    pub fn on_message(&mut self, payload: &[u8], now: Millis) {
        self.messages += 1;
        let cmd = match decode_command(payload) {
            Ok(c) => c,
            Err(_) => {
                self.malformed += 1;
                return;
            }
        };
        self.link_ok = true;
        let (top, bottom) = unit_slice(&cmd, self.id);
        self.top.trigger(top, now);
        self.bottom.trigger(bottom, now);
    }

    pub fn motor_state_at(&self, row: MotorRow, t: Millis) -> MotorState {
        self.motor(row).state_at(t)
    }

    /// Phase transitions of both motors in `[from, to)`, time ordered.
    pub fn transitions(&self, from: Millis, to: Millis) -> Vec<Transition> {
        let mut out = Vec::new();
        for row in [MotorRow::Top, MotorRow::Bottom] {
            for e in self.motor(row).episodes() {
                let steps = [
                    (e.start, Phase::Vibrating, e.intensity.frequency_hz()),
                    (e.start + VIBRATE_MS, Phase::Refractory, 0),
                    (e.start + EPISODE_MS, Phase::Idle, 0),
                ];
                for (t, phase, frequency_hz) in steps {
                    // an idle step immediately followed by a new episode is not a real transition
                    let restarted = phase == Phase::Idle
                        && self.motor(row).episodes().iter().any(|n| n.start == t);
                    if t >= from && t < to && !restarted {
                        out.push(Transition {
                            t,
                            row,
                            phase,
                            frequency_hz,
                        });
                    }
                }
            }
        }
        out.sort_by_key(|x| (x.t, x.row == MotorRow::Bottom));
        out
    }
}
