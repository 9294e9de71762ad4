//! Perception-to-haptics pipeline for a five-unit vibrotactile navigation belt.
//!
//! Two navigation modes turn camera-derived inputs into a ten-motor belt
//! command: [`open_path`] scores a floor segmentation and points toward the most
//! spacious column, [`depth`] alarms per belt cell from relative closeness.
//! Commands travel to the belt units over a publish/subscribe protocol
//! ([`belt`]) and drive the firmware emulated in [`unit`]. The [`scene`],
//! [`sim`] and [`stats`] modules provide a synthetic obstacle course, a
//! closed-loop walker and the analysis toolkit used to evaluate the modes.

pub mod belt;
pub mod cockpit;
pub mod depth;
pub mod error;
pub mod grid;
pub mod open_path;
pub mod pgm;
pub mod pipeline;
pub mod scene;
pub mod sim;
pub mod stats;
pub mod unit;

pub use error::{Error, Result};
pub use grid::{
    BeltCommand, BoundingBox, DepthMap, FloorMask, GridSpec, Intensity, MotorRow, Rect,
};
