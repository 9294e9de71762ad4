//! Geometric and command types shared by both navigation modes and the belt network.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of modular units on the belt.
pub const UNITS: usize = 5;
/// Number of motors on the belt (two rows of five).
pub const MOTORS: usize = 10;

/// Layout of the 2x5 belt grid and the 3x7 margin grid that surrounds it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub belt_rows: usize,
    pub belt_cols: usize,
    pub ext_rows: usize,
    pub ext_cols: usize,
    /// 1-based belt column that points straight ahead.
    pub center_col: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            belt_rows: 2,
            belt_cols: 5,
            ext_rows: 3,
            ext_cols: 7,
            center_col: 3,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.belt_rows == 0 || self.belt_cols == 0 {
            return Err(Error::Config("belt grid must be non-empty".into()));
        }
        if self.ext_rows != self.belt_rows + 1 || self.ext_cols != self.belt_cols + 2 {
            return Err(Error::Config(
                "margin grid must add one row on top and one column per side".into(),
            ));
        }
        if self.center_col == 0 || self.center_col > self.belt_cols {
            return Err(Error::Config("center column outside the belt".into()));
        }
        Ok(())
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Boundary `k` of `n` equal parts of `extent`, rounded half-up.
pub fn split_point(extent: usize, n: usize, k: usize) -> usize {
    (2 * k * extent + n) / (2 * n)
}

/// Cell of a `cols x rows` partition of `span`. `row_from_top` counts image rows downward.
pub fn partition_cell(
    span: Rect,
    cols: usize,
    rows: usize,
    col: usize,
    row_from_top: usize,
) -> Result<Rect> {
    if col >= cols || row_from_top >= rows {
        return Err(Error::Index(format!(
            "cell ({col}, {row_from_top}) outside a {cols}x{rows} grid"
        )));
    }
    if span.is_empty() {
        return Err(Error::Index("empty span".into()));
    }
    let (w, h) = (span.width(), span.height());
    Ok(Rect {
        x0: span.x0 + split_point(w, cols, col),
        x1: span.x0 + split_point(w, cols, col + 1),
        y0: span.y0 + split_point(h, rows, row_from_top),
        y1: span.y0 + split_point(h, rows, row_from_top + 1),
    })
}

/// Pixel rectangle of margin-grid cell `(col, row)`; row 0 is the bottom row.
pub fn cell_rect(grid: &GridSpec, span: Rect, col: usize, row: usize) -> Result<Rect> {
    if row >= grid.ext_rows {
        return Err(Error::Index(format!("row {row} outside the margin grid")));
    }
    partition_cell(
        span,
        grid.ext_cols,
        grid.ext_rows,
        col,
        grid.ext_rows - 1 - row,
    )
}

/// Vibration level of a single motor.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(into = "u8", try_from = "u8")]
pub enum Intensity {
    #[default]
    Off = 0,
    Low = 1,
    Medium = 2,
    High = 3,
}

impl Intensity {
    pub const ALL: [Intensity; 4] = [Self::Off, Self::Low, Self::Medium, Self::High];

    pub fn level(self) -> u8 {
        self as u8
    }

    /// Nominal ERM drive frequency in Hz.
    pub fn frequency_hz(self) -> u32 {
        match self {
            Self::Off => 0,
            Self::Low => 80,
            Self::Medium => 150,
            Self::High => 250,
        }
    }

    pub fn is_on(self) -> bool {
        self != Self::Off
    }
}

impl TryFrom<u8> for Intensity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::Off),
            1 => Ok(Self::Low),
            2 => Ok(Self::Medium),
            3 => Ok(Self::High),
            _ => Err(Error::InvalidCommand(format!("intensity {v} not in 0..=3"))),
        }
    }
}

impl From<Intensity> for u8 {
    fn from(i: Intensity) -> u8 {
        i.level()
    }
}

/// Which of the two motors inside a modular unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotorRow {
    Top,
    Bottom,
}

impl MotorRow {
    pub fn offset(self) -> usize {
        match self {
            Self::Top => 0,
            Self::Bottom => 1,
        }
    }
}

/// The ten-motor control signal. Slot `k` drives unit `k / 2 + 1`; even slots are top motors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(into = "Vec<u8>", try_from = "Vec<u8>")]
pub struct BeltCommand([Intensity; MOTORS]);

impl BeltCommand {
    pub const ZERO: BeltCommand = BeltCommand([Intensity::Off; MOTORS]);

    pub fn new(intensities: [Intensity; MOTORS]) -> Self {
        Self(intensities)
    }

    /// Validates raw levels: exactly ten, each in `0..=3`.
    pub fn from_levels(levels: &[u8]) -> Result<Self> {
        if levels.len() != MOTORS {
            return Err(Error::InvalidCommand(format!(
                "expected {MOTORS} intensities, got {}",
                levels.len()
            )));
        }
        let mut out = [Intensity::Off; MOTORS];
        for (slot, &v) in out.iter_mut().zip(levels) {
            *slot = Intensity::try_from(v)?;
        }
        Ok(Self(out))
    }

    pub fn levels(&self) -> [u8; MOTORS] {
        self.0.map(Intensity::level)
    }

    pub fn intensities(&self) -> &[Intensity; MOTORS] {
        &self.0
    }

    /// Slot index for `unit` (1-based, left to right) and `row`.
    pub fn slot(unit: usize, row: MotorRow) -> usize {
        debug_assert!((1..=UNITS).contains(&unit));
        2 * (unit - 1) + row.offset()
    }

    pub fn get(&self, unit: usize, row: MotorRow) -> Intensity {
        self.0[Self::slot(unit, row)]
    }

    pub fn set(&mut self, unit: usize, row: MotorRow, level: Intensity) {
        self.0[Self::slot(unit, row)] = level;
    }

    pub fn is_silent(&self) -> bool {
        self.0.iter().all(|i| !i.is_on())
    }

    /// Units with at least one running motor.
    pub fn active_units(&self) -> Vec<usize> {
        (1..=UNITS)
            .filter(|&u| {
                self.get(u, MotorRow::Top).is_on() || self.get(u, MotorRow::Bottom).is_on()
            })
            .collect()
    }
}

impl fmt::Display for BeltCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (k, i) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", i.level())?;
        }
        write!(f, "]")
    }
}

impl TryFrom<Vec<u8>> for BeltCommand {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        Self::from_levels(&v)
    }
}

impl From<BeltCommand> for Vec<u8> {
    fn from(c: BeltCommand) -> Vec<u8> {
        c.levels().to_vec()
    }
}

/// Binary floor segmentation, row-major, top row first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FloorMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl FloorMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config("mask dimensions must be positive".into()));
        }
        if bits.len() != width * height {
            return Err(Error::Config(format!(
                "mask has {} pixels, expected {}",
                bits.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn frame(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn floor_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Floor pixels inside `r` (clipped to the frame).
    pub fn count_in(&self, r: Rect) -> usize {
        let x1 = r.x1.min(self.width);
        let y1 = r.y1.min(self.height);
        if r.x0 >= x1 {
            return 0;
        }
        (r.y0..y1)
            .map(|y| {
                let row = &self.bits[y * self.width..(y + 1) * self.width];
                row[r.x0..x1].iter().filter(|&&b| b).count()
            })
            .sum()
    }

    /// Tight axis-aligned bounds of the floor pixels.
    pub fn floor_bounds(&self) -> Option<Rect> {
        let mut bounds: Option<Rect> = None;
        for y in 0..self.height {
            let row = &self.bits[y * self.width..(y + 1) * self.width];
            let Some(first) = row.iter().position(|&b| b) else {
                continue;
            };
            let last = row.iter().rposition(|&b| b).unwrap_or(first);
            bounds = Some(match bounds {
                None => Rect::new(first, y, last + 1, y + 1),
                Some(b) => Rect::new(b.x0.min(first), b.y0, b.x1.max(last + 1), y + 1),
            });
        }
        bounds
    }

    /// Keeps only floor pixels inside `r`.
    pub fn restricted_to(&self, r: Rect) -> FloorMask {
        let bits = self
            .bits
            .iter()
            .enumerate()
            .map(|(i, &b)| b && r.contains(i % self.width, i / self.width))
            .collect();
        FloorMask {
            width: self.width,
            height: self.height,
            bits,
        }
    }
}

/// Per-pixel closeness in `[0, 1]`; 1 is nearest. Row-major, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    closeness: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, closeness: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(
                "depth map dimensions must be positive".into(),
            ));
        }
        if closeness.len() != width * height {
            return Err(Error::Config(format!(
                "depth map has {} pixels, expected {}",
                closeness.len(),
                width * height
            )));
        }
        if let Some((index, &value)) = closeness
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidDepth { index, value });
        }
        Ok(Self {
            width,
            height,
            closeness,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.closeness
    }

    pub fn frame(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.closeness[y * self.width + x]
    }
}

/// Detector output box: `(x1, y1)` inclusive top-left, `(x2, y2)` exclusive bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
    pub confidence: f64,
}

impl BoundingBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize, confidence: f64) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            confidence,
        }
    }

    pub fn validate(&self, frame_w: usize, frame_h: usize) -> Result<()> {
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::Config(format!("degenerate box {self:?}")));
        }
        if self.x2 > frame_w || self.y2 > frame_h {
            return Err(Error::Config(format!(
                "box {self:?} exceeds {frame_w}x{frame_h} frame"
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Config(format!(
                "confidence {} outside [0,1]",
                self.confidence
            )));
        }
        Ok(())
    }

    pub fn rect(&self) -> Rect {
        Rect::new(self.x1, self.y1, self.x2, self.y2)
    }

    pub fn coords(&self) -> (usize, usize, usize, usize) {
        (self.x1, self.y1, self.x2, self.y2)
    }
}
