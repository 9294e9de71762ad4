//! Open path mode: finds the most spacious direction in the floor segmentation and
//! points the belt at it.
//!
//! The floor mask is overlaid with a 3x7 margin grid whose inner bottom 2x5 block
//! matches the belt. Each margin-grid cell gets a raw traversability score (its
//! floor fraction). Each belt cell then gets a neighbourhood-weighted adjusted score
//! with two 5% boosts, and the belt column with the largest adjusted sum is signalled
//! at high intensity.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    cell_rect, BeltCommand, BoundingBox, FloorMask, GridSpec, Intensity, MotorRow, Rect,
};

pub const WEIGHT_CENTER: f64 = 0.4;
pub const WEIGHT_TOP: f64 = 0.2;
pub const WEIGHT_SIDE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenPathConfig {
    /// Detections strictly below this confidence mean "no floor".
    pub confidence_floor: f64,
    /// Column sums strictly below this produce no signal.
    pub no_signal_sum: f64,
    /// Top cell at or above this lights both motors of the selected unit.
    pub top_cell_gate: f64,
    /// Base adjusted scores strictly above this are boosted.
    pub boost_gate: f64,
    pub boost_factor: f64,
    pub center_factor: f64,
}

impl Default for OpenPathConfig {
    fn default() -> Self {
        Self {
            confidence_floor: 0.02,
            no_signal_sum: 0.8,
            top_cell_gate: 0.9,
            boost_gate: 0.95,
            boost_factor: 1.05,
            center_factor: 1.05,
        }
    }
}

impl OpenPathConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("confidence_floor", self.confidence_floor),
            ("no_signal_sum", self.no_signal_sum),
            ("top_cell_gate", self.top_cell_gate),
            ("boost_gate", self.boost_gate),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} = {v} outside (0, 1]")));
            }
        }
        if !(self.boost_factor >= 1.0) || !(self.center_factor >= 1.0) {
            return Err(Error::Config("boost factors must be >= 1".into()));
        }
        Ok(())
    }
}

/// Dense row-major score matrix addressed as `(col, row)` with row 0 at the bottom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    cols: usize,
    rows: usize,
    /// `values[row][col]`, bottom row first.
    values: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn filled(cols: usize, rows: usize, v: f64) -> Self {
        Self {
            cols,
            rows,
            values: vec![vec![v; cols]; rows],
        }
    }

    pub fn from_rows(values: Vec<Vec<f64>>) -> Result<Self> {
        let rows = values.len();
        let cols = values.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || values.iter().any(|r| r.len() != cols) {
            return Err(Error::Config(
                "score matrix must be rectangular and non-empty".into(),
            ));
        }
        Ok(Self { cols, rows, values })
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.values[row][col]
    }

    pub fn set(&mut self, col: usize, row: usize, v: f64) {
        self.values[row][col] = v;
    }

    /// Rows bottom first.
    pub fn rows_bottom_up(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }
}

/// The column chosen for signalling. `col` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub col: usize,
    pub top_high: bool,
    pub sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScoreGrid {
    /// Margin-grid span in image pixels.
    pub span: Rect,
    pub raw: ScoreMatrix,
    pub adjusted: ScoreMatrix,
    pub selected: Option<Selection>,
}

/// Snaps the detection's bottom-right corner to the frame corner and averages it
/// with the previous frame's box. `None` when nothing usable was detected.
pub fn postprocess_bbox(
    raw: Option<BoundingBox>,
    frame_w: usize,
    frame_h: usize,
    prev: Option<BoundingBox>,
    cfg: &OpenPathConfig,
) -> Option<BoundingBox> {
    let raw = raw?;
    if raw.confidence < cfg.confidence_floor {
        return None;
    }
    let snapped = BoundingBox {
        x2: frame_w,
        y2: frame_h,
        ..raw
    };
    let Some(p) = prev else {
        return Some(snapped);
    };
    let mean = |a: usize, b: usize| (a + b).div_ceil(2);
    Some(BoundingBox {
        x1: mean(snapped.x1, p.x1),
        y1: mean(snapped.y1, p.y1),
        x2: mean(snapped.x2, p.x2),
        y2: mean(snapped.y2, p.y2),
        confidence: (snapped.confidence + p.confidence) / 2.0,
    })
}

/// Two-frame box smoothing state; one per pipeline session.
#[derive(Debug, Clone, Default)]
pub struct BoxSmoother {
    prev: Option<BoundingBox>,
}

impl BoxSmoother {
    pub fn update(
        &mut self,
        raw: Option<BoundingBox>,
        frame_w: usize,
        frame_h: usize,
        cfg: &OpenPathConfig,
    ) -> Option<BoundingBox> {
        let out = postprocess_bbox(raw, frame_w, frame_h, self.prev, cfg);
        // a frame without floor drops the history
        self.prev = out;
        out
    }

    pub fn previous(&self) -> Option<BoundingBox> {
        self.prev
    }

    pub fn reset(&mut self) {
        self.prev = None;
    }
}

/// Floor fraction of every margin-grid cell over the tight floor bounds.
pub fn raw_scores(mask: &FloorMask, grid: &GridSpec) -> Result<(Rect, ScoreMatrix)> {
    let span = mask.floor_bounds().ok_or(Error::NoFloor)?;
    let mut raw = ScoreMatrix::filled(grid.ext_cols, grid.ext_rows, 0.0);
    for row in 0..grid.ext_rows {
        for col in 0..grid.ext_cols {
            let r = cell_rect(grid, span, col, row)?;
            let area = r.area();
            let v = if area == 0 {
                0.0
            } else {
                mask.count_in(r) as f64 / area as f64
            };
            raw.set(col, row, v);
        }
    }
    Ok((span, raw))
}

/// Neighbourhood-weighted belt-cell scores with the high-score and center boosts.
pub fn adjusted_scores(raw: &ScoreMatrix, grid: &GridSpec, cfg: &OpenPathConfig) -> ScoreMatrix {
    let mut out = ScoreMatrix::filled(grid.belt_cols, grid.belt_rows, 0.0);
    for j in 0..grid.belt_rows {
        for bc in 0..grid.belt_cols {
            let i = bc + 1;
            let base = WEIGHT_CENTER * raw.at(i, j)
                + WEIGHT_TOP * raw.at(i, j + 1)
                + WEIGHT_SIDE
                    * (raw.at(i - 1, j)
                        + raw.at(i + 1, j)
                        + raw.at(i + 1, j + 1)
                        + raw.at(i - 1, j + 1));
            let mut v = base;
            if base > cfg.boost_gate {
                v *= cfg.boost_factor;
            }
            if bc + 1 == grid.center_col {
                v *= cfg.center_factor;
            }
            out.set(bc, j, v);
        }
    }
    out
}

/// Column with the largest adjusted sum; ties go to the column nearest the
/// center, then to the leftmost. `None` when the best sum is below the gate.
pub fn select_column(
    adjusted: &ScoreMatrix,
    grid: &GridSpec,
    cfg: &OpenPathConfig,
) -> Option<Selection> {
    let top_row = adjusted.rows() - 1;
    let mut best: Option<(usize, f64)> = None;
    for bc in 0..adjusted.cols() {
        let sum: f64 = (0..adjusted.rows()).map(|r| adjusted.at(bc, r)).sum();
        let col = bc + 1;
        let better = match best {
            None => true,
            Some((bcol, bsum)) => {
                sum > bsum
                    || (sum == bsum
                        && col.abs_diff(grid.center_col) < bcol.abs_diff(grid.center_col))
            }
        };
        if better {
            best = Some((col, sum));
        }
    }
    let (col, sum) = best?;
    if sum < cfg.no_signal_sum {
        return None;
    }
    Some(Selection {
        col,
        top_high: adjusted.at(col - 1, top_row) >= cfg.top_cell_gate,
        sum,
    })
}

/// Full scoring of one floor mask.
pub fn score_mask(
    mask: &FloorMask,
    grid: &GridSpec,
    cfg: &OpenPathConfig,
) -> Result<CellScoreGrid> {
    let (span, raw) = raw_scores(mask, grid)?;
    let adjusted = adjusted_scores(&raw, grid, cfg);
    let selected = select_column(&adjusted, grid, cfg);
    Ok(CellScoreGrid {
        span,
        raw,
        adjusted,
        selected,
    })
}

/// Belt command for a selection: bottom motor high, top motor high too when the top cell is clear.
pub fn command_for(selected: Option<Selection>) -> BeltCommand {
    let mut cmd = BeltCommand::ZERO;
    if let Some(s) = selected {
        cmd.set(s.col, MotorRow::Bottom, Intensity::High);
        if s.top_high {
            cmd.set(s.col, MotorRow::Top, Intensity::High);
        }
    }
    cmd
}

/// End-to-end open path mode. A missing or empty mask yields the silent command.
pub fn open_path_command(
    mask: Option<&FloorMask>,
    cfg: &OpenPathConfig,
    grid: &GridSpec,
) -> BeltCommand {
    match mask.map(|m| score_mask(m, grid, cfg)) {
        Some(Ok(scores)) => command_for(scores.selected),
        _ => BeltCommand::ZERO,
    }
}

/// Result of one open-path frame.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenPathOutcome {
    pub bbox: Option<BoundingBox>,
    pub scores: Option<CellScoreGrid>,
    pub command: BeltCommand,
}

/// Per-session open path state: the detector box history.
#[derive(Debug, Clone, Default)]
pub struct OpenPathSession {
    pub cfg: OpenPathConfig,
    pub grid: GridSpec,
    smoother: BoxSmoother,
}

impl OpenPathSession {
    pub fn new(cfg: OpenPathConfig, grid: GridSpec) -> Self {
        Self {
            cfg,
            grid,
            smoother: BoxSmoother::default(),
        }
    }

    /// Runs one frame. The segmenter only returns floor inside its box prompt,
    /// so `floor` is clipped to the smoothed detection box before scoring.
    pub fn process(
        &mut self,
        detection: Option<BoundingBox>,
        floor: &FloorMask,
    ) -> OpenPathOutcome {
        let bbox = self
            .smoother
            .update(detection, floor.width(), floor.height(), &self.cfg);
        let scores = bbox
            .and_then(|b| score_mask(&floor.restricted_to(b.rect()), &self.grid, &self.cfg).ok());
        let command = command_for(scores.as_ref().and_then(|s| s.selected));
        OpenPathOutcome {
            bbox,
            scores,
            command,
        }
    }

    pub fn reset(&mut self) {
        self.smoother.reset();
    }
}

/// Text rendering of the grid: raw score in every margin cell, adjusted score
/// in brackets for belt cells, `*` marking the selected column.
pub fn dump(scores: &CellScoreGrid, grid: &GridSpec) -> String {
    let mut s = String::new();
    let sel = scores.selected.map(|x| x.col);
    let _ = writeln!(
        s,
        "span x[{}, {}) y[{}, {})",
        scores.span.x0, scores.span.x1, scores.span.y0, scores.span.y1
    );
    s.push_str("     ");
    for col in 0..grid.ext_cols {
        let belt_col = (1..=grid.belt_cols).contains(&col).then_some(col);
        let mark = if belt_col.is_some() && belt_col == sel {
            '*'
        } else {
            ' '
        };
        match belt_col {
            Some(c) => {
                let _ = write!(s, "  unit{c}{mark}   ");
            }
            None => s.push_str("  margin   "),
        }
    }
    s.push('\n');
    for row in (0..grid.ext_rows).rev() {
        let _ = write!(s, "r{row}   ");
        for col in 0..grid.ext_cols {
            let raw = scores.raw.at(col, row);
            let belt = row < grid.belt_rows && (1..=grid.belt_cols).contains(&col);
            if belt {
                let _ = write!(s, "{raw:.2}[{:.2}] ", scores.adjusted.at(col - 1, row));
            } else {
                let _ = write!(s, "{raw:.2}       ");
            }
        }
        s.push('\n');
    }
    match scores.selected {
        Some(x) => {
            let _ = writeln!(
                s,
                "selected unit {} (sum {:.3}, top {})",
                x.col,
                x.sum,
                if x.top_high { "high" } else { "off" }
            );
        }
        None => s.push_str("no signal\n"),
    }
    s
}
