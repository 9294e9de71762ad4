//! Depth mode: per-cell proximity alarms from a relative closeness map.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{partition_cell, BeltCommand, DepthMap, GridSpec, Intensity, MotorRow, Rect};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthBinConfig {
    pub close_gate: f64,
    pub medium_gate: f64,
    pub far_gate: f64,
    pub far_frac: f64,
    pub medium_frac: f64,
    pub close_frac: f64,
}

impl Default for DepthBinConfig {
    fn default() -> Self {
        Self {
            close_gate: 0.80,
            medium_gate: 0.65,
            far_gate: 0.50,
            far_frac: 0.50,
            medium_frac: 0.40,
            close_frac: 0.30,
        }
    }
}

impl DepthBinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.far_gate
            && self.far_gate < self.medium_gate
            && self.medium_gate < self.close_gate
            && self.close_gate < 1.0)
        {
            return Err(Error::Config(
                "bin gates must satisfy 0 < far < medium < close < 1".into(),
            ));
        }
        for f in [self.far_frac, self.medium_frac, self.close_frac] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("fraction {f} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthBin {
    Close,
    Medium,
    Far,
    Ignored,
}

/// Upper-inclusive bins: close `> 0.80`, medium `(0.65, 0.80]`, far `(0.50, 0.65]`.
pub fn classify(d: f64, cfg: &DepthBinConfig) -> DepthBin {
    if d > cfg.close_gate {
        DepthBin::Close
    } else if d > cfg.medium_gate {
        DepthBin::Medium
    } else if d > cfg.far_gate {
        DepthBin::Far
    } else {
        DepthBin::Ignored
    }
}

/// Min-max rescale of a closeness-like matrix (larger = closer) into `[0, 1]`.
/// A constant input maps to all zeros.
pub fn rescale_depth(width: usize, height: usize, raw: &[f64]) -> Result<DepthMap> {
    if width == 0 || height == 0 || raw.len() != width * height {
        return Err(Error::Config(format!(
            "raw depth has {} values for a {width}x{height} frame",
            raw.len()
        )));
    }
    if let Some((index, &value)) = raw.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidDepth { index, value });
    }
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let values = if range > 0.0 && range.is_finite() {
        raw.iter()
            .map(|&v| ((v - lo) / range).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; raw.len()]
    };
    DepthMap::new(width, height, values)
}

/// Fractions of a cell's pixels in the close, medium and far bins.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BinFractions {
    pub close: f64,
    pub medium: f64,
    pub far: f64,
}

pub fn bin_fractions(depth: &DepthMap, cell: Rect, cfg: &DepthBinConfig) -> Result<BinFractions> {
    if cell.is_empty() || cell.x1 > depth.width() || cell.y1 > depth.height() {
        return Err(Error::Index(format!(
            "cell {cell:?} empty or outside the depth map"
        )));
    }
    let (mut close, mut medium, mut far) = (0usize, 0usize, 0usize);
    let w = depth.width();
    for y in cell.y0..cell.y1 {
        for &d in &depth.values()[y * w + cell.x0..y * w + cell.x1] {
            match classify(d, cfg) {
                DepthBin::Close => close += 1,
                DepthBin::Medium => medium += 1,
                DepthBin::Far => far += 1,
                DepthBin::Ignored => {}
            }
        }
    }
    let n = cell.area() as f64;
    Ok(BinFractions {
        close: close as f64 / n,
        medium: medium as f64 / n,
        far: far as f64 / n,
    })
}

/// Safety-priority rule: close beats medium beats far; all comparisons strict.
pub fn cell_intensity(f: BinFractions, cfg: &DepthBinConfig) -> Intensity {
    if f.close > cfg.close_frac {
        Intensity::High
    } else if f.medium > cfg.medium_frac {
        Intensity::Medium
    } else if f.far > cfg.far_frac {
        Intensity::Low
    } else {
        Intensity::Off
    }
}

/// One belt cell of the depth analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthCell {
    /// 1-based unit.
    pub unit: usize,
    pub row: MotorRow,
    pub rect: Rect,
    pub fractions: BinFractions,
    pub intensity: Intensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthAnalysis {
    /// Command-slot order.
    pub cells: Vec<DepthCell>,
    pub command: BeltCommand,
}

/// Splits the whole map into the 2x5 belt grid and evaluates every cell.
pub fn analyze_depth(
    depth: &DepthMap,
    grid: &GridSpec,
    cfg: &DepthBinConfig,
) -> Result<DepthAnalysis> {
    let mut cells = Vec::with_capacity(grid.belt_cols * grid.belt_rows);
    let mut command = BeltCommand::ZERO;
    for unit in 1..=grid.belt_cols {
        for (row_from_top, row) in [MotorRow::Top, MotorRow::Bottom].into_iter().enumerate() {
            let rect = partition_cell(
                depth.frame(),
                grid.belt_cols,
                grid.belt_rows,
                unit - 1,
                row_from_top,
            )?;
            let fractions = bin_fractions(depth, rect, cfg)?;
            let intensity = cell_intensity(fractions, cfg);
            command.set(unit, row, intensity);
            cells.push(DepthCell {
                unit,
                row,
                rect,
                fractions,
                intensity,
            });
        }
    }
    Ok(DepthAnalysis { cells, command })
}

/// Maps too small to split into ten cells yield the silent command.
pub fn depth_command(depth: &DepthMap, cfg: &DepthBinConfig) -> BeltCommand {
    analyze_depth(depth, &GridSpec::default(), cfg)
        .map(|a| a.command)
        .unwrap_or(BeltCommand::ZERO)
}

/// Per-cell fraction table.
pub fn dump(analysis: &DepthAnalysis) -> String {
    let mut s = String::from("unit row     close  medium  far    level\n");
    for c in &analysis.cells {
        let row = match c.row {
            MotorRow::Top => "top   ",
            MotorRow::Bottom => "bottom",
        };
        let _ = writeln!(
            s,
            "{:<4} {row}  {:.3}  {:.3}   {:.3}  {}",
            c.unit,
            c.fractions.close,
            c.fractions.medium,
            c.fractions.far,
            c.intensity.level()
        );
    }
    let _ = writeln!(s, "command {}", analysis.command);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DepthBinConfig {
        DepthBinConfig::default()
    }

    fn fr(close: f64, medium: f64, far: f64) -> BinFractions {
        BinFractions { close, medium, far }
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(
            rescale_depth(3, 1, &[10.0, 20.0, 30.0]).unwrap().values(),
            &[0.0, 0.5, 1.0]
        );
        assert_eq!(rescale_depth(3, 1, &[5.0; 3]).unwrap().values(), &[0.0; 3]);
        assert_eq!(
            rescale_depth(3, 1, &[-1.0, 0.0, 3.0]).unwrap().values(),
            &[0.0, 0.25, 1.0]
        );
    }

    #[test]
    fn rescale_rejects_non_finite() {
        assert!(matches!(
            rescale_depth(2, 1, &[0.0, f64::INFINITY]),
            Err(Error::InvalidDepth { index: 1, .. })
        ));
        assert!(rescale_depth(2, 1, &[f64::NAN, 0.0]).is_err());
        assert!(rescale_depth(2, 2, &[0.0]).is_err());
    }

    #[test]
    fn fractions_by_counting() {
        let d = DepthMap::new(4, 1, vec![0.9, 0.7, 0.6, 0.3]).unwrap();
        assert_eq!(
            bin_fractions(&d, d.frame(), &cfg()).unwrap(),
            fr(0.25, 0.25, 0.25)
        );
        let d = DepthMap::new(1, 1, vec![0.80]).unwrap();
        assert_eq!(
            bin_fractions(&d, d.frame(), &cfg()).unwrap(),
            fr(0.0, 1.0, 0.0)
        );
        let d = DepthMap::new(2, 2, vec![0.4; 4]).unwrap();
        assert_eq!(
            bin_fractions(&d, d.frame(), &cfg()).unwrap(),
            fr(0.0, 0.0, 0.0)
        );
        assert!(bin_fractions(&d, Rect::new(1, 1, 1, 2), &cfg()).is_err());
        assert!(bin_fractions(&d, Rect::new(0, 0, 3, 2), &cfg()).is_err());
    }

    #[test]
    fn intensity_rules() {
        let c = cfg();
        assert_eq!(cell_intensity(fr(0.31, 0.0, 0.0), &c), Intensity::High);
        assert_eq!(cell_intensity(fr(0.10, 0.45, 0.0), &c), Intensity::Medium);
        assert_eq!(cell_intensity(fr(0.20, 0.30, 0.55), &c), Intensity::Low);
        assert_eq!(cell_intensity(fr(0.30, 0.40, 0.50), &c), Intensity::Off);
        assert_eq!(cell_intensity(fr(0.35, 0.0, 0.60), &c), Intensity::High);
    }

    #[test]
    fn uniform_maps() {
        let zero = DepthMap::new(10, 4, vec![0.0; 40]).unwrap();
        assert_eq!(depth_command(&zero, &cfg()), BeltCommand::ZERO);
        let near = DepthMap::new(10, 4, vec![0.9; 40]).unwrap();
        assert_eq!(depth_command(&near, &cfg()).levels(), [3; 10]);
    }

    #[test]
    fn left_half_close() {
        let (w, h) = (20, 6);
        let vals = (0..w * h)
            .map(|i| if i % w < w / 2 { 0.9 } else { 0.0 })
            .collect();
        let d = DepthMap::new(w, h, vals).unwrap();
        // units 1 and 2 fully close, unit 3 straddles the edge at exactly 50% close
        assert_eq!(
            depth_command(&d, &cfg()).levels(),
            [3, 3, 3, 3, 3, 3, 0, 0, 0, 0]
        );
        let (w, h) = (50, 6);
        let vals = (0..w * h)
            .map(|i| if i % w < 20 { 0.9 } else { 0.0 })
            .collect();
        let d = DepthMap::new(w, h, vals).unwrap();
        assert_eq!(
            depth_command(&d, &cfg()).levels(),
            [3, 3, 3, 3, 0, 0, 0, 0, 0, 0]
        );
    }

    #[test]
    fn top_image_half_drives_top_motors() {
        let (w, h) = (10, 4);
        let vals = (0..w * h)
            .map(|i| if i / w < 2 { 0.9 } else { 0.0 })
            .collect();
        let d = DepthMap::new(w, h, vals).unwrap();
        assert_eq!(
            depth_command(&d, &cfg()).levels(),
            [3, 0, 3, 0, 3, 0, 3, 0, 3, 0]
        );
    }

    #[test]
    fn dump_lists_every_cell() {
        let d = DepthMap::new(10, 2, vec![0.7; 20]).unwrap();
        let a = analyze_depth(&d, &GridSpec::default(), &cfg()).unwrap();
        let text = dump(&a);
        assert_eq!(text.lines().count(), 12);
        assert!(text.contains("command [2,2,2,2,2,2,2,2,2,2]"));
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(DepthBinConfig {
            medium_gate: 0.9,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(DepthBinConfig {
            close_frac: 1.0,
            ..cfg()
        }
        .validate()
        .is_err());
    }
}
