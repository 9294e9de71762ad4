//! Paired-comparison analysis: Wilcoxon signed-rank test and the three-sigma
//! outlier rule, applied to per-trial metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::scene::Difficulty;
use crate::sim::{MetricsRow, Mode};

/// Largest effective sample size that gets the exact null distribution.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSampleSet {
    pub labels: (String, String),
    pub pairs: Vec<(f64, f64)>,
}

impl PairedSampleSet {
    pub fn new(a: &str, b: &str, pairs: Vec<(f64, f64)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config(
                "paired sample set needs at least one pair".into(),
            ));
        }
        if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(Error::Config("paired samples must be finite".into()));
        }
        Ok(Self {
            labels: (a.to_string(), b.to_string()),
            pairs,
        })
    }

    pub fn differences(&self) -> Vec<f64> {
        self.pairs.iter().map(|(a, b)| a - b).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_two_sided: f64,
    pub n_effective: usize,
    pub method: PMethod,
}

/// Midranks of `values` (1-based), ties sharing the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Signed-rank test on `a - b`; zero differences dropped, ties midranked.
pub fn wilcoxon_signed_rank(set: &PairedSampleSet) -> Result<WilcoxonResult> {
    wilcoxon_from_differences(&set.differences())
}

pub fn wilcoxon_from_differences(diffs: &[f64]) -> Result<WilcoxonResult> {
    let d: Vec<f64> = diffs.iter().copied().filter(|&x| x != 0.0).collect();
    if d.is_empty() {
        return Err(Error::DegenerateSample);
    }
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks = midranks(&abs);
    // midranks are multiples of 1/2: work with doubled ranks to stay in integers
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let w_plus2: usize = d
        .iter()
        .zip(&doubled)
        .filter(|(x, _)| **x > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let total2: usize = doubled.iter().sum();
    let w_minus2 = total2 - w_plus2;
    let w2 = w_plus2.min(w_minus2);
    let n = d.len();
    let (p, method) = if n <= EXACT_MAX_N {
        (exact_p(&doubled, w2), PMethod::Exact)
    } else {
        (normal_p(&abs, n, w2 as f64 / 2.0), PMethod::Normal)
    };
    Ok(WilcoxonResult {
        w: w2 as f64 / 2.0,
        w_plus: w_plus2 as f64 / 2.0,
        w_minus: w_minus2 as f64 / 2.0,
        p_two_sided: p,
        n_effective: n,
        method,
    })
}

/// Share of the `2^n` sign patterns whose smaller rank sum is at most `w2`
/// (all quantities in doubled ranks). Counts patterns per positive-rank sum
/// with a subset-sum table instead of listing them.
fn exact_p(doubled: &[usize], w2: usize) -> f64 {
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in doubled {
        reach += r;
        for s in (r..=reach).rev() {
            counts[s] += counts[s - r];
        }
    }
    let hits: u64 = counts
        .iter()
        .enumerate()
        .filter(|&(s, _)| s.min(total - s) <= w2)
        .map(|(_, &c)| c)
        .sum();
    hits as f64 / (1u64 << doubled.len()) as f64
}

/// Normal approximation with tie-corrected variance and continuity correction.
fn normal_p(abs: &[f64], n: usize, w: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * (1.0 - std_normal.cdf(z))).min(1.0)
}

/// Removes values farther than three population standard deviations from the
/// mean, in a single pass. Order of the kept values is preserved.
pub fn exclude_outliers(values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (kept, removed): (Vec<(usize, f64)>, Vec<(usize, f64)>) = outlier_mask(values)
        .into_iter()
        .zip(values)
        .enumerate()
        .map(|(i, (out, &v))| (i, v, out))
        .fold((Vec::new(), Vec::new()), |(mut k, mut r), (i, v, out)| {
            if out {
                r.push((i, v));
            } else {
                k.push((i, v));
            }
            (k, r)
        });
    (
        kept.into_iter().map(|x| x.1).collect(),
        removed.into_iter().map(|x| x.1).collect(),
    )
}

/// `true` for each value the three-sigma rule would drop.
pub fn outlier_mask(values: &[f64]) -> Vec<bool> {
    if values.len() < 2 {
        return vec![false; values.len()];
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    values.iter().map(|v| (v - mean).abs() > 3.0 * sd).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CompletionTime,
    HesitationPct,
    CaneContacts,
    SafetyWindow,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Self::CompletionTime,
        Self::HesitationPct,
        Self::CaneContacts,
        Self::SafetyWindow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::CompletionTime => "completion_time",
            Self::HesitationPct => "hesitation_pct",
            Self::CaneContacts => "cane_contacts",
            Self::SafetyWindow => "safety_window",
        }
    }

    pub fn of(self, row: &MetricsRow) -> f64 {
        match self {
            Self::CompletionTime => row.completion_time,
            Self::HesitationPct => row.hesitation_pct,
            Self::CaneContacts => row.contacts as f64,
            Self::SafetyWindow => row.safety_window,
        }
    }
}

/// One paired comparison in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub difficulty: Difficulty,
    pub metric: Metric,
    pub treatment: Mode,
    pub control: Mode,
    pub n_pairs: usize,
    pub n_excluded: usize,
    pub mean_treatment: f64,
    pub mean_control: f64,
    pub mean_difference: f64,
    pub w: Option<f64>,
    pub p_two_sided: Option<f64>,
    pub method: Option<PMethod>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ComparisonRow>,
    pub warnings: Vec<String>,
}

pub const COMPARISONS: [(Mode, Mode); 2] = [
    (Mode::OpenPath, Mode::CaneOnly),
    (Mode::Depth, Mode::CaneOnly),
];

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per difficulty and metric: each device mode against cane only, paired by
/// `(layout, seed)` after three-sigma exclusion within each condition.
pub fn summarize_experiment(table: &[MetricsRow]) -> Result<Report> {
    let present: BTreeSet<Mode> = table.iter().map(|r| r.mode).collect();
    for m in Mode::ALL {
        if !present.contains(&m) {
            return Err(Error::Config(format!(
                "metrics table has no `{}` trials",
                m.name()
            )));
        }
    }
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for difficulty in Difficulty::ALL {
        let in_diff: Vec<&MetricsRow> = table
            .iter()
            .filter(|r| Difficulty::of_layout(&r.layout) == Some(difficulty))
            .collect();
        if in_diff.is_empty() {
            continue;
        }
        for metric in Metric::ALL {
            // condition -> (layout, seed) -> value, outliers removed
            let mut kept: BTreeMap<Mode, BTreeMap<(String, u64), f64>> = BTreeMap::new();
            let mut excluded: BTreeMap<Mode, usize> = BTreeMap::new();
            for mode in Mode::ALL {
                let rows_m: Vec<&&MetricsRow> = in_diff.iter().filter(|r| r.mode == mode).collect();
                let values: Vec<f64> = rows_m.iter().map(|r| metric.of(r)).collect();
                let mask = outlier_mask(&values);
                excluded.insert(mode, mask.iter().filter(|&&x| x).count());
                let map = rows_m
                    .iter()
                    .zip(mask)
                    .filter(|(_, out)| !out)
                    .map(|(r, _)| ((r.layout.clone(), r.seed), metric.of(r)))
                    .collect();
                kept.insert(mode, map);
            }
            for (treatment, control) in COMPARISONS {
                let (t, c) = (&kept[&treatment], &kept[&control]);
                let pairs: Vec<(f64, f64)> = t
                    .iter()
                    .filter_map(|(k, &a)| c.get(k).map(|&b| (a, b)))
                    .collect();
                let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
                let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                let mut row = ComparisonRow {
                    difficulty,
                    metric,
                    treatment,
                    control,
                    n_pairs: pairs.len(),
                    n_excluded: excluded[&treatment] + excluded[&control],
                    mean_treatment: mean(&a),
                    mean_control: mean(&b),
                    mean_difference: mean(&a) - mean(&b),
                    w: None,
                    p_two_sided: None,
                    method: None,
                    note: String::new(),
                };
                if pairs.is_empty() {
                    row.note = "no complete pairs".into();
                } else {
                    let set = PairedSampleSet::new(treatment.name(), control.name(), pairs)?;
                    match wilcoxon_signed_rank(&set) {
                        Ok(w) => {
                            row.w = Some(w.w);
                            row.p_two_sided = Some(w.p_two_sided);
                            row.method = Some(w.method);
                            if w.n_effective == 1 {
                                row.note = "n=1".into();
                            }
                        }
                        Err(e) => row.note = e.to_string(),
                    }
                }
                if row.n_pairs == 1 {
                    warnings.push(format!(
                        "{} {} {} vs {}: only one pair",
                        difficulty.name(),
                        metric.name(),
                        treatment.name(),
                        control.name()
                    ));
                }
                rows.push(row);
            }
        }
    }
    Ok(Report { rows, warnings })
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<7} {:<16} {:<20} {:>4} {:>10} {:>10} {:>10} {:>8} {:>8}  note",
            "level", "metric", "comparison", "n", "mean_trt", "mean_ctl", "diff", "W", "p"
        );
        for r in &self.rows {
            let sig = if r.p_two_sided.is_some_and(|p| p < 0.05) {
                "*"
            } else {
                ""
            };
            let _ = writeln!(
                s,
                "{:<7} {:<16} {:<20} {:>4} {:>10.3} {:>10.3} {:>10.3} {:>8} {:>8}{sig:<1} {}",
                r.difficulty.name(),
                r.metric.name(),
                format!("{} vs {}", r.treatment.name(), r.control.name()),
                r.n_pairs,
                r.mean_treatment,
                r.mean_control,
                r.mean_difference,
                opt(r.w, 1),
                opt(r.p_two_sided, 4),
                r.note
            );
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record([
            "difficulty",
            "metric",
            "treatment",
            "control",
            "n_pairs",
            "n_excluded",
            "mean_treatment",
            "mean_control",
            "mean_difference",
            "w",
            "p_two_sided",
            "method",
            "note",
        ])
        .map_err(|e| Error::Io(e.to_string()))?;
        for r in &self.rows {
            wtr.write_record([
                r.difficulty.name().to_string(),
                r.metric.name().to_string(),
                r.treatment.name().to_string(),
                r.control.name().to_string(),
                r.n_pairs.to_string(),
                r.n_excluded.to_string(),
                format!("{:.6}", r.mean_treatment),
                format!("{:.6}", r.mean_control),
                format!("{:.6}", r.mean_difference),
                opt(r.w, 1),
                opt(r.p_two_sided, 6),
                r.method
                    .map_or("-", |m| match m {
                        PMethod::Exact => "exact",
                        PMethod::Normal => "normal",
                    })
                    .to_string(),
                r.note.clone(),
            ])
            .map_err(|e| Error::Io(e.to_string()))?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }
}
