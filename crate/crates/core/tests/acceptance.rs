//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Every check compares the library against an oracle written here from the
//! definitions, not against the library's own helpers.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vw_core::belt::{decode_command, encode_command, unit_slice, ClientId, NullTransport};
use vw_core::depth::{
    bin_fractions, cell_intensity, classify, depth_command, DepthBin, DepthBinConfig,
};
use vw_core::open_path::{
    adjusted_scores, command_for, raw_scores, score_mask, select_column, OpenPathConfig,
    ScoreMatrix,
};
use vw_core::pipeline::{run_session, FixturePerception, Frame, NavMode, Session, SessionConfig};
use vw_core::scene::{build_course, render_views_serial, CameraModel};
use vw_core::sim::{run_experiment, run_trial, Mode, TrialConfig};
use vw_core::stats::wilcoxon_from_differences;
use vw_core::unit::{Phase, UnitState};
use vw_core::{BeltCommand, DepthMap, FloorMask, GridSpec, Intensity, MotorRow, Rect};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- shared oracles ----

/// Boundary `k` of `n` equal parts of `extent`, nearest pixel, halves up.
fn boundary(extent: usize, n: usize, k: usize) -> usize {
    (k as f64 * extent as f64 / n as f64 + 0.5).floor() as usize
}

/// Index of the part of `n` that offset `x` falls into.
fn part_of(extent: usize, n: usize, x: usize) -> usize {
    (0..n).rev().find(|&k| boundary(extent, n, k) <= x).unwrap()
}

/// Floor fraction per margin-grid cell by visiting every pixel once.
/// Returned `[row][col]`, bottom row first.
fn raw_oracle(mask: &FloorMask) -> Option<[[f64; 7]; 3]> {
    let (w, h) = (mask.width(), mask.height());
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    let (bw, bh) = (x1 - x0, y1 - y0);
    let mut floor = [[0usize; 7]; 3];
    let mut total = [[0usize; 7]; 3];
    for y in y0..y1 {
        let row = 2 - part_of(bh, 3, y - y0);
        for x in x0..x1 {
            let col = part_of(bw, 7, x - x0);
            total[row][col] += 1;
            if mask.get(x, y) {
                floor[row][col] += 1;
            }
        }
    }
    let mut out = [[0.0; 7]; 3];
    for r in 0..3 {
        for c in 0..7 {
            out[r][c] = if total[r][c] == 0 {
                0.0
            } else {
                floor[r][c] as f64 / total[r][c] as f64
            };
        }
    }
    Some(out)
}

/// Adjusted belt scores straight from the weighting rule:
/// 0.4 C + 0.2 T + 0.1 (L + R + TL + TR), x1.05 above 0.95, x1.05 more in the center column.
fn adjusted_oracle(raw: &ScoreMatrix) -> [[f64; 5]; 2] {
    let mut out = [[0.0; 5]; 2];
    for j in 0..2 {
        for b in 0..5 {
            let i = b + 1;
            let c = raw.at(i, j);
            let t = raw.at(i, j + 1);
            let l = raw.at(i - 1, j);
            let r = raw.at(i + 1, j);
            let tl = raw.at(i - 1, j + 1);
            let tr = raw.at(i + 1, j + 1);
            let mut v = 0.4 * c + 0.2 * t + 0.1 * (l + r + tr + tl);
            if v > 0.95 {
                v *= 1.05;
            }
            if b == 2 {
                v *= 1.05;
            }
            out[j][b] = v;
        }
    }
    out
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> FloorMask {
    let xa = rng.gen_range(0..w);
    let xb = rng.gen_range(xa + 1..=w);
    let ya = rng.gen_range(0..h);
    let yb = rng.gen_range(ya + 1..=h);
    let p: f64 = rng.gen_range(0.02..0.98);
    FloorMask::from_fn(w, h, |x, y| {
        x >= xa && x < xb && y >= ya && y < yb && rng.gen_bool(p)
    })
    .unwrap()
}

// ---- criteria ----

fn scoring_oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5c0e);
    let grid = GridSpec::default();
    let cfg = OpenPathConfig::default();
    let mut worst_adjusted: f64 = 0.0;
    let mut masks = 0;
    while masks < 200 {
        let mask = random_mask(&mut rng, 700, 300);
        let Some(expect) = raw_oracle(&mask) else {
            continue;
        };
        masks += 1;
        let (_, raw) = raw_scores(&mask, &grid).map_err(|e| e.to_string())?;
        for r in 0..3 {
            for c in 0..7 {
                ensure(raw.at(c, r) == expect[r][c], || {
                    format!(
                        "mask {masks}: raw ({c},{r}) = {} but oracle {}",
                        raw.at(c, r),
                        expect[r][c]
                    )
                })?;
            }
        }
        let adjusted = adjusted_scores(&raw, &grid, &cfg);
        let expect = adjusted_oracle(&raw);
        for j in 0..2 {
            for b in 0..5 {
                worst_adjusted = worst_adjusted.max((adjusted.at(b, j) - expect[j][b]).abs());
            }
        }
    }
    let elapsed = started.elapsed();
    ensure(worst_adjusted <= 1e-12, || {
        format!("adjusted off by {worst_adjusted:e}")
    })?;
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "200 masks 700x300, raw exact, adjusted max err {worst_adjusted:e}, {elapsed:.2?}"
    ))
}

fn all_clear() -> Outcome {
    let mask = FloorMask::from_fn(640, 360, |_, _| true).unwrap();
    let scores = score_mask(&mask, &GridSpec::default(), &OpenPathConfig::default())
        .map_err(|e| e.to_string())?;
    let sel = scores.selected.ok_or("no column selected")?;
    let cmd = command_for(Some(sel));
    ensure(sel.col == 3, || format!("selected column {}", sel.col))?;
    ensure(cmd.levels() == [0, 0, 0, 0, 3, 3, 0, 0, 0, 0], || {
        format!("command {:?}", cmd.levels())
    })?;
    Ok("column 3, command [0,0,0,0,3,3,0,0,0,0]".into())
}

fn no_signal() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0051);
    let grid = GridSpec::default();
    let cfg = OpenPathConfig::default();
    let (mut silent, mut signalled) = (0, 0);
    while silent < 1000 {
        let scale: f64 = rng.gen_range(0.0..0.9);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..7).map(|_| rng.gen_range(0.0..=scale)).collect())
            .collect();
        let raw = ScoreMatrix::from_rows(rows).unwrap();
        let adj = adjusted_oracle(&raw);
        let best = (0..5)
            .map(|b| adj[0][b] + adj[1][b])
            .fold(f64::MIN, f64::max);
        let cmd = command_for(select_column(
            &adjusted_scores(&raw, &grid, &cfg),
            &grid,
            &cfg,
        ));
        if best < 0.8 {
            ensure(cmd == BeltCommand::ZERO, || {
                format!("best sum {best} gave {:?}", cmd.levels())
            })?;
            silent += 1;
        } else {
            ensure(cmd != BeltCommand::ZERO, || {
                format!("best sum {best} gave no signal")
            })?;
            signalled += 1;
        }
    }
    Ok(format!(
        "{silent} grids below 0.8 all silent ({signalled} above all signalled)"
    ))
}

fn depth_rules() -> Outcome {
    let cfg = DepthBinConfig::default();
    let eps = 1e-9;
    // a 10x10 map whose first `n` pixels carry `value`, the rest 0
    let cell = |n: usize, value: f64| {
        let mut v = vec![0.0; 100];
        v[..n].fill(value);
        let map = DepthMap::new(10, 10, v).unwrap();
        cell_intensity(
            bin_fractions(&map, Rect::new(0, 0, 10, 10), &cfg).unwrap(),
            &cfg,
        )
    };
    let table: [(&str, bool); 12] = [
        ("0.80 is medium", classify(0.80, &cfg) == DepthBin::Medium),
        (
            "just above 0.80 is close",
            classify(0.80 + eps, &cfg) == DepthBin::Close,
        ),
        ("0.65 is far", classify(0.65, &cfg) == DepthBin::Far),
        (
            "just above 0.65 is medium",
            classify(0.65 + eps, &cfg) == DepthBin::Medium,
        ),
        ("0.50 is ignored", classify(0.50, &cfg) == DepthBin::Ignored),
        (
            "just above 0.50 is far",
            classify(0.50 + eps, &cfg) == DepthBin::Far,
        ),
        ("30% close is not high", cell(30, 0.9) == Intensity::Off),
        ("31% close is high", cell(31, 0.9) == Intensity::High),
        ("40% medium is not medium", cell(40, 0.7) == Intensity::Off),
        ("41% medium is medium", cell(41, 0.7) == Intensity::Medium),
        ("50% far is not low", cell(50, 0.6) == Intensity::Off),
        ("51% far is low", cell(51, 0.6) == Intensity::Low),
    ];
    for (name, ok) in table {
        ensure(ok, || format!("boundary case failed: {name}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0xde97);
    let picks = [0.5, 0.65, 0.8, 0.5 + eps, 0.65 + eps, 0.8 + eps, 0.0, 1.0];
    for case in 0..200 {
        let (w, h) = (rng.gen_range(5..=160), rng.gen_range(2..=90));
        let values: Vec<f64> = (0..w * h)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    picks[rng.gen_range(0..picks.len())]
                } else {
                    rng.gen_range(0.0..=1.0)
                }
            })
            .collect();
        let map = DepthMap::new(w, h, values.clone()).unwrap();
        let mut expect = [0u8; 10];
        for col in 0..5 {
            for row_from_top in 0..2 {
                let (xa, xb) = (boundary(w, 5, col), boundary(w, 5, col + 1));
                let (ya, yb) = (
                    boundary(h, 2, row_from_top),
                    boundary(h, 2, row_from_top + 1),
                );
                let (mut close, mut medium, mut far) = (0usize, 0usize, 0usize);
                for y in ya..yb {
                    for x in xa..xb {
                        let d = values[y * w + x];
                        if d > 0.8 {
                            close += 1;
                        } else if d > 0.65 {
                            medium += 1;
                        } else if d > 0.5 {
                            far += 1;
                        }
                    }
                }
                let area = ((xb - xa) * (yb - ya)) as f64;
                let level = if close as f64 / area > 0.30 {
                    3
                } else if medium as f64 / area > 0.40 {
                    2
                } else if far as f64 / area > 0.50 {
                    1
                } else {
                    0
                };
                expect[2 * col + row_from_top] = level;
            }
        }
        let got = depth_command(&map, &cfg).levels();
        ensure(got == expect, || {
            format!("map {case} ({w}x{h}): {got:?} vs recount {expect:?}")
        })?;
    }
    Ok("12 boundary cases exact, 200 random maps match recount".into())
}

fn wire_format() -> Outcome {
    let mut n = 0u32;
    for code in 0u32..4u32.pow(10) {
        let levels: Vec<u8> = (0..10).map(|k| ((code >> (2 * k)) & 3) as u8).collect();
        let cmd = BeltCommand::from_levels(&levels).map_err(|e| e.to_string())?;
        let text = levels
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let bytes = encode_command(&cmd);
        ensure(bytes == text.as_bytes(), || {
            format!(
                "{levels:?} encoded as {:?}",
                String::from_utf8_lossy(&bytes)
            )
        })?;
        ensure(decode_command(&bytes).as_ref() == Ok(&cmd), || {
            format!("{text} does not round-trip")
        })?;
        n += 1;
    }
    let cmd = BeltCommand::from_levels(&[1, 2, 3, 0, 2, 1, 0, 3, 3, 2]).unwrap();
    let levels = cmd.levels();
    for k in 1..=5 {
        let id = ClientId::new(k).map_err(|e| e.to_string())?;
        let (top, bottom) = unit_slice(&cmd, id);
        ensure(
            (top.level(), bottom.level()) == (levels[2 * (k - 1)], levels[2 * (k - 1) + 1]),
            || format!("client{k} got ({}, {})", top.level(), bottom.level()),
        )?;
        ensure(id.to_string() == format!("client{k}"), || {
            format!("client {k} named {id}")
        })?;
    }
    Ok(format!(
        "{n} commands round-trip exactly, 5 client slices match"
    ))
}

fn timing() -> Outcome {
    const DURATION: u64 = 3000;
    let mut rng = ChaCha8Rng::seed_from_u64(0x7131);
    let values = [0.9, 0.7, 0.6, 0.2];
    let frames: Vec<Frame> = (0..20)
        .map(|_| {
            let cell_vals: Vec<f64> = (0..10)
                .map(|_| values[rng.gen_range(0..values.len())])
                .collect();
            let map = DepthMap::new(
                50,
                20,
                (0..1000)
                    .map(|i| cell_vals[(i % 50) / 10 * 2 + (i / 50) / 10])
                    .collect(),
            )
            .unwrap();
            Frame {
                depth: Some(map),
                ..Frame::default()
            }
        })
        .collect();
    let mut perception = FixturePerception::new(frames).map_err(|e| e.to_string())?;
    let mut session = Session::new(SessionConfig {
        mode: NavMode::Depth,
        ..SessionConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let log = run_session(
        &mut session,
        &mut perception,
        NullTransport,
        "belt",
        DURATION,
        &[],
    )
    .map_err(|e| e.to_string())?;

    let ticks: Vec<u64> = log.ticks().map(|r| r.t).collect();
    let expect: Vec<u64> = (0..DURATION).step_by(150).collect();
    ensure(ticks == expect, || format!("ticks at {ticks:?}"))?;
    let pubs: Vec<u64> = log.publishes().map(|p| p.t).collect();
    let expect: Vec<u64> = (0..=DURATION).step_by(300).collect();
    ensure(pubs == expect, || format!("publishes at {pubs:?}"))?;

    let mut units: Vec<UnitState> = ClientId::all().map(UnitState::new).collect();
    for p in log.publishes() {
        for u in &mut units {
            u.on_message(&encode_command(&p.command), p.t);
        }
    }
    let hz = |level: u8| match level {
        1 => 80,
        2 => 150,
        3 => 250,
        _ => 0,
    };
    let mut episodes = 0;
    let horizon = DURATION + 400;
    for u in &units {
        for row in [MotorRow::Top, MotorRow::Bottom] {
            // on-intervals sampled every millisecond
            let mut runs: Vec<(u64, u64, u32)> = Vec::new();
            for t in 0..horizon {
                let s = u.motor_state_at(row, t);
                let on = s.phase == Phase::Vibrating;
                ensure(on == (s.frequency_hz > 0), || {
                    format!("{} {row:?} at {t}: {s:?}", u.id)
                })?;
                if on {
                    ensure(s.frequency_hz == hz(s.intensity.level()), || {
                        format!("{s:?} at {t}")
                    })?;
                    match runs.last_mut() {
                        Some(r) if r.1 == t && r.2 == s.frequency_hz => r.1 = t + 1,
                        _ => runs.push((t, t + 1, s.frequency_hz)),
                    }
                }
            }
            for (k, r) in runs.iter().enumerate() {
                ensure(r.1 - r.0 == 100, || {
                    format!("{} {row:?} vibrated {}..{}", u.id, r.0, r.1)
                })?;
                ensure(pubs.contains(&r.0), || {
                    format!("{} {row:?} started at {} with no publish", u.id, r.0)
                })?;
                if let Some(next) = runs.get(k + 1) {
                    ensure(next.0 - r.1 >= 200, || {
                        format!("{} {row:?} silent only {} ms", u.id, next.0 - r.1)
                    })?;
                }
            }
            episodes += runs.len();
        }
    }
    ensure(episodes > 0, || "no motor ever vibrated".into())?;
    Ok(format!(
        "{} ticks, {} publishes, {episodes} motor episodes all 100 ms on / >=200 ms off",
        ticks.len(),
        pubs.len()
    ))
}

fn performance() -> Outcome {
    let scene = build_course("hard-g").map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xf7a3e);
    let mut op = Session::new(SessionConfig {
        mode: NavMode::OpenPath,
        ..SessionConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let mut dp = Session::new(SessionConfig {
        mode: NavMode::Depth,
        ..SessionConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let (mut pipeline_ms, mut render_ms) = (Vec::new(), Vec::new());
    for k in 0..100u64 {
        let cam = CameraModel::shoulder(
            rng.gen_range(0.3..1.5),
            rng.gen_range(0.1..2.5),
            std::f64::consts::FRAC_PI_2 + rng.gen_range(-0.6..0.6),
        );
        let started = Instant::now();
        let views = render_views_serial(&scene, &cam).map_err(|e| e.to_string())?;
        render_ms.push(started.elapsed().as_secs_f64() * 1e3);
        ensure(
            (views.mask.width(), views.mask.height()) == (640, 360),
            || "frame is not 640x360".into(),
        )?;
        let frame = Frame {
            detection: vw_core::pipeline::detect_floor(&views.mask),
            floor: Some(views.mask),
            depth: Some(views.depth),
        };
        let started = Instant::now();
        let a = op.tick(k * 150, Ok(frame.clone()));
        let b = dp.tick(k * 150, Ok(frame));
        pipeline_ms.push(started.elapsed().as_secs_f64() * 1e3);
        ensure(a.diagnostics.is_empty() && b.diagnostics.is_empty(), || {
            format!("frame {k}: {:?} {:?}", a.diagnostics, b.diagnostics)
        })?;
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        (v[v.len() / 2 - 1] + v[v.len() / 2]) / 2.0
    };
    let (m, r) = (median(&mut pipeline_ms), median(&mut render_ms));
    ensure(m < 150.0, || format!("median {m:.2} ms"))?;
    Ok(format!(
        "median {m:.2} ms per frame for both modes (synthetic render {r:.2} ms, not counted)"
    ))
}

/// p-value by listing every sign pattern over the midranks of the non-zero differences.
fn enumerated_p(diffs: &[f64]) -> f64 {
    let d: Vec<f64> = diffs.iter().copied().filter(|x| *x != 0.0).collect();
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut rank = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        for k in i..=j {
            rank[order[k]] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    let total: f64 = rank.iter().sum();
    let w_plus: f64 = (0..n).filter(|&k| d[k] > 0.0).map(|k| rank[k]).sum();
    let observed = w_plus.min(total - w_plus);
    let mut hits = 0u64;
    for signs in 0u32..(1 << n) {
        let s: f64 = (0..n)
            .filter(|k| signs >> k & 1 == 1)
            .map(|k| rank[k])
            .sum();
        if s.min(total - s) <= observed + 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

fn statistics() -> Outcome {
    let r = wilcoxon_from_differences(&[1.0, 2.0, 3.0]).map_err(|e| e.to_string())?;
    ensure(r.p_two_sided == 0.25, || {
        format!("[1,2,3] gave p = {}", r.p_two_sided)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x3117);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    while cases < 1000 {
        let n = rng.gen_range(1..=10);
        let diffs: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    rng.gen_range(-4i32..=4) as f64
                } else {
                    rng.gen_range(-10.0..10.0)
                }
            })
            .collect();
        if diffs.iter().all(|d| *d == 0.0) {
            continue;
        }
        cases += 1;
        let got = wilcoxon_from_differences(&diffs).map_err(|e| e.to_string())?;
        worst = worst.max((got.p_two_sided - enumerated_p(&diffs)).abs());
    }
    ensure(worst <= 1e-12, || {
        format!("max |p - enumeration| = {worst:e}")
    })?;
    Ok(format!(
        "[1,2,3] -> 0.25, {cases} samples n<=10 max err {worst:e}"
    ))
}

fn simulation() -> Outcome {
    let cfg = TrialConfig::default();
    let scene = build_course("hard-g").map_err(|e| e.to_string())?;
    for mode in Mode::ALL {
        let a = run_trial(&scene, mode, 7, &cfg).map_err(|e| e.to_string())?;
        let b = run_trial(&scene, mode, 7, &cfg).map_err(|e| e.to_string())?;
        ensure(a.to_jsonl() == b.to_jsonl(), || {
            format!("{} seed 7 differs between runs", mode.name())
        })?;
    }

    let layouts: Vec<String> = ["hard-g", "hard-h", "hard-i"].map(String::from).to_vec();
    let seeds: Vec<u64> = (0..30).collect();
    let started = Instant::now();
    let out = run_experiment(&layouts, &[Mode::OpenPath, Mode::CaneOnly], &seeds, &cfg)
        .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let median = |mode: Mode| {
        let mut c: Vec<u64> = out
            .iter()
            .filter(|o| o.record.mode == mode)
            .map(|o| o.metrics.cane_contacts)
            .collect();
        c.sort_unstable();
        let n = c.len();
        (c[n / 2 - 1] + c[n / 2]) as f64 / 2.0
    };
    let (open, cane) = (median(Mode::OpenPath), median(Mode::CaneOnly));
    let summary = format!("byte-identical reruns; median contacts open_path {open} vs cane_only {cane} over 90 trials each, {elapsed:.1?}");
    ensure(open < cane, || format!("direction reversed: {summary}"))?;
    ensure(elapsed < Duration::from_secs(120), || {
        format!("too slow: {summary}")
    })?;
    Ok(summary)
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("scoring oracle equivalence", scoring_oracle_equivalence),
        ("all-clear behavior", all_clear),
        ("no-signal behavior", no_signal),
        ("depth rules", depth_rules),
        ("wire format", wire_format),
        ("timing", timing),
        ("performance budget", performance),
        ("statistics", statistics),
        ("simulation determinism and direction", simulation),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
