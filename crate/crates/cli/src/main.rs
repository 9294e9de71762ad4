use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use vw_cli::mqtt::{subscribe, Feed, MqttTransport};
use vw_cli::serve::{router, ServeConfig};
use vw_core::belt::{
    encode_command, ClientId, Clock, Publisher, PublisherConfig, SystemClock, DEFAULT_TOPIC,
};
use vw_core::depth::{self, analyze_depth};
use vw_core::open_path::{self, command_for, score_mask};
use vw_core::pgm::{depth_from_pgm, depth_to_pgm, mask_from_pgm, mask_to_pgm};
use vw_core::pipeline::{
    ClockKind, FixturePerception, NavMode, Perception, Session, SessionConfig, SyntheticPerception,
};
use vw_core::scene::{build_course, render_views, CameraModel, CANONICAL_LAYOUTS};
use vw_core::sim::{
    compute_metrics, run_experiment, run_trial, write_metrics_csv, MetricsRow, Mode, TrialConfig,
};
use vw_core::stats::summarize_experiment;
use vw_core::unit::UnitState;
use vw_core::{GridSpec, MotorRow};

/// Haptic belt navigation pipeline: scoring, simulation, belt network and cockpit bridge.
#[derive(Parser)]
#[command(name = "vw", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a floor mask (PGM) in open-path mode.
    ScoreOpenPath {
        #[arg(long)]
        mask: PathBuf,
    },
    /// Score a closeness map (PGM, brighter = closer) in depth mode.
    ScoreDepth {
        #[arg(long)]
        depth: PathBuf,
    },
    /// Run one simulated trial and write its record as JSON lines.
    RunTrial {
        #[arg(long)]
        layout: String,
        #[arg(long, default_value = "open_path")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Record file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every layout x mode x seed and write metrics.csv plus the comparison report.
    RunExperiment {
        #[arg(long, default_value_t = 30)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated layout names; all nine canonical layouts by default.
        #[arg(long, value_delimiter = ',')]
        layouts: Vec<String>,
        /// Also write each trial record under `out/trials/`.
        #[arg(long)]
        records: bool,
    },
    /// Run the live pipeline on the wall clock and publish to the belt topic.
    BeltHost {
        #[command(flatten)]
        net: Net,
        #[arg(long, default_value = "open_path")]
        mode: NavMode,
        /// Synthetic view from this layout's start line.
        #[arg(long, default_value = "easy-a")]
        layout: String,
        /// Replay this floor mask instead of rendering.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Replay this closeness map instead of rendering.
        #[arg(long)]
        depth: Option<PathBuf>,
        /// Stop after this many milliseconds.
        #[arg(long)]
        duration_ms: Option<u64>,
    },
    /// Emulate one belt unit: subscribe, slice and run the motor duty cycle.
    UnitEmulator {
        #[arg(long)]
        id: String,
        #[command(flatten)]
        net: Net,
        #[arg(long)]
        duration_ms: Option<u64>,
    },
    /// Serve the cockpit websocket at /session.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value = "easy-a")]
        layout: String,
        #[arg(long, default_value = "open_path")]
        mode: Mode,
        /// Mirror the belt commands to this broker.
        #[arg(long, env = "VW_BROKER")]
        broker: Option<String>,
    },
    /// Render the synthetic mask and closeness map for a camera pose.
    #[command(allow_negative_numbers = true)]
    Render {
        #[arg(long)]
        layout: String,
        #[arg(long)]
        x: f64,
        #[arg(long)]
        y: f64,
        /// Heading in radians, counter-clockwise from +x.
        #[arg(long, default_value_t = std::f64::consts::FRAC_PI_2)]
        yaw: f64,
        #[arg(long)]
        mask_out: PathBuf,
        #[arg(long)]
        depth_out: PathBuf,
    },
}

#[derive(Args)]
struct Net {
    #[arg(long, env = "VW_BROKER", default_value = "localhost:1883")]
    broker: String,
    #[arg(long, env = "VW_BELT_TOPIC", default_value = DEFAULT_TOPIC)]
    topic: String,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::ScoreOpenPath { mask } => score_open_path(mask),
        Command::ScoreDepth { depth } => score_depth(depth),
        Command::RunTrial {
            layout,
            mode,
            seed,
            out,
        } => trial(&layout, mode, seed, out),
        Command::RunExperiment {
            seeds,
            out,
            layouts,
            records,
        } => experiment(seeds, out, layouts, records),
        Command::BeltHost {
            net,
            mode,
            layout,
            mask,
            depth,
            duration_ms,
        } => belt_host(net, mode, &layout, mask, depth, duration_ms),
        Command::UnitEmulator {
            id,
            net,
            duration_ms,
        } => unit_emulator(&id, net, duration_ms),
        Command::Serve {
            port,
            host,
            layout,
            mode,
            broker,
        } => serve(&host, port, layout, mode, broker),
        Command::Render {
            layout,
            x,
            y,
            yaw,
            mask_out,
            depth_out,
        } => render(&layout, x, y, yaw, mask_out, depth_out),
    }
}

fn read(path: &PathBuf) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn score_open_path(path: PathBuf) -> Result<()> {
    let mask = mask_from_pgm(&read(&path)?)?;
    let grid = GridSpec::default();
    let scores = score_mask(&mask, &grid, &Default::default())?;
    let command = command_for(scores.selected);
    println!(
        "{}",
        json!({ "scores": scores, "command": command.levels(), "payload": payload(&command) })
    );
    eprint!("{}", open_path::dump(&scores, &grid));
    eprintln!("command {}", payload(&command));
    Ok(())
}

fn score_depth(path: PathBuf) -> Result<()> {
    let map = depth_from_pgm(&read(&path)?)?;
    let analysis = analyze_depth(&map, &GridSpec::default(), &Default::default())?;
    println!(
        "{}",
        json!({ "analysis": analysis, "command": analysis.command.levels(), "payload": payload(&analysis.command) })
    );
    eprint!("{}", depth::dump(&analysis));
    eprintln!("command {}", payload(&analysis.command));
    Ok(())
}

fn payload(cmd: &vw_core::BeltCommand) -> String {
    String::from_utf8_lossy(&encode_command(cmd)).into_owned()
}

fn trial(layout: &str, mode: Mode, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let scene = build_course(layout)?;
    let record = run_trial(&scene, mode, seed, &TrialConfig::default())?;
    let metrics = compute_metrics(&record, &scene)?;
    match out {
        Some(path) => fs::write(&path, record.to_jsonl())
            .with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(record.to_jsonl().as_bytes())?,
    }
    eprintln!(
        "{layout} {} seed {seed}: {} in {:.1} s, {} cane contacts, hesitation {:.1}%, safety window {:.2} m",
        mode.name(),
        if metrics.completed { "completed" } else { "timed out" },
        metrics.completion_time,
        metrics.cane_contacts,
        metrics.hesitation_pct * 100.0,
        metrics.safety_window,
    );
    Ok(())
}

fn experiment(seeds: u64, out: PathBuf, layouts: Vec<String>, records: bool) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be positive");
    }
    let layouts = if layouts.is_empty() {
        CANONICAL_LAYOUTS.iter().map(|s| s.to_string()).collect()
    } else {
        layouts
    };
    let seeds: Vec<u64> = (0..seeds).collect();
    let outcomes = run_experiment(&layouts, &Mode::ALL, &seeds, &TrialConfig::default())?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    if records {
        let dir = out.join("trials");
        fs::create_dir_all(&dir)?;
        for o in &outcomes {
            let r = &o.record;
            fs::write(
                dir.join(format!("{}_{}_{}.jsonl", r.layout, r.mode.name(), r.seed)),
                r.to_jsonl(),
            )?;
        }
    }
    let rows: Vec<MetricsRow> = outcomes
        .iter()
        .map(|o| MetricsRow::new(&o.record, &o.metrics))
        .collect();
    fs::write(out.join("metrics.csv"), write_metrics_csv(&rows)?)?;
    let report = summarize_experiment(&rows)?;
    fs::write(out.join("report.csv"), report.to_csv()?)?;
    fs::write(out.join("report.txt"), report.to_text())?;
    print!("{}", report.to_text());
    eprintln!("{} trials written to {}", rows.len(), out.display());
    Ok(())
}

fn belt_host(
    net: Net,
    mode: NavMode,
    layout: &str,
    mask: Option<PathBuf>,
    depth: Option<PathBuf>,
    duration_ms: Option<u64>,
) -> Result<()> {
    let cfg = SessionConfig {
        mode,
        clock: ClockKind::Real,
        ..SessionConfig::default()
    };
    let mut perception: Box<dyn Perception + Send> = match (mask, depth) {
        (None, None) => {
            let scene = build_course(layout)?;
            let cam =
                CameraModel::shoulder(scene.start.x, scene.start.y, std::f64::consts::FRAC_PI_2);
            Box::new(SyntheticPerception::new(scene, cam))
        }
        (Some(m), None) => Box::new(FixturePerception::from_mask(mask_from_pgm(&read(&m)?)?)),
        (None, Some(d)) => Box::new(FixturePerception::from_depth(depth_from_pgm(&read(&d)?)?)),
        (Some(_), Some(_)) => bail!("give --mask or --depth, not both"),
    };
    let mut session = Session::new(cfg.clone())?;
    let transport = MqttTransport::connect(&net.broker, "vw-belt-host")?;
    if !transport.wait_linked(Duration::from_secs(3)) {
        log::warn!(
            "broker {} not reachable yet; publishing will retry",
            net.broker
        );
    }
    let pub_cfg = PublisherConfig {
        topic: net.topic.clone(),
        period_ms: cfg.publish_period_ms,
        broker: net.broker.clone(),
    };
    let mut publisher = Publisher::new(pub_cfg, transport, session.slot())?;
    let clock = SystemClock::default();
    let stop = Arc::new(AtomicBool::new(false));

    let pub_clock = clock.clone();
    let pub_stop = Arc::clone(&stop);
    let publishing = thread::spawn(move || {
        publisher.run(&pub_clock, duration_ms, &pub_stop, |ev| {
            println!(
                "{}",
                json!({ "t": ev.t, "payload": payload(&ev.command), "delivered": ev.delivered })
            );
        });
    });

    let tick = cfg.tick_budget_ms;
    let mut t = 0;
    while duration_ms.is_none_or(|d| t < d || t == 0) {
        let report = session.tick(t, perception.perceive(t));
        for d in &report.diagnostics {
            log::warn!("tick {}: {d:?}", report.tick);
        }
        clock.sleep_until(report.ready_at);
        session.complete(&report);
        t += tick;
    }
    stop.store(true, Ordering::Release);
    publishing
        .join()
        .map_err(|_| anyhow::anyhow!("publisher thread panicked"))?;
    eprintln!("belt host stopped after {t} ms in {} mode", mode.name());
    Ok(())
}

fn unit_emulator(id: &str, net: Net, duration_ms: Option<u64>) -> Result<()> {
    let client: ClientId = id.parse()?;
    let feed = subscribe(&net.broker, &format!("vw-{client}"), &net.topic)?;
    let clock = SystemClock::default();
    let mut unit = UnitState::new(client);
    let mut cursor = 0;
    let led = |ok: bool, on: &str, off: &str| if ok { on.to_string() } else { off.to_string() };
    let status = |unit: &UnitState| {
        println!(
            "{}",
            json!({ "t": clock.now_ms(), "unit": client.to_string(), "battery": led(unit.battery_ok, "ok", "low"), "link": led(unit.link_ok, "up", "down") })
        );
    };
    status(&unit);
    loop {
        let now = clock.now_ms();
        if duration_ms.is_some_and(|d| now >= d) {
            break;
        }
        match feed.recv_timeout(Duration::from_millis(5)) {
            Ok(Feed::Payload(p)) => {
                let before = unit.malformed;
                unit.on_message(&p, clock.now_ms());
                if unit.malformed > before {
                    log::warn!(
                        "dropped malformed payload {:?}",
                        String::from_utf8_lossy(&p)
                    );
                }
            }
            Ok(Feed::Linked(up)) => {
                unit.link_ok = up;
                status(&unit);
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => bail!("subscription closed"),
        }
        let now = clock.now_ms();
        for tr in unit.transitions(cursor, now + 1) {
            let motor = if tr.row == MotorRow::Top {
                "top"
            } else {
                "bottom"
            };
            println!(
                "{}",
                json!({ "t": tr.t, "unit": client.to_string(), "motor": motor, "phase": tr.phase, "frequency_hz": tr.frequency_hz })
            );
        }
        cursor = now + 1;
    }
    eprintln!(
        "{client}: {} messages, {} malformed",
        unit.messages, unit.malformed
    );
    Ok(())
}

fn serve(host: &str, port: u16, layout: String, mode: Mode, broker: Option<String>) -> Result<()> {
    build_course(&layout)?;
    let cfg = ServeConfig {
        layout,
        mode,
        broker,
        ..ServeConfig::default()
    };
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .context("bad listen address")?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("cockpit bridge on ws://{}/session", listener.local_addr()?);
        axum::serve(listener, router(cfg)).await?;
        Ok(())
    })
}

fn render(
    layout: &str,
    x: f64,
    y: f64,
    yaw: f64,
    mask_out: PathBuf,
    depth_out: PathBuf,
) -> Result<()> {
    let scene = build_course(layout)?;
    let views = render_views(&scene, &CameraModel::shoulder(x, y, yaw))?;
    fs::write(&mask_out, mask_to_pgm(&views.mask))?;
    fs::write(&depth_out, depth_to_pgm(&views.depth))?;
    println!(
        "{}",
        json!({ "mask": mask_out, "depth": depth_out, "width": views.mask.width(), "height": views.mask.height(), "floor_pixels": views.mask.floor_count() })
    );
    Ok(())
}
