//! Ground-truth stand-in for the perception models: obstacle-course geometry and a
//! pinhole raycaster that renders floor masks and closeness maps.
//!
//! World frame: metres, `x` across the field (dividers at `x = 0` and `x = width`),
//! `y` along it (start line at `y = 0`, goal line at `y = length`), `z` up.
//! Headings are counter-clockwise from `+x`. The room floor continues past the two
//! open ends of the field for `apron` metres.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DepthMap, FloorMask};

pub const INCH: f64 = 0.0254;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Point2) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

/// Vertical cylinder standing on the floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub center: Point2,
    pub radius: f64,
    pub height: f64,
}

impl Cylinder {
    /// A pool-noodle obstacle: 6 in diameter, 60 in tall.
    pub fn noodle(x: f64, y: f64) -> Self {
        Self {
            center: Point2::new(x, y),
            radius: 3.0 * INCH,
            height: 60.0 * INCH,
        }
    }
}

/// Wall divider: a vertical panel between `a` and `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divider {
    pub a: Point2,
    pub b: Point2,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    /// Lower-left corner of the field.
    pub origin: Point2,
    pub field_width: f64,
    pub field_length: f64,
    /// Floor beyond each open end of the field.
    pub apron: f64,
    pub dividers: Vec<Divider>,
    pub obstacles: Vec<Cylinder>,
    pub start: Point2,
    pub goal: Point2,
}

pub const FIELD_WIDTH: f64 = 70.0 * INCH;
pub const FIELD_LENGTH: f64 = 105.0 * INCH;
pub const DIVIDER_HEIGHT: f64 = 72.0 * INCH;
pub const DEFAULT_APRON: f64 = 3.0;

impl Scene {
    /// Field with its two dividers and no obstacles; start and goal on the center line.
    pub fn empty(width: f64, length: f64) -> Self {
        let divider = |x: f64| Divider {
            a: Point2::new(x, 0.0),
            b: Point2::new(x, length),
            height: DIVIDER_HEIGHT,
        };
        Self {
            name: "empty".into(),
            origin: Point2::default(),
            field_width: width,
            field_length: length,
            apron: DEFAULT_APRON,
            dividers: vec![divider(0.0), divider(width)],
            obstacles: Vec::new(),
            start: Point2::new(width / 2.0, 0.0),
            goal: Point2::new(width / 2.0, length),
        }
    }

    pub fn standard_field() -> Self {
        Self::empty(FIELD_WIDTH, FIELD_LENGTH)
    }

    pub fn with_obstacles(mut self, obstacles: Vec<Cylinder>) -> Result<Self> {
        self.obstacles = obstacles;
        self.validate()?;
        Ok(self)
    }

    /// Whether a point lies on the walkable floor (field plus aprons).
    pub fn on_floor(&self, p: Point2) -> bool {
        let (x, y) = (p.x - self.origin.x, p.y - self.origin.y);
        (0.0..=self.field_width).contains(&x)
            && (-self.apron..=self.field_length + self.apron).contains(&y)
    }

    pub fn inside_field(&self, p: Point2) -> bool {
        let (x, y) = (p.x - self.origin.x, p.y - self.origin.y);
        (0.0..=self.field_width).contains(&x) && (0.0..=self.field_length).contains(&y)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.field_width > 0.0 && self.field_length > 0.0) || !(self.apron >= 0.0) {
            return Err(Error::Config("field dimensions must be positive".into()));
        }
        for (k, o) in self.obstacles.iter().enumerate() {
            if !(o.radius > 0.0 && o.height > 0.0) {
                return Err(Error::Config(format!("obstacle {k} has non-positive size")));
            }
            let c = o.center;
            let inside = [
                Point2::new(c.x - o.radius, c.y),
                Point2::new(c.x + o.radius, c.y),
                Point2::new(c.x, c.y - o.radius),
                Point2::new(c.x, c.y + o.radius),
            ]
            .iter()
            .all(|&p| self.inside_field(p));
            if !inside {
                return Err(Error::Config(format!(
                    "obstacle {k} at ({:.3}, {:.3}) is not inside the field",
                    c.x, c.y
                )));
            }
        }
        for (what, p) in [("start", self.start), ("goal", self.goal)] {
            if !self.on_floor(p) {
                return Err(Error::Config(format!("{what} point is off the floor")));
            }
        }
        Ok(())
    }

    /// Copy shifted by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Scene {
        let sh = |p: Point2| Point2::new(p.x + dx, p.y + dy);
        Scene {
            origin: sh(self.origin),
            dividers: self
                .dividers
                .iter()
                .map(|d| Divider {
                    a: sh(d.a),
                    b: sh(d.b),
                    ..*d
                })
                .collect(),
            obstacles: self
                .obstacles
                .iter()
                .map(|o| Cylinder {
                    center: sh(o.center),
                    ..*o
                })
                .collect(),
            start: sh(self.start),
            goal: sh(self.goal),
            ..self.clone()
        }
    }
}

/// Relative closeness of a hit at distance `d` metres: 1 m, 2 m and 3 m land on
/// the close, medium and far gates.
pub fn closeness(d: f64) -> f64 {
    (0.95 - 0.15 * d).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub x: f64,
    pub y: f64,
    pub height: f64,
    /// Optical-axis heading, counter-clockwise from `+x`.
    pub yaw: f64,
    pub hfov: f64,
    pub width: usize,
    pub resolution_height: usize,
}

pub const CAMERA_HEIGHT: f64 = 1.40;
pub const CAMERA_HFOV: f64 = 2.094;

impl CameraModel {
    /// Shoulder camera with the default intrinsics.
    pub fn shoulder(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            height: CAMERA_HEIGHT,
            yaw,
            hfov: CAMERA_HFOV,
            width: 640,
            resolution_height: 360,
        }
    }

    pub fn focal_px(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.hfov / 2.0).tan()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hfov > 0.0 && self.hfov < std::f64::consts::PI) {
            return Err(Error::Config(format!("hfov {} outside (0, pi)", self.hfov)));
        }
        if self.width == 0 || self.resolution_height == 0 {
            return Err(Error::Config("camera resolution must be positive".into()));
        }
        if !(self.height > 0.0) {
            return Err(Error::Config("camera must sit above the floor".into()));
        }
        Ok(())
    }

    /// Unnormalized world direction of pixel `(u, v)`'s center ray.
    pub fn ray(&self, u: usize, v: usize) -> [f64; 3] {
        let (dx, dy) = self.column_dir(u);
        [dx, dy, -self.row_slope(v)]
    }

    fn column_dir(&self, u: usize) -> (f64, f64) {
        let f = self.focal_px();
        let right = (u as f64 + 0.5 - self.width as f64 / 2.0) / f;
        let (s, c) = self.yaw.sin_cos();
        // forward (c, s), right (s, -c)
        (c + right * s, s - right * c)
    }

    fn row_slope(&self, v: usize) -> f64 {
        (v as f64 + 0.5 - self.resolution_height as f64 / 2.0) / self.focal_px()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Views {
    pub mask: FloorMask,
    pub depth: DepthMap,
}

/// Per-column horizontal hit interval of one vertical primitive.
#[derive(Clone, Copy)]
struct Span {
    t_in: f64,
    t_out: f64,
    height: f64,
}

/// First vertical-surface hit along a ray, given its per-unit-`t` climb `dz`.
fn first_surface_hit(spans: &[Span], cz: f64, dz: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for s in spans {
        if best.is_some_and(|b| s.t_in >= b) {
            continue;
        }
        let z_in = cz + dz * s.t_in;
        let t = if (0.0..=s.height).contains(&z_in) {
            Some(s.t_in)
        } else if z_in > s.height && dz < 0.0 {
            // descending onto the top cap
            let t_cap = (s.height - cz) / dz;
            (t_cap <= s.t_out).then_some(t_cap)
        } else {
            None
        };
        if let Some(t) = t {
            best = Some(best.map_or(t, |b: f64| b.min(t)));
        }
    }
    best
}

fn column_spans(scene: &Scene, cam: &CameraModel, dx: f64, dy: f64) -> Vec<Span> {
    let mut spans = Vec::with_capacity(scene.obstacles.len() + scene.dividers.len());
    let a = dx * dx + dy * dy;
    for o in &scene.obstacles {
        let (ox, oy) = (cam.x - o.center.x, cam.y - o.center.y);
        let b = 2.0 * (ox * dx + oy * dy);
        let c = ox * ox + oy * oy - o.radius * o.radius;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            continue;
        }
        let sq = disc.sqrt();
        let (t0, t1) = ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a));
        if t0 > 0.0 {
            spans.push(Span {
                t_in: t0,
                t_out: t1,
                height: o.height,
            });
        }
    }
    for d in &scene.dividers {
        let (ex, ey) = (d.b.x - d.a.x, d.b.y - d.a.y);
        let den = dx * ey - dy * ex;
        if den.abs() < 1e-15 {
            continue;
        }
        let (wx, wy) = (d.a.x - cam.x, d.a.y - cam.y);
        let t = (wx * ey - wy * ex) / den;
        let s = (wx * dy - wy * dx) / den;
        if t > 0.0 && (0.0..=1.0).contains(&s) {
            spans.push(Span {
                t_in: t,
                t_out: t,
                height: d.height,
            });
        }
    }
    spans
}

fn render_impl(scene: &Scene, cam: &CameraModel, parallel: bool) -> Result<Views> {
    cam.validate()?;
    if !scene.on_floor(Point2::new(cam.x, cam.y)) {
        return Err(Error::Scene(format!(
            "camera at ({:.3}, {:.3}) is outside the field",
            cam.x, cam.y
        )));
    }
    let (w, h) = (cam.width, cam.resolution_height);
    let columns: Vec<((f64, f64), Vec<Span>)> = (0..w)
        .map(|u| {
            let (dx, dy) = cam.column_dir(u);
            ((dx, dy), column_spans(scene, cam, dx, dy))
        })
        .collect();
    let slopes: Vec<f64> = (0..h).map(|v| cam.row_slope(v)).collect();
    let mut bits = vec![false; w * h];
    let mut close = vec![0.0; w * h];
    let shade_row = |v: usize, bits: &mut [bool], close: &mut [f64]| {
        let dz = -slopes[v];
        for (u, ((dx, dy), spans)) in columns.iter().enumerate() {
            let ground = (dz < 0.0).then(|| -cam.height / dz);
            let surface = first_surface_hit(spans, cam.height, dz);
            let len = (dx * dx + dy * dy + dz * dz).sqrt();
            match (surface, ground) {
                (Some(ts), g) if g.is_none_or(|tg| ts < tg) => {
                    close[u] = closeness(ts * len);
                }
                (_, Some(tg)) => {
                    let p = Point2::new(cam.x + dx * tg, cam.y + dy * tg);
                    if scene.on_floor(p) {
                        bits[u] = true;
                        close[u] = closeness(tg * len);
                    }
                }
                _ => {}
            }
        }
    };
    if parallel {
        bits.par_chunks_mut(w)
            .zip(close.par_chunks_mut(w))
            .enumerate()
            .for_each(|(v, (b, c))| shade_row(v, b, c));
    } else {
        bits.chunks_mut(w)
            .zip(close.chunks_mut(w))
            .enumerate()
            .for_each(|(v, (b, c))| shade_row(v, b, c));
    }
    Ok(Views {
        mask: FloorMask::new(w, h, bits)?,
        depth: DepthMap::new(w, h, close)?,
    })
}

/// Renders the floor mask and closeness map seen by `cam`, rows in parallel.
pub fn render_views(scene: &Scene, cam: &CameraModel) -> Result<Views> {
    render_impl(scene, cam, true)
}

/// Single-threaded variant of [`render_views`].
pub fn render_views_serial(scene: &Scene, cam: &CameraModel) -> Result<Views> {
    render_impl(scene, cam, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Self::Easy, Self::Medium, Self::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Self::Easy => "easy",
            Self::Medium => "medium",
            Self::Hard => "hard",
        }
    }

    pub fn rows(self) -> usize {
        match self {
            Self::Easy => 1,
            Self::Medium => 2,
            Self::Hard => 3,
        }
    }

    /// Difficulty encoded in a canonical layout name.
    pub fn of_layout(name: &str) -> Option<Difficulty> {
        Self::ALL.into_iter().find(|d| name.starts_with(d.name()))
    }
}

/// The nine canonical layouts: three per difficulty.
pub const CANONICAL_LAYOUTS: [&str; 9] = [
    "easy-a", "easy-b", "easy-c", "medium-d", "medium-e", "medium-f", "hard-g", "hard-h", "hard-i",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowKind {
    Horizontal,
    Diagonal,
}

/// Centers of the row spacing, clearance from the anchoring divider and the
/// per-row cylinder count.
const ROW_PITCH: f64 = 0.20;
const WALL_CLEARANCE: f64 = 0.05;
const PER_ROW: usize = 4;

fn row_plan(name: &str) -> Option<(Vec<RowKind>, bool)> {
    use RowKind::{Diagonal as D, Horizontal as H};
    // (row orientations, first row anchored to the right divider)
    Some(match name {
        "easy-a" => (vec![H], false),
        "easy-b" => (vec![D], false),
        "easy-c" => (vec![D], true),
        "medium-d" => (vec![H, H], false),
        "medium-e" => (vec![D, D], false),
        "medium-f" => (vec![H, D], true),
        "hard-g" => (vec![H, H, H], false),
        "hard-h" => (vec![D, D, D], false),
        "hard-i" => (vec![H, D, H], true),
        _ => return None,
    })
}

/// Builds a canonical layout. Rows sit at equal spacing along the field, each
/// anchored to alternating dividers so that the open side alternates.
pub fn canonical_layout(name: &str, width: f64, length: f64) -> Result<Scene> {
    let (rows, right_first) = row_plan(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown layout `{name}` (expected one of {})",
            CANONICAL_LAYOUTS.join(", ")
        ))
    })?;
    let r = 3.0 * INCH;
    let n = rows.len();
    let half_span = ROW_PITCH * (PER_ROW as f64 - 1.0) / 2.0;
    let mut obstacles = Vec::new();
    for (k, kind) in rows.iter().enumerate() {
        let y = length * (k as f64 + 1.0) / (n as f64 + 1.0);
        let right = right_first ^ (k % 2 == 1);
        let (ux, uy) = match kind {
            RowKind::Horizontal => (1.0, 0.0),
            RowKind::Diagonal => (
                std::f64::consts::FRAC_1_SQRT_2,
                std::f64::consts::FRAC_1_SQRT_2,
            ),
        };
        let cx_left = WALL_CLEARANCE + r + half_span * ux;
        for i in 0..PER_ROW {
            let off = -half_span + ROW_PITCH * i as f64;
            let (mut x, yy) = (cx_left + off * ux, y + off * uy);
            if right {
                x = width - x;
            }
            obstacles.push(Cylinder::noodle(x, yy));
        }
    }
    let mut scene = Scene::empty(width, length).with_obstacles(obstacles)?;
    scene.name = name.to_string();
    Ok(scene)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthUnit {
    #[default]
    M,
    In,
}

impl LengthUnit {
    fn scale(self) -> f64 {
        match self {
            Self::M => 1.0,
            Self::In => INCH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDims {
    pub width: f64,
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub height: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSpec {
    pub x: f64,
    pub y: f64,
}

/// Course layout file: a canonical layout name or an explicit obstacle list.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CourseFile {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub units: LengthUnit,
    #[serde(default)]
    pub field: Option<FieldDims>,
    #[serde(default)]
    pub layout: Option<String>,
    #[serde(default)]
    pub obstacles: Option<Vec<ObstacleSpec>>,
    #[serde(default)]
    pub start: Option<PointSpec>,
    #[serde(default)]
    pub goal: Option<PointSpec>,
}

impl CourseFile {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("course file: {e}")))
    }

    pub fn build(&self) -> Result<Scene> {
        let k = self.units.scale();
        let finite = |v: f64, what: &str| {
            if v.is_finite() {
                Ok(v * k)
            } else {
                Err(Error::Config(format!("{what} is not finite")))
            }
        };
        let (width, length) = match self.field {
            Some(f) => (
                finite(f.width, "field width")?,
                finite(f.length, "field length")?,
            ),
            None => (FIELD_WIDTH, FIELD_LENGTH),
        };
        if !(width > 0.0 && length > 0.0) {
            return Err(Error::Config("field dimensions must be positive".into()));
        }
        let mut scene = match (&self.layout, &self.obstacles) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "give either a layout name or an obstacle list, not both".into(),
                ))
            }
            (Some(name), None) => canonical_layout(name, width, length)?,
            (None, obstacles) => {
                let mut out = Vec::new();
                for o in obstacles.iter().flatten() {
                    let mut c =
                        Cylinder::noodle(finite(o.x, "obstacle x")?, finite(o.y, "obstacle y")?);
                    if let Some(r) = o.radius {
                        c.radius = finite(r, "obstacle radius")?;
                    }
                    if let Some(h) = o.height {
                        c.height = finite(h, "obstacle height")?;
                    }
                    out.push(c);
                }
                let mut s = Scene::empty(width, length);
                s.name = "custom".into();
                s.obstacles = out;
                s
            }
        };
        if let Some(p) = self.start {
            scene.start = Point2::new(finite(p.x, "start x")?, finite(p.y, "start y")?);
        }
        if let Some(p) = self.goal {
            scene.goal = Point2::new(finite(p.x, "goal x")?, finite(p.y, "goal y")?);
        }
        if let Some(n) = &self.name {
            scene.name = n.clone();
        }
        scene.validate()?;
        Ok(scene)
    }
}

/// Course from a layout name or a JSON course file's contents.
pub fn build_course(layout: &str) -> Result<Scene> {
    let trimmed = layout.trim_start();
    if trimmed.starts_with('{') {
        CourseFile::parse(trimmed)?.build()
    } else {
        canonical_layout(layout, FIELD_WIDTH, FIELD_LENGTH)
    }
}
