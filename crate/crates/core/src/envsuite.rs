//! Training and test environments: file format, difficulty metrics and
//! episode spawning.
//!
//! Environment files are JSON:
//!
//! ```json
//! {
//!   "name": "baseEnv",
//!   "geometry": {
//!     "bounds": { "min": [0.0, 0.0], "max": [50.0, 50.0] },
//!     "obstacles": [ [[12.5, 22.5], [17.5, 22.5], [17.5, 27.5], [12.5, 27.5]] ]
//!   },
//!   "spawn_region": [ { "min": [1.0, 1.0], "max": [49.0, 20.0] } ],
//!   "goal_region":  [ { "min": [1.0, 1.0], "max": [49.0, 20.0] } ]
//! }
//! ```
//!
//! Obstacles are convex counterclockwise polygons; all lengths are meters.
//! Difficulty metrics are derived on load and never stored.

use crate::geometry::{Polygon, Rect, Vec2};
use crate::sim::{RobotState, SimError, SimParams, WorldGeometry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Consecutive rejections tolerated by [`sample_episode`].
pub const MAX_REJECTIONS: usize = 10_000;

/// Polygons closer than this are parts of the same obstacle.
const TOUCH_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column} (field `{field}`): {message}")]
    Parse {
        line: usize,
        column: usize,
        field: String,
        message: String,
    },
    #[error("invalid field `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("no collision-free {what} after {attempts} consecutive draws")]
    Unsatisfiable { what: &'static str, attempts: usize },
    #[error("unknown environment `{0}`")]
    Unknown(String),
}

/// Obstacle footprint and tightest passage, used to order environments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DifficultyMetrics {
    /// Total obstacle area, m².
    pub occupied_area: f64,
    /// Smallest distance between two distinct obstacles, m. Polygons that
    /// touch count as one obstacle. With fewer than two obstacles this is the
    /// room diagonal.
    pub min_obstacle_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentSpec {
    pub name: String,
    pub geometry: WorldGeometry,
    pub spawn_region: Vec<Rect>,
    pub goal_region: Vec<Rect>,
    pub difficulty: DifficultyMetrics,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryFile {
    bounds: Rect,
    obstacles: Vec<Polygon>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvironmentFile {
    name: String,
    geometry: GeometryFile,
    spawn_region: Vec<Rect>,
    goal_region: Vec<Rect>,
}

impl EnvironmentSpec {
    pub fn new(
        name: impl Into<String>,
        geometry: WorldGeometry,
        spawn_region: Vec<Rect>,
        goal_region: Vec<Rect>,
    ) -> Result<Self, EnvError> {
        check_regions("spawn_region", &spawn_region, &geometry)?;
        check_regions("goal_region", &goal_region, &geometry)?;
        let difficulty = compute_difficulty(&geometry);
        Ok(Self {
            name: name.into(),
            geometry,
            spawn_region,
            goal_region,
            difficulty,
        })
    }

    /// Parses the JSON environment format.
    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: EnvironmentFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let inner = e.inner();
            EnvError::Parse {
                line: inner.line(),
                column: inner.column(),
                field,
                message: inner.to_string(),
            }
        })?;
        let geometry = WorldGeometry::new(file.geometry.bounds, file.geometry.obstacles)
            .map_err(|e| match e {
                SimError::InvalidGeometry(message) => EnvError::Invalid {
                    field: "geometry".into(),
                    message,
                },
                other => EnvError::Invalid {
                    field: "geometry".into(),
                    message: other.to_string(),
                },
            })?;
        Self::new(file.name, geometry, file.spawn_region, file.goal_region)
    }

    pub fn to_json(&self) -> String {
        let file = EnvironmentFile {
            name: self.name.clone(),
            geometry: GeometryFile {
                bounds: *self.geometry.bounds(),
                obstacles: self.geometry.obstacles().to_vec(),
            },
            spawn_region: self.spawn_region.clone(),
            goal_region: self.goal_region.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("environment serializes");
        s.push('\n');
        s
    }

    /// Checks that every region point leaves a robot of `radius` clear of
    /// walls and obstacles.
    pub fn validate_clearance(&self, radius: f64) -> Result<(), EnvError> {
        for (field, regions) in [("spawn_region", &self.spawn_region), ("goal_region", &self.goal_region)] {
            for (i, r) in regions.iter().enumerate() {
                let inside = self
                    .geometry
                    .bounds()
                    .inset(radius)
                    .is_some_and(|b| b.contains(r.min) && b.contains(r.max));
                if !inside {
                    return Err(EnvError::Invalid {
                        field: format!("{field}[{i}]"),
                        message: format!("closer than {radius} m to the room walls"),
                    });
                }
                let poly = r.to_polygon();
                if let Some(j) = self
                    .geometry
                    .obstacles()
                    .iter()
                    .position(|o| o.distance_to_polygon(&poly) < radius)
                {
                    return Err(EnvError::Invalid {
                        field: format!("{field}[{i}]"),
                        message: format!("closer than {radius} m to obstacle {j}"),
                    });
                }
            }
        }
        Ok(())
    }
}

fn check_regions(field: &str, regions: &[Rect], geometry: &WorldGeometry) -> Result<(), EnvError> {
    if regions.is_empty() {
        return Err(EnvError::Invalid {
            field: field.into(),
            message: "at least one rectangle is required".into(),
        });
    }
    for (i, r) in regions.iter().enumerate() {
        let invalid = |message: String| EnvError::Invalid {
            field: format!("{field}[{i}]"),
            message,
        };
        if !(r.min.is_finite() && r.max.is_finite() && r.min.x <= r.max.x && r.min.y <= r.max.y) {
            return Err(invalid("min must not exceed max".into()));
        }
        if !geometry.bounds().contains(r.min) || !geometry.bounds().contains(r.max) {
            return Err(invalid("outside the room bounds".into()));
        }
        if let Some(j) = geometry.obstacles().iter().position(|o| o.intersects_rect(r)) {
            return Err(invalid(format!("overlaps obstacle {j}")));
        }
    }
    Ok(())
}

pub fn load_environment(path: impl AsRef<Path>) -> Result<EnvironmentSpec, EnvError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| EnvError::Io {
        path: path.to_owned(),
        source,
    })?;
    EnvironmentSpec::from_json(&text)
}

pub fn save_environment(spec: &EnvironmentSpec, path: impl AsRef<Path>) -> Result<(), EnvError> {
    let path = path.as_ref();
    std::fs::write(path, spec.to_json()).map_err(|source| EnvError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Occupied area by the shoelace formula; gap as the smallest distance
/// between obstacle clusters (touching polygons are merged).
pub fn compute_difficulty(geometry: &WorldGeometry) -> DifficultyMetrics {
    let obstacles = geometry.obstacles();
    let occupied_area = obstacles.iter().map(Polygon::area).sum();

    let n = obstacles.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = obstacles[i].distance_to_polygon(&obstacles[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let cluster = touching_clusters(&dist);
    let min_obstacle_gap = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .filter(|&(i, j)| cluster[i] != cluster[j])
        .map(|(i, j)| dist[i][j])
        .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))))
        .unwrap_or_else(|| geometry.bounds().diagonal());
    DifficultyMetrics {
        occupied_area,
        min_obstacle_gap,
    }
}

/// Union-find over the "touches" relation; returns a root label per polygon.
fn touching_clusters(dist: &[Vec<f64>]) -> Vec<usize> {
    let n = dist.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if dist[i][j] <= TOUCH_EPS {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

fn sample_in(regions: &[Rect], rng: &mut impl Rng) -> Vec2 {
    let total: f64 = regions.iter().map(Rect::area).sum();
    let rect = if total > 0.0 {
        let mut pick = rng.gen::<f64>() * total;
        regions
            .iter()
            .find(|r| {
                pick -= r.area();
                pick < 0.0
            })
            .unwrap_or(&regions[regions.len() - 1])
    } else {
        &regions[rng.gen_range(0..regions.len())]
    };
    Vec2::new(
        rect.min.x + rng.gen::<f64>() * rect.width(),
        rect.min.y + rng.gen::<f64>() * rect.height(),
    )
}

/// Draws a collision-free start pose and goal, uniform over the regions
/// (area-weighted across rectangles).
pub fn sample_episode_with(
    spec: &EnvironmentSpec,
    params: &SimParams,
    rng: &mut impl Rng,
) -> Result<(RobotState, Vec2), EnvError> {
    let radius = params.robot_radius;
    let start = (0..MAX_REJECTIONS)
        .map(|_| sample_in(&spec.spawn_region, rng))
        .find(|&p| !spec.geometry.disc_collides(p, radius))
        .ok_or(EnvError::Unsatisfiable {
            what: "start",
            attempts: MAX_REJECTIONS,
        })?;
    let heading = rng.gen_range(-PI..PI);
    let goal = (0..MAX_REJECTIONS)
        .map(|_| sample_in(&spec.goal_region, rng))
        .find(|&g| !spec.geometry.disc_collides(g, radius) && g.distance(start) > params.goal_radius)
        .ok_or(EnvError::Unsatisfiable {
            what: "goal",
            attempts: MAX_REJECTIONS,
        })?;
    Ok((RobotState::new(start, heading, radius), goal))
}

/// Seeded variant of [`sample_episode_with`].
pub fn sample_episode(
    spec: &EnvironmentSpec,
    params: &SimParams,
    seed: u64,
) -> Result<(RobotState, Vec2), EnvError> {
    sample_episode_with(spec, params, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Curriculum order used for training.
pub const TRAINING_ENVS: [&str; 3] = ["baseEnv", "intEnv", "finalEnv"];
/// Unseen evaluation rooms, ordered by occupied area.
pub const TEST_ENVS: [&str; 5] = ["envTest1", "envTest2", "envTest3", "envTest4", "envTest5"];

const BUNDLED: [(&str, &str); 8] = [
    ("baseEnv", include_str!("../data/envs/baseEnv.json")),
    ("intEnv", include_str!("../data/envs/intEnv.json")),
    ("finalEnv", include_str!("../data/envs/finalEnv.json")),
    ("envTest1", include_str!("../data/envs/envTest1.json")),
    ("envTest2", include_str!("../data/envs/envTest2.json")),
    ("envTest3", include_str!("../data/envs/envTest3.json")),
    ("envTest4", include_str!("../data/envs/envTest4.json")),
    ("envTest5", include_str!("../data/envs/envTest5.json")),
];

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

/// Loads one of the environments shipped with the crate.
pub fn bundled(name: &str) -> Result<EnvironmentSpec, EnvError> {
    let (_, text) = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| EnvError::Unknown(name.to_owned()))?;
    EnvironmentSpec::from_json(text)
}

/// Resolves `name` as a bundled environment or, failing that, as
/// `<dir>/<name>.json` for each search directory in order.
pub fn resolve(name: &str, search_dirs: &[PathBuf]) -> Result<EnvironmentSpec, EnvError> {
    if let Ok(spec) = bundled(name) {
        return Ok(spec);
    }
    for dir in search_dirs {
        let path = dir.join(format!("{name}.json"));
        if path.exists() {
            return load_environment(path);
        }
    }
    let path = Path::new(name);
    if path.extension().is_some_and(|e| e == "json") && path.exists() {
        return load_environment(path);
    }
    Err(EnvError::Unknown(name.to_owned()))
}
