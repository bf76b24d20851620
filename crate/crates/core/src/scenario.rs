//! Closed-loop overtaking simulation: the planner drives the ego vehicle, the
//! true bicycle model moves it, and slower vehicles follow their lanes.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{penalty_nmpc_solve, PenaltyConfig};
use crate::constraints::{vehicle_distance, BarrierConfig, ConstraintConfig, Footprint, Obstacle};
use crate::dynamics::{
    true_step, BicycleParams, ControlInput, KinematicModel, PlanningModel, SurrogateModel, VehicleState,
};
use crate::error::{Error, Result};
use crate::mlp::MlpModel;
use crate::planner::{build_reference, stage_cost, Planner, PlannerConfig, Scene, Waypoint};
use crate::road::{RoadGeometry, RoadSegment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum RoadSpec {
    Segments {
        start: [f64; 2],
        heading: f64,
        segments: Vec<RoadSegment>,
        #[serde(default = "default_spacing")]
        spacing: f64,
        half_width: f64,
    },
    Polyline {
        points: Vec<[f64; 2]>,
        half_width: f64,
    },
    /// CSV file with `x,y` rows (a header line is allowed).
    File {
        path: PathBuf,
        half_width: f64,
    },
}

fn default_spacing() -> f64 {
    0.5
}

impl RoadSpec {
    /// Two-lane S-curve: straight, left arc, right arc, straight (400 m).
    pub fn s_curve() -> Self {
        RoadSpec::Segments {
            start: [0.0, 0.0],
            heading: 0.0,
            segments: vec![
                RoadSegment::Straight { length: 40.0 },
                RoadSegment::Arc {
                    radius: 100.0,
                    angle: 0.9,
                },
                RoadSegment::Arc {
                    radius: 100.0,
                    angle: -0.9,
                },
                RoadSegment::Straight { length: 180.0 },
            ],
            spacing: default_spacing(),
            half_width: 3.5,
        }
    }

    pub fn build(&self) -> Result<RoadGeometry> {
        match self {
            RoadSpec::Segments {
                start,
                heading,
                segments,
                spacing,
                half_width,
            } => RoadGeometry::from_segments(*start, *heading, segments, *spacing, *half_width),
            RoadSpec::Polyline { points, half_width } => RoadGeometry::new(points.clone(), *half_width),
            RoadSpec::File { path, half_width } => {
                let mut reader = csv::ReaderBuilder::new()
                    .has_headers(false)
                    .comment(Some(b'#'))
                    .from_path(path)?;
                let mut points = Vec::new();
                for row in reader.records() {
                    let row = row?;
                    let parse = |i: usize| row.get(i).and_then(|v| v.trim().parse::<f64>().ok());
                    match (parse(0), parse(1)) {
                        (Some(x), Some(y)) => points.push([x, y]),
                        // tolerate a header line
                        _ if points.is_empty() => continue,
                        _ => return Err(Error::config("road.path", "rows must hold two numbers")),
                    }
                }
                RoadGeometry::new(points, *half_width)
            }
        }
    }
}

/// A vehicle that drives along the road at a fixed lateral offset and speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OtherVehicle {
    /// Initial arclength.
    pub s0: f64,
    /// Offset from the centerline, positive to the left.
    pub lateral: f64,
    pub speed: f64,
}

impl OtherVehicle {
    pub fn at_step(&self, road: &RoadGeometry, k: usize, dt: f64, footprint: &Footprint) -> Obstacle {
        let s = self.s0 + self.speed * dt * k as f64;
        let (p, heading) = road.point_at(s);
        let n = road.normal_at(s);
        Obstacle {
            x: p[0] + self.lateral * n[0],
            y: p[1] + self.lateral * n[1],
            heading: crate::dynamics::wrap_angle(heading),
            speed: self.speed,
            footprint: footprint.clone(),
        }
    }
}

/// Positions of every other vehicle for steps `0..steps`, independent of the ego vehicle.
pub fn other_vehicle_rollout(
    others: &[OtherVehicle],
    road: &RoadGeometry,
    steps: usize,
    dt: f64,
    footprint: &Footprint,
) -> Vec<Vec<Obstacle>> {
    (0..steps)
        .map(|k| others.iter().map(|o| o.at_step(road, k, dt, footprint)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub road: RoadSpec,
    pub ego: VehicleState,
    pub others: Vec<OtherVehicle>,
    pub target_speed: f64,
    pub steps: usize,
    pub planner: PlannerConfig,
    #[serde(default)]
    pub bicycle: BicycleParams,
    pub planning_model: PlanningModelSpec,
    /// Settings of the gradient-based comparison planner.
    #[serde(default)]
    pub penalty: PenaltyConfig,
    /// Seed of the planner noise streams; overrides `planner.smoother.rng_seed`.
    pub rng_seed: u64,
    /// Directory receiving `records.csv`, `timings.csv` and `summary.json`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    /// Two slow vehicles in the right lane of the S-curve road.
    pub fn canonical() -> Self {
        ScenarioConfig {
            road: RoadSpec::s_curve(),
            ego: VehicleState::new(5.0, 0.0, 0.0, 7.0),
            others: vec![
                OtherVehicle {
                    s0: 25.0,
                    lateral: -1.75,
                    speed: 3.5,
                },
                OtherVehicle {
                    s0: 70.0,
                    lateral: -1.75,
                    speed: 4.0,
                },
            ],
            target_speed: 7.0,
            steps: 500,
            planner: PlannerConfig {
                barrier: Some(BarrierConfig {
                    beta: 10.0,
                    ..BarrierConfig::default()
                }),
                ..PlannerConfig::default()
            },
            bicycle: BicycleParams::default(),
            planning_model: PlanningModelSpec::Kinematic,
            penalty: PenaltyConfig::default(),
            rng_seed: 0,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.others.iter().any(|o| !(o.speed >= 0.0)) {
            return Err(Error::config("others.speed", "must be non-negative"));
        }
        if !(self.target_speed >= self.bicycle.speed_floor && self.target_speed <= self.bicycle.speed_ceiling) {
            return Err(Error::config("target_speed", "must lie within the speed clamp range"));
        }
        if !self.ego.is_finite() {
            return Err(Error::config("ego", "must be finite"));
        }
        self.bicycle.validate()?;
        self.planner.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut config = Self::from_json(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let PlanningModelSpec::Surrogate { path: p } = &mut config.planning_model {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let RoadSpec::File { path: p, .. } = &mut config.road {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }
}

/// Model the planner predicts with. The plant always uses the exact bicycle model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum PlanningModelSpec {
    /// Trained network stored in the JSON model format.
    Surrogate { path: PathBuf },
    /// Euler-discretized analytic bicycle model.
    Kinematic,
}

impl PlanningModelSpec {
    pub fn load(&self, params: &BicycleParams, dt: f64) -> Result<Box<dyn PlanningModel>> {
        Ok(match self {
            PlanningModelSpec::Surrogate { path } => Box::new(SurrogateModel::new(MlpModel::load(path)?, dt)?),
            PlanningModelSpec::Kinematic => Box::new(KinematicModel { params: *params, dt }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub k: usize,
    pub state: VehicleState,
    pub control: ControlInput,
    pub raw_control: ControlInput,
    /// Footprint clearance to each other vehicle.
    pub distances: Vec<f64>,
    /// `half_width - |lateral offset|`; negative outside the road.
    pub boundary_margin: f64,
    pub stage_cost: f64,
    pub plan_time: f64,
    pub mean_innovation: f64,
    pub max_condition: f64,
}

impl StepRecord {
    pub fn min_distance(&self) -> f64 {
        self.distances.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub steps_completed: usize,
    pub total_cost: f64,
    pub min_distance: f64,
    pub min_boundary_margin: f64,
    pub mean_plan_time: f64,
    pub max_plan_time: f64,
    /// Steps with clearance below `d_min`.
    pub collisions: usize,
    pub boundary_violations: usize,
    pub failure: Option<String>,
}

impl ScenarioSummary {
    pub fn is_safe(&self) -> bool {
        self.failure.is_none() && self.collisions == 0 && self.boundary_violations == 0
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub records: Vec<StepRecord>,
    pub summary: ScenarioSummary,
}

pub fn summarize_records(records: &[StepRecord], constraint: &ConstraintConfig, failure: Option<String>) -> ScenarioSummary {
    let n = records.len();
    let times = records.iter().map(|r| r.plan_time);
    ScenarioSummary {
        steps_completed: n,
        total_cost: records.iter().map(|r| r.stage_cost).sum(),
        min_distance: records.iter().map(StepRecord::min_distance).fold(f64::INFINITY, f64::min),
        min_boundary_margin: records.iter().map(|r| r.boundary_margin).fold(f64::INFINITY, f64::min),
        mean_plan_time: if n > 0 { times.clone().sum::<f64>() / n as f64 } else { 0.0 },
        max_plan_time: times.fold(0.0, f64::max),
        collisions: records.iter().filter(|r| r.min_distance() < constraint.d_min).count(),
        boundary_violations: records.iter().filter(|r| r.boundary_margin < 0.0).count(),
        failure,
    }
}

/// How the ego vehicle's controls are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Enks,
    Penalty,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Enks => "enks",
            Method::Penalty => "penalty",
        })
    }
}

struct StepPlan {
    applied: ControlInput,
    raw: ControlInput,
    time: f64,
    mean_innovation: f64,
    max_condition: f64,
}

enum Controller<M> {
    Enks(Planner<M>),
    Penalty {
        model: M,
        planner: PlannerConfig,
        config: PenaltyConfig,
        previous: Option<Vec<ControlInput>>,
    },
}

impl<M: PlanningModel> Controller<M> {
    fn plan(&mut self, state: &VehicleState, reference: &[Waypoint], scene: &Scene<'_>) -> Result<StepPlan> {
        match self {
            Controller::Enks(planner) => {
                let plan = planner.plan_step(state, reference, scene)?;
                Ok(StepPlan {
                    applied: plan.applied_control,
                    raw: plan.raw_control,
                    time: plan.plan_time,
                    mean_innovation: plan.diagnostics.mean_innovation(),
                    max_condition: plan.diagnostics.max_condition(),
                })
            }
            Controller::Penalty {
                model,
                planner,
                config,
                previous,
            } => {
                // shift the previous solution by one step as the initial guess
                let init = previous.as_ref().map(|p| {
                    let mut shifted: Vec<ControlInput> = p[1..].to_vec();
                    shifted.push(*p.last().expect("nonempty"));
                    shifted
                });
                let out = penalty_nmpc_solve(&*model, scene, state, reference, planner, config, init.as_deref())?;
                let raw = out.controls[0];
                *previous = Some(out.controls);
                Ok(StepPlan {
                    applied: raw.saturate(planner.constraint.u_min, planner.constraint.u_max),
                    raw,
                    time: out.wall_time,
                    mean_innovation: f64::NAN,
                    max_condition: f64::NAN,
                })
            }
        }
    }
}

/// Runs the EnKS planner in closed loop; see [`run_method`].
pub fn run_scenario<M: PlanningModel>(config: &ScenarioConfig, model: M) -> Result<ScenarioOutcome> {
    run_method(config, model, Method::Enks)
}

/// Runs the loop `k = 0..steps`: reference, plan, true plant step, log.
/// A planner failure ends the run early; the records so far are kept.
pub fn run_method<M: PlanningModel>(config: &ScenarioConfig, model: M, method: Method) -> Result<ScenarioOutcome> {
    config.validate()?;
    let road = config.road.build()?;
    let mut planner_config = config.planner.clone();
    planner_config.smoother.rng_seed = config.rng_seed;
    let constraint = planner_config.constraint.clone();
    let q = planner_config.control_weight_matrix();
    let r = planner_config.state_weight_matrix();
    let (h, dt) = (planner_config.horizon, planner_config.dt);
    let mut controller = match method {
        Method::Enks => Controller::Enks(Planner::new(model, planner_config)?),
        Method::Penalty => {
            config.penalty.validate()?;
            Controller::Penalty {
                model,
                planner: planner_config,
                config: config.penalty.clone(),
                previous: None,
            }
        }
    };

    let footprint = constraint.footprint();
    let others = other_vehicle_rollout(&config.others, &road, config.steps, dt, &footprint);
    let mut state = config.ego;
    let mut records = Vec::with_capacity(config.steps);
    let mut failure = None;
    for (k, obstacles) in others.iter().enumerate() {
        let reference = build_reference(&road, &state, h, dt, config.target_speed)?;
        let scene = Scene {
            road: Some(&road),
            obstacles,
        };
        let plan = match controller.plan(&state, &reference, &scene) {
            Ok(p) => p,
            Err(e) => {
                failure = Some(format!("step {k}: {e}"));
                break;
            }
        };
        let u = plan.applied;
        records.push(StepRecord {
            k,
            state,
            control: u,
            raw_control: plan.raw,
            distances: obstacles
                .iter()
                .map(|ob| vehicle_distance(&state, &footprint, ob))
                .collect(),
            boundary_margin: -road.boundary_violation([state.x_pos, state.y_pos]),
            stage_cost: stage_cost(&state.to_array(), &u.to_array(), &reference[0], &q, &r),
            plan_time: plan.time,
            mean_innovation: plan.mean_innovation,
            max_condition: plan.max_condition,
        });
        state = match true_step(&state, &u, &config.bicycle, dt) {
            Ok(s) => s,
            Err(e) => {
                failure = Some(format!("step {k}: {e}"));
                break;
            }
        };
    }
    let summary = summarize_records(&records, &constraint, failure);
    let outcome = ScenarioOutcome { records, summary };
    if let Some(dir) = &config.output_dir {
        write_outcome(dir, &outcome)?;
    }
    Ok(outcome)
}

pub const RECORDS_SCHEMA: &str = "# enkmp step records v1";
pub const TIMINGS_SCHEMA: &str = "# enkmp step timings v1";

/// Step records as CSV. Wall-clock times go to a separate file so that
/// identical runs give identical record files.
pub fn write_records_csv<W: Write>(mut out: W, records: &[StepRecord]) -> Result<()> {
    writeln!(out, "{RECORDS_SCHEMA}")?;
    let n_others = records.first().map_or(0, |r| r.distances.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = [
        "k", "x", "y", "heading", "speed", "accel", "steer", "raw_accel", "raw_steer",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..n_others).map(|i| format!("distance_{i}")));
    header.extend(
        ["min_distance", "boundary_margin", "stage_cost", "mean_innovation", "max_condition"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.k.to_string()];
        let s = &r.state;
        row.extend(
            [
                s.x_pos,
                s.y_pos,
                s.heading,
                s.speed,
                r.control.accel,
                r.control.steer,
                r.raw_control.accel,
                r.raw_control.steer,
            ]
            .iter()
            .chain(&r.distances)
            .chain(&[
                r.min_distance(),
                r.boundary_margin,
                r.stage_cost,
                r.mean_innovation,
                r.max_condition,
            ])
            .map(|v| v.to_string()),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timings_csv<W: Write>(mut out: W, records: &[StepRecord]) -> Result<()> {
    writeln!(out, "{TIMINGS_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "plan_time_s"])?;
    for r in records {
        w.write_record([r.k.to_string(), r.plan_time.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_outcome(dir: &Path, outcome: &ScenarioOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_records_csv(File::create(dir.join("records.csv"))?, &outcome.records)?;
    write_timings_csv(File::create(dir.join("timings.csv"))?, &outcome.records)?;
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&outcome.summary)?,
    )?;
    Ok(())
}

/// A row of the method comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub n_members: Option<usize>,
    pub horizon: usize,
    pub total_cost: f64,
    pub avg_plan_time: f64,
    /// Percent change against the baseline row.
    pub cost_change_pct: f64,
    pub time_change_pct: f64,
}

pub fn relative_change_pct(value: f64, baseline: f64) -> f64 {
    (value - baseline) / baseline * 100.0
}

/// Builds table rows and fills the relative columns against `rows[baseline]`.
pub fn summarize(
    rows: &[(String, Option<usize>, usize, &[StepRecord])],
    baseline: usize,
) -> Result<Vec<SummaryRow>> {
    if rows.iter().any(|r| r.3.is_empty()) {
        return Err(Error::config("records", "every row needs at least one record"));
    }
    let base = rows
        .get(baseline)
        .ok_or_else(|| Error::config("baseline", "index out of range"))?;
    let cost = |r: &[StepRecord]| r.iter().map(|s| s.stage_cost).sum::<f64>();
    let time = |r: &[StepRecord]| r.iter().map(|s| s.plan_time).sum::<f64>() / r.len() as f64;
    let (base_cost, base_time) = (cost(base.3), time(base.3));
    Ok(rows
        .iter()
        .map(|(method, n, h, records)| {
            let (c, t) = (cost(records), time(records));
            SummaryRow {
                method: method.clone(),
                n_members: *n,
                horizon: *h,
                total_cost: c,
                avg_plan_time: t,
                cost_change_pct: relative_change_pct(c, base_cost),
                time_change_pct: relative_change_pct(t, base_time),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(cost: f64, time: f64) -> StepRecord {
        StepRecord {
            k: 0,
            state: VehicleState::default(),
            control: ControlInput::default(),
            raw_control: ControlInput::default(),
            distances: vec![5.0],
            boundary_margin: 1.0,
            stage_cost: cost,
            plan_time: time,
            mean_innovation: 0.0,
            max_condition: 1.0,
        }
    }

    #[test]
    fn table_percentages() {
        let a = vec![record(3.0, 54.92)];
        let b = vec![record(3.0, 0.366)];
        let rows = summarize(
            &[
                ("baseline".into(), None, 40, &a[..]),
                ("enks".into(), Some(200), 40, &b[..]),
                ("same".into(), None, 40, &a[..]),
            ],
            0,
        )
        .unwrap();
        assert_eq!(rows[0].total_cost, 3.0);
        assert!((rows[1].time_change_pct - (-99.33357611070649)).abs() < 1e-9);
        assert_eq!((rows[2].cost_change_pct, rows[2].time_change_pct), (0.0, 0.0));
        assert!(summarize(&[("x".into(), None, 1, &[][..])], 0).is_err());
    }

    #[test]
    fn other_vehicles_follow_their_lane() {
        let road = RoadSpec::s_curve().build().unwrap();
        let ov = OtherVehicle {
            s0: 30.0,
            lateral: -1.75,
            speed: 4.0,
        };
        let fp = Footprint::single(1.0);
        for k in [0, 50, 200] {
            let ob = ov.at_step(&road, k, 0.1, &fp);
            let pr = road.project([ob.x, ob.y]);
            assert!((pr.lateral + 1.75).abs() < 1e-3);
            assert!((pr.s - (30.0 + 0.4 * k as f64)).abs() < 1e-2);
        }
    }

    #[test]
    fn s_curve_is_400_m() {
        let road = RoadSpec::s_curve().build().unwrap();
        assert!((road.length() - 400.0).abs() < 0.05);
    }

    #[test]
    fn road_from_csv_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("road.csv");
        std::fs::write(&path, "x,y\n0,0\n10,0\n20,5\n").unwrap();
        let road = RoadSpec::File {
            path: path.clone(),
            half_width: 3.0,
        }
        .build()
        .unwrap();
        assert_eq!(road.points().len(), 3);
        std::fs::write(&path, "0,0\n1,oops\n").unwrap();
        assert!(RoadSpec::File { path, half_width: 3.0 }.build().is_err());
    }

    #[test]
    fn csv_has_schema_line_and_fixed_columns() {
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &[record(1.5, 0.01)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(RECORDS_SCHEMA));
        assert!(lines.next().unwrap().starts_with("k,x,y,heading,speed,accel,steer"));
        assert!(!text.contains("0.01"));
    }
}
