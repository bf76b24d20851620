use std::sync::atomic::{AtomicUsize, Ordering};

use enkmp::constraints::vehicle_distance;
use enkmp::dynamics::{true_step, BicycleParams, KinematicModel, PlanningModel};
use enkmp::road::RoadSegment;
use enkmp::scenario::{other_vehicle_rollout, run_scenario, OtherVehicle, RoadSpec, ScenarioConfig};
use enkmp::Result;
use nalgebra::DMatrix;

fn kinematic() -> KinematicModel {
    KinematicModel {
        params: BicycleParams::default(),
        dt: 0.1,
    }
}

fn short_config(steps: usize) -> ScenarioConfig {
    let mut config = ScenarioConfig::canonical();
    config.steps = steps;
    config.planner.smoother.n_members = 40;
    config.planner.horizon = 15;
    config
}

/// Counts how often the planner asks for a prediction.
struct Counting<M> {
    inner: M,
    calls: AtomicUsize,
}

impl<M: PlanningModel> PlanningModel for Counting<M> {
    fn step_batch(&self, states: &DMatrix<f64>, controls: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.step_batch(states, controls)
    }
}

/// Returns NaN predictions from the `fail_at`-th call on.
struct Breaking<M> {
    inner: M,
    calls: AtomicUsize,
    fail_at: usize,
}

impl<M: PlanningModel> PlanningModel for Breaking<M> {
    fn step_batch(&self, states: &DMatrix<f64>, controls: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if self.calls.fetch_add(1, Ordering::Relaxed) >= self.fail_at {
            return Ok(DMatrix::from_element(states.nrows(), states.ncols(), f64::NAN));
        }
        self.inner.step_batch(states, controls)
    }
}

#[test]
fn single_step_on_reference_without_traffic() {
    let mut config = short_config(1);
    config.others.clear();
    let out = run_scenario(&config, kinematic()).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.summary.steps_completed, 1);
    assert_eq!(out.summary.collisions + out.summary.boundary_violations, 0);
    assert!(out.summary.failure.is_none());
    assert_eq!(out.summary.total_cost, out.records[0].stage_cost);
}

#[test]
fn receding_slow_vehicle_behind_is_never_approached() {
    let mut config = short_config(60);
    config.others = vec![OtherVehicle {
        s0: 0.0,
        lateral: -1.75,
        speed: 2.0,
    }];
    config.ego.x_pos = 15.0;
    let out = run_scenario(&config, kinematic()).unwrap();
    let d: Vec<f64> = out.records.iter().map(|r| r.distances[0]).collect();
    assert!(d.windows(2).all(|w| w[1] > w[0]), "{d:?}");
}

#[test]
fn same_seed_gives_identical_record_files() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut config = short_config(25);
        config.output_dir = Some(dir.path().join(name));
        run_scenario(&config, kinematic()).unwrap();
        std::fs::read(dir.path().join(name).join("records.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn other_vehicles_ignore_the_ego_vehicle() {
    let config = short_config(30);
    let out = run_scenario(&config, kinematic()).unwrap();
    let road = config.road.build().unwrap();
    let footprint = config.planner.constraint.footprint();
    let standalone = other_vehicle_rollout(&config.others, &road, config.steps, config.planner.dt, &footprint);
    for (record, obstacles) in out.records.iter().zip(&standalone) {
        let expected: Vec<f64> = obstacles
            .iter()
            .map(|ob| vehicle_distance(&record.state, &footprint, ob))
            .collect();
        assert_eq!(record.distances, expected, "step {}", record.k);
    }
}

#[test]
fn plant_runs_true_dynamics_and_planner_only_the_given_model() {
    let config = short_config(20);
    let model = Counting {
        inner: kinematic(),
        calls: AtomicUsize::new(0),
    };
    let out = run_scenario(&config, &model).unwrap();
    // one batched prediction per horizon step per plan
    assert_eq!(model.calls.load(Ordering::Relaxed), config.steps * config.planner.horizon);
    for pair in out.records.windows(2) {
        let next = true_step(&pair[0].state, &pair[0].control, &config.bicycle, config.planner.dt).unwrap();
        assert_eq!(next, pair[1].state, "step {}", pair[0].k);
    }
}

#[test]
fn planner_failure_keeps_partial_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = short_config(20);
    config.output_dir = Some(dir.path().to_path_buf());
    let h = config.planner.horizon;
    let model = Breaking {
        inner: kinematic(),
        calls: AtomicUsize::new(0),
        fail_at: 7 * h + 3,
    };
    let out = run_scenario(&config, model).unwrap();
    assert_eq!(out.records.len(), 7);
    assert_eq!(out.summary.steps_completed, 7);
    assert!(out.summary.failure.as_deref().unwrap().starts_with("step 7"));
    let csv = std::fs::read_to_string(dir.path().join("records.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 7);
}

#[test]
fn custom_straight_road_runs() {
    let mut config = short_config(10);
    config.road = RoadSpec::Segments {
        start: [0.0, 0.0],
        heading: 0.3,
        segments: vec![RoadSegment::Straight { length: 200.0 }],
        spacing: 0.5,
        half_width: 3.5,
    };
    config.ego = enkmp::dynamics::VehicleState::new(0.0, 0.0, 0.3, 7.0);
    config.others.clear();
    let out = run_scenario(&config, kinematic()).unwrap();
    assert!(out.summary.is_safe());
    assert!(out.records.iter().all(|r| r.state.heading.abs() - 0.3 < 0.05));
}
