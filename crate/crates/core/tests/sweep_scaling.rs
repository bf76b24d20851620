// Kept in its own test binary so no other test competes for the CPU while
// plan times are measured.
mod common;

use common::crate_dir;
use enkmp::cli::{aggregate, run_sweep, SweepConfig};
use enkmp::scenario::{Method, ScenarioConfig};

#[test]
fn plan_time_grows_with_members_and_horizon() {
    let mut base = ScenarioConfig::load(crate_dir().join("configs/smoke.json")).unwrap();
    base.steps = 10;
    let sweep = SweepConfig {
        scenario: "smoke.json".into(),
        methods: vec![Method::Enks],
        n_members: vec![50, 100, 200],
        horizons: vec![40, 60],
        seeds: vec![0],
        steps: None,
        penalty_steps: None,
        baseline: None,
    };
    let tmp = tempfile::tempdir().unwrap();
    let results = run_sweep(&base, &sweep, tmp.path(), 1);
    assert!(results.iter().all(|r| r.outcome.is_ok()));
    let groups = aggregate(&results, None);
    let time = |n: usize, h: usize| {
        groups
            .iter()
            .find(|g| g.n_members == Some(n) && g.horizon == h)
            .unwrap()
            .avg_plan_time
    };
    for h in [40, 60] {
        assert!(time(50, h) < time(100, h) && time(100, h) < time(200, h), "H={h}: {groups:?}");
    }
    for n in [50, 100, 200] {
        assert!(time(n, 40) < time(n, 60), "N={n}: {groups:?}");
    }
}
