//! Episode metrics: safety, liveness, invasiveness and cycle time.

use serde::{Deserialize, Serialize};

use crate::world::Vec2;

use super::episode::{detect_deadlock, run_episode, Controller, EpisodeError, TrajectoryLog};
use super::scenario::ScenarioSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub collisions: usize,
    pub deadlocks: usize,
    /// Goal-arrival time of the slowest agent; `None` unless all arrive.
    pub makespan: Option<f64>,
    /// Mean `|v_t - v_{t-1}|` over active agent-steps, m/s.
    pub delta_v: f64,
    /// Mean distance from each position to the agent's desired path, m.
    pub delta_path: f64,
    /// Mean controller wall time per call, s.
    pub cycle_time: f64,
    pub success: bool,
}

/// Distance from `p` to the polyline `path`.
pub fn distance_to_path(p: Vec2, path: &[Vec2]) -> f64 {
    match path.len() {
        0 => f64::INFINITY,
        1 => (p - path[0]).norm(),
        _ => path
            .windows(2)
            .map(|w| {
                let ab = w[1] - w[0];
                let l2 = ab.norm_squared();
                let t = if l2 > 0.0 {
                    ((p - w[0]).dot(&ab) / l2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (p - (w[0] + ab * t)).norm()
            })
            .fold(f64::INFINITY, f64::min),
    }
}

/// Desired path of every agent: its trajectory when alone in the same
/// geometry, driven by a controller from `make`.
pub fn desired_paths<'c, F>(spec: &ScenarioSpec, mut make: F) -> Result<Vec<Vec<Vec2>>, EpisodeError>
where
    F: FnMut() -> Box<dyn Controller + 'c>,
{
    (0..spec.agents.len())
        .map(|i| {
            let solo = spec.solo(i);
            let log = run_episode(&solo, &mut [make()])?;
            Ok(log.positions(0))
        })
        .collect()
}

/// Pure function of the log and the desired paths.
pub fn compute_metrics(log: &TrajectoryLog, desired: &[Vec<Vec2>]) -> Metrics {
    let n = log.num_agents();
    let collisions = log.outcome.collision as usize;
    let deadlocks = detect_deadlock(log) as usize;
    let makespan = if log.all_reached() {
        log.outcome.goal_times.iter().map(|t| t.unwrap()).reduce(f64::max)
    } else {
        None
    };

    let (mut dv_sum, mut dv_n) = (0.0, 0usize);
    let (mut dp_sum, mut dp_n) = (0.0, 0usize);
    for i in 0..n {
        let v = log.speeds(i);
        let pos = log.positions(i);
        // Active steps only: once parked the state is frozen.
        let active = log.steps.iter().take_while(|s| !s.agents[i].parked).count();
        for k in 0..active {
            dv_sum += (v[k + 1] - v[k]).abs();
            dv_n += 1;
        }
        for p in pos.iter().take(active + 1) {
            dp_sum += distance_to_path(*p, &desired[i]);
            dp_n += 1;
        }
    }
    let calls: Vec<f64> = log.cycle_times.iter().flatten().copied().collect();
    let cycle_time = if calls.is_empty() {
        0.0
    } else {
        calls.iter().sum::<f64>() / calls.len() as f64
    };
    Metrics {
        collisions,
        deadlocks,
        makespan,
        delta_v: if dv_n > 0 { dv_sum / dv_n as f64 } else { 0.0 },
        delta_path: if dp_n > 0 { dp_sum / dp_n as f64 } else { 0.0 },
        cycle_time,
        success: collisions == 0 && deadlocks == 0 && makespan.is_some(),
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    Some((m, var.sqrt()))
}

/// Aggregate over repeated runs, shaped like one row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub collisions: usize,
    pub deadlocks: usize,
    /// Mean and std over runs where every agent arrived.
    pub makespan: Option<(f64, f64)>,
    pub delta_v: (f64, f64),
    pub delta_path: (f64, f64),
    pub cycle_time: (f64, f64),
    pub successes: usize,
}

pub fn summarize(ms: &[Metrics]) -> Summary {
    let col = |f: &dyn Fn(&Metrics) -> f64| mean_std(&ms.iter().map(f).collect::<Vec<_>>()).unwrap_or((0.0, 0.0));
    let makespans: Vec<f64> = ms.iter().filter(|m| m.success).filter_map(|m| m.makespan).collect();
    Summary {
        runs: ms.len(),
        collisions: ms.iter().map(|m| m.collisions).sum(),
        deadlocks: ms.iter().map(|m| m.deadlocks).sum(),
        makespan: mean_std(&makespans),
        delta_v: col(&|m| m.delta_v),
        delta_path: col(&|m| m.delta_path),
        cycle_time: col(&|m| m.cycle_time),
        successes: ms.iter().filter(|m| m.success).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ControlInput, KinodynamicLimits};
    use crate::sim::episode::{ControlDecision, HoldController};
    use crate::sim::scenario::{build_scenario, ScenarioKind};
    use crate::world::{Route, WorldSnapshot};

    struct Straight;
    impl Controller for Straight {
        fn name(&self) -> &str {
            "straight"
        }
        fn control(
            &mut self,
            w: &WorldSnapshot,
            ego: usize,
            route: &Route,
            lim: &KinodynamicLimits,
        ) -> ControlDecision {
            let s = w.agents[ego].state;
            let t = route.progress(s.position()).target - s.position();
            let err = crate::dynamics::wrap_angle(t.y.atan2(t.x) - s.theta);
            ControlDecision::plain(crate::dynamics::clamp_control(
                &ControlInput::new(2.0 * err, lim.a_max),
                lim,
            ))
        }
    }

    fn solo_doorway() -> ScenarioSpec {
        build_scenario(ScenarioKind::Doorway, None).unwrap().solo(0)
    }

    #[test]
    fn solo_run_has_zero_path_deviation() {
        let spec = solo_doorway();
        let desired = desired_paths(&spec, || Box::new(Straight)).unwrap();
        let log = run_episode(&spec, &mut [Box::new(Straight) as Box<dyn Controller>]).unwrap();
        let m = compute_metrics(&log, &desired);
        assert_eq!(m.delta_path, 0.0);
        assert!(m.success);
        assert_eq!(m.makespan, log.outcome.goal_times[0]);
        // Cruising at v_max the whole way.
        assert_eq!(m.delta_v, 0.0);
    }

    #[test]
    fn metrics_are_pure() {
        let spec = solo_doorway();
        let desired = desired_paths(&spec, || Box::new(Straight)).unwrap();
        let log = run_episode(&spec, &mut [Box::new(Straight) as Box<dyn Controller>]).unwrap();
        let mut a = compute_metrics(&log, &desired);
        let mut b = compute_metrics(&log.clone(), &desired);
        a.cycle_time = 0.0;
        b.cycle_time = 0.0;
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn deadlock_has_no_makespan() {
        let mut spec = build_scenario(ScenarioKind::Doorway, None).unwrap();
        for a in &mut spec.agents {
            a.start.v = 0.0;
        }
        let mut c: Vec<Box<dyn Controller>> = vec![Box::new(HoldController), Box::new(HoldController)];
        let log = run_episode(&spec, &mut c).unwrap();
        let desired = vec![log.positions(0), log.positions(1)];
        let m = compute_metrics(&log, &desired);
        assert_eq!(m.deadlocks, 1);
        assert_eq!(m.makespan, None);
        assert!(!m.success);
        let s = summarize(&[m.clone(), m]);
        assert_eq!((s.runs, s.deadlocks, s.makespan), (2, 2, None));
    }

    #[test]
    fn path_distance() {
        let path = [Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(1.0, 1.0)];
        assert!((distance_to_path(Vec2::new(0.5, 0.3), &path) - 0.3).abs() < 1e-15);
        assert!((distance_to_path(Vec2::new(1.2, 0.5), &path) - 0.2).abs() < 1e-15);
        assert!((distance_to_path(Vec2::new(-1.0, 0.0), &path) - 1.0).abs() < 1e-15);
    }
}
