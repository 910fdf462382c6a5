use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use livenet_core::expert::{mpc_plan, MpcConfig};
use livenet_core::policy::{controller_step, ControllerConfig, NetworkParams, NetworkShape};
use livenet_core::sim::{build_scenario, ScenarioKind, ScenarioSpec};
use livenet_core::{KinodynamicLimits, QpProblem, WorldSnapshot};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Both doorway agents a little way in, moving toward the gap.
fn doorway() -> (ScenarioSpec, WorldSnapshot) {
    let spec = build_scenario(ScenarioKind::Doorway, None).unwrap();
    let mut agents = spec.initial_agents();
    for a in &mut agents {
        a.state.v = 0.25;
    }
    let snap = WorldSnapshot {
        agents,
        obstacles: spec.obstacles.clone(),
    };
    (spec, snap)
}

fn network(config: &ControllerConfig, limits: &KinodynamicLimits) -> Arc<NetworkParams> {
    let shape = NetworkShape {
        input: config.encoding.input_dim(),
        trunk: 256,
        head: 64,
    };
    Arc::new(NetworkParams::init(
        shape,
        limits,
        3.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(7),
    ))
}

fn benches(c: &mut Criterion) {
    let (spec, snap) = doorway();
    let route = spec.agents[0].route();
    let limits = spec.limits;
    let config = ControllerConfig::default();
    let params = network(&config, &limits);

    let out = controller_step(&params, &snap, 0, &route, &limits, &config);
    let problem = QpProblem::new(out.u_ref.as_vector(), out.rows.clone());
    c.bench_function("solve_qp", |b| {
        b.iter(|| livenet_core::qpdiff::solve_qp(black_box(&problem)))
    });

    c.bench_function("controller_step", |b| {
        b.iter(|| controller_step(&params, black_box(&snap), 0, &route, &limits, &config))
    });

    let mpc = MpcConfig::default();
    c.bench_function("mpc_plan", |b| {
        b.iter(|| mpc_plan(black_box(&snap), 0, &route, &limits, &mpc, None).unwrap())
    });
}

criterion_group!(control, benches);
criterion_main!(control);
