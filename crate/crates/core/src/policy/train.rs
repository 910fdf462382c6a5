//! Supervised training through the QP layer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf::{ViewEntry, P_L_FAST, P_L_SLOW, P_O1, P_O2};
use crate::dynamics::{ControlInput, KinodynamicLimits};
use crate::qpdiff::{qp_backward, QpStatus};
use crate::world::{Route, WorldSnapshot};

use super::controller::{local_view, step_from_input, ControllerConfig, StepTrace};
use super::encoding::{encode_observation, ModelInput};
use super::network::{backward, NetworkParams, NetworkShape, OutputGradient};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: ModelInput,
    pub target: ControlInput,
    pub snapshot: WorldSnapshot,
    pub ego: usize,
    pub route: Route,
}

impl TrainingSample {
    pub fn new(
        snapshot: WorldSnapshot,
        ego: usize,
        route: Route,
        target: ControlInput,
        limits: &KinodynamicLimits,
        config: &ControllerConfig,
    ) -> Self {
        let input = encode_observation(&snapshot, ego, &route, limits, &config.encoding);
        Self {
            input,
            target,
            snapshot,
            ego,
            route,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub trunk: usize,
    pub head: usize,
    /// Initial penalty levels the output biases are set to.
    pub init_p_obstacle: f64,
    pub init_p_liveness: f64,
    /// Weight of an extra `0.5 |u_ref - target|^2` term. While a row is
    /// active the QP output does not depend on `u_ref`, so without it the
    /// reference head stops learning exactly where the rows bind.
    pub reference_weight: f64,
    pub controller: ControllerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 7,
            trunk: 256,
            head: 64,
            init_p_obstacle: 3.0,
            init_p_liveness: 1.0,
            reference_weight: 0.3,
            controller: ControllerConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    /// Mean sample loss of each epoch, measured while training.
    pub epoch_losses: Vec<f64>,
}

/// Mean of the squared component differences.
pub fn loss(predicted: &ControlInput, target: &ControlInput) -> f64 {
    let dw = predicted.omega - target.omega;
    let da = predicted.a - target.a;
    0.5 * (dw * dw + da * da)
}

/// Loss of one traced step and its gradient with respect to the network
/// outputs, chained through the QP.
pub fn output_gradient(trace: &StepTrace, target: &ControlInput) -> (f64, OutputGradient) {
    let out = &trace.output;
    let l = loss(&out.control, target);
    if out.qp.status == QpStatus::Infeasible {
        return (l, OutputGradient::default());
    }
    let gu = nalgebra::Vector2::new(out.control.omega - target.omega, out.control.a - target.a);
    let g = qp_backward(&trace.problem, &out.qp, &gu);
    let mut dp = [0.0; 4];
    for (row, gh) in trace.problem.rows.iter().zip(g.grad_h.iter()) {
        if *gh == 0.0 {
            continue;
        }
        for j in [P_O1, P_O2, P_L_FAST, P_L_SLOW] {
            dp[j] += gh * row.dh_dpenalty[j];
        }
    }
    (
        l,
        OutputGradient {
            u_ref: [g.grad_u_ref[0], g.grad_u_ref[1]],
            penalties: dp,
        },
    )
}

/// Views are rebuilt once per sample, not once per visit.
pub struct PreparedSample<'a> {
    pub sample: &'a TrainingSample,
    pub view: Vec<ViewEntry>,
}

pub fn prepare<'a>(samples: &'a [TrainingSample], config: &ControllerConfig) -> Vec<PreparedSample<'a>> {
    samples
        .iter()
        .map(|s| PreparedSample {
            sample: s,
            view: local_view(&s.snapshot, s.ego, config.sensing_range),
        })
        .collect()
}

/// Output loss of one sample. Accumulates `scale` times the gradient of that
/// loss plus the weighted reference term into `grads`.
pub fn accumulate_sample(
    params: &NetworkParams,
    prepared: &PreparedSample,
    limits: &KinodynamicLimits,
    config: &ControllerConfig,
    reference_weight: f64,
    scale: f64,
    grads: &mut NetworkParams,
) -> f64 {
    let s = prepared.sample;
    let trace = step_from_input(params, &s.input, &s.snapshot, s.ego, &prepared.view, limits, config);
    let (l, mut d) = output_gradient(&trace, &s.target);
    let u_ref = trace.output.u_ref;
    d.u_ref[0] += reference_weight * (u_ref.omega - s.target.omega);
    d.u_ref[1] += reference_weight * (u_ref.a - s.target.a);
    for x in d.u_ref.iter_mut().chain(d.penalties.iter_mut()) {
        *x *= scale;
    }
    backward(params, &trace.cache, &d, grads);
    l
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(p: &NetworkParams) -> Self {
        let zeros: Vec<Vec<f64>> = p.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (k, (p, g)) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// The per-epoch sample orders a given seed produces.
pub struct Shuffler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl Shuffler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5a3b1e),
            order: (0..n).collect(),
        }
    }

    pub fn next_epoch(&mut self) -> &[usize] {
        self.order.shuffle(&mut self.rng);
        &self.order
    }
}

pub fn train(
    dataset: &[TrainingSample],
    config: &TrainConfig,
    limits: &KinodynamicLimits,
) -> Result<TrainOutcome, TrainError> {
    let Some(first) = dataset.first() else {
        return Err(TrainError::EmptyDataset);
    };
    let shape = NetworkShape {
        input: first.input.0.len(),
        trunk: config.trunk,
        head: config.head,
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = NetworkParams::init(
        shape,
        limits,
        config.init_p_obstacle,
        config.init_p_liveness,
        &mut init_rng,
    );
    let prepared = prepare(dataset, &config.controller);
    let mut adam = Adam::new(&params);
    let mut shuffler = Shuffler::new(dataset.len(), config.seed);
    let mut grads = NetworkParams::zeros(shape);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let order = shuffler.next_epoch().to_vec();
        let mut total = 0.0;
        for (b, batch) in order.chunks(config.batch_size.max(1)).enumerate() {
            for t in grads.tensors_mut() {
                t.fill(0.0);
            }
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += accumulate_sample(
                    &params,
                    &prepared[i],
                    limits,
                    &config.controller,
                    config.reference_weight,
                    scale,
                    &mut grads,
                );
            }
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b });
            }
            total += batch_loss;
            adam.step(&mut params, &grads, config.learning_rate);
        }
        let mean = total / dataset.len() as f64;
        log::info!("epoch {epoch}: loss {mean:.6e}");
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome { params, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::AgentState;
    use crate::policy::controller::step_from_input;
    use crate::world::{AgentSnapshot, Circle, Vec2};
    use rand::Rng;

    fn agent(x: f64, y: f64, th: f64, v: f64) -> AgentSnapshot {
        AgentSnapshot {
            state: AgentState::new(x, y, th, v),
            radius: 0.1,
            parked: false,
        }
    }

    #[test]
    fn loss_examples() {
        let a = ControlInput::new(0.0, 0.0);
        let b = ControlInput::new(0.2, 0.0);
        assert_eq!(loss(&a, &a), 0.0);
        assert!((loss(&a, &b) - 0.02).abs() < 1e-15);
        assert_eq!(loss(&a, &b), loss(&b, &a));
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            train(&[], &TrainConfig::default(), &Default::default()),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn shuffle_is_reproducible() {
        let mut a = Shuffler::new(500, 3);
        let mut b = Shuffler::new(500, 3);
        assert_eq!(a.next_epoch()[..64], b.next_epoch()[..64]);
        assert_eq!(a.next_epoch(), b.next_epoch());
        let mut c = Shuffler::new(500, 4);
        assert_ne!(Shuffler::new(500, 3).next_epoch(), c.next_epoch());
    }

    #[test]
    fn overfits_single_sample() {
        let lim = KinodynamicLimits::default();
        let cfg = TrainConfig::default();
        let snap = WorldSnapshot {
            agents: vec![agent(-1.0, 0.1, 0.1, 0.2)],
            obstacles: vec![Circle::new(0.0, 0.25, 0.1)],
        };
        let s = TrainingSample::new(
            snap,
            0,
            Route::direct(Vec2::new(2.0, 0.0)),
            ControlInput::new(-0.12, 0.05),
            &lim,
            &cfg.controller,
        );
        let data = vec![s; 64];
        let out = train(&data, &cfg, &lim).unwrap();
        assert_eq!(out.epoch_losses.len(), 30);
        // Constant-rate Adam rings around the optimum, so check the best epoch.
        let best = out.epoch_losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            best < 1e-4 && best < 0.01 * out.epoch_losses[0],
            "{:?}",
            out.epoch_losses
        );
    }

    /// Loss of `controller_step` on one sample as a function of params.
    fn sample_loss(
        p: &NetworkParams,
        s: &PreparedSample,
        lim: &KinodynamicLimits,
        cfg: &ControllerConfig,
    ) -> (f64, Vec<usize>) {
        let t = step_from_input(p, &s.sample.input, &s.sample.snapshot, s.sample.ego, &s.view, lim, cfg);
        (
            loss(&t.output.control, &s.sample.target),
            t.output.qp.active_set.clone(),
        )
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let lim = KinodynamicLimits::default();
        let cfg = ControllerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let shape = NetworkShape {
            input: cfg.encoding.input_dim(),
            trunk: 6,
            head: 4,
        };
        let mut checked_active = 0;
        let mut samples = 0;
        while samples < 40 {
            let mut params = NetworkParams::init(shape, &lim, 1.0, 1.0, &mut rng);
            // Nonzero biases keep the probe off the ReLU kinks.
            params.b0.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
            for h in &mut params.heads {
                h.w2 *= 5.0;
                h.b1.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
            }
            let snap = WorldSnapshot {
                agents: vec![
                    agent(
                        rng.gen_range(-1.0..-0.3),
                        rng.gen_range(-0.2..0.2),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(0.1..0.3),
                    ),
                    agent(
                        rng.gen_range(-0.2..0.2),
                        rng.gen_range(-1.0..-0.4),
                        rng.gen_range(1.2..1.9),
                        rng.gen_range(0.1..0.3),
                    ),
                ],
                obstacles: vec![Circle::new(0.0, 0.3, 0.1), Circle::new(0.1, 0.35, 0.1)],
            };
            let target = ControlInput::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.1..0.1));
            let sample = TrainingSample::new(snap, 0, Route::direct(Vec2::new(2.0, 0.0)), target, &lim, &cfg);
            let prep = prepare(std::slice::from_ref(&sample), &cfg);
            let prep = &prep[0];
            let (_, active0) = sample_loss(&params, prep, &lim, &cfg);
            let mut grads = NetworkParams::zeros(shape);
            accumulate_sample(&params, prep, &lim, &cfg, 0.0, 1.0, &mut grads);
            let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();
            let eps = 1e-6;
            let mut k = 0;
            let mut stable = true;
            let mut mismatches = Vec::new();
            for t in 0..params.tensors().len() {
                for i in 0..params.tensors()[t].len() {
                    let (mut a, mut b) = (params.clone(), params.clone());
                    a.tensors_mut()[t][i] += eps;
                    b.tensors_mut()[t][i] -= eps;
                    let (la, sa) = sample_loss(&a, prep, &lim, &cfg);
                    let (lb, sb) = sample_loss(&b, prep, &lim, &cfg);
                    if sa != active0 || sb != active0 {
                        stable = false;
                        break;
                    }
                    let fd = (la - lb) / (2.0 * eps);
                    let an = analytic[k];
                    if (fd - an).abs() > 1e-3 * fd.abs().max(an.abs()).max(1e-6) {
                        mismatches.push((k, fd, an));
                    }
                    k += 1;
                }
                if !stable {
                    break;
                }
            }
            if !stable {
                continue;
            }
            assert!(mismatches.is_empty(), "{mismatches:?}");
            samples += 1;
            if !active0.is_empty() {
                checked_active += 1;
            }
        }
        assert!(
            checked_active >= 5,
            "only {checked_active} samples exercised active rows"
        );
    }
}
