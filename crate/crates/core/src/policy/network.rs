//! Three-headed MLP: a shared ReLU trunk feeding the reference-control head
//! and the two penalty heads.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cbf::PenaltyValues;
use crate::dynamics::{ControlInput, KinodynamicLimits};

/// Added after the softplus so penalties never reach zero.
pub const PENALTY_FLOOR: f64 = 1e-3;

pub const HEAD_R: usize = 0;
pub const HEAD_O: usize = 1;
pub const HEAD_L: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input: usize,
    pub trunk: usize,
    pub head: usize,
}

impl NetworkShape {
    pub fn new(input: usize) -> Self {
        Self {
            input,
            trunk: 256,
            head: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub w0: DMatrix<f64>,
    pub b0: DVector<f64>,
    /// Reference-control, obstacle-penalty and liveness-penalty heads.
    pub heads: [Head; 3],
    /// Maps the reference head's raw output to `(omega, a)`.
    pub output_scale: [f64; 2],
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of `softplus(x) + PENALTY_FLOOR`.
pub fn penalty_preimage(p: f64) -> f64 {
    let y = p - PENALTY_FLOOR;
    y + (-(-y).exp_m1()).ln()
}

impl Head {
    fn zeros(trunk: usize, head: usize) -> Self {
        Self {
            w1: DMatrix::zeros(head, trunk),
            b1: DVector::zeros(head),
            w2: DMatrix::zeros(2, head),
            b2: DVector::zeros(2),
        }
    }
}

impl NetworkParams {
    pub fn zeros(shape: NetworkShape) -> Self {
        Self {
            w0: DMatrix::zeros(shape.trunk, shape.input),
            b0: DVector::zeros(shape.trunk),
            heads: std::array::from_fn(|_| Head::zeros(shape.trunk, shape.head)),
            output_scale: [1.0, 1.0],
        }
    }

    /// He-initialized hidden layers and small output layers, with penalty
    /// biases chosen so the initial penalties are roughly `p_obstacle` and
    /// `p_liveness`.
    pub fn init<R: Rng>(
        shape: NetworkShape,
        limits: &KinodynamicLimits,
        p_obstacle: f64,
        p_liveness: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(shape);
        let mut fill = |m: &mut DMatrix<f64>, std: f64| {
            let n = Normal::new(0.0, std).expect("finite std");
            for v in m.iter_mut() {
                *v = n.sample(rng);
            }
        };
        fill(&mut p.w0, (2.0 / shape.input as f64).sqrt());
        for h in &mut p.heads {
            fill(&mut h.w1, (2.0 / shape.trunk as f64).sqrt());
            fill(&mut h.w2, 0.1 / (shape.head as f64).sqrt());
        }
        p.heads[HEAD_O].b2.fill(penalty_preimage(p_obstacle));
        p.heads[HEAD_L].b2.fill(penalty_preimage(p_liveness));
        p.output_scale = [limits.omega_max, limits.a_max];
        p
    }

    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            input: self.w0.ncols(),
            trunk: self.w0.nrows(),
            head: self.heads[0].w1.nrows(),
        }
    }

    /// Every trainable tensor, in a fixed order. Vectors are viewed as
    /// single-column matrices.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![self.w0.as_slice(), self.b0.as_slice()];
        for h in &self.heads {
            v.extend([h.w1.as_slice(), h.b1.as_slice(), h.w2.as_slice(), h.b2.as_slice()]);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![self.w0.as_mut_slice(), self.b0.as_mut_slice()];
        for h in &mut self.heads {
            v.push(h.w1.as_mut_slice());
            v.push(h.b1.as_mut_slice());
            v.push(h.w2.as_mut_slice());
            v.push(h.b2.as_mut_slice());
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: DVector<f64>,
    pub trunk: DVector<f64>,
    pub hidden: [DVector<f64>; 3],
    pub raw: [[f64; 2]; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkOutput {
    pub u_ref: ControlInput,
    pub penalties: PenaltyValues,
}

fn relu(v: DVector<f64>) -> DVector<f64> {
    v.map(|x| x.max(0.0))
}

pub fn forward_cached(params: &NetworkParams, input: &[f64]) -> (NetworkOutput, ForwardCache) {
    let z = DVector::from_column_slice(input);
    let t = relu(&params.w0 * &z + &params.b0);
    let mut hidden: [DVector<f64>; 3] = std::array::from_fn(|_| DVector::zeros(0));
    let mut raw = [[0.0; 2]; 3];
    for (k, h) in params.heads.iter().enumerate() {
        let a = relu(&h.w1 * &t + &h.b1);
        let o = &h.w2 * &a + &h.b2;
        raw[k] = [o[0], o[1]];
        hidden[k] = a;
    }
    let pen = |x: f64| softplus(x) + PENALTY_FLOOR;
    let out = NetworkOutput {
        u_ref: ControlInput::new(
            raw[HEAD_R][0] * params.output_scale[0],
            raw[HEAD_R][1] * params.output_scale[1],
        ),
        penalties: PenaltyValues {
            p_o1: pen(raw[HEAD_O][0]),
            p_o2: pen(raw[HEAD_O][1]),
            p_l_fast: pen(raw[HEAD_L][0]),
            p_l_slow: pen(raw[HEAD_L][1]),
        },
    };
    (
        out,
        ForwardCache {
            input: z,
            trunk: t,
            hidden,
            raw,
        },
    )
}

pub fn forward(params: &NetworkParams, input: &[f64]) -> NetworkOutput {
    forward_cached(params, input).0
}

/// Loss gradients with respect to the network's outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OutputGradient {
    pub u_ref: [f64; 2],
    /// Order `(p_o1, p_o2, p_l_fast, p_l_slow)`.
    pub penalties: [f64; 4],
}

/// Accumulates parameter gradients into `grads` and returns the input gradient.
pub fn backward(
    params: &NetworkParams,
    cache: &ForwardCache,
    dout: &OutputGradient,
    grads: &mut NetworkParams,
) -> DVector<f64> {
    let mut draw = [[0.0; 2]; 3];
    draw[HEAD_R] = [
        dout.u_ref[0] * params.output_scale[0],
        dout.u_ref[1] * params.output_scale[1],
    ];
    for j in 0..2 {
        draw[HEAD_O][j] = dout.penalties[j] * sigmoid(cache.raw[HEAD_O][j]);
        draw[HEAD_L][j] = dout.penalties[2 + j] * sigmoid(cache.raw[HEAD_L][j]);
    }

    let mut dt = DVector::zeros(cache.trunk.len());
    for k in 0..3 {
        let h = &params.heads[k];
        let g = &mut grads.heads[k];
        let d2 = DVector::from_column_slice(&draw[k]);
        g.w2.ger(1.0, &d2, &cache.hidden[k], 1.0);
        g.b2 += &d2;
        let mut d1 = h.w2.tr_mul(&d2);
        d1.zip_apply(&cache.hidden[k], |d, a| {
            if a <= 0.0 {
                *d = 0.0
            }
        });
        g.w1.ger(1.0, &d1, &cache.trunk, 1.0);
        g.b1 += &d1;
        dt.gemv_tr(1.0, &h.w1, &d1, 1.0);
    }
    dt.zip_apply(&cache.trunk, |d, a| {
        if a <= 0.0 {
            *d = 0.0
        }
    });
    grads.w0.ger(1.0, &dt, &cache.input, 1.0);
    grads.b0 += &dt;
    params.w0.tr_mul(&dt)
}
