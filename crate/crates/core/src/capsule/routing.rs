//! Routing-by-agreement between a layer of child capsules and a layer of
//! parent capsules, recorded on the tape so the unrolled loop is
//! differentiable end to end.
//!
//! Tensors carry a leading location axis `L`: predictions are
//! `[L, I, J, D]`, coupling logits `[L, I, J]`, parent outputs `[L, J, D]`.
//! Every location routes independently. Rank-3 predictions `[I, J, D]` are
//! accepted as a single location.

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tape, Tensor, Var};

/// Regularizer inside the squash norm, keeping `squash(0) = 0` with a
/// finite gradient.
pub const SQUASH_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingOptions {
    /// Number of routing iterations (`alpha`).
    pub iterations: usize,
    /// Compute the agreement update from detached predictions and outputs,
    /// so coupling coefficients act as constants in the backward pass.
    pub detach_coupling: bool,
    pub squash_eps: f64,
}

impl RoutingOptions {
    pub fn new(iterations: usize) -> Self {
        RoutingOptions {
            iterations,
            detach_coupling: false,
            squash_eps: SQUASH_EPS,
        }
    }
}

/// Tape handles for one routing iteration: the logits it started from and
/// the coupling, pre-squash sum and output it produced.
#[derive(Debug, Clone, Copy)]
pub struct RoutingStep {
    pub logits: Var,
    pub coupling: Var,
    pub s: Var,
    pub v: Var,
}

#[derive(Debug, Clone)]
pub struct Routed {
    /// Parent outputs, `[L, J, D]` (or `[J, D]` for rank-3 input).
    pub v: Var,
    pub steps: Vec<RoutingStep>,
}

/// Prediction vectors `û[l, i, j] = u[l, i] W[i, j]`.
pub fn predict<T: Scalar>(tape: &mut Tape<T>, u: Var, w: Var) -> Result<Var> {
    tape.capsule_predict(u, w)
}

/// Coupling coefficients: softmax of the logits over the parent axis.
pub fn coupling<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    let rank = tape.shape(logits).len();
    if rank < 2 {
        return Err(Error::dim("coupling", format!("{:?}", tape.shape(logits))));
    }
    tape.softmax(logits, rank - 1)
}

pub fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, c: Var, u_hat: Var) -> Result<Var> {
    tape.weighted_sum(c, u_hat)
}

pub fn squash<T: Scalar>(tape: &mut Tape<T>, s: Var, eps: f64) -> Result<Var> {
    tape.squash(s, lit(eps))
}

/// Squash of a single vector, outside any tape.
pub fn squash_vector<T: Scalar>(s: &[T]) -> Vec<T> {
    let q: T = s.iter().map(|&v| v * v).sum();
    let f = crate::tensor::tape_squash_factor(q, lit(SQUASH_EPS));
    s.iter().map(|&v| v * f).collect()
}

/// Runs `options.iterations` rounds of routing-by-agreement:
/// `b = 0`; repeat { `c = softmax_j(b)`; `s_j = Σ_i c_ij û_ij`;
/// `v_j = squash(s_j)`; `b_ij += <v_j, û_ij>` } and returns the last `v`.
pub fn route<T: Scalar>(tape: &mut Tape<T>, u_hat: Var, options: &RoutingOptions) -> Result<Routed> {
    if options.iterations == 0 {
        return Err(Error::Contract("routing needs at least one iteration".into()));
    }
    let shape = tape.shape(u_hat).to_vec();
    let (u_hat, single) = match shape.len() {
        3 => (tape.reshape(u_hat, &[1, shape[0], shape[1], shape[2]])?, true),
        4 => (u_hat, false),
        _ => return Err(Error::dim("route", format!("predictions {shape:?}"))),
    };
    let s4 = tape.shape(u_hat).to_vec();
    let (l, ni, nj) = (s4[0], s4[1], s4[2]);

    // Agreement is computed against these; detached copies stop gradients
    // through the coupling path.
    let agree_src = if options.detach_coupling { tape.detach(u_hat) } else { u_hat };

    let mut logits = tape.constant(Tensor::zeros(&[l, ni, nj]));
    let mut steps = Vec::with_capacity(options.iterations);
    for _ in 0..options.iterations {
        let c = coupling(tape, logits)?;
        let s = weighted_sum(tape, c, u_hat)?;
        let v = squash(tape, s, options.squash_eps)?;
        steps.push(RoutingStep { logits, coupling: c, s, v });
        let v_agree = if options.detach_coupling { tape.detach(v) } else { v };
        let a = tape.agreement(v_agree, agree_src)?;
        logits = tape.add(logits, a)?;
    }
    let mut v = steps.last().unwrap().v;
    if single {
        v = tape.reshape(v, &[nj, s4[3]])?;
    }
    Ok(Routed { v, steps })
}
