//! Finite-difference verification runs over the routing procedure and the
//! full generator, in 64-bit arithmetic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capsule::{route, RoutingOptions};
use crate::error::{Error, Result};
use crate::generator::GeneratorModel;
use crate::pipeline::ModelPreset;
use crate::tensor::{finite_diff_check_coords, GradCheckReport, Tape, Tensor, Var};

pub const ROUTE_TOLERANCE: f64 = 1e-4;
pub const GENERATOR_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

/// Shape of a routing problem: `beta` children and parents, `d_a`-digit
/// predictions, `alpha` iterations.
#[derive(Debug, Clone, Copy)]
pub struct RouteProblem {
    pub beta: usize,
    pub d_a: usize,
    pub alpha: usize,
}

/// Gradient of `<r, route(û)>` with respect to every coordinate of û, for
/// random û and random readout weights `r`.
pub fn check_route(problem: RouteProblem, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let RouteProblem { beta, d_a, alpha } = problem;
    let u_hat = Tensor::<f64>::randn(&[beta, beta, d_a], 0.5, &mut rng);
    let readout = Tensor::<f64>::randn(&[beta, d_a], 1.0, &mut rng);
    let opts = RoutingOptions::new(alpha);
    let f = |tape: &mut Tape<f64>, u: Var| -> Result<Var> {
        let r = route(tape, u, &opts)?;
        let w = tape.constant(readout.clone());
        let prod = tape.mul(r.v, w)?;
        Ok(tape.sum(prod))
    };
    let coords: Vec<usize> = (0..u_hat.len()).collect();
    Ok(CheckOutcome {
        name: format!("route beta={beta} d_a={d_a} alpha={alpha}"),
        report: finite_diff_check_coords(f, &u_hat, 1e-6, &coords)?,
        tolerance: ROUTE_TOLERANCE,
    })
}

/// Gradient of `sum generate(y)` with respect to one encoder weight tensor,
/// on at most `max_coords` evenly spaced coordinates.
pub fn check_generator(model: &GeneratorModel<f64>, probe: &str, seed: u64, max_coords: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = Tensor::<f64>::rand_uniform(&model.config.image_shape(), 0.0, 1.0, &mut rng);
    let id = model
        .encoder
        .params
        .find(probe)
        .ok_or_else(|| Error::Config(format!("no parameter named {probe:?}")))?;
    let weights = model.encoder.params.get(id).clone();
    let f = |tape: &mut Tape<f64>, w: Var| -> Result<Var> {
        let mut b = model.bind(tape, false);
        b.encoder.replace(id, w);
        let x = tape.constant(y.clone());
        let pass = model.forward(tape, &b, x)?;
        Ok(tape.sum(pass.y_hat))
    };
    let stride = weights.len().div_ceil(max_coords.max(1)).max(1);
    let coords: Vec<usize> = (0..weights.len()).step_by(stride).collect();
    Ok(CheckOutcome {
        name: format!("generate d/d {probe}"),
        report: finite_diff_check_coords(f, &weights, 1e-5, &coords)?,
        tolerance: GENERATOR_TOLERANCE,
    })
}

/// The routing check at the preset's capsule sizes plus an end-to-end
/// probe-weight check. The paper preset is checked with its block widths
/// divided by 16 to keep the run short.
pub fn gradcheck_suite(preset: ModelPreset, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut config = preset.generator();
    if preset == ModelPreset::Paper {
        config = config.narrowed(16);
    }
    let (beta, d_a, alpha) = match &config.quantizer {
        crate::generator::QuantizerKind::Capsule(c) => (c.beta, c.d_a, c.alpha),
        crate::generator::QuantizerKind::Codebook { .. } => (4, 8, 3),
    };
    let mut out = vec![check_route(RouteProblem { beta, d_a, alpha }, seed)?];
    let model = GeneratorModel::<f64>::new(config, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let coords = if preset == ModelPreset::Paper { 6 } else { 48 };
    out.push(check_generator(&model, "encoder.block0.resnet.conv1.weight", seed + 1, coords)?);
    Ok(out)
}
