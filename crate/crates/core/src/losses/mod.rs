//! Training objective: squared-error reconstruction, the adversarial pair
//! with its adaptive weight, the gradient-difference penalty, and the
//! pretrain / fine-tune combinations.
//!
//! Tape-level functions (`*_on`) build differentiable graphs; the plain
//! functions evaluate the same formulas on tensors.

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tape, Tensor, Var};

/// Denominator regularizer of the adaptive weight.
pub const LAMBDA_DELTA: f64 = 1e-6;
/// Upper clamp of the adaptive weight.
pub const LAMBDA_MAX: f64 = 1e4;
/// Default gradient-difference exponent.
pub const GDL_GAMMA: u32 = 1;

/// Which losses the adaptive weight multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaScope {
    /// Only the generator's adversarial term; the discriminator trains unscaled.
    #[default]
    GeneratorOnly,
    /// Both the generator term and the discriminator's own loss.
    Both,
}

impl std::str::FromStr for LambdaScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generator" => Ok(LambdaScope::GeneratorOnly),
            "both" => Ok(LambdaScope::Both),
            _ => Err(Error::Config(format!("lambda scope must be generator|both, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            _ => Err(Error::Config(format!("phase must be pretrain|finetune, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

/// Loss values of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub rec: f64,
    /// Unscaled generator adversarial term.
    pub gan_g: f64,
    pub gan_d: f64,
    pub gdl: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.rec, self.gan_g, self.gan_d, self.gdl, self.lambda, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared error.
pub fn rec_loss<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    same_shape("rec_loss", y, y_hat)?;
    let s: f64 = y
        .data()
        .iter()
        .zip(y_hat.data())
        .map(|(&a, &b)| (a - b).as_f64().powi(2))
        .sum();
    Ok(s / y.len() as f64)
}

pub fn rec_loss_on<T: Scalar>(tape: &mut Tape<T>, y: Var, y_hat: Var) -> Result<Var> {
    let d = tape.sub(y, y_hat)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Stable `ln σ(x)`.
fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// `(generator term, discriminator term)` from real and fake logit maps.
/// `g = -mean ln σ(fake)`, scaled by `lambda`;
/// `d = -mean ln σ(real) - mean ln σ(-fake)`, scaled by `lambda` only under
/// [`LambdaScope::Both`].
pub fn gan_loss<T: Scalar>(
    d_real: &Tensor<T>,
    d_fake: &Tensor<T>,
    lambda: f64,
    scope: LambdaScope,
) -> (f64, f64) {
    let mean = |t: &Tensor<T>, sign: f64| t.data().iter().map(|&v| log_sigmoid(sign * v.as_f64())).sum::<f64>() / t.len() as f64;
    let g = -mean(d_fake, 1.0);
    let d = -mean(d_real, 1.0) - mean(d_fake, -1.0);
    let d_scale = match scope {
        LambdaScope::GeneratorOnly => 1.0,
        LambdaScope::Both => lambda,
    };
    (lambda * g, d_scale * d)
}

pub fn generator_adv_on<T: Scalar>(tape: &mut Tape<T>, fake_logits: Var) -> Var {
    let ls = tape.log_sigmoid(fake_logits);
    let m = tape.mean(ls);
    tape.scale(m, -T::one())
}

pub fn discriminator_loss_on<T: Scalar>(tape: &mut Tape<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let lr = tape.log_sigmoid(real_logits);
    let mr = tape.mean(lr);
    let neg = tape.scale(fake_logits, -T::one());
    let lf = tape.log_sigmoid(neg);
    let mf = tape.mean(lf);
    let s = tape.add(mr, mf)?;
    Ok(tape.scale(s, -T::one()))
}

/// `grad_rec_norm / (grad_gan_norm + delta)`, clamped to `[0, LAMBDA_MAX]`.
pub fn adaptive_lambda(grad_rec_norm: f64, grad_gan_norm: f64, delta: f64) -> f64 {
    let l = grad_rec_norm / (grad_gan_norm + delta);
    if l.is_nan() {
        0.0
    } else {
        l.clamp(0.0, LAMBDA_MAX)
    }
}

/// Number of neighbour pairs the gradient-difference sum runs over.
pub fn gdl_pair_count(shape: &[usize]) -> usize {
    let r = shape.len();
    if r < 2 {
        return 0;
    }
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let planes: usize = shape[..r - 2].iter().product();
    planes * ((h - 1) * w + h * (w - 1))
}

/// `Σ | |∇y| - |∇ŷ| |^gamma` over vertical and horizontal forward
/// differences of the two trailing axes.
pub fn gdl<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>, gamma: u32) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(y.clone());
    let b = tape.constant(y_hat.clone());
    let g = tape.gdl(a, b, gamma)?;
    Ok(tape.value(g).item().as_f64())
}

pub fn gdl_on<T: Scalar>(tape: &mut Tape<T>, y: Var, y_hat: Var, gamma: u32) -> Result<Var> {
    tape.gdl(y, y_hat, gamma)
}

/// Gradient-difference penalty divided by its pair count, so it sits on the
/// same per-element scale as the reconstruction mean.
pub fn gdl_mean_on<T: Scalar>(tape: &mut Tape<T>, y: Var, y_hat: Var, gamma: u32) -> Result<Var> {
    let n = gdl_pair_count(tape.shape(y)).max(1);
    let s = tape.gdl(y, y_hat, gamma)?;
    Ok(tape.scale(s, lit(1.0 / n as f64)))
}

/// Inputs to the combined objectives. `gan_g` is unscaled.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub rec: f64,
    pub gan_g: f64,
    pub gdl: f64,
    pub lambda: f64,
}

/// `rec + λ·gan_g`
pub fn combined_pretrain(p: &LossParts) -> f64 {
    p.rec + p.lambda * p.gan_g
}

/// `rec + λ·gan_g + gdl`
pub fn combined_finetune(p: &LossParts) -> f64 {
    combined_pretrain(p) + p.gdl
}

pub fn combined(phase: Phase, p: &LossParts) -> f64 {
    match phase {
        Phase::Pretrain => combined_pretrain(p),
        Phase::Finetune => combined_finetune(p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn rec_examples() {
        let y = t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(rec_loss(&y, &y).unwrap(), 0.0);
        assert_eq!(rec_loss(&Tensor::<f64>::zeros(&[3, 4]), &Tensor::ones(&[3, 4])).unwrap(), 1.0);
        assert!(rec_loss(&y, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn rec_on_tape_matches_plain() {
        let y = t(&[3], &[1.0, 2.0, 3.0]);
        let h = t(&[3], &[0.0, 2.5, 5.0]);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(y.clone()), tape.constant(h.clone()));
        let l = rec_loss_on(&mut tape, a, b).unwrap();
        assert!((tape.value(l).item() - rec_loss(&y, &h).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn gan_half_probability() {
        let z = Tensor::<f64>::zeros(&[2, 2]);
        let (g, d) = gan_loss(&z, &z, 1.0, LambdaScope::GeneratorOnly);
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g - 2f64.ln()).abs() < 1e-12);
        let (g0, d0) = gan_loss(&z, &z, 0.0, LambdaScope::GeneratorOnly);
        assert_eq!(g0, 0.0);
        assert_eq!(d0, d);
        let (_, d_both) = gan_loss(&z, &z, 0.5, LambdaScope::Both);
        assert!((d_both - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gan_extremes_stay_finite() {
        let real = t(&[1], &[50.0]);
        let fake = t(&[1], &[-50.0]);
        let (g, d) = gan_loss(&real, &fake, 1.0, LambdaScope::GeneratorOnly);
        assert!(d.is_finite() && d < 1e-20);
        assert!(g.is_finite() && (g - 50.0).abs() < 1e-9);
        let (g, d) = gan_loss(&fake, &real, 1.0, LambdaScope::GeneratorOnly);
        assert!(g.is_finite() && d.is_finite());
    }

    #[test]
    fn tape_gan_terms_match_plain() {
        let real = t(&[2, 2], &[0.3, -1.2, 2.0, 0.0]);
        let fake = t(&[2, 2], &[-0.5, 0.7, 1.5, -3.0]);
        let (g, d) = gan_loss(&real, &fake, 1.0, LambdaScope::GeneratorOnly);
        let mut tape = Tape::new();
        let (r, f) = (tape.constant(real), tape.constant(fake));
        let gv = generator_adv_on(&mut tape, f);
        let dv = discriminator_loss_on(&mut tape, r, f).unwrap();
        assert!((tape.value(gv).item() - g).abs() < 1e-12);
        assert!((tape.value(dv).item() - d).abs() < 1e-12);
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(adaptive_lambda(0.0, 3.0, LAMBDA_DELTA), 0.0);
        assert!((adaptive_lambda(5.0, 5.0, LAMBDA_DELTA) - 1.0).abs() < 1e-6);
        assert!((adaptive_lambda(2e-6, 0.0, 1e-6) - 2.0).abs() < 1e-12);
        assert_eq!(adaptive_lambda(1.0, 0.0, 1e-6), LAMBDA_MAX);
    }

    #[test]
    fn gdl_examples() {
        let y = t(&[2, 2], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(gdl(&y, &y, 1).unwrap(), 0.0);
        let a = Tensor::<f64>::full(&[3, 3], 0.2);
        let b = Tensor::<f64>::full(&[3, 3], 0.9);
        assert_eq!(gdl(&a, &b, 1).unwrap(), 0.0);
        // 4x4 horizontal step edge of height 0.5 between columns 1 and 2
        let step = Tensor::<f64>::from_fn(&[4, 4], |i| if i % 4 >= 2 { 0.5 } else { 0.0 });
        let flat = Tensor::<f64>::zeros(&[4, 4]);
        assert!((gdl(&step, &flat, 1).unwrap() - 0.5 * 4.0).abs() < 1e-15);
        assert_eq!(gdl_pair_count(&[3, 4, 4]), 3 * 24);
    }

    #[test]
    fn combined_examples() {
        let p = LossParts {
            rec: 0.3,
            gan_g: 0.7,
            gdl: 0.11,
            lambda: 2.0,
        };
        assert!((combined_pretrain(&p) - 1.7).abs() < 1e-15);
        assert!((combined_finetune(&p) - combined_pretrain(&p) - p.gdl).abs() < 1e-15);
        assert_eq!(combined_finetune(&LossParts::default()), 0.0);
    }
}
