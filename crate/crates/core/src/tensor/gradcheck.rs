use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error so that coordinates whose true
/// gradient is (numerically) zero are judged on absolute error.
const REL_FLOOR: f64 = 1e-6;

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks every coordinate of `x`. See [`finite_diff_check_coords`].
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_coords(f, x, eps, &coords)
}

/// Compares `d f / d x` from the tape with `(f(x + eps e) - f(x - eps e)) / (2 eps)`
/// on the listed flat coordinates. `f` must build a scalar from the leaf it
/// is given; it is re-run twice per coordinate.
pub fn finite_diff_check_coords<F>(f: F, x: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |point: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.constant(point.clone());
        let out = f(&mut tape, leaf)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Contract(format!("gradient check needs a scalar function, got {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf)?;
    let analytic = tape.backward(out)?.wrt(leaf);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    let mut probe = x.clone();
    for &i in coords {
        if i >= x.len() {
            return Err(Error::Contract(format!("coordinate {i} outside tensor of {} values", x.len())));
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.max_abs_error = report.max_abs_error.max(abs);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_is_exact_to_roundoff() {
        let x = Tensor::from_f64(&[4], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let r = finite_diff_check(
            |t, x| {
                let s = t.square(x);
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let r = finite_diff_check(
            |t, _| Ok(t.constant(Tensor::scalar(7.0))),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.max_abs_error, 0.0);
    }

    #[test]
    fn conv_softmax_sum_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[2, 5, 5], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let proj = Tensor::<f64>::randn(&[3, 5, 5], 1.0, &mut rng);
        let r = finite_diff_check(
            |t, x| {
                let w = t.constant(w.clone());
                let y = t.conv2d(x, w, 1, 1)?;
                let s = t.softmax(y, 0)?;
                let p = t.constant(proj.clone());
                let m = t.mul(s, p)?;
                Ok(t.sum(m))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
