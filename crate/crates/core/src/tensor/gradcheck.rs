//! Central finite-difference gradient checking in 64-bit precision.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error used throughout: `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares `analytic[i]` against `(f(x + h e_i) - f(x - h e_i)) / 2h` for each
/// coordinate in `coords`; returns the largest relative error.
pub fn check_coordinates(
    analytic: &[f64],
    coords: &[usize],
    base: &Tensor<f64>,
    step: f64,
    mut eval: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut probe = base.clone();
    for &i in coords {
        let x0 = base.data()[i];
        probe.data_mut()[i] = x0 + step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = x0 - step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = x0;
        let numeric = (fp - fm) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if !err.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite gradient check at coordinate {i}"
            )));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

fn scalar_output(g: &Graph<f64>, y: Var) -> Result<f64> {
    let v = g.value(y);
    if v.len() != 1 {
        return Err(Error::contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Max relative error between the reverse-mode gradient of a scalar function
/// and central differences, over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, step, &coords)
}

/// As [`grad_check`], restricted to the listed coordinates.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let g = Graph::new();
    let xv = g.variable(x.clone());
    let y = f(&g, xv)?;
    scalar_output(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    check_coordinates(&analytic, coords, x, step, |probe| {
        let g = Graph::new();
        let xv = g.variable(probe.clone());
        let y = f(&g, xv)?;
        scalar_output(&g, y)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let err = grad_check(|g, x| Ok(g.sum(g.square(x))), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn l1_away_from_kink() {
        let x = Tensor::from_f64(&[4], &[0.5, -0.7, 1.3, -2.0]).unwrap();
        let err = grad_check(|g, x| Ok(g.mean(g.abs(x))), &x, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_scalar_output_is_a_contract_error() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let r = grad_check(|g, x| Ok(g.square(x)), &x, 1e-5);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
