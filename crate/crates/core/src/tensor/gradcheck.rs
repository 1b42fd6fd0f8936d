//! Central finite-difference verification of tape gradients.
//!
//! The checker only ever evaluates the forward pass, so it is independent of
//! the VJP implementations it validates.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Max over all coordinates of `|analytic - central FD| / max(1, |analytic|)`
/// for a scalar function of several tensors.
pub fn grad_check_multi<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::config("grad_check requires h > 0"));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = f(&tape, &vars)?;
        let v = tape.scalar_value(out)?;
        if !v.is_finite() {
            return Err(Error::numeric("non-finite value in grad_check forward"));
        }
        Ok(v)
    };

    // Analytic gradients.
    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|t| tape.param(t)).collect();
    let out = f(&tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::shape("grad_check requires a scalar function"));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| grads.wrt_or_zeros(v, p.shape()))
        .collect();

    let mut worst = 0.0f64;
    let mut inputs: Vec<Tensor> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        for i in 0..point.numel() {
            let orig = point.data()[i];
            inputs[pi].data_mut()[i] = orig + h;
            let up = eval(&inputs)?;
            inputs[pi].data_mut()[i] = orig - h;
            let down = eval(&inputs)?;
            inputs[pi].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[i];
            if !fd.is_finite() {
                return Err(Error::numeric("non-finite finite-difference estimate"));
            }
            let rel = (a - fd).abs() / 1.0f64.max(a.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    grad_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn affine_is_exact() {
        // linear maps differentiate exactly; FD error only from roundoff
        let x = Tensor::new(vec![1, 3], vec![0.3, -0.7, 1.1]).unwrap();
        let err = grad_check(
            |tape, v| {
                let w = tape.constant(Tensor::from_rows(&[
                    vec![1.0, 2.0],
                    vec![-0.5, 0.25],
                    vec![3.0, -1.0],
                ])?);
                let b = tape.constant(Tensor::vector(vec![0.1, -0.2]));
                let y = tape.linear(v, w, b)?;
                let col = tape.reshape(y, vec![2, 1])?;
                let s = tape.mean_rows(col)?;
                tape.reshape(s, vec![])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "affine grad_check error {err}");
    }

    #[test]
    fn softmax_temperature_composite() {
        let mut rng = substream(17, "gradcheck", 0);
        let logits = Tensor::randn(vec![3, 5], &mut rng);
        let tau = Tensor::rand_uniform(vec![3], 0.5, 1.8, &mut rng);
        let weights = Tensor::randn(vec![3, 5], &mut rng);
        let err = grad_check_multi(
            |tape, vars| {
                let y = tape.softmax_with_temperature(vars[0], vars[1])?;
                let w = tape.row_dot(y, vars[2])?;
                let col = tape.reshape(w, vec![3, 1])?;
                let s = tape.mean_rows(col)?;
                tape.reshape(s, vec![])
            },
            &[logits, tau, weights],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "softmax_with_temperature grad error {err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(
            |tape, _v| Ok(tape.constant(Tensor::scalar(3.5))),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
