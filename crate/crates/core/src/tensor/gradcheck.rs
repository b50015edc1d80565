use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference check of `f` against backprop at every coordinate of
/// `x`. Returns the max relative error, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
///
/// `x` must be a trainable leaf; its values are perturbed in place and
/// restored afterwards.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, eps, &all)
}

/// Like [`grad_check`] but only over `coords`, for large parameters.
pub fn grad_check_sampled<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_at(f, x, eps, coords)
}

/// Like [`grad_check`], but each coordinate is compared against central
/// differences at every step in `steps` and keeps its smallest error.
///
/// Small steps lose coordinates whose gradient sits near the `1e-8` floor to
/// roundoff; large steps lose strongly curved ones to truncation. A wrong
/// backward rule is off at every step, so it still shows.
pub fn grad_check_steps<F>(f: F, x: &Tensor, steps: &[f64]) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    check_coords(f, x, steps, &all)
}

fn grad_check_at<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    check_coords(f, x, &[eps], coords)
}

fn check_coords<F>(f: F, x: &Tensor, steps: &[f64], coords: &[usize]) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !x.requires_grad() {
        return Err(Error::InvalidShape {
            op: "grad_check",
            msg: "input is not a trainable leaf".into(),
        });
    }
    if steps.is_empty() {
        return Err(Error::InvalidShape {
            op: "grad_check",
            msg: "no finite-difference step given".into(),
        });
    }
    x.zero_grad();
    let y = f(x)?;
    if y.numel() != 1 {
        return Err(Error::NotScalar {
            op: "grad_check",
            shape: y.shape().to_vec(),
        });
    }
    y.backward()?;
    drop(y);
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    x.zero_grad();

    let mut worst = 0.0f64;
    for &i in coords {
        let orig = x.data()[i];
        let a = analytic[i];
        let mut best = f64::INFINITY;
        for &eps in steps {
            x.data_mut()[i] = orig + eps;
            let plus = f(x)?.item();
            x.data_mut()[i] = orig - eps;
            let minus = f(x)?.item();
            x.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            best = best.min(rel);
        }
        worst = worst.max(best);
    }
    Ok(worst)
}
