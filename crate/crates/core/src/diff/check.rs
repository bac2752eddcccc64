//! Central finite-difference oracles for checking recorded gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error with the floor used throughout the gradient checks.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn perturbed(x: &Tensor, i: usize, delta: f64) -> Result<Tensor> {
    let mut data = x.data().to_vec();
    data[i] += delta;
    Tensor::new(x.shape().to_vec(), data)
}

fn eval_scalar<F>(f: &F, x: Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.variable(x);
    let out = f(&mut g, v)?;
    g.scalar(out)
}

/// Central differences of the scalar function built by `f`, one entry per
/// component of `x`.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, epsilon: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    (0..x.numel())
        .map(|i| {
            let hi = eval_scalar(f, perturbed(x, i, epsilon)?)?;
            let lo = eval_scalar(f, perturbed(x, i, -epsilon)?)?;
            Ok((hi - lo) / (2.0 * epsilon))
        })
        .collect()
}

/// Max relative error between the recorded gradient of `f` at `x` and
/// central finite differences with step `epsilon`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let out = f(&mut g, v)?;
    let grad = g.gradient(out, &[v])?[0];
    let analytic = g.value(grad).data().to_vec();
    let numeric = numeric_gradient(&f, x, epsilon)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| relative_error(*a, *b))
        .fold(0.0, f64::max))
}

fn gradient_at<F>(f: &F, x: Tensor) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.variable(x);
    let out = f(&mut g, v)?;
    let grad = g.gradient(out, &[v])?[0];
    Ok(g.value(grad).data().to_vec())
}

/// Max relative error between the Hessian obtained by differentiating the
/// recorded gradient a second time and central differences of the gradient.
pub fn second_order_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let n = x.numel();
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let out = f(&mut g, v)?;
    let grad = g.gradient(out, &[v])?[0];
    let grad = g.reshape(grad, &[n])?;
    let mut hessian = Vec::with_capacity(n * n);
    for row in 0..n {
        let component = g.slice(grad, row, 1)?;
        let component = g.sum(component)?;
        let h = g.gradient(component, &[v])?[0];
        hessian.extend_from_slice(g.value(h).data());
    }

    let mut worst: f64 = 0.0;
    for col in 0..n {
        let hi = gradient_at(&f, perturbed(x, col, epsilon)?)?;
        let lo = gradient_at(&f, perturbed(x, col, -epsilon)?)?;
        for row in 0..n {
            let numeric = (hi[row] - lo[row]) / (2.0 * epsilon);
            worst = worst.max(relative_error(hessian[row * n + col], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_exact() {
        let x = Tensor::vector(vec![3.0]).unwrap();
        let err = finite_difference_check(
            |g, v| {
                let s = g.square(v)?;
                g.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn sum_exp() {
        let x = Tensor::vector(vec![0.0, 1.0]).unwrap();
        let err = finite_difference_check(
            |g, v| {
                let e = g.exp(v)?;
                g.sum(e)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![0.3, -2.0]).unwrap();
        let err = finite_difference_check(
            |g, _| g.constant(Tensor::scalar(4.0).unwrap()).pipe(Ok),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_nonpositive_epsilon() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(finite_difference_check(|g, v| g.sum(v), &x, 0.0).is_err());
    }

    #[test]
    fn hessian_of_sin_product() {
        let x = Tensor::vector(vec![0.4, -1.1, 0.7]).unwrap();
        let err = second_order_check(
            |g, v| {
                let s = g.sin(v)?;
                let p = g.mul(s, v)?;
                let q = g.square(p)?;
                g.sum(q)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    trait Pipe: Sized {
        fn pipe<R>(self, f: impl FnOnce(Self) -> R) -> R {
            f(self)
        }
    }
    impl<T> Pipe for T {}
}
