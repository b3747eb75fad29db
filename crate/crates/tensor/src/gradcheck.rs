//! Central finite differences, the independent oracle for [`Tensor::backward`].

use crate::error::{Result, TensorError};
use crate::ops::Conv2dSpec;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Central-difference gradient of scalar `f` at `x`:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` per element, in 64-bit.
pub fn finite_diff_grad<F, E>(f: F, x: &Tensor<f64>, h: f64) -> std::result::Result<Vec<f64>, E>
where
    F: Fn(&Tensor<f64>) -> std::result::Result<f64, E>,
    E: From<TensorError>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let base = x.to_vec();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::from_vec(plus, x.shape())?)?;
        let fm = f(&Tensor::from_vec(minus, x.shape())?)?;
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Central differences with respect to selected elements of trainable
/// tensors, perturbing them in place. `loss` must recompute from the
/// current values. Returns `(tensor index, element index, derivative)`.
pub fn finite_diff_params<F, E>(
    params: &[Tensor<f64>],
    elements: &[(usize, usize)],
    loss: F,
    h: f64,
) -> std::result::Result<Vec<f64>, E>
where
    F: Fn() -> std::result::Result<f64, E>,
{
    let mut out = Vec::with_capacity(elements.len());
    for &(pi, ei) in elements {
        let p = &params[pi];
        let orig = p.data()[ei];
        p.data_mut()[ei] = orig + h;
        let fp = loss();
        p.data_mut()[ei] = orig - h;
        let fm = loss();
        p.data_mut()[ei] = orig;
        out.push((fp? - fm?) / (2.0 * h));
    }
    Ok(out)
}

/// Largest element-wise relative error
/// `|a − n| / max(|a|, |n|, floor)`, where `floor` is `1e-3` times the
/// largest magnitude in either vector (and at least `1e-10`). The floor keeps
/// elements whose true gradient is essentially zero from dominating.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-10);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Step and per-op tolerance used by [`op_suite`].
pub const OP_STEP: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut RngState) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n).map(|_| rng.normal()).collect()
}

/// Worst relative error over all inputs of `sum(op(inputs) ⊙ r)`, with a
/// fixed random projection `r` so that every output element matters.
pub fn check_op<F>(shapes: &[&[usize]], seed: u64, op: F) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let mut rng = RngState::new(seed);
    let values: Vec<Vec<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let params = values
        .iter()
        .zip(shapes)
        .map(|(v, s)| Tensor::param(v.clone(), s))
        .collect::<Result<Vec<_>>>()?;
    let out = op(&params)?;
    let proj = Tensor::from_vec(random(out.shape(), &mut rng), out.shape())?;
    out.mul(&proj)?.sum_all()?.backward()?;

    let mut worst = 0.0f64;
    for (i, shape) in shapes.iter().enumerate() {
        let analytic = params[i]
            .grad()
            .unwrap_or_else(|| vec![0.0; params[i].numel()]);
        let x = Tensor::from_vec(values[i].clone(), shape)?;
        let numeric = finite_diff_grad(
            |xi| {
                let mut inputs = values
                    .iter()
                    .zip(shapes)
                    .map(|(v, s)| Tensor::from_vec(v.clone(), s))
                    .collect::<Result<Vec<_>>>()?;
                inputs[i] = xi.clone();
                Ok(op(&inputs)?.mul(&proj)?.sum_all()?.item())
            },
            &x,
            OP_STEP,
        )?;
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Every differentiable op at shapes of at most 4 per axis, checked in
/// 64-bit. Returns `(op name, worst relative error)`.
pub fn op_suite() -> Result<Vec<(&'static str, f64)>> {
    type Op = fn(&[Tensor<f64>]) -> Result<Tensor<f64>>;
    let cases: Vec<(&'static str, Vec<&[usize]>, u64, Op)> = vec![
        ("add", vec![&[2, 3], &[3]], 1, |t| t[0].add(&t[1])),
        ("sub", vec![&[2, 1, 3], &[4, 1]], 2, |t| t[0].sub(&t[1])),
        ("mul", vec![&[2, 3, 2], &[3, 1]], 3, |t| t[0].mul(&t[1])),
        ("div", vec![&[3, 2], &[2]], 4, |t| {
            t[0].div(&t[1].mul(&t[1])?.add_scalar(0.5)?)
        }),
        ("scalar", vec![&[4]], 5, |t| {
            t[0].mul_scalar(-1.5)?.add_scalar(2.0)
        }),
        ("exp", vec![&[3, 4]], 6, |t| t[0].exp()),
        ("ln", vec![&[3, 4]], 7, |t| {
            t[0].mul(&t[0])?.add_scalar(0.1)?.ln()
        }),
        ("powf", vec![&[2, 3]], 8, |t| {
            t[0].mul(&t[0])?.add_scalar(0.2)?.powf(2.5)
        }),
        ("sigmoid", vec![&[4, 4]], 9, |t| t[0].sigmoid()),
        ("relu", vec![&[4, 4]], 10, |t| t[0].relu()),
        ("gelu", vec![&[4, 4]], 11, |t| t[0].gelu()),
        ("reshape", vec![&[2, 6]], 12, |t| t[0].reshape(&[3, 4])),
        ("permute", vec![&[2, 3, 4]], 13, |t| {
            t[0].permute(&[1, 2, 0])
        }),
        ("pad", vec![&[2, 3]], 14, |t| t[0].pad(&[(1, 2), (0, 1)])),
        ("narrow", vec![&[3, 4]], 15, |t| t[0].narrow(1, 1, 2)),
        ("take", vec![&[3, 4]], 41, |t| t[0].take(&[0, 5, 5, 11, 2])),
        ("concat", vec![&[2, 1, 3], &[2, 2, 3]], 16, |t| {
            Tensor::concat(&[&t[0], &t[1]], 1)
        }),
        ("sum_trailing", vec![&[2, 3, 4]], 17, |t| {
            t[0].sum_trailing(1)
        }),
        ("mean_all", vec![&[3, 3]], 18, |t| t[0].mean_all()),
        ("matmul", vec![&[3, 4], &[4, 2]], 19, |t| t[0].matmul(&t[1])),
        ("batched matmul", vec![&[2, 3, 4], &[2, 4, 2]], 20, |t| {
            t[0].matmul(&t[1])
        }),
        ("linear", vec![&[2, 3, 4], &[4, 3], &[3]], 21, |t| {
            t[0].linear(&t[1], Some(&t[2]))
        }),
        (
            "conv2d",
            vec![&[2, 2, 4, 4], &[3, 2, 3, 3], &[3]],
            22,
            |t| t[0].conv2d(&t[1], Some(&t[2]), Conv2dSpec::new(1, 1, 1)),
        ),
        (
            "strided conv2d",
            vec![&[1, 2, 4, 4], &[2, 2, 2, 2], &[2]],
            23,
            |t| t[0].conv2d(&t[1], Some(&t[2]), Conv2dSpec::new(2, 0, 1)),
        ),
        (
            "depthwise conv2d",
            vec![&[1, 4, 3, 4], &[4, 1, 3, 3], &[4]],
            24,
            |t| t[0].conv2d(&t[1], Some(&t[2]), Conv2dSpec::new(1, 1, 4)),
        ),
        ("softmax", vec![&[3, 4]], 25, |t| t[0].softmax_lastdim()),
        ("log_softmax", vec![&[3, 4]], 26, |t| {
            t[0].log_softmax_lastdim()
        }),
        ("layer_norm", vec![&[3, 4], &[4], &[4]], 27, |t| {
            t[0].layer_norm(&t[1], &t[2], 1e-5)
        }),
        ("bilinear up", vec![&[1, 2, 2, 3]], 28, |t| {
            t[0].bilinear_resize(4, 4)
        }),
        ("bilinear down", vec![&[1, 1, 4, 4]], 29, |t| {
            t[0].bilinear_resize(3, 2)
        }),
        ("global_avg_pool", vec![&[2, 3, 2, 4]], 30, |t| {
            t[0].global_avg_pool()
        }),
    ];
    cases
        .into_iter()
        .map(|(name, shapes, seed, op)| Ok((name, check_op(&shapes, seed, op)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::from_vec(vec![0.3, -1.0, 2.0], &[3]).unwrap();
        let g = finite_diff_grad(|t| Ok::<_, TensorError>(t.sum_all()?.item()), &x, 1e-4).unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn product_rule() {
        let x = Tensor::from_vec(vec![2.0, 3.0], &[2]).unwrap();
        let g = finite_diff_grad(
            |t| {
                let d = t.data();
                Ok::<_, TensorError>(d[0] * d[1])
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!((g[0] - 3.0).abs() < 1e-9 && (g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(max_relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!(max_relative_error(&[1.0, 1e-9], &[1.0, 0.0]) < 1e-5);
        assert!(max_relative_error(&[1.0], &[1.1]) > 0.05);
    }
}
