//! Element-wise arithmetic with right-aligned broadcasting, and the
//! activation functions.

use crate::element::Real;
use crate::error::{shape_err, Result};
use crate::tensor::{numel, strides, Tensor};

/// Broadcast result shape of `a` and `b`, aligning trailing dimensions.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n {
            a[i + a.len() - n]
        } else {
            1
        };
        let db = if i + b.len() >= n {
            b[i + b.len() - n]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// For each element of `out_shape`, the flat index of the element of an
/// input of `in_shape` that broadcasts onto it.
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; n];
    for i in 0..in_shape.len() {
        let o = n - in_shape.len() + i;
        if in_shape[i] != 1 {
            eff[o] = in_strides[i];
        }
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut cur = 0usize;
    for _ in 0..total {
        map.push(cur);
        for d in (0..n).rev() {
            idx[d] += 1;
            cur += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Real>(self, x: T, y: T) -> T {
        match self {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        }
    }
}

fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: BinOp) -> Result<Tensor<T>> {
    let name = op.name();
    let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
    let same = a.shape() == b.shape();
    let (ma, mb) = if same {
        (None, None)
    } else {
        (
            (a.shape() != out_shape.as_slice()).then(|| broadcast_map(&out_shape, a.shape())),
            (b.shape() != out_shape.as_slice()).then(|| broadcast_map(&out_shape, b.shape())),
        )
    };
    let data = {
        let (da, db) = (a.data(), b.data());
        let n = numel(&out_shape);
        (0..n)
            .map(|i| {
                let x = da[ma.as_ref().map_or(i, |m| m[i])];
                let y = db[mb.as_ref().map_or(i, |m| m[i])];
                op.apply(x, y)
            })
            .collect()
    };
    let (pa, pb) = (a.clone(), b.clone());
    let (na, nb) = (a.numel(), b.numel());
    let (ta, tb) = (a.tracks_grad(), b.tracks_grad());
    Tensor::from_op(
        name,
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            let ia = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
            let ib = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
            let mut ga = ta.then(|| vec![T::zero(); na]);
            let mut gb = tb.then(|| vec![T::zero(); nb]);
            match op {
                BinOp::Add | BinOp::Sub => {
                    let sign = if matches!(op, BinOp::Sub) {
                        -T::one()
                    } else {
                        T::one()
                    };
                    for (i, &gi) in g.iter().enumerate() {
                        if let Some(ga) = ga.as_mut() {
                            ga[ia(i)] += gi;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[ib(i)] += sign * gi;
                        }
                    }
                }
                BinOp::Mul => {
                    let (da, db) = (pa.data(), pb.data());
                    for (i, &gi) in g.iter().enumerate() {
                        let (x, y) = (da[ia(i)], db[ib(i)]);
                        if let Some(ga) = ga.as_mut() {
                            ga[ia(i)] += gi * y;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[ib(i)] += gi * x;
                        }
                    }
                }
                BinOp::Div => {
                    let (da, db) = (pa.data(), pb.data());
                    for (i, &gi) in g.iter().enumerate() {
                        let (x, y) = (da[ia(i)], db[ib(i)]);
                        if let Some(ga) = ga.as_mut() {
                            ga[ia(i)] += gi / y;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[ib(i)] -= gi * x / (y * y);
                        }
                    }
                }
            }
            vec![ga, gb]
        }),
    )
}

/// Element-wise unary map with derivative `df(x, y)` where `y = f(x)`.
fn unary<T: Real>(
    x: &Tensor<T>,
    name: &'static str,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + Send + Sync + 'static,
) -> Result<Tensor<T>> {
    let data: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    let px = x.clone();
    Tensor::from_op(
        name,
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, out| {
            let dx = px.data();
            let grad = g
                .iter()
                .zip(dx.iter().zip(out))
                .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                .collect();
            vec![Some(grad)]
        }),
    )
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation:
/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Derivative of [`gelu_scalar`].
pub fn gelu_derivative(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<T: Real> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Div)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::of(c);
        unary(self, "add_scalar", move |v| v + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::of(c);
        unary(self, "mul_scalar", move |v| v * c, move |_, _| c)
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.mul_scalar(-1.0)
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        unary(self, "exp", |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Result<Tensor<T>> {
        unary(self, "ln", |v| v.ln(), |x, _| x.recip())
    }

    /// `x^p`; for non-integer `p` the input must be non-negative.
    pub fn powf(&self, p: f64) -> Result<Tensor<T>> {
        let pt = T::of(p);
        unary(
            self,
            "powf",
            move |v| v.powf(pt),
            move |x, _| {
                if p == 0.0 {
                    T::zero()
                } else {
                    pt * x.powf(pt - T::one())
                }
            },
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        unary(
            self,
            "sigmoid",
            |v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        unary(
            self,
            "relu",
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// GELU with the tanh approximation (see [`gelu_scalar`]).
    pub fn gelu(&self) -> Result<Tensor<T>> {
        unary(
            self,
            "gelu",
            |v| T::of(gelu_scalar(v.as_f64())),
            |x, _| T::of(gelu_derivative(x.as_f64())),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(
            broadcast_shape("t", &[2, 3, 4], &[4]).unwrap(),
            vec![2, 3, 4]
        );
        assert_eq!(
            broadcast_shape("t", &[2, 1, 4], &[3, 1]).unwrap(),
            vec![2, 3, 4]
        );
        assert!(broadcast_shape("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn channel_gate_broadcast() {
        // [1,2,2,2] * [1,2,1,1]
        let x = Tensor::<f64>::from_vec((0..8).map(f64::from).collect(), &[1, 2, 2, 2]).unwrap();
        let g = Tensor::<f64>::from_vec(vec![10.0, 100.0], &[1, 2, 1, 1]).unwrap();
        let y = x.mul(&g).unwrap();
        assert_eq!(
            y.to_vec(),
            vec![0.0, 10.0, 20.0, 30.0, 400.0, 500.0, 600.0, 700.0]
        );
    }

    #[test]
    fn broadcast_backward_reduces() {
        let x = Tensor::<f64>::param(vec![1.0; 6], &[2, 3]).unwrap();
        let b = Tensor::<f64>::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let loss = x.mul(&b).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-4);
        // 0.5·(1 + tanh(√(2/π)·1.044715))
        assert!((gelu_scalar(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = Tensor::<f64>::from_vec(vec![0.0], &[1]).unwrap();
        assert!(x.ln().is_err());
        let big = Tensor::<f32>::from_vec(vec![1000.0], &[1]).unwrap();
        assert!(big.exp().is_err());
    }
}
