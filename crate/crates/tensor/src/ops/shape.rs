//! Layout ops: reshape, permute, zero-padding, slicing and concatenation.

use crate::element::Real;
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{numel, strides, Tensor};

/// `out[i] = x[map[i]]`; backward scatters gradients through `map`.
fn gather<T: Real>(
    name: &'static str,
    x: &Tensor<T>,
    out_shape: Vec<usize>,
    map: Vec<usize>,
) -> Result<Tensor<T>> {
    let data = {
        let d = x.data();
        map.iter().map(|&j| d[j]).collect()
    };
    let n_in = x.numel();
    Tensor::from_op(
        name,
        out_shape,
        data,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); n_in];
            for (&j, &gi) in map.iter().zip(g) {
                gx[j] += gi;
            }
            vec![Some(gx)]
        }),
    )
}

/// `out[map[j]] = x[j]`, other outputs zero; `map` must be injective.
fn scatter<T: Real>(
    name: &'static str,
    x: &Tensor<T>,
    out_shape: Vec<usize>,
    map: Vec<usize>,
) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); numel(&out_shape)];
    {
        let d = x.data();
        for (&j, &v) in map.iter().zip(d.iter()) {
            data[j] = v;
        }
    }
    Tensor::from_op(
        name,
        out_shape,
        data,
        vec![x.clone()],
        Box::new(move |g, _| vec![Some(map.iter().map(|&j| g[j]).collect())]),
    )
}

/// Flat source index for every element of an output whose index `i` along
/// output dimension `d` advances the source by `eff[d]`, starting at `base`.
fn strided_map(out_shape: &[usize], eff: &[usize], base: usize) -> Vec<usize> {
    let n = out_shape.len();
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut cur = base;
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

impl<T: Real> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        let data = self.to_vec();
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// Output dimension `i` is input dimension `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let n = self.ndim();
        let mut seen = vec![false; n];
        if axes.len() != n
            || axes
                .iter()
                .any(|&a| a >= n || std::mem::replace(&mut seen[a], true))
        {
            return Err(arg_err(
                "permute",
                format!("{axes:?} is not a permutation of {n} axes"),
            ));
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.dim(a)).collect();
        let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let map = strided_map(&out_shape, &eff, 0);
        gather("permute", self, out_shape, map)
    }

    /// Swaps the last two dimensions.
    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        let n = self.ndim();
        if n < 2 {
            return Err(shape_err("transpose_last2", format!("{:?}", self.shape())));
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    /// Zero padding with `(before, after)` counts per dimension.
    pub fn pad(&self, pads: &[(usize, usize)]) -> Result<Tensor<T>> {
        if pads.len() != self.ndim() {
            return Err(arg_err(
                "pad",
                format!("{} pad pairs for {} dims", pads.len(), self.ndim()),
            ));
        }
        if pads.iter().all(|&(a, b)| a == 0 && b == 0) {
            return Ok(self.clone());
        }
        let out_shape: Vec<usize> = self
            .shape()
            .iter()
            .zip(pads)
            .map(|(&d, &(a, b))| d + a + b)
            .collect();
        let out_strides = strides(&out_shape);
        let base: usize = pads
            .iter()
            .zip(&out_strides)
            .map(|(&(a, _), &s)| a * s)
            .sum();
        let map = strided_map(self.shape(), &out_strides, base);
        scatter("pad", self, out_shape, map)
    }

    /// Elements `start..start + len` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if dim >= self.ndim() || len == 0 || start + len > self.dim(dim) {
            return Err(arg_err(
                "narrow",
                format!(
                    "range {start}..{} on dim {dim} of {:?}",
                    start + len,
                    self.shape()
                ),
            ));
        }
        if start == 0 && len == self.dim(dim) {
            return Ok(self.clone());
        }
        let in_strides = strides(self.shape());
        let mut out_shape = self.shape().to_vec();
        out_shape[dim] = len;
        let map = strided_map(&out_shape, &in_strides, start * in_strides[dim]);
        gather("narrow", self, out_shape, map)
    }

    /// Elements at the given flat (row-major) positions, as a 1-D tensor.
    /// Repeated positions accumulate gradient.
    pub fn take(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let n = self.numel();
        if indices.is_empty() {
            return Err(arg_err("take", "no indices given"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(arg_err("take", format!("index {bad} out of {n} elements")));
        }
        gather("take", self, vec![indices.len()], indices.to_vec())
    }

    /// Concatenation along `dim`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], dim: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| arg_err("concat", "no tensors given"))?;
        let nd = first.ndim();
        if dim >= nd {
            return Err(arg_err("concat", format!("dim {dim} for rank {nd}")));
        }
        for p in parts {
            let ok = p.ndim() == nd && (0..nd).all(|d| d == dim || p.dim(d) == first.dim(d));
            if !ok {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {:?} along dim {dim}", first.shape(), p.shape()),
                ));
            }
        }
        let outer: usize = first.shape()[..dim].iter().product();
        let inner: usize = first.shape()[dim + 1..].iter().product();
        let sizes: Vec<usize> = parts.iter().map(|p| p.dim(dim)).collect();
        let total: usize = sizes.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[dim] = total;
        let mut data = Vec::with_capacity(numel(&out_shape));
        {
            let guards: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (g, &s) in guards.iter().zip(&sizes) {
                    data.extend_from_slice(&g[o * s * inner..(o + 1) * s * inner]);
                }
            }
        }
        let parents: Vec<Tensor<T>> = parts.iter().map(|&p| p.clone()).collect();
        Tensor::from_op(
            "concat",
            out_shape,
            data,
            parents,
            Box::new(move |g, _| {
                let mut grads: Vec<Vec<T>> = sizes
                    .iter()
                    .map(|&s| Vec::with_capacity(outer * s * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gp, &s) in grads.iter_mut().zip(&sizes) {
                        gp.extend_from_slice(&g[off..off + s * inner]);
                        off += s * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec((0..numel(shape)).map(|v| v as f64).collect(), shape).unwrap()
    }

    #[test]
    fn permute_matches_index_formula() {
        let x = seq(&[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let d = y.to_vec();
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(d[k * 6 + i * 3 + j], (i * 12 + j * 4 + k) as f64);
                }
            }
        }
    }

    #[test]
    fn pad_then_narrow_is_identity() {
        let x = seq(&[2, 3]);
        let p = x.pad(&[(1, 0), (0, 2)]).unwrap();
        assert_eq!(p.shape(), &[3, 5]);
        assert_eq!(
            p.to_vec(),
            vec![0., 0., 0., 0., 0., 0., 1., 2., 0., 0., 3., 4., 5., 0., 0.]
        );
        let back = p.narrow(0, 1, 2).unwrap().narrow(1, 0, 3).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn concat_middle_dim() {
        let a = seq(&[2, 1, 2]);
        let b = seq(&[2, 2, 2]).add_scalar(10.0).unwrap();
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(
            c.to_vec(),
            vec![0., 1., 10., 11., 12., 13., 2., 3., 14., 15., 16., 17.]
        );
    }

    #[test]
    fn invalid_layouts_are_rejected() {
        let x = seq(&[2, 3]);
        assert!(x.reshape(&[4, 2]).is_err());
        assert!(x.permute(&[0, 0]).is_err());
        assert!(x.narrow(1, 2, 2).is_err());
        assert!(Tensor::concat(&[&x, &seq(&[3, 3])], 1).is_err());
    }
}
