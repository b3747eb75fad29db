//! Normalization, softmax, resizing and pooling.

use crate::element::Real;
use crate::error::{arg_err, shape_err, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Per-axis bilinear taps `(i0, i1, w0, w1)` with `align_corners = false`:
/// source coordinate `(dst + 0.5)·in/out − 0.5`, clamped below at 0.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

impl<T: Real> Tensor<T> {
    fn last_dim_rows(&self, op: &'static str) -> Result<(usize, usize)> {
        let k = *self
            .shape()
            .last()
            .ok_or_else(|| shape_err(op, "rank-0 input"))?;
        Ok((self.numel() / k, k))
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax_lastdim(&self) -> Result<Tensor<T>> {
        let (rows, k) = self.last_dim_rows("softmax_lastdim")?;
        let mut out = self.to_vec();
        for r in out.chunks_mut(k) {
            let m = r.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in r.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in r.iter_mut() {
                *v /= s;
            }
        }
        Tensor::from_op(
            "softmax_lastdim",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut gx = vec![T::zero(); rows * k];
                for ((gr, yr), out) in g.chunks(k).zip(y.chunks(k)).zip(gx.chunks_mut(k)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Log-softmax over the last dimension, log-sum-exp stabilized.
    pub fn log_softmax_lastdim(&self) -> Result<Tensor<T>> {
        let (rows, k) = self.last_dim_rows("log_softmax_lastdim")?;
        let mut out = self.to_vec();
        for r in out.chunks_mut(k) {
            let m = r.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + r.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in r.iter_mut() {
                *v -= lse;
            }
        }
        Tensor::from_op(
            "log_softmax_lastdim",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut gx = vec![T::zero(); rows * k];
                for ((gr, yr), out) in g.chunks(k).zip(y.chunks(k)).zip(gx.chunks_mut(k)) {
                    let gs: T = gr.iter().copied().sum();
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = gi - yi.exp() * gs;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Layer normalization over the last dimension with biased variance.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let (rows, c) = self.last_dim_rows("layer_norm")?;
        if eps <= 0.0 {
            return Err(arg_err(
                "layer_norm",
                format!("eps must be positive, got {eps}"),
            ));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} for width {c}",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let epst = T::of(eps);
        let cn = T::of(c as f64);
        let mut xhat = self.to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for r in xhat.chunks_mut(c) {
            let mean = r.iter().copied().sum::<T>() / cn;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = (var + epst).sqrt().recip();
            for v in r.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let out: Vec<T> = {
            let (gm, bt) = (gamma.data(), beta.data());
            xhat.chunks(c)
                .flat_map(|r| {
                    r.iter()
                        .zip(gm.iter().zip(bt.iter()))
                        .map(|(&v, (&g, &b))| v * g + b)
                })
                .collect()
        };
        let pg = gamma.clone();
        let (tx, tg, tb) = (self.tracks_grad(), gamma.tracks_grad(), beta.tracks_grad());
        Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _| {
                let gm = pg.data();
                let mut gx = tx.then(|| vec![T::zero(); rows * c]);
                let mut gg = tg.then(|| vec![T::zero(); c]);
                let mut gb = tb.then(|| vec![T::zero(); c]);
                let mut dxhat = vec![T::zero(); c];
                for (ri, (gr, xr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                    if let Some(gg) = gg.as_mut() {
                        for j in 0..c {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        for j in 0..c {
                            gb[j] += gr[j];
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        for j in 0..c {
                            dxhat[j] = gr[j] * gm[j];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / cn;
                        let m2 = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / cn;
                        let out = &mut gx[ri * c..(ri + 1) * c];
                        for j in 0..c {
                            out[j] = inv_std[ri] * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                }
                vec![gx, gg, gb]
            }),
        )
    }

    /// Bilinear resize of an NCHW tensor, `align_corners = false`.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        if self.ndim() != 4 {
            return Err(shape_err(
                "bilinear_resize",
                format!("{:?} is not NCHW", self.shape()),
            ));
        }
        if out_h == 0 || out_w == 0 {
            return Err(arg_err("bilinear_resize", "output extents must be ≥ 1"));
        }
        let s = self.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        if (h, w) == (out_h, out_w) {
            return Ok(self.clone());
        }
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let mut out = Vec::with_capacity(planes * out_h * out_w);
        {
            let x = self.data();
            for p in 0..planes {
                let src = &x[p * h * w..(p + 1) * h * w];
                for &(y0, y1, wy0, wy1) in &ty {
                    for &(x0, x1, wx0, wx1) in &tx {
                        let v = T::of(wy0)
                            * (T::of(wx0) * src[y0 * w + x0] + T::of(wx1) * src[y0 * w + x1])
                            + T::of(wy1)
                                * (T::of(wx0) * src[y1 * w + x0] + T::of(wx1) * src[y1 * w + x1]);
                        out.push(v);
                    }
                }
            }
        }
        let mut shape = s.to_vec();
        shape[2] = out_h;
        shape[3] = out_w;
        Tensor::from_op(
            "bilinear_resize",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); planes * h * w];
                let mut it = g.iter();
                for p in 0..planes {
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for &(y0, y1, wy0, wy1) in &ty {
                        for &(x0, x1, wx0, wx1) in &tx {
                            let gi = *it.next().expect("grad length");
                            dst[y0 * w + x0] += gi * T::of(wy0 * wx0);
                            dst[y0 * w + x1] += gi * T::of(wy0 * wx1);
                            dst[y1 * w + x0] += gi * T::of(wy1 * wx0);
                            dst[y1 * w + x1] += gi * T::of(wy1 * wx1);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Mean over the spatial extent of an NCHW tensor, giving `[N, C, 1, 1]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        if self.ndim() != 4 {
            return Err(shape_err(
                "global_avg_pool",
                format!("{:?} is not NCHW", self.shape()),
            ));
        }
        let s = self.shape();
        let hw = s[2] * s[3];
        let inv = T::of(1.0 / hw as f64);
        let data = {
            let x = self.data();
            x.chunks(hw)
                .map(|c| c.iter().copied().sum::<T>() * inv)
                .collect()
        };
        Tensor::from_op(
            "global_avg_pool",
            vec![s[0], s[1], 1, 1],
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(g.len() * hw);
                for &gi in g {
                    gx.extend(std::iter::repeat_n(gi * inv, hw));
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 − rate)`.
    pub fn dropout(&self, rate: f64, rng: &mut RngState) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(arg_err("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| {
                if rng.uniform() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.mul(&Tensor::from_vec(mask, self.shape())?)
    }
}
