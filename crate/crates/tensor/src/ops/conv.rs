//! Direct 2-D convolution over NCHW tensors, with channel groups.

use crate::element::Real;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride: (stride, stride),
            padding: (padding, padding),
            groups,
        }
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Range of output positions `o` whose tap `o·stride − pad + k` lands
/// inside `0..input`.
#[inline]
fn valid_range(input: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi_num = input as isize - 1 + pad as isize - k as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(out);
    (lo.min(hi), hi)
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    /// Calls `f(n, oc, ic, ky, kx, oy, ox_lo, ox_hi, iy, ix_of_ox_lo)` for
    /// every in-bounds kernel tap row.
    #[inline]
    fn for_each_tap(
        &self,
        mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize, usize, usize, usize),
    ) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        for n in 0..self.n {
            for oc in 0..self.cout {
                let g = oc / self.cout_g;
                for icg in 0..self.cin_g {
                    let ic = g * self.cin_g + icg;
                    for ky in 0..self.kh {
                        let (oy_lo, oy_hi) = valid_range(self.h, self.oh, ky, sh, ph);
                        for kx in 0..self.kw {
                            let (ox_lo, ox_hi) = valid_range(self.w, self.ow, kx, sw, pw);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in oy_lo..oy_hi {
                                let iy = oy * sh + ky - ph;
                                let ix0 = ox_lo * sw + kx - pw;
                                f(n, oc, icg, ic, ky, kx, oy, ox_lo, ox_hi, iy * self.w + ix0);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tensor<T> {
    /// 2-D convolution, zero padding. `kernel` is
    /// `[C_out, C_in / groups, kH, kW]`; `bias` is `[C_out]`.
    pub fn conv2d(
        &self,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        spec: Conv2dSpec,
    ) -> Result<Tensor<T>> {
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?} and kernel {ks:?} must both be rank 4"),
            ));
        }
        let groups = spec.groups;
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_g, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(shape_err(
                "conv2d",
                format!(
                    "input channels {cin}, output channels {cout}, kernel input channels {cin_g}, groups {groups}"
                ),
            ));
        }
        let (sh, sw) = spec.stride;
        let (ph, pw) = spec.padding;
        if sh == 0 || sw == 0 || kh > h + 2 * ph || kw > w + 2 * pw {
            return Err(shape_err(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} stride {sh}x{sw} on padded input {}x{}",
                    h + 2 * ph,
                    w + 2 * pw
                ),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {cout} outputs", b.shape()),
                ));
            }
        }
        let geo = Geometry {
            n,

            h,
            w,
            cout,
            kh,
            kw,
            oh: conv_out_len(h, kh, sh, ph),
            ow: conv_out_len(w, kw, sw, pw),
            cin_g,
            cout_g: cout / groups,
            spec,
        };
        let (oh, ow) = (geo.oh, geo.ow);
        let plane = oh * ow;
        let mut out = vec![T::zero(); n * cout * plane];
        {
            let x = self.data();
            let k = kernel.data();
            if let Some(b) = bias {
                let b = b.data();
                for (i, chunk) in out.chunks_mut(plane).enumerate() {
                    chunk.fill(b[i % cout]);
                }
            }
            geo.for_each_tap(|n, oc, icg, ic, ky, kx, oy, lo, hi, xi| {
                let wv = k[((oc * cin_g + icg) * kh + ky) * kw + kx];
                let xrow = &x[(n * cin + ic) * h * w..];
                let orow = &mut out[(n * cout + oc) * plane + oy * ow..];
                for (j, ox) in (lo..hi).enumerate() {
                    orow[ox] += wv * xrow[xi + j * sw];
                }
            });
        }
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let (px, pk) = (self.clone(), kernel.clone());
        let (tx, tk) = (self.tracks_grad(), kernel.tracks_grad());
        let tb = bias.map(Tensor::tracks_grad);
        Tensor::from_op(
            "conv2d",
            vec![n, cout, oh, ow],
            out,
            parents,
            Box::new(move |g, _| {
                let x = px.data();
                let k = pk.data();
                let mut gx = tx.then(|| vec![T::zero(); x.len()]);
                let mut gk = tk.then(|| vec![T::zero(); k.len()]);
                geo.for_each_tap(|n, oc, icg, ic, ky, kx, oy, lo, hi, xi| {
                    let ki = ((oc * cin_g + icg) * kh + ky) * kw + kx;
                    let grow = &g[(n * cout + oc) * plane + oy * ow..];
                    let xoff = (n * cin + ic) * h * w + xi;
                    if let Some(gx) = gx.as_mut() {
                        let wv = k[ki];
                        for (j, ox) in (lo..hi).enumerate() {
                            gx[xoff + j * sw] += wv * grow[ox];
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        let mut s = T::zero();
                        for (j, ox) in (lo..hi).enumerate() {
                            s += x[xoff + j * sw] * grow[ox];
                        }
                        gk[ki] += s;
                    }
                });
                let mut grads = vec![gx, gk];
                if let Some(tb) = tb {
                    grads.push(tb.then(|| {
                        let mut gb = vec![T::zero(); cout];
                        for (i, chunk) in g.chunks(plane).enumerate() {
                            gb[i % cout] += chunk.iter().copied().sum();
                        }
                        gb
                    }));
                }
                grads
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_identity() {
        let x = Tensor::<f64>::from_vec((0..18).map(f64::from).collect(), &[1, 2, 3, 3]).unwrap();
        let k = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1]).unwrap();
        let y = x.conv2d(&k, None, Conv2dSpec::new(1, 0, 1)).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn ones_kernel_on_constant() {
        let c = 1.5;
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], c);
        let k = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = x
            .conv2d(&k, None, Conv2dSpec::new(1, 1, 1))
            .unwrap()
            .to_vec();
        assert_eq!(y[0], 4.0 * c);
        assert_eq!(y[3], 4.0 * c);
        assert_eq!(y[5], 9.0 * c);
        assert_eq!(y[1], 6.0 * c);
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_out_len(512, 7, 4, 3), 128);
        assert_eq!(conv_out_len(128, 3, 2, 1), 64);
        assert_eq!(conv_out_len(5, 2, 2, 0), 2);
        let x = Tensor::<f32>::zeros(&[2, 3, 9, 7]);
        let k = Tensor::<f32>::zeros(&[4, 3, 3, 2]);
        let spec = Conv2dSpec {
            stride: (2, 3),
            padding: (1, 0),
            groups: 1,
        };
        assert_eq!(x.conv2d(&k, None, spec).unwrap().shape(), &[2, 4, 5, 2]);
    }

    #[test]
    fn group_mismatch_names_dimensions() {
        let x = Tensor::<f32>::zeros(&[1, 6, 4, 4]);
        let k = Tensor::<f32>::zeros(&[4, 3, 3, 3]);
        let err = x.conv2d(&k, None, Conv2dSpec::new(1, 1, 4)).unwrap_err();
        assert!(err.to_string().contains("groups 4"), "{err}");
        let big = Tensor::<f32>::zeros(&[1, 6, 9, 9]);
        assert!(x.conv2d(&big, None, Conv2dSpec::new(1, 1, 1)).is_err());
    }
}
