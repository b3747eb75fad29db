//! Plain-loop reference implementations shared by the integration tests.

#![allow(dead_code)]

use gastwin_tensor::{RngState, Tensor};

pub fn randn(rng: &mut RngState, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

pub fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(data, shape).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Single-image CHW convolution, weight `[cout, cin / groups, k, k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_ref(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
    (stride, pad, groups): (usize, usize, usize),
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let (gin, gout) = (cin / groups, cout / groups);
    let mut y = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        let g = o / gout;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for i in 0..gin {
                    let ci = g * gin + i;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += weight[((o * gin + i) * k + ky) * k + kx]
                                * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                y[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (y, oh, ow)
}

/// `[C, H, W]` map to `[H·W, C]` tokens.
pub fn map_to_rows(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for ch in 0..c {
        for p in 0..hw {
            t[p * c + ch] = x[ch * hw + p];
        }
    }
    t
}

/// `[H·W, C]` tokens to a `[C, H, W]` map.
pub fn rows_to_map(t: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut x = vec![0.0; t.len()];
    for ch in 0..c {
        for p in 0..hw {
            x[ch * hw + p] = t[p * c + ch];
        }
    }
    x
}

/// Bilinear resize of a `[C, H, W]` map, half-pixel centres, edge clamped.
pub fn bilinear_ref(
    x: &[f64],
    c: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let src = |o: usize, n: usize, on: usize| {
        let s = ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let (y0, y1, fy) = src(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = src(ox, w, ow);
                let at = |yy: usize, xx: usize| x[(ch * h + yy) * w + xx];
                y[(ch * oh + oy) * ow + ox] = (1.0 - fy)
                    * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
            }
        }
    }
    y
}
