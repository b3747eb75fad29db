//! Forward-value checks against brute-force reference computations.

use gastwin_tensor::{Conv2dSpec, RngState, Tensor};
use proptest::prelude::*;

fn random(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.normal()).collect(), shape).unwrap()
}

/// Direct sliding-window convolution, written independently of the engine.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    groups: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for oc in 0..cout {
            let g = oc / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for icg in 0..cin_g {
                        let ic = g * cin_g + icg;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x[((b * cin + ic) * h + iy as usize) * w + ix as usize]
                                    * k[((oc * cin_g + icg) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * cout + oc) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_sliding_window_dot_products() {
    let mut rng = RngState::new(11);
    let x = random(&[1, 1, 3, 3], &mut rng);
    let k = random(&[1, 1, 2, 2], &mut rng);
    let y = x.conv2d(&k, None, Conv2dSpec::new(1, 0, 1)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    let (xd, kd) = (x.to_vec(), k.to_vec());
    let expect: Vec<f64> = (0..2)
        .flat_map(|oy| (0..2).map(move |ox| (oy, ox)))
        .map(|(oy, ox)| {
            xd[oy * 3 + ox] * kd[0]
                + xd[oy * 3 + ox + 1] * kd[1]
                + xd[(oy + 1) * 3 + ox] * kd[2]
                + xd[(oy + 1) * 3 + ox + 1] * kd[3]
        })
        .collect();
    for (a, b) in y.to_vec().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn conv2d_general_cases_match_oracle() {
    let mut rng = RngState::new(5);
    for &(n, cin, h, w, cout, kh, kw, stride, pad, groups) in &[
        (2, 3, 7, 6, 4, 3, 3, 2, 1, 1),
        (1, 3, 9, 9, 8, 7, 7, 4, 3, 1),
        (1, 4, 5, 5, 4, 3, 3, 1, 1, 4),
        (2, 6, 4, 5, 4, 2, 2, 2, 0, 2),
    ] {
        let x = random(&[n, cin, h, w], &mut rng);
        let k = random(&[cout, cin / groups, kh, kw], &mut rng);
        let y = x
            .conv2d(&k, None, Conv2dSpec::new(stride, pad, groups))
            .unwrap();
        let expect = conv_oracle(
            &x.to_vec(),
            (n, cin, h, w),
            &k.to_vec(),
            (cout, kh, kw),
            stride,
            pad,
            groups,
        );
        for (a, b) in y.to_vec().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn depthwise_equals_independent_single_channel_convolutions() {
    let mut rng = RngState::new(8);
    let c = 3;
    let x = random(&[2, c, 5, 4], &mut rng);
    let k = random(&[c, 1, 3, 3], &mut rng);
    let y = x.conv2d(&k, None, Conv2dSpec::new(1, 1, c)).unwrap();
    for ch in 0..c {
        let xc = x.narrow(1, ch, 1).unwrap();
        let kc = k.narrow(0, ch, 1).unwrap();
        let yc = xc.conv2d(&kc, None, Conv2dSpec::new(1, 1, 1)).unwrap();
        assert_eq!(y.narrow(1, ch, 1).unwrap().to_vec(), yc.to_vec());
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = RngState::new(3);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let c = a.matmul(&b).unwrap().to_vec();
    let (ad, bd) = (a.to_vec(), b.to_vec());
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += ad[i * 4 + k] * bd[k * 2 + j];
            }
            assert!((c[i * 2 + j] - s).abs() < 1e-6);
        }
    }
    // batched, per-batch right operand
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 4, 5], &mut rng);
    let c = a.matmul(&b).unwrap();
    for bi in 0..2 {
        let ai = a.narrow(0, bi, 1).unwrap().reshape(&[3, 4]).unwrap();
        let bb = b.narrow(0, bi, 1).unwrap().reshape(&[4, 5]).unwrap();
        let ci = c.narrow(0, bi, 1).unwrap().reshape(&[3, 5]).unwrap();
        assert_eq!(ai.matmul(&bb).unwrap().to_vec(), ci.to_vec());
    }
}

#[test]
fn layer_norm_output_moments() {
    let mut rng = RngState::new(21);
    let x = random(&[6, 17], &mut rng).mul_scalar(4.0).unwrap();
    let y = x
        .layer_norm(&Tensor::ones(&[17]), &Tensor::zeros(&[17]), 1e-6)
        .unwrap()
        .to_vec();
    for row in y.chunks(17) {
        let mean = row.iter().sum::<f64>() / 17.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }
    let flat = Tensor::<f64>::full(&[1, 5], 3.0)
        .layer_norm(&Tensor::ones(&[5]), &Tensor::zeros(&[5]), 1e-5)
        .unwrap();
    assert!(flat.to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn bilinear_upscale_of_linear_ramp() {
    // Input values are 2·y + x, so bilinear interpolation reproduces the
    // ramp at the clamped source coordinates exactly.
    let x = Tensor::<f64>::from_vec(vec![0.0, 1.0, 2.0, 3.0], &[1, 1, 2, 2]).unwrap();
    let y = x.bilinear_resize(4, 4).unwrap().to_vec();
    let coord = |d: usize| ((d as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
    for i in 0..4 {
        for j in 0..4 {
            let expect = 2.0 * coord(i) + coord(j);
            assert!((y[i * 4 + j] - expect).abs() < 1e-12, "({i},{j})");
        }
    }
}

#[test]
fn global_avg_pool_matches_summation() {
    let mut rng = RngState::new(4);
    let x = random(&[2, 3, 5, 7], &mut rng);
    let y = x.global_avg_pool().unwrap().to_vec();
    for (i, chunk) in x.to_vec().chunks(35).enumerate() {
        let s: f64 = chunk.iter().sum();
        assert!((y[i] - s / 35.0).abs() < 1e-6);
    }
}

#[test]
fn ops_are_bitwise_reproducible() {
    let run = || {
        let mut rng = RngState::new(99);
        let x = random(&[1, 2, 6, 6], &mut rng).cast::<f32>();
        let k = random(&[4, 2, 3, 3], &mut rng).cast::<f32>();
        x.conv2d(&k, None, Conv2dSpec::new(2, 1, 1))
            .unwrap()
            .gelu()
            .unwrap()
            .bilinear_resize(5, 5)
            .unwrap()
            .softmax_lastdim()
            .unwrap()
            .to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-1e4f64..1e4, 1..24), shift in -50.0f64..50.0) {
        let k = vals.len();
        let x = Tensor::<f64>::from_vec(vals.clone(), &[1, k]).unwrap();
        let y = x.softmax_lastdim().unwrap().to_vec();
        let s: f64 = y.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        prop_assert!(y.iter().all(|&v| v >= 0.0));
        let ys = x.add_scalar(shift).unwrap().softmax_lastdim().unwrap().to_vec();
        for (a, b) in y.iter().zip(&ys) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_f32_stable(vals in prop::collection::vec(-1e4f32..1e4, 1..16)) {
        let k = vals.len();
        let y = Tensor::<f32>::from_vec(vals, &[k]).unwrap().softmax_lastdim().unwrap().to_vec();
        let s: f64 = y.iter().map(|&v| v as f64).sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }
}
