//! Oracle and invariant checks that can run from an installed binary.
//!
//! Each `measure_*` function returns the raw quantity (an error, a count);
//! [`run`] compares them against fixed tolerances.

use gastwin_tensor::{finite_diff_params, max_relative_error, op_suite, Real, RngState, Tensor};

use crate::checkpoint;
use crate::config::{parse_config, Attention, ModelConfig, StageConfig};
use crate::error::Result;
use crate::losses::{
    cross_entropy_loss, dice_loss, focal_loss, gaussian_plume_weights, plume_fields,
    weighted_dice_loss, PlumeWeightField,
};
use crate::model::{
    EfficientAttention, GasTwinFormer, LocalAttention, Mode, Module, NamedParam, ParamGroup,
    ParamSink, LN_EPS,
};
use crate::profile::count_flops;

/// Tolerances shared by the self-test and the acceptance suite.
pub const ATTENTION_TOL: f64 = 1e-5;
pub const OP_GRAD_TOL: f64 = 1e-3;
pub const HEAD_GRAD_TOL: f64 = 1e-3;
pub const LOSS_GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-4;
pub const DICE_MATCH_TOL: f64 = 1e-6;
pub const PERFECT_DICE_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    /// `measured < tol`.
    fn below(name: impl Into<String>, measured: f64, tol: f64) -> Self {
        Self::new(name, measured < tol, format!("{measured:.3e} < {tol:.0e}"))
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

/// Parameters of one module, in collection order.
pub fn collect<T: Real>(m: &impl Module<T>) -> Vec<NamedParam<T>> {
    let mut out = Vec::new();
    m.collect(&mut ParamSink::new(&mut out, ParamGroup::Backbone));
    out
}

/// Overwrites every parameter with `scale · N(0, 1)`.
pub fn randomize(params: &[NamedParam<f64>], rng: &mut RngState, scale: f64) {
    for p in params {
        for v in p.tensor.data_mut().iter_mut() {
            *v = scale * rng.normal();
        }
    }
}

/// Values of the parameter whose name ends with `suffix`.
pub fn param(params: &[NamedParam<f64>], suffix: &str) -> Vec<f64> {
    params
        .iter()
        .find(|p| p.name.ends_with(suffix))
        .unwrap_or_else(|| panic!("no parameter ending in {suffix}"))
        .tensor
        .to_vec()
}

/// Row-major `[rows, in] · [in, out] + b`, columns `lo..lo + n` only.
pub fn affine(
    x: &[f64],
    rows: usize,
    w: &[f64],
    b: &[f64],
    out: usize,
    lo: usize,
    n: usize,
) -> Vec<f64> {
    let inp = x.len() / rows;
    let mut y = vec![0.0; rows * n];
    for r in 0..rows {
        for j in 0..n {
            let mut acc = b[lo + j];
            for i in 0..inp {
                acc += x[r * inp + i] * w[i * out + lo + j];
            }
            y[r * n + j] = acc;
        }
    }
    y
}

/// Dense attention of `t` queries over every key/value row (`k.len() / C`
/// of them) plus projection and residual, written with plain loops: the
/// reference both attention kinds must reproduce when their restriction
/// (window, reduction) is vacuous.
pub fn dense_attention(
    x: &[f64],
    t: usize,
    heads: usize,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    (wo, bo): (&[f64], &[f64]),
) -> Vec<f64> {
    let c = x.len() / t;
    let d = c / heads;
    let s = k.len() / c;
    let mut attn = vec![0.0; t * c];
    for h in 0..heads {
        for i in 0..t {
            let scores: Vec<f64> = (0..s)
                .map(|j| {
                    (0..d)
                        .map(|e| q[i * c + h * d + e] * k[j * c + h * d + e])
                        .sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for e in 0..d {
                attn[i * c + h * d + e] = (0..s).map(|j| exps[j] / z * v[j * c + h * d + e]).sum();
            }
        }
    }
    let proj = affine(&attn, t, wo, bo, c, 0, c);
    x.iter().zip(proj).map(|(a, b)| a + b).collect()
}

/// Per-token layer norm with affine parameters.
pub fn dense_layer_norm(x: &[f64], c: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        out.extend(
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * gamma[i] + beta[i]),
        );
    }
    out
}

fn oracle_stage(kind: Attention) -> StageConfig {
    let mut s = ModelConfig::default().stages[0].clone();
    s.out_channels = 8;
    s.heads = 2;
    s.window = (4, 4);
    s.reduction_ratio = 1;
    s.pattern = vec![kind];
    s
}

/// Worst absolute difference between the module and the dense oracle over
/// `trials` random 4×4 token maps (random weights, 8 channels, 2 heads).
/// Local attention uses a window covering the whole map; efficient
/// attention uses reduction ratio 1.
pub fn measure_attention_oracle(kind: Attention, trials: usize, seed: u64) -> Result<f64> {
    let (h, w) = (4, 4);
    let t = h * w;
    let stage = oracle_stage(kind);
    let c = stage.out_channels;
    let mut rng = RngState::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let xv: Vec<f64> = (0..t * c).map(|_| rng.normal()).collect();
        let x = Tensor::from_vec(xv.clone(), &[1, t, c])?;
        let (got, want) = match kind {
            Attention::Local => {
                let m = LocalAttention::<f64>::new(&stage, 0.0, &mut rng);
                let ps = collect(&m);
                randomize(&ps, &mut rng, 0.5);
                let xn =
                    dense_layer_norm(&xv, c, &param(&ps, "norm.weight"), &param(&ps, "norm.bias"));
                let (wq, bq) = (param(&ps, "qkv.weight"), param(&ps, "qkv.bias"));
                let q = affine(&xn, t, &wq, &bq, 3 * c, 0, c);
                let k = affine(&xn, t, &wq, &bq, 3 * c, c, c);
                let v = affine(&xn, t, &wq, &bq, 3 * c, 2 * c, c);
                let want = dense_attention(
                    &xv,
                    t,
                    stage.heads,
                    &q,
                    &k,
                    &v,
                    (&param(&ps, "proj.weight"), &param(&ps, "proj.bias")),
                );
                (m.forward(&x, h, w, &mut Mode::Eval)?.to_vec(), want)
            }
            Attention::Efficient => {
                let m = EfficientAttention::<f64>::new(&stage, 0.0, &mut rng);
                let ps = collect(&m);
                randomize(&ps, &mut rng, 0.5);
                let xn =
                    dense_layer_norm(&xv, c, &param(&ps, "norm.weight"), &param(&ps, "norm.bias"));
                let q = affine(
                    &xn,
                    t,
                    &param(&ps, "q.weight"),
                    &param(&ps, "q.bias"),
                    c,
                    0,
                    c,
                );
                let (wkv, bkv) = (param(&ps, "kv.weight"), param(&ps, "kv.bias"));
                let k = affine(&xn, t, &wkv, &bkv, 2 * c, 0, c);
                let v = affine(&xn, t, &wkv, &bkv, 2 * c, c, c);
                let want = dense_attention(
                    &xv,
                    t,
                    stage.heads,
                    &q,
                    &k,
                    &v,
                    (&param(&ps, "proj.weight"), &param(&ps, "proj.bias")),
                );
                (m.forward(&x, h, w, &mut Mode::Eval)?.to_vec(), want)
            }
        };
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Small 64-bit model used for whole-network gradient checks.
pub fn gradcheck_config() -> ModelConfig {
    let mut cfg = ModelConfig::desk();
    cfg.input_size = (32, 32);
    cfg.decoder.internal_channels = 8;
    cfg.classifier.hidden = 8;
    cfg.encoder_dropout = 0.0;
    cfg.classifier.dropout = 0.0;
    for (s, c) in cfg.stages.iter_mut().zip([4, 8, 12, 16]) {
        s.out_channels = c;
        s.heads = 1;
    }
    cfg
}

/// Worst relative error between backprop and central differences for the
/// parameters whose name starts with `prefix`, under segmentation +
/// classification cross-entropy. Up to `per_tensor` elements per tensor
/// are probed (first, last and evenly spaced between).
pub fn measure_model_gradients(prefix: &str, per_tensor: usize, seed: u64) -> Result<f64> {
    let cfg = gradcheck_config();
    let model = GasTwinFormer::<f64>::new(&cfg)?;
    let (n, (h, w)) = (2, cfg.input_size);
    let mut rng = RngState::new(seed);
    let image = Tensor::from_vec(
        (0..n * 3 * h * w).map(|_| rng.uniform()).collect(),
        &[n, 3, h, w],
    )?;
    let mask: Vec<usize> = (0..n * h * w)
        .map(|i| usize::from((i / w + i % w) % 5 < 2))
        .collect();
    let diet = vec![0, 2];
    let loss = || -> Result<Tensor<f64>> {
        let out = model.forward(&image, &mut Mode::Eval)?;
        let px = out
            .seg_logits
            .permute(&[0, 2, 3, 1])?
            .reshape(&[n * h * w, 2])?;
        Ok(
            cross_entropy_loss(&px, &mask, None)?.add(&cross_entropy_loss(
                &out.diet_logits,
                &diet,
                None,
            )?)?,
        )
    };
    let params = model.named_params();
    model.zero_grad();
    loss()?.backward()?;

    let selected: Vec<&NamedParam<f64>> = params
        .iter()
        .filter(|p| p.name.starts_with(prefix))
        .collect();
    let tensors: Vec<Tensor<f64>> = selected.iter().map(|p| p.tensor.clone()).collect();
    let mut elements = Vec::new();
    let mut analytic = Vec::new();
    for (pi, p) in selected.iter().enumerate() {
        let len = p.tensor.numel();
        let grad = p.tensor.grad().unwrap_or_else(|| vec![0.0; len]);
        let count = per_tensor.min(len);
        let mut picks: Vec<usize> = (0..count)
            .map(|j| {
                if count == 1 {
                    0
                } else {
                    j * (len - 1) / (count - 1)
                }
            })
            .collect();
        picks.dedup();
        for e in picks {
            elements.push((pi, e));
            analytic.push(grad[e]);
        }
    }
    let numeric = finite_diff_params(
        &tensors,
        &elements,
        || Ok::<_, crate::Error>(loss()?.item()),
        GRAD_STEP,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Gradient errors of every loss w.r.t. its input, at small random shapes.
/// Plume weights are fitted once and held fixed, matching the loss's
/// stop-gradient on the field.
pub fn measure_loss_gradients(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = RngState::new(seed);
    let (n, h, w) = (2, 5, 6);
    let mask: Vec<u8> = (0..n * h * w)
        .map(|_| u8::from(rng.uniform() < 0.4))
        .collect();
    let probs: Vec<f64> = (0..n * h * w)
        .map(|_| rng.uniform_range(0.05, 0.95))
        .collect();
    let fields: Vec<f64> = plume_fields(&Tensor::<f64>::from_f64(&probs, &[n, h, w])?)?
        .into_iter()
        .flat_map(|f| f.weights)
        .collect();
    let logits: Vec<f64> = (0..n * 3).map(|_| rng.normal()).collect();
    let targets = vec![0, 2];

    type Loss<'a> = Box<dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>> + 'a>;
    let cases: Vec<(&'static str, Vec<f64>, Vec<usize>, Loss)> = vec![
        (
            "dice",
            probs.clone(),
            vec![n, h, w],
            Box::new(|p| dice_loss(p, &mask, 1.0)),
        ),
        (
            "gaussian_plume_dice",
            probs.clone(),
            vec![n, h, w],
            Box::new(|p| weighted_dice_loss(p, &mask, Some(&fields), 1.0)),
        ),
        (
            "cross_entropy",
            logits.clone(),
            vec![n, 3],
            Box::new(|l| cross_entropy_loss(l, &targets, None)),
        ),
        (
            "focal",
            logits.clone(),
            vec![n, 3],
            Box::new(|l| focal_loss(l, &targets, 2.0, 0.25)),
        ),
    ];
    let mut out = Vec::new();
    for (name, values, shape, f) in cases {
        let x = Tensor::param(values.clone(), &shape)?;
        f(&x)?.backward()?;
        let analytic = x.grad().unwrap_or_else(|| vec![0.0; values.len()]);
        let numeric = gastwin_tensor::finite_diff_grad(
            |t| Ok::<_, crate::Error>(f(t)?.item()),
            &x.detach(),
            GRAD_STEP,
        )?;
        out.push((name, max_relative_error(&analytic, &numeric)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossIdentities {
    /// |uniform-weight plume Dice − plain Dice|.
    pub uniform_weight_gap: f64,
    /// |focal(γ = 0, α = 1) − cross-entropy| (expected exactly zero).
    pub focal_ce_gap: f64,
    /// Dice of an empty prediction against an empty target.
    pub empty_empty: f64,
    /// Dice of a perfect hard prediction.
    pub perfect: f64,
}

pub fn measure_loss_identities(seed: u64) -> Result<LossIdentities> {
    let mut rng = RngState::new(seed);
    let (n, h, w) = (3, 8, 8);
    let mask: Vec<u8> = (0..n * h * w)
        .map(|_| u8::from(rng.uniform() < 0.3))
        .collect();
    let probs: Vec<f64> = (0..n * h * w).map(|_| rng.uniform()).collect();
    let p = Tensor::<f64>::from_f64(&probs, &[n, h, w])?;
    let ones = vec![1.0; n * h * w];
    let uniform_weight_gap = (weighted_dice_loss(&p, &mask, Some(&ones), 1e-6)?.item()
        - dice_loss(&p, &mask, 1e-6)?.item())
    .abs();

    let logits = Tensor::<f64>::from_f64(
        &(0..40).map(|_| 3.0 * rng.normal()).collect::<Vec<_>>(),
        &[10, 4],
    )?;
    let targets: Vec<usize> = (0..10).map(|i| (i * 7) % 4).collect();
    let focal_ce_gap = (focal_loss(&logits, &targets, 0.0, 1.0)?.item()
        - cross_entropy_loss(&logits, &targets, None)?.item())
    .abs();

    let zeros = Tensor::<f64>::zeros(&[1, h, w]);
    let empty_empty = dice_loss(&zeros, &vec![0; h * w], 1e-6)?.item();
    let hard: Vec<f64> = mask.iter().map(|&m| f64::from(m)).collect();
    let perfect = dice_loss(&Tensor::<f64>::from_f64(&hard, &[n, h, w])?, &mask, 1e-6)?.item();
    Ok(LossIdentities {
        uniform_weight_gap,
        focal_ce_gap,
        empty_empty,
        perfect,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlumeInvariants {
    pub fields: usize,
    /// Fields whose weight maximum is not at the pixel nearest μ.
    pub peak_violations: usize,
    /// Fields with σ outside `[W/20, W/2] × [H/20, H/2]`.
    pub bound_violations: usize,
    /// Whether the all-zero field took the low-mass fallback.
    pub zero_field_fallback: bool,
}

fn peak_at_center(f: &PlumeWeightField) -> bool {
    let (cx, cy) = f.nearest_to_center();
    let best = f.weights.iter().cloned().fold(0.0, f64::max);
    f.at(cx, cy) >= best
}

fn sigma_in_bounds(f: &PlumeWeightField) -> bool {
    let ((xl, xh), (yl, yh)) = PlumeWeightField::sigma_bounds(f.height, f.width);
    (xl..=xh).contains(&f.sigma.0) && (yl..=yh).contains(&f.sigma.1)
}

/// Fits plume fields to `count` random prediction maps of random size:
/// dense noise, sparse speckle, single pixels and smooth blobs.
pub fn measure_plume_invariants(count: usize, seed: u64) -> PlumeInvariants {
    let mut rng = RngState::new(seed);
    let (mut peak, mut bounds) = (0, 0);
    for i in 0..count {
        let h = rng.int_range(4, 40);
        let w = rng.int_range(4, 40);
        let map: Vec<f64> = match i % 4 {
            0 => (0..h * w).map(|_| rng.uniform()).collect(),
            1 => (0..h * w)
                .map(|_| {
                    if rng.uniform() < 0.05 {
                        rng.uniform()
                    } else {
                        0.0
                    }
                })
                .collect(),
            2 => {
                let mut m = vec![0.0; h * w];
                m[rng.int_range(0, h * w - 1)] = rng.uniform_range(1e-3, 1.0);
                m
            }
            _ => {
                let (cx, cy) = (
                    rng.uniform_range(0.0, w as f64),
                    rng.uniform_range(0.0, h as f64),
                );
                let s = rng.uniform_range(0.5, 0.4 * w.max(h) as f64);
                (0..h * w)
                    .map(|p| {
                        let (x, y) = ((p % w) as f64 - cx, (p / w) as f64 - cy);
                        (-(x * x + y * y) / (2.0 * s * s)).exp()
                    })
                    .collect()
            }
        };
        let f = gaussian_plume_weights(&map, h, w);
        peak += usize::from(!peak_at_center(&f));
        bounds += usize::from(!sigma_in_bounds(&f));
    }
    let zero = gaussian_plume_weights(&vec![0.0; 12 * 16], 12, 16);
    PlumeInvariants {
        fields: count,
        peak_violations: peak,
        bound_violations: bounds,
        zero_field_fallback: zero.fallback && peak_at_center(&zero) && sigma_in_bounds(&zero),
    }
}

/// Whether a perturbed model and its checkpoint round trip give
/// bit-identical forward outputs.
pub fn measure_checkpoint_roundtrip<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<bool> {
    let model = GasTwinFormer::<T>::new(cfg)?;
    let mut rng = RngState::new(seed);
    for p in model.named_params() {
        for v in p.tensor.data_mut().iter_mut() {
            *v += T::of(0.01 * rng.normal());
        }
    }
    let restored = checkpoint::decode(&checkpoint::encode(&model, None, 7))?.model::<T>()?;
    let (h, w) = cfg.input_size;
    let image = Tensor::<T>::from_f64(
        &(0..2 * 3 * h * w)
            .map(|_| rng.uniform())
            .collect::<Vec<_>>(),
        &[2, 3, h, w],
    )?;
    let a = model.forward(&image, &mut Mode::Eval)?;
    let b = restored.forward(&image, &mut Mode::Eval)?;
    let same = |x: &Tensor<T>, y: &Tensor<T>| {
        x.shape() == y.shape()
            && x.to_f64_vec()
                .iter()
                .zip(y.to_f64_vec())
                .all(|(p, q)| p.to_bits() == q.to_bits())
    };
    Ok(same(&a.seg_logits, &b.seg_logits) && same(&a.diet_logits, &b.diet_logits))
}

/// Runs every check; order is stable.
pub fn run() -> Vec<Check> {
    let mut out = Vec::new();
    let push = |out: &mut Vec<Check>, r: Result<Check>, name: &str| {
        out.push(r.unwrap_or_else(|e| Check::new(name, false, format!("error: {e}"))))
    };

    push(
        &mut out,
        op_suite().map_err(Into::into).map(|rs| {
            let (name, worst) =
                rs.iter()
                    .cloned()
                    .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
            Check::new(
                "op gradients",
                worst < OP_GRAD_TOL,
                format!(
                    "{} ops, worst {worst:.3e} ({name}) < {OP_GRAD_TOL:.0e}",
                    rs.len()
                ),
            )
        }),
        "op gradients",
    );
    for prefix in ["decoder", "classifier"] {
        let name = format!("{prefix} gradients");
        push(
            &mut out,
            measure_model_gradients(prefix, 3, 5)
                .map(|e| Check::below(name.clone(), e, HEAD_GRAD_TOL)),
            &name,
        );
    }
    push(
        &mut out,
        measure_loss_gradients(9).map(|rs| {
            let worst = rs.iter().map(|r| r.1).fold(0.0, f64::max);
            Check::below("loss gradients", worst, LOSS_GRAD_TOL)
        }),
        "loss gradients",
    );
    for (kind, label) in [
        (Attention::Local, "local attention"),
        (Attention::Efficient, "efficient attention"),
    ] {
        let name = format!("{label} = dense oracle");
        push(
            &mut out,
            measure_attention_oracle(kind, 10, 3)
                .map(|e| Check::below(name.clone(), e, ATTENTION_TOL)),
            &name,
        );
    }
    push(
        &mut out,
        measure_loss_identities(11).map(|l| {
            let ok = l.uniform_weight_gap < DICE_MATCH_TOL
                && l.focal_ce_gap == 0.0
                && l.empty_empty == 0.0
                && l.perfect <= PERFECT_DICE_TOL;
            Check::new("loss identities", ok, format!("{l:?}"))
        }),
        "loss identities",
    );
    let p = measure_plume_invariants(1000, 13);
    out.push(Check::new(
        "plume weight invariants",
        p.peak_violations == 0 && p.bound_violations == 0 && p.zero_field_fallback,
        format!("{p:?}"),
    ));
    let cfg = gradcheck_config();
    push(
        &mut out,
        measure_checkpoint_roundtrip::<f32>(&cfg, 17).map(|ok| {
            Check::new(
                "checkpoint round trip",
                ok,
                "bitwise-identical forward outputs",
            )
        }),
        "checkpoint round trip",
    );
    let text = ModelConfig::default().to_config_text();
    push(
        &mut out,
        parse_config(&text).map(|c| {
            Check::new(
                "config round trip",
                c == ModelConfig::default(),
                "serialize → parse is the identity",
            )
        }),
        "config round trip",
    );
    push(
        &mut out,
        ["LL", "EL", "EE"]
            .iter()
            .map(|p| count_flops(&ModelConfig::default().with_pattern(p)?, 512, 512))
            .collect::<Result<Vec<_>>>()
            .map(|r| {
                let ok = r
                    .windows(2)
                    .all(|w| w[0].flops() < w[1].flops() && w[0].params < w[1].params);
                Check::new(
                    "pattern cost ordering",
                    ok,
                    "LL < EL < EE in parameters and FLOPs",
                )
            }),
        "pattern cost ordering",
    );
    out
}
