//! Segmentation and classification objectives, including the Gaussian
//! plume weighted Dice loss.
//!
//! Dice-type losses are evaluated per image and averaged over the batch.

use gastwin_tensor::{Real, Tensor};

use crate::config::{LossConfig, SegLoss};
use crate::error::{Error, Result};

/// Total probability mass below which the plume fit falls back to a
/// centered, maximally wide field.
pub const MIN_PLUME_MASS: f64 = 1e-8;

/// Per-pixel Gaussian weights fitted to one soft foreground map.
#[derive(Clone, Debug, PartialEq)]
pub struct PlumeWeightField {
    pub height: usize,
    pub width: usize,
    /// Row-major `[H, W]`, each in (0, 1].
    pub weights: Vec<f64>,
    /// Centre `(μx, μy)` in pixel coordinates (x = column, y = row).
    pub mu: (f64, f64),
    /// Spread `(σx, σy)` after clamping.
    pub sigma: (f64, f64),
    /// True when the map had too little mass and the fallback was used.
    pub fallback: bool,
}

impl PlumeWeightField {
    /// `([W/20, W/2], [H/20, H/2])`.
    pub fn sigma_bounds(height: usize, width: usize) -> ((f64, f64), (f64, f64)) {
        let (w, h) = (width as f64, height as f64);
        ((w / 20.0, w / 2.0), (h / 20.0, h / 2.0))
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.weights[y * self.width + x]
    }

    /// Pixel closest to the centre, clamped into the image.
    pub fn nearest_to_center(&self) -> (usize, usize) {
        let clampi = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
        (
            clampi(self.mu.0, self.width),
            clampi(self.mu.1, self.height),
        )
    }
}

/// Fits the plume centre (probability-mass centroid) and per-axis spread
/// (probability-weighted standard deviation, clamped to the adaptive bounds)
/// of one `[H, W]` foreground-probability map, then evaluates
/// `w(p) = exp(−(x−μx)²/2σx² − (y−μy)²/2σy²)` at every pixel.
pub fn gaussian_plume_weights(pred_fg: &[f64], height: usize, width: usize) -> PlumeWeightField {
    assert_eq!(pred_fg.len(), height * width, "plume map size");
    let ((sx_lo, sx_hi), (sy_lo, sy_hi)) = PlumeWeightField::sigma_bounds(height, width);
    let mass: f64 = pred_fg.iter().sum();
    let (mu, sigma, fallback) = if mass < MIN_PLUME_MASS {
        let center = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        (center, (sx_hi, sy_hi), true)
    } else {
        let (mut mx, mut my) = (0.0, 0.0);
        for (i, &p) in pred_fg.iter().enumerate() {
            mx += p * (i % width) as f64;
            my += p * (i / width) as f64;
        }
        mx /= mass;
        my /= mass;
        let (mut vx, mut vy) = (0.0, 0.0);
        for (i, &p) in pred_fg.iter().enumerate() {
            let dx = (i % width) as f64 - mx;
            let dy = (i / width) as f64 - my;
            vx += p * dx * dx;
            vy += p * dy * dy;
        }
        let sx = (vx / mass).sqrt().clamp(sx_lo, sx_hi);
        let sy = (vy / mass).sqrt().clamp(sy_lo, sy_hi);
        ((mx, my), (sx, sy), false)
    };
    let wx: Vec<f64> = (0..width)
        .map(|x| (-(x as f64 - mu.0).powi(2) / (2.0 * sigma.0 * sigma.0)).exp())
        .collect();
    let wy: Vec<f64> = (0..height)
        .map(|y| (-(y as f64 - mu.1).powi(2) / (2.0 * sigma.1 * sigma.1)).exp())
        .collect();
    let weights = wy
        .iter()
        .flat_map(|&a| wx.iter().map(move |&b| a * b))
        .collect();
    PlumeWeightField {
        height,
        width,
        weights,
        mu,
        sigma,
        fallback,
    }
}

/// Softmax over the class axis of `[N, K, H, W]` logits, foreground
/// (class 1) channel only: `[N, H, W]`.
pub fn foreground_probs<T: Real>(seg_logits: &Tensor<T>) -> Result<Tensor<T>> {
    if seg_logits.ndim() != 4 || seg_logits.dim(1) < 2 {
        return Err(Error::Geometry(format!(
            "segmentation logits must be [N, K≥2, H, W], got {:?}",
            seg_logits.shape()
        )));
    }
    let (n, h, w) = (seg_logits.dim(0), seg_logits.dim(2), seg_logits.dim(3));
    let probs = seg_logits.permute(&[0, 2, 3, 1])?.softmax_lastdim()?;
    Ok(probs.narrow(3, 1, 1)?.reshape(&[n, h, w])?)
}

/// `[N, K, H, W]` logits as `[N·H·W, K]` rows in pixel order.
pub fn pixels_by_class<T: Real>(seg_logits: &Tensor<T>) -> Result<Tensor<T>> {
    let s = seg_logits.shape();
    Ok(seg_logits
        .permute(&[0, 2, 3, 1])?
        .reshape(&[s[0] * s[2] * s[3], s[1]])?)
}

/// `(N, H·W)` of an `[N, H, W]` or `[H, W]` map.
fn image_dims<T: Real>(pred: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match pred.shape() {
        [h, w] => Ok((1, *h, *w)),
        [n, h, w] => Ok((*n, *h, *w)),
        s => Err(Error::Geometry(format!(
            "foreground map must be [H, W] or [N, H, W], got {s:?}"
        ))),
    }
}

fn check_binary(target: &[u8], expected: usize) -> Result<()> {
    if target.len() != expected {
        return Err(Error::Data(format!(
            "mask has {} pixels, prediction has {expected}",
            target.len()
        )));
    }
    if let Some(v) = target.iter().find(|&&v| v > 1) {
        return Err(Error::Data(format!("mask value {v} outside {{0, 1}}")));
    }
    Ok(())
}

/// `1 − (2·Σ w·y·ŷ + ε) / (Σ w·y + Σ w·ŷ + ε)` per image, averaged. The
/// weights are constants (no gradient); `None` means uniform weights.
pub fn weighted_dice_loss<T: Real>(
    pred_fg: &Tensor<T>,
    target: &[u8],
    weights: Option<&[f64]>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, h, w) = image_dims(pred_fg)?;
    check_binary(target, n * h * w)?;
    if let Some(wts) = weights {
        if wts.len() != target.len() {
            return Err(Error::Geometry(format!(
                "weight field has {} entries for {} pixels",
                wts.len(),
                target.len()
            )));
        }
    }
    let weight = |i: usize| weights.map_or(1.0, |wts| wts[i]);
    let wy: Vec<f64> = target
        .iter()
        .enumerate()
        .map(|(i, &y)| weight(i) * f64::from(y))
        .collect();
    let target_mass: Vec<f64> = wy.chunks(h * w).map(|c| c.iter().sum()).collect();

    let pred = pred_fg.reshape(&[n, h * w])?;
    let wy_t = Tensor::<T>::from_f64(&wy, &[n, h * w])?;
    let inter = pred.mul(&wy_t)?.sum_trailing(1)?;
    let pred_mass = match weights {
        Some(wts) => pred
            .mul(&Tensor::from_f64(wts, &[n, h * w])?)?
            .sum_trailing(1)?,
        None => pred.sum_trailing(1)?,
    };
    let num = inter.mul_scalar(2.0)?.add_scalar(eps)?;
    let den = pred_mass
        .add(&Tensor::from_f64(&target_mass, &[n])?)?
        .add_scalar(eps)?;
    Ok(num.div(&den)?.mean_all()?.neg()?.add_scalar(1.0)?)
}

pub fn dice_loss<T: Real>(pred_fg: &Tensor<T>, target: &[u8], eps: f64) -> Result<Tensor<T>> {
    weighted_dice_loss(pred_fg, target, None, eps)
}

/// Plume fields for every image of an `[N, H, W]` (or `[H, W]`) map.
pub fn plume_fields<T: Real>(pred_fg: &Tensor<T>) -> Result<Vec<PlumeWeightField>> {
    let (_, h, w) = image_dims(pred_fg)?;
    let values = pred_fg.to_f64_vec();
    Ok(values
        .chunks(h * w)
        .map(|img| gaussian_plume_weights(img, h, w))
        .collect())
}

/// Dice loss weighted by the Gaussian plume field fitted to the current
/// prediction. The field is recomputed from `pred_fg` and then held fixed:
/// no gradient flows through μ, σ or w.
pub fn gpw_dice_loss<T: Real>(pred_fg: &Tensor<T>, target: &[u8], eps: f64) -> Result<Tensor<T>> {
    let weights: Vec<f64> = plume_fields(pred_fg)?
        .into_iter()
        .flat_map(|f| f.weights)
        .collect();
    weighted_dice_loss(pred_fg, target, Some(&weights), eps)
}

/// Log-probability of the target class at every non-ignored row of
/// `[..., K]` logits.
fn target_log_probs<T: Real>(
    op: &str,
    logits: &Tensor<T>,
    targets: &[usize],
    ignore_index: Option<usize>,
) -> Result<Option<Tensor<T>>> {
    let k = *logits
        .shape()
        .last()
        .ok_or_else(|| Error::Geometry(format!("{op}: scalar logits")))?;
    let rows = logits.numel() / k;
    if targets.len() != rows {
        return Err(Error::Data(format!(
            "{op}: {} targets for {rows} logit rows",
            targets.len()
        )));
    }
    let mut picks = Vec::with_capacity(rows);
    for (r, &t) in targets.iter().enumerate() {
        if Some(t) == ignore_index {
            continue;
        }
        if t >= k {
            return Err(Error::Data(format!("{op}: target {t} outside [0, {k})")));
        }
        picks.push(r * k + t);
    }
    if picks.is_empty() {
        return Ok(None);
    }
    Ok(Some(logits.log_softmax_lastdim()?.take(&picks)?))
}

/// Mean negative log-likelihood of the target class over the last axis,
/// skipping `ignore_index` positions. Zero when every position is ignored.
pub fn cross_entropy_loss<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    ignore_index: Option<usize>,
) -> Result<Tensor<T>> {
    match target_log_probs("cross_entropy", logits, targets, ignore_index)? {
        Some(lp) => Ok(lp.mean_all()?.neg()?),
        None => Ok(Tensor::zeros(&[1])),
    }
}

/// Mean of `−α·(1 − p_t)^γ·ln p_t`. With γ = 0 the modulating factor is
/// skipped entirely, so `γ = 0, α = 1` reproduces cross-entropy exactly.
pub fn focal_loss<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    gamma: f64,
    alpha: f64,
) -> Result<Tensor<T>> {
    if gamma < 0.0 {
        return Err(Error::Config(format!(
            "loss.focal_gamma = {gamma} must be ≥ 0"
        )));
    }
    let Some(lp) = target_log_probs("focal", logits, targets, None)? else {
        return Ok(Tensor::zeros(&[1]));
    };
    let per = if gamma == 0.0 {
        lp
    } else {
        let modulator = lp.exp()?.neg()?.add_scalar(1.0)?.powf(gamma)?;
        modulator.mul(&lp)?
    };
    Ok(per.mul_scalar(alpha)?.mean_all()?.neg()?)
}

/// Segmentation objective selected by `cfg.seg_loss` for `[N, K, H, W]`
/// logits and a row-major `[N, H, W]` mask.
pub fn segmentation_loss<T: Real>(
    seg_logits: &Tensor<T>,
    mask: &[u8],
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    let as_index = || mask.iter().map(|&v| v as usize).collect::<Vec<_>>();
    match cfg.seg_loss {
        SegLoss::CrossEntropy => {
            cross_entropy_loss(&pixels_by_class(seg_logits)?, &as_index(), None)
        }
        SegLoss::Focal => focal_loss(
            &pixels_by_class(seg_logits)?,
            &as_index(),
            cfg.focal_gamma,
            cfg.focal_alpha,
        ),
        SegLoss::Dice => dice_loss(&foreground_probs(seg_logits)?, mask, cfg.dice_eps),
        SegLoss::GaussianPlume => gpw_dice_loss(&foreground_probs(seg_logits)?, mask, cfg.dice_eps),
    }
}

#[derive(Clone, Debug)]
pub struct LossParts<T: Real> {
    pub total: Tensor<T>,
    pub seg: Tensor<T>,
    pub cls: Tensor<T>,
}

/// `λ_seg·seg + λ_cls·CE(diet)`, with components reported separately.
pub fn multi_task_loss<T: Real>(
    seg_logits: &Tensor<T>,
    mask: &[u8],
    cls_logits: &Tensor<T>,
    diet: &[usize],
    cfg: &LossConfig,
) -> Result<LossParts<T>> {
    if seg_logits.dim(0) != cls_logits.dim(0) || diet.len() != cls_logits.dim(0) {
        return Err(Error::Data(format!(
            "batch mismatch: {} segmentation, {} classification logits, {} labels",
            seg_logits.dim(0),
            cls_logits.dim(0),
            diet.len()
        )));
    }
    let seg = segmentation_loss(seg_logits, mask, cfg)?;
    let cls = cross_entropy_loss(cls_logits, diet, None)?;
    let total = seg
        .mul_scalar(cfg.seg_weight)?
        .add(&cls.mul_scalar(cfg.cls_weight)?)?;
    Ok(LossParts { total, seg, cls })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(v, shape).unwrap()
    }

    #[test]
    fn single_pixel_mass_clamps_to_lower_bounds() {
        let (h, w) = (80, 100);
        let mut p = vec![0.0; h * w];
        p[30 * w + 17] = 1.0;
        let f = gaussian_plume_weights(&p, h, w);
        assert_eq!(f.mu, (17.0, 30.0));
        assert_eq!(f.sigma, (5.0, 4.0));
        assert_eq!(f.at(17, 30), 1.0);
        for &(x, y) in &[(0usize, 0usize), (20, 33), (99, 79), (17, 10)] {
            let dx = x as f64 - 17.0;
            let dy = y as f64 - 30.0;
            let expect = (-dx * dx / 50.0 - dy * dy / 32.0).exp();
            assert!((f.at(x, y) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_mass_falls_back_to_centre() {
        let f = gaussian_plume_weights(&[0.0; 12], 3, 4);
        assert!(f.fallback);
        assert_eq!(f.mu, (1.5, 1.0));
        assert_eq!(f.sigma, (2.0, 1.5));
    }

    #[test]
    fn symmetric_mass_is_centred() {
        let mut p = vec![0.0; 25];
        p[6] = 0.5;
        p[18] = 0.5;
        let f = gaussian_plume_weights(&p, 5, 5);
        assert_eq!(f.mu, (2.0, 2.0));
    }

    #[test]
    fn dice_closed_forms() {
        let eps = 1e-6;
        let target: Vec<u8> = (0..16).map(|i| u8::from(i < 8)).collect();
        let pred: Vec<f64> = (0..16)
            .map(|i| if (4..12).contains(&i) { 1.0 } else { 0.0 })
            .collect();
        let l = dice_loss(&map(&pred, &[4, 4]), &target, eps)
            .unwrap()
            .item();
        assert!((l - (1.0 - (8.0 + eps) / (16.0 + eps))).abs() < 1e-12);

        let empty = dice_loss(&map(&[0.0; 16], &[4, 4]), &[0; 16], eps)
            .unwrap()
            .item();
        assert_eq!(empty, 0.0);

        let perfect: Vec<f64> = target.iter().map(|&v| f64::from(v)).collect();
        let l = gpw_dice_loss(&map(&perfect, &[4, 4]), &target, eps)
            .unwrap()
            .item();
        assert!(l <= 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let logits = map(&[0.3; 12], &[4, 3]);
        let l = cross_entropy_loss(&logits, &[0, 1, 2, 1], None)
            .unwrap()
            .item();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        let bad = cross_entropy_loss(&logits, &[0, 1, 3, 1], None);
        assert!(matches!(bad, Err(Error::Data(_))));
    }

    #[test]
    fn ignored_positions_do_not_count() {
        let logits = map(&[2.0, -1.0, 0.0, 0.0], &[2, 2]);
        let all = cross_entropy_loss(&logits, &[0, 1], Some(1))
            .unwrap()
            .item();
        let one = cross_entropy_loss(&logits.narrow(0, 0, 1).unwrap(), &[0], None)
            .unwrap()
            .item();
        assert_eq!(all, one);
    }

    #[test]
    fn focal_uniform_two_class() {
        let logits = map(&[0.0; 6], &[3, 2]);
        let l = focal_loss(&logits, &[0, 1, 1], 2.0, 0.25).unwrap().item();
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
    }
}
