mod common;

use common::{randn, tensor};
use gastwin_core::config::{ModelConfig, SegLoss};
use gastwin_core::losses::{
    cross_entropy_loss, dice_loss, focal_loss, gaussian_plume_weights, gpw_dice_loss,
    multi_task_loss, weighted_dice_loss, PlumeWeightField,
};
use gastwin_core::selftest::{
    measure_loss_gradients, measure_loss_identities, measure_plume_invariants,
};
use gastwin_tensor::RngState;
use proptest::prelude::*;

const EPS: f64 = 1e-6;

fn scalar(t: gastwin_tensor::Tensor<f64>) -> f64 {
    t.item()
}

#[test]
fn single_pixel_mass_fits_lower_bounds_and_gaussian_profile() {
    let (h, w) = (80, 100);
    let (x0, y0) = (37, 21);
    let mut p = vec![0.0; h * w];
    p[y0 * w + x0] = 1.0;
    let f = gaussian_plume_weights(&p, h, w);
    assert_eq!(f.mu, (37.0, 21.0));
    assert_eq!(f.sigma, (5.0, 4.0));
    assert!(!f.fallback);
    for (x, y) in [(37, 21), (0, 0), (99, 79), (40, 25), (30, 60)] {
        let dx = x as f64 - 37.0;
        let dy = y as f64 - 21.0;
        let want = (-dx * dx / 50.0 - dy * dy / 32.0).exp();
        assert!((f.at(x, y) - want).abs() < 1e-12);
    }
    assert_eq!(f.at(37, 21), 1.0);
}

#[test]
fn symmetric_mass_centres_exactly() {
    let (h, w) = (6, 8);
    let mut p = vec![0.0; h * w];
    for (x, y) in [(1, 1), (6, 4), (6, 1), (1, 4)] {
        p[y * w + x] = 0.7;
    }
    let f = gaussian_plume_weights(&p, h, w);
    assert_eq!(f.mu, (3.5, 2.5));
}

#[test]
fn zero_field_falls_back_to_centred_wide_weights() {
    let f = gaussian_plume_weights(&[0.0; 12 * 10], 12, 10);
    assert!(f.fallback);
    assert_eq!(f.mu, (4.5, 5.5));
    let ((_, sx), (_, sy)) = PlumeWeightField::sigma_bounds(12, 10);
    assert_eq!(f.sigma, (sx, sy));
    assert_eq!(f.sigma, (5.0, 6.0));
}

#[test]
fn plume_field_invariants_hold_on_random_fields() {
    let inv = measure_plume_invariants(1000, 17);
    assert_eq!(inv.fields, 1000);
    assert_eq!(inv.peak_violations, 0);
    assert_eq!(inv.bound_violations, 0);
    assert!(inv.zero_field_fallback);
}

fn grid(cells: &[(usize, usize)]) -> Vec<u8> {
    let mut m = vec![0u8; 16];
    for &(y, x) in cells {
        m[y * 4 + x] = 1;
    }
    m
}

#[test]
fn gpw_dice_equals_explicit_weighted_sum() {
    // near-uniform soft prediction: σ at or near its upper bound
    let mut rng = RngState::new(3);
    let pred: Vec<f64> = (0..16).map(|_| 0.45 + 0.1 * rng.uniform()).collect();
    let target = grid(&[(0, 0), (0, 1), (1, 1), (2, 2), (3, 3)]);
    let f = gaussian_plume_weights(&pred, 4, 4);
    let (mut inter, mut py, mut yy) = (0.0, 0.0, 0.0);
    for i in 0..16 {
        let y = f64::from(target[i]);
        inter += f.weights[i] * y * pred[i];
        py += f.weights[i] * pred[i];
        yy += f.weights[i] * y;
    }
    let want = 1.0 - (2.0 * inter + EPS) / (py + yy + EPS);
    let got = scalar(gpw_dice_loss(&tensor(pred, &[4, 4]), &target, EPS).unwrap());
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn uniform_weights_reduce_to_overlap_ratio() {
    // a = 2, b = 4, c = 3
    let pred = grid(&[(0, 0), (0, 1), (1, 0), (3, 3)]);
    let target = grid(&[(0, 0), (0, 1), (2, 2)]);
    let p = tensor(pred.iter().map(|&v| f64::from(v)).collect(), &[4, 4]);
    let got = scalar(weighted_dice_loss(&p, &target, Some(&[0.3; 16]), EPS).unwrap());
    assert!((got - (1.0 - 4.0 / 7.0)).abs() < 1e-6);
    let plain = scalar(dice_loss(&p, &target, EPS).unwrap());
    assert!((got - plain).abs() < 1e-6);
}

#[test]
fn dice_closed_forms() {
    let as_pred = |m: &[u8]| tensor(m.iter().map(|&v| f64::from(v)).collect(), &[4, 4]);
    let left = grid(&[(0, 0), (1, 0), (2, 0)]);
    let right = grid(&[(0, 3), (1, 3)]);
    let disjoint = scalar(dice_loss(&as_pred(&left), &right, EPS).unwrap());
    assert!((disjoint - (1.0 - EPS / (5.0 + EPS))).abs() < 1e-12);

    let top: Vec<(usize, usize)> = (0..2).flat_map(|y| (0..4).map(move |x| (y, x))).collect();
    let mid: Vec<(usize, usize)> = (1..3).flat_map(|y| (0..4).map(move |x| (y, x))).collect();
    let half = scalar(dice_loss(&as_pred(&grid(&top)), &grid(&mid), EPS).unwrap());
    assert!((half - 0.5).abs() < 1e-6);

    let perfect = scalar(dice_loss(&as_pred(&left), &left, EPS).unwrap());
    assert!(perfect <= 1e-6);
    let empty = scalar(gpw_dice_loss(&tensor(vec![0.0; 16], &[4, 4]), &[0; 16], EPS).unwrap());
    assert_eq!(empty, 0.0);
}

#[test]
fn dice_rejects_non_binary_targets() {
    let mut t = vec![0u8; 16];
    t[3] = 2;
    assert!(dice_loss(&tensor(vec![0.5; 16], &[4, 4]), &t, EPS).is_err());
}

#[test]
fn cross_entropy_closed_forms_and_oracle() {
    let sat = tensor(vec![1e4, 0.0, 0.0, 0.0, 1e4, 0.0], &[2, 3]);
    assert!(scalar(cross_entropy_loss(&sat, &[0, 1], None).unwrap()) < 1e-4);
    let uni = tensor(vec![0.7; 8], &[2, 4]);
    assert!((scalar(cross_entropy_loss(&uni, &[3, 1], None).unwrap()) - 4f64.ln()).abs() < 1e-12);

    let mut rng = RngState::new(5);
    let v = randn(&mut rng, 12);
    let targets = [2, 0, 1, 1];
    let want = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = &v[r * 3..r * 3 + 3];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            -(row[t].exp() / z).ln()
        })
        .sum::<f64>()
        / 4.0;
    let got = scalar(cross_entropy_loss(&tensor(v.clone(), &[4, 3]), &targets, None).unwrap());
    assert!((got - want).abs() < 1e-12);

    let ignored =
        scalar(cross_entropy_loss(&tensor(v.clone(), &[4, 3]), &[2, 9, 9, 1], Some(9)).unwrap());
    let both = scalar(
        cross_entropy_loss(
            &tensor([&v[0..3], &v[9..12]].concat(), &[2, 3]),
            &[2, 1],
            None,
        )
        .unwrap(),
    );
    assert!((ignored - both).abs() < 1e-12);
    assert!(cross_entropy_loss(&tensor(v, &[4, 3]), &[0, 0, 3, 0], None).is_err());
}

#[test]
fn focal_closed_forms() {
    let uni = tensor(vec![0.0; 6], &[3, 2]);
    let got = scalar(focal_loss(&uni, &[0, 1, 1], 2.0, 0.25).unwrap());
    assert!((got - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);

    let mut rng = RngState::new(6);
    let v = tensor(randn(&mut rng, 15), &[5, 3]);
    let t = [0, 2, 1, 1, 0];
    let ce = scalar(cross_entropy_loss(&v, &t, None).unwrap());
    assert_eq!(scalar(focal_loss(&v, &t, 0.0, 1.0).unwrap()), ce);
    assert!(focal_loss(&v, &t, -1.0, 1.0).is_err());
}

#[test]
fn focal_vanishes_faster_than_cross_entropy() {
    let mut prev = f64::INFINITY;
    for margin in [2.0, 4.0, 8.0] {
        let l = tensor(vec![margin, 0.0], &[1, 2]);
        let ce = scalar(cross_entropy_loss(&l, &[0], None).unwrap());
        let fl = scalar(focal_loss(&l, &[0], 2.0, 1.0).unwrap());
        let ratio = fl / ce;
        assert!(ratio < prev && ratio < 1.0);
        prev = ratio;
    }
}

fn seg_and_cls(
    rng: &mut RngState,
) -> (
    gastwin_tensor::Tensor<f64>,
    Vec<u8>,
    gastwin_tensor::Tensor<f64>,
    Vec<usize>,
) {
    let seg = tensor(randn(rng, 2 * 2 * 16), &[2, 2, 4, 4]);
    let mask: Vec<u8> = (0..32).map(|i| u8::from(i % 3 == 0)).collect();
    let cls = tensor(randn(rng, 6), &[2, 3]);
    (seg, mask, cls, vec![1, 2])
}

#[test]
fn multi_task_recomposes_components() {
    let mut rng = RngState::new(7);
    let (seg, mask, cls, diet) = seg_and_cls(&mut rng);
    for kind in [
        SegLoss::CrossEntropy,
        SegLoss::Dice,
        SegLoss::Focal,
        SegLoss::GaussianPlume,
    ] {
        let mut cfg = ModelConfig::default().loss;
        cfg.seg_loss = kind;
        cfg.seg_weight = 0.7;
        cfg.cls_weight = 1.9;
        let p = multi_task_loss(&seg, &mask, &cls, &diet, &cfg).unwrap();
        let want = 0.7 * p.seg.item() + 1.9 * p.cls.item();
        assert!((p.total.item() - want).abs() < 1e-12);
        cfg.cls_weight = 0.0;
        let p = multi_task_loss(&seg, &mask, &cls, &diet, &cfg).unwrap();
        assert!((p.total.item() - 0.7 * p.seg.item()).abs() < 1e-15);
    }
}

#[test]
fn multi_task_saturated_prediction_is_near_zero() {
    let mask: Vec<u8> = (0..16).map(|i| u8::from(i < 6)).collect();
    let mut seg = vec![0.0; 32];
    for (i, &m) in mask.iter().enumerate() {
        seg[usize::from(m) * 16 + i] = 50.0;
    }
    let cls = tensor(vec![0.0, 50.0, 0.0], &[1, 3]);
    let mut cfg = ModelConfig::default().loss;
    for kind in [SegLoss::CrossEntropy, SegLoss::GaussianPlume] {
        cfg.seg_loss = kind;
        let p =
            multi_task_loss(&tensor(seg.clone(), &[1, 2, 4, 4]), &mask, &cls, &[1], &cfg).unwrap();
        assert!(p.total.item() < 1e-3, "{kind:?}");
    }
    assert!(multi_task_loss(&tensor(seg, &[1, 2, 4, 4]), &mask, &cls, &[1, 0], &cfg).is_err());
}

#[test]
fn loss_identities_hold() {
    let id = measure_loss_identities(8).unwrap();
    assert!(id.uniform_weight_gap < 1e-6);
    assert_eq!(id.focal_ce_gap, 0.0);
    assert_eq!(id.empty_empty, 0.0);
    assert!(id.perfect <= 1e-6);
}

#[test]
fn loss_gradients_match_finite_differences() {
    for (name, err) in measure_loss_gradients(9).unwrap() {
        assert!(err < 1e-4, "{name}: {err}");
    }
}

proptest! {
    #[test]
    fn losses_are_non_negative_and_finite(
        logits in prop::collection::vec(-20.0f64..20.0, 32),
        bits in prop::collection::vec(0u8..2, 16),
        diet in prop::collection::vec(0usize..3, 1),
    ) {
        let seg = tensor(logits.clone(), &[1, 2, 4, 4]);
        let cls = tensor(logits[..3].to_vec(), &[1, 3]);
        for kind in [SegLoss::CrossEntropy, SegLoss::Dice, SegLoss::Focal, SegLoss::GaussianPlume] {
            let mut cfg = ModelConfig::default().loss;
            cfg.seg_loss = kind;
            let p = multi_task_loss(&seg, &bits, &cls, &diet, &cfg).unwrap();
            for v in [p.total.item(), p.seg.item(), p.cls.item()] {
                prop_assert!(v.is_finite() && v >= 0.0, "{kind:?}: {v}");
            }
        }
    }
}
