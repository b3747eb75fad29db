//! Single-image prediction at the image's own resolution.

use gastwin_tensor::{no_grad, Real};

use crate::data::{collate, resize_pair, Diet, Sample};
use crate::error::{Error, Result};
use crate::model::{segment, GasTwinFormer, Mode};

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub height: usize,
    pub width: usize,
    /// Row-major `{0, 1}` mask at the input image's size.
    pub mask: Vec<u8>,
    pub diet_class: usize,
    pub diet_probs: Vec<f64>,
}

/// Diet token for class `i` when the classifier has the three standard
/// classes, otherwise the index.
pub fn class_name(i: usize, classes: usize) -> String {
    match Diet::from_index(i) {
        Some(d) if classes == 3 => d.token().to_string(),
        _ => i.to_string(),
    }
}

impl Inference {
    /// `{"diet_class": "MD", "diet_probs": {"HF": p, "MD": p, "HG": p}}`.
    pub fn sidecar_json(&self) -> String {
        let k = self.diet_probs.len();
        let probs: serde_json::Map<String, serde_json::Value> = self
            .diet_probs
            .iter()
            .enumerate()
            .map(|(i, &p)| (class_name(i, k), serde_json::json!(p)))
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({
            "diet_class": class_name(self.diet_class, k),
            "diet_probs": probs,
        }))
        .expect("sidecar serializes")
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Resizes to the model input, predicts, and maps the mask back with the
/// same nearest-neighbour rule used for ground truth.
pub fn infer<T: Real>(
    model: &GasTwinFormer<T>,
    gray: &[f32],
    height: usize,
    width: usize,
) -> Result<Inference> {
    if gray.len() != height * width || height == 0 || width == 0 {
        return Err(Error::Data(format!(
            "image buffer holds {} values for {height}x{width}",
            gray.len()
        )));
    }
    let sample = Sample {
        id: "input".into(),
        height,
        width,
        gray: gray.to_vec(),
        mask: vec![0; height * width],
        diet: Diet::HighForage,
    };
    let (ih, iw) = model.config.input_size;
    let resized = resize_pair(&sample, (ih, iw))?;
    let (x, _, _) = collate::<T>(&[&resized])?;
    let out = no_grad(|| model.forward(&x, &mut Mode::Eval))?;
    let small = segment(&out.seg_logits)?;
    let mut mask = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = (y * ih / height).min(ih - 1);
        for x in 0..width {
            let sx = (x * iw / width).min(iw - 1);
            mask.push(small[sy * iw + sx]);
        }
    }
    let diet_probs = softmax(&out.diet_logits.to_f64_vec());
    let diet_class = crate::train::argmax(&diet_probs);
    Ok(Inference {
        height,
        width,
        mask,
        diet_class,
        diet_probs,
    })
}
