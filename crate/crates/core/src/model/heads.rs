//! Segmentation decoder (gated ASPP path plus progressive multi-scale
//! fusion) and the scene-level diet classifier.

use gastwin_tensor::{Real, RngState, Tensor};

use super::encoder::FeaturePyramid;
use super::layers::{Conv2d, Linear, Mode, Module, ParamSink};
use crate::config::{Branch, ClassifierConfig, DecoderConfig, ModelConfig};
use crate::error::{Error, Result};

/// Named tensors from one decoder pass, for inspection and tests.
#[derive(Clone, Debug)]
pub struct DecoderIntermediates<T: Real> {
    /// Sigmoid gate, `[N, c, 1, 1]`.
    pub f_pool: Tensor<T>,
    /// Gated projection of F4.
    pub f_aspp: Tensor<T>,
    /// Projected skip features, one per selected branch (shallow first).
    pub f_branch: Vec<(Branch, Tensor<T>)>,
    /// Fused map at the shallowest selected resolution.
    pub f_out: Tensor<T>,
    /// Class logits at input resolution.
    pub logits: Tensor<T>,
}

pub struct LrAspp<T: Real> {
    pub gate: Conv2d<T>,
    pub aspp: Conv2d<T>,
    /// Projections for the selected branches, in `branches` order.
    pub branch_proj: Vec<Conv2d<T>>,
    /// Fusion convolutions, deepest first.
    pub fuse: Vec<Conv2d<T>>,
    pub classify: Conv2d<T>,
    pub branches: Vec<Branch>,
}

impl<T: Real> LrAspp<T> {
    pub fn new(cfg: &DecoderConfig, stage_channels: &[usize], rng: &mut RngState) -> Self {
        let c = cfg.internal_channels;
        let deep = stage_channels[stage_channels.len() - 1];
        let gate = Conv2d::pointwise(deep, c, rng);
        let aspp = Conv2d::pointwise(deep, c, rng);
        let branch_proj = cfg
            .branches
            .iter()
            .map(|b| Conv2d::pointwise(stage_channels[b.level() - 1], c, rng))
            .collect();
        let fuse = cfg
            .branches
            .iter()
            .map(|_| Conv2d::pointwise(2 * c, c, rng))
            .collect();
        Self {
            gate,
            aspp,
            branch_proj,
            fuse,
            classify: Conv2d::pointwise(c, cfg.num_classes, rng),
            branches: cfg.branches.clone(),
        }
    }

    pub fn forward(
        &self,
        pyr: &FeaturePyramid<T>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor<T>> {
        Ok(self.forward_intermediates(pyr, out_h, out_w)?.logits)
    }

    pub fn forward_intermediates(
        &self,
        pyr: &FeaturePyramid<T>,
        out_h: usize,
        out_w: usize,
    ) -> Result<DecoderIntermediates<T>> {
        let f4 = pyr
            .levels
            .last()
            .ok_or_else(|| Error::Config("decoder received an empty feature pyramid".into()))?;
        let f_pool = self.gate.forward(&f4.global_avg_pool()?)?.sigmoid()?;
        let f_aspp = self.aspp.forward(f4)?.mul(&f_pool)?;

        let mut f_branch = Vec::with_capacity(self.branches.len());
        for (b, proj) in self.branches.iter().zip(&self.branch_proj) {
            let level = b.level();
            if level > pyr.levels.len() {
                return Err(Error::Config(format!(
                    "branch {} needs stage {level}, pyramid has {}",
                    b.name(),
                    pyr.levels.len()
                )));
            }
            f_branch.push((*b, proj.forward(pyr.stage(level))?));
        }

        let mut current = f_aspp.clone();
        for ((_, skip), fuse) in f_branch.iter().zip(&self.fuse).rev() {
            let up = current.bilinear_resize(skip.dim(2), skip.dim(3))?;
            current = fuse.forward(&Tensor::concat(&[&up, skip], 1)?)?;
        }
        let f_out = current;
        let logits = self
            .classify
            .forward(&f_out)?
            .bilinear_resize(out_h, out_w)?;
        Ok(DecoderIntermediates {
            f_pool,
            f_aspp,
            f_branch,
            f_out,
            logits,
        })
    }
}

impl<T: Real> Module<T> for LrAspp<T> {
    fn collect(&self, sink: &mut ParamSink<'_, T>) {
        self.gate.collect(&mut sink.scope("gate"));
        self.aspp.collect(&mut sink.scope("aspp"));
        for (b, p) in self.branches.iter().zip(&self.branch_proj) {
            p.collect(&mut sink.scope(format!("branch_{}", b.name())));
        }
        for (b, f) in self.branches.iter().zip(&self.fuse) {
            f.collect(&mut sink.scope(format!("fuse_{}", b.name())));
        }
        self.classify.collect(&mut sink.scope("classify"));
    }
}

/// Pool → linear → ReLU → dropout → linear.
pub struct DietClassifier<T: Real> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub source_stage: usize,
    pub dropout: f64,
}

impl<T: Real> DietClassifier<T> {
    pub fn new(cfg: &ClassifierConfig, stage_channels: &[usize], rng: &mut RngState) -> Self {
        let c = stage_channels[cfg.source_stage - 1];
        Self {
            fc1: Linear::new(c, cfg.hidden, rng),
            fc2: Linear::new(cfg.hidden, cfg.num_classes, rng),
            source_stage: cfg.source_stage,
            dropout: cfg.dropout,
        }
    }

    pub fn forward(&self, pyr: &FeaturePyramid<T>, mode: &mut Mode) -> Result<Tensor<T>> {
        if self.source_stage > pyr.levels.len() {
            return Err(Error::Config(format!(
                "classifier.stage = {} but the pyramid has {} stages",
                self.source_stage,
                pyr.levels.len()
            )));
        }
        let f = pyr.stage(self.source_stage);
        let pooled = f.global_avg_pool()?.reshape(&[f.dim(0), f.dim(1)])?;
        let hidden = self.fc1.forward(&pooled)?.relu()?;
        let hidden = mode.dropout(&hidden, self.dropout)?;
        self.fc2.forward(&hidden)
    }
}

impl<T: Real> Module<T> for DietClassifier<T> {
    fn collect(&self, sink: &mut ParamSink<'_, T>) {
        self.fc1.collect(&mut sink.scope("fc1"));
        self.fc2.collect(&mut sink.scope("fc2"));
    }
}

/// Per-pixel argmax of `[N, K, H, W]` logits. Ties go to the lower class
/// index.
pub fn segment<T: Real>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    if logits.ndim() != 4 || logits.dim(1) < 2 {
        return Err(Error::Geometry(format!(
            "segment expects [N, K≥2, H, W] logits, got {:?}",
            logits.shape()
        )));
    }
    let (n, k, hw) = (logits.dim(0), logits.dim(1), logits.dim(2) * logits.dim(3));
    let data = logits.data();
    let mut mask = vec![0u8; n * hw];
    for b in 0..n {
        let base = b * k * hw;
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if data[base + c * hw + p] > data[base + best * hw + p] {
                    best = c;
                }
            }
            mask[b * hw + p] = best as u8;
        }
    }
    Ok(mask)
}

/// Channel counts of the four encoder stages.
pub fn stage_channels(cfg: &ModelConfig) -> Vec<usize> {
    cfg.stages.iter().map(|s| s.out_channels).collect()
}
