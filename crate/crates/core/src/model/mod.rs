//! The full segmentation + diet-classification network.

pub mod encoder;
pub mod heads;
pub mod layers;

use gastwin_tensor::{Real, RngState, Tensor};

pub use encoder::{
    multi_head_attention, AttentionBlock, Block, EfficientAttention, FeaturePyramid,
    LocalAttention, MixFfn, MixTwinEncoder, PatchEmbed, Stage,
};
pub use heads::{segment, stage_channels, DecoderIntermediates, DietClassifier, LrAspp};
pub use layers::{
    map_to_tokens, tokens_to_map, Conv2d, LayerNorm, Linear, Mode, Module, NamedParam, ParamGroup,
    ParamSink, LN_EPS,
};

use crate::config::ModelConfig;
use crate::error::Result;

/// Fixed per-pixel input standardization applied before the encoder.
/// Without it a flat patch is invariant to its intensity after the patch
/// embedding's layer norm.
pub const INPUT_MEAN: f64 = 0.45;
pub const INPUT_STD: f64 = 0.226;

/// Output of one forward pass.
#[derive(Clone, Debug)]
pub struct Prediction<T: Real> {
    /// `[N, K, H, W]` segmentation logits at input resolution.
    pub seg_logits: Tensor<T>,
    /// `[N, diet classes]` logits.
    pub diet_logits: Tensor<T>,
}

pub struct GasTwinFormer<T: Real> {
    pub config: ModelConfig,
    pub encoder: MixTwinEncoder<T>,
    pub decoder: LrAspp<T>,
    pub classifier: DietClassifier<T>,
}

impl<T: Real> GasTwinFormer<T> {
    /// Builds and initializes every layer from `config.seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(config.seed);
        let channels = stage_channels(config);
        let encoder = MixTwinEncoder::new(config, &mut rng);
        let decoder = LrAspp::new(&config.decoder, &channels, &mut rng);
        let classifier = DietClassifier::new(&config.classifier, &channels, &mut rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            classifier,
        })
    }

    pub fn forward(&self, image: &Tensor<T>, mode: &mut Mode) -> Result<Prediction<T>> {
        let x = image.add_scalar(-INPUT_MEAN)?.mul_scalar(1.0 / INPUT_STD)?;
        let pyr = self.encoder.forward(&x, mode)?;
        let seg_logits = self.decoder.forward(&pyr, image.dim(2), image.dim(3))?;
        let diet_logits = self.classifier.forward(&pyr, mode)?;
        Ok(Prediction {
            seg_logits,
            diet_logits,
        })
    }

    /// Every trainable tensor with a stable dotted name and optimizer group.
    pub fn named_params(&self) -> Vec<NamedParam<T>> {
        let mut out = Vec::new();
        self.encoder
            .collect(&mut ParamSink::new(&mut out, ParamGroup::Backbone).scope("encoder"));
        let mut head = ParamSink::new(&mut out, ParamGroup::Head);
        self.decoder.collect(&mut head.scope("decoder"));
        self.classifier.collect(&mut head.scope("classifier"));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for p in self.named_params() {
            p.tensor.zero_grad();
        }
    }
}
