//! Four-stage hierarchical encoder mixing efficient (spatially reduced) and
//! locally-grouped (windowed) self-attention, each followed by a
//! convolutional feed-forward block.

use gastwin_tensor::{Conv2dSpec, Real, RngState, Tensor};

use super::layers::{
    map_to_tokens, tokens_to_map, Conv2d, LayerNorm, Linear, Mode, Module, ParamSink,
};
use crate::config::{Attention, ModelConfig, StageConfig};
use crate::error::{Error, Result};

fn check_tokens<T: Real>(op: &str, x: &Tensor<T>, h: usize, w: usize) -> Result<()> {
    if x.ndim() != 3 || x.dim(1) != h * w {
        return Err(Error::Geometry(format!(
            "{op}: token tensor {:?} does not hold a {h}x{w} map",
            x.shape()
        )));
    }
    Ok(())
}

/// Multi-head scaled dot-product attention,
/// `softmax(Q·Kᵀ / √d_head)·V` per head, on `[B, T, C]` queries and
/// `[B, S, C]` keys/values. Returns `[B, T, C]`.
pub fn multi_head_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let (b, t, c) = (q.dim(0), q.dim(1), q.dim(2));
    let s = k.dim(1);
    let d = c / heads;
    let qh = q.reshape(&[b, t, heads, d])?.permute(&[0, 2, 1, 3])?;
    let kt = k.reshape(&[b, s, heads, d])?.permute(&[0, 2, 3, 1])?;
    let vh = v.reshape(&[b, s, heads, d])?.permute(&[0, 2, 1, 3])?;
    let scores = qh.matmul(&kt)?.mul_scalar(1.0 / (d as f64).sqrt())?;
    let probs = scores.softmax_lastdim()?;
    let out = probs.matmul(&vh)?;
    Ok(out.permute(&[0, 2, 1, 3])?.reshape(&[b, t, c])?)
}

/// Strided convolution producing stage tokens, then layer normalization.
pub struct PatchEmbed<T: Real> {
    pub proj: Conv2d<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Real> PatchEmbed<T> {
    pub fn new(in_ch: usize, cfg: &StageConfig, rng: &mut RngState) -> Self {
        let spec = Conv2dSpec::new(cfg.patch_stride, cfg.patch_padding, 1);
        Self {
            proj: Conv2d::new(in_ch, cfg.out_channels, cfg.patch_kernel, spec, rng),
            norm: LayerNorm::new(cfg.out_channels),
        }
    }

    /// Returns `([N, H'·W', C], H', W')`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, usize, usize)> {
        let map = self.proj.forward(x)?;
        let (h, w) = (map.dim(2), map.dim(3));
        let tokens = self.norm.forward(&map_to_tokens(&map)?)?;
        Ok((tokens, h, w))
    }
}

impl<T: Real> Module<T> for PatchEmbed<T> {
    fn collect(&self, sink: &mut ParamSink<'_, T>) {
        self.proj.collect(&mut sink.scope("proj"));
        self.norm.collect(&mut sink.scope("norm"));
    }
}

/// Keys and values come from the token map downsampled by a kernel = stride
/// = R convolution (skipped when R = 1); queries keep full resolution.
pub struct EfficientAttention<T: Real> {
    pub norm: LayerNorm<T>,
    pub q: Linear<T>,
    pub kv: Linear<T>,
    pub reduce: Option<(Conv2d<T>, LayerNorm<T>)>,
    pub proj: Linear<T>,
    pub heads: usize,
    pub ratio: usize,
    pub dropout: f64,
}

impl<T: Real> EfficientAttention<T> {
    pub fn new(cfg: &StageConfig, dropout: f64, rng: &mut RngState) -> Self {
        let c = cfg.out_channels;
        let r = cfg.reduction_ratio;
        let q = Linear::new(c, c, rng);
        let kv = Linear::new(c, 2 * c, rng);
        let reduce = (r > 1).then(|| {
            (
                Conv2d::new(c, c, r, Conv2dSpec::new(r, 0, 1), rng),
                LayerNorm::new(c),
            )
        });
        Self {
            norm: LayerNorm::new(c),
            q,
            kv,
            reduce,
            proj: Linear::new(c, c, rng),
            heads: cfg.heads,
            ratio: r,
            dropout,
        }
    }

    /// Keys/values source: `⌈H/R⌉·⌈W/R⌉` tokens (bottom/right zero-padded to
    /// a multiple of R before the reduction convolution).
    pub fn reduced_tokens(&self, xn: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        match &self.reduce {
            None => Ok(xn.clone()),
            Some((conv, norm)) => {
                let r = self.ratio;
                let map = tokens_to_map(xn, h, w)?;
                let (ph, pw) = (h.div_ceil(r) * r - h, w.div_ceil(r) * r - w);
                let map = map.pad(&[(0, 0), (0, 0), (0, ph), (0, pw)])?;
                norm.forward(&map_to_tokens(&conv.forward(&map)?)?)
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>, h: usize, w: usize, mode: &mut Mode) -> Result<Tensor<T>> {
        check_tokens("efficient_attention", x, h, w)?;
        let c = x.dim(2);
        let xn = self.norm.forward(x)?;
        let q = self.q.forward(&xn)?;
        let kv = self.kv.forward(&self.reduced_tokens(&xn, h, w)?)?;
        let k = kv.narrow(2, 0, c)?;
        let v = kv.narrow(2, c, c)?;
        let attn = multi_head_attention(&q, &k, &v, self.heads)?;
        let out = mode.dropout(&self.proj.forward(&attn)?, self.dropout)?;
        Ok(x.add(&out)?)
    }
}

impl<T: Real> Module<T> for EfficientAttention<T> {
    fn collect(&self, sink: &mut ParamSink<'_, T>) {
        self.norm.collect(&mut sink.scope("norm"));
        self.q.collect(&mut sink.scope("q"));
        self.kv.collect(&mut sink.scope("kv"));
        if let Some((conv, norm)) = &self.reduce {
            conv.collect(&mut sink.scope("sr"));
            norm.collect(&mut sink.scope("sr_norm"));
        }
        self.proj.collect(&mut sink.scope("proj"));
    }
}

/// Full self-attention inside non-overlapping `w1 × w2` windows. The map is
/// zero-padded on the bottom/right to window multiples; padded tokens take
/// part in their window's attention and are stripped afterwards.
pub struct LocalAttention<T: Real> {
    pub norm: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
    pub window: (usize, usize),
    pub dropout: f64,
}

impl<T: Real> LocalAttention<T> {
    pub fn new(cfg: &StageConfig, dropout: f64, rng: &mut RngState) -> Self {
        let c = cfg.out_channels;
        Self {
            norm: LayerNorm::new(c),
            qkv: Linear::new(c, 3 * c, rng),
            proj: Linear::new(c, c, rng),
            heads: cfg.heads,
            window: cfg.window,
            dropout,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, h: usize, w: usize, mode: &mut Mode) -> Result<Tensor<T>> {
        check_tokens("locally_grouped_attention", x, h, w)?;
        let (n, c) = (x.dim(0), x.dim(2));
        let (w1, w2) = self.window;
        let (nh, nw) = (h.div_ceil(w1), w.div_ceil(w2));
        let (hp, wp) = (nh * w1, nw * w2);
        let xn = self.norm.forward(x)?.reshape(&[n, h, w, c])?;
        let padded = xn.pad(&[(0, 0), (0, hp - h), (0, wp - w), (0, 0)])?;
        let windows = padded
            .reshape(&[n, nh, w1, nw, w2, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[n * nh * nw, w1 * w2, c])?;
        let qkv = self.qkv.forward(&windows)?;
        let q = qkv.narrow(2, 0, c)?;
        let k = qkv.narrow(2, c, c)?;
        let v = qkv.narrow(2, 2 * c, c)?;
        let attn = multi_head_attention(&q, &k, &v, self.heads)?;
        let merged = attn
            .reshape(&[n, nh, nw, w1, w2, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[n, hp, wp, c])?
            .narrow(1, 0, h)?
            .narrow(2, 0, w)?
            .reshape(&[n, h * w, c])?;
        let out = mode.dropout(&self.proj.forward(&merged)?, self.dropout)?;
        Ok(x.add(&out)?)
    }
}

impl<T: Real> Module<T> for LocalAttention<T> {
    fn collect(&self, sink: &mut ParamSink<'_, T>) {
        self.norm.collect(&mut sink.scope("norm"));
        self.qkv.collect(&mut sink.scope("qkv"));
        self.proj.collect(&mut sink.scope("proj"));
    }
}

/// `x + fc2(gelu(dwconv3x3(fc1(norm(x)))))`.
pub struct MixFfn<T: Real> {
    pub norm: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub dwconv: Conv2d<T>,
    pub fc2: Linear<T>,
    pub dropout: f64,
}

impl<T: Real> MixFfn<T> {
    pub fn new(cfg: &StageConfig, dropout: f64, rng: &mut RngState) -> Self {
        let c = cfg.out_channels;
        let hidden = c * cfg.mlp_expansion;
        Self {
            norm: LayerNorm::new(c),
            fc1: Linear::new(c, hidden, rng),
            dwconv: Conv2d::new(hidden, hidden, 3, Conv2dSpec::new(1, 1, hidden), rng),
            fc2: Linear::new(hidden, c, rng),
            dropout,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, h: usize, w: usize, mode: &mut Mode) -> Result<Tensor<T>> {
        check_tokens("mix_ffn", x, h, w)?;
        let hidden = self.fc1.forward(&self.norm.forward(x)?)?;
        let map = self
            .dwconv
            .forward(&tokens_to_map(&hidden, h, w)?)?
            .gelu()?;
        let out = self.fc2.forward(&map_to_tokens(&map)?)?;
        let out = mode.dropout(&out, self.dropout)?;
        Ok(x.add(&out)?)
    }
}

impl<T: Real> Module<T> for MixFfn<T> {
    fn collect(&self, sink: &mut ParamSink<'_, T>) {
        self.norm.collect(&mut sink.scope("norm"));
        self.fc1.collect(&mut sink.scope("fc1"));
        self.dwconv.collect(&mut sink.scope("dwconv"));
        self.fc2.collect(&mut sink.scope("fc2"));
    }
}

pub enum AttentionBlock<T: Real> {
    Efficient(EfficientAttention<T>),
    Local(LocalAttention<T>),
}

impl<T: Real> AttentionBlock<T> {
    pub fn kind(&self) -> Attention {
        match self {
            AttentionBlock::Efficient(_) => Attention::Efficient,
            AttentionBlock::Local(_) => Attention::Local,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, h: usize, w: usize, mode: &mut Mode) -> Result<Tensor<T>> {
        match self {
            AttentionBlock::Efficient(a) => a.forward(x, h, w, mode),
            AttentionBlock::Local(a) => a.forward(x, h, w, mode),
        }
    }
}

/// One pattern character: attention followed by Mix-FFN.
pub struct Block<T: Real> {
    pub attn: AttentionBlock<T>,
    pub ffn: MixFfn<T>,
}

impl<T: Real> Module<T> for Block<T> {
    fn collect(&self, sink: &mut ParamSink<'_, T>) {
        match &self.attn {
            AttentionBlock::Efficient(a) => a.collect(&mut sink.scope("attn")),
            AttentionBlock::Local(a) => a.collect(&mut sink.scope("attn")),
        }
        self.ffn.collect(&mut sink.scope("ffn"));
    }
}

pub struct Stage<T: Real> {
    pub embed: PatchEmbed<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
}

impl<T: Real> Stage<T> {
    pub fn new(in_ch: usize, cfg: &StageConfig, dropout: f64, rng: &mut RngState) -> Self {
        let embed = PatchEmbed::new(in_ch, cfg, rng);
        let blocks = cfg
            .pattern
            .iter()
            .map(|kind| {
                let attn = match kind {
                    Attention::Efficient => {
                        AttentionBlock::Efficient(EfficientAttention::new(cfg, dropout, rng))
                    }
                    Attention::Local => {
                        AttentionBlock::Local(LocalAttention::new(cfg, dropout, rng))
                    }
                };
                Block {
                    attn,
                    ffn: MixFfn::new(cfg, dropout, rng),
                }
            })
            .collect();
        Self {
            embed,
            blocks,
            norm: LayerNorm::new(cfg.out_channels),
        }
    }

    /// NCHW in, NCHW out at the stage's resolution.
    pub fn forward(&self, x: &Tensor<T>, mode: &mut Mode) -> Result<Tensor<T>> {
        let (mut tokens, h, w) = self.embed.forward(x)?;
        for block in &self.blocks {
            tokens = block.attn.forward(&tokens, h, w, mode)?;
            tokens = block.ffn.forward(&tokens, h, w, mode)?;
        }
        tokens_to_map(&self.norm.forward(&tokens)?, h, w)
    }
}

impl<T: Real> Module<T> for Stage<T> {
    fn collect(&self, sink: &mut ParamSink<'_, T>) {
        self.embed.collect(&mut sink.scope("patch_embed"));
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&mut sink.scope(format!("blocks.{i}")));
        }
        self.norm.collect(&mut sink.scope("norm"));
    }
}

/// The four encoder outputs F1..F4, each NCHW.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Real> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    /// One-based stage access: `stage(1)` is F1.
    pub fn stage(&self, i: usize) -> &Tensor<T> {
        &self.levels[i - 1]
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|t| t.shape().to_vec()).collect()
    }
}

pub struct MixTwinEncoder<T: Real> {
    pub stages: Vec<Stage<T>>,
}

impl<T: Real> MixTwinEncoder<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut RngState) -> Self {
        let mut in_ch = cfg.in_channels;
        let stages = cfg
            .stages
            .iter()
            .map(|s| {
                let stage = Stage::new(in_ch, s, cfg.encoder_dropout, rng);
                in_ch = s.out_channels;
                stage
            })
            .collect();
        Self { stages }
    }

    pub fn forward(&self, image: &Tensor<T>, mode: &mut Mode) -> Result<FeaturePyramid<T>> {
        if image.ndim() != 4 {
            return Err(Error::Geometry(format!(
                "encoder input {:?} is not NCHW",
                image.shape()
            )));
        }
        let (h, w) = (image.dim(2), image.dim(3));
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Geometry(format!(
                "input extents {h}x{w} must be multiples of 32"
            )));
        }
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut x = image.clone();
        for stage in &self.stages {
            x = stage.forward(&x, mode)?;
            levels.push(x.clone());
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn block_count(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }
}

impl<T: Real> Module<T> for MixTwinEncoder<T> {
    fn collect(&self, sink: &mut ParamSink<'_, T>) {
        for (i, s) in self.stages.iter().enumerate() {
            s.collect(&mut sink.scope(format!("stages.{i}")));
        }
    }
}
