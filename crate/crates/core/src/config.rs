//! Model, loss, optimizer and schedule configuration, and the line-oriented
//! config file format.
//!
//! # Grammar
//!
//! ```text
//! file    := { line "\n" }
//! line    := blank | comment | entry
//! comment := "#" any*
//! entry   := section "." key "=" value
//! section := "model" | "decoder" | "classifier" | "loss" | "optim" | "data"
//! value   := int | real | string | int-pair | list
//! int-pair:= int ("x" | ",") int          e.g. 512x512, 5x5, 5,7
//! list    := item { "," item }            e.g. EL,EL,EL,EL
//! ```
//!
//! Whitespace around tokens is ignored. Keys not given keep their defaults
//! (see [`ModelConfig::default`]). Unknown keys, malformed values and
//! violated invariants are reported with the line number.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Attention kind of one encoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Attention {
    /// Efficient attention over spatially reduced keys and values.
    Efficient,
    /// Self-attention inside non-overlapping windows.
    Local,
}

impl Attention {
    pub fn letter(self) -> char {
        match self {
            Attention::Efficient => 'E',
            Attention::Local => 'L',
        }
    }
}

/// Parses a pattern string such as `"EL"`.
pub fn parse_pattern(s: &str) -> Result<Vec<Attention>> {
    if s.is_empty() {
        return Err(Error::Config("attention pattern must be non-empty".into()));
    }
    s.chars()
        .map(|c| match c {
            'E' => Ok(Attention::Efficient),
            'L' => Ok(Attention::Local),
            other => Err(Error::Config(format!(
                "attention pattern '{s}' contains '{other}', expected only E or L"
            ))),
        })
        .collect()
}

pub fn pattern_string(p: &[Attention]) -> String {
    p.iter().map(|a| a.letter()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub out_channels: usize,
    pub pattern: Vec<Attention>,
    pub heads: usize,
    pub reduction_ratio: usize,
    pub window: (usize, usize),
    pub mlp_expansion: usize,
    pub patch_kernel: usize,
    pub patch_stride: usize,
    pub patch_padding: usize,
}

impl StageConfig {
    pub fn validate(&self, stage: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("stage {}: {msg}", stage + 1)));
        if self.out_channels == 0
            || self.heads == 0
            || !self.out_channels.is_multiple_of(self.heads)
        {
            return fail(format!(
                "model.channels ({}) must be divisible by model.heads ({})",
                self.out_channels, self.heads
            ));
        }
        if self.pattern.is_empty() {
            return fail("model.pattern must be non-empty".into());
        }
        if self.reduction_ratio == 0 {
            return fail("model.reduction must be ≥ 1".into());
        }
        if self.window.0 == 0 || self.window.1 == 0 {
            return fail("model.window extents must be ≥ 1".into());
        }
        if self.mlp_expansion == 0 {
            return fail("model.mlp_expansion must be ≥ 1".into());
        }
        if self.patch_kernel == 0 || self.patch_stride == 0 {
            return fail("model.patch_kernel and model.patch_stride must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.out_channels / self.heads
    }
}

/// Encoder stage feeding a decoder branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    F1,
    F2,
    F3,
}

impl Branch {
    /// One-based encoder stage.
    pub fn level(self) -> usize {
        match self {
            Branch::F1 => 1,
            Branch::F2 => 2,
            Branch::F3 => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::F1 => "F1",
            Branch::F2 => "F2",
            Branch::F3 => "F3",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F1" => Some(Branch::F1),
            "F2" => Some(Branch::F2),
            "F3" => Some(Branch::F3),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub internal_channels: usize,
    /// Selected shallow branches, kept sorted and unique.
    pub branches: Vec<Branch>,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    /// One-based encoder stage whose features are pooled (2, 3 or 4).
    pub source_stage: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub num_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegLoss {
    CrossEntropy,
    Dice,
    Focal,
    GaussianPlume,
}

impl SegLoss {
    pub fn name(self) -> &'static str {
        match self {
            SegLoss::CrossEntropy => "cross_entropy",
            SegLoss::Dice => "dice",
            SegLoss::Focal => "focal",
            SegLoss::GaussianPlume => "gaussian_plume",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            SegLoss::CrossEntropy,
            SegLoss::Dice,
            SegLoss::Focal,
            SegLoss::GaussianPlume,
        ]
        .into_iter()
        .find(|l| l.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub seg_loss: SegLoss,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_eps: f64,
    pub seg_weight: f64,
    pub cls_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_start_lr: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub poly_power: f64,
    pub head_lr_multiplier: f64,
    pub norm_weight_decay: f64,
}

/// Batching, validation cadence and augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub batch_size: usize,
    pub val_every: usize,
    pub keep_top_k: usize,
    pub augment: bool,
    pub flip_prob: f64,
    /// Additive brightness offset drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Multiplicative contrast factor range around the image mean.
    pub contrast: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stages: Vec<StageConfig>,
    pub decoder: DecoderConfig,
    pub classifier: ClassifierConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    /// Dropout inside attention and feed-forward outputs of the encoder.
    pub encoder_dropout: f64,
    pub in_channels: usize,
    pub input_size: (usize, usize),
    pub seed: u64,
}

impl Default for ModelConfig {
    /// The reference configuration: EL pattern in every stage, widths
    /// {32, 64, 160, 256}, reduction ratios {8, 4, 2, 1}, 5×5 windows,
    /// 128-channel decoder on F1+F2+F3, stage-4 classifier, Gaussian plume
    /// weighted Dice loss, and the 80k-iteration AdamW recipe.
    fn default() -> Self {
        let channels = [32, 64, 160, 256];
        let heads = [1, 2, 5, 8];
        let ratios = [8, 4, 2, 1];
        let stages = (0..4)
            .map(|i| StageConfig {
                out_channels: channels[i],
                pattern: vec![Attention::Efficient, Attention::Local],
                heads: heads[i],
                reduction_ratio: ratios[i],
                window: (5, 5),
                mlp_expansion: 4,
                patch_kernel: if i == 0 { 7 } else { 3 },
                patch_stride: if i == 0 { 4 } else { 2 },
                patch_padding: if i == 0 { 3 } else { 1 },
            })
            .collect();
        ModelConfig {
            stages,
            decoder: DecoderConfig {
                internal_channels: 128,
                branches: vec![Branch::F1, Branch::F2, Branch::F3],
                num_classes: 2,
            },
            classifier: ClassifierConfig {
                source_stage: 4,
                hidden: 256,
                dropout: 0.1,
                num_classes: 3,
            },
            loss: LossConfig {
                seg_loss: SegLoss::GaussianPlume,
                focal_gamma: 2.0,
                focal_alpha: 0.25,
                dice_eps: 1e-6,
                seg_weight: 1.0,
                cls_weight: 1.0,
            },
            optim: OptimConfig {
                base_lr: 6e-5,
                betas: (0.9, 0.999),
                eps: 1e-8,
                weight_decay: 0.01,
                warmup_start_lr: 1e-6,
                warmup_iters: 1500,
                total_iters: 80_000,
                poly_power: 1.0,
                head_lr_multiplier: 10.0,
                norm_weight_decay: 0.0,
            },
            schedule: ScheduleConfig {
                batch_size: 8,
                val_every: 8000,
                keep_top_k: 3,
                augment: true,
                flip_prob: 0.5,
                brightness: 0.125,
                contrast: (0.5, 1.5),
            },
            encoder_dropout: 0.0,
            in_channels: 3,
            input_size: (512, 512),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset for 64×64 synthetic scenes: widths {8, 16, 32, 64},
    /// 32-channel decoder, 64-unit classifier and a 2000-iteration schedule.
    pub fn desk() -> Self {
        let mut cfg = ModelConfig::default();
        let channels = [8, 16, 32, 64];
        let heads = [1, 1, 2, 4];
        for (i, s) in cfg.stages.iter_mut().enumerate() {
            s.out_channels = channels[i];
            s.heads = heads[i];
        }
        cfg.decoder.internal_channels = 32;
        cfg.classifier.hidden = 64;
        cfg.optim.base_lr = 2e-3;
        cfg.optim.warmup_start_lr = 1e-5;
        cfg.optim.warmup_iters = 100;
        cfg.optim.total_iters = 2000;
        cfg.optim.head_lr_multiplier = 1.0;
        cfg.schedule.val_every = 250;
        cfg.input_size = (64, 64);
        cfg
    }

    /// Sets every stage to the same two-letter pattern, e.g. `"LL"`.
    pub fn with_pattern(mut self, pattern: &str) -> Result<Self> {
        let p = parse_pattern(pattern)?;
        for s in &mut self.stages {
            s.pattern = p.clone();
        }
        Ok(self)
    }

    pub fn with_window(mut self, w: usize) -> Self {
        for s in &mut self.stages {
            s.window = (w, w);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::Config(format!(
                "model must have exactly 4 stages, got {}",
                self.stages.len()
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate(i)?;
        }
        if self.in_channels == 0 {
            return Err(Error::Config("model.in_channels must be ≥ 1".into()));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "model.input {h}x{w}: extents must be positive multiples of 32"
            )));
        }
        if self.encoder_dropout < 0.0 || self.encoder_dropout >= 1.0 {
            return Err(Error::Config("model.dropout must lie in [0, 1)".into()));
        }
        let d = &self.decoder;
        if d.internal_channels == 0 {
            return Err(Error::Config("decoder.channels must be ≥ 1".into()));
        }
        if d.num_classes < 2 {
            return Err(Error::Config("decoder.classes must be ≥ 2".into()));
        }
        if d.branches.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(
                "decoder.branches must not repeat a branch".into(),
            ));
        }
        let c = &self.classifier;
        if !(2..=4).contains(&c.source_stage) {
            return Err(Error::Config(format!(
                "classifier.stage must be 2, 3 or 4, got {}",
                c.source_stage
            )));
        }
        if c.hidden == 0 {
            return Err(Error::Config("classifier.hidden must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&c.dropout) {
            return Err(Error::Config(
                "classifier.dropout must lie in [0, 1)".into(),
            ));
        }
        if c.num_classes < 2 {
            return Err(Error::Config("classifier.classes must be ≥ 2".into()));
        }
        let l = &self.loss;
        if l.dice_eps <= 0.0 {
            return Err(Error::Config("loss.dice_eps must be > 0".into()));
        }
        if l.seg_weight < 0.0 || l.cls_weight < 0.0 {
            return Err(Error::Config(
                "loss.seg_weight and loss.cls_weight must be ≥ 0".into(),
            ));
        }
        if l.focal_gamma < 0.0 {
            return Err(Error::Config("loss.focal_gamma must be ≥ 0".into()));
        }
        let o = &self.optim;
        if o.base_lr <= 0.0 {
            return Err(Error::Config("optim.lr must be > 0".into()));
        }
        if o.warmup_iters == 0 || o.warmup_iters >= o.total_iters {
            return Err(Error::Config(format!(
                "optim.warmup_iters ({}) must satisfy 0 < optim.warmup_iters < optim.total_iters ({})",
                o.warmup_iters, o.total_iters
            )));
        }
        if !(0.0..1.0).contains(&o.betas.0) || !(0.0..1.0).contains(&o.betas.1) {
            return Err(Error::Config(
                "optim.beta1 and optim.beta2 must lie in [0, 1)".into(),
            ));
        }
        if o.eps <= 0.0 || o.weight_decay < 0.0 || o.norm_weight_decay < 0.0 {
            return Err(Error::Config(
                "optim.eps must be > 0, optim.weight_decay and optim.norm_weight_decay ≥ 0".into(),
            ));
        }
        if o.poly_power < 0.0 || o.head_lr_multiplier < 0.0 || o.warmup_start_lr < 0.0 {
            return Err(Error::Config(
                "optim.poly_power, optim.head_lr_mult and optim.warmup_start_lr must be ≥ 0".into(),
            ));
        }
        let s = &self.schedule;
        if s.batch_size == 0 || s.val_every == 0 {
            return Err(Error::Config(
                "data.batch_size and data.val_every must be ≥ 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&s.flip_prob) || s.brightness < 0.0 {
            return Err(Error::Config(
                "data.flip_prob must lie in [0, 1] and data.brightness be ≥ 0".into(),
            ));
        }
        if s.contrast.0 <= 0.0 || s.contrast.0 > s.contrast.1 {
            return Err(Error::Config(
                "data.contrast must be a range 0 < lo ≤ hi".into(),
            ));
        }
        Ok(())
    }

    /// Serializes every key; [`parse_config`] of the result reproduces `self`.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        let list = |f: &dyn Fn(&StageConfig) -> String| -> String {
            self.stages.iter().map(f).collect::<Vec<_>>().join(",")
        };
        let w = &mut out;
        let _ = writeln!(
            w,
            "model.channels = {}",
            list(&|s| s.out_channels.to_string())
        );
        let _ = writeln!(
            w,
            "model.pattern = {}",
            list(&|s| pattern_string(&s.pattern))
        );
        let _ = writeln!(w, "model.heads = {}", list(&|s| s.heads.to_string()));
        let _ = writeln!(
            w,
            "model.reduction = {}",
            list(&|s| s.reduction_ratio.to_string())
        );
        let _ = writeln!(
            w,
            "model.window = {}",
            list(&|s| format!("{}x{}", s.window.0, s.window.1))
        );
        let _ = writeln!(
            w,
            "model.mlp_expansion = {}",
            list(&|s| s.mlp_expansion.to_string())
        );
        let _ = writeln!(
            w,
            "model.patch_kernel = {}",
            list(&|s| s.patch_kernel.to_string())
        );
        let _ = writeln!(
            w,
            "model.patch_stride = {}",
            list(&|s| s.patch_stride.to_string())
        );
        let _ = writeln!(
            w,
            "model.patch_padding = {}",
            list(&|s| s.patch_padding.to_string())
        );
        let _ = writeln!(w, "model.dropout = {:?}", self.encoder_dropout);
        let _ = writeln!(w, "model.in_channels = {}", self.in_channels);
        let _ = writeln!(
            w,
            "model.input = {}x{}",
            self.input_size.0, self.input_size.1
        );
        let _ = writeln!(w, "model.seed = {}", self.seed);
        let d = &self.decoder;
        let _ = writeln!(w, "decoder.channels = {}", d.internal_channels);
        let branches: Vec<&str> = d.branches.iter().map(|b| b.name()).collect();
        let _ = writeln!(
            w,
            "decoder.branches = {}",
            if branches.is_empty() {
                "none".to_string()
            } else {
                branches.join(",")
            }
        );
        let _ = writeln!(w, "decoder.classes = {}", d.num_classes);
        let c = &self.classifier;
        let _ = writeln!(w, "classifier.stage = {}", c.source_stage);
        let _ = writeln!(w, "classifier.hidden = {}", c.hidden);
        let _ = writeln!(w, "classifier.dropout = {:?}", c.dropout);
        let _ = writeln!(w, "classifier.classes = {}", c.num_classes);
        let l = &self.loss;
        let _ = writeln!(w, "loss.seg = {}", l.seg_loss.name());
        let _ = writeln!(w, "loss.focal_gamma = {:?}", l.focal_gamma);
        let _ = writeln!(w, "loss.focal_alpha = {:?}", l.focal_alpha);
        let _ = writeln!(w, "loss.dice_eps = {:?}", l.dice_eps);
        let _ = writeln!(w, "loss.seg_weight = {:?}", l.seg_weight);
        let _ = writeln!(w, "loss.cls_weight = {:?}", l.cls_weight);
        let o = &self.optim;
        let _ = writeln!(w, "optim.lr = {:?}", o.base_lr);
        let _ = writeln!(w, "optim.beta1 = {:?}", o.betas.0);
        let _ = writeln!(w, "optim.beta2 = {:?}", o.betas.1);
        let _ = writeln!(w, "optim.eps = {:?}", o.eps);
        let _ = writeln!(w, "optim.weight_decay = {:?}", o.weight_decay);
        let _ = writeln!(w, "optim.warmup_start_lr = {:?}", o.warmup_start_lr);
        let _ = writeln!(w, "optim.warmup_iters = {}", o.warmup_iters);
        let _ = writeln!(w, "optim.total_iters = {}", o.total_iters);
        let _ = writeln!(w, "optim.poly_power = {:?}", o.poly_power);
        let _ = writeln!(w, "optim.head_lr_mult = {:?}", o.head_lr_multiplier);
        let _ = writeln!(w, "optim.norm_weight_decay = {:?}", o.norm_weight_decay);
        let s = &self.schedule;
        let _ = writeln!(w, "data.batch_size = {}", s.batch_size);
        let _ = writeln!(w, "data.val_every = {}", s.val_every);
        let _ = writeln!(w, "data.keep_top_k = {}", s.keep_top_k);
        let _ = writeln!(w, "data.augment = {}", s.augment);
        let _ = writeln!(w, "data.flip_prob = {:?}", s.flip_prob);
        let _ = writeln!(w, "data.brightness = {:?}", s.brightness);
        let _ = writeln!(w, "data.contrast = {:?},{:?}", s.contrast.0, s.contrast.1);
        out
    }
}

/// One `section.key = value` line.
#[derive(Debug, Clone)]
pub struct Entry<'a> {
    pub line: usize,
    pub key: &'a str,
    pub value: &'a str,
}

impl Entry<'_> {
    pub fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::Config(format!("line {}: {}: {msg}", self.line, self.key))
    }

    pub fn int(&self) -> Result<usize> {
        let v: i64 = self
            .value
            .parse()
            .map_err(|_| self.err(format!("expected an integer, got '{}'", self.value)))?;
        usize::try_from(v).map_err(|_| self.err(format!("must be ≥ 0, got {v}")))
    }

    pub fn positive(&self) -> Result<usize> {
        let v = self.int().map_err(|e| {
            // Report sign violations as the invariant they break.
            match self.value.parse::<i64>() {
                Ok(n) if n < 0 => self.err(format!("must be ≥ 1, got {n}")),
                _ => e,
            }
        })?;
        if v == 0 {
            return Err(self.err("must be ≥ 1, got 0"));
        }
        Ok(v)
    }

    pub fn real(&self) -> Result<f64> {
        let v: f64 = self
            .value
            .parse()
            .map_err(|_| self.err(format!("expected a real number, got '{}'", self.value)))?;
        if !v.is_finite() {
            return Err(self.err("must be finite"));
        }
        Ok(v)
    }

    pub fn list(&self) -> Vec<&str> {
        if self.value.is_empty() {
            return Vec::new();
        }
        self.value.split(',').map(str::trim).collect()
    }

    pub fn reals(&self) -> Result<Vec<f64>> {
        self.list()
            .into_iter()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| self.err(format!("expected real numbers, got '{s}'")))
            })
            .collect()
    }

    pub fn positives(&self) -> Result<Vec<usize>> {
        self.list()
            .into_iter()
            .map(|s| match s.parse::<i64>() {
                Ok(v) if v >= 1 => Ok(v as usize),
                Ok(v) => Err(self.err(format!("every value must be ≥ 1, got {v}"))),
                Err(_) => Err(self.err(format!("expected integers, got '{s}'"))),
            })
            .collect()
    }

    /// `AxB`, `A,B` or a single `A` meaning `AxA`.
    pub fn pair(&self) -> Result<(usize, usize)> {
        pair_of(self.value).ok_or_else(|| {
            self.err(format!(
                "expected a positive integer pair like 5x5, got '{}'",
                self.value
            ))
        })
    }

    pub fn real_pair(&self) -> Result<(f64, f64)> {
        match self.reals()?.as_slice() {
            [a, b] => Ok((*a, *b)),
            _ => Err(self.err("expected two comma-separated reals")),
        }
    }

    pub fn boolean(&self) -> Result<bool> {
        match self.value {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(self.err(format!("expected true or false, got '{v}'"))),
        }
    }
}

fn pair_of(s: &str) -> Option<(usize, usize)> {
    let parts: Vec<&str> = s.split(['x', ',']).map(str::trim).collect();
    let nums: Option<Vec<usize>> = parts
        .iter()
        .map(|p| p.parse::<usize>().ok().filter(|&v| v > 0))
        .collect();
    match nums?.as_slice() {
        [a] => Some((*a, *a)),
        [a, b] => Some((*a, *b)),
        _ => None,
    }
}

/// Splits config text into entries, rejecting lines that are not
/// `section.key = value`.
pub fn entries(text: &str) -> Result<Vec<Entry<'_>>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected 'section.key = value', got '{line}'",
                i + 1
            )));
        };
        let key = key.trim();
        if !key.contains('.') {
            return Err(Error::Config(format!(
                "line {}: key '{key}' must be of the form section.key",
                i + 1
            )));
        }
        out.push(Entry {
            line: i + 1,
            key,
            value: value.trim(),
        });
    }
    Ok(out)
}

/// Parses config text onto the reference defaults and validates the result.
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    let entries = entries(text)?;
    for e in &entries {
        apply(&mut cfg, e)?;
    }
    // Invariants can span keys, so they are checked once everything is set
    // and blamed on the last line that set a key the message names.
    cfg.validate().map_err(|err| match err {
        Error::Config(msg) => match entries.iter().rev().find(|e| msg.contains(e.key)) {
            Some(e) => Error::Config(format!("line {}: {msg}", e.line)),
            None => Error::Config(msg),
        },
        other => other,
    })?;
    Ok(cfg)
}

fn per_stage<V: Clone>(e: &Entry, values: Vec<V>) -> Result<[V; 4]> {
    match values.len() {
        1 => Ok(std::array::from_fn(|_| values[0].clone())),
        4 => Ok(std::array::from_fn(|i| values[i].clone())),
        n => Err(e.err(format!("expected 1 or 4 values, got {n}"))),
    }
}

fn apply(cfg: &mut ModelConfig, e: &Entry) -> Result<()> {
    let stages = &mut cfg.stages;
    match e.key {
        "model.channels" => {
            let v = per_stage(e, e.positives()?)?;
            stages
                .iter_mut()
                .zip(v)
                .for_each(|(s, v)| s.out_channels = v);
        }
        "model.heads" => {
            let v = per_stage(e, e.positives()?)?;
            stages.iter_mut().zip(v).for_each(|(s, v)| s.heads = v);
        }
        "model.reduction" => {
            let v = per_stage(e, e.positives()?)?;
            stages
                .iter_mut()
                .zip(v)
                .for_each(|(s, v)| s.reduction_ratio = v);
        }
        "model.mlp_expansion" => {
            let v = per_stage(e, e.positives()?)?;
            stages
                .iter_mut()
                .zip(v)
                .for_each(|(s, v)| s.mlp_expansion = v);
        }
        "model.patch_kernel" => {
            let v = per_stage(e, e.positives()?)?;
            stages
                .iter_mut()
                .zip(v)
                .for_each(|(s, v)| s.patch_kernel = v);
        }
        "model.patch_stride" => {
            let v = per_stage(e, e.positives()?)?;
            stages
                .iter_mut()
                .zip(v)
                .for_each(|(s, v)| s.patch_stride = v);
        }
        "model.patch_padding" => {
            let v: Result<Vec<usize>> = e
                .list()
                .into_iter()
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| e.err(format!("expected integers ≥ 0, got '{s}'")))
                })
                .collect();
            let v = per_stage(e, v?)?;
            stages
                .iter_mut()
                .zip(v)
                .for_each(|(s, v)| s.patch_padding = v);
        }
        "model.pattern" => {
            let pats: Result<Vec<Vec<Attention>>> = e
                .list()
                .into_iter()
                .map(|p| parse_pattern(p).map_err(|err| e.err(err)))
                .collect();
            let v = per_stage(e, pats?)?;
            stages.iter_mut().zip(v).for_each(|(s, v)| s.pattern = v);
        }
        "model.window" => {
            // Either one pair for all stages or four comma-separated pairs.
            let items = e.list();
            let pairs: Vec<(usize, usize)> = if items.len() == 4 {
                items
                    .iter()
                    .map(|s| pair_of(s).ok_or_else(|| e.err(format!("bad window '{s}'"))))
                    .collect::<Result<_>>()?
            } else {
                vec![e.pair()?]
            };
            let v = per_stage(e, pairs)?;
            stages.iter_mut().zip(v).for_each(|(s, v)| s.window = v);
        }
        "model.dropout" => cfg.encoder_dropout = e.real()?,
        "model.in_channels" => cfg.in_channels = e.positive()?,
        "model.input" => cfg.input_size = e.pair()?,
        "model.seed" => {
            cfg.seed = e
                .value
                .parse()
                .map_err(|_| e.err(format!("expected an unsigned integer, got '{}'", e.value)))?
        }
        "decoder.channels" => cfg.decoder.internal_channels = e.positive()?,
        "decoder.classes" => cfg.decoder.num_classes = e.positive()?,
        "decoder.branches" => {
            let mut branches = Vec::new();
            if e.value != "none" {
                for s in e.list() {
                    let b = Branch::parse(s).ok_or_else(|| {
                        e.err(format!("unknown branch '{s}', expected F1, F2 or F3"))
                    })?;
                    if branches.contains(&b) {
                        return Err(e.err(format!("branch {s} listed twice")));
                    }
                    branches.push(b);
                }
            }
            branches.sort();
            cfg.decoder.branches = branches;
        }
        "classifier.stage" => cfg.classifier.source_stage = e.int()?,
        "classifier.hidden" => cfg.classifier.hidden = e.positive()?,
        "classifier.dropout" => cfg.classifier.dropout = e.real()?,
        "classifier.classes" => cfg.classifier.num_classes = e.positive()?,
        "loss.seg" => {
            cfg.loss.seg_loss = SegLoss::parse(e.value).ok_or_else(|| {
                e.err(format!(
                    "unknown loss '{}', expected cross_entropy, dice, focal or gaussian_plume",
                    e.value
                ))
            })?
        }
        "loss.focal_gamma" => cfg.loss.focal_gamma = e.real()?,
        "loss.focal_alpha" => cfg.loss.focal_alpha = e.real()?,
        "loss.dice_eps" => cfg.loss.dice_eps = e.real()?,
        "loss.seg_weight" => cfg.loss.seg_weight = e.real()?,
        "loss.cls_weight" => cfg.loss.cls_weight = e.real()?,
        "optim.lr" => cfg.optim.base_lr = e.real()?,
        "optim.beta1" => cfg.optim.betas.0 = e.real()?,
        "optim.beta2" => cfg.optim.betas.1 = e.real()?,
        "optim.eps" => cfg.optim.eps = e.real()?,
        "optim.weight_decay" => cfg.optim.weight_decay = e.real()?,
        "optim.warmup_start_lr" => cfg.optim.warmup_start_lr = e.real()?,
        "optim.warmup_iters" => cfg.optim.warmup_iters = e.int()?,
        "optim.total_iters" => cfg.optim.total_iters = e.positive()?,
        "optim.poly_power" => cfg.optim.poly_power = e.real()?,
        "optim.head_lr_mult" => cfg.optim.head_lr_multiplier = e.real()?,
        "optim.norm_weight_decay" => cfg.optim.norm_weight_decay = e.real()?,
        "data.batch_size" => cfg.schedule.batch_size = e.positive()?,
        "data.val_every" => cfg.schedule.val_every = e.positive()?,
        "data.keep_top_k" => cfg.schedule.keep_top_k = e.int()?,
        "data.augment" => cfg.schedule.augment = e.boolean()?,
        "data.flip_prob" => cfg.schedule.flip_prob = e.real()?,
        "data.brightness" => cfg.schedule.brightness = e.real()?,
        "data.contrast" => cfg.schedule.contrast = e.real_pair()?,
        _ => return Err(e.err("unknown key")),
    }
    Ok(())
}
