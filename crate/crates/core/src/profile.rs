//! Parameter and FLOP accounting.
//!
//! FLOPs are counted analytically from the configuration. Multiply-accumulates
//! (convolutions, linear layers, attention matmuls) are tallied separately
//! from elementwise work so the headline number can be reported under either
//! common convention:
//!
//! * [`FlopConvention::Mac1`] (default): one MAC is one FLOP, the convention
//!   of the usual framework profilers and of published efficiency tables.
//! * [`FlopConvention::Mac2`]: one MAC is two FLOPs (a multiply and an add).
//!
//! Elementwise costs per element: bias add 1, residual add 1, score scaling 1,
//! softmax 5, layer norm 8, GELU 8, sigmoid 4, ReLU 1, gating multiply 1,
//! average pooling 1 per input element, bilinear interpolation 7 per output
//! element. Zero padding and layout changes are free. All counts are for a
//! single image in inference mode.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use gastwin_tensor::{conv_out_len, Real};
use serde::Serialize;

use crate::config::{Attention, ModelConfig, StageConfig};
use crate::error::{Error, Result};
use crate::model::{GasTwinFormer, ParamGroup};

pub const SOFTMAX_FLOPS: u64 = 5;
pub const LAYER_NORM_FLOPS: u64 = 8;
pub const GELU_FLOPS: u64 = 8;
pub const SIGMOID_FLOPS: u64 = 4;
pub const BILINEAR_FLOPS: u64 = 7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum FlopConvention {
    #[default]
    Mac1,
    Mac2,
}

impl FlopConvention {
    pub fn per_mac(self) -> u64 {
        match self {
            FlopConvention::Mac1 => 1,
            FlopConvention::Mac2 => 2,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mac1" | "1" => Ok(FlopConvention::Mac1),
            "mac2" | "2" => Ok(FlopConvention::Mac2),
            other => Err(Error::Config(format!(
                "FLOP convention `{other}` is not one of mac1, mac2"
            ))),
        }
    }
}

/// Which part of the network a cost belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Category {
    PatchEmbed,
    Efficient,
    Local,
    MixFfn,
    StageNorm,
    Decoder,
    Classifier,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::PatchEmbed => "patch_embed",
            Category::Efficient => "efficient_attn",
            Category::Local => "local_attn",
            Category::MixFfn => "mix_ffn",
            Category::StageNorm => "stage_norm",
            Category::Decoder => "decoder",
            Category::Classifier => "classifier",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostEntry {
    /// Dotted location, e.g. `stage1.block0.attn`.
    pub scope: String,
    /// One-based encoder stage, `None` for the heads.
    pub stage: Option<usize>,
    pub category: Category,
    /// Sub-term, e.g. `score`, `attn_v`, `qkv`, `softmax`.
    pub term: &'static str,
    pub macs: u64,
    pub elementwise: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub input: (usize, usize),
    pub convention: FlopConvention,
    pub params: u64,
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn macs(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    pub fn elementwise(&self) -> u64 {
        self.entries.iter().map(|e| e.elementwise).sum()
    }

    pub fn entry_flops(&self, e: &CostEntry) -> u64 {
        e.macs * self.convention.per_mac() + e.elementwise
    }

    pub fn flops(&self) -> u64 {
        self.entries.iter().map(|e| self.entry_flops(e)).sum()
    }

    pub fn with_convention(mut self, convention: FlopConvention) -> Self {
        self.convention = convention;
        self
    }

    /// FLOPs of every entry satisfying `pred`.
    pub fn flops_where(&self, pred: impl Fn(&CostEntry) -> bool) -> u64 {
        self.entries
            .iter()
            .filter(|e| pred(e))
            .map(|e| self.entry_flops(e))
            .sum()
    }

    /// Attention score (`Q·Kᵀ`) FLOPs of one category in one stage.
    pub fn score_flops(&self, stage: usize, category: Category) -> u64 {
        self.flops_where(|e| e.stage == Some(stage) && e.category == category && e.term == "score")
    }

    /// FLOPs keyed by stage label (`stage1`..`stage4`, `heads`).
    pub fn by_stage(&self) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            let key = e
                .stage
                .map_or_else(|| "heads".to_string(), |s| format!("stage{s}"));
            *m.entry(key).or_insert(0) += self.entry_flops(e);
        }
        m
    }

    pub fn by_category(&self) -> BTreeMap<Category, u64> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.category).or_insert(0) += self.entry_flops(e);
        }
        m
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input          {}x{}", self.input.0, self.input.1);
        let _ = writeln!(s, "convention     {:?}", self.convention);
        let _ = writeln!(
            s,
            "params         {:>14} ({:.3} M)",
            self.params,
            self.params as f64 / 1e6
        );
        let _ = writeln!(s, "MACs           {:>14}", self.macs());
        let _ = writeln!(s, "elementwise    {:>14}", self.elementwise());
        let _ = writeln!(
            s,
            "FLOPs          {:>14} ({:.3} G)",
            self.flops(),
            self.flops() as f64 / 1e9
        );
        let _ = writeln!(s, "\n{:<16}{:>16}{:>9}", "stage", "FLOPs", "share");
        let total = self.flops().max(1) as f64;
        for (k, v) in self.by_stage() {
            let _ = writeln!(s, "{k:<16}{v:>16}{:>8.1}%", 100.0 * v as f64 / total);
        }
        let _ = writeln!(s, "\n{:<16}{:>16}{:>9}", "category", "FLOPs", "share");
        for (k, v) in self.by_category() {
            let _ = writeln!(
                s,
                "{:<16}{v:>16}{:>8.1}%",
                k.name(),
                100.0 * v as f64 / total
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        let summary = serde_json::json!({
            "input": [self.input.0, self.input.1],
            "convention": self.convention,
            "params": self.params,
            "macs": self.macs(),
            "elementwise": self.elementwise(),
            "flops": self.flops(),
            "by_stage": self.by_stage(),
            "by_category": self
                .by_category()
                .into_iter()
                .map(|(k, v)| (k.name().to_string(), v))
                .collect::<BTreeMap<_, _>>(),
            "entries": self.entries,
        });
        serde_json::to_string_pretty(&summary).expect("cost report serializes")
    }
}

struct Tally {
    entries: Vec<CostEntry>,
}

impl Tally {
    fn add(
        &mut self,
        scope: &str,
        stage: Option<usize>,
        category: Category,
        term: &'static str,
        macs: u64,
        ew: u64,
    ) {
        self.entries.push(CostEntry {
            scope: scope.to_string(),
            stage,
            category,
            term,
            macs,
            elementwise: ew,
        });
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

/// Spatial extents after each stage's patch embedding.
pub fn stage_geometry(cfg: &ModelConfig, h: usize, w: usize) -> Vec<(usize, usize)> {
    let (mut h, mut w) = (h, w);
    cfg.stages
        .iter()
        .map(|s| {
            h = conv_out_len(h, s.patch_kernel, s.patch_stride, s.patch_padding);
            w = conv_out_len(w, s.patch_kernel, s.patch_stride, s.patch_padding);
            (h, w)
        })
        .collect()
}

fn efficient_cost(t: &mut Tally, scope: &str, stage: usize, s: &StageConfig, h: usize, w: usize) {
    let cat = Category::Efficient;
    let st = Some(stage);
    let (n, c, heads) = (u(h * w), u(s.out_channels), u(s.heads));
    let r = s.reduction_ratio;
    t.add(scope, st, cat, "norm", 0, LAYER_NORM_FLOPS * n * c);
    t.add(scope, st, cat, "q", n * c * c, n * c);
    let nk = if r > 1 {
        let nk = u(h.div_ceil(r) * w.div_ceil(r));
        let rr = u(r * r);
        t.add(scope, st, cat, "reduce", nk * c * c * rr, nk * c);
        t.add(scope, st, cat, "reduce_norm", 0, LAYER_NORM_FLOPS * nk * c);
        nk
    } else {
        n
    };
    t.add(scope, st, cat, "kv", nk * c * 2 * c, nk * 2 * c);
    t.add(scope, st, cat, "score", n * nk * c, heads * n * nk);
    t.add(scope, st, cat, "softmax", 0, SOFTMAX_FLOPS * heads * n * nk);
    t.add(scope, st, cat, "attn_v", n * nk * c, 0);
    t.add(scope, st, cat, "proj", n * c * c, n * c);
    t.add(scope, st, cat, "residual", 0, n * c);
}

fn local_cost(t: &mut Tally, scope: &str, stage: usize, s: &StageConfig, h: usize, w: usize) {
    let cat = Category::Local;
    let st = Some(stage);
    let (n, c, heads) = (u(h * w), u(s.out_channels), u(s.heads));
    let (w1, w2) = s.window;
    let np = u(h.div_ceil(w1) * w1 * w.div_ceil(w2) * w2);
    let win = u(w1 * w2);
    t.add(scope, st, cat, "norm", 0, LAYER_NORM_FLOPS * n * c);
    t.add(scope, st, cat, "qkv", np * c * 3 * c, np * 3 * c);
    t.add(scope, st, cat, "score", np * win * c, heads * np * win);
    t.add(
        scope,
        st,
        cat,
        "softmax",
        0,
        SOFTMAX_FLOPS * heads * np * win,
    );
    t.add(scope, st, cat, "attn_v", np * win * c, 0);
    t.add(scope, st, cat, "proj", n * c * c, n * c);
    t.add(scope, st, cat, "residual", 0, n * c);
}

fn ffn_cost(t: &mut Tally, scope: &str, stage: usize, s: &StageConfig, h: usize, w: usize) {
    let cat = Category::MixFfn;
    let st = Some(stage);
    let (n, c) = (u(h * w), u(s.out_channels));
    let hid = c * u(s.mlp_expansion);
    t.add(scope, st, cat, "norm", 0, LAYER_NORM_FLOPS * n * c);
    t.add(scope, st, cat, "fc1", n * c * hid, n * hid);
    t.add(scope, st, cat, "dwconv", n * hid * 9, n * hid);
    t.add(scope, st, cat, "gelu", 0, GELU_FLOPS * n * hid);
    t.add(scope, st, cat, "fc2", n * hid * c, n * c);
    t.add(scope, st, cat, "residual", 0, n * c);
}

/// Analytic cost of one forward pass at `h × w` (both multiples of 32).
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<CostReport> {
    cfg.validate()?;
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(Error::Geometry(format!(
            "profile input {h}x{w}: extents must be positive multiples of 32"
        )));
    }
    let mut t = Tally {
        entries: Vec::new(),
    };
    let geo = stage_geometry(cfg, h, w);
    let mut in_ch = cfg.in_channels;
    // input standardization: one subtract and one multiply per value
    t.add(
        "stage1",
        Some(1),
        Category::PatchEmbed,
        "standardize",
        0,
        2 * u(h * w) * u(in_ch),
    );
    for (i, (s, &(sh, sw))) in cfg.stages.iter().zip(&geo).enumerate() {
        let stage = i + 1;
        let scope = format!("stage{stage}");
        let (n, c) = (u(sh * sw), u(s.out_channels));
        let k2 = u(s.patch_kernel * s.patch_kernel);
        t.add(
            &scope,
            Some(stage),
            Category::PatchEmbed,
            "conv",
            n * c * u(in_ch) * k2,
            n * c,
        );
        t.add(
            &scope,
            Some(stage),
            Category::PatchEmbed,
            "norm",
            0,
            LAYER_NORM_FLOPS * n * c,
        );
        for (b, kind) in s.pattern.iter().enumerate() {
            let bscope = format!("{scope}.block{b}");
            match kind {
                Attention::Efficient => {
                    efficient_cost(&mut t, &format!("{bscope}.attn"), stage, s, sh, sw)
                }
                Attention::Local => local_cost(&mut t, &format!("{bscope}.attn"), stage, s, sh, sw),
            }
            ffn_cost(&mut t, &format!("{bscope}.ffn"), stage, s, sh, sw);
        }
        t.add(
            &scope,
            Some(stage),
            Category::StageNorm,
            "norm",
            0,
            LAYER_NORM_FLOPS * n * c,
        );
        in_ch = s.out_channels;
    }

    let d = &cfg.decoder;
    let cat = Category::Decoder;
    let ic = u(d.internal_channels);
    let (h4, w4) = geo[geo.len() - 1];
    let n4 = u(h4 * w4);
    let c4 = u(cfg.stages[cfg.stages.len() - 1].out_channels);
    t.add("decoder.gate", None, cat, "pool", 0, n4 * c4);
    t.add("decoder.gate", None, cat, "conv", c4 * ic, ic);
    t.add("decoder.gate", None, cat, "sigmoid", 0, SIGMOID_FLOPS * ic);
    t.add("decoder.aspp", None, cat, "conv", n4 * c4 * ic, n4 * ic);
    t.add("decoder.aspp", None, cat, "gate", 0, n4 * ic);
    let mut out_n = n4;
    for b in d.branches.iter().rev() {
        let (bh, bw) = geo[b.level() - 1];
        let nb = u(bh * bw);
        let cb = u(cfg.stages[b.level() - 1].out_channels);
        let scope = format!("decoder.{}", b.name());
        t.add(&scope, None, cat, "proj", nb * cb * ic, nb * ic);
        t.add(&scope, None, cat, "upsample", 0, BILINEAR_FLOPS * nb * ic);
        t.add(&scope, None, cat, "fuse", nb * 2 * ic * ic, nb * ic);
        out_n = nb;
    }
    let k = u(d.num_classes);
    t.add(
        "decoder.classify",
        None,
        cat,
        "conv",
        out_n * ic * k,
        out_n * k,
    );
    t.add(
        "decoder.classify",
        None,
        cat,
        "upsample",
        0,
        BILINEAR_FLOPS * u(h * w) * k,
    );

    let cl = &cfg.classifier;
    let cat = Category::Classifier;
    let (sh, sw) = geo[cl.source_stage - 1];
    let cs = u(cfg.stages[cl.source_stage - 1].out_channels);
    let hid = u(cl.hidden);
    let nc = u(cl.num_classes);
    t.add("classifier", None, cat, "pool", 0, u(sh * sw) * cs);
    t.add("classifier", None, cat, "fc1", cs * hid, hid);
    t.add("classifier", None, cat, "relu", 0, hid);
    t.add("classifier", None, cat, "fc2", hid * nc, nc);

    Ok(CostReport {
        input: (h, w),
        convention: FlopConvention::default(),
        params: analytic_params(cfg).iter().map(|(_, n)| n).sum(),
        entries: t.entries,
    })
}

/// Closed-form parameter count per top-level component, derived from the
/// configuration alone.
pub fn analytic_params(cfg: &ModelConfig) -> Vec<(String, u64)> {
    let mut out = Vec::new();
    let mut in_ch = u(cfg.in_channels);
    let ln = |c: u64| 2 * c;
    for (i, s) in cfg.stages.iter().enumerate() {
        let c = u(s.out_channels);
        let hid = c * u(s.mlp_expansion);
        let k2 = u(s.patch_kernel * s.patch_kernel);
        let mut n = in_ch * c * k2 + c + ln(c);
        for kind in &s.pattern {
            n += match kind {
                Attention::Efficient => {
                    let r2 = u(s.reduction_ratio * s.reduction_ratio);
                    let reduce = if s.reduction_ratio > 1 {
                        c * c * r2 + c + ln(c)
                    } else {
                        0
                    };
                    ln(c) + (c * c + c) + (c * 2 * c + 2 * c) + reduce + (c * c + c)
                }
                Attention::Local => ln(c) + (c * 3 * c + 3 * c) + (c * c + c),
            };
            n += ln(c) + (c * hid + hid) + (hid * 9 + hid) + (hid * c + c);
        }
        n += ln(c);
        out.push((format!("stage{}", i + 1), n));
        in_ch = c;
    }
    let d = &cfg.decoder;
    let ic = u(d.internal_channels);
    let c4 = u(cfg.stages[cfg.stages.len() - 1].out_channels);
    let mut dec = 2 * (c4 * ic + ic);
    for b in &d.branches {
        let cb = u(cfg.stages[b.level() - 1].out_channels);
        dec += cb * ic + ic + 2 * ic * ic + ic;
    }
    dec += ic * u(d.num_classes) + u(d.num_classes);
    out.push(("decoder".into(), dec));
    let cl = &cfg.classifier;
    let cs = u(cfg.stages[cl.source_stage - 1].out_channels);
    let hid = u(cl.hidden);
    out.push((
        "classifier".into(),
        cs * hid + hid + hid * u(cl.num_classes) + u(cl.num_classes),
    ));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub total: u64,
    /// Per named tensor, in traversal order.
    pub layers: Vec<(String, u64)>,
    /// Per top-level component (`encoder.stages.0`, `decoder`, ...).
    pub modules: BTreeMap<String, u64>,
    pub groups: BTreeMap<String, u64>,
}

/// Exact trainable-element count of a constructed model, with breakdowns.
pub fn count_params<T: Real>(model: &GasTwinFormer<T>) -> ParamReport {
    let params = model.named_params();
    let mut modules = BTreeMap::new();
    let mut groups: BTreeMap<String, u64> =
        [ParamGroup::Backbone, ParamGroup::Head, ParamGroup::Norm]
            .iter()
            .map(|g| (g.name().to_string(), 0))
            .collect();
    let mut layers = Vec::with_capacity(params.len());
    for p in &params {
        let n = u(p.tensor.numel());
        let top = if p.name.starts_with("encoder.") {
            p.name.split('.').take(3).collect::<Vec<_>>().join(".")
        } else {
            p.name.split('.').next().unwrap_or_default().to_string()
        };
        *modules.entry(top).or_insert(0) += n;
        *groups.entry(p.group.name().to_string()).or_insert(0) += n;
        layers.push((p.name.clone(), n));
    }
    ParamReport {
        total: layers.iter().map(|(_, n)| n).sum(),
        layers,
        modules,
        groups,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_matches_constructed_model() {
        let cfg = ModelConfig::desk();
        let model = GasTwinFormer::<f32>::new(&cfg).unwrap();
        let analytic: u64 = analytic_params(&cfg).iter().map(|(_, n)| n).sum();
        assert_eq!(count_params(&model).total, analytic);
    }

    #[test]
    fn reference_parameter_count() {
        let total: u64 = analytic_params(&ModelConfig::default())
            .iter()
            .map(|(_, n)| n)
            .sum();
        assert_eq!(total, 3_349_605);
    }

    #[test]
    fn breakdown_sums_to_total() {
        let r = count_flops(&ModelConfig::default(), 512, 512).unwrap();
        assert_eq!(r.by_stage().values().sum::<u64>(), r.flops());
        assert_eq!(r.by_category().values().sum::<u64>(), r.flops());
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["flops"].as_u64(), Some(r.flops()));
    }

    #[test]
    fn rejects_indivisible_input() {
        assert!(matches!(
            count_flops(&ModelConfig::default(), 500, 512),
            Err(Error::Geometry(_))
        ));
    }
}
