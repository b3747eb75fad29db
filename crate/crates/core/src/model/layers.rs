//! Parameterized building blocks and parameter bookkeeping.

use gastwin_tensor::{Conv2dSpec, Real, RngState, Tensor};

use crate::error::Result;

/// Optimizer group of a trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Encoder weights and biases.
    Backbone,
    /// Decoder and classifier weights and biases.
    Head,
    /// Layer-normalization scales and shifts, anywhere in the model.
    Norm,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Head => "head",
            ParamGroup::Norm => "norm",
        }
    }
}

#[derive(Clone, Debug)]
pub struct NamedParam<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub group: ParamGroup,
}

/// Collects named parameters in a fixed traversal order.
pub struct ParamSink<'a, T: Real> {
    prefix: String,
    group: ParamGroup,
    out: &'a mut Vec<NamedParam<T>>,
}

impl<'a, T: Real> ParamSink<'a, T> {
    pub fn new(out: &'a mut Vec<NamedParam<T>>, group: ParamGroup) -> Self {
        Self {
            prefix: String::new(),
            group,
            out,
        }
    }

    pub fn scope(&mut self, name: impl std::fmt::Display) -> ParamSink<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamSink {
            prefix,
            group: self.group,
            out: self.out,
        }
    }

    pub fn with_group(&mut self, group: ParamGroup) -> ParamSink<'_, T> {
        ParamSink {
            prefix: self.prefix.clone(),
            group,
            out: self.out,
        }
    }

    pub fn push(&mut self, name: &str, tensor: &Tensor<T>) {
        self.out.push(NamedParam {
            name: format!("{}.{name}", self.prefix),
            tensor: tensor.clone(),
            group: self.group,
        });
    }
}

pub trait Module<T: Real> {
    fn collect(&self, sink: &mut ParamSink<'_, T>);
}

/// Training flag plus the randomness dropout draws from.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut RngState),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn dropout<T: Real>(&mut self, x: &Tensor<T>, rate: f64) -> Result<Tensor<T>> {
        match self {
            Mode::Train(rng) if rate > 0.0 => Ok(x.dropout(rate, rng)?),
            _ => Ok(x.clone()),
        }
    }
}

fn param<T: Real>(values: Vec<f64>, shape: &[usize]) -> Tensor<T> {
    Tensor::param(values.into_iter().map(T::of).collect(), shape).expect("parameter shape")
}

/// Fully connected layer over the last dimension; weight is `[in, out]`.
pub struct Linear<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    /// Truncated normal (std 0.02) weights, zero bias.
    pub fn new(input: usize, output: usize, rng: &mut RngState) -> Self {
        let w = (0..input * output)
            .map(|_| rng.trunc_normal(0.02))
            .collect();
        Self {
            weight: param(w, &[input, output]),
            bias: param(vec![0.0; output], &[output]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.linear(&self.weight, Some(&self.bias))?)
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(1)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn collect(&self, sink: &mut ParamSink<'_, T>) {
        sink.push("weight", &self.weight);
        sink.push("bias", &self.bias);
    }
}

pub struct Conv2d<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub spec: Conv2dSpec,
}

impl<T: Real> Conv2d<T> {
    /// Normal weights with std `√(2 / fan_out)`, zero bias.
    pub fn new(
        input: usize,
        output: usize,
        kernel: usize,
        spec: Conv2dSpec,
        rng: &mut RngState,
    ) -> Self {
        let fan_out = kernel * kernel * output / spec.groups;
        let std = (2.0 / fan_out as f64).sqrt();
        let n = output * (input / spec.groups) * kernel * kernel;
        let w = (0..n).map(|_| rng.normal() * std).collect();
        Self {
            weight: param(w, &[output, input / spec.groups, kernel, kernel]),
            bias: param(vec![0.0; output], &[output]),
            spec,
        }
    }

    pub fn pointwise(input: usize, output: usize, rng: &mut RngState) -> Self {
        Self::new(input, output, 1, Conv2dSpec::new(1, 0, 1), rng)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.conv2d(&self.weight, Some(&self.bias), self.spec)?)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn collect(&self, sink: &mut ParamSink<'_, T>) {
        sink.push("weight", &self.weight);
        sink.push("bias", &self.bias);
    }
}

pub const LN_EPS: f64 = 1e-6;

pub struct LayerNorm<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: param(vec![1.0; width], &[width]),
            beta: param(vec![0.0; width], &[width]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.layer_norm(&self.gamma, &self.beta, LN_EPS)?)
    }
}

impl<T: Real> Module<T> for LayerNorm<T> {
    fn collect(&self, sink: &mut ParamSink<'_, T>) {
        let mut s = sink.with_group(ParamGroup::Norm);
        s.push("weight", &self.gamma);
        s.push("bias", &self.beta);
    }
}

/// `[N, T, C]` tokens of an `h × w` map to NCHW.
pub fn tokens_to_map<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c) = (x.dim(0), x.dim(2));
    Ok(x.reshape(&[n, h, w, c])?.permute(&[0, 3, 1, 2])?)
}

/// NCHW map to `[N, H·W, C]` tokens.
pub fn map_to_tokens<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    Ok(x.permute(&[0, 2, 3, 1])?.reshape(&[n, h * w, c])?)
}
