//! Randomly initialized feature extractors with reverse-mode input gradients.
//!
//! A network is fully determined by its [`ExtractorSpec`] and an integer seed,
//! so the signal store keeps only the seed and rebuilds the weights on demand.

mod layers;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{standard_normal, RngStream, Tensor};
use layers::ConvGeom;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        /// Zero padding on every side; `None` means `kernel / 2`.
        #[serde(default)]
        padding: Option<usize>,
    },
    Relu,
    AvgPool {
        window: usize,
    },
    Flatten,
    Dense {
        out_dim: usize,
    },
}

fn one() -> usize {
    1
}

/// Activation shape between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Image { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    /// `(channels, height, width)`.
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub feature_dim: usize,
}

impl ExtractorSpec {
    /// Three conv blocks (conv, ReLU, 2x2 average pool) on 16x16 inputs,
    /// flattened to 128 features.
    pub fn desk_default(channels: usize) -> Self {
        let conv = |out_channels| LayerSpec::Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: None,
        };
        Self {
            input_shape: (channels, 16, 16),
            layers: vec![
                conv(8),
                LayerSpec::Relu,
                LayerSpec::AvgPool { window: 2 },
                conv(16),
                LayerSpec::Relu,
                LayerSpec::AvgPool { window: 2 },
                conv(32),
                LayerSpec::Relu,
                LayerSpec::AvgPool { window: 2 },
                LayerSpec::Flatten,
            ],
            feature_dim: 128,
        }
    }

    /// Just a flatten: features are the raw pixels.
    pub fn identity(input_shape: (usize, usize, usize)) -> Self {
        let (c, h, w) = input_shape;
        Self {
            input_shape,
            layers: vec![LayerSpec::Flatten],
            feature_dim: c * h * w,
        }
    }

    /// Builds a spec whose `feature_dim` is inferred from the layers.
    pub fn from_layers(input_shape: (usize, usize, usize), layers: Vec<LayerSpec>) -> Result<Self> {
        let mut spec = Self {
            input_shape,
            layers,
            feature_dim: 0,
        };
        spec.feature_dim = spec.shapes()?.last().unwrap().len();
        spec.validate()?;
        Ok(spec)
    }

    /// Parses a layer list such as `conv:8:3,relu,pool:2,flatten,dense:10`.
    /// Conv takes `out:kernel[:stride[:padding]]`.
    pub fn parse_layers(text: &str) -> Result<Vec<LayerSpec>> {
        text.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|item| {
                let mut parts = item.split(':');
                let name = parts.next().unwrap_or_default();
                let nums = parts
                    .map(|p| {
                        p.parse::<usize>()
                            .map_err(|_| Error::Validation(format!("bad number {p:?} in layer {item:?}")))
                    })
                    .collect::<Result<Vec<usize>>>()?;
                let layer = match (name, nums.as_slice()) {
                    ("conv", [o, k]) => LayerSpec::Conv {
                        out_channels: *o,
                        kernel: *k,
                        stride: 1,
                        padding: None,
                    },
                    ("conv", [o, k, s]) => LayerSpec::Conv {
                        out_channels: *o,
                        kernel: *k,
                        stride: *s,
                        padding: None,
                    },
                    ("conv", [o, k, s, p]) => LayerSpec::Conv {
                        out_channels: *o,
                        kernel: *k,
                        stride: *s,
                        padding: Some(*p),
                    },
                    ("relu", []) => LayerSpec::Relu,
                    ("pool", [w]) => LayerSpec::AvgPool { window: *w },
                    ("flatten", []) => LayerSpec::Flatten,
                    ("dense", [o]) => LayerSpec::Dense { out_dim: *o },
                    _ => return Err(Error::Validation(format!("unrecognized layer {item:?}"))),
                };
                Ok(layer)
            })
            .collect()
    }

    /// Inverse of [`ExtractorSpec::parse_layers`].
    pub fn layers_string(&self) -> String {
        self.layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => match padding {
                    Some(p) => format!("conv:{out_channels}:{kernel}:{stride}:{p}"),
                    None => format!("conv:{out_channels}:{kernel}:{stride}"),
                },
                LayerSpec::Relu => "relu".into(),
                LayerSpec::AvgPool { window } => format!("pool:{window}"),
                LayerSpec::Flatten => "flatten".into(),
                LayerSpec::Dense { out_dim } => format!("dense:{out_dim}"),
            })
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.input_shape;
        c * h * w
    }

    /// Activation shapes: entry 0 is the input, entry `k + 1` the output of layer `k`.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let (c, h, w) = self.input_shape;
        ensure!(c > 0 && h > 0 && w > 0, "input shape must be positive");
        let mut cur = ActShape::Image { c, h, w };
        let mut out = vec![cur];
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = match (*layer, cur) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    ActShape::Image { c, h, w },
                ) => {
                    ensure!(
                        out_channels > 0 && kernel > 0 && stride > 0,
                        "layer {idx}: conv parameters must be positive"
                    );
                    let p = padding.unwrap_or(kernel / 2);
                    ensure!(
                        h + 2 * p >= kernel && w + 2 * p >= kernel,
                        "layer {idx}: kernel {kernel} larger than padded input {h}x{w}"
                    );
                    let g = ConvGeom {
                        in_c: c,
                        in_h: h,
                        in_w: w,
                        out_c: out_channels,
                        kernel,
                        stride,
                        padding: p,
                    };
                    ActShape::Image {
                        c: out_channels,
                        h: g.out_h(),
                        w: g.out_w(),
                    }
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::AvgPool { window }, ActShape::Image { c, h, w }) => {
                    ensure!(
                        window > 0 && h >= window && w >= window,
                        "layer {idx}: pool window {window} does not fit {h}x{w}"
                    );
                    ActShape::Image {
                        c,
                        h: h / window,
                        w: w / window,
                    }
                }
                (LayerSpec::Flatten, s) => ActShape::Flat(s.len()),
                (LayerSpec::Dense { out_dim }, ActShape::Flat(_)) => {
                    ensure!(out_dim > 0, "layer {idx}: dense output must be positive");
                    ActShape::Flat(out_dim)
                }
                (layer, s) => {
                    return Err(Error::Validation(format!(
                        "layer {idx} ({layer:?}) cannot follow activation {s:?}"
                    )))
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        let last = *shapes.last().unwrap();
        ensure!(
            matches!(last, ActShape::Flat(_)),
            "extractor must end in a flat feature vector, ends with {last:?}"
        );
        ensure!(
            last.len() == self.feature_dim,
            "extractor produces {} features but feature_dim is {}",
            last.len(),
            self.feature_dim
        );
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorParams {
    pub seed: u64,
    pub init_scale: f64,
}

/// Trainable parameters of one layer (empty for parameter-free layers).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerWeights {
    fn empty() -> Self {
        Self {
            weight: Vec::new(),
            bias: Vec::new(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// A materialized network: spec plus concrete weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: ExtractorSpec,
    shapes: Vec<ActShape>,
    weights: Vec<LayerWeights>,
}

/// Activations recorded by [`Network::forward_trace`] for the backward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

/// Draws weights i.i.d. from `N(0, (init_scale / sqrt(fan_in))^2)` with zero biases.
pub fn materialize(spec: &ExtractorSpec, params: ExtractorParams) -> Result<Network> {
    spec.validate()?;
    ensure!(
        params.init_scale >= 0.0 && params.init_scale.is_finite(),
        "init_scale must be finite and non-negative"
    );
    let shapes = spec.shapes()?;
    let mut rng = RngStream::new(params.seed).rng();
    let mut weights = Vec::with_capacity(spec.layers.len());
    for (k, layer) in spec.layers.iter().enumerate() {
        let (n_w, n_b, fan_in) = match (*layer, shapes[k]) {
            (
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                },
                ActShape::Image { c, .. },
            ) => (out_channels * c * kernel * kernel, out_channels, c * kernel * kernel),
            (LayerSpec::Dense { out_dim }, ActShape::Flat(n)) => (out_dim * n, out_dim, n),
            _ => {
                weights.push(LayerWeights::empty());
                continue;
            }
        };
        let std = params.init_scale / (fan_in as f64).sqrt();
        let weight = (0..n_w).map(|_| std * standard_normal(&mut rng)).collect();
        weights.push(LayerWeights {
            weight,
            bias: vec![0.0; n_b],
        });
    }
    Ok(Network {
        spec: spec.clone(),
        shapes,
        weights,
    })
}

impl Network {
    /// Builds a network from explicit weights, checking their sizes.
    pub fn with_weights(spec: &ExtractorSpec, weights: Vec<LayerWeights>) -> Result<Self> {
        let template = materialize(
            spec,
            ExtractorParams {
                seed: 0,
                init_scale: 0.0,
            },
        )?;
        ensure!(
            weights.len() == template.weights.len(),
            "expected {} layer weight sets, got {}",
            template.weights.len(),
            weights.len()
        );
        for (k, (a, b)) in weights.iter().zip(&template.weights).enumerate() {
            ensure!(
                a.weight.len() == b.weight.len() && a.bias.len() == b.bias.len(),
                "layer {k}: weight sizes do not match the spec"
            );
        }
        Ok(Self { weights, ..template })
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[LayerWeights] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [LayerWeights] {
        &mut self.weights
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    fn geom(&self, k: usize) -> Option<ConvGeom> {
        match (self.spec.layers[k], self.shapes[k]) {
            (
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                ActShape::Image { c, h, w },
            ) => Some(ConvGeom {
                in_c: c,
                in_h: h,
                in_w: w,
                out_c: out_channels,
                kernel,
                stride,
                padding: padding.unwrap_or(kernel / 2),
            }),
            _ => None,
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        ensure!(
            x.len() == self.spec.input_len(),
            "input has {} values, extractor expects {:?}",
            x.len(),
            self.spec.input_shape
        );
        Ok(())
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.spec.layers.len() + 1);
        acts.push(x.to_vec());
        for (k, layer) in self.spec.layers.iter().enumerate() {
            let input = acts.last().unwrap();
            let mut out = vec![0.0; self.shapes[k + 1].len()];
            match *layer {
                LayerSpec::Conv { .. } => {
                    let g = self.geom(k).unwrap();
                    let w = &self.weights[k];
                    layers::conv_forward(&g, input, &w.weight, &w.bias, &mut out);
                }
                LayerSpec::Relu => {
                    for (o, &v) in out.iter_mut().zip(input) {
                        *o = v.max(0.0);
                    }
                }
                LayerSpec::AvgPool { window } => {
                    if let ActShape::Image { c, h, w } = self.shapes[k] {
                        layers::avg_pool_forward(c, h, w, window, input, &mut out);
                    }
                }
                LayerSpec::Flatten => out.copy_from_slice(input),
                LayerSpec::Dense { out_dim } => {
                    let w = &self.weights[k];
                    layers::dense_forward(input.len(), out_dim, input, &w.weight, &w.bias, &mut out);
                }
            }
            acts.push(out);
        }
        let y = acts.last().unwrap();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("extractor produced non-finite features".into()));
        }
        Ok(Trace { acts })
    }

    /// Feature vector of length `feature_dim`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.acts.pop().unwrap())
    }

    /// Backward pass from `upstream = dL/d(output)`.
    ///
    /// Returns `dL/d(input)` and, if requested, parameter gradients.
    pub fn backward(
        &self,
        trace: &Trace,
        upstream: &[f64],
        param_grads: bool,
    ) -> Result<(Vec<f64>, Option<Vec<LayerWeights>>)> {
        ensure!(
            upstream.len() == self.spec.feature_dim,
            "upstream gradient has length {}, expected {}",
            upstream.len(),
            self.spec.feature_dim
        );
        let mut grads: Option<Vec<LayerWeights>> =
            param_grads.then(|| self.weights.iter().map(LayerWeights::zeros_like).collect());
        let mut g = upstream.to_vec();
        for k in (0..self.spec.layers.len()).rev() {
            let input = &trace.acts[k];
            let mut gin = vec![0.0; input.len()];
            match self.spec.layers[k] {
                LayerSpec::Conv { .. } => {
                    let geom = self.geom(k).unwrap();
                    let gw = grads
                        .as_mut()
                        .map(|gs| {
                            let LayerWeights { weight, bias } = &mut gs[k];
                            (weight.as_mut_slice(), bias.as_mut_slice())
                        });
                    layers::conv_backward(&geom, input, &self.weights[k].weight, &g, &mut gin, gw);
                }
                LayerSpec::Relu => {
                    // Subgradient at zero is zero.
                    for ((gi, &go), &v) in gin.iter_mut().zip(&g).zip(input) {
                        *gi = if v > 0.0 { go } else { 0.0 };
                    }
                }
                LayerSpec::AvgPool { window } => {
                    if let ActShape::Image { c, h, w } = self.shapes[k] {
                        layers::avg_pool_backward(c, h, w, window, &g, &mut gin);
                    }
                }
                LayerSpec::Flatten => gin.copy_from_slice(&g),
                LayerSpec::Dense { out_dim } => {
                    let gw = grads.as_mut().map(|gs| {
                        let LayerWeights { weight, bias } = &mut gs[k];
                        (weight.as_mut_slice(), bias.as_mut_slice())
                    });
                    layers::dense_backward(
                        input.len(),
                        out_dim,
                        input,
                        &self.weights[k].weight,
                        &g,
                        &mut gin,
                        gw,
                    );
                }
            }
            g = gin;
        }
        Ok((g, grads))
    }

    /// Gradient of `<forward(x), upstream>` with respect to `x`.
    pub fn input_gradient(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_trace(x)?;
        Ok(self.backward(&trace, upstream, false)?.0)
    }

    /// Pre-activation values feeding each ReLU, for locating kinks in gradient checks.
    pub fn relu_inputs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_trace(x)?;
        Ok(self
            .spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Relu))
            .flat_map(|(k, _)| trace.acts[k].iter().copied())
            .collect())
    }
}

/// Tensor-level convenience around [`Network::forward`].
pub fn forward(net: &Network, x: &Tensor) -> Result<Tensor> {
    Tensor::from_vec(net.forward(x.data())?)
}

/// Tensor-level convenience around [`Network::input_gradient`].
pub fn input_gradient(net: &Network, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let g = net.input_gradient(x.data(), upstream.data())?;
    Tensor::new(x.shape().to_vec(), g)
}

#[cfg(test)]
mod tests;
