//! Tiny model zoo built from autograd primitives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Widths from input features to class count, e.g. `[2, 32, 32, 3]`.
    Mlp { widths: Vec<usize> },
    /// 3x3 conv stack with these output channels, then a dense classifier.
    TinyCnn { channels: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Per-sample input shape: `[features]` for MLPs, `[c, h, w]` for CNNs.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    /// `y = x W^T + b` with `W: [out, in]`.
    Dense {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    /// `W: [out, in, 3, 3]`, stride 1, padding 1.
    Conv {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    Relu,
    Flatten,
}

impl<T: Scalar> Layer<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv { .. } => "conv",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
        }
    }

    pub fn is_quantizable(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv { .. })
    }

    pub fn weight(&self) -> Option<&Tensor<T>> {
        match self {
            Layer::Dense { weight, .. } | Layer::Conv { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        match self {
            Layer::Dense { bias, .. } | Layer::Conv { bias, .. } => Some(bias),
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Tensor<T>, &mut Tensor<T>)> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv { weight, bias } => Some((weight, bias)),
            _ => None,
        }
    }

    /// Output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |w: &Tensor<T>| Error::Shape {
            op: self.name(),
            lhs: input.to_vec(),
            rhs: w.shape().to_vec(),
        };
        match self {
            Layer::Dense { weight, bias } => {
                let s = weight.shape();
                if s.len() != 2 || input != [s[1]] || bias.shape() != [s[0]] {
                    return Err(mismatch(weight));
                }
                Ok(vec![s[0]])
            }
            Layer::Conv { weight, bias } => {
                let s = weight.shape();
                if s.len() != 4 || input.len() != 3 || input[0] != s[1] || bias.shape() != [s[0]] {
                    return Err(mismatch(weight));
                }
                Ok(vec![s[0], input[1], input[2]])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointKind {
    Weight,
    Activation,
}

/// A weight tensor or activation site that receives fake quantization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointSite {
    pub id: String,
    pub kind: PointKind,
    /// Layer owning the weight, or the relu the activation follows
    /// (`None` for the network input).
    pub layer: Option<usize>,
}

/// Intercepts every quantization point during a forward pass.
pub trait ForwardHook<T: Scalar> {
    fn weight(&mut self, graph: &mut Graph<T>, point: usize, w: Var) -> Result<Var>;
    fn activation(&mut self, graph: &mut Graph<T>, point: usize, x: Var) -> Result<Var>;
}

/// Full-precision forward.
pub struct Identity;

impl<T: Scalar> ForwardHook<T> for Identity {
    fn weight(&mut self, _: &mut Graph<T>, _: usize, w: Var) -> Result<Var> {
        Ok(w)
    }
    fn activation(&mut self, _: &mut Graph<T>, _: usize, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Graph handles of one quantizable layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    layers: Vec<Layer<T>>,
    input_shape: Vec<usize>,
    classes: usize,
}

impl<T: Scalar> Model<T> {
    pub fn new(layers: Vec<Layer<T>>, input_shape: Vec<usize>, classes: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyModel);
        }
        let mut shape = input_shape.clone();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        if shape != [classes] {
            return Err(Error::Shape {
                op: "model output",
                lhs: shape,
                rhs: vec![classes],
            });
        }
        Ok(Self {
            layers,
            input_shape,
            classes,
        })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| Some(l.weight()?.numel() + l.bias()?.numel()))
            .sum()
    }

    /// Indices of dense/conv layers in order.
    pub fn quantizable_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_quantizable())
            .collect()
    }

    /// Mutable weight and bias of layer `index`.
    pub fn params_mut(&mut self, index: usize) -> Option<(&mut Tensor<T>, &mut Tensor<T>)> {
        self.layers.get_mut(index)?.params_mut()
    }

    /// Quantization points in forward order: the network input, each
    /// dense/conv weight, and the output of every relu.
    pub fn quant_sites(&self) -> Vec<PointSite> {
        let mut sites = vec![PointSite {
            id: "input.activation".into(),
            kind: PointKind::Activation,
            layer: None,
        }];
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { .. } | Layer::Conv { .. } => sites.push(PointSite {
                    id: format!("layers.{i}.{}.weight", layer.name()),
                    kind: PointKind::Weight,
                    layer: Some(i),
                }),
                Layer::Relu => sites.push(PointSite {
                    id: format!("layers.{i}.relu.activation"),
                    kind: PointKind::Activation,
                    layer: Some(i),
                }),
                Layer::Flatten => {}
            }
        }
        sites
    }

    /// Records parameters as graph leaves; `trainable` controls gradients.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Vec<BoundLayer> {
        self.layers
            .iter()
            .filter_map(|l| {
                let (w, b) = (l.weight()?.clone(), l.bias()?.clone());
                Some(if trainable {
                    BoundLayer {
                        weight: graph.parameter(w),
                        bias: graph.parameter(b),
                    }
                } else {
                    BoundLayer {
                        weight: graph.constant(w),
                        bias: graph.constant(b),
                    }
                })
            })
            .collect()
    }

    /// Forward pass of a batch `x: [n, ...input_shape]` to logits `[n, classes]`.
    pub fn forward(
        &self,
        graph: &mut Graph<T>,
        params: &[BoundLayer],
        x: Var,
        hook: &mut dyn ForwardHook<T>,
    ) -> Result<Var> {
        let xs = graph.try_value(x)?.shape();
        if xs.len() != self.input_shape.len() + 1 || xs[1..] != self.input_shape[..] {
            return Err(Error::Shape {
                op: "model input",
                lhs: xs.to_vec(),
                rhs: self.input_shape.clone(),
            });
        }
        let mut point = 0;
        let mut h = hook.activation(graph, point, x)?;
        point += 1;
        let mut bound = params.iter();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense { .. } | Layer::Conv { .. } => {
                    let p = bound
                        .next()
                        .ok_or_else(|| Error::invalid("missing bound parameters"))?;
                    let w = hook.weight(graph, point, p.weight)?;
                    point += 1;
                    let y = if matches!(layer, Layer::Dense { .. }) {
                        let wt = graph.transpose(w)?;
                        graph.matmul(h, wt)?
                    } else {
                        graph.conv2d(h, w)?
                    };
                    graph.add_bias(y, p.bias)?
                }
                Layer::Relu => {
                    let y = graph.relu(h)?;
                    let y = hook.activation(graph, point, y)?;
                    point += 1;
                    y
                }
                Layer::Flatten => graph.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// Full-precision logits for a batch, outside any training graph.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict_with(x, &mut Identity)
    }

    pub fn predict_with(&self, x: &Tensor<T>, hook: &mut dyn ForwardHook<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &params, xv, hook)?;
        Ok(g.value(out).clone())
    }
}

fn uniform_fan_in<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Builds a model with `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and biases.
pub fn build_model<T: Scalar>(spec: &ModelSpec) -> Result<Model<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::new();
    let dense = |rng: &mut ChaCha8Rng, layers: &mut Vec<Layer<T>>, fan_in: usize, out: usize| {
        layers.push(Layer::Dense {
            weight: uniform_fan_in(rng, vec![out, fan_in], fan_in),
            bias: uniform_fan_in(rng, vec![out], fan_in),
        });
    };
    match &spec.kind {
        ModelKind::Mlp { widths } => {
            if widths.len() < 2 || widths.contains(&0) {
                return Err(Error::invalid(format!(
                    "mlp widths {widths:?} need >= 2 positive entries"
                )));
            }
            for (i, pair) in widths.windows(2).enumerate() {
                if i > 0 {
                    layers.push(Layer::Relu);
                }
                dense(&mut rng, &mut layers, pair[0], pair[1]);
            }
        }
        ModelKind::TinyCnn { channels } => {
            let [c, h, w] = spec.input_shape[..] else {
                return Err(Error::invalid("tiny-cnn input shape must be [c, h, w]"));
            };
            if channels.is_empty() || channels.contains(&0) {
                return Err(Error::invalid("tiny-cnn needs positive channel counts"));
            }
            let mut in_c = c;
            for &out_c in channels {
                let fan_in = in_c * 9;
                layers.push(Layer::Conv {
                    weight: uniform_fan_in(&mut rng, vec![out_c, in_c, 3, 3], fan_in),
                    bias: uniform_fan_in(&mut rng, vec![out_c], fan_in),
                });
                layers.push(Layer::Relu);
                in_c = out_c;
            }
            layers.push(Layer::Flatten);
            dense(&mut rng, &mut layers, in_c * h * w, spec.classes);
        }
    }
    Model::new(layers, spec.input_shape.clone(), spec.classes)
}
