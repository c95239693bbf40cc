//! Desk-scale feature extractors with hand-written backward passes.
//!
//! Two architectures are provided: a fully connected network (ReLU between
//! layers, linear embedding layer) and a small convolutional network
//! (3×3 same-padding convolutions, ReLU, 2×2 max pooling, then global average
//! pooling to the last block's channel count). Inputs are flattened rows;
//! images are stored height × width × channel.

mod cnn;
mod mlp;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{LaceError, Result};
use crate::numerics::{Matrix, Vector};

pub use cnn::{gap_backward, gap_forward};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    /// Hidden widths; empty means a single linear embedding layer.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnnSpec {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Output channels of each conv/ReLU/pool block; the last one is the
    /// embedding dimension.
    pub channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackboneSpec {
    Mlp(MlpSpec),
    Cnn(CnnSpec),
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            BackboneSpec::Mlp(s) => {
                if s.input_dim == 0 || s.embed_dim < 2 || s.hidden.contains(&0) {
                    return Err(LaceError::invalid(format!(
                        "MLP needs input ≥ 1, hidden widths ≥ 1 and embed_dim ≥ 2: {s:?}"
                    )));
                }
            }
            BackboneSpec::Cnn(s) => {
                if s.channels.is_empty() || s.in_channels == 0 || s.channels.contains(&0) {
                    return Err(LaceError::invalid(format!("CNN needs at least one block: {s:?}")));
                }
                let factor = 1usize << s.channels.len();
                if s.height == 0 || s.width == 0 || s.height % factor != 0 || s.width % factor != 0 {
                    return Err(LaceError::invalid(format!(
                        "CNN input {}x{} must be divisible by {factor}",
                        s.height, s.width
                    )));
                }
                if *s.channels.last().expect("non-empty") < 2 {
                    return Err(LaceError::invalid("CNN embedding needs at least 2 channels"));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self {
            BackboneSpec::Mlp(s) => s.input_dim,
            BackboneSpec::Cnn(s) => s.height * s.width * s.in_channels,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            BackboneSpec::Mlp(s) => s.embed_dim,
            BackboneSpec::Cnn(s) => *s.channels.last().expect("validated spec"),
        }
    }

    /// Weight shapes `(rows, cols)` of each layer in declaration order.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match self {
            BackboneSpec::Mlp(s) => {
                let mut dims = vec![s.input_dim];
                dims.extend(&s.hidden);
                dims.push(s.embed_dim);
                dims.windows(2).map(|w| (w[0], w[1])).collect()
            }
            BackboneSpec::Cnn(s) => {
                let mut cin = s.in_channels;
                s.channels
                    .iter()
                    .map(|&cout| {
                        let shape = (9 * cin, cout);
                        cin = cout;
                        shape
                    })
                    .collect()
            }
        }
    }

    /// Compact textual form, e.g. `mlp(784-256-64)` or `cnn(32x32x3:16-32-64)`.
    pub fn descriptor(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-");
        match self {
            BackboneSpec::Mlp(s) => {
                let mut dims = vec![s.input_dim];
                dims.extend(&s.hidden);
                dims.push(s.embed_dim);
                format!("mlp({})", join(&dims))
            }
            BackboneSpec::Cnn(s) => format!("cnn({}x{}x{}:{})", s.height, s.width, s.in_channels, join(&s.channels)),
        }
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        let bad = || LaceError::invalid(format!("unrecognised backbone descriptor {text:?}"));
        let nums = |s: &str| -> Result<Vec<usize>> {
            s.split('-')
                .map(|t| t.trim().parse::<usize>().map_err(|_| bad()))
                .collect()
        };
        let spec = if let Some(body) = text.strip_prefix("mlp(").and_then(|t| t.strip_suffix(')')) {
            let dims = nums(body)?;
            if dims.len() < 2 {
                return Err(bad());
            }
            BackboneSpec::Mlp(MlpSpec {
                input_dim: dims[0],
                hidden: dims[1..dims.len() - 1].to_vec(),
                embed_dim: dims[dims.len() - 1],
            })
        } else if let Some(body) = text.strip_prefix("cnn(").and_then(|t| t.strip_suffix(')')) {
            let (shape, chans) = body.split_once(':').ok_or_else(bad)?;
            let hwc: Vec<usize> = shape
                .split('x')
                .map(|t| t.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            if hwc.len() != 3 {
                return Err(bad());
            }
            BackboneSpec::Cnn(CnnSpec {
                height: hwc[0],
                width: hwc[1],
                in_channels: hwc[2],
                channels: nums(chans)?,
            })
        } else {
            return Err(bad());
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Weight and bias of one dense or convolutional layer. Convolution weights
/// are stored as `(9·C_in) × C_out` with patch rows ordered (dy, dx, c_in).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: BackboneSpec,
    pub layers: Vec<Layer>,
}

/// Gradients with the same layout as [`ModelState::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<Layer>,
}

/// Activations recorded by [`forward`] for the matching [`backward`].
#[derive(Debug, Clone)]
pub enum Tape {
    Mlp(mlp::MlpTape),
    Cnn(cnn::CnnTape),
}

fn layer_tensors(layers: &[Layer]) -> Vec<&[f64]> {
    layers
        .iter()
        .flat_map(|l| {
            [
                l.weight.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
        .collect()
}

impl ModelState {
    /// He-normal weights (`std = √(2 / fan_in)`), zero biases.
    pub fn init(spec: BackboneSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Layer {
                    weight: Matrix::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng)),
                    bias: Vector::zeros(fan_out),
                }
            })
            .collect();
        Ok(ModelState { spec, layers })
    }

    pub fn zeros(spec: BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|shape| Layer {
                weight: Matrix::zeros(shape),
                bias: Vector::zeros(shape.1),
            })
            .collect();
        Ok(ModelState { spec, layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// `[w0, b0, w1, b1, …]`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        layer_tensors(&self.layers)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn check_layers(&self) -> Result<()> {
        let shapes = self.spec.layer_shapes();
        if shapes.len() != self.layers.len()
            || shapes
                .iter()
                .zip(&self.layers)
                .any(|(&s, l)| l.weight.dim() != s || l.bias.len() != s.1)
        {
            return Err(LaceError::invalid("model layers do not match their spec"));
        }
        Ok(())
    }
}

impl ModelGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        layer_tensors(&self.layers)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().into_iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Embeds a batch (`B × input_dim`) and records the activations needed for
/// the backward pass.
pub fn forward(state: &ModelState, batch: &Matrix) -> Result<(Matrix, Tape)> {
    state.check_layers()?;
    if batch.ncols() != state.spec.input_dim() {
        return Err(LaceError::invalid(format!(
            "batch has {} features, backbone {} expects {}",
            batch.ncols(),
            state.spec.descriptor(),
            state.spec.input_dim()
        )));
    }
    match &state.spec {
        BackboneSpec::Mlp(_) => {
            let (e, t) = mlp::forward(&state.layers, batch);
            Ok((e, Tape::Mlp(t)))
        }
        BackboneSpec::Cnn(spec) => {
            let (e, t) = cnn::forward(spec, &state.layers, batch);
            Ok((e, Tape::Cnn(t)))
        }
    }
}

/// Embeddings only.
pub fn embed(state: &ModelState, batch: &Matrix) -> Result<Matrix> {
    forward(state, batch).map(|(e, _)| e)
}

/// Gradients of a scalar loss with respect to every layer, given the
/// loss's cotangent on the embeddings.
pub fn backward(state: &ModelState, tape: &Tape, d_embeddings: &Matrix) -> Result<ModelGrads> {
    state.check_layers()?;
    let layers = match (&state.spec, tape) {
        (BackboneSpec::Mlp(_), Tape::Mlp(t)) => mlp::backward(&state.layers, t, d_embeddings)?,
        (BackboneSpec::Cnn(spec), Tape::Cnn(t)) => cnn::backward(spec, &state.layers, t, d_embeddings)?,
        _ => return Err(LaceError::invalid("tape was recorded by a different architecture")),
    };
    Ok(ModelGrads { layers })
}
