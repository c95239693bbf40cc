use super::Layer;
use crate::error::{LaceError, Result};
use crate::numerics::{standard, Matrix};

#[derive(Debug, Clone)]
pub struct MlpTape {
    /// Input to each layer (the batch, then post-ReLU activations).
    inputs: Vec<Matrix>,
    /// Pre-activations of the hidden layers.
    hidden_pre: Vec<Matrix>,
}

pub(super) fn forward(layers: &[Layer], batch: &Matrix) -> (Matrix, MlpTape) {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut hidden_pre = Vec::with_capacity(layers.len().saturating_sub(1));
    let mut h = batch.clone();
    let last = layers.len() - 1;
    for (i, layer) in layers.iter().enumerate() {
        let z = h.dot(&layer.weight) + &layer.bias;
        inputs.push(h);
        if i == last {
            return (standard(z), MlpTape { inputs, hidden_pre });
        }
        h = z.mapv(|v| v.max(0.0));
        hidden_pre.push(z);
    }
    unreachable!("MLP has at least one layer")
}

pub(super) fn backward(layers: &[Layer], tape: &MlpTape, d_out: &Matrix) -> Result<Vec<Layer>> {
    let rows = tape.inputs[0].nrows();
    let embed = layers.last().expect("non-empty").weight.ncols();
    if d_out.dim() != (rows, embed) || tape.inputs.len() != layers.len() {
        return Err(LaceError::invalid(format!(
            "embedding cotangent is {:?}, tape expects ({rows}, {embed})",
            d_out.dim()
        )));
    }
    let mut grads = Vec::with_capacity(layers.len());
    let mut g = d_out.clone();
    for i in (0..layers.len()).rev() {
        grads.push(Layer {
            weight: standard(tape.inputs[i].t().dot(&g)),
            bias: g.sum_axis(ndarray::Axis(0)),
        });
        if i > 0 {
            let mut up = g.dot(&layers[i].weight.t());
            ndarray::Zip::from(&mut up)
                .and(&tape.hidden_pre[i - 1])
                .for_each(|u, &z| {
                    if z <= 0.0 {
                        *u = 0.0;
                    }
                });
            g = up;
        }
    }
    grads.reverse();
    Ok(grads)
}
