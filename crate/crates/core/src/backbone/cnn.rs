//! Conv(3×3, same) → ReLU → MaxPool(2×2) blocks followed by global average
//! pooling. Activations are kept as `(B·H·W) × C` matrices with rows in
//! (sample, y, x) order so that each convolution is one im2col product.

use super::{CnnSpec, Layer};
use crate::error::{LaceError, Result};
use crate::numerics::{standard, Matrix};

#[derive(Debug, Clone)]
struct BlockTape {
    cols: Matrix,
    pre: Matrix,
    pool_src: Vec<usize>,
    height: usize,
    width: usize,
    in_channels: usize,
}

#[derive(Debug, Clone)]
pub struct CnnTape {
    batch: usize,
    blocks: Vec<BlockTape>,
    final_height: usize,
    final_width: usize,
}

fn im2col(act: &Matrix, batch: usize, h: usize, w: usize) -> Matrix {
    let c = act.ncols();
    let mut cols = Matrix::zeros((batch * h * w, 9 * c));
    for n in 0..batch {
        for y in 0..h {
            for x in 0..w {
                let row = (n * h + y) * w + x;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = x as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = (n * h + sy as usize) * w + sx as usize;
                        let off = (dy * 3 + dx) * c;
                        for ch in 0..c {
                            cols[[row, off + ch]] = act[[src, ch]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Matrix, batch: usize, h: usize, w: usize, c: usize) -> Matrix {
    let mut act = Matrix::zeros((batch * h * w, c));
    for n in 0..batch {
        for y in 0..h {
            for x in 0..w {
                let row = (n * h + y) * w + x;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = x as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = (n * h + sy as usize) * w + sx as usize;
                        let off = (dy * 3 + dx) * c;
                        for ch in 0..c {
                            act[[dst, ch]] += dcols[[row, off + ch]];
                        }
                    }
                }
            }
        }
    }
    act
}

/// 2×2 stride-2 max pooling; returns the pooled map and, per output element,
/// the source row it came from (first maximum wins a tie).
fn max_pool(act: &Matrix, batch: usize, h: usize, w: usize) -> (Matrix, Vec<usize>) {
    let c = act.ncols();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Matrix::zeros((batch * oh * ow, c));
    let mut src = vec![0usize; batch * oh * ow * c];
    for n in 0..batch {
        for y in 0..oh {
            for x in 0..ow {
                let orow = (n * oh + y) * ow + x;
                for ch in 0..c {
                    let mut best_row = (n * h + 2 * y) * w + 2 * x;
                    let mut best = act[[best_row, ch]];
                    for (py, px) in [(0, 1), (1, 0), (1, 1)] {
                        let r = (n * h + 2 * y + py) * w + 2 * x + px;
                        if act[[r, ch]] > best {
                            best = act[[r, ch]];
                            best_row = r;
                        }
                    }
                    out[[orow, ch]] = best;
                    src[orow * c + ch] = best_row;
                }
            }
        }
    }
    (out, src)
}

fn max_pool_backward(d_out: &Matrix, src: &[usize], in_rows: usize) -> Matrix {
    let c = d_out.ncols();
    let mut d_in = Matrix::zeros((in_rows, c));
    for ((r, ch), &g) in d_out.indexed_iter() {
        d_in[[src[r * c + ch], ch]] += g;
    }
    d_in
}

/// Mean over the spatial positions of each sample: `(B·H·W)×C → B×C`.
pub fn gap_forward(act: &Matrix, batch: usize, h: usize, w: usize) -> Matrix {
    let c = act.ncols();
    let area = (h * w) as f64;
    let mut out = Matrix::zeros((batch, c));
    for n in 0..batch {
        let block = act.slice(ndarray::s![n * h * w..(n + 1) * h * w, ..]);
        for ch in 0..c {
            out[[n, ch]] = block.column(ch).sum() / area;
        }
    }
    out
}

/// Adjoint of [`gap_forward`].
pub fn gap_backward(d_out: &Matrix, h: usize, w: usize) -> Matrix {
    let (batch, c) = d_out.dim();
    let area = (h * w) as f64;
    let mut d_in = Matrix::zeros((batch * h * w, c));
    for n in 0..batch {
        for p in 0..h * w {
            for ch in 0..c {
                d_in[[n * h * w + p, ch]] = d_out[[n, ch]] / area;
            }
        }
    }
    d_in
}

pub(super) fn forward(spec: &CnnSpec, layers: &[Layer], batch: &Matrix) -> (Matrix, CnnTape) {
    let b = batch.nrows();
    let (mut h, mut w) = (spec.height, spec.width);
    let mut act = batch
        .to_owned()
        .into_shape_with_order((b * h * w, spec.in_channels))
        .expect("row-major HWC batch");
    let mut blocks = Vec::with_capacity(layers.len());
    for layer in layers {
        let in_channels = act.ncols();
        let cols = im2col(&act, b, h, w);
        let pre = cols.dot(&layer.weight) + &layer.bias;
        let relu = pre.mapv(|v| v.max(0.0));
        let (pooled, pool_src) = max_pool(&relu, b, h, w);
        blocks.push(BlockTape {
            cols,
            pre,
            pool_src,
            height: h,
            width: w,
            in_channels,
        });
        act = pooled;
        h /= 2;
        w /= 2;
    }
    let embeddings = gap_forward(&act, b, h, w);
    (
        embeddings,
        CnnTape {
            batch: b,
            blocks,
            final_height: h,
            final_width: w,
        },
    )
}

pub(super) fn backward(spec: &CnnSpec, layers: &[Layer], tape: &CnnTape, d_out: &Matrix) -> Result<Vec<Layer>> {
    let embed = *spec.channels.last().expect("validated spec");
    if d_out.dim() != (tape.batch, embed) || tape.blocks.len() != layers.len() {
        return Err(LaceError::invalid(format!(
            "embedding cotangent is {:?}, tape expects ({}, {embed})",
            d_out.dim(),
            tape.batch
        )));
    }
    let b = tape.batch;
    let mut g = gap_backward(d_out, tape.final_height, tape.final_width);
    let mut grads = Vec::with_capacity(layers.len());
    for (i, block) in tape.blocks.iter().enumerate().rev() {
        let rows = b * block.height * block.width;
        let mut d_pre = max_pool_backward(&g, &block.pool_src, rows);
        ndarray::Zip::from(&mut d_pre).and(&block.pre).for_each(|d, &z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        });
        grads.push(Layer {
            weight: standard(block.cols.t().dot(&d_pre)),
            bias: d_pre.sum_axis(ndarray::Axis(0)),
        });
        if i > 0 {
            let dcols = d_pre.dot(&layers[i].weight.t());
            g = col2im(&dcols, b, block.height, block.width, block.in_channels);
        }
    }
    grads.reverse();
    Ok(grads)
}
