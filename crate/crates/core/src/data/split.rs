use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, ImageShape};
use crate::error::{LaceError, Result};
use crate::numerics::Vector;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Holds out `round(fraction · n_c)` samples of every class (at least one,
/// at most `n_c − 1`), chosen by a seeded shuffle. Index lists come back
/// sorted.
pub fn stratified_split(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(LaceError::invalid(format!(
            "validation fraction {fraction} outside (0, 1)"
        )));
    }
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(LaceError::invalid(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
    };
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(LaceError::invalid(format!("class {c} has fewer than 2 samples")));
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let held = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        split.val.extend_from_slice(&members[..held]);
        split.train.extend_from_slice(&members[held..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    Ok(split)
}

/// Per-channel standardisation fitted on a training split. Images use their
/// channel count; flat data treats every feature as a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vector,
    pub std: Vector,
}

impl Normalizer {
    fn channels(ds: &Dataset) -> usize {
        ds.image.map_or(ds.dim(), |s| s.channels)
    }

    /// Population statistics; a constant channel keeps unit scale.
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(LaceError::invalid("cannot fit normalisation on an empty split"));
        }
        let ch = Self::channels(train);
        let mut sum = Vector::zeros(ch);
        let mut count = vec![0usize; ch];
        for row in train.features.rows() {
            for (k, &v) in row.iter().enumerate() {
                sum[k % ch] += v;
                count[k % ch] += 1;
            }
        }
        let mean = Vector::from_shape_fn(ch, |c| sum[c] / count[c] as f64);
        let mut sq = Vector::zeros(ch);
        for row in train.features.rows() {
            for (k, &v) in row.iter().enumerate() {
                let d = v - mean[k % ch];
                sq[k % ch] += d * d;
            }
        }
        let std = Vector::from_shape_fn(ch, |c| {
            let s = (sq[c] / count[c] as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        });
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, ds: &mut Dataset) -> Result<()> {
        let ch = Self::channels(ds);
        if ch != self.mean.len() {
            return Err(LaceError::invalid(format!(
                "normaliser has {} channels, dataset {ch}",
                self.mean.len()
            )));
        }
        for mut row in ds.features.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[k % ch]) / self.std[k % ch];
            }
        }
        Ok(())
    }
}

/// Mirrors an HWC image left to right.
pub fn flip_horizontal(image: &[f64], shape: ImageShape) -> Vec<f64> {
    let ImageShape {
        height: h,
        width: w,
        channels: c,
    } = shape;
    let mut out = vec![0.0; image.len()];
    for y in 0..h {
        for x in 0..w {
            let (src, dst) = ((y * w + x) * c, (y * w + (w - 1 - x)) * c);
            out[dst..dst + c].copy_from_slice(&image[src..src + c]);
        }
    }
    out
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng.set_word_pos(u128::from(index) * 4);
    rng
}

const PAD: usize = 4;

/// Reflect-pad by 4, crop back to the original size at a random offset and
/// flip with probability ½. The draw depends only on `(seed, epoch, index)`.
pub fn augment_image(image: &[f64], shape: ImageShape, seed: u64, epoch: u64, index: u64) -> Vec<f64> {
    let mut rng = sample_rng(seed, epoch, index);
    let oy = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
    let ox = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
    let flip = rng.random_bool(0.5);
    let ImageShape {
        height: h,
        width: w,
        channels: c,
    } = shape;
    let mut out = vec![0.0; image.len()];
    for y in 0..h {
        let sy = reflect(y as isize + oy, h);
        for x in 0..w {
            let sx = reflect(x as isize + ox, w);
            let (src, dst) = ((sy * w + sx) * c, (y * w + x) * c);
            out[dst..dst + c].copy_from_slice(&image[src..src + c]);
        }
    }
    if flip {
        flip_horizontal(&out, shape)
    } else {
        out
    }
}
