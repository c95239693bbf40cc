//! Cluster-validity indices over embeddings grouped by their true class.
//!
//! Zero-scatter degeneracies are reported as `f64::INFINITY` rather than
//! errors so that collapsed embeddings can still be compared.

use std::collections::BTreeMap;

use ndarray::Axis;

use crate::error::{LaceError, Result};
use crate::numerics::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    Euclidean,
    /// `1 − cos(u, v)`; a zero vector has cosine 0 with everything.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterScores {
    pub silhouette: f64,
    pub davies_bouldin: f64,
    pub calinski_harabasz: f64,
}

/// Compact cluster index per point plus the cluster sizes; clusters are
/// ordered by label value.
fn group(points: &Matrix, labels: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if points.nrows() != labels.len() {
        return Err(LaceError::invalid(format!(
            "{} points but {} labels",
            points.nrows(),
            labels.len()
        )));
    }
    let ids: BTreeMap<usize, usize> = labels
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    if ids.len() < 2 {
        return Err(LaceError::invalid("cluster validity needs at least 2 distinct labels"));
    }
    let assign: Vec<usize> = labels.iter().map(|l| ids[l]).collect();
    let mut sizes = vec![0; ids.len()];
    for &a in &assign {
        sizes[a] += 1;
    }
    Ok((assign, sizes))
}

fn centroids(points: &Matrix, assign: &[usize], sizes: &[usize]) -> Matrix {
    let mut c = Matrix::zeros((sizes.len(), points.ncols()));
    for (row, &a) in points.rows().into_iter().zip(assign) {
        let mut dst = c.row_mut(a);
        dst += &row;
    }
    for (k, &n) in sizes.iter().enumerate() {
        c.row_mut(k).mapv_inplace(|v| v / n as f64);
    }
    c
}

fn euclid(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette `(b − a)/max(a, b)`; members of singleton clusters score 0.
pub fn silhouette(points: &Matrix, labels: &[usize], distance: Distance) -> Result<f64> {
    let (assign, sizes) = group(points, labels)?;
    let n = points.nrows();
    let k = sizes.len();
    let unit;
    let pts = match distance {
        Distance::Euclidean => points,
        Distance::Cosine => {
            let mut u = points.clone();
            for mut row in u.rows_mut() {
                let norm = row.dot(&row).sqrt();
                if norm > 0.0 {
                    row /= norm;
                }
            }
            unit = u;
            &unit
        }
    };
    // sums[i * k + c]: total distance from point i to cluster c.
    let mut sums = vec![0.0; n * k];
    for i in 0..n {
        let pi = pts.row(i);
        for j in i + 1..n {
            let d = match distance {
                Distance::Euclidean => euclid(pi, pts.row(j)),
                Distance::Cosine => 1.0 - pi.dot(&pts.row(j)),
            };
            sums[i * k + assign[j]] += d;
            sums[j * k + assign[i]] += d;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = assign[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[i * k + own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[i * k + c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Mean over clusters of `max_{j≠i} (σ_i + σ_j) / ‖c_i − c_j‖`, with `σ` the
/// mean distance of members to their centroid. Coincident centroids give
/// `+∞`.
pub fn davies_bouldin(points: &Matrix, labels: &[usize]) -> Result<f64> {
    let (assign, sizes) = group(points, labels)?;
    let cent = centroids(points, &assign, &sizes);
    let k = sizes.len();
    let mut scatter = Vector::zeros(k);
    for (row, &a) in points.rows().into_iter().zip(&assign) {
        scatter[a] += euclid(row, cent.row(a));
    }
    for c in 0..k {
        scatter[c] /= sizes[c] as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i == j {
                continue;
            }
            let sep = euclid(cent.row(i), cent.row(j));
            if sep == 0.0 {
                return Ok(f64::INFINITY);
            }
            worst = worst.max((scatter[i] + scatter[j]) / sep);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// `[tr(B)/(k − 1)] / [tr(W)/(N − k)]` with `B` the size-weighted
/// between-cluster scatter and `W` the within-cluster scatter. Zero `W`
/// gives `+∞`.
pub fn calinski_harabasz(points: &Matrix, labels: &[usize]) -> Result<f64> {
    let (assign, sizes) = group(points, labels)?;
    let (n, k) = (points.nrows(), sizes.len());
    if n == k {
        return Err(LaceError::invalid("Calinski-Harabasz needs more points than clusters"));
    }
    let cent = centroids(points, &assign, &sizes);
    let overall = points.mean_axis(Axis(0)).expect("non-empty");
    let between: f64 = (0..k)
        .map(|c| {
            let d = euclid(cent.row(c), overall.view());
            sizes[c] as f64 * d * d
        })
        .sum();
    let within: f64 = points
        .rows()
        .into_iter()
        .zip(&assign)
        .map(|(row, &a)| {
            let d = euclid(row, cent.row(a));
            d * d
        })
        .sum();
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

/// All three indices; Silhouette uses euclidean distance.
pub fn cluster_scores(points: &Matrix, labels: &[usize]) -> Result<ClusterScores> {
    Ok(ClusterScores {
        silhouette: silhouette(points, labels, Distance::Euclidean)?,
        davies_bouldin: davies_bouldin(points, labels)?,
        calinski_harabasz: calinski_harabasz(points, labels)?,
    })
}
