//! Source-gap diagnostics: intensity densities, central-slice profiles,
//! 2-D feature embeddings and a silhouette-based separability score.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::volume::Volume;

/// Gaussian kernel density estimate of `samples` at each evaluation point.
pub fn kde_curve(samples: &[f64], h: f64, eval_points: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("kde needs at least one sample".into()));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth {h} must be positive")));
    }
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok(eval_points
        .iter()
        .map(|&x| {
            let s: f64 = samples
                .iter()
                .map(|&xi| {
                    let u = (x - xi) / h;
                    (-0.5 * u * u).exp()
                })
                .sum();
            s * norm
        })
        .collect())
}

/// Silverman's rule of thumb, floored so constant data still gets a kernel.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len().max(1) as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (1.06 * var.sqrt() * n.powf(-0.2)).max(1.0)
}

/// Mean intensity along `axis` over the central slice.
///
/// The slice is the plane spanned by `axis` and `(axis + 1) % 3`, taken at the
/// centre of the third axis; entry `i` averages the slice row at position `i`.
pub fn middle_slice_profile(v: &Volume, axis: usize) -> Result<Vec<f64>> {
    if axis > 2 {
        return Err(Error::InvalidArgument(format!("axis {axis} not in 0..3")));
    }
    let across = (axis + 1) % 3;
    let fixed = (axis + 2) % 3;
    let mid = v.dims[fixed] / 2;
    let mut out = Vec::with_capacity(v.dims[axis]);
    for i in 0..v.dims[axis] {
        let mut sum = 0.0;
        for j in 0..v.dims[across] {
            let mut p = [0usize; 3];
            p[axis] = i;
            p[across] = j;
            p[fixed] = mid;
            sum += v.data[v.index(p[0], p[1], p[2])] as f64;
        }
        out.push(sum / v.dims[across] as f64);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Projection {
    Pca,
    Tsne {
        perplexity: f64,
        iterations: usize,
        seed: u64,
    },
}

impl Default for Projection {
    fn default() -> Self {
        Projection::Tsne {
            perplexity: 10.0,
            iterations: 500,
            seed: 0,
        }
    }
}

fn check_features(features: &[Vec<f64>]) -> Result<usize> {
    let d = features.first().map(Vec::len).unwrap_or(0);
    if let Some(f) = features.iter().find(|f| f.len() != d) {
        return Err(Error::Shape(format!("feature of length {} among length {d}", f.len())));
    }
    Ok(d)
}

pub fn embed_features(features: &[Vec<f64>], method: &Projection) -> Result<Vec<[f64; 2]>> {
    if features.len() < 2 {
        return Err(Error::InvalidArgument("embedding needs at least two feature vectors".into()));
    }
    check_features(features)?;
    match *method {
        Projection::Pca => Ok(pca_2d(features)),
        Projection::Tsne {
            perplexity,
            iterations,
            seed,
        } => tsne_2d(features, perplexity, iterations, seed),
    }
}

/// Projection onto the two leading principal axes. Each axis is signed so its
/// largest-magnitude loading is positive.
pub fn pca_2d(features: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = features.len();
    let d = features[0].len();
    if d == 0 {
        return vec![[0.0, 0.0]; n];
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Vec<f64> {
        let Some(&col) = order.get(k) else {
            return vec![0.0; d];
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let (a0, a1) = (axis(0), axis(1));
    (0..n)
        .map(|i| {
            let row = centred.row(i);
            let dot = |a: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            [dot(&a0), dot(&a1)]
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Row-conditional affinities with per-point bandwidth matched to `perplexity`.
fn affinities(d2: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let row = &d2[i * n..(i + 1) * n];
        // shift by the nearest neighbour distance so exp() doesn't underflow
        let dmin = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::INFINITY, f64::min);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut dsum = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let w = (-(row[j] - dmin) * beta).exp();
                sum += w;
                dsum += w * (row[j] - dmin);
            }
            let entropy = sum.ln() + beta * dsum / sum;
            if (entropy - target).abs() < 1e-5 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let mut sum = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            let w = (-(row[j] - dmin) * beta).exp();
            p[i * n + j] = w;
            sum += w;
        }
        for j in 0..n {
            p[i * n + j] /= sum;
        }
    }
    p
}

/// Exact O(n²) t-SNE; intended for the few hundred samples of a desk run.
pub fn tsne_2d(features: &[Vec<f64>], perplexity: f64, iterations: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    let n = features.len();
    if !(perplexity > 0.0) {
        return Err(Error::InvalidArgument(format!("perplexity {perplexity} must be positive")));
    }
    let perplexity = perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            d2[i * n + j] = sq_dist(&features[i], &features[j]);
        }
    }
    // scale-free bandwidth search
    let scale = d2.iter().cloned().fold(0.0, f64::max);
    if scale > 0.0 {
        d2.iter_mut().for_each(|x| *x /= scale);
    }
    let cond = affinities(&d2, n, perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut stream = rng::stream(seed, &[rng::tag("tsne")]);
    let normal = Normal::new(0.0, 1e-4).unwrap();
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut stream), normal.sample(&mut stream)]).collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let lr = (n as f64 / 12.0).max(50.0);
    let exaggeration_until = iterations.min(100);
    let mut q = vec![0.0; n * n];
    for it in 0..iterations {
        let exaggeration = if it < exaggeration_until { 12.0 } else { 1.0 };
        let momentum = if it < 250 { 0.5 } else { 0.8 };
        let mut zsum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let w = 1.0 / (1.0 + sq_dist(&y[i], &y[j]));
                    q[i * n + j] = w;
                    zsum += w;
                }
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in (0..n).filter(|&j| j != i) {
                let w = q[i * n + j];
                let f = 4.0 * (exaggeration * p[i * n + j] - w / zsum) * w;
                g[0] += f * (y[i][0] - y[j][0]);
                g[1] += f * (y[i][1] - y[j][1]);
            }
            for a in 0..2 {
                gains[i][a] = if (g[a] > 0.0) != (vel[i][a] > 0.0) {
                    gains[i][a] + 0.2
                } else {
                    (gains[i][a] * 0.8).max(0.01)
                };
                vel[i][a] = momentum * vel[i][a] - lr * gains[i][a] * g[a];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
        let (mx, my) = (
            y.iter().map(|p| p[0]).sum::<f64>() / n as f64,
            y.iter().map(|p| p[1]).sum::<f64>() / n as f64,
        );
        y.iter_mut().for_each(|p| {
            p[0] -= mx;
            p[1] -= my;
        });
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("t-SNE diverged".into()));
    }
    Ok(y)
}

/// Mean silhouette coefficient of `points` under integer cluster ids.
///
/// A point alone in its cluster scores 0, as does a point whose intra- and
/// nearest-cluster mean distances are both zero.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Shape(format!("{} points, {} labels", points.len(), labels.len())));
    }
    check_features(points)?;
    let clusters: Vec<usize> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    if clusters.len() < 2 {
        return Err(Error::Degenerate("silhouette needs at least two clusters".into()));
    }
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for j in (0..n).filter(|&j| j != i) {
            let e = sums.entry(labels[j]).or_insert((0.0, 0));
            e.0 += sq_dist(&points[i], &points[j]).sqrt();
            e.1 += 1;
        }
        let Some(&(own, own_n)) = sums.get(&labels[i]) else {
            continue;
        };
        let a = own / own_n as f64;
        let b = sums
            .iter()
            .filter(|(&k, _)| k != labels[i])
            .map(|(_, &(s, m))| s / m as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Silhouette of features grouped by source; lower means a smaller gap.
pub fn source_separability<S: AsRef<str>>(features: &[Vec<f64>], sources: &[S]) -> Result<f64> {
    if features.len() != sources.len() {
        return Err(Error::Shape(format!("{} features, {} source labels", features.len(), sources.len())));
    }
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in sources {
        let next = ids.len();
        ids.entry(s.as_ref()).or_insert(next);
        *counts.entry(s.as_ref()).or_default() += 1;
    }
    if ids.len() < 2 {
        return Err(Error::Degenerate(format!(
            "separability needs >= 2 sources, got {}",
            ids.len()
        )));
    }
    if let Some((s, n)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(Error::Degenerate(format!("source {s} has {n} sample(s), needs >= 2")));
    }
    let labels: Vec<usize> = sources.iter().map(|s| ids[s.as_ref()]).collect();
    silhouette(features, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeSeries {
    pub source_id: String,
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

/// One KDE curve per source over a shared grid spanning all intensities.
pub fn source_kdes(volumes: &[&Volume], points: usize, max_samples: usize) -> Result<Vec<KdeSeries>> {
    let mut by_source: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for v in volumes {
        let stride = (v.voxels() / max_samples.max(1)).max(1);
        by_source
            .entry(&v.source_id)
            .or_default()
            .extend(v.data.iter().step_by(stride).map(|&x| x as f64));
    }
    let all = by_source.values().flatten();
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    if !lo.is_finite() {
        return Err(Error::InvalidArgument("no volumes to estimate".into()));
    }
    let pad = 0.1 * (hi - lo).max(1.0);
    let points = points.max(2);
    let grid: Vec<f64> = (0..points)
        .map(|i| lo - pad + (hi - lo + 2.0 * pad) * i as f64 / (points - 1) as f64)
        .collect();
    by_source
        .into_iter()
        .map(|(s, samples)| {
            let h = silverman_bandwidth(&samples);
            Ok(KdeSeries {
                source_id: s.to_string(),
                bandwidth: h,
                density: kde_curve(&samples, h, &grid)?,
                grid: grid.clone(),
            })
        })
        .collect()
}
