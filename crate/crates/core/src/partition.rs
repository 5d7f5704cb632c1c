//! Splits all samples into the main / mixed / other subsets.
//!
//! The labelled samples form the main subset. Every unlabelled sample is
//! scored by the 1-D Wasserstein distance between its intensity histogram and
//! the pooled histogram of the main subset; the closest fraction becomes the
//! mixed subset and the rest the other subset.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub range: (f64, f64),
    pub masses: Vec<f64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.masses.len()
    }

    pub fn bin_width(&self) -> f64 {
        (self.range.1 - self.range.0) / self.bins() as f64
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        self.range.0 + (k as f64 + 0.5) * self.bin_width()
    }
}

fn check_binning(bins: usize, range: (f64, f64)) -> Result<()> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("bins = {bins}, need >= 2")));
    }
    if !(range.0 < range.1) || !range.0.is_finite() || !range.1.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid histogram range {range:?}")));
    }
    Ok(())
}

#[inline]
fn bin_of(x: f64, bins: usize, range: (f64, f64)) -> usize {
    let t = (x - range.0) / (range.1 - range.0) * bins as f64;
    if t <= 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

fn accumulate(counts: &mut [u64], data: &[f32], range: (f64, f64)) {
    let bins = counts.len();
    for &x in data {
        counts[bin_of(x as f64, bins, range)] += 1;
    }
}

fn normalize(counts: &[u64], range: (f64, f64)) -> Histogram {
    let total: u64 = counts.iter().sum();
    Histogram {
        range,
        masses: counts.iter().map(|&c| c as f64 / total as f64).collect(),
    }
}

/// Normalised voxel-intensity histogram; out-of-range voxels land in the edge
/// bins.
pub fn intensity_histogram(v: &Volume, bins: usize, range: (f64, f64)) -> Result<Histogram> {
    check_binning(bins, range)?;
    if v.data.is_empty() {
        return Err(Error::InvalidVolume("empty volume".into()));
    }
    let mut counts = vec![0u64; bins];
    accumulate(&mut counts, &v.data, range);
    Ok(normalize(&counts, range))
}

/// Histogram of all voxels of several volumes taken together.
pub fn pooled_histogram(volumes: &[&Volume], bins: usize, range: (f64, f64)) -> Result<Histogram> {
    check_binning(bins, range)?;
    let mut counts = vec![0u64; bins];
    for v in volumes {
        accumulate(&mut counts, &v.data, range);
    }
    if counts.iter().sum::<u64>() == 0 {
        return Err(Error::InvalidVolume("empty volume set".into()));
    }
    Ok(normalize(&counts, range))
}

/// W₁ between two histograms on the same binning: the L1 distance between
/// their CDFs scaled by the bin width.
pub fn wasserstein_1d(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.bins() != q.bins() || p.range != q.range {
        return Err(Error::Binning(format!(
            "{} bins over {:?} vs {} bins over {:?}",
            p.bins(),
            p.range,
            q.bins(),
            q.range
        )));
    }
    for (name, h) in [("p", p), ("q", q)] {
        let total: f64 = h.masses.iter().sum();
        if (total - 1.0).abs() > 1e-6 || h.masses.iter().any(|&m| !(m >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "histogram {name} is not a distribution (sum {total})"
            )));
        }
    }
    let mut cdf_gap = 0.0;
    let mut acc = 0.0;
    for (a, b) in p.masses.iter().zip(&q.masses) {
        cdf_gap += a - b;
        acc += cdf_gap.abs();
    }
    Ok(acc * p.bin_width())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Sample,
    Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    pub mixed_fraction: f64,
    pub bins: usize,
    pub range: (f64, f64),
    pub granularity: Granularity,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            mixed_fraction: 0.5,
            bins: 256,
            range: (-1000.0, 3000.0),
            granularity: Granularity::Sample,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourcePartition {
    pub main: Vec<String>,
    pub mixed: Vec<String>,
    pub other: Vec<String>,
    pub distances: BTreeMap<String, f64>,
}

impl SourcePartition {
    /// Checks disjointness, coverage, label status and distance ordering.
    pub fn validate(&self, labeled_ids: &[&str], unlabeled_ids: &[&str]) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("partition: {m}")));
        let main: BTreeSet<&str> = self.main.iter().map(String::as_str).collect();
        let mixed: BTreeSet<&str> = self.mixed.iter().map(String::as_str).collect();
        let other: BTreeSet<&str> = self.other.iter().map(String::as_str).collect();
        if main.len() != self.main.len() || mixed.len() != self.mixed.len() || other.len() != self.other.len() {
            return bad("duplicate ids".into());
        }
        if !main.is_disjoint(&mixed) || !main.is_disjoint(&other) || !mixed.is_disjoint(&other) {
            return bad("subsets overlap".into());
        }
        let labeled: BTreeSet<&str> = labeled_ids.iter().copied().collect();
        let unlabeled: BTreeSet<&str> = unlabeled_ids.iter().copied().collect();
        if main != labeled {
            return bad("main subset differs from the labelled samples".into());
        }
        let rest: BTreeSet<&str> = mixed.union(&other).copied().collect();
        if rest != unlabeled {
            return bad("mixed ∪ other differs from the unlabelled samples".into());
        }
        let max_mixed = self.mixed.iter().map(|id| self.distances.get(id)).try_fold(f64::NEG_INFINITY, |m, d| d.map(|d| m.max(*d)));
        let min_other = self.other.iter().map(|id| self.distances.get(id)).try_fold(f64::INFINITY, |m, d| d.map(|d| m.min(*d)));
        match (max_mixed, min_other) {
            (Some(a), Some(b)) if a <= b => Ok(()),
            (Some(a), Some(b)) => bad(format!("mixed distance {a} exceeds other distance {b}")),
            _ => bad("missing distance entry".into()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::json(path, e))?;
        crate::volume::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
    }
}

pub fn partition_sources(
    labeled: &[Volume],
    unlabeled: &[Volume],
    cfg: &PartitionConfig,
) -> Result<SourcePartition> {
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(Error::InvalidArgument(
            "partitioning needs labelled and unlabelled samples".into(),
        ));
    }
    if !(cfg.mixed_fraction > 0.0 && cfg.mixed_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mixed_fraction {} not in (0, 1)",
            cfg.mixed_fraction
        )));
    }
    let reference = pooled_histogram(&labeled.iter().collect::<Vec<_>>(), cfg.bins, cfg.range)?;

    let mut scored: Vec<(f64, &str)> = match cfg.granularity {
        Granularity::Sample => unlabeled
            .iter()
            .map(|v| {
                let h = intensity_histogram(v, cfg.bins, cfg.range)?;
                Ok((wasserstein_1d(&h, &reference)?, v.sample_id.as_str()))
            })
            .collect::<Result<_>>()?,
        Granularity::Source => {
            let mut by_source: BTreeMap<&str, Vec<&Volume>> = BTreeMap::new();
            for v in unlabeled {
                by_source.entry(v.source_id.as_str()).or_default().push(v);
            }
            let mut source_dist = BTreeMap::new();
            for (src, vols) in &by_source {
                let h = pooled_histogram(vols, cfg.bins, cfg.range)?;
                source_dist.insert(*src, wasserstein_1d(&h, &reference)?);
            }
            unlabeled
                .iter()
                .map(|v| (source_dist[v.source_id.as_str()], v.sample_id.as_str()))
                .collect()
        }
    };
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));

    let n_mixed = ((cfg.mixed_fraction * scored.len() as f64).ceil() as usize).min(scored.len());
    let distances = scored.iter().map(|(d, id)| (id.to_string(), *d)).collect();
    let mut main: Vec<String> = labeled.iter().map(|v| v.sample_id.clone()).collect();
    main.sort();
    Ok(SourcePartition {
        main,
        mixed: scored[..n_mixed].iter().map(|(_, id)| id.to_string()).collect(),
        other: scored[n_mixed..].iter().map(|(_, id)| id.to_string()).collect(),
        distances,
    })
}
