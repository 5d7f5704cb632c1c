//! Confidence-gated, confidence-weighted consistency between a student and a
//! teacher probability field.
//!
//! The volume is tiled into cubes of side `s`. A cube's confidence is the
//! mean over its voxels of the teacher's top-class probability. Cubes below
//! `tau` are dropped; inside every kept cube each voxel's alignment term is
//! weighted by that voxel's teacher confidence. The loss is the mean over
//! kept cubes of the per-cube mean of weighted terms, and exactly zero when
//! no cube survives.

use serde::{Deserialize, Serialize};

use crate::backbone::ProbabilityField;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside logarithms.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub origin: [usize; 3],
    pub confidence: f64,
    pub retained: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub side: usize,
    pub tau: f64,
    pub regions: Vec<Region>,
}

impl RegionGrid {
    pub fn retained_count(&self) -> usize {
        self.regions.iter().filter(|r| r.retained).count()
    }

    pub fn retained_fraction(&self) -> f64 {
        if self.regions.is_empty() {
            0.0
        } else {
            self.retained_count() as f64 / self.regions.len() as f64
        }
    }
}

/// Origins of the non-overlapping cubes of side `s` covering `dims`, in
/// z-major order.
pub fn tile_regions(dims: [usize; 3], s: usize) -> Result<Vec<[usize; 3]>> {
    if s == 0 || dims.iter().any(|&d| d == 0 || d % s != 0) {
        return Err(Error::Indivisible {
            dims,
            divisor: s,
            hint: " (region side); crop or pad the volume before computing the consistency loss",
        });
    }
    let mut origins = Vec::with_capacity(dims.iter().map(|d| d / s).product());
    for z in (0..dims[0]).step_by(s) {
        for y in (0..dims[1]).step_by(s) {
            for x in (0..dims[2]).step_by(s) {
                origins.push([z, y, x]);
            }
        }
    }
    Ok(origins)
}

/// Flat voxel indices of the cube at `origin`.
pub fn region_voxels(dims: [usize; 3], origin: [usize; 3], s: usize) -> impl Iterator<Item = usize> {
    let [_, h, w] = dims;
    (0..s).flat_map(move |dz| {
        (0..s).flat_map(move |dy| {
            let row = ((origin[0] + dz) * h + origin[1] + dy) * w + origin[2];
            row..row + s
        })
    })
}

/// Mean over the cube of the per-voxel maximum class probability.
pub fn region_confidence(pt: &ProbabilityField, origin: [usize; 3], s: usize) -> Result<f64> {
    let dims = pt.dims();
    if s == 0 || (0..3).any(|a| origin[a] + s > dims[a]) {
        return Err(Error::InvalidArgument(format!(
            "region at {origin:?} with side {s} exceeds {dims:?}"
        )));
    }
    let sum: f64 = region_voxels(dims, origin, s).map(|v| pt.confidence(v)).sum();
    Ok(sum / (s * s * s) as f64)
}

pub fn region_grid(pt: &ProbabilityField, s: usize, tau: f64) -> Result<RegionGrid> {
    let regions = tile_regions(pt.dims(), s)?
        .into_iter()
        .map(|origin| {
            let confidence = region_confidence(pt, origin, s)?;
            Ok(Region {
                origin,
                confidence,
                retained: confidence >= tau,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RegionGrid { side: s, tau, regions })
}

/// Per-voxel alignment between student and teacher class distributions.
pub trait Alignment {
    /// Returns the alignment value and writes `∂value/∂student` into `grad`.
    fn eval(&self, student: &[f64], teacher: &[f64], grad: &mut [f64]) -> f64;
}

/// `−Σ_c teacher_c · ln(clamp(student_c))`, the teacher acting as target.
#[derive(Clone, Copy, Debug, Default)]
pub struct CrossEntropy;

impl Alignment for CrossEntropy {
    fn eval(&self, student: &[f64], teacher: &[f64], grad: &mut [f64]) -> f64 {
        let mut ce = 0.0;
        for ((s, t), g) in student.iter().zip(teacher).zip(grad.iter_mut()) {
            let clamped = s.clamp(EPS, 1.0 - EPS);
            ce -= t * clamped.ln();
            *g = if *s > EPS && *s < 1.0 - EPS { -t / s } else { 0.0 };
        }
        ce
    }
}

#[derive(Clone, Debug)]
pub struct SwcOutput {
    pub loss: f64,
    /// `∂loss/∂P^S`, same shape as the student field.
    pub grad: Tensor,
    pub grid: RegionGrid,
}

pub fn swc_loss(ps: &ProbabilityField, pt: &ProbabilityField, s: usize, tau: f64) -> Result<SwcOutput> {
    swc_loss_with(&CrossEntropy, ps, pt, s, tau)
}

pub fn swc_loss_with<A: Alignment>(
    align: &A,
    ps: &ProbabilityField,
    pt: &ProbabilityField,
    s: usize,
    tau: f64,
) -> Result<SwcOutput> {
    if !ps.0.same_shape(&pt.0) {
        return Err(Error::Shape(format!(
            "student {}×{:?} vs teacher {}×{:?}",
            ps.classes(),
            ps.dims(),
            pt.classes(),
            pt.dims()
        )));
    }
    let grid = region_grid(pt, s, tau)?;
    let dims = ps.dims();
    let classes = ps.classes();
    let n = ps.voxels();
    let mut grad = Tensor::zeros(classes, dims);
    let kept = grid.retained_count();
    if kept == 0 {
        return Ok(SwcOutput { loss: 0.0, grad, grid });
    }
    let region_size = (s * s * s) as f64;
    let scale = 1.0 / (kept as f64 * region_size);
    let mut sv = vec![0.0; classes];
    let mut tv = vec![0.0; classes];
    let mut gv = vec![0.0; classes];
    let mut loss = 0.0;
    for region in grid.regions.iter().filter(|r| r.retained) {
        let mut region_sum = 0.0;
        for v in region_voxels(dims, region.origin, s) {
            for c in 0..classes {
                sv[c] = ps.0.data[c * n + v];
                tv[c] = pt.0.data[c * n + v];
            }
            let weight = tv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            region_sum += weight * align.eval(&sv, &tv, &mut gv);
            for c in 0..classes {
                grad.data[c * n + v] = weight * gv[c] * scale;
            }
        }
        loss += region_sum / region_size;
    }
    Ok(SwcOutput {
        loss: loss / kept as f64,
        grad,
        grid,
    })
}
