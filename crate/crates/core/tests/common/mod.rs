#![allow(dead_code)]

use msseg::backbone::ProbabilityField;
use msseg::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Softmax of random logits; `sharpness` scales them so larger values give
/// more confident voxels.
pub fn random_logits(r: &mut impl Rng, classes: usize, dims: [usize; 3], sharpness: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..classes * n).map(|_| sharpness * r.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(classes, dims, data)
}

pub fn softmax_field(logits: &Tensor) -> ProbabilityField {
    let n = logits.voxels();
    let c = logits.channels;
    let mut out = Tensor::zeros(c, logits.dims);
    for v in 0..n {
        let m = (0..c).map(|k| logits.data[k * n + v]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|k| (logits.data[k * n + v] - m).exp()).sum();
        for k in 0..c {
            out.data[k * n + v] = (logits.data[k * n + v] - m).exp() / z;
        }
    }
    ProbabilityField(out)
}

pub fn random_field(r: &mut impl Rng, classes: usize, dims: [usize; 3]) -> ProbabilityField {
    let sharp = r.random_range(0.5..12.0);
    softmax_field(&random_logits(r, classes, dims, sharp))
}

/// Straight transcription of the gated, weighted consistency loss with
/// explicit loops over regions, voxels and classes.
pub fn swc_oracle(ps: &ProbabilityField, pt: &ProbabilityField, s: usize, tau: f64) -> f64 {
    let [d, h, w] = ps.0.dims;
    let c = ps.0.channels;
    let eps = 1e-7;
    let get = |f: &ProbabilityField, k: usize, z: usize, y: usize, x: usize| f.0.data[((k * d + z) * h + y) * w + x];
    let mut kept = 0usize;
    let mut total = 0.0;
    let mut rz = 0;
    while rz < d {
        let mut ry = 0;
        while ry < h {
            let mut rx = 0;
            while rx < w {
                let mut conf = 0.0;
                let mut weighted = 0.0;
                for z in rz..rz + s {
                    for y in ry..ry + s {
                        for x in rx..rx + s {
                            let mut cmax = 0.0f64;
                            for k in 0..c {
                                cmax = cmax.max(get(pt, k, z, y, x));
                            }
                            conf += cmax;
                            let mut ce = 0.0;
                            for k in 0..c {
                                let p = get(ps, k, z, y, x).max(eps).min(1.0 - eps);
                                ce -= get(pt, k, z, y, x) * p.ln();
                            }
                            weighted += cmax * ce;
                        }
                    }
                }
                let vol = (s * s * s) as f64;
                if conf / vol >= tau {
                    kept += 1;
                    total += weighted / vol;
                }
                rx += s;
            }
            ry += s;
        }
        rz += s;
    }
    if kept == 0 {
        0.0
    } else {
        total / kept as f64
    }
}

pub fn random_labels(r: &mut impl Rng, n: usize, classes: usize) -> Vec<u16> {
    (0..n).map(|_| r.random_range(0..classes) as u16).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

use msseg::backbone::NetworkConfig;
use msseg::dataset::{DataConfig, SourceConfig};
use msseg::partition::{partition_sources, PartitionConfig, SourcePartition};
use msseg::trainer::TrainConfig;
use msseg::volume::{PhantomSpec, SourceTransform, Volume};

/// Three small sources: labelled, mildly shifted, strongly shifted.
#[allow(dead_code)]
pub fn tiny_data(samples: usize) -> DataConfig {
    let src = |name: &str, seed, offset, labeled| SourceConfig {
        spec: PhantomSpec {
            name: name.into(),
            rng_seed: seed,
            num_teeth: 2,
            volume_dims: [16, 16, 16],
            transform: SourceTransform { intensity_offset: offset, noise_stddev: 40.0, ..Default::default() },
            ..Default::default()
        },
        samples,
        labeled,
        test_samples: 1,
    };
    DataConfig {
        sources: vec![src("a", 1, 0.0, true), src("b", 2, 150.0, false), src("c", 3, 450.0, false)],
    }
}

#[allow(dead_code)]
pub fn tiny_net() -> NetworkConfig {
    NetworkConfig { base_channels: 2, depth: 2, rng_seed: 3, ..Default::default() }
}

#[allow(dead_code)]
pub fn tiny_train() -> TrainConfig {
    TrainConfig { batch_size: 2, epochs: 2, optimizer: msseg::trainer::AdamConfig { lr: 1e-3, ..Default::default() }, ..Default::default() }
}

#[allow(dead_code)]
pub fn split_partition(train: &[Volume]) -> SourcePartition {
    let labeled: Vec<Volume> = train.iter().filter(|v| v.is_labeled()).cloned().collect();
    let unlabeled: Vec<Volume> = train.iter().filter(|v| !v.is_labeled()).cloned().collect();
    partition_sources(&labeled, &unlabeled, &PartitionConfig::default()).unwrap()
}
