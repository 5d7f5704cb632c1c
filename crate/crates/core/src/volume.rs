//! Volume container, the `MS3T` on-disk format and the synthetic phantom
//! generator.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! "MS3T"  u16 version  u16 flags(bit0 = labels)  u32 D  u32 H  u32 W  u16 C
//! f32 × D·H·W intensities
//! u16 × D·H·W labels        (only if flags bit0 is set)
//! ```
//!
//! Metadata lives next to the payload in `<name>.meta.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MAGIC: &[u8; 4] = b"MS3T";
pub const FORMAT_VERSION: u16 = 1;
pub const FLAG_LABELS: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 12 + 2;

/// Peak intensity at a tooth centre before the source transform.
pub const TOOTH_PEAK: f64 = 1600.0;
/// Intensity drop from centre to the labelled tooth surface.
pub const TOOTH_FALLOFF: f64 = 700.0;
/// Intensity of the unlabelled soft-tissue halo just outside each tooth.
pub const HALO_LEVEL: f64 = 350.0;
/// Halo extent as a multiple of the tooth's ellipsoidal radius.
pub const HALO_EXTENT: f64 = 1.35;
pub const BACKGROUND_LEVEL: f64 = 0.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub class_id: u16,
}

impl Ellipsoid {
    /// Normalised ellipsoidal radius of a point; `<= 1` means inside.
    pub fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn bounding_radius(&self) -> f64 {
        self.semi_axes.iter().cloned().fold(0.0, f64::max) * HALO_EXTENT
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub spec_name: String,
    pub rng_seed: u64,
    pub sample_index: usize,
    pub placements: Vec<Ellipsoid>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
    pub labels: Option<Vec<u16>>,
    pub class_count: usize,
    pub source_id: String,
    pub sample_id: String,
    pub spacing: [f64; 3],
    pub provenance: Option<Provenance>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>, class_count: usize) -> Result<Self> {
        let v = Volume {
            dims,
            data,
            labels: None,
            class_count,
            source_id: String::new(),
            sample_id: String::new(),
            spacing: [1.0; 3],
            provenance: None,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxels() == 0 {
            return Err(Error::InvalidVolume("zero-sized volume".into()));
        }
        if self.data.len() != self.voxels() {
            return Err(Error::InvalidVolume(format!(
                "data holds {} values for dims {:?}",
                self.data.len(),
                self.dims
            )));
        }
        if let Some(i) = self.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite intensity at voxel {i}")));
        }
        if self.class_count < 2 {
            return Err(Error::InvalidVolume(format!(
                "class count {} < 2",
                self.class_count
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.voxels() {
                return Err(Error::LabelShape {
                    data: self.dims,
                    labels: [labels.len(), 1, 1],
                });
            }
            if let Some(&bad) = labels.iter().find(|&&l| l as usize >= self.class_count) {
                return Err(Error::LabelRange {
                    value: bad as usize,
                    classes: self.class_count,
                });
            }
        }
        Ok(())
    }

    pub fn mean_intensity(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum::<f64>() / self.voxels() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceTransform {
    pub intensity_offset: f64,
    pub intensity_scale: f64,
    pub noise_stddev: f64,
    pub blur_radius: f64,
}

impl Default for SourceTransform {
    fn default() -> Self {
        SourceTransform {
            intensity_offset: 0.0,
            intensity_scale: 1.0,
            noise_stddev: 0.0,
            blur_radius: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    /// Used as the source id of every generated volume.
    pub name: String,
    pub num_teeth: usize,
    pub class_count: usize,
    pub volume_dims: [usize; 3],
    pub transform: SourceTransform,
    pub rng_seed: u64,
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
}

fn default_spacing() -> [f64; 3] {
    [0.4; 3]
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            name: "source".into(),
            num_teeth: 4,
            class_count: 2,
            volume_dims: [32, 32, 32],
            transform: SourceTransform::default(),
            rng_seed: 0,
            spacing: default_spacing(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidSpec {
                name: self.name.clone(),
                reason,
            })
        };
        let t = &self.transform;
        if !(t.intensity_scale > 0.0) {
            return fail(format!("intensity_scale {} must be > 0", t.intensity_scale));
        }
        if !(t.noise_stddev >= 0.0) {
            return fail(format!("noise_stddev {} must be >= 0", t.noise_stddev));
        }
        if !(t.blur_radius >= 0.0) {
            return fail(format!("blur_radius {} must be >= 0", t.blur_radius));
        }
        if !t.intensity_offset.is_finite() {
            return fail("intensity_offset must be finite".into());
        }
        if self.class_count < 2 {
            return fail(format!("class_count {} must be >= 2", self.class_count));
        }
        if self.class_count > u16::MAX as usize {
            return fail("class_count does not fit in u16".into());
        }
        if self.volume_dims.iter().any(|&d| d == 0) {
            return fail("volume_dims must be nonzero".into());
        }
        Ok(())
    }

    fn tooth_class(&self, k: usize) -> u16 {
        (1 + k % (self.class_count - 1)) as u16
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 2000;

fn place_teeth(spec: &PhantomSpec, rng: &mut impl Rng) -> Result<Vec<Ellipsoid>> {
    let dims = spec.volume_dims;
    let min_dim = *dims.iter().min().unwrap() as f64;
    let lo = (0.10 * min_dim).max(1.0);
    let hi = (0.18 * min_dim).max(lo + 0.25);
    let mut placed: Vec<Ellipsoid> = Vec::with_capacity(spec.num_teeth);
    let mut attempts = 0;
    while placed.len() < spec.num_teeth {
        if attempts == MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Placement {
                name: spec.name.clone(),
                num_teeth: spec.num_teeth,
                dims,
                attempts,
            });
        }
        attempts += 1;
        let semi_axes = [
            rng.random_range(lo..hi),
            rng.random_range(lo..hi),
            rng.random_range(lo..hi),
        ];
        let mut center = [0.0; 3];
        let mut fits = true;
        for a in 0..3 {
            let margin = semi_axes[a] * HALO_EXTENT;
            let extent = dims[a] as f64 - 1.0;
            if 2.0 * margin >= extent {
                fits = false;
                break;
            }
            center[a] = rng.random_range(margin..extent - margin);
        }
        if !fits {
            continue;
        }
        let candidate = Ellipsoid {
            center,
            semi_axes,
            class_id: spec.tooth_class(placed.len()),
        };
        let clear = placed.iter().all(|e| {
            let d2: f64 = (0..3).map(|a| (e.center[a] - center[a]).powi(2)).sum();
            d2.sqrt() > e.bounding_radius() + candidate.bounding_radius()
        });
        if clear {
            placed.push(candidate);
        }
    }
    Ok(placed)
}

/// Untransformed phantom intensities and labels for a set of placements.
pub fn render_base(dims: [usize; 3], teeth: &[Ellipsoid]) -> (Vec<f64>, Vec<u16>) {
    let n = dims.iter().product();
    let mut base = vec![BACKGROUND_LEVEL; n];
    let mut labels = vec![0u16; n];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = (z * dims[1] + y) * dims[2] + x;
                let p = [z as f64, y as f64, x as f64];
                for e in teeth {
                    let r = e.radius(p);
                    if r <= 1.0 {
                        base[i] = TOOTH_PEAK - TOOTH_FALLOFF * r * r;
                        labels[i] = e.class_id;
                        break;
                    } else if r <= HALO_EXTENT {
                        let t = (r - 1.0) / (HALO_EXTENT - 1.0);
                        base[i] = base[i].max(HALO_LEVEL * (1.0 - t * t));
                    }
                }
            }
        }
    }
    (base, labels)
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(values: &mut [f64], dims: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut scratch = vec![0.0; values.len()];
    for axis in 0..3 {
        let len = dims[axis] as isize;
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let pos = [z, y, x];
                    let i = z * strides[0] + y * strides[1] + x;
                    let along = pos[axis] as isize;
                    let base_i = i - pos[axis] * strides[axis];
                    let mut acc = 0.0;
                    for (k, w) in kernel.iter().enumerate() {
                        let j = (along + k as isize - radius).clamp(0, len - 1) as usize;
                        acc += w * values[base_i + j * strides[axis]];
                    }
                    scratch[i] = acc;
                }
            }
        }
        values.copy_from_slice(&scratch);
    }
}

const NOISE_TAG: u64 = 0x6e6f697365;
const PLACE_TAG: u64 = 0x706c616365;

/// Generate `n_samples` phantom volumes for one source.
///
/// Sample `k` draws its placements and noise from streams keyed by
/// `(rng_seed, k)`, so two specs that differ only in their transform produce
/// seed-matched samples with identical geometry and identical noise draws.
pub fn generate_source(spec: &PhantomSpec, n_samples: usize, labeled: bool) -> Result<Vec<Volume>> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    (0..n_samples)
        .map(|k| generate_sample(spec, k, labeled))
        .collect()
}

pub fn generate_sample(spec: &PhantomSpec, index: usize, labeled: bool) -> Result<Volume> {
    let mut place_rng = rng::stream(spec.rng_seed, &[PLACE_TAG, index as u64]);
    let teeth = place_teeth(spec, &mut place_rng)?;
    let dims = spec.volume_dims;
    let (base, labels) = render_base(dims, &teeth);
    let t = &spec.transform;
    let mut values: Vec<f64> = base
        .iter()
        .map(|b| t.intensity_offset + t.intensity_scale * b)
        .collect();
    gaussian_blur(&mut values, dims, t.blur_radius);
    if t.noise_stddev > 0.0 {
        let mut noise_rng = rng::stream(spec.rng_seed, &[NOISE_TAG, index as u64]);
        let normal = Normal::new(0.0, t.noise_stddev).expect("validated stddev");
        for v in values.iter_mut() {
            *v += normal.sample(&mut noise_rng);
        }
    }
    let volume = Volume {
        dims,
        data: values.iter().map(|&v| v as f32).collect(),
        labels: labeled.then_some(labels),
        class_count: spec.class_count,
        source_id: spec.name.clone(),
        sample_id: format!("{}-{:04}", spec.name, index),
        spacing: spec.spacing,
        provenance: Some(Provenance {
            generator: concat!("msseg-phantom/", env!("CARGO_PKG_VERSION")).into(),
            spec_name: spec.name.clone(),
            rng_seed: spec.rng_seed,
            sample_index: index,
            placements: teeth,
        }),
    };
    volume.validate()?;
    Ok(volume)
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    source_id: String,
    sample_id: String,
    spacing: [f64; 3],
    dims: [usize; 3],
    class_count: usize,
    labeled: bool,
    provenance: Option<Provenance>,
}

/// `foo/bar.ms3t` → `foo/bar.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    v.validate()?;
    let n = v.voxels();
    let mut buf = Vec::with_capacity(HEADER_LEN + n * 6);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let flags = if v.labels.is_some() { FLAG_LABELS } else { 0 };
    buf.extend_from_slice(&flags.to_le_bytes());
    for d in v.dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidVolume("dimension exceeds u32".into()))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.extend_from_slice(&(v.class_count as u16).to_le_bytes());
    for x in &v.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(labels) = &v.labels {
        for l in labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Decoded binary payload; metadata fields are left at their defaults.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16_at(4);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let flags = u16_at(6);
    let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let class_count = u16_at(20) as usize;
    let n: usize = dims.iter().product();
    let has_labels = flags & FLAG_LABELS != 0;
    let expected = HEADER_LEN + n * 4 + if has_labels { n * 2 } else { 0 };
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::InvalidVolume(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let data_end = HEADER_LEN + n * 4;
    let data = bytes[HEADER_LEN..data_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = has_labels.then(|| {
        bytes[data_end..expected]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect()
    });
    let v = Volume {
        dims,
        data,
        labels,
        class_count,
        source_id: String::new(),
        sample_id: String::new(),
        spacing: [1.0; 3],
        provenance: None,
    };
    v.validate()?;
    Ok(v)
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let bytes = encode_volume(v)?;
    let sidecar = Sidecar {
        source_id: v.source_id.clone(),
        sample_id: v.sample_id.clone(),
        spacing: v.spacing,
        dims: v.dims,
        class_count: v.class_count,
        labeled: v.labels.is_some(),
        provenance: v.provenance.clone(),
    };
    let meta = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::json(path, e))?;
    write_atomic(path, &bytes)?;
    write_atomic(&sidecar_path(path), &meta)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut v = decode_volume(&bytes)?;
    let meta_path = sidecar_path(path);
    let meta = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let sidecar: Sidecar = serde_json::from_slice(&meta).map_err(|e| Error::json(&meta_path, e))?;
    if sidecar.dims != v.dims || sidecar.labeled != v.labels.is_some() {
        return Err(Error::LabelShape {
            data: v.dims,
            labels: sidecar.dims,
        });
    }
    if sidecar.class_count != v.class_count {
        return Err(Error::InvalidVolume(format!(
            "sidecar class count {} disagrees with header {}",
            sidecar.class_count, v.class_count
        )));
    }
    v.source_id = sidecar.source_id;
    v.sample_id = sidecar.sample_id;
    v.spacing = sidecar.spacing;
    v.provenance = sidecar.provenance;
    Ok(v)
}

/// Write to a sibling temp file and rename over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
