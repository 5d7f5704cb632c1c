//! Compact V-Net style encoder-decoder.
//!
//! Layer schedule for `depth = L` and `c_l = base_channels · 2^l`:
//!
//! ```text
//! stem      conv3  in   → c0            + act
//! enc[l]    conv3  c_l  → c_l           + act, residual        l < L
//! down[l]   down2  c_l  → c_{l+1}       + act                  l < L
//! bottom    conv3  c_L  → c_L           + act, residual
//! up[l]     up2    c_{l+1} → c_l        + act                  l < L
//! dec[l]    conv3  2c_l → c_l           + act, residual on up  l < L
//! head      conv1  c0   → C             softmax
//! ```
//!
//! There is no normalisation layer, so nothing couples samples in a batch.
//! All arithmetic is `f64`; gradients are hand-derived per layer.

pub mod ops;

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::volume::Volume;

use ops::*;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub class_count: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub rng_seed: u64,
    /// Raw intensities are mapped to `(x - input_shift) / input_scale`.
    pub input_shift: f64,
    pub input_scale: f64,
    /// Initialise the 1×1×1 head to zero so every voxel starts uniform.
    pub zero_head: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            class_count: 2,
            base_channels: 8,
            depth: 3,
            rng_seed: 0,
            input_shift: 500.0,
            input_scale: 1000.0,
            zero_head: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        if self.class_count < 2 {
            return Err(Error::InvalidArgument("class_count must be >= 2".into()));
        }
        if !(self.input_scale > 0.0) || !self.input_shift.is_finite() {
            return Err(Error::InvalidArgument("input normalisation must be finite with scale > 0".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let div = 1usize << self.depth;
        if dims.iter().any(|&d| d == 0 || d % div != 0) {
            return Err(Error::Indivisible {
                dims,
                divisor: div,
                hint: " (2^depth) for the encoder-decoder",
            });
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv3,
    Conv1,
    Down2,
    Up2,
}

#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub ci: usize,
    pub co: usize,
    pub w_offset: usize,
    pub b_offset: usize,
}

impl LayerSpec {
    pub fn weight_len(&self) -> usize {
        let taps = match self.kind {
            LayerKind::Conv3 => 27,
            LayerKind::Conv1 => 1,
            LayerKind::Down2 | LayerKind::Up2 => 8,
        };
        self.ci * self.co * taps
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv3 => self.ci * 27,
            LayerKind::Conv1 => self.ci,
            LayerKind::Down2 => self.ci * 8,
            LayerKind::Up2 => self.ci,
        }
    }
}

/// Offsets of every layer inside the flat parameter vector.
#[derive(Clone, Debug)]
pub struct Layout {
    pub stem: LayerSpec,
    pub enc: Vec<LayerSpec>,
    pub down: Vec<LayerSpec>,
    pub bottom: LayerSpec,
    pub up: Vec<LayerSpec>,
    pub dec: Vec<LayerSpec>,
    pub head: LayerSpec,
    pub len: usize,
}

impl Layout {
    fn new(cfg: &NetworkConfig) -> Self {
        let mut cursor = 0;
        let mut layer = |name: String, kind, ci, co| {
            let mut spec = LayerSpec {
                name,
                kind,
                ci,
                co,
                w_offset: cursor,
                b_offset: 0,
            };
            cursor += spec.weight_len();
            spec.b_offset = cursor;
            cursor += co;
            spec
        };
        let c = |l| cfg.channels(l);
        let depth = cfg.depth;
        let stem = layer("stem".into(), LayerKind::Conv3, cfg.in_channels, c(0));
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for l in 0..depth {
            enc.push(layer(format!("enc{l}"), LayerKind::Conv3, c(l), c(l)));
            down.push(layer(format!("down{l}"), LayerKind::Down2, c(l), c(l + 1)));
        }
        let bottom = layer("bottom".into(), LayerKind::Conv3, c(depth), c(depth));
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in (0..depth).rev() {
            up.push(layer(format!("up{l}"), LayerKind::Up2, c(l + 1), c(l)));
            dec.push(layer(format!("dec{l}"), LayerKind::Conv3, 2 * c(l), c(l)));
        }
        // stored deepest-first; index by level instead
        up.reverse();
        dec.reverse();
        let head = layer("head".into(), LayerKind::Conv1, c(0), cfg.class_count);
        Layout {
            stem,
            enc,
            down,
            bottom,
            up,
            dec,
            head,
            len: cursor,
        }
    }

    pub fn layers(&self) -> Vec<&LayerSpec> {
        let mut all = vec![&self.stem];
        all.extend(self.enc.iter());
        all.extend(self.down.iter());
        all.push(&self.bottom);
        all.extend(self.up.iter());
        all.extend(self.dec.iter());
        all.push(&self.head);
        all.sort_by_key(|l| l.w_offset);
        all
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub values: Vec<f64>,
}

const PARAM_MAGIC: &[u8; 4] = b"MSNP";
const PARAM_VERSION: u16 = 1;

/// He-normal weights, zero biases, deterministic in `rng_seed`.
pub fn init_network(cfg: &NetworkConfig) -> Result<NetworkParams> {
    cfg.validate()?;
    let layout = cfg.layout();
    let mut values = vec![0.0; layout.len];
    for (idx, spec) in layout.layers().into_iter().enumerate() {
        let is_head = spec.kind == LayerKind::Conv1;
        if is_head && cfg.zero_head {
            continue;
        }
        let gain = if is_head { 1.0 } else { 2.0 };
        let std = (gain / spec.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut stream = rng::stream(cfg.rng_seed, &[rng::tag("init"), idx as u64]);
        for v in &mut values[spec.w_offset..spec.w_offset + spec.weight_len()] {
            *v = normal.sample(&mut stream);
        }
    }
    Ok(NetworkParams {
        config: cfg.clone(),
        values,
    })
}

impl NetworkParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn w(&self, spec: &LayerSpec) -> &[f64] {
        &self.values[spec.w_offset..spec.w_offset + spec.weight_len()]
    }

    fn b(&self, spec: &LayerSpec) -> &[f64] {
        &self.values[spec.b_offset..spec.b_offset + spec.co]
    }

    pub fn digest(&self) -> String {
        digest_values(&self.values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_f64_blob(&self.values)
    }

    pub fn from_bytes(config: NetworkConfig, bytes: &[u8]) -> Result<Self> {
        let values = decode_f64_blob(bytes)?;
        let expected = config.layout().len;
        if values.len() != expected {
            return Err(Error::Checkpoint(format!(
                "parameter blob holds {} values, config needs {expected}",
                values.len()
            )));
        }
        Ok(NetworkParams { config, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::volume::write_atomic(path, &self.to_bytes())
    }

    pub fn load(config: NetworkConfig, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(config, &bytes)
    }
}

pub fn digest_values(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn encode_f64_blob(values: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(14 + values.len() * 8);
    buf.extend_from_slice(PARAM_MAGIC);
    buf.extend_from_slice(&PARAM_VERSION.to_le_bytes());
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_f64_blob(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() < 14 || &bytes[..4] != PARAM_MAGIC {
        return Err(Error::Checkpoint("not a parameter blob".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PARAM_VERSION {
        return Err(Error::Checkpoint(format!("unsupported blob version {version}")));
    }
    let n = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let payload = &bytes[14..];
    if payload.len() != n * 8 {
        return Err(Error::Checkpoint(format!(
            "blob declares {n} values but carries {} bytes",
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Per-voxel class probabilities, `C×D×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityField(pub Tensor);

impl ProbabilityField {
    pub fn classes(&self) -> usize {
        self.0.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.0.dims
    }

    pub fn voxels(&self) -> usize {
        self.0.voxels()
    }

    #[inline]
    pub fn prob(&self, class: usize, voxel: usize) -> f64 {
        self.0.data[class * self.voxels() + voxel]
    }

    /// `max_c P[c, i]`.
    #[inline]
    pub fn confidence(&self, voxel: usize) -> f64 {
        (0..self.classes())
            .map(|c| self.prob(c, voxel))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Argmax per voxel; ties go to the lower class id.
    pub fn argmax(&self) -> Vec<u16> {
        (0..self.voxels())
            .map(|v| {
                let mut best = 0;
                for c in 1..self.classes() {
                    if self.prob(c, v) > self.prob(best, v) {
                        best = c;
                    }
                }
                best as u16
            })
            .collect()
    }

    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for v in 0..self.voxels() {
            let mut s = 0.0;
            for c in 0..self.classes() {
                let p = self.prob(c, v);
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidArgument(format!("probability {p} at voxel {v}")));
                }
                s += p;
            }
            if (s - 1.0).abs() > tol {
                return Err(Error::InvalidArgument(format!("probabilities sum to {s} at voxel {v}")));
            }
        }
        Ok(())
    }
}

/// Intermediate activations retained for the backward pass.
pub struct ForwardCache {
    input: Tensor,
    stem: Tensor,
    enc_h: Vec<Tensor>,
    skip: Vec<Tensor>,
    down: Vec<Tensor>,
    bottom_h: Tensor,
    bottom: Tensor,
    up: Vec<Tensor>,
    cat: Vec<Tensor>,
    dec_h: Vec<Tensor>,
    dec: Vec<Tensor>,
    pub probs: ProbabilityField,
}

impl ForwardCache {
    /// Channel means of the bottleneck activations.
    pub fn pooled_bottleneck(&self) -> Vec<f64> {
        let n = self.bottom.voxels() as f64;
        (0..self.bottom.channels)
            .map(|c| self.bottom.plane(c).iter().sum::<f64>() / n)
            .collect()
    }
}

/// Raw intensities → normalised single-channel network input.
pub fn prepare_input(cfg: &NetworkConfig, v: &Volume) -> Tensor {
    Tensor::from_vec(
        1,
        v.dims,
        v.data
            .iter()
            .map(|&x| (x as f64 - cfg.input_shift) / cfg.input_scale)
            .collect(),
    )
}

fn conv(spec: &LayerSpec, p: &NetworkParams, x: &Tensor) -> Tensor {
    let (w, b) = (p.w(spec), p.b(spec));
    match spec.kind {
        LayerKind::Conv3 => conv3_forward(x, w, b, spec.co),
        LayerKind::Conv1 => conv1_forward(x, w, b, spec.co),
        LayerKind::Down2 => down2_forward(x, w, b, spec.co),
        LayerKind::Up2 => up2_forward(x, w, b, spec.co),
    }
}

fn conv_act(spec: &LayerSpec, p: &NetworkParams, x: &Tensor) -> Tensor {
    let mut y = conv(spec, p, x);
    leaky_relu_inplace(&mut y);
    y
}

/// Forward pass on an already-normalised input tensor.
pub fn forward_tensor(params: &NetworkParams, input: Tensor) -> Result<ForwardCache> {
    let cfg = &params.config;
    cfg.check_dims(input.dims)?;
    if input.channels != cfg.in_channels {
        return Err(Error::Shape(format!(
            "input has {} channels, network expects {}",
            input.channels, cfg.in_channels
        )));
    }
    let layout = cfg.layout();
    let depth = cfg.depth;

    let stem = conv_act(&layout.stem, params, &input);
    let mut enc_h = Vec::with_capacity(depth);
    let mut skip = Vec::with_capacity(depth);
    let mut down = Vec::with_capacity(depth);
    let mut x = stem.clone();
    for l in 0..depth {
        let h = conv_act(&layout.enc[l], params, &x);
        let mut s = x;
        add_inplace(&mut s, &h);
        enc_h.push(h);
        x = conv_act(&layout.down[l], params, &s);
        skip.push(s);
        down.push(x.clone());
    }
    let bottom_h = conv_act(&layout.bottom, params, &x);
    let mut bottom = x;
    add_inplace(&mut bottom, &bottom_h);

    let mut up = vec![Tensor::zeros(0, [0; 3]); depth];
    let mut cat = vec![Tensor::zeros(0, [0; 3]); depth];
    let mut dec_h = vec![Tensor::zeros(0, [0; 3]); depth];
    let mut dec = vec![Tensor::zeros(0, [0; 3]); depth];
    let mut u = bottom.clone();
    for l in (0..depth).rev() {
        let up_l = conv_act(&layout.up[l], params, &u);
        let cat_l = concat_channels(&up_l, &skip[l]);
        let h = conv_act(&layout.dec[l], params, &cat_l);
        let mut out = up_l.clone();
        add_inplace(&mut out, &h);
        up[l] = up_l;
        cat[l] = cat_l;
        dec_h[l] = h;
        dec[l] = out.clone();
        u = out;
    }
    let logits = conv(&layout.head, params, &u);
    let probs = ProbabilityField(softmax(&logits));
    Ok(ForwardCache {
        input,
        stem,
        enc_h,
        skip,
        down,
        bottom_h,
        bottom,
        up,
        cat,
        dec_h,
        dec,
        probs,
    })
}

pub fn forward(params: &NetworkParams, v: &Volume) -> Result<ProbabilityField> {
    Ok(forward_tensor(params, prepare_input(&params.config, v))?.probs)
}

pub fn forward_cached(params: &NetworkParams, v: &Volume) -> Result<ForwardCache> {
    forward_tensor(params, prepare_input(&params.config, v))
}

fn conv_backward(
    spec: &LayerSpec,
    p: &NetworkParams,
    x: &Tensor,
    gout: &Tensor,
    grads: &mut [f64],
    need_input: bool,
) -> Option<Tensor> {
    let w = p.w(spec);
    let (gw_part, gb_part) = grads[spec.w_offset..spec.b_offset + spec.co].split_at_mut(spec.weight_len());
    match spec.kind {
        LayerKind::Conv3 => conv3_backward(x, w, gout, gw_part, gb_part, need_input),
        LayerKind::Conv1 => Some(conv1_backward(x, w, gout, gw_part, gb_part)),
        LayerKind::Down2 => Some(down2_backward(x, w, gout, gw_part, gb_part)),
        LayerKind::Up2 => Some(up2_backward(x, w, gout, gw_part, gb_part)),
    }
}

/// Back-propagates `dL/dprobs` through the network, accumulating parameter
/// gradients into `grads`.
pub fn backward(params: &NetworkParams, cache: &ForwardCache, grad_probs: &Tensor, grads: &mut [f64]) {
    let grad_logits = softmax_backward(&cache.probs.0, grad_probs);
    backward_from_logits(params, cache, &grad_logits, grads);
}

pub fn backward_from_logits(params: &NetworkParams, cache: &ForwardCache, grad_logits: &Tensor, grads: &mut [f64]) {
    let cfg = &params.config;
    let layout = cfg.layout();
    let depth = cfg.depth;
    assert_eq!(grads.len(), layout.len);

    let mut g_u = conv_backward(&layout.head, params, &cache.dec[0], grad_logits, grads, true).unwrap();
    let mut g_skip: Vec<Option<Tensor>> = vec![None; depth];
    for l in 0..depth {
        // dec[l] = up[l] + act(conv(cat[l]))
        let mut g_h = g_u.clone();
        leaky_relu_backward(&cache.dec_h[l], &mut g_h);
        let g_cat = conv_backward(&layout.dec[l], params, &cache.cat[l], &g_h, grads, true).unwrap();
        let (g_up_cat, g_s) = split_channels(&g_cat, cfg.channels(l));
        let mut g_up = g_u;
        add_inplace(&mut g_up, &g_up_cat);
        g_skip[l] = Some(g_s);
        leaky_relu_backward(&cache.up[l], &mut g_up);
        let below = if l + 1 < depth { &cache.dec[l + 1] } else { &cache.bottom };
        g_u = conv_backward(&layout.up[l], params, below, &g_up, grads, true).unwrap();
    }
    // bottom = x_L + act(conv(x_L))
    let x_l = if depth > 0 { &cache.down[depth - 1] } else { &cache.stem };
    let mut g_h = g_u.clone();
    leaky_relu_backward(&cache.bottom_h, &mut g_h);
    let g_in = conv_backward(&layout.bottom, params, x_l, &g_h, grads, true).unwrap();
    let mut g_x = g_u;
    add_inplace(&mut g_x, &g_in);

    for l in (0..depth).rev() {
        // down[l] = act(down2(skip[l]))
        leaky_relu_backward(&cache.down[l], &mut g_x);
        let mut g_s = conv_backward(&layout.down[l], params, &cache.skip[l], &g_x, grads, true).unwrap();
        add_inplace(&mut g_s, g_skip[l].as_ref().unwrap());
        // skip[l] = x_l + act(conv(x_l))
        let x_prev = if l > 0 { &cache.down[l - 1] } else { &cache.stem };
        let mut g_h = g_s.clone();
        leaky_relu_backward(&cache.enc_h[l], &mut g_h);
        let g_in = conv_backward(&layout.enc[l], params, x_prev, &g_h, grads, true).unwrap();
        g_x = g_s;
        add_inplace(&mut g_x, &g_in);
    }
    leaky_relu_backward(&cache.stem, &mut g_x);
    conv_backward(&layout.stem, params, &cache.input, &g_x, grads, false);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> NetworkConfig {
        NetworkConfig {
            base_channels: 2,
            depth: 2,
            rng_seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_network(&small_cfg()).unwrap();
        let b = init_network(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let c = init_network(&NetworkConfig {
            rng_seed: 4,
            ..small_cfg()
        })
        .unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn layout_is_contiguous() {
        let layout = NetworkConfig::default().layout();
        let mut cursor = 0;
        for l in layout.layers() {
            assert_eq!(l.w_offset, cursor);
            assert_eq!(l.b_offset, cursor + l.weight_len());
            cursor = l.b_offset + l.co;
        }
        assert_eq!(cursor, layout.len);
    }

    #[test]
    fn zero_head_gives_uniform_output() {
        let cfg = NetworkConfig {
            zero_head: true,
            class_count: 3,
            ..small_cfg()
        };
        let p = init_network(&cfg).unwrap();
        let v = Volume::new([8, 8, 8], (0..512).map(|i| i as f32).collect(), 3).unwrap();
        let out = forward(&p, &v).unwrap();
        assert_eq!(out.dims(), [8, 8, 8]);
        assert!(out.0.data.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert!(out.argmax().iter().all(|&c| c == 0));
    }

    #[test]
    fn indivisible_dims_rejected() {
        let p = init_network(&small_cfg()).unwrap();
        let v = Volume::new([8, 6, 8], vec![0.0; 384], 2).unwrap();
        let err = forward(&p, &v).unwrap_err();
        assert!(matches!(err, Error::Indivisible { divisor: 4, .. }));
    }

    #[test]
    fn blob_round_trip_and_corruption() {
        let p = init_network(&small_cfg()).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(NetworkParams::from_bytes(small_cfg(), &bytes).unwrap(), p);
        assert!(NetworkParams::from_bytes(small_cfg(), &bytes[..bytes.len() - 8]).is_err());
        assert!(NetworkParams::from_bytes(NetworkConfig::default(), &bytes).is_err());
    }
}
