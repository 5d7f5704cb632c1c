//! Three students, two EMA teachers.
//!
//! Branches:
//!
//! | branch | data                      | teacher                    | loss                         |
//! |--------|---------------------------|----------------------------|------------------------------|
//! | main   | labelled main subset      | none                       | supervised CE                |
//! | mixed  | unlabelled, near main     | EMA of the mixed student   | β · consistency              |
//! | other  | unlabelled, far from main | EMA of the other student   | α · consistency              |
//!
//! The ablation switches collapse this structure: without the multi-branch
//! switch the main student alone consumes both unlabelled subsets against a
//! single EMA teacher (classic mean teacher); without the gated consistency
//! switch the consistency term is plain voxel MSE; without mean teacher there
//! are no consistency terms at all.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{
    self, backward, digest_values, init_network, prepare_input, ForwardCache, NetworkConfig, NetworkParams,
    ProbabilityField,
};
use crate::error::{Error, Result};
use crate::metrics::{confusion, Scores};
use crate::partition::SourcePartition;
use crate::rng;
use crate::swc::{self, region_grid, EPS};
use crate::tensor::Tensor;
use crate::volume::{write_atomic, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Main,
    Mixed,
    Other,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Main, Branch::Mixed, Branch::Other];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Main => "main",
            Branch::Mixed => "mixed",
            Branch::Other => "other",
        }
    }

    /// Slot in the two-element teacher array.
    pub fn teacher_slot(self) -> Option<usize> {
        match self {
            Branch::Main => None,
            Branch::Mixed => Some(0),
            Branch::Other => Some(1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub use_mt: bool,
    pub use_st: bool,
    pub use_swc: bool,
}

impl AblationConfig {
    /// Rows 1-5 of the ablation ladder.
    pub fn exp(n: u8) -> Result<Self> {
        let (use_mt, use_st, use_swc) = match n {
            1 => (false, false, false),
            2 => (true, false, false),
            3 => (true, false, true),
            4 => (true, true, false),
            5 => (true, true, true),
            _ => return Err(Error::InvalidArgument(format!("unknown ablation exp{n}"))),
        };
        Ok(AblationConfig { use_mt, use_st, use_swc })
    }

    pub fn from_name(name: &str) -> Result<Self> {
        name.strip_prefix("exp")
            .and_then(|n| n.parse::<u8>().ok())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation `{name}` (expected exp1..exp5)")))
            .and_then(Self::exp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_st && !self.use_mt {
            return Err(Error::InvalidArgument("multi-branch training requires mean teacher".into()));
        }
        Ok(())
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig::exp(5).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, cfg: &AdamConfig, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// Input perturbations in normalised intensity units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    pub weak_noise: f64,
    pub strong_noise: f64,
    /// Strong inputs are scaled by a factor drawn from `1 ± strong_scale`.
    pub strong_scale: f64,
    /// Apply the strong perturbation to labelled inputs as well.
    pub augment_labeled: bool,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            weak_noise: 0.05,
            strong_noise: 0.1,
            strong_scale: 0.1,
            augment_labeled: false,
        }
    }
}

/// Periodic soft averaging of the three students towards their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    /// Steps between averaging events; 0 disables transfer.
    pub every: u64,
    pub rate: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig { every: 0, rate: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    #[default]
    Main,
    Ensemble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub region_side: usize,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub perturb: PerturbConfig,
    pub ablation: AblationConfig,
    pub transfer: TransferConfig,
    /// Use `min(gamma, 1 - 1/(step + 1))` so early teachers track closely.
    pub ema_warmup: bool,
    /// Sigmoid ramp of the consistency weights over this many steps; 0 = off.
    pub rampup_steps: u64,
    /// Also train the mixed and other students on the labelled batch.
    pub branch_supervision: bool,
    /// Checkpoint every this many epochs (the final state is always written).
    pub checkpoint_every: u64,
    /// Train on random sub-volumes of this size instead of whole volumes.
    pub patch: Option<[usize; 3]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            alpha: 0.5,
            beta: 0.5,
            tau: 0.9,
            region_side: 4,
            batch_size: 4,
            epochs: 30,
            seed: 0,
            optimizer: AdamConfig::default(),
            perturb: PerturbConfig::default(),
            ablation: AblationConfig::default(),
            transfer: TransferConfig::default(),
            ema_warmup: false,
            rampup_steps: 0,
            branch_supervision: false,
            checkpoint_every: 5,
            patch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} not in [0, 1]", self.gamma));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be >= 0".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} not in (0, 1]", self.tau));
        }
        if self.region_side == 0 || self.batch_size == 0 {
            return bad("region_side and batch_size must be positive".into());
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("learning rate must be positive".into());
        }
        if let Some(p) = self.patch {
            if p.iter().any(|&d| d == 0 || d % self.region_side != 0) {
                return bad(format!("patch {p:?} must be a positive multiple of region_side"));
            }
        }
        if !(0.0..=1.0).contains(&self.transfer.rate) {
            return bad("transfer rate must be in [0, 1]".into());
        }
        self.ablation.validate()
    }
}

pub struct TrainerState {
    pub net: NetworkConfig,
    pub config: TrainConfig,
    /// Indexed by [`Branch::index`].
    pub students: [NetworkParams; 3],
    /// Mixed and other teachers, indexed by [`Branch::teacher_slot`].
    pub teachers: [NetworkParams; 2],
    pub optim: [AdamState; 3],
    pub step: u64,
}

impl TrainerState {
    /// Each student gets its own seed; teachers start as copies of their
    /// students.
    pub fn new(net: NetworkConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        net.validate()?;
        let init = |b: Branch| {
            init_network(&NetworkConfig {
                rng_seed: rng::derive_seed(net.rng_seed, &[rng::tag("student"), b.index() as u64]),
                ..net.clone()
            })
        };
        let students = [init(Branch::Main)?, init(Branch::Mixed)?, init(Branch::Other)?];
        let teachers = [students[1].clone(), students[2].clone()];
        let n = students[0].len();
        Ok(TrainerState {
            net,
            config,
            students,
            teachers,
            optim: [AdamState::new(n), AdamState::new(n), AdamState::new(n)],
            step: 0,
        })
    }

    pub fn student(&self, b: Branch) -> &NetworkParams {
        &self.students[b.index()]
    }

    pub fn teacher(&self, b: Branch) -> Option<&NetworkParams> {
        b.teacher_slot().map(|s| &self.teachers[s])
    }

    /// Student whose EMA the given teacher tracks under the current ablation.
    pub fn teacher_source(&self, b: Branch) -> Branch {
        if self.config.ablation.use_st {
            b
        } else {
            Branch::Main
        }
    }

    /// SHA-256 over all student, teacher and optimiser buffers plus the step.
    pub fn digest(&self) -> String {
        let mut all = Vec::new();
        for p in self.students.iter().chain(self.teachers.iter()) {
            all.extend_from_slice(&p.values);
        }
        for o in &self.optim {
            all.extend_from_slice(&o.m);
            all.extend_from_slice(&o.v);
            all.push(o.t as f64);
        }
        all.push(self.step as f64);
        digest_values(&all)
    }
}

/// `θ_t ← γ·θ_t + (1−γ)·θ_s`, elementwise.
pub fn ema_update(teacher: &NetworkParams, student: &NetworkParams, gamma: f64) -> Result<NetworkParams> {
    let mut out = teacher.clone();
    ema_update_inplace(&mut out, student, gamma)?;
    Ok(out)
}

pub fn ema_update_inplace(teacher: &mut NetworkParams, student: &NetworkParams, gamma: f64) -> Result<()> {
    if teacher.len() != student.len() || teacher.config.layout().len != student.config.layout().len {
        return Err(Error::Shape(format!(
            "teacher has {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} not in [0, 1]")));
    }
    for (t, s) in teacher.values.iter_mut().zip(&student.values) {
        *t = gamma * *t + (1.0 - gamma) * s;
    }
    Ok(())
}

fn check_labels(ps: &ProbabilityField, y: &[u16]) -> Result<()> {
    if y.len() != ps.voxels() {
        return Err(Error::Shape(format!(
            "{} labels for {} voxels",
            y.len(),
            ps.voxels()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l as usize >= ps.classes()) {
        return Err(Error::LabelRange {
            value: bad as usize,
            classes: ps.classes(),
        });
    }
    Ok(())
}

/// Mean over voxels of `−ln P[y_i, i]` (clamped).
pub fn supervised_loss(ps: &ProbabilityField, y: &[u16]) -> Result<f64> {
    Ok(supervised_loss_grad(ps, y)?.0)
}

/// Loss together with `∂loss/∂P`.
pub fn supervised_loss_grad(ps: &ProbabilityField, y: &[u16]) -> Result<(f64, Tensor)> {
    check_labels(ps, y)?;
    let n = ps.voxels();
    let mut grad = Tensor::zeros(ps.classes(), ps.dims());
    let mut loss = 0.0;
    for (v, &label) in y.iter().enumerate() {
        let p = ps.prob(label as usize, v);
        loss -= p.clamp(EPS, 1.0 - EPS).ln();
        if p > EPS && p < 1.0 - EPS {
            grad.data[label as usize * n + v] = -1.0 / (p * n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

/// Consistency term for an unlabelled branch (`other` ↔ u, `mixed` ↔ h).
pub fn consistency_loss(
    branch: Branch,
    student_out: &ProbabilityField,
    teacher_out: &ProbabilityField,
    tau: f64,
    s: usize,
) -> Result<f64> {
    if branch == Branch::Main {
        return Err(Error::InvalidArgument("the main branch has no consistency term".into()));
    }
    Ok(swc::swc_loss(student_out, teacher_out, s, tau)?.loss)
}

/// Unweighted mean squared difference over classes and voxels.
pub fn mse_consistency(ps: &ProbabilityField, pt: &ProbabilityField) -> Result<(f64, Tensor)> {
    if !ps.0.same_shape(&pt.0) {
        return Err(Error::Shape("student and teacher fields differ in shape".into()));
    }
    let m = ps.0.data.len() as f64;
    let mut grad = Tensor::zeros(ps.classes(), ps.dims());
    let mut loss = 0.0;
    for ((g, a), b) in grad.data.iter_mut().zip(&ps.0.data).zip(&pt.0.data) {
        let d = a - b;
        loss += d * d;
        *g = 2.0 * d / m;
    }
    Ok((loss / m, grad))
}

/// `L_sup + α·L_u + β·L_h`.
pub fn total_loss(l_sup: f64, l_u: f64, l_h: f64, alpha: f64, beta: f64) -> Result<f64> {
    for (name, v) in [("l_sup", l_sup), ("l_u", l_u), ("l_h", l_h), ("alpha", alpha), ("beta", beta)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { name, value: v, step: 0 });
        }
    }
    Ok(l_sup + alpha * l_u + beta * l_h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_sup: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_u: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_h: Option<f64>,
    pub l_total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub retained_fraction: Option<f64>,
}

const WEAK: u64 = 0;
const STRONG: u64 = 1;

fn perturb(x: &Tensor, cfg: &PerturbConfig, seed: u64, tags: &[u64], strength: u64) -> Tensor {
    let mut stream = rng::stream(seed, tags);
    let (sigma, scale) = if strength == STRONG {
        let s = if cfg.strong_scale > 0.0 {
            stream.random_range(1.0 - cfg.strong_scale..=1.0 + cfg.strong_scale)
        } else {
            1.0
        };
        (cfg.strong_noise, s)
    } else {
        (cfg.weak_noise, 1.0)
    };
    let mut out = x.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in out.data.iter_mut() {
            *v = *v * scale + normal.sample(&mut stream);
        }
    } else if scale != 1.0 {
        for v in out.data.iter_mut() {
            *v *= scale;
        }
    }
    out
}

/// Random patch origin for one sample, or `None` when training on whole volumes.
fn patch_origin(cfg: &TrainConfig, dims: [usize; 3], tags: &[u64]) -> Result<Option<[usize; 3]>> {
    let Some(p) = cfg.patch else {
        return Ok(None);
    };
    if (0..3).any(|a| p[a] > dims[a]) {
        return Err(Error::Batch(format!("patch {p:?} larger than volume {dims:?}")));
    }
    let mut stream = rng::stream(cfg.seed, tags);
    Ok(Some(std::array::from_fn(|a| stream.random_range(0..=dims[a] - p[a]))))
}

fn crop_tensor(t: &Tensor, origin: [usize; 3], size: [usize; 3]) -> Tensor {
    let mut out = Tensor::zeros(t.channels, size);
    for c in 0..t.channels {
        for z in 0..size[0] {
            for y in 0..size[1] {
                let src = t.index(c, origin[0] + z, origin[1] + y, origin[2]);
                let dst = out.index(c, z, y, 0);
                out.data[dst..dst + size[2]].copy_from_slice(&t.data[src..src + size[2]]);
            }
        }
    }
    out
}

fn crop_labels(labels: &[u16], dims: [usize; 3], origin: [usize; 3], size: [usize; 3]) -> Vec<u16> {
    let mut out = Vec::with_capacity(size.iter().product());
    for z in 0..size[0] {
        for y in 0..size[1] {
            let src = ((origin[0] + z) * dims[1] + origin[1] + y) * dims[2] + origin[2];
            out.extend_from_slice(&labels[src..src + size[2]]);
        }
    }
    out
}

struct Consistency {
    loss: f64,
    retained: Option<f64>,
}

/// Forward student on strong view and teacher on weak view of every sample,
/// accumulate `weight · ∂L_cons/∂θ_student` into `grads`.
#[allow(clippy::too_many_arguments)]
fn consistency_pass(
    cfg: &TrainConfig,
    student: &NetworkParams,
    teacher: &NetworkParams,
    batch: &[&Volume],
    weight: f64,
    grads: &mut [f64],
    step: u64,
    branch: Branch,
) -> Result<Consistency> {
    let mut total = 0.0;
    let mut retained = 0.0;
    let b = batch.len() as f64;
    for (k, v) in batch.iter().enumerate() {
        let mut x = prepare_input(&student.config, v);
        if let Some(o) = patch_origin(cfg, v.dims, &[rng::tag("crop"), step, branch.index() as u64, k as u64])? {
            x = crop_tensor(&x, o, cfg.patch.unwrap());
        }
        let tags = |strength| [rng::tag("perturb"), step, branch.index() as u64, k as u64, strength];
        let xs = perturb(&x, &cfg.perturb, cfg.seed, &tags(STRONG), STRONG);
        let xt = perturb(&x, &cfg.perturb, cfg.seed, &tags(WEAK), WEAK);
        let pt = backbone::forward_tensor(teacher, xt)?.probs;
        let cache = backbone::forward_tensor(student, xs)?;
        let (loss, grad) = if cfg.ablation.use_swc {
            let out = swc::swc_loss(&cache.probs, &pt, cfg.region_side, cfg.tau)?;
            retained += out.grid.retained_fraction();
            (out.loss, out.grad)
        } else {
            retained += region_grid(&pt, cfg.region_side, cfg.tau)?.retained_fraction();
            mse_consistency(&cache.probs, &pt)?
        };
        total += loss;
        if weight != 0.0 {
            backward_scaled(student, &cache, grad, weight / b, grads);
        }
    }
    Ok(Consistency {
        loss: total / b,
        retained: Some(retained / b),
    })
}

fn backward_scaled(params: &NetworkParams, cache: &ForwardCache, mut grad: Tensor, scale: f64, grads: &mut [f64]) {
    for g in grad.data.iter_mut() {
        *g *= scale;
    }
    backward(params, cache, &grad, grads);
}

fn supervised_pass(
    cfg: &TrainConfig,
    student: &NetworkParams,
    batch: &[&Volume],
    grads: &mut [f64],
    step: u64,
    branch: Branch,
) -> Result<f64> {
    let b = batch.len() as f64;
    let mut total = 0.0;
    for (k, v) in batch.iter().enumerate() {
        let labels = v
            .labels
            .as_ref()
            .ok_or_else(|| Error::Batch(format!("main batch sample {} is unlabelled", v.sample_id)))?;
        let mut x = prepare_input(&student.config, v);
        let mut labels = labels.as_slice();
        let cropped;
        if let Some(o) = patch_origin(cfg, v.dims, &[rng::tag("crop-labeled"), step, branch.index() as u64, k as u64])? {
            let size = cfg.patch.unwrap();
            x = crop_tensor(&x, o, size);
            cropped = crop_labels(labels, v.dims, o, size);
            labels = &cropped;
        }
        if cfg.perturb.augment_labeled {
            let tags = [rng::tag("labeled"), step, branch.index() as u64, k as u64];
            x = perturb(&x, &cfg.perturb, cfg.seed, &tags, STRONG);
        }
        let cache = backbone::forward_tensor(student, x)?;
        let (loss, grad) = supervised_loss_grad(&cache.probs, labels)?;
        total += loss;
        backward_scaled(student, &cache, grad, 1.0 / b, grads);
    }
    Ok(total / b)
}

fn rampup(cfg: &TrainConfig, step: u64) -> f64 {
    if cfg.rampup_steps == 0 || step >= cfg.rampup_steps {
        1.0
    } else {
        let t = 1.0 - step as f64 / cfg.rampup_steps as f64;
        (-5.0 * t * t).exp()
    }
}

fn finite(name: &'static str, value: f64, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { name, value, step })
    }
}

/// One optimisation step over a main, a mixed and an other batch.
///
/// On error the state is left untouched.
pub fn train_step(
    state: &mut TrainerState,
    batch_main: &[&Volume],
    batch_mixed: &[&Volume],
    batch_other: &[&Volume],
) -> Result<StepLog> {
    let cfg = state.config.clone();
    let ab = cfg.ablation;
    let step = state.step;
    if batch_main.is_empty() {
        return Err(Error::Batch("main batch is empty".into()));
    }
    if ab.use_mt && (batch_mixed.is_empty() || batch_other.is_empty()) {
        return Err(Error::Batch("consistency training needs mixed and other batches".into()));
    }
    if let Some(v) = batch_mixed.iter().chain(batch_other).find(|v| v.class_count != state.net.class_count) {
        return Err(Error::Batch(format!("sample {} has {} classes", v.sample_id, v.class_count)));
    }
    let ramp = rampup(&cfg, step);
    let (alpha, beta) = (cfg.alpha * ramp, cfg.beta * ramp);
    let n = state.students[0].len();
    let mut grads: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut active = [true, false, false];

    let main = &state.students[Branch::Main.index()];
    let l_sup = finite("l_sup", supervised_pass(&cfg, main, batch_main, &mut grads[0], step, Branch::Main)?, step)?;

    let mut l_u = None;
    let mut l_h = None;
    let mut retained = Vec::new();
    if ab.use_mt {
        for (branch, batch, weight) in [(Branch::Mixed, batch_mixed, beta), (Branch::Other, batch_other, alpha)] {
            let learner = if ab.use_st { branch } else { Branch::Main };
            let slot = branch.teacher_slot().unwrap();
            let (student, teacher) = (&state.students[learner.index()], &state.teachers[slot]);
            let out = consistency_pass(&cfg, student, teacher, batch, weight, &mut grads[learner.index()], step, branch)?;
            if weight != 0.0 {
                active[learner.index()] = true;
            }
            retained.extend(out.retained);
            let name = if branch == Branch::Mixed { "l_h" } else { "l_u" };
            let loss = finite(name, out.loss, step)?;
            if branch == Branch::Mixed {
                l_h = Some(loss);
            } else {
                l_u = Some(loss);
            }
            if ab.use_st && cfg.branch_supervision {
                let student = &state.students[branch.index()];
                let g = &mut grads[branch.index()];
                finite("l_sup", supervised_pass(&cfg, student, batch_main, g, step, branch)?, step)?;
                active[branch.index()] = true;
            }
        }
    }
    let l_total = total_loss(l_sup, l_u.unwrap_or(0.0), l_h.unwrap_or(0.0), cfg.alpha, cfg.beta)
        .map_err(|_| Error::NonFinite {
            name: "l_total",
            value: f64::NAN,
            step,
        })?;
    if let Some(i) = grads.iter().flatten().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            name: "gradient",
            value: grads.iter().flatten().nth(i).copied().unwrap_or(f64::NAN),
            step,
        });
    }

    // commit
    for b in Branch::ALL {
        let i = b.index();
        if active[i] {
            state.optim[i].step(&cfg.optimizer, &mut state.students[i].values, &grads[i]);
        }
    }
    if ab.use_mt {
        let gamma = if cfg.ema_warmup {
            cfg.gamma.min(1.0 - 1.0 / (step as f64 + 1.0))
        } else {
            cfg.gamma
        };
        for b in [Branch::Mixed, Branch::Other] {
            let src = state.teacher_source(b).index();
            let slot = b.teacher_slot().unwrap();
            ema_update_inplace(&mut state.teachers[slot], &state.students[src], gamma)?;
        }
    }
    if ab.use_st && cfg.transfer.every > 0 && (step + 1) % cfg.transfer.every == 0 {
        soft_average(&mut state.students, cfg.transfer.rate);
    }
    state.step += 1;

    let retained_fraction = if retained.is_empty() {
        None
    } else {
        Some(retained.iter().sum::<f64>() / retained.len() as f64)
    };
    debug!("step {step}: l_sup {l_sup:.5} l_u {l_u:?} l_h {l_h:?} retained {retained_fraction:?}");
    Ok(StepLog {
        step,
        l_sup,
        l_u,
        l_h,
        l_total,
        retained_fraction,
    })
}

fn soft_average(students: &mut [NetworkParams; 3], rate: f64) {
    let n = students[0].len();
    for i in 0..n {
        let mean = (students[0].values[i] + students[1].values[i] + students[2].values[i]) / 3.0;
        for s in students.iter_mut() {
            s.values[i] = (1.0 - rate) * s.values[i] + rate * mean;
        }
    }
}

/// Volumes grouped by subset, in partition order.
pub struct Subsets<'a> {
    pub main: Vec<&'a Volume>,
    pub mixed: Vec<&'a Volume>,
    pub other: Vec<&'a Volume>,
}

impl<'a> Subsets<'a> {
    pub fn from_partition(partition: &SourcePartition, volumes: &'a [Volume]) -> Result<Self> {
        let lookup = |ids: &[String], need_labels: bool| -> Result<Vec<&'a Volume>> {
            ids.iter()
                .map(|id| {
                    let v = volumes
                        .iter()
                        .find(|v| &v.sample_id == id)
                        .ok_or_else(|| Error::Batch(format!("partition id {id} not in dataset")))?;
                    if need_labels && !v.is_labeled() {
                        return Err(Error::Batch(format!("main sample {id} has no labels")));
                    }
                    Ok(v)
                })
                .collect()
        };
        Ok(Subsets {
            main: lookup(&partition.main, true)?,
            mixed: lookup(&partition.mixed, false)?,
            other: lookup(&partition.other, false)?,
        })
    }

    pub fn steps_per_epoch(&self, batch: usize) -> u64 {
        let largest = self.main.len().max(self.mixed.len()).max(self.other.len());
        largest.div_ceil(batch) as u64
    }

    fn batch(&self, which: usize, seed: u64, epoch: u64, j: u64, size: usize) -> Vec<&'a Volume> {
        let pool = match which {
            0 => &self.main,
            1 => &self.mixed,
            _ => &self.other,
        };
        if pool.is_empty() {
            return Vec::new();
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::tag("shuffle"), epoch, which as u64]));
        (0..size)
            .map(|k| pool[order[(j as usize * size + k) % pool.len()]])
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingReport {
    pub start_step: u64,
    pub final_step: u64,
    pub steps_per_epoch: u64,
    pub logs: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
    pub final_digest: String,
}

/// Run directory: checkpoints under `ckpt/` and a JSON-lines metrics log.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoint_dir(&self, step: u64) -> PathBuf {
        self.root.join("ckpt").join(format!("step-{step}"))
    }

    /// Highest-step checkpoint present, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let dir = self.root.join("ckpt");
        if !dir.exists() {
            return Ok(None);
        }
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(step) = name.strip_prefix("step-").and_then(|s| s.parse::<u64>().ok()) {
                if entry.path().join("manifest.json").exists() && best.as_ref().is_none_or(|(s, _)| step > *s) {
                    best = Some((step, entry.path()));
                }
            }
        }
        Ok(best.map(|(_, p)| p))
    }
}

/// Train from `state.step` up to `epochs` full epochs.
pub fn run_training(
    state: &mut TrainerState,
    subsets: &Subsets,
    epochs: u64,
    run_dir: Option<&RunDir>,
) -> Result<TrainingReport> {
    let cfg = state.config.clone();
    if subsets.main.is_empty() {
        return Err(Error::Batch("main subset is empty".into()));
    }
    let spe = subsets.steps_per_epoch(cfg.batch_size);
    let end = epochs * spe;
    let start = state.step;
    let mut logs = Vec::new();
    let mut checkpoints = Vec::new();
    let mut log_file = match run_dir {
        Some(dir) => Some(open_metrics_log(dir, start)?),
        None => None,
    };
    if let Some(dir) = run_dir {
        if start == 0 || dir.latest_checkpoint()?.is_none() {
            checkpoints.push(save_checkpoint(state, dir)?);
        }
    }
    while state.step < end {
        let k = state.step;
        let (epoch, j) = (k / spe, k % spe);
        let b = cfg.batch_size;
        let main = subsets.batch(0, cfg.seed, epoch, j, b);
        let mixed = subsets.batch(1, cfg.seed, epoch, j, b);
        let other = subsets.batch(2, cfg.seed, epoch, j, b);
        let log = train_step(state, &main, &mixed, &other)?;
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&log).expect("serialisable log");
            writeln!(f, "{line}").map_err(|e| Error::io(run_dir.unwrap().metrics_path(), e))?;
        }
        logs.push(log);
        let done = state.step;
        if done % spe == 0 {
            let epoch_done = done / spe;
            info!("epoch {epoch_done}/{epochs} done at step {done}");
            if let Some(dir) = run_dir {
                if done == end || (cfg.checkpoint_every > 0 && epoch_done % cfg.checkpoint_every == 0) {
                    checkpoints.push(save_checkpoint(state, dir)?);
                }
            }
        }
    }
    Ok(TrainingReport {
        start_step: start,
        final_step: state.step,
        steps_per_epoch: spe,
        logs,
        checkpoints,
        final_digest: state.digest(),
    })
}

fn open_metrics_log(dir: &RunDir, start: u64) -> Result<fs::File> {
    fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e))?;
    let path = dir.metrics_path();
    // drop entries at or beyond the resume point so the log stays a single trajectory
    let kept: Vec<String> = if path.exists() {
        fs::read_to_string(&path)
            .map_err(|e| Error::io(&path, e))?
            .lines()
            .filter(|line| {
                serde_json::from_str::<StepLog>(line)
                    .map(|l| l.step < start)
                    .unwrap_or(false)
            })
            .map(str::to_owned)
            .collect()
    } else {
        Vec::new()
    };
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(f)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub role: String,
    pub branch: Branch,
    pub digest: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: u64,
    pub config: NetworkConfig,
    pub train: TrainConfig,
    pub entries: Vec<ManifestEntry>,
    pub adam_steps: [u64; 3],
}

const STUDENT_FILES: [&str; 3] = ["main.bin", "mixed.bin", "other.bin"];
const TEACHER_FILES: [&str; 2] = ["teacher-mixed.bin", "teacher-other.bin"];

/// Writes `ckpt/step-<N>/` atomically (temp directory, then rename).
pub fn save_checkpoint(state: &TrainerState, dir: &RunDir) -> Result<PathBuf> {
    let final_dir = dir.checkpoint_dir(state.step);
    let parent = final_dir.parent().unwrap().to_path_buf();
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let tmp = parent.join(format!(".tmp-step-{}", state.step));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut entries = Vec::new();
    for b in Branch::ALL {
        let p = state.student(b);
        p.save(&tmp.join(STUDENT_FILES[b.index()]))?;
        entries.push(ManifestEntry {
            file: STUDENT_FILES[b.index()].into(),
            role: "student".into(),
            branch: b,
            digest: p.digest(),
        });
        let o = &state.optim[b.index()];
        let mut mv = o.m.clone();
        mv.extend_from_slice(&o.v);
        write_atomic(&tmp.join(format!("{}.adam.bin", b.name())), &backbone::encode_f64_blob(&mv))?;
    }
    for b in [Branch::Mixed, Branch::Other] {
        let slot = b.teacher_slot().unwrap();
        let p = &state.teachers[slot];
        p.save(&tmp.join(TEACHER_FILES[slot]))?;
        entries.push(ManifestEntry {
            file: TEACHER_FILES[slot].into(),
            role: "teacher".into(),
            branch: b,
            digest: p.digest(),
        });
    }
    let manifest = CheckpointManifest {
        step: state.step,
        config: state.net.clone(),
        train: state.config.clone(),
        entries,
        adam_steps: [state.optim[0].t, state.optim[1].t, state.optim[2].t],
    };
    let path = tmp.join("manifest.json");
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    write_atomic(&path, &bytes)?;
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e))?;
    }
    fs::rename(&tmp, &final_dir).map_err(|e| Error::io(&final_dir, e))?;
    Ok(final_dir)
}

pub fn load_checkpoint(ckpt: &Path) -> Result<TrainerState> {
    let path = ckpt.join("manifest.json");
    if !path.exists() {
        return Err(Error::Missing(path));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_slice(&bytes).map_err(|e| Error::json(&path, e))?;
    let load = |file: &str| NetworkParams::load(m.config.clone(), &ckpt.join(file));
    let students = [load(STUDENT_FILES[0])?, load(STUDENT_FILES[1])?, load(STUDENT_FILES[2])?];
    let teachers = [load(TEACHER_FILES[0])?, load(TEACHER_FILES[1])?];
    for (e, p) in m.entries.iter().zip(students.iter().chain(teachers.iter())) {
        if e.digest != p.digest() {
            return Err(Error::Checkpoint(format!("digest mismatch for {}", e.file)));
        }
    }
    let n = students[0].len();
    let mut optim = [AdamState::new(n), AdamState::new(n), AdamState::new(n)];
    for b in Branch::ALL {
        let f = ckpt.join(format!("{}.adam.bin", b.name()));
        let raw = fs::read(&f).map_err(|e| Error::io(&f, e))?;
        let mv = backbone::decode_f64_blob(&raw)?;
        if mv.len() != 2 * n {
            return Err(Error::Checkpoint(format!("{} has wrong length", f.display())));
        }
        let o = &mut optim[b.index()];
        o.m.copy_from_slice(&mv[..n]);
        o.v.copy_from_slice(&mv[n..]);
        o.t = m.adam_steps[b.index()];
    }
    m.train.validate()?;
    Ok(TrainerState {
        net: m.config,
        config: m.train,
        students,
        teachers,
        optim,
        step: m.step,
    })
}

/// Probability field used for inference under the given mode.
///
/// Ensemble averages the three students when the multi-branch switch is on;
/// otherwise only the main student is trained and the ensemble reduces to it.
pub fn predict_probs(state: &TrainerState, v: &Volume, mode: PredictMode) -> Result<ProbabilityField> {
    let main = backbone::forward(state.student(Branch::Main), v)?;
    if mode == PredictMode::Main || !state.config.ablation.use_st {
        return Ok(main);
    }
    let mut acc = main.0;
    for b in [Branch::Mixed, Branch::Other] {
        let p = backbone::forward(state.student(b), v)?;
        for (a, x) in acc.data.iter_mut().zip(&p.0.data) {
            *a += x;
        }
    }
    for a in acc.data.iter_mut() {
        *a /= 3.0;
    }
    Ok(ProbabilityField(acc))
}

/// Argmax labels; ties resolve to the lower class id.
pub fn predict(state: &TrainerState, v: &Volume, mode: PredictMode) -> Result<Vec<u16>> {
    Ok(predict_probs(state, v, mode)?.argmax())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleScores {
    pub sample_id: String,
    pub source_id: String,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub mode: PredictMode,
    /// Case-wise mean over all evaluated volumes.
    #[serde(flatten)]
    pub overall: Scores,
    pub per_source: BTreeMap<String, Scores>,
    pub per_sample: Vec<SampleScores>,
}

/// Predicts every labelled volume and scores it against its labels.
pub fn evaluate(state: &TrainerState, volumes: &[&Volume], mode: PredictMode) -> Result<EvalReport> {
    let preds = volumes
        .iter()
        .map(|v| predict(state, v, mode))
        .collect::<Result<Vec<_>>>()?;
    score_predictions(volumes, &preds, state.net.class_count, state.step, mode)
}

/// Case-wise scores of `preds` against the labels of `volumes`.
pub fn score_predictions(
    volumes: &[&Volume],
    preds: &[Vec<u16>],
    classes: usize,
    step: u64,
    mode: PredictMode,
) -> Result<EvalReport> {
    if volumes.len() != preds.len() {
        return Err(Error::Shape(format!("{} volumes, {} predictions", volumes.len(), preds.len())));
    }
    let mut per_sample = Vec::new();
    for (v, pred) in volumes.iter().zip(preds) {
        let gt = v
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no labels to evaluate", v.sample_id)))?;
        let counts = confusion(pred, gt, classes)?;
        per_sample.push(SampleScores {
            sample_id: v.sample_id.clone(),
            source_id: v.source_id.clone(),
            scores: Scores::from_counts(&counts, false),
        });
    }
    let overall = Scores::mean(&per_sample.iter().map(|s| s.scores.clone()).collect::<Vec<_>>())
        .ok_or_else(|| Error::InvalidArgument("no volumes to evaluate".into()))?;
    let mut grouped: BTreeMap<String, Vec<Scores>> = BTreeMap::new();
    for s in &per_sample {
        grouped.entry(s.source_id.clone()).or_default().push(s.scores.clone());
    }
    let per_source = grouped
        .into_iter()
        .map(|(k, v)| (k, Scores::mean(&v).expect("non-empty group")))
        .collect();
    Ok(EvalReport {
        step,
        mode,
        overall,
        per_source,
        per_sample,
    })
}

/// Channel-mean bottleneck activations of the main student.
pub fn main_student_features(state: &TrainerState, v: &Volume) -> Result<Vec<f64>> {
    Ok(backbone::forward_cached(state.student(Branch::Main), v)?.pooled_bottleneck())
}
