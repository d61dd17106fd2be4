//! The training loop: a critic update followed by a joint update of the
//! generator, DepthNet and WarpNet on one synthetic and one real-pair batch.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{compute_warp, CameraIntrinsics};
use crate::losses::{
    baseline_gan_loss, depth_l1_loss, reconstruction_loss, specularity_mask, warp_loss, wgan_critic_loss,
    wgan_generator_loss, LossReport, LossWeights, DEFAULT_SPECULAR_THRESHOLD,
};
use crate::networks::{Bound, NetConfig, NetKind, NetworkParams, NetworkSet};
use crate::synthdata::{Dataset, Split};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Items per domain per step: synthetic frames and real pairs.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub n_critic: usize,
    /// Critic weight clipping bound.
    pub clip: f64,
    pub weights: LossWeights,
    /// Seeds the data order. Network initialization uses `NetConfig::seed`.
    pub seed: u64,
    pub log_every: usize,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub log_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub specular_threshold: f64,
    pub specular_dilation: usize,
    pub disable_gan: bool,
    pub disable_recon: bool,
    pub disable_synthetic: bool,
    pub disable_warp: bool,
    /// Sigmoid discriminator with the log-likelihood GAN loss instead of
    /// the clipped Wasserstein critic.
    pub use_baseline_gan: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            n_critic: 1,
            clip: 0.01,
            weights: LossWeights::default(),
            seed: 0,
            log_every: 10,
            checkpoint_every: 0,
            log_path: None,
            checkpoint_path: None,
            specular_threshold: DEFAULT_SPECULAR_THRESHOLD,
            specular_dilation: 1,
            disable_gan: false,
            disable_recon: false,
            disable_synthetic: false,
            disable_warp: false,
            use_baseline_gan: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |d: String| Err(Error::invalid("TrainConfig", d));
        if self.steps == 0 || self.batch_size == 0 || self.n_critic == 0 || self.log_every == 0 {
            return fail("steps, batch_size, n_critic and log_every must be > 0".into());
        }
        let positive = [self.learning_rate, self.adam_eps, self.clip];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return fail("learning_rate, adam_eps and clip must be finite and > 0".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail(format!("betas ({}, {}) outside [0, 1)", self.beta1, self.beta2));
        }
        if !(self.specular_threshold > 0.0 && self.specular_threshold <= 1.0) {
            return fail(format!("specular_threshold {}", self.specular_threshold));
        }
        self.weights.validate()
    }

    /// Loss weights with disabled terms set to zero.
    pub fn effective_weights(&self) -> LossWeights {
        let w = self.weights;
        let keep = |on: bool, v: f64| if on { 0.0 } else { v };
        LossWeights {
            omega_g: keep(self.disable_gan, w.omega_g),
            omega_r: keep(self.disable_recon, w.omega_r),
            omega_s: keep(self.disable_synthetic, w.omega_s),
            omega_w: keep(self.disable_warp, w.omega_w),
        }
    }

    /// Warp self-supervision only.
    pub fn warp_only(mut self) -> Self {
        self.disable_gan = true;
        self.disable_recon = true;
        self.disable_synthetic = true;
        self
    }
}

/// First and second moment estimates of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update with bias correction.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::invalid("adam_step", "parameter, gradient and moment counts differ"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::shape("adam_step", format!("tensor {i}: {:?} vs {:?}", p.shape(), g.shape())));
        }
    }
    let (b1, b2) = betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (1.0 - b1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            *pj -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Adam state for all four networks, indexed like [`NetKind::ALL`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub states: [AdamState; 4],
}

impl OptimizerState {
    pub fn new(nets: &NetworkSet) -> Self {
        Self {
            states: NetKind::ALL.map(|k| AdamState::new(&nets.get(k).tensors)),
        }
    }

    pub fn get_mut(&mut self, kind: NetKind) -> &mut AdamState {
        &mut self.states[kind_index(kind)]
    }

    pub fn get(&self, kind: NetKind) -> &AdamState {
        &self.states[kind_index(kind)]
    }
}

fn kind_index(kind: NetKind) -> usize {
    NetKind::ALL.iter().position(|&k| k == kind).expect("kind is listed")
}

/// Training frames held in memory.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub synthetic_images: Vec<Tensor>,
    /// Normalized ground-truth depths of the synthetic frames.
    pub synthetic_depths: Vec<Tensor>,
    pub real_t: Vec<Tensor>,
    pub real_t1: Vec<Tensor>,
    pub intrinsics: CameraIntrinsics,
}

impl TrainData {
    /// The `split` frames of a dataset, depths normalized with `net`.
    pub fn from_dataset(ds: &Dataset, split: Split, net: &NetConfig) -> Result<Self> {
        if ds.manifest.scene.resolution != net.resolution {
            return Err(Error::invalid(
                "TrainData",
                format!("dataset resolution {} vs network {}", ds.manifest.scene.resolution, net.resolution),
            ));
        }
        let syn = ds.synthetic_samples(split);
        let pairs = ds.manifest.pairs_in(split);
        if syn.is_empty() || pairs.is_empty() {
            return Err(Error::invalid("TrainData", "split has no synthetic frames or no real pairs"));
        }
        Ok(Self {
            synthetic_images: syn.iter().map(|s| s.image.clone()).collect(),
            synthetic_depths: syn.iter().map(|s| s.depth.map(|d| net.normalize_depth(d))).collect(),
            real_t: pairs.iter().map(|p| ds.real[p.frame_t].image.clone()).collect(),
            real_t1: pairs.iter().map(|p| ds.real[p.frame_t1].image.clone()).collect(),
            intrinsics: ds.intrinsics(),
        })
    }

    pub fn batch(&self, synthetic: &[usize], real: &[usize]) -> Result<Batch> {
        let pick = |v: &[Tensor], idx: &[usize]| -> Result<Tensor> {
            let items: Vec<&Tensor> = idx.iter().map(|&i| &v[i]).collect();
            Tensor::stack_batch(&items)
        };
        Ok(Batch {
            synthetic_images: pick(&self.synthetic_images, synthetic)?,
            synthetic_depths: pick(&self.synthetic_depths, synthetic)?,
            real_t: pick(&self.real_t, real)?,
            real_t1: pick(&self.real_t1, real)?,
            intrinsics: self.intrinsics,
        })
    }
}

/// One step's input: `[B, 3, H, W]` images, `[B, 1, H, W]` normalized depths.
#[derive(Clone, Debug)]
pub struct Batch {
    pub synthetic_images: Tensor,
    pub synthetic_depths: Tensor,
    pub real_t: Tensor,
    pub real_t1: Tensor,
    pub intrinsics: CameraIntrinsics,
}

/// Shuffled passes over `0..len`, reshuffled whenever one is used up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochSampler {
    rng: ChaCha8Rng,
    len: usize,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            len,
            order: Vec::new(),
            pos: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos >= self.order.len() {
                self.order = (0..self.len).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let ok = self.len > 0 && self.pos <= self.order.len() && self.order.iter().all(|&i| i < self.len);
        if !ok {
            return Err(Error::format("checkpoint", "inconsistent sampler state"));
        }
        Ok(())
    }
}

/// Data-order state for both domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Samplers {
    pub synthetic: EpochSampler,
    pub real: EpochSampler,
}

impl Samplers {
    pub fn new(data: &TrainData, seed: u64) -> Self {
        Self {
            synthetic: EpochSampler::new(data.synthetic_images.len(), seed ^ 0x5359_4e54),
            real: EpochSampler::new(data.real_t.len(), seed ^ 0x5245_414c),
        }
    }
}

fn finite(term: &'static str, step: usize, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { term, step })
    }
}

fn score<'t>(critic: &Bound<'_, 't>, x: Var<'t>, baseline: bool) -> Result<Var<'t>> {
    let s = critic.critic(x)?;
    if baseline {
        s.sigmoid()
    } else {
        Ok(s)
    }
}

fn gan_loss<'t>(d_syn: Var<'t>, d_real: Var<'t>, baseline: bool) -> Result<Var<'t>> {
    if baseline {
        baseline_gan_loss(d_syn, d_real)
    } else {
        wgan_generator_loss(d_syn, d_real)
    }
}

/// One critic update on fixed translated images.
fn critic_step(critic: &mut NetworkParams, state: &mut AdamState, syn: &Tensor, real: &Tensor, cfg: &TrainConfig, step: usize) -> Result<f64> {
    let tape = Tape::new();
    let bound = critic.bind(&tape, true);
    let d_syn = score(&bound, tape.constant(syn.clone()), cfg.use_baseline_gan)?;
    let d_real = score(&bound, tape.constant(real.clone()), cfg.use_baseline_gan)?;
    let loss = if cfg.use_baseline_gan {
        baseline_gan_loss(d_syn, d_real)?.neg()?
    } else {
        wgan_critic_loss(d_syn, d_real)?
    };
    let value = finite("critic", step, loss.item()?)?;
    let vars = bound.vars.clone();
    let mut grads = tape.backward(loss)?;
    let g: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).expect("critic leaves track gradients")).collect();
    adam_step(&mut critic.tensors, &g, state, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_eps)?;
    if !cfg.use_baseline_gan {
        critic.clip_weights(cfg.clip);
    }
    Ok(value)
}

/// One training step: `n_critic` critic updates, then a single backward pass
/// of the weighted objective and an Adam update of the generator, DepthNet
/// and WarpNet. Work for zero-weight terms is skipped.
pub fn train_step(batch: &Batch, nets: &mut NetworkSet, opt: &mut OptimizerState, cfg: &TrainConfig, step: usize) -> Result<LossReport> {
    let w = cfg.effective_weights();
    let (use_gan, use_recon, use_syn, use_warp) = (w.omega_g > 0.0, w.omega_r > 0.0, w.omega_s > 0.0, w.omega_w > 0.0);
    let need_syn = use_gan || use_recon || use_syn;
    let need_real = use_gan || use_recon || use_warp;
    if !need_syn && !need_real {
        return Ok(LossReport::default());
    }
    let bs = batch.synthetic_images.dims4()?[0];
    let b = batch.real_t.dims4()?[0];
    if bs == 0 || b == 0 || batch.real_t1.shape() != batch.real_t.shape() {
        return Err(Error::invalid("train_step", "empty or mismatched batch"));
    }

    let tape = Tape::new();
    let mut inputs = Vec::new();
    if need_syn {
        inputs.push(&batch.synthetic_images);
    }
    if need_real {
        inputs.push(&batch.real_t);
        inputs.push(&batch.real_t1);
    }
    let x = tape.constant(Tensor::stack_batch(&inputs)?);
    let generator = nets.generator.bind(&tape, true);
    // The generator is fixed during the critic phase, so one forward pass
    // serves both phases.
    let translated = generator.translate(x)?;
    let real_off = if need_syn { bs } else { 0 };
    let x_syn = need_syn.then(|| x.slice(0, 0, bs)).transpose()?;
    let x_real = need_real.then(|| x.slice(0, real_off, 2 * b)).transpose()?;
    let t_syn = need_syn.then(|| translated.slice(0, 0, bs)).transpose()?;
    let t_real = need_real.then(|| translated.slice(0, real_off, 2 * b)).transpose()?;

    if use_gan {
        let (syn, real) = (t_syn.expect("gan needs synthetic").value(), t_real.expect("gan needs real").value());
        let state = &mut opt.states[kind_index(NetKind::Critic)];
        for _ in 0..cfg.n_critic {
            critic_step(&mut nets.critic, state, &syn, &real, cfg, step)?;
        }
    }

    let mut report = LossReport::default();
    let mut l_gan = None;
    if use_gan {
        let critic = nets.critic.bind(&tape, false);
        let d_syn = score(&critic, t_syn.expect("checked above"), cfg.use_baseline_gan)?;
        let d_real = score(&critic, t_real.expect("checked above"), cfg.use_baseline_gan)?;
        let l = gan_loss(d_syn, d_real, cfg.use_baseline_gan)?;
        report.l_gan = finite("gan", step, l.item()?)?;
        l_gan = Some(l);
    }

    let mut l_r = None;
    if use_recon {
        let mask = specularity_mask(&batch_concat(&batch.real_t, &batch.real_t1)?, cfg.specular_threshold, cfg.specular_dilation)?;
        let l = reconstruction_loss(
            t_syn.expect("recon needs synthetic"),
            x_syn.expect("recon needs synthetic"),
            t_real.expect("recon needs real"),
            x_real.expect("recon needs real"),
            &mask,
        )?;
        report.l_r = finite("reconstruction", step, l.item()?)?;
        l_r = Some(l);
    }

    let depth_net = nets.depth_net.bind(&tape, true);
    let mut depth_inputs = Vec::new();
    if use_syn {
        depth_inputs.push(t_syn.expect("checked above"));
    }
    if use_warp {
        depth_inputs.push(t_real.expect("checked above"));
    }
    let depths = if depth_inputs.is_empty() {
        None
    } else {
        Some(depth_net.depth(Var::concat(&depth_inputs, 0)?)?)
    };

    let mut l_s = None;
    if use_syn {
        let pred = depths.expect("checked above").slice(0, 0, bs)?;
        let l = depth_l1_loss(pred, tape.constant(batch.synthetic_depths.clone()))?;
        report.l_s = finite("synthetic depth", step, l.item()?)?;
        l_s = Some(l);
    }

    let mut l_w = None;
    let warp_net = nets.warp_net.bind(&tape, true);
    if use_warp {
        let cfg_net = nets.depth_net.config;
        let off = if use_syn { bs } else { 0 };
        let range = cfg_net.depth_max - cfg_net.depth_min;
        let real_depth = depths
            .expect("checked above")
            .slice(0, off, 2 * b)?
            .mul_scalar(range)?
            .add_scalar(cfg_net.depth_min)?;
        let (depth_t, depth_t1) = (real_depth.slice(0, 0, b)?, real_depth.slice(0, b, b)?);
        let t_real = t_real.expect("checked above");
        let pose = warp_net.pose(t_real.slice(0, 0, b)?, t_real.slice(0, b, b)?)?;
        let warp = compute_warp(depth_t, tape.constant(batch.real_t1.clone()), depth_t1, pose, &batch.intrinsics)?;
        let wl = warp_loss(tape.constant(batch.real_t.clone()), depth_t, &warp)?;
        report.photo = finite("photometric", step, wl.photo.item()?)?;
        report.geo = finite("geometric", step, wl.geo.item()?)?;
        report.smooth = finite("smoothness", step, wl.smooth.item()?)?;
        report.l_w = finite("warp", step, wl.total.item()?)?;
        l_w = Some(wl.total);
    }

    let total = w.combine_vars(l_gan, l_r, l_s, l_w)?.expect("at least one term is active");
    report.total = finite("total", step, total.item()?)?;

    let updates = [
        (NetKind::Generator, generator.vars.clone(), true),
        (NetKind::DepthNet, depth_net.vars.clone(), use_syn || use_warp),
        (NetKind::WarpNet, warp_net.vars.clone(), use_warp),
    ];
    let mut grads = tape.backward(total)?;
    for (kind, vars, active) in updates {
        if !active {
            continue;
        }
        let g: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).expect("trainable leaves track gradients")).collect();
        let net = nets.get_mut(kind);
        adam_step(&mut net.tensors, &g, opt.get_mut(kind), cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_eps)?;
        if !net.tensors.iter().all(Tensor::all_finite) {
            return Err(Error::NonFinite { op: "adam_step" });
        }
    }
    Ok(report)
}

fn batch_concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Tensor::stack_batch(&[a, b])
}

/// Complete training state. Reloading it reproduces all later steps bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Completed steps.
    pub step: usize,
    pub config: TrainConfig,
    pub networks: NetworkSet,
    pub optimizer: OptimizerState,
    pub samplers: Samplers,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TGCKPT\r\n";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    step: usize,
    config: TrainConfig,
    net_config: NetConfig,
    adam_steps: [u64; 4],
    samplers: Samplers,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    /// Fresh state at step 0.
    pub fn new(cfg: &TrainConfig, net: &NetConfig, data: &TrainData) -> Result<Self> {
        cfg.validate()?;
        let networks = NetworkSet::build(net)?;
        Ok(Self {
            step: 0,
            config: cfg.clone(),
            optimizer: OptimizerState::new(&networks),
            networks,
            samplers: Samplers::new(data, cfg.seed),
        })
    }

    /// Draws the next batch and runs one [`train_step`].
    pub fn step(&mut self, data: &TrainData) -> Result<LossReport> {
        if self.samplers.synthetic.len() != data.synthetic_images.len() || self.samplers.real.len() != data.real_t.len() {
            return Err(Error::invalid("Checkpoint::step", "training data does not match the sampler state"));
        }
        let k = self.config.batch_size;
        let syn = self.samplers.synthetic.next_batch(k);
        let real = self.samplers.real.next_batch(k);
        let batch = data.batch(&syn, &real)?;
        let report = train_step(&batch, &mut self.networks, &mut self.optimizer, &self.config, self.step)?;
        self.step += 1;
        Ok(report)
    }

    /// `(name, tensor)` for every parameter and Adam moment, in file order.
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for kind in NetKind::ALL {
            let net = self.networks.get(kind);
            let state = self.optimizer.get(kind);
            let names = net.named_tensors();
            out.extend(names.iter().map(|(n, t)| (n.clone(), *t)));
            out.extend(names.iter().zip(&state.m).map(|((n, _), t)| (format!("adam_m.{n}"), t)));
            out.extend(names.iter().zip(&state.v).map(|((n, _), t)| (format!("adam_v.{n}"), t)));
        }
        out
    }

    /// Serializes as magic, version, JSON header and raw little-endian
    /// `f64` tensors in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.named_tensors();
        let header = CheckpointHeader {
            step: self.step,
            config: self.config.clone(),
            net_config: *self.networks.config(),
            adam_steps: self.optimizer.states.each_ref().map(|s| s.t),
            samplers: self.samplers.clone(),
            tensors: named
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(json.len() + 20 + named.iter().map(|(_, t)| t.numel() * 8).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: String| Error::format("checkpoint", d);
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let rest = &bytes[20..];
        if header_len > rest.len() as u64 {
            return Err(bad("truncated header".into()));
        }
        let (json, mut raster) = rest.split_at(header_len as usize);
        let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
        header.config.validate().map_err(|e| bad(e.to_string()))?;
        header.net_config.validate().map_err(|e| bad(e.to_string()))?;
        header.samplers.synthetic.validate()?;
        header.samplers.real.validate()?;

        // Check every declared shape against the manifest before allocating.
        let mut expected = Vec::new();
        for kind in NetKind::ALL {
            let shapes = NetworkParams::tensor_shapes(kind, &header.net_config);
            for _ in 0..3 {
                expected.extend(shapes.iter().cloned());
            }
        }
        if expected.len() != header.tensors.len() {
            return Err(bad(format!("{} tensors listed, expected {}", header.tensors.len(), expected.len())));
        }
        let mut total: usize = 0;
        for (entry, shape) in header.tensors.iter().zip(&expected) {
            if &entry.shape != shape {
                return Err(bad(format!("tensor {} has shape {:?}, expected {:?}", entry.name, entry.shape, shape)));
            }
            total = total
                .checked_add(shape.iter().product::<usize>())
                .ok_or_else(|| bad("tensor sizes overflow".into()))?;
        }
        if total.checked_mul(8) != Some(raster.len()) {
            return Err(bad(format!("tensor data has {} bytes, expected {} values", raster.len(), total)));
        }

        let mut take = |shape: &[usize]| -> Tensor {
            let n: usize = shape.iter().product();
            let (head, tail) = raster.split_at(n * 8);
            raster = tail;
            let data = head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape checked")
        };
        let mut nets = Vec::with_capacity(4);
        let mut states = Vec::with_capacity(4);
        let mut entries = header.tensors.iter();
        for (i, kind) in NetKind::ALL.into_iter().enumerate() {
            let count = NetworkParams::tensor_shapes(kind, &header.net_config).len();
            let mut group = |prefix: &str| -> Result<Vec<Tensor>> {
                let mut out = Vec::with_capacity(count);
                for _ in 0..count {
                    let e = entries.next().expect("count checked");
                    if !e.name.starts_with(prefix) {
                        return Err(bad(format!("unexpected tensor {}", e.name)));
                    }
                    out.push(take(&e.shape));
                }
                Ok(out)
            };
            let params = group(kind.name())?;
            let net = NetworkParams::from_tensors(kind, &header.net_config, params).map_err(|e| bad(e.to_string()))?;
            let m = group("adam_m.")?;
            let v = group("adam_v.")?;
            if [&m, &v].iter().any(|ts| !ts.iter().all(Tensor::all_finite)) {
                return Err(bad(format!("non-finite optimizer state for {}", kind.name())));
            }
            states.push(AdamState {
                t: header.adam_steps[i],
                m,
                v,
            });
            nets.push(net);
        }
        let mut nets = nets.into_iter();
        let mut next = || nets.next().expect("four networks");
        let networks = NetworkSet {
            generator: next(),
            depth_net: next(),
            warp_net: next(),
            critic: next(),
        };
        let states: [AdamState; 4] = states.try_into().expect("four states");
        Ok(Self {
            step: header.step,
            config: header.config,
            networks,
            optimizer: OptimizerState { states },
            samplers: header.samplers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Scene-unit depth predicted from `[N, 3, H, W]` images by the generator
/// and DepthNet alone.
pub fn predict_depth(checkpoint: &Checkpoint, image: &Tensor) -> Result<Tensor> {
    checkpoint.networks.predict_depth(image)
}

pub const LOG_HEADER: &str = "step,l_gan,l_r,l_s,l_w,photo,geo,smooth,total";

/// One CSV row. Values print in shortest round-trip form.
pub fn log_row(step: usize, r: &LossReport) -> String {
    format!(
        "{step},{},{},{},{},{},{},{},{}",
        r.l_gan, r.l_r, r.l_s, r.l_w, r.photo, r.geo, r.smooth, r.total
    )
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Report of every step run, in order.
    pub history: Vec<LossReport>,
}

/// Runs `checkpoint` forward until `until` completed steps. Writes the loss
/// log and checkpoints when the config names paths; the log is appended to
/// when resuming. `observe` sees the state after every step.
pub fn run(
    checkpoint: &mut Checkpoint,
    data: &TrainData,
    until: usize,
    mut observe: impl FnMut(&Checkpoint, &LossReport) -> Result<()>,
) -> Result<Vec<LossReport>> {
    let cfg = checkpoint.config.clone();
    let mut log = match &cfg.log_path {
        Some(path) => Some(open_log(path, checkpoint.step > 0)?),
        None => None,
    };
    let mut history = Vec::with_capacity(until.saturating_sub(checkpoint.step));
    while checkpoint.step < until {
        let index = checkpoint.step;
        let report = checkpoint.step(data)?;
        observe(checkpoint, &report)?;
        if let (Some((path, w)), true) = (&mut log, index % cfg.log_every == 0 || index + 1 == until) {
            writeln!(w, "{}", log_row(index, &report)).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(path) = &cfg.checkpoint_path {
            let periodic = cfg.checkpoint_every > 0 && checkpoint.step % cfg.checkpoint_every == 0;
            if periodic || checkpoint.step == until {
                checkpoint.save(path)?;
            }
        }
        log::debug!("step {index}: total {}", report.total);
        history.push(report);
    }
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }
    Ok(history)
}

fn open_log(path: &Path, append: bool) -> Result<(PathBuf, BufWriter<File>)> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let exists = path.exists();
    let file = if append && exists {
        OpenOptions::new().append(true).open(path)
    } else {
        File::create(path)
    };
    let mut w = BufWriter::new(file.map_err(|e| Error::io(path, e))?);
    if !(append && exists) {
        writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    Ok((path.to_path_buf(), w))
}

/// Trains from scratch for `cfg.steps` steps.
pub fn train(cfg: &TrainConfig, net: &NetConfig, data: &TrainData) -> Result<TrainOutcome> {
    let mut checkpoint = Checkpoint::new(cfg, net, data)?;
    let history = run(&mut checkpoint, data, cfg.steps, |_, _| Ok(()))?;
    Ok(TrainOutcome { checkpoint, history })
}
