//! Generator, DepthNet, WarpNet and patch critic at desk scale.
//!
//! Every network is a list of convolution layers described by a manifest
//! ([`ConvSpec`]) plus one weight and one bias tensor per layer. The forward
//! topology is fixed per [`NetKind`]; parameters are bound onto a tape with
//! [`NetworkParams::bind`] before each forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scale applied to the raw WarpNet head for translation and rotation.
pub const POSE_SCALE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub resolution: usize,
    pub base_width: usize,
    pub depth: usize,
    pub seed: u64,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            base_width: 16,
            depth: 4,
            seed: 0,
            depth_min: 0.05,
            depth_max: 10.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::invalid("NetConfig", detail));
        if self.depth == 0 || self.depth > 8 {
            return fail(format!("encoder depth {} outside 1..=8", self.depth));
        }
        if self.base_width < 2 {
            return fail(format!("base width {} < 2", self.base_width));
        }
        if self.resolution == 0 || self.resolution % (1 << self.depth) != 0 {
            return fail(format!(
                "resolution {} not divisible by 2^{}",
                self.resolution, self.depth
            ));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min && self.depth_max.is_finite()) {
            return fail(format!("depth range [{}, {}]", self.depth_min, self.depth_max));
        }
        Ok(())
    }

    /// Scene-unit depth from a normalized network output.
    pub fn denormalize_depth(&self, v: f64) -> f64 {
        self.depth_min + v * (self.depth_max - self.depth_min)
    }

    /// Normalized depth in `[0, 1]` from scene units.
    pub fn normalize_depth(&self, d: f64) -> f64 {
        (d - self.depth_min) / (self.depth_max - self.depth_min)
    }

    fn encoder_width(&self, level: usize) -> usize {
        self.base_width << (level / 2)
    }

    fn decoder_width(&self, level: usize) -> usize {
        if level == 0 {
            (self.base_width / 2).max(1)
        } else {
            self.base_width
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Generator,
    DepthNet,
    WarpNet,
    Critic,
}

impl NetKind {
    pub const ALL: [NetKind; 4] = [NetKind::Generator, NetKind::DepthNet, NetKind::WarpNet, NetKind::Critic];

    pub fn name(self) -> &'static str {
        match self {
            NetKind::Generator => "generator",
            NetKind::DepthNet => "depthnet",
            NetKind::WarpNet => "warpnet",
            NetKind::Critic => "critic",
        }
    }

    fn seed_salt(self) -> u64 {
        match self {
            NetKind::Generator => 0x9e37_79b9_7f4a_7c15,
            NetKind::DepthNet => 0xbf58_476d_1ce4_e5b9,
            NetKind::WarpNet => 0x94d0_49bb_1331_11eb,
            NetKind::Critic => 0x2545_f491_4f6c_dd1d,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    LeakyRelu,
    Sigmoid,
}

/// One convolution layer of the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
    pub zero_init: bool,
}

impl ConvSpec {
    fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, activation: Activation) -> Self {
        Self {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding: kernel / 2,
            activation,
            zero_init: false,
        }
    }

    fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }
}

/// Layer manifest plus parameters: `tensors[2i]` is the weight and
/// `tensors[2i + 1]` the bias of `layers[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub kind: NetKind,
    pub config: NetConfig,
    pub layers: Vec<ConvSpec>,
    pub tensors: Vec<Tensor>,
}

fn manifest(kind: NetKind, cfg: &NetConfig) -> Vec<ConvSpec> {
    use Activation::*;
    let d = cfg.depth;
    let mut layers = Vec::new();
    match kind {
        NetKind::Generator | NetKind::DepthNet => {
            let mut cin = 3;
            for i in 0..d {
                let w = cfg.encoder_width(i);
                layers.push(ConvSpec::new(format!("enc{i}"), cin, w, 3, 2, LeakyRelu));
                cin = w;
            }
            // Decoder levels run from the second-deepest encoder level up.
            let mut prev = cin;
            for j in (0..d.saturating_sub(1)).rev() {
                let w = cfg.decoder_width(j);
                layers.push(ConvSpec::new(format!("dec{j}"), prev + cfg.encoder_width(j), w, 3, 1, LeakyRelu));
                prev = w;
            }
            let head = if kind == NetKind::Generator {
                ConvSpec::new("head", prev + 3, 3, 3, 1, None).zeroed()
            } else {
                ConvSpec::new("head", prev + 3, 1, 3, 1, Sigmoid)
            };
            layers.push(head);
        }
        NetKind::WarpNet => {
            let mut cin = 6;
            for i in 0..d {
                let w = cfg.base_width << i.min(1);
                layers.push(ConvSpec::new(format!("enc{i}"), cin, w, 3, 2, LeakyRelu));
                cin = w;
            }
            layers.push(ConvSpec::new("head", cin, 6, 1, 1, None).zeroed());
        }
        NetKind::Critic => {
            let widths = [cfg.base_width, cfg.base_width * 2, cfg.base_width * 2];
            let mut cin = 3;
            for (i, &w) in widths.iter().enumerate() {
                layers.push(ConvSpec::new(format!("conv{i}"), cin, w, 3, 2, LeakyRelu));
                cin = w;
            }
            layers.push(ConvSpec::new("head", cin, 1, 3, 1, None));
        }
    }
    layers
}

impl NetworkParams {
    /// Builds a network with fan-in scaled normal weights
    /// (`std = sqrt(2 / fan_in)`), zero biases, and zeroed heads where the
    /// topology asks for identity at initialization.
    pub fn build(kind: NetKind, cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = manifest(kind, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ kind.seed_salt());
        let mut tensors = Vec::with_capacity(layers.len() * 2);
        for l in &layers {
            let shape = l.weight_shape();
            let fan_in = (l.in_channels * l.kernel * l.kernel) as f64;
            let weight = if l.zero_init {
                Tensor::zeros(shape)
            } else {
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                Tensor::from_fn(shape, |_| normal.sample(&mut rng))
            };
            tensors.push(weight);
            tensors.push(Tensor::zeros([l.out_channels]));
        }
        Ok(Self {
            kind,
            config: *cfg,
            layers,
            tensors,
        })
    }

    /// Wraps existing tensors, checking them against the manifest for `kind`.
    pub fn from_tensors(kind: NetKind, cfg: &NetConfig, tensors: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let net = Self {
            kind,
            config: *cfg,
            layers: manifest(kind, cfg),
            tensors,
        };
        net.validate()?;
        Ok(net)
    }

    /// Shapes of `tensors` in order, without allocating them.
    pub fn tensor_shapes(kind: NetKind, cfg: &NetConfig) -> Vec<Vec<usize>> {
        manifest(kind, cfg)
            .iter()
            .flat_map(|l| [l.weight_shape().to_vec(), vec![l.out_channels]])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// `(name, tensor)` pairs such as `generator.enc0.weight`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .zip(self.tensors.chunks(2))
            .flat_map(|(l, wb)| {
                let base = format!("{}.{}", self.kind.name(), l.name);
                [(format!("{base}.weight"), &wb[0]), (format!("{base}.bias"), &wb[1])]
            })
            .collect()
    }

    /// Checks the tensor list against the manifest.
    pub fn validate(&self) -> Result<()> {
        if self.tensors.len() != self.layers.len() * 2 {
            return Err(Error::invalid(
                "NetworkParams",
                format!("{} tensors for {} layers", self.tensors.len(), self.layers.len()),
            ));
        }
        for (l, wb) in self.layers.iter().zip(self.tensors.chunks(2)) {
            if wb[0].shape() != l.weight_shape() || wb[1].shape() != [l.out_channels] {
                return Err(Error::invalid("NetworkParams", format!("layer {} has wrong tensor shapes", l.name)));
            }
            if !wb[0].all_finite() || !wb[1].all_finite() {
                return Err(Error::invalid("NetworkParams", format!("layer {} is not finite", l.name)));
            }
        }
        Ok(())
    }

    /// Clamps every parameter into `[−c, c]`.
    pub fn clip_weights(&mut self, c: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = v.clamp(-c, c));
        }
    }

    pub fn max_abs_param(&self) -> f64 {
        self.tensors.iter().map(Tensor::max_abs).fold(0.0, f64::max)
    }

    /// Receptive field, in input pixels, of one output element.
    pub fn receptive_field(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .fold(1, |rf, l| (rf - 1) * l.stride + l.kernel)
    }

    /// Records the parameters on `tape`, as gradient-tracking leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'_, 't> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        Bound { net: self, vars }
    }
}

/// The four networks of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSet {
    pub generator: NetworkParams,
    pub depth_net: NetworkParams,
    pub warp_net: NetworkParams,
    pub critic: NetworkParams,
}

impl NetworkSet {
    pub fn build(cfg: &NetConfig) -> Result<Self> {
        Ok(Self {
            generator: NetworkParams::build(NetKind::Generator, cfg)?,
            depth_net: NetworkParams::build(NetKind::DepthNet, cfg)?,
            warp_net: NetworkParams::build(NetKind::WarpNet, cfg)?,
            critic: NetworkParams::build(NetKind::Critic, cfg)?,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.generator.config
    }

    pub fn get(&self, kind: NetKind) -> &NetworkParams {
        match kind {
            NetKind::Generator => &self.generator,
            NetKind::DepthNet => &self.depth_net,
            NetKind::WarpNet => &self.warp_net,
            NetKind::Critic => &self.critic,
        }
    }

    pub fn get_mut(&mut self, kind: NetKind) -> &mut NetworkParams {
        match kind {
            NetKind::Generator => &mut self.generator,
            NetKind::DepthNet => &mut self.depth_net,
            NetKind::WarpNet => &mut self.warp_net,
            NetKind::Critic => &mut self.critic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in NetKind::ALL {
            let net = self.get(kind);
            if net.kind != kind || net.config != *self.config() {
                return Err(Error::invalid("NetworkSet", format!("{} slot holds a mismatched network", kind.name())));
            }
            net.validate()?;
        }
        Ok(())
    }

    /// Scene-unit depth `DepthNet(G(x))` for `[N, 3, H, W]` images, `[N, 1, H, W]`.
    pub fn predict_depth(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let g = self.generator.bind(&tape, false);
        let d = self.depth_net.bind(&tape, false);
        let x = tape.constant(image.clone());
        let y = d.depth(g.translate(x)?)?;
        let cfg = *self.config();
        let out = y.value().map(|v| cfg.denormalize_depth(v));
        Ok(out)
    }
}

/// Parameters of one network recorded on a tape.
pub struct Bound<'n, 't> {
    pub net: &'n NetworkParams,
    pub vars: Vec<Var<'t>>,
}

impl<'t> Bound<'_, 't> {
    fn layer(&self, i: usize, x: Var<'t>) -> Result<Var<'t>> {
        let spec = &self.net.layers[i];
        let y = x.conv2d(self.vars[2 * i], Some(self.vars[2 * i + 1]), spec.stride, spec.padding)?;
        match spec.activation {
            Activation::None => Ok(y),
            Activation::LeakyRelu => y.leaky_relu(LEAKY_SLOPE),
            Activation::Sigmoid => y.sigmoid(),
        }
    }

    fn check_input(&self, x: &Var<'t>, channels: usize) -> Result<[usize; 4]> {
        let dims = x.value().dims4()?;
        let step = 1 << self.net.config.depth;
        if dims[1] != channels || dims[2] % step != 0 || dims[3] % step != 0 || dims[2] == 0 || dims[3] == 0 {
            return Err(Error::shape(
                self.net.kind.name(),
                format!("input {dims:?} needs {channels} channels and sides divisible by {step}"),
            ));
        }
        Ok(dims)
    }

    fn encoder_decoder(&self, x: Var<'t>) -> Result<Var<'t>> {
        let d = self.net.config.depth;
        let mut skips = Vec::with_capacity(d);
        let mut h = x;
        for i in 0..d {
            h = self.layer(i, h)?;
            skips.push(h);
        }
        for (k, j) in (0..d - 1).rev().enumerate() {
            let up = h.upsample_bilinear(2)?;
            h = self.layer(d + k, Var::concat(&[up, skips[j]], 1)?)?;
        }
        let up = h.upsample_bilinear(2)?;
        self.layer(self.net.layers.len() - 1, Var::concat(&[up, x], 1)?)
    }

    /// Generator: `clamp(x + residual(x), 0, 1)`.
    pub fn translate(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.expect_kind(NetKind::Generator)?;
        self.check_input(&x, 3)?;
        x.add(self.encoder_decoder(x)?)?.clamp(0.0, 1.0)
    }

    /// DepthNet: normalized depth in `(0, 1)`, `[N, 1, H, W]`.
    pub fn depth(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.expect_kind(NetKind::DepthNet)?;
        self.check_input(&x, 3)?;
        self.encoder_decoder(x)
    }

    /// WarpNet: `[N, 6]` pose taking frame `t` to frame `t+1`.
    pub fn pose(&self, x_t: Var<'t>, x_t1: Var<'t>) -> Result<Var<'t>> {
        self.expect_kind(NetKind::WarpNet)?;
        let mut h = Var::concat(&[x_t, x_t1], 1)?;
        let [n, ..] = self.check_input(&h, 6)?;
        let last = self.net.layers.len() - 1;
        for i in 0..last {
            h = self.layer(i, h)?;
        }
        let pooled = h.mean_axes(&[2, 3])?;
        self.layer(last, pooled)?.reshape(&[n, 6])?.mul_scalar(POSE_SCALE)
    }

    /// Critic: one score per image, `[N]`, the mean of its patch scores.
    pub fn critic(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.expect_kind(NetKind::Critic)?;
        let [n, ..] = self.check_input(&x, 3)?;
        let mut h = x;
        for i in 0..self.net.layers.len() {
            h = self.layer(i, h)?;
        }
        h.mean_axes(&[1, 2, 3])?.reshape(&[n])
    }

    fn expect_kind(&self, kind: NetKind) -> Result<()> {
        if self.net.kind != kind {
            return Err(Error::invalid(
                "network forward",
                format!("{} parameters used as {}", self.net.kind.name(), kind.name()),
            ));
        }
        Ok(())
    }
}
