//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var, LEAKY_SLOPE};
use crate::error::Result;
use crate::geometry::{compute_warp, CameraIntrinsics, WarpArtifacts};
use crate::losses::{
    depth_l1_loss, fit_brightness, geometric_consistency_loss, photometric_loss_with, reconstruction_loss,
    smoothness_loss, wgan_generator_loss, BrightnessParams, WARP_GEO, WARP_PHOTO, WARP_SMOOTH,
};
use crate::networks::{Bound, NetConfig, NetKind, NetworkParams};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;

/// Compares the tape gradient of the scalar function `f` at `x` against
/// central differences with step `eps`.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let loss = f(&tape, v)?;
        let grads = tape.backward(loss)?;
        grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
    };
    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t);
        f(&tape, v)?.item()
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Largest error [`run_suite`] accepts.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst error over all checked points.
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < SUITE_TOLERANCE
    }
}

/// Values in `[0.1, 0.9]`.
fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0.1..0.9))
}

/// Moves values within `gap` of any kink to `gap` away from it.
fn avoid(mut t: Tensor, kinks: &[f64], gap: f64) -> Tensor {
    for v in t.data_mut() {
        for &k in kinks {
            if (*v - k).abs() < gap {
                *v = if *v >= k { k + gap } else { k - gap };
            }
        }
    }
    t
}

/// Reduces any output to a scalar with fixed non-uniform weights, so every
/// output element contributes a distinct gradient.
fn weighted_sum<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let shape = y.shape();
    let w = Tensor::from_fn(shape, |i| 0.5 + ((i * 7919) % 13) as f64 / 13.0);
    y.mul(y.tape().constant(w))?.sum()
}

/// Shared fixtures for the geometric and loss checks: 8×8 frames, depths in
/// `[1, 2]` and a small generic pose.
struct WarpFixture {
    image_t: Tensor,
    image_t1: Tensor,
    depth_t: Tensor,
    depth_t1: Tensor,
    pose: Tensor,
    k: CameraIntrinsics,
}

impl WarpFixture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let smooth = |rng: &mut ChaCha8Rng, c: usize| {
            let (a, b, p) = (rng.gen_range(0.2..0.6), rng.gen_range(0.3..1.2), rng.gen_range(0.0..3.0));
            Tensor::from_fn([1, c, 8, 8], move |i| {
                let (ch, y, x) = (i / 64, (i / 8) % 8, i % 8);
                0.5 + a * (b * x as f64 + 0.7 * y as f64 + p + ch as f64).sin() * 0.5
            })
        };
        let depth = |rng: &mut ChaCha8Rng| Tensor::from_fn([1, 1, 8, 8], |_| rng.gen_range(1.0..2.0));
        let pose = Tensor::new(
            [1, 6],
            vec![
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(0.0..0.08),
                rng.gen_range(-0.04..0.04),
                rng.gen_range(-0.04..0.04),
                rng.gen_range(-0.04..0.04),
            ],
        )
        .expect("six values");
        Self {
            image_t: smooth(rng, 3),
            image_t1: smooth(rng, 3),
            depth_t: depth(rng),
            depth_t1: depth(rng),
            pose,
            k: CameraIntrinsics::centered(8, 8, 1.2).expect("valid intrinsics"),
        }
    }

    /// Warp with one input replaced by a tape variable.
    fn warp<'t>(&self, tape: &'t Tape, which: WarpInput, v: Var<'t>) -> Result<(Var<'t>, WarpArtifacts<'t>)> {
        let pick = |w: WarpInput, t: &Tensor| if w == which { v } else { tape.constant(t.clone()) };
        let depth_t = pick(WarpInput::DepthT, &self.depth_t);
        let warp = compute_warp(
            depth_t,
            pick(WarpInput::ImageT1, &self.image_t1),
            pick(WarpInput::DepthT1, &self.depth_t1),
            pick(WarpInput::Pose, &self.pose),
            &self.k,
        )?;
        Ok((depth_t, warp))
    }

    fn input(&self, which: WarpInput) -> &Tensor {
        match which {
            WarpInput::DepthT => &self.depth_t,
            WarpInput::DepthT1 => &self.depth_t1,
            WarpInput::ImageT1 => &self.image_t1,
            WarpInput::Pose => &self.pose,
        }
    }

    /// Brightness parameters at the unperturbed point, held fixed during the
    /// check as they are detached in training.
    fn brightness(&self) -> Result<Vec<BrightnessParams>> {
        let tape = Tape::new();
        let (_, w) = self.warp(&tape, WarpInput::Pose, tape.constant(self.pose.clone()))?;
        fit_brightness(&self.image_t, &w.warped_image.value(), &w.validity_mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum WarpInput {
    DepthT,
    DepthT1,
    ImageT1,
    Pose,
}

/// Small networks with every parameter random, so no gradient path is
/// blocked by a zeroed layer.
fn small_net(kind: NetKind, rng: &mut ChaCha8Rng) -> NetworkParams {
    let cfg = NetConfig {
        resolution: 8,
        base_width: 2,
        depth: 2,
        ..NetConfig::default()
    };
    let mut net = NetworkParams::build(kind, &cfg).expect("valid small config");
    for t in &mut net.tensors {
        for v in t.data_mut() {
            *v = 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    net
}

/// Binds `net` with tensor `index` replaced by `v`.
fn bind_with<'n, 't>(net: &'n NetworkParams, tape: &'t Tape, index: usize, v: Var<'t>) -> Bound<'n, 't> {
    let vars = net
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| if i == index { v } else { tape.constant(t.clone()) })
        .collect();
    Bound { net, vars }
}

fn record(out: &mut Vec<CheckResult>, name: &str, err: f64) {
    match out.iter_mut().find(|r| r.name == name) {
        Some(r) => r.max_rel_error = r.max_rel_error.max(err),
        None => out.push(CheckResult {
            name: name.to_string(),
            max_rel_error: err,
        }),
    }
}

/// Finite-difference checks of every differentiable op and of each training
/// objective with respect to depths, pose, images and network parameters,
/// at `points` random points each. Deterministic for a given `seed`.
pub fn run_suite(points: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let eps = DEFAULT_EPS;
    for _ in 0..points {
        // Elementwise and reductions.
        let x = uniform(&mut rng, &[2, 3, 4]);
        let other = uniform(&mut rng, &[2, 3, 4]);
        let o = other.clone();
        let binary: [(&str, for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>>); 4] = [
            ("add", |a, b| a.add(b)),
            ("sub", |a, b| a.sub(b)),
            ("mul", |a, b| a.mul(b)),
            ("div", |a, b| a.div(b)),
        ];
        for (name, op) in binary {
            let o = o.clone();
            let e = finite_diff_check(move |t, v| weighted_sum(op(v, t.constant(o.clone()))?), &x, eps)?;
            record(&mut out, name, e);
            let xx = x.clone();
            let e = finite_diff_check(move |t, v| weighted_sum(op(t.constant(xx.clone()), v)?), &other, eps)?;
            record(&mut out, &format!("{name} (rhs)"), e);
        }
        let small = uniform(&mut rng, &[1, 3, 1]);
        let xb = x.clone();
        let e = finite_diff_check(move |t, v| weighted_sum(t.constant(xb.clone()).add(v)?), &small, eps)?;
        record(&mut out, "add (broadcast)", e);
        let xb = x.clone();
        let e = finite_diff_check(move |t, v| weighted_sum(t.constant(xb.clone()).mul(v)?), &small, eps)?;
        record(&mut out, "mul (broadcast)", e);

        let unary: [(&str, for<'t> fn(Var<'t>) -> Result<Var<'t>>); 12] = [
            ("add_scalar", |v| v.add_scalar(0.7)),
            ("mul_scalar", |v| v.mul_scalar(-1.3)),
            ("neg", |v| v.neg()),
            ("exp", |v| v.exp()),
            ("ln", |v| v.ln()),
            ("sqrt", |v| v.sqrt()),
            ("square", |v| v.square()),
            ("sigmoid", |v| v.sigmoid()),
            ("sum", |v| v.sum()),
            ("mean", |v| v.mean()),
            ("sum_axes", |v| v.sum_axes(&[1])),
            ("mean_axes", |v| v.mean_axes(&[0, 2])),
        ];
        for (name, op) in unary {
            record(&mut out, name, finite_diff_check(move |_, v| weighted_sum(op(v)?), &x, eps)?);
        }
        let centered = avoid(x.map(|v| v - 0.5), &[0.0], 0.02);
        record(&mut out, "abs", finite_diff_check(|_, v| weighted_sum(v.abs()?), &centered, eps)?);
        record(
            &mut out,
            "leaky_relu",
            finite_diff_check(|_, v| weighted_sum(v.leaky_relu(LEAKY_SLOPE)?), &centered, eps)?,
        );
        let kinked = avoid(x.clone(), &[0.3, 0.7], 0.02);
        record(&mut out, "clamp", finite_diff_check(|_, v| weighted_sum(v.clamp(0.3, 0.7)?), &kinked, eps)?);

        // Shape ops.
        let img = uniform(&mut rng, &[2, 3, 4, 5]);
        record(&mut out, "reshape", finite_diff_check(|_, v| weighted_sum(v.reshape(&[6, 20])?.square()?), &img, eps)?);
        record(&mut out, "slice", finite_diff_check(|_, v| weighted_sum(v.slice(3, 1, 3)?.square()?), &img, eps)?);
        record(
            &mut out,
            "permute",
            finite_diff_check(|_, v| weighted_sum(v.permute(&[0, 2, 3, 1])?.square()?), &img, eps)?,
        );
        let img2 = uniform(&mut rng, &[2, 2, 4, 5]);
        let part = img2.clone();
        record(
            &mut out,
            "concat",
            finite_diff_check(move |t, v| weighted_sum(Var::concat(&[t.constant(part.clone()), v], 1)?.square()?), &img, eps)?,
        );
        record(&mut out, "channel_norm", finite_diff_check(|_, v| weighted_sum(v.channel_norm()?), &img.map(|v| v - 0.45), eps)?);

        // Convolution, upsampling and sampling.
        let input = uniform(&mut rng, &[1, 2, 5, 5]);
        let weight = uniform(&mut rng, &[3, 2, 3, 3]).map(|v| v - 0.5);
        let bias = uniform(&mut rng, &[3]);
        let (w0, b0) = (weight.clone(), bias.clone());
        record(
            &mut out,
            "conv2d (input)",
            finite_diff_check(
                move |t, v| weighted_sum(v.conv2d(t.constant(w0.clone()), Some(t.constant(b0.clone())), 2, 1)?),
                &input,
                eps,
            )?,
        );
        let (i0, b0) = (input.clone(), bias.clone());
        record(
            &mut out,
            "conv2d (weight)",
            finite_diff_check(
                move |t, v| weighted_sum(t.constant(i0.clone()).conv2d(v, Some(t.constant(b0.clone())), 1, 1)?),
                &weight,
                eps,
            )?,
        );
        let (i0, w0) = (input.clone(), weight.clone());
        record(
            &mut out,
            "conv2d (bias)",
            finite_diff_check(
                move |t, v| weighted_sum(t.constant(i0.clone()).conv2d(t.constant(w0.clone()), Some(v), 1, 0)?),
                &bias,
                eps,
            )?,
        );
        record(
            &mut out,
            "upsample_bilinear",
            finite_diff_check(|_, v| weighted_sum(v.upsample_bilinear(2)?), &input, eps)?,
        );
        let source = uniform(&mut rng, &[1, 2, 5, 6]);
        let grid = avoid(
            Tensor::from_fn([1, 3, 4, 2], |i| {
                let hi = if i % 2 == 0 { 4.6 } else { 3.6 };
                rng.gen_range(0.3..hi)
            }),
            &[1.0, 2.0, 3.0, 4.0],
            0.02,
        );
        let g0 = grid.clone();
        record(
            &mut out,
            "grid_sample (input)",
            finite_diff_check(move |t, v| weighted_sum(v.grid_sample(t.constant(g0.clone()))?.0), &source, eps)?,
        );
        let s0 = source.clone();
        record(
            &mut out,
            "grid_sample (grid)",
            finite_diff_check(move |t, v| weighted_sum(t.constant(s0.clone()).grid_sample(v)?.0), &grid, eps)?,
        );

        // Warp objectives with respect to depths, pose and images.
        let fx = WarpFixture::new(&mut rng);
        let params = fx.brightness()?;
        for (which, label) in [
            (WarpInput::DepthT, "depth_t"),
            (WarpInput::DepthT1, "depth_t1"),
            (WarpInput::Pose, "pose"),
            (WarpInput::ImageT1, "image_t1"),
        ] {
            let e = finite_diff_check(
                |t, v| {
                    let (_, w) = fx.warp(t, which, v)?;
                    photometric_loss_with(t.constant(fx.image_t.clone()), &w, &params)
                },
                fx.input(which),
                eps,
            )?;
            record(&mut out, &format!("L_photo (wrt {label})"), e);
            if which != WarpInput::ImageT1 {
                let e = finite_diff_check(
                    |t, v| geometric_consistency_loss(&fx.warp(t, which, v)?.1),
                    fx.input(which),
                    eps,
                )?;
                record(&mut out, &format!("L_geo (wrt {label})"), e);
            }
        }
        let e = finite_diff_check(
            |t, v| {
                let (_, w) = fx.warp(t, WarpInput::Pose, t.constant(fx.pose.clone()))?;
                photometric_loss_with(v, &w, &params)
            },
            &fx.image_t,
            eps,
        )?;
        record(&mut out, "L_photo (wrt image_t)", e);
        let img_t = fx.image_t.clone();
        let e = finite_diff_check(move |t, v| smoothness_loss(t.constant(img_t.clone()), v), &fx.depth_t, eps)?;
        record(&mut out, "L_smooth (wrt depth)", e);
        let d_t = fx.depth_t.clone();
        let e = finite_diff_check(move |t, v| smoothness_loss(v, t.constant(d_t.clone())), &fx.image_t, eps)?;
        record(&mut out, "L_smooth (wrt image)", e);

        // Supervised and adversarial objectives.
        let gt = uniform(&mut rng, &[2, 1, 8, 8]);
        let pred = uniform(&mut rng, &[2, 1, 8, 8]);
        let pred = Tensor::from_fn(pred.shape().to_vec(), |i| {
            let p = pred.data()[i];
            if (p - gt.data()[i]).abs() < 0.02 { gt.data()[i] + 0.02 } else { p }
        });
        let g0 = gt.clone();
        record(
            &mut out,
            "L_S (wrt prediction)",
            finite_diff_check(move |t, v| depth_l1_loss(v, t.constant(g0.clone())), &pred, eps)?,
        );
        let x_syn = uniform(&mut rng, &[2, 3, 8, 8]);
        let x_real = uniform(&mut rng, &[2, 3, 8, 8]);
        let g_real = Tensor::from_fn([2, 3, 8, 8], |i| {
            let base = x_real.data()[i];
            let shift = rng.gen_range(0.05..0.2);
            if rng.gen_bool(0.5) { base + shift } else { base - shift }
        });
        let mask = Tensor::from_fn([2, 1, 8, 8], |i| if i % 7 == 3 { 0.0 } else { 1.0 });
        let g_syn = uniform(&mut rng, &[2, 3, 8, 8]);
        let (xs, xr, gr, m) = (x_syn.clone(), x_real.clone(), g_real.clone(), mask.clone());
        record(
            &mut out,
            "L_R (wrt synthetic translation)",
            finite_diff_check(
                move |t, v| reconstruction_loss(v, t.constant(xs.clone()), t.constant(gr.clone()), t.constant(xr.clone()), &m),
                &g_syn,
                eps,
            )?,
        );
        let (xs, xr, gs, m) = (x_syn.clone(), x_real.clone(), g_syn.clone(), mask.clone());
        record(
            &mut out,
            "L_R (wrt real translation)",
            finite_diff_check(
                move |t, v| reconstruction_loss(t.constant(gs.clone()), t.constant(xs.clone()), v, t.constant(xr.clone()), &m),
                &g_real,
                eps,
            )?,
        );

        // Objectives with respect to network parameters.
        let generator = small_net(NetKind::Generator, &mut rng);
        let depth_net = small_net(NetKind::DepthNet, &mut rng);
        let warp_net = small_net(NetKind::WarpNet, &mut rng);
        let critic = small_net(NetKind::Critic, &mut rng);
        let xs8 = uniform(&mut rng, &[2, 3, 8, 8]);
        let xr8 = uniform(&mut rng, &[2, 3, 8, 8]);
        let gt8 = uniform(&mut rng, &[2, 1, 8, 8]);
        for index in [0, 1, generator.tensors.len() - 2] {
            let e = finite_diff_check(
                |t, v| {
                    let g = bind_with(&generator, t, index, v);
                    let c = critic.bind(t, false);
                    let d_syn = c.critic(g.translate(t.constant(xs8.clone()))?)?;
                    let d_real = c.critic(g.translate(t.constant(xr8.clone()))?)?;
                    wgan_generator_loss(d_syn, d_real)
                },
                &generator.tensors[index],
                eps,
            )?;
            record(&mut out, "L_GAN (wrt generator parameters)", e);
        }
        for index in [0, critic.tensors.len() - 2] {
            let e = finite_diff_check(
                |t, v| {
                    let g = generator.bind(t, false);
                    let c = bind_with(&critic, t, index, v);
                    let d_syn = c.critic(g.translate(t.constant(xs8.clone()))?)?;
                    let d_real = c.critic(g.translate(t.constant(xr8.clone()))?)?;
                    wgan_generator_loss(d_syn, d_real)
                },
                &critic.tensors[index],
                eps,
            )?;
            record(&mut out, "L_GAN (wrt critic parameters)", e);
        }
        for index in [0, depth_net.tensors.len() - 2] {
            let e = finite_diff_check(
                |t, v| {
                    let d = bind_with(&depth_net, t, index, v);
                    depth_l1_loss(d.depth(t.constant(xs8.clone()))?, t.constant(gt8.clone()))
                },
                &depth_net.tensors[index],
                eps,
            )?;
            record(&mut out, "L_S (wrt DepthNet parameters)", e);
        }
        let mask8 = Tensor::ones([2, 1, 8, 8]);
        for index in [0, generator.tensors.len() - 1] {
            let e = finite_diff_check(
                |t, v| {
                    let g = bind_with(&generator, t, index, v);
                    let (xs, xr) = (t.constant(xs8.clone()), t.constant(xr8.clone()));
                    reconstruction_loss(g.translate(xs)?, xs, g.translate(xr)?, xr, &mask8)
                },
                &generator.tensors[index],
                eps,
            )?;
            record(&mut out, "L_R (wrt generator parameters)", e);
        }
        // Full warp objective through DepthNet and WarpNet.
        let frames = Tensor::stack_batch(&[&fx.image_t, &fx.image_t1])?;
        for (net_kind, index) in [(NetKind::WarpNet, 0), (NetKind::WarpNet, warp_net.tensors.len() - 2), (NetKind::DepthNet, 0)] {
            let target = if net_kind == NetKind::WarpNet { &warp_net } else { &depth_net };
            let e = finite_diff_check(
                |t, v| {
                    let (d, w) = if net_kind == NetKind::WarpNet {
                        (depth_net.bind(t, false), bind_with(&warp_net, t, index, v))
                    } else {
                        (bind_with(&depth_net, t, index, v), warp_net.bind(t, false))
                    };
                    let x = t.constant(frames.clone());
                    let depth = d.depth(x)?.mul_scalar(2.0)?.add_scalar(0.5)?;
                    let (depth_t, depth_t1) = (depth.slice(0, 0, 1)?, depth.slice(0, 1, 1)?);
                    let pose = w.pose(x.slice(0, 0, 1)?, x.slice(0, 1, 1)?)?.mul_scalar(5.0)?;
                    let warp = compute_warp(depth_t, t.constant(fx.image_t1.clone()), depth_t1, pose, &fx.k)?;
                    let x_t = t.constant(fx.image_t.clone());
                    photometric_loss_with(x_t, &warp, &params)?
                        .mul_scalar(WARP_PHOTO)?
                        .add(geometric_consistency_loss(&warp)?.mul_scalar(WARP_GEO)?)?
                        .add(smoothness_loss(x_t, depth_t)?.mul_scalar(WARP_SMOOTH)?)
                },
                &target.tensors[index],
                eps,
            )?;
            let label = if net_kind == NetKind::WarpNet { "L_W (wrt WarpNet parameters)" } else { "L_W (wrt DepthNet parameters)" };
            record(&mut out, label, e);
        }
    }
    Ok(out)
}
