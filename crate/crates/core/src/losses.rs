//! Training objectives and the SSIM evaluation metric.
//!
//! Spatial reductions are means over valid pixels. Images are `[N, C, H, W]`
//! in `[0, 1]`, depths and masks are `[N, 1, H, W]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::WarpArtifacts;
use crate::tensor::Tensor;

/// Weights of the photometric, geometric and smoothness warp terms.
pub const WARP_PHOTO: f64 = 1.0;
pub const WARP_GEO: f64 = 0.5;
pub const WARP_SMOOTH: f64 = 0.1;

/// Pixels whose smallest channel reaches this value count as specular.
pub const DEFAULT_SPECULAR_THRESHOLD: f64 = 0.98;

/// Clamp applied to discriminator probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub omega_g: f64,
    pub omega_r: f64,
    pub omega_s: f64,
    pub omega_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            omega_g: 1.0,
            omega_r: 10.0,
            omega_s: 100.0,
            omega_w: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.omega_g, self.omega_r, self.omega_s, self.omega_w];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("LossWeights", format!("weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    /// `ω_G·gan + ω_R·recon + 0.5·(ω_S·syn + ω_W·warp)`.
    pub fn combine(&self, gan: f64, recon: f64, syn: f64, warp: f64) -> f64 {
        self.omega_g * gan + self.omega_r * recon + 0.5 * (self.omega_s * syn + self.omega_w * warp)
    }

    /// The same combination on the tape. Terms with zero weight may be `None`.
    pub fn combine_vars<'t>(
        &self,
        gan: Option<Var<'t>>,
        recon: Option<Var<'t>>,
        syn: Option<Var<'t>>,
        warp: Option<Var<'t>>,
    ) -> Result<Option<Var<'t>>> {
        let scaled = |v: Option<Var<'t>>, w: f64| v.map(|v| v.mul_scalar(w)).transpose();
        let head = sum_present([scaled(gan, self.omega_g)?, scaled(recon, self.omega_r)?])?;
        let tail = sum_present([scaled(syn, self.omega_s)?, scaled(warp, self.omega_w)?])?
            .map(|t| t.mul_scalar(0.5))
            .transpose()?;
        sum_present([head, tail])
    }
}

fn sum_present<'t, const K: usize>(terms: [Option<Var<'t>>; K]) -> Result<Option<Var<'t>>> {
    let mut acc: Option<Var<'t>> = None;
    for t in terms.into_iter().flatten() {
        acc = Some(match acc {
            Some(a) => a.add(t)?,
            None => t,
        });
    }
    Ok(acc)
}

/// Scalar values of every objective for one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_gan: f64,
    pub l_r: f64,
    pub l_s: f64,
    pub l_w: f64,
    pub photo: f64,
    pub geo: f64,
    pub smooth: f64,
    pub total: f64,
}

/// Builds a report whose `total` is the weighted combination of the parts.
pub fn total_loss(l_gan: f64, l_r: f64, l_s: f64, l_w: f64, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    Ok(LossReport {
        l_gan,
        l_r,
        l_s,
        l_w,
        total: weights.combine(l_gan, l_r, l_s, l_w),
        ..LossReport::default()
    })
}

fn require_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `[N, 1, H, W]` mask: 0 on near-saturated pixels of `x` (smallest channel
/// `>= threshold`) and on their `dilation`-pixel neighbourhood, 1 elsewhere.
pub fn specularity_mask(x: &Tensor, threshold: f64, dilation: usize) -> Result<Tensor> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid("specularity_mask", format!("threshold {threshold} outside (0, 1]")));
    }
    let [n, c, h, w] = x.dims4()?;
    let plane = h * w;
    let mut specular = vec![false; n * plane];
    for b in 0..n {
        for p in 0..plane {
            let min = (0..c)
                .map(|ch| x.data()[(b * c + ch) * plane + p])
                .fold(f64::INFINITY, f64::min);
            specular[b * plane + p] = min >= threshold;
        }
    }
    let d = dilation as isize;
    let mut mask = vec![1.0; n * plane];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                if !specular[b * plane + y * w + xx] {
                    continue;
                }
                for dy in -d..=d {
                    for dx in -d..=d {
                        let (yy, xq) = (y as isize + dy, xx as isize + dx);
                        if yy >= 0 && xq >= 0 && (yy as usize) < h && (xq as usize) < w {
                            mask[b * plane + yy as usize * w + xq as usize] = 0.0;
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, 1, h, w], mask)
}

/// Gain and offset of the affine brightness alignment `a·x + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrightnessParams {
    pub a: f64,
    pub b: f64,
}

/// Least-squares fit of `a·x + b ≈ target` over masked pixels, one fit per
/// batch item shared across channels. Falls back to `a = 1` with the mean
/// offset when `x` is constant on the mask or the fitted gain is not positive.
pub fn fit_brightness(x: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Vec<BrightnessParams>> {
    require_same_shape("brightness_transform", x, target)?;
    let [n, c, h, w] = x.dims4()?;
    if mask.shape() != [n, 1, h, w] {
        return Err(Error::shape("brightness_transform", format!("mask {:?} for image {:?}", mask.shape(), x.shape())));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let valid: Vec<usize> = (0..plane).filter(|&p| mask.data()[b * plane + p] > 0.0).collect();
        if valid.is_empty() {
            return Err(Error::EmptyMask { op: "brightness_transform" });
        }
        let samples = || {
            valid.iter().flat_map(move |&p| {
                (0..c).map(move |ch| {
                    let i = (b * c + ch) * plane + p;
                    (x.data()[i], target.data()[i])
                })
            })
        };
        let m = (valid.len() * c) as f64;
        let (sx, sy) = samples().fold((0.0, 0.0), |(sx, sy), (xv, yv)| (sx + xv, sy + yv));
        let (mx, my) = (sx / m, sy / m);
        let (var, cov) = samples().fold((0.0, 0.0), |(v, cv), (xv, yv)| {
            (v + (xv - mx) * (xv - mx), cv + (xv - mx) * (yv - my))
        });
        let fallback = BrightnessParams { a: 1.0, b: my - mx };
        let params = if var <= 1e-14 * m {
            fallback
        } else {
            let a = cov / var;
            if a > 0.0 {
                BrightnessParams { a, b: my - a * mx }
            } else {
                fallback
            }
        };
        out.push(params);
    }
    Ok(out)
}

/// Applies [`fit_brightness`] to `x` as constants: no gradient flows through
/// the fitted parameters, only through `x`.
pub fn brightness_transform<'t>(x: Var<'t>, target: &Tensor, mask: &Tensor) -> Result<(Vec<BrightnessParams>, Var<'t>)> {
    let params = fit_brightness(&x.value(), target, mask)?;
    let out = apply_brightness(x, &params)?;
    Ok((params, out))
}

/// `a·x + b` per batch item, with `(a, b)` as constants.
pub fn apply_brightness<'t>(x: Var<'t>, params: &[BrightnessParams]) -> Result<Var<'t>> {
    let n = params.len();
    if x.shape().first() != Some(&n) {
        return Err(Error::shape("apply_brightness", format!("{n} parameter sets for {:?}", x.shape())));
    }
    let tape = x.tape();
    let gain = tape.constant(Tensor::new([n, 1, 1, 1], params.iter().map(|p| p.a).collect())?);
    let offset = tape.constant(Tensor::new([n, 1, 1, 1], params.iter().map(|p| p.b).collect())?);
    x.mul(gain)?.add(offset)
}

/// Sum of `v · mask` divided by the number of masked elements. `mask` is
/// `[N, 1, H, W]` and broadcasts over the channels of `v`.
pub fn masked_mean<'t>(v: Var<'t>, mask: &Tensor, op: &'static str) -> Result<Var<'t>> {
    let shape = v.shape();
    let channels = shape.get(1).copied().unwrap_or(1);
    let count = mask.data().iter().filter(|&&m| m > 0.0).count() * channels;
    if count == 0 {
        return Err(Error::EmptyMask { op });
    }
    let m = v.tape().constant(mask.clone());
    v.mul(m)?.sum()?.mul_scalar(1.0 / count as f64)
}

/// Mean over valid pixels of the channel-wise Euclidean norm of
/// `T(x_t) − warped`, with `T` the brightness alignment of `x_t` to the
/// warped frame.
pub fn photometric_loss<'t>(x_t: Var<'t>, warp: &WarpArtifacts<'t>) -> Result<Var<'t>> {
    if warp.valid_count() == 0 {
        return Err(Error::EmptyMask { op: "photometric_loss" });
    }
    let params = fit_brightness(&x_t.value(), &warp.warped_image.value(), &warp.validity_mask)?;
    photometric_loss_with(x_t, warp, &params)
}

/// [`photometric_loss`] with given brightness parameters, one per batch item.
pub fn photometric_loss_with<'t>(x_t: Var<'t>, warp: &WarpArtifacts<'t>, params: &[BrightnessParams]) -> Result<Var<'t>> {
    if warp.valid_count() == 0 {
        return Err(Error::EmptyMask { op: "photometric_loss" });
    }
    let aligned = apply_brightness(x_t, params)?;
    let residual = aligned.sub(warp.warped_image)?.channel_norm()?;
    masked_mean(residual, &warp.validity_mask, "photometric_loss")
}

/// Mean over valid pixels of `|Y′ − Ỹ′| / (Y′ + Ỹ′)`.
pub fn geometric_consistency_loss<'t>(warp: &WarpArtifacts<'t>) -> Result<Var<'t>> {
    if warp.valid_count() == 0 {
        return Err(Error::EmptyMask { op: "geometric_consistency_loss" });
    }
    let tape = warp.projected_depth.tape();
    let mask = tape.constant(warp.validity_mask.clone());
    let off = tape.constant(warp.validity_mask.map(|m| 1.0 - m));
    // Invalid pixels are replaced by 1/1 so the ratio there is 0 and finite.
    let a = warp.projected_depth.mul(mask)?.add(off)?;
    let b = warp.resampled_depth.mul(mask)?.add(off)?;
    let ratio = a.sub(b)?.abs()?.div(a.add(b)?)?;
    masked_mean(ratio, &warp.validity_mask, "geometric_consistency_loss")
}

/// Edge-aware smoothness: `0.5·(mean_x + mean_y)` of
/// `(exp(−|∂x|)·∂(d / mean d))²` with forward differences, the image
/// gradient averaged over channels and the depth normalized per batch item.
pub fn smoothness_loss<'t>(image: Var<'t>, depth: Var<'t>) -> Result<Var<'t>> {
    let [n, _, h, w] = image.value().dims4()?;
    let [nd, cd, hd, wd] = depth.value().dims4()?;
    if (nd, cd, hd, wd) != (n, 1, h, w) {
        return Err(Error::shape("smoothness_loss", format!("depth {:?} for image {:?}", depth.shape(), image.shape())));
    }
    if h < 2 || w < 2 {
        return Err(Error::shape("smoothness_loss", "needs at least 2x2 pixels"));
    }
    let norm = depth.div(depth.mean_axes(&[2, 3])?)?;
    let mut terms = Vec::with_capacity(2);
    for (axis, len) in [(3, w), (2, h)] {
        let img_grad = image
            .slice(axis, 1, len - 1)?
            .sub(image.slice(axis, 0, len - 1)?)?
            .abs()?
            .mean_axes(&[1])?;
        let edge = img_grad.neg()?.exp()?;
        let d_grad = norm.slice(axis, 1, len - 1)?.sub(norm.slice(axis, 0, len - 1)?)?;
        terms.push(edge.mul(d_grad)?.square()?.mean()?);
    }
    terms[0].add(terms[1])?.mul_scalar(0.5)
}

/// The three weighted parts of the warp loss and their sum.
pub struct WarpLoss<'t> {
    pub total: Var<'t>,
    pub photo: Var<'t>,
    pub geo: Var<'t>,
    pub smooth: Var<'t>,
}

/// `photo + 0.5·geo + 0.1·smooth`.
pub fn warp_loss<'t>(x_t: Var<'t>, depth_t: Var<'t>, warp: &WarpArtifacts<'t>) -> Result<WarpLoss<'t>> {
    let photo = photometric_loss(x_t, warp)?;
    let geo = geometric_consistency_loss(warp)?;
    let smooth = smoothness_loss(x_t, depth_t)?;
    let total = photo
        .mul_scalar(WARP_PHOTO)?
        .add(geo.mul_scalar(WARP_GEO)?)?
        .add(smooth.mul_scalar(WARP_SMOOTH)?)?;
    Ok(WarpLoss {
        total,
        photo,
        geo,
        smooth,
    })
}

/// Scalar form of the warp-loss weighting.
pub fn combine_warp_terms(photo: f64, geo: f64, smooth: f64) -> f64 {
    WARP_PHOTO * photo + WARP_GEO * geo + WARP_SMOOTH * smooth
}

/// Mean absolute error between predicted and ground-truth normalized depth.
pub fn depth_l1_loss<'t>(pred: Var<'t>, gt: Var<'t>) -> Result<Var<'t>> {
    require_same_shape("depth_l1_loss", &pred.value(), &gt.value())?;
    pred.sub(gt)?.abs()?.mean()
}

/// Squared error on the synthetic pair plus masked absolute error on the
/// real pair, each averaged.
pub fn reconstruction_loss<'t>(
    gen_syn: Var<'t>,
    x_syn: Var<'t>,
    gen_real: Var<'t>,
    x_real: Var<'t>,
    mask: &Tensor,
) -> Result<Var<'t>> {
    require_same_shape("reconstruction_loss", &gen_syn.value(), &x_syn.value())?;
    require_same_shape("reconstruction_loss", &gen_real.value(), &x_real.value())?;
    let syn = gen_syn.sub(x_syn)?.square()?.mean()?;
    let real = masked_mean(gen_real.sub(x_real)?.abs()?, mask, "reconstruction_loss")?;
    syn.add(real)
}

/// `mean D(G(X_S)) − mean D(G(X_R))`, minimized by the generator.
pub fn wgan_generator_loss<'t>(d_syn: Var<'t>, d_real: Var<'t>) -> Result<Var<'t>> {
    d_syn.mean()?.sub(d_real.mean()?)
}

/// Negated generator loss, minimized by the critic.
pub fn wgan_critic_loss<'t>(d_syn: Var<'t>, d_real: Var<'t>) -> Result<Var<'t>> {
    wgan_generator_loss(d_syn, d_real)?.neg()
}

/// `mean log D(X₂) + mean log(1 − D(G(X₁)))` on probabilities clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn baseline_gan_loss<'t>(d_fake: Var<'t>, d_target_domain: Var<'t>) -> Result<Var<'t>> {
    let real = d_target_domain.clamp(PROB_EPS, 1.0 - PROB_EPS)?.ln()?.mean()?;
    let fake = d_fake
        .clamp(PROB_EPS, 1.0 - PROB_EPS)?
        .neg()?
        .add_scalar(1.0)?
        .ln()?
        .mean()?;
    real.add(fake)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 11-tap Gaussian with σ = 1.5.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable Gaussian filter of one `h × w` plane.
fn gauss_filter(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Per-window SSIM, `[N, C, H − 10, W − 10]`, one value per window position.
pub fn ssim_map(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    require_same_shape("ssim", x, y)?;
    let [n, c, h, w] = x.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape("ssim", format!("spatial size {h}x{w} is below the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let k = ssim_kernel();
    let plane = h * w;
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let xs = &x.data()[p * plane..(p + 1) * plane];
        let ys = &y.data()[p * plane..(p + 1) * plane];
        let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { xs.iter().zip(ys).map(|(&a, &b)| f(a, b)).collect() };
        let mx = gauss_filter(xs, h, w, &k);
        let my = gauss_filter(ys, h, w, &k);
        let mxx = gauss_filter(&prod(|a, _| a * a), h, w, &k);
        let myy = gauss_filter(&prod(|_, b| b * b), h, w, &k);
        let mxy = gauss_filter(&prod(|a, b| a * b), h, w, &k);
        for i in 0..ho * wo {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            let num = (2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2);
            let den = (ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2);
            out.push(num / den);
        }
    }
    Tensor::new([n, c, ho, wo], out)
}

/// Mean SSIM over all windows and channels.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(ssim_map(x, y)?.mean())
}

/// SSIM restricted to a `[N, 1, H, W]` validity mask: invalid pixels are
/// zeroed in both images and only windows centred on valid pixels are
/// averaged.
pub fn masked_ssim(x: &Tensor, y: &Tensor, mask: &Tensor) -> Result<f64> {
    require_same_shape("ssim", x, y)?;
    let [n, c, h, w] = x.dims4()?;
    if mask.shape() != [n, 1, h, w] {
        return Err(Error::shape("ssim", format!("mask {:?} for image {:?}", mask.shape(), x.shape())));
    }
    let plane = h * w;
    let zeroed = |t: &Tensor| {
        Tensor::from_fn(t.shape().to_vec(), |i| {
            let (b, p) = (i / (c * plane), i % plane);
            t.data()[i] * mask.data()[b * plane + p]
        })
    };
    let map = ssim_map(&zeroed(x), &zeroed(y))?;
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let r = SSIM_WINDOW / 2;
    let (mut sum, mut count) = (0.0, 0usize);
    for b in 0..n {
        for ch in 0..c {
            for yy in 0..ho {
                for xx in 0..wo {
                    if mask.data()[b * plane + (yy + r) * w + xx + r] > 0.0 {
                        sum += map.data()[((b * c + ch) * ho + yy) * wo + xx];
                        count += 1;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask { op: "ssim" });
    }
    Ok(sum / count as f64)
}
