//! Held-out evaluation: warp metrics on real pairs, depth error on synthetic
//! frames, and generator difference maps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::formats::{encode_pfm, encode_png};
use crate::geometry::{compute_warp, poses_tensor, CameraIntrinsics, Pose6D};
use crate::losses::{brightness_transform, geometric_consistency_loss, masked_ssim, photometric_loss};
use crate::networks::NetworkSet;
use crate::synthdata::{FramePair, SyntheticSample};
use crate::tensor::Tensor;

/// Pairs evaluated per network forward pass.
const EVAL_CHUNK: usize = 8;

pub const METRICS_HEADER: &str = "pair_id,photo,geo,ssim,valid_px_fraction";

/// Metrics of one pair. `valid` is false when the warp left no usable
/// pixels; such rows carry NaN metrics and are left out of the aggregates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairMetrics {
    pub pair_id: usize,
    pub photo: f64,
    pub geo: f64,
    pub ssim: f64,
    pub valid_px_fraction: f64,
    pub valid: bool,
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<PairMetrics>,
    pub photo: Aggregate,
    pub geo: Aggregate,
    pub ssim: Aggregate,
    /// Rows that entered the aggregates.
    pub count: usize,
    pub excluded: usize,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<PairMetrics>) -> Self {
        let valid: Vec<&PairMetrics> = rows.iter().filter(|r| r.valid).collect();
        let col = |f: fn(&PairMetrics) -> f64| -> Vec<f64> { valid.iter().map(|r| f(r)).collect() };
        Self {
            photo: Aggregate::of(&col(|r| r.photo)),
            geo: Aggregate::of(&col(|r| r.geo)),
            ssim: Aggregate::of(&col(|r| r.ssim)),
            count: valid.len(),
            excluded: rows.len() - valid.len(),
            rows,
        }
    }

    /// Header, one row per pair, then a `#` summary line.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.pair_id, r.photo, r.geo, r.ssim, r.valid_px_fraction);
        }
        let _ = writeln!(
            s,
            "# summary pairs={} excluded={} photo={}±{} geo={}±{} ssim={}±{}",
            self.count,
            self.excluded,
            self.photo.mean,
            self.photo.std,
            self.geo.mean,
            self.geo.std,
            self.ssim.mean,
            self.ssim.std
        );
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Warp metrics of one pair from explicit depths (scene units) and pose:
/// photometric and geometric losses, and SSIM between the brightness-aligned
/// frame `t` and the warped frame `t+1` over valid pixels.
pub fn pair_metrics(
    pair_id: usize,
    image_t: &Tensor,
    image_t1: &Tensor,
    depth_t: &Tensor,
    depth_t1: &Tensor,
    pose: &Pose6D,
    k: &CameraIntrinsics,
) -> Result<PairMetrics> {
    let tape = Tape::new();
    let warp = compute_warp(
        tape.constant(depth_t.clone()),
        tape.constant(image_t1.clone()),
        tape.constant(depth_t1.clone()),
        tape.constant(poses_tensor(&[*pose])),
        k,
    )?;
    let x_t = tape.constant(image_t.clone());
    let fraction = warp.valid_count() as f64 / warp.validity_mask.numel() as f64;
    let invalid = PairMetrics {
        pair_id,
        photo: f64::NAN,
        geo: f64::NAN,
        ssim: f64::NAN,
        valid_px_fraction: fraction,
        valid: false,
    };
    if warp.valid_count() == 0 {
        return Ok(invalid);
    }
    let photo = photometric_loss(x_t, &warp)?.item()?;
    let geo = geometric_consistency_loss(&warp)?.item()?;
    let (_, aligned) = brightness_transform(x_t, &warp.warped_image.value(), &warp.validity_mask)?;
    let ssim = match masked_ssim(&aligned.value(), &warp.warped_image.value(), &warp.validity_mask) {
        Ok(v) => v,
        Err(Error::EmptyMask { .. }) => return Ok(invalid),
        Err(e) => return Err(e),
    };
    Ok(PairMetrics {
        pair_id,
        photo,
        geo,
        ssim,
        valid_px_fraction: fraction,
        valid: true,
    })
}

/// Depths and pose predicted by the generator, DepthNet and WarpNet for
/// each pair, depths in scene units.
fn predict_pairs(nets: &NetworkSet, pairs: &[FramePair]) -> Result<Vec<(Tensor, Tensor, Pose6D)>> {
    let cfg = *nets.config();
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let b = chunk.len();
        let mut frames: Vec<&Tensor> = chunk.iter().map(|p| &p.image_t).collect();
        frames.extend(chunk.iter().map(|p| &p.image_t1));
        let tape = Tape::new();
        let g = nets.generator.bind(&tape, false);
        let d = nets.depth_net.bind(&tape, false);
        let w = nets.warp_net.bind(&tape, false);
        let translated = g.translate(tape.constant(Tensor::stack_batch(&frames)?))?;
        let depth = d.depth(translated)?.value().map(|v| cfg.denormalize_depth(v));
        let pose = w.pose(translated.slice(0, 0, b)?, translated.slice(0, b, b)?)?.value();
        for i in 0..b {
            let p = &pose.data()[6 * i..6 * i + 6];
            out.push((
                depth.batch_slice(i, 1)?,
                depth.batch_slice(b + i, 1)?,
                Pose6D::new([p[0], p[1], p[2]], [p[3], p[4], p[5]])?,
            ));
        }
    }
    Ok(out)
}

/// Network-predicted warp metrics over held-out pairs. Frames are warped
/// untranslated; translation only feeds the networks.
pub fn evaluate_warp_metrics(nets: &NetworkSet, pairs: &[FramePair]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("evaluate_warp_metrics", "no pairs"));
    }
    let predictions = predict_pairs(nets, pairs)?;
    let rows = pairs
        .iter()
        .zip(&predictions)
        .map(|(p, (dt, dt1, pose))| pair_metrics(p.id, &p.image_t, &p.image_t1, dt, dt1, pose, &p.intrinsics))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_rows(rows))
}

/// The same metrics with ground-truth depth and pose in place of the networks.
pub fn evaluate_oracle_metrics(pairs: &[FramePair]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("evaluate_oracle_metrics", "no pairs"));
    }
    let rows = pairs
        .iter()
        .map(|p| pair_metrics(p.id, &p.image_t, &p.image_t1, &p.depth_t, &p.depth_t1, &p.relative_pose_gt, &p.intrinsics))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_rows(rows))
}

/// `(mean absolute error, RMSE)` over all pixels of matching tensors.
pub fn depth_errors(pred: &[Tensor], gt: &[Tensor]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid("depth_errors", format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        if p.shape() != g.shape() {
            return Err(Error::shape("depth_errors", format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
        for (a, b) in p.data().iter().zip(g.data()) {
            abs += (a - b).abs();
            sq += (a - b) * (a - b);
        }
        n += p.numel();
    }
    Ok((abs / n as f64, (sq / n as f64).sqrt()))
}

/// Depth error on synthetic frames in normalized depth units.
pub fn depth_metrics_synthetic(nets: &NetworkSet, samples: &[&SyntheticSample]) -> Result<(f64, f64)> {
    let cfg = *nets.config();
    let mut pred = Vec::with_capacity(samples.len());
    let mut gt = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(2 * EVAL_CHUNK) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let depth = nets.predict_depth(&Tensor::stack_batch(&images)?)?;
        for (i, s) in chunk.iter().enumerate() {
            pred.push(depth.batch_slice(i, 1)?.map(|d| cfg.normalize_depth(d)));
            gt.push(s.depth.map(|d| cfg.normalize_depth(d)));
        }
    }
    depth_errors(&pred, &gt)
}

/// Control points of a perceptually ordered dark-purple to yellow colormap.
const COLORMAP: [[f64; 3]; 6] = [
    [0.267, 0.005, 0.329],
    [0.253, 0.265, 0.530],
    [0.164, 0.471, 0.558],
    [0.135, 0.659, 0.518],
    [0.478, 0.821, 0.318],
    [0.993, 0.906, 0.144],
];

/// Colormap lookup for `t` in `[0, 1]`; luminance increases with `t`.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (COLORMAP.len() - 1) as f64;
    let i = (x.floor() as usize).min(COLORMAP.len() - 2);
    let f = x - i as f64;
    let (a, b) = (COLORMAP[i], COLORMAP[i + 1]);
    [0, 1, 2].map(|c| a[c] + f * (b[c] - a[c]))
}

/// Output of [`emit_difference_map`].
#[derive(Clone, Debug, PartialEq)]
pub struct DifferenceMap {
    /// `[1, 1, H, W]` mean absolute channel difference `|G(x) − x|`.
    pub difference: Tensor,
    pub max: f64,
    pub png_path: PathBuf,
    pub pfm_path: PathBuf,
}

/// Writes a three-panel PNG (input, translation, colormapped difference
/// scaled to its maximum) to `out_png` and the raw difference as PFM next
/// to it.
pub fn emit_difference_map(nets: &NetworkSet, image: &Tensor, out_png: &Path) -> Result<DifferenceMap> {
    let [n, c, h, w] = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape("emit_difference_map", format!("need [1, 3, H, W], got {:?}", image.shape())));
    }
    let tape = Tape::new();
    let g = nets.generator.bind(&tape, false);
    let translated = g.translate(tape.constant(image.clone()))?.value();
    let plane = h * w;
    let difference = Tensor::from_fn([1, 1, h, w], |p| {
        (0..3).map(|ch| (translated.data()[ch * plane + p] - image.data()[ch * plane + p]).abs()).sum::<f64>() / 3.0
    });
    let max = difference.data().iter().copied().fold(0.0, f64::max);
    let panel_w = 3 * w;
    let canvas = Tensor::from_fn([1, 3, h, panel_w], |i| {
        let (ch, rest) = (i / (h * panel_w), i % (h * panel_w));
        let (y, xx) = (rest / panel_w, rest % panel_w);
        let (panel, x) = (xx / w, xx % w);
        let p = y * w + x;
        match panel {
            0 => image.data()[ch * plane + p],
            1 => translated.data()[ch * plane + p],
            _ => {
                let t = if max > 0.0 { difference.data()[p] / max } else { 0.0 };
                colormap(t)[ch]
            }
        }
    });
    let pfm_path = out_png.with_extension("pfm");
    write_file(out_png, &encode_png(&canvas)?)?;
    write_file(&pfm_path, &encode_pfm(&difference)?)?;
    Ok(DifferenceMap {
        difference,
        max,
        png_path: out_png.to_path_buf(),
        pfm_path,
    })
}
