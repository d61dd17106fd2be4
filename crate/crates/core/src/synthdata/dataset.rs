//! Writing and loading rendered corpora.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! synthetic/poses.txt   synthetic/images/NNNNNN.png   synthetic/depth/NNNNNN.pfm
//! real/poses.txt        real/images/NNNNNN.png        real/depth/NNNNNN.pfm
//! ```
//!
//! Poses are camera-to-world. Every file is listed in the manifest with its
//! SHA-256 digest and verified on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::{render_frame, SyntheticSample};
use super::scene::{SceneSpec, Style};
use super::trajectory::{generate_trajectory, relative_pose};
use crate::error::{Error, Result};
use crate::formats::{decode_pfm, decode_png, encode_pfm, encode_png, format_poses, parse_poses, PoseRecord};
use crate::geometry::{CameraIntrinsics, Pose6D};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub scene: SceneSpec,
    pub synthetic_count: usize,
    pub real_pairs: usize,
    pub heldout_fraction: f64,
    /// Horizontal field of view of the pinhole camera, in degrees.
    pub fov_degrees: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneSpec::default(),
            synthetic_count: 400,
            real_pairs: 400,
            heldout_fraction: 0.2,
            fov_degrees: 90.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let fail = |d: String| Err(Error::invalid("DatasetConfig", d));
        if self.synthetic_count < 2 || self.real_pairs < 2 {
            return fail("need at least 2 synthetic frames and 2 real pairs".into());
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return fail(format!("heldout_fraction {} outside (0, 1)", self.heldout_fraction));
        }
        if !(self.fov_degrees > 1.0 && self.fov_degrees < 170.0) {
            return fail(format!("fov_degrees {}", self.fov_degrees));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let r = self.scene.resolution;
        CameraIntrinsics::centered(r, r, self.fov_degrees.to_radians())
    }

    fn heldout_count(&self, n: usize) -> usize {
        ((n as f64 * self.heldout_fraction).round() as usize).clamp(1, n - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

/// Consecutive real frames forming one training or evaluation pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub id: usize,
    pub frame_t: usize,
    pub frame_t1: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub frames: usize,
    pub texture_seed: u64,
    pub trajectory_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub scene: SceneSpec,
    pub intrinsics: CameraIntrinsics,
    pub synthetic: DomainEntry,
    pub real: DomainEntry,
    /// Synthetic frame indices per split.
    pub synthetic_train: Vec<usize>,
    pub synthetic_heldout: Vec<usize>,
    pub pairs: Vec<PairEntry>,
    /// Relative path → lowercase hex SHA-256.
    pub checksums: BTreeMap<String, String>,
}

impl Manifest {
    /// Parses and structurally validates a manifest.
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::format("manifest", e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::format("manifest", d));
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported format_version {}", self.format_version));
        }
        self.scene.validate().map_err(|e| Error::format("manifest", e.to_string()))?;
        let k = CameraIntrinsics::new(self.intrinsics.fx, self.intrinsics.fy, self.intrinsics.cx, self.intrinsics.cy)
            .map_err(|e| Error::format("manifest", e.to_string()))?;
        k.validate_for(self.scene.resolution, self.scene.resolution)
            .map_err(|e| Error::format("manifest", e.to_string()))?;
        let syn = self.synthetic.frames;
        if self.synthetic_train.iter().chain(&self.synthetic_heldout).any(|&i| i >= syn) {
            return bad("synthetic split index out of range".into());
        }
        for p in &self.pairs {
            if p.frame_t >= self.real.frames || p.frame_t1 >= self.real.frames {
                return bad(format!("pair {} references a missing frame", p.id));
            }
        }
        Ok(())
    }

    pub fn pairs_in(&self, split: Split) -> Vec<PairEntry> {
        self.pairs.iter().copied().filter(|p| p.split == split).collect()
    }

    pub fn synthetic_in(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.synthetic_train,
            Split::Heldout => &self.synthetic_heldout,
        }
    }
}

/// Two consecutive real-style frames and their ground truth. Depths and the
/// relative pose serve as oracles only; training never reads them.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub id: usize,
    pub image_t: Tensor,
    pub image_t1: Tensor,
    pub depth_t: Tensor,
    pub depth_t1: Tensor,
    /// Motion taking frame-`t` camera coordinates to frame `t+1`.
    pub relative_pose_gt: Pose6D,
    pub intrinsics: CameraIntrinsics,
}

/// A corpus held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub synthetic: Vec<SyntheticSample>,
    pub real: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        self.manifest.intrinsics
    }

    pub fn frame_pair(&self, entry: &PairEntry) -> FramePair {
        let (a, b) = (&self.real[entry.frame_t], &self.real[entry.frame_t1]);
        FramePair {
            id: entry.id,
            image_t: a.image.clone(),
            image_t1: b.image.clone(),
            depth_t: a.depth.clone(),
            depth_t1: b.depth.clone(),
            relative_pose_gt: relative_pose(&a.camera_to_world(), &b.camera_to_world()),
            intrinsics: self.manifest.intrinsics,
        }
    }

    pub fn pairs(&self, split: Split) -> Vec<FramePair> {
        self.manifest.pairs_in(split).iter().map(|e| self.frame_pair(e)).collect()
    }

    pub fn synthetic_samples(&self, split: Split) -> Vec<&SyntheticSample> {
        self.manifest.synthetic_in(split).iter().map(|&i| &self.synthetic[i]).collect()
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut x = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03);
    x ^= x >> 29;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^ (x >> 32)
}

fn render_domain(scene: &SceneSpec, n: usize, trajectory_seed: u64, k: &CameraIntrinsics) -> Result<Vec<SyntheticSample>> {
    let poses = generate_trajectory(scene, n, trajectory_seed)?;
    poses.iter().map(|p| render_frame(scene, p, k)).collect()
}

/// Renders a corpus in memory.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let k = cfg.intrinsics()?;
    let synthetic = DomainEntry {
        frames: cfg.synthetic_count,
        texture_seed: cfg.scene.texture_seed ^ derive_seed(cfg.seed, 1),
        trajectory_seed: derive_seed(cfg.seed, 2),
    };
    let real = DomainEntry {
        frames: cfg.real_pairs + 2,
        texture_seed: cfg.scene.texture_seed ^ derive_seed(cfg.seed, 3),
        trajectory_seed: derive_seed(cfg.seed, 4),
    };
    let syn_scene = SceneSpec {
        texture_seed: synthetic.texture_seed,
        style: Style::Synthetic,
        ..cfg.scene
    };
    let real_scene = SceneSpec {
        texture_seed: real.texture_seed,
        style: Style::Real,
        ..cfg.scene
    };
    let syn_frames = render_domain(&syn_scene, synthetic.frames, synthetic.trajectory_seed, &k)?;
    let real_frames = render_domain(&real_scene, real.frames, real.trajectory_seed, &k)?;

    let syn_held = cfg.heldout_count(cfg.synthetic_count);
    let syn_train = cfg.synthetic_count - syn_held;
    let pair_held = cfg.heldout_count(cfg.real_pairs);
    let pair_train = cfg.real_pairs - pair_held;
    // Held-out pairs skip one frame so no frame is shared with training.
    let pairs = (0..cfg.real_pairs)
        .map(|id| {
            let (start, split) = if id < pair_train { (id, Split::Train) } else { (id + 1, Split::Heldout) };
            PairEntry {
                id,
                frame_t: start,
                frame_t1: start + 1,
                split,
            }
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: cfg.seed,
        scene: cfg.scene,
        intrinsics: k,
        synthetic,
        real,
        synthetic_train: (0..syn_train).collect(),
        synthetic_heldout: (syn_train..cfg.synthetic_count).collect(),
        pairs,
        checksums: BTreeMap::new(),
    };
    Ok(Dataset {
        manifest,
        synthetic: syn_frames,
        real: real_frames,
    })
}

fn write_file(root: &Path, rel: &str, bytes: &[u8], sums: &mut BTreeMap<String, String>) -> Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    sums.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
    Ok(())
}

fn domain_dir(style: Style) -> &'static str {
    match style {
        Style::Synthetic => "synthetic",
        Style::Real => "real",
    }
}

/// Writes `dataset` under `dir`, filling in the manifest checksums.
pub fn write_dataset(dataset: &mut Dataset, dir: &Path) -> Result<()> {
    let mut sums = BTreeMap::new();
    for (style, frames) in [(Style::Synthetic, &dataset.synthetic), (Style::Real, &dataset.real)] {
        let d = domain_dir(style);
        let mut records = Vec::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            write_file(dir, &format!("{d}/images/{i:06}.png"), &encode_png(&f.image)?, &mut sums)?;
            write_file(dir, &format!("{d}/depth/{i:06}.pfm"), &encode_pfm(&f.depth)?, &mut sums)?;
            records.push(PoseRecord {
                frame: i,
                pose: f.pose,
            });
        }
        write_file(dir, &format!("{d}/poses.txt"), format_poses(&records).as_bytes(), &mut sums)?;
    }
    dataset.manifest.checksums = sums;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, dataset.manifest.to_json()).map_err(|e| Error::io(&path, e))
}

/// Renders a corpus and writes it to `dir`.
pub fn make_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<Dataset> {
    let mut ds = generate_dataset(cfg)?;
    write_dataset(&mut ds, dir)?;
    Ok(ds)
}

fn read_checked(root: &Path, rel: &str, manifest: &Manifest) -> Result<Vec<u8>> {
    let path = root.join(rel);
    let expected = manifest
        .checksums
        .get(rel)
        .ok_or_else(|| Error::format("manifest", format!("no checksum for {rel}")))?;
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if &hex::encode(Sha256::digest(&bytes)) != expected {
        return Err(Error::Checksum { path });
    }
    Ok(bytes)
}

fn load_domain(root: &Path, manifest: &Manifest, style: Style, frames: usize) -> Result<Vec<SyntheticSample>> {
    let d = domain_dir(style);
    let poses_text = String::from_utf8(read_checked(root, &format!("{d}/poses.txt"), manifest)?)
        .map_err(|_| Error::format("pose file", "not UTF-8"))?;
    let records = parse_poses(&poses_text)?;
    if records.len() != frames || records.iter().enumerate().any(|(i, r)| r.frame != i) {
        return Err(Error::format("pose file", format!("{d}/poses.txt must list frames 0..{frames} in order")));
    }
    let res = manifest.scene.resolution;
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let image = decode_png(&read_checked(root, &format!("{d}/images/{i:06}.png"), manifest)?)?;
            let depth = decode_pfm(&read_checked(root, &format!("{d}/depth/{i:06}.pfm"), manifest)?)?;
            if image.shape() != [1, 3, res, res] || depth.shape() != [1, 1, res, res] {
                return Err(Error::format("dataset", format!("frame {d}/{i} does not match resolution {res}")));
            }
            Ok(SyntheticSample {
                image,
                depth,
                pose: rec.pose,
            })
        })
        .collect()
}

/// Loads and verifies a dataset written by [`make_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = Manifest::from_json(&text)?;
    let synthetic = load_domain(dir, &manifest, Style::Synthetic, manifest.synthetic.frames)?;
    let real = load_domain(dir, &manifest, Style::Real, manifest.real.frames)?;
    Ok(Dataset {
        manifest,
        synthetic,
        real,
    })
}
