//! Procedural two-domain data: a ray-marched tube with ground-truth depth and
//! poses, rendered in a clean synthetic style and an artifact-rich real style.

mod dataset;
mod render;
mod scene;
mod trajectory;

pub use dataset::{
    generate_dataset, load_dataset, make_dataset, write_dataset, Dataset, DatasetConfig, DomainEntry, FramePair,
    Manifest, PairEntry, Split, FORMAT_VERSION, MANIFEST_FILE,
};
pub use render::{quantize_u8, render_frame, SyntheticSample};
pub use scene::{SceneSpec, Style};
pub use trajectory::{generate_trajectory, relative_pose, FORWARD_STEP};
