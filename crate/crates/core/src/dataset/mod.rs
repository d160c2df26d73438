//! Synthetic CSS scenes: a 3×3 grid of objects with color, shape and size,
//! a templated edit grammar, flat 2D rendering, and train/test manifests
//! drawn under different shape-color tables.

mod grammar;
mod manifest;
mod render;
mod scene;

pub use grammar::{
    apply_modification, reachable_in_one_step, sample_modification, viable_kinds, ChangeValue, Modification,
    ModificationKind, Selector,
};
pub use manifest::{build_dataset, build_split, DatasetConfig, DatasetManifest, QueryRecord, Split, SplitData};
pub use render::{palette, render_2d, size_fraction, Image};
pub use scene::{generate_base_scenes, Color, Condition, ObjectSpec, Position, Scene, Shape, ShapeColorTable, Size};
