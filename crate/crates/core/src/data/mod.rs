//! Dataset ingestion, synthetic domains, splitting and letterboxing.

mod boxes;
mod image;
mod io;
mod letterbox;
mod split;
mod synth;

pub use self::boxes::BoundingBox;
pub use self::image::{LabeledImage, Pixels};
pub use self::io::{
    format_labels, load_all, load_box_dataset, parse_labels, write_box_dataset, DirSource,
    GuardedSource, ImageSource, MemorySource,
};
pub use self::letterbox::{letterbox_resize, letterbox_with_transform, Letterbox, PAD_VALUE};
pub use self::split::{split_dataset, split_indices, DatasetSplit};
pub use self::synth::{
    generate_synthetic_domain, Complexity, DomainProfile, GeneratedDomain, MAX_CRATER_OVERLAP,
    RIM_FACTOR,
};
