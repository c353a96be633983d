//! Feature files, split manifests and the synthetic video generator.

pub mod manifest;
pub mod sfb;
pub mod synthetic;

pub use manifest::{load_dataset, Dataset, Split, SplitManifest};
pub use sfb::{decode_sfb, encode_sfb, read_sfb, write_sfb, FeatureSequence};
pub use synthetic::{generate_synthetic, write_dataset, SyntheticDataset, SyntheticSpec, MANIFEST_FILE};
