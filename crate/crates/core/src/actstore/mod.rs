//! Activation-dump file format, token masks, and corpus manifests.

pub mod container;
mod dump;
mod manifest;

pub use container::{read_tensor, write_tensor, TensorHeader};
pub use dump::{
    prefix_noise, read_dump, shared_prefix_length, write_dump, ActivationDump, Condition,
    PrefixNoiseReport, SharedPrefix, TokenSpan,
};
pub use manifest::{sha256_hex, CorpusManifest, ManifestEntry};
