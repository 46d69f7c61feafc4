//! Synthetic corpora, the segment file format, preprocessing and windowing.

mod dataset;
pub mod filter;
pub mod manifest;
pub mod segment;
pub mod synth;
pub mod window;

pub use dataset::{load_windows, Window};
pub use filter::preprocess;
pub use manifest::{BatchSampler, CorpusManifest, ManifestEntry, Split};
pub use segment::{read_segment, read_segment_header, write_segment, EEGSegment, SegmentHeader};
pub use synth::{synth_corpus, Band, ClassRule, SynthSpec};
pub use window::window_standardize;
