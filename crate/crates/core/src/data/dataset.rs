use crate::data::manifest::{CorpusManifest, Split};
use crate::data::segment::{read_segment, EEGSegment};
use crate::data::window::window_standardize;
use crate::error::Result;
use crate::par;

/// A standardized training window with its manifest metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub segment: EEGSegment,
    pub source: String,
    pub label: Option<i64>,
    pub split: Option<Split>,
}

/// Reads every manifest entry and windows it, preserving manifest order.
pub fn load_windows(manifest: &CorpusManifest, window_s: f64, patch_len: usize) -> Result<Vec<Window>> {
    let per_entry = par::map(manifest.entries(), |e| -> Result<Vec<Window>> {
        let seg = read_segment(&e.path)?;
        Ok(window_standardize(&seg, window_s, patch_len)?
            .into_iter()
            .map(|segment| Window {
                segment,
                source: e.source.clone(),
                label: e.label,
                split: e.split,
            })
            .collect())
    });
    let mut out = Vec::new();
    for w in per_entry {
        out.extend(w?);
    }
    Ok(out)
}
