use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::segment::read_segment_header;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Option<i64>,
    pub source: String,
    pub split: Option<Split>,
}

/// Ordered segment list with per-source sampling weights.
///
/// On disk this is a tab-separated file, one `path, label, source[, split]`
/// record per line with the label column possibly empty. Lines of the form
/// `#weight <tab> source <tab> value` set a source weight (default 1);
/// other lines starting with `#` are comments. Relative paths are resolved
/// against the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    entries: Vec<ManifestEntry>,
    weights: BTreeMap<String, f64>,
}

impl CorpusManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        CorpusManifest {
            entries,
            weights: BTreeMap::new(),
        }
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Source tags in order of first appearance.
    pub fn sources(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.source) {
                out.push(e.source.clone());
            }
        }
        out
    }

    pub fn weight(&self, source: &str) -> f64 {
        self.weights.get(source).copied().unwrap_or(1.0)
    }

    pub fn set_weight(&mut self, source: impl Into<String>, weight: f64) -> Result<()> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::Param(format!("sampling weight {weight} must be finite and non-negative")));
        }
        self.weights.insert(source.into(), weight);
        Ok(())
    }

    pub fn with_split(&self, split: Split) -> CorpusManifest {
        CorpusManifest {
            entries: self.entries.iter().filter(|e| e.split == Some(split)).cloned().collect(),
            weights: self.weights.clone(),
        }
    }

    /// Checks the weight invariant and that every file has a valid header.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Data("manifest lists no segments".into()));
        }
        if self.sources().iter().all(|s| self.weight(s) == 0.0) {
            return Err(Error::Data("all source weights are zero".into()));
        }
        for e in &self.entries {
            read_segment_header(&e.path)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let m = Self::parse(&text, base, path)?;
        m.validate()?;
        Ok(m)
    }

    fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::format(origin, format!("line {line}: {msg}"));
        let mut m = CorpusManifest::new(Vec::new());
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols[0] == "#weight" {
                if cols.len() != 3 {
                    return Err(bad(lineno, "weight directive needs a source and a value".into()));
                }
                let w: f64 = cols[2]
                    .trim()
                    .parse()
                    .map_err(|_| bad(lineno, format!("weight {:?} is not a number", cols[2])))?;
                m.set_weight(cols[1], w).map_err(|e| bad(lineno, e.to_string()))?;
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            if !(3..=4).contains(&cols.len()) {
                return Err(bad(lineno, format!("expected 3 or 4 columns, found {}", cols.len())));
            }
            let label = match cols[1].trim() {
                "" => None,
                s => Some(s.parse().map_err(|_| bad(lineno, format!("label {s:?} is not an integer")))?),
            };
            let source = cols[2].trim();
            if source.is_empty() {
                return Err(bad(lineno, "empty source tag".into()));
            }
            let split = match cols.get(3).map(|s| s.trim()) {
                None | Some("") => None,
                Some(s) => Some(s.parse().map_err(|e: Error| bad(lineno, e.to_string()))?),
            };
            let p = Path::new(cols[0]);
            m.entries.push(ManifestEntry {
                path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
                label,
                source: source.to_string(),
                split,
            });
        }
        Ok(m)
    }

    /// Renders the manifest with paths relative to `base` where possible.
    pub fn to_tsv(&self, base: &Path) -> String {
        let mut out = String::new();
        for (source, w) in &self.weights {
            out.push_str(&format!("#weight\t{source}\t{w}\n"));
        }
        let labeled = self.entries.iter().any(|e| e.split.is_some());
        for e in &self.entries {
            let p = e.path.strip_prefix(base).unwrap_or(&e.path);
            let label = e.label.map(|l| l.to_string()).unwrap_or_default();
            out.push_str(&format!("{}\t{label}\t{}", p.display(), e.source));
            if labeled {
                out.push('\t');
                if let Some(s) = e.split {
                    out.push_str(&s.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        fs::write(path, self.to_tsv(base)).map_err(|e| Error::io(path, e))
    }
}

/// Deterministic weighted draws over items tagged with a source.
///
/// A draw first picks a source with probability proportional to its
/// weight, then an item uniformly within it. Batch `step` depends only on
/// `(seed, step)`, never on what was drawn before.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    seed: u64,
    by_source: Vec<Vec<usize>>,
    source_names: Vec<String>,
    dist: WeightedIndex<f64>,
}

impl BatchSampler {
    pub fn new(item_sources: &[String], weight: impl Fn(&str) -> f64, seed: u64) -> Result<Self> {
        let mut source_names: Vec<String> = Vec::new();
        let mut by_source: Vec<Vec<usize>> = Vec::new();
        for (i, s) in item_sources.iter().enumerate() {
            match source_names.iter().position(|n| n == s) {
                Some(k) => by_source[k].push(i),
                None => {
                    source_names.push(s.clone());
                    by_source.push(vec![i]);
                }
            }
        }
        let weights: Vec<f64> = source_names.iter().map(|s| weight(s)).collect();
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Param("sampling weights must be finite and non-negative".into()));
        }
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::Data(format!("cannot sample from sources: {e}")))?;
        Ok(BatchSampler {
            seed,
            by_source,
            source_names,
            dist,
        })
    }

    pub fn for_manifest(m: &CorpusManifest, seed: u64) -> Result<Self> {
        let tags: Vec<String> = m.entries().iter().map(|e| e.source.clone()).collect();
        Self::new(&tags, |s| m.weight(s), seed)
    }

    pub fn source_names(&self) -> &[String] {
        &self.source_names
    }

    /// Item indices of batch `step`.
    pub fn batch(&self, step: u64, size: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        (0..size)
            .map(|_| {
                let items = &self.by_source[self.dist.sample(&mut rng)];
                items[rng.random_range(0..items.len())]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::segment::{write_segment, EEGSegment};

    fn write_tiny(dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        write_segment(&EEGSegment::new(1, 100.0, vec![0.5; 4]).unwrap(), &p).unwrap();
        p
    }

    #[test]
    fn save_load_round_trip_with_weights_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ManifestEntry { path: write_tiny(dir.path(), "a.trce"), label: Some(2), source: "x".into(), split: Some(Split::Train) },
            ManifestEntry { path: write_tiny(dir.path(), "b.trce"), label: None, source: "y".into(), split: Some(Split::Test) },
        ];
        let mut m = CorpusManifest::new(entries);
        m.set_weight("y", 0.25).unwrap();
        let path = dir.path().join("m.tsv");
        m.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("a.trce\t2\tx\ttrain\n"), "{text}");
        let back = CorpusManifest::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.with_split(Split::Test).len(), 1);
    }

    #[test]
    fn missing_file_and_bad_lines_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "nope.trce\t\tsrc\n").unwrap();
        assert!(matches!(CorpusManifest::load(&path), Err(Error::Io { .. })));
        fs::write(&path, "a\tb\n").unwrap();
        assert!(matches!(CorpusManifest::load(&path), Err(Error::Format { .. })));
        write_tiny(dir.path(), "a.trce");
        fs::write(&path, "#weight\tsrc\t0\na.trce\t\tsrc\n").unwrap();
        assert!(matches!(CorpusManifest::load(&path), Err(Error::Data(_))));
        fs::write(&path, "#weight\tsrc\t-1\na.trce\t\tsrc\n").unwrap();
        assert!(CorpusManifest::load(&path).is_err());
    }

    #[test]
    fn source_frequencies_follow_weights() {
        let mut tags = vec!["a".to_string(); 7];
        tags.extend(vec!["b".to_string(); 50]);
        tags.extend(vec!["c".to_string(); 3]);
        let w = |s: &str| match s {
            "a" => 3.0,
            "b" => 1.0,
            _ => 1.0,
        };
        let sampler = BatchSampler::new(&tags, w, 11).unwrap();
        let mut counts = BTreeMap::new();
        for step in 0..625 {
            for i in sampler.batch(step, 16) {
                *counts.entry(tags[i].clone()).or_insert(0usize) += 1;
            }
        }
        let total = 10_000.0;
        for (s, target) in [("a", 0.6), ("b", 0.2), ("c", 0.2)] {
            let f = counts[s] as f64 / total;
            assert!((f - target).abs() < 0.02, "{s}: {f}");
        }
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        let tags: Vec<String> = (0..20).map(|i| format!("s{}", i % 3)).collect();
        let a = BatchSampler::new(&tags, |_| 1.0, 5).unwrap();
        let b = BatchSampler::new(&tags, |_| 1.0, 5).unwrap();
        let _ = a.batch(0, 8);
        assert_eq!(a.batch(9, 8), b.batch(9, 8));
        assert_ne!(a.batch(9, 8), a.batch(10, 8));
    }
}
