//! Routing statistics, per-dataset top-K expert sets and their Jaccard
//! overlap, with CSV export.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::autodiff::top_k_indices;
use crate::backbone::RoutingRecord;
use crate::error::{Error, Result};

/// How experts are ranked when extracting a dataset's top-K set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RankBy {
    #[default]
    MeanGate,
    Frequency,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRouting {
    pub decisions: usize,
    pub frequency: Vec<f64>,
    pub mean_gate: Vec<f64>,
    pub top: Vec<usize>,
}

/// Routing pooled over layers, decisions and samples.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingSummary {
    pub experts: usize,
    pub k: usize,
    pub decisions: usize,
    /// Fraction of decisions selecting each expert; sums to `k`.
    pub frequency: Vec<f64>,
    /// Mean top-K gate per expert; sums to 1.
    pub mean_gate: Vec<f64>,
    pub datasets: BTreeMap<String, DatasetRouting>,
}

#[derive(Clone, Debug, Default)]
struct Acc {
    decisions: usize,
    counts: Vec<u64>,
    gates: Vec<f64>,
}

impl Acc {
    fn new(n: usize) -> Self {
        Acc {
            decisions: 0,
            counts: vec![0; n],
            gates: vec![0.0; n],
        }
    }

    fn frequency(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.decisions as f64).collect()
    }

    fn mean_gate(&self) -> Vec<f64> {
        self.gates.iter().map(|&g| g / self.decisions as f64).collect()
    }
}

/// Summarises `(dataset tag, record)` pairs. All records must share the
/// expert count and top-K width.
pub fn routing_stats<'a>(
    records: impl IntoIterator<Item = (&'a str, &'a RoutingRecord)>,
    rank_by: RankBy,
) -> Result<RoutingSummary> {
    let mut geometry: Option<(usize, usize)> = None;
    let mut total = Acc::default();
    let mut per: BTreeMap<String, Acc> = BTreeMap::new();
    for (tag, rec) in records {
        for layer in &rec.layers {
            let g = (layer.experts, layer.k);
            match geometry {
                None => {
                    geometry = Some(g);
                    total = Acc::new(g.0);
                }
                Some(prev) if prev != g => {
                    return Err(Error::Data(format!("routing records mix (N, K) = {prev:?} and {g:?}")));
                }
                _ => {}
            }
            let acc = per.entry(tag.to_string()).or_insert_with(|| Acc::new(g.0));
            for d in 0..layer.decisions {
                for a in [&mut total, &mut *acc] {
                    a.decisions += 1;
                    for &e in layer.selected_at(d) {
                        a.counts[e] += 1;
                    }
                    for (s, &v) in a.gates.iter_mut().zip(layer.gates_at(d)) {
                        *s += v;
                    }
                }
            }
        }
    }
    let Some((experts, k)) = geometry else {
        return Err(Error::Data("no routed layers in the record stream".into()));
    };
    let datasets = per
        .into_iter()
        .map(|(tag, a)| {
            let (frequency, mean_gate) = (a.frequency(), a.mean_gate());
            let key = match rank_by {
                RankBy::MeanGate => &mean_gate,
                RankBy::Frequency => &frequency,
            };
            let top = top_k_indices(key, k);
            (
                tag,
                DatasetRouting {
                    decisions: a.decisions,
                    frequency,
                    mean_gate,
                    top,
                },
            )
        })
        .collect();
    Ok(RoutingSummary {
        experts,
        k,
        decisions: total.decisions,
        frequency: total.frequency(),
        mean_gate: total.mean_gate(),
        datasets,
    })
}

impl RoutingSummary {
    pub fn top_sets(&self) -> Vec<Vec<usize>> {
        self.datasets.values().map(|d| d.top.clone()).collect()
    }

    /// Largest selection share `max_k f_k / K`; 1/N when balanced, 1/K
    /// when routing has collapsed onto K experts.
    pub fn max_share(&self) -> f64 {
        self.frequency.iter().fold(0.0f64, |m, &f| m.max(f)) / self.k as f64
    }

    /// Entropy of the selection shares `f_k / K`, in nats.
    pub fn usage_entropy(&self) -> f64 {
        usage_entropy(&self.frequency, self.k)
    }

    pub fn dead_experts(&self) -> usize {
        self.frequency.iter().filter(|&&f| f == 0.0).count()
    }
}

/// Entropy of `f_k / K`, in nats.
pub fn usage_entropy(frequency: &[f64], k: usize) -> f64 {
    frequency
        .iter()
        .map(|&f| f / k as f64)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct JaccardMatrix {
    pub matrix: Vec<Vec<f64>>,
    /// Mean over pairs `i < j`.
    pub mean: f64,
}

pub fn jaccard_overlap(sets: &[Vec<usize>]) -> Result<JaccardMatrix> {
    if sets.len() < 2 {
        return Err(Error::Param("Jaccard overlap needs at least two sets".into()));
    }
    if sets.iter().any(|s| s.is_empty()) {
        return Err(Error::Param("Jaccard overlap of an empty set".into()));
    }
    let m = sets.len();
    let matrix: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| if i == j { 1.0 } else { jaccard(&sets[i], &sets[j]) }).collect())
        .collect();
    let mut sum = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            sum += matrix[i][j];
        }
    }
    Ok(JaccardMatrix {
        mean: sum / (m * (m - 1) / 2) as f64,
        matrix,
    })
}

/// Experts present in at least `m` of `sets`, ascending.
pub fn experts_in_at_least(sets: &[Vec<usize>], m: usize) -> Vec<usize> {
    let mut count: BTreeMap<usize, usize> = BTreeMap::new();
    for s in sets {
        for e in s.iter().collect::<BTreeSet<_>>() {
            *count.entry(*e).or_default() += 1;
        }
    }
    count.into_iter().filter(|&(_, c)| c >= m).map(|(e, _)| e).collect()
}

/// Experts present in every set.
pub fn universal_experts(sets: &[Vec<usize>]) -> Vec<usize> {
    experts_in_at_least(sets, sets.len())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// One row per expert: `expert,f_k,mean_gate`. Values use the shortest
/// representation that parses back to the same float.
pub fn write_expert_csv(s: &RoutingSummary, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["expert", "f_k", "mean_gate"]).map_err(|e| csv_err(path, e))?;
    for e in 0..s.experts {
        w.write_record([e.to_string(), s.frequency[e].to_string(), s.mean_gate[e].to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rows of `(expert, f_k, mean_gate)`.
pub fn read_expert_csv(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec.map_err(|e| csv_err(path, e))?);
    }
    Ok(out)
}

/// One row per dataset and rank: `dataset,rank,expert,mean_gate,f_k`.
pub fn write_top_sets_csv(s: &RoutingSummary, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["dataset", "rank", "expert", "mean_gate", "f_k"]).map_err(|e| csv_err(path, e))?;
    for (tag, d) in &s.datasets {
        for (rank, &e) in d.top.iter().enumerate() {
            w.write_record([
                tag.clone(),
                rank.to_string(),
                e.to_string(),
                d.mean_gate[e].to_string(),
                d.frequency[e].to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Square matrix with a leading `set` column naming each row.
pub fn write_jaccard_csv(names: &[String], j: &JaccardMatrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["set".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (name, row) in names.iter().zip(&j.matrix) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
