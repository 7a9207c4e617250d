//! Audio embedding store, exact top-k retrieval and evaluation metrics.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub const STORE_MAGIC: &[u8; 4] = b"AVE1";
/// Largest tolerated deviation from unit norm for stored embeddings.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum RecommendError {
    #[error("embedding store is empty")]
    EmptyStore,
    #[error("k = {k} is outside 1..={size} (store size {size})")]
    BadK { k: usize, size: usize },
    #[error("duplicate sample label `{0}`")]
    DuplicateLabel(String),
    #[error("embedding of `{label}` has {got} values, store holds {want}-dim embeddings")]
    Dim { label: String, got: usize, want: usize },
    #[error("embedding of `{label}` has norm {norm}, expected 1")]
    NotUnit { label: String, norm: f64 },
    #[error("{path}: {msg}")]
    File { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEntry {
    pub sample_label: String,
    pub category_label: String,
    pub embedding: Vec<f32>,
}

/// Immutable-after-build list of labelled audio embeddings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entries: Vec<CatalogEntry>,
    labels: HashSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recommendation {
    pub sample_label: String,
    pub category_label: String,
    pub distance: f64,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

pub fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn add(&mut self, entry: CatalogEntry) -> Result<(), RecommendError> {
        if entry.embedding.len() != self.dim {
            return Err(RecommendError::Dim {
                label: entry.sample_label,
                got: entry.embedding.len(),
                want: self.dim,
            });
        }
        let n = norm(&entry.embedding);
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(RecommendError::NotUnit {
                label: entry.sample_label,
                norm: n,
            });
        }
        if !self.labels.insert(entry.sample_label.clone()) {
            return Err(RecommendError::DuplicateLabel(entry.sample_label));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// The `k` nearest entries by Euclidean distance, ties broken by sample label.
    pub fn topk(&self, query: &[f32], k: usize) -> Result<Vec<Recommendation>, RecommendError> {
        if self.entries.is_empty() {
            return Err(RecommendError::EmptyStore);
        }
        if k == 0 || k > self.entries.len() {
            return Err(RecommendError::BadK {
                k,
                size: self.entries.len(),
            });
        }
        if query.len() != self.dim {
            return Err(RecommendError::Dim {
                label: "<query>".into(),
                got: query.len(),
                want: self.dim,
            });
        }
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (distance(query, &e.embedding), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.total_cmp(&b.0)
                .then_with(|| self.entries[a.1].sample_label.cmp(&self.entries[b.1].sample_label))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(d, i)| Recommendation {
                sample_label: self.entries[i].sample_label.clone(),
                category_label: self.entries[i].category_label.clone(),
                distance: d,
            })
            .collect())
    }

    /// `AVE1 | count u32 | dim u32 | entries…`, each entry being the sample and
    /// category labels as u32-length-prefixed UTF-8 followed by `dim` LE f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(STORE_MAGIC);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for e in &self.entries {
            for s in [&e.sample_label, &e.category_label] {
                buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
                buf.extend_from_slice(s.as_bytes());
            }
            for v in &e.embedding {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8], String> {
            let end = pos + n;
            if end > bytes.len() {
                return Err(format!("truncated at byte {pos}"));
            }
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4)? != STORE_MAGIC {
            return Err("missing AVE1 magic".into());
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let count = u32_at(take(4)?);
        let dim = u32_at(take(4)?);
        let mut store = EmbeddingStore::new(dim);
        for _ in 0..count {
            let mut text = || -> Result<String, String> {
                let n = u32_at(take(4)?);
                String::from_utf8(take(n)?.to_vec()).map_err(|_| "label is not UTF-8".to_string())
            };
            let sample_label = text()?;
            let category_label = text()?;
            let embedding = take(4 * dim)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            store
                .add(CatalogEntry {
                    sample_label,
                    category_label,
                    embedding,
                })
                .map_err(|e| e.to_string())?;
        }
        if take(1).is_ok() {
            return Err("trailing bytes after the last entry".into());
        }
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<(), RecommendError> {
        fs::write(path, self.to_bytes()).map_err(|e| RecommendError::File {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self, RecommendError> {
        let err = |msg: String| RecommendError::File {
            path: path.to_path_buf(),
            msg,
        };
        let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
        EmbeddingStore::from_bytes(&bytes).map_err(err)
    }
}

/// Ground-truth labels of one query frame.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth {
    pub samples: BTreeSet<String>,
    pub categories: BTreeSet<String>,
}

pub fn sample_level_match(recs: &[Recommendation], gt: &GroundTruth) -> bool {
    recs.iter().any(|r| gt.samples.contains(&r.sample_label))
}

pub fn category_level_match(recs: &[Recommendation], gt: &GroundTruth) -> bool {
    recs.iter().any(|r| gt.categories.contains(&r.category_label))
}

/// `100 · hits / total` rounded to one decimal.
pub fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (1000.0 * hits as f64 / total as f64).round() / 10.0
}

/// Query frame with its embedding and ground truth.
#[derive(Debug, Clone)]
pub struct Query {
    pub frame: String,
    pub embedding: Vec<f32>,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameResult {
    pub frame: String,
    pub sample_match: bool,
    pub category_match: bool,
    pub recommended: Vec<Recommendation>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecommendationReport {
    pub k: usize,
    pub frames: usize,
    pub sample_accuracy: f64,
    pub category_accuracy: f64,
    pub per_frame: Vec<FrameResult>,
}

pub fn recommendation_accuracy(
    queries: &[Query],
    store: &EmbeddingStore,
    k: usize,
) -> Result<RecommendationReport, RecommendError> {
    let mut per_frame = Vec::with_capacity(queries.len());
    let (mut s_hits, mut c_hits) = (0, 0);
    for q in queries {
        let recs = store.topk(&q.embedding, k)?;
        let sample_match = sample_level_match(&recs, &q.truth);
        let category_match = category_level_match(&recs, &q.truth);
        s_hits += sample_match as usize;
        c_hits += category_match as usize;
        per_frame.push(FrameResult {
            frame: q.frame.clone(),
            sample_match,
            category_match,
            recommended: recs,
        });
    }
    Ok(RecommendationReport {
        k,
        frames: queries.len(),
        sample_accuracy: percent(s_hits, queries.len()),
        category_accuracy: percent(c_hits, queries.len()),
        per_frame,
    })
}

/// Percentage of pairs whose predicted class (argmax of `[logit, 0]`, ties to the
/// correlated class) equals the label.
pub fn correlation_accuracy(logits: &[f64], labels: &[u8]) -> f64 {
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(&l, &y)| (l.partial_cmp(&0.0) != Some(Ordering::Less)) == (y == 1))
        .count();
    percent(hits, logits.len())
}
