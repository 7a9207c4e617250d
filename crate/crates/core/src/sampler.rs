//! Manifests, correlated/uncorrelated pair construction and batching.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::gradcore::RngStream;

/// Minimum index gap for same-video negatives.
pub const MIN_TIME_GAP: usize = 2;
/// Random draws per contrastive batch before falling back to a greedy fill.
pub const MAX_BATCH_ATTEMPTS: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Unsatisfiable(String),
    #[error("{0}")]
    Invalid(String),
}

/// One video: frames at 1 fps and matching 1-second audio segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub frames: Vec<String>,
    pub audio_segments: Vec<String>,
}

impl ManifestEntry {
    /// Seconds with both a frame and an audio segment.
    pub fn seconds(&self) -> usize {
        self.frames.len().min(self.audio_segments.len())
    }
}

/// Parsed manifest; relative paths resolve against `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(root: PathBuf, entries: Vec<ManifestEntry>) -> Result<Self, SamplerError> {
        let mut ids = BTreeSet::new();
        for e in &entries {
            if e.frames.is_empty() || e.audio_segments.is_empty() {
                return Err(SamplerError::Invalid(format!(
                    "video `{}` has an empty frame or audio list",
                    e.video_id
                )));
            }
            if !ids.insert(e.video_id.as_str()) {
                return Err(SamplerError::Invalid(format!("duplicate video_id `{}`", e.video_id)));
            }
        }
        Ok(Manifest { root, entries })
    }

    pub fn read(path: &Path) -> Result<Self, SamplerError> {
        let text = fs::read_to_string(path).map_err(|source| SamplerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line).map_err(|e| SamplerError::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            entries.push(e);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::new(root, entries).map_err(|e| SamplerError::Manifest {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), SamplerError> {
        fs::write(path, self.to_jsonl()).map_err(|source| SamplerError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn frame_path(&self, r: SegmentRef) -> PathBuf {
        self.resolve(&self.entries[r.video].frames[r.second])
    }

    pub fn audio_path(&self, r: SegmentRef) -> PathBuf {
        self.resolve(&self.entries[r.video].audio_segments[r.second])
    }

    pub fn has_categories(&self) -> bool {
        self.entries.iter().all(|e| e.category.is_some())
    }

    /// Deterministic video-level split into `(held_out, rest)`: the held-out part is
    /// the first `round(n·fraction)` videos of a seeded shuffle, in manifest order.
    pub fn split(&self, fraction: f64, seed: u64) -> (Manifest, Manifest) {
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        RngStream::new(seed).shuffle(&mut order);
        let k = (self.entries.len() as f64 * fraction).round() as usize;
        let held: BTreeSet<usize> = order[..k].iter().copied().collect();
        let pick = |keep: bool| Manifest {
            root: self.root.clone(),
            entries: (0..self.entries.len())
                .filter(|i| held.contains(i) != keep)
                .map(|i| self.entries[i].clone())
                .collect(),
        };
        (pick(false), pick(true))
    }
}

/// A (video, second) position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentRef {
    pub video: usize,
    pub second: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Aligned,
    DiffLabel,
    DiffVideo,
    DiffTime,
}

/// Strategy for drawing uncorrelated audio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeStrategy {
    DiffLabel,
    DiffVideo,
    DiffTime,
}

impl NegativeStrategy {
    pub fn source(self) -> PairSource {
        match self {
            NegativeStrategy::DiffLabel => PairSource::DiffLabel,
            NegativeStrategy::DiffVideo => PairSource::DiffVideo,
            NegativeStrategy::DiffTime => PairSource::DiffTime,
        }
    }
}

impl fmt::Display for NegativeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativeStrategy::DiffLabel => "diff_label",
            NegativeStrategy::DiffVideo => "diff_video",
            NegativeStrategy::DiffTime => "diff_time",
        })
    }
}

impl FromStr for NegativeStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "diff_label" => Ok(NegativeStrategy::DiffLabel),
            "diff_video" => Ok(NegativeStrategy::DiffVideo),
            "diff_time" => Ok(NegativeStrategy::DiffTime),
            other => Err(format!(
                "expected one of [diff_label, diff_video, diff_time], got `{other}`"
            )),
        }
    }
}

/// One training example: a frame, an audio segment and whether they correspond.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairRecord {
    pub frame: SegmentRef,
    pub audio: SegmentRef,
    pub y: u8,
    pub source: PairSource,
}

/// Temporally aligned pairs, `per_video` distinct seconds from every video.
pub fn make_positive_pairs(manifest: &Manifest, per_video: usize, rng: &mut RngStream) -> Result<Vec<PairRecord>, SamplerError> {
    if per_video == 0 {
        return Err(SamplerError::Invalid("per_video must be at least 1".into()));
    }
    let mut out = Vec::new();
    for (v, e) in manifest.entries.iter().enumerate() {
        let n = e.seconds();
        for s in rng.sample_indices(n, per_video.min(n)) {
            let r = SegmentRef { video: v, second: s };
            out.push(PairRecord {
                frame: r,
                audio: r,
                y: 1,
                source: PairSource::Aligned,
            });
        }
    }
    Ok(out)
}

/// `count` uncorrelated pairs. Frames are drawn uniformly over all (video, second)
/// positions that admit a partner under `strategy`.
pub fn make_negative_pairs(
    manifest: &Manifest,
    strategy: NegativeStrategy,
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<PairRecord>, SamplerError> {
    let entries = &manifest.entries;
    let seconds: Vec<usize> = entries.iter().map(ManifestEntry::seconds).collect();
    // Videos whose frames can anchor a negative, and for each the audio candidates.
    let (anchors, partners): (Vec<usize>, Vec<Vec<usize>>) = match strategy {
        NegativeStrategy::DiffLabel => {
            if !manifest.has_categories() {
                return Err(SamplerError::Unsatisfiable(
                    "diff_label negatives need a category on every video".into(),
                ));
            }
            let mut by_cat: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, e) in entries.iter().enumerate() {
                by_cat.entry(e.category.as_deref().expect("checked")).or_default().push(i);
            }
            if by_cat.len() < 2 {
                let only = by_cat.keys().next().copied().unwrap_or("");
                return Err(SamplerError::Unsatisfiable(format!(
                    "diff_label negatives need two categories; manifest only has `{only}`"
                )));
            }
            let others: BTreeMap<&str, Vec<usize>> = by_cat
                .keys()
                .map(|&c| {
                    let rest = (0..entries.len())
                        .filter(|&i| entries[i].category.as_deref() != Some(c))
                        .collect();
                    (c, rest)
                })
                .collect();
            let partners = entries
                .iter()
                .map(|e| others[e.category.as_deref().expect("checked")].clone())
                .collect();
            ((0..entries.len()).collect(), partners)
        }
        NegativeStrategy::DiffVideo => {
            if entries.len() < 2 {
                return Err(SamplerError::Unsatisfiable(
                    "diff_video negatives need at least two videos".into(),
                ));
            }
            let partners = (0..entries.len())
                .map(|i| (0..entries.len()).filter(|&j| j != i).collect())
                .collect();
            ((0..entries.len()).collect(), partners)
        }
        NegativeStrategy::DiffTime => {
            let anchors: Vec<usize> = (0..entries.len())
                .filter(|&i| seconds[i] > MIN_TIME_GAP)
                .collect();
            if anchors.is_empty() {
                return Err(SamplerError::Unsatisfiable(format!(
                    "diff_time negatives need a video longer than {MIN_TIME_GAP} seconds"
                )));
            }
            let partners = (0..entries.len()).map(|i| vec![i]).collect();
            (anchors, partners)
        }
    };

    // Uniform over frame positions that have a partner.
    let valid = |v: usize, s: usize| match strategy {
        NegativeStrategy::DiffTime => s >= MIN_TIME_GAP || s + MIN_TIME_GAP < seconds[v],
        _ => true,
    };
    let positions: Vec<SegmentRef> = anchors
        .iter()
        .flat_map(|&v| (0..seconds[v]).map(move |s| SegmentRef { video: v, second: s }))
        .filter(|r| valid(r.video, r.second))
        .collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let frame = positions[rng.below(positions.len())];
        let (v, s) = (frame.video, frame.second);
        let audio = match strategy {
            NegativeStrategy::DiffTime => {
                let far: Vec<usize> = (0..seconds[v]).filter(|&j| j.abs_diff(s) >= MIN_TIME_GAP).collect();
                SegmentRef {
                    video: v,
                    second: far[rng.below(far.len())],
                }
            }
            _ => {
                let cands = &partners[v];
                let av = cands[rng.below(cands.len())];
                SegmentRef {
                    video: av,
                    second: rng.below(seconds[av]),
                }
            }
        };
        out.push(PairRecord {
            frame,
            audio,
            y: 0,
            source: strategy.source(),
        });
    }
    Ok(out)
}

/// Batches of `batch_size/2` positives and `batch_size/2` negatives, each batch
/// shuffled. The trailing partial batch is dropped.
pub fn balanced_batches(
    positives: &[PairRecord],
    negatives: &[PairRecord],
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<PairRecord>>, SamplerError> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(SamplerError::Invalid(format!(
            "balanced batches need an even positive batch size, got {batch_size}"
        )));
    }
    let half = batch_size / 2;
    let mut pos = positives.to_vec();
    let mut neg = negatives.to_vec();
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    let n = pos.len().min(neg.len()) / half;
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let mut batch: Vec<PairRecord> = pos[b * half..(b + 1) * half]
            .iter()
            .chain(&neg[b * half..(b + 1) * half])
            .copied()
            .collect();
        rng.shuffle(&mut batch);
        out.push(batch);
    }
    Ok(out)
}

fn batch_key(manifest: &Manifest, r: &PairRecord, by_category: bool) -> String {
    let e = &manifest.entries[r.frame.video];
    match (&e.category, by_category) {
        (Some(c), true) => c.clone(),
        _ => e.video_id.clone(),
    }
}

/// Batches of `n` aligned pairs with no shared category (or no shared video when
/// the manifest is unlabeled). Each batch is drawn at random from the remaining
/// pairs, up to [`MAX_BATCH_ATTEMPTS`] times, then filled greedily; the stream ends
/// once fewer than `n` distinct keys remain.
pub fn contrastive_batches(
    manifest: &Manifest,
    positives: &[PairRecord],
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<PairRecord>>, SamplerError> {
    if n < 2 {
        return Err(SamplerError::Invalid(format!("contrastive batches need N >= 2, got {n}")));
    }
    let by_category = manifest.has_categories();
    let keys: Vec<String> = positives.iter().map(|p| batch_key(manifest, p, by_category)).collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for k in &keys {
        *counts.entry(k.as_str()).or_default() += 1;
    }
    if counts.len() < n {
        let kind = if by_category { "categories" } else { "videos" };
        let (limiting, c) = counts
            .iter()
            .max_by_key(|(_, &c)| c)
            .map(|(k, c)| (k.to_string(), *c))
            .unwrap_or_default();
        return Err(SamplerError::Unsatisfiable(format!(
            "batch size {n} needs {n} distinct {kind}, only {} present; `{limiting}` alone holds {c} of {} pairs",
            counts.len(),
            positives.len()
        )));
    }

    let mut remaining: Vec<usize> = (0..positives.len()).collect();
    rng.shuffle(&mut remaining);
    let mut out = Vec::new();
    loop {
        let distinct: BTreeSet<&str> = remaining.iter().map(|&i| keys[i].as_str()).collect();
        if distinct.len() < n {
            break;
        }
        let mut chosen: Option<Vec<usize>> = None;
        for _ in 0..MAX_BATCH_ATTEMPTS {
            let pick = rng.sample_indices(remaining.len(), n);
            let uniq: BTreeSet<&str> = pick.iter().map(|&j| keys[remaining[j]].as_str()).collect();
            if uniq.len() == n {
                chosen = Some(pick);
                break;
            }
        }
        let pick = chosen.unwrap_or_else(|| {
            let mut seen = BTreeSet::new();
            let mut pick = Vec::with_capacity(n);
            for (j, &i) in remaining.iter().enumerate() {
                if pick.len() == n {
                    break;
                }
                if seen.insert(keys[i].as_str()) {
                    pick.push(j);
                }
            }
            pick
        });
        out.push(pick.iter().map(|&j| positives[remaining[j]]).collect());
        let drop: BTreeSet<usize> = pick.into_iter().collect();
        remaining = remaining
            .iter()
            .enumerate()
            .filter(|(j, _)| !drop.contains(j))
            .map(|(_, &i)| i)
            .collect();
    }
    Ok(out)
}

/// Writes pairs as JSON lines with video ids spelled out.
pub fn pairs_to_jsonl(manifest: &Manifest, pairs: &[PairRecord]) -> String {
    #[derive(Serialize)]
    struct Row<'a> {
        frame_video: &'a str,
        frame_second: usize,
        audio_video: &'a str,
        audio_second: usize,
        y: u8,
        source: PairSource,
    }
    let mut out = String::new();
    for p in pairs {
        let row = Row {
            frame_video: &manifest.entries[p.frame.video].video_id,
            frame_second: p.frame.second,
            audio_video: &manifest.entries[p.audio.video].video_id,
            audio_second: p.audio.second,
            y: p.y,
            source: p.source,
        };
        out.push_str(&serde_json::to_string(&row).expect("pair rows serialize"));
        out.push('\n');
    }
    out
}
