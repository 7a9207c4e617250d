use crate::encoders::{prepare_input, EncoderConfig, Stream};
use crate::featpipe::{load_audio_input, load_visual_input, FeatError};
use crate::gradcore::{Scalar, Tensor};
use crate::sampler::{Manifest, SegmentRef};

use super::TrainError;

/// Prepared (stem-pooled) inputs for every second of every video in a manifest.
#[derive(Debug, Clone)]
pub struct FeatureSet<T> {
    pub manifest: Manifest,
    visual: Vec<Vec<Tensor<T>>>,
    audio: Vec<Vec<Tensor<T>>>,
}

fn prepare_one<T: Scalar>(cfg: &EncoderConfig, stream: Stream, t: Tensor<f32>) -> Result<Tensor<T>, TrainError> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    let batch = t.cast::<T>().reshape(&shape)?;
    let out = prepare_input(cfg, stream, batch)?;
    let inner = out.shape()[1..].to_vec();
    Ok(out.reshape(&inner)?)
}

impl<T: Scalar> FeatureSet<T> {
    /// Loads every frame and segment listed in `manifest` (images, WAV or AVF1 files).
    pub fn load(manifest: Manifest, cfg: &EncoderConfig) -> Result<Self, TrainError> {
        let mut visual = Vec::with_capacity(manifest.entries.len());
        let mut audio = Vec::with_capacity(manifest.entries.len());
        for (v, e) in manifest.entries.iter().enumerate() {
            let n = e.seconds();
            let mut vs = Vec::with_capacity(n);
            let mut as_ = Vec::with_capacity(n);
            for s in 0..n {
                let r = SegmentRef { video: v, second: s };
                let frame = load_visual_input(&manifest.frame_path(r))?;
                vs.push(prepare_one(cfg, Stream::Visual, frame)?);
                let seg = load_audio_input(&manifest.audio_path(r))?;
                as_.push(prepare_one(cfg, Stream::Audio, seg)?);
            }
            visual.push(vs);
            audio.push(as_);
        }
        Ok(FeatureSet {
            manifest,
            visual,
            audio,
        })
    }

    /// Builds a set from already prepared per-second tensors (`[C, H, W]` each).
    pub fn from_tensors(
        manifest: Manifest,
        visual: Vec<Vec<Tensor<T>>>,
        audio: Vec<Vec<Tensor<T>>>,
    ) -> Result<Self, TrainError> {
        if visual.len() != manifest.entries.len() || audio.len() != manifest.entries.len() {
            return Err(TrainError::Data(FeatError::Invalid(
                "feature lists do not match the manifest".into(),
            )));
        }
        for (i, e) in manifest.entries.iter().enumerate() {
            if visual[i].len() < e.seconds() || audio[i].len() < e.seconds() {
                return Err(TrainError::Data(FeatError::Invalid(format!(
                    "video `{}` is missing features",
                    e.video_id
                ))));
            }
        }
        Ok(FeatureSet {
            manifest,
            visual,
            audio,
        })
    }

    pub fn item(&self, stream: Stream, r: SegmentRef) -> &Tensor<T> {
        match stream {
            Stream::Visual => &self.visual[r.video][r.second],
            Stream::Audio => &self.audio[r.video][r.second],
        }
    }

    /// Stacks the referenced items into `[B, C, H, W]`.
    pub fn batch(&self, stream: Stream, refs: &[SegmentRef]) -> Result<Tensor<T>, TrainError> {
        let items: Vec<&Tensor<T>> = refs.iter().map(|&r| self.item(stream, r)).collect();
        Ok(Tensor::stack(&items)?)
    }

    /// Every (video, second) position in manifest order.
    pub fn all_refs(&self) -> Vec<SegmentRef> {
        self.manifest
            .entries
            .iter()
            .enumerate()
            .flat_map(|(v, e)| (0..e.seconds()).map(move |s| SegmentRef { video: v, second: s }))
            .collect()
    }

    /// Keeps only the listed videos, in the given order.
    pub fn subset(&self, videos: &[usize]) -> Result<Self, TrainError> {
        let entries = videos.iter().map(|&v| self.manifest.entries[v].clone()).collect();
        let manifest = Manifest::new(self.manifest.root.clone(), entries)
            .map_err(|e| TrainError::Data(FeatError::Invalid(e.to_string())))?;
        Ok(FeatureSet {
            manifest,
            visual: videos.iter().map(|&v| self.visual[v].clone()).collect(),
            audio: videos.iter().map(|&v| self.audio[v].clone()).collect(),
        })
    }
}
