//! A small in-memory synthetic dataset with a narrow encoder, for training tests
//! that must finish in seconds.

use avcorr::encoders::{prepare_input, EncoderConfig, Stream};
use avcorr::featpipe::{log_mel, AudioClip, N_FRAMES, N_MELS, SAMPLE_RATE};
use avcorr::gradcore::Tensor;
use avcorr::sampler::{Manifest, ManifestEntry};
use avcorr::synth::{generate_clip, SynthSpec};
use avcorr::trainer::{FeatureSet, Regime, TrainConfig};

pub const IMAGE: usize = 32;

pub fn encoder() -> EncoderConfig {
    EncoderConfig {
        width_scale: 1.0 / 8.0,
        visual_size: (IMAGE, IMAGE),
        audio_stem_pool: 4,
        ..Default::default()
    }
}

pub fn spec(classes: usize, clips: usize, seconds: usize) -> SynthSpec {
    SynthSpec {
        n_classes: classes,
        clips_per_class: clips,
        seconds_per_clip: seconds,
        image_size: IMAGE,
        ..Default::default()
    }
}

fn prepared(cfg: &EncoderConfig, stream: Stream, shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    let out = prepare_input(cfg, stream, Tensor::new(s, data).unwrap()).unwrap();
    let inner = out.shape()[1..].to_vec();
    out.reshape(&inner).unwrap()
}

/// Features for clips `range` of every class, category = class id.
pub fn dataset(spec: &SynthSpec, range: std::ops::Range<usize>, cfg: &EncoderConfig) -> FeatureSet<f64> {
    let (mut entries, mut visual, mut audio) = (Vec::new(), Vec::new(), Vec::new());
    let plane = IMAGE * IMAGE;
    for k in 0..spec.n_classes {
        for j in range.clone() {
            let clip = generate_clip(spec, k, j);
            let n = clip.frames.len();
            entries.push(ManifestEntry {
                video_id: clip.video_id.clone(),
                category: Some(k.to_string()),
                frames: (0..n).map(|s| format!("{}_{s}.png", clip.video_id)).collect(),
                audio_segments: (0..n).map(|s| format!("{}_{s}.wav", clip.video_id)).collect(),
            });
            visual.push(
                clip.frames
                    .iter()
                    .map(|rgb| {
                        let mut chw = vec![0.0; 3 * plane];
                        for (i, px) in rgb.chunks_exact(3).enumerate() {
                            for c in 0..3 {
                                chw[c * plane + i] = (px[c] as f64 / 255.0 - 0.5) / 0.5;
                            }
                        }
                        prepared(cfg, Stream::Visual, &[3, IMAGE, IMAGE], chw)
                    })
                    .collect(),
            );
            audio.push(
                clip.segments
                    .iter()
                    .map(|seg| {
                        let mel = log_mel(&AudioClip::new(seg.clone(), SAMPLE_RATE).unwrap()).unwrap();
                        prepared(cfg, Stream::Audio, &[1, N_MELS, N_FRAMES], mel.values)
                    })
                    .collect(),
            );
        }
    }
    let manifest = Manifest::new("/synthetic".into(), entries).unwrap();
    FeatureSet::from_tensors(manifest, visual, audio).unwrap()
}

pub fn config(regime: Regime) -> TrainConfig {
    let mut cfg = TrainConfig::new(regime);
    cfg.encoder = encoder();
    cfg.batch_size = match regime {
        Regime::ContrastiveNtXent | Regime::ContrastiveInfoNce => 4,
        _ => 8,
    };
    cfg.max_epochs = 2;
    cfg.pairs_per_video = 1;
    cfg.val_pairs_per_video = 1;
    cfg.seed = 3;
    cfg
}
