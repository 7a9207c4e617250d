//! Turns WAV audio and PNG/JPEG frames into model inputs: 64×100 log-mel
//! spectrograms of 1-second clips and normalized 3×224×224 RGB tensors.

mod audio;
mod avf;
mod frame;
mod mel;

use std::path::{Path, PathBuf};

use crate::gradcore::Tensor;

pub use audio::{ingest_audio, resample_linear, AudioClip, SAMPLE_RATE, SEGMENT_SAMPLES};
pub use avf::{read_avf, write_avf, AVF_MAGIC};
pub use frame::{bilinear_resize, load_frame, normalize_rgb8, FrameImage, FRAME_SIZE};
pub use mel::{
    hz_to_mel, log_mel, mel_filterbank, mel_to_hz, Filterbank, MelExtractor, MelSpec, HOP, LOG_FLOOR,
    N_FFT, N_FRAMES, N_MELS,
};

#[derive(Debug, thiserror::Error)]
pub enum FeatError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad WAV file {path}: {msg}")]
    Wav { path: PathBuf, msg: String },
    #[error("cannot decode image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("bad feature file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default()
}

fn read_shaped(path: &Path, shape: &[usize]) -> Result<Tensor<f32>, FeatError> {
    let t = read_avf::<f32>(path)?;
    let n: usize = shape.iter().product();
    if t.len() != n {
        return Err(FeatError::Format {
            path: path.to_path_buf(),
            msg: format!("holds shape {:?}, expected {shape:?}", t.shape()),
        });
    }
    Ok(t.reshape(shape).expect("length checked"))
}

/// Visual input `[3, 224, 224]` from a PNG/JPEG frame or an AVF1 feature file.
pub fn load_visual_input(path: &Path) -> Result<Tensor<f32>, FeatError> {
    match extension(path).as_str() {
        "avf" => read_shaped(path, &FrameImage::SHAPE),
        _ => {
            let f = load_frame(path)?;
            Ok(Tensor::new(FrameImage::SHAPE.to_vec(), f.pixels).expect("frame shape"))
        }
    }
}

/// Audio input `[1, 64, 100]` from a WAV segment (its first second) or an AVF1
/// feature file.
pub fn load_audio_input(path: &Path) -> Result<Tensor<f32>, FeatError> {
    let shape = [1, N_MELS, N_FRAMES];
    match extension(path).as_str() {
        "avf" => read_shaped(path, &shape),
        _ => {
            let clip = ingest_audio(path)?.first_second();
            let mel = log_mel(&clip)?;
            let values = mel.values.iter().map(|&v| v as f32).collect();
            Ok(Tensor::new(shape.to_vec(), values).expect("mel shape"))
        }
    }
}
