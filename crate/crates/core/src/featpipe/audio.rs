use std::path::Path;

use super::FeatError;

/// Working sample rate of the audio stream.
pub const SAMPLE_RATE: u32 = 48_000;
/// Samples in one 1-second segment at [`SAMPLE_RATE`].
pub const SEGMENT_SAMPLES: usize = SAMPLE_RATE as usize;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, FeatError> {
        if samples.is_empty() {
            return Err(FeatError::Invalid("audio clip is empty".into()));
        }
        if sample_rate == 0 {
            return Err(FeatError::Invalid("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(FeatError::Invalid("audio clip has non-finite samples".into()));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Consecutive one-second segments; the last one is zero-padded.
    pub fn segments(&self) -> Vec<AudioClip> {
        let seg = self.sample_rate as usize;
        self.samples
            .chunks(seg)
            .map(|chunk| {
                let mut s = chunk.to_vec();
                s.resize(seg, 0.0);
                AudioClip {
                    samples: s,
                    sample_rate: self.sample_rate,
                }
            })
            .collect()
    }

    /// First second of the clip, zero-padded if shorter.
    pub fn first_second(&self) -> AudioClip {
        self.segments().swap_remove(0)
    }
}

/// Linear-interpolation resampling to `target` Hz.
pub fn resample_linear(samples: &[f64], from: u32, target: u32) -> Vec<f64> {
    if from == target || samples.is_empty() {
        return samples.to_vec();
    }
    let out_len = ((samples.len() as u128 * target as u128 + from as u128 / 2) / from as u128) as usize;
    let step = from as f64 / target as f64;
    let last = samples.len() - 1;
    (0..out_len.max(1))
        .map(|j| {
            let pos = j as f64 * step;
            let i = (pos.floor() as usize).min(last);
            let frac = pos - i as f64;
            let next = samples[(i + 1).min(last)];
            samples[i] + (next - samples[i]) * frac
        })
        .collect()
}

/// Reads a PCM WAV (8/16/24/32-bit integer or 32-bit float, mono or stereo), mixes to
/// mono, scales to `[-1, 1]` and resamples to 48 kHz.
pub fn ingest_audio(path: &Path) -> Result<AudioClip, FeatError> {
    let wav_err = |msg: String| FeatError::Wav {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => FeatError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => wav_err(other.to_string()),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(wav_err(format!("{channels} channels; expected mono or stereo")));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(wav_err(format!("{}-bit float is not supported", spec.bits_per_sample)));
            }
            reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<Result<_, _>>()
                .map_err(|e| wav_err(e.to_string()))?
        }
        hound::SampleFormat::Int => {
            let bits = spec.bits_per_sample;
            if !matches!(bits, 8 | 16 | 24 | 32) {
                return Err(wav_err(format!("{bits}-bit integer PCM is not supported")));
            }
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(|e| wav_err(e.to_string()))?
        }
    };
    if interleaved.is_empty() {
        return Err(wav_err("no samples".into()));
    }
    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|frame| (frame.iter().sum::<f64>() / channels as f64).clamp(-1.0, 1.0))
        .collect();
    let samples = resample_linear(&mono, spec.sample_rate, SAMPLE_RATE);
    AudioClip::new(samples, SAMPLE_RATE)
}
