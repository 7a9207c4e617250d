//! Deterministic synthetic dataset: each class pairs a coloured shape with a tone.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use crate::featpipe::{SAMPLE_RATE, SEGMENT_SAMPLES};
use crate::gradcore::RngStream;
use crate::kv::{KvDoc, KvError};
use crate::sampler::{Manifest, ManifestEntry};

/// Fundamental of class 0; class `k` sits `k` quarter-octaves above it.
pub const BASE_FREQ_HZ: f64 = 220.0;
/// Relative amplitudes of the fundamental and two harmonics.
pub const HARMONICS: [f64; 3] = [1.0, 0.5, 0.25];
pub const TONE_AMPLITUDE: f64 = 0.3;
const BACKGROUND: [u8; 3] = [24, 24, 24];

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("{path}: {msg}")]
    Write { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub seconds_per_clip: usize,
    pub seed: u64,
    /// Maximum shape-centre offset as a fraction of the image side.
    pub position_jitter: f64,
    /// Maximum relative change of the shape size.
    pub scale_jitter: f64,
    pub audio_snr_db: f64,
    /// Fraction of each class's clips written to the test manifest.
    pub test_fraction: f64,
    pub image_size: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 8,
            clips_per_class: 200,
            seconds_per_clip: 5,
            seed: 7,
            position_jitter: 0.15,
            scale_jitter: 0.2,
            audio_snr_db: 25.0,
            test_fraction: 0.2,
            image_size: 224,
        }
    }
}

const SPEC_KEYS: &[&str] = &[
    "n_classes",
    "clips_per_class",
    "seconds_per_clip",
    "seed",
    "position_jitter",
    "scale_jitter",
    "audio_snr_db",
    "test_fraction",
    "image_size",
];

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_classes < 2 {
            return Err(SynthError::Spec(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        if self.clips_per_class == 0 || self.seconds_per_clip == 0 {
            return Err(SynthError::Spec("clips_per_class and seconds_per_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(SynthError::Spec(format!("test_fraction {} not in [0, 1)", self.test_fraction)));
        }
        if !(0.0..0.5).contains(&self.position_jitter) || !(0.0..1.0).contains(&self.scale_jitter) {
            return Err(SynthError::Spec("jitter out of range".into()));
        }
        if self.image_size < 8 {
            return Err(SynthError::Spec("image_size must be at least 8".into()));
        }
        Ok(())
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self, SynthError> {
        doc.check_keys(SPEC_KEYS)?;
        let d = SynthSpec::default();
        let spec = SynthSpec {
            n_classes: doc.get_or("n_classes", d.n_classes)?,
            clips_per_class: doc.get_or("clips_per_class", d.clips_per_class)?,
            seconds_per_clip: doc.get_or("seconds_per_clip", d.seconds_per_clip)?,
            seed: doc.get_or("seed", d.seed)?,
            position_jitter: doc.get_or("position_jitter", d.position_jitter)?,
            scale_jitter: doc.get_or("scale_jitter", d.scale_jitter)?,
            audio_snr_db: doc.get_or("audio_snr_db", d.audio_snr_db)?,
            test_fraction: doc.get_or("test_fraction", d.test_fraction)?,
            image_size: doc.get_or("image_size", d.image_size)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::default();
        doc.set("n_classes", self.n_classes);
        doc.set("clips_per_class", self.clips_per_class);
        doc.set("seconds_per_clip", self.seconds_per_clip);
        doc.set("seed", self.seed);
        doc.set("position_jitter", self.position_jitter);
        doc.set("scale_jitter", self.scale_jitter);
        doc.set("audio_snr_db", self.audio_snr_db);
        doc.set("test_fraction", self.test_fraction);
        doc.set("image_size", self.image_size);
        doc
    }

    /// Number of test clips per class.
    pub fn test_clips(&self) -> usize {
        (self.clips_per_class as f64 * self.test_fraction).round() as usize
    }
}

pub fn class_frequency(k: usize) -> f64 {
    BASE_FREQ_HZ * 2f64.powf(k as f64 / 4.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
}

pub fn class_shape(k: usize) -> Shape {
    [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Cross][k % 4]
}

/// Fully saturated colour at hue `k / n_classes` of the wheel.
pub fn class_color(k: usize, n_classes: usize) -> [u8; 3] {
    let h = 6.0 * k as f64 / n_classes as f64;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let v = |c: f64| (40.0 + 215.0 * c).round() as u8;
    [v(r), v(g), v(b)]
}

fn inside(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Disk => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        // Upward triangle inscribed in the circle of radius r.
        Shape::Triangle => {
            let top = -r;
            let base = r * 0.5;
            dy >= top && dy <= base && dx.abs() <= (dy - top) / (base - top) * r * 0.866
        }
        Shape::Cross => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
    }
}

/// Interleaved RGB8 frame of class `k` with a jittered shape.
pub fn render_frame(spec: &SynthSpec, k: usize, rng: &mut RngStream) -> Vec<u8> {
    let s = spec.image_size;
    let sf = s as f64;
    let cx = sf * (0.5 + rng.uniform(-spec.position_jitter, spec.position_jitter));
    let cy = sf * (0.5 + rng.uniform(-spec.position_jitter, spec.position_jitter));
    let r = sf * 0.22 * (1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter));
    let color = class_color(k, spec.n_classes);
    let shape = class_shape(k);
    let mut out = Vec::with_capacity(s * s * 3);
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let px = if inside(shape, dx, dy, r) { color } else { BACKGROUND };
            out.extend_from_slice(&px);
        }
    }
    out
}

/// One second of class `k` audio at 48 kHz: the tone and two harmonics with random
/// phases, plus white noise at the spec's SNR.
pub fn render_segment(spec: &SynthSpec, k: usize, rng: &mut RngStream) -> Vec<f64> {
    let f = class_frequency(k);
    let phases: Vec<f64> = HARMONICS.iter().map(|_| rng.uniform(0.0, 2.0 * PI)).collect();
    let power: f64 = HARMONICS.iter().map(|a| (TONE_AMPLITUDE * a).powi(2) / 2.0).sum();
    let noise_std = (power / 10f64.powf(spec.audio_snr_db / 10.0)).sqrt();
    let sr = SAMPLE_RATE as f64;
    (0..SEGMENT_SAMPLES)
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = HARMONICS
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(h, (a, p))| TONE_AMPLITUDE * a * (2.0 * PI * f * (h + 1) as f64 * t + p).sin())
                .sum();
            (tone + noise_std * rng.normal()).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Frames and audio of one clip, generated from its own stream.
pub struct SynthClip {
    pub video_id: String,
    pub class: usize,
    pub frames: Vec<Vec<u8>>,
    pub segments: Vec<Vec<f64>>,
}

pub fn clip_id(k: usize, j: usize) -> String {
    format!("c{k}_v{j:04}")
}

pub fn generate_clip(spec: &SynthSpec, k: usize, j: usize) -> SynthClip {
    let index = (k * spec.clips_per_class + j) as u64;
    let mut rng = RngStream::new(spec.seed).fork(index);
    let mut frames = Vec::with_capacity(spec.seconds_per_clip);
    let mut segments = Vec::with_capacity(spec.seconds_per_clip);
    for _ in 0..spec.seconds_per_clip {
        frames.push(render_frame(spec, k, &mut rng));
        segments.push(render_segment(spec, k, &mut rng));
    }
    SynthClip {
        video_id: clip_id(k, j),
        class: k,
        frames,
        segments,
    }
}

/// Paths of a generated dataset.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
}

fn write_err(path: &Path, e: impl ToString) -> SynthError {
    SynthError::Write {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

pub fn write_wav16(path: &Path, samples: &[f64]) -> Result<(), SynthError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| write_err(path, e))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| write_err(path, e))?;
    }
    w.finalize().map_err(|e| write_err(path, e))
}

pub fn write_png(path: &Path, rgb: &[u8], size: usize) -> Result<(), SynthError> {
    image::save_buffer(path, rgb, size as u32, size as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| write_err(path, e))
}

/// Writes PNG frames, 16-bit WAV segments and three manifests (`manifest.jsonl`,
/// `train.jsonl`, `test.jsonl`) under `out`. The last clips of every class form the
/// test split.
pub fn generate(spec: &SynthSpec, out: &Path) -> Result<SynthOutput, SynthError> {
    spec.validate()?;
    for sub in ["frames", "audio"] {
        fs::create_dir_all(out.join(sub)).map_err(|e| write_err(&out.join(sub), e))?;
    }
    let n_test = spec.test_clips();
    let (mut all, mut train, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..spec.n_classes {
        for j in 0..spec.clips_per_class {
            let clip = generate_clip(spec, k, j);
            let mut entry = ManifestEntry {
                video_id: clip.video_id.clone(),
                category: Some(k.to_string()),
                frames: Vec::new(),
                audio_segments: Vec::new(),
            };
            for (s, (frame, seg)) in clip.frames.iter().zip(&clip.segments).enumerate() {
                let f = format!("frames/{}_{s:02}.png", clip.video_id);
                let a = format!("audio/{}_{s:02}.wav", clip.video_id);
                write_png(&out.join(&f), frame, spec.image_size)?;
                write_wav16(&out.join(&a), seg)?;
                entry.frames.push(f);
                entry.audio_segments.push(a);
            }
            if j + n_test >= spec.clips_per_class {
                test.push(entry.clone());
            } else {
                train.push(entry.clone());
            }
            all.push(entry);
        }
    }
    let paths = SynthOutput {
        manifest: out.join("manifest.jsonl"),
        train: out.join("train.jsonl"),
        test: out.join("test.jsonl"),
    };
    for (entries, path) in [(all, &paths.manifest), (train, &paths.train), (test, &paths.test)] {
        let m = Manifest::new(out.to_path_buf(), entries).map_err(|e| write_err(path, e))?;
        m.write(path).map_err(|e| write_err(path, e))?;
    }
    Ok(paths)
}
