use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::audio::{AudioClip, SAMPLE_RATE, SEGMENT_SAMPLES};
use super::FeatError;

pub const N_MELS: usize = 64;
pub const N_FFT: usize = 2048;
pub const HOP: usize = 480;
pub const N_FRAMES: usize = 100;
/// Power values are floored here before the natural log.
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over the `n_fft/2 + 1` non-negative FFT bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Filterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    /// `n_mels + 2` band edges in Hz; filter `m` rises on `edges[m]..edges[m+1]`
    /// and falls on `edges[m+1]..edges[m+2]`.
    pub edges_hz: Vec<f64>,
    /// Row-major `n_mels × n_bins`.
    pub weights: Vec<f64>,
}

impl Filterbank {
    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges_hz[m + 1]
    }

    pub fn centers_hz(&self) -> Vec<f64> {
        (0..self.n_mels).map(|m| self.center_hz(m)).collect()
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Index of the filter whose center is closest to `hz`.
    pub fn nearest_filter(&self, hz: f64) -> usize {
        (0..self.n_mels)
            .min_by(|&a, &b| {
                let da = (self.center_hz(a) - hz).abs();
                let db = (self.center_hz(b) - hz).abs();
                da.total_cmp(&db)
            })
            .unwrap_or(0)
    }
}

/// Builds `n_mels` triangles with centers equally spaced on the mel scale between
/// `fmin` and `fmax`. Peaks have unit height.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sr: u32, fmin: f64, fmax: f64) -> Result<Filterbank, FeatError> {
    if n_mels < 2 {
        return Err(FeatError::Invalid(format!("n_mels must be at least 2, got {n_mels}")));
    }
    let nyquist = sr as f64 / 2.0;
    if fmax > nyquist {
        return Err(FeatError::Invalid(format!("fmax {fmax} Hz exceeds Nyquist {nyquist} Hz")));
    }
    if !(fmin >= 0.0 && fmin < fmax) {
        return Err(FeatError::Invalid(format!("need 0 <= fmin < fmax, got {fmin}..{fmax}")));
    }
    let n_bins = n_fft / 2 + 1;
    let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sr as f64 / n_fft as f64;
    let mut weights = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let up = (f - lo) / (mid - lo);
            let down = (hi - f) / (hi - mid);
            weights[m * n_bins + k] = up.min(down).max(0.0);
        }
    }
    Ok(Filterbank {
        n_mels,
        n_bins,
        edges_hz,
        weights,
    })
}

/// Log-mel spectrogram of a 1-second clip: mel bins × time frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    /// Row-major `N_MELS × N_FRAMES`.
    pub values: Vec<f64>,
}

impl MelSpec {
    pub const SHAPE: [usize; 2] = [N_MELS, N_FRAMES];

    pub fn at(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * N_FRAMES + frame]
    }

    /// Per-frame index of the loudest mel bin.
    pub fn argmax_bins(&self) -> Vec<usize> {
        (0..N_FRAMES)
            .map(|t| {
                (0..N_MELS)
                    .max_by(|&a, &b| self.at(a, t).total_cmp(&self.at(b, t)))
                    .unwrap_or(0)
            })
            .collect()
    }
}

/// Reusable STFT + filterbank pipeline (n_fft 2048, hop 480, periodic Hann,
/// centered frames with reflect padding).
pub struct MelExtractor {
    filterbank: Filterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Default for MelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl MelExtractor {
    pub fn new() -> Self {
        let filterbank = mel_filterbank(N_MELS, N_FFT, SAMPLE_RATE, 0.0, SAMPLE_RATE as f64 / 2.0)
            .expect("default filterbank parameters are valid");
        let window = (0..N_FFT)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / N_FFT as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        MelExtractor {
            filterbank,
            window,
            fft,
        }
    }

    pub fn filterbank(&self) -> &Filterbank {
        &self.filterbank
    }

    /// Power spectrogram `n_bins × N_FRAMES` (row-major) of a 48 000-sample clip.
    pub fn power_spectrogram(&self, clip: &AudioClip) -> Result<Vec<f64>, FeatError> {
        if clip.sample_rate != SAMPLE_RATE || clip.len() != SEGMENT_SAMPLES {
            return Err(FeatError::Invalid(format!(
                "log-mel needs exactly {SEGMENT_SAMPLES} samples at {SAMPLE_RATE} Hz, got {} at {} Hz",
                clip.len(),
                clip.sample_rate
            )));
        }
        let x = &clip.samples;
        let half = N_FFT / 2;
        let n = x.len();
        // Reflect padding without repeating the edge sample.
        let padded_at = |i: usize| -> f64 {
            if i < half {
                x[half - i]
            } else if i - half < n {
                x[i - half]
            } else {
                x[2 * (n - 1) - (i - half)]
            }
        };
        let n_bins = self.filterbank.n_bins;
        let mut power = vec![0.0; n_bins * N_FRAMES];
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..N_FRAMES {
            let start = t * HOP;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(padded_at(start + i) * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n_bins {
                power[k * N_FRAMES + t] = buf[k].norm_sqr();
            }
        }
        Ok(power)
    }

    pub fn log_mel(&self, clip: &AudioClip) -> Result<MelSpec, FeatError> {
        let power = self.power_spectrogram(clip)?;
        let n_bins = self.filterbank.n_bins;
        let mut values = vec![0.0; N_MELS * N_FRAMES];
        for m in 0..N_MELS {
            let row = self.filterbank.row(m);
            let out = &mut values[m * N_FRAMES..(m + 1) * N_FRAMES];
            for (k, &wk) in row.iter().enumerate() {
                if wk == 0.0 {
                    continue;
                }
                let p = &power[k * N_FRAMES..(k + 1) * N_FRAMES];
                for (o, &pv) in out.iter_mut().zip(p) {
                    *o += wk * pv;
                }
            }
            debug_assert_eq!(row.len(), n_bins);
        }
        for v in &mut values {
            *v = v.max(LOG_FLOOR).ln();
        }
        Ok(MelSpec { values })
    }
}

/// Log-mel spectrogram with a shared default [`MelExtractor`].
pub fn log_mel(clip: &AudioClip) -> Result<MelSpec, FeatError> {
    static EXTRACTOR: OnceLock<MelExtractor> = OnceLock::new();
    EXTRACTOR.get_or_init(MelExtractor::new).log_mel(clip)
}
