//! Browser bindings. The page in `www/` draws the returned buffers onto canvases.
//!
//! [`ops`] holds the plain Rust versions (tested natively); the exported
//! functions only turn their errors into JS exceptions.

use wasm_bindgen::prelude::*;

pub mod ops {
    use avcorr::featpipe::{log_mel, AudioClip, MelExtractor, SAMPLE_RATE, SEGMENT_SAMPLES};
    use avcorr::losses::{anchor_losses, Contrastive};
    use avcorr::synth::{generate_clip, SynthClip, SynthSpec};

    fn clip(n_classes: usize, class: usize, clip: usize, image_size: usize) -> Result<SynthClip, String> {
        if class >= n_classes {
            return Err(format!("class {class} is outside 0..{n_classes}"));
        }
        let spec = SynthSpec {
            n_classes,
            clips_per_class: clip + 1,
            seconds_per_clip: 1,
            image_size,
            ..Default::default()
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(generate_clip(&spec, class, clip))
    }

    /// RGBA pixels of the first frame of clip `index` of class `class`.
    pub fn synth_frame(n_classes: usize, class: usize, index: usize, size: usize) -> Result<Vec<u8>, String> {
        let c = clip(n_classes, class, index, size)?;
        Ok(c.frames[0].chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect())
    }

    /// Log-mel features (64 mel rows × 100 frames, row-major) of the clip's first second.
    pub fn synth_log_mel(n_classes: usize, class: usize, index: usize) -> Result<Vec<f32>, String> {
        let c = clip(n_classes, class, index, 32)?;
        mel(c.segments[0].clone())
    }

    pub fn tone_log_mel(hz: f64, amplitude: f64) -> Result<Vec<f32>, String> {
        if !(hz > 0.0 && hz < SAMPLE_RATE as f64 / 2.0) {
            return Err(format!("{hz} Hz is outside (0, {}) Hz", SAMPLE_RATE / 2));
        }
        let step = 2.0 * std::f64::consts::PI * hz / SAMPLE_RATE as f64;
        mel((0..SEGMENT_SAMPLES).map(|i| amplitude * (step * i as f64).sin()).collect())
    }

    pub fn nearest_mel_filter(hz: f64) -> usize {
        MelExtractor::new().filterbank().nearest_filter(hz)
    }

    fn mel(samples: Vec<f64>) -> Result<Vec<f32>, String> {
        let clip = AudioClip::new(samples, SAMPLE_RATE).map_err(|e| e.to_string())?;
        let m = log_mel(&clip).map_err(|e| e.to_string())?;
        Ok(m.values.iter().map(|&v| v as f32).collect())
    }

    /// Per-anchor losses for an n×n similarity matrix (row = visual anchor):
    /// the first n values are NT-Xent, the next n InfoNCE.
    pub fn contrastive_losses(similarities: &[f64], n: usize, tau: f64) -> Result<Vec<f64>, String> {
        if n < 2 || similarities.len() != n * n {
            return Err(format!(
                "need an n×n matrix with n >= 2, got {} values for n = {n}",
                similarities.len()
            ));
        }
        if !(tau > 0.0) {
            return Err(format!("tau must be positive, got {tau}"));
        }
        let mut out = anchor_losses(similarities, n, tau, Contrastive::NtXent);
        out.extend(anchor_losses(similarities, n, tau, Contrastive::InfoNce));
        Ok(out)
    }
}

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn synth_frame(n_classes: usize, class: usize, clip: usize, size: usize) -> Result<Vec<u8>, JsError> {
    js(ops::synth_frame(n_classes, class, clip, size))
}

#[wasm_bindgen]
pub fn synth_log_mel(n_classes: usize, class: usize, clip: usize) -> Result<Vec<f32>, JsError> {
    js(ops::synth_log_mel(n_classes, class, clip))
}

#[wasm_bindgen]
pub fn tone_log_mel(hz: f64, amplitude: f64) -> Result<Vec<f32>, JsError> {
    js(ops::tone_log_mel(hz, amplitude))
}

#[wasm_bindgen]
pub fn class_tone_hz(class: usize) -> f64 {
    avcorr::synth::class_frequency(class)
}

#[wasm_bindgen]
pub fn nearest_mel_filter(hz: f64) -> usize {
    ops::nearest_mel_filter(hz)
}

#[wasm_bindgen]
pub fn contrastive_losses(similarities: &[f64], n: usize, tau: f64) -> Result<Vec<f64>, JsError> {
    js(ops::contrastive_losses(similarities, n, tau))
}
