mod common;

use std::f64::consts::PI;

use avcorr::featpipe::{
    bilinear_resize, hz_to_mel, ingest_audio, load_frame, log_mel, mel_filterbank, mel_to_hz, read_avf,
    resample_linear, write_avf, AudioClip, MelExtractor, FRAME_SIZE, LOG_FLOOR, N_FFT, N_FRAMES, N_MELS,
    SAMPLE_RATE,
};
use avcorr::gradcore::{RngStream, Tensor};
use proptest::prelude::*;

fn sine(hz: f64, amp: f64, rate: u32, len: usize) -> Vec<f64> {
    (0..len).map(|i| amp * (2.0 * PI * hz * i as f64 / rate as f64).sin()).collect()
}

fn clip(samples: Vec<f64>) -> AudioClip {
    AudioClip::new(samples, SAMPLE_RATE).unwrap()
}

#[test]
fn zero_clip_hits_the_floor() {
    let mel = log_mel(&clip(vec![0.0; 48_000])).unwrap();
    assert_eq!(mel.values.len(), N_MELS * N_FRAMES);
    let floor = LOG_FLOOR.ln();
    assert!(mel.values.iter().all(|v| (v - floor).abs() < 1e-9));
}

#[test]
fn wrong_length_is_rejected() {
    assert!(log_mel(&clip(vec![0.1; 47_999])).is_err());
}

#[test]
fn one_kilohertz_peaks_in_the_nearest_filter() {
    let ex = MelExtractor::new();
    let want = ex.filterbank().nearest_filter(1000.0);
    let mel = ex.log_mel(&clip(sine(1000.0, 1.0, SAMPLE_RATE, 48_000))).unwrap();
    assert!(mel.argmax_bins().iter().all(|&b| b == want));
}

#[test]
fn filterbank_geometry() {
    let fb = mel_filterbank(N_MELS, N_FFT, SAMPLE_RATE, 0.0, 24_000.0).unwrap();
    let centers = fb.centers_hz();
    assert!(centers.windows(2).all(|w| w[0] < w[1]));
    let mid = hz_to_mel(24_000.0) * 33.0 / 65.0;
    assert!((fb.center_hz(32) - mel_to_hz(mid)).abs() < 1e-9);
    for m in 0..N_MELS {
        let nz: Vec<usize> = (0..fb.n_bins).filter(|&k| fb.row(m)[k] > 0.0).collect();
        assert!(!nz.is_empty(), "filter {m} is empty");
        assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len(), "filter {m} is not contiguous");
        assert!(fb.row(m).iter().all(|&w| w >= 0.0));
    }
    assert!(mel_filterbank(N_MELS, N_FFT, SAMPLE_RATE, 0.0, 30_000.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn amplitude_scaling_shifts_log_power(c in 0.05f64..20.0, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let base: Vec<f64> = sine(700.0, 0.3, SAMPLE_RATE, 48_000)
            .into_iter()
            .map(|s| s + 0.02 * rng.normal())
            .collect();
        let scaled: Vec<f64> = base.iter().map(|s| s * c).collect();
        let a = log_mel(&clip(base)).unwrap();
        let b = log_mel(&clip(scaled)).unwrap();
        let floor = LOG_FLOOR.ln();
        let shift = 2.0 * c.ln();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!(*x >= floor && *y >= floor);
            if *x > floor && *y > floor {
                prop_assert!((y - x - shift).abs() < 1e-5, "{} vs {}", y - x, shift);
            }
        }
    }

    #[test]
    fn any_second_gives_the_same_shape(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let s: Vec<f64> = (0..48_000).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let a = log_mel(&clip(s.clone())).unwrap();
        let b = log_mel(&clip(s)).unwrap();
        prop_assert_eq!(a.values.len(), 6400);
        prop_assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

fn write_wav(path: &std::path::Path, rate: u32, channels: u16, frames: &[Vec<i16>]) {
    let spec = hound::WavSpec {
        channels,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for f in frames {
        for &s in f {
            w.write_sample(s).unwrap();
        }
    }
    w.finalize().unwrap();
}

#[test]
fn stereo_with_equal_channels_matches_mono() {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<i16> = sine(300.0, 0.5, SAMPLE_RATE, 4800).iter().map(|v| (v * 32767.0) as i16).collect();
    write_wav(&dir.path().join("m.wav"), SAMPLE_RATE, 1, &samples.iter().map(|&s| vec![s]).collect::<Vec<_>>());
    write_wav(&dir.path().join("s.wav"), SAMPLE_RATE, 2, &samples.iter().map(|&s| vec![s, s]).collect::<Vec<_>>());
    let m = ingest_audio(&dir.path().join("m.wav")).unwrap();
    let s = ingest_audio(&dir.path().join("s.wav")).unwrap();
    assert_eq!(m.len(), s.len());
    for (i, (a, b)) in m.samples.iter().zip(&s.samples).enumerate() {
        assert!((a - b).abs() < 1e-4);
        assert!((a - samples[i] as f64 / 32768.0).abs() < 1e-4);
    }
}

#[test]
fn resampling_lengths_and_spectral_peak() {
    assert_eq!(resample_linear(&vec![0.0; 24_000], 24_000, SAMPLE_RATE).len(), 48_000);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a440.wav");
    let src: Vec<Vec<i16>> = sine(440.0, 0.8, 44_100, 44_100).iter().map(|v| vec![(v * 32767.0) as i16]).collect();
    write_wav(&path, 44_100, 1, &src);
    let clip = ingest_audio(&path).unwrap().first_second();
    assert_eq!(clip.sample_rate, SAMPLE_RATE);
    let ex = MelExtractor::new();
    let power = ex.power_spectrogram(&clip).unwrap();
    let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
    let want = (440.0 / bin_hz).round() as usize;
    // Frames in the middle of the clip, clear of the zero-padded tail.
    for t in 10..80 {
        let peak = (0..N_FFT / 2 + 1)
            .max_by(|&a, &b| power[a * N_FRAMES + t].total_cmp(&power[b * N_FRAMES + t]))
            .unwrap();
        assert_eq!(peak, want, "frame {t}");
    }
}

fn write_png(path: &std::path::Path, w: usize, h: usize, px: impl Fn(usize, usize) -> u8) {
    let mut buf = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let v = px(x, y);
            buf.extend_from_slice(&[v, v, v]);
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::Rgb8).unwrap();
}

#[test]
fn frames_normalize_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    for (v, want) in [(0u8, -1.0f32), (255, 1.0)] {
        let p = dir.path().join(format!("{v}.png"));
        write_png(&p, 50, 30, |_, _| v);
        let f = load_frame(&p).unwrap();
        assert_eq!(f.pixels.len(), 3 * FRAME_SIZE * FRAME_SIZE);
        assert!(f.pixels.iter().all(|&x| x == want));
    }
}

#[test]
fn checkerboard_downsize_matches_bilinear_oracle() {
    // 3-pixel squares, so output samples straddle square edges.
    let checker = |x: usize, y: usize| if (x / 3 + y / 3) % 2 == 0 { 255u8 } else { 0 };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("checker.png");
    write_png(&p, 448, 448, checker);
    let frame = load_frame(&p).unwrap();
    // Output pixel o samples source coordinate 2o + 0.5: the mean of a 2×2 block.
    let oracle = |ox: usize, oy: usize| {
        let (x, y) = (2 * ox, 2 * oy);
        let s = [(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)]
            .iter()
            .map(|&(a, b)| checker(a, b) as f64)
            .sum::<f64>();
        s / 4.0
    };
    let plane = FRAME_SIZE * FRAME_SIZE;
    for (ox, oy) in [(0, 0), (1, 0), (1, 1), (223, 223), (100, 57)] {
        let want = (oracle(ox, oy) / 255.0 - 0.5) / 0.5;
        for c in 0..3 {
            let got = frame.pixels[c * plane + oy * FRAME_SIZE + ox] as f64;
            assert!((got - want).abs() <= 2.0 / 255.0, "({ox},{oy}): {got} vs {want}");
        }
    }
    // Same-size resize is the identity.
    let rgb: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
    let same = bilinear_resize(&rgb, 4, 3, 4, 3);
    assert!(same.iter().zip(&rgb).all(|(a, &b)| *a == b as f64));
}

#[test]
fn avf_roundtrip_and_rejection() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = RngStream::new(5);
    let t = Tensor::new(vec![2, 3, 4], (0..24).map(|_| rng.normal() as f32).collect()).unwrap();
    let p = dir.path().join("x.avf");
    write_avf(&p, &t).unwrap();
    let back = read_avf::<f32>(&p).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..4], b"AVF1");
    std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
    assert!(read_avf::<f32>(&p).is_err());
    std::fs::write(&p, b"NOPE\0\0").unwrap();
    assert!(read_avf::<f32>(&p).is_err());
}

#[test]
fn criterion_level_checks() {
    common::criteria::dsp().unwrap();
}
