mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use avcorr::featpipe::{log_mel, AudioClip, MelExtractor, N_FRAMES, SAMPLE_RATE};
use avcorr::gradcore::RngStream;
use avcorr::sampler::{make_negative_pairs, make_positive_pairs, Manifest, NegativeStrategy};
use avcorr::synth::{class_frequency, generate, generate_clip, render_segment, SynthSpec};

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_writes_identical_bytes() {
    let spec = common::tiny::spec(3, 2, 2);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&spec, a.path()).unwrap();
    generate(&spec, b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 3 * 2 * 2 * 2 + 3);
    assert!(ta == tb);
    let other = SynthSpec { seed: 8, ..spec };
    assert_ne!(generate_clip(&other, 0, 0).segments, generate_clip(&common::tiny::spec(3, 2, 2), 0, 0).segments);
}

#[test]
fn generated_manifests_satisfy_the_sampler() {
    let spec = common::tiny::spec(3, 5, 3);
    let dir = tempfile::tempdir().unwrap();
    let out = generate(&spec, dir.path()).unwrap();
    let all = Manifest::read(&out.manifest).unwrap();
    let train = Manifest::read(&out.train).unwrap();
    let test = Manifest::read(&out.test).unwrap();
    assert_eq!(all.entries.len(), 15);
    assert_eq!(test.entries.len(), 3 * spec.test_clips());
    assert_eq!(train.entries.len() + test.entries.len(), 15);
    for m in [&all, &train, &test] {
        assert!(m.has_categories());
        for e in &m.entries {
            assert_eq!(e.seconds(), 3);
            for (f, a) in e.frames.iter().zip(&e.audio_segments) {
                assert!(m.resolve(f).is_file() && m.resolve(a).is_file());
            }
        }
        let mut rng = RngStream::new(1);
        let pos = make_positive_pairs(m, 3, &mut rng).unwrap();
        let neg = make_negative_pairs(m, NegativeStrategy::DiffLabel, pos.len(), &mut rng).unwrap();
        for p in neg {
            assert_ne!(m.entries[p.frame.video].category, m.entries[p.audio.video].category);
        }
    }
}

#[test]
fn class_tones_are_separated() {
    let f: Vec<f64> = (0..8).map(class_frequency).collect();
    let min_ratio = f.windows(2).map(|w| w[1] / w[0]).fold(f64::INFINITY, f64::min);
    assert!((min_ratio - 2f64.powf(0.25)).abs() < 1e-12);
}

#[test]
fn segments_peak_at_their_class_tone() {
    let spec = SynthSpec::default();
    let ex = MelExtractor::new();
    let mut rng = RngStream::new(4);
    for k in 0..spec.n_classes {
        let want = ex.filterbank().nearest_filter(class_frequency(k));
        for _ in 0..3 {
            let seg = render_segment(&spec, k, &mut rng);
            let mel = ex.log_mel(&AudioClip::new(seg, SAMPLE_RATE).unwrap()).unwrap();
            // Edge frames see the zero padding and the onset; skip them.
            let bins = &mel.argmax_bins()[1..N_FRAMES - 1];
            assert!(bins.iter().all(|&b| b == want), "class {k}: {bins:?}");
        }
    }
}

#[test]
fn audio_features_cluster_by_class() {
    let spec = SynthSpec {
        audio_snr_db: 20.0,
        ..Default::default()
    };
    let mut rng = RngStream::new(5);
    let feats: Vec<(usize, Vec<f64>)> = (0..spec.n_classes)
        .flat_map(|k| (0..4).map(move |_| k))
        .map(|k| {
            let seg = render_segment(&spec, k, &mut rng);
            (k, log_mel(&AudioClip::new(seg, SAMPLE_RATE).unwrap()).unwrap().values)
        })
        .collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let (mut within, mut between) = ((0.0, 0), (0.0, 0));
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            let d = dist(&feats[i].1, &feats[j].1);
            let slot = if feats[i].0 == feats[j].0 { &mut within } else { &mut between };
            slot.0 += d;
            slot.1 += 1;
        }
    }
    let (w, b) = (within.0 / within.1 as f64, between.0 / between.1 as f64);
    assert!(w < b, "within {w} vs between {b}");
}
