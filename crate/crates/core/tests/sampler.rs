use std::collections::BTreeSet;
use std::path::PathBuf;

use avcorr::gradcore::RngStream;
use avcorr::sampler::{
    balanced_batches, contrastive_batches, make_negative_pairs, make_positive_pairs, Manifest, ManifestEntry,
    NegativeStrategy, PairSource, MIN_TIME_GAP,
};
use proptest::prelude::*;

fn manifest(videos: &[(usize, Option<&str>)]) -> Manifest {
    let entries = videos
        .iter()
        .enumerate()
        .map(|(i, &(secs, cat))| ManifestEntry {
            video_id: format!("v{i}"),
            category: cat.map(str::to_string),
            frames: (0..secs).map(|s| format!("v{i}/f{s}.png")).collect(),
            audio_segments: (0..secs).map(|s| format!("v{i}/a{s}.wav")).collect(),
        })
        .collect();
    Manifest::new(PathBuf::from("/data"), entries).unwrap()
}

fn categorized(cats: usize, per_cat: usize, secs: usize) -> Manifest {
    let names: Vec<String> = (0..cats).map(|c| format!("c{c}")).collect();
    let spec: Vec<(usize, Option<&str>)> = (0..cats * per_cat)
        .map(|i| (secs, Some(names[i % cats].as_str())))
        .collect();
    manifest(&spec)
}

#[test]
fn positives_cover_every_second_when_asked() {
    let m = manifest(&[(10, None)]);
    let pairs = make_positive_pairs(&m, 10, &mut RngStream::new(1)).unwrap();
    let seconds: BTreeSet<usize> = pairs.iter().map(|p| p.frame.second).collect();
    assert_eq!(seconds, (0..10).collect());
    assert!(pairs.iter().all(|p| p.frame == p.audio && p.y == 1 && p.source == PairSource::Aligned));
    let again = make_positive_pairs(&m, 10, &mut RngStream::new(1)).unwrap();
    assert_eq!(pairs, again);
}

#[test]
fn diff_video_on_two_videos_always_crosses() {
    let m = manifest(&[(4, None), (6, None)]);
    let pairs = make_negative_pairs(&m, NegativeStrategy::DiffVideo, 1000, &mut RngStream::new(2)).unwrap();
    assert_eq!(pairs.len(), 1000);
    for p in &pairs {
        assert_ne!(m.entries[p.frame.video].video_id, m.entries[p.audio.video].video_id);
        assert!(p.audio.second < m.entries[p.audio.video].seconds());
        assert_eq!(p.y, 0);
    }
}

#[test]
fn unsatisfiable_strategies_error() {
    let one_cat = manifest(&[(3, Some("a")), (3, Some("a"))]);
    assert!(make_negative_pairs(&one_cat, NegativeStrategy::DiffLabel, 1, &mut RngStream::new(0)).is_err());
    let unlabeled = manifest(&[(3, None), (3, Some("a"))]);
    assert!(make_negative_pairs(&unlabeled, NegativeStrategy::DiffLabel, 1, &mut RngStream::new(0)).is_err());
    let single = manifest(&[(3, None)]);
    assert!(make_negative_pairs(&single, NegativeStrategy::DiffVideo, 1, &mut RngStream::new(0)).is_err());
    let short = manifest(&[(2, None), (1, None)]);
    assert!(make_negative_pairs(&short, NegativeStrategy::DiffTime, 1, &mut RngStream::new(0)).is_err());
}

#[test]
fn balanced_batches_are_half_and_half() {
    let m = categorized(4, 25, 1);
    let mut rng = RngStream::new(3);
    let pos = make_positive_pairs(&m, 1, &mut rng).unwrap();
    let neg = make_negative_pairs(&m, NegativeStrategy::DiffLabel, 100, &mut rng).unwrap();
    assert_eq!((pos.len(), neg.len()), (100, 100));
    let batches = balanced_batches(&pos, &neg, 20, &mut RngStream::new(4)).unwrap();
    assert_eq!(batches.len(), 10);
    for b in &batches {
        assert_eq!(b.len(), 20);
        assert_eq!(b.iter().filter(|p| p.y == 1).count(), 10);
    }
    assert_eq!(batches, balanced_batches(&pos, &neg, 20, &mut RngStream::new(4)).unwrap());
    assert!(balanced_batches(&pos, &neg, 7, &mut RngStream::new(4)).is_err());
}

#[test]
fn eight_categories_batch_of_eight_is_a_permutation() {
    let m = categorized(8, 5, 2);
    let pos = make_positive_pairs(&m, 2, &mut RngStream::new(5)).unwrap();
    let batches = contrastive_batches(&m, &pos, 8, &mut RngStream::new(6)).unwrap();
    // 10 pairs per category: every pair fits into exactly one full batch.
    assert_eq!(batches.len(), 10);
    let all: BTreeSet<String> = (0..8).map(|c| format!("c{c}")).collect();
    let mut used = BTreeSet::new();
    for b in &batches {
        let cats: BTreeSet<String> = b.iter().map(|p| m.entries[p.frame.video].category.clone().unwrap()).collect();
        assert_eq!(cats, all);
        for p in b {
            assert!(used.insert((p.frame, p.audio)), "pair reused across batches");
        }
    }
}

#[test]
fn two_categories_pairs_are_distinct() {
    let m = categorized(2, 3, 3);
    let pos = make_positive_pairs(&m, 3, &mut RngStream::new(7)).unwrap();
    for b in contrastive_batches(&m, &pos, 2, &mut RngStream::new(8)).unwrap() {
        assert_ne!(m.entries[b[0].frame.video].category, m.entries[b[1].frame.video].category);
    }
    assert!(contrastive_batches(&m, &pos, 3, &mut RngStream::new(8)).is_err());
}

#[test]
fn split_is_seeded_and_partitions() {
    let m = categorized(4, 10, 1);
    let (held, rest) = m.split(0.25, 9);
    assert_eq!((held.entries.len(), rest.entries.len()), (10, 30));
    let a: BTreeSet<&str> = held.entries.iter().map(|e| e.video_id.as_str()).collect();
    let b: BTreeSet<&str> = rest.entries.iter().map(|e| e.video_id.as_str()).collect();
    assert!(a.is_disjoint(&b));
    assert_eq!(m.split(0.25, 9), (held, rest));
}

fn strategy() -> impl Strategy<Value = NegativeStrategy> {
    prop_oneof![
        Just(NegativeStrategy::DiffLabel),
        Just(NegativeStrategy::DiffVideo),
        Just(NegativeStrategy::DiffTime),
    ]
}

proptest! {
    #[test]
    fn negatives_respect_their_strategy(
        lens in prop::collection::vec((1usize..8, 0usize..3), 2..8),
        strat in strategy(),
        seed in any::<u64>(),
    ) {
        let names = ["a", "b", "c"];
        let spec: Vec<(usize, Option<&str>)> = lens.iter().map(|&(s, c)| (s, Some(names[c]))).collect();
        let m = manifest(&spec);
        let Ok(pairs) = make_negative_pairs(&m, strat, 200, &mut RngStream::new(seed)) else {
            return Ok(());
        };
        for p in &pairs {
            let (fv, av) = (&m.entries[p.frame.video], &m.entries[p.audio.video]);
            prop_assert!(p.frame.second < fv.seconds() && p.audio.second < av.seconds());
            match strat {
                NegativeStrategy::DiffLabel => prop_assert_ne!(&fv.category, &av.category),
                NegativeStrategy::DiffVideo => prop_assert_ne!(p.frame.video, p.audio.video),
                NegativeStrategy::DiffTime => {
                    prop_assert_eq!(p.frame.video, p.audio.video);
                    prop_assert!(p.frame.second.abs_diff(p.audio.second) >= MIN_TIME_GAP);
                }
            }
        }
    }

    #[test]
    fn contrastive_batches_never_repeat_a_key(
        cats in 2usize..6, per_cat in 1usize..5, secs in 1usize..4, seed in any::<u64>(),
    ) {
        let m = categorized(cats, per_cat, secs);
        let pos = make_positive_pairs(&m, secs, &mut RngStream::new(seed)).unwrap();
        let n = 2 + (seed as usize % (cats - 1));
        for b in contrastive_batches(&m, &pos, n, &mut RngStream::new(seed ^ 1)).unwrap() {
            prop_assert_eq!(b.len(), n);
            let keys: BTreeSet<&Option<String>> = b.iter().map(|p| &m.entries[p.frame.video].category).collect();
            prop_assert_eq!(keys.len(), n);
        }
    }
}
