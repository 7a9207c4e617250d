//! Criterion-level checks shared by the module tests and the acceptance run. Each
//! returns a one-line summary on success and the first violation on failure.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::f64::consts::PI;

use avcorr::featpipe::{log_mel, AudioClip, MelExtractor, LOG_FLOOR, N_FRAMES, N_MELS, SAMPLE_RATE};
use avcorr::gradcore::{RngStream, Tape, Tensor};
use avcorr::losses::{self, anchor_losses, Contrastive};
use avcorr::recommend::{
    distance, recommendation_accuracy, CatalogEntry, EmbeddingStore, GroundTruth, Query,
};
use avcorr::trainer::{replay, Direction, PlateauDecay};

pub type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn scalar(f: impl FnOnce(&mut Tape<f64>) -> avcorr::gradcore::Var) -> f64 {
    let mut t = Tape::new();
    let v = f(&mut t);
    t.value(v).data()[0]
}

pub fn loss_closed_forms() -> Outcome {
    for n in [2usize, 4, 32] {
        let rows = Tensor::from_f64(&[n, 3], &[0.2, -0.5, 0.9].repeat(n)).unwrap();
        for kind in [Contrastive::NtXent, Contrastive::InfoNce] {
            let got = scalar(|t| {
                let (v, a) = (t.constant(rows.clone()), t.constant(rows.clone()));
                let l = losses::similarity_logits(t, v, a, 0.5).unwrap();
                losses::contrastive_from_logits(t, l, kind, false).unwrap()
            });
            let want = match kind {
                Contrastive::NtXent => ((n - 1) as f64).ln(),
                Contrastive::InfoNce => (n as f64).ln(),
            };
            ensure((got - want).abs() < 1e-9, || format!("{kind:?} N={n}: {got} vs {want}"))?;
        }
    }
    let margin = |y: f64, d: f64| {
        scalar(|t| {
            let dv = t.constant(Tensor::from_f64(&[1], &[d]).unwrap());
            losses::margin_contrastive(t, dv, &[y], 0.1).unwrap()
        })
    };
    for (y, d, want) in [(1.0, 0.3, 0.3), (0.0, 0.25, 0.0), (0.0, 0.04, 0.06)] {
        let got = margin(y, d);
        ensure((got - want).abs() < 1e-12, || format!("margin y={y} d={d}: {got} vs {want}"))?;
    }
    let mut rng = RngStream::new(21);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = 2 + rng.below(31);
        let tau = rng.uniform(0.05, 2.0);
        let s: Vec<f64> = (0..n * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let nt = anchor_losses(&s, n, tau, Contrastive::NtXent);
        let nce = anchor_losses(&s, n, tau, Contrastive::InfoNce);
        for (a, b) in nt.iter().zip(&nce) {
            worst = worst.max((b - softplus(*a)).abs());
        }
    }
    ensure(worst < 1e-9, || format!("softplus identity off by {worst:e}"))?;
    Ok(format!("closed forms hold; softplus identity max gap {worst:.1e}"))
}

fn sine(hz: f64, amp: f64) -> Vec<f64> {
    (0..48_000).map(|i| amp * (2.0 * PI * hz * i as f64 / SAMPLE_RATE as f64).sin()).collect()
}

pub fn dsp() -> Outcome {
    let clip = |s: Vec<f64>| AudioClip::new(s, SAMPLE_RATE).unwrap();
    let floor = LOG_FLOOR.ln();
    let mut rng = RngStream::new(31);
    for _ in 0..5 {
        let s: Vec<f64> = (0..48_000).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let m = log_mel(&clip(s)).map_err(|e| e.to_string())?;
        ensure(m.values.len() == N_MELS * N_FRAMES, || format!("{} values", m.values.len()))?;
    }
    let zero = log_mel(&clip(vec![0.0; 48_000])).unwrap();
    ensure(zero.values.iter().all(|v| (v - floor).abs() < 1e-9), || "zero clip above floor".into())?;

    let ex = MelExtractor::new();
    let want = ex.filterbank().nearest_filter(1000.0);
    let tone = ex.log_mel(&clip(sine(1000.0, 1.0))).unwrap();
    let bins = tone.argmax_bins();
    ensure(bins.iter().all(|&b| b == want), || format!("1 kHz argmax {bins:?}, nearest filter {want}"))?;

    let mut worst: f64 = 0.0;
    let base: Vec<f64> = sine(700.0, 0.3).into_iter().map(|s| s + 0.02 * rng.normal()).collect();
    let a = ex.log_mel(&clip(base.clone())).unwrap();
    for c in [0.1, 0.5, 3.0] {
        let b = ex.log_mel(&clip(base.iter().map(|s| s * c).collect())).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            if *x > floor && *y > floor {
                worst = worst.max((y - x - 2.0 * f64::ln(c)).abs());
            }
        }
    }
    ensure(worst < 1e-5, || format!("amplitude shift off by {worst:e}"))?;
    Ok(format!("64x100 shape, floor, 1 kHz peak hold; 2 ln c shift max error {worst:.1e}"))
}

fn unit_vec(dim: usize, rng: &mut RngStream) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

/// Unit vector with components in {0, ±1/4, ±1/2, ±3/4, ±1}: squares are
/// multiples of 1/16 summing to exactly 1, so every norm and dot product is exact.
fn dyadic_unit(dim: usize, rng: &mut RngStream) -> Vec<f32> {
    loop {
        let mut left = 16usize;
        let mut v = vec![0f32; dim];
        for (i, slot) in v.iter_mut().enumerate() {
            let sq = if i + 1 == dim {
                left
            } else {
                let opts: Vec<usize> = [0, 1, 4, 9, 16].into_iter().filter(|&q| q <= left).collect();
                opts[rng.below(opts.len())]
            };
            let root = match sq {
                0 | 1 | 4 | 9 | 16 => (sq as f32).sqrt() / 4.0,
                _ => break,
            };
            left -= sq;
            *slot = if rng.below(2) == 0 { root } else { -root };
        }
        if left == 0 {
            rng.shuffle(&mut v);
            return v;
        }
    }
}

/// Random unit-norm store of `n` entries; about one in ten repeats an earlier
/// embedding so ties occur.
pub fn random_store(n: usize, dim: usize, categories: usize, rng: &mut RngStream) -> EmbeddingStore {
    build_store(n, dim, categories, rng, unit_vec)
}

fn build_store(
    n: usize,
    dim: usize,
    categories: usize,
    rng: &mut RngStream,
    gen: fn(usize, &mut RngStream) -> Vec<f32>,
) -> EmbeddingStore {
    let mut store = EmbeddingStore::new(dim);
    let mut prev: Vec<Vec<f32>> = Vec::new();
    for i in 0..n {
        let e = if !prev.is_empty() && rng.below(10) == 0 {
            prev[rng.below(prev.len())].clone()
        } else {
            gen(dim, rng)
        };
        prev.push(e.clone());
        store
            .add(CatalogEntry {
                sample_label: format!("s{:05}", rng.below(1_000_000) * 10_000 + i),
                category_label: format!("c{}", rng.below(categories)),
                embedding: e,
            })
            .unwrap();
    }
    store
}

fn sort_oracle(store: &EmbeddingStore, key: impl Fn(&[f32]) -> f64) -> Vec<String> {
    let mut all: Vec<(f64, &str)> = store.entries().iter().map(|e| (key(&e.embedding), e.sample_label.as_str())).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(b.1)));
    all.into_iter().map(|(_, l)| l.to_string()).collect()
}

pub fn retrieval() -> Outcome {
    let mut rng = RngStream::new(41);
    let mut queries = 0;
    for case in 0..100 {
        let n = if case < 3 { 10_000 } else { 1 + rng.below(2000) };
        let dim = 4 + rng.below(13);
        // Odd cases use exactly unit-norm vectors, where d² = 2 − 2·cos holds
        // without rounding and the cosine ranking must agree tie for tie.
        let exact = case % 2 == 1;
        let gen = if exact { dyadic_unit } else { unit_vec };
        let store = build_store(n, dim, 1 + rng.below(20), &mut rng, gen);
        for _ in 0..3 {
            let q = if rng.below(2) == 0 {
                store.entries()[rng.below(n)].embedding.clone()
            } else {
                gen(dim, &mut rng)
            };
            let k = 1 + rng.below(n.min(50));
            let got: Vec<String> = store.topk(&q, k).unwrap().into_iter().map(|r| r.sample_label).collect();
            let by_dist = sort_oracle(&store, |e| distance(&q, e));
            ensure(got == by_dist[..k], || format!("store {case}: top-{k} differs from full sort"))?;
            if exact {
                let by_cos = sort_oracle(&store, |e| -q.iter().zip(e).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>());
                ensure(got == by_cos[..k], || format!("store {case}: top-{k} differs from cosine ranking"))?;
            }
            queries += 1;
        }
    }

    let mut evaluations = 0;
    for _ in 0..50 {
        let n = 20 + rng.below(300);
        let store = random_store(n, 4, 2 + rng.below(10), &mut rng);
        let qs: Vec<Query> = (0..40)
            .map(|j| {
                let e = &store.entries()[rng.below(n)];
                Query {
                    frame: format!("f{j}"),
                    embedding: unit_vec(4, &mut rng),
                    truth: GroundTruth {
                        samples: BTreeSet::from([e.sample_label.clone()]),
                        categories: BTreeSet::from([e.category_label.clone()]),
                    },
                }
            })
            .collect();
        let k = 1 + rng.below(10);
        let rep = recommendation_accuracy(&qs, &store, k).unwrap();
        ensure(rep.sample_accuracy <= rep.category_accuracy, || {
            format!("sample {} > category {}", rep.sample_accuracy, rep.category_accuracy)
        })?;
        for f in &rep.per_frame {
            ensure(!f.sample_match || f.category_match, || format!("{}: sample match without category", f.frame))?;
        }
        evaluations += 1;
    }
    Ok(format!(
        "top-k matched full sort on 100 stores and cosine ranking on the 50 exactly unit-norm ones ({queries} queries); sample <= category on {evaluations} evaluations"
    ))
}

pub fn schedules() -> Outcome {
    let flat_after = |peak: usize, len: usize| -> Vec<f64> {
        (1..=len).map(|e| if e <= peak { e as f64 / 10.0 } else { peak as f64 / 10.0 }).collect()
    };
    for peak in [1usize, 3, 17] {
        let m = flat_after(peak, peak + 40);
        let mut decay = PlateauDecay::new(10, 0.5, 1e-6, Direction::Maximize);
        let (stop, best, lrs) = replay(&m, Direction::Maximize, 20, &mut decay, 0.01);
        ensure((stop, best) == (peak + 20, peak), || format!("peak {peak}: stop {stop} best {best}"))?;
        let mut want = vec![0.01; peak + 10];
        want.extend([0.005; 10]);
        ensure(lrs == want, || format!("peak {peak}: lr trace {lrs:?}"))?;
    }
    // Loss-like metric improving every epoch: no decay, no stop.
    let m: Vec<f64> = (0..30).map(|e| 1.0 / (e + 1) as f64).collect();
    let mut decay = PlateauDecay::new(10, 0.5, 1e-6, Direction::Minimize);
    let (stop, best, lrs) = replay(&m, Direction::Minimize, 20, &mut decay, 0.1);
    ensure(stop == 30 && best == 30 && lrs.iter().all(|&l| l == 0.1), || "steady improvement decayed or stopped".into())?;
    // 40 flat epochs after the first: four halvings.
    let mut decay = PlateauDecay::new(10, 0.5, 1e-6, Direction::Minimize);
    let mut lr = 0.1;
    for _ in 0..41 {
        lr = decay.observe(1.0, lr);
    }
    ensure(lr == 0.1 / 16.0, || format!("after 40 flat epochs lr = {lr}"))?;
    let mut decay = PlateauDecay::new(1, 0.5, 1e-6, Direction::Minimize);
    let mut lr = 1e-5;
    for _ in 0..10 {
        lr = decay.observe(1.0, lr);
    }
    ensure(lr == 1e-6, || format!("floor not held: {lr}"))?;
    Ok("stop at best+20 and halving every 10 flat epochs on all fixtures".into())
}
