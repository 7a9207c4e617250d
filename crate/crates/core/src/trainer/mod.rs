//! Training loops for the classification and contrastive regimes, fine-tuning,
//! learning-rate search and the early-stopping / plateau policies.

mod config;
mod data;
mod schedule;

pub use config::{Regime, TrainConfig};
pub use data::FeatureSet;
pub use schedule::{replay, Direction, EarlyStopping, PlateauDecay};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::encoders::{is_correlation_param, ModelError, ModelSpec, Stream, TwoStreamModel};
use crate::featpipe::FeatError;
use crate::gradcore::{NormMode, RngStream, Scalar, SgdNesterov, Tape, TensorError, Var};
use crate::losses::{self, LossError};
use crate::recommend::correlation_accuracy;
use crate::sampler::{
    balanced_batches, contrastive_batches, make_negative_pairs, make_positive_pairs, PairRecord, SamplerError,
    SegmentRef,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] FeatError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, what: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Mismatch(String),
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_metric,lr,seconds\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{:.3}", r.epoch, r.train_loss, r.val_metric, r.lr, r.seconds);
        }
        out
    }

    /// Everything except wall-clock time, for reproducibility checks.
    pub fn without_timing(&self) -> Vec<(usize, f64, f64, f64)> {
        self.records
            .iter()
            .map(|r| (r.epoch, r.train_loss, r.val_metric, r.lr))
            .collect()
    }
}

pub struct TrainOutcome<T> {
    /// Model state at the best validation epoch.
    pub model: TwoStreamModel<T>,
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub direction: Direction,
}

/// Validation data fixed for the whole run.
enum ValSet {
    Pairs(Vec<PairRecord>),
    Batches(Vec<Vec<PairRecord>>),
}

const STREAM_TRAIN: u64 = 100;
const STREAM_VAL: u64 = 2;

fn check_model<T: Scalar>(cfg: &TrainConfig, model: &TwoStreamModel<T>) -> Result<(), TrainError> {
    let spec = model.spec();
    let ok = match cfg.regime.contrastive() {
        Some(_) => spec.projector.is_some(),
        None => spec.correlation_head,
    };
    if !ok {
        return Err(TrainError::Mismatch(format!(
            "regime {} does not match a model with correlation_head={} projector={:?}",
            cfg.regime, spec.correlation_head, spec.projector
        )));
    }
    Ok(())
}

fn val_set(cfg: &TrainConfig, val: &FeatureSet<impl Scalar>) -> Result<ValSet, TrainError> {
    let mut rng = RngStream::new(cfg.seed).fork(STREAM_VAL);
    let pos = make_positive_pairs(&val.manifest, cfg.val_pairs_per_video, &mut rng)?;
    Ok(match cfg.regime.contrastive() {
        Some(_) => ValSet::Batches(contrastive_batches(&val.manifest, &pos, cfg.batch_size, &mut rng)?),
        None => {
            let neg = make_negative_pairs(&val.manifest, cfg.negative_strategy, pos.len(), &mut rng)?;
            ValSet::Pairs(pos.into_iter().chain(neg).collect())
        }
    })
}

fn epoch_batches(cfg: &TrainConfig, train: &FeatureSet<impl Scalar>, epoch: usize) -> Result<Vec<Vec<PairRecord>>, TrainError> {
    let mut rng = RngStream::new(cfg.seed).fork(STREAM_TRAIN + epoch as u64);
    let pos = make_positive_pairs(&train.manifest, cfg.pairs_per_video, &mut rng)?;
    Ok(match cfg.regime.contrastive() {
        Some(_) => contrastive_batches(&train.manifest, &pos, cfg.batch_size, &mut rng)?,
        None => {
            let neg = make_negative_pairs(&train.manifest, cfg.negative_strategy, pos.len(), &mut rng)?;
            balanced_batches(&pos, &neg, cfg.batch_size, &mut rng)?
        }
    })
}

/// Records the regime's loss for one batch.
fn batch_loss<T: Scalar>(
    cfg: &TrainConfig,
    model: &mut TwoStreamModel<T>,
    tape: &mut Tape<T>,
    data: &FeatureSet<T>,
    batch: &[PairRecord],
    trainable: &dyn Fn(&str) -> bool,
    mode: NormMode,
) -> Result<(Var, crate::encoders::Bound), TrainError> {
    let bound = model.bind(tape, trainable);
    let frames: Vec<SegmentRef> = batch.iter().map(|p| p.frame).collect();
    let audio: Vec<SegmentRef> = batch.iter().map(|p| p.audio).collect();
    let xv = tape.constant(data.batch(Stream::Visual, &frames)?);
    let xa = tape.constant(data.batch(Stream::Audio, &audio)?);
    let ov = model.encode(tape, &bound, Stream::Visual, xv, mode)?;
    let oa = model.encode(tape, &bound, Stream::Audio, xa, mode)?;
    let loss = match cfg.regime.contrastive() {
        Some(kind) => {
            let zv = model.project(tape, &bound, ov.embedding)?;
            let za = model.project(tape, &bound, oa.embedding)?;
            let logits = losses::similarity_logits(tape, zv, za, cfg.tau)?;
            losses::contrastive_from_logits(tape, logits, kind, cfg.symmetric)?
        }
        None => {
            let labels: Vec<f64> = batch.iter().map(|p| p.y as f64).collect();
            let c = model.correlation(tape, &bound, ov.embedding, oa.embedding)?;
            let bce = losses::bce(tape, c.prob, &labels)?;
            match cfg.regime {
                Regime::BaselineBce => bce,
                _ => {
                    let m = losses::margin_contrastive(tape, c.distance, &labels, cfg.margin)?;
                    losses::combined(tape, bce, m)?
                }
            }
        }
    };
    Ok((loss, bound))
}

/// Eval-mode embeddings of the referenced items, as `f64` rows keyed by reference.
pub fn embed_refs<T: Scalar>(
    model: &TwoStreamModel<T>,
    data: &FeatureSet<T>,
    stream: Stream,
    refs: &[SegmentRef],
    chunk: usize,
) -> Result<BTreeMap<SegmentRef, Vec<f64>>, TrainError> {
    let mut unique: Vec<SegmentRef> = refs.to_vec();
    unique.sort();
    unique.dedup();
    let mut out = BTreeMap::new();
    let d = model.spec().encoder.embed_dim;
    for part in unique.chunks(chunk.max(1)) {
        let x = data.batch(stream, part)?;
        let e = model.embed(stream, &x, part.len())?;
        for (r, row) in part.iter().zip(e.data().chunks_exact(d)) {
            out.insert(*r, row.iter().map(|v| v.as_f64()).collect());
        }
    }
    Ok(out)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Embedding distance of every pair (eval mode).
pub fn pair_distances<T: Scalar>(
    model: &TwoStreamModel<T>,
    data: &FeatureSet<T>,
    pairs: &[PairRecord],
    chunk: usize,
) -> Result<Vec<f64>, TrainError> {
    let frames: Vec<SegmentRef> = pairs.iter().map(|p| p.frame).collect();
    let audio: Vec<SegmentRef> = pairs.iter().map(|p| p.audio).collect();
    let ev = embed_refs(model, data, Stream::Visual, &frames, chunk)?;
    let ea = embed_refs(model, data, Stream::Audio, &audio, chunk)?;
    Ok(pairs.iter().map(|p| euclidean(&ev[&p.frame], &ea[&p.audio])).collect())
}

/// Correlated-class logits `w·d + b` of every pair under the model's head.
pub fn pair_logits<T: Scalar>(
    model: &TwoStreamModel<T>,
    data: &FeatureSet<T>,
    pairs: &[PairRecord],
    chunk: usize,
) -> Result<Vec<f64>, TrainError> {
    let (w, b) = correlation_params(model)?;
    Ok(pair_distances(model, data, pairs, chunk)?
        .into_iter()
        .map(|d| w * d + b)
        .collect())
}

pub fn correlation_params<T: Scalar>(model: &TwoStreamModel<T>) -> Result<(f64, f64), TrainError> {
    let get = |name: &str| {
        model
            .params()
            .by_name(name)
            .map(|t| t.data()[0].as_f64())
            .ok_or_else(|| TrainError::Mismatch("model has no correlation head".into()))
    };
    Ok((get("corr.weight")?, get("corr.bias")?))
}

/// Held-out correlation accuracy (%) of a model with a correlation head.
pub fn evaluate_correlation<T: Scalar>(
    model: &TwoStreamModel<T>,
    data: &FeatureSet<T>,
    pairs: &[PairRecord],
    chunk: usize,
) -> Result<f64, TrainError> {
    let logits = pair_logits(model, data, pairs, chunk)?;
    let labels: Vec<u8> = pairs.iter().map(|p| p.y).collect();
    Ok(correlation_accuracy(&logits, &labels))
}

fn validate<T: Scalar>(
    cfg: &TrainConfig,
    model: &mut TwoStreamModel<T>,
    val: &FeatureSet<T>,
    set: &ValSet,
) -> Result<f64, TrainError> {
    match set {
        ValSet::Pairs(pairs) => evaluate_correlation(model, val, pairs, cfg.eval_chunk),
        ValSet::Batches(batches) => {
            let mut total = 0.0;
            for b in batches {
                let mut tape = Tape::new();
                let (loss, _) = batch_loss(cfg, model, &mut tape, val, b, &|_| false, NormMode::Eval)?;
                total += tape.value(loss).data()[0].as_f64();
            }
            Ok(total / batches.len().max(1) as f64)
        }
    }
}

/// Balanced held-out pairs drawn like the validation pairs of [`train`].
pub fn balanced_eval_pairs(
    data: &FeatureSet<impl Scalar>,
    per_video: usize,
    strategy: crate::sampler::NegativeStrategy,
    seed: u64,
) -> Result<Vec<PairRecord>, TrainError> {
    let mut rng = RngStream::new(seed);
    let pos = make_positive_pairs(&data.manifest, per_video, &mut rng)?;
    let neg = make_negative_pairs(&data.manifest, strategy, pos.len(), &mut rng)?;
    Ok(pos.into_iter().chain(neg).collect())
}

/// Trains every parameter.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    model: TwoStreamModel<T>,
    train_set: &FeatureSet<T>,
    val_set_data: &FeatureSet<T>,
) -> Result<TrainOutcome<T>, TrainError> {
    train_with(cfg, model, train_set, val_set_data, &|_| true, &mut |_| {})
}

/// Trains the parameters accepted by `trainable`, calling `observer` after each epoch.
pub fn train_with<T: Scalar>(
    cfg: &TrainConfig,
    mut model: TwoStreamModel<T>,
    train_set: &FeatureSet<T>,
    val: &FeatureSet<T>,
    trainable: &dyn Fn(&str) -> bool,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    check_model(cfg, &model)?;
    let direction = match cfg.regime.contrastive() {
        Some(_) => Direction::Minimize,
        None => Direction::Maximize,
    };
    let vset = val_set(cfg, val)?;
    let active: Vec<bool> = model.params().iter().map(|p| trainable(&p.name)).collect();
    let mut opt = SgdNesterov::<T>::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut stop = EarlyStopping::new(cfg.patience, direction);
    let mut decay = PlateauDecay::new(cfg.lr_decay_patience, cfg.lr_decay_factor, cfg.min_lr, direction);
    let mut history = TrainHistory::default();
    let mut best = model.clone();

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let batches = epoch_batches(cfg, train_set, epoch)?;
        if batches.is_empty() {
            return Err(TrainError::Config(format!(
                "training data yields no complete batch of size {}",
                cfg.batch_size
            )));
        }
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let (loss, bound) = batch_loss(cfg, &mut model, &mut tape, train_set, batch, trainable, NormMode::Train)?;
            let lv = tape.value(loss).data()[0].as_f64();
            let non_finite = |what: &str| TrainError::NonFinite {
                epoch,
                batch: bi + 1,
                what: what.to_string(),
            };
            if !lv.is_finite() {
                return Err(non_finite("loss"));
            }
            loss_sum += lv;
            let grads = tape.backward(loss)?;
            let g = model.collect_grads(&grads, &bound);
            opt.step_masked(model.params_mut(), &g, &active).map_err(|e| match e {
                TensorError::NonFinite(what) => non_finite(&what),
                other => other.into(),
            })?;
        }
        let val_metric = validate(cfg, &mut model, val, &vset)?;
        if !val_metric.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: 0,
                what: "validation metric".into(),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            val_metric,
            lr: opt.lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&record);
        history.records.push(record);
        if stop.observe(epoch, val_metric) {
            best = model.clone();
        }
        opt.lr = decay.observe(val_metric, opt.lr);
        if stop.should_stop() {
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch: stop.best_epoch(),
        best_metric: stop.best(),
        direction,
    })
}

/// Result of [`lr_grid_search`]: the chosen rate and each candidate's best
/// validation metric (`None` when training diverged).
#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best_lr: f64,
    pub scores: Vec<(f64, Option<f64>)>,
}

/// Short run per candidate from the same initialization; ties go to the smaller
/// rate and diverged runs rank last.
pub fn lr_grid_search<T: Scalar>(
    cfg: &TrainConfig,
    candidates: &[f64],
    budget_epochs: usize,
    train_set: &FeatureSet<T>,
    val: &FeatureSet<T>,
) -> Result<GridResult, TrainError> {
    if candidates.is_empty() {
        return Err(TrainError::Config("lr grid search needs at least one candidate".into()));
    }
    let mut lrs = candidates.to_vec();
    lrs.sort_by(f64::total_cmp);
    let direction = match cfg.regime.contrastive() {
        Some(_) => Direction::Minimize,
        None => Direction::Maximize,
    };
    let mut scores = Vec::with_capacity(lrs.len());
    for &lr in &lrs {
        let mut c = cfg.clone();
        c.lr = lr;
        c.max_epochs = budget_epochs;
        let model = TwoStreamModel::<T>::new(c.model_spec(), c.seed)?;
        match train(&c, model, train_set, val) {
            Ok(out) => scores.push((lr, Some(out.best_metric))),
            Err(TrainError::NonFinite { .. }) => scores.push((lr, None)),
            Err(e) => return Err(e),
        }
    }
    let mut best_lr = lrs[0];
    let mut best = direction.worst();
    let mut any = false;
    for &(lr, s) in &scores {
        if let Some(s) = s {
            if !any || direction.improves(s, best) {
                best = s;
                best_lr = lr;
                any = true;
            }
        }
    }
    Ok(GridResult { best_lr, scores })
}

/// Copies the encoders of a contrastively trained model into a fresh model with a
/// newly initialized correlation head.
pub fn attach_correlation_head<T: Scalar>(pretrained: &TwoStreamModel<T>, seed: u64) -> Result<TwoStreamModel<T>, TrainError> {
    if pretrained.spec().projector.is_none() {
        return Err(TrainError::Mismatch(
            "fine-tuning needs a checkpoint from a contrastive regime".into(),
        ));
    }
    let spec = ModelSpec {
        arch: pretrained.spec().arch,
        encoder: pretrained.spec().encoder.clone(),
        correlation_head: true,
        projector: None,
    };
    let mut model = TwoStreamModel::new(spec, seed)?;
    model.load_encoders_from(pretrained)?;
    Ok(model)
}

/// Fine-tunes a contrastive checkpoint as a correlation classifier, training all
/// parameters with the BCE + margin objective.
pub fn fine_tune<T: Scalar>(
    pretrained: &TwoStreamModel<T>,
    cfg: &TrainConfig,
    train_set: &FeatureSet<T>,
    val: &FeatureSet<T>,
) -> Result<TrainOutcome<T>, TrainError> {
    if cfg.regime.contrastive().is_some() {
        return Err(TrainError::Config(format!(
            "fine-tuning trains a classifier; regime {} is contrastive",
            cfg.regime
        )));
    }
    let spec = pretrained.spec();
    if cfg.arch != spec.arch || cfg.encoder != spec.encoder {
        return Err(TrainError::Mismatch(format!(
            "config describes a {} encoder {:?} but the checkpoint holds a {} encoder {:?}",
            cfg.arch, cfg.encoder, spec.arch, spec.encoder
        )));
    }
    let model = attach_correlation_head(pretrained, cfg.seed)?;
    let mut c = cfg.clone();
    c.regime = Regime::AttentionBceMargin;
    train(&c, model, train_set, val)
}

/// Logistic fit of `σ(w·d + b)` to binary labels by damped Newton steps with a
/// small ridge penalty.
pub fn fit_correlation_head(distances: &[f64], labels: &[u8]) -> (f64, f64) {
    const RIDGE: f64 = 1e-4;
    let n = distances.len().max(1) as f64;
    let (mut w, mut b) = (crate::encoders::CORR_INIT_W, crate::encoders::CORR_INIT_B);
    for _ in 0..100 {
        let (mut gw, mut gb, mut hww, mut hwb, mut hbb) = (RIDGE * w, RIDGE * b, RIDGE, 0.0, RIDGE);
        for (&d, &y) in distances.iter().zip(labels) {
            let p = 1.0 / (1.0 + (-(w * d + b)).exp());
            let r = (p - y as f64) / n;
            let s = (p * (1.0 - p)).max(1e-12) / n;
            gw += r * d;
            gb += r;
            hww += s * d * d;
            hwb += s * d;
            hbb += s;
        }
        let det = hww * hbb - hwb * hwb;
        if det.abs() < 1e-300 {
            break;
        }
        let dw = (hbb * gw - hwb * gb) / det;
        let db = (hww * gb - hwb * gw) / det;
        w -= dw;
        b -= db;
        if dw.abs() + db.abs() < 1e-12 {
            break;
        }
    }
    (w, b)
}

/// Fits only the correlation head on `pairs`, keeping the encoders frozen.
pub fn calibrate_head<T: Scalar>(
    model: &mut TwoStreamModel<T>,
    data: &FeatureSet<T>,
    pairs: &[PairRecord],
    chunk: usize,
) -> Result<(f64, f64), TrainError> {
    if !model.has_correlation_head() {
        return Err(TrainError::Mismatch("model has no correlation head".into()));
    }
    let d = pair_distances(model, data, pairs, chunk)?;
    let y: Vec<u8> = pairs.iter().map(|p| p.y).collect();
    let (w, b) = fit_correlation_head(&d, &y);
    let set = |model: &mut TwoStreamModel<T>, name: &str, v: f64| {
        let id = model.params().id(name).expect("head present");
        model.params_mut().tensor_mut(id).data_mut()[0] = T::lit(v);
    };
    set(model, "corr.weight", w);
    set(model, "corr.bias", b);
    Ok((w, b))
}

/// Parameter filter selecting only the correlation head.
pub fn head_only(name: &str) -> bool {
    is_correlation_param(name)
}
