//! Command-line surface. JSON goes to stdout, human summaries to stderr.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::encoders::{load_checkpoint, prepare_input, save_checkpoint, Stream, TwoStreamModel};
use crate::featpipe::{load_audio_input, load_visual_input, write_avf};
use crate::gradcore::RngStream;
use crate::kv::KvDoc;
use crate::recommend::{
    recommendation_accuracy, CatalogEntry, EmbeddingStore, GroundTruth, Query, RecommendationReport,
};
use crate::sampler::{
    make_negative_pairs, make_positive_pairs, pairs_to_jsonl, Manifest, ManifestEntry, NegativeStrategy,
    SegmentRef,
};
use crate::synth::{generate, SynthSpec};
use crate::trainer::{
    balanced_eval_pairs, embed_refs, evaluate_correlation, fine_tune, train, FeatureSet, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "avcorr", version, about = "Audio-visual correspondence training and sound recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic shapes-and-tones dataset.
    SynthData {
        /// Generator spec (key = value).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert every frame and audio segment of a manifest into AVF1 feature files.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write balanced positive and negative pairs as JSONL.
    MakePairs {
        #[arg(long)]
        manifest: PathBuf,
        /// diff_label, diff_video or diff_time.
        #[arg(long)]
        strategy: NegativeStrategy,
        #[arg(long)]
        out: PathBuf,
        /// Positives per video (default: every second).
        #[arg(long)]
        per_video: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; the manifest is split into train and validation videos.
    Train {
        /// Training config (key = value).
        #[arg(long)]
        config: PathBuf,
        /// Training manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// Per-epoch CSV.
        #[arg(long)]
        history: PathBuf,
        /// Contrastive checkpoint to fine-tune as a correlation classifier.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Embed every audio segment of a manifest into an AVE1 store.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_store: PathBuf,
    },
    /// Print the k nearest sounds for one frame as JSON.
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frame: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Recommendation (and, with a correlation head, correlation) accuracy on a test manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test_manifest: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        report: PathBuf,
        /// Seed of the balanced pairs used for correlation accuracy.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Error carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

fn data_err(e: impl ToString) -> CliError {
    CliError {
        code: EXIT_DATA,
        msg: e.to_string(),
    }
}

fn need_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(data_err(format!("no such file: {}", path.display())))
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| data_err(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.msg);
            e.code
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::SynthData { spec, out: dir } => {
            need_file(&spec)?;
            let text = fs::read_to_string(&spec).map_err(|e| data_err(format!("{}: {e}", spec.display())))?;
            let doc = KvDoc::parse(&text).map_err(|e| data_err(format!("{}: {e}", spec.display())))?;
            let s = SynthSpec::from_kv(&doc).map_err(|e| data_err(format!("{}: {e}", spec.display())))?;
            let o = generate(&s, &dir).map_err(data_err)?;
            let _ = writeln!(
                err,
                "wrote {} clips to {} ({}, {}, {})",
                s.n_classes * s.clips_per_class,
                dir.display(),
                o.manifest.display(),
                o.train.display(),
                o.test.display()
            );
            Ok(())
        }
        Command::Featurize { manifest, out: dir } => featurize(&manifest, &dir, err),
        Command::MakePairs {
            manifest,
            strategy,
            out: path,
            per_video,
            seed,
        } => {
            need_file(&manifest)?;
            let m = Manifest::read(&manifest).map_err(data_err)?;
            let mut rng = RngStream::new(seed);
            let pos = make_positive_pairs(&m, per_video.unwrap_or(usize::MAX), &mut rng).map_err(data_err)?;
            let neg = make_negative_pairs(&m, strategy, pos.len(), &mut rng).map_err(data_err)?;
            let all: Vec<_> = pos.into_iter().chain(neg).collect();
            write_file(&path, pairs_to_jsonl(&m, &all))?;
            let _ = writeln!(err, "wrote {} pairs to {}", all.len(), path.display());
            Ok(())
        }
        Command::Train {
            config,
            data,
            out_checkpoint,
            history,
            init,
        } => train_cmd(&config, &data, &out_checkpoint, &history, init.as_deref(), err),
        Command::Embed {
            checkpoint,
            manifest,
            out_store,
        } => {
            let model = read_model(&checkpoint)?;
            need_file(&manifest)?;
            let m = Manifest::read(&manifest).map_err(data_err)?;
            let store = embed_store(&model, m)?;
            if let Some(dir) = out_store.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| data_err(format!("{}: {e}", dir.display())))?;
            }
            store.write(&out_store).map_err(data_err)?;
            let _ = writeln!(err, "stored {} audio embeddings in {}", store.len(), out_store.display());
            Ok(())
        }
        Command::Recommend {
            checkpoint,
            frame,
            store,
            k,
        } => {
            let model = read_model(&checkpoint)?;
            need_file(&frame)?;
            need_file(&store)?;
            let s = EmbeddingStore::read(&store).map_err(data_err)?;
            let q = embed_frame(&model, &frame)?;
            let recs = s.topk(&q, k).map_err(data_err)?;
            let json = serde_json::to_string_pretty(&recs).expect("recommendations serialize");
            writeln!(out, "{json}").map_err(data_err)?;
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            test_manifest,
            store,
            k,
            report,
            seed,
        } => {
            let model = read_model(&checkpoint)?;
            need_file(&test_manifest)?;
            need_file(&store)?;
            let m = Manifest::read(&test_manifest).map_err(data_err)?;
            let s = EmbeddingStore::read(&store).map_err(data_err)?;
            let r = evaluate(&model, m, &s, k, seed)?;
            let json = serde_json::to_string_pretty(&r).expect("report serializes");
            write_file(&report, format!("{json}\n"))?;
            let _ = writeln!(
                err,
                "sample-level {:.1}%  category-level {:.1}%  over {} frames{}",
                r.recommendation.sample_accuracy,
                r.recommendation.category_accuracy,
                r.recommendation.frames,
                r.correlation_accuracy
                    .map(|c| format!("  correlation {c:.1}%"))
                    .unwrap_or_default()
            );
            Ok(())
        }
    }
}

fn featurize(manifest: &Path, dir: &Path, err: &mut dyn Write) -> Result<(), CliError> {
    need_file(manifest)?;
    let m = Manifest::read(manifest).map_err(data_err)?;
    for sub in ["frames", "audio"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| data_err(format!("{}: {e}", dir.display())))?;
    }
    let mut entries = Vec::with_capacity(m.entries.len());
    let mut files = 0;
    for (v, e) in m.entries.iter().enumerate() {
        let mut entry = ManifestEntry {
            video_id: e.video_id.clone(),
            category: e.category.clone(),
            frames: Vec::new(),
            audio_segments: Vec::new(),
        };
        for s in 0..e.seconds() {
            let r = SegmentRef { video: v, second: s };
            let frame_rel = format!("frames/{}_{s:02}.avf", e.video_id);
            let audio_rel = format!("audio/{}_{s:02}.avf", e.video_id);
            let fv = load_visual_input(&m.frame_path(r)).map_err(data_err)?;
            write_avf(&dir.join(&frame_rel), &fv).map_err(data_err)?;
            let fa = load_audio_input(&m.audio_path(r)).map_err(data_err)?;
            write_avf(&dir.join(&audio_rel), &fa).map_err(data_err)?;
            entry.frames.push(frame_rel);
            entry.audio_segments.push(audio_rel);
            files += 2;
        }
        entries.push(entry);
    }
    let out_manifest = Manifest::new(dir.to_path_buf(), entries).map_err(data_err)?;
    out_manifest.write(&dir.join("features.jsonl")).map_err(data_err)?;
    let _ = writeln!(
        err,
        "wrote {files} feature files and {}",
        dir.join("features.jsonl").display()
    );
    Ok(())
}

fn read_model(path: &Path) -> Result<TwoStreamModel<f32>, CliError> {
    need_file(path)?;
    load_checkpoint::<f32>(path).map_err(data_err)
}

fn train_cmd(
    config: &Path,
    data: &Path,
    out_checkpoint: &Path,
    history: &Path,
    init: Option<&Path>,
    err: &mut dyn Write,
) -> Result<(), CliError> {
    need_file(config)?;
    need_file(data)?;
    let cfg = TrainConfig::read(config).map_err(data_err)?;
    let pretrained = init.map(read_model).transpose()?;
    let m = Manifest::read(data).map_err(data_err)?;
    let (val_m, train_m) = m.split(cfg.val_fraction, cfg.seed);
    if val_m.entries.is_empty() || train_m.entries.is_empty() {
        return Err(data_err(format!(
            "{}: val_fraction {} leaves an empty train or validation split",
            data.display(),
            cfg.val_fraction
        )));
    }
    let train_set = FeatureSet::<f32>::load(train_m, &cfg.encoder).map_err(data_err)?;
    let val_set = FeatureSet::<f32>::load(val_m, &cfg.encoder).map_err(data_err)?;
    let outcome = match &pretrained {
        Some(p) => fine_tune(p, &cfg, &train_set, &val_set),
        None => {
            let model = TwoStreamModel::<f32>::new(cfg.model_spec(), cfg.seed).map_err(data_err)?;
            train(&cfg, model, &train_set, &val_set)
        }
    }
    .map_err(data_err)?;
    if let Some(dir) = out_checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| data_err(format!("{}: {e}", dir.display())))?;
    }
    save_checkpoint(&outcome.model, out_checkpoint).map_err(data_err)?;
    write_file(history, outcome.history.to_csv())?;
    let _ = writeln!(
        err,
        "{} epochs, best validation metric {:.4} at epoch {}",
        outcome.history.records.len(),
        outcome.best_metric,
        outcome.best_epoch
    );
    Ok(())
}

fn sample_label(m: &Manifest, r: SegmentRef) -> String {
    format!("{}:{}", m.entries[r.video].video_id, r.second)
}

fn category_label(m: &Manifest, r: SegmentRef) -> String {
    let e = &m.entries[r.video];
    e.category.clone().unwrap_or_else(|| e.video_id.clone())
}

/// Audio embeddings of every segment, labelled `video_id:second`.
pub fn embed_store(model: &TwoStreamModel<f32>, m: Manifest) -> Result<EmbeddingStore, CliError> {
    let data = FeatureSet::<f32>::load(m, &model.spec().encoder).map_err(data_err)?;
    let refs = data.all_refs();
    let emb = embed_refs(model, &data, Stream::Audio, &refs, 64).map_err(data_err)?;
    let mut store = EmbeddingStore::new(model.spec().encoder.embed_dim);
    for r in refs {
        store
            .add(CatalogEntry {
                sample_label: sample_label(&data.manifest, r),
                category_label: category_label(&data.manifest, r),
                embedding: emb[&r].iter().map(|&x| x as f32).collect(),
            })
            .map_err(data_err)?;
    }
    Ok(store)
}

fn embed_frame(model: &TwoStreamModel<f32>, frame: &Path) -> Result<Vec<f32>, CliError> {
    let x = load_visual_input(frame).map_err(data_err)?;
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let x = x.reshape(&shape).map_err(data_err)?;
    let x = prepare_input(&model.spec().encoder, Stream::Visual, x).map_err(data_err)?;
    let e = model.embed(Stream::Visual, &x, 1).map_err(data_err)?;
    Ok(e.data().to_vec())
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    /// Held-out correlation accuracy (%) when the checkpoint has a correlation head.
    pub correlation_accuracy: Option<f64>,
    pub recommendation: RecommendationReport,
}

/// Every frame of `m` queries the store; its own segment and category are the truth.
pub fn evaluate(
    model: &TwoStreamModel<f32>,
    m: Manifest,
    store: &EmbeddingStore,
    k: usize,
    seed: u64,
) -> Result<EvaluationReport, CliError> {
    let data = FeatureSet::<f32>::load(m, &model.spec().encoder).map_err(data_err)?;
    let refs = data.all_refs();
    let emb = embed_refs(model, &data, Stream::Visual, &refs, 64).map_err(data_err)?;
    let queries: Vec<Query> = refs
        .iter()
        .map(|&r| Query {
            frame: data.manifest.entries[r.video].frames[r.second].clone(),
            embedding: emb[&r].iter().map(|&x| x as f32).collect(),
            truth: GroundTruth {
                samples: BTreeSet::from([sample_label(&data.manifest, r)]),
                categories: BTreeSet::from([category_label(&data.manifest, r)]),
            },
        })
        .collect();
    let recommendation = recommendation_accuracy(&queries, store, k).map_err(data_err)?;
    let correlation_accuracy = if model.has_correlation_head() {
        let strategy = if data.manifest.has_categories() {
            NegativeStrategy::DiffLabel
        } else {
            NegativeStrategy::DiffVideo
        };
        let pairs = balanced_eval_pairs(&data, usize::MAX, strategy, seed).map_err(data_err)?;
        Some(evaluate_correlation(model, &data, &pairs, 64).map_err(data_err)?)
    } else {
        None
    };
    Ok(EvaluationReport {
        correlation_accuracy,
        recommendation,
    })
}
