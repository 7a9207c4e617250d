//! The command-line pipeline at toy scale: synth-data, featurize, make-pairs,
//! contrastive pretraining, fine-tuning, embed, recommend and evaluate.

use std::fs;
use std::path::{Path, PathBuf};

pub struct Captured {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn cli(args: &[&str]) -> Captured {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("avcorr").chain(args.iter().copied());
    let code = avcorr::cli::run(argv, &mut out, &mut err);
    Captured {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

pub fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(args: &[&str]) -> Captured {
    let c = cli(args);
    assert_eq!(c.code, 0, "avcorr {}: {}", args.join(" "), c.stderr);
    c
}

const SPEC: &str = "\
n_classes = 4
clips_per_class = 10
seconds_per_clip = 2
image_size = 32
seed = 11
";

const ENCODER: &str = "\
width_scale = 0.125
visual_stem_pool = 8
audio_stem_pool = 4
max_epochs = 2
pairs_per_video = 1
val_pairs_per_video = 1
val_fraction = 0.25
seed = 5
";

/// Files produced by one run, as bytes.
#[derive(Debug, PartialEq)]
pub struct Artifacts {
    pub pretrained: Vec<u8>,
    pub checkpoint: Vec<u8>,
    pub store: Vec<u8>,
    pub report: Vec<u8>,
    pub pairs: Vec<u8>,
    pub recommendation: String,
}

pub struct Run {
    pub root: PathBuf,
    pub checkpoint: PathBuf,
    pub store: PathBuf,
    pub frame: PathBuf,
    pub artifacts: Artifacts,
}

pub fn run(root: &Path) -> Run {
    let p = |rel: &str| root.join(rel);
    fs::write(p("spec.kv"), SPEC).unwrap();
    fs::write(p("pretrain.kv"), format!("regime = contrastive_infonce\nbatch_size = 4\n{ENCODER}")).unwrap();
    fs::write(p("finetune.kv"), format!("regime = attention_bce_margin\nbatch_size = 8\n{ENCODER}")).unwrap();

    ok(&["synth-data", "--spec", path(&p("spec.kv")), "--out", path(&p("data"))]);
    ok(&["featurize", "--manifest", path(&p("data/train.jsonl")), "--out", path(&p("feats"))]);
    let features = p("feats/features.jsonl");
    ok(&[
        "make-pairs", "--manifest", path(&features), "--strategy", "diff_label", "--out",
        path(&p("pairs.jsonl")), "--per-video", "1", "--seed", "2",
    ]);
    ok(&[
        "train", "--config", path(&p("pretrain.kv")), "--data", path(&features), "--out-checkpoint",
        path(&p("pre.avck")), "--history", path(&p("pre.csv")),
    ]);
    ok(&[
        "train", "--config", path(&p("finetune.kv")), "--data", path(&features), "--out-checkpoint",
        path(&p("model.avck")), "--history", path(&p("ft.csv")), "--init", path(&p("pre.avck")),
    ]);
    ok(&[
        "embed", "--checkpoint", path(&p("model.avck")), "--manifest", path(&features), "--out-store",
        path(&p("store.ave")),
    ]);
    let frame = p("data/frames/c3_v0009_01.png");
    let rec = ok(&[
        "recommend", "--checkpoint", path(&p("model.avck")), "--frame", path(&frame), "--store",
        path(&p("store.ave")), "--k", "3",
    ]);
    ok(&[
        "evaluate", "--checkpoint", path(&p("model.avck")), "--test-manifest", path(&p("data/test.jsonl")),
        "--store", path(&p("store.ave")), "--k", "1", "--report", path(&p("report.json")),
    ]);
    let read = |rel: &str| fs::read(p(rel)).unwrap();
    Run {
        root: root.to_path_buf(),
        checkpoint: p("model.avck"),
        store: p("store.ave"),
        frame,
        artifacts: Artifacts {
            pretrained: read("pre.avck"),
            checkpoint: read("model.avck"),
            store: read("store.ave"),
            report: read("report.json"),
            pairs: read("pairs.jsonl"),
            recommendation: rec.stdout,
        },
    }
}
