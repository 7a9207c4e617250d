//! Two-stream visual/audio encoders, the attention fusion block, the distance-based
//! correlation head and the contrastive projection head.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use config::text_enum;
pub use config::{Arch, Compatibility, EncoderConfig, ModelSpec, ProjectorKind, Stream};

use crate::gradcore::{
    Grads, NormMode, ParamId, ParamStore, RngStream, RunningStats, Scalar, Tape, Tensor,
    TensorError, Var,
};
use crate::kv::KvError;

pub const L2_EPS: f64 = 1e-12;
/// Initial correlation head: logit `−d + 1`, so the boundary starts at `d = 1`.
pub const CORR_INIT_W: f64 = -1.0;
pub const CORR_INIT_B: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("checkpoint header: {0}")]
    Header(#[from] KvError),
}

#[derive(Debug, Clone)]
struct BlockIds {
    conv1: ParamId,
    bn1: (ParamId, ParamId),
    conv2: ParamId,
    bn2: (ParamId, ParamId),
    stats: (usize, usize),
}

#[derive(Debug, Clone)]
struct TapIds {
    block: usize,
    proj: Option<(ParamId, ParamId)>,
    score: Option<ParamId>,
}

#[derive(Debug, Clone)]
enum HeadIds {
    Baseline {
        fc1: (ParamId, ParamId),
        fc2: (ParamId, ParamId),
    },
    Attention {
        taps: Vec<TapIds>,
        fc: (ParamId, ParamId),
    },
}

#[derive(Debug, Clone)]
struct StreamIds {
    blocks: Vec<BlockIds>,
    head: HeadIds,
}

#[derive(Debug, Clone)]
struct ProjectorIds {
    fc1: (ParamId, ParamId),
    fc2: Option<(ParamId, ParamId)>,
}

/// Parameters of one attention tap, already placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapParams {
    /// 1×1 conv `(weight [C_g, C_l, 1, 1], bias [C_g])` matching the local feature to
    /// the global width; `None` when the widths already agree.
    pub proj: Option<(Var, Var)>,
    /// 1×1 conv weight `[1, C_g, 1, 1]` for additive scoring; `None` for dot scoring.
    pub score: Option<Var>,
}

/// Attention intermediates, one entry per tap.
#[derive(Debug, Clone)]
pub struct AttentionVars {
    /// Raw compatibility scores `w_i`, `[N, H_i·W_i]`.
    pub weights: Vec<Var>,
    /// Softmax-normalized maps `A_i`, `[N, H_i·W_i]`.
    pub normalized: Vec<Var>,
    /// Attended vectors `g_i`, `[N, C_g]`.
    pub attended: Vec<Var>,
    /// Concatenation of the attended vectors, `[N, n·C_g]`.
    pub fused: Var,
}

/// Attention fusion over local features `[N, C_i, H_i, W_i]` and a global feature `[N, C_g]`.
pub fn attention_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    locals: &[Var],
    global: Var,
    taps: &[TapParams],
) -> Result<AttentionVars, TensorError> {
    if locals.is_empty() || locals.len() != taps.len() {
        return Err(TensorError::Shape(format!(
            "attention needs one parameter set per local feature ({} locals, {} taps)",
            locals.len(),
            taps.len()
        )));
    }
    let mut out = AttentionVars {
        weights: Vec::new(),
        normalized: Vec::new(),
        attended: Vec::new(),
        fused: global,
    };
    for (&l, tap) in locals.iter().zip(taps) {
        let projected = match tap.proj {
            Some((w, b)) => tape.conv2d(l, w, b, 1, 0)?,
            None => l,
        };
        let shape = tape.shape(projected).to_vec();
        let (n, p) = (shape[0], shape[2] * shape[3]);
        let scores = match tap.score {
            Some(w) => {
                let summed = tape.add_channel_vector(projected, global)?;
                let zero = tape.constant(Tensor::zeros(&[1]));
                let s = tape.conv2d(summed, w, zero, 1, 0)?;
                tape.reshape(s, &[n, p])?
            }
            None => tape.channel_dot(projected, global)?,
        };
        let a = tape.softmax(scores, 1)?;
        let g = tape.spatial_weighted_sum(projected, a)?;
        out.weights.push(scores);
        out.normalized.push(a);
        out.attended.push(g);
    }
    out.fused = tape.concat_cols(&out.attended)?;
    Ok(out)
}

/// Outputs of the correlation head for a batch of embedding pairs.
#[derive(Debug, Clone, Copy)]
pub struct CorrelationVars {
    /// Euclidean distance `[N]`.
    pub distance: Var,
    /// Correlated-class logit `w·d + b`, `[N]`; the other logit is fixed at 0.
    pub logit: Var,
    /// `softmax([w·d + b, 0])[0] = σ(w·d + b)`, `[N]`.
    pub prob: Var,
}

pub fn correlation_score<T: Scalar>(
    tape: &mut Tape<T>,
    e_v: Var,
    e_a: Var,
    w: Var,
    b: Var,
) -> Result<CorrelationVars, TensorError> {
    let distance = tape.row_distance(e_v, e_a)?;
    let logit = tape.scalar_affine(distance, w, b)?;
    let prob = tape.sigmoid(logit);
    Ok(CorrelationVars {
        distance,
        logit,
        prob,
    })
}

/// Contrastive projector: `fc1` alone, or `fc1 → ReLU → fc2`. Output is not normalized.
pub fn project_contrastive<T: Scalar>(
    tape: &mut Tape<T>,
    e: Var,
    fc1: (Var, Var),
    fc2: Option<(Var, Var)>,
) -> Result<Var, TensorError> {
    let h = tape.linear(e, fc1.0, fc1.1)?;
    match fc2 {
        None => Ok(h),
        Some((w, b)) => {
            let r = tape.relu(h);
            tape.linear(r, w, b)
        }
    }
}

/// Model parameters placed on one tape, indexed like the model's [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps tape variables already holding the model's parameters, in store order.
    pub fn from_vars<T: Scalar>(model: &TwoStreamModel<T>, vars: Vec<Var>) -> Result<Self, ModelError> {
        if vars.len() != model.params.len() {
            return Err(ModelError::Mismatch(format!(
                "{} variables for {} parameters",
                vars.len(),
                model.params.len()
            )));
        }
        Ok(Bound { vars })
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Everything one stream's forward pass exposes.
#[derive(Debug, Clone)]
pub struct StreamOutput {
    /// Unit-norm embedding `[N, embed_dim]`.
    pub embedding: Var,
    /// Pre-pool block outputs, one per block.
    pub blocks: Vec<Var>,
    /// Spatially averaged final conv output `[N, C_g]` (attention only).
    pub global: Option<Var>,
    pub attention: Option<AttentionVars>,
}

/// Visual and audio encoders with optional correlation and projection heads.
#[derive(Debug, Clone)]
pub struct TwoStreamModel<T> {
    spec: ModelSpec,
    params: ParamStore<T>,
    stats: Vec<RunningStats<T>>,
    stat_names: Vec<String>,
    visual: StreamIds,
    audio: StreamIds,
    corr: Option<(ParamId, ParamId)>,
    projector: Option<ProjectorIds>,
}

fn zeros_param<T: Scalar>(
    store: &mut ParamStore<T>,
    name: String,
    shape: &[usize],
) -> Result<ParamId, TensorError> {
    store.add(name, Tensor::zeros(shape))
}

fn linear_param<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    out: usize,
    inp: usize,
    rng: &mut RngStream,
) -> Result<(ParamId, ParamId), TensorError> {
    let w = store.add_uniform(format!("{prefix}.weight"), &[out, inp], inp, rng)?;
    let b = zeros_param(store, format!("{prefix}.bias"), &[out])?;
    Ok((w, b))
}

impl<T: Scalar> TwoStreamModel<T> {
    /// Fresh model; every weight is drawn from a stream forked off `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.encoder.validate().map_err(ModelError::Config)?;
        let root = RngStream::new(seed);
        let mut model = TwoStreamModel {
            params: ParamStore::new(),
            stats: Vec::new(),
            stat_names: Vec::new(),
            visual: StreamIds {
                blocks: Vec::new(),
                head: HeadIds::Attention {
                    taps: Vec::new(),
                    fc: (ParamId(0), ParamId(0)),
                },
            },
            audio: StreamIds {
                blocks: Vec::new(),
                head: HeadIds::Attention {
                    taps: Vec::new(),
                    fc: (ParamId(0), ParamId(0)),
                },
            },
            corr: None,
            projector: None,
            spec,
        };
        model.visual = model.build_stream(Stream::Visual, &mut root.fork(1))?;
        model.audio = model.build_stream(Stream::Audio, &mut root.fork(2))?;
        if model.spec.correlation_head {
            model.corr = Some(model.build_corr()?);
        }
        if let Some(kind) = model.spec.projector {
            model.projector = Some(model.build_projector(kind, &mut root.fork(3))?);
        }
        Ok(model)
    }

    fn build_stream(&mut self, stream: Stream, rng: &mut RngStream) -> Result<StreamIds, ModelError> {
        let cfg = self.spec.encoder.clone();
        let pre = stream.prefix();
        let channels = cfg.channels(stream);
        let mut c_in = EncoderConfig::in_channels(stream);
        let mut blocks = Vec::new();
        for (bi, &c) in channels.iter().enumerate() {
            let p = format!("{pre}.block{}", bi + 1);
            let conv1 = self
                .params
                .add_uniform(format!("{p}.conv1.weight"), &[c, c_in, 3, 3], c_in * 9, rng)?;
            let bn1 = self.add_bn(&format!("{p}.bn1"), c)?;
            let conv2 = self
                .params
                .add_uniform(format!("{p}.conv2.weight"), &[c, c, 3, 3], c * 9, rng)?;
            let bn2 = self.add_bn(&format!("{p}.bn2"), c)?;
            let s1 = self.add_stats(&format!("{p}.bn1"), c);
            let s2 = self.add_stats(&format!("{p}.bn2"), c);
            blocks.push(BlockIds {
                conv1,
                bn1,
                conv2,
                bn2,
                stats: (s1, s2),
            });
            c_in = c;
        }
        let c_g = *channels.last().expect("validated non-empty");
        let head = match self.spec.arch {
            Arch::Baseline => {
                let hidden = cfg.hidden();
                HeadIds::Baseline {
                    fc1: linear_param(&mut self.params, &format!("{pre}.fc1"), hidden, c_g, rng)?,
                    fc2: linear_param(&mut self.params, &format!("{pre}.fc2"), cfg.embed_dim, hidden, rng)?,
                }
            }
            Arch::Attention => {
                let n = cfg.n_attention_taps;
                let mut taps = Vec::new();
                for block in channels.len() - n..channels.len() {
                    let p = format!("{pre}.tap{}", block + 1);
                    let c_l = channels[block];
                    let proj = if c_l != c_g {
                        let w = self
                            .params
                            .add_uniform(format!("{p}.proj.weight"), &[c_g, c_l, 1, 1], c_l, rng)?;
                        let b = zeros_param(&mut self.params, format!("{p}.proj.bias"), &[c_g])?;
                        Some((w, b))
                    } else {
                        None
                    };
                    let score = match cfg.compatibility {
                        Compatibility::Additive => Some(self.params.add_uniform(
                            format!("{p}.score.weight"),
                            &[1, c_g, 1, 1],
                            c_g,
                            rng,
                        )?),
                        Compatibility::Dot => None,
                    };
                    taps.push(TapIds { block, proj, score });
                }
                HeadIds::Attention {
                    taps,
                    fc: linear_param(&mut self.params, &format!("{pre}.fc"), cfg.embed_dim, n * c_g, rng)?,
                }
            }
        };
        Ok(StreamIds { blocks, head })
    }

    fn add_bn(&mut self, prefix: &str, c: usize) -> Result<(ParamId, ParamId), TensorError> {
        let g = self.params.add(format!("{prefix}.gamma"), Tensor::ones(&[c]))?;
        let b = self.params.add(format!("{prefix}.beta"), Tensor::zeros(&[c]))?;
        Ok((g, b))
    }

    fn add_stats(&mut self, prefix: &str, c: usize) -> usize {
        self.stats.push(RunningStats::new(c));
        self.stat_names.push(prefix.to_string());
        self.stats.len() - 1
    }

    fn build_corr(&mut self) -> Result<(ParamId, ParamId), TensorError> {
        let w = self.params.add("corr.weight", Tensor::from_f64(&[1], &[CORR_INIT_W])?)?;
        let b = self.params.add("corr.bias", Tensor::from_f64(&[1], &[CORR_INIT_B])?)?;
        Ok((w, b))
    }

    fn build_projector(&mut self, kind: ProjectorKind, rng: &mut RngStream) -> Result<ProjectorIds, TensorError> {
        let d = self.spec.encoder.embed_dim;
        let fc1 = linear_param(&mut self.params, "proj.fc1", d, d, rng)?;
        let fc2 = match kind {
            ProjectorKind::Linear => None,
            ProjectorKind::Nonlinear => Some(linear_param(&mut self.params, "proj.fc2", d, d, rng)?),
        };
        Ok(ProjectorIds { fc1, fc2 })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Batch-norm running statistics with their layer names.
    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.stat_names.iter().map(String::as_str).zip(&self.stats)
    }

    pub(crate) fn running_stats_mut(&mut self, name: &str) -> Option<&mut RunningStats<T>> {
        let i = self.stat_names.iter().position(|n| n == name)?;
        Some(&mut self.stats[i])
    }

    /// Places every parameter on `tape`; those accepted by `trainable` require gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), trainable(&p.name)))
            .collect();
        Bound { vars }
    }

    /// Gradient per parameter (zeros where nothing flowed), in store order.
    pub fn collect_grads(&self, grads: &Grads<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| grads.get_or_zeros(v, p.tensor.shape()))
            .collect()
    }

    fn ids(&self, stream: Stream) -> &StreamIds {
        match stream {
            Stream::Visual => &self.visual,
            Stream::Audio => &self.audio,
        }
    }

    /// Expected shape of a prepared input batch of `n` items.
    pub fn input_shape(&self, stream: Stream, n: usize) -> [usize; 4] {
        let (h, w) = self.spec.encoder.trunk_input(stream);
        [n, EncoderConfig::in_channels(stream), h, w]
    }

    /// Forward pass of one stream on a prepared input. `Train` mode uses batch
    /// statistics and updates the running ones.
    pub fn encode(
        &mut self,
        tape: &mut Tape<T>,
        bound: &Bound,
        stream: Stream,
        input: Var,
        mode: NormMode,
    ) -> Result<StreamOutput, ModelError> {
        let ids = self.ids(stream).clone();
        let shape = tape.shape(input).to_vec();
        let expect = self.input_shape(stream, shape.first().copied().unwrap_or(0));
        if shape != expect {
            return Err(ModelError::Mismatch(format!(
                "{} input has shape {shape:?}, expected {expect:?}",
                stream.prefix()
            )));
        }
        let n_blocks = ids.blocks.len();
        let pool_last = self.spec.arch == Arch::Baseline;
        let mut x = input;
        let mut blocks = Vec::with_capacity(n_blocks);
        let no_bias = |tape: &mut Tape<T>, c: usize| tape.constant(Tensor::zeros(&[c]));
        for (bi, b) in ids.blocks.iter().enumerate() {
            let c = tape.shape(bound.var(b.conv1))[0];
            let zb = no_bias(tape, c);
            x = tape.conv2d(x, bound.var(b.conv1), zb, 1, 1)?;
            x = tape.batchnorm2d(
                x,
                bound.var(b.bn1.0),
                bound.var(b.bn1.1),
                &mut self.stats[b.stats.0],
                mode,
            )?;
            x = tape.relu(x);
            let zb = no_bias(tape, c);
            x = tape.conv2d(x, bound.var(b.conv2), zb, 1, 1)?;
            x = tape.batchnorm2d(
                x,
                bound.var(b.bn2.0),
                bound.var(b.bn2.1),
                &mut self.stats[b.stats.1],
                mode,
            )?;
            x = tape.relu(x);
            blocks.push(x);
            if bi + 1 < n_blocks || pool_last {
                let s = tape.shape(x).to_vec();
                let (h, w) = (s[2] & !1, s[3] & !1);
                if (h, w) != (s[2], s[3]) {
                    x = tape.crop2d(x, h, w)?;
                }
                x = tape.maxpool2d(x)?;
            }
        }

        match &ids.head {
            HeadIds::Baseline { fc1, fc2 } => {
                let g = tape.global_avg_pool(x)?;
                let h = tape.linear(g, bound.var(fc1.0), bound.var(fc1.1))?;
                let h = tape.relu(h);
                let e = tape.linear(h, bound.var(fc2.0), bound.var(fc2.1))?;
                let embedding = tape.l2_normalize(e, L2_EPS)?;
                Ok(StreamOutput {
                    embedding,
                    blocks,
                    global: None,
                    attention: None,
                })
            }
            HeadIds::Attention { taps, fc } => {
                let global = tape.global_avg_pool(x)?;
                let locals: Vec<Var> = taps.iter().map(|t| blocks[t.block]).collect();
                let tap_params: Vec<TapParams> = taps
                    .iter()
                    .map(|t| TapParams {
                        proj: t.proj.map(|(w, b)| (bound.var(w), bound.var(b))),
                        score: t.score.map(|w| bound.var(w)),
                    })
                    .collect();
                let att = attention_fuse(tape, &locals, global, &tap_params)?;
                let e = tape.linear(att.fused, bound.var(fc.0), bound.var(fc.1))?;
                let embedding = tape.l2_normalize(e, L2_EPS)?;
                Ok(StreamOutput {
                    embedding,
                    blocks,
                    global: Some(global),
                    attention: Some(att),
                })
            }
        }
    }

    /// Eval-mode forward that leaves the model untouched.
    pub fn encode_eval(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        stream: Stream,
        input: Var,
    ) -> Result<StreamOutput, ModelError> {
        let mut scratch = self.clone_for_eval();
        scratch.encode(tape, bound, stream, input, NormMode::Eval)
    }

    fn clone_for_eval(&self) -> TwoStreamModel<T> {
        // The store is only read through `bound`, so an empty one suffices.
        TwoStreamModel {
            spec: self.spec.clone(),
            params: ParamStore::new(),
            stats: self.stats.clone(),
            stat_names: Vec::new(),
            visual: self.visual.clone(),
            audio: self.audio.clone(),
            corr: self.corr,
            projector: self.projector.clone(),
        }
    }

    pub fn has_correlation_head(&self) -> bool {
        self.corr.is_some()
    }

    pub fn correlation(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        e_v: Var,
        e_a: Var,
    ) -> Result<CorrelationVars, ModelError> {
        let (w, b) = self
            .corr
            .ok_or_else(|| ModelError::Mismatch("model has no correlation head".into()))?;
        Ok(correlation_score(tape, e_v, e_a, bound.var(w), bound.var(b))?)
    }

    pub fn project(&self, tape: &mut Tape<T>, bound: &Bound, e: Var) -> Result<Var, ModelError> {
        let p = self
            .projector
            .as_ref()
            .ok_or_else(|| ModelError::Mismatch("model has no contrastive projector".into()))?;
        let fc1 = (bound.var(p.fc1.0), bound.var(p.fc1.1));
        let fc2 = p.fc2.map(|(w, b)| (bound.var(w), bound.var(b)));
        Ok(project_contrastive(tape, e, fc1, fc2)?)
    }

    /// Embeds a prepared batch `[N, C, H, W]` in eval mode, `chunk` items at a time.
    pub fn embed(&self, stream: Stream, inputs: &Tensor<T>, chunk: usize) -> Result<Tensor<T>, ModelError> {
        let n = inputs.shape()[0];
        let d = self.spec.encoder.embed_dim;
        let mut out = Vec::with_capacity(n * d);
        let mut scratch = self.clone_for_eval();
        let per = inputs.len() / n;
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let mut shape = inputs.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::new(shape, inputs.data()[start * per..end * per].to_vec())?;
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, |_| false);
            let x = tape.constant(part);
            let o = scratch.encode(&mut tape, &bound, stream, x, NormMode::Eval)?;
            out.extend_from_slice(tape.value(o.embedding).data());
        }
        Ok(Tensor::new(vec![n, d], out)?)
    }

    /// Copies both encoders (parameters and running statistics) from `other`, which
    /// must share this model's architecture and encoder config.
    pub fn load_encoders_from(&mut self, other: &TwoStreamModel<T>) -> Result<(), ModelError> {
        if other.spec.arch != self.spec.arch || other.spec.encoder != self.spec.encoder {
            return Err(ModelError::Mismatch(format!(
                "encoder mismatch: source is {} {:?}, target is {} {:?}",
                other.spec.arch, other.spec.encoder, self.spec.arch, self.spec.encoder
            )));
        }
        for p in other.params.iter() {
            if is_encoder_param(&p.name) {
                self.params.assign(&p.name, p.tensor.clone())?;
            }
        }
        self.stats.clone_from(&other.stats);
        Ok(())
    }
}

/// True for parameters that belong to the visual or audio encoder proper.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("visual.") || name.starts_with("audio.")
}

/// True for parameters of the correlation head.
pub fn is_correlation_param(name: &str) -> bool {
    name.starts_with("corr.")
}

/// Applies the stream's non-learned stem pooling to raw `[N, C, H, W]` inputs.
pub fn prepare_input<T: Scalar>(cfg: &EncoderConfig, stream: Stream, raw: Tensor<T>) -> Result<Tensor<T>, ModelError> {
    let (h, w) = cfg.input_size(stream);
    let c = EncoderConfig::in_channels(stream);
    let s = raw.shape();
    if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
        return Err(ModelError::Mismatch(format!(
            "{} input has shape {s:?}, expected [N, {c}, {h}, {w}]",
            stream.prefix()
        )));
    }
    let k = cfg.stem_pool(stream);
    if k == 1 {
        return Ok(raw);
    }
    let mut tape = Tape::new();
    let x = tape.constant(raw);
    let y = tape.avgpool2d(x, k)?;
    Ok(tape.value(y).clone())
}
