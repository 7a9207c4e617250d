//! Finite-difference checks of every differentiable op, every loss, and the full
//! attention encoder composed with each loss, in double precision. Each group
//! records `(name, max relative error)` rows instead of asserting, so the same
//! checks back both the gradient tests and the acceptance run.

use avcorr::encoders::{Arch, Bound, Compatibility, EncoderConfig, ModelSpec, ProjectorKind, Stream, TwoStreamModel};
use avcorr::gradcore::{grad_check, GradCheck, NormMode, RngStream, RunningStats, Tape, Tensor, TensorError, Var};
use avcorr::losses::{self, Contrastive};

pub const TOL: f64 = 1e-4;

#[derive(Default)]
pub struct Suite {
    pub results: Vec<(String, f64)>,
}

impl Suite {
    /// Names of the checks at or above [`TOL`].
    pub fn failures(&self) -> Vec<String> {
        self.results
            .iter()
            .filter(|(_, e)| !(*e < TOL))
            .map(|(n, e)| format!("{n}: {e:e}"))
            .collect()
    }

    pub fn max_error(&self) -> f64 {
        self.results.iter().map(|r| r.1).fold(0.0, f64::max)
    }
}

fn randn(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Random values bounded away from zero, so ReLU kinks stay out of reach of the step.
fn away_from_zero(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform(0.1, 1.0);
            if rng.below(2) == 0 {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let n = tape.value(out).len();
    let flat = tape.reshape(out, &[1, n])?;
    let r = tape.constant(randn(&[1, n], &mut RngStream::new(seed)));
    let s = tape.matmul_nt(flat, r)?;
    Ok(tape.sum(s))
}

fn check<F>(s: &mut Suite, name: &str, params: Vec<Tensor<f64>>, mut f: F)
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut params = params;
    let err = grad_check(
        |t, v| {
            let out = f(t, v)?;
            probe(t, out, 99)
        },
        &mut params,
        &GradCheck::default(),
    )
    .unwrap();
    s.results.push((name.to_string(), err));
}

pub fn dense_ops(s: &mut Suite) {
    let mut rng = RngStream::new(1);
    check(
        s,
        "linear",
        vec![randn(&[3, 4], &mut rng), randn(&[5, 4], &mut rng), randn(&[5], &mut rng)],
        |t, v| t.linear(v[0], v[1], v[2]),
    );
    check(s, "matmul_nt", vec![randn(&[3, 4], &mut rng), randn(&[2, 4], &mut rng)], |t, v| {
        t.matmul_nt(v[0], v[1])
    });
    check(s, "relu", vec![away_from_zero(&[4, 5], &mut rng)], |t, v| Ok(t.relu(v[0])));
    check(s, "sigmoid", vec![randn(&[4, 5], &mut rng)], |t, v| Ok(t.sigmoid(v[0])));
    check(s, "add", vec![randn(&[2, 3], &mut rng), randn(&[2, 3], &mut rng)], |t, v| {
        t.add(v[0], v[1])
    });
    check(s, "scale", vec![randn(&[2, 3], &mut rng)], |t, v| Ok(t.scale(v[0], -1.7)));
    check(s, "sum", vec![randn(&[2, 3], &mut rng)], |t, v| Ok(t.sum(v[0])));
    check(s, "mean", vec![randn(&[2, 3], &mut rng)], |t, v| Ok(t.mean(v[0])));
    check(s, "reshape", vec![randn(&[2, 6], &mut rng)], |t, v| t.reshape(v[0], &[3, 4]));
    for axis in 0..3 {
        check(s, &format!("softmax axis {axis}"), vec![randn(&[2, 3, 4], &mut rng)], |t, v| {
            t.softmax(v[0], axis)
        });
    }
    check(s, "l2_normalize", vec![randn(&[3, 5], &mut rng)], |t, v| t.l2_normalize(v[0], 1e-12));
    check(s, "row_distance", vec![randn(&[4, 3], &mut rng), randn(&[4, 3], &mut rng)], |t, v| {
        t.row_distance(v[0], v[1])
    });
    check(
        s,
        "scalar_affine",
        vec![randn(&[5], &mut rng), randn(&[1], &mut rng), randn(&[1], &mut rng)],
        |t, v| t.scalar_affine(v[0], v[1], v[2]),
    );
    check(
        s,
        "concat_cols",
        vec![randn(&[2, 3], &mut rng), randn(&[2, 1], &mut rng), randn(&[2, 4], &mut rng)],
        |t, v| t.concat_cols(&[v[0], v[1], v[2]]),
    );
}

pub fn spatial_ops(s: &mut Suite) {
    let mut rng = RngStream::new(2);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        check(
            s,
            &format!("conv2d stride {stride} pad {pad}"),
            vec![randn(&[2, 3, 6, 5], &mut rng), randn(&[4, 3, 3, 3], &mut rng), randn(&[4], &mut rng)],
            |t, v| t.conv2d(v[0], v[1], v[2], stride, pad),
        );
    }
    check(
        s,
        "conv2d 1x1",
        vec![randn(&[2, 3, 4, 4], &mut rng), randn(&[5, 3, 1, 1], &mut rng), randn(&[5], &mut rng)],
        |t, v| t.conv2d(v[0], v[1], v[2], 1, 0),
    );
    check(s, "maxpool2d", vec![randn(&[2, 3, 6, 4], &mut rng)], |t, v| t.maxpool2d(v[0]));
    check(s, "avgpool2d", vec![randn(&[2, 3, 6, 4], &mut rng)], |t, v| t.avgpool2d(v[0], 2));
    check(s, "global_avg_pool", vec![randn(&[2, 3, 5, 4], &mut rng)], |t, v| t.global_avg_pool(v[0]));
    check(s, "crop2d", vec![randn(&[2, 3, 5, 5], &mut rng)], |t, v| t.crop2d(v[0], 4, 3));
    check(
        s,
        "add_channel_vector",
        vec![randn(&[2, 3, 4, 4], &mut rng), randn(&[2, 3], &mut rng)],
        |t, v| t.add_channel_vector(v[0], v[1]),
    );
    check(s, "channel_dot", vec![randn(&[2, 3, 4, 5], &mut rng), randn(&[2, 3], &mut rng)], |t, v| {
        t.channel_dot(v[0], v[1])
    });
    check(
        s,
        "spatial_weighted_sum",
        vec![randn(&[2, 3, 4, 5], &mut rng), randn(&[2, 20], &mut rng)],
        |t, v| t.spatial_weighted_sum(v[0], v[1]),
    );
}

pub fn batchnorm_both_modes(s: &mut Suite) {
    let mut rng = RngStream::new(3);
    let x = randn(&[3, 4, 3, 2], &mut rng);
    let gamma = randn(&[4], &mut rng);
    let beta = randn(&[4], &mut rng);
    let mut stats = RunningStats::<f64>::new(4);
    check(s, "batchnorm2d train", vec![x.clone(), gamma.clone(), beta.clone()], |t, v| {
        t.batchnorm2d(v[0], v[1], v[2], &mut stats, NormMode::Train)
    });
    let mut stats = RunningStats {
        mean: randn(&[4], &mut rng),
        var: Tensor::from_f64(&[4], &[0.5, 1.5, 2.0, 0.8]).unwrap(),
    };
    check(s, "batchnorm2d eval", vec![x, gamma, beta], |t, v| {
        t.batchnorm2d(v[0], v[1], v[2], &mut stats, NormMode::Eval)
    });
}

fn loss_var(r: Result<Var, losses::LossError>) -> Result<Var, TensorError> {
    r.map_err(|e| match e {
        losses::LossError::Tensor(t) => t,
        other => TensorError::Shape(other.to_string()),
    })
}

pub fn losses_on_their_inputs(s: &mut Suite) {
    let mut rng = RngStream::new(4);
    let labels = [1.0, 0.0, 1.0, 0.0, 0.0];
    let probs = Tensor::from_f64(&[5], &[0.8, 0.3, 0.55, 0.1, 0.65]).unwrap();
    check(s, "bce", vec![probs], |t, v| loss_var(losses::bce(t, v[0], &labels)));
    // margin 2.0 keeps every negative distance inside the hinge; 0.3 leaves one outside
    for m in [2.0, 0.3] {
        let d = Tensor::from_f64(&[5], &[0.4, 0.2, 1.1, 0.5, 1.3]).unwrap();
        check(s, &format!("margin {m}"), vec![d], |t, v| {
            loss_var(losses::margin_contrastive(t, v[0], &labels, m))
        });
    }
    check(
        s,
        "combined",
        vec![
            Tensor::from_f64(&[5], &[0.8, 0.3, 0.55, 0.1, 0.65]).unwrap(),
            Tensor::from_f64(&[5], &[0.4, 0.05, 1.1, 0.02, 1.3]).unwrap(),
        ],
        |t, v| {
            let b = loss_var(losses::bce(t, v[0], &labels))?;
            let m = loss_var(losses::margin_contrastive(t, v[1], &labels, 0.1))?;
            loss_var(losses::combined(t, b, m))
        },
    );
    for kind in [Contrastive::NtXent, Contrastive::InfoNce] {
        for symmetric in [false, true] {
            check(
                s,
                &format!("{kind:?} symmetric={symmetric}"),
                vec![randn(&[4, 6], &mut rng), randn(&[4, 6], &mut rng)],
                |t, v| {
                    let l = loss_var(losses::similarity_logits(t, v[0], v[1], 0.5))?;
                    loss_var(losses::contrastive_from_logits(t, l, kind, symmetric))
                },
            );
        }
    }
}

fn tiny_spec(correlation_head: bool, projector: Option<ProjectorKind>, compatibility: Compatibility) -> ModelSpec {
    ModelSpec {
        arch: Arch::Attention,
        encoder: EncoderConfig {
            width_scale: 1.0 / 8.0,
            visual_size: (32, 32),
            audio_size: (16, 25),
            compatibility,
            ..Default::default()
        },
        correlation_head,
        projector,
    }
}

/// Checks a sample of coordinates in every parameter tensor of the model.
fn check_model(s: &mut Suite, name: &str, spec: ModelSpec, loss: &dyn Fn(&mut Tape<f64>, Var, Var, &TwoStreamModel<f64>, &Bound) -> Result<Var, TensorError>) {
    let mut model = TwoStreamModel::<f64>::new(spec, 5).unwrap();
    let mut rng = RngStream::new(6);
    let n = 4;
    let xv = randn(&model.input_shape(Stream::Visual, n), &mut rng);
    let xa = randn(&model.input_shape(Stream::Audio, n), &mut rng);
    let mut params: Vec<Tensor<f64>> = model.params().iter().map(|p| p.tensor.clone()).collect();
    // A 1e-5 step crosses ReLU and max-pool switch points somewhere among the
    // thousands of activations; 1e-7 stays inside one linear piece but loses
    // derivatives near 1e-7 to rounding.
    let cfg = GradCheck {
        steps: vec![1e-5, 1e-7],
        max_coords: Some(6),
        seed: 7,
        ..Default::default()
    };
    let err = grad_check(
        |t, vars| {
            let bound = Bound::from_vars(&model, vars.to_vec()).map_err(|e| TensorError::Shape(e.to_string()))?;
            let v = t.constant(xv.clone());
            let a = t.constant(xa.clone());
            let map = |e: avcorr::encoders::ModelError| TensorError::Shape(e.to_string());
            let ev = model.encode(t, &bound, Stream::Visual, v, NormMode::Train).map_err(map)?;
            let ea = model.encode(t, &bound, Stream::Audio, a, NormMode::Train).map_err(map)?;
            loss(t, ev.embedding, ea.embedding, &model, &bound)
        },
        &mut params,
        &cfg,
    )
    .unwrap();
    s.results.push((name.to_string(), err));
}

const LABELS: [f64; 4] = [1.0, 0.0, 1.0, 0.0];

fn model_err(e: avcorr::encoders::ModelError) -> TensorError {
    TensorError::Shape(e.to_string())
}

pub fn attention_encoder_with_classification_losses(s: &mut Suite) {
    for compat in [Compatibility::Additive, Compatibility::Dot] {
        let spec = tiny_spec(true, None, compat);
        check_model(s, &format!("{compat} + bce"), spec.clone(), &|t, ev, ea, m, b| {
            let c = m.correlation(t, b, ev, ea).map_err(model_err)?;
            loss_var(losses::bce(t, c.prob, &LABELS))
        });
        check_model(s, &format!("{compat} + margin"), spec.clone(), &|t, ev, ea, m, b| {
            let c = m.correlation(t, b, ev, ea).map_err(model_err)?;
            loss_var(losses::margin_contrastive(t, c.distance, &LABELS, 0.1))
        });
        check_model(s, &format!("{compat} + bce + margin"), spec, &|t, ev, ea, m, b| {
            let c = m.correlation(t, b, ev, ea).map_err(model_err)?;
            let l1 = loss_var(losses::bce(t, c.prob, &LABELS))?;
            let l2 = loss_var(losses::margin_contrastive(t, c.distance, &LABELS, 0.1))?;
            loss_var(losses::combined(t, l1, l2))
        });
    }
}

pub fn attention_encoder_with_contrastive_losses(s: &mut Suite) {
    for kind in [Contrastive::NtXent, Contrastive::InfoNce] {
        for proj in [ProjectorKind::Linear, ProjectorKind::Nonlinear] {
            let spec = tiny_spec(false, Some(proj), Compatibility::Additive);
            check_model(s, &format!("{kind:?} + {proj} projector"), spec, &|t, ev, ea, m, b| {
                let zv = m.project(t, b, ev).map_err(model_err)?;
                let za = m.project(t, b, ea).map_err(model_err)?;
                let l = loss_var(losses::similarity_logits(t, zv, za, 0.5))?;
                loss_var(losses::contrastive_from_logits(t, l, kind, false))
            });
        }
    }
}

pub fn run_all() -> Suite {
    let mut s = Suite::default();
    dense_ops(&mut s);
    spatial_ops(&mut s);
    batchnorm_both_modes(&mut s);
    losses_on_their_inputs(&mut s);
    attention_encoder_with_classification_losses(&mut s);
    attention_encoder_with_contrastive_losses(&mut s);
    s
}
