use super::rng::RngStream;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::TensorError;

/// Settings for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Central-difference steps. Each coordinate keeps the estimate closest to the
    /// analytic value: large steps straddle ReLU and max-pool switch points, small
    /// ones drown tiny derivatives in rounding error, and a wrong gradient disagrees
    /// at every step.
    pub steps: Vec<f64>,
    /// Probe at most this many coordinates per tensor (all when `None`).
    pub max_coords: Option<usize>,
    /// Seed for choosing the probed coordinates.
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            steps: vec![1e-5],
            max_coords: None,
            seed: 0,
        }
    }
}

/// Compares reverse-mode gradients of a scalar function against central differences.
///
/// `f` records the computation on a fresh tape given leaf handles for `params` and
/// returns the scalar output. Returns the maximum over probed coordinates of
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(mut f: F, params: &mut [Tensor<f64>], cfg: &GradCheck) -> Result<f64, TensorError>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut eval = |params: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>), TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).data()[0];
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(out)?;
        let g = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect();
        Ok((value, g))
    };

    if cfg.steps.is_empty() {
        return Err(TensorError::Shape("grad_check needs at least one step".into()));
    }
    let (_, analytic) = eval(params, true)?;
    let mut rng = RngStream::new(cfg.seed);
    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        let n = params[pi].len();
        let coords = match cfg.max_coords {
            Some(k) if k < n => rng.sample_indices(n, k),
            _ => (0..n).collect(),
        };
        for c in coords {
            let a = analytic[pi].data()[c];
            let orig = params[pi].data()[c];
            let mut best = f64::INFINITY;
            for &h in &cfg.steps {
                params[pi].data_mut()[c] = orig + h;
                let (plus, _) = eval(params, false)?;
                params[pi].data_mut()[c] = orig - h;
                let (minus, _) = eval(params, false)?;
                params[pi].data_mut()[c] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                best = best.min((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8));
            }
            worst = worst.max(best);
        }
    }
    Ok(worst)
}
