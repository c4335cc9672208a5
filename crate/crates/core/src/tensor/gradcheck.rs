//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, ParamVars, Tape, Tensor, Var};
use crate::error::{contract, Result};

/// Which coordinates of each input tensor are perturbed.
#[derive(Clone, Copy, Debug)]
pub enum CoordinatePolicy {
    All,
    /// Up to `per_tensor` coordinates per input, drawn without replacement.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckFailure {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn evaluate<F>(f: &mut F, inputs: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Compares tape gradients of the scalar `f` against central differences.
///
/// A coordinate fails when
/// `|analytic − (f(p+h) − f(p−h)) / 2h| / max(1, |analytic|) > tol`.
/// Non-finite values surface as [`crate::Error::NonFinite`] naming the op.
pub fn check_gradients<F>(
    mut f: F,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    policy: CoordinatePolicy,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return contract("finite-difference step must be positive");
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = match policy {
        CoordinatePolicy::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        CoordinatePolicy::All => None,
    };
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let n = inputs[which].numel();
        let coords: Vec<usize> = match (&policy, rng.as_mut()) {
            (CoordinatePolicy::Sample { per_tensor, .. }, Some(r)) if *per_tensor < n => {
                let mut c = sample(r, n, *per_tensor).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for coord in coords {
            let orig = work[which].data()[coord];
            work[which].data_mut()[coord] = orig + h;
            let up = evaluate(&mut f, &work)?;
            work[which].data_mut()[coord] = orig - h;
            let down = evaluate(&mut f, &work)?;
            work[which].data_mut()[coord] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[coord];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > tol {
                report.failures.push(GradCheckFailure {
                    input: which,
                    coord,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

/// [`check_gradients`] over every tensor of a parameter store followed by
/// extra `inputs`. `f` receives the bound parameters and the input handles.
pub fn check_model_gradients<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    mut f: F,
    h: f64,
    tol: f64,
    policy: CoordinatePolicy,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamVars, &[Var]) -> Result<Var>,
{
    let np = store.len();
    let mut all: Vec<Tensor> = store.values().to_vec();
    all.extend_from_slice(inputs);
    check_gradients(
        |tape, vars| {
            let params = ParamVars(vars[..np].to_vec());
            f(tape, &params, &vars[np..])
        },
        &all,
        h,
        tol,
        policy,
    )
}
