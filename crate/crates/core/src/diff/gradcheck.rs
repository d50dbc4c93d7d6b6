//! Central finite-difference gradient checking in double precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::DiffError;

/// Builds a one-element output from leaves created for `inputs`.
pub trait ScalarFn: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, DiffError> {}
impl<F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, DiffError>> ScalarFn for F {}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all inputs.
    pub max_rel_err: f64,
    /// Relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub entries_checked: usize,
}

fn evaluate(f: &impl ScalarFn, inputs: &[Tensor<f64>]) -> Result<f64, DiffError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(DiffError::Shape("grad_check needs a scalar function".into()));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients with central differences over every entry
/// of every input.
///
/// The error of one input is `max_i |a_i - n_i| / max(max|a|, max|n|)`,
/// i.e. relative to the gradient's scale, so near-zero entries do not blow
/// up the ratio. Points where the function has a kink (e.g. `|x|` at 0)
/// must be avoided by the caller; the check is meaningless there.
pub fn grad_check(f: impl ScalarFn, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport, DiffError> {
    grad_check_sampled(f, inputs, eps, usize::MAX, 0)
}

/// Like [`grad_check`] but perturbs at most `max_entries` randomly chosen
/// entries per input (all entries are still compared for analytic scale).
pub fn grad_check_sampled(
    f: impl ScalarFn,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_entries: usize,
    seed: u64,
) -> Result<GradCheckReport, DiffError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, (input, &var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(var, input.shape());
        let n = input.len();
        let picks: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_entries).into_vec()
        };
        let mut max_abs_diff = 0.0f64;
        let mut scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for &i in &picks {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            scale = scale.max(numeric.abs());
            max_abs_diff = max_abs_diff.max((numeric - analytic.data()[i]).abs());
        }
        checked += picks.len();
        per_input.push(if scale > 0.0 { max_abs_diff / scale } else { max_abs_diff });
    }
    Ok(GradCheckReport {
        max_rel_err: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        entries_checked: checked,
    })
}
