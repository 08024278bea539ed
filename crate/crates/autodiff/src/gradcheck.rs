//! Central finite-difference verification of reverse-mode gradients.
//!
//! The relative error of entry `i` is
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)` where `floor`
//! is `1e-3` times the largest numeric gradient magnitude over all checked
//! entries (plus `1e-12`). Entries that are tiny compared with the rest of
//! the gradient are therefore judged on the loss's scale rather than on
//! their own, where cancellation in the difference quotient dominates.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen entries per input tensor.
    pub max_entries_per_input: Option<usize>,
    pub seed: u64,
    /// Use the fault-injecting tape for the analytic pass.
    pub fault_injection: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_entries_per_input: None,
            seed: 0,
            fault_injection: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Worst relative error per input tensor.
    pub per_input: Vec<f64>,
    pub entries_checked: usize,
}

/// Worst relative error over all entries of all `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let opts = GradCheckOptions {
        eps,
        ..Default::default()
    };
    Ok(grad_check_with(f, inputs, &opts)?.max_relative_error)
}

pub fn grad_check_with<F>(
    f: F,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = if opts.fault_injection {
        Tape::with_fault_injection()
    } else {
        Tape::new()
    };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |probe: &[Tensor]| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let v: Vec<Var> = probe.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &v)?;
        Ok(t.scalar_value(l))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut all_pairs = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input.shape());
        let entries: Vec<usize> = match opts.max_entries_per_input {
            Some(cap) if cap < input.len() => {
                let mut e = sample(&mut rng, input.len(), cap).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..input.len()).collect(),
        };
        let mut pairs = Vec::with_capacity(entries.len());
        for &i in &entries {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + opts.eps;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.eps;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            pairs.push((analytic.data()[i], (up - down) / (2.0 * opts.eps)));
        }
        checked += pairs.len();
        all_pairs.push(pairs);
    }
    let scale = all_pairs
        .iter()
        .flatten()
        .fold(0.0f64, |m, p| m.max(p.1.abs()));
    let floor = 1e-3 * scale + 1e-12;
    let per_input: Vec<f64> = all_pairs
        .iter()
        .map(|pairs| {
            pairs
                .iter()
                .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
                .fold(0.0f64, f64::max)
        })
        .collect();
    Ok(GradCheckReport {
        max_relative_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        entries_checked: checked,
    })
}
