use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId, Result};
use super::tensor::Tensor;

/// Floor on the denominator of the relative error, so that components whose
/// true derivative is ~0 are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst component.
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|c| c.max_rel_error <= self.tol)
    }
}

/// Which components of each input to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// A seeded random subset of at most this many components per input.
    Sample { per_input: usize, seed: u64 },
}

/// Difference quotient used to estimate each derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error O(h^2).
    Central,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, error O(h^4).
    FivePoint,
}

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor of the relative error. Raise it above
    /// [`REL_ERROR_FLOOR`] when the output is large enough that roundoff in
    /// `f(x +- h)` swamps derivatives smaller than the floor.
    pub floor: f64,
    pub stencil: Stencil,
    pub coverage: Coverage,
}

impl FdOptions {
    pub fn central(step: f64, tol: f64, coverage: Coverage) -> Self {
        Self { step, tol, floor: REL_ERROR_FLOOR, stencil: Stencil::Central, coverage }
    }
}

/// Compares the reverse-mode gradient of `output` with central differences
/// `(f(x+h) - f(x-h)) / 2h`. The graph is restored to its original bindings
/// before returning.
pub fn finite_diff_check(
    graph: &mut Graph,
    output: NodeId,
    inputs: &[&str],
    step: f64,
    tol: f64,
    coverage: Coverage,
) -> Result<GradCheckReport> {
    finite_diff_check_with(graph, output, inputs, &FdOptions::central(step, tol, coverage))
}

/// [`finite_diff_check`] with a choice of stencil and error floor.
pub fn finite_diff_check_with(
    graph: &mut Graph,
    output: NodeId,
    inputs: &[&str],
    opts: &FdOptions,
) -> Result<GradCheckReport> {
    let step = opts.step;
    assert!(step > 0.0, "finite-difference step must be positive");
    assert!(opts.floor > 0.0, "relative-error floor must be positive");
    let analytic = graph.gradient(output, inputs)?;
    let originals: BTreeMap<String, Tensor> = inputs
        .iter()
        .map(|&n| (n.to_string(), graph.value(graph.input_id(n).expect("gradient() validated names")).clone()))
        .collect();
    let mut rng = match opts.coverage {
        Coverage::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coverage::All => None,
    };
    let mut report = GradCheckReport { tol: opts.tol, inputs: Vec::new() };
    for &name in inputs {
        let base = &originals[name];
        let indices: Vec<usize> = match (opts.coverage, rng.as_mut()) {
            (Coverage::Sample { per_input, .. }, Some(rng)) if per_input < base.len() => {
                let mut v = sample(rng, base.len(), per_input).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..base.len()).collect(),
        };
        let mut check = InputCheck { name: name.to_string(), checked: indices.len(), max_rel_error: 0.0, worst_index: 0 };
        for &i in &indices {
            let mut eval_at = |delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                let mut b = BTreeMap::new();
                b.insert(name.to_string(), t);
                graph.forward(&b)?;
                Ok(graph.value(output).item())
            };
            let numeric = match opts.stencil {
                Stencil::Central => (eval_at(step)? - eval_at(-step)?) / (2.0 * step),
                Stencil::FivePoint => {
                    let (p1, m1) = (eval_at(step)?, eval_at(-step)?);
                    let (p2, m2) = (eval_at(2.0 * step)?, eval_at(-2.0 * step)?);
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step)
                }
            };
            let a = analytic[name].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = i;
            }
        }
        // Put this input back before the next one is perturbed.
        let mut b = BTreeMap::new();
        b.insert(name.to_string(), base.clone());
        graph.forward(&b)?;
        report.inputs.push(check);
    }
    graph.forward(&originals)?;
    Ok(report)
}
