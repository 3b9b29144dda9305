//! Central finite-difference verification of backward rules.

use serde::Serialize;

use super::{Graph, OpKind, Result, Tensor, Var};
use crate::rng::SplitMix64;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many entries per tensor (sampled with `seed`).
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Corrupts one backward rule in the analytic pass (negative control).
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            max_entries: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failing(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| !g.passed)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn eval_loss<L>(params: &[(String, Tensor<f64>)], loss: &L) -> Result<f64>
where
    L: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .enumerate()
        .map(|(i, (_, t))| g.param(i, t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let l = loss(&mut g, &vars)?;
    Ok(g.value(l).item())
}

/// Compares the analytic gradient of `loss` with central differences for
/// every named parameter tensor. `loss` receives the graph and one var per
/// parameter (registered in order as slots `0..n`).
pub fn gradcheck<L>(
    params: &[(String, Tensor<f64>)],
    loss: L,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    L: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    if let Some(kind) = opts.fault {
        g.corrupt_backward(kind);
    }
    let vars = params
        .iter()
        .enumerate()
        .map(|(i, (_, t))| g.param(i, t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let l = loss(&mut g, &vars)?;
    let grads = g.backward(l)?;

    let mut rng = SplitMix64::stream(opts.seed, &[0x6772_6164]);
    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();
    let mut groups = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let zeros = Tensor::zeros(tensor.shape());
        let analytic = grads.get(pi).unwrap_or(&zeros);
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < tensor.numel() => rng.subset(tensor.numel(), m),
            _ => (0..tensor.numel()).collect(),
        };
        let mut max_err = 0.0f64;
        for &e in &entries {
            let orig = tensor.data()[e];
            work[pi].1.data_mut()[e] = orig + opts.step;
            let plus = eval_loss(&work, &loss)?;
            work[pi].1.data_mut()[e] = orig - opts.step;
            let minus = eval_loss(&work, &loss)?;
            work[pi].1.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            max_err = max_err.max(relative_error(analytic.data()[e], numeric));
        }
        groups.push(GroupReport {
            name: name.clone(),
            entries_checked: entries.len(),
            max_rel_err: max_err,
            passed: max_err < opts.tolerance,
        });
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        groups,
    })
}
