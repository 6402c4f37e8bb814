use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use super::{Graph, NodeId, ParameterStore};
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone)]
pub struct FdOptions {
    /// Central-difference half step.
    pub eps: f64,
    /// Number of parameter coordinates to compare.
    pub sample: usize,
    pub seed: u64,
    /// Test hook: multiply the analytic gradient of this path by the factor.
    pub corrupt: Option<(String, f64)>,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: 1e-5,
            sample: 200,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_path: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients with central finite differences.
///
/// `build` records a scalar loss for the given parameters. Coordinates are
/// drawn so that every parameter tensor is visited at least once when
/// `sample` allows it; the rest are uniform over all coordinates. The
/// relative error of a coordinate is `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn finite_difference_check<F>(build: F, params: &ParameterStore, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<NodeId>,
{
    if !(opts.eps > 0.0) || opts.sample == 0 {
        return Err(Error::contract("finite-difference check needs eps > 0 and sample >= 1"));
    }
    let eval = |p: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = build(&mut g, p)?;
        Ok(g.value(root).item())
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut g = Graph::new();
    let root = build(&mut g, params)?;
    let mut grads = g.backward(root, params)?;
    if let Some((path, factor)) = &opts.corrupt {
        if let Some(t) = grads.get_mut(path) {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    let coords = sample_coordinates(params, opts.sample, opts.seed);
    let mut probe = params.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_path: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    for (path, index) in coords {
        let original = params.get(&path).expect("sampled from store").data()[index];
        probe.value_mut(&path).expect("present").data_mut()[index] = original + opts.eps;
        let up = eval(&probe)?;
        probe.value_mut(&path).expect("present").data_mut()[index] = original - opts.eps;
        let down = eval(&probe)?;
        probe.value_mut(&path).expect("present").data_mut()[index] = original;

        let numeric = (up - down) / (2.0 * opts.eps);
        let analytic = grads.get(&path).expect("every parameter has a gradient").data()[index];
        let denom = analytic.abs().max(numeric.abs()).max(1e-12);
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error || report.worst_path.is_empty() {
            report.max_rel_error = rel;
            report.worst_path = path;
            report.worst_index = index;
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

fn sample_coordinates(params: &ParameterStore, sample: usize, seed: u64) -> Vec<(String, usize)> {
    let sizes: Vec<(&str, usize)> = params.iter().map(|(p, e)| (p, e.value.len())).collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    let mut rng = rng_for(seed, 0x6772_6164);
    let mut chosen: BTreeSet<(usize, usize)> = BTreeSet::new();
    if sample >= total {
        for (i, &(_, n)) in sizes.iter().enumerate() {
            for j in 0..n {
                chosen.insert((i, j));
            }
        }
    } else {
        if sample >= sizes.len() {
            for (i, &(_, n)) in sizes.iter().enumerate() {
                chosen.insert((i, rng.random_range(0..n)));
            }
        }
        while chosen.len() < sample {
            let mut flat = rng.random_range(0..total);
            for (i, &(_, n)) in sizes.iter().enumerate() {
                if flat < n {
                    chosen.insert((i, flat));
                    break;
                }
                flat -= n;
            }
        }
    }
    chosen
        .into_iter()
        .map(|(i, j)| (sizes[i].0.to_string(), j))
        .collect()
}
