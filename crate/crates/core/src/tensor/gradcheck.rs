use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, NodeId, Result, Tensor};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Inputs larger than this are checked on a seeded random subset of
    /// coordinates.
    pub max_coords_per_input: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            max_coords_per_input: 48,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub coords_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], with_grad: bool) -> Result<(Graph<f64>, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone(), with_grad)).collect();
    let mut out = f(&mut g, &ids)?;
    if g.value(out).len() != 1 {
        out = g.sum(out);
    }
    Ok((g, ids, out))
}

/// Compares reverse-mode gradients of `f` (reduced to a scalar by summation
/// when it is not one already) against central finite differences, in
/// double precision, for every input tensor.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let (mut g, ids, out) = evaluate(&f, inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(id).len()]))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        coords_checked: 0,
        tolerance: opts.tolerance,
        passed: true,
    };
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_input {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.max_coords_per_input).into_vec();
            v.sort_unstable();
            v
        };
        for i in coords {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + opts.step;
            let (g, _, o) = evaluate(&f, &probe, false)?;
            let plus = g.value(o).data()[0];
            probe[k].data_mut()[i] = orig - opts.step;
            let (g, _, o) = evaluate(&f, &probe, false)?;
            let minus = g.value(o).data()[0];
            probe[k].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[k][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.coords_checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst_input = k;
                report.worst_index = i;
            }
        }
    }
    report.passed = report.max_rel_error < opts.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_has_exact_unit_gradient() {
        let x = Tensor::from_fn([2, 3, 3], |c, y, x| (c + y * 3 + x) as f64 * 0.1);
        let report = gradcheck(|g, ids| Ok(g.sum(ids[0])), &[x], &GradcheckOptions::default()).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.coords_checked, 18);
    }
}
