//! Central-difference gradient verification.
//!
//! A check rebuilds the forward pass from scratch for every probe, so the
//! closure must be a pure function of the leaf values it is handed. Checks
//! run in f64: analytic gradients from the tape, numeric gradients from
//! `(f(x+h) - f(x-h)) / 2h`.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::TensorData;

/// Step size for central differences. Near the f64 optimum `eps^(1/3)`.
pub const FD_STEP: f64 = 1e-5;

/// Error floor; keeps the relative error meaningful when both gradients
/// are close to zero.
pub const FD_FLOOR: f64 = 1e-3;

/// Outcome of one compared coordinate.
#[derive(Clone, Debug)]
pub struct CoordReport {
    pub leaf: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Worst observed coordinate plus the count checked.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordReport>,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Compare analytic and numeric gradients of a scalar-valued forward pass.
///
/// `leaves` seeds the graph inputs; `forward` maps those leaves to a scalar.
/// `coords` restricts probing to specific (leaf, flat-index) pairs; pass
/// `None` to probe every coordinate of every leaf.
pub fn check_scalar_fn<F>(
    leaves: &[TensorData<f64>],
    coords: Option<&[(usize, usize)]>,
    mut forward: F,
) -> Result<CheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|l| g.leaf(l.clone(), true)).collect();
    let out = forward(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect();
    drop(g);

    let all: Vec<(usize, usize)>;
    let probe: &[(usize, usize)] = match coords {
        Some(c) => c,
        None => {
            all = leaves
                .iter()
                .enumerate()
                .flat_map(|(li, l)| (0..l.numel()).map(move |ci| (li, ci)))
                .collect();
            &all
        }
    };

    let mut eval = |bumped: &[TensorData<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = bumped.iter().map(|l| g.leaf(l.clone(), false)).collect();
        let out = forward(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut report = CheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    let mut work: Vec<TensorData<f64>> = leaves.to_vec();
    for &(li, ci) in probe {
        let orig = work[li].data()[ci];
        work[li].data_mut()[ci] = orig + FD_STEP;
        let fp = eval(&work)?;
        work[li].data_mut()[ci] = orig - FD_STEP;
        let fm = eval(&work)?;
        work[li].data_mut()[ci] = orig;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let a = analytic[li][ci];
        let e = rel_err(a, numeric);
        report.checked += 1;
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some(CoordReport { leaf: li, coord: ci, analytic: a, numeric, rel_err: e });
        }
    }
    Ok(report)
}

/// Deterministically spread `count` probe coordinates across leaves,
/// striding through each flat buffer so large tensors are sampled evenly.
pub fn spread_coords(leaves: &[TensorData<f64>], count: usize) -> Vec<(usize, usize)> {
    let total: usize = leaves.iter().map(|l| l.numel()).sum();
    if total == 0 || count == 0 {
        return Vec::new();
    }
    let take = count.min(total);
    let mut out = Vec::with_capacity(take);
    for t in 0..take {
        // Fixed-point stride walk over the concatenated coordinate space.
        let flat = (t as u128 * total as u128 / take as u128) as usize;
        let mut rem = flat;
        for (li, l) in leaves.iter().enumerate() {
            if rem < l.numel() {
                out.push((li, rem));
                break;
            }
            rem -= l.numel();
        }
    }
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = TensorData::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check_scalar_fn(&[x], None, |g, vars| {
            let sq = g.mul(vars[0], vars[0])?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.passes(1e-6), "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn deliberately_wrong_gradient_is_caught() {
        // stop_grad hides half the dependency, so analytic != numeric
        // would be the bug; here the analytic side is the truth and the
        // numeric probe sees the full function, so the check must fail.
        let x = TensorData::new(vec![2], vec![0.3, 0.7]).unwrap();
        let r = check_scalar_fn(&[x], None, |g, vars| {
            let frozen = g.stop_grad(vars[0]);
            let prod = g.mul(vars[0], frozen)?;
            Ok(g.sum_all(prod))
        })
        .unwrap();
        assert!(!r.passes(1e-2), "expected mismatch, got {}", r.max_rel_err);
    }

    #[test]
    fn spread_coords_covers_all_when_count_exceeds_total() {
        let a = TensorData::<f64>::zeros(vec![2]);
        let b = TensorData::<f64>::zeros(vec![3]);
        let coords = spread_coords(&[a, b], 100);
        assert_eq!(coords.len(), 5);
        assert_eq!(coords[0], (0, 0));
        assert_eq!(coords[4], (1, 2));
    }
}
