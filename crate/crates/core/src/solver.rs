//! One-dimensional root finders for averaged estimating equations.
//!
//! The averaged equations are either step functions of `theta1` that jump at
//! observed outcomes, or continuous piecewise-linear functions with kinks at
//! observed outcomes, so both admit exact solutions on the candidate grid.

use crate::error::{LdmlError, Result};

/// Solution of a step equation together with the smallest residual on the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSolution {
    pub theta: f64,
    pub residual: f64,
}

/// Solve `g(theta) = offset + sum_{y_i <= theta} w_i` over the observed `y`.
///
/// Returns the observed `y` minimizing `|g(y)|`, ties broken toward the
/// smallest `y`. With `monotone` (all weights nonnegative) the sign change is
/// located by binary search, otherwise every candidate is scanned.
pub fn solve_step_equation(points: &[(f64, f64)], offset: f64, monotone: bool) -> Result<StepSolution> {
    if points.is_empty() {
        return Err(LdmlError::EmptyPoints);
    }
    if let Some(p) = points.iter().find(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(LdmlError::SolverNoCandidate(format!("non-finite point {p:?}")));
    }
    let (ys, gs) = step_values(points, offset);
    let best = if monotone && points.iter().all(|p| p.1 >= 0.0) {
        monotone_argmin(&gs)
    } else {
        scan_argmin(&gs)
    };
    Ok(StepSolution {
        theta: ys[best],
        residual: gs[best].abs(),
    })
}

/// Distinct sorted candidates and `g` at each of them.
pub(crate) fn step_values(points: &[(f64, f64)], offset: f64) -> (Vec<f64>, Vec<f64>) {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ys = Vec::with_capacity(sorted.len());
    let mut gs = Vec::with_capacity(sorted.len());
    let mut acc = offset;
    for (i, &(y, w)) in sorted.iter().enumerate() {
        acc += w;
        let last_of_tie = sorted.get(i + 1).is_none_or(|next| next.0 != y);
        if last_of_tie {
            ys.push(y);
            gs.push(acc);
        }
    }
    (ys, gs)
}

fn scan_argmin(gs: &[f64]) -> usize {
    let mut best = 0;
    for (j, g) in gs.iter().enumerate() {
        if g.abs() < gs[best].abs() {
            best = j;
        }
    }
    best
}

fn monotone_argmin(gs: &[f64]) -> usize {
    let idx = gs.partition_point(|&g| g < 0.0);
    let mut best = match idx {
        0 => 0,
        i if i == gs.len() => i - 1,
        i if gs[i - 1].abs() <= gs[i].abs() => i - 1,
        i => i,
    };
    // flat stretches share |g|; the smallest outcome wins
    while best > 0 && gs[best - 1] == gs[best] {
        best -= 1;
    }
    best
}

/// Root of `f(theta) = c0 + c1 theta + sum_i b_i max(y_i - theta, 0)`.
///
/// `f` is continuous and piecewise linear with kinks at the `y_i`. The first
/// root in increasing `theta` is returned, solved exactly on its linear piece.
pub fn solve_piecewise_linear(kinks: &[(f64, f64)], c0: f64, c1: f64) -> Result<f64> {
    let mut sorted: Vec<(f64, f64)> = kinks.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let m = sorted.len();
    // suffix sums over kinks strictly above position j
    let mut sb = vec![0.0; m + 1];
    let mut sby = vec![0.0; m + 1];
    for j in (0..m).rev() {
        sb[j] = sb[j + 1] + sorted[j].1;
        sby[j] = sby[j + 1] + sorted[j].1 * sorted[j].0;
    }
    // on the piece where the kinks at positions >= j are active: f = a + s * theta
    let piece = |j: usize| (c0 + sby[j], c1 - sb[j]);
    let eval = |j: usize, theta: f64| {
        let (a, s) = piece(j);
        a + s * theta
    };
    let linear_root = |j: usize| {
        let (a, s) = piece(j);
        (s != 0.0).then(|| -a / s)
    };

    if m == 0 {
        return linear_root(0).ok_or_else(|| LdmlError::SolverNoCandidate("flat linear equation".into()));
    }
    // f at each kink: kink j itself contributes zero there
    let fk: Vec<f64> = (0..m).map(|j| eval(j + 1, sorted[j].0)).collect();
    if fk[0] == 0.0 {
        return Ok(sorted[0].0);
    }
    // left of the smallest kink every kink is active
    if let Some(r) = linear_root(0) {
        if r < sorted[0].0 && (fk[0] > 0.0) == (piece(0).1 > 0.0) {
            return Ok(r);
        }
    }
    for j in 1..m {
        if fk[j] == 0.0 {
            return Ok(sorted[j].0);
        }
        if (fk[j - 1] < 0.0) != (fk[j] < 0.0) {
            // active set between kinks j-1 and j is {j, ..}
            let r = linear_root(j).expect("sign change implies nonzero slope");
            return Ok(r.clamp(sorted[j - 1].0, sorted[j].0));
        }
    }
    if let Some(r) = linear_root(m) {
        if r >= sorted[m - 1].0 {
            return Ok(r);
        }
    }
    Err(LdmlError::SolverNoCandidate(
        "piecewise-linear equation has no sign change".into(),
    ))
}

/// Root search for an arbitrary scalar equation: the candidate with the
/// smallest `|f|`, refined by bisection when a sign change brackets a smaller
/// residual.
pub fn solve_scan_bisect(f: impl Fn(f64) -> f64, candidates: &[f64]) -> Result<StepSolution> {
    let mut cands: Vec<f64> = candidates.iter().copied().filter(|c| c.is_finite()).collect();
    if cands.is_empty() {
        return Err(LdmlError::EmptyPoints);
    }
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let vals: Vec<f64> = cands.iter().map(|&c| f(c)).collect();
    let best = scan_argmin(&vals);
    let mut sol = StepSolution {
        theta: cands[best],
        residual: vals[best].abs(),
    };
    if let Some(j) = (1..cands.len()).find(|&j| (vals[j - 1] < 0.0) != (vals[j] < 0.0)) {
        let (mut lo, mut hi) = (cands[j - 1], cands[j]);
        let lo_neg = vals[j - 1] < 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let v = f(mid);
            if v.abs() < sol.residual {
                sol = StepSolution {
                    theta: mid,
                    residual: v.abs(),
                };
            }
            if (v < 0.0) == lo_neg {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    Ok(sol)
}
