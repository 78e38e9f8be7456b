//! Brute-force references used to validate the engine's update formulas on
//! small instances: an exact equality-constrained least-squares step solver
//! (two independent routes that must agree) and an unoptimized objective
//! evaluator. Nothing here touches the Cholesky factor, the correction
//! matrices, or any blocked machinery.

use thiserror::Error;

use crate::engine::MethodSpec;
use crate::linalg::Matrix;
use crate::problem::LayerProblem;
use crate::quant::{self};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("instance too large for the oracle: n = {0} > 64")]
    SizeGuard(usize),
}

/// One pinned-column least-squares step: minimize
/// `||dW * design - target||_F^2 + lambda * ||dW_free||^2` over per-row
/// update vectors whose pinned coordinate is fixed.
#[derive(Debug, Clone)]
pub struct ConstrainedLsProblem {
    /// Rows of X from the current column onward, (n - q) x k.
    pub design: Matrix,
    /// Per-row right-hand side, m x k.
    pub target: Matrix,
    /// Index of the pinned row within `design` (0 for a column step).
    pub pinned_index: usize,
    /// Per-row pinned value `c = q_col - w_col`.
    pub pinned_value: Vec<f64>,
    /// Ridge applied to the free coordinates; matches the engine's
    /// Hessian damping.
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct SolvedStep {
    /// m x (n - q) update, pinned coordinate exact.
    pub delta: Matrix,
    /// Set when a reduced system was rank-deficient and the minimum-norm
    /// solution was taken instead.
    pub rank_deficient: bool,
}

// ---- small self-contained dense helpers (deliberately not shared with
// ---- the linalg kernels the engine runs on)

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gaussian elimination with partial pivoting. Returns None when a pivot
/// collapses, signalling rank deficiency.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    for col in 0..n {
        let (piv, piv_val) = (col..n)
            .map(|r| (r, a[r][col].abs()))
            .fold((col, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if piv_val <= 1e-13 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in (col + 1)..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = b[r];
        for c in (r + 1)..n {
            s -= a[r][c] * x[c];
        }
        x[r] = s / a[r][r];
    }
    Some(x)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; used for the
/// minimum-norm fallback when the reduced normal matrix is singular.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off <= 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| a[i][i]).collect();
    (eig, v)
}

/// Minimum-norm solution of a symmetric (possibly singular) system.
fn pinv_solve(a: Vec<Vec<f64>>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let (eig, vecs) = jacobi_eigen(a);
    let emax = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = 1e-12 * emax.max(1.0);
    let mut x = vec![0.0; n];
    for j in 0..n {
        if eig[j].abs() <= cutoff {
            continue;
        }
        let coeff = (0..n).map(|i| vecs[i][j] * b[i]).sum::<f64>() / eig[j];
        for i in 0..n {
            x[i] += coeff * vecs[i][j];
        }
    }
    x
}

/// Variable-elimination route: substitute the pinned coordinate and solve
/// the reduced (damped) normal equations per row.
pub fn solve_constrained_ls(p: &ConstrainedLsProblem) -> Result<SolvedStep, OracleError> {
    let d = p.design.rows();
    let k = p.design.cols();
    let m = p.target.rows();
    if p.target.cols() != k {
        return Err(OracleError::Shape(format!(
            "target has {} samples, design has {k}",
            p.target.cols()
        )));
    }
    if p.pinned_index >= d || p.pinned_value.len() != m {
        return Err(OracleError::Shape("pinned index/value out of range".into()));
    }
    let free: Vec<usize> = (0..d).filter(|&i| i != p.pinned_index).collect();
    let nf = free.len();
    // Reduced normal matrix over the free rows.
    let mut normal = vec![vec![0.0; nf]; nf];
    for (a, &ra) in free.iter().enumerate() {
        for (b, &rb) in free.iter().enumerate() {
            normal[a][b] = dot(p.design.row(ra), p.design.row(rb));
        }
        normal[a][a] += p.lambda;
    }
    let pinned_row = p.design.row(p.pinned_index);

    let mut delta = Matrix::zeros(m, d);
    let mut rank_deficient = false;
    for r in 0..m {
        let c = p.pinned_value[r];
        // rhs_a = design[free_a] . (target_r - c * pinned_row)
        let rhs: Vec<f64> = free
            .iter()
            .map(|&ra| {
                let row = p.design.row(ra);
                dot(row, p.target.row(r)) - c * dot(row, pinned_row)
            })
            .collect();
        let v = if nf == 0 {
            Vec::new()
        } else {
            match solve_dense(normal.clone(), rhs.clone()) {
                Some(v) => v,
                None => {
                    rank_deficient = true;
                    pinv_solve(normal.clone(), &rhs)
                }
            }
        };
        let out = delta.row_mut(r);
        out[p.pinned_index] = c;
        for (a, &ra) in free.iter().enumerate() {
            out[ra] = v[a];
        }
    }
    Ok(SolvedStep {
        delta,
        rank_deficient,
    })
}

/// Bordered-KKT route: solve the full stationarity system with a Lagrange
/// multiplier for the pinned coordinate. Cross-check for the elimination
/// route; shares only the scalar Gaussian solver with it.
pub fn solve_constrained_ls_kkt(p: &ConstrainedLsProblem) -> Result<SolvedStep, OracleError> {
    let d = p.design.rows();
    let m = p.target.rows();
    if p.pinned_index >= d || p.pinned_value.len() != m {
        return Err(OracleError::Shape("pinned index/value out of range".into()));
    }
    // A = design design^T + lambda I (no penalty on the pinned coordinate;
    // its row gets the multiplier instead, so the ridge there is harmless
    // to the solution and kept for conditioning).
    let mut a = vec![vec![0.0; d + 1]; d + 1];
    for i in 0..d {
        for j in 0..d {
            a[i][j] = dot(p.design.row(i), p.design.row(j));
        }
        a[i][i] += p.lambda;
    }
    a[p.pinned_index][p.pinned_index] -= p.lambda;
    a[d][p.pinned_index] = 1.0;
    a[p.pinned_index][d] = 1.0;

    let mut delta = Matrix::zeros(m, d);
    let mut rank_deficient = false;
    for r in 0..m {
        let mut b = vec![0.0; d + 1];
        for i in 0..d {
            b[i] = dot(p.design.row(i), p.target.row(r));
        }
        b[d] = p.pinned_value[r];
        let sol = match solve_dense(a.clone(), b.clone()) {
            Some(s) => s,
            None => {
                rank_deficient = true;
                pinv_solve(a.clone(), &b)
            }
        };
        delta.row_mut(r).copy_from_slice(&sol[..d]);
    }
    Ok(SolvedStep {
        delta,
        rank_deficient,
    })
}

/// Largest relative KKT residual of a candidate solution, over rows.
pub fn kkt_residual(p: &ConstrainedLsProblem, step: &SolvedStep) -> f64 {
    let d = p.design.rows();
    let m = p.target.rows();
    let mut worst: f64 = 0.0;
    for r in 0..m {
        let delta = step.delta.row(r);
        // g = A delta - design target^T must vanish on free coordinates.
        let mut scale: f64 = 1.0;
        let mut res: f64 = 0.0;
        for i in 0..d {
            let mut g = -dot(p.design.row(i), p.target.row(r));
            for j in 0..d {
                g += dot(p.design.row(i), p.design.row(j)) * delta[j];
            }
            if i != p.pinned_index {
                g += p.lambda * delta[i];
                res = res.max(g.abs());
            }
            scale = scale.max(g.abs());
        }
        res = res.max((delta[p.pinned_index] - p.pinned_value[r]).abs());
        worst = worst.max(res / scale);
    }
    worst
}

/// Objective mode for [`full_objective`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveMode {
    /// `||Q X - W0 X||_F^2`
    Symmetric,
    /// `||Q X - W0 X~||_F^2`
    Asymmetric,
}

/// Frobenius-squared layer objective by direct dense products.
pub fn full_objective(
    q: &Matrix,
    w0: &Matrix,
    x: &Matrix,
    x_fp: &Matrix,
    mode: ObjectiveMode,
) -> Result<f64, OracleError> {
    if q.rows() != w0.rows() || q.cols() != w0.cols() || q.cols() != x.rows() {
        return Err(OracleError::Shape("objective operands disagree".into()));
    }
    let reference = match mode {
        ObjectiveMode::Symmetric => x,
        ObjectiveMode::Asymmetric => x_fp,
    };
    let mut total = 0.0;
    for r in 0..q.rows() {
        for s in 0..x.cols() {
            let mut qx = 0.0;
            let mut wx = 0.0;
            for j in 0..q.cols() {
                qx += q.get(r, j) * x.get(j, s);
                wx += w0.get(r, j) * reference.get(j, s);
            }
            let e = qx - wx;
            total += e * e;
        }
    }
    Ok(total)
}

/// Builds the per-column oracle step problem from engine-equivalent state:
/// current weights `w`, snapshot `w0`, dequantized column values, all in
/// the same (permuted) column order the engine runs in.
#[allow(clippy::too_many_arguments)]
pub fn step_problem(
    w: &Matrix,
    w0: &Matrix,
    dequant_col: &[f64],
    col: usize,
    x: &Matrix,
    x_fp: &Matrix,
    spec: &MethodSpec,
    lambda: f64,
) -> ConstrainedLsProblem {
    let n = w.cols();
    let k = x.cols();
    let m = w.rows();
    let d = n - col;
    let mut design = Matrix::zeros(d, k);
    for i in 0..d {
        design.row_mut(i).copy_from_slice(x.row(col + i));
    }
    let mut target = Matrix::zeros(m, k);
    for r in 0..m {
        let wq = w.get(r, col);
        let w0q = w0.get(r, col);
        let row = target.row_mut(r);
        for s in 0..k {
            let mut t = 0.0;
            if spec.use_p1 {
                t += wq * (x_fp.get(col, s) - x.get(col, s));
            }
            if spec.use_p2 {
                t += (w0q - wq) * x_fp.get(col, s);
            }
            row[s] = t;
        }
    }
    let pinned_value = (0..m).map(|r| dequant_col[r] - w.get(r, col)).collect();
    ConstrainedLsProblem {
        design,
        target,
        pinned_index: 0,
        pinned_value,
        lambda,
    }
}

/// End-to-end greedy reference: per column, quantize then apply the exact
/// constrained-least-squares update. No factorizations, no precomputed
/// corrections, no blocking.
pub fn greedy_oracle_run(problem: &LayerProblem, spec: &MethodSpec) -> Result<Matrix, OracleError> {
    let n = problem.in_features();
    if n > 64 {
        return Err(OracleError::SizeGuard(n));
    }
    let m = problem.out_features();
    let k = problem.samples();

    // Damping from the Hessian diagonal, computed without forming H.
    let diag: Vec<f64> = (0..n)
        .map(|i| dot(problem.quant_input.row(i), problem.quant_input.row(i)))
        .collect();
    let mean_diag = diag.iter().sum::<f64>() / n as f64;
    let mut mean_abs = 0.0;
    for i in 0..n {
        for j in 0..n {
            mean_abs += dot(problem.quant_input.row(i), problem.quant_input.row(j)).abs();
        }
    }
    mean_abs /= (n * n) as f64;
    let lambda = (spec.lambda_frac * mean_diag).max(1e-8 * (1.0 + mean_abs));

    // Column ordering mirrors the engine's.
    let perm: Vec<usize> = if spec.act_order {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| diag[b].partial_cmp(&diag[a]).unwrap().then(a.cmp(&b)));
        idx
    } else {
        (0..n).collect()
    };
    let mut w = Matrix::zeros(m, n);
    let mut x = Matrix::zeros(n, k);
    let mut x_fp = Matrix::zeros(n, k);
    for (j, &pj) in perm.iter().enumerate() {
        for r in 0..m {
            w.set(r, j, problem.weights.get(r, pj));
        }
        x.row_mut(j).copy_from_slice(problem.quant_input.row(pj));
        x_fp.row_mut(j).copy_from_slice(problem.fp_input.row(pj));
    }
    let w0 = w.clone();

    let width = spec.grid.group_width(n);
    let groups = spec.grid.num_groups(n);
    let group_of: Vec<usize> = (0..n)
        .map(|j| {
            if spec.group_original_order {
                perm[j] / width
            } else {
                j / width
            }
        })
        .collect();
    let mut members = vec![Vec::new(); groups];
    for (j, &g) in group_of.iter().enumerate() {
        members[g].push(j);
    }
    let mut scales: Vec<Option<Vec<f64>>> = vec![None; groups];

    let mut q_out = Matrix::zeros(m, n);
    for col in 0..n {
        let g = group_of[col];
        if scales[g].is_none() {
            let source = if spec.fit_from_snapshot { &w0 } else { &w };
            let fitted: Vec<f64> = (0..m)
                .map(|r| {
                    let vals: Vec<f64> = members[g].iter().map(|&c| source.get(r, c)).collect();
                    quant::fit_row_scale(&vals, spec.grid.bits, &spec.grid.clip_grid)
                })
                .collect();
            scales[g] = Some(fitted);
        }
        let row_scales = scales[g].as_ref().unwrap();
        let dequant: Vec<f64> = (0..m)
            .map(|r| quant::quantize_value(w.get(r, col), row_scales[r], spec.grid.qmax()).1)
            .collect();
        for r in 0..m {
            q_out.set(r, col, dequant[r]);
        }
        let step = solve_constrained_ls(&step_problem(
            &w, &w0, &dequant, col, &x, &x_fp, spec, lambda,
        ))?;
        for r in 0..m {
            let row = w.row_mut(r);
            for i in 0..(n - col) {
                row[col + i] += step.delta.get(r, i);
            }
        }
    }

    // Back to the original column order.
    let mut out = Matrix::zeros(m, n);
    for (j, &pj) in perm.iter().enumerate() {
        for r in 0..m {
            out.set(r, pj, q_out.get(r, j));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{seeded_matrix, seeded_problem};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn step_objective(p: &ConstrainedLsProblem, delta: &Matrix) -> f64 {
        // Damped objective the solver minimizes.
        let mut total = 0.0;
        for r in 0..delta.rows() {
            for s in 0..p.design.cols() {
                let mut pred = 0.0;
                for i in 0..p.design.rows() {
                    pred += delta.get(r, i) * p.design.get(i, s);
                }
                let e = pred - p.target.get(r, s);
                total += e * e;
            }
            for i in 0..p.design.rows() {
                if i != p.pinned_index {
                    total += p.lambda * delta.get(r, i) * delta.get(r, i);
                }
            }
        }
        total
    }

    fn seeded_step_problem(seed: u64, m: usize, d: usize, k: usize) -> ConstrainedLsProblem {
        ConstrainedLsProblem {
            design: seeded_matrix(d, k, seed),
            target: seeded_matrix(m, k, seed + 1),
            pinned_index: 0,
            pinned_value: (0..m).map(|r| 0.1 + 0.05 * r as f64).collect(),
            lambda: 0.02,
        }
    }

    #[test]
    fn zero_target_zero_pin_gives_zero_update() {
        let mut p = seeded_step_problem(4, 2, 3, 5);
        p.target = Matrix::zeros(2, 5);
        p.pinned_value = vec![0.0, 0.0];
        let s = solve_constrained_ls(&p).unwrap();
        assert!(s.delta.max_abs() < 1e-12);
    }

    #[test]
    fn last_column_has_no_freedom() {
        let p = seeded_step_problem(8, 2, 1, 5);
        let s = solve_constrained_ls(&p).unwrap();
        for r in 0..2 {
            assert_eq!(s.delta.get(r, 0), p.pinned_value[r]);
        }
    }

    #[test]
    fn elimination_and_kkt_routes_agree() {
        for seed in 0..10u64 {
            let p = seeded_step_problem(seed, 3, 6, 12);
            let a = solve_constrained_ls(&p).unwrap();
            let b = solve_constrained_ls_kkt(&p).unwrap();
            let err = a.delta.sub(&b.delta).unwrap().max_abs();
            let scale = a.delta.max_abs().max(1.0);
            assert!(err <= 1e-9 * scale, "seed={seed} err={err}");
            assert!(kkt_residual(&p, &a) <= 1e-9);
        }
    }

    #[test]
    fn pinned_constraint_is_exact() {
        let p = seeded_step_problem(7, 4, 5, 9);
        let s = solve_constrained_ls(&p).unwrap();
        for r in 0..4 {
            assert_eq!(s.delta.get(r, p.pinned_index), p.pinned_value[r]);
        }
    }

    #[test]
    fn perturbation_never_improves_the_solution() {
        let p = seeded_step_problem(11, 2, 6, 10);
        let s = solve_constrained_ls(&p).unwrap();
        let base = step_objective(&p, &s.delta);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let mut perturbed = s.delta.clone();
            for r in 0..perturbed.rows() {
                for i in 0..perturbed.cols() {
                    if i == p.pinned_index {
                        continue;
                    }
                    let v = perturbed.get(r, i) + 1e-3 * rng.gen_range(-1.0..1.0);
                    perturbed.set(r, i, v);
                }
            }
            let obj = step_objective(&p, &perturbed);
            assert!(obj >= base - 1e-12, "perturbation improved: {obj} < {base}");
        }
    }

    #[test]
    fn rank_deficient_system_is_flagged_and_consistent() {
        // Two identical design rows with no ridge: the reduced system is
        // singular and the minimum-norm solution is taken.
        let row = [1.0, 2.0, -1.0, 0.5];
        let mut design = Matrix::zeros(3, 4);
        design.row_mut(0).copy_from_slice(&[0.3, -0.6, 1.1, 0.9]);
        design.row_mut(1).copy_from_slice(&row);
        design.row_mut(2).copy_from_slice(&row);
        let p = ConstrainedLsProblem {
            design,
            target: seeded_matrix(2, 4, 5),
            pinned_index: 0,
            pinned_value: vec![0.2, -0.1],
            lambda: 0.0,
        };
        let s = solve_constrained_ls(&p).unwrap();
        assert!(s.rank_deficient);
        // The two duplicated coordinates must share the load equally.
        for r in 0..2 {
            assert!((s.delta.get(r, 1) - s.delta.get(r, 2)).abs() < 1e-8);
        }
    }

    #[test]
    fn full_objective_trivial_cases() {
        let p = seeded_problem(6, 3, 4, 8, 0.0);
        let v = full_objective(
            &p.weights,
            &p.weights,
            &p.quant_input,
            &p.fp_input,
            ObjectiveMode::Asymmetric,
        )
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn full_objective_scaling_degree_four() {
        let p = seeded_problem(8, 3, 4, 8, 0.1);
        let q = seeded_matrix(3, 4, 77);
        let base = full_objective(
            &q,
            &p.weights,
            &p.quant_input,
            &p.fp_input,
            ObjectiveMode::Symmetric,
        )
        .unwrap();
        let scale = |m: &Matrix, f: f64| {
            Matrix::new(m.rows(), m.cols(), m.data().iter().map(|v| f * v).collect()).unwrap()
        };
        let doubled = full_objective(
            &scale(&q, 2.0),
            &scale(&p.weights, 2.0),
            &scale(&p.quant_input, 2.0),
            &scale(&p.fp_input, 2.0),
            ObjectiveMode::Symmetric,
        )
        .unwrap();
        assert!((doubled / base - 16.0).abs() < 1e-9);
    }

    #[test]
    fn size_guard_rejects_large_instances() {
        let p = seeded_problem(1, 2, 65, 70, 0.0);
        assert!(matches!(
            greedy_oracle_run(&p, &MethodSpec::gptq()),
            Err(OracleError::SizeGuard(65))
        ));
    }
}
