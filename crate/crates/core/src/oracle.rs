//! Direct convex solvers on small finite state spaces, used to check the
//! closed-form tilts and barycentres. They work in the primal variable q and
//! assume nothing about the exponential form of the solution.

use nalgebra::{DMatrix, DVector};

use crate::error::{arg, Error, Result};
use crate::scenario::ConditionalSampleSet;
use crate::sensitivity::PhiMatrix;
use crate::solver::{solve_constrained, SolverOptions};
use crate::tilt::BinScheme;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteState {
    pub d: Vec<f64>,
    pub y: f64,
    pub u: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSpace {
    pub states: Vec<DiscreteState>,
    pub p: Vec<f64>,
    pub bins: Vec<usize>,
}

pub const MAX_STATES: usize = 4096;
pub const KKT_TOL: f64 = 1e-10;

impl DiscreteSpace {
    pub fn new(states: Vec<DiscreteState>, p: Vec<f64>, bins: Vec<usize>) -> Result<Self> {
        let k = states.len();
        if k == 0 || k > MAX_STATES || p.len() != k || bins.len() != k {
            return Err(arg("discrete space needs 1..=4096 states with one probability and bin each"));
        }
        if p.iter().any(|&v| !(v > 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(arg("reference probabilities must be positive and sum to one"));
        }
        Ok(DiscreteSpace { states, p, bins })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Rows 1{bin = b} with targets P(bin = b): Q keeps every bin's mass.
    pub fn bin_mass_rows(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let nb = self.bins.iter().max().map_or(0, |b| b + 1);
        let mut rows = vec![vec![0.0; self.len()]; nb];
        let mut targets = vec![0.0; nb];
        for (k, &b) in self.bins.iter().enumerate() {
            rows[b][k] = 1.0;
            targets[b] += self.p[k];
        }
        (rows, targets)
    }

    pub fn expectation(&self, f: &[f64]) -> f64 {
        self.p.iter().zip(f).map(|(p, v)| p * v).sum()
    }
}

/// Objective Σᵢ πᵢ Σ_k q_k ln(q_k / refᵢ_k) over the simplex, restricted to
/// states where every reference with πᵢ > 0 is positive.
struct Problem<'a> {
    refs: &'a [Vec<f64>],
    pi: &'a [f64],
    a: DMatrix<f64>,
    b: DVector<f64>,
    support: Vec<usize>,
}

impl Problem<'_> {
    fn grad(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            q.len(),
            self.support.iter().enumerate().map(|(s, &k)| {
                let mut g = 0.0;
                for (r, &w) in self.refs.iter().zip(self.pi) {
                    if w > 0.0 {
                        g += w * ((q[s] / r[k]).ln() + 1.0);
                    }
                }
                g
            }),
        )
    }

    fn hess_diag(&self, q: &DVector<f64>) -> DVector<f64> {
        let wsum: f64 = self.pi.iter().sum();
        q.map(|v| wsum / v)
    }
}

fn pinv_solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = 1e-13 * smax.max(1e-300);
    svd.solve(rhs, eps).unwrap_or_else(|_| DVector::zeros(rhs.len()))
}

/// Frank–Wolfe on ‖Aq − b‖² over the simplex. Returns the final residual
/// Aq − b and the certified lower bound on min ‖Aq − b‖².
fn phase_one(a: &DMatrix<f64>, b: &DVector<f64>, q0: &DVector<f64>) -> (DVector<f64>, f64) {
    let mut q = q0.clone();
    let mut lower = 0.0f64;
    let mut v = a * &q - b;
    for _ in 0..20_000 {
        let f = v.norm_squared();
        if f <= 1e-26 {
            return (v, 0.0);
        }
        let grad = 2.0 * a.transpose() * &v;
        let (s, _) = grad.argmin();
        let gap = grad.dot(&q) - grad[s];
        lower = lower.max(f - gap);
        if lower > 1e-16 {
            return (v, lower);
        }
        // exact line search towards vertex s
        let dir_v = a.column(s) - (a * &q);
        let denom = dir_v.norm_squared();
        if denom <= 0.0 {
            break;
        }
        let t = (-(v.dot(&dir_v)) / denom).clamp(0.0, 1.0);
        q *= 1.0 - t;
        q[s] += t;
        v = a * &q - b;
    }
    (v, lower)
}

fn solve(problem: &Problem, n_states: usize) -> Result<Vec<f64>> {
    let s = problem.support.len();
    let a = &problem.a;
    let b = &problem.b;
    // start from the normalized first reference with positive weight
    let r0 = problem.refs.iter().zip(problem.pi).find(|(_, &w)| w > 0.0).map(|(r, _)| r).unwrap();
    let z: f64 = problem.support.iter().map(|&k| r0[k]).sum();
    let mut q = DVector::from_iterator(s, problem.support.iter().map(|&k| r0[k] / z));
    let (v, lower) = phase_one(a, b, &q);
    if lower > 1e-16 {
        return Err(Error::Infeasible { certificate: v.iter().cloned().collect(), gap: lower.sqrt() });
    }
    let mut nu = DVector::zeros(a.nrows());
    let residual = |q: &DVector<f64>, nu: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        (problem.grad(q) + a.transpose() * nu, a * q - b)
    };
    for _ in 0..500 {
        let (rd, rp) = residual(&q, &nu);
        let kkt = rd.amax().max(rp.amax());
        if kkt <= KKT_TOL {
            let mut out = vec![0.0; n_states];
            for (i, &k) in problem.support.iter().enumerate() {
                out[k] = q[i];
            }
            return Ok(out);
        }
        let hinv = problem.hess_diag(&q).map(|h| 1.0 / h);
        let g = problem.grad(&q);
        // A H⁻¹ Aᵀ w = (Aq − b) − A H⁻¹ ∇f, then Δq = −H⁻¹(∇f + Aᵀw)
        let mut ah = a.clone();
        for (j, mut col) in ah.column_iter_mut().enumerate() {
            col *= hinv[j];
        }
        let schur = &ah * a.transpose();
        let rhs = &rp - &ah * &g;
        let w = pinv_solve(&schur, &rhs);
        let dq = -(hinv.component_mul(&(&g + a.transpose() * &w)));
        let dnu = &w - &nu;
        let norm0 = (rd.norm_squared() + rp.norm_squared()).sqrt();
        let mut t = 1.0f64;
        while (0..s).any(|i| q[i] + t * dq[i] <= 0.0) {
            t *= 0.5;
        }
        loop {
            let qt = &q + t * &dq;
            let nut = &nu + t * &dnu;
            let (a1, a2) = residual(&qt, &nut);
            let nrm = (a1.norm_squared() + a2.norm_squared()).sqrt();
            if nrm <= (1.0 - 0.01 * t) * norm0 || t < 1e-12 {
                q = qt;
                nu = nut;
                break;
            }
            t *= 0.5;
        }
    }
    let (rd, rp) = residual(&q, &nu);
    Err(Error::NotConverged { iterations: 500, residual: rd.amax().max(rp.amax()) })
}

fn build<'a>(
    space: &DiscreteSpace,
    refs: &'a [Vec<f64>],
    pi: &'a [f64],
    rows: &[Vec<f64>],
    targets: &[f64],
) -> Result<Problem<'a>> {
    let k = space.len();
    if rows.len() != targets.len() || rows.iter().any(|r| r.len() != k) {
        return Err(arg("constraint rows must span the state space"));
    }
    let support: Vec<usize> = (0..k).filter(|&j| refs.iter().zip(pi).all(|(r, &w)| w == 0.0 || r[j] > 0.0)).collect();
    if support.is_empty() {
        return Err(Error::Infeasible { certificate: vec![], gap: 1.0 });
    }
    let m = rows.len() + 1;
    let mut a = DMatrix::zeros(m, support.len());
    let mut b = DVector::zeros(m);
    for (i, row) in rows.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            a[(i, c)] = row[j];
        }
        b[i] = targets[i];
    }
    for c in 0..support.len() {
        a[(m - 1, c)] = 1.0;
    }
    b[m - 1] = 1.0;
    Ok(Problem { refs, pi, a, b, support })
}

/// argmin Σ q log(q/p) s.t. A q = b, Σ q = 1, q ≥ 0.
pub fn project_kl(space: &DiscreteSpace, rows: &[Vec<f64>], targets: &[f64]) -> Result<Vec<f64>> {
    let refs = vec![space.p.clone()];
    let pi = [1.0];
    let problem = build(space, &refs, &pi, rows, targets)?;
    solve(&problem, space.len())
}

/// argmin Σᵢ πᵢ D_KL(q ‖ qᵢ), optionally subject to E^q[Y] = E^P[Y].
pub fn project_barycentre(
    space: &DiscreteSpace,
    members: &[Vec<f64>],
    pi: &[f64],
    expectation: bool,
) -> Result<Vec<f64>> {
    if members.len() != pi.len() || members.iter().any(|m| m.len() != space.len()) {
        return Err(arg("one weight per member, members over the state space"));
    }
    let (rows, targets) = if expectation {
        let y: Vec<f64> = space.states.iter().map(|s| s.y).collect();
        let t = space.expectation(&y);
        (vec![y], vec![t])
    } else {
        (vec![], vec![])
    };
    let problem = build(space, members, pi, &rows, &targets)?;
    solve(&problem, space.len())
}

/// Σ q log(q / p).
pub fn kl_discrete(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .map(|(&a, &b)| {
            if a == 0.0 {
                0.0
            } else if b == 0.0 {
                f64::INFINITY
            } else {
                a * (a / b).ln()
            }
        })
        .sum()
}

/// Closed-form tilt against the direct projection on the same sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossCheck {
    /// sup_k |r_k / K − q_k|.
    pub sup_diff: f64,
    pub kl_closed: f64,
    pub kl_oracle: f64,
}

/// Treats the sample as K equally likely states, bins taken from the ranks,
/// and projects with the constraints the solver uses for `cols`.
pub fn cross_check(
    samples: &ConditionalSampleSet,
    phi: &PhiMatrix,
    cols: &[usize],
    expectation: bool,
    bins: &BinScheme,
    opts: &SolverOptions,
) -> Result<CrossCheck> {
    let k = samples.len();
    if k > MAX_STATES {
        return Err(arg(format!("oracle cross-check needs at most {MAX_STATES} samples, got {k}")));
    }
    let closed = solve_constrained(samples, phi, cols, expectation, bins, opts, None)?;
    let states =
        (0..k).map(|j| DiscreteState { d: samples.d_row(j).to_vec(), y: samples.y[j], u: samples.u[j] }).collect();
    let labels = samples.u.iter().map(|&u| bins.bin(u)).collect();
    let space = DiscreteSpace::new(states, vec![1.0 / k as f64; k], labels)?;
    let (mut rows, mut targets) = space.bin_mass_rows();
    for &i in cols {
        rows.push(phi.column(i));
        targets.push(0.0);
    }
    if expectation {
        rows.push(samples.y.clone());
        targets.push(space.expectation(&samples.y));
    }
    let q = project_kl(&space, &rows, &targets)?;
    let sup_diff = closed.weights.r.iter().zip(&q).fold(0.0f64, |a, (r, q)| a.max((r / k as f64 - q).abs()));
    Ok(CrossCheck { sup_diff, kl_closed: closed.kl, kl_oracle: kl_discrete(&q, &space.p) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space2() -> DiscreteSpace {
        let states =
            vec![DiscreteState { d: vec![1.0], y: 0.0, u: 0.5 }, DiscreteState { d: vec![-1.0], y: 1.0, u: 0.5 }];
        DiscreteSpace::new(states, vec![0.75, 0.25], vec![0, 0]).unwrap()
    }

    #[test]
    fn two_state_projection_closed_form() {
        let s = space2();
        let q = project_kl(&s, &[vec![1.0, -1.0]], &[0.0]).unwrap();
        assert!((q[0] - 0.5).abs() < 1e-12 && (q[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn feasible_reference_is_fixed_point() {
        let s = space2();
        let q = project_kl(&s, &[vec![1.0, -1.0]], &[0.5]).unwrap();
        assert!((q[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn infeasible_constraint_certified() {
        let s = space2();
        let e = project_kl(&s, &[vec![1.0, -1.0]], &[2.0]).unwrap_err();
        match e {
            Error::Infeasible { certificate, gap } => {
                assert!(gap > 0.5);
                assert!(certificate[0] < 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identical_members_give_member() {
        let s = space2();
        let m = vec![0.4, 0.6];
        let q = project_barycentre(&s, &[m.clone(), m.clone()], &[0.3, 0.7], false).unwrap();
        assert!((q[0] - 0.4).abs() < 1e-12);
    }
}
