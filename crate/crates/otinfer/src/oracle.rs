//! Exact finite-population references.
//!
//! On a population with finitely many atoms every quantity the inference
//! layer estimates — potentials, plan, costs, asymptotic variances — can be
//! computed to solver precision with the *true* weights and *direct* linear
//! solves. These oracles are used to pin regression values and to validate
//! the plug-in estimators, which must reproduce them exactly when handed
//! the population itself as a sample.

use crate::inference::{cond_influence, plan_influence};
use crate::measures::{build_cost, CostContext, CostSpec, DiscreteMeasure};
use crate::operators::{NeumannMode, OperatorContext};
use crate::sinkhorn::{
    divergence_parts, entropic_cost, plan_density, sinkhorn_cost, solve, PlanDensity,
    PotentialPair, DEFAULT_MAX_ITER,
};
use crate::stats::{weighted_cov, weighted_var};
use crate::{OtError, Result};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Tolerance for population-level solves.
pub const EXACT_TOL: f64 = 1e-13;

/// A fully known discrete population: both marginals, the cost context on
/// their supports, and the sampling ratio λ = lim m/(n+m) the asymptotic
/// variances are evaluated at.
#[derive(Debug, Clone)]
pub struct FinitePopulation {
    pub p: DiscreteMeasure,
    pub q: DiscreteMeasure,
    pub ctx: CostContext,
    pub lambda: f64,
}

impl FinitePopulation {
    pub fn new(
        p: DiscreteMeasure,
        q: DiscreteMeasure,
        spec: CostSpec,
        epsilon: f64,
        lambda: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(OtError::InvalidArgument(format!(
                "lambda must lie in [0, 1], got {lambda}"
            )));
        }
        for weight in p.weights().iter().chain(q.weights().iter()) {
            if *weight <= 0.0 {
                return Err(OtError::InvalidArgument(
                    "population weights must be strictly positive".into(),
                ));
            }
        }
        let ctx = build_cost(spec, &p, &q, epsilon)?;
        Ok(FinitePopulation { p, q, ctx, lambda })
    }

    /// Solve the population problem to [`EXACT_TOL`] and cache everything
    /// the variance oracles need.
    pub fn exact_solve(&self) -> Result<ExactSolution> {
        let (pot, report) = solve(&self.p, &self.q, &self.ctx, EXACT_TOL, DEFAULT_MAX_ITER)?;
        if !report.converged {
            return Err(OtError::NotConverged {
                residual: report.final_residual,
                iterations: report.iterations,
            });
        }
        let plan = plan_density(&pot, &self.ctx, &self.p, &self.q, EXACT_TOL)?;
        let op = OperatorContext::new(&plan, &self.p, &self.q, &self.ctx);
        let entropic = entropic_cost(&pot, &self.p, &self.q, &self.ctx);
        let sinkhorn = sinkhorn_cost(&plan, &self.ctx, &self.p, &self.q);
        Ok(ExactSolution {
            pot,
            plan,
            op,
            entropic_cost: entropic,
            sinkhorn_cost: sinkhorn,
        })
    }
}

/// Population solve with its derived objects.
pub struct ExactSolution {
    pub pot: PotentialPair,
    pub plan: PlanDensity,
    pub op: OperatorContext,
    pub entropic_cost: f64,
    pub sinkhorn_cost: f64,
}

/// Asymptotic variance of the entropic cost: ε²·[λ Var_P(f) + (1−λ) Var_Q(g)]
/// with the exact unit potentials and true weights.
pub fn exact_sigma_cost(pop: &FinitePopulation) -> Result<f64> {
    let sol = pop.exact_solve()?;
    Ok(sigma_cost_from(pop, &sol))
}

fn sigma_cost_from(pop: &FinitePopulation, sol: &ExactSolution) -> f64 {
    let var_f = weighted_var(pop.p.weights().view(), sol.pot.f().view());
    let var_g = weighted_var(pop.q.weights().view(), sol.pot.g().view());
    let eps2 = pop.ctx.epsilon() * pop.ctx.epsilon();
    eps2 * (pop.lambda * var_f + (1.0 - pop.lambda) * var_g)
}

/// Asymptotic variance of ∫η dπ under the entropic plan; influence vectors
/// come from [`crate::inference::plan_influence`] evaluated with the true
/// weights and the direct resolvent.
pub fn exact_sigma_plan(pop: &FinitePopulation, eta: &Array2<f64>) -> Result<f64> {
    let sol = pop.exact_solve()?;
    let (u, s) = plan_influence(&sol.op, eta, NeumannMode::Direct)?;
    let var_u = weighted_var(pop.p.weights().view(), u.view());
    let var_s = weighted_var(pop.q.weights().view(), s.view());
    Ok(pop.lambda * var_u + (1.0 - pop.lambda) * var_s)
}

/// Asymptotic variance of E_π[η(x,Y) | X=x]; `eta_row[j] = η(x, y_j)`.
pub fn exact_sigma_cond(
    pop: &FinitePopulation,
    x: &[f64],
    eta_row: &Array1<f64>,
) -> Result<f64> {
    let sol = pop.exact_solve()?;
    let (u_p, u_q) = cond_influence(
        &sol.op,
        &sol.pot,
        x,
        eta_row,
        &pop.q,
        &pop.ctx,
        NeumannMode::Direct,
    )?;
    let var_p = weighted_var(pop.p.weights().view(), u_p.view());
    let var_q = weighted_var(pop.q.weights().view(), u_q.view());
    Ok(pop.lambda * var_p + (1.0 - pop.lambda) * var_q)
}

/// Asymptotic variance of the Sinkhorn divergence:
/// ε²·[λ Var_P(f_PQ − (f_PP + g_PP)/2) + (1−λ) Var_Q(g_PQ − (f_QQ + g_QQ)/2)],
/// combining the potentials of the three underlying solves per atom.
pub fn exact_sigma_divergence(pop: &FinitePopulation) -> Result<f64> {
    let parts = divergence_parts(
        &pop.p,
        &pop.q,
        pop.ctx.spec(),
        pop.ctx.epsilon(),
        EXACT_TOL,
    )?;
    let infl_p = parts.pot_pq.f() - &((parts.pot_pp.f() + parts.pot_pp.g()) * 0.5);
    let infl_q = parts.pot_pq.g() - &((parts.pot_qq.f() + parts.pot_qq.g()) * 0.5);
    let var_p = weighted_var(pop.p.weights().view(), infl_p.view());
    let var_q = weighted_var(pop.q.weights().view(), infl_q.view());
    let eps2 = pop.ctx.epsilon() * pop.ctx.epsilon();
    Ok(eps2 * (pop.lambda * var_p + (1.0 - pop.lambda) * var_q))
}

/// Exact d×d asymptotic covariance of the entropic map at x: coordinate
/// targets η_k(x,y) = y_k share the conditional influence machinery, and
/// the covariance combines them pairwise on both sides.
pub fn exact_sigma_map(pop: &FinitePopulation, x: &[f64]) -> Result<Array2<f64>> {
    let sol = pop.exact_solve()?;
    let d = pop.q.dim();
    let mut parts_p = Vec::with_capacity(d);
    let mut parts_q = Vec::with_capacity(d);
    for k in 0..d {
        let eta_row = Array1::from_shape_fn(pop.q.len(), |j| pop.q.points()[(j, k)]);
        let (u_p, u_q) = cond_influence(
            &sol.op,
            &sol.pot,
            x,
            &eta_row,
            &pop.q,
            &pop.ctx,
            NeumannMode::Direct,
        )?;
        parts_p.push(u_p);
        parts_q.push(u_q);
    }
    let mut cov = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..=i {
            let c_p = weighted_cov(
                pop.p.weights().view(),
                parts_p[i].view(),
                parts_p[j].view(),
            );
            let c_q = weighted_cov(
                pop.q.weights().view(),
                parts_q[i].view(),
                parts_q[j].view(),
            );
            let value = pop.lambda * c_p + (1.0 - pop.lambda) * c_q;
            cov[(i, j)] = value;
            cov[(j, i)] = value;
        }
    }
    Ok(cov)
}

/// Exact colocalization curve R(t_k) = π(c ≤ t_k) with its asymptotic
/// covariance across thresholds.
pub fn exact_coloc(
    pop: &FinitePopulation,
    thresholds: &[f64],
) -> Result<(Vec<f64>, Array2<f64>)> {
    let sol = pop.exact_solve()?;
    let k = thresholds.len();
    let mut values = Vec::with_capacity(k);
    let mut us = Vec::with_capacity(k);
    let mut ss = Vec::with_capacity(k);
    for &t in thresholds {
        let eta = Array2::from_shape_fn((pop.p.len(), pop.q.len()), |(i, j)| {
            if pop.ctx.cost()[(i, j)] <= t {
                1.0
            } else {
                0.0
            }
        });
        values.push(crate::sinkhorn::plan_expectation(
            &sol.plan, &pop.p, &pop.q, &eta,
        )?);
        let (u, s) = plan_influence(&sol.op, &eta, NeumannMode::Direct)?;
        us.push(u);
        ss.push(s);
    }
    let mut cov = Array2::zeros((k, k));
    for i in 0..k {
        for j in 0..=i {
            let c_p = weighted_cov(pop.p.weights().view(), us[i].view(), us[j].view());
            let c_q = weighted_cov(pop.q.weights().view(), ss[i].view(), ss[j].view());
            let value = pop.lambda * c_p + (1.0 - pop.lambda) * c_q;
            cov[(i, j)] = value;
            cov[(j, i)] = value;
        }
    }
    Ok((values, cov))
}

/// Entropic plan by iterative Bregman projections on the Gibbs kernel —
/// an algorithm independent of the dual ascent used everywhere else.
/// Returns the joint plan (not a density) and a flag that is `false` when
/// the iteration budget ran out before both marginal L1 errors reached
/// 1e-12. Limited to n·m ≤ 400 entries.
pub fn brute_force_plan(pop: &FinitePopulation, budget: usize) -> Result<(Array2<f64>, bool)> {
    let (n, m) = (pop.p.len(), pop.q.len());
    if n * m > 400 {
        return Err(OtError::InvalidArgument(format!(
            "brute force limited to 400 plan entries, got {}",
            n * m
        )));
    }
    let v = pop.p.weights();
    let w = pop.q.weights();
    // Start from the independent coupling against the Gibbs kernel.
    let mut plan = Array2::from_shape_fn((n, m), |(i, j)| v[i] * w[j] * pop.ctx.gibbs()[(i, j)]);
    let mut converged = false;
    for _ in 0..budget {
        for i in 0..n {
            let row_sum: f64 = (0..m).map(|j| plan[(i, j)]).sum();
            let scale = v[i] / row_sum;
            for j in 0..m {
                plan[(i, j)] *= scale;
            }
        }
        for j in 0..m {
            let col_sum: f64 = (0..n).map(|i| plan[(i, j)]).sum();
            let scale = w[j] / col_sum;
            for i in 0..n {
                plan[(i, j)] *= scale;
            }
        }
        // After the column pass the columns are exact; only rows can drift.
        let row_err: f64 = (0..n)
            .map(|i| ((0..m).map(|j| plan[(i, j)]).sum::<f64>() - v[i]).abs())
            .sum();
        if row_err <= 1e-12 {
            converged = true;
            break;
        }
    }
    Ok((plan, converged))
}

/// Serializable description of a finite population, used for fixture files
/// and simulation configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub p_points: Vec<Vec<f64>>,
    pub p_weights: Vec<f64>,
    pub q_points: Vec<Vec<f64>>,
    pub q_weights: Vec<f64>,
    /// One of "sq_euclidean", "euclidean", "lp:<p>", "discrete".
    pub cost: String,
    pub epsilon: f64,
    pub lambda: f64,
}

impl PopulationSpec {
    pub fn build(&self) -> Result<FinitePopulation> {
        let p = measure_from_rows(&self.p_points, &self.p_weights)?;
        let q = measure_from_rows(&self.q_points, &self.q_weights)?;
        let spec = crate::measures::parse_cost_name(&self.cost)?;
        FinitePopulation::new(p, q, spec, self.epsilon, self.lambda)
    }
}

fn measure_from_rows(points: &[Vec<f64>], weights: &[f64]) -> Result<DiscreteMeasure> {
    if points.is_empty() {
        return Err(OtError::EmptySample);
    }
    let dim = points[0].len();
    if points.iter().any(|row| row.len() != dim) {
        return Err(OtError::DimensionMismatch(
            "population atoms have mixed dimensions".into(),
        ));
    }
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let arr = Array2::from_shape_vec((points.len(), dim), flat)
        .map_err(|e| OtError::DimensionMismatch(e.to_string()))?;
    DiscreteMeasure::new(arr, Array1::from_vec(weights.to_vec()))
}

/// Spec literal behind [`fixture_f1`], reusable in simulation configs.
pub fn fixture_f1_spec() -> PopulationSpec {
    PopulationSpec {
        p_points: vec![vec![0.0], vec![1.0]],
        p_weights: vec![0.5, 0.5],
        q_points: vec![vec![0.0], vec![2.0]],
        q_weights: vec![0.5, 0.5],
        cost: "sq_euclidean".into(),
        epsilon: 1.0,
        lambda: 0.5,
    }
}

/// Two uniform atoms against two uniform atoms: P on {0, 1}, Q on {0, 2},
/// squared Euclidean cost, ε = 1, balanced sampling.
pub fn fixture_f1() -> FinitePopulation {
    fixture_f1_spec().build().expect("fixture F1 is valid")
}

/// Spec literal behind [`fixture_f2`], reusable in simulation configs.
pub fn fixture_f2_spec() -> PopulationSpec {
    PopulationSpec {
        p_points: vec![vec![0.0], vec![1.0], vec![2.0]],
        p_weights: vec![0.5, 0.3, 0.2],
        q_points: vec![vec![0.0], vec![0.5], vec![1.5], vec![3.0]],
        q_weights: vec![0.25, 0.25, 0.25, 0.25],
        cost: "sq_euclidean".into(),
        epsilon: 1.0,
        lambda: 0.5,
    }
}

/// Weighted three-atom source against a uniform four-atom target:
/// P = (0.5, 0.3, 0.2) on {0, 1, 2}, Q uniform on {0, 0.5, 1.5, 3},
/// squared Euclidean cost, ε = 1, balanced sampling.
pub fn fixture_f2() -> FinitePopulation {
    fixture_f2_spec().build().expect("fixture F2 is valid")
}
