//! Log-domain Sinkhorn solver and the quantities derived from its output:
//! plan densities, entropic and Sinkhorn costs, the Sinkhorn divergence,
//! canonical potential extension, and plan/conditional expectations.
//!
//! The solver always works on the unit-regularized problem `c/ε`, so the
//! stored potentials are the ε=1 potentials of the scaled cost. The
//! entropic cost is multiplied back by `ε` on the way out; plan-density
//! expectations need no rescaling because the density `ξ` is the same for
//! both formulations.

use crate::measures::{CostContext, CostSpec, DiscreteMeasure};
use crate::{OtError, Result};
use ndarray::{Array1, Array2};

/// Default iteration cap; non-convergence is reported, not fatal.
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Dual potentials of the unit problem, normalized so that ∫g dQ = 0
/// (the additive gauge is carried entirely by `f`).
#[derive(Debug, Clone)]
pub struct PotentialPair {
    f: Array1<f64>,
    g: Array1<f64>,
}

impl PotentialPair {
    pub fn f(&self) -> &Array1<f64> {
        &self.f
    }

    pub fn g(&self) -> &Array1<f64> {
        &self.g
    }
}

/// Diagnostics of one solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    /// Max of the two fixed-point residuals evaluated at the returned pair.
    pub final_residual: f64,
    pub converged: bool,
    /// |primal − dual| of the ε-problem at the returned pair.
    pub duality_gap: f64,
}

/// The density ξ = C e^{f⊕g} of the entropic plan w.r.t. P⊗Q, with its
/// weighted marginals cached (both should be the all-ones vector).
#[derive(Debug, Clone)]
pub struct PlanDensity {
    xi: Array2<f64>,
    row_marginals: Array1<f64>,
    col_marginals: Array1<f64>,
}

impl PlanDensity {
    pub fn xi(&self) -> &Array2<f64> {
        &self.xi
    }

    pub fn row_marginals(&self) -> &Array1<f64> {
        &self.row_marginals
    }

    pub fn col_marginals(&self) -> &Array1<f64> {
        &self.col_marginals
    }

    /// Largest absolute deviation of any weighted marginal from 1.
    pub fn marginal_residual(&self) -> f64 {
        let row = self
            .row_marginals
            .iter()
            .fold(0.0f64, |acc, r| acc.max((r - 1.0).abs()));
        self.col_marginals
            .iter()
            .fold(row, |acc, c| acc.max((c - 1.0).abs()))
    }
}

/// log Σ_k exp(a_k) with max-subtraction; −∞ entries drop out.
fn logsumexp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = terms.map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

/// Solve the unit-regularized dual by alternating log-domain updates
///
/// ```text
/// f_i ← −log Σ_j w_j C_ij e^{g_j},   g_j ← −log Σ_i v_i C_ij e^{f_i}
/// ```
///
/// until the sup-norm of both fixed-point residuals is ≤ `tol`, then
/// renormalize so ∫g dQ = 0. Non-convergence is reported in the
/// [`SolveReport`]; NaNs are a hard error.
pub fn solve(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    ctx: &CostContext,
    tol: f64,
    max_iter: usize,
) -> Result<(PotentialPair, SolveReport)> {
    let (n, m) = (p.len(), q.len());
    if ctx.nrows() != n || ctx.ncols() != m {
        return Err(OtError::DimensionMismatch(format!(
            "cost table {}×{} vs measures {n}×{m}",
            ctx.nrows(),
            ctx.ncols()
        )));
    }
    if !(tol > 0.0) {
        return Err(OtError::InvalidArgument(format!("tol must be positive, got {tol}")));
    }

    // lk = log C = −c/ε, plus a transposed copy so both sweeps stream rows.
    let lk = -ctx.unit_cost();
    let lk_t = lk.t().to_owned();
    let log_v: Array1<f64> = p.weights().mapv(f64::ln);
    let log_w: Array1<f64> = q.weights().mapv(f64::ln);

    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    let mut bj = Array1::<f64>::zeros(m); // log w_j + g_j
    let mut ai = Array1::<f64>::zeros(n); // log v_i + f_i
    let mut iterations = 0;
    let mut loop_residual = f64::INFINITY;

    while iterations < max_iter {
        // f-sweep. The change |f_new − f| is exactly the f-equation
        // residual of the incoming pair, because g was made exact for the
        // old f by the previous sweep.
        for j in 0..m {
            bj[j] = log_w[j] + g[j];
        }
        let mut res_f = 0.0f64;
        for i in 0..n {
            let row = lk.row(i);
            let fi = -logsumexp(row.iter().zip(bj.iter()).map(|(l, b)| l + b));
            if iterations > 0 {
                res_f = res_f.max((fi - f[i]).abs());
            } else {
                res_f = f64::INFINITY;
            }
            f[i] = fi;
        }

        // g-sweep against the fresh f.
        for i in 0..n {
            ai[i] = log_v[i] + f[i];
        }
        let mut res_g = 0.0f64;
        for j in 0..m {
            let col = lk_t.row(j);
            let gj = -logsumexp(col.iter().zip(ai.iter()).map(|(l, a)| l + a));
            res_g = res_g.max((gj - g[j]).abs());
            g[j] = gj;
        }

        iterations += 1;
        loop_residual = res_f.max(res_g);
        // Stop with a safety margin; the returned residual is re-certified
        // below on the final normalized pair.
        if loop_residual <= 0.5 * tol {
            break;
        }
    }

    if f.iter().chain(g.iter()).any(|v| v.is_nan()) {
        return Err(OtError::Numeric(format!(
            "NaN potential after {iterations} iterations"
        )));
    }

    // Canonical normalization ∫g dQ = 0; residuals are shift-invariant.
    let offset = crate::stats::weighted_mean(q.weights().view(), g.view());
    g.mapv_inplace(|gj| gj - offset);
    f.mapv_inplace(|fi| fi + offset);

    // Certify both fixed-point residuals at the pair we actually return.
    let mut residual = 0.0f64;
    for j in 0..m {
        bj[j] = log_w[j] + g[j];
    }
    for i in 0..n {
        let lse = logsumexp(lk.row(i).iter().zip(bj.iter()).map(|(l, b)| l + b));
        residual = residual.max((f[i] + lse).abs());
    }
    for i in 0..n {
        ai[i] = log_v[i] + f[i];
    }
    for j in 0..m {
        let lse = logsumexp(lk_t.row(j).iter().zip(ai.iter()).map(|(l, a)| l + a));
        residual = residual.max((g[j] + lse).abs());
    }
    let converged = residual <= tol && loop_residual <= tol;

    let pair = PotentialPair { f, g };
    let duality_gap = duality_gap(&pair, p, q, ctx);
    Ok((
        pair,
        SolveReport {
            iterations,
            final_residual: residual,
            converged,
            duality_gap,
        },
    ))
}

/// |primal − dual| of the ε-problem. With `log ξ = f + g − c/ε` the KL term
/// telescopes against the transport term, leaving `primal_unit = ∫(f⊕g) dπ`.
fn duality_gap(pot: &PotentialPair, p: &DiscreteMeasure, q: &DiscreteMeasure, ctx: &CostContext) -> f64 {
    let cunit = ctx.unit_cost();
    let (v, w) = (p.weights(), q.weights());
    let mut mass = 0.0; // ∫ C e^{f+g} dP⊗Q
    let mut primal = 0.0;
    for i in 0..p.len() {
        for j in 0..q.len() {
            let xi = (pot.f[i] + pot.g[j] - cunit[(i, j)]).exp();
            let vw = v[i] * w[j];
            mass += vw * xi;
            primal += vw * xi * (pot.f[i] + pot.g[j]);
        }
    }
    let dual = crate::stats::weighted_mean(v.view(), pot.f.view())
        + crate::stats::weighted_mean(w.view(), pot.g.view())
        + (1.0 - mass);
    ctx.epsilon() * (primal - dual).abs()
}

/// Materialize ξ = C e^{f⊕g} and check its weighted marginals.
///
/// `tol` is the solver tolerance the potentials were produced with;
/// marginal deviations above `100·tol` indicate a non-optimal pair.
pub fn plan_density(
    pot: &PotentialPair,
    ctx: &CostContext,
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    tol: f64,
) -> Result<PlanDensity> {
    let (n, m) = (p.len(), q.len());
    let cunit = ctx.unit_cost();
    let xi = Array2::from_shape_fn((n, m), |(i, j)| {
        (pot.f[i] + pot.g[j] - cunit[(i, j)]).exp()
    });
    let mut row_marginals = Array1::zeros(n);
    let mut col_marginals = Array1::zeros(m);
    for i in 0..n {
        for j in 0..m {
            row_marginals[i] += q.weights()[j] * xi[(i, j)];
            col_marginals[j] += p.weights()[i] * xi[(i, j)];
        }
    }
    let plan = PlanDensity {
        xi,
        row_marginals,
        col_marginals,
    };
    let residual = plan.marginal_residual();
    if residual > 100.0 * tol {
        return Err(OtError::NonOptimal(residual));
    }
    Ok(plan)
}

/// Entropic optimal transport cost `S_ε(P,Q)`, evaluated from the dual:
/// `ε · [∫f dP + ∫g dQ + (1 − ∫C e^{f+g} dP⊗Q)]`. The bracket vanishes at
/// optimality and is kept as a first-order correction.
pub fn entropic_cost(
    pot: &PotentialPair,
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    ctx: &CostContext,
) -> f64 {
    let cunit = ctx.unit_cost();
    let mut mass = 0.0;
    for i in 0..p.len() {
        for j in 0..q.len() {
            mass += p.weights()[i]
                * q.weights()[j]
                * (pot.f[i] + pot.g[j] - cunit[(i, j)]).exp();
        }
    }
    let dual = crate::stats::weighted_mean(p.weights().view(), pot.f.view())
        + crate::stats::weighted_mean(q.weights().view(), pot.g.view())
        + (1.0 - mass);
    ctx.epsilon() * dual
}

/// Sinkhorn cost d_S = E_π[c(X,Y)] = Σ_ij v_i w_j ξ_ij c_ij (raw cost).
pub fn sinkhorn_cost(
    plan: &PlanDensity,
    ctx: &CostContext,
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        for j in 0..q.len() {
            total += p.weights()[i] * q.weights()[j] * plan.xi[(i, j)] * ctx.cost()[(i, j)];
        }
    }
    total
}

/// Expectation of a bounded evaluation table η under the entropic plan.
pub fn plan_expectation(
    plan: &PlanDensity,
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    eta: &Array2<f64>,
) -> Result<f64> {
    if eta.nrows() != p.len() || eta.ncols() != q.len() {
        return Err(OtError::DimensionMismatch(format!(
            "eta table {}×{} vs plan {}×{}",
            eta.nrows(),
            eta.ncols(),
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..p.len() {
        for j in 0..q.len() {
            let e = eta[(i, j)];
            if !e.is_finite() {
                return Err(OtError::InvalidArgument(format!(
                    "non-finite eta at ({i}, {j})"
                )));
            }
            total += p.weights()[i] * q.weights()[j] * plan.xi[(i, j)] * e;
        }
    }
    Ok(total)
}

/// Potentials and costs of the three solves behind a Sinkhorn divergence.
pub struct DivergenceParts {
    pub s_pq: f64,
    pub s_pp: f64,
    pub s_qq: f64,
    pub pot_pq: PotentialPair,
    pub pot_pp: PotentialPair,
    pub pot_qq: PotentialPair,
}

impl DivergenceParts {
    pub fn divergence(&self) -> f64 {
        self.s_pq - 0.5 * (self.s_pp + self.s_qq)
    }
}

/// Run the three independent solves S(P,Q), S(P,P), S(Q,Q) with a shared
/// tolerance. Any non-convergence is promoted to an error here because a
/// debiased value mixing converged and non-converged terms is meaningless.
pub fn divergence_parts(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    spec: &CostSpec,
    epsilon: f64,
    tol: f64,
) -> Result<DivergenceParts> {
    let solve_pair = |a: &DiscreteMeasure, b: &DiscreteMeasure| -> Result<(f64, PotentialPair)> {
        let ctx = crate::measures::build_cost(spec.clone(), a, b, epsilon)?;
        let (pot, report) = solve(a, b, &ctx, tol, DEFAULT_MAX_ITER)?;
        if !report.converged {
            return Err(OtError::NotConverged {
                residual: report.final_residual,
                iterations: report.iterations,
            });
        }
        Ok((entropic_cost(&pot, a, b, &ctx), pot))
    };
    let (s_pq, pot_pq) = solve_pair(p, q)?;
    let (s_pp, pot_pp) = solve_pair(p, p)?;
    let (s_qq, pot_qq) = solve_pair(q, q)?;
    Ok(DivergenceParts {
        s_pq,
        s_pp,
        s_qq,
        pot_pq,
        pot_pp,
        pot_qq,
    })
}

/// Sinkhorn divergence D(P,Q) = S(P,Q) − ½(S(P,P) + S(Q,Q)).
pub fn sinkhorn_divergence(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    spec: &CostSpec,
    epsilon: f64,
    tol: f64,
) -> Result<f64> {
    Ok(divergence_parts(p, q, spec, epsilon, tol)?.divergence())
}

/// Canonical extension of `f` to an arbitrary query point:
/// `f(x) = −log Σ_j w_j e^{g_j − c(x,y_j)/ε}`.
pub fn extend_f(
    pot: &PotentialPair,
    x: &[f64],
    q: &DiscreteMeasure,
    ctx: &CostContext,
) -> Result<f64> {
    let row = ctx.unit_cost_row(x, q)?;
    let lse = logsumexp(
        (0..q.len()).map({
            let g = &pot.g;
            let w = q.weights();
            move |j| w[j].ln() + g[j] - row[j]
        }),
    );
    Ok(-lse)
}

/// Conditional plan density ξ(x, ·) over the atoms of Q, built from the
/// canonical extension; its weighted sum is 1 by construction.
pub fn conditional_density_row(
    pot: &PotentialPair,
    x: &[f64],
    q: &DiscreteMeasure,
    ctx: &CostContext,
) -> Result<Array1<f64>> {
    let row = ctx.unit_cost_row(x, q)?;
    let fx = extend_f(pot, x, q, ctx)?;
    Ok(Array1::from_shape_fn(q.len(), |j| {
        (fx + pot.g[j] - row[j]).exp()
    }))
}

/// Conditional expectation E_π[η(X,Y) | X = x] for a row function η(x,·).
pub fn cond_expectation<F>(
    pot: &PotentialPair,
    x: &[f64],
    eta_row: F,
    q: &DiscreteMeasure,
    ctx: &CostContext,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let xi_row = conditional_density_row(pot, x, q, ctx)?;
    let mut total = 0.0;
    for j in 0..q.len() {
        total += q.weights()[j] * xi_row[j] * eta_row(&q.atom(j));
    }
    Ok(total)
}

/// Entropic transport map M(x) = E_π[Y | X = x], coordinatewise.
pub fn entropic_map(
    pot: &PotentialPair,
    x: &[f64],
    q: &DiscreteMeasure,
    ctx: &CostContext,
) -> Result<Vec<f64>> {
    let xi_row = conditional_density_row(pot, x, q, ctx)?;
    let d = q.dim();
    let mut out = vec![0.0; d];
    for j in 0..q.len() {
        let wj = q.weights()[j] * xi_row[j];
        for (k, o) in out.iter_mut().enumerate() {
            *o += wj * q.points()[(j, k)];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{build_cost, CostSpec, DiscreteMeasure};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    fn pts(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
    }

    fn solve_simple(
        p: &DiscreteMeasure,
        q: &DiscreteMeasure,
        ctx: &CostContext,
    ) -> (PotentialPair, SolveReport) {
        let (pot, report) = solve(p, q, ctx, 1e-12, DEFAULT_MAX_ITER).unwrap();
        assert!(report.converged, "residual {}", report.final_residual);
        (pot, report)
    }

    #[test]
    fn single_atom_pair_splits_cost_into_f() {
        let p = DiscreteMeasure::uniform(pts(&[0.0])).unwrap();
        let q = DiscreteMeasure::uniform(pts(&[1.0])).unwrap();
        let ctx = build_cost(CostSpec::Table(array![[0.7]]), &p, &q, 1.0).unwrap();
        let (pot, _) = solve_simple(&p, &q, &ctx);
        assert_abs_diff_eq!(pot.g()[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pot.f()[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(entropic_cost(&pot, &p, &q, &ctx), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn zero_cost_gives_zero_potentials_and_product_plan() {
        let p = DiscreteMeasure::uniform(pts(&[0.0, 1.0, 2.0])).unwrap();
        let q = DiscreteMeasure::uniform(pts(&[5.0, 6.0])).unwrap();
        let ctx = build_cost(CostSpec::Table(Array2::zeros((3, 2))), &p, &q, 1.0).unwrap();
        let (pot, _) = solve_simple(&p, &q, &ctx);
        for v in pot.f().iter().chain(pot.g().iter()) {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-12);
        }
        let plan = plan_density(&pot, &ctx, &p, &q, 1e-12).unwrap();
        for x in plan.xi() {
            assert_abs_diff_eq!(*x, 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(entropic_cost(&pot, &p, &q, &ctx), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            sinkhorn_cost(&plan, &ctx, &p, &q),
            0.0,
            epsilon = 1e-12
        );
    }

    /// P = Q = uniform{a,b}, c = 1 − δ_{ab}, ε = 1: closed-form fixed point
    /// f ≡ −log((1+e⁻¹)/2), g ≡ 0.
    fn symmetric_fixture() -> (DiscreteMeasure, DiscreteMeasure, CostContext) {
        let p = DiscreteMeasure::uniform(pts(&[0.0, 1.0])).unwrap();
        let q = DiscreteMeasure::uniform(pts(&[0.0, 1.0])).unwrap();
        let ctx = build_cost(
            CostSpec::Table(array![[0.0, 1.0], [1.0, 0.0]]),
            &p,
            &q,
            1.0,
        )
        .unwrap();
        (p, q, ctx)
    }

    #[test]
    fn symmetric_two_atom_closed_form() {
        let (p, q, ctx) = symmetric_fixture();
        let phi = -((1.0 + (-1.0f64).exp()) / 2.0).ln();
        let (pot, report) = solve_simple(&p, &q, &ctx);
        for fi in pot.f() {
            assert_abs_diff_eq!(*fi, phi, epsilon = 1e-11);
        }
        for gj in pot.g() {
            assert_abs_diff_eq!(*gj, 0.0, epsilon = 1e-11);
        }
        assert_abs_diff_eq!(entropic_cost(&pot, &p, &q, &ctx), phi, epsilon = 1e-11);
        assert!(report.duality_gap <= 1e-10);

        let plan = plan_density(&pot, &ctx, &p, &q, 1e-12).unwrap();
        let on = 2.0 / (1.0 + (-1.0f64).exp());
        let off = 2.0 * (-1.0f64).exp() / (1.0 + (-1.0f64).exp());
        assert_abs_diff_eq!(plan.xi()[(0, 0)], on, epsilon = 1e-10);
        assert_abs_diff_eq!(plan.xi()[(1, 1)], on, epsilon = 1e-10);
        assert_abs_diff_eq!(plan.xi()[(0, 1)], off, epsilon = 1e-10);
        assert_abs_diff_eq!(plan.xi()[(1, 0)], off, epsilon = 1e-10);
        assert!(plan.marginal_residual() <= 1e-10);

        let ds = sinkhorn_cost(&plan, &ctx, &p, &q);
        let expected = (-1.0f64).exp() / (1.0 + (-1.0f64).exp());
        assert_abs_diff_eq!(ds, expected, epsilon = 1e-10);

        // Definitional agreement: η = c reproduces the Sinkhorn cost.
        let via_eta = plan_expectation(&plan, &p, &q, ctx.cost()).unwrap();
        assert_abs_diff_eq!(via_eta, ds, epsilon = 1e-14);
    }

    #[test]
    fn potential_bounds_and_gap_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1234);
        for trial in 0..20 {
            let n = rng.random_range(2..12);
            let m = rng.random_range(2..12);
            let mut table = Array2::zeros((n, m));
            for v in table.iter_mut() {
                *v = rng.random_range(-3.0..3.0);
            }
            let p = DiscreteMeasure::uniform(pts(&vec![0.0; n])).unwrap();
            let q = DiscreteMeasure::uniform(pts(&vec![0.0; m])).unwrap();
            let ctx = build_cost(CostSpec::Table(table), &p, &q, 1.0).unwrap();
            let (pot, report) = solve(&p, &q, &ctx, 1e-10, DEFAULT_MAX_ITER).unwrap();
            assert!(report.converged, "trial {trial}");
            let bound = 3.0 * ctx.sup_unit() + 1e-9;
            for v in pot.f().iter().chain(pot.g().iter()) {
                assert!(v.abs() <= bound, "trial {trial}: |{v}| > {bound}");
            }
            let s = entropic_cost(&pot, &p, &q, &ctx);
            assert!(report.duality_gap <= 1e-8 * (1.0 + s.abs()));
            let plan = plan_density(&pot, &ctx, &p, &q, 1e-10).unwrap();
            assert!(plan.marginal_residual() <= 1e-8);
            let (lo, hi) = ((-3.0 * ctx.sup_unit()).exp(), (3.0 * ctx.sup_unit()).exp());
            for x in plan.xi() {
                assert!(*x >= lo / (1.0 + 1e-9) && *x <= hi * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn cost_shift_moves_into_f_only() {
        let (p, q, ctx) = symmetric_fixture();
        let shifted = build_cost(
            CostSpec::Table(ctx.cost() + 2.5),
            &p,
            &q,
            1.0,
        )
        .unwrap();
        let (pot0, _) = solve_simple(&p, &q, &ctx);
        let (pot1, _) = solve_simple(&p, &q, &shifted);
        let s0 = entropic_cost(&pot0, &p, &q, &ctx);
        let s1 = entropic_cost(&pot1, &p, &q, &shifted);
        assert_abs_diff_eq!(s1 - s0, 2.5, epsilon = 1e-10);
        let plan0 = plan_density(&pot0, &ctx, &p, &q, 1e-12).unwrap();
        let plan1 = plan_density(&pot1, &shifted, &p, &q, 1e-12).unwrap();
        for (a, b) in plan0.xi().iter().zip(plan1.xi().iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
        }
        for (a, b) in pot0.g().iter().zip(pot1.g().iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
        }
    }

    #[test]
    fn epsilon_rescaling_identity() {
        let p = DiscreteMeasure::uniform(pts(&[0.0, 1.0, 3.0])).unwrap();
        let q = DiscreteMeasure::uniform(pts(&[-1.0, 2.0])).unwrap();
        for eps in [0.25, 1.0, 4.0] {
            let ctx_eps = build_cost(CostSpec::SqEuclidean, &p, &q, eps).unwrap();
            let scaled = ctx_eps.cost() / eps;
            let ctx_unit = build_cost(CostSpec::Table(scaled), &p, &q, 1.0).unwrap();
            let (pot_e, _) = solve_simple(&p, &q, &ctx_eps);
            let (pot_u, _) = solve_simple(&p, &q, &ctx_unit);
            let s_eps = entropic_cost(&pot_e, &p, &q, &ctx_eps);
            let s_unit = entropic_cost(&pot_u, &p, &q, &ctx_unit);
            assert_abs_diff_eq!(s_eps, eps * s_unit, epsilon = 1e-12 * (1.0 + s_eps.abs()));
        }
    }

    #[test]
    fn divergence_vanishes_for_identical_measures() {
        let p = DiscreteMeasure::uniform(pts(&[0.0, 1.0, 2.0])).unwrap();
        let d = sinkhorn_divergence(&p, &p, &CostSpec::SqEuclidean, 1.0, 1e-11).unwrap();
        assert_abs_diff_eq!(d, 0.0, epsilon = 1e-9);

        // Divergences need the cost on P×P and Q×Q as well; a fixed table
        // sized for P×Q cannot provide it and must error out.
        let q = DiscreteMeasure::uniform(pts(&[5.0, 9.0])).unwrap();
        let dz = sinkhorn_divergence(&p, &q, &CostSpec::Table(Array2::zeros((3, 2))), 1.0, 1e-11);
        assert!(dz.is_err());
    }

    #[test]
    fn extend_f_matches_stored_values() {
        let p = DiscreteMeasure::uniform(pts(&[0.0, 1.0])).unwrap();
        let q = DiscreteMeasure::uniform(pts(&[0.0, 2.0])).unwrap();
        let ctx = build_cost(CostSpec::SqEuclidean, &p, &q, 1.0).unwrap();
        let (pot, _) = solve_simple(&p, &q, &ctx);
        for i in 0..p.len() {
            let fx = extend_f(&pot, &p.atom(i), &q, &ctx).unwrap();
            assert_abs_diff_eq!(fx, pot.f()[i], epsilon = 1e-10);
        }
        // Off-support extension agrees with a direct evaluation of the
        // log-sum formula.
        let x = [0.5];
        let fx = extend_f(&pot, &x, &q, &ctx).unwrap();
        let direct = -(0.5 * (pot.g()[0] - 0.25f64).exp() + 0.5 * (pot.g()[1] - 2.25f64).exp())
            .ln();
        assert_abs_diff_eq!(fx, direct, epsilon = 1e-13);
    }

    #[test]
    fn conditional_expectations_and_map() {
        let p = DiscreteMeasure::uniform(pts(&[0.0, 1.0])).unwrap();
        let q = DiscreteMeasure::uniform(pts(&[0.0, 2.0])).unwrap();
        let ctx = build_cost(CostSpec::SqEuclidean, &p, &q, 1.0).unwrap();
        let (pot, _) = solve_simple(&p, &q, &ctx);

        // η ≡ 1 integrates to exactly one against the conditional density.
        let one = cond_expectation(&pot, &[0.7], |_| 1.0, &q, &ctx).unwrap();
        assert_abs_diff_eq!(one, 1.0, epsilon = 1e-10);

        // Dirac target: the map must return its atom everywhere.
        let dirac = DiscreteMeasure::uniform(pts(&[3.5])).unwrap();
        let ctx_d = build_cost(CostSpec::SqEuclidean, &p, &dirac, 1.0).unwrap();
        let (pot_d, _) = solve_simple(&p, &dirac, &ctx_d);
        let m = entropic_map(&pot_d, &[0.2], &dirac, &ctx_d).unwrap();
        assert_abs_diff_eq!(m[0], 3.5, epsilon = 1e-12);

        // Table costs have no off-support values, so the conditional
        // machinery must refuse them.
        let zero = build_cost(CostSpec::Table(Array2::zeros((2, 2))), &p, &q, 1.0).unwrap();
        let (pot_z, _) = solve_simple(&p, &q, &zero);
        assert!(matches!(
            cond_expectation(&pot_z, &p.atom(0), |y| y[0], &q, &zero),
            Err(OtError::CostNotExtendable)
        ));

        // Huge ε ≈ zero unit cost: the map tends to the plain Q-average.
        let ctx_flat = build_cost(CostSpec::SqEuclidean, &p, &q, 1e9).unwrap();
        let (pot_flat, _) = solve_simple(&p, &q, &ctx_flat);
        let m_flat = entropic_map(&pot_flat, &[0.2], &q, &ctx_flat).unwrap();
        assert_abs_diff_eq!(m_flat[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn non_convergence_is_reported_not_fatal() {
        // Asymmetric cost: one sweep is nowhere near the fixed point.
        let p = DiscreteMeasure::uniform(pts(&[0.0, 1.0])).unwrap();
        let q = DiscreteMeasure::uniform(pts(&[0.0, 2.0])).unwrap();
        let ctx = build_cost(CostSpec::SqEuclidean, &p, &q, 1.0).unwrap();
        let (_, report) = solve(&p, &q, &ctx, 1e-12, 1).unwrap();
        assert!(!report.converged);
        assert!(report.final_residual > 1e-12);
        // The same instance converges once given a real budget.
        let (_, full) = solve(&p, &q, &ctx, 1e-12, DEFAULT_MAX_ITER).unwrap();
        assert!(full.converged);
    }
}
