//! Plug-in variance estimators and confidence intervals for every
//! functional the solver produces: entropic cost, plan expectations,
//! conditional expectations and entropic maps, Sinkhorn divergence,
//! colocalization curves, and the Sinkhorn kernel point estimate.
//!
//! All estimators share one skeleton: build the influence vectors of the
//! functional on the two samples (resolvent solves against the empirical
//! operators), take empirical variances, and combine them with the weights
//! λ̂ = m/(n+m) and 1 − λ̂. Studentization divides by √(nm/(n+m)).

use crate::measures::{CostContext, CostSpec, DiscreteMeasure};
use crate::operators::{apply_ap, apply_aq, neumann_solve, NeumannMode, OperatorContext, Side};
use crate::sinkhorn::{
    conditional_density_row, divergence_parts, entropic_map, solve, PotentialPair,
    DEFAULT_MAX_ITER,
};
use crate::stats::{normal_quantile, weighted_cov, weighted_var};
use crate::{OtError, Result};
use ndarray::{Array1, Array2};

/// Variances at or below this are reported as degenerate: the fixtures'
/// real asymptotic variances are O(0.1–10), while identical-measure corner
/// cases leave only rounding dust of order 1e-18.
pub const DEGENERACY_EPS: f64 = 1e-16;

/// The sample sizes behind a pair of empirical measures. Kept separate from
/// the measures so that weighted (collapsed) representations of a sample
/// can still report the true n and m.
#[derive(Debug, Clone, Copy)]
pub struct SampleSizes {
    pub n: usize,
    pub m: usize,
}

impl SampleSizes {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(OtError::EmptySample);
        }
        Ok(SampleSizes { n, m })
    }

    /// λ̂ = m/(n+m), the weight of the P-side variance.
    pub fn lambda_hat(&self) -> f64 {
        self.m as f64 / (self.n + self.m) as f64
    }

    /// √(nm/(n+m)), the CLT rate the pivots are scaled by.
    pub fn scale(&self) -> f64 {
        ((self.n as f64 * self.m as f64) / (self.n + self.m) as f64).sqrt()
    }
}

/// Default truncation order when a finite Neumann sum is requested without
/// an explicit N: ⌈√(max(1, ln(nm/(n+m))))⌉, growing slowly but without
/// bound so that truncated and direct resolvents agree asymptotically.
pub fn default_schedule(sizes: SampleSizes) -> usize {
    let t = (sizes.n as f64 * sizes.m as f64) / (sizes.n + sizes.m) as f64;
    t.ln().max(1.0).sqrt().ceil() as usize
}

/// Which functional a variance estimate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMethod {
    Cost,
    Plan,
    Conditional,
    Divergence,
}

impl std::fmt::Display for VarianceMethod {
    fn fmt(&self, fmt: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            VarianceMethod::Cost => "cost",
            VarianceMethod::Plan => "plan",
            VarianceMethod::Conditional => "conditional",
            VarianceMethod::Divergence => "divergence",
        };
        write!(fmt, "{name}")
    }
}

/// σ̂² with the bookkeeping needed to studentize it.
#[derive(Debug, Clone)]
pub struct VarianceEstimate {
    pub value: f64,
    pub lambda_hat: f64,
    pub scale: f64,
    pub method: VarianceMethod,
    /// Resolvent mode the influence vectors were solved with; `Direct` for
    /// closed-form estimators that involve no operator solve.
    pub n_used: NeumannMode,
}

/// Two-sided normal confidence interval for one scalar functional.
#[derive(Debug, Clone)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    /// σ̂ / √(nm/(n+m)).
    pub std_error: f64,
    /// Set when σ̂² ≤ [`DEGENERACY_EPS`]: the normal limit carries no width
    /// information and the interval collapses to the estimate.
    pub degenerate: bool,
}

/// The conditional means η̂_x (over P-atoms) and η̂_y (over Q-atoms) of a
/// bounded evaluation table under the plan.
#[derive(Debug, Clone)]
pub struct EtaHat {
    pub eta_x: Array1<f64>,
    pub eta_y: Array1<f64>,
}

/// η̂_x(x_i) = Σ_j w_j ξ_ij η_ij and η̂_y(y_j) = Σ_i v_i ξ_ij η_ij.
pub fn eta_hat(op: &OperatorContext, eta: &Array2<f64>) -> Result<EtaHat> {
    let (n, m) = (op.v().len(), op.w().len());
    if eta.nrows() != n || eta.ncols() != m {
        return Err(OtError::DimensionMismatch(format!(
            "eta table {}×{} vs plan {n}×{m}",
            eta.nrows(),
            eta.ncols()
        )));
    }
    let mut eta_x = Array1::zeros(n);
    let mut eta_y = Array1::zeros(m);
    for i in 0..n {
        for j in 0..m {
            let mass = op.xi()[(i, j)] * eta[(i, j)];
            eta_x[i] += op.w()[j] * mass;
            eta_y[j] += op.v()[i] * mass;
        }
    }
    Ok(EtaHat { eta_x, eta_y })
}

/// Influence vectors of a plan-expectation target:
/// u = (I − A_Q A_P)⁻¹ (η̂_x − A_Q η̂_y) on the P side and
/// s = (I − A_P A_Q)⁻¹ (η̂_y − A_P η̂_x) on the Q side. Both right-hand
/// sides are automatically centered by the marginal fixed points.
///
/// η is first centered by its plan mean: the influence vectors only move by
/// constants (which the variances ignore), while constant shifts of η stop
/// coupling to the residual marginal error of the plan.
pub fn plan_influence(
    op: &OperatorContext,
    eta: &Array2<f64>,
    mode: NeumannMode,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let (n, m) = (op.v().len(), op.w().len());
    if eta.nrows() != n || eta.ncols() != m {
        return Err(OtError::DimensionMismatch(format!(
            "eta table {}×{} vs plan {n}×{m}",
            eta.nrows(),
            eta.ncols()
        )));
    }
    let mut mean = 0.0;
    for i in 0..n {
        for j in 0..m {
            mean += op.v()[i] * op.w()[j] * op.xi()[(i, j)] * eta[(i, j)];
        }
    }
    let centered = eta.mapv(|e| e - mean);
    let hat = eta_hat(op, &centered)?;
    let rhs_p = &hat.eta_x - &apply_aq(op, &hat.eta_y);
    let rhs_q = &hat.eta_y - &apply_ap(op, &hat.eta_x);
    let u = neumann_solve(op, &rhs_p, Side::P, mode)?;
    let s = neumann_solve(op, &rhs_q, Side::Q, mode)?;
    Ok((u, s))
}

/// Influence vectors of a conditional-expectation target at query point x:
/// with h_j = [η(x,y_j) − η̂_x(x)]·ξ(x,y_j) (centered under Q by the fixed
/// point), the P part is (I − A_Q A_P)⁻¹ A_Q h and the Q part
/// (I − A_P A_Q)⁻¹ h.
pub fn cond_influence(
    op: &OperatorContext,
    pot: &PotentialPair,
    x: &[f64],
    eta_row: &Array1<f64>,
    q: &DiscreteMeasure,
    ctx: &CostContext,
    mode: NeumannMode,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let m = q.len();
    if eta_row.len() != m {
        return Err(OtError::DimensionMismatch(format!(
            "eta row length {} vs {m} target atoms",
            eta_row.len()
        )));
    }
    let xi_row = conditional_density_row(pot, x, q, ctx)?;
    let cond_mean: f64 = (0..m)
        .map(|j| q.weights()[j] * xi_row[j] * eta_row[j])
        .sum();
    let h = Array1::from_shape_fn(m, |j| (eta_row[j] - cond_mean) * xi_row[j]);
    let u_p = neumann_solve(op, &apply_aq(op, &h), Side::P, mode)?;
    let u_q = neumann_solve(op, &h, Side::Q, mode)?;
    Ok((u_p, u_q))
}

fn combine(lambda_hat: f64, var_p: f64, var_q: f64) -> f64 {
    (lambda_hat * var_p + (1.0 - lambda_hat) * var_q).max(0.0)
}

/// σ̂²_{n,m} for the entropic cost: ε²·[λ̂·Var_{P_n}(f) + (1−λ̂)·Var_{Q_m}(g)]
/// with empirical variances of the stored unit potentials. The ε² factor
/// converts to the scale of S_ε, whose potentials are ε·(unit potentials).
pub fn var_cost(
    pot: &PotentialPair,
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    ctx: &CostContext,
    sizes: SampleSizes,
) -> VarianceEstimate {
    let var_f = weighted_var(p.weights().view(), pot.f().view());
    let var_g = weighted_var(q.weights().view(), pot.g().view());
    let eps2 = ctx.epsilon() * ctx.epsilon();
    VarianceEstimate {
        value: eps2 * combine(sizes.lambda_hat(), var_f, var_g),
        lambda_hat: sizes.lambda_hat(),
        scale: sizes.scale(),
        method: VarianceMethod::Cost,
        n_used: NeumannMode::Direct,
    }
}

/// σ̂²_{n,m,N}(η) for a plan expectation.
pub fn var_plan(
    op: &OperatorContext,
    eta: &Array2<f64>,
    sizes: SampleSizes,
    mode: NeumannMode,
) -> Result<VarianceEstimate> {
    let (u, s) = plan_influence(op, eta, mode)?;
    let var_u = weighted_var(op.v().view(), u.view());
    let var_s = weighted_var(op.w().view(), s.view());
    Ok(VarianceEstimate {
        value: combine(sizes.lambda_hat(), var_u, var_s),
        lambda_hat: sizes.lambda_hat(),
        scale: sizes.scale(),
        method: VarianceMethod::Plan,
        n_used: mode,
    })
}

/// σ̂²_{n,m,N}(η, x) for a conditional expectation at x; `eta_row[j]` holds
/// η(x, y_j) on the Q-atoms.
pub fn var_cond(
    op: &OperatorContext,
    pot: &PotentialPair,
    x: &[f64],
    eta_row: &Array1<f64>,
    q: &DiscreteMeasure,
    ctx: &CostContext,
    sizes: SampleSizes,
    mode: NeumannMode,
) -> Result<VarianceEstimate> {
    let (u_p, u_q) = cond_influence(op, pot, x, eta_row, q, ctx, mode)?;
    let var_p = weighted_var(op.v().view(), u_p.view());
    let var_q = weighted_var(op.w().view(), u_q.view());
    Ok(VarianceEstimate {
        value: combine(sizes.lambda_hat(), var_p, var_q),
        lambda_hat: sizes.lambda_hat(),
        scale: sizes.scale(),
        method: VarianceMethod::Conditional,
        n_used: mode,
    })
}

/// Two-sided interval estimate ± z_{(1+level)/2}·σ̂/√(nm/(n+m)).
///
/// A variance at or below [`DEGENERACY_EPS`] sets the degeneracy flag; an
/// exactly zero variance collapses the interval to [estimate, estimate].
pub fn ci(estimate: f64, var: &VarianceEstimate, level: f64) -> Result<ConfidenceInterval> {
    if !(0.0 < level && level < 1.0) {
        return Err(OtError::InvalidArgument(format!(
            "confidence level must lie in (0,1), got {level}"
        )));
    }
    if !(var.value >= 0.0) {
        return Err(OtError::InvalidArgument(format!(
            "negative variance estimate {}",
            var.value
        )));
    }
    let z = normal_quantile(0.5 * (1.0 + level));
    let std_error = var.value.sqrt() / var.scale;
    let half = z * std_error;
    Ok(ConfidenceInterval {
        estimate,
        lower: estimate - half,
        upper: estimate + half,
        level,
        std_error,
        degenerate: var.value <= DEGENERACY_EPS,
    })
}

/// Sinkhorn divergence with its variance estimate and interval.
pub struct DivergenceReport {
    pub divergence: f64,
    pub s_pq: f64,
    pub s_pp: f64,
    pub s_qq: f64,
    pub variance: VarianceEstimate,
    pub interval: ConfidenceInterval,
}

/// Debiased divergence CI from three independent solves:
/// σ̂²_Div = λ̂·Var_{P_n}[f_PQ − (f_PP + g_PP)/2] + (1−λ̂)·Var_{Q_m}[g_PQ − (f_QQ + g_QQ)/2],
/// each pair of potentials living on the atoms of its own sample.
pub fn divergence_ci(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    spec: &CostSpec,
    epsilon: f64,
    tol: f64,
    sizes: SampleSizes,
    level: f64,
) -> Result<DivergenceReport> {
    let parts = divergence_parts(p, q, spec, epsilon, tol)?;
    let infl_p = parts.pot_pq.f() - &((parts.pot_pp.f() + parts.pot_pp.g()) * 0.5);
    let infl_q = parts.pot_pq.g() - &((parts.pot_qq.f() + parts.pot_qq.g()) * 0.5);
    let var_p = weighted_var(p.weights().view(), infl_p.view());
    let var_q = weighted_var(q.weights().view(), infl_q.view());
    let eps2 = epsilon * epsilon;
    let variance = VarianceEstimate {
        value: eps2 * combine(sizes.lambda_hat(), var_p, var_q),
        lambda_hat: sizes.lambda_hat(),
        scale: sizes.scale(),
        method: VarianceMethod::Divergence,
        n_used: NeumannMode::Direct,
    };
    let divergence = parts.divergence();
    let interval = ci(divergence, &variance, level)?;
    Ok(DivergenceReport {
        divergence,
        s_pq: parts.s_pq,
        s_pp: parts.s_pp,
        s_qq: parts.s_qq,
        variance,
        interval,
    })
}

/// Entropic map estimate at a query point with per-coordinate intervals
/// and the full d×d covariance of the limit.
pub struct MapReport {
    pub map: Vec<f64>,
    pub covariance: Array2<f64>,
    pub intervals: Vec<ConfidenceInterval>,
}

/// Coordinatewise conditional targets η_k(x,y) = y_k: the covariance
/// combines the solved influence vectors pairwise on both sides, and the
/// diagonal feeds one interval per coordinate.
pub fn map_ci(
    op: &OperatorContext,
    pot: &PotentialPair,
    x: &[f64],
    q: &DiscreteMeasure,
    ctx: &CostContext,
    sizes: SampleSizes,
    level: f64,
    mode: NeumannMode,
) -> Result<MapReport> {
    let map = entropic_map(pot, x, q, ctx)?;
    let d = q.dim();
    let mut parts_p = Vec::with_capacity(d);
    let mut parts_q = Vec::with_capacity(d);
    for k in 0..d {
        let eta_row = Array1::from_shape_fn(q.len(), |j| q.points()[(j, k)]);
        let (u_p, u_q) = cond_influence(op, pot, x, &eta_row, q, ctx, mode)?;
        parts_p.push(u_p);
        parts_q.push(u_q);
    }
    let lambda_hat = sizes.lambda_hat();
    let mut covariance = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..=i {
            let c_p = weighted_cov(op.v().view(), parts_p[i].view(), parts_p[j].view());
            let c_q = weighted_cov(op.w().view(), parts_q[i].view(), parts_q[j].view());
            let value = lambda_hat * c_p + (1.0 - lambda_hat) * c_q;
            covariance[(i, j)] = value;
            covariance[(j, i)] = value;
        }
    }
    let mut intervals = Vec::with_capacity(d);
    for k in 0..d {
        let variance = VarianceEstimate {
            value: covariance[(k, k)].max(0.0),
            lambda_hat,
            scale: sizes.scale(),
            method: VarianceMethod::Conditional,
            n_used: mode,
        };
        intervals.push(ci(map[k], &variance, level)?);
    }
    Ok(MapReport {
        map,
        covariance,
        intervals,
    })
}

/// Colocalization curve over a threshold grid with pointwise intervals and
/// a simultaneous Bonferroni band.
pub struct ColocResult {
    pub thresholds: Vec<f64>,
    /// R(t_k) = π({c ≤ t_k}), clamped to [0,1].
    pub values: Vec<f64>,
    pub covariance: Array2<f64>,
    /// Simultaneous half-widths: z_{1−(1−level)/(2l)}·σ̂_k/scale.
    pub band: Vec<f64>,
    pub pointwise: Vec<ConfidenceInterval>,
}

/// Indicator targets η_k = 1(c ≤ t_k) (inclusive), sharing the plan
/// influence machinery across thresholds; the covariance entry (i,j) is
/// λ̂·Cov_{P_n}(u_i, u_j) + (1−λ̂)·Cov_{Q_m}(s_i, s_j).
pub fn coloc_curve(
    op: &OperatorContext,
    ctx: &CostContext,
    thresholds: &[f64],
    sizes: SampleSizes,
    level: f64,
    mode: NeumannMode,
) -> Result<ColocResult> {
    if thresholds.is_empty() {
        return Err(OtError::InvalidArgument("empty threshold grid".into()));
    }
    if thresholds.iter().any(|t| !t.is_finite()) {
        return Err(OtError::InvalidArgument(
            "thresholds must be finite".into(),
        ));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(OtError::InvalidArgument(
            "thresholds must be sorted ascending".into(),
        ));
    }
    let (n, m) = (op.v().len(), op.w().len());
    let l = thresholds.len();
    let mut values = Vec::with_capacity(l);
    let mut us = Vec::with_capacity(l);
    let mut ss = Vec::with_capacity(l);
    for &t in thresholds {
        let eta = Array2::from_shape_fn((n, m), |(i, j)| {
            if ctx.cost()[(i, j)] <= t {
                1.0
            } else {
                0.0
            }
        });
        let mut value = 0.0;
        for i in 0..n {
            for j in 0..m {
                value += op.v()[i] * op.w()[j] * op.xi()[(i, j)] * eta[(i, j)];
            }
        }
        values.push(value.clamp(0.0, 1.0));
        let (u, s) = plan_influence(op, &eta, mode)?;
        us.push(u);
        ss.push(s);
    }
    let lambda_hat = sizes.lambda_hat();
    let mut covariance = Array2::zeros((l, l));
    for i in 0..l {
        for j in 0..=i {
            let c_p = weighted_cov(op.v().view(), us[i].view(), us[j].view());
            let c_q = weighted_cov(op.w().view(), ss[i].view(), ss[j].view());
            let value = lambda_hat * c_p + (1.0 - lambda_hat) * c_q;
            covariance[(i, j)] = value;
            covariance[(j, i)] = value;
        }
    }
    let mut pointwise = Vec::with_capacity(l);
    let z_band = normal_quantile(1.0 - (1.0 - level) / (2.0 * l as f64));
    let mut band = Vec::with_capacity(l);
    for k in 0..l {
        let variance = VarianceEstimate {
            value: covariance[(k, k)].max(0.0),
            lambda_hat,
            scale: sizes.scale(),
            method: VarianceMethod::Plan,
            n_used: mode,
        };
        pointwise.push(ci(values[k], &variance, level)?);
        band.push(z_band * variance.value.sqrt() / sizes.scale());
    }
    Ok(ColocResult {
        thresholds: thresholds.to_vec(),
        values,
        covariance,
        band,
        pointwise,
    })
}

/// The gaussian kernel map F(t) = exp(−t²).
pub fn gaussian_map(t: f64) -> f64 {
    (-t * t).exp()
}

/// Sinkhorn kernel point estimate: solve (P, U) and (Q, U) against the same
/// reference atoms and return F(Var_{U}[g_{P,U} − g_{Q,U}]).
pub fn kernel_point<F>(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    u: &DiscreteMeasure,
    spec: &CostSpec,
    epsilon: f64,
    tol: f64,
    f: F,
) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let solve_against = |a: &DiscreteMeasure| -> Result<PotentialPair> {
        let ctx = crate::measures::build_cost(spec.clone(), a, u, epsilon)?;
        let (pot, report) = solve(a, u, &ctx, tol, DEFAULT_MAX_ITER)?;
        if !report.converged {
            return Err(OtError::NotConverged {
                residual: report.final_residual,
                iterations: report.iterations,
            });
        }
        Ok(pot)
    };
    let pot_pu = solve_against(p)?;
    let pot_qu = solve_against(q)?;
    let diff = pot_pu.g() - pot_qu.g();
    let variance = weighted_var(u.weights().view(), diff.view());
    Ok(f(variance))
}

/// A named way to build evaluation tables η over the atoms of a plan, or
/// η(x, ·) rows at a query point.
#[derive(Debug, Clone)]
pub enum EtaSpec {
    /// η(x,y) = c(x,y), the raw cost.
    Cost,
    /// η(x,y) = 1(c(x,y) ≤ t), inclusive.
    Indicator(f64),
    /// η(x,y) = y_k.
    Coord(usize),
    /// A literal table over the current supports.
    Table(Array2<f64>),
}

impl EtaSpec {
    /// Full n×m table over the supports of the solved pair.
    pub fn table(
        &self,
        ctx: &CostContext,
        q: &DiscreteMeasure,
    ) -> Result<Array2<f64>> {
        let (n, m) = (ctx.nrows(), ctx.ncols());
        match self {
            EtaSpec::Cost => Ok(ctx.cost().clone()),
            EtaSpec::Indicator(t) => {
                if !t.is_finite() {
                    return Err(OtError::InvalidArgument(format!(
                        "indicator threshold must be finite, got {t}"
                    )));
                }
                Ok(ctx.cost().mapv(|c| if c <= *t { 1.0 } else { 0.0 }))
            }
            EtaSpec::Coord(k) => {
                if *k >= q.dim() {
                    return Err(OtError::InvalidArgument(format!(
                        "coordinate {k} out of range for dimension {}",
                        q.dim()
                    )));
                }
                Ok(Array2::from_shape_fn((n, m), |(_, j)| q.points()[(j, *k)]))
            }
            EtaSpec::Table(table) => {
                if table.nrows() != n || table.ncols() != m {
                    return Err(OtError::DimensionMismatch(format!(
                        "eta table {}×{} vs supports {n}×{m}",
                        table.nrows(),
                        table.ncols()
                    )));
                }
                Ok(table.clone())
            }
        }
    }

    /// Row η(x, y_j) over the Q-atoms at an arbitrary query point. Literal
    /// tables are only usable when x coincides with a P-atom.
    pub fn row_at(
        &self,
        x: &[f64],
        ctx: &CostContext,
        p: &DiscreteMeasure,
        q: &DiscreteMeasure,
    ) -> Result<Array1<f64>> {
        let m = q.len();
        match self {
            EtaSpec::Cost => {
                let mut row = Array1::zeros(m);
                for j in 0..m {
                    row[j] = ctx.spec().evaluate(x, &q.atom(j))?;
                }
                Ok(row)
            }
            EtaSpec::Indicator(t) => {
                if !t.is_finite() {
                    return Err(OtError::InvalidArgument(format!(
                        "indicator threshold must be finite, got {t}"
                    )));
                }
                let mut row = Array1::zeros(m);
                for j in 0..m {
                    row[j] = if ctx.spec().evaluate(x, &q.atom(j))? <= *t {
                        1.0
                    } else {
                        0.0
                    };
                }
                Ok(row)
            }
            EtaSpec::Coord(k) => {
                if *k >= q.dim() {
                    return Err(OtError::InvalidArgument(format!(
                        "coordinate {k} out of range for dimension {}",
                        q.dim()
                    )));
                }
                Ok(Array1::from_shape_fn(m, |j| q.points()[(j, *k)]))
            }
            EtaSpec::Table(table) => {
                if table.ncols() != m {
                    return Err(OtError::DimensionMismatch(format!(
                        "eta table has {} columns vs {m} target atoms",
                        table.ncols()
                    )));
                }
                let i = (0..p.len())
                    .find(|&i| p.atom(i).as_slice() == x)
                    .ok_or_else(|| {
                        OtError::InvalidArgument(
                            "eta tables can only be evaluated at source atoms".into(),
                        )
                    })?;
                Ok(table.row(i).to_owned())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::build_cost;
    use crate::sinkhorn::plan_density;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn pts(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
    }

    struct Solved {
        p: DiscreteMeasure,
        q: DiscreteMeasure,
        ctx: CostContext,
        pot: PotentialPair,
        op: OperatorContext,
    }

    fn solve_all(p: DiscreteMeasure, q: DiscreteMeasure, ctx: CostContext) -> Solved {
        let (pot, report) = solve(&p, &q, &ctx, 1e-12, DEFAULT_MAX_ITER).unwrap();
        assert!(report.converged);
        let plan = plan_density(&pot, &ctx, &p, &q, 1e-12).unwrap();
        let op = OperatorContext::new(&plan, &p, &q, &ctx);
        Solved { p, q, ctx, pot, op }
    }

    fn f2_solved() -> Solved {
        let p = DiscreteMeasure::new(pts(&[0.0, 1.0, 2.0]), array![0.5, 0.3, 0.2]).unwrap();
        let q = DiscreteMeasure::uniform(pts(&[0.0, 0.5, 1.5, 3.0])).unwrap();
        let ctx = build_cost(CostSpec::SqEuclidean, &p, &q, 1.0).unwrap();
        solve_all(p, q, ctx)
    }

    #[test]
    fn sample_sizes_lambda_and_scale() {
        let sizes = SampleSizes::new(200, 200).unwrap();
        assert_abs_diff_eq!(sizes.lambda_hat(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(sizes.scale(), (400.0 * 100.0 / 400.0 / 4.0_f64).sqrt() * 2.0, epsilon = 1e-12);
        // √(200·200/400) = 10
        assert_abs_diff_eq!(sizes.scale(), 10.0, epsilon = 1e-12);
        assert!(SampleSizes::new(0, 5).is_err());
    }

    #[test]
    fn ci_half_width_matches_quantile() {
        // level 0.95, var = 1, n = m = 200: half-width = 1.959964·√(1)/10.
        let sizes = SampleSizes::new(200, 200).unwrap();
        let var = VarianceEstimate {
            value: 1.0,
            lambda_hat: sizes.lambda_hat(),
            scale: sizes.scale(),
            method: VarianceMethod::Cost,
            n_used: NeumannMode::Direct,
        };
        let interval = ci(3.0, &var, 0.95).unwrap();
        assert!(!interval.degenerate);
        assert_abs_diff_eq!(interval.upper - interval.lower, 2.0 * 0.19599639845400543, epsilon = 1e-10);
        assert_abs_diff_eq!(
            interval.upper - interval.lower,
            2.0 * normal_quantile(0.975) * interval.std_error,
            epsilon = 1e-12
        );
        assert!(interval.lower <= interval.estimate && interval.estimate <= interval.upper);

        let wider = ci(3.0, &var, 0.99).unwrap();
        assert!(wider.upper - wider.lower > interval.upper - interval.lower);

        let degenerate = ci(3.0, &VarianceEstimate { value: 0.0, ..var.clone() }, 0.95).unwrap();
        assert!(degenerate.degenerate);
        assert_abs_diff_eq!(degenerate.lower, 3.0, epsilon = 0.0);
        assert_abs_diff_eq!(degenerate.upper, 3.0, epsilon = 0.0);

        assert!(ci(0.0, &var, 1.0).is_err());
    }

    #[test]
    fn var_cost_trivial_cases() {
        // Constant cost: f ≡ κ, g ≡ 0 after normalization, σ̂² = 0.
        let p = DiscreteMeasure::uniform(pts(&[0.0, 1.0])).unwrap();
        let q = DiscreteMeasure::uniform(pts(&[0.0, 2.0, 4.0])).unwrap();
        let ctx = build_cost(CostSpec::Table(Array2::from_elem((2, 3), 0.7)), &p, &q, 1.0).unwrap();
        let solved = solve_all(p, q, ctx);
        let sizes = SampleSizes::new(2, 3).unwrap();
        let est = var_cost(&solved.pot, &solved.p, &solved.q, &solved.ctx, sizes);
        assert!(est.value <= 1e-20, "constant cost gave {}", est.value);

        // Single atoms: variances of single values are zero.
        let p1 = DiscreteMeasure::uniform(pts(&[0.0])).unwrap();
        let q1 = DiscreteMeasure::uniform(pts(&[2.0])).unwrap();
        let ctx1 = build_cost(CostSpec::SqEuclidean, &p1, &q1, 1.0).unwrap();
        let solved1 = solve_all(p1, q1, ctx1);
        let est1 = var_cost(&solved1.pot, &solved1.p, &solved1.q, &solved1.ctx, SampleSizes::new(1, 1).unwrap());
        assert_abs_diff_eq!(est1.value, 0.0, epsilon = 1e-20);
    }

    #[test]
    fn var_cost_shift_invariance() {
        let solved = f2_solved();
        let sizes = SampleSizes::new(3, 4).unwrap();
        let base = var_cost(&solved.pot, &solved.p, &solved.q, &solved.ctx, sizes);
        let shifted_ctx = build_cost(
            CostSpec::Table(solved.ctx.cost() + 2.5),
            &solved.p,
            &solved.q,
            1.0,
        )
        .unwrap();
        let shifted = solve_all(solved.p.clone(), solved.q.clone(), shifted_ctx);
        let est = var_cost(&shifted.pot, &shifted.p, &shifted.q, &shifted.ctx, sizes);
        assert_abs_diff_eq!(est.value, base.value, epsilon = 1e-12 * (1.0 + base.value));
    }

    #[test]
    fn var_plan_trivial_and_shift_invariance() {
        let solved = f2_solved();
        let sizes = SampleSizes::new(3, 4).unwrap();

        // Constant η: both residuals vanish to solver precision.
        let const_eta = Array2::from_elem((3, 4), 4.2);
        let est = var_plan(&solved.op, &const_eta, sizes, NeumannMode::Direct).unwrap();
        assert!(est.value <= 1e-20, "constant eta gave {}", est.value);

        // η-shift invariance at 1e-12 relative.
        let eta = solved.ctx.cost().clone();
        let base = var_plan(&solved.op, &eta, sizes, NeumannMode::Direct).unwrap();
        let shifted = var_plan(&solved.op, &(&eta + 11.0), sizes, NeumannMode::Direct).unwrap();
        assert_abs_diff_eq!(
            shifted.value,
            base.value,
            epsilon = 1e-12 * (1.0 + base.value)
        );
    }

    #[test]
    fn var_plan_zero_cost_collapses_to_marginal_variances() {
        // ξ ≡ 1: the composite operators vanish on centered vectors, so
        // σ̂² = λ̂·Var_P[η̄_x] + (1−λ̂)·Var_Q[η̄_y] with plain conditional means.
        let p = DiscreteMeasure::uniform(pts(&[0.0, 1.0, 2.0])).unwrap();
        let q = DiscreteMeasure::uniform(pts(&[0.0, 1.0])).unwrap();
        let ctx = build_cost(CostSpec::Table(Array2::zeros((3, 2))), &p, &q, 1.0).unwrap();
        let solved = solve_all(p, q, ctx);
        let sizes = SampleSizes::new(3, 2).unwrap();
        // η(x,y) = x·y over the atoms.
        let eta = Array2::from_shape_fn((3, 2), |(i, j)| {
            solved.p.points()[(i, 0)] * solved.q.points()[(j, 0)]
        });
        let est = var_plan(&solved.op, &eta, sizes, NeumannMode::Direct).unwrap();
        // Plain means: η̄_x(x) = x·mean(y) = 0.5x, η̄_y(y) = mean(x)·y = y.
        let eta_x = Array1::from_vec(vec![0.0, 0.5, 1.0]);
        let eta_y = Array1::from_vec(vec![0.0, 1.0]);
        let expected = sizes.lambda_hat() * weighted_var(solved.p.weights().view(), eta_x.view())
            + (1.0 - sizes.lambda_hat()) * weighted_var(solved.q.weights().view(), eta_y.view());
        assert_abs_diff_eq!(est.value, expected, epsilon = 1e-12);
    }

    #[test]
    fn var_cond_trivial_and_zero_cost() {
        let solved = f2_solved();
        let sizes = SampleSizes::new(3, 4).unwrap();
        let const_row = Array1::from_elem(4, 3.3);
        let est = var_cond(
            &solved.op,
            &solved.pot,
            &[1.0],
            &const_row,
            &solved.q,
            &solved.ctx,
            sizes,
            NeumannMode::Direct,
        )
        .unwrap();
        assert!(est.value <= 1e-20);

        // Zero cost through a huge ε: first part ≈ 0, total ≈ (1−λ̂)·Var_Q[η].
        let p = DiscreteMeasure::uniform(pts(&[0.0, 1.0])).unwrap();
        let q = DiscreteMeasure::uniform(pts(&[0.0, 2.0])).unwrap();
        let ctx = build_cost(CostSpec::SqEuclidean, &p, &q, 1e12).unwrap();
        let flat = solve_all(p, q, ctx);
        let row = Array1::from_vec(vec![0.0, 2.0]);
        let sizes2 = SampleSizes::new(2, 2).unwrap();
        let est2 = var_cond(
            &flat.op,
            &flat.pot,
            &[0.5],
            &row,
            &flat.q,
            &flat.ctx,
            sizes2,
            NeumannMode::Direct,
        )
        .unwrap();
        let expected = 0.5 * weighted_var(flat.q.weights().view(), row.view());
        assert_abs_diff_eq!(est2.value, expected, epsilon = 1e-6);
    }

    #[test]
    fn eta_shift_invariance_for_cond() {
        let solved = f2_solved();
        let sizes = SampleSizes::new(3, 4).unwrap();
        let row = Array1::from_vec(vec![0.0, 0.5, 1.5, 3.0]);
        let base = var_cond(
            &solved.op,
            &solved.pot,
            &[0.0],
            &row,
            &solved.q,
            &solved.ctx,
            sizes,
            NeumannMode::Direct,
        )
        .unwrap();
        let shifted = var_cond(
            &solved.op,
            &solved.pot,
            &[0.0],
            &(&row + 7.0),
            &solved.q,
            &solved.ctx,
            sizes,
            NeumannMode::Direct,
        )
        .unwrap();
        assert_abs_diff_eq!(shifted.value, base.value, epsilon = 1e-12 * (1.0 + base.value));
    }

    #[test]
    fn divergence_degenerates_on_identical_samples() {
        let p = DiscreteMeasure::uniform(pts(&[0.0, 1.0, 2.5])).unwrap();
        let sizes = SampleSizes::new(3, 3).unwrap();
        let report = divergence_ci(&p, &p, &CostSpec::SqEuclidean, 1.0, 1e-11, sizes, 0.95).unwrap();
        assert_abs_diff_eq!(report.divergence, 0.0, epsilon = 1e-9);
        assert!(report.interval.degenerate, "σ̂² = {}", report.variance.value);
    }

    #[test]
    fn map_ci_on_dirac_target_is_degenerate() {
        let p = DiscreteMeasure::uniform(pts(&[0.0, 1.0])).unwrap();
        let q = DiscreteMeasure::uniform(pts(&[3.5])).unwrap();
        let ctx = build_cost(CostSpec::SqEuclidean, &p, &q, 1.0).unwrap();
        let solved = solve_all(p, q, ctx);
        let sizes = SampleSizes::new(2, 1).unwrap();
        let report = map_ci(
            &solved.op,
            &solved.pot,
            &[0.2],
            &solved.q,
            &solved.ctx,
            sizes,
            0.95,
            NeumannMode::Direct,
        )
        .unwrap();
        assert_abs_diff_eq!(report.map[0], 3.5, epsilon = 1e-12);
        assert_abs_diff_eq!(report.covariance[(0, 0)], 0.0, epsilon = 1e-18);
        assert!(report.intervals[0].degenerate);
    }

    #[test]
    fn coloc_curve_extreme_thresholds_and_errors() {
        let solved = f2_solved();
        let sizes = SampleSizes::new(3, 4).unwrap();
        // t beyond the cost range: R = 1 and R = 0 with zero variance.
        let result = coloc_curve(
            &solved.op,
            &solved.ctx,
            &[-1.0, 100.0],
            sizes,
            0.95,
            NeumannMode::Direct,
        )
        .unwrap();
        assert_abs_diff_eq!(result.values[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(result.values[1], 1.0, epsilon = 1e-11);
        assert!(result.covariance[(0, 0)].abs() <= 1e-18);
        assert!(result.covariance[(1, 1)].abs() <= 1e-18);

        assert!(coloc_curve(
            &solved.op,
            &solved.ctx,
            &[2.0, 1.0],
            sizes,
            0.95,
            NeumannMode::Direct
        )
        .is_err());
    }

    #[test]
    fn coloc_covariance_is_symmetric_psd_and_band_wider_than_pointwise() {
        let solved = f2_solved();
        let sizes = SampleSizes::new(500, 500).unwrap();
        let result = coloc_curve(
            &solved.op,
            &solved.ctx,
            &[0.5, 1.0, 2.5],
            sizes,
            0.95,
            NeumannMode::Direct,
        )
        .unwrap();
        let cov = &result.covariance;
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(cov[(i, j)], cov[(j, i)], epsilon = 1e-12);
            }
        }
        // PSD via random quadratic forms.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut form = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    form += x[i] * cov[(i, j)] * x[j];
                }
            }
            assert!(form >= -1e-8, "quadratic form {form}");
        }
        for k in 0..3 {
            let pw_half = 0.5 * (result.pointwise[k].upper - result.pointwise[k].lower);
            assert!(result.band[k] >= pw_half - 1e-15);
            assert!(result.values[k] >= 0.0 && result.values[k] <= 1.0);
        }
    }

    #[test]
    fn kernel_point_trivial_values() {
        let p = DiscreteMeasure::uniform(pts(&[0.0, 1.0])).unwrap();
        let q = DiscreteMeasure::uniform(pts(&[0.0, 2.0])).unwrap();
        // P = Q: potentials agree, variance 0, gaussian F(0) = 1.
        let k_same = kernel_point(&p, &p, &q, &CostSpec::SqEuclidean, 1.0, 1e-11, gaussian_map)
            .unwrap();
        assert_abs_diff_eq!(k_same, 1.0, epsilon = 1e-9);
        // P ≠ Q: strictly below 1 for the gaussian map.
        let k_diff = kernel_point(&p, &q, &q, &CostSpec::SqEuclidean, 1.0, 1e-11, gaussian_map)
            .unwrap();
        assert!(k_diff < 1.0);
        assert!(k_diff > 0.0);
    }

    #[test]
    fn default_schedule_values() {
        assert_eq!(default_schedule(SampleSizes::new(2, 2).unwrap()), 1);
        assert_eq!(default_schedule(SampleSizes::new(20, 20).unwrap()), 2);
        assert_eq!(default_schedule(SampleSizes::new(2000, 2000).unwrap()), 3);
        assert_eq!(
            default_schedule(SampleSizes::new(2_000_000, 2_000_000).unwrap()),
            4
        );
    }

    #[test]
    fn divergence_ci_reproduces_population_values() {
        // Plug-in on the population itself must match the exact references
        // (pinned independently in the oracle regression suite).
        let p = DiscreteMeasure::new(pts(&[0.0, 1.0, 2.0]), array![0.5, 0.3, 0.2]).unwrap();
        let q = DiscreteMeasure::uniform(pts(&[0.0, 0.5, 1.5, 3.0])).unwrap();
        let sizes = SampleSizes::new(3, 4).unwrap();
        let report =
            divergence_ci(&p, &q, &CostSpec::SqEuclidean, 1.0, 1e-13, sizes, 0.95).unwrap();
        assert_abs_diff_eq!(report.divergence, 0.440194622137427549, epsilon = 1e-11);
        // At λ̂ = 1/2 the variance must agree with the population oracle.
        let pop = crate::oracle::fixture_f2();
        let sigma_half = crate::oracle::exact_sigma_divergence(&pop).unwrap();
        let sizes_eq = SampleSizes::new(5, 5).unwrap();
        let report_eq =
            divergence_ci(&p, &q, &CostSpec::SqEuclidean, 1.0, 1e-13, sizes_eq, 0.95).unwrap();
        assert_abs_diff_eq!(report_eq.variance.value, sigma_half, epsilon = 1e-11);
        assert_abs_diff_eq!(report_eq.variance.value, 1.74294265959931027, epsilon = 1e-9);
    }

    #[test]
    fn plan_and_cond_plugin_match_population_oracles() {
        let pop = crate::oracle::fixture_f2();
        let sol = pop.exact_solve().unwrap();
        let sizes = SampleSizes::new(7, 7).unwrap(); // λ̂ = 1/2 = population λ
        let eta = pop.ctx.cost().clone();
        let est = var_plan(&sol.op, &eta, sizes, NeumannMode::Direct).unwrap();
        let oracle_value = crate::oracle::exact_sigma_plan(&pop, &eta).unwrap();
        assert_abs_diff_eq!(est.value, oracle_value, epsilon = 1e-12 * (1.0 + oracle_value));

        let eta_row = Array1::from_shape_fn(pop.q.len(), |j| pop.q.points()[(j, 0)]);
        let est_c = var_cond(
            &sol.op,
            &sol.pot,
            &[0.0],
            &eta_row,
            &pop.q,
            &pop.ctx,
            sizes,
            NeumannMode::Direct,
        )
        .unwrap();
        let oracle_c = crate::oracle::exact_sigma_cond(&pop, &[0.0], &eta_row).unwrap();
        assert_abs_diff_eq!(est_c.value, oracle_c, epsilon = 1e-12 * (1.0 + oracle_c));
    }

    #[test]
    fn plan_variance_direct_vs_schedule_small_interaction() {
        // With a mildly interacting plan the truncated estimator at the
        // default schedule sits within 1% of the direct solve.
        let p = DiscreteMeasure::new(pts(&[0.0, 1.0, 2.0]), array![0.5, 0.3, 0.2]).unwrap();
        let q = DiscreteMeasure::uniform(pts(&[0.0, 0.5, 1.5, 3.0])).unwrap();
        let cost = {
            let base = build_cost(CostSpec::SqEuclidean, &p, &q, 1.0).unwrap();
            CostSpec::Table(base.cost() * 0.2)
        };
        let ctx = build_cost(cost, &p, &q, 1.0).unwrap();
        let solved = solve_all(p, q, ctx);
        let sizes = SampleSizes::new(2000, 2000).unwrap();
        let eta = solved.ctx.cost().clone();
        let direct = var_plan(&solved.op, &eta, sizes, NeumannMode::Direct).unwrap();
        let n_default = default_schedule(sizes);
        let truncated = var_plan(
            &solved.op,
            &eta,
            sizes,
            NeumannMode::Terms(n_default),
        )
        .unwrap();
        let rel = (truncated.value - direct.value).abs() / direct.value;
        assert!(rel < 0.01, "relative gap {rel} at N = {n_default}");
    }

    #[test]
    fn kernel_point_matches_manual_recomputation() {
        // F1 geometry with U = P: assemble the same quantity from two plain
        // solver calls and the weighted-variance helper.
        let p = DiscreteMeasure::uniform(pts(&[0.0, 1.0])).unwrap();
        let q = DiscreteMeasure::uniform(pts(&[0.0, 2.0])).unwrap();
        let u = p.clone();
        let k = kernel_point(&p, &q, &u, &CostSpec::SqEuclidean, 1.0, 1e-13, gaussian_map)
            .unwrap();

        let ctx_pu = build_cost(CostSpec::SqEuclidean, &p, &u, 1.0).unwrap();
        let (pot_pu, rep1) = solve(&p, &u, &ctx_pu, 1e-13, DEFAULT_MAX_ITER).unwrap();
        let ctx_qu = build_cost(CostSpec::SqEuclidean, &q, &u, 1.0).unwrap();
        let (pot_qu, rep2) = solve(&q, &u, &ctx_qu, 1e-13, DEFAULT_MAX_ITER).unwrap();
        assert!(rep1.converged && rep2.converged);
        let diff = pot_pu.g() - pot_qu.g();
        let manual = gaussian_map(weighted_var(u.weights().view(), diff.view()));
        assert_abs_diff_eq!(k, manual, epsilon = 1e-12);
        assert!(k > 0.0 && k < 1.0);
    }

    #[test]
    fn eta_spec_builders() {
        let solved = f2_solved();
        let cost_table = EtaSpec::Cost.table(&solved.ctx, &solved.q).unwrap();
        assert_abs_diff_eq!(cost_table[(2, 0)], 4.0, epsilon = 1e-15);
        let ind = EtaSpec::Indicator(0.25).table(&solved.ctx, &solved.q).unwrap();
        assert_abs_diff_eq!(ind[(0, 0)], 1.0, epsilon = 0.0); // c=0 ≤ 0.25
        assert_abs_diff_eq!(ind[(0, 1)], 1.0, epsilon = 0.0); // c=0.25 inclusive
        assert_abs_diff_eq!(ind[(0, 2)], 0.0, epsilon = 0.0); // c=2.25
        let coord = EtaSpec::Coord(0).table(&solved.ctx, &solved.q).unwrap();
        assert_abs_diff_eq!(coord[(1, 3)], 3.0, epsilon = 0.0);
        assert!(EtaSpec::Coord(4).table(&solved.ctx, &solved.q).is_err());

        let row = EtaSpec::Cost
            .row_at(&[1.0], &solved.ctx, &solved.p, &solved.q)
            .unwrap();
        assert_abs_diff_eq!(row[3], 4.0, epsilon = 1e-15);
        let table = EtaSpec::Table(solved.ctx.cost().clone());
        let trow = table
            .row_at(&[1.0], &solved.ctx, &solved.p, &solved.q)
            .unwrap();
        assert_abs_diff_eq!(trow[3], 4.0, epsilon = 1e-15);
        assert!(table
            .row_at(&[0.31], &solved.ctx, &solved.p, &solved.q)
            .is_err());
    }
}
