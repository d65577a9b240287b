//! Kernel integral operators attached to an entropic plan density and the
//! linear solves built on them.
//!
//! For a plan density ξ between P (weights `v`, size n) and Q (weights `w`,
//! size m) the two operators are
//!
//! ```text
//! (A_P h)_j = Σ_i v_i ξ_ij h_i    (vector on P ↦ vector on Q)
//! (A_Q h)_i = Σ_j w_j ξ_ij h_j    (vector on Q ↦ vector on P)
//! ```
//!
//! They are adjoint to each other between the weighted ℓ² spaces, map the
//! all-ones vector to itself (the marginal conditions), and the composites
//! `A_Q A_P` / `A_P A_Q` contract mean-zero vectors by a factor
//! `δ = 1 − exp(−3 ‖c/ε‖_∞)`. That contraction is what makes both the
//! truncated Neumann series and the direct resolvent solve well posed.

use crate::sinkhorn::PlanDensity;
use crate::measures::{CostContext, DiscreteMeasure};
use crate::{OtError, Result};
use ndarray::{Array1, Array2};

/// Tolerance on the weighted mean of a Neumann right-hand side.
const CENTERING_TOL: f64 = 1e-8;

/// Which marginal a vector lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    P,
    Q,
}

/// How to apply the resolvent (I − A∘A)⁻¹: a truncated Neumann series with
/// a fixed number of terms, or a dense direct solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeumannMode {
    /// Σ_{k=0}^{N} T^k, i.e. `Terms(N)` applies N+1 series terms.
    Terms(usize),
    Direct,
}

impl std::fmt::Display for NeumannMode {
    fn fmt(&self, fmt: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NeumannMode::Terms(n) => write!(fmt, "{n}"),
            NeumannMode::Direct => write!(fmt, "direct"),
        }
    }
}

/// Plan density plus the weights of its two marginals, with the scale
/// constants controlling the operator norms.
#[derive(Debug, Clone)]
pub struct OperatorContext {
    xi: Array2<f64>,
    v: Array1<f64>,
    w: Array1<f64>,
    /// ‖c/ε‖_∞ of the cost the plan was solved with.
    sup_bound: f64,
    /// Contraction factor 1 − exp(−3·sup_bound) on centered vectors.
    delta: f64,
}

impl OperatorContext {
    /// Bundle a solved plan with its marginals.
    pub fn new(
        plan: &PlanDensity,
        p: &DiscreteMeasure,
        q: &DiscreteMeasure,
        ctx: &CostContext,
    ) -> Self {
        Self::from_parts(plan.xi().clone(), p.weights().clone(), q.weights().clone(), ctx.sup_unit())
    }

    /// Assemble from raw parts (used by the exact finite-population path).
    pub fn from_parts(xi: Array2<f64>, v: Array1<f64>, w: Array1<f64>, sup_unit: f64) -> Self {
        let delta = 1.0 - (-3.0 * sup_unit).exp();
        OperatorContext {
            xi,
            v,
            w,
            sup_bound: sup_unit,
            delta,
        }
    }

    pub fn xi(&self) -> &Array2<f64> {
        &self.xi
    }

    pub fn v(&self) -> &Array1<f64> {
        &self.v
    }

    pub fn w(&self) -> &Array1<f64> {
        &self.w
    }

    pub fn sup_bound(&self) -> f64 {
        self.sup_bound
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    fn weights(&self, side: Side) -> &Array1<f64> {
        match side {
            Side::P => &self.v,
            Side::Q => &self.w,
        }
    }

    /// Dimension of the vectors living on `side`.
    pub fn len(&self, side: Side) -> usize {
        self.weights(side).len()
    }
}

/// (A_P h)_j = Σ_i v_i ξ_ij h_i for a vector on P.
pub fn apply_ap(ctx: &OperatorContext, h: &Array1<f64>) -> Array1<f64> {
    let (n, m) = self_dims(ctx);
    debug_assert_eq!(h.len(), n);
    let mut out = Array1::zeros(m);
    for i in 0..n {
        let vh = ctx.v[i] * h[i];
        for j in 0..m {
            out[j] += vh * ctx.xi[(i, j)];
        }
    }
    out
}

/// (A_Q h)_i = Σ_j w_j ξ_ij h_j for a vector on Q.
pub fn apply_aq(ctx: &OperatorContext, h: &Array1<f64>) -> Array1<f64> {
    let (n, m) = self_dims(ctx);
    debug_assert_eq!(h.len(), m);
    let mut out = Array1::zeros(n);
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..m {
            acc += ctx.w[j] * ctx.xi[(i, j)] * h[j];
        }
        out[i] = acc;
    }
    out
}

fn self_dims(ctx: &OperatorContext) -> (usize, usize) {
    (ctx.v.len(), ctx.w.len())
}

/// One application of the composite T = A_Q∘A_P (side P) or A_P∘A_Q (side Q).
fn apply_composite(ctx: &OperatorContext, h: &Array1<f64>, side: Side) -> Array1<f64> {
    match side {
        Side::P => apply_aq(ctx, &apply_ap(ctx, h)),
        Side::Q => apply_ap(ctx, &apply_aq(ctx, h)),
    }
}

/// Weighted mean of a vector on the given side.
pub fn side_mean(ctx: &OperatorContext, h: &Array1<f64>, side: Side) -> f64 {
    crate::stats::weighted_mean(ctx.weights(side).view(), h.view())
}

/// Subtract the weighted mean so the vector is centered on its side.
pub fn center(ctx: &OperatorContext, h: &Array1<f64>, side: Side) -> Array1<f64> {
    let mean = side_mean(ctx, h, side);
    h.mapv(|x| x - mean)
}

/// Weighted ℓ² norm on the given side.
pub fn side_norm(ctx: &OperatorContext, h: &Array1<f64>, side: Side) -> f64 {
    let weights = ctx.weights(side);
    h.iter()
        .zip(weights.iter())
        .map(|(x, w)| w * x * x)
        .sum::<f64>()
        .sqrt()
}

/// Apply the resolvent (I − T)⁻¹ to a centered right-hand side, where T is
/// the composite operator of the requested side.
///
/// The rhs must have weighted mean ≤ 1e-8 in absolute value: on the
/// orthogonal complement of constants the resolvent is a convergent Neumann
/// series, while constants are fixed points of T and the series diverges.
pub fn neumann_solve(
    ctx: &OperatorContext,
    rhs: &Array1<f64>,
    side: Side,
    mode: NeumannMode,
) -> Result<Array1<f64>> {
    let expected = ctx.len(side);
    if rhs.len() != expected {
        return Err(OtError::DimensionMismatch(format!(
            "rhs length {} vs side dimension {expected}",
            rhs.len()
        )));
    }
    let mean = side_mean(ctx, rhs, side);
    if mean.abs() > CENTERING_TOL {
        return Err(OtError::NotCentered(mean));
    }
    match mode {
        NeumannMode::Terms(n_terms) => {
            let mut acc = rhs.clone();
            let mut power = rhs.clone();
            for _ in 0..n_terms {
                power = apply_composite(ctx, &power, side);
                acc += &power;
            }
            Ok(acc)
        }
        NeumannMode::Direct => direct_resolvent(ctx, rhs, side),
    }
}

/// Dense solve of (I − T) u = rhs on the centered subspace.
///
/// (I − T) is singular on the full space (T fixes constants), so we solve
/// with the rank-one corrected matrix B = I − T + 1·μᵀ, where μᵀx is the
/// weighted mean. B is invertible, agrees with I − T on centered vectors,
/// and maps the solution of B u = rhs to a centered u whenever rhs is
/// centered: taking weighted means of both sides gives mean(u) = mean(rhs)
/// = 0 because T preserves weighted means.
fn direct_resolvent(ctx: &OperatorContext, rhs: &Array1<f64>, side: Side) -> Result<Array1<f64>> {
    let n = ctx.len(side);
    let weights = ctx.weights(side).clone();
    // Materialize T column by column: T e_k for each basis vector.
    let mut mat = Array2::<f64>::zeros((n, n));
    let mut basis = Array1::<f64>::zeros(n);
    for k in 0..n {
        basis.fill(0.0);
        basis[k] = 1.0;
        let t_col = apply_composite(ctx, &basis, side);
        for i in 0..n {
            let delta_ik = if i == k { 1.0 } else { 0.0 };
            mat[(i, k)] = delta_ik - t_col[i] + weights[k];
        }
    }
    lu_solve(mat, rhs.clone())
}

/// Dense LU with partial pivoting; consumes its inputs.
fn lu_solve(mut a: Array2<f64>, mut b: Array1<f64>) -> Result<Array1<f64>> {
    let n = b.len();
    for col in 0..n {
        // Pivot selection.
        let mut pivot_row = col;
        let mut pivot_val = a[(col, col)].abs();
        for row in (col + 1)..n {
            let cand = a[(row, col)].abs();
            if cand > pivot_val {
                pivot_val = cand;
                pivot_row = row;
            }
        }
        if !(pivot_val > 1e-300) {
            return Err(OtError::Numeric(format!(
                "singular resolvent matrix at column {col}"
            )));
        }
        if pivot_row != col {
            for k in 0..n {
                a.swap((col, k), (pivot_row, k));
            }
            b.swap(col, pivot_row);
        }
        let pivot = a[(col, col)];
        for row in (col + 1)..n {
            let factor = a[(row, col)] / pivot;
            if factor == 0.0 {
                continue;
            }
            for k in (col + 1)..n {
                a[(row, k)] -= factor * a[(col, k)];
            }
            b[row] -= factor * b[col];
            a[(row, col)] = 0.0;
        }
    }
    // Back substitution.
    let mut x = Array1::<f64>::zeros(n);
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[(row, k)] * x[k];
        }
        x[row] = acc / a[(row, row)];
    }
    Ok(x)
}

/// Largest eigenvalue of the composite T = A_Q A_P restricted to the
/// centered subspace of L²(P), estimated by power iteration with a
/// deterministic start vector. Returns the estimate and a convergence flag.
///
/// T is self-adjoint and positive semidefinite in the weighted inner
/// product, so the Rayleigh quotient approaches the true maximum from
/// below — the estimate never overshoots the spectral bound it is checked
/// against.
pub fn spectral_gap(ctx: &OperatorContext) -> (f64, bool) {
    let n = ctx.len(Side::P);
    if n <= 1 {
        return (0.0, true);
    }
    // Deterministic, generically non-orthogonal start: ramp 0..n, centered.
    let ramp = Array1::from_shape_fn(n, |i| i as f64 + 1.0);
    let mut h = center(ctx, &ramp, Side::P);
    let mut norm = side_norm(ctx, &h, Side::P);
    if norm < 1e-300 {
        return (0.0, true);
    }
    h.mapv_inplace(|x| x / norm);
    let mut lambda = 0.0f64;
    let mut converged = false;
    for _ in 0..2000 {
        // Re-center each step to shed rounding drift back onto constants.
        let th = center(ctx, &apply_composite(ctx, &h, Side::P), Side::P);
        let rayleigh = h
            .iter()
            .zip(th.iter())
            .zip(ctx.v.iter())
            .map(|((a, b), w)| w * a * b)
            .sum::<f64>();
        norm = side_norm(ctx, &th, Side::P);
        if norm < 1e-300 {
            // T annihilates the centered space: spectrum is {0}.
            return (0.0, true);
        }
        h = th.mapv(|x| x / norm);
        if (rayleigh - lambda).abs() <= 1e-13 * rayleigh.abs().max(1e-6) {
            lambda = rayleigh;
            converged = true;
            break;
        }
        lambda = rayleigh;
    }
    (lambda.max(0.0), converged)
}
