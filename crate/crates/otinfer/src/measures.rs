//! Discrete probability measures, cost tables, and sample ingestion.

use crate::{OtError, Result};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Tolerance for "weights sum to one" checks.
const MASS_TOL: f64 = 1e-12;

/// A finitely supported probability measure: `n` atoms in ℝ^d with
/// nonnegative weights summing to one.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    points: Array2<f64>,
    weights: Array1<f64>,
}

impl DiscreteMeasure {
    /// Build a measure from an `n×d` point table and explicit weights.
    pub fn new(points: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(OtError::EmptySample);
        }
        if points.nrows() != weights.len() {
            return Err(OtError::DimensionMismatch(format!(
                "{} atoms vs {} weights",
                points.nrows(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(OtError::InvalidArgument(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(OtError::InvalidArgument(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { points, weights })
    }

    /// Uniform measure on the given points (duplicates kept as-is).
    pub fn uniform(points: Array2<f64>) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(OtError::EmptySample);
        }
        let weights = Array1::from_elem(n, 1.0 / n as f64);
        Self::new(points, weights)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // constructors reject empty supports
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    /// Coordinates of atom `i`.
    pub fn atom(&self, i: usize) -> Vec<f64> {
        self.points.row(i).to_vec()
    }
}

/// A batch of raw sample points plus a provenance note (file path or
/// generator description); the precursor of an empirical measure.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub points: Array2<f64>,
    pub source: String,
}

/// Named cost functions. `Table` carries explicit values and therefore
/// cannot be evaluated off the support it was built for.
#[derive(Debug, Clone)]
pub enum CostSpec {
    SqEuclidean,
    Euclidean,
    /// ℓ_p distance, p ≥ 1.
    Lp(f64),
    /// Discrete (0/1) cost `1{x ≠ y}` — the standard discontinuous test cost.
    Discrete,
    Table(Array2<f64>),
}

impl CostSpec {
    /// Evaluate the cost at a pair of coordinate vectors. Errors for
    /// `Table`, which has no off-support values.
    pub fn evaluate(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(OtError::DimensionMismatch(format!(
                "cost arguments of dimension {} and {}",
                x.len(),
                y.len()
            )));
        }
        match self {
            CostSpec::SqEuclidean => {
                Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum())
            }
            CostSpec::Euclidean => Ok(x
                .iter()
                .zip(y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()),
            CostSpec::Lp(p) => {
                if *p < 1.0 {
                    return Err(OtError::InvalidArgument(format!("lp cost needs p ≥ 1, got {p}")));
                }
                let s: f64 = x.iter().zip(y).map(|(a, b)| (a - b).abs().powf(*p)).sum();
                Ok(s.powf(1.0 / p))
            }
            CostSpec::Discrete => Ok(if x == y { 0.0 } else { 1.0 }),
            CostSpec::Table(_) => Err(OtError::CostNotExtendable),
        }
    }
}

/// A cost table together with its regularization strength and the Gibbs
/// kernel `C = exp(−c/ε)`. All downstream formulas work on the
/// unit-regularized problem `c/ε`, so `sup_unit()` (= ‖c/ε‖∞) is the bound
/// that appears in every Lemma-2.2-style estimate.
#[derive(Debug, Clone)]
pub struct CostContext {
    cost: Array2<f64>,
    epsilon: f64,
    sup_bound: f64,
    gibbs: Array2<f64>,
    spec: CostSpec,
}

impl CostContext {
    pub fn cost(&self) -> &Array2<f64> {
        &self.cost
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// ‖c‖∞ of the raw cost table.
    pub fn sup_bound(&self) -> f64 {
        self.sup_bound
    }

    /// ‖c/ε‖∞ — the bound governing potentials, densities and spectra.
    pub fn sup_unit(&self) -> f64 {
        self.sup_bound / self.epsilon
    }

    pub fn gibbs(&self) -> &Array2<f64> {
        &self.gibbs
    }

    pub fn spec(&self) -> &CostSpec {
        &self.spec
    }

    pub fn nrows(&self) -> usize {
        self.cost.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.cost.ncols()
    }

    /// Unit-problem cost `c/ε` (also `−log C`).
    pub fn unit_cost(&self) -> Array2<f64> {
        &self.cost / self.epsilon
    }

    /// Unit cost of a fresh row: `c(x, y_j)/ε` over all atoms of `y`.
    pub fn unit_cost_row(&self, x: &[f64], y: &DiscreteMeasure) -> Result<Array1<f64>> {
        let mut row = Array1::zeros(y.len());
        for j in 0..y.len() {
            row[j] = self.spec.evaluate(x, &y.atom(j))? / self.epsilon;
        }
        Ok(row)
    }

    /// Restrict the table to subsets of rows and columns (used when an
    /// empirical measure only touches part of a population support).
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> CostContext {
        let cost = Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| {
            self.cost[(rows[i], cols[j])]
        });
        let gibbs = Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| {
            self.gibbs[(rows[i], cols[j])]
        });
        CostContext {
            cost,
            epsilon: self.epsilon,
            sup_bound: self.sup_bound,
            gibbs,
            spec: self.spec.clone(),
        }
    }
}

/// Evaluate (or validate) a cost specification on the product of two
/// supports and fold in the regularization.
pub fn build_cost(
    spec: CostSpec,
    x: &DiscreteMeasure,
    y: &DiscreteMeasure,
    epsilon: f64,
) -> Result<CostContext> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(OtError::InvalidArgument(format!(
            "epsilon must be a positive real, got {epsilon}"
        )));
    }
    let (n, m) = (x.len(), y.len());
    let cost = match &spec {
        CostSpec::Table(t) => {
            if t.nrows() != n || t.ncols() != m {
                return Err(OtError::DimensionMismatch(format!(
                    "cost table {}×{} vs supports {n}×{m}",
                    t.nrows(),
                    t.ncols()
                )));
            }
            t.clone()
        }
        _ => {
            let mut c = Array2::zeros((n, m));
            for i in 0..n {
                for j in 0..m {
                    c[(i, j)] = spec.evaluate(&x.atom(i), &y.atom(j))?;
                }
            }
            c
        }
    };
    for ((i, j), v) in cost.indexed_iter() {
        if !v.is_finite() {
            return Err(OtError::UnboundedCost { row: i, col: j });
        }
    }
    let sup_bound = cost.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let gibbs = cost.mapv(|c| (-c / epsilon).exp());
    Ok(CostContext {
        cost,
        epsilon,
        sup_bound,
        gibbs,
        spec,
    })
}

/// Turn raw samples into the empirical measure with uniform weights
/// (duplicate points stay distinct so `n` remains the true sample size).
pub fn from_samples(samples: &SampleSet) -> Result<DiscreteMeasure> {
    DiscreteMeasure::uniform(samples.points.clone())
}

/// Parse an analytic cost name: "sq_euclidean", "euclidean", "lp:<p>", or
/// "discrete". Table costs need a file and are handled by the CLI layer.
pub fn parse_cost_name(name: &str) -> Result<CostSpec> {
    match name {
        "sq_euclidean" => Ok(CostSpec::SqEuclidean),
        "euclidean" => Ok(CostSpec::Euclidean),
        "discrete" => Ok(CostSpec::Discrete),
        other => {
            if let Some(p_str) = other.strip_prefix("lp:") {
                let p: f64 = p_str.parse().map_err(|_| {
                    OtError::InvalidArgument(format!("invalid lp exponent: {p_str:?}"))
                })?;
                Ok(CostSpec::Lp(p))
            } else {
                Err(OtError::InvalidArgument(format!(
                    "unknown cost {other:?}; expected sq_euclidean, euclidean, lp:<p>, or discrete"
                )))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Csv,
    Json,
}

/// Load sample points from disk: CSV (one point per line, comma-separated)
/// or JSON (array of arrays). `skip_header` drops the first CSV line.
pub fn load_samples(path: &str, format: SampleFormat, skip_header: bool) -> Result<SampleSet> {
    let text = std::fs::read_to_string(path).map_err(|source| OtError::Io {
        path: path.to_string(),
        source,
    })?;
    let rows: Vec<Vec<f64>> = match format {
        SampleFormat::Csv => parse_csv(&text, skip_header)?,
        SampleFormat::Json => {
            let parsed: Vec<Vec<f64>> =
                serde_json::from_str(&text).map_err(|e| OtError::Parse {
                    record: 0,
                    message: e.to_string(),
                })?;
            parsed
        }
    };
    rows_to_samples(rows, path.to_string())
}

fn parse_csv(text: &str, skip_header: bool) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if skip_header && lineno == 0 {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>> = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| OtError::Parse {
                    record: lineno + 1,
                    message: format!("non-numeric cell {cell:?}"),
                })
            })
            .collect();
        rows.push(row?);
    }
    Ok(rows)
}

fn rows_to_samples(rows: Vec<Vec<f64>>, source: String) -> Result<SampleSet> {
    if rows.is_empty() {
        return Err(OtError::EmptySample);
    }
    let dim = rows[0].len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(OtError::Parse {
                record: i + 1,
                message: format!("ragged rows at record {}", i + 1),
            });
        }
    }
    let mut points = Array2::zeros((rows.len(), dim));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            points[(i, j)] = *v;
        }
    }
    Ok(SampleSet { points, source })
}

/// Synthetic sample generators for simulations.
#[derive(Debug, Clone)]
pub enum GeneratorSpec {
    /// Draw atoms of a finite support with the given probabilities.
    Finite {
        points: Array2<f64>,
        probs: Vec<f64>,
    },
    /// Isotropic Gaussian around `mean` with standard deviation `std`.
    Gaussian { mean: Vec<f64>, std: f64 },
}

/// Draw `n` i.i.d. points; a pure function of `(generator, n, seed)`.
pub fn sample_from(generator: &GeneratorSpec, n: usize, seed: u64) -> Result<SampleSet> {
    if n == 0 {
        return Err(OtError::EmptySample);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    match generator {
        GeneratorSpec::Finite { points, probs } => {
            if points.nrows() != probs.len() {
                return Err(OtError::DimensionMismatch(format!(
                    "{} support points vs {} probabilities",
                    points.nrows(),
                    probs.len()
                )));
            }
            let total: f64 = probs.iter().sum();
            if probs.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > MASS_TOL {
                return Err(OtError::InvalidArgument(
                    "finite-generator probabilities must be nonnegative and sum to 1".into(),
                ));
            }
            let mut out = Array2::zeros((n, points.ncols()));
            for i in 0..n {
                let k = draw_categorical(probs, &mut rng);
                out.row_mut(i).assign(&points.row(k));
            }
            Ok(SampleSet {
                points: out,
                source: format!("finite(n={n}, seed={seed})"),
            })
        }
        GeneratorSpec::Gaussian { mean, std } => {
            if !(std.is_finite() && *std >= 0.0) {
                return Err(OtError::InvalidArgument(format!(
                    "gaussian std must be nonnegative, got {std}"
                )));
            }
            let d = mean.len();
            let mut out = Array2::zeros((n, d));
            for i in 0..n {
                for j in 0..d {
                    out[(i, j)] = mean[j] + std * standard_normal(&mut rng);
                }
            }
            Ok(SampleSet {
                points: out,
                source: format!("gaussian(n={n}, seed={seed})"),
            })
        }
    }
}

/// Inverse-CDF draw from a categorical distribution.
pub fn draw_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1 // guard against rounding at the top of the CDF
}

/// Box–Muller standard normal (avoids a distributions dependency for the
/// one standard family we ship).
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.random();
        if u1 > 0.0 {
            let u2: f64 = rng.random();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}
