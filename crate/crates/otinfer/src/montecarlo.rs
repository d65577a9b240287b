//! Seeded, repeatable simulation studies: draw i.i.d. samples from a finite
//! population, run the estimators and intervals on each replication, and
//! report coverage, bias, RMSE, and studentized-pivot normality against the
//! population's exact values.
//!
//! Sampling is *collapsed*: a replication draws atom indices, keeps the
//! touched atoms with multiplicity weights k/n, and solves on that support.
//! This is exactly equivalent to the expanded empirical measure (duplicated
//! atoms carry identical potentials and influence values) and keeps every
//! solve at population size regardless of n and m.

use crate::inference::{
    ci, coloc_curve, divergence_ci, map_ci, var_cond, var_cost, var_plan, default_schedule,
    ConfidenceInterval, EtaSpec, SampleSizes,
};
use crate::measures::{draw_categorical, DiscreteMeasure};
use crate::operators::{NeumannMode, OperatorContext};
use crate::oracle::{
    exact_coloc, exact_sigma_cond, exact_sigma_cost, exact_sigma_divergence, exact_sigma_map,
    exact_sigma_plan, FinitePopulation, PopulationSpec, EXACT_TOL,
};
use crate::sinkhorn::{
    conditional_density_row, entropic_cost, entropic_map, plan_density, plan_expectation,
    sinkhorn_divergence, solve, DEFAULT_MAX_ITER,
};
use crate::stats::ks_statistic_normal;
use crate::{OtError, Result};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

fn default_tol() -> f64 {
    1e-10
}

/// Named η builders that can appear in a simulation config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EtaName {
    Cost,
    Indicator { t: f64 },
    Coord { k: usize },
}

impl EtaName {
    pub fn to_spec(&self) -> EtaSpec {
        match self {
            EtaName::Cost => EtaSpec::Cost,
            EtaName::Indicator { t } => EtaSpec::Indicator(*t),
            EtaName::Coord { k } => EtaSpec::Coord(*k),
        }
    }
}

/// One functional put under empirical test.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Target {
    Cost,
    Plan { eta: EtaName },
    Cond { eta: EtaName, x: Vec<f64> },
    Map { x: Vec<f64> },
    Divergence,
    Coloc { thresholds: Vec<f64> },
}

/// Resolvent mode used inside every replication: exact solve, the default
/// sample-size driven truncation, or a fixed number of terms.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum NMode {
    #[default]
    Direct,
    Auto,
    #[serde(untagged)]
    Terms(usize),
}

impl NMode {
    pub fn resolve(&self, sizes: SampleSizes) -> NeumannMode {
        match self {
            NMode::Direct => NeumannMode::Direct,
            NMode::Auto => NeumannMode::Terms(default_schedule(sizes)),
            NMode::Terms(k) => NeumannMode::Terms(*k),
        }
    }
}

/// A complete, serializable description of one simulation study.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub population: PopulationSpec,
    pub n: usize,
    pub m: usize,
    pub reps: usize,
    pub level: f64,
    pub targets: Vec<Target>,
    pub seed: u64,
    #[serde(default)]
    pub n_mode: NMode,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(OtError::InvalidArgument("reps must be ≥ 1".into()));
        }
        if self.n < 2 || self.m < 2 {
            return Err(OtError::InvalidArgument(
                "sample sizes n and m must be ≥ 2".into(),
            ));
        }
        if !(0.0 < self.level && self.level < 1.0) {
            return Err(OtError::InvalidArgument(format!(
                "level must lie in (0,1), got {}",
                self.level
            )));
        }
        if self.targets.is_empty() {
            return Err(OtError::InvalidArgument(
                "at least one target is required".into(),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(OtError::InvalidArgument(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }

    /// Parse and validate a config from JSON. Schema violations surface the
    /// offending key or type in the message.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: SimConfig = serde_json::from_str(text).map_err(|e| OtError::Parse {
            record: e.line(),
            message: format!("simulation config: {e}"),
        })?;
        config.validate()?;
        Ok(config)
    }
}

/// Aggregates for one reported target component.
#[derive(Debug, Clone, Serialize)]
pub struct TargetStats {
    pub coverage: f64,
    pub width_mean: f64,
    pub bias: f64,
    pub rmse: f64,
    pub ks: f64,
    pub reps_valid: usize,
}

/// Full result of a coverage study. Vector targets (map coordinates, curve
/// thresholds) are reported one component per key: `map[k]`, `coloc@t`.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub per_target: BTreeMap<String, TargetStats>,
    pub reps: usize,
    pub excluded: usize,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// One rung of a variance-consistency ladder: mean |σ̂² − σ²|/σ² per target
/// component over the rung's seeds.
#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyRow {
    pub n: usize,
    pub m: usize,
    pub rel_err: BTreeMap<String, f64>,
    pub reps_valid: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub rows: Vec<ConsistencyRow>,
}

/// Draw `count` i.i.d. atom indices from a discrete measure.
pub fn sample_indices<R: Rng>(measure: &DiscreteMeasure, count: usize, rng: &mut R) -> Vec<usize> {
    let probs: Vec<f64> = measure.weights().iter().copied().collect();
    (0..count).map(|_| draw_categorical(&probs, rng)).collect()
}

/// Collapse a multiset of atom indices into (touched population rows,
/// empirical measure with multiplicity weights).
pub fn collapse(measure: &DiscreteMeasure, indices: &[usize]) -> Result<(Vec<usize>, DiscreteMeasure)> {
    if indices.is_empty() {
        return Err(OtError::EmptySample);
    }
    let mut counts = vec![0usize; measure.len()];
    for &i in indices {
        counts[i] += 1;
    }
    let rows: Vec<usize> = (0..measure.len()).filter(|&i| counts[i] > 0).collect();
    let total = indices.len() as f64;
    let points = Array2::from_shape_fn((rows.len(), measure.dim()), |(r, d)| {
        measure.points()[(rows[r], d)]
    });
    let weights = Array1::from_shape_fn(rows.len(), |r| counts[rows[r]] as f64 / total);
    Ok((rows, DiscreteMeasure::new(points, weights)?))
}

/// Stable report keys for a target list, in config order; duplicates get a
/// `#2`, `#3`, … suffix.
pub fn flatten_keys(targets: &[Target], dim: usize) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut keys = Vec::new();
    let push = |base: String, keys: &mut Vec<String>, seen: &mut BTreeMap<String, usize>| {
        let count = seen.entry(base.clone()).or_insert(0);
        *count += 1;
        keys.push(if *count == 1 {
            base
        } else {
            format!("{base}#{count}")
        });
    };
    for target in targets {
        match target {
            Target::Cost => push("cost".into(), &mut keys, &mut seen),
            Target::Plan { .. } => push("plan".into(), &mut keys, &mut seen),
            Target::Cond { .. } => push("cond".into(), &mut keys, &mut seen),
            Target::Map { .. } => {
                for k in 0..dim {
                    push(format!("map[{k}]"), &mut keys, &mut seen);
                }
            }
            Target::Divergence => push("divergence".into(), &mut keys, &mut seen),
            Target::Coloc { thresholds } => {
                for t in thresholds {
                    push(format!("coloc@{t}"), &mut keys, &mut seen);
                }
            }
        }
    }
    keys
}

/// Exact population values and asymptotic variances for every target
/// component, aligned with [`flatten_keys`].
pub fn truth_values(pop: &FinitePopulation, targets: &[Target]) -> Result<(Vec<f64>, Vec<f64>)> {
    let sol = pop.exact_solve()?;
    let mut values = Vec::new();
    let mut sigmas = Vec::new();
    for target in targets {
        match target {
            Target::Cost => {
                values.push(sol.entropic_cost);
                sigmas.push(exact_sigma_cost(pop)?);
            }
            Target::Plan { eta } => {
                let table = eta.to_spec().table(&pop.ctx, &pop.q)?;
                values.push(plan_expectation(&sol.plan, &pop.p, &pop.q, &table)?);
                sigmas.push(exact_sigma_plan(pop, &table)?);
            }
            Target::Cond { eta, x } => {
                let row = eta.to_spec().row_at(x, &pop.ctx, &pop.p, &pop.q)?;
                let xi_row = conditional_density_row(&sol.pot, x, &pop.q, &pop.ctx)?;
                let value: f64 = (0..pop.q.len())
                    .map(|j| pop.q.weights()[j] * xi_row[j] * row[j])
                    .sum();
                values.push(value);
                sigmas.push(exact_sigma_cond(pop, x, &row)?);
            }
            Target::Map { x } => {
                let map = entropic_map(&sol.pot, x, &pop.q, &pop.ctx)?;
                let cov = exact_sigma_map(pop, x)?;
                for k in 0..pop.q.dim() {
                    values.push(map[k]);
                    sigmas.push(cov[(k, k)]);
                }
            }
            Target::Divergence => {
                values.push(sinkhorn_divergence(
                    &pop.p,
                    &pop.q,
                    pop.ctx.spec(),
                    pop.ctx.epsilon(),
                    EXACT_TOL,
                )?);
                sigmas.push(exact_sigma_divergence(pop)?);
            }
            Target::Coloc { thresholds } => {
                let (vals, cov) = exact_coloc(pop, thresholds)?;
                for (k, v) in vals.iter().enumerate() {
                    values.push(*v);
                    sigmas.push(cov[(k, k)]);
                }
            }
        }
    }
    Ok((values, sigmas))
}

/// Estimates, intervals, and variance values for one replication, aligned
/// with [`flatten_keys`].
pub struct RepValues {
    pub estimates: Vec<f64>,
    pub intervals: Vec<ConfidenceInterval>,
    pub variances: Vec<f64>,
}

/// Run one replication on the child stream `stream` of the config seed.
pub fn run_rep(pop: &FinitePopulation, cfg: &SimConfig, stream: u64) -> Result<RepValues> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let idx_p = sample_indices(&pop.p, cfg.n, &mut rng);
    let idx_q = sample_indices(&pop.q, cfg.m, &mut rng);
    let (rows_p, p_s) = collapse(&pop.p, &idx_p)?;
    let (rows_q, q_s) = collapse(&pop.q, &idx_q)?;
    let ctx = pop.ctx.select(&rows_p, &rows_q);
    let sizes = SampleSizes::new(cfg.n, cfg.m)?;
    let mode = cfg.n_mode.resolve(sizes);

    let (pot, report) = solve(&p_s, &q_s, &ctx, cfg.tol, DEFAULT_MAX_ITER)?;
    if !report.converged {
        return Err(OtError::NotConverged {
            residual: report.final_residual,
            iterations: report.iterations,
        });
    }
    let plan = plan_density(&pot, &ctx, &p_s, &q_s, cfg.tol)?;
    let op = OperatorContext::new(&plan, &p_s, &q_s, &ctx);

    let mut estimates = Vec::new();
    let mut intervals = Vec::new();
    let mut variances = Vec::new();
    for target in &cfg.targets {
        match target {
            Target::Cost => {
                let est = entropic_cost(&pot, &p_s, &q_s, &ctx);
                let var = var_cost(&pot, &p_s, &q_s, &ctx, sizes);
                intervals.push(ci(est, &var, cfg.level)?);
                estimates.push(est);
                variances.push(var.value);
            }
            Target::Plan { eta } => {
                let table = eta.to_spec().table(&ctx, &q_s)?;
                let est = plan_expectation(&plan, &p_s, &q_s, &table)?;
                let var = var_plan(&op, &table, sizes, mode)?;
                intervals.push(ci(est, &var, cfg.level)?);
                estimates.push(est);
                variances.push(var.value);
            }
            Target::Cond { eta, x } => {
                let row = eta.to_spec().row_at(x, &ctx, &p_s, &q_s)?;
                let xi_row = conditional_density_row(&pot, x, &q_s, &ctx)?;
                let est: f64 = (0..q_s.len())
                    .map(|j| q_s.weights()[j] * xi_row[j] * row[j])
                    .sum();
                let var = var_cond(&op, &pot, x, &row, &q_s, &ctx, sizes, mode)?;
                intervals.push(ci(est, &var, cfg.level)?);
                estimates.push(est);
                variances.push(var.value);
            }
            Target::Map { x } => {
                let report = map_ci(&op, &pot, x, &q_s, &ctx, sizes, cfg.level, mode)?;
                for k in 0..q_s.dim() {
                    estimates.push(report.map[k]);
                    intervals.push(report.intervals[k].clone());
                    variances.push(report.covariance[(k, k)]);
                }
            }
            Target::Divergence => {
                let report = divergence_ci(
                    &p_s,
                    &q_s,
                    pop.ctx.spec(),
                    pop.ctx.epsilon(),
                    cfg.tol,
                    sizes,
                    cfg.level,
                )?;
                estimates.push(report.divergence);
                intervals.push(report.interval.clone());
                variances.push(report.variance.value);
            }
            Target::Coloc { thresholds } => {
                let result = coloc_curve(&op, &ctx, thresholds, sizes, cfg.level, mode)?;
                for k in 0..thresholds.len() {
                    estimates.push(result.values[k]);
                    intervals.push(result.pointwise[k].clone());
                    variances.push(result.covariance[(k, k)]);
                }
            }
        }
    }
    Ok(RepValues {
        estimates,
        intervals,
        variances,
    })
}

/// Run the full coverage study described by the config.
pub fn run_coverage(cfg: &SimConfig) -> Result<CoverageReport> {
    cfg.validate()?;
    let pop = cfg.population.build()?;
    let keys = flatten_keys(&cfg.targets, pop.q.dim());
    let (truths, _) = truth_values(&pop, &cfg.targets)?;
    let k = keys.len();
    let start = Instant::now();

    let mut covered = vec![0usize; k];
    let mut width_sum = vec![0.0f64; k];
    let mut est_sum = vec![0.0f64; k];
    let mut sq_dev_sum = vec![0.0f64; k];
    let mut pivots: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut excluded = 0usize;

    for rep in 0..cfg.reps {
        match run_rep(&pop, cfg, rep as u64) {
            Ok(values) => {
                for i in 0..k {
                    let interval = &values.intervals[i];
                    if interval.lower <= truths[i] && truths[i] <= interval.upper {
                        covered[i] += 1;
                    }
                    width_sum[i] += interval.upper - interval.lower;
                    est_sum[i] += values.estimates[i];
                    sq_dev_sum[i] += (values.estimates[i] - truths[i]).powi(2);
                    if interval.std_error > 0.0 {
                        let pivot = (values.estimates[i] - truths[i]) / interval.std_error;
                        if pivot.is_finite() {
                            pivots[i].push(pivot);
                        }
                    }
                }
            }
            Err(_) => excluded += 1,
        }
    }
    let valid = cfg.reps - excluded;
    if valid == 0 {
        return Err(OtError::Numeric(
            "every replication failed to converge".into(),
        ));
    }

    let mut per_target = BTreeMap::new();
    for i in 0..k {
        let vf = valid as f64;
        per_target.insert(
            keys[i].clone(),
            TargetStats {
                coverage: covered[i] as f64 / vf,
                width_mean: width_sum[i] / vf,
                bias: est_sum[i] / vf - truths[i],
                rmse: (sq_dev_sum[i] / vf).sqrt(),
                ks: if pivots[i].is_empty() {
                    0.0
                } else {
                    ks_statistic_normal(&pivots[i])
                },
                reps_valid: valid,
            },
        );
    }
    Ok(CoverageReport {
        per_target,
        reps: cfg.reps,
        excluded,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Variance-consistency ladder: for each rung (n, m), average the relative
/// error |σ̂² − σ²|/σ² over `seeds` independent replications. A zero σ²
/// (degenerate target) reports the absolute error instead.
pub fn run_consistency(
    cfg: &SimConfig,
    rungs: &[(usize, usize)],
    seeds: usize,
) -> Result<ConsistencyReport> {
    cfg.validate()?;
    if rungs.is_empty() || seeds == 0 {
        return Err(OtError::InvalidArgument(
            "consistency ladder needs rungs and seeds".into(),
        ));
    }
    let pop = cfg.population.build()?;
    let keys = flatten_keys(&cfg.targets, pop.q.dim());
    let (_, sigmas) = truth_values(&pop, &cfg.targets)?;
    let k = keys.len();
    let mut rows = Vec::with_capacity(rungs.len());
    for (rung_idx, &(n, m)) in rungs.iter().enumerate() {
        let rung_cfg = SimConfig {
            n,
            m,
            ..cfg.clone()
        };
        rung_cfg.validate()?;
        let mut err_sum = vec![0.0f64; k];
        let mut excluded = 0usize;
        for s in 0..seeds {
            let stream = ((rung_idx as u64) << 32) | s as u64;
            match run_rep(&pop, &rung_cfg, stream) {
                Ok(values) => {
                    for i in 0..k {
                        let err = (values.variances[i] - sigmas[i]).abs();
                        err_sum[i] += if sigmas[i] > 0.0 { err / sigmas[i] } else { err };
                    }
                }
                Err(_) => excluded += 1,
            }
        }
        let valid = seeds - excluded;
        if valid == 0 {
            return Err(OtError::Numeric(format!(
                "every replication failed at rung n={n}, m={m}"
            )));
        }
        let mut rel_err = BTreeMap::new();
        for i in 0..k {
            rel_err.insert(keys[i].clone(), err_sum[i] / valid as f64);
        }
        rows.push(ConsistencyRow {
            n,
            m,
            rel_err,
            reps_valid: valid,
        });
    }
    Ok(ConsistencyReport { rows })
}
