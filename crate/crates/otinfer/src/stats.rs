//! Small numerical-statistics toolbox: standard-normal CDF and quantile,
//! Kolmogorov–Smirnov statistics, and weighted moments.
//!
//! The normal quantile uses Wichura's PPND16 rational approximation
//! (algorithm AS 241), whose absolute error is below 1e-15 — comfortably
//! inside the 1e-10 accuracy the confidence-interval contract asks for.

use ndarray::ArrayView1;

/// Standard normal CDF Φ(z), accurate to full double precision via `erfc`.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile Φ⁻¹(p) for p ∈ (0,1) (PPND16 / AS 241).
///
/// Panics on p outside (0,1); callers validate levels first.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "normal_quantile needs p in (0,1), got {p}");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&PPND_A, r) / poly(&PPND_B, r);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        poly(&PPND_C, r) / poly(&PPND_D, r)
    } else {
        let r = r - 5.0;
        poly(&PPND_E, r) / poly(&PPND_F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

fn poly(coeffs: &[f64; 8], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

// AS 241 PPND16 coefficient blocks, central region |p − ½| ≤ 0.425 ...
const PPND_A: [f64; 8] = [
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
];
const PPND_B: [f64; 8] = [
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
];
// ... intermediate tail √(−log r) ∈ (1.6, 5] ...
const PPND_C: [f64; 8] = [
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
];
const PPND_D: [f64; 8] = [
    1.0,
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
];
// ... and extreme tail √(−log r) > 5.
const PPND_E: [f64; 8] = [
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
];
const PPND_F: [f64; 8] = [
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
];

/// One-sample Kolmogorov–Smirnov statistic of `sample` against N(0,1):
/// `D = sup_z |F_n(z) − Φ(z)|`.
pub fn ks_statistic_normal(sample: &[f64]) -> f64 {
    assert!(!sample.is_empty(), "KS statistic needs a nonempty sample");
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("KS sample contains NaN"));
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, z) in sorted.iter().enumerate() {
        let phi = normal_cdf(*z);
        let upper = (i as f64 + 1.0) / n - phi; // ECDF right limit above Φ
        let lower = phi - i as f64 / n; // Φ above ECDF left limit
        d = d.max(upper).max(lower);
    }
    d
}

/// CDF of the Kolmogorov distribution,
/// `K(t) = 1 − 2 Σ_{k≥1} (−1)^{k−1} exp(−2 k² t²)`.
pub fn kolmogorov_cdf(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * t * t).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (1.0 - 2.0 * sum).clamp(0.0, 1.0)
}

/// Asymptotic KS critical value: the D above which the test at
/// significance `alpha` rejects, for sample size `n`. Solves
/// `K(t) = 1 − alpha` by bisection and returns `t / √n`.
pub fn ks_critical_value(n: usize, alpha: f64) -> f64 {
    assert!(alpha > 0.0 && alpha < 1.0);
    let target = 1.0 - alpha;
    let (mut lo, mut hi) = (0.1f64, 5.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kolmogorov_cdf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi) / (n as f64).sqrt()
}

/// Mean of `x` under probability weights `w` (assumed to sum to 1).
pub fn weighted_mean(w: ArrayView1<f64>, x: ArrayView1<f64>) -> f64 {
    w.iter().zip(x.iter()).map(|(wi, xi)| wi * xi).sum()
}

/// Variance of `x` under probability weights `w`, centered two-pass form.
pub fn weighted_var(w: ArrayView1<f64>, x: ArrayView1<f64>) -> f64 {
    let m = weighted_mean(w, x);
    w.iter()
        .zip(x.iter())
        .map(|(wi, xi)| wi * (xi - m) * (xi - m))
        .sum::<f64>()
        .max(0.0)
}

/// Covariance of `(x, y)` under probability weights `w`.
pub fn weighted_cov(w: ArrayView1<f64>, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    let mx = weighted_mean(w, x);
    let my = weighted_mean(w, y);
    w.iter()
        .zip(x.iter().zip(y.iter()))
        .map(|(wi, (xi, yi))| wi * (xi - mx) * (yi - my))
        .sum()
}
