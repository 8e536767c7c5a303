//! Shared statistical oracles for the integration suites: normal CDF,
//! Kolmogorov-Smirnov and chi-square goodness-of-fit machinery.
#![allow(dead_code)]

/// Φ(x) via Abramowitz-Stegun 7.1.26 on erf (|error| < 1.5e−7).
pub fn normal_cdf(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    0.5 * (1.0 + erf(z))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// One-sample KS statistic against a CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut d = 0.0_f64;
    for (i, x) in samples.iter().enumerate() {
        let f = cdf(*x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    d
}

/// Large-sample KS critical value at significance α = 1%.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.62762 / (n as f64).sqrt()
}

/// χ² critical value at α = 1% (upper tail): exact for small df, then
/// Wilson-Hilferty.
pub fn chi2_critical_1pct(df: usize) -> f64 {
    const SMALL: [f64; 8] = [
        6.634896601, 9.210340372, 11.34486673, 13.27670414, 15.08627247, 16.81189383,
        18.47530691, 20.09023503,
    ];
    if df == 0 {
        return 0.0;
    }
    if df <= SMALL.len() {
        return SMALL[df - 1];
    }
    let k = df as f64;
    let z = 2.3263478740;
    k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3)
}

/// Pearson χ² statistic from observed counts and expected probabilities,
/// pooling the tail so every expected count is at least 5. Returns
/// (statistic, degrees of freedom).
pub fn chi2_gof(observed: &[usize], probs: &[f64], total: usize) -> (f64, usize) {
    assert_eq!(observed.len(), probs.len());
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut acc_obs = 0.0;
    let mut acc_exp = 0.0;
    for (o, p) in observed.iter().zip(probs) {
        acc_obs += *o as f64;
        acc_exp += p * total as f64;
        if acc_exp >= 5.0 {
            bins.push((acc_obs, acc_exp));
            acc_obs = 0.0;
            acc_exp = 0.0;
        }
    }
    if acc_exp > 0.0 {
        if let Some(last) = bins.last_mut() {
            last.0 += acc_obs;
            last.1 += acc_exp;
        } else {
            bins.push((acc_obs, acc_exp));
        }
    }
    let stat = bins
        .iter()
        .map(|(o, e)| (o - e) * (o - e) / e)
        .sum::<f64>();
    (stat, bins.len().saturating_sub(1))
}

/// Poisson pmf values 0..=k_max for GOF binning.
pub fn poisson_pmf(rate: f64, k_max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k_max + 1);
    let mut p = (-rate).exp();
    out.push(p);
    for k in 1..=k_max {
        p *= rate / k as f64;
        out.push(p);
    }
    out
}
