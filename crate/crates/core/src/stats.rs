//! Sample summaries shared by the fitting and metrics code.

/// Arithmetic mean; `NaN` for an empty slice.
pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

/// Linear-interpolation quantile on sorted data (R type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn quantile(x: &[f64], p: f64) -> f64 {
    quantile_sorted(&sorted(x), p)
}

/// Pearson correlation; `NaN` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Posterior summary of one scalar parameter.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ParameterSummary {
    pub parameter: String,
    pub estimate: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ParameterSummary {
    /// Summary from draws: mean, sd and the central 95% interval.
    pub fn from_samples(parameter: &str, draws: &[f64]) -> Self {
        let s = sorted(draws);
        Self {
            parameter: parameter.to_string(),
            estimate: mean(draws),
            sd: variance(draws).sqrt(),
            lower: quantile_sorted(&s, 0.025),
            upper: quantile_sorted(&s, 0.975),
        }
    }
}

/// Writes `parameter,estimate,sd,q025,q975` rows.
pub fn write_summary_csv<W: std::io::Write>(rows: &[ParameterSummary], mut w: W) -> std::io::Result<()> {
    writeln!(w, "parameter,estimate,sd,q025,q975")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.parameter, r.estimate, r.sd, r.lower, r.upper)?;
    }
    Ok(())
}
