//! Bias, RMSE and coverage over replicates.
//!
//! Each replicate is first reduced to its error `mean(draws) − θ`, its root mean
//! squared deviation `sqrt(mean((draws − θ)²))` and an indicator that the
//! 2.5% and 97.5% sample quantiles strictly bracket `θ`. Bias, RMSE and
//! coverage are the averages of these over replicates. Stage-2 draws pooled
//! over exposure samples enter as one array, so the same reduction gives the
//! double average over `(j, k)`. Block exposures use the identical reduction per
//! block and time, with a truth that varies by replicate, then average over
//! replicates and times.

use std::io::Write;

use nalgebra::DMatrix;

use crate::blockagg::AggregationMethod;
use crate::error::{Error, Result};
use crate::stats::{pearson, quantile_sorted, sorted};

/// Posterior draws of one scalar parameter in one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterDraws {
    pub parameter: String,
    /// Aggregation method behind stage-2 draws; `None` for stage-1 parameters.
    pub method: Option<AggregationMethod>,
    pub truth: f64,
    pub draws: Vec<f64>,
}

/// Block-exposure draws of one replicate for one aggregation method.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDraws {
    pub method: AggregationMethod,
    /// Blocks × T.
    pub truth: DMatrix<f64>,
    /// One blocks × T matrix per exposure draw.
    pub draws: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplicateOutcome {
    pub parameters: Vec<ParameterDraws>,
    pub blocks: Vec<BlockDraws>,
}

/// Per-draw-set reduction: `(error, rmse, covered)`.
pub fn reduce_draws(draws: &[f64], truth: f64) -> Result<(f64, f64, bool)> {
    if draws.is_empty() {
        return Err(Error::InvalidInput("no posterior draws".into()));
    }
    let n = draws.len() as f64;
    let error = draws.iter().sum::<f64>() / n - truth;
    let rmse = (draws.iter().map(|d| (d - truth) * (d - truth)).sum::<f64>() / n).sqrt();
    let s = sorted(draws);
    let covered = quantile_sorted(&s, 0.025) < truth && truth < quantile_sorted(&s, 0.975);
    Ok((error, rmse, covered))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterReplicate {
    pub parameter: String,
    pub method: Option<AggregationMethod>,
    pub truth: f64,
    pub error: f64,
    pub rmse: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReplicate {
    pub method: AggregationMethod,
    /// Blocks × T reductions.
    pub error: DMatrix<f64>,
    pub rmse: DMatrix<f64>,
    pub covered: DMatrix<f64>,
    /// Correlation between posterior-mean block exposures and truth over blocks and times.
    pub correlation: f64,
}

/// A replicate reduced to what the aggregate metrics need.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSummary {
    pub replicate: usize,
    pub parameters: Vec<ParameterReplicate>,
    pub blocks: Vec<BlockReplicate>,
}

impl ReplicateSummary {
    pub fn from_outcome(replicate: usize, outcome: &ReplicateOutcome) -> Result<Self> {
        let parameters = outcome
            .parameters
            .iter()
            .map(|p| {
                let (error, rmse, covered) = reduce_draws(&p.draws, p.truth)
                    .map_err(|_| Error::InvalidInput(format!("no draws for {}", p.parameter)))?;
                Ok(ParameterReplicate {
                    parameter: p.parameter.clone(),
                    method: p.method,
                    truth: p.truth,
                    error,
                    rmse,
                    covered,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let blocks = outcome.blocks.iter().map(reduce_blocks).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            replicate,
            parameters,
            blocks,
        })
    }
}

fn reduce_blocks(b: &BlockDraws) -> Result<BlockReplicate> {
    let (n, nt) = b.truth.shape();
    if b.draws.is_empty() || b.draws.iter().any(|d| d.shape() != (n, nt)) {
        return Err(Error::InvalidInput(format!(
            "block draws must be non-empty and {n} × {nt}"
        )));
    }
    let mut error = DMatrix::zeros(n, nt);
    let mut rmse = DMatrix::zeros(n, nt);
    let mut covered = DMatrix::zeros(n, nt);
    let mut estimate = DMatrix::zeros(n, nt);
    let mut column = vec![0.0; b.draws.len()];
    for t in 0..nt {
        for i in 0..n {
            for (c, d) in column.iter_mut().zip(&b.draws) {
                *c = d[(i, t)];
            }
            let (e, r, c) = reduce_draws(&column, b.truth[(i, t)])?;
            error[(i, t)] = e;
            rmse[(i, t)] = r;
            covered[(i, t)] = if c { 1.0 } else { 0.0 };
            estimate[(i, t)] = e + b.truth[(i, t)];
        }
    }
    Ok(BlockReplicate {
        method: b.method,
        correlation: pearson(estimate.as_slice(), b.truth.as_slice()),
        error,
        rmse,
        covered,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterMetrics {
    pub parameter: String,
    pub method: Option<AggregationMethod>,
    pub truth: f64,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub n_replicates: usize,
}

/// Block metrics averaged over replicates and times.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMetrics {
    pub method: AggregationMethod,
    pub block_id: String,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub scenario: String,
    pub parameters: Vec<ParameterMetrics>,
    pub blocks: Vec<BlockMetrics>,
    pub replicates: Vec<ReplicateSummary>,
    pub failures: Vec<ReplicateFailure>,
}

fn method_label(m: Option<AggregationMethod>) -> String {
    m.map(|m| m.number().to_string()).unwrap_or_default()
}

impl MetricsReport {
    pub fn n_replicates(&self) -> usize {
        self.replicates.len()
    }

    pub fn n_failures(&self) -> usize {
        self.failures.len()
    }

    pub fn parameter(&self, name: &str, method: Option<AggregationMethod>) -> Option<&ParameterMetrics> {
        self.parameters.iter().find(|p| p.parameter == name && p.method == method)
    }

    /// Per-replicate block correlations for one method.
    pub fn correlations(&self, method: AggregationMethod) -> Vec<f64> {
        self.replicates
            .iter()
            .flat_map(|r| r.blocks.iter().filter(|b| b.method == method).map(|b| b.correlation))
            .collect()
    }

    /// Mean per-replicate block correlation; `NaN` without block results.
    pub fn mean_correlation(&self, method: AggregationMethod) -> f64 {
        let c = self.correlations(method);
        c.iter().sum::<f64>() / c.len() as f64
    }

    /// `parameter,method,truth,bias,rmse,coverage,n_replicates`; method is empty
    /// for stage-1 parameters.
    pub fn write_metrics_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "parameter,method,truth,bias,rmse,coverage,n_replicates")?;
        for p in &self.parameters {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                p.parameter,
                method_label(p.method),
                p.truth,
                p.bias,
                p.rmse,
                p.coverage,
                p.n_replicates
            )?;
        }
        Ok(())
    }

    /// `method,block_id,bias,rmse,coverage`.
    pub fn write_block_metrics_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "method,block_id,bias,rmse,coverage")?;
        for b in &self.blocks {
            writeln!(w, "{},{},{},{},{}", b.method.number(), b.block_id, b.bias, b.rmse, b.coverage)?;
        }
        Ok(())
    }

    /// Long format, one row per replicate and parameter:
    /// `scenario,replicate,parameter,method,error,rmse,covered`.
    pub fn write_replicate_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "scenario,replicate,parameter,method,error,rmse,covered")?;
        for r in &self.replicates {
            for p in &r.parameters {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    self.scenario,
                    r.replicate,
                    p.parameter,
                    method_label(p.method),
                    p.error,
                    p.rmse,
                    u8::from(p.covered)
                )?;
            }
        }
        Ok(())
    }

    /// Long format: `scenario,replicate,method,correlation`.
    pub fn write_correlation_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "scenario,replicate,method,correlation")?;
        for r in &self.replicates {
            for b in &r.blocks {
                writeln!(w, "{},{},{},{}", self.scenario, r.replicate, b.method.number(), b.correlation)?;
            }
        }
        Ok(())
    }

    /// `scenario,method,block_id,bias,rmse,coverage`, for plotting across scenarios.
    pub fn write_block_plot_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "scenario,method,block_id,bias,rmse,coverage")?;
        for b in &self.blocks {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                self.scenario,
                b.method.number(),
                b.block_id,
                b.bias,
                b.rmse,
                b.coverage
            )?;
        }
        Ok(())
    }

    /// `replicate,message`.
    pub fn write_failures_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "replicate,message")?;
        for f in &self.failures {
            writeln!(w, "{},\"{}\"", f.replicate, f.message.replace('"', "'"))?;
        }
        Ok(())
    }
}

/// Aggregates reduced replicates. Parameters appear in first-seen order; a
/// parameter missing from some replicates is averaged over those that have it.
pub fn aggregate(
    scenario: &str,
    replicates: Vec<ReplicateSummary>,
    failures: Vec<ReplicateFailure>,
    block_ids: &[String],
) -> Result<MetricsReport> {
    if replicates.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no successful replicates to aggregate ({} failed)",
            failures.len()
        )));
    }
    let mut parameters: Vec<ParameterMetrics> = Vec::new();
    for r in &replicates {
        for p in &r.parameters {
            let row = match parameters
                .iter_mut()
                .find(|m| m.parameter == p.parameter && m.method == p.method)
            {
                Some(row) => row,
                None => {
                    parameters.push(ParameterMetrics {
                        parameter: p.parameter.clone(),
                        method: p.method,
                        truth: p.truth,
                        bias: 0.0,
                        rmse: 0.0,
                        coverage: 0.0,
                        n_replicates: 0,
                    });
                    parameters.last_mut().expect("just pushed")
                }
            };
            row.bias += p.error;
            row.rmse += p.rmse;
            row.coverage += if p.covered { 1.0 } else { 0.0 };
            row.n_replicates += 1;
        }
    }
    for row in parameters.iter_mut() {
        let n = row.n_replicates as f64;
        row.bias /= n;
        row.rmse /= n;
        row.coverage /= n;
    }

    let mut methods: Vec<AggregationMethod> = Vec::new();
    for b in replicates.iter().flat_map(|r| &r.blocks) {
        if !methods.contains(&b.method) {
            methods.push(b.method);
        }
    }
    let mut blocks = Vec::new();
    for method in methods {
        let reps: Vec<&BlockReplicate> = replicates
            .iter()
            .flat_map(|r| r.blocks.iter().filter(|b| b.method == method))
            .collect();
        let (n, nt) = reps[0].error.shape();
        if reps.iter().any(|b| b.error.shape() != (n, nt)) || block_ids.len() != n {
            return Err(Error::InvalidInput(format!(
                "block results must all be {} × {nt}",
                block_ids.len()
            )));
        }
        let denom = (reps.len() * nt) as f64;
        for (i, id) in block_ids.iter().enumerate() {
            let avg = |m: fn(&BlockReplicate) -> &DMatrix<f64>| {
                reps.iter().map(|b| m(b).row(i).sum()).sum::<f64>() / denom
            };
            blocks.push(BlockMetrics {
                method,
                block_id: id.clone(),
                bias: avg(|b| &b.error),
                rmse: avg(|b| &b.rmse),
                coverage: avg(|b| &b.covered),
            });
        }
    }
    Ok(MetricsReport {
        scenario: scenario.to_string(),
        parameters,
        blocks,
        replicates,
        failures,
    })
}

/// Metrics from raw replicate draws.
pub fn compute_metrics(scenario: &str, outcomes: &[ReplicateOutcome], block_ids: &[String]) -> Result<MetricsReport> {
    if outcomes.is_empty() {
        return Err(Error::InvalidInput("empty replicate set".into()));
    }
    let summaries = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| ReplicateSummary::from_outcome(i, o))
        .collect::<Result<Vec<_>>>()?;
    aggregate(scenario, summaries, Vec::new(), block_ids)
}
