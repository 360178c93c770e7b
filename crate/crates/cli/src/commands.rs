//! The subcommands. Each writes its files into one output directory, framed by
//! a run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use stfuse::blockagg::AggregationMethod;
use stfuse::geometry::{blocks_from_geojson, blocks_to_geojson};
use stfuse::simstudy::{ScenarioConfig, Study};
use stfuse::stage1::ObservationSet;
use stfuse::stage2::HealthData;
use stfuse::stats::{write_summary_csv, ParameterSummary};
use stfuse::{BlockGeometry, Point2D};

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::tables::{csv_error, parse_number, read_wide, write_file, write_wide};

pub const MONITORS: &str = "monitors.csv";
pub const PROXY: &str = "proxy.csv";
pub const COVARIATE: &str = "covariate.csv";
pub const HEALTH: &str = "health.csv";

const XY: [&str; 2] = ["x", "y"];

/// A resolved scenario plus the raw bytes it was built from.
pub struct Setup {
    pub config: ScenarioConfig,
    pub config_path: Option<PathBuf>,
    pub blocks: Option<Vec<BlockGeometry>>,
    pub inputs: Vec<(String, Vec<u8>)>,
}

impl Setup {
    fn study(&self) -> CliResult<Study> {
        Ok(match &self.blocks {
            Some(b) => Study::with_blocks(self.config.clone(), b.clone())?,
            None => Study::new(self.config.clone())?,
        })
    }
}

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_blocks(path: &Path) -> CliResult<Vec<BlockGeometry>> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::data(path, "not UTF-8"))?;
    blocks_from_geojson(&text).map_err(|e| CliError::data(path, e))
}

/// Creates `out_dir`, writes the `running` manifest, runs `body` and records
/// the files it reports.
fn framed(
    command: &str,
    setup: &Setup,
    out_dir: &Path,
    extra_inputs: Vec<(String, Vec<u8>)>,
    body: impl FnOnce(&mut Vec<PathBuf>) -> CliResult<()>,
) -> CliResult<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let inputs = setup.inputs.iter().cloned().chain(extra_inputs).collect();
    let mut manifest = RunManifest::new(command, setup.config_path.as_deref(), &setup.config, inputs);
    manifest.write(out_dir)?;
    let mut outputs = Vec::new();
    let outcome = body(&mut outputs);
    manifest.finish(out_dir, &outputs, &outcome)?;
    outcome
}

fn point_labels(points: &[Point2D]) -> Vec<Vec<String>> {
    points.iter().map(|p| vec![p.x.to_string(), p.y.to_string()]).collect()
}

/// One replicate's observations and truths.
///
/// Files: `monitors.csv` (M rows), `proxy.csv` and `truth_field.csv` (one row
/// per grid cell), `covariate.csv` (monitor rows, then grid cells),
/// `truth_blocks.csv`, `health.csv`, `truth_params.csv` and `blocks.geojson`.
pub fn simulate(setup: &Setup, replicate: usize, out_dir: &Path) -> CliResult<()> {
    let study = setup.study()?;
    framed("simulate", setup, out_dir, vec![], |outputs| {
        let data = study.simulate(replicate)?;
        let mut out = |name: &str| {
            let p = out_dir.join(name);
            outputs.push(p.clone());
            p
        };
        let obs = &data.obs;
        write_wide(&out(MONITORS), &XY, &point_labels(&obs.monitor_locations), &obs.w)?;
        write_wide(&out(PROXY), &XY, &point_labels(&obs.proxy_centroids), &obs.x_tilde)?;
        write_wide(&out(COVARIATE), &XY, &point_labels(&obs.sites()), &obs.z)?;
        write_wide(&out("truth_field.csv"), &XY, &point_labels(&obs.proxy_centroids), &data.field.x)?;
        let ids: Vec<Vec<String>> = study.block_ids().into_iter().map(|id| vec![id]).collect();
        write_wide(&out("truth_blocks.csv"), &["block_id"], &ids, &data.field.block_truth)?;

        let health = &data.health;
        write_file(&out(HEALTH), |w| {
            writeln!(w, "block_id,t,count,expected")?;
            for (i, id) in study.block_ids().iter().enumerate() {
                for t in 0..health.n_times() {
                    writeln!(w, "{id},{},{},{}", t + 1, health.counts[(i, t)], health.expected[(i, t)])?;
                }
            }
            Ok(())
        })?;
        write_file(&out("truth_params.csv"), |w| {
            writeln!(w, "parameter,value")?;
            for (name, value) in study.truth.named() {
                writeln!(w, "{name},{value}")?;
            }
            Ok(())
        })?;
        let geojson = blocks_to_geojson(&study.blocks);
        write_file(&out("blocks.geojson"), |w| writeln!(w, "{geojson}"))?;
        Ok(())
    })
}

fn check_locations(path: &Path, found: &[Vec<String>], expected: &[Point2D]) -> CliResult<Vec<Point2D>> {
    let points = found
        .iter()
        .enumerate()
        .map(|(i, l)| Ok(Point2D::new(parse_number(path, i + 2, &l[0])?, parse_number(path, i + 2, &l[1])?)))
        .collect::<CliResult<Vec<_>>>()?;
    if !expected.is_empty() {
        let matches = points.len() == expected.len()
            && points.iter().zip(expected).all(|(p, q)| p.distance(q) <= 1e-9 * (1.0 + q.x.abs() + q.y.abs()));
        if !matches {
            return Err(CliError::data(
                path,
                format!("rows do not match the {} configured locations in order", expected.len()),
            ));
        }
    }
    Ok(points)
}

fn read_health(path: &Path, ids: &[String], n_times: usize) -> CliResult<HealthData> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(["block_id", "t", "count", "expected"]) {
        return Err(CliError::data(path, "expected header block_id,t,count,expected"));
    }
    let n = ids.len();
    let mut counts = DMatrix::from_element(n, n_times, f64::NAN);
    let mut expected = DMatrix::from_element(n, n_times, f64::NAN);
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = i + 2;
        let block = ids
            .iter()
            .position(|id| id == &record[0])
            .ok_or_else(|| CliError::data(path, format!("line {line}: unknown block {:?}", &record[0])))?;
        let t = parse_number(path, line, &record[1])?;
        if !(t >= 1.0 && t <= n_times as f64 && t.fract() == 0.0) {
            return Err(CliError::data(path, format!("line {line}: time {t} outside 1..={n_times}")));
        }
        let t = t as usize - 1;
        counts[(block, t)] = parse_number(path, line, &record[2])?;
        expected[(block, t)] = parse_number(path, line, &record[3])?;
    }
    if counts.iter().any(|v| v.is_nan()) {
        return Err(CliError::data(path, "some (block, time) pairs are missing"));
    }
    let exposure = DMatrix::zeros(n, n_times);
    HealthData::new(counts, expected, exposure).map_err(|e| CliError::data(path, e))
}

fn method_file(prefix: &str, method: AggregationMethod) -> String {
    format!("{prefix}_method{}.csv", method.number())
}

/// Fits stage 1 to the files written by [`simulate`] and, unless
/// `stage1_only`, propagates aggregated exposures through stage 2.
///
/// Files: `stage1_summary.csv`, and per method `exposure_method{m}.csv`
/// (`block_id,t,mean,sd,q025,q975` over the `J` surfaces) and
/// `stage2_method{m}.csv`. Summaries use `parameter,estimate,sd,q025,q975`.
pub fn fit(setup: &Setup, data_dir: &Path, replicate: usize, stage1_only: bool, out_dir: &Path) -> CliResult<()> {
    let study = setup.study()?;
    let mut names = vec![MONITORS, PROXY, COVARIATE];
    if !stage1_only {
        names.push(HEALTH);
    }
    let inputs = names
        .iter()
        .map(|n| Ok((n.to_string(), read_bytes(&data_dir.join(n))?)))
        .collect::<CliResult<Vec<_>>>()?;

    let monitors_path = data_dir.join(MONITORS);
    let monitors = read_wide(&monitors_path, &XY)?;
    let monitor_locations = check_locations(&monitors_path, &monitors.labels, &[])?;
    let proxy_path = data_dir.join(PROXY);
    let proxy = read_wide(&proxy_path, &XY)?;
    let centroids = check_locations(&proxy_path, &proxy.labels, &study.grid.centroids())?;
    let covariate_path = data_dir.join(COVARIATE);
    let covariate = read_wide(&covariate_path, &XY)?;
    let expected_sites: Vec<Point2D> = monitor_locations.iter().chain(&centroids).copied().collect();
    check_locations(&covariate_path, &covariate.labels, &expected_sites)?;
    let m = monitor_locations.len();
    let z_grid = covariate.values.rows(m, centroids.len()).into_owned();
    let obs = ObservationSet::new(monitor_locations, monitors.values, centroids, proxy.values, covariate.values)
        .map_err(|e| CliError::data(data_dir, e))?;
    let health = if stage1_only {
        None
    } else {
        Some(read_health(&data_dir.join(HEALTH), &study.block_ids(), obs.n_times())?)
    };

    framed("fit", setup, out_dir, inputs, |outputs| {
        let fitted = study.fit_observed(replicate, &obs, &z_grid, health.as_ref())?;
        let mut out = |name: &str| {
            let p = out_dir.join(name);
            outputs.push(p.clone());
            p
        };
        let stage1_path = out("stage1_summary.csv");
        let rows = fitted.stage1.summary();
        write_file(&stage1_path, |w| write_summary_csv(&rows, w))?;
        for mf in &fitted.methods {
            let ids = study.block_ids();
            write_file(&out(&method_file("exposure", mf.method)), |w| {
                writeln!(w, "block_id,t,mean,sd,q025,q975")?;
                for (i, id) in ids.iter().enumerate() {
                    for t in 0..obs.n_times() {
                        let draws: Vec<f64> = mf.exposures.iter().map(|x| x[(i, t)]).collect();
                        let s = ParameterSummary::from_samples(id, &draws);
                        writeln!(w, "{id},{},{},{},{},{}", t + 1, s.estimate, s.sd, s.lower, s.upper)?;
                    }
                }
                Ok(())
            })?;
            if let Some(pooled) = &mf.stage2 {
                let rows: Vec<ParameterSummary> = stfuse::stage2::Stage2Samples::PARAMETERS
                    .iter()
                    .enumerate()
                    .map(|(p, name)| ParameterSummary::from_samples(name, pooled.samples.parameter(p)))
                    .collect();
                write_file(&out(&method_file("stage2", mf.method)), |w| write_summary_csv(&rows, w))?;
            }
        }
        Ok(())
    })
}

/// Runs every replicate of the scenario and writes, for scenario label `X`,
/// `metrics_X.csv`, `block_metrics_X.csv`, and the long-format plot data
/// `replicates_X.csv`, `correlations_X.csv`, `block_plot_X.csv`, plus
/// `failures_X.csv`. Fails with [`CliError::OverBudget`] after writing them
/// when too many replicates failed.
pub fn study(setup: &Setup, out_dir: &Path, quiet: bool) -> CliResult<()> {
    let study = setup.study()?;
    framed("study", setup, out_dir, vec![], |outputs| {
        let n = study.config.n_sim;
        let done = AtomicUsize::new(0);
        let progress = |replicate: usize, ok: bool| {
            let k = done.fetch_add(1, Ordering::Relaxed) + 1;
            if !quiet {
                let status = if ok { "ok" } else { "failed" };
                eprintln!("[{}] replicate {replicate} {status} ({k}/{n})", study.config.label);
            }
        };
        let report = study.run_with_progress(&progress)?;
        let mut out = |name: &str| {
            let p = out_dir.join(name);
            outputs.push(p.clone());
            p
        };
        let label = &study.config.label;
        write_file(&out(&format!("metrics_{label}.csv")), |w| report.write_metrics_csv(w))?;
        write_file(&out(&format!("block_metrics_{label}.csv")), |w| report.write_block_metrics_csv(w))?;
        write_file(&out(&format!("replicates_{label}.csv")), |w| report.write_replicate_csv(w))?;
        write_file(&out(&format!("correlations_{label}.csv")), |w| report.write_correlation_csv(w))?;
        write_file(&out(&format!("block_plot_{label}.csv")), |w| report.write_block_plot_csv(w))?;
        write_file(&out(&format!("failures_{label}.csv")), |w| report.write_failures_csv(w))?;
        if !quiet {
            for method in &study.config.methods {
                eprintln!(
                    "method {}: mean block correlation {:.4}",
                    method.number(),
                    report.mean_correlation(*method)
                );
            }
        }
        if study.within_budget(&report) {
            Ok(())
        } else {
            Err(CliError::OverBudget {
                failures: report.n_failures(),
                budget: study.config.max_failures,
            })
        }
    })
}
