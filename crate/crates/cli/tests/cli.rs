use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stfuse::geometry::blocks_to_geojson;
use stfuse::simstudy::{scenario_labels, Scale, ScenarioConfig};
use stfuse::BlockGeometry;
use tempfile::TempDir;

fn stfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stfuse")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = stfuse(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny scenario on 16 square blocks that fits in well under a second.
struct Tiny {
    dir: TempDir,
    config: PathBuf,
    blocks: PathBuf,
}

fn tiny(edit: impl FnOnce(&mut ScenarioConfig)) -> Tiny {
    let mut c = ScenarioConfig::preset("A", Scale::Desk).unwrap();
    c.grid_cells = 8;
    c.n_sim = 3;
    c.n_exposure_draws = 3;
    c.n_posterior_draws = 20;
    c.fit_max_edge = 0.9;
    c.fit_buffer = 0.8;
    c.truth_max_edge = 0.5;
    c.truth_buffer = 1.0;
    edit(&mut c);
    let step = c.domain_width / 4.0;
    let blocks: Vec<BlockGeometry> = (0..16)
        .map(|i| {
            let (x, y) = ((i % 4) as f64 * step, (i / 4) as f64 * step);
            BlockGeometry::rectangle(format!("b{i}"), x, y, x + step, y + step).unwrap()
        })
        .collect();
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, c.to_toml()).unwrap();
    let blocks_path = dir.path().join("blocks.geojson");
    std::fs::write(&blocks_path, blocks_to_geojson(&blocks)).unwrap();
    Tiny {
        dir,
        config,
        blocks: blocks_path,
    }
}

impl Tiny {
    fn run(&self, command: &str, out: &str, extra: &[&str]) -> PathBuf {
        let out_dir = self.dir.path().join(out);
        let mut args = vec![
            command,
            "--config",
            path(&self.config),
            "--blocks",
            path(&self.blocks),
            "--out-dir",
            path(&out_dir),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        out_dir
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv" || x == "geojson"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&read(&dir.join("run_manifest.json"))).unwrap()
}

#[test]
fn every_command_is_identical_across_thread_counts() {
    let t = tiny(|_| {});
    for threads in ["1", "4"] {
        let sim = t.run("simulate", &format!("sim{threads}"), &["--threads", threads]);
        t.run(
            "fit",
            &format!("fit{threads}"),
            &["--threads", threads, "--data-dir", path(&sim)],
        );
        t.run("study", &format!("study{threads}"), &["--threads", threads, "--quiet"]);
    }
    for command in ["sim", "fit", "study"] {
        let one = t.dir.path().join(format!("{command}1"));
        let four = t.dir.path().join(format!("{command}4"));
        let files = csv_files(&one);
        assert!(files.len() >= 5, "{command}: {files:?}");
        assert_eq!(files, csv_files(&four), "{command}");
        let (m1, m4) = (manifest(&one), manifest(&four));
        assert_eq!(m1["input_hash"], m4["input_hash"]);
        assert_eq!(m1["outputs"], m4["outputs"]);
        assert_eq!(m1["status"], "ok");
        assert_eq!((m1["threads"].as_u64(), m4["threads"].as_u64()), (Some(1), Some(4)));
    }
    let metrics = read(&t.dir.path().join("study1/metrics_A.csv"));
    assert_eq!(
        metrics.lines().next(),
        Some("parameter,method,truth,bias,rmse,coverage,n_replicates")
    );
}

#[test]
fn rerunning_simulate_reproduces_files_and_seed_changes_them() {
    let t = tiny(|_| {});
    let a = t.run("simulate", "a", &[]);
    let b = t.run("simulate", "b", &[]);
    let c = t.run("simulate", "c", &["--seed", "7"]);
    let d = t.run("simulate", "d", &["--replicate", "1"]);
    assert_eq!(csv_files(&a), csv_files(&b));
    assert_ne!(read(&a.join("monitors.csv")), read(&c.join("monitors.csv")));
    assert_ne!(read(&a.join("monitors.csv")), read(&d.join("monitors.csv")));
    assert_eq!(manifest(&c)["seed"], 7);
}

#[test]
fn desk_presets_emit_the_configured_shapes() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    ok(&["simulate", "--scenario", "A", "--desk-scale", "--out-dir", path(&a)]);
    let rows = |f: &str| read(&a.join(f)).lines().count() - 1;
    assert_eq!(rows("monitors.csv"), 180);
    assert_eq!(rows("proxy.csv"), 900);
    assert_eq!(rows("covariate.csv"), 1080);
    assert_eq!(rows("truth_blocks.csv"), 98);
    assert_eq!(rows("health.csv"), 98 * 3);
    assert_eq!(read(&a.join("proxy.csv")).lines().next(), Some("x,y,t1,t2,t3"));

    let d = dir.path().join("d");
    ok(&["simulate", "--scenario", "D", "--desk-scale", "--out-dir", path(&d)]);
    assert_eq!(read(&d.join("monitors.csv")).lines().count() - 1, 20);
}

#[test]
fn noiseless_fit_recovers_the_slope() {
    let t = tiny(|c| {
        c.truth.sigma2_e = 1e-4;
        c.truth.sigma2_delta = 1e-4;
    });
    let sim = t.run("simulate", "sim", &[]);
    let fit = t.run("fit", "fit", &["--data-dir", path(&sim)]);
    let summary = read(&fit.join("stage1_summary.csv"));
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some("parameter,estimate,sd,q025,q975"));
    let beta1: f64 = lines
        .find(|l| l.starts_with("beta1,"))
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!((beta1 - 2.0).abs() < 0.1, "{beta1}");
    for m in [1, 2] {
        let stage2 = read(&fit.join(format!("stage2_method{m}.csv")));
        assert_eq!(stage2.lines().next(), Some("parameter,estimate,sd,q025,q975"));
        assert_eq!(stage2.lines().count(), 5);
        let exposure = read(&fit.join(format!("exposure_method{m}.csv")));
        assert_eq!(exposure.lines().count(), 1 + 16 * 3);
    }
}

#[test]
fn method_flag_restricts_outputs() {
    let t = tiny(|_| {});
    let sim = t.run("simulate", "sim", &[]);
    let fit = t.run("fit", "fit", &["--data-dir", path(&sim), "--method", "2", "--stage1-only"]);
    assert!(fit.join("exposure_method2.csv").exists());
    assert!(!fit.join("exposure_method1.csv").exists());
    assert!(!fit.join("stage2_method2.csv").exists());
}

#[test]
fn unknown_label_lists_the_valid_ones() {
    let dir = TempDir::new().unwrap();
    let out = stfuse(&["study", "--scenario", "Z", "--out-dir", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(&scenario_labels().join(", ")), "{stderr}");
}

#[test]
fn missing_input_is_a_clean_io_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nowhere");
    let out = stfuse(&[
        "fit",
        "--scenario",
        "A",
        "--desk-scale",
        "--data-dir",
        path(&missing),
        "--out-dir",
        path(&dir.path().join("out")),
    ]);
    assert_eq!(out.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nowhere") && stderr.contains("monitors.csv"), "{stderr}");
    assert!(!stderr.contains("panicked"));

    let out = stfuse(&["study", "--config", path(&missing), "--out-dir", path(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn malformed_config_names_the_offending_key() {
    let t = tiny(|_| {});
    let text = read(&t.config).replace("n_sim = 3", "n_sims = 3");
    std::fs::write(&t.config, text).unwrap();
    let out = stfuse(&["study", "--config", path(&t.config), "--out-dir", path(t.dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("n_sims"), "{stderr}");
}

#[test]
fn malformed_data_file_is_reported_with_its_path() {
    let t = tiny(|_| {});
    let sim = t.run("simulate", "sim", &[]);
    let monitors = sim.join("monitors.csv");
    let text = read(&monitors).replacen(',', ",oops", 3);
    std::fs::write(&monitors, text).unwrap();
    let out = stfuse(&[
        "fit",
        "--config",
        path(&t.config),
        "--blocks",
        path(&t.blocks),
        "--data-dir",
        path(&sim),
        "--out-dir",
        path(&t.dir.path().join("fit")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("monitors.csv"));
}

#[test]
fn shipped_configs_match_the_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for label in scenario_labels() {
        for (dir, scale) in [("desk", Scale::Desk), ("full", Scale::Full)] {
            let file = root.join(dir).join(format!("{label}.toml"));
            let shipped = ScenarioConfig::from_toml(&read(&file)).unwrap();
            assert_eq!(shipped, ScenarioConfig::preset(label, scale).unwrap(), "{}", file.display());
        }
    }
    let out = ok(&["preset", "C", "--desk-scale"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), read(&root.join("desk/C.toml")));
}

#[test]
fn manifest_hash_tracks_inputs() {
    let t = tiny(|_| {});
    let a = t.run("simulate", "a", &[]);
    let b = t.run("simulate", "b", &["--seed", "3"]);
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_ne!(ma["input_hash"], mb["input_hash"]);
    assert_eq!(ma["command"], "simulate");
    let hash = ma["input_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(ma["finished_unix"].as_u64().unwrap() >= ma["started_unix"].as_u64().unwrap());
}
