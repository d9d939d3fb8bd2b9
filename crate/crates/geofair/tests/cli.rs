//! End-to-end checks of the command-line interface: exit codes, output
//! layout, idempotence, and the environment fallback for --out.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn geofair(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_geofair"));
    cmd.args(args);
    cmd.env_remove("GEOFAIR_OUT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("pipeline.conf");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn synth_writes_files_and_is_idempotent() {
    let dir = tempdir().unwrap();
    let config = write_config(dir.path(), "synth = high-visibility\n");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let r = geofair(&["synth", "--config", &config, "--out", out.to_str().unwrap()], &[]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    for f in ["regions.csv", "overlaps.csv", "raster.bin", "raster.idx", "manifest.txt"] {
        assert!(out_a.join(f).exists(), "missing {f}");
        assert_eq!(
            fs::read(out_a.join(f)).unwrap(),
            fs::read(out_b.join(f)).unwrap(),
            "rerun changed {f}"
        );
    }
}

#[test]
fn synth_seed_override_changes_output() {
    let dir = tempdir().unwrap();
    let config = write_config(dir.path(), "synth = high-visibility\n");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    geofair(&["synth", "--config", &config, "--out", out_a.to_str().unwrap()], &[]);
    geofair(
        &["synth", "--config", &config, "--out", out_b.to_str().unwrap(), "--seed", "7"],
        &[],
    );
    assert_ne!(
        fs::read(out_a.join("regions.csv")).unwrap(),
        fs::read(out_b.join("regions.csv")).unwrap()
    );
}

#[test]
fn config_error_exits_2_and_names_the_problem() {
    let dir = tempdir().unwrap();
    let config = write_config(dir.path(), "synth = high-visibility\nn_runs = 0\n");
    let out = dir.path().join("out");
    let r = geofair(&["audit", "--config", &config, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("n_runs"));
}

#[test]
fn unknown_synth_name_exits_2() {
    let dir = tempdir().unwrap();
    let config = write_config(dir.path(), "synth = no-such-config\n");
    let out = dir.path().join("out");
    let r = geofair(&["synth", "--config", &config, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_3() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("out");
    let r = geofair(
        &["audit", "--config", "/no/such/file.conf", "--out", out.to_str().unwrap()],
        &[],
    );
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn report_on_empty_directory_exits_3_listing_tables() {
    let dir = tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = dir.path().join("figs");
    let r = geofair(&["report", empty.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(r.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&r.stderr);
    assert!(stderr.contains("summary.csv"));
}

#[test]
fn corrupt_dataset_exits_4() {
    let dir = tempdir().unwrap();
    // duplicate region id is a data-integrity failure
    let data = dir.path().join("regions.csv");
    fs::write(&data, "id,urban,wealth,population\nr1,1,2.0,10\nr1,0,1.0,20\n").unwrap();
    let raster = dir.path().join("raster.bin");
    fs::write(&raster, b"GFRT").unwrap();
    fs::write(dir.path().join("raster.idx"), "").unwrap();
    let config = write_config(
        dir.path(),
        &format!(
            "dataset_path = {}\nraster_path = {}\n",
            data.display(),
            raster.display()
        ),
    );
    let out = dir.path().join("out");
    let r = geofair(&["audit", "--config", &config, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn env_out_fallback_is_used() {
    let dir = tempdir().unwrap();
    let config = write_config(dir.path(), "synth = high-visibility\n");
    let out = dir.path().join("from_env");
    let r = geofair(
        &["synth", "--config", &config],
        &[("GEOFAIR_OUT", out.to_str().unwrap())],
    );
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("regions.csv").exists());
}

#[test]
fn featurize_writes_feature_matrix() {
    let dir = tempdir().unwrap();
    let config = write_config(dir.path(), "synth = high-visibility\nn_filters = 4\n");
    let out = dir.path().join("out");
    let r = geofair(&["featurize", "--config", &config, "--out", out.to_str().unwrap()], &[]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let header = fs::read_to_string(out.join("features.csv")).unwrap();
    let header = header.lines().next().unwrap();
    assert!(header.starts_with("region_id,"));
    assert_eq!(header.split(',').count(), 1 + 8); // 2 * n_filters columns
}

#[test]
fn aggregate_prints_the_summary_line_and_matches_golden() {
    let dir = tempdir().unwrap();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/aggregation");
    let out = dir.path().join("out");
    let r = geofair(
        &[
            "aggregate",
            fixtures.join("units.csv").to_str().unwrap(),
            fixtures.join("adjacency.csv").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8_lossy(&r.stdout);
    // 11 rural units (areas 1..40, median 7) collapse to 7 (median 30)
    assert!(
        stdout.contains("before: 11 (median 7 km²) after: 7 (median 30 km²)"),
        "unexpected summary line: {stdout}"
    );
    assert_eq!(
        fs::read_to_string(out.join("merged.csv")).unwrap(),
        fs::read_to_string(fixtures.join("merged_golden.csv")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(out.join("lineage.csv")).unwrap(),
        fs::read_to_string(fixtures.join("lineage_golden.csv")).unwrap()
    );
}

#[test]
fn audit_then_report_round_trip() {
    let dir = tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "synth = high-visibility\nn_runs = 2\nn_filters = 8\n",
    );
    let results = dir.path().join("results");
    let r = geofair(
        &["audit", "--config", &config, "--out", results.to_str().unwrap(), "--jobs", "2"],
        &[],
    );
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let figs = dir.path().join("figs");
    let r = geofair(&["report", results.to_str().unwrap(), "--out", figs.to_str().unwrap()], &[]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in [
        "fig1a.csv", "fig1b.csv", "fig2a.csv", "fig2b.csv", "fig3.csv", "figS1.csv",
        "figS3.csv", "figS4.csv",
    ] {
        assert!(figs.join(f).exists(), "missing {f}");
    }
    let fig1a = fs::read_to_string(figs.join("fig1a.csv")).unwrap();
    assert_eq!(fig1a.lines().next().unwrap(), "config,scope,rho_mean,rho_2se");
    assert_eq!(fig1a.lines().count(), 4); // header + overall/urban/rural
}
