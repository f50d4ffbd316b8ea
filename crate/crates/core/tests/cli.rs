use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn moyal(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_moyal"));
    c.args(args).env_remove("MOYAL_SEED");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const SMALL_MEASURE: &str = r#"
[grid]
dx_nm = 0.4
dk_per_nm = 0.05
nx = 40
nk = 32

[device]
kind = "random"
amplitude_eV = 0.5
seed = 3

[measure]
seeds = 3
pins = [{ x_nm = 8.0 }]
"#;

#[test]
fn coeffs_prints_weights_and_their_sum() {
    let out = moyal(&["coeffs", "--derivative", "2", "--accuracy", "2", "--rational"], &[]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "-1,1\n0,-2\n1,1\nA,4\n");

    let out = moyal(&["coeffs", "--derivative", "1", "--accuracy", "4"], &[]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<(String, f64)> = text
        .lines()
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.to_string(), b.parse().unwrap())
        })
        .collect();
    let want = [1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0];
    for (i, w) in want.iter().enumerate() {
        assert_eq!(rows[i].0, (i as i64 - 2).to_string());
        assert!((rows[i].1 - w).abs() < 1e-15);
    }
    assert_eq!(rows[5].0, "A");
    assert!((rows[5].1 - 1.5).abs() < 1e-15);
}

#[test]
fn coeffs_rejects_odd_accuracy() {
    let out = moyal(&["coeffs", "--derivative", "1", "--accuracy", "3"], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "[grid]\nnx = 2\n");
    let out = moyal(&["equilibrium", "--config", &bad, "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let junk = write(dir.path(), "junk.toml", "[grid\n");
    let out = moyal(&["measure", "--config", &junk], &[]);
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("nope.toml");
    let out = moyal(&["measure", "--config", missing.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = write(dir.path(), "m.toml", SMALL_MEASURE);
    let out = moyal(&["measure", "--config", &cfg], &[("MOYAL_SEED", "abc")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn measure_run_is_reproducible_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "m.toml", SMALL_MEASURE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for out in [&a, &b] {
        let o = moyal(&["measure", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["profiles.csv", "similarity.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs between runs");
    }
    let m = manifest(&a);
    assert_eq!(m["experiment"], "measure");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["input_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["config"]["grid"]["nx"], 40);
    assert!(m["runs"].as_array().unwrap().iter().any(|r| r["name"] == "seed3"));
    let profiles = fs::read_to_string(a.join("profiles.csv")).unwrap();
    assert!(profiles.starts_with("k_per_nm,seed3,seed4,seed5\n"));
    assert_eq!(profiles.lines().count(), 33);

    let o = moyal(&["measure", "--config", &cfg, "--out", c.to_str().unwrap()], &[("MOYAL_SEED", "11")]);
    assert!(o.status.success());
    let m = manifest(&c);
    assert_eq!(m["seed"], 11);
    assert!(fs::read_to_string(c.join("profiles.csv")).unwrap().starts_with("k_per_nm,seed11,"));
}

#[test]
fn bigbang_writes_a_summary_and_a_matrix_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bb.toml",
        r#"
[grid]
dx_nm = 0.4
dk_per_nm = 0.05
nx = 40
nk = 32

[device]
kind = "flat"
pulse_height_eV = 0.5

[bigbang]
gap_cells = 10
j_max = [15]
"#,
    );
    let dump = dir.path().join("slice.mtx");
    let out = dir.path().join("out");
    let o = moyal(
        &[
            "bigbang",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--dump-matrix",
            dump.to_str().unwrap(),
            "--plot",
        ],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("bigbang.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("arm,pulse,j_max,status,retained_max,argmax_k_per_nm,peak_at_pin"));
    let flat = lines.next().unwrap();
    assert!(flat.starts_with("flat_jmax15,0,15,unmeasurable"), "{flat}");
    let text = fs::read_to_string(&dump).unwrap();
    assert!(text.starts_with("%%moyal 1 32 measurement\n"), "{}", text.lines().next().unwrap());
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(f.len(), 3);
        assert!(f[0].parse::<usize>().unwrap() < 32 && f[1].parse::<usize>().unwrap() < 32);
        f[2].parse::<f64>().unwrap();
    }
}

#[test]
fn flat_equilibrium_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "flat.toml",
        r#"
[grid]
dx_nm = 0.4
dk_per_nm = 0.05
nx = 30
nk = 32

[device]
kind = "flat"

[equilibrium]
schemes = ["classical", "auto"]
"#,
    );
    let out = dir.path().join("out");
    let o = moyal(&["equilibrium", "--config", &cfg, "--out", out.to_str().unwrap(), "--plot"], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    let runs = m["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    for r in runs {
        assert_eq!(r["status"], "success");
        assert!(r["detail"]["density_spread"].as_f64().unwrap() < 1e-10, "{r}");
    }
    let svgs = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"));
    assert!(svgs.count() > 0);
    let density = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            name.starts_with("density") && name.ends_with(".csv")
        })
        .expect("a density csv");
    assert!(fs::read_to_string(density).unwrap().starts_with("x_nm,n_per_m2\n"));
}
