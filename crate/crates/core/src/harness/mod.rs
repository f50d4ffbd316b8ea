//! Config-driven experiments. Each `run_*` function computes a typed result,
//! writes its CSV/SVG artifacts and a `manifest.json` into the output
//! directory, and returns an [`Outcome`] that maps to a process exit code.
//!
//! The typed computations (`equilibrium`, `window_sweep`, ...) are public so
//! tests and examples can use them without touching the filesystem.

pub mod artifacts;
pub mod checks;

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::assembly::{assemble, assemble_measurement, LinearSystem, ObservationPolicy, Pin};
use crate::config::{Config, Device, DeviceKind, WindowSpec};
use crate::error::{Error, Result};
use crate::observables::{detect_ndr, iv_sweep, DeviceModel, IVRecord, NdrMetrics, Observables};
use crate::phasespace::{flat_potential, pulse_potential, random_potential, PhaseGrid, PotentialProfile};
use crate::solve::{solve, solve_one_slice, SolveStatus, SolverOptions, WignerField};

use artifacts::{content_hash, write_text, Manifest, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Equilibrium,
    Iv,
    WindowSweep,
    MeshSweep,
    Decohere,
    Measure,
    Bigbang,
    Validate,
}

impl Experiment {
    /// Sweeps record per-point failures; everything else treats a hard solver
    /// error as fatal.
    pub fn is_sweep(self) -> bool {
        matches!(
            self,
            Experiment::Iv | Experiment::WindowSweep | Experiment::MeshSweep | Experiment::Decohere
        )
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::Equilibrium => "equilibrium",
            Experiment::Iv => "iv",
            Experiment::WindowSweep => "window-sweep",
            Experiment::MeshSweep => "mesh-sweep",
            Experiment::Decohere => "decohere",
            Experiment::Measure => "measure",
            Experiment::Bigbang => "bigbang",
            Experiment::Validate => "validate",
        })
    }
}

/// Command-line level settings shared by every experiment.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub plot: bool,
    pub dump_matrix: Option<PathBuf>,
    pub solver: SolverOptions,
    pub config_path: Option<PathBuf>,
    /// Raw config text, hashed into the manifest.
    pub config_text: String,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            out_dir: out_dir.into(),
            plot: false,
            dump_matrix: None,
            solver: SolverOptions::default(),
            config_path: None,
            config_text: String::new(),
        }
    }
}

/// One named pass/fail check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Manifest entry for one run inside an experiment.
#[derive(Debug, Clone, Serialize)]
pub struct RunEntry {
    pub name: String,
    pub status: String,
    pub detail: Value,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub experiment: Experiment,
    pub runs: Vec<RunEntry>,
    pub checks: Vec<Check>,
    /// Assembly or solver error that aborted a non-sweep run.
    pub hard_failure: Option<String>,
    pub manifest: PathBuf,
}

impl Outcome {
    /// 0 ok, 1 failed check, 3 solver failure outside a sweep.
    pub fn exit_code(&self) -> i32 {
        if self.checks.iter().any(|c| !c.passed) {
            1
        } else if self.hard_failure.is_some() {
            3
        } else {
            0
        }
    }
}

/// Run one experiment end to end.
pub fn run(experiment: Experiment, config: &Config, opts: &RunOptions) -> Result<Outcome> {
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let mut w = Writer::new(opts);
    let mut checks = Vec::new();
    let mut hard_failure = None;
    match experiment {
        Experiment::Equilibrium => hard_failure = run_equilibrium(config, opts, &mut w)?,
        Experiment::Iv => run_iv(config, opts, &mut w)?,
        Experiment::WindowSweep => run_window_sweep(config, opts, &mut w)?,
        Experiment::MeshSweep => run_mesh_sweep(config, opts, &mut w)?,
        Experiment::Decohere => run_decohere(config, opts, &mut w)?,
        Experiment::Measure => hard_failure = run_measure(config, opts, &mut w)?,
        Experiment::Bigbang => hard_failure = run_bigbang(config, opts, &mut w)?,
        Experiment::Validate => checks = run_validate(config, &mut w)?,
    }
    let manifest = Manifest {
        tool: "moyal",
        version: env!("CARGO_PKG_VERSION"),
        experiment: experiment.to_string(),
        config_path: opts.config_path.clone(),
        input_hash: content_hash(opts.config_text.as_bytes()),
        seed: config.device.seed,
        config: config.clone(),
        solver: opts.solver,
        runs: w.runs.clone(),
        checks: checks.clone(),
    };
    let manifest = artifacts::write_manifest(&opts.out_dir, &manifest)?;
    Ok(Outcome {
        experiment,
        runs: w.runs,
        checks,
        hard_failure,
        manifest,
    })
}

struct Writer<'a> {
    opts: &'a RunOptions,
    runs: Vec<RunEntry>,
    pending: Vec<String>,
}

impl<'a> Writer<'a> {
    fn new(opts: &'a RunOptions) -> Self {
        Writer {
            opts,
            runs: Vec::new(),
            pending: Vec::new(),
        }
    }

    fn file(&mut self, name: &str, text: &str) -> Result<()> {
        write_text(&self.opts.out_dir.join(name), text)?;
        self.pending.push(name.to_string());
        Ok(())
    }

    fn plot(&mut self, name: &str, title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> Result<()> {
        if self.opts.plot {
            self.file(name, &artifacts::svg_plot(title, xlabel, ylabel, series))?;
        }
        Ok(())
    }

    fn entry(&mut self, name: impl Into<String>, status: impl Into<String>, detail: Value) {
        self.runs.push(RunEntry {
            name: name.into(),
            status: status.into(),
            detail,
            artifacts: std::mem::take(&mut self.pending),
        });
    }

    fn dump(&self, system: &LinearSystem) -> Result<()> {
        match &self.opts.dump_matrix {
            Some(p) => system.dump_matrix(p),
            None => Ok(()),
        }
    }
}

fn dump_full_system(w: &Writer, device: &Device, bias: f64, policy: &ObservationPolicy) -> Result<()> {
    if w.opts.dump_matrix.is_some() {
        let u = device.potential(bias)?;
        w.dump(&assemble(&device.grid, &u, &device.material, policy)?)?;
    }
    Ok(())
}

fn status_of(records: &[IVRecord]) -> &'static str {
    if records.iter().all(|r| r.error.is_none() && r.status == SolveStatus::Success) {
        "success"
    } else if records.iter().any(|r| r.status == SolveStatus::Success && r.error.is_none()) {
        "partial"
    } else if records.iter().all(|r| r.error.is_none()) {
        "near_singular"
    } else {
        "failed"
    }
}

fn fmt_num(x: f64) -> String {
    let s = format!("{x:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.replace('.', "p").replace('-', "m")
}

// ---------------------------------------------------------------- equilibrium

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumResult {
    pub scheme: String,
    pub dk_per_nm: f64,
    pub mesh_product: f64,
    pub status: Option<SolveStatus>,
    pub residual: f64,
    pub error: Option<String>,
    pub x_nm: Vec<f64>,
    pub potential: Vec<f64>,
    pub density: Vec<f64>,
    pub min_density: f64,
    /// Negative density inside the well (whole device for non-RTD kinds).
    pub negative_in_well: bool,
    /// `[first, last]` x (nm) of negative density anywhere.
    pub negative_region: Option<[f64; 2]>,
    /// `(max - min) / mean` of the density.
    pub density_spread: f64,
    pub min_f: f64,
}

/// Zero-bias solves for every (k spacing, scheme) pair.
pub fn equilibrium(config: &Config, opts: &SolverOptions) -> Result<Vec<EquilibriumResult>> {
    let mut dks = vec![config.grid.dk_per_nm];
    dks.extend(config.equilibrium.dk_per_nm.iter().copied().filter(|d| *d != config.grid.dk_per_nm));
    let mut jobs = Vec::new();
    for &dk in &dks {
        let grid = grid_with_dk(config, dk)?;
        let device = config.device_on(grid)?;
        for s in &config.equilibrium.schemes {
            jobs.push((dk, device.clone(), *s));
        }
    }
    jobs.into_par_iter()
        .map(|(dk, device, scheme)| equilibrium_one(&device, dk, scheme, opts))
        .collect()
}

fn grid_with_dk(config: &Config, dk_per_nm: f64) -> Result<PhaseGrid> {
    let g = &config.grid;
    PhaseGrid::new(g.dx_nm * 1e-9, dk_per_nm * 1e9, g.nx, g.nk, g.k_offset)
}

fn equilibrium_one(device: &Device, dk: f64, scheme: WindowSpec, opts: &SolverOptions) -> Result<EquilibriumResult> {
    let grid = &device.grid;
    let u = device.potential(0.0)?;
    let well = match device.kind {
        DeviceKind::Rtd => device.geometry.layout(grid)?.well,
        _ => 0..grid.nx,
    };
    let mut r = EquilibriumResult {
        scheme: scheme.label(),
        dk_per_nm: dk,
        mesh_product: grid.mesh_product(),
        status: None,
        residual: f64::NAN,
        error: None,
        x_nm: grid.xs().iter().map(|x| x * 1e9).collect(),
        potential: u.values().to_vec(),
        density: Vec::new(),
        min_density: f64::NAN,
        negative_in_well: false,
        negative_region: None,
        density_spread: f64::NAN,
        min_f: f64::NAN,
    };
    let solved = assemble(grid, &u, &device.material, &scheme.policy()).and_then(|s| solve(&s, opts));
    match solved {
        Ok((field, rep)) => {
            r.status = Some(rep.status);
            r.residual = rep.residual_norm;
            let obs = Observables::compute(&field, grid, &device.material)?;
            r.min_f = obs.min_f;
            let n = obs.density;
            r.min_density = n.iter().copied().fold(f64::INFINITY, f64::min);
            let max = n.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = n.iter().sum::<f64>() / n.len() as f64;
            r.density_spread = (max - r.min_density) / mean.abs();
            r.negative_in_well = well.clone().any(|i| n[i] < 0.0);
            let neg: Vec<usize> = (0..n.len()).filter(|&i| n[i] < 0.0).collect();
            if let (Some(a), Some(b)) = (neg.first(), neg.last()) {
                r.negative_region = Some([grid.x(*a) * 1e9, grid.x(*b) * 1e9]);
            }
            r.density = n;
        }
        Err(e) => r.error = Some(e.to_string()),
    }
    Ok(r)
}

fn run_equilibrium(config: &Config, opts: &RunOptions, w: &mut Writer) -> Result<Option<String>> {
    let device = config.device()?;
    if let Some(s) = config.equilibrium.schemes.first() {
        dump_full_system(w, &device, 0.0, &s.policy())?;
    }
    let results = equilibrium(config, &opts.solver)?;
    let mut hard = None;
    let mut series = Vec::new();
    for r in &results {
        let tag = format!("{}_dk{}", r.scheme, fmt_num(r.dk_per_nm));
        let grid = grid_with_dk(config, r.dk_per_nm)?;
        w.file(&format!("potential_{tag}.csv"), &artifacts::potential_csv(&grid, &r.potential))?;
        if r.error.is_none() {
            w.file(&format!("density_{tag}.csv"), &artifacts::density_csv(&grid, &r.density))?;
            series.push(Series {
                name: tag.clone(),
                points: r.x_nm.iter().copied().zip(r.density.iter().copied()).collect(),
            });
        } else if hard.is_none() {
            hard = r.error.clone();
        }
        let status = match (&r.error, r.status) {
            (Some(_), _) => "failed".to_string(),
            (None, Some(s)) => s.to_string(),
            _ => "failed".to_string(),
        };
        let mut detail = serde_json::to_value(r).map_err(|e| Error::Config(e.to_string()))?;
        if let Value::Object(m) = &mut detail {
            for k in ["x_nm", "potential", "density"] {
                m.remove(k);
            }
        }
        w.entry(tag, status, detail);
    }
    w.plot("density.svg", "Equilibrium density", "x (nm)", "n (1/m^2)", &series)?;
    Ok(hard)
}

// ------------------------------------------------------------------------ iv

fn run_iv(config: &Config, opts: &RunOptions, w: &mut Writer) -> Result<()> {
    let device = config.device()?;
    let policy = config.observation.policy()?;
    let biases = config.sweep.biases()?;
    dump_full_system(w, &device, biases[0], &policy)?;
    let recs = iv_sweep(&device, &biases, &policy, &opts.solver);
    let ndr = detect_ndr(&recs);
    w.file("iv.csv", &artifacts::iv_csv(&recs))?;
    w.plot("iv.svg", "I-V", "bias (V)", "J", &[artifacts::iv_series(&policy.label(), &recs)])?;
    w.entry(policy.label(), status_of(&recs), iv_detail(&recs, ndr.as_ref()));
    Ok(())
}

fn iv_detail(recs: &[IVRecord], ndr: Option<&NdrMetrics>) -> Value {
    let count = |s: SolveStatus| recs.iter().filter(|r| r.error.is_none() && r.status == s).count();
    json!({
        "points": recs.len(),
        "success": count(SolveStatus::Success),
        "near_singular": count(SolveStatus::NearSingular),
        "failed": recs.iter().filter(|r| r.error.is_some()).count(),
        "ndr": ndr,
        "peak_to_valley": ndr.map(|n| n.peak_to_valley).unwrap_or(1.0),
        "max_residual": recs.iter().map(|r| r.residual).fold(0.0f64, f64::max),
        "errors": recs.iter().filter_map(|r| r.error.clone()).collect::<Vec<_>>(),
    })
}

// -------------------------------------------------------------- window sweep

#[derive(Debug, Clone, Serialize)]
pub struct WindowResult {
    pub window: WindowSpec,
    pub records: Vec<IVRecord>,
    pub ndr: Option<NdrMetrics>,
    pub peak_to_valley: f64,
    pub near_singular_points: usize,
    pub failed_points: usize,
    /// More than two turning points in J(V) over the successful points.
    pub oscillatory: bool,
}

impl WindowResult {
    fn new(window: WindowSpec, records: Vec<IVRecord>) -> Self {
        let ndr = detect_ndr(&records);
        let ok: Vec<f64> = records
            .iter()
            .filter(|r| r.error.is_none() && r.status == SolveStatus::Success)
            .map(|r| r.current)
            .collect();
        WindowResult {
            window,
            ndr,
            peak_to_valley: ndr.map(|n| n.peak_to_valley).unwrap_or(1.0),
            near_singular_points: records
                .iter()
                .filter(|r| r.error.is_none() && r.status == SolveStatus::NearSingular)
                .count(),
            failed_points: records.iter().filter(|r| r.error.is_some()).count(),
            oscillatory: turning_points(&ok) > 2,
            records,
        }
    }

    /// Flagged as ill-posed: any near-singular or failed point, or oscillation.
    pub fn flagged(&self) -> bool {
        self.near_singular_points > 0 || self.failed_points > 0 || self.oscillatory
    }
}

fn turning_points(y: &[f64]) -> usize {
    y.windows(3)
        .filter(|w| (w[1] - w[0]) * (w[2] - w[1]) < 0.0)
        .count()
}

/// One I-V sweep per configured window at the config's mesh.
pub fn window_sweep(config: &Config, opts: &SolverOptions) -> Result<Vec<WindowResult>> {
    let device = config.device()?;
    let biases = config.sweep.biases()?;
    Ok(config
        .sweep
        .windows
        .iter()
        .map(|w| WindowResult::new(*w, iv_sweep(&device, &biases, &w.policy(), opts)))
        .collect())
}

fn run_window_sweep(config: &Config, opts: &RunOptions, w: &mut Writer) -> Result<()> {
    if let Some(win) = config.sweep.windows.first() {
        dump_full_system(w, &config.device()?, config.sweep.biases()?[0], &win.policy())?;
    }
    let results = window_sweep(config, &opts.solver)?;
    let mut summary = String::from("window,peak_to_valley,peak_bias_V,valley_bias_V,success,near_singular,failed,oscillatory\n");
    let mut series = Vec::new();
    for r in &results {
        let label = r.window.label();
        let success = r.records.len() - r.near_singular_points - r.failed_points;
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            label,
            r.peak_to_valley,
            r.ndr.map(|n| n.peak_bias.to_string()).unwrap_or_default(),
            r.ndr.map(|n| n.valley_bias.to_string()).unwrap_or_default(),
            success,
            r.near_singular_points,
            r.failed_points,
            r.oscillatory as u8
        ));
        w.file(&format!("iv_{label}.csv"), &artifacts::iv_csv(&r.records))?;
        series.push(artifacts::iv_series(&label, &r.records));
        let mut detail = iv_detail(&r.records, r.ndr.as_ref());
        detail["oscillatory"] = json!(r.oscillatory);
        detail["flagged"] = json!(r.flagged());
        w.entry(label, status_of(&r.records), detail);
    }
    w.file("window_summary.csv", &summary)?;
    w.plot("iv_windows.svg", "I-V by observation window", "bias (V)", "J", &series)?;
    w.entry("summary", "done", json!({ "best_window": best_window(&results).map(|r| r.window.label()) }));
    Ok(())
}

/// Window with the largest peak-to-valley ratio (first on ties).
pub fn best_window(results: &[WindowResult]) -> Option<&WindowResult> {
    results
        .iter()
        .fold(None, |best: Option<&WindowResult>, r| match best {
            Some(b) if b.peak_to_valley >= r.peak_to_valley => Some(b),
            _ => Some(r),
        })
}

// ---------------------------------------------------------------- mesh sweep

#[derive(Debug, Clone, Serialize)]
pub struct MeshResult {
    pub scale: f64,
    pub dk_per_nm: f64,
    pub mesh_product: f64,
    pub records: Vec<IVRecord>,
    pub ndr: Option<NdrMetrics>,
}

/// I-V sweeps with `dk` scaled by each configured factor, using the
/// configured observation policy.
pub fn mesh_sweep(config: &Config, opts: &SolverOptions) -> Result<Vec<MeshResult>> {
    let policy = config.observation.policy()?;
    let biases = config.sweep.biases()?;
    config
        .sweep
        .mesh_scales
        .iter()
        .map(|&s| {
            let dk = config.grid.dk_per_nm * s;
            let device = config.device_on(grid_with_dk(config, dk)?)?;
            let records = iv_sweep(&device, &biases, &policy, opts);
            Ok(MeshResult {
                scale: s,
                dk_per_nm: dk,
                mesh_product: device.grid.mesh_product(),
                ndr: detect_ndr(&records),
                records,
            })
        })
        .collect()
}

/// Largest point-wise relative deviation from the first curve over biases
/// where every curve succeeded, with the number of such biases.
pub fn mesh_agreement(results: &[MeshResult]) -> (f64, usize) {
    let Some(first) = results.first() else {
        return (0.0, 0);
    };
    let mut worst = 0.0f64;
    let mut common = 0;
    for (p, reference) in first.records.iter().enumerate() {
        let all_ok = results.iter().all(|r| {
            r.records
                .get(p)
                .is_some_and(|x| x.error.is_none() && x.status == SolveStatus::Success)
        });
        if !all_ok {
            continue;
        }
        common += 1;
        let j0 = reference.current;
        for r in &results[1..] {
            worst = worst.max((r.records[p].current - j0).abs() / j0.abs());
        }
    }
    (worst, common)
}

fn run_mesh_sweep(config: &Config, opts: &RunOptions, w: &mut Writer) -> Result<()> {
    dump_full_system(w, &config.device()?, config.sweep.biases()?[0], &config.observation.policy()?)?;
    let results = mesh_sweep(config, &opts.solver)?;
    let mut series = Vec::new();
    for r in &results {
        let label = format!("dk{}", fmt_num(r.dk_per_nm));
        w.file(&format!("iv_{label}.csv"), &artifacts::iv_csv(&r.records))?;
        series.push(artifacts::iv_series(&format!("dxdk={:.4}", r.mesh_product), &r.records));
        let mut detail = iv_detail(&r.records, r.ndr.as_ref());
        detail["scale"] = json!(r.scale);
        detail["mesh_product"] = json!(r.mesh_product);
        w.entry(label, status_of(&r.records), detail);
    }
    let (dev, common) = mesh_agreement(&results);
    w.plot("iv_mesh.svg", "I-V by mesh", "bias (V)", "J", &series)?;
    w.entry(
        "agreement",
        "done",
        json!({ "max_relative_deviation": dev, "common_success_biases": common }),
    );
    Ok(())
}

// ------------------------------------------------------------------ decohere

#[derive(Debug, Clone, Serialize)]
pub struct DecohereArm {
    pub name: String,
    pub policy: String,
    pub records: Vec<IVRecord>,
    pub ndr: Option<NdrMetrics>,
    pub peak_to_valley: f64,
    /// `min f` of the field at the dump bias (NaN if that solve failed).
    pub min_f: f64,
    pub field_status: Option<SolveStatus>,
    #[serde(skip)]
    pub field: Option<WignerField>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecohereResult {
    pub point_a: usize,
    pub point_b: usize,
    pub field_bias: f64,
    pub arms: Vec<DecohereArm>,
}

impl DecohereResult {
    pub fn arm(&self, name: &str) -> Option<&DecohereArm> {
        self.arms.iter().find(|a| a.name == name)
    }
}

/// Default decoherence points: one cell outside the left barrier and five
/// cells past the right barrier.
pub fn decoherence_points(config: &Config, device: &Device) -> Result<(usize, usize)> {
    let layout = device.geometry.layout(&device.grid);
    let a = match config.decohere.point_a {
        Some(a) => a,
        None => layout.as_ref().map_err(clone_err)?.left_barrier.start.checked_sub(1).ok_or_else(|| {
            Error::Config("left barrier touches the grid edge; set decohere.point_a".into())
        })?,
    };
    let b = match config.decohere.point_b {
        Some(b) => b,
        None => layout.as_ref().map_err(clone_err)?.right_barrier.end + 4,
    };
    for (name, p) in [("point_a", a), ("point_b", b)] {
        if p >= device.grid.nx {
            return Err(Error::Config(format!("decohere.{name} = {p} is outside 0..{}", device.grid.nx)));
        }
    }
    Ok((a, b))
}

fn clone_err(e: &Error) -> Error {
    Error::Config(e.to_string())
}

/// Coherent sweep plus sweeps with a narrowed window at A and at B, then
/// field solves at the coherent peak.
pub fn decohere(config: &Config, opts: &SolverOptions) -> Result<DecohereResult> {
    let device = config.device()?;
    let (a, b) = decoherence_points(config, &device)?;
    let base = config.observation.policy()?;
    let n = config.decohere.n_obs;
    let policies = [
        ("coherent", base.clone()),
        ("decohere_a", base.clone().with_override(a, n)),
        ("decohere_b", base.clone().with_override(b, n)),
    ];
    for (_, p) in &policies {
        p.resolve(&device.grid)?;
    }
    let biases = config.sweep.biases()?;
    let sweeps: Vec<Vec<IVRecord>> = policies
        .iter()
        .map(|(_, p)| iv_sweep(&device, &biases, p, opts))
        .collect();
    let coherent = &sweeps[0];
    let field_bias = config
        .decohere
        .field_bias_V
        .or_else(|| detect_ndr(coherent).map(|n| n.peak_bias))
        .or_else(|| {
            coherent
                .iter()
                .filter(|r| r.current.is_finite())
                .max_by(|x, y| x.current.total_cmp(&y.current))
                .map(|r| r.bias)
        })
        .unwrap_or(biases[0]);
    let arms = policies
        .into_par_iter()
        .zip(sweeps)
        .map(|((name, p), records)| {
            let solved = device
                .potential(field_bias)
                .and_then(|u| assemble(&device.grid, &u, &device.material, &p))
                .and_then(|s| solve(&s, opts));
            let (field, status, min_f) = match solved {
                Ok((f, rep)) => {
                    let m = crate::observables::negativity(&f).0;
                    (Some(f), Some(rep.status), m)
                }
                Err(_) => (None, None, f64::NAN),
            };
            let ndr = detect_ndr(&records);
            DecohereArm {
                name: name.to_string(),
                policy: p.label(),
                peak_to_valley: ndr.map(|n| n.peak_to_valley).unwrap_or(1.0),
                ndr,
                records,
                min_f,
                field_status: status,
                field,
            }
        })
        .collect();
    Ok(DecohereResult {
        point_a: a,
        point_b: b,
        field_bias,
        arms,
    })
}

fn run_decohere(config: &Config, opts: &RunOptions, w: &mut Writer) -> Result<()> {
    dump_full_system(w, &config.device()?, config.sweep.biases()?[0], &config.observation.policy()?)?;
    let r = decohere(config, &opts.solver)?;
    let grid = config.grid()?;
    let mut series = Vec::new();
    for arm in &r.arms {
        w.file(&format!("iv_{}.csv", arm.name), &artifacts::iv_csv(&arm.records))?;
        if let Some(f) = &arm.field {
            w.file(&format!("field_{}.csv", arm.name), &artifacts::field_csv(&grid, f))?;
        }
        series.push(artifacts::iv_series(&arm.name, &arm.records));
        let mut detail = iv_detail(&arm.records, arm.ndr.as_ref());
        detail["policy"] = json!(arm.policy);
        detail["field_bias_V"] = json!(r.field_bias);
        detail["field_status"] = json!(arm.field_status);
        detail["min_f"] = json!(arm.min_f);
        w.entry(arm.name.clone(), status_of(&arm.records), detail);
    }
    w.plot("iv_decohere.svg", "Decoherence placement", "bias (V)", "J", &series)?;
    w.entry(
        "points",
        "done",
        json!({ "point_a": r.point_a, "point_b": r.point_b, "x_a_nm": grid.x(r.point_a) * 1e9, "x_b_nm": grid.x(r.point_b) * 1e9 }),
    );
    Ok(())
}

// ------------------------------------------------------------------- measure

#[derive(Debug, Clone, Serialize)]
pub struct SliceSolution {
    pub label: String,
    pub x_index: usize,
    pub status: SolveStatus,
    pub residual: f64,
    /// k profile scaled to unit maximum magnitude (raw if all zero).
    pub profile: Vec<f64>,
    pub argmax: usize,
    pub retained_orders: Vec<usize>,
    /// Status counts over every x slice: success, near-singular, unmeasurable.
    pub slice_counts: [usize; 3],
}

#[derive(Debug, Clone, Serialize)]
pub struct MeasureResult {
    pub pins: Vec<Pin>,
    pub seeds: Vec<u64>,
    pub solutions: Vec<SliceSolution>,
    pub similarity: Vec<Vec<f64>>,
    pub mean_similarity: f64,
    pub multi_pins: Vec<Pin>,
    pub multi: Option<SliceSolution>,
    /// Local maxima of the multi-pin profile (k indices).
    pub multi_maxima: Vec<usize>,
}

/// Solve every measurement slice for one potential and report the slice at
/// `x_index`.
pub fn measure_slice(
    grid: &PhaseGrid,
    potential: &PotentialProfile,
    policy: &ObservationPolicy,
    pins: &[Pin],
    label: impl Into<String>,
) -> Result<(SliceSolution, Vec<LinearSystem>)> {
    let x = pins.first().map(|p| p.x_index).unwrap_or(0);
    let slices = assemble_measurement(grid, potential, policy, pins)?;
    let mut counts = [0usize; 3];
    let mut chosen = None;
    for (i, s) in slices.iter().enumerate() {
        // slices without pins are unmeasurable by construction; skip the SVD
        let solved = if pins.iter().any(|p| p.x_index == i) {
            Some(solve_one_slice(s))
        } else {
            None
        };
        let status = solved.as_ref().map(|r| r.1.status).unwrap_or(SolveStatus::Unmeasurable);
        counts[match status {
            SolveStatus::Success => 0,
            SolveStatus::NearSingular => 1,
            SolveStatus::Unmeasurable => 2,
        }] += 1;
        if i == x {
            chosen = solved;
        }
    }
    let (field, rep) = chosen.expect("pinned slice is solved");
    let raw = field.slice(0).to_vec();
    let scale = raw.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let profile: Vec<f64> = if scale > 0.0 { raw.iter().map(|v| v / scale).collect() } else { raw };
    let argmax = (0..profile.len())
        .fold(0, |b, j| if profile[j] > profile[b] { j } else { b });
    Ok((
        SliceSolution {
            label: label.into(),
            x_index: x,
            status: rep.status,
            residual: rep.residual_norm,
            profile,
            argmax,
            retained_orders: slices[x].retained_orders[0].clone(),
            slice_counts: counts,
        },
        slices,
    ))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Interior local maxima that reach at least `floor` times the global maximum.
pub fn local_maxima(profile: &[f64], floor: f64) -> Vec<usize> {
    let max = profile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (1..profile.len().saturating_sub(1))
        .filter(|&j| profile[j] > profile[j - 1] && profile[j] >= profile[j + 1] && profile[j] >= floor * max)
        .collect()
}

/// Fraction of the largest peak a secondary peak must reach to count.
pub const PEAK_FLOOR: f64 = 0.5;

/// Pinned-slice solutions over seeded random potentials, plus the optional
/// multi-pin run on the first seed.
pub fn measure(config: &Config) -> Result<MeasureResult> {
    let grid = config.grid()?;
    let mut policy = ObservationPolicy::measurement();
    if let Some(j) = config.measure.j_max.or(config.observation.j_max) {
        policy = policy.with_j_max(j);
    }
    let pins: Vec<Pin> = config.measure.pins.iter().map(|p| p.resolve(&grid)).collect::<Result<_>>()?;
    let multi_pins: Vec<Pin> = config
        .measure
        .multi_pins
        .iter()
        .map(|p| p.resolve(&grid))
        .collect::<Result<_>>()?;
    let base = config.device.seed;
    let amplitude = config.device.amplitude_eV;
    let seeds: Vec<u64> = (0..config.measure.seeds as u64).map(|s| base.wrapping_add(s)).collect();
    let solutions: Vec<SliceSolution> = seeds
        .par_iter()
        .map(|&s| {
            let u = random_potential(s, amplitude, &grid)?;
            Ok(measure_slice(&grid, &u, &policy, &pins, format!("seed{s}"))?.0)
        })
        .collect::<Result<_>>()?;
    let n = solutions.len();
    let mut similarity = vec![vec![1.0; n]; n];
    let mut sum = 0.0;
    let mut pairs = 0;
    for a in 0..n {
        for b in a + 1..n {
            let c = cosine_similarity(&solutions[a].profile, &solutions[b].profile);
            similarity[a][b] = c;
            similarity[b][a] = c;
            sum += c;
            pairs += 1;
        }
    }
    let (multi, multi_maxima) = if multi_pins.is_empty() {
        (None, Vec::new())
    } else {
        let u = random_potential(base, amplitude, &grid)?;
        let sol = measure_slice(&grid, &u, &policy, &multi_pins, "multi")?.0;
        let m = local_maxima(&sol.profile, PEAK_FLOOR);
        (Some(sol), m)
    };
    Ok(MeasureResult {
        pins,
        seeds,
        solutions,
        similarity,
        mean_similarity: if pairs > 0 { sum / pairs as f64 } else { f64::NAN },
        multi_pins,
        multi,
        multi_maxima,
    })
}

fn run_measure(config: &Config, opts: &RunOptions, w: &mut Writer) -> Result<Option<String>> {
    let r = measure(config)?;
    let grid = config.grid()?;
    if opts.dump_matrix.is_some() {
        let u = random_potential(config.device.seed, config.device.amplitude_eV, &grid)?;
        let mut policy = ObservationPolicy::measurement();
        if let Some(j) = config.measure.j_max {
            policy = policy.with_j_max(j);
        }
        let slices = assemble_measurement(&grid, &u, &policy, &r.pins)?;
        w.dump(&slices[r.pins[0].x_index])?;
    }
    let names: Vec<String> = r.solutions.iter().map(|s| s.label.clone()).collect();
    let profiles: Vec<Vec<f64>> = r.solutions.iter().map(|s| s.profile.clone()).collect();
    w.file("profiles.csv", &artifacts::profiles_csv(&grid, &names, &profiles))?;
    w.file("similarity.csv", &artifacts::matrix_csv(&names, &r.similarity))?;
    let ks: Vec<f64> = grid.ks().iter().map(|k| k * 1e-9).collect();
    w.plot(
        "profiles.svg",
        "Pinned-slice k profiles",
        "k (1/nm)",
        "f / max|f|",
        &r.solutions
            .iter()
            .map(|s| Series {
                name: s.label.clone(),
                points: ks.iter().copied().zip(s.profile.iter().copied()).collect(),
            })
            .collect::<Vec<_>>(),
    )?;
    for s in &r.solutions {
        w.entry(
            s.label.clone(),
            s.status.to_string(),
            json!({
                "x_index": s.x_index, "residual": s.residual, "argmax": s.argmax,
                "argmax_at_pin": s.argmax == r.pins[0].k_index, "retained_max": s.retained_orders.last(),
                "slices_success": s.slice_counts[0], "slices_near_singular": s.slice_counts[1],
                "slices_unmeasurable": s.slice_counts[2],
            }),
        );
    }
    if let Some(m) = &r.multi {
        w.file("multipin.csv", &artifacts::profiles_csv(&grid, &["multi".to_string()], &[m.profile.clone()]))?;
        w.entry(
            "multi",
            m.status.to_string(),
            json!({ "pins": r.multi_pins, "local_maxima": r.multi_maxima, "residual": m.residual }),
        );
    }
    w.entry(
        "summary",
        "done",
        json!({ "pins": r.pins, "mean_similarity": r.mean_similarity, "seeds": r.seeds }),
    );
    Ok(None)
}

// ------------------------------------------------------------------- bigbang

#[derive(Debug, Clone, Serialize)]
pub struct BigBangResult {
    pub pin: Pin,
    pub pulse_index: usize,
    pub arms: Vec<(bool, usize, SliceSolution)>,
}

/// Flat background with and without a pulse `gap_cells` away from the pin,
/// at each configured series cap.
pub fn bigbang(config: &Config) -> Result<BigBangResult> {
    let grid = config.grid()?;
    let bb = &config.bigbang;
    let pin_x = match bb.pin_x_nm {
        Some(x) => grid
            .x_index(x * 1e-9)
            .ok_or_else(|| Error::Config(format!("bigbang.pin_x_nm = {x} is outside the grid")))?,
        None => grid.nx.saturating_sub(bb.gap_cells) / 2,
    };
    let pulse_index = pin_x + bb.gap_cells;
    if pulse_index >= grid.nx {
        return Err(Error::Config(format!(
            "pulse {} cells right of x index {pin_x} leaves the {}-node grid",
            bb.gap_cells, grid.nx
        )));
    }
    let pin = Pin {
        x_index: pin_x,
        k_index: grid.nearest_k_index(bb.k_per_nm * 1e9),
        value: 1.0,
    };
    let level = config.device.level_eV;
    let flat = flat_potential(&grid, level);
    let pulsed = {
        let p = pulse_potential(
            &grid,
            grid.x(pulse_index),
            config.device.pulse_width_cells,
            config.device.pulse_height_eV,
        )?;
        PotentialProfile::new(p.values().iter().map(|v| v + level).collect(), grid.dx)
    };
    let top = bb.j_max.iter().copied().max().unwrap_or(grid.nk / 2 - 1);
    let mut jobs = vec![(false, top)];
    jobs.extend(bb.j_max.iter().map(|&j| (true, j)));
    let arms = jobs
        .into_par_iter()
        .map(|(with_pulse, j)| {
            let u = if with_pulse { &pulsed } else { &flat };
            let label = if with_pulse { format!("pulse_jmax{j}") } else { format!("flat_jmax{j}") };
            let policy = ObservationPolicy::measurement().with_j_max(j);
            Ok((with_pulse, j, measure_slice(&grid, u, &policy, &[pin], label)?.0))
        })
        .collect::<Result<_>>()?;
    Ok(BigBangResult { pin, pulse_index, arms })
}

fn run_bigbang(config: &Config, opts: &RunOptions, w: &mut Writer) -> Result<Option<String>> {
    let r = bigbang(config)?;
    let grid = config.grid()?;
    let mut csv = String::from("arm,pulse,j_max,status,retained_max,argmax_k_per_nm,peak_at_pin\n");
    for (pulse, j, s) in &r.arms {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.label,
            *pulse as u8,
            j,
            s.status,
            s.retained_orders.last().map(|v| v.to_string()).unwrap_or_default(),
            if s.status == SolveStatus::Unmeasurable { String::new() } else { (grid.k(s.argmax) * 1e-9).to_string() },
            (s.status == SolveStatus::Success && s.argmax == r.pin.k_index) as u8
        ));
        w.file(
            &format!("profile_{}.csv", s.label),
            &artifacts::profiles_csv(&grid, &[s.label.clone()], &[s.profile.clone()]),
        )?;
        w.entry(
            s.label.clone(),
            s.status.to_string(),
            json!({ "pulse": pulse, "j_max": j, "retained_orders": s.retained_orders, "argmax": s.argmax, "residual": s.residual }),
        );
    }
    w.file("bigbang.csv", &csv)?;
    if opts.dump_matrix.is_some() {
        if let Some((_, j, _)) = r.arms.iter().filter(|a| a.0).last() {
            let p = pulse_potential(
                &grid,
                grid.x(r.pulse_index),
                config.device.pulse_width_cells,
                config.device.pulse_height_eV,
            )?;
            let u = PotentialProfile::new(p.values().iter().map(|v| v + config.device.level_eV).collect(), grid.dx);
            let slices = assemble_measurement(&grid, &u, &ObservationPolicy::measurement().with_j_max(*j), &[r.pin])?;
            w.dump(&slices[r.pin.x_index])?;
        }
    }
    w.entry(
        "summary",
        "done",
        json!({ "pin": r.pin, "pulse_index": r.pulse_index, "gap_cells": r.pulse_index - r.pin.x_index }),
    );
    Ok(None)
}

// ------------------------------------------------------------------ validate

fn run_validate(config: &Config, w: &mut Writer) -> Result<Vec<Check>> {
    let checks = checks::all(config);
    let mut report = String::from("check,passed,detail\n");
    for c in &checks {
        report.push_str(&format!("{},{},\"{}\"\n", c.name, c.passed as u8, c.detail.replace('"', "'")));
    }
    w.file("validate.csv", &report)?;
    w.entry(
        "validate",
        if checks.iter().all(|c| c.passed) { "pass" } else { "fail" },
        json!({ "checks": checks.len(), "failed": checks.iter().filter(|c| !c.passed).map(|c| &c.name).collect::<Vec<_>>() }),
    );
    Ok(checks)
}

/// Where the outputs of `experiment` land under `root` by default.
pub fn default_out_dir(root: &Path, experiment: Experiment) -> PathBuf {
    root.join(experiment.to_string())
}
