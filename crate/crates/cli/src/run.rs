//! Experiment dispatch, manifests and atomic output.
//!
//! A run first writes `manifest.json` flagged incomplete, then each data file
//! (temp file then rename), then the final manifest with SHA-256 digests.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spde_ldp::dynamics::{galerkin_convergence, simulate_controlled_spde, solve_skeleton};
use spde_ldp::hypotheses::{run_full_audit, AuditOptions};
use spde_ldp::ldp::{condition_a_scan, fit_ldp_slope};
use spde_ldp::rate::{rate_endpoint, RateOptions};
use spde_ldp::{Control, Model, RateProblem, RateTarget, SchemeOpts, StateVector, TimeGrid, Verdict};

use crate::config::{Experiment, InitialSpec, RunConfig};
use crate::io::{csv_row, num, state_csv, trajectory_to_string};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const OUTPUT_ENV: &str = "SPDE_LDP_OUT";
pub const DEFAULT_OUTPUT: &str = "spde-ldp-out";
pub const MANIFEST: &str = "manifest.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_AUDIT_FAIL: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error:\n{0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("output failure: {0}")]
    Output(String),
}

impl RunError {
    /// Output failures share the solver code: the run did not complete.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Solver(_) | RunError::Output(_) => EXIT_SOLVER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub experiment: String,
    pub config: serde_json::Value,
    pub started: String,
    pub finished: Option<String>,
    pub status: String,
    pub incomplete: bool,
    pub files: Vec<FileDigest>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub exit_code: i32,
    pub directory: PathBuf,
}

/// Destination for output files. Every write must be all-or-nothing.
pub trait FileSink {
    fn put(&mut self, name: &str, bytes: &[u8]) -> io::Result<()>;
}

/// Writes `dir/.name.tmp` then renames to `dir/name`. `fail_on` injects an error
/// on the given 1-based write.
pub struct DirSink {
    dir: PathBuf,
    writes: usize,
    pub fail_on: Option<usize>,
}

impl DirSink {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(DirSink { dir, writes: 0, fail_on: None })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl FileSink for DirSink {
    fn put(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        self.writes += 1;
        let tmp = self.dir.join(format!(".{name}.tmp"));
        if self.fail_on == Some(self.writes) {
            let _ = std::fs::remove_file(&tmp);
            return Err(io::Error::other(format!("injected failure writing {name}")));
        }
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, self.dir.join(name)).inspect_err(|_| {
            let _ = std::fs::remove_file(&tmp);
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// Output directory: config, then `SPDE_LDP_OUT`, then `spde-ldp-out`.
pub fn resolve_output(cfg: &RunConfig) -> PathBuf {
    cfg.output
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
}

pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutcome, RunError> {
    let dir = resolve_output(cfg);
    let mut sink = DirSink::new(&dir).map_err(|e| RunError::Output(format!("{}: {e}", dir.display())))?;
    let manifest = run_with_sink(cfg, &mut sink)?;
    let exit_code = if manifest.status == "audit-failed" { EXIT_AUDIT_FAIL } else { EXIT_OK };
    Ok(RunOutcome { manifest, exit_code, directory: dir })
}

/// Produced files plus whether any audit failed.
struct Produced {
    files: Vec<(String, Vec<u8>)>,
    audit_failed: bool,
}

pub fn run_with_sink(cfg: &RunConfig, sink: &mut dyn FileSink) -> Result<RunManifest, RunError> {
    let mut manifest = RunManifest {
        artifact_version: ARTIFACT_VERSION.into(),
        experiment: cfg.experiment.name().into(),
        config: serde_json::to_value(cfg).expect("config serialises"),
        started: now(),
        finished: None,
        status: "running".into(),
        incomplete: true,
        files: Vec::new(),
    };
    write_manifest(sink, &manifest)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| RunError::Solver(format!("worker pool: {e}")))?;
    let produced = match pool.install(|| compute(cfg)) {
        Ok(p) => p,
        Err(e) => {
            manifest.status = match &e {
                RunError::Config(_) => "config-error",
                _ => "solver-failure",
            }
            .into();
            manifest.finished = Some(now());
            write_manifest(sink, &manifest)?;
            return Err(e);
        }
    };
    for (name, bytes) in &produced.files {
        if let Err(e) = sink.put(name, bytes) {
            manifest.status = "output-failure".into();
            manifest.finished = Some(now());
            // best effort: the manifest already on disk says incomplete
            let _ = write_manifest(sink, &manifest);
            return Err(RunError::Output(format!("{name}: {e}")));
        }
        manifest.files.push(FileDigest { path: name.clone(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
    }
    manifest.status = if produced.audit_failed { "audit-failed" } else { "ok" }.into();
    manifest.incomplete = false;
    manifest.finished = Some(now());
    write_manifest(sink, &manifest)?;
    Ok(manifest)
}

fn write_manifest(sink: &mut dyn FileSink, m: &RunManifest) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(m).expect("manifest serialises");
    text.push('\n');
    sink.put(MANIFEST, text.as_bytes()).map_err(|e| RunError::Output(format!("{MANIFEST}: {e}")))
}

fn solver<E: std::fmt::Display>(e: E) -> RunError {
    RunError::Solver(e.to_string())
}

pub fn build_model(cfg: &RunConfig) -> Result<Model, RunError> {
    cfg.model.build(cfg.space.num_points).map_err(|e| RunError::Config(e.to_string()))
}

pub fn initial_state(cfg: &RunConfig, model: &Model) -> Result<StateVector, RunError> {
    let n = model.space().num_points();
    match cfg.initial {
        InitialSpec::Zero => Ok(StateVector::zeros(n)),
        InitialSpec::Mode { mode, amplitude } => {
            let e = model.space().basis_vector(mode).map_err(|e| RunError::Config(e.to_string()))?;
            Ok(StateVector(e.iter().map(|x| amplitude * x).collect()))
        }
    }
}

pub fn control(cfg: &RunConfig, model: &Model) -> Result<Control, RunError> {
    let grid = TimeGrid::new(cfg.time.horizon, cfg.control.pieces).map_err(|e| RunError::Config(e.to_string()))?;
    let m = model.noise_modes();
    let a = cfg.control.amplitude;
    Control::from_fn(grid, m, |_| {
        let mut v = vec![0.0; m];
        v[0] = a;
        v
    })
    .map_err(|e| RunError::Config(e.to_string()))
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn compute(cfg: &RunConfig) -> Result<Produced, RunError> {
    let model = build_model(cfg)?;
    let x0 = initial_state(cfg, &model)?;
    let h = control(cfg, &model)?;
    let grid = TimeGrid::new(cfg.time.horizon, cfg.time.steps).map_err(|e| RunError::Config(e.to_string()))?;
    let opts = SchemeOpts::default();
    let space = model.space();
    let domain = space.kind();
    let mut files = Vec::new();
    let mut audit_failed = false;
    match &cfg.experiment {
        Experiment::CheckHypotheses { samples, lambda_points } => {
            let aopts = AuditOptions {
                samples: *samples,
                seed: cfg.seed,
                lambda_points: *lambda_points,
                horizon: cfg.time.horizon,
                ..AuditOptions::default()
            };
            let reports = run_full_audit(&model, &aopts).map_err(solver)?;
            let mut csv = String::from("hypothesis,samples,worst_residual,verdict,note\n");
            for r in &reports {
                audit_failed |= r.verdict == Verdict::Fail;
                csv.push_str(&csv_row(&[
                    r.hypothesis.as_str().into(),
                    r.samples.to_string(),
                    num(r.worst_residual),
                    r.verdict.as_str().into(),
                    csv_escape(r.note.as_deref().unwrap_or("")),
                ]));
            }
            files.push(("audit.csv".into(), csv.into_bytes()));
        }
        Experiment::SolveSkeleton => {
            let traj = solve_skeleton(&model, &x0, &h, grid, &opts).map_err(solver)?;
            files.push(("trajectory.jsonl".into(), trajectory_to_string(&traj, domain).into_bytes()));
            files.push(("final_state.csv".into(), state_csv(&space.nodes(), traj.final_state()).into_bytes()));
        }
        Experiment::Simulate { epsilon, stop_threshold } => {
            let (traj, stop) =
                simulate_controlled_spde(&model, &x0, &h, *epsilon, grid, cfg.seed, *stop_threshold, &opts).map_err(solver)?;
            files.push(("trajectory.jsonl".into(), trajectory_to_string(&traj, domain).into_bytes()));
            files.push(("final_state.csv".into(), state_csv(&space.nodes(), traj.final_state()).into_bytes()));
            if let Some(s) = stop {
                files.push(("stop.json".into(), (serde_json::to_string_pretty(&s).expect("stop record") + "\n").into_bytes()));
            }
        }
        Experiment::GalerkinConvergence { levels } => {
            let rows = galerkin_convergence(&model, &x0, &h, grid, levels, &opts).map_err(solver)?;
            let mut csv = String::from("level,reference_level,sup_vstar,l2_h\n");
            for r in rows {
                csv.push_str(&csv_row(&[r.level.to_string(), r.reference_level.to_string(), num(r.sup_vstar), num(r.l2_h)]));
            }
            files.push(("galerkin.csv".into(), csv.into_bytes()));
        }
        Experiment::Rate { target_mode, target_amplitude, tolerance, pieces, max_rounds } => {
            let e = space.basis_vector(*target_mode).map_err(|e| RunError::Config(e.to_string()))?;
            let target = StateVector(e.iter().map(|x| target_amplitude * x).collect());
            let mut problem = RateProblem::new(model.clone(), x0, RateTarget::Endpoint(target), *tolerance, grid, *pieces)
                .map_err(|e| RunError::Config(e.to_string()))?;
            problem.options = RateOptions { max_rounds: *max_rounds, ..RateOptions::default() };
            let r = rate_endpoint(&problem).map_err(solver)?;
            let summary = serde_json::json!({
                "value": if r.value.is_finite() { serde_json::json!(r.value) } else { serde_json::json!("inf") },
                "status": r.status.as_str(),
                "constraint_residual": r.constraint_residual,
                "iterations": r.iterations,
                "gradient_norm_final": r.gradient_norm_final,
                "penalty_final": r.penalty_final,
            });
            files.push(("rate.json".into(), (serde_json::to_string_pretty(&summary).expect("json") + "\n").into_bytes()));
            let cg = *r.control.grid();
            let mut csv = String::from("t_start,t_end");
            for j in 1..=r.control.modes() {
                write!(csv, ",h{j}").unwrap();
            }
            csv.push('\n');
            for (p, v) in r.control.values().iter().enumerate() {
                let mut row = vec![num(cg.time(p)), num(cg.time(p + 1))];
                row.extend(v.iter().map(|x| num(*x)));
                csv.push_str(&csv_row(&row));
            }
            files.push(("control.csv".into(), csv.into_bytes()));
            let mut trace = String::from("round,iteration,penalty,objective,energy,residual,gradient_norm\n");
            for t in &r.trace {
                trace.push_str(&csv_row(&[
                    t.round.to_string(),
                    t.iteration.to_string(),
                    num(t.penalty),
                    num(t.objective),
                    num(t.energy),
                    num(t.residual),
                    num(t.gradient_norm),
                ]));
            }
            files.push(("rate_trace.csv".into(), trace.into_bytes()));
        }
        Experiment::McLdp { epsilons, delta, samples, event, budget } => {
            let controls = vec![h.clone(); epsilons.len()];
            let rows = condition_a_scan(&model, &x0, &controls, epsilons, *delta, *samples, grid, cfg.seed, *budget, *event, &opts)
                .map_err(|e| match e {
                    spde_ldp::Error::Budget { .. } | spde_ldp::Error::NoiseGuard { .. } => RunError::Config(e.to_string()),
                    other => solver(other),
                })?;
            let mut csv = String::from("epsilon,samples,hits,p_hat,ci_low,ci_high,eps2_log_p,failures\n");
            for r in &rows {
                csv.push_str(&csv_row(&[
                    num(r.epsilon),
                    r.num_samples.to_string(),
                    r.hits.to_string(),
                    num(r.p_hat),
                    num(r.ci_low),
                    num(r.ci_high),
                    num(r.eps2_log_p()),
                    r.failures.to_string(),
                ]));
            }
            files.push(("mc_ldp.csv".into(), csv.into_bytes()));
            let slope = match fit_ldp_slope(&rows) {
                Ok(f) => serde_json::to_value(f).expect("fit"),
                Err(e) => serde_json::json!({ "error": e.to_string() }),
            };
            files.push(("slope.json".into(), (serde_json::to_string_pretty(&slope).expect("json") + "\n").into_bytes()));
        }
    }
    Ok(Produced { files, audit_failed })
}
