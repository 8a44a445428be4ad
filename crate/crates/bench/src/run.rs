//! Single runs, sweeps and their CSV / gnuplot output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::sync::Mutex;

use msfem_core::analysis::{attach_errors, ErrorBundle};
use msfem_core::mesh::{layer_mask, MeshHierarchy};
use msfem_core::solvers::{
    auto_hierarchy, hierarchy, solve_method, solve_reference, solve_splitting, solve_splitting_damped, Method,
    MethodReport, ProblemSpec, ReferenceSolution,
};
use msfem_core::Error as CoreError;

use crate::config::{ExperimentConfig, FineMesh, SweepAxis};
use crate::ConfigError;

/// Outcome of one method in one run.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodRecord {
    pub method: String,
    pub errors: Option<ErrorBundle>,
    pub offline_seconds: f64,
    pub online_seconds: f64,
    pub linear_iterations: usize,
    pub splitting_iterations: Option<usize>,
    /// Residual after each splitting pass.
    pub history: Vec<f64>,
    /// Set when the method failed; the other fields are then zero.
    pub failure: Option<String>,
}

impl MethodRecord {
    fn failed(method: String, e: &CoreError) -> Self {
        let history = match e {
            CoreError::SplittingDiverged { residuals, .. } => residuals.clone(),
            _ => Vec::new(),
        };
        MethodRecord {
            method,
            errors: None,
            offline_seconds: 0.0,
            online_seconds: 0.0,
            linear_iterations: 0,
            splitting_iterations: None,
            history,
            failure: Some(e.to_string()),
        }
    }

    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub h_coarse: f64,
    pub h_fine: f64,
    /// Whether the fine mesh meets both resolution constraints.
    pub fine_constraints_met: bool,
    pub reference_seconds: f64,
    pub reference_iterations: usize,
    pub methods: Vec<MethodRecord>,
}

impl RunRecord {
    pub fn method(&self, label: &str) -> Option<&MethodRecord> {
        self.methods.iter().find(|m| m.method == label)
    }
}

/// `h <= min(eps, layer)/16` and `Pe h <= 1/(4 sqrt 2)`.
pub fn fine_constraints_met(problem: &ProblemSpec, h_fine: f64) -> bool {
    h_fine <= problem.required_fine_size() * (1.0 + 1e-12)
}

pub fn build_hierarchy(cfg: &ExperimentConfig, problem: &ProblemSpec) -> Result<Arc<MeshHierarchy>, CoreError> {
    match cfg.fine {
        FineMesh::Ratio(r) => hierarchy(problem, cfg.coarse_n, r),
        FineMesh::Auto { max_unknowns } => {
            let h = auto_hierarchy(problem, cfg.coarse_n, max_unknowns)?;
            assert!(fine_constraints_met(problem, h.fine().size()), "auto fine mesh violates the constraints");
            Ok(h)
        }
    }
}

/// Fine reference solution for a config, exposed so callers can share it
/// across several runs.
pub fn reference_for(cfg: &ExperimentConfig) -> Result<(ProblemSpec, Arc<MeshHierarchy>, ReferenceSolution), RunError> {
    cfg.validate()?;
    let problem = cfg.problem()?;
    let h = build_hierarchy(cfg, &problem)?;
    let r = solve_reference(&problem, &h, cfg.direct_limit)?;
    Ok((problem, h, r))
}

/// Solves every method of the config and measures it against the fine
/// reference. Method failures are recorded and the run continues.
pub fn run(cfg: &ExperimentConfig) -> Result<RunRecord, RunError> {
    let (problem, h, r) = reference_for(cfg)?;
    Ok(run_with_reference(cfg, &problem, &h, &r))
}

pub fn run_with_reference(
    cfg: &ExperimentConfig,
    problem: &ProblemSpec,
    h: &Arc<MeshHierarchy>,
    reference: &ReferenceSolution,
) -> RunRecord {
    let mask = layer_mask(h.fine(), problem.peclet());
    let opts = cfg.method_options();
    let methods = cfg
        .resolved_methods()
        .into_iter()
        .map(|m| {
            let label = m.label();
            let solved = match m {
                Method::Splitting => solve_splitting(problem, h, &opts).map(|(r, s)| (r, s.residuals)),
                Method::SplittingDamped { beta, projection } => {
                    solve_splitting_damped(problem, h, beta, projection, &opts).map(|(r, s)| (r, s.residuals))
                }
                other => solve_method(problem, h, other, &opts).map(|r| (r, Vec::new())),
            };
            match solved.and_then(|(mut rep, hist)| {
                attach_errors(&mut rep, h, &reference.field, &mask)?;
                Ok((rep, hist))
            }) {
                Ok((rep, history)) => record_of(rep, history),
                Err(e) => MethodRecord::failed(label, &e),
            }
        })
        .collect();
    RunRecord {
        config: cfg.clone(),
        h_coarse: h.coarse().size(),
        h_fine: h.fine().size(),
        fine_constraints_met: fine_constraints_met(problem, h.fine().size()),
        reference_seconds: reference.seconds,
        reference_iterations: reference.iterations,
        methods,
    }
}

fn record_of(rep: MethodReport, history: Vec<f64>) -> MethodRecord {
    MethodRecord {
        method: rep.method,
        errors: rep.errors,
        offline_seconds: rep.offline_seconds,
        online_seconds: rep.online_seconds,
        linear_iterations: rep.linear_iterations,
        splitting_iterations: rep.splitting_iterations,
        history,
        failure: None,
    }
}

/// One record per sweep value, computed on up to `cfg.workers` threads.
/// A failing point is kept as an `Err` and the sweep continues.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<(f64, Result<RunRecord, RunError>)>, RunError> {
    cfg.validate()?;
    let axis = cfg.sweep_axis.ok_or_else(|| ConfigError::Invalid("no sweep axis".into()))?;
    let points: Vec<(f64, ExperimentConfig)> =
        cfg.sweep_values.iter().map(|&v| Ok((v, cfg.at(axis, v)?))).collect::<Result<_, ConfigError>>()?;
    let results: Vec<Mutex<Option<Result<RunRecord, RunError>>>> = points.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|s| {
        for _ in 0..cfg.workers.min(points.len()) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("sweep counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= points.len() {
                    break;
                }
                let out = run(&points[i].1);
                *results[i].lock().expect("sweep slot") = Some(out);
            });
        }
    });
    Ok(points
        .iter()
        .zip(results)
        .map(|((v, _), r)| (*v, r.into_inner().expect("sweep slot").expect("every point ran")))
        .collect())
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

// ------------------------------------------------------------------ output

/// Columns before the timing columns are deterministic for a fixed config.
pub const CSV_HEADER: &str =
    "method,e_L2,e_H1,e_Linf,e_H1_in,e_H1_out,linear_iterations,splitting_iterations,status,offline_s,online_s";

/// Number of leading CSV columns that do not depend on timing.
pub const DETERMINISTIC_COLUMNS: usize = 9;

fn method_row(m: &MethodRecord) -> String {
    let errs = m.errors.map_or_else(|| ",,,,".to_string(), |e| e.csv_row());
    let spl = m.splitting_iterations.map_or(String::new(), |n| n.to_string());
    let status = match &m.failure {
        None => "ok".to_string(),
        Some(msg) => format!("\"failed: {}\"", msg.replace('"', "'")),
    };
    format!(
        "{},{},{},{},{},{:.6e},{:.6e}",
        m.method, errs, m.linear_iterations, spl, status, m.offline_seconds, m.online_seconds
    )
}

pub fn run_csv(r: &RunRecord) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{CSV_HEADER}");
    for m in &r.methods {
        let _ = writeln!(s, "{}", method_row(m));
    }
    s
}

/// Long format: one line per (value, method).
pub fn sweep_csv(axis: SweepAxis, points: &[(f64, Result<RunRecord, RunError>)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{},{CSV_HEADER}", axis.name());
    for (v, r) in points {
        match r {
            Ok(rec) => {
                for m in &rec.methods {
                    let _ = writeln!(s, "{v:e},{}", method_row(m));
                }
            }
            Err(e) => {
                let _ = writeln!(s, "{v:e},*,,,,,,,,\"failed: {}\",,", e.to_string().replace('"', "'"));
            }
        }
    }
    s
}

/// CSV with the timing columns removed, for determinism comparisons.
pub fn strip_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            let cols = split_csv(l);
            let keep = cols.len().saturating_sub(2);
            cols[..keep].join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn split_csv(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            ',' if !quoted => {
                out.push(&line[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&line[start..]);
    out
}

/// Gnuplot data: per method, `value e_H1 e_H1_out e_H1_in online_s
/// splitting_iterations`, one block per file.
pub fn sweep_dat(points: &[(f64, Result<RunRecord, RunError>)]) -> Vec<(String, String)> {
    let mut labels: Vec<String> = Vec::new();
    for (_, r) in points {
        if let Ok(rec) = r {
            for m in &rec.methods {
                if !labels.contains(&m.method) {
                    labels.push(m.method.clone());
                }
            }
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let mut s = String::from("# value e_H1 e_H1_out e_H1_in online_s splitting_iterations\n");
            for (v, r) in points {
                let Ok(rec) = r else { continue };
                let Some(m) = rec.method(&label) else { continue };
                let Some(e) = m.errors else { continue };
                let _ = writeln!(
                    s,
                    "{v:e} {:e} {:e} {:e} {:e} {}",
                    e.h1,
                    e.h1_out,
                    e.h1_in,
                    m.online_seconds,
                    m.splitting_iterations.map_or("NaN".to_string(), |n| n.to_string())
                );
            }
            (label, s)
        })
        .collect()
}

/// Residual histories of the splitting methods, `iteration residual`.
pub fn history_dat(r: &RunRecord) -> Vec<(String, String)> {
    r.methods
        .iter()
        .filter(|m| !m.history.is_empty())
        .map(|m| {
            let mut s = String::from("# iteration residual\n");
            for (i, v) in m.history.iter().enumerate() {
                let _ = writeln!(s, "{} {v:e}", i + 1);
            }
            (m.method.clone(), s)
        })
        .collect()
}

fn file_stem(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn write(path: &Path, body: &str) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| RunError::Io { path: dir.into(), source })?;
    }
    fs::write(path, body).map_err(|source| RunError::Io { path: path.into(), source })
}

/// Writes `<name>.csv`, `<name>.config` and the history `.dat` files into
/// the output directory; returns the CSV path.
pub fn write_run(r: &RunRecord) -> Result<PathBuf, RunError> {
    let dir = &r.config.output;
    let csv = dir.join(format!("{}.csv", r.config.name));
    write(&csv, &run_csv(r))?;
    write(&dir.join(format!("{}.config", r.config.name)), &r.config.to_text())?;
    for (label, body) in history_dat(r) {
        write(&dir.join(format!("{}_history_{}.dat", r.config.name, file_stem(&label))), &body)?;
    }
    Ok(csv)
}

pub fn write_sweep(cfg: &ExperimentConfig, points: &[(f64, Result<RunRecord, RunError>)]) -> Result<PathBuf, RunError> {
    let axis = cfg.sweep_axis.ok_or_else(|| ConfigError::Invalid("no sweep axis".into()))?;
    let dir = &cfg.output;
    let csv = dir.join(format!("{}_sweep_{}.csv", cfg.name, axis.name()));
    write(&csv, &sweep_csv(axis, points))?;
    write(&dir.join(format!("{}.config", cfg.name)), &cfg.to_text())?;
    for (label, body) in sweep_dat(points) {
        write(&dir.join(format!("{}_{}_{}.dat", cfg.name, axis.name(), file_stem(&label))), &body)?;
    }
    Ok(csv)
}

// ------------------------------------------------------------------ timing

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub method: String,
    pub backend: String,
    pub offline_seconds: f64,
    pub online_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostTable {
    pub rows: Vec<CostRow>,
    /// Splitting online over Stab-MsFEM online, per backend.
    pub splitting_over_stab_online: Vec<(String, f64)>,
    /// Adv-MsFEM offline over MsFEM offline, per backend.
    pub adv_over_msfem_offline: Vec<(String, f64)>,
}

impl CostTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,backend,offline_s,online_s\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6e},{:.6e}", r.method, r.backend, r.offline_seconds, r.online_seconds);
        }
        for (b, v) in &self.splitting_over_stab_online {
            let _ = writeln!(s, "ratio:splitting_online/stab_online,{b},,{v:.4}");
        }
        for (b, v) in &self.adv_over_msfem_offline {
            let _ = writeln!(s, "ratio:adv_offline/msfem_offline,{b},{v:.4},");
        }
        s
    }
}

/// Offline/online columns per method and backend, with the two cost
/// ratios where both methods are present.
pub fn timing_report(records: &[RunRecord]) -> CostTable {
    let mut t = CostTable::default();
    for r in records {
        let backend = match r.config.backend {
            crate::config::BackendChoice::Direct => "direct",
            crate::config::BackendChoice::Iterative => "iterative",
        };
        for m in r.methods.iter().filter(|m| m.ok()) {
            t.rows.push(CostRow {
                method: m.method.clone(),
                backend: backend.into(),
                offline_seconds: m.offline_seconds,
                online_seconds: m.online_seconds,
            });
        }
        let get = |l: &str| r.method(l).filter(|m| m.ok());
        if let (Some(s), Some(st)) = (get("Splitting"), get("Stab-MsFEM")) {
            if st.online_seconds > 0.0 {
                t.splitting_over_stab_online.push((backend.into(), s.online_seconds / st.online_seconds));
            }
        }
        let adv = r.methods.iter().find(|m| m.ok() && m.method.starts_with("Adv-MsFEM"));
        if let (Some(a), Some(ms)) = (adv, get("MsFEM")) {
            if ms.offline_seconds > 0.0 {
                t.adv_over_msfem_offline.push((backend.into(), a.offline_seconds / ms.offline_seconds));
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::desk();
        c.set("alpha", "1/8").unwrap();
        c.set("epsilon", "1/4").unwrap();
        c.set("coarse_n", "4").unwrap();
        c.set("fine", "16").unwrap();
        c
    }

    #[test]
    fn every_requested_method_appears_once() {
        let c = tiny();
        let r = run(&c).unwrap();
        let labels: Vec<_> = r.methods.iter().map(|m| m.method.as_str()).collect();
        assert_eq!(labels, ["P1", "P1-Upwind", "MsFEM", "Stab-MsFEM", "Adv-MsFEM", "Splitting"]);
        assert!(r.methods.iter().all(MethodRecord::ok));
    }

    #[test]
    fn failing_method_is_recorded() {
        let mut c = tiny();
        c.set("methods", "P1,Splitting").unwrap();
        c.set("spl_max_iter", "1").unwrap();
        let r = run(&c).unwrap();
        assert!(r.methods[0].ok());
        assert!(r.methods[1].failure.as_deref().unwrap().contains("splitting"));
        assert_eq!(r.methods[1].history.len(), 1);
        assert!(run_csv(&r).contains("failed"));
    }

    #[test]
    fn strip_timing_keeps_quoted_commas() {
        let l = "a,\"failed: x, y\",1.0e0,2.0e0";
        assert_eq!(strip_timing(l), "a,\"failed: x, y\"");
    }

    #[test]
    fn empty_cost_table() {
        let t = timing_report(&[]);
        assert!(t.rows.is_empty() && t.splitting_over_stab_online.is_empty());
        assert_eq!(t.to_csv().lines().count(), 1);
    }

    #[test]
    fn single_value_sweep_equals_run() {
        let mut c = tiny();
        c.set("methods", "P1-Upwind,Stab-MsFEM").unwrap();
        let direct = run(&c).unwrap();
        c.set("sweep_axis", "alpha").unwrap();
        c.set("sweep_values", "1/8").unwrap();
        let pts = sweep(&c).unwrap();
        assert_eq!(pts.len(), 1);
        let swept = pts[0].1.as_ref().unwrap();
        assert_eq!(strip_timing(&run_csv(swept)), strip_timing(&run_csv(&direct)));
    }
}
