//! Experiment configuration: a flat `key = value` text format, presets, and
//! the conversion into core problem and solver types.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use msfem_core::basis::{BoundaryVariant, LocalSolver};
use msfem_core::fem::{Diffusion, Source, TauMode, VelocityNorm};
use msfem_core::linalg::{PreconditionerKind, SolverConfig};
use msfem_core::mesh::Dim;
use msfem_core::solvers::{BetaChoice, BoundFormula, Method, MethodOptions, ProblemSpec, SplittingSource};

use crate::ConfigError;

/// How the fine mesh is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FineMesh {
    /// Fixed number of fine cells per coarse cell and direction.
    Ratio(usize),
    /// Smallest ratio meeting the resolution constraints, refused above the
    /// given number of fine vertices.
    Auto { max_unknowns: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendChoice {
    Direct,
    Iterative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Alpha,
    Epsilon,
    H,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::H => "H",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "alpha" => Ok(SweepAxis::Alpha),
            "epsilon" | "eps" => Ok(SweepAxis::Epsilon),
            "h" => Ok(SweepAxis::H),
            other => Err(ConfigError::Value { key: "sweep_axis".into(), value: other.into() }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub dim: usize,
    pub length: f64,
    pub alpha: f64,
    /// Relative amplitude of the oscillation; 0 gives a constant coefficient.
    pub delta: f64,
    pub epsilon: f64,
    pub b: [f64; 2],
    pub f: f64,
    /// Coarse subdivisions per direction, so `H = length / coarse_n`.
    pub coarse_n: usize,
    pub fine: FineMesh,
    pub methods: Vec<Method>,
    pub tau_mode: TauMode,
    /// Norm of `b` inside the stabilization parameter.
    pub tau_norm: VelocityNorm,
    /// Boundary conditions used for a bare `Adv-MsFEM` entry.
    pub bc: BoundaryVariant,
    pub backend: BackendChoice,
    pub tolerance: f64,
    /// Above this many fine unknowns the reference uses GMRES.
    pub direct_limit: usize,
    pub alpha_spl: Option<f64>,
    pub beta: BetaChoice,
    pub projection: bool,
    pub spl_tolerance: f64,
    pub spl_max_iter: usize,
    pub spl_source: SplittingSource,
    pub online_min_seconds: f64,
    pub sweep_axis: Option<SweepAxis>,
    pub sweep_values: Vec<f64>,
    pub workers: usize,
    pub output: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

const ALL_2D: &str = "P1,P1-Upwind,MsFEM,Stab-MsFEM,Adv-MsFEM,Splitting";

impl ExperimentConfig {
    /// Small 2D multiscale case that runs in seconds.
    pub fn desk() -> Self {
        ExperimentConfig {
            name: "desk".into(),
            dim: 2,
            length: 1.0,
            alpha: 1.0 / 32.0,
            delta: 0.5,
            epsilon: 1.0 / 16.0,
            b: [1.0, 1.0],
            f: 1.0,
            coarse_n: 8,
            fine: FineMesh::Ratio(32),
            methods: parse_methods(ALL_2D).expect("valid method list"),
            tau_mode: TauMode::Coth,
            tau_norm: VelocityNorm::Euclidean,
            bc: BoundaryVariant::Linear,
            backend: BackendChoice::Direct,
            tolerance: 1e-12,
            direct_limit: 300_000,
            alpha_spl: None,
            beta: BetaChoice::Auto(BoundFormula::Continuous),
            projection: false,
            spl_tolerance: 1e-9,
            spl_max_iter: 100_000,
            spl_source: SplittingSource::Full,
            online_min_seconds: 0.0,
            sweep_axis: None,
            sweep_values: Vec::new(),
            workers: 1,
            output: PathBuf::from("out"),
            seed: 0,
        }
    }

    /// The multiscale reference case on a `1/1024` fine mesh.
    pub fn reference() -> Self {
        ExperimentConfig {
            name: "reference".into(),
            alpha: 1.0 / 128.0,
            epsilon: 1.0 / 64.0,
            coarse_n: 16,
            fine: FineMesh::Ratio(64),
            ..Self::desk()
        }
    }

    /// 1D single-scale problem `-alpha u'' + u' = 1`.
    pub fn one_d() -> Self {
        ExperimentConfig {
            name: "one-d".into(),
            dim: 1,
            alpha: 1.0 / 256.0,
            delta: 0.0,
            epsilon: 1.0,
            b: [1.0, 0.0],
            coarse_n: 16,
            fine: FineMesh::Ratio(1024),
            methods: parse_methods("P1,P1-SUPG").expect("valid method list"),
            direct_limit: usize::MAX,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "desk" => Ok(Self::desk()),
            "reference" => Ok(Self::reference()),
            "one-d" | "1d" => Ok(Self::one_d()),
            other => Err(ConfigError::Value { key: "preset".into(), value: other.into() }),
        }
    }

    pub fn coarse_size(&self) -> f64 {
        self.length / self.coarse_n as f64
    }

    /// Parses a config file body on top of `base`. Blank lines and `#`
    /// comments are ignored.
    pub fn parse_onto(base: Self, text: &str) -> Result<Self, ConfigError> {
        let mut cfg = base;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_onto(Self::desk(), text)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::Value { key: key.into(), value: value.into() };
        match key {
            "name" => self.name = value.to_string(),
            "dim" => self.dim = num(value).ok_or_else(bad)?,
            "length" | "L" => self.length = real(value).ok_or_else(bad)?,
            "alpha" => self.alpha = real(value).ok_or_else(bad)?,
            "delta" => self.delta = real(value).ok_or_else(bad)?,
            "epsilon" => self.epsilon = real(value).ok_or_else(bad)?,
            "b" => {
                let v = reals(value).ok_or_else(bad)?;
                self.b = match v[..] {
                    [x] => [x, 0.0],
                    [x, y] => [x, y],
                    _ => return Err(bad()),
                };
            }
            "f" => self.f = real(value).ok_or_else(bad)?,
            "H" | "h_coarse" => {
                let h = real(value).ok_or_else(bad)?;
                let n = (self.length / h).round();
                if !(n >= 1.0) || ((self.length / n) - h).abs() > 1e-9 * h {
                    return Err(bad());
                }
                self.coarse_n = n as usize;
            }
            "coarse_n" => self.coarse_n = num(value).ok_or_else(bad)?,
            "fine" => {
                self.fine = if let Some(rest) = value.strip_prefix("auto") {
                    let max = rest.trim_start_matches(':');
                    FineMesh::Auto { max_unknowns: if max.is_empty() { 4_000_000 } else { num(max).ok_or_else(bad)? } }
                } else {
                    FineMesh::Ratio(num(value).ok_or_else(bad)?)
                }
            }
            "methods" => self.methods = parse_methods(value).map_err(|_| bad())?,
            "tau" => {
                self.tau_mode = match value {
                    "coth" => TauMode::Coth,
                    "simple" => TauMode::Simple,
                    _ => return Err(bad()),
                }
            }
            "tau_norm" => {
                self.tau_norm = match value {
                    "euclidean" => VelocityNorm::Euclidean,
                    "componentwise" | "sup" => VelocityNorm::Componentwise,
                    _ => return Err(bad()),
                }
            }
            "bc" => self.bc = parse_bc(value).ok_or_else(bad)?,
            "backend" => {
                self.backend = match value {
                    "direct" => BackendChoice::Direct,
                    "iterative" => BackendChoice::Iterative,
                    _ => return Err(bad()),
                }
            }
            "tolerance" => self.tolerance = real(value).ok_or_else(bad)?,
            "direct_limit" => self.direct_limit = num(value).ok_or_else(bad)?,
            "alpha_spl" => {
                self.alpha_spl = if value == "auto" { None } else { Some(real(value).ok_or_else(bad)?) };
            }
            "beta" => {
                self.beta = match value {
                    "auto" | "auto-continuous" => BetaChoice::Auto(BoundFormula::Continuous),
                    "auto-discrete" => BetaChoice::Auto(BoundFormula::Discrete),
                    v => BetaChoice::Value(real(v).ok_or_else(bad)?),
                }
            }
            "projection" => self.projection = boolean(value).ok_or_else(bad)?,
            "spl_tolerance" => self.spl_tolerance = real(value).ok_or_else(bad)?,
            "spl_max_iter" => self.spl_max_iter = num(value).ok_or_else(bad)?,
            "spl_source" => {
                self.spl_source = match value {
                    "full" => SplittingSource::Full,
                    "bare" => SplittingSource::Bare,
                    _ => return Err(bad()),
                }
            }
            "online_min_seconds" => self.online_min_seconds = real(value).ok_or_else(bad)?,
            "sweep_axis" => {
                self.sweep_axis = if value == "none" { None } else { Some(value.parse()?) };
            }
            "sweep_values" => {
                let mut v = reals(value).ok_or_else(bad)?;
                v.sort_by(f64::total_cmp);
                self.sweep_values = v;
            }
            "workers" => self.workers = num(value).ok_or_else(bad)?,
            "output" => self.output = PathBuf::from(value),
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: &str| Err(ConfigError::Invalid(msg.into()));
        if self.methods.is_empty() {
            return fail("method list is empty");
        }
        if !(self.dim == 1 || self.dim == 2) {
            return fail("dim must be 1 or 2");
        }
        if !(self.length > 0.0 && self.alpha > 0.0 && self.epsilon > 0.0) {
            return fail("length, alpha and epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.delta) {
            return fail("delta must lie in [0, 1)");
        }
        if self.coarse_n == 0 || matches!(self.fine, FineMesh::Ratio(0)) {
            return fail("mesh sizes must be positive");
        }
        if self.workers == 0 {
            return fail("workers must be at least 1");
        }
        if self.sweep_axis.is_some() && self.sweep_values.is_empty() {
            return fail("sweep axis given without values");
        }
        if self.sweep_values.windows(2).any(|w| w[0] > w[1]) {
            return fail("sweep values must be sorted");
        }
        Ok(())
    }

    /// Serializes every field in the format read by [`parse`](Self::parse).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let methods: Vec<String> = self.methods.iter().map(method_key).collect();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "length = {}", self.length);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "delta = {}", self.delta);
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        let _ = writeln!(s, "b = {},{}", self.b[0], self.b[1]);
        let _ = writeln!(s, "f = {}", self.f);
        let _ = writeln!(s, "coarse_n = {}", self.coarse_n);
        let _ = match self.fine {
            FineMesh::Ratio(r) => writeln!(s, "fine = {r}"),
            FineMesh::Auto { max_unknowns } => writeln!(s, "fine = auto:{max_unknowns}"),
        };
        let _ = writeln!(s, "methods = {}", methods.join(","));
        let _ = writeln!(s, "tau = {}", if self.tau_mode == TauMode::Coth { "coth" } else { "simple" });
        let _ = writeln!(
            s,
            "tau_norm = {}",
            if self.tau_norm == VelocityNorm::Euclidean { "euclidean" } else { "componentwise" }
        );
        let _ = writeln!(s, "bc = {}", bc_key(&self.bc));
        let _ = writeln!(s, "backend = {}", if self.backend == BackendChoice::Direct { "direct" } else { "iterative" });
        let _ = writeln!(s, "tolerance = {:e}", self.tolerance);
        let _ = writeln!(s, "direct_limit = {}", self.direct_limit);
        let _ = match self.alpha_spl {
            Some(a) => writeln!(s, "alpha_spl = {a}"),
            None => writeln!(s, "alpha_spl = auto"),
        };
        let _ = match self.beta {
            BetaChoice::Auto(BoundFormula::Continuous) => writeln!(s, "beta = auto"),
            BetaChoice::Auto(BoundFormula::Discrete) => writeln!(s, "beta = auto-discrete"),
            BetaChoice::Value(v) => writeln!(s, "beta = {v}"),
        };
        let _ = writeln!(s, "projection = {}", self.projection);
        let _ = writeln!(s, "spl_tolerance = {:e}", self.spl_tolerance);
        let _ = writeln!(s, "spl_max_iter = {}", self.spl_max_iter);
        let _ = writeln!(s, "spl_source = {}", if self.spl_source == SplittingSource::Full { "full" } else { "bare" });
        let _ = writeln!(s, "online_min_seconds = {}", self.online_min_seconds);
        let _ = writeln!(s, "sweep_axis = {}", self.sweep_axis.map_or("none", SweepAxis::name));
        let vals: Vec<String> = self.sweep_values.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "sweep_values = {}", vals.join(","));
        let _ = writeln!(s, "workers = {}", self.workers);
        let _ = writeln!(s, "output = {}", self.output.display());
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// The problem described by this config.
    pub fn problem(&self) -> Result<ProblemSpec, ConfigError> {
        let dim = Dim::from_usize(self.dim).map_err(ConfigError::Core)?;
        let diffusion = if self.delta == 0.0 {
            Diffusion::Constant(self.alpha)
        } else {
            Diffusion::oscillating(self.alpha, self.delta, self.epsilon).map_err(ConfigError::Core)?
        };
        let mut p =
            ProblemSpec::new(dim, self.length, diffusion, self.b, Source::Constant(self.f)).map_err(ConfigError::Core)?;
        p.tau_norm = self.tau_norm;
        if let Some(a) = self.alpha_spl {
            p = p.with_alpha_spl(a).map_err(ConfigError::Core)?;
        }
        Ok(p)
    }

    pub fn method_options(&self) -> MethodOptions {
        let base = match self.backend {
            BackendChoice::Direct => MethodOptions::default(),
            BackendChoice::Iterative => MethodOptions {
                coarse: SolverConfig::gmres()
                    .with_tolerance(self.tolerance)
                    .with_preconditioner(PreconditionerKind::Diagonal),
                local: LocalSolver::iterative(),
                ..MethodOptions::default()
            },
        };
        let mut o = MethodOptions { tau_mode: self.tau_mode, online_min_seconds: self.online_min_seconds, ..base };
        o.splitting.tolerance = self.spl_tolerance;
        o.splitting.max_iter = self.spl_max_iter;
        o.splitting.source = self.spl_source;
        o
    }

    /// The method list with the config's boundary variant and damping
    /// settings filled in.
    pub fn resolved_methods(&self) -> Vec<Method> {
        self.methods
            .iter()
            .map(|m| match *m {
                Method::AdvMsFem(BoundaryVariant::Linear) => Method::AdvMsFem(self.bc),
                Method::SplittingDamped { .. } => {
                    Method::SplittingDamped { beta: self.beta, projection: self.projection }
                }
                other => other,
            })
            .collect()
    }

    /// Copy of this config with one sweep axis set to `value`.
    pub fn at(&self, axis: SweepAxis, value: f64) -> Result<Self, ConfigError> {
        let mut c = self.clone();
        match axis {
            SweepAxis::Alpha => c.alpha = value,
            SweepAxis::Epsilon => c.epsilon = value,
            SweepAxis::H => c.set("H", &value.to_string())?,
        }
        c.sweep_axis = None;
        c.sweep_values.clear();
        Ok(c)
    }
}

pub fn parse_methods(list: &str) -> Result<Vec<Method>, ConfigError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| Method::parse(s).map_err(|_| ConfigError::Value { key: "methods".into(), value: s.into() }))
        .collect()
}

fn method_key(m: &Method) -> String {
    match m {
        Method::AdvMsFem(BoundaryVariant::Oversampling { ratio }) => format!("Adv-MsFEM-os:{ratio}"),
        other => other.label(),
    }
}

fn parse_bc(s: &str) -> Option<BoundaryVariant> {
    match s {
        "lin" | "linear" => Some(BoundaryVariant::Linear),
        "cr" => Some(BoundaryVariant::CrouzeixRaviart),
        "os" => Some(BoundaryVariant::Oversampling { ratio: 3.0 }),
        other => other
            .strip_prefix("os:")
            .and_then(|r| r.parse().ok())
            .map(|ratio| BoundaryVariant::Oversampling { ratio }),
    }
}

fn bc_key(v: &BoundaryVariant) -> String {
    match v {
        BoundaryVariant::Oversampling { ratio } => format!("os:{ratio}"),
        other => other.label().to_string(),
    }
}

/// Accepts decimals and simple fractions such as `1/128`.
fn real(s: &str) -> Option<f64> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => a.trim().parse::<f64>().ok()? / b.trim().parse::<f64>().ok()?,
        None => s.parse().ok()?,
    };
    v.is_finite().then_some(v)
}

fn reals(s: &str) -> Option<Vec<f64>> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(real).collect()
}

fn num(s: &str) -> Option<usize> {
    s.trim().parse().ok()
}

fn boolean(s: &str) -> Option<bool> {
    match s {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::reference();
        c.set("methods", "P1,Adv-MsFEM-os:2.5,Splitting-damped").unwrap();
        c.set("sweep_values", "1/8, 1/4, 1/16").unwrap();
        c.set("sweep_axis", "alpha").unwrap();
        c.set("beta", "1.5").unwrap();
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn sweep_values_are_sorted() {
        let mut c = ExperimentConfig::desk();
        c.set("sweep_values", "0.5,0.125,0.25").unwrap();
        assert_eq!(c.sweep_values, vec![0.125, 0.25, 0.5]);
    }

    #[test]
    fn empty_method_list_is_rejected() {
        assert!(matches!(ExperimentConfig::parse("methods = "), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn unknown_key_and_bad_values() {
        assert!(matches!(ExperimentConfig::parse("colour = red"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(ExperimentConfig::parse("alpha = fast"), Err(ConfigError::Value { .. })));
        assert!(matches!(ExperimentConfig::parse("alpha"), Err(ConfigError::Syntax { line: 1 })));
        // 1/3 does not divide the unit length into equal coarse cells
        assert!(ExperimentConfig::parse("H = 0.3").is_err());
    }

    #[test]
    fn fractions_and_comments() {
        let c = ExperimentConfig::parse("alpha = 1/128  # diffusion\n\nH = 1/16\nfine = auto:1000").unwrap();
        assert_eq!(c.alpha, 1.0 / 128.0);
        assert_eq!(c.coarse_n, 16);
        assert_eq!(c.fine, FineMesh::Auto { max_unknowns: 1000 });
    }

    #[test]
    fn bare_adv_msfem_takes_the_bc_key() {
        let c = ExperimentConfig::parse("methods = Adv-MsFEM\nbc = cr").unwrap();
        assert_eq!(c.resolved_methods(), vec![Method::AdvMsFem(BoundaryVariant::CrouzeixRaviart)]);
    }
}
