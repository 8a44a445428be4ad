//! End-to-end methods: single-scale P1 variants, the multiscale Galerkin
//! methods, the splitting iterations, the fine reference solve and the 1D
//! closed forms.

use std::sync::Arc;

use crate::analysis::ErrorBundle;
use crate::basis::{
    build_space, build_space_with, coarse_assemble, coarse_load, hat_space, project_onto_space, BasisKind, BoundaryVariant, BrokenField,
    LocalSolver, MultiscaleSpace, ProjectionForm,
};
use crate::error::{Error, Result};
use crate::fem::{
    assemble, assemble_rhs, global_peclet, tau_field, tau_value, velocity_norm, Diffusion, LoadTerm, P1Space, Source, StabParams,
    TauMode, Term, VelocityNorm,
};
use crate::linalg::{dot, norm2, Backend, CsrMatrix, PreconditionerKind, PreparedSolver, SolverConfig};
use crate::mesh::{build_structured, refine, Dim, MeshHierarchy};
use crate::timing::{cpu_seconds, timed, timed_repeat};

/// `-div(A grad u) + b . grad u = f` on `(0, L)^d` with `u = 0` on the
/// boundary, plus the parameters of the splitting schemes.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub dim: Dim,
    pub length: f64,
    pub diffusion: Diffusion,
    /// Constant, hence divergence-free, velocity. Only `b[0]` is used in 1D.
    pub b: [f64; 2],
    pub f: Source,
    /// Constant diffusion of the coarse splitting step.
    pub alpha_spl: f64,
    /// Poincaré constant used by the contraction estimates.
    pub c_omega: f64,
    /// Norm of `b` inside the stabilization parameter.
    pub tau_norm: VelocityNorm,
}

impl ProblemSpec {
    pub fn new(dim: Dim, length: f64, diffusion: Diffusion, b: [f64; 2], f: Source) -> Result<Self> {
        if !(length > 0.0) {
            return Err(Error::invalid(format!("domain length must be positive, got {length}")));
        }
        let (lo, hi) = diffusion.bounds();
        if !(lo > 0.0) || !(hi >= lo) {
            return Err(Error::invalid(format!("diffusion bounds ({lo}, {hi}) are not elliptic")));
        }
        if !b.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("velocity must be finite"));
        }
        let b = if dim == Dim::One { [b[0], 0.0] } else { b };
        Ok(ProblemSpec {
            dim,
            length,
            alpha_spl: diffusion.nominal(),
            diffusion,
            b,
            f,
            c_omega: 1.0,
            tau_norm: VelocityNorm::Euclidean,
        })
    }

    /// `alpha = 1/128, delta = 1/2, epsilon = 1/64, b = (1, 1), f = 1` on the
    /// unit square.
    pub fn reference_test() -> Self {
        Self::oscillating_2d(1.0 / 128.0, 0.5, 1.0 / 64.0)
    }

    pub fn oscillating_2d(alpha: f64, delta: f64, epsilon: f64) -> Self {
        let a = Diffusion::oscillating(alpha, delta, epsilon).expect("valid oscillating coefficient");
        Self::new(Dim::Two, 1.0, a, [1.0, 1.0], Source::Constant(1.0)).expect("valid problem")
    }

    /// `-alpha u'' + b u' = 1` on `(0, 1)`.
    pub fn single_scale_1d(alpha: f64, b: f64) -> Result<Self> {
        Self::new(Dim::One, 1.0, Diffusion::Constant(alpha), [b, 0.0], Source::Constant(1.0))
    }

    pub fn with_alpha_spl(mut self, alpha_spl: f64) -> Result<Self> {
        if !(alpha_spl > 0.0) {
            return Err(Error::invalid(format!("alpha_spl must be positive, got {alpha_spl}")));
        }
        self.alpha_spl = alpha_spl;
        Ok(self)
    }

    pub fn alpha(&self) -> f64 {
        self.diffusion.nominal()
    }

    pub fn alpha1(&self) -> f64 {
        self.diffusion.bounds().0
    }

    pub fn alpha2(&self) -> f64 {
        self.diffusion.bounds().1
    }

    /// `|b|_inf`, componentwise.
    pub fn b_sup(&self) -> f64 {
        velocity_norm(self.b, self.dim, VelocityNorm::Componentwise)
    }

    pub fn peclet(&self) -> f64 {
        global_peclet(self.b, self.alpha(), self.dim)
    }

    /// `ln(Pe)/Pe`, or `None` when `Pe <= 1`.
    pub fn layer_width(&self) -> Option<f64> {
        let pe = self.peclet();
        (pe > 1.0).then(|| pe.ln() / pe)
    }

    pub fn epsilon(&self) -> Option<f64> {
        match self.diffusion {
            Diffusion::Oscillating { epsilon, delta, .. } if delta > 0.0 => Some(epsilon),
            _ => None,
        }
    }

    /// Stabilization on a coarse mesh of size `h` with diffusion `alpha`.
    pub fn stabilization(&self, mode: TauMode, alpha: f64, h: f64) -> StabParams {
        tau_field(mode, alpha, self.b, h, self.dim, self.tau_norm)
    }

    /// Largest fine mesh size meeting `h <= min(eps, layer)/16` and
    /// `Pe h <= 1/(4 sqrt 2)`.
    pub fn required_fine_size(&self) -> f64 {
        let mut h = self.length / 16.0;
        let scale = match (self.epsilon(), self.layer_width()) {
            (Some(e), Some(d)) => Some(e.min(d)),
            (Some(e), None) => Some(e),
            (None, Some(d)) => Some(d),
            (None, None) => None,
        };
        if let Some(s) = scale {
            h = h.min(s / 16.0);
        }
        let pe = self.peclet();
        if pe > 0.0 {
            h = h.min(1.0 / (4.0 * std::f64::consts::SQRT_2 * pe));
        }
        h
    }
}

/// Coarse mesh with `n` subdivisions per direction, refined so that the fine
/// mesh meets the reference constraints. Fails when the fine mesh would have
/// more than `max_unknowns` vertices.
pub fn auto_hierarchy(problem: &ProblemSpec, n: usize, max_unknowns: usize) -> Result<Arc<MeshHierarchy>> {
    let coarse = build_structured(problem.dim, problem.length, n)?;
    let hc = coarse.size();
    let req = problem.required_fine_size();
    let ratio = ((hc / req) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let nf = n * ratio + 1;
    let unknowns = match problem.dim {
        Dim::One => nf,
        Dim::Two => nf * nf,
    };
    if unknowns > max_unknowns {
        return Err(Error::InfeasibleMesh { required_h: req, unknowns });
    }
    Ok(Arc::new(refine(&coarse, ratio)?))
}

/// Hierarchy with an explicit refinement ratio.
pub fn hierarchy(problem: &ProblemSpec, n: usize, ratio: usize) -> Result<Arc<MeshHierarchy>> {
    Ok(Arc::new(refine(&build_structured(problem.dim, problem.length, n)?, ratio)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum P1Stabilization {
    None,
    Supg(TauMode),
    /// SUPG with `tau = H / (2|b|)`.
    Upwind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    P1(P1Stabilization),
    MsFem,
    StabMsFem,
    AdvMsFem(BoundaryVariant),
    Splitting,
    SplittingDamped { beta: BetaChoice, projection: bool },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::P1(P1Stabilization::None) => "P1".into(),
            Method::P1(P1Stabilization::Supg(TauMode::Coth)) => "P1-SUPG".into(),
            Method::P1(P1Stabilization::Supg(TauMode::Simple)) => "P1-SUPG-simple".into(),
            Method::P1(P1Stabilization::Upwind) => "P1-Upwind".into(),
            Method::MsFem => "MsFEM".into(),
            Method::StabMsFem => "Stab-MsFEM".into(),
            Method::AdvMsFem(BoundaryVariant::Linear) => "Adv-MsFEM".into(),
            Method::AdvMsFem(v) => format!("Adv-MsFEM-{}", v.label()),
            Method::Splitting => "Splitting".into(),
            Method::SplittingDamped { .. } => "Splitting-damped".into(),
        }
    }

    /// Parses the labels produced by [`label`](Self::label) (case
    /// insensitive); oversampling uses ratio 3 unless `os:<ratio>` is given.
    pub fn parse(s: &str) -> Result<Method> {
        let l = s.trim().to_ascii_lowercase();
        Ok(match l.as_str() {
            "p1" => Method::P1(P1Stabilization::None),
            "p1-supg" => Method::P1(P1Stabilization::Supg(TauMode::Coth)),
            "p1-supg-simple" => Method::P1(P1Stabilization::Supg(TauMode::Simple)),
            "p1-upwind" | "upwind" => Method::P1(P1Stabilization::Upwind),
            "msfem" => Method::MsFem,
            "stab-msfem" => Method::StabMsFem,
            "adv-msfem" | "adv-msfem-lin" => Method::AdvMsFem(BoundaryVariant::Linear),
            "adv-msfem-cr" => Method::AdvMsFem(BoundaryVariant::CrouzeixRaviart),
            "adv-msfem-os" => Method::AdvMsFem(BoundaryVariant::Oversampling { ratio: 3.0 }),
            "splitting" => Method::Splitting,
            "splitting-damped" => Method::SplittingDamped { beta: BetaChoice::Auto(BoundFormula::Continuous), projection: false },
            other => {
                if let Some(r) = other.strip_prefix("adv-msfem-os:") {
                    let ratio: f64 = r.parse().map_err(|_| Error::invalid(format!("bad oversampling ratio in {s}")))?;
                    Method::AdvMsFem(BoundaryVariant::Oversampling { ratio })
                } else {
                    return Err(Error::invalid(format!("unknown method {s:?}")));
                }
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MethodOptions {
    /// Coarse linear systems.
    pub coarse: SolverConfig,
    pub local: LocalSolver,
    /// Stabilization parameter for the stabilized methods.
    pub tau_mode: TauMode,
    /// Online solves are repeated until this much CPU time has passed.
    pub online_min_seconds: f64,
    pub splitting: SplittingOptions,
    /// Adv-MsFEM: add fine-scale streamline diffusion (coth parameter of the
    /// fine mesh) to the local problems and to the coarse form.
    pub fine_stabilization: bool,
}

impl Default for MethodOptions {
    fn default() -> Self {
        MethodOptions {
            coarse: SolverConfig::direct(),
            local: LocalSolver::Direct,
            tau_mode: TauMode::Coth,
            online_min_seconds: 0.0,
            splitting: SplittingOptions::default(),
            fine_stabilization: false,
        }
    }
}

impl MethodOptions {
    /// GMRES/CG everywhere, as used for the cost comparison.
    pub fn iterative() -> Self {
        MethodOptions {
            coarse: SolverConfig::gmres().with_tolerance(1e-12),
            local: LocalSolver::iterative(),
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct MethodReport {
    pub method: String,
    pub field: BrokenField,
    pub coefficients: Vec<f64>,
    /// Nonconforming approximation: errors use the broken norm.
    pub broken: bool,
    pub errors: Option<ErrorBundle>,
    pub offline_seconds: f64,
    pub online_seconds: f64,
    pub linear_iterations: usize,
    pub splitting_iterations: Option<usize>,
    pub tau: Option<f64>,
}

struct CoarseSolve {
    x: Vec<f64>,
    offline: f64,
    online: f64,
    iterations: usize,
}

fn coarse_solve(a: &CsrMatrix, rhs: &[f64], cfg: &SolverConfig, repeat: f64) -> Result<CoarseSolve> {
    let (prepared, offline) = timed(|| PreparedSolver::new(a, *cfg));
    let prepared = prepared?;
    let (sol, online) = timed_repeat(repeat, || prepared.solve(rhs, None));
    let sol = sol?;
    Ok(CoarseSolve { x: sol.x, offline, online, iterations: sol.iterations })
}

fn galerkin(
    method: String,
    space: &MultiscaleSpace,
    terms: &[Term<'_>],
    load: &[LoadTerm<'_>],
    opts: &MethodOptions,
    basis_seconds: f64,
    tau: Option<f64>,
) -> Result<MethodReport> {
    let (system, assembly) = timed(|| -> Result<_> { Ok((coarse_assemble(space, space, terms)?, coarse_load(space, load))) });
    let (a, rhs) = system?;
    let s = coarse_solve(&a, &rhs, &opts.coarse, opts.online_min_seconds)?;
    Ok(MethodReport {
        method,
        field: space.field(&s.x),
        coefficients: s.x,
        broken: !space.is_conforming(),
        errors: None,
        offline_seconds: basis_seconds + assembly + s.offline,
        online_seconds: s.online,
        linear_iterations: s.iterations + space.local_iterations,
        splitting_iterations: None,
        tau,
    })
}

/// Coarse P1 solve on the hierarchy's coarse mesh. The diffusion is
/// integrated on the fine cells, so the oscillating coefficient enters with
/// its true values.
pub fn solve_p1(
    problem: &ProblemSpec,
    h: &Arc<MeshHierarchy>,
    stab: P1Stabilization,
    opts: &MethodOptions,
) -> Result<MethodReport> {
    let hc = h.coarse().size();
    let (space, basis) = timed(|| hat_space(h));
    let params = match stab {
        P1Stabilization::None => None,
        P1Stabilization::Supg(mode) => Some(problem.stabilization(mode, problem.alpha(), hc)),
        P1Stabilization::Upwind => Some(problem.stabilization(TauMode::Simple, problem.alpha(), hc)),
    };
    let tau = params.map_or(0.0, |p| p.tau);
    let mut terms = vec![Term::Diffusion(&problem.diffusion), Term::Convection(problem.b)];
    let mut load = vec![LoadTerm::Plain(&problem.f)];
    if tau != 0.0 {
        terms.push(Term::Streamline { b: problem.b, tau });
        load.push(LoadTerm::Streamline { f: &problem.f, b: problem.b, tau });
    }
    galerkin(Method::P1(stab).label(), &space, &terms, &load, opts, basis, params.map(|p| p.tau))
}

pub fn solve_msfem(problem: &ProblemSpec, h: &Arc<MeshHierarchy>, opts: &MethodOptions) -> Result<MethodReport> {
    let (space, basis) =
        timed(|| build_space(h, BasisKind::DiffusionOnly, &problem.diffusion, problem.b, BoundaryVariant::Linear, &opts.local));
    let space = space?;
    let terms = [Term::Diffusion(&problem.diffusion), Term::Convection(problem.b)];
    galerkin(Method::MsFem.label(), &space, &terms, &[LoadTerm::Plain(&problem.f)], opts, basis, None)
}

/// MsFEM with the streamline term `sum_K tau (b . grad u, b . grad v)_K` and
/// its load counterpart, both integrated on the fine representation.
pub fn solve_stab_msfem(problem: &ProblemSpec, h: &Arc<MeshHierarchy>, opts: &MethodOptions) -> Result<MethodReport> {
    let (space, basis) =
        timed(|| build_space(h, BasisKind::DiffusionOnly, &problem.diffusion, problem.b, BoundaryVariant::Linear, &opts.local));
    let space = space?;
    let tau = problem.stabilization(opts.tau_mode, problem.alpha(), h.coarse().size()).tau;
    let terms = [
        Term::Diffusion(&problem.diffusion),
        Term::Convection(problem.b),
        Term::Streamline { b: problem.b, tau },
    ];
    let load = [LoadTerm::Plain(&problem.f), LoadTerm::Streamline { f: &problem.f, b: problem.b, tau }];
    galerkin(Method::StabMsFem.label(), &space, &terms, &load, opts, basis, Some(tau))
}

pub fn solve_adv_msfem(
    problem: &ProblemSpec,
    h: &Arc<MeshHierarchy>,
    variant: BoundaryVariant,
    opts: &MethodOptions,
) -> Result<MethodReport> {
    let (space, basis) = timed(|| adv_space(problem, h, variant, opts));
    let (space, fine_tau) = space?;
    let f = &problem.f;
    let load = match fine_tau {
        Some(tau) => vec![LoadTerm::Plain(f), LoadTerm::Streamline { f, b: problem.b, tau }],
        None => vec![LoadTerm::Plain(f)],
    };
    galerkin(Method::AdvMsFem(variant).label(), &space, &adv_terms(problem, fine_tau), &load, opts, basis, None)
}

fn adv_space(
    problem: &ProblemSpec,
    h: &Arc<MeshHierarchy>,
    variant: BoundaryVariant,
    opts: &MethodOptions,
) -> Result<(MultiscaleSpace, Option<f64>)> {
    let fine_tau = opts.fine_stabilization.then(|| {
        let bn = velocity_norm(problem.b, problem.dim, problem.tau_norm);
        tau_value(TauMode::Coth, problem.alpha(), bn, h.fine().size())
    });
    let space =
        build_space_with(h, BasisKind::AdvectionDiffusion, &problem.diffusion, problem.b, variant, &opts.local, fine_tau)?;
    Ok((space, fine_tau))
}

fn adv_terms(problem: &ProblemSpec, fine_tau: Option<f64>) -> Vec<Term<'_>> {
    let b = problem.b;
    let mut t = vec![Term::Diffusion(&problem.diffusion), Term::Convection(b)];
    if let Some(tau) = fine_tau {
        t.push(Term::Streamline { b, tau });
    }
    t
}

/// Coarse Adv-MsFEM stiffness matrix, assembled from the local solves.
pub fn adv_msfem_matrix(
    problem: &ProblemSpec,
    h: &Arc<MeshHierarchy>,
    variant: BoundaryVariant,
    opts: &MethodOptions,
) -> Result<CsrMatrix> {
    let (space, fine_tau) = adv_space(problem, h, variant, opts)?;
    coarse_assemble(&space, &space, &adv_terms(problem, fine_tau))
}

/// Runs any method with the given options.
pub fn solve_method(
    problem: &ProblemSpec,
    h: &Arc<MeshHierarchy>,
    method: Method,
    opts: &MethodOptions,
) -> Result<MethodReport> {
    match method {
        Method::P1(s) => solve_p1(problem, h, s, opts),
        Method::MsFem => solve_msfem(problem, h, opts),
        Method::StabMsFem => solve_stab_msfem(problem, h, opts),
        Method::AdvMsFem(v) => solve_adv_msfem(problem, h, v, opts),
        Method::Splitting => solve_splitting(problem, h, opts).map(|(r, _)| r),
        Method::SplittingDamped { beta, projection } => {
            solve_splitting_damped(problem, h, beta, projection, opts).map(|(r, _)| r)
        }
    }
}

/// Sub-diagonal, diagonal and super-diagonal of the 1D Adv-MsFEM stiffness
/// matrix with exact local solutions, for constant `alpha` and `b` on a
/// uniform mesh of size `h`.
pub fn adv_msfem_1d_closed_form(alpha: f64, b: f64, h: f64) -> [f64; 3] {
    let q = b * h / alpha;
    if q == 0.0 {
        return [-alpha / h, 2.0 * alpha / h, -alpha / h];
    }
    // s = exp(-|q|), one_minus_s = 1 - s computed without cancellation
    let s = (-q.abs()).exp();
    let one_minus_s = -(-q.abs()).exp_m1();
    let diag = b.abs() * (1.0 + s) / one_minus_s;
    if b > 0.0 {
        [-b / one_minus_s, diag, -b * s / one_minus_s]
    } else {
        [b * s / one_minus_s, diag, b / one_minus_s]
    }
}

/// Exact solution of `-alpha u'' + b u' = f` on `(0, L)` with homogeneous
/// Dirichlet conditions and constant data.
#[derive(Clone, Copy, Debug)]
pub struct ExactSolution1d {
    pub alpha: f64,
    pub b: f64,
    pub f: f64,
    pub length: f64,
}

impl ExactSolution1d {
    pub fn new(alpha: f64, b: f64, f: f64, length: f64) -> Result<Self> {
        if !(alpha > 0.0) || b == 0.0 || !b.is_finite() || !(length > 0.0) {
            return Err(Error::invalid("exact solution needs alpha > 0, b != 0 and L > 0"));
        }
        Ok(ExactSolution1d { alpha, b, f, length })
    }

    /// `(e^{bx/alpha} - 1) / (e^{bL/alpha} - 1)`
    fn ratio(&self, x: f64) -> f64 {
        let k = self.b / self.alpha;
        if k > 0.0 {
            let den = -(-k * self.length).exp_m1();
            ((k * (x - self.length)).exp() - (-k * self.length).exp()) / den
        } else {
            (k * x).exp_m1() / (k * self.length).exp_m1()
        }
    }

    fn ratio_derivative(&self, x: f64) -> f64 {
        let k = self.b / self.alpha;
        if k > 0.0 {
            k * (k * (x - self.length)).exp() / -(-k * self.length).exp_m1()
        } else {
            k * (k * x).exp() / (k * self.length).exp_m1()
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.f / self.b * (x - self.length * self.ratio(x))
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.f / self.b * (1.0 - self.length * self.ratio_derivative(x))
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        let k = self.b / self.alpha;
        -self.f / self.b * self.length * k * self.ratio_derivative(x)
    }
}

pub fn exact_solution_1d(alpha: f64, b: f64, f: f64, length: f64) -> Result<ExactSolution1d> {
    ExactSolution1d::new(alpha, b, f, length)
}

#[derive(Clone, Debug)]
pub struct ReferenceSolution {
    pub nodal: Vec<f64>,
    pub field: BrokenField,
    pub h: f64,
    pub iterations: usize,
    pub seconds: f64,
}

/// Fine P1 Galerkin solve on the hierarchy's fine mesh. Systems up to
/// `direct_limit` unknowns are factorized; larger ones use GMRES with a
/// Cholesky factorization of the symmetric part as preconditioner.
pub fn solve_reference(problem: &ProblemSpec, h: &Arc<MeshHierarchy>, direct_limit: usize) -> Result<ReferenceSolution> {
    let fine = h.fine();
    let hf = fine.size();
    let req = problem.required_fine_size();
    if hf > req * (1.0 + 1e-9) {
        return Err(Error::InfeasibleMesh { required_h: req, unknowns: fine.n_vertices() });
    }
    let (solved, seconds) = timed(|| -> Result<_> {
        let space = P1Space::new(fine);
        let a = assemble(&space, &[Term::Diffusion(&problem.diffusion), Term::Convection(problem.b)])?;
        let rhs = assemble_rhs(&space, &[LoadTerm::Plain(&problem.f)]);
        let cfg = if space.n_dofs() <= direct_limit {
            SolverConfig::direct()
        } else {
            SolverConfig::gmres()
                .with_tolerance(1e-12)
                .with_preconditioner(PreconditionerKind::SymmetricCholesky)
                .with_max_iter(2000)
        };
        let sol = PreparedSolver::new(&a, cfg)?.solve(&rhs, None)?;
        Ok((space.expand(&sol.x), sol.iterations))
    });
    let (nodal, iterations) = solved?;
    let field = BrokenField::from_nodal(h, &nodal)?;
    Ok(ReferenceSolution { nodal, field, h: hf, iterations, seconds })
}

// ---------------------------------------------------------------- splitting

/// Which source enters the stabilization load of the coarse splitting step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplittingSource {
    /// `f + b . grad(u_even - u_odd)`: the whole right-hand side.
    Full,
    /// `f` alone.
    Bare,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplittingOptions {
    pub tolerance: f64,
    pub max_iter: usize,
    pub source: SplittingSource,
    /// Stop as diverged once the residual exceeds this multiple of the first.
    pub divergence_factor: f64,
    /// Keep every iterate pair in the returned state.
    pub record_trajectory: bool,
}

impl Default for SplittingOptions {
    fn default() -> Self {
        SplittingOptions {
            tolerance: 1e-9,
            max_iter: 100_000,
            source: SplittingSource::Full,
            divergence_factor: 1e12,
            record_trajectory: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundFormula {
    /// Contraction estimate of the continuous damped scheme.
    Continuous,
    /// Discrete variant with the extra `H/2` in the Poincaré factor.
    Discrete,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BetaChoice {
    Auto(BoundFormula),
    Value(f64),
}

#[derive(Clone, Debug, Default)]
pub struct SplittingState {
    /// Coarse P1 coefficients of the last even iterate.
    pub u_even: Vec<f64>,
    /// Multiscale coefficients of the last odd iterate.
    pub u_odd: Vec<f64>,
    /// Completed passes (one even and one odd solve each).
    pub iteration: usize,
    pub residuals: Vec<f64>,
    pub beta: f64,
    pub projection: bool,
    /// Contraction estimate when the damping came from the optimizer.
    pub rho: Option<f64>,
    /// Energy norms `|u_{2n+2} - u_{2n}|` of consecutive even differences.
    pub even_steps: Vec<f64>,
    pub trajectory: Vec<(Vec<f64>, Vec<f64>)>,
    pub converged: bool,
}

impl SplittingState {
    /// Ratios of consecutive even-difference energies.
    pub fn contraction_ratios(&self) -> Vec<f64> {
        self.even_steps.windows(2).filter(|w| w[0] > 0.0).map(|w| w[1] / w[0]).collect()
    }
}

/// Matrices of the discrete splitting iterations on one hierarchy.
///
/// Notation: `phi` are the coarse hat functions (even iterates), `psi` the
/// diffusion-only multiscale functions (odd iterates).
pub struct SplittingSystem {
    pub hats: MultiscaleSpace,
    pub space: MultiscaleSpace,
    /// `(grad phi_j, grad phi_i)`
    pub l0: CsrMatrix,
    /// `alpha_spl L0 + (b . grad phi_j, phi_i) + stabilization`
    pub m0: CsrMatrix,
    /// Transport plus stabilization acting on the even iterate.
    pub m2: CsrMatrix,
    /// Same acting on the odd iterate, integrated on the fine mesh.
    pub m3: CsrMatrix,
    pub f0: Vec<f64>,
    /// `(grad phi_j, grad psi_i)`, rows indexed by `psi`.
    pub lx: CsrMatrix,
    pub lx_t: CsrMatrix,
    /// `(A grad psi_j, grad psi_i)`
    pub ams: CsrMatrix,
    /// `(grad psi_j, grad psi_i)`
    pub lms: CsrMatrix,
    pub alpha_spl: f64,
    pub tau: f64,
    pub basis_seconds: f64,
    pub assembly_seconds: f64,
}

impl SplittingSystem {
    pub fn new(problem: &ProblemSpec, h: &Arc<MeshHierarchy>, opts: &MethodOptions) -> Result<Self> {
        let alpha_spl = problem.alpha_spl;
        if !(alpha_spl > 0.0) {
            return Err(Error::invalid("alpha_spl must be positive"));
        }
        let (space, basis_seconds) =
            timed(|| build_space(h, BasisKind::DiffusionOnly, &problem.diffusion, problem.b, BoundaryVariant::Linear, &opts.local));
        let space = space?;
        let hats = hat_space(h);
        let b = problem.b;
        let tau = problem.stabilization(opts.tau_mode, alpha_spl, h.coarse().size()).tau;
        let (sys, assembly_seconds) = timed(|| -> Result<_> {
            let p1 = P1Space::new(h.coarse());
            let l0 = assemble(&p1, &[Term::Laplace(1.0)])?;
            let conv = assemble(&p1, &[Term::Convection(b)])?;
            let stab = assemble(&p1, &[Term::Streamline { b, tau }])?;
            let m0 = l0.scaled(alpha_spl).add(&conv)?.add(&stab)?;
            let (m2, m3) = match opts.splitting.source {
                SplittingSource::Full => {
                    (conv.add(&stab)?, coarse_assemble(&hats, &space, &[Term::Convection(b), Term::Streamline { b, tau }])?)
                }
                SplittingSource::Bare => (conv, coarse_assemble(&hats, &space, &[Term::Convection(b)])?),
            };
            let f0 = coarse_load(&hats, &[LoadTerm::Plain(&problem.f), LoadTerm::Streamline { f: &problem.f, b, tau }]);
            let lx = coarse_assemble(&space, &hats, &[Term::Laplace(1.0)])?;
            let lx_t = lx.transpose();
            let ams = coarse_assemble(&space, &space, &[Term::Diffusion(&problem.diffusion)])?;
            let lms = coarse_assemble(&space, &space, &[Term::Laplace(1.0)])?;
            Ok((l0, m0, m2, m3, f0, lx, lx_t, ams, lms))
        });
        let (l0, m0, m2, m3, f0, lx, lx_t, ams, lms) = sys?;
        Ok(SplittingSystem {
            hats,
            space,
            l0,
            m0,
            m2,
            m3,
            f0,
            lx,
            lx_t,
            ams,
            lms,
            alpha_spl,
            tau,
            basis_seconds,
            assembly_seconds,
        })
    }

    fn energy(&self, d: &[f64]) -> f64 {
        dot(d, &self.l0.mul_vec(d)).max(0.0).sqrt()
    }

    /// Coefficients `p` of the projection of the even iterate onto the
    /// multiscale space.
    fn project(&self, u_even: &[f64], lms: &PreparedSolver) -> Result<Vec<f64>> {
        lms.solve(&self.lx.mul_vec(u_even), None).map(|s| s.x)
    }

    /// Right-hand side of the even step (damped form; `beta = 0` gives the
    /// plain one).
    fn even_rhs(&self, u_even: &[f64], u_odd: &[f64], beta: f64, proj: Option<&PreparedSolver>) -> Result<Vec<f64>> {
        let mut r = self.f0.clone();
        self.m3.mul_vec_acc(-1.0, u_odd, &mut r);
        if beta != 0.0 {
            self.lx_t.mul_vec_acc(beta, u_odd, &mut r);
        }
        match proj {
            Some(p) => {
                let c = self.project(u_even, p)?;
                self.m3.mul_vec_acc(1.0, &c, &mut r);
            }
            None => self.m2.mul_vec_acc(1.0, u_even, &mut r),
        }
        Ok(r)
    }

    /// Stopping residual `|M0' u_e - rhs(u_e, u_o)|` for a pair of iterates.
    pub fn residual(&self, u_even: &[f64], u_odd: &[f64], beta: f64) -> f64 {
        let mut r = self.m0.mul_vec(u_even);
        if beta != 0.0 {
            self.l0.mul_vec_acc(beta, u_even, &mut r);
        }
        let rhs = self.even_rhs(u_even, u_odd, beta, None).expect("no projection solve");
        r.iter_mut().zip(&rhs).for_each(|(x, y)| *x -= y);
        norm2(&r)
    }

    /// Residuals of the limit system: the even relation at the fixed point
    /// and the odd relation `A_ms u_o = alpha_spl L_x u_e`.
    pub fn limit_residual(&self, u_even: &[f64], u_odd: &[f64]) -> (f64, f64) {
        let mut r2 = self.ams.mul_vec(u_odd);
        self.lx.mul_vec_acc(-self.alpha_spl, u_even, &mut r2);
        (self.residual(u_even, u_odd, 0.0), norm2(&r2))
    }

    /// Runs the iteration from `u_0` (coarse coefficients, zero if `None`);
    /// `u_1` is obtained from `u_0` by the odd step.
    pub fn iterate(
        &self,
        beta: f64,
        projection: bool,
        initial_even: Option<&[f64]>,
        coarse: &SolverConfig,
        opts: &SplittingOptions,
    ) -> Result<(SplittingState, usize, f64)> {
        if !(beta >= 0.0) {
            return Err(Error::invalid(format!("damping must be nonnegative, got {beta}")));
        }
        let even_lhs = if beta != 0.0 { self.m0.lin_comb(1.0, &self.l0, beta)? } else { self.m0.clone() };
        let odd_lhs = if beta != 0.0 { self.ams.lin_comb(1.0, &self.lms, beta)? } else { self.ams.clone() };
        let (prep, factor_seconds) = timed(|| -> Result<_> {
            let odd_cfg = match coarse.backend {
                Backend::Gmres => SolverConfig { backend: Backend::Cg, tolerance: coarse.tolerance * coarse.tolerance, ..*coarse },
                _ => *coarse,
            };
            let even = PreparedSolver::new(&even_lhs, *coarse)?;
            let odd = PreparedSolver::new(&odd_lhs, odd_cfg)?;
            let proj = if projection { Some(PreparedSolver::new(&self.lms, odd_cfg)?) } else { None };
            Ok((even, odd, proj))
        });
        let (even, odd, proj) = prep?;
        let n0 = self.m0.nrows();
        let n1 = self.ams.nrows();
        let mut state = SplittingState { beta, projection, ..Default::default() };
        let mut u_e = match initial_even {
            Some(u) if u.len() != n0 => {
                return Err(Error::DimensionMismatch(format!("initial iterate has {} entries, expected {n0}", u.len())))
            }
            Some(u) => u.to_vec(),
            None => vec![0.0; n0],
        };
        let mut iterations = 0;
        let odd_scale = beta + self.alpha_spl;
        let mut u_o = if initial_even.is_some() {
            let s = odd.solve(&self.lx.mul_vec(&u_e).iter().map(|x| odd_scale * x).collect::<Vec<_>>(), None)?;
            iterations += s.iterations;
            s.x
        } else {
            vec![0.0; n1]
        };
        if opts.record_trajectory {
            state.trajectory.push((u_e.clone(), u_o.clone()));
        }
        let mut first = None;
        for n in 1..=opts.max_iter {
            let rhs = self.even_rhs(&u_e, &u_o, beta, proj.as_ref())?;
            let s = even.solve(&rhs, Some(&u_e))?;
            iterations += s.iterations;
            let new_e = s.x;
            let mut rhs_o = self.lx.mul_vec(&new_e);
            rhs_o.iter_mut().for_each(|x| *x *= odd_scale);
            let s = odd.solve(&rhs_o, Some(&u_o))?;
            iterations += s.iterations;
            let new_o = s.x;
            let d: Vec<f64> = new_e.iter().zip(&u_e).map(|(a, b)| a - b).collect();
            state.even_steps.push(self.energy(&d));
            u_e = new_e;
            u_o = new_o;
            let mut r = even_lhs.mul_vec(&u_e);
            let rhs = self.even_rhs(&u_e, &u_o, beta, proj.as_ref())?;
            r.iter_mut().zip(&rhs).for_each(|(x, y)| *x -= y);
            let res = norm2(&r);
            state.residuals.push(res);
            state.iteration = n;
            if opts.record_trajectory {
                state.trajectory.push((u_e.clone(), u_o.clone()));
            }
            let r0 = *first.get_or_insert(res);
            if res < opts.tolerance {
                state.converged = true;
                break;
            }
            if !res.is_finite() || (r0 > 0.0 && res > opts.divergence_factor * r0) {
                return Err(Error::SplittingDiverged { iterations: n, last: res, residuals: state.residuals });
            }
        }
        state.u_even = u_e;
        state.u_odd = u_o;
        if !state.converged {
            let last = state.residuals.last().copied().unwrap_or(f64::NAN);
            return Err(Error::SplittingDiverged { iterations: state.iteration, last, residuals: state.residuals });
        }
        Ok((state, iterations, factor_seconds))
    }

    fn report(
        &self,
        label: String,
        state: &SplittingState,
        iterations: usize,
        factor_seconds: f64,
        online: f64,
    ) -> MethodReport {
        MethodReport {
            method: label,
            field: self.space.field(&state.u_odd),
            coefficients: state.u_odd.clone(),
            broken: false,
            errors: None,
            offline_seconds: self.basis_seconds + self.assembly_seconds + factor_seconds,
            online_seconds: online,
            linear_iterations: iterations + self.space.local_iterations,
            splitting_iterations: Some(state.iteration),
            tau: Some(self.tau),
        }
    }
}

fn run_timed(
    sys: &SplittingSystem,
    beta: f64,
    projection: bool,
    opts: &MethodOptions,
) -> Result<(SplittingState, usize, f64, f64)> {
    // every pass refactors, so the factorization time of each repeat is
    // moved to the offline side
    let t0 = cpu_seconds();
    let (state, iterations, mut factor) = sys.iterate(beta, projection, None, &opts.coarse, &opts.splitting)?;
    let mut calls = 1usize;
    while cpu_seconds() - t0 < opts.online_min_seconds {
        factor += std::hint::black_box(sys.iterate(beta, projection, None, &opts.coarse, &opts.splitting)?).2;
        calls += 1;
    }
    let n = calls as f64;
    Ok((state, iterations, factor / n, ((cpu_seconds() - t0 - factor) / n).max(0.0)))
}

/// Naive splitting: alternate a coarse stabilized advection-diffusion solve
/// with diffusion `alpha_spl` and a multiscale diffusion solve.
pub fn solve_splitting(
    problem: &ProblemSpec,
    h: &Arc<MeshHierarchy>,
    opts: &MethodOptions,
) -> Result<(MethodReport, SplittingState)> {
    let sys = SplittingSystem::new(problem, h, opts)?;
    let (state, it, factor, online) = run_timed(&sys, 0.0, false, opts)?;
    Ok((sys.report(Method::Splitting.label(), &state, it, factor, online), state))
}

/// Parameters of the damping optimizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaParams {
    pub c_omega: f64,
    pub b_norm: f64,
    /// `sup |A - alpha_spl|`
    pub deviation: f64,
    pub alpha1: f64,
    pub alpha_spl: f64,
    pub h: f64,
    pub formula: BoundFormula,
}

impl BetaParams {
    pub fn from_problem(problem: &ProblemSpec, h: f64, formula: BoundFormula) -> Self {
        BetaParams {
            c_omega: problem.c_omega,
            b_norm: problem.b_sup(),
            deviation: problem.diffusion.deviation_from(problem.alpha_spl),
            alpha1: problem.alpha1(),
            alpha_spl: problem.alpha_spl,
            h,
            formula,
        }
    }

    fn poincare(&self) -> f64 {
        match self.formula {
            BoundFormula::Continuous => self.c_omega * self.b_norm,
            BoundFormula::Discrete => (self.c_omega + self.h / 2.0) * self.b_norm,
        }
    }

    /// Contraction estimate for damping `x`.
    pub fn rho(&self, x: f64) -> f64 {
        let r = self.poincare();
        r * self.deviation / ((x + self.alpha_spl) * (x + self.alpha1)) + x / (x + self.alpha1)
    }
}

/// Damping minimizing the contraction estimate over `[0, inf)`, from the
/// stationarity condition `a1 (x + a)^2 = r c (2x + a + a1)`.
pub fn beta_optimize(p: &BetaParams) -> Result<(f64, f64)> {
    if !(p.alpha1 > 0.0 && p.alpha_spl > 0.0 && p.c_omega > 0.0 && p.b_norm >= 0.0 && p.deviation >= 0.0 && p.h >= 0.0) {
        return Err(Error::invalid(format!("invalid damping parameters {p:?}")));
    }
    let (a, a1) = (p.alpha_spl, p.alpha1);
    let rc = p.poincare() * p.deviation;
    // a1 x^2 + 2 (a a1 - rc) x + a1 a^2 - rc (a + a1) = 0
    let qa = a1;
    let qb = 2.0 * (a * a1 - rc);
    let qc = a1 * a * a - rc * (a + a1);
    let mut best = (0.0, p.rho(0.0));
    let disc = qb * qb - 4.0 * qa * qc;
    if disc >= 0.0 {
        let sq = disc.sqrt();
        // numerically stable pair of roots
        let t = -0.5 * (qb + qb.signum() * sq);
        let roots = [t / qa, if t != 0.0 { qc / t } else { f64::NAN }];
        for x in roots {
            if x.is_finite() && x > 0.0 {
                let g = p.rho(x);
                if g < best.1 {
                    best = (x, g);
                }
            }
        }
    }
    Ok(best)
}

/// Golden-section minimization of the same estimate, as an independent
/// check of [`beta_optimize`].
pub fn beta_golden(p: &BetaParams, tol: f64) -> (f64, f64) {
    let rc = p.poincare() * p.deviation;
    let mut lo = 0.0;
    let mut hi = 4.0 * (rc / p.alpha1 + p.alpha_spl + p.alpha1) + 1.0;
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut g1, mut g2) = (p.rho(x1), p.rho(x2));
    while hi - lo > tol {
        if g1 <= g2 {
            hi = x2;
            x2 = x1;
            g2 = g1;
            x1 = hi - phi * (hi - lo);
            g1 = p.rho(x1);
        } else {
            lo = x1;
            x1 = x2;
            g1 = g2;
            x2 = lo + phi * (hi - lo);
            g2 = p.rho(x2);
        }
    }
    let x = 0.5 * (lo + hi);
    if p.rho(0.0) <= p.rho(x) {
        (0.0, p.rho(0.0))
    } else {
        (x, p.rho(x))
    }
}

/// Damped splitting: both steps get the extra diffusion `beta`, and the
/// lagged term optionally goes through the projection onto the multiscale
/// space.
pub fn solve_splitting_damped(
    problem: &ProblemSpec,
    h: &Arc<MeshHierarchy>,
    beta: BetaChoice,
    projection: bool,
    opts: &MethodOptions,
) -> Result<(MethodReport, SplittingState)> {
    let (beta, rho) = match beta {
        BetaChoice::Value(b) => (b, None),
        BetaChoice::Auto(formula) => {
            let (b, r) = beta_optimize(&BetaParams::from_problem(problem, h.coarse().size(), formula))?;
            (b, Some(r))
        }
    };
    let sys = SplittingSystem::new(problem, h, opts)?;
    let (mut state, it, factor, online) = run_timed(&sys, beta, projection, opts)?;
    state.rho = rho;
    let label = Method::SplittingDamped { beta: BetaChoice::Value(beta), projection }.label();
    Ok((sys.report(label, &state, it, factor, online), state))
}

/// `P_V v` for the multiscale space of a splitting system, exposed for
/// property checks.
pub fn project_field(v: &BrokenField, space: &MultiscaleSpace) -> Result<Vec<f64>> {
    project_onto_space(v, space, &ProjectionForm::Laplace(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(alpha: f64, b: f64, n: usize, r: usize) -> (ProblemSpec, Arc<MeshHierarchy>) {
        let p = ProblemSpec::single_scale_1d(alpha, b).unwrap();
        let h = hierarchy(&p, n, r).unwrap();
        (p, h)
    }

    #[test]
    fn reference_parameters() {
        let p = ProblemSpec::reference_test();
        assert_eq!(p.peclet(), 64.0);
        assert!((p.layer_width().unwrap() - 0.064982).abs() < 1e-6);
        assert_eq!(p.required_fine_size(), 1.0 / 1024.0);
        let h = auto_hierarchy(&ProblemSpec::oscillating_2d(1.0 / 32.0, 0.5, 1.0 / 16.0), 8, 1 << 20).unwrap();
        assert_eq!(h.fine().subdivisions(), 256);
        match auto_hierarchy(&p, 16, 1000) {
            Err(Error::InfeasibleMesh { required_h, unknowns }) => {
                assert_eq!(required_h, 1.0 / 1024.0);
                assert_eq!(unknowns, 1025 * 1025);
            }
            other => panic!("expected infeasible mesh, got {other:?}"),
        }
    }

    #[test]
    fn closed_form_reference_values() {
        let [l, d, u] = adv_msfem_1d_closed_form(1.0 / 256.0, 1.0, 1.0 / 16.0);
        let s = (-16.0f64).exp();
        assert!((d - (1.0 + s) / (1.0 - s)).abs() < 1e-15);
        assert!((l + 1.0 + s).abs() < 1e-13);
        assert!((u + 1.1254e-7).abs() < 1e-10);
        assert!((l + d + u).abs() < 1e-14);
        // vanishing advection recovers the Laplacian stencil
        let [l, d, u] = adv_msfem_1d_closed_form(0.5, 1e-9, 0.25);
        assert!((d - 4.0).abs() < 1e-6 && (l + 2.0).abs() < 1e-6 && (u + 2.0).abs() < 1e-6);
        let big = adv_msfem_1d_closed_form(1e-6, -3.0, 0.5);
        assert!(big.iter().all(|x| x.is_finite()));
        assert!((big[2] + 3.0).abs() < 1e-12 && big[0].abs() < 1e-300);
    }

    #[test]
    fn closed_form_equals_coth_supg() {
        for &(alpha, b, h) in &[(0.01, 1.0, 0.1), (0.2, -2.0, 0.25), (1.0 / 256.0, 1.0, 1.0 / 16.0)] {
            let tau = crate::fem::tau_value(TauMode::Coth, alpha, f64::abs(b), h);
            let off = |s: f64| -alpha / h + s * b / 2.0 - tau * b * b / h;
            let supg = [off(-1.0), 2.0 * alpha / h + 2.0 * tau * b * b / h, off(1.0)];
            let cf = adv_msfem_1d_closed_form(alpha, b, h);
            for i in 0..3 {
                assert!((cf[i] - supg[i]).abs() <= 1e-12 * cf[1].abs(), "{i}: {} vs {}", cf[i], supg[i]);
            }
        }
    }

    #[test]
    fn exact_solution_properties() {
        let u = exact_solution_1d(1.0 / 256.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(u.value(0.0), 0.0);
        assert!(u.value(1.0).abs() < 1e-15);
        assert!((u.value(0.5) - 0.5).abs() < 1e-12);
        for &(alpha, b, len) in &[(0.05, 1.0, 1.0), (0.1, -2.0, 1.5), (1.0 / 256.0, 1.0, 1.0)] {
            let u = exact_solution_1d(alpha, b, 1.0, len).unwrap();
            assert!(u.value(len).abs() < 1e-12);
            for i in 0..100 {
                let x = len * (i as f64 + 0.5) / 100.0;
                let r = -alpha * u.second_derivative(x) + b * u.derivative(x) - 1.0;
                assert!(r.abs() < 1e-9, "residual {r} at {x}");
            }
        }
    }

    #[test]
    fn zero_source_gives_zero_solution() {
        let (mut p, h) = one_d(0.01, 1.0, 8, 4);
        p.f = Source::Constant(0.0);
        let o = MethodOptions::default();
        for m in [
            Method::P1(P1Stabilization::None),
            Method::P1(P1Stabilization::Supg(TauMode::Coth)),
            Method::MsFem,
            Method::StabMsFem,
            Method::AdvMsFem(BoundaryVariant::Linear),
        ] {
            let r = solve_method(&p, &h, m, &o).unwrap();
            assert_eq!(r.field.max_abs(), 0.0, "{}", r.method);
        }
        let r = solve_reference(&p, &hierarchy(&p, 8, 64).unwrap(), 1 << 20).unwrap();
        assert_eq!(r.nodal.iter().fold(0.0f64, |m, x| m.max(x.abs())), 0.0);
    }

    #[test]
    fn constant_coefficient_methods_collapse_to_p1() {
        let p = ProblemSpec::new(Dim::Two, 1.0, Diffusion::Constant(0.02), [1.0, 0.5], Source::Constant(1.0)).unwrap();
        let h = hierarchy(&p, 4, 4).unwrap();
        let o = MethodOptions::default();
        let pairs = [
            (Method::MsFem, Method::P1(P1Stabilization::None)),
            (Method::StabMsFem, Method::P1(P1Stabilization::Supg(TauMode::Coth))),
        ];
        for (ms, p1) in pairs {
            let a = solve_method(&p, &h, ms, &o).unwrap();
            let b = solve_method(&p, &h, p1, &o).unwrap();
            for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_tau_stab_msfem_is_msfem() {
        let p = ProblemSpec::new(Dim::Two, 1.0, Diffusion::oscillating(0.05, 0.5, 0.1).unwrap(), [0.0, 0.0], Source::Constant(1.0))
            .unwrap();
        let h = hierarchy(&p, 4, 6).unwrap();
        let o = MethodOptions::default();
        let a = solve_stab_msfem(&p, &h, &o).unwrap();
        let b = solve_msfem(&p, &h, &o).unwrap();
        assert_eq!(a.tau, Some(0.0));
        assert_eq!(a.coefficients, b.coefficients);
        // no advection: the advective basis is the diffusive one
        let c = solve_adv_msfem(&p, &h, BoundaryVariant::Linear, &o).unwrap();
        for (x, y) in c.coefficients.iter().zip(&b.coefficients) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn adv_msfem_1d_matrix_approaches_closed_form() {
        let (alpha, b, n) = (0.02, 1.0, 4);
        let p = ProblemSpec::single_scale_1d(alpha, b).unwrap();
        let mut errs = Vec::new();
        for r in [64, 256] {
            let h = hierarchy(&p, n, r).unwrap();
            let s = build_space(&h, BasisKind::AdvectionDiffusion, &p.diffusion, p.b, BoundaryVariant::Linear, &LocalSolver::Direct)
                .unwrap();
            let m = coarse_assemble(&s, &s, &[Term::Diffusion(&p.diffusion), Term::Convection(p.b)]).unwrap();
            let cf = adv_msfem_1d_closed_form(alpha, b, 1.0 / n as f64);
            let e = (m.get(1, 0) - cf[0]).abs().max((m.get(1, 1) - cf[1]).abs()).max((m.get(1, 2) - cf[2]).abs());
            errs.push(e / cf[1]);
        }
        // second order in the fine mesh size
        assert!(errs[1] < errs[0] / 12.0, "{errs:?}");
    }

    #[test]
    fn fine_stabilized_adv_msfem_is_exact_in_1d() {
        let opts = MethodOptions { fine_stabilization: true, ..Default::default() };
        for (alpha, b, n, r) in [(0.02, 1.0, 4, 8), (1e-3, -2.0, 3, 5), (0.1, 0.3, 5, 2)] {
            let p = ProblemSpec::new(Dim::One, n as f64 / 8.0, Diffusion::Constant(alpha), [b, 0.0], Source::Constant(1.0))
                .unwrap();
            let h = hierarchy(&p, n, r).unwrap();
            let m = adv_msfem_matrix(&p, &h, BoundaryVariant::Linear, &opts).unwrap();
            let cf = adv_msfem_1d_closed_form(alpha, b, 1.0 / 8.0);
            for i in 0..m.nrows() {
                for (j, c) in [(i.wrapping_sub(1), cf[0]), (i, cf[1]), (i + 1, cf[2])] {
                    if j < m.ncols() {
                        assert!((m.get(i, j) - c).abs() <= 1e-10 * cf[1], "{alpha} {b}: ({i},{j}) {} vs {c}", m.get(i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn splitting_with_matched_diffusion_stops_after_one_pass() {
        let p = ProblemSpec::new(Dim::Two, 1.0, Diffusion::Constant(0.05), [1.0, 1.0], Source::Constant(1.0)).unwrap();
        let h = hierarchy(&p, 4, 3).unwrap();
        let (r, s) = solve_splitting(&p, &h, &MethodOptions::default()).unwrap();
        assert_eq!(s.iteration, 1);
        assert!(s.residuals[0] < 1e-13);
        assert_eq!(r.splitting_iterations, Some(1));
    }

    #[test]
    fn splitting_converges_to_limit_system() {
        let p = ProblemSpec::new(Dim::Two, 1.0, Diffusion::oscillating(0.1, 0.3, 0.1).unwrap(), [0.5, 0.5], Source::Constant(1.0))
            .unwrap();
        let h = hierarchy(&p, 4, 6).unwrap();
        let o = MethodOptions::default();
        let sys = SplittingSystem::new(&p, &h, &o).unwrap();
        let (s, _, _) = sys.iterate(0.0, false, None, &o.coarse, &o.splitting).unwrap();
        assert!(s.converged);
        let (r1, r2) = sys.limit_residual(&s.u_even, &s.u_odd);
        assert!(r1 <= 10.0 * o.splitting.tolerance && r2 < 1e-9, "{r1} {r2}");
        // the limit solves the multiscale Galerkin problem
        let ms = solve_msfem(&p, &h, &o).unwrap();
        let diff = ms.field.lin_comb(1.0, &sys.space.field(&s.u_odd), -1.0).max_abs();
        assert!(diff < 0.1 * ms.field.max_abs(), "{diff}");
    }

    #[test]
    fn damped_with_zero_beta_matches_naive() {
        let p = ProblemSpec::new(Dim::Two, 1.0, Diffusion::oscillating(0.1, 0.3, 0.1).unwrap(), [0.5, 0.5], Source::Constant(1.0))
            .unwrap();
        let h = hierarchy(&p, 4, 4).unwrap();
        let mut o = MethodOptions::default();
        o.splitting.record_trajectory = true;
        let (_, naive) = solve_splitting(&p, &h, &o).unwrap();
        let (_, damped) = solve_splitting_damped(&p, &h, BetaChoice::Value(0.0), false, &o).unwrap();
        assert_eq!(naive.trajectory.len(), damped.trajectory.len());
        for (a, b) in naive.trajectory.iter().zip(&damped.trajectory) {
            for (x, y) in a.0.iter().zip(&b.0).chain(a.1.iter().zip(&b.1)) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn damped_projection_converges() {
        let p = ProblemSpec::new(Dim::Two, 1.0, Diffusion::oscillating(0.1, 0.5, 0.1).unwrap(), [0.5, 0.5], Source::Constant(1.0))
            .unwrap();
        let h = hierarchy(&p, 4, 4).unwrap();
        let o = MethodOptions::default();
        let (_, s) = solve_splitting_damped(&p, &h, BetaChoice::Value(0.05), true, &o).unwrap();
        assert!(s.converged && s.projection);
    }

    #[test]
    fn beta_reference_values() {
        let p = ProblemSpec::reference_test();
        let params = BetaParams::from_problem(&p, 1.0 / 16.0, BoundFormula::Continuous);
        let (b, r) = beta_optimize(&params).unwrap();
        // closed form of the stationarity root for these parameters
        let (a, c): (f64, f64) = (1.0 / 128.0, 1.0 / 256.0);
        let expect = (1.0 - a) + ((1.0 - a) * (1.0 - a) - a * a + a + c).sqrt();
        assert!((b - expect).abs() < 1e-12);
        assert!((b - 1.9902).abs() < 1e-4 && (r - 0.99902).abs() < 1e-5);
        let (bg, rg) = beta_golden(&params, 1e-10);
        assert!((bg - b).abs() < 1e-6 && (rg - r).abs() < 1e-12);
        let l4 = BetaParams { formula: BoundFormula::Discrete, ..params };
        let (b4, r4) = beta_optimize(&l4).unwrap();
        assert!((b4 - 2.053).abs() < 1e-3 && (r4 - 0.99905).abs() < 1e-5, "{b4} {r4}");
        let matched = BetaParams { deviation: 0.0, ..params };
        assert_eq!(beta_optimize(&matched).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn reference_solver_matches_exact_1d() {
        let p = ProblemSpec::single_scale_1d(0.05, 1.0).unwrap();
        let u = exact_solution_1d(0.05, 1.0, 1.0, 1.0).unwrap();
        let mut errs = Vec::new();
        for r in [16, 32] {
            let h = hierarchy(&p, 8, r).unwrap();
            let s = solve_reference(&p, &h, 1 << 20).unwrap();
            let fine = h.fine();
            let e: f64 = (0..fine.n_vertices()).map(|v| (s.nodal[v] - u.value(fine.vertex(v)[0])).powi(2)).sum::<f64>()
                * fine.size();
            errs.push(e.sqrt());
        }
        assert!(errs[1] < errs[0] / 3.0, "{errs:?}");
    }

    #[test]
    fn reference_rejects_coarse_fine_mesh() {
        let p = ProblemSpec::reference_test();
        let h = hierarchy(&p, 4, 2).unwrap();
        assert!(matches!(solve_reference(&p, &h, 1000), Err(Error::InfeasibleMesh { .. })));
    }

    #[test]
    fn iterative_coarse_backend_agrees() {
        let p = ProblemSpec::oscillating_2d(1.0 / 16.0, 0.5, 1.0 / 8.0);
        let h = hierarchy(&p, 4, 8).unwrap();
        let d = solve_stab_msfem(&p, &h, &MethodOptions::default()).unwrap();
        let i = solve_stab_msfem(&p, &h, &MethodOptions::iterative()).unwrap();
        for (x, y) in d.coefficients.iter().zip(&i.coefficients) {
            assert!((x - y).abs() < 1e-8);
        }
        let (_, a) = solve_splitting(&p, &h, &MethodOptions::default()).unwrap();
        let (_, b) = solve_splitting(&p, &h, &MethodOptions::iterative()).unwrap();
        assert!((a.iteration as i64 - b.iteration as i64).abs() <= 1);
    }

    #[test]
    fn method_labels_round_trip() {
        for m in [
            Method::P1(P1Stabilization::None),
            Method::P1(P1Stabilization::Supg(TauMode::Coth)),
            Method::P1(P1Stabilization::Upwind),
            Method::MsFem,
            Method::StabMsFem,
            Method::AdvMsFem(BoundaryVariant::Linear),
            Method::AdvMsFem(BoundaryVariant::CrouzeixRaviart),
            Method::Splitting,
        ] {
            assert_eq!(Method::parse(&m.label()).unwrap(), m);
        }
        assert!(Method::parse("nope").is_err());
    }

    #[test]
    fn galerkin_identity_on_test_functions() {
        let p = ProblemSpec::oscillating_2d(1.0 / 16.0, 0.5, 1.0 / 8.0);
        let h = hierarchy(&p, 4, 6).unwrap();
        let o = MethodOptions::default();
        let r = solve_stab_msfem(&p, &h, &o).unwrap();
        let space = build_space(&h, BasisKind::DiffusionOnly, &p.diffusion, p.b, BoundaryVariant::Linear, &LocalSolver::Direct).unwrap();
        let tau = r.tau.unwrap();
        let terms = [Term::Diffusion(&p.diffusion), Term::Convection(p.b), Term::Streamline { b: p.b, tau }];
        let lhs = crate::basis::pairing(&space, &r.field, &terms).unwrap();
        let rhs = coarse_load(&space, &[LoadTerm::Plain(&p.f), LoadTerm::Streamline { f: &p.f, b: p.b, tau }]);
        for k in 0..5 {
            let v: Vec<f64> = (0..space.n_dofs()).map(|i| ((i * 7 + k * 3) as f64).sin()).collect();
            assert!((dot(&lhs, &v) - dot(&rhs, &v)).abs() < 1e-9);
        }
    }
}
