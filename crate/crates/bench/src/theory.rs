//! Checks of the analytic results on small 1D and 2D configurations:
//! closed-form matrices, the splitting theory, the a priori bounds, the
//! SUPG rate and the randomized invariants.

use std::f64::consts::PI;
use std::sync::Arc;

use msfem_core::analysis::{
    check_splitting_conditions, compute_errors, divergence_growth, estimate_rate, exact_errors_1d, h1_seminorm,
    h1_seminorm_distance, verify_error_bounds, BoundParams, BoundSample, ErrorBound,
};
use msfem_core::basis::{build_space, project_onto_space, BasisKind, BoundaryVariant, BrokenField, LocalSolver, ProjectionForm};
use msfem_core::fem::{assemble, assemble_convection, assemble_diffusion, tau_value, Diffusion, P1Space, Source, TauMode, Term};
use msfem_core::linalg::{dot, CsrMatrix, SolverConfig};
use msfem_core::mesh::{build_structured, layer_mask, refine, Dim, MeshHierarchy};
use msfem_core::solvers::{
    adv_msfem_1d_closed_form, adv_msfem_matrix, auto_hierarchy, beta_golden, beta_optimize, exact_solution_1d,
    hierarchy, solve_method, solve_reference, solve_splitting, solve_splitting_damped, BetaChoice, BetaParams,
    BoundFormula, Method, MethodOptions, P1Stabilization, ProblemSpec, SplittingOptions, SplittingSystem,
};
use msfem_core::{Error as CoreError, Result as CoreResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::run::{run_csv, run_with_reference, strip_timing, fine_constraints_met, reference_for};
use crate::Check;

fn failed(name: &str, e: impl std::fmt::Display) -> Check {
    Check::new(name, false, format!("error: {e}"))
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn rel_gap(a: &CsrMatrix, b: &CsrMatrix) -> f64 {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return f64::INFINITY;
    }
    let scale = a.max_abs().max(b.max_abs());
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in i.saturating_sub(1)..(i + 2).min(a.ncols()) {
            worst = worst.max((a.get(i, j) - b.get(i, j)).abs() / scale);
        }
    }
    // anything outside the tridiagonal band would be a mismatch too
    let band = |m: &CsrMatrix| (0..m.nrows()).all(|i| m.row(i).0.iter().all(|&j| j + 1 >= i && j <= i + 1));
    if band(a) && band(b) {
        worst
    } else {
        f64::INFINITY
    }
}

fn tridiagonal(n: usize, c: [f64; 3]) -> CsrMatrix {
    let mut t = Vec::new();
    for i in 0..n {
        if i > 0 {
            t.push((i, i - 1, c[0]));
        }
        t.push((i, i, c[1]));
        if i + 1 < n {
            t.push((i, i + 1, c[2]));
        }
    }
    CsrMatrix::from_triplets(n, n, &t)
}

/// Adv-MsFEM coarse matrix against the tridiagonal closed form and the
/// coth-SUPG P1 matrix on random 1D draws with `|b| H / alpha` in `[1, 50]`.
pub fn closed_form_equivalence(seed: u64, draws: usize) -> Check {
    const NAME: &str = "1D closed forms";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = MethodOptions { fine_stabilization: true, ..Default::default() };
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..draws {
        let alpha = log_uniform(&mut rng, 1e-3, 1e-1);
        let b = log_uniform(&mut rng, 0.25, 4.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let peh = rng.gen_range(1.0..50.0);
        let hc = peh * alpha / b.abs();
        let n = rng.gen_range(3..7);
        let r = rng.gen_range(2..9);
        let out = (|| -> CoreResult<(f64, f64)> {
            let p = ProblemSpec::new(Dim::One, n as f64 * hc, Diffusion::Constant(alpha), [b, 0.0], Source::Constant(1.0))?;
            let h = hierarchy(&p, n, r)?;
            let adv = adv_msfem_matrix(&p, &h, BoundaryVariant::Linear, &opts)?;
            let closed = tridiagonal(adv.nrows(), adv_msfem_1d_closed_form(alpha, b, hc));
            let tau = tau_value(TauMode::Coth, alpha, b.abs(), hc);
            let supg = assemble(
                &P1Space::new(h.coarse()),
                &[Term::Diffusion(&p.diffusion), Term::Convection(p.b), Term::Streamline { b: p.b, tau }],
            )?;
            Ok((rel_gap(&adv, &closed), rel_gap(&adv, &supg)))
        })();
        match out {
            Ok((c, s)) => worst = (worst.0.max(c), worst.1.max(s)),
            Err(e) => return failed(NAME, e),
        }
    }
    Check::new(
        NAME,
        worst.0 <= 1e-8 && worst.1 <= 1e-8,
        format!("{draws} draws, max rel gap {:.1e} to closed form, {:.1e} to coth SUPG (tol 1e-8)", worst.0, worst.1),
    )
}

/// The four splitting checks. `fine_ratio` sets the mesh of the damped
/// run on the reference problem.
pub fn splitting_suite(fine_ratio: usize) -> Vec<Check> {
    vec![
        splitting_matched(),
        splitting_divergence(),
        splitting_damped(fine_ratio),
        splitting_zero_damping(),
    ]
}

fn splitting_matched() -> Check {
    const NAME: &str = "splitting with A = alpha_spl";
    let out = (|| -> CoreResult<_> {
        let p = ProblemSpec::new(Dim::Two, 1.0, Diffusion::Constant(0.05), [1.0, 1.0], Source::Constant(1.0))?;
        let h = hierarchy(&p, 8, 4)?;
        let (_, s) = solve_splitting(&p, &h, &MethodOptions::default())?;
        Ok((s.iteration, s.residuals.first().copied().unwrap_or(f64::NAN)))
    })();
    match out {
        Ok((it, res)) => Check::new(NAME, it == 1 && res < 1e-13, format!("{it} pass, residual {res:.1e}")),
        Err(e) => failed(NAME, e),
    }
}

/// Constant diffusion `0.01` split with `alpha_spl = 0.05`: the naive
/// iteration started from `cos(2 pi x) - 1` diverges at a known rate.
pub fn splitting_divergence() -> Check {
    const NAME: &str = "naive splitting divergence rate";
    let (b, alpha, spl) = (1.0, 0.01, 0.05);
    let predicted = divergence_growth(b, alpha, spl);
    let out = (|| -> CoreResult<Vec<f64>> {
        let p = ProblemSpec::new(Dim::One, 1.0, Diffusion::Constant(alpha), [b, 0.0], Source::Constant(0.0))?
            .with_alpha_spl(spl)?;
        let h = hierarchy(&p, 512, 1)?;
        let sys = SplittingSystem::new(&p, &h, &MethodOptions::default())?;
        let u0 = P1Space::new(h.coarse()).interpolate(|x| (2.0 * PI * x[0]).cos() - 1.0);
        let opts = SplittingOptions { max_iter: 12, ..Default::default() };
        match sys.iterate(0.0, false, Some(&u0), &SolverConfig::direct(), &opts) {
            Ok((s, _, _)) => Ok(s.residuals),
            Err(CoreError::SplittingDiverged { residuals, .. }) => Ok(residuals),
            Err(e) => Err(e),
        }
    })();
    let residuals = match out {
        Ok(r) => r,
        Err(e) => return failed(NAME, e),
    };
    // the first passes still carry the transient of the other modes
    let growth: Vec<f64> = residuals.windows(2).map(|w| w[1] / w[0]).collect();
    let measured = growth.last().copied().unwrap_or(f64::NAN);
    let cond = check_splitting_conditions(
        &ProblemSpec::new(Dim::One, 1.0, Diffusion::Constant(alpha), [b, 0.0], Source::Constant(0.0))
            .and_then(|p| p.with_alpha_spl(spl))
            .expect("valid problem"),
    );
    let rel = (measured - predicted).abs() / predicted;
    Check::new(
        NAME,
        rel <= 0.05 && cond.divergence_condition == Some(true),
        format!("growth {measured:.4} vs predicted {predicted:.4} ({:.2}%)", 100.0 * rel),
    )
}

fn splitting_damped(fine_ratio: usize) -> Check {
    const NAME: &str = "damped splitting on the reference problem";
    let out = (|| -> CoreResult<_> {
        let p = ProblemSpec::reference_test();
        let h = hierarchy(&p, 16, fine_ratio)?;
        let params = BetaParams::from_problem(&p, h.coarse().size(), BoundFormula::Continuous);
        let (beta, rho) = beta_optimize(&params)?;
        let (gb, gr) = beta_golden(&params, 1e-10);
        let o = MethodOptions::default();
        let (_, naive) = solve_splitting(&p, &h, &o)?;
        let (_, damped) = solve_splitting_damped(&p, &h, BetaChoice::Auto(BoundFormula::Continuous), false, &o)?;
        Ok((beta, rho, (gb - beta).abs().max((gr - rho).abs()), naive, damped))
    })();
    match out {
        Ok((beta, rho, golden_gap, naive, damped)) => {
            let ratio = damped.iteration as f64 / naive.iteration as f64;
            let pass = (1.98..=2.06).contains(&beta)
                && (rho - 0.9990).abs() <= 2e-4
                && golden_gap < 1e-5
                && naive.converged
                && damped.converged
                && ratio >= 20.0;
            Check::new(
                NAME,
                pass,
                format!(
                    "beta {beta:.5}, rho {rho:.6}, golden-section gap {golden_gap:.1e}, {} damped vs {} naive passes ({ratio:.0}x)",
                    damped.iteration, naive.iteration
                ),
            )
        }
        Err(e) => failed(NAME, e),
    }
}

fn splitting_zero_damping() -> Check {
    const NAME: &str = "zero damping reproduces the naive iterates";
    let out = (|| -> CoreResult<_> {
        let p = ProblemSpec::reference_test();
        let h = hierarchy(&p, 8, 8)?;
        let mut o = MethodOptions::default();
        o.splitting.record_trajectory = true;
        let (_, naive) = solve_splitting(&p, &h, &o)?;
        let (_, damped) = solve_splitting_damped(&p, &h, BetaChoice::Value(0.0), false, &o)?;
        Ok((naive, damped))
    })();
    match out {
        Ok((naive, damped)) => {
            let mut gap = 0.0f64;
            for (a, b) in naive.trajectory.iter().zip(&damped.trajectory) {
                for (x, y) in a.0.iter().zip(&b.0).chain(a.1.iter().zip(&b.1)) {
                    gap = gap.max((x - y).abs());
                }
            }
            let same_len = naive.trajectory.len() == damped.trajectory.len() && !naive.trajectory.is_empty();
            Check::new(
                NAME,
                same_len && gap <= 1e-12,
                format!("{} iterates, max deviation {gap:.1e}", naive.trajectory.len()),
            )
        }
        Err(e) => failed(NAME, e),
    }
}

fn one_d_problem(alpha: f64, delta: f64, eps: f64, b: f64, sine: bool) -> CoreResult<ProblemSpec> {
    let a = if delta == 0.0 { Diffusion::Constant(alpha) } else { Diffusion::oscillating(alpha, delta, eps)? };
    let f = if sine { Source::custom(|x| (2.0 * PI * x[0]).sin()) } else { Source::Constant(1.0) };
    ProblemSpec::new(Dim::One, 1.0, a, [b, 0.0], f)
}

struct Draw {
    params: BoundParams,
    h: f64,
    hf: f64,
    msfem: f64,
    adv: f64,
    u_h1: f64,
    u_max: f64,
    unit_source: bool,
}

fn random_draw(rng: &mut ChaCha8Rng) -> CoreResult<Draw> {
    let alpha = log_uniform(rng, 1.0 / 512.0, 1.0 / 16.0);
    let delta = rng.gen_range(0.0..0.9);
    let eps = 0.5f64.powi(rng.gen_range(4..10));
    let b = log_uniform(rng, 0.25, 4.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let n = [8usize, 16, 32][rng.gen_range(0..3)];
    let unit_source = rng.gen_bool(0.5);
    let p = one_d_problem(alpha, delta, eps, b, !unit_source)?;
    let h = hierarchy(&p, n, (1 << 14) / n)?;
    let reference = solve_reference(&p, &h, usize::MAX)?;
    let o = MethodOptions::default();
    let ms = solve_method(&p, &h, Method::MsFem, &o)?;
    let adv = solve_method(&p, &h, Method::AdvMsFem(BoundaryVariant::Linear), &o)?;
    Ok(Draw {
        params: BoundParams::from_problem(&p)?,
        h: h.coarse().size(),
        hf: h.fine().size(),
        msfem: h1_seminorm_distance(&h, &ms.field, &reference.field),
        adv: h1_seminorm_distance(&h, &adv.field, &reference.field),
        u_h1: h1_seminorm(&h, &reference.field),
        u_max: reference.nodal.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        unit_source,
    })
}

fn bound_check(name: &str, t: ErrorBound, samples: &[BoundSample]) -> (Check, Option<msfem_core::analysis::BoundCheck>) {
    match verify_error_bounds(t, samples) {
        Ok(c) => (
            Check::new(
                name,
                c.satisfied && c.applicable,
                format!("{} samples, worst error {:.3e} vs bound {:.3e}", samples.len(), c.lhs, c.rhs),
            ),
            Some(c),
        ),
        Err(e) => (failed(name, e), None),
    }
}

/// Explicit-constant bounds, the solution estimate and the maximum
/// principle on random 1D draws, then the fitted-constant bounds over a
/// coarse-size sweep.
pub fn bound_certification(seed: u64, draws: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Vec::with_capacity(draws);
    for _ in 0..draws {
        match random_draw(&mut rng) {
            Ok(d) => ds.push(d),
            Err(e) => return vec![failed("bound certification draws", e)],
        }
    }
    let sample = |d: &Draw, e: f64| BoundSample { params: d.params, h: d.h, h_fine: d.hf, error: e };
    let ms: Vec<_> = ds.iter().map(|d| sample(d, d.msfem)).collect();
    let adv: Vec<_> = ds.iter().map(|d| sample(d, d.adv)).collect();
    let mut out = vec![bound_check("MsFEM error bound", ErrorBound::MsFem, &ms).0, bound_check("Adv-MsFEM error bound", ErrorBound::AdvMsFem, &adv).0];

    let stab_ok = ds.iter().all(|d| d.params.dominated() && d.u_h1 <= d.params.solution_bound());
    let worst = ds.iter().map(|d| d.u_h1 / d.params.solution_bound()).fold(0.0, f64::max);
    out.push(Check::new("solution H1 estimate", stab_ok, format!("{draws} draws, max |u|/bound {worst:.3}")));
    let unit: Vec<_> = ds.iter().filter(|d| d.unit_source).collect();
    let mp_ok = !unit.is_empty() && unit.iter().all(|d| d.u_max <= d.params.max_principle_bound() * (1.0 + 1e-9));
    let worst = unit.iter().map(|d| d.u_max / d.params.max_principle_bound()).fold(0.0, f64::max);
    out.push(Check::new("maximum principle", mp_ok, format!("{} draws with f = 1, max u/bound {worst:.3}", unit.len())));

    out.extend(fitted_bounds());
    out
}

/// Stab-MsFEM errors over `H = 1/8 .. 1/128` in a strongly oscillating,
/// convection-dominated 1D case; the fitted constants must stay bounded
/// and nearly independent of `H`.
pub fn fitted_bounds() -> Vec<Check> {
    let (alpha, delta, eps) = (1.0 / 64.0, 0.8, 1.0 / 1024.0);
    let out = (|| -> CoreResult<Vec<BoundSample>> {
        let p = one_d_problem(alpha, delta, eps, 1.0, true)?;
        let params = BoundParams::from_problem(&p)?;
        let mut samples = Vec::new();
        for n in [8usize, 16, 32, 64, 128] {
            let h = hierarchy(&p, n, (1 << 16) / n)?;
            let reference = solve_reference(&p, &h, usize::MAX)?;
            let s = solve_method(&p, &h, Method::StabMsFem, &MethodOptions::default())?;
            samples.push(BoundSample {
                params,
                h: h.coarse().size(),
                h_fine: h.fine().size(),
                error: h1_seminorm_distance(&h, &s.field, &reference.field),
            });
        }
        Ok(samples)
    })();
    let samples = match out {
        Ok(s) => s,
        Err(e) => return vec![failed("fitted bounds", e)],
    };
    [("Stab-MsFEM bound, exact bases", ErrorBound::StabMsFem), ("Stab-MsFEM bound, discrete bases", ErrorBound::StabMsFemDiscrete)]
        .into_iter()
        .map(|(name, t)| match verify_error_bounds(t, &samples) {
            Ok(c) => Check::new(
                name,
                c.applicable && c.satisfied && c.stable(100.0, 2.0),
                format!("fitted constant {:.3e}, spread {:.3} over {} sizes", c.constant, c.spread, samples.len()),
            ),
            Err(e) => failed(name, e),
        })
        .collect()
}

/// Log-log slope of the coth-SUPG H1 error against the exact 1D solution
/// for `alpha = 1/32` and `H = 1/16 .. 1/256`.
pub fn supg_rate() -> Check {
    const NAME: &str = "P1-SUPG H1 rate";
    let alpha = 1.0 / 32.0;
    let out = (|| -> CoreResult<Vec<(f64, f64)>> {
        let p = ProblemSpec::single_scale_1d(alpha, 1.0)?;
        let exact = exact_solution_1d(alpha, 1.0, 1.0, 1.0)?;
        let mut pts = Vec::new();
        for n in [16usize, 32, 64, 128, 256] {
            let h = hierarchy(&p, n, 1)?;
            let r = solve_method(&p, &h, Method::P1(P1Stabilization::Supg(TauMode::Coth)), &MethodOptions::default())?;
            pts.push((h.coarse().size(), exact_errors_1d(&h, &r.field, &exact).1));
        }
        Ok(pts)
    })();
    match out.and_then(|pts| estimate_rate(&pts).map(|s| (s, pts))) {
        Ok((slope, pts)) => Check::new(
            NAME,
            (0.8..=1.3).contains(&slope),
            format!("slope {slope:.3} (errors {:.2e} .. {:.2e})", pts[0].1, pts[pts.len() - 1].1),
        ),
        Err(e) => failed(NAME, e),
    }
}

fn hier(n: usize, r: usize) -> CoreResult<Arc<MeshHierarchy>> {
    Ok(Arc::new(refine(&build_structured(Dim::Two, 1.0, n)?, r)?))
}

/// Randomized invariants of the discretization and of the runner, on
/// `cases` random draws each.
pub fn property_checks(seed: u64, cases: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    out.push(partition_of_unity(&mut rng, cases));
    out.push(matrix_structure(&mut rng, cases));
    out.push(projection(&mut rng, cases));
    out.push(error_metrics(&mut rng, cases));
    out.push(auto_mesh(&mut rng, cases));
    out.push(csv_determinism(seed));
    out
}

fn partition_of_unity(rng: &mut ChaCha8Rng, cases: usize) -> Check {
    const NAME: &str = "partition of unity";
    let mut worst = 0.0f64;
    for i in 0..cases {
        let variant = match i % 3 {
            0 => BoundaryVariant::Linear,
            1 => BoundaryVariant::CrouzeixRaviart,
            _ => BoundaryVariant::Oversampling { ratio: 2.0 },
        };
        let kind = if rng.gen_bool(0.5) { BasisKind::AdvectionDiffusion } else { BasisKind::DiffusionOnly };
        let out = (|| -> CoreResult<f64> {
            let h = hier(rng.gen_range(2..4), rng.gen_range(2..5))?;
            let a = Diffusion::oscillating(log_uniform(rng, 0.01, 1.0), rng.gen_range(0.0..0.9), 0.5f64.powi(rng.gen_range(1..4)))?;
            let b = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            Ok(build_space(&h, kind, &a, b, variant, &LocalSolver::Direct)?.partition_of_unity_defect())
        })();
        match out {
            Ok(d) => worst = worst.max(d),
            Err(e) => return failed(NAME, e),
        }
    }
    Check::new(NAME, worst <= 1e-10, format!("{cases} spaces, max defect {worst:.1e}"))
}

fn matrix_structure(rng: &mut ChaCha8Rng, cases: usize) -> Check {
    const NAME: &str = "diffusion symmetric positive, convection skew";
    let (mut asym, mut min_energy, mut skew) = (0.0f64, f64::INFINITY, 0.0f64);
    for _ in 0..cases {
        let out = (|| -> CoreResult<(f64, f64, f64)> {
            let m = build_structured(Dim::Two, 1.0, rng.gen_range(2..12))?;
            let sp = P1Space::new(&m);
            let a = Diffusion::oscillating(log_uniform(rng, 1e-3, 1.0), rng.gen_range(0.0..0.95), rng.gen_range(0.01..1.0))?;
            let k = assemble_diffusion(&sp, &a)?;
            let c = assemble_convection(&sp, [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]);
            let x: Vec<f64> = (0..sp.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let energy = dot(&x, &k.mul_vec(&x)) / dot(&x, &x);
            Ok((k.asymmetry() / k.max_abs(), energy, c.add(&c.transpose())?.max_abs()))
        })();
        match out {
            Ok((a, e, s)) => {
                asym = asym.max(a);
                min_energy = min_energy.min(e);
                skew = skew.max(s);
            }
            Err(e) => return failed(NAME, e),
        }
    }
    Check::new(
        NAME,
        asym <= 1e-14 && min_energy > 0.0 && skew <= 1e-13,
        format!("rel asymmetry {asym:.1e}, min Rayleigh quotient {min_energy:.2e}, |C + C^T| {skew:.1e}"),
    )
}

fn projection(rng: &mut ChaCha8Rng, cases: usize) -> Check {
    const NAME: &str = "projection idempotent and contractive";
    let (mut idem, mut contraction) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let out = (|| -> CoreResult<(f64, f64)> {
            let h = hier(3, 4)?;
            let a = Diffusion::oscillating(rng.gen_range(0.05..1.0), rng.gen_range(0.0..0.8), 0.25)?;
            let s = build_space(&h, BasisKind::DiffusionOnly, &a, [0.0; 2], BoundaryVariant::Linear, &LocalSolver::Direct)?;
            let c: [f64; 4] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let v = BrokenField::from_fn(&h, |p| {
                let (x, y) = (p[0], p[1]);
                x * (1.0 - x) * y * (1.0 - y) * (c[0] + c[1] * (7.0 * x).sin() + c[2] * (5.0 * y).cos() + c[3] * x * y)
            });
            let form = ProjectionForm::Laplace(1.0);
            let p1 = project_onto_space(&v, &s, &form)?;
            let pv = s.field(&p1);
            let p2 = project_onto_space(&pv, &s, &form)?;
            let scale = p1.iter().fold(1e-300f64, |m, x| m.max(x.abs()));
            let gap = p1.iter().zip(&p2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
            Ok((gap, h1_seminorm(&h, &pv) / h1_seminorm(&h, &v)))
        })();
        match out {
            Ok((g, r)) => {
                idem = idem.max(g);
                contraction = contraction.max(r);
            }
            Err(e) => return failed(NAME, e),
        }
    }
    Check::new(
        NAME,
        idem <= 1e-11 && contraction <= 1.0 + 1e-10,
        format!("max |P P v - P v| {idem:.1e} (relative), max |Pv|/|v| {contraction:.4}"),
    )
}

fn error_metrics(rng: &mut ChaCha8Rng, cases: usize) -> Check {
    const NAME: &str = "error metrics Pythagoras and homogeneity";
    let mut worst = 0.0f64;
    let h = match hier(4, 4) {
        Ok(h) => h,
        Err(e) => return failed(NAME, e),
    };
    for _ in 0..cases {
        let (pe, c, k) = (rng.gen_range(2.0..64.0), rng.gen_range(0.1..10.0), rng.gen_range(1.0..6.0));
        let mask = layer_mask(h.fine(), pe);
        let u_ref = BrokenField::from_fn(&h, |p| (k * p[0]).sin() * p[1] + p[0] * p[0]);
        let u = BrokenField::from_fn(&h, |p| (k * p[0]).sin() * p[1] + 0.8 * p[0] * p[0] + 0.1 * p[1]);
        let out = (|| -> CoreResult<f64> {
            let e = compute_errors(&h, &u, &u_ref, &mask, false)?;
            let es = compute_errors(&h, &u.scaled(c), &u_ref.scaled(c), &mask, false)?;
            let e2 = compute_errors(&h, &u_ref.lin_comb(1.0 - c, &u, c), &u_ref, &mask, false)?;
            let mut d = (e.h1_in.powi(2) + e.h1_out.powi(2) - e.h1 * e.h1).abs() / (e.h1 * e.h1);
            for (a, b) in [(e.l2, es.l2), (e.h1, es.h1), (e.h1_in, es.h1_in), (e.h1_out, es.h1_out)] {
                d = d.max((a - b).abs() / a);
            }
            for (a, b) in [(e.l2, e2.l2), (e.h1, e2.h1), (e.h1_in, e2.h1_in), (e.h1_out, e2.h1_out)] {
                d = d.max((c * a - b).abs() / b);
            }
            Ok(d)
        })();
        match out {
            Ok(d) => worst = worst.max(d),
            Err(e) => return failed(NAME, e),
        }
    }
    Check::new(NAME, worst <= 1e-10, format!("{cases} fields, max relative deviation {worst:.1e}"))
}

fn auto_mesh(rng: &mut ChaCha8Rng, cases: usize) -> Check {
    const NAME: &str = "automatic fine mesh constraints";
    let mut built = 0;
    for _ in 0..cases {
        let p = ProblemSpec::oscillating_2d(0.5f64.powi(rng.gen_range(3..9)), rng.gen_range(0.01..0.9), 0.5f64.powi(rng.gen_range(2..7)));
        match auto_hierarchy(&p, 1 << rng.gen_range(2..5), 20_000_000) {
            Ok(h) => {
                if !fine_constraints_met(&p, h.fine().size()) {
                    return Check::new(NAME, false, format!("h = {} violates the constraints", h.fine().size()));
                }
                built += 1;
            }
            Err(CoreError::InfeasibleMesh { .. }) => {}
            Err(e) => return failed(NAME, e),
        }
    }
    Check::new(NAME, built > 0, format!("{built} of {cases} feasible draws meet both constraints"))
}

/// Two runs of the same small config give the same CSV apart from timing.
pub fn csv_determinism(seed: u64) -> Check {
    const NAME: &str = "CSV determinism";
    let mut cfg = ExperimentConfig { alpha: 1.0 / 8.0, epsilon: 1.0 / 4.0, coarse_n: 4, ..ExperimentConfig::desk() };
    cfg.fine = crate::config::FineMesh::Ratio(16);
    cfg.seed = seed;
    let once = || -> Result<String, crate::RunError> {
        let (p, h, r) = reference_for(&cfg)?;
        Ok(strip_timing(&run_csv(&run_with_reference(&cfg, &p, &h, &r))))
    };
    match (once(), once()) {
        (Ok(a), Ok(b)) => Check::new(NAME, a == b, format!("{} rows compared", a.lines().count().saturating_sub(1))),
        (Err(e), _) | (_, Err(e)) => failed(NAME, e),
    }
}

/// Everything `verify-theory` runs. `full` uses the reference mesh for the
/// damped splitting run.
pub fn verify_all(seed: u64, full: bool) -> Vec<Check> {
    let mut out = vec![closed_form_equivalence(seed, 10)];
    out.extend(splitting_suite(if full { 64 } else { 16 }));
    out.extend(bound_certification(seed, 20));
    out.push(supg_rate());
    out.extend(property_checks(seed, 8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms_hold() {
        let c = closed_form_equivalence(1, 3);
        assert!(c.passed, "{}", c.line());
    }

    #[test]
    fn tridiagonal_band_detection() {
        let a = tridiagonal(4, [-1.0, 2.0, -1.0]);
        assert_eq!(rel_gap(&a, &a), 0.0);
        let wide = CsrMatrix::from_triplets(4, 4, &[(0, 3, 1.0)]);
        assert!(rel_gap(&a, &wide).is_infinite());
    }

    #[test]
    fn divergence_rate_matches() {
        let c = splitting_divergence();
        assert!(c.passed, "{}", c.line());
    }

    #[test]
    fn supg_rate_in_band() {
        let c = supg_rate();
        assert!(c.passed, "{}", c.line());
    }
}
