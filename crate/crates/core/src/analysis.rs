//! Error metrics on the fine mesh, rate estimation and numerical checks of
//! the a priori bounds and splitting conditions.

use crate::basis::BrokenField;
use crate::error::{Error, Result};
use crate::mesh::{LayerMask, MeshHierarchy};
use crate::solvers::{ExactSolution1d, MethodReport, ProblemSpec};

/// Relative errors against a reference field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorBundle {
    pub l2: f64,
    pub h1: f64,
    pub linf: f64,
    pub h1_in: f64,
    pub h1_out: f64,
    /// Computed with the broken (elementwise) norm.
    pub broken: bool,
}

impl ErrorBundle {
    pub const CSV_HEADER: &'static str = "e_L2,e_H1,e_Linf,e_H1_in,e_H1_out";

    pub fn csv_row(&self) -> String {
        format!("{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}", self.l2, self.h1, self.linf, self.h1_in, self.h1_out)
    }
}

/// Squared norms of a fine field split over the layer mask.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NormParts {
    pub l2_sq: f64,
    pub semi_sq: f64,
    pub semi_in_sq: f64,
    pub l2_in_sq: f64,
}

impl NormParts {
    pub fn h1_sq(&self) -> f64 {
        self.l2_sq + self.semi_sq
    }

    pub fn h1_in_sq(&self) -> f64 {
        self.l2_in_sq + self.semi_in_sq
    }

    pub fn h1_out_sq(&self) -> f64 {
        self.h1_sq() - self.h1_in_sq()
    }
}

/// Exact P1 integrals of `a * u + b * v` over every fine cell, each cell
/// using its own element's copy of the values.
fn norm_parts(h: &MeshHierarchy, u: &BrokenField, a: f64, v: Option<&BrokenField>, b: f64, mask: Option<&LayerMask>) -> NormParts {
    let fine = h.fine();
    let nv = fine.nv();
    let mut p = NormParts::default();
    for t in 0..fine.n_cells() {
        let g = fine.geometry(t);
        let mut e = u.cell_values(h, t);
        if let Some(v) = v {
            let w = v.cell_values(h, t);
            for i in 0..nv {
                e[i] = a * e[i] + b * w[i];
            }
        } else if a != 1.0 {
            e.iter_mut().for_each(|x| *x *= a);
        }
        let (mut s, mut s2) = (0.0, 0.0);
        let mut grad = [0.0; 2];
        for i in 0..nv {
            s += e[i];
            s2 += e[i] * e[i];
            grad[0] += e[i] * g.grads[i][0];
            grad[1] += e[i] * g.grads[i][1];
        }
        let l2 = g.measure / (nv * (nv + 1)) as f64 * (s2 + s * s);
        let semi = g.measure * (grad[0] * grad[0] + grad[1] * grad[1]);
        p.l2_sq += l2;
        p.semi_sq += semi;
        if mask.is_some_and(|m| m.is_inside(t)) {
            p.l2_in_sq += l2;
            p.semi_in_sq += semi;
        }
    }
    p
}

/// `|u|_{H^1}` summed elementwise.
pub fn h1_seminorm(h: &MeshHierarchy, u: &BrokenField) -> f64 {
    norm_parts(h, u, 1.0, None, 0.0, None).semi_sq.sqrt()
}

pub fn l2_norm(h: &MeshHierarchy, u: &BrokenField) -> f64 {
    norm_parts(h, u, 1.0, None, 0.0, None).l2_sq.sqrt()
}

/// `|u - v|_{H^1}` summed elementwise.
pub fn h1_seminorm_distance(h: &MeshHierarchy, u: &BrokenField, v: &BrokenField) -> f64 {
    norm_parts(h, u, 1.0, Some(v), -1.0, None).semi_sq.sqrt()
}

/// Relative errors of `u` against `u_ref`, both fine fields on `h`. The
/// layer split assigns whole fine cells by barycenter; `broken` only labels
/// the result, since the integrals are elementwise in either case.
pub fn compute_errors(
    h: &MeshHierarchy,
    u: &BrokenField,
    u_ref: &BrokenField,
    mask: &LayerMask,
    broken: bool,
) -> Result<ErrorBundle> {
    if u.values.len() != u_ref.values.len()
        || u.values.iter().zip(&u_ref.values).any(|(a, b)| a.len() != b.len())
        || mask.flags().len() != h.fine().n_cells()
    {
        return Err(Error::DimensionMismatch("fields and mask must live on the same fine mesh".into()));
    }
    let r = norm_parts(h, u_ref, 1.0, None, 0.0, None);
    let e = norm_parts(h, u, 1.0, Some(u_ref), -1.0, Some(mask));
    let ref_h1 = r.h1_sq().sqrt();
    let ref_l2 = r.l2_sq.sqrt();
    let ref_inf = u_ref.max_abs();
    if !(ref_h1 > 0.0) || !(ref_l2 > 0.0) || !(ref_inf > 0.0) {
        return Err(Error::ZeroReference);
    }
    let mut inf: f64 = 0.0;
    for (a, b) in u.values.iter().zip(&u_ref.values) {
        for (x, y) in a.iter().zip(b) {
            inf = inf.max((x - y).abs());
        }
    }
    Ok(ErrorBundle {
        l2: e.l2_sq.sqrt() / ref_l2,
        h1: e.h1_sq().sqrt() / ref_h1,
        linf: inf / ref_inf,
        h1_in: e.h1_in_sq().sqrt() / ref_h1,
        h1_out: e.h1_out_sq().max(0.0).sqrt() / ref_h1,
        broken,
    })
}

/// Fills `report.errors` against the reference field.
pub fn attach_errors(report: &mut MethodReport, h: &MeshHierarchy, u_ref: &BrokenField, mask: &LayerMask) -> Result<ErrorBundle> {
    let e = compute_errors(h, &report.field, u_ref, mask, report.broken)?;
    report.errors = Some(e);
    Ok(e)
}

/// Absolute `L^2` error and `H^1` seminorm error of a 1D fine field against
/// a closed-form solution, with 5-point Gauss quadrature on each fine cell.
pub fn exact_errors_1d(h: &MeshHierarchy, u: &BrokenField, exact: &ExactSolution1d) -> (f64, f64) {
    const X: [f64; 5] = [-0.906_179_845_938_664, -0.538_469_310_105_683, 0.0, 0.538_469_310_105_683, 0.906_179_845_938_664];
    const W: [f64; 5] = [0.236_926_885_056_189, 0.478_628_670_499_366, 0.568_888_888_888_889, 0.478_628_670_499_366, 0.236_926_885_056_189];
    let fine = h.fine();
    let (mut l2, mut semi) = (0.0, 0.0);
    for t in 0..fine.n_cells() {
        let c = fine.cell(t);
        let (x0, x1) = (fine.vertex(c[0])[0], fine.vertex(c[1])[0]);
        let v = u.cell_values(h, t);
        let len = x1 - x0;
        let slope = (v[1] - v[0]) / len;
        for (xi, wi) in X.iter().zip(&W) {
            let s = 0.5 * (xi + 1.0);
            let x = x0 + s * len;
            let uh = v[0] + s * (v[1] - v[0]);
            l2 += 0.5 * len * wi * (uh - exact.value(x)).powi(2);
            semi += 0.5 * len * wi * (slope - exact.derivative(x)).powi(2);
        }
    }
    (l2.sqrt(), semi.sqrt())
}

/// Least-squares slope of `log(error)` against `log(H)`.
pub fn estimate_rate(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.len() < 3 {
        return Err(Error::invalid("rate estimation needs at least 3 samples"));
    }
    if samples.windows(2).any(|w| !(w[1].0 < w[0].0)) {
        return Err(Error::invalid("mesh sizes must be strictly decreasing"));
    }
    if let Some(&(_, e)) = samples.iter().find(|s| !(s.1 > 0.0) || !(s.0 > 0.0)) {
        return Err(Error::NonPositiveError(e));
    }
    let n = samples.len() as f64;
    let xs: Vec<f64> = samples.iter().map(|s| s.0.ln()).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Convergence indicators of the splitting schemes for a problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplittingConditions {
    /// `C |b| / alpha_1 * |A - alpha_spl| / alpha_spl`; below 1 guarantees
    /// convergence of the naive scheme.
    pub rho: f64,
    pub naive_condition: bool,
    /// Smallest value of `rho` over all choices of `alpha_spl`.
    pub rho_min: f64,
    /// Divergence condition for constant diffusion `alpha*`; `None` when
    /// the diffusion is not constant.
    pub divergence_condition: Option<bool>,
    /// Predicted growth factor per pass in that setting.
    pub growth_ratio: Option<f64>,
}

pub fn check_splitting_conditions(problem: &ProblemSpec) -> SplittingConditions {
    let (a1, a2) = problem.diffusion.bounds();
    let b = problem.b_sup();
    let spl = problem.alpha_spl;
    let k = problem.c_omega * b / a1;
    let rho = k * problem.diffusion.deviation_from(spl) / spl;
    let rho_min = k * (a2 - a1) / (a2 + a1);
    let (cond, growth) = if problem.diffusion.is_constant() && b > 0.0 {
        let a = a1;
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let cond = b / spl < b / (2.0 * a) - 2.0 * pi2 * a / b;
        (Some(cond), Some(divergence_growth(b, a, spl)))
    } else {
        (None, None)
    };
    SplittingConditions { rho, naive_condition: rho < 1.0, rho_min, divergence_condition: cond, growth_ratio: growth }
}

/// `|lambda| / sqrt((b/alpha_spl)^2 + 4 pi^2)` with
/// `lambda = (b/alpha_spl)(1 - alpha_spl/alpha)`.
pub fn divergence_growth(b: f64, alpha: f64, alpha_spl: f64) -> f64 {
    let k = b / alpha_spl;
    let lambda = k * (1.0 - alpha_spl / alpha);
    lambda.abs() / (k * k + 4.0 * std::f64::consts::PI * std::f64::consts::PI).sqrt()
}

/// Growth per pass of the derivative coefficients of the `cos(2 pi x)`
/// mode, obtained by iterating the 2x2 recursion directly.
pub fn divergence_growth_by_iteration(b: f64, alpha: f64, alpha_spl: f64, steps: usize) -> f64 {
    let w = 2.0 * std::f64::consts::PI;
    let k = b / alpha_spl;
    let lambda = k * (1.0 - alpha_spl / alpha);
    let s = 1.0 / (k * k + w * w);
    let m = [[-k * s, -w * s], [w * s, -k * s]];
    let mut v = [0.0, -w];
    let mut ratio = 0.0;
    for _ in 0..steps {
        let nv = [-lambda * (m[0][0] * v[0] + m[0][1] * v[1]), -lambda * (m[1][0] * v[0] + m[1][1] * v[1])];
        ratio = nv[0].hypot(nv[1]) / v[0].hypot(v[1]);
        v = nv;
    }
    ratio
}

/// Parameters of a 1D problem entering the a priori bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub b: f64,
    pub length: f64,
    pub f_norm: f64,
    /// `sup |A' - b|`, needed for the local discretization term.
    pub derivative_gap: f64,
}

impl BoundParams {
    pub fn from_problem(p: &ProblemSpec) -> Result<Self> {
        let mesh = crate::mesh::build_structured(p.dim, p.length, 4096)?;
        let b = p.b[0];
        let dsup = p
            .diffusion
            .derivative_sup()
            .ok_or_else(|| Error::Unsupported("bounds need an analytic diffusion derivative".into()))?;
        Ok(BoundParams {
            alpha1: p.alpha1(),
            alpha2: p.alpha2(),
            b,
            length: p.length,
            f_norm: p.f.l2_norm(&mesh),
            derivative_gap: dsup + b.abs(),
        })
    }

    /// `|b| L / alpha_2 >= 1`
    pub fn dominated(&self) -> bool {
        self.b.abs() * self.length / self.alpha2 >= 1.0
    }

    /// `|b| H / (2 alpha_1) >= 1`
    pub fn coarse_dominated(&self, h: f64) -> bool {
        self.b.abs() * h / (2.0 * self.alpha1) >= 1.0
    }

    fn stability(&self) -> f64 {
        1.0 + (2.0 * self.alpha2 * self.length * self.b.abs()).sqrt() / self.alpha1
    }

    fn sqrt_term(&self, h: f64) -> f64 {
        (self.alpha2 * self.alpha2 / (self.alpha1 * self.alpha1) + self.b.abs() * h / self.alpha1).sqrt()
    }

    /// Bound on `|u|_{H^1}` for `|b| L / alpha_2 >= 1`.
    pub fn solution_bound(&self) -> f64 {
        (2.0 * self.alpha2 * self.length).sqrt() / (self.alpha1 * self.b.abs().sqrt()) * self.f_norm
    }

    /// Pointwise upper bound on the solution for `f = 1`.
    pub fn max_principle_bound(&self) -> f64 {
        self.alpha2 * self.length / (self.alpha1 * self.b.abs())
    }

    /// MsFEM bound (explicit constant).
    pub fn msfem(&self, h: f64) -> f64 {
        h * ((self.alpha2 / self.alpha1).sqrt() + self.b.abs() * h / self.alpha1) * self.stability() * self.f_norm / self.alpha1
    }

    /// Stabilized MsFEM with exact bases, without the universal constant.
    pub fn stab_msfem(&self, h: f64) -> f64 {
        h * (1.0 + self.sqrt_term(h)) * self.stability() * self.f_norm / self.alpha1
    }

    /// Local discretization term for fine mesh size `hf`.
    pub fn fine_error(&self, hf: f64) -> f64 {
        hf * ((self.alpha2 / self.alpha1).sqrt() + self.b.abs() * hf / self.alpha1)
            * (1.0 + (2.0 * self.alpha2 * self.length / self.b.abs()).sqrt() * self.derivative_gap / self.alpha1)
            * self.f_norm
            / self.alpha1
    }

    /// Stabilized MsFEM with discrete bases, without the constant.
    pub fn stab_msfem_discrete(&self, h: f64, hf: f64) -> f64 {
        let r = h * self.b.abs() / self.alpha1;
        (1.0 + r + r * self.sqrt_term(h)) * self.fine_error(hf) + self.stab_msfem(h)
    }

    /// Adv-MsFEM bound (explicit constant).
    pub fn adv_msfem(&self, h: f64) -> f64 {
        h * ((self.alpha2 / self.alpha1).sqrt() + self.b.abs() * h / self.alpha1) * self.f_norm / self.alpha1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorBound {
    /// MsFEM, explicit constant.
    MsFem,
    /// Stabilized MsFEM with exact bases, fitted constant.
    StabMsFem,
    /// Stabilized MsFEM with discrete bases, fitted constant.
    StabMsFemDiscrete,
    /// Adv-MsFEM, explicit constant.
    AdvMsFem,
}

impl ErrorBound {
    pub fn label(self) -> &'static str {
        match self {
            ErrorBound::MsFem => "MsFEM bound",
            ErrorBound::StabMsFem => "Stab-MsFEM bound",
            ErrorBound::StabMsFemDiscrete => "Stab-MsFEM discrete bound",
            ErrorBound::AdvMsFem => "Adv-MsFEM bound",
        }
    }

    fn fitted(self) -> bool {
        matches!(self, ErrorBound::StabMsFem | ErrorBound::StabMsFemDiscrete)
    }
}

/// One measured error with the discretization it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundSample {
    pub params: BoundParams,
    pub h: f64,
    pub h_fine: f64,
    /// Measured `|u - u_H|_{H^1}`.
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundCheck {
    pub name: String,
    /// Measured error of the worst sample.
    pub lhs: f64,
    /// Bound for that sample, including the fitted constant.
    pub rhs: f64,
    /// Fitted constant (1 for explicit bounds).
    pub constant: f64,
    /// Largest over smallest per-sample constant.
    pub spread: f64,
    pub satisfied: bool,
    /// False when some sample violates the hypotheses.
    pub applicable: bool,
}

impl BoundCheck {
    /// Fitted constant at most `max_constant` and spread at most
    /// `max_spread`.
    pub fn stable(&self, max_constant: f64, max_spread: f64) -> bool {
        self.constant.is_finite() && self.constant > 0.0 && self.constant <= max_constant && self.spread <= max_spread
    }
}

fn bound_rhs(t: ErrorBound, s: &BoundSample) -> f64 {
    match t {
        ErrorBound::MsFem => s.params.msfem(s.h),
        ErrorBound::StabMsFem => s.params.stab_msfem(s.h),
        ErrorBound::StabMsFemDiscrete => s.params.stab_msfem_discrete(s.h, s.h_fine),
        ErrorBound::AdvMsFem => s.params.adv_msfem(s.h),
    }
}

fn hypotheses(t: ErrorBound, s: &BoundSample) -> bool {
    match t {
        ErrorBound::AdvMsFem => true,
        ErrorBound::MsFem => s.params.dominated(),
        ErrorBound::StabMsFem | ErrorBound::StabMsFemDiscrete => s.params.dominated() && s.params.coarse_dominated(s.h),
    }
}

/// Evaluates a bound over samples. Explicit bounds are checked sample by
/// sample; for bounds with an unnamed constant the smallest admissible
/// constant is fitted and its spread across samples reported.
pub fn verify_error_bounds(t: ErrorBound, samples: &[BoundSample]) -> Result<BoundCheck> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let applicable = samples.iter().all(|s| hypotheses(t, s));
    let ratios: Vec<(f64, f64, f64)> = samples
        .iter()
        .map(|s| {
            let r = bound_rhs(t, s);
            (s.error / r, s.error, r)
        })
        .collect();
    let worst = ratios.iter().copied().fold((f64::NEG_INFINITY, 0.0, 0.0), |a, b| if b.0 > a.0 { b } else { a });
    let min = ratios.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let (constant, spread) = if t.fitted() { (worst.0, worst.0 / min) } else { (1.0, worst.0 / min) };
    let rhs = worst.2 * constant;
    Ok(BoundCheck {
        name: t.label().to_string(),
        lhs: worst.1,
        rhs,
        constant,
        spread,
        satisfied: worst.1 <= rhs * (1.0 + 1e-9),
        applicable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_structured, layer_mask, refine, Dim};

    fn setup() -> (MeshHierarchy, BrokenField) {
        let h = refine(&build_structured(Dim::Two, 1.0, 4).unwrap(), 4).unwrap();
        let u = BrokenField::from_fn(&h, |x| (3.0 * x[0]).sin() * x[1] * (1.0 - x[1]) + x[0] * x[0]);
        (h, u)
    }

    #[test]
    fn identical_fields_have_zero_error() {
        let (h, u) = setup();
        let m = layer_mask(h.fine(), 8.0);
        let e = compute_errors(&h, &u, &u, &m, false).unwrap();
        assert_eq!((e.l2, e.h1, e.linf, e.h1_in, e.h1_out), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn doubled_field_has_unit_error() {
        let (h, u) = setup();
        let m = layer_mask(h.fine(), 8.0);
        let e = compute_errors(&h, &u.scaled(2.0), &u, &m, false).unwrap();
        for v in [e.l2, e.h1, e.linf] {
            assert!((v - 1.0).abs() < 1e-13);
        }
        // Pythagoras over the layer split
        assert!((e.h1_in.powi(2) + e.h1_out.powi(2) - e.h1 * e.h1).abs() < 1e-12);
    }

    #[test]
    fn exact_quadrature_of_linear_field() {
        let h = refine(&build_structured(Dim::Two, 1.0, 2).unwrap(), 3).unwrap();
        let u = BrokenField::from_fn(&h, |x| 2.0 * x[0] + x[1]);
        assert!((h1_seminorm(&h, &u) - 5f64.sqrt()).abs() < 1e-13);
        // int (2x + y)^2 over the unit square = 4/3 + 1 + 1/3
        assert!((l2_norm(&h, &u).powi(2) - (4.0 / 3.0 + 1.0 + 1.0 / 3.0)).abs() < 1e-13);
    }

    #[test]
    fn zero_reference_is_rejected() {
        let (h, u) = setup();
        let m = layer_mask(h.fine(), 8.0);
        assert!(matches!(compute_errors(&h, &u, &BrokenField::zeros(&h), &m, false), Err(Error::ZeroReference)));
    }

    #[test]
    fn rate_of_synthetic_data() {
        let hs = [0.5, 0.25, 0.125, 0.0625];
        let lin: Vec<_> = hs.iter().map(|&h| (h, h)).collect();
        assert!((estimate_rate(&lin).unwrap() - 1.0).abs() < 1e-12);
        let quad: Vec<_> = hs.iter().map(|&h| (h, 3.0 * h * h)).collect();
        assert!((estimate_rate(&quad).unwrap() - 2.0).abs() < 1e-12);
        assert!(estimate_rate(&lin[..2]).is_err());
        assert!(estimate_rate(&[(0.5, 1.0), (0.25, 0.0), (0.1, 1.0)]).is_err());
        assert!(estimate_rate(&[(0.5, 1.0), (0.5, 1.0), (0.1, 1.0)]).is_err());
    }

    #[test]
    fn splitting_condition_values() {
        let p = ProblemSpec::reference_test();
        let c = check_splitting_conditions(&p);
        assert!((c.rho_min - 128.0).abs() < 1e-9);
        assert!(!c.naive_condition);
        let q = ProblemSpec::new(Dim::Two, 1.0, crate::fem::Diffusion::Constant(0.05), [1.0, 1.0], crate::fem::Source::Constant(1.0))
            .unwrap();
        let c = check_splitting_conditions(&q);
        assert_eq!(c.rho, 0.0);
        assert!(c.naive_condition);
        let r = ProblemSpec::single_scale_1d(0.01, 1.0).unwrap().with_alpha_spl(0.05).unwrap();
        let c = check_splitting_conditions(&r);
        assert_eq!(c.divergence_condition, Some(true));
        let g = c.growth_ratio.unwrap();
        assert!((g - 80.0 / (400.0 + 4.0 * std::f64::consts::PI.powi(2)).sqrt()).abs() < 1e-12);
        assert!((g - 3.816).abs() < 1e-3);
        assert!((divergence_growth_by_iteration(1.0, 0.01, 0.05, 50) - g).abs() < 1e-12);
    }

    #[test]
    fn explicit_bound_flags() {
        let params = BoundParams { alpha1: 0.01, alpha2: 0.02, b: 1.0, length: 1.0, f_norm: 1.0, derivative_gap: 1.0 };
        let ok = BoundSample { params, h: 0.1, h_fine: 0.001, error: 0.5 * params.msfem(0.1) };
        let c = verify_error_bounds(ErrorBound::MsFem, &[ok]).unwrap();
        assert!(c.satisfied && c.applicable);
        let bad = BoundSample { error: 2.0 * params.msfem(0.1), ..ok };
        assert!(!verify_error_bounds(ErrorBound::MsFem, &[ok, bad]).unwrap().satisfied);
        let fit = verify_error_bounds(ErrorBound::StabMsFem, &[ok, bad]).unwrap();
        assert!(fit.satisfied);
        assert!(fit.constant > 0.0);
    }

    #[test]
    fn exact_errors_vanish_for_interpolated_solution_limit() {
        let p = ProblemSpec::single_scale_1d(0.1, 1.0).unwrap();
        let ex = crate::solvers::exact_solution_1d(0.1, 1.0, 1.0, 1.0).unwrap();
        let mut semis = Vec::new();
        for r in [8, 32, 128] {
            let h = crate::solvers::hierarchy(&p, 4, r).unwrap();
            let u = BrokenField::from_fn(&h, |x| ex.value(x[0]));
            let (l2, semi) = exact_errors_1d(&h, &u, &ex);
            assert!(l2 < semi);
            semis.push(semi);
        }
        // interpolation error is first order in the seminorm
        let ratio = semis[1] / semis[2];
        assert!((ratio - 4.0).abs() < 0.2, "{semis:?}");
    }
}
