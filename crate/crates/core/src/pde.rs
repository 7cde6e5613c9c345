//! Problem families, residual operators, initial conditions and collocation sampling.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Jet1D, Jet2D};
use crate::error::{Error, Result};

/// Coefficients `μ = [β, ν, ρ]` of `u_t + βu_x − νu_xx − ρu(1−u) = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct CdrParams {
    pub beta: f64,
    pub nu: f64,
    pub rho: f64,
}

impl CdrParams {
    pub fn new(beta: f64, nu: f64, rho: f64) -> Result<Self> {
        let p = CdrParams { beta, nu, rho };
        if !(beta.is_finite() && nu.is_finite() && rho.is_finite()) || nu < 0.0 {
            return Err(Error::InvalidInput(format!("invalid coefficients {p:?}")));
        }
        Ok(p)
    }

    pub fn to_mu(self) -> Vec<f64> {
        vec![self.beta, self.nu, self.rho]
    }

    pub fn from_mu(mu: &[f64]) -> Result<Self> {
        match mu {
            [b, n, r] => CdrParams::new(*b, *n, *r),
            _ => Err(Error::dim("CdrParams", format!("mu of length {}", mu.len()))),
        }
    }
}

/// Manufactured problem `u_xx + u_yy + κ²u = q` with `u* = sin(aπx) sin(aπy)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HelmholtzParams {
    pub a: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
}

fn default_kappa() -> f64 {
    1.0
}

impl HelmholtzParams {
    pub fn new(a: f64) -> Self {
        HelmholtzParams { a, kappa: 1.0 }
    }

    pub fn exact(&self, x: f64, y: f64) -> f64 {
        (self.a * PI * x).sin() * (self.a * PI * y).sin()
    }

    /// `q = (κ² − 2a²π²) u*`.
    pub fn source(&self, x: f64, y: f64) -> f64 {
        (self.kappa * self.kappa - 2.0 * self.a * self.a * PI * PI) * self.exact(x, y)
    }

    pub fn to_mu(self) -> Vec<f64> {
        vec![self.a]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Cdr,
    Helmholtz,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cdr" | "convection" | "diffusion" | "reaction" => Ok(Family::Cdr),
            "helmholtz" => Ok(Family::Helmholtz),
            other => Err(Error::Config(format!("unknown family '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum IcKind {
    /// `exp(−(x−π)²/(2σ²))`, `σ = π/2`.
    GaussWide,
    /// Same kernel with `σ = π/4`.
    GaussNarrow,
    /// `1 + sin x`.
    Sinusoid,
    /// `1 + sin(x − φ)` with `φ` in degrees.
    ShiftedSinusoid(f64),
}

impl IcKind {
    pub fn eval(self, x: f64) -> f64 {
        let gauss = |s: f64| (-(x - PI).powi(2) / (2.0 * s * s)).exp();
        match self {
            IcKind::GaussWide => gauss(PI / 2.0),
            IcKind::GaussNarrow => gauss(PI / 4.0),
            IcKind::Sinusoid => 1.0 + x.sin(),
            IcKind::ShiftedSinusoid(deg) => 1.0 + (x - deg.to_radians()).sin(),
        }
    }
}

impl fmt::Display for IcKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IcKind::GaussWide => f.write_str("gauss_wide"),
            IcKind::GaussNarrow => f.write_str("gauss_narrow"),
            IcKind::Sinusoid => f.write_str("sinusoid"),
            IcKind::ShiftedSinusoid(d) => write!(f, "sinusoid@{d}"),
        }
    }
}

impl FromStr for IcKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gauss_wide" => IcKind::GaussWide,
            "gauss_narrow" => IcKind::GaussNarrow,
            "sinusoid" => IcKind::Sinusoid,
            other => match other.strip_prefix("sinusoid@").map(str::parse::<f64>) {
                Some(Ok(d)) if d.is_finite() => IcKind::ShiftedSinusoid(d),
                _ => return Err(Error::UnknownIc(other.to_string())),
            },
        })
    }
}

impl TryFrom<String> for IcKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<IcKind> for String {
    fn from(k: IcKind) -> String {
        k.to_string()
    }
}

/// Initial profile `u₀(x)` for a named kind.
pub fn initial_condition(kind: &str, x: f64) -> Result<f64> {
    Ok(kind.parse::<IcKind>()?.eval(x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BcKind {
    Periodic,
    Dirichlet,
}

/// Equation family with its domain and side conditions. For Helmholtz the
/// second coordinate (`t_range`) is `y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub family: Family,
    pub ic: IcKind,
    pub bc: BcKind,
    pub x_range: (f64, f64),
    pub t_range: (f64, f64),
    /// Helmholtz `κ`; unused by CDR.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
}

impl ProblemSpec {
    /// `x ∈ [0, 2π]`, `t ∈ [0, 1]`, periodic in x.
    pub fn cdr(ic: IcKind) -> Self {
        ProblemSpec {
            family: Family::Cdr,
            ic,
            bc: BcKind::Periodic,
            x_range: (0.0, 2.0 * PI),
            t_range: (0.0, 1.0),
            kappa: 1.0,
        }
    }

    /// `[−1, 1]²` with Dirichlet data from the manufactured solution.
    pub fn helmholtz() -> Self {
        ProblemSpec {
            family: Family::Helmholtz,
            ic: IcKind::Sinusoid,
            bc: BcKind::Dirichlet,
            x_range: (-1.0, 1.0),
            t_range: (-1.0, 1.0),
            kappa: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 < r.1;
        if !ordered(self.x_range) || !ordered(self.t_range) {
            return Err(Error::InvalidInput(format!(
                "domain bounds {:?} x {:?} not ordered",
                self.x_range, self.t_range
            )));
        }
        if self.family == Family::Helmholtz && self.bc != BcKind::Dirichlet {
            return Err(Error::InvalidInput("helmholtz problems need dirichlet boundaries".into()));
        }
        Ok(())
    }

    /// Coefficient count `|μ|` of the family.
    pub fn mu_dim(&self) -> usize {
        match self.family {
            Family::Cdr => 3,
            Family::Helmholtz => 1,
        }
    }

    pub fn helmholtz_params(&self, mu: &[f64]) -> Result<HelmholtzParams> {
        match mu {
            [a] => Ok(HelmholtzParams { a: *a, kappa: self.kappa }),
            _ => Err(Error::dim("HelmholtzParams", format!("mu of length {}", mu.len()))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n_f: usize,
    pub n_u: usize,
    pub n_b: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Counts {
            n_f: 1000,
            n_u: 200,
            n_b: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BoundarySet {
    /// Shared times `t` of the pairs `(x_min, t)`, `(x_max, t)`.
    Periodic(Vec<f64>),
    /// Points on the domain boundary.
    Dirichlet(Vec<(f64, f64)>),
}

impl BoundarySet {
    pub fn len(&self) -> usize {
        match self {
            BoundarySet::Periodic(v) => v.len(),
            BoundarySet::Dirichlet(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollocationBatch {
    pub interior: Vec<(f64, f64)>,
    /// `x` positions on the initial line `t = t_min` (empty for Helmholtz).
    pub initial: Vec<f64>,
    pub boundary: BoundarySet,
}

/// I.i.d. uniform samples for each group.
pub fn sample_batch(spec: &ProblemSpec, counts: Counts, rng: &mut impl Rng) -> Result<CollocationBatch> {
    spec.validate()?;
    let (x0, x1) = spec.x_range;
    let (t0, t1) = spec.t_range;
    let interior = (0..counts.n_f)
        .map(|_| (rng.random_range(x0..=x1), rng.random_range(t0..=t1)))
        .collect();
    let (initial, boundary) = match spec.bc {
        BcKind::Periodic => {
            let initial = (0..counts.n_u).map(|_| rng.random_range(x0..=x1)).collect();
            let ts = (0..counts.n_b).map(|_| rng.random_range(t0..=t1)).collect();
            (initial, BoundarySet::Periodic(ts))
        }
        BcKind::Dirichlet => {
            let initial = if spec.family == Family::Cdr {
                (0..counts.n_u).map(|_| rng.random_range(x0..=x1)).collect()
            } else {
                Vec::new()
            };
            let pts = (0..counts.n_b)
                .map(|_| {
                    let side = rng.random_range(0..4u8);
                    let s = rng.random_range(0.0..=1.0);
                    match side {
                        0 => (x0, t0 + s * (t1 - t0)),
                        1 => (x1, t0 + s * (t1 - t0)),
                        2 => (x0 + s * (x1 - x0), t0),
                        _ => (x0 + s * (x1 - x0), t1),
                    }
                })
                .collect();
            (initial, BoundarySet::Dirichlet(pts))
        }
    };
    Ok(CollocationBatch {
        interior,
        initial,
        boundary,
    })
}

/// `r = u_t + βu_x − νu_xx − ρu(1−u)`.
pub fn cdr_residual(jet: &Jet1D, mu: &CdrParams) -> f64 {
    jet.u_t + mu.beta * jet.u_x - mu.nu * jet.u_xx - mu.rho * jet.u * (1.0 - jet.u)
}

/// `r = u_xx + u_yy + κ²u − q(x, y)`.
pub fn helmholtz_residual(jet: &Jet2D, p: &HelmholtzParams, x: f64, y: f64) -> f64 {
    jet.u_xx + jet.u_yy + p.kappa * p.kappa * jet.u - p.source(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn diffusion_eigenmode_has_zero_residual() {
        let mu = CdrParams::new(0.0, 0.7, 0.0).unwrap();
        for &(x, t) in &[(0.3, 0.1), (2.0, 0.9), (5.5, 0.4)] {
            let e = (-mu.nu * t).exp();
            let jet = Jet1D {
                u: 1.0 + e * f64::sin(x),
                u_x: e * f64::cos(x),
                u_t: -mu.nu * e * f64::sin(x),
                u_xx: -e * f64::sin(x),
            };
            assert!(cdr_residual(&jet, &mu).abs() <= 1e-15);
        }
    }

    #[test]
    fn logistic_cases() {
        let one = Jet1D {
            u: 1.0,
            ..Default::default()
        };
        assert_eq!(cdr_residual(&one, &CdrParams::new(0.0, 0.0, 5.0).unwrap()), 0.0);
        let half = Jet1D {
            u: 0.5,
            ..Default::default()
        };
        assert_eq!(cdr_residual(&half, &CdrParams::new(0.0, 0.0, 2.0).unwrap()), -0.5);
    }

    #[test]
    fn logistic_travelling_solution_is_exact() {
        // u = g e^{ρt} / (1 + g(e^{ρt}−1)), g = u₀(x−βt), u₀ = 0.5 + 0.25 sin, ν = 0.
        let mu = CdrParams::new(2.0, 0.0, 1.5).unwrap();
        for &(x, t) in &[(0.4, 0.2), (3.3, 0.7)] {
            let xi = x - mu.beta * t;
            let (g, gp) = (0.5 + 0.25 * xi.sin(), 0.25 * xi.cos());
            let e = (mu.rho * t).exp();
            let den = 1.0 + g * (e - 1.0);
            let u = g * e / den;
            let du_dg = e / (den * den);
            let u_x = du_dg * gp;
            let u_t = du_dg * (-mu.beta * gp) + g * mu.rho * e * (1.0 - g) / (den * den);
            let jet = Jet1D { u, u_x, u_t, u_xx: 0.0 };
            assert!(cdr_residual(&jet, &mu).abs() <= 1e-12);
        }
    }

    #[test]
    fn manufactured_helmholtz_residual_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p = HelmholtzParams::new(rng.random_range(2.5..3.0));
            let (x, y) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let k = p.a * PI;
            let u = p.exact(x, y);
            let jet = Jet2D { u, u_xx: -k * k * u, u_yy: -k * k * u };
            assert!(helmholtz_residual(&jet, &p, x, y).abs() <= 1e-9);
            let zero = Jet2D::default();
            assert_eq!(helmholtz_residual(&zero, &p, x, y), -p.source(x, y));
        }
        let p = HelmholtzParams { a: 3.0, kappa: 0.0 };
        let lin = Jet2D { u: 0.25, u_xx: 0.0, u_yy: 0.0 };
        assert_eq!(helmholtz_residual(&lin, &p, 0.25, 0.5), -p.source(0.25, 0.5));
    }

    #[test]
    fn initial_profiles() {
        assert_eq!(initial_condition("gauss_wide", PI).unwrap(), 1.0);
        assert_eq!(initial_condition("sinusoid", PI / 2.0).unwrap(), 2.0);
        for x in [PI - PI / 2.0, PI + PI / 2.0] {
            assert!((initial_condition("gauss_wide", x).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        }
        assert!((initial_condition("gauss_narrow", PI + PI / 4.0).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!(matches!(initial_condition("tophat", 0.0), Err(Error::UnknownIc(_))));
        let shifted: IcKind = "sinusoid@180".parse().unwrap();
        assert!((shifted.eval(PI / 2.0) - 0.0).abs() < 1e-15);
        assert_eq!(shifted.to_string().parse::<IcKind>().unwrap(), shifted);
    }

    #[test]
    fn batches_are_seeded_and_bounded() {
        let spec = ProblemSpec::cdr(IcKind::GaussWide);
        let c = Counts::default();
        let a = sample_batch(&spec, c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_batch(&spec, c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.interior.len(), a.initial.len(), a.boundary.len()), (1000, 200, 200));
        assert!(a
            .interior
            .iter()
            .all(|&(x, t)| (0.0..=2.0 * PI).contains(&x) && (0.0..=1.0).contains(&t)));

        let h = sample_batch(&ProblemSpec::helmholtz(), c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(h.initial.is_empty());
        let BoundarySet::Dirichlet(pts) = &h.boundary else {
            panic!("expected dirichlet points")
        };
        assert!(pts.iter().all(|&(x, y)| x.abs() == 1.0 || y.abs() == 1.0));
    }

    #[test]
    fn interior_samples_are_uniform() {
        let spec = ProblemSpec::cdr(IcKind::Sinusoid);
        let counts = Counts {
            n_f: 100_000,
            n_u: 1,
            n_b: 1,
        };
        let batch = sample_batch(&spec, counts, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let bins = 20;
        for axis in 0..2 {
            let mut hist = vec![0usize; bins];
            for &(x, t) in &batch.interior {
                let u = if axis == 0 { x / (2.0 * PI) } else { t };
                hist[((u * bins as f64) as usize).min(bins - 1)] += 1;
            }
            let expect = counts.n_f as f64 / bins as f64;
            let chi2: f64 = hist.iter().map(|&o| (o as f64 - expect).powi(2) / expect).sum();
            let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
            assert!(p > 0.01, "axis {axis}: chi2 {chi2}, p {p}");
        }
    }

    proptest! {
        #[test]
        fn residual_is_affine_in_each_coefficient(
            u in -2.0..2.0f64, ux in -5.0..5.0f64, ut in -5.0..5.0f64, uxx in -5.0..5.0f64,
            m1 in prop::array::uniform3(0.0..20.0f64), m2 in prop::array::uniform3(0.0..20.0f64),
        ) {
            let jet = Jet1D { u, u_x: ux, u_t: ut, u_xx: uxx };
            let p1 = CdrParams::new(m1[0], m1[1], m1[2]).unwrap();
            let p2 = CdrParams::new(m2[0], m2[1], m2[2]).unwrap();
            let mid = CdrParams::new((m1[0] + m2[0]) / 2.0, (m1[1] + m2[1]) / 2.0, (m1[2] + m2[2]) / 2.0).unwrap();
            let lhs = cdr_residual(&jet, &mid);
            let rhs = (cdr_residual(&jet, &p1) + cdr_residual(&jet, &p2)) / 2.0;
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }

        #[test]
        fn periodic_closed_forms_match_at_boundary(k in 1i32..6, phase in 0.0..6.3f64, t in 0.0..1.0f64) {
            let f = |x: f64| (k as f64 * x + phase).sin() * (-t).exp();
            prop_assert!((f(0.0) - f(2.0 * PI)).abs() <= 1e-12);
        }
    }
}
