//! Offspring displacement laws: the point process of child positions
//! relative to the parent, its boundary-case normalization, and moment
//! diagnostics.
//!
//! All built-in laws have children that are i.i.d. given their count, so a
//! law is a count distribution plus a single per-child displacement law.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::GaussHermite;
use crate::stats::Welford;

/// Tolerance used when flagging a law as boundary-normalized.
pub const BOUNDARY_FLAG_TOL: f64 = 1e-6;
/// Default exponent excess in the `|V|^{3+eps}` moment.
pub const DEFAULT_EPS: f64 = 0.5;
/// Default power in the `L (log+ L)^p` moment.
pub const DEFAULT_P: f64 = 2.5;
/// Default tolerance of the boundary root finder.
pub const DEFAULT_NORMALIZE_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 200;
const PROB_TOL: f64 = 1e-12;
/// Ordered child tuples enumerated at most by exact moment routines.
const ENUMERATION_LIMIT: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub value: f64,
    pub prob: f64,
}

impl Atom {
    pub fn new(value: f64, prob: f64) -> Self {
        Self { value, prob }
    }
}

/// Per-child displacement distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Displacement {
    Atoms(Vec<Atom>),
    Gaussian { mean: f64, var: f64 },
}

impl Displacement {
    fn validate(&self) -> Result<()> {
        match self {
            Displacement::Atoms(atoms) => {
                if atoms.is_empty() {
                    return Err(Error::InvalidLaw("empty atom list".into()));
                }
                check_probabilities(atoms.iter().map(|a| a.prob), "displacement atoms")?;
                if atoms.iter().any(|a| !a.value.is_finite()) {
                    return Err(Error::InvalidLaw("non-finite atom value".into()));
                }
                Ok(())
            }
            Displacement::Gaussian { mean, var } => {
                if !mean.is_finite() || !var.is_finite() || *var <= 0.0 {
                    return Err(Error::InvalidLaw(format!(
                        "gaussian displacement needs finite mean and positive variance, got ({mean}, {var})"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Displacement::Atoms(atoms) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for a in atoms {
                    acc += a.prob;
                    if u < acc {
                        return a.value;
                    }
                }
                atoms.last().expect("validated nonempty").value
            }
            Displacement::Gaussian { mean, var } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + var.sqrt() * z
            }
        }
    }

    /// `E[exp(-beta U)]` in closed form.
    pub fn exp_moment(&self, beta: f64) -> f64 {
        match self {
            Displacement::Atoms(atoms) => atoms.iter().map(|a| a.prob * (-beta * a.value).exp()).sum(),
            Displacement::Gaussian { mean, var } => (-beta * mean + 0.5 * beta * beta * var).exp(),
        }
    }

    /// `E[U exp(-beta U)]` in closed form.
    fn linear_exp_moment(&self, beta: f64) -> f64 {
        match self {
            Displacement::Atoms(atoms) => atoms
                .iter()
                .map(|a| a.prob * a.value * (-beta * a.value).exp())
                .sum(),
            Displacement::Gaussian { mean, var } => (mean - beta * var) * self.exp_moment(beta),
        }
    }

    fn mean(&self) -> f64 {
        match self {
            Displacement::Atoms(atoms) => atoms.iter().map(|a| a.prob * a.value).sum(),
            Displacement::Gaussian { mean, .. } => *mean,
        }
    }

    fn values(&self) -> Option<Vec<f64>> {
        match self {
            Displacement::Atoms(atoms) => Some(atoms.iter().map(|a| a.value).collect()),
            Displacement::Gaussian { .. } => None,
        }
    }
}

/// Distribution of the number of children, `probs[k] = P[N = k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountLaw {
    probs: Vec<f64>,
}

impl CountLaw {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidLaw("empty child count distribution".into()));
        }
        check_probabilities(probs.iter().copied(), "child count")?;
        Ok(Self { probs })
    }

    pub fn fixed(k: usize) -> Self {
        let mut probs = vec![0.0; k + 1];
        probs[k] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean(&self) -> f64 {
        self.probs.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
    }

    /// The count if it is deterministic.
    pub fn fixed_value(&self) -> Option<usize> {
        let mut found = None;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                if found.is_some() {
                    return None;
                }
                found = Some(k);
            }
        }
        found
    }

    /// Probability generating function `E[s^N]`.
    pub fn pgf(&self, s: f64) -> f64 {
        self.probs.iter().rev().fold(0.0, |acc, p| acc * s + p)
    }

    /// Smallest fixed point of the generating function on [0, 1], the
    /// extinction probability of the Galton-Watson tree.
    pub fn extinction_probability(&self) -> f64 {
        let mut q = 0.0;
        for _ in 0..100_000 {
            let next = self.pgf(q);
            if (next - q).abs() < 1e-15 {
                return next;
            }
            q = next;
        }
        q
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if let Some(k) = self.fixed_value() {
            return k;
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.probs.len() - 1
    }

    /// Size-biased count: `P[K = k]` proportional to `k P[N = k]`.
    pub fn sample_size_biased<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if let Some(k) = self.fixed_value() {
            return k;
        }
        let mean = self.mean();
        let u: f64 = rng.random::<f64>() * mean;
        let mut acc = 0.0;
        for (k, p) in self.probs.iter().enumerate() {
            acc += k as f64 * p;
            if u < acc {
                return k;
            }
        }
        self.probs.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LawKind {
    FiniteAtom,
    GaussianBinary,
    UserTemplate,
}

/// Offspring point process with i.i.d. children given their count.
/// Immutable once built; normalization returns a new law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffspringLaw {
    kind: LawKind,
    count: CountLaw,
    displacement: Displacement,
    boundary_normalized: bool,
    lattice_span: Option<f64>,
}

impl OffspringLaw {
    /// Builds a supercritical law. The boundary flag is computed, not
    /// trusted from the caller.
    pub fn new(kind: LawKind, count: CountLaw, displacement: Displacement) -> Result<Self> {
        let mean = count.mean();
        if mean <= 1.0 {
            return Err(Error::NonSupercritical { mean });
        }
        Self::new_allow_subcritical(kind, count, displacement)
    }

    /// Like [`OffspringLaw::new`] without the supercriticality requirement,
    /// for degenerate and extinction experiments.
    pub fn new_allow_subcritical(kind: LawKind, count: CountLaw, displacement: Displacement) -> Result<Self> {
        displacement.validate()?;
        let lattice_span = displacement.values().and_then(|v| lattice_span(&v));
        let mut law = Self {
            kind,
            count,
            displacement,
            boundary_normalized: false,
            lattice_span,
        };
        let m0 = law.mean_children() * law.displacement.exp_moment(1.0);
        let m1 = law.mean_children() * law.displacement.linear_exp_moment(1.0);
        law.boundary_normalized = (m0 - 1.0).abs() < BOUNDARY_FLAG_TOL && m1.abs() < BOUNDARY_FLAG_TOL;
        Ok(law)
    }

    pub fn kind(&self) -> LawKind {
        self.kind
    }

    pub fn count(&self) -> &CountLaw {
        &self.count
    }

    pub fn displacement(&self) -> &Displacement {
        &self.displacement
    }

    pub fn is_boundary_normalized(&self) -> bool {
        self.boundary_normalized
    }

    /// Span `d` when every displacement lies in `d Z`.
    pub fn lattice_span(&self) -> Option<f64> {
        self.lattice_span
    }

    /// Children are i.i.d. given their count for every representable law.
    pub fn iid_children(&self) -> bool {
        true
    }

    pub fn mean_children(&self) -> f64 {
        self.count.mean()
    }

    /// `rho(beta) = E[sum_{|x|=1} exp(-beta V(x))]`.
    pub fn rho(&self, beta: f64) -> f64 {
        self.mean_children() * self.displacement.exp_moment(beta)
    }

    pub fn sample_offspring<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::new();
        self.sample_offspring_into(rng, &mut out);
        out
    }

    /// Appends one offspring realization to `out`.
    pub fn sample_offspring_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        let k = self.count.sample(rng);
        out.reserve(k);
        for _ in 0..k {
            out.push(self.displacement.sample(rng));
        }
    }
}

/// Two children, each displaced by `+d` with probability `1 - q` and `-d`
/// with probability `q`, where `d = arccosh 2` and `q = (2 - sqrt 3) / 4`.
/// The associated walk is the simple symmetric walk on `d Z`.
pub fn lattice_boundary_model() -> OffspringLaw {
    let d = LATTICE_SPAN;
    let q = (2.0 - 3f64.sqrt()) / 4.0;
    OffspringLaw::new(
        LawKind::FiniteAtom,
        CountLaw::fixed(2),
        Displacement::Atoms(vec![Atom::new(-d, q), Atom::new(d, 1.0 - q)]),
    )
    .expect("built-in lattice model is valid")
}

/// `arccosh 2 = log(2 + sqrt 3)`.
pub const LATTICE_SPAN: f64 = 1.316_957_896_924_816_7;

/// Two children, each displaced by an independent `Normal(2 log 2, 2 log 2)`.
pub fn gaussian_boundary_model() -> OffspringLaw {
    let a = 2.0 * std::f64::consts::LN_2;
    OffspringLaw::new(
        LawKind::GaussianBinary,
        CountLaw::fixed(2),
        Displacement::Gaussian { mean: a, var: a },
    )
    .expect("built-in gaussian model is valid")
}

/// Finds the affine reparametrization `V = theta U + a` of the template
/// displacements that puts the law in the boundary case.
pub fn normalize_to_boundary(template: &OffspringLaw, tol: f64) -> Result<OffspringLaw> {
    let en = template.mean_children();
    if en <= 1.0 {
        return Err(Error::NonSupercritical { mean: en });
    }
    let disp = &template.displacement;
    // Residual (log m0, m1 / m0) as a function of (theta, a).
    let residual = |theta: f64, a: f64| -> [f64; 2] {
        let m = disp.exp_moment(theta);
        let lin = disp.linear_exp_moment(theta);
        [en.ln() - a + m.ln(), a + theta * lin / m]
    };
    let theta0 = 1.0;
    let a0 = (en * disp.exp_moment(1.0)).ln();
    let (theta, a) = solve_2d(residual, [theta0, a0], tol, |m0m1| m0m1)?;
    let displacement = match disp {
        Displacement::Atoms(atoms) => Displacement::Atoms(
            atoms
                .iter()
                .map(|at| Atom::new(theta * at.value + a, at.prob))
                .collect(),
        ),
        Displacement::Gaussian { mean, var } => Displacement::Gaussian {
            mean: theta * mean + a,
            var: theta * theta * var,
        },
    };
    OffspringLaw::new(template.kind, template.count.clone(), displacement)
}

/// Treats the template displacement law as the step law of the associated
/// walk: finds `S = theta U + a` with `E S = 0` and `E exp(S) = E N`, then
/// returns the offspring law whose exponential tilt is that walk. For a
/// symmetric `+-1` template this yields the built-in lattice model.
pub fn normalize_walk_template(template: &OffspringLaw, tol: f64) -> Result<OffspringLaw> {
    let en = template.mean_children();
    if en <= 1.0 {
        return Err(Error::NonSupercritical { mean: en });
    }
    let disp = &template.displacement;
    let mean_u = disp.mean();
    let residual = |theta: f64, a: f64| -> [f64; 2] {
        [theta * mean_u + a, a + disp.exp_moment(-theta).ln() - en.ln()]
    };
    let (theta, a) = solve_2d(residual, [1.0, -mean_u], tol, |r| r)?;
    let displacement = match disp {
        Displacement::Atoms(atoms) => {
            let weights: Vec<f64> = atoms
                .iter()
                .map(|at| at.prob * (theta * at.value + a).exp() / en)
                .collect();
            let total: f64 = weights.iter().sum();
            Displacement::Atoms(
                atoms
                    .iter()
                    .zip(&weights)
                    .map(|(at, w)| Atom::new(theta * at.value + a, w / total))
                    .collect(),
            )
        }
        Displacement::Gaussian { mean, var } => {
            let s2 = theta * theta * var;
            Displacement::Gaussian {
                mean: theta * mean + a + s2,
                var: s2,
            }
        }
    };
    OffspringLaw::new(template.kind, template.count.clone(), displacement)
}

/// Damped Newton on a smooth 2-d system with a forward-difference Jacobian.
/// `accept` maps the residual to the quantity compared against `tol`.
fn solve_2d(
    f: impl Fn(f64, f64) -> [f64; 2],
    start: [f64; 2],
    tol: f64,
    accept: impl Fn([f64; 2]) -> [f64; 2],
) -> Result<(f64, f64)> {
    let norm = |r: [f64; 2]| r[0].hypot(r[1]);
    let finite = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite();
    let [mut x, mut y] = start;
    let mut r = f(x, y);
    for _ in 0..NEWTON_MAX_ITER {
        let acc = accept(r);
        // log m0 within tol/2 keeps |m0 - 1| within tol.
        if finite(r) && acc[0].abs() <= 0.5 * tol && acc[1].abs() <= 0.5 * tol {
            return Ok((x, y));
        }
        let h = 1e-7;
        let rx = f(x + h * x.abs().max(1.0), y);
        let ry = f(x, y + h * y.abs().max(1.0));
        let hx = h * x.abs().max(1.0);
        let hy = h * y.abs().max(1.0);
        let j = [
            [(rx[0] - r[0]) / hx, (ry[0] - r[0]) / hy],
            [(rx[1] - r[1]) / hx, (ry[1] - r[1]) / hy],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if !det.is_finite() || det.abs() < 1e-300 {
            break;
        }
        let dx = (r[0] * j[1][1] - r[1] * j[0][1]) / det;
        let dy = (j[0][0] * r[1] - j[1][0] * r[0]) / det;
        let mut step = 1.0;
        let current = norm(r);
        let mut improved = false;
        for _ in 0..60 {
            let nx = x - step * dx;
            let ny = y - step * dy;
            if nx > 0.0 {
                let nr = f(nx, ny);
                if finite(nr) && norm(nr) < current {
                    x = nx;
                    y = ny;
                    r = nr;
                    improved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let acc = accept(r);
    Err(Error::NoBoundarySolution {
        iterations: NEWTON_MAX_ITER,
        residual: acc[0].abs().max(acc[1].abs()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagnosticMethod {
    ClosedForm,
    Quadrature,
    MonteCarlo,
}

impl DiagnosticMethod {
    fn name(self) -> &'static str {
        match self {
            DiagnosticMethod::ClosedForm => "closed-form",
            DiagnosticMethod::Quadrature => "quadrature",
            DiagnosticMethod::MonteCarlo => "monte-carlo",
        }
    }
}

/// The boundary-case moments of a law, with standard errors for Monte
/// Carlo estimates (zero otherwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDiagnostics {
    pub method: DiagnosticMethod,
    pub m0: f64,
    pub m1: f64,
    pub sigma2: f64,
    /// `E[sum |V|^{3+eps} exp(-V)]`.
    pub abs_moment: f64,
    pub eps: f64,
    /// `E[L (log+ L)^p]` with `L = sum (1 + V+) exp(-V)`.
    pub l_moment: f64,
    pub p: f64,
    pub m0_se: f64,
    pub m1_se: f64,
    pub sigma2_se: f64,
    pub abs_moment_se: f64,
    pub l_moment_se: f64,
}

impl BoundaryDiagnostics {
    pub fn is_boundary(&self, tol: f64) -> bool {
        (self.m0 - 1.0).abs() < tol && self.m1.abs() < tol
    }
}

fn l_functional(children: &[f64], p: f64) -> f64 {
    let l: f64 = children.iter().map(|v| (1.0 + v.max(0.0)) * (-v).exp()).sum();
    if l > 1.0 {
        l * l.ln().powf(p)
    } else {
        0.0
    }
}

pub fn boundary_diagnostics<R: Rng + ?Sized>(
    law: &OffspringLaw,
    method: DiagnosticMethod,
    budget: usize,
    rng: &mut R,
) -> Result<BoundaryDiagnostics> {
    boundary_diagnostics_with(law, method, budget, DEFAULT_EPS, DEFAULT_P, rng)
}

pub fn boundary_diagnostics_with<R: Rng + ?Sized>(
    law: &OffspringLaw,
    method: DiagnosticMethod,
    budget: usize,
    eps: f64,
    p: f64,
    rng: &mut R,
) -> Result<BoundaryDiagnostics> {
    let en = law.mean_children();
    let pow = 3.0 + eps;
    let exact = |m0, m1, sigma2, abs_moment, l_moment| BoundaryDiagnostics {
        method,
        m0,
        m1,
        sigma2,
        abs_moment,
        eps,
        l_moment,
        p,
        m0_se: 0.0,
        m1_se: 0.0,
        sigma2_se: 0.0,
        abs_moment_se: 0.0,
        l_moment_se: 0.0,
    };
    match (method, &law.displacement) {
        (DiagnosticMethod::ClosedForm | DiagnosticMethod::Quadrature, Displacement::Atoms(atoms)) => {
            let moment = |f: &dyn Fn(f64) -> f64| -> f64 {
                en * atoms.iter().map(|a| a.prob * f(a.value) * (-a.value).exp()).sum::<f64>()
            };
            let l_moment = atom_l_moment(&law.count, atoms, p).ok_or(Error::MethodUnsupported {
                method: method.name(),
            })?;
            Ok(exact(
                moment(&|_| 1.0),
                moment(&|v| v),
                moment(&|v| v * v),
                moment(&|v| v.abs().powf(pow)),
                l_moment,
            ))
        }
        (DiagnosticMethod::ClosedForm, Displacement::Gaussian { .. }) => Err(Error::MethodUnsupported {
            method: method.name(),
        }),
        (DiagnosticMethod::Quadrature, Displacement::Gaussian { mean, var }) => {
            let rule = GaussHermite::default_rule();
            let sd = var.sqrt();
            // E[f(V) e^{-V}] = e^{-mean + var/2} E[f(V')] with V' ~ N(mean - var, var).
            let shift = (-mean + 0.5 * var).exp();
            let moment = |f: &dyn Fn(f64) -> f64| en * shift * rule.normal_expectation(mean - var, sd, f);
            let l_moment = match law.count.fixed_value() {
                Some(0) => 0.0,
                Some(1) => rule.normal_expectation(*mean, sd, |v| l_functional(&[v], p)),
                Some(2) => rule.normal_expectation_2d(*mean, sd, |a, b| l_functional(&[a, b], p)),
                _ => {
                    return Err(Error::MethodUnsupported {
                        method: "quadrature (more than two gaussian children)",
                    })
                }
            };
            // |v|^{3+eps} has a kink at 0, which Gauss-Hermite resolves poorly.
            let abs_moment =
                en * shift * crate::quadrature::normal_expectation_split(mean - var, sd, 0.0, |v| v.abs().powf(pow));
            Ok(exact(
                moment(&|_| 1.0),
                moment(&|v| v),
                moment(&|v| v * v),
                abs_moment,
                l_moment,
            ))
        }
        (DiagnosticMethod::MonteCarlo, _) => {
            if budget == 0 {
                return Err(Error::BudgetExceeded("monte-carlo diagnostics need budget > 0".into()));
            }
            let mut acc = [Welford::default(); 5];
            let mut children = Vec::new();
            for _ in 0..budget {
                children.clear();
                law.sample_offspring_into(rng, &mut children);
                let mut s = [0.0; 4];
                for &v in &children {
                    let w = (-v).exp();
                    s[0] += w;
                    s[1] += v * w;
                    s[2] += v * v * w;
                    s[3] += v.abs().powf(pow) * w;
                }
                for k in 0..4 {
                    acc[k].push(s[k]);
                }
                acc[4].push(l_functional(&children, p));
            }
            let e: Vec<_> = acc.iter().map(|a| a.estimate()).collect();
            Ok(BoundaryDiagnostics {
                method,
                m0: e[0].mean,
                m1: e[1].mean,
                sigma2: e[2].mean,
                abs_moment: e[3].mean,
                eps,
                l_moment: e[4].mean,
                p,
                m0_se: e[0].se,
                m1_se: e[1].se,
                sigma2_se: e[2].se,
                abs_moment_se: e[3].se,
                l_moment_se: e[4].se,
            })
        }
    }
}

/// Exact `E[L (log+ L)^p]` by enumerating every ordered child tuple.
fn atom_l_moment(count: &CountLaw, atoms: &[Atom], p: f64) -> Option<f64> {
    let a = atoms.len();
    let mut total = 0.0;
    let mut children = Vec::new();
    for (k, &pk) in count.probs().iter().enumerate() {
        if pk == 0.0 {
            continue;
        }
        let tuples = a.checked_pow(k as u32)?;
        if tuples > ENUMERATION_LIMIT {
            return None;
        }
        let mut idx = vec![0usize; k];
        for _ in 0..tuples {
            children.clear();
            let mut prob = pk;
            for &i in &idx {
                children.push(atoms[i].value);
                prob *= atoms[i].prob;
            }
            total += prob * l_functional(&children, p);
            for slot in idx.iter_mut() {
                *slot += 1;
                if *slot < a {
                    break;
                }
                *slot = 0;
            }
        }
    }
    Some(total)
}

fn check_probabilities(probs: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for p in probs {
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(Error::InvalidLaw(format!("{what}: probability {p} outside [0, 1]")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > PROB_TOL * 1e3 {
        return Err(Error::InvalidLaw(format!("{what}: probabilities sum to {sum}")));
    }
    Ok(())
}

/// Largest `d` with every value in `d Z`, if the values are commensurate.
pub fn lattice_span(values: &[f64]) -> Option<f64> {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    let tol = 1e-9 * scale;
    let nonzero: Vec<f64> = values.iter().map(|v| v.abs()).filter(|v| *v > tol).collect();
    let mut g = nonzero[0];
    for &v in &nonzero[1..] {
        let (mut a, mut b) = (g.max(v), g.min(v));
        let mut steps = 0;
        while b > tol && steps < 200 {
            let r = a % b;
            let r = if b - r < tol { 0.0 } else { r };
            a = b;
            b = r;
            steps += 1;
        }
        if steps >= 200 || a <= tol {
            return None;
        }
        g = a;
    }
    let commensurate = values.iter().all(|v| {
        let k = v / g;
        (k - k.round()).abs() < 1e-7
    });
    (commensurate && g > 1e-6 * scale).then_some(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(2024)
    }

    #[test]
    fn lattice_span_constant_matches_arccosh() {
        assert!((LATTICE_SPAN - (2.0 + 3f64.sqrt()).ln()).abs() < 1e-15);
        assert!((LATTICE_SPAN.cosh() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn lattice_model_two_atom_sums() {
        // Closed-form two-atom oracle: 2(q e^d + (1-q) e^-d), 2d(-q e^d + (1-q) e^-d).
        let d = (2.0 + 3f64.sqrt()).ln();
        let q = (2.0 - 3f64.sqrt()) / 4.0;
        let m0 = 2.0 * (q * d.exp() + (1.0 - q) * (-d).exp());
        let m1 = 2.0 * d * (-q * d.exp() + (1.0 - q) * (-d).exp());
        let s2 = 2.0 * d * d * (q * d.exp() + (1.0 - q) * (-d).exp());
        assert!((m0 - 1.0).abs() < 1e-14);
        assert!(m1.abs() < 1e-14);
        assert!((s2 - d * d).abs() < 1e-13);
        assert!((d * d - 1.73438).abs() < 1e-5);

        let law = lattice_boundary_model();
        let diag = boundary_diagnostics(&law, DiagnosticMethod::ClosedForm, 0, &mut rng()).unwrap();
        assert!((diag.m0 - m0).abs() < 1e-14);
        assert!((diag.m1 - m1).abs() < 1e-14);
        assert!((diag.sigma2 - s2).abs() < 1e-13);
        assert!(diag.abs_moment.is_finite() && diag.l_moment.is_finite());
        assert_eq!(diag.m0_se, 0.0);
        assert!(law.is_boundary_normalized());
        assert!((law.lattice_span().unwrap() - d).abs() < 1e-12);
    }

    #[test]
    fn gaussian_model_quadrature_against_closed_form_mgf() {
        // Oracle: E[V^k e^{-V}] for V ~ N(a, s2) via the Gaussian MGF:
        // e^{-a + s2/2} E[W^k], W ~ N(a - s2, s2).
        let a = 2.0 * std::f64::consts::LN_2;
        let s2 = a;
        let law = gaussian_boundary_model();
        let diag = boundary_diagnostics(&law, DiagnosticMethod::Quadrature, 0, &mut rng()).unwrap();
        let shift = (-a + s2 / 2.0).exp();
        let wm = a - s2;
        assert!((diag.m0 - 2.0 * shift).abs() < 1e-10);
        assert!((diag.m1 - 2.0 * shift * wm).abs() < 1e-10);
        assert!((diag.sigma2 - 2.0 * shift * (wm * wm + s2)).abs() < 1e-10);
        assert!((diag.sigma2 - 1.386294).abs() < 1e-6);
        assert!(diag.is_boundary(1e-10));
        assert!(!law.lattice_span().is_some());
    }

    #[test]
    fn gaussian_abs_moment_against_trapezoid() {
        // Independent oracle: plain trapezoid on a wide grid.
        let law = gaussian_boundary_model();
        let diag = boundary_diagnostics(&law, DiagnosticMethod::Quadrature, 0, &mut rng()).unwrap();
        let (a, s2) = (2.0 * std::f64::consts::LN_2, 2.0 * std::f64::consts::LN_2);
        let sd: f64 = s2.sqrt();
        let h = 1e-4;
        let mut sum = 0.0;
        let mut v = a - 20.0 * sd;
        while v < a + 20.0 * sd {
            let dens = (-(v - a).powi(2) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt();
            sum += v.abs().powf(3.5) * (-v).exp() * dens * h;
            v += h;
        }
        assert!((diag.abs_moment - 2.0 * sum).abs() < 1e-6 * diag.abs_moment, "{} vs {}", diag.abs_moment, 2.0 * sum);
    }

    #[test]
    fn closed_form_unsupported_for_gaussian() {
        let err = boundary_diagnostics(&gaussian_boundary_model(), DiagnosticMethod::ClosedForm, 0, &mut rng());
        assert!(matches!(err, Err(Error::MethodUnsupported { .. })));
    }

    #[test]
    fn monte_carlo_m0_within_three_se() {
        let law = lattice_boundary_model();
        let diag = boundary_diagnostics(&law, DiagnosticMethod::MonteCarlo, 1_000_000, &mut rng()).unwrap();
        assert!((diag.m0 - 1.0).abs() < 3.0 * diag.m0_se, "{diag:?}");
        assert!(diag.m1.abs() < 3.0 * diag.m1_se, "{diag:?}");
        let d2 = LATTICE_SPAN * LATTICE_SPAN;
        assert!((diag.sigma2 - d2).abs() < 3.0 * diag.sigma2_se, "{diag:?}");
    }

    #[test]
    fn normalize_gaussian_template() {
        let template = OffspringLaw::new(
            LawKind::UserTemplate,
            CountLaw::fixed(2),
            Displacement::Gaussian { mean: 0.0, var: 1.0 },
        )
        .unwrap();
        let law = normalize_to_boundary(&template, 1e-10).unwrap();
        let Displacement::Gaussian { mean, var } = *law.displacement() else {
            panic!("expected gaussian")
        };
        let two_ln2 = 2.0 * std::f64::consts::LN_2;
        assert!((mean - two_ln2).abs() < 1e-9);
        assert!((var - two_ln2).abs() < 1e-9);
        assert!(law.is_boundary_normalized());
    }

    #[test]
    fn normalize_is_a_fixed_point_on_boundary_laws() {
        for law in [lattice_boundary_model(), gaussian_boundary_model()] {
            let again = normalize_to_boundary(&law, 1e-10).unwrap();
            match (law.displacement(), again.displacement()) {
                (Displacement::Atoms(a), Displacement::Atoms(b)) => {
                    for (x, y) in a.iter().zip(b) {
                        assert!((x.value - y.value).abs() < 1e-9);
                        assert_eq!(x.prob, y.prob);
                    }
                }
                (Displacement::Gaussian { mean: m1, var: v1 }, Displacement::Gaussian { mean: m2, var: v2 }) => {
                    assert!((m1 - m2).abs() < 1e-9 && (v1 - v2).abs() < 1e-9);
                }
                _ => panic!("kind changed"),
            }
        }
    }

    #[test]
    fn symmetric_two_point_template_has_no_affine_solution() {
        // log(2 cosh t) > t tanh t for all t, so no affine map works.
        let template = OffspringLaw::new(
            LawKind::UserTemplate,
            CountLaw::fixed(2),
            Displacement::Atoms(vec![Atom::new(-1.0, 0.5), Atom::new(1.0, 0.5)]),
        )
        .unwrap();
        assert!(matches!(
            normalize_to_boundary(&template, 1e-10),
            Err(Error::NoBoundarySolution { .. })
        ));
    }

    #[test]
    fn walk_template_recovers_lattice_model() {
        let template = OffspringLaw::new(
            LawKind::UserTemplate,
            CountLaw::fixed(2),
            Displacement::Atoms(vec![Atom::new(-1.0, 0.5), Atom::new(1.0, 0.5)]),
        )
        .unwrap();
        let law = normalize_walk_template(&template, 1e-12).unwrap();
        let Displacement::Atoms(atoms) = law.displacement() else { panic!() };
        let q = (2.0 - 3f64.sqrt()) / 4.0;
        assert!((atoms[0].value + LATTICE_SPAN).abs() < 1e-9);
        assert!((atoms[1].value - LATTICE_SPAN).abs() < 1e-9);
        assert!((atoms[0].prob - q).abs() < 1e-9);
        assert!(law.is_boundary_normalized());
    }

    #[test]
    fn walk_template_recovers_gaussian_model() {
        let template = OffspringLaw::new(
            LawKind::UserTemplate,
            CountLaw::fixed(2),
            Displacement::Gaussian { mean: 0.0, var: 1.0 },
        )
        .unwrap();
        let law = normalize_walk_template(&template, 1e-12).unwrap();
        let Displacement::Gaussian { mean, var } = *law.displacement() else { panic!() };
        assert!((mean - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((var - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn normalize_random_count_template() {
        let template = OffspringLaw::new(
            LawKind::UserTemplate,
            CountLaw::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            Displacement::Atoms(vec![Atom::new(-1.0, 0.2), Atom::new(0.5, 0.5), Atom::new(2.0, 0.3)]),
        )
        .unwrap();
        let law = normalize_to_boundary(&template, 1e-10).unwrap();
        let diag = boundary_diagnostics(&law, DiagnosticMethod::ClosedForm, 0, &mut rng()).unwrap();
        assert!(diag.is_boundary(1e-9), "{diag:?}");
        assert!(diag.sigma2 > 0.0);
    }

    #[test]
    fn subcritical_is_rejected() {
        let err = OffspringLaw::new(
            LawKind::FiniteAtom,
            CountLaw::new(vec![0.5, 0.5]).unwrap(),
            Displacement::Atoms(vec![Atom::new(1.0, 1.0)]),
        );
        assert!(matches!(err, Err(Error::NonSupercritical { .. })));
    }

    #[test]
    fn bad_probabilities_are_rejected() {
        assert!(CountLaw::new(vec![0.5, 0.6]).is_err());
        let err = OffspringLaw::new(
            LawKind::FiniteAtom,
            CountLaw::fixed(2),
            Displacement::Atoms(vec![Atom::new(1.0, 1.2), Atom::new(-1.0, -0.2)]),
        );
        assert!(matches!(err, Err(Error::InvalidLaw(_))));
    }

    #[test]
    fn sampling_supports() {
        let mut r = rng();
        let law = lattice_boundary_model();
        for _ in 0..1000 {
            let c = law.sample_offspring(&mut r);
            assert_eq!(c.len(), 2);
            assert!(c.iter().all(|&v| v == LATTICE_SPAN || v == -LATTICE_SPAN));
        }
        let empty = OffspringLaw::new_allow_subcritical(
            LawKind::FiniteAtom,
            CountLaw::fixed(0),
            Displacement::Atoms(vec![Atom::new(0.0, 1.0)]),
        )
        .unwrap();
        for _ in 0..100 {
            assert!(empty.sample_offspring(&mut r).is_empty());
        }
    }

    #[test]
    fn gaussian_sample_mean() {
        let mut r = rng();
        let law = gaussian_boundary_model();
        let mut acc = Welford::default();
        for _ in 0..500_000 {
            for v in law.sample_offspring(&mut r) {
                acc.push(v);
            }
        }
        let est = acc.estimate();
        assert!(est.within(2.0 * std::f64::consts::LN_2, 3.0), "{est:?}");
    }

    #[test]
    fn atom_sampling_chi_square() {
        let law = OffspringLaw::new(
            LawKind::FiniteAtom,
            CountLaw::fixed(2),
            Displacement::Atoms(vec![Atom::new(-1.0, 0.2), Atom::new(0.0, 0.5), Atom::new(3.0, 0.3)]),
        )
        .unwrap();
        let mut r = rng();
        let mut counts = [0u64; 3];
        for _ in 0..50_000 {
            for v in law.sample_offspring(&mut r) {
                let i = if v < -0.5 { 0 } else if v < 1.0 { 1 } else { 2 };
                counts[i] += 1;
            }
        }
        let t = crate::stats::chi_square_gof(&counts, &[0.2, 0.5, 0.3]);
        assert!(t.p_value > 0.01, "{t:?}");
    }

    #[test]
    fn extinction_fixed_point() {
        let c = CountLaw::new(vec![0.25, 0.25, 0.5]).unwrap();
        // 0.25 + 0.25 s + 0.5 s^2 = s  =>  s = 1/2.
        assert!((c.extinction_probability() - 0.5).abs() < 1e-12);
        assert_eq!(CountLaw::fixed(2).extinction_probability(), 0.0);
    }

    #[test]
    fn lattice_span_detection() {
        assert_eq!(lattice_span(&[-2.0, 4.0, 6.0]), Some(2.0));
        assert!(lattice_span(&[1.0, std::f64::consts::SQRT_2]).is_none());
        assert!((lattice_span(&[0.3, -0.9]).unwrap() - 0.3).abs() < 1e-12);
    }
}
