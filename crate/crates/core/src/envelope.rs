//! Iterated-logarithm envelope functions, the integral test that splits
//! them, the LIL statistic and finite-horizon exceedance reports.
//!
//! "Almost always" and "infinitely often" cannot be observed at a finite
//! horizon. Reports use two proxies instead: no violation at any `n >= n0`,
//! and at least one hit in every dyadic window `[2^j, 2^(j+1))` inside
//! `[n0, N]`.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{median, quantile};

/// Paths shorter than this are rejected by [`lil_statistic`].
pub const LIL_MIN_DEPTH: usize = 10_000;
/// Largest `log t` the numeric integral test evaluates.
const LOG_T_MAX: f64 = 1e300;
const EXPONENT_MARGIN: f64 = 0.1;
const MAX_LEVEL: usize = 4;

/// `log psi` as a function of `log t`.
pub type LogPsiFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum PsiFamily {
    /// `psi_k(t) = 1 / prod_{i=1}^k log_(i) t`.
    IteratedLog,
    /// `psi_k(t) (log_(k) t)^(-eps)`.
    Perturbed,
    /// A user function given through `log psi(log t)`, valid for `t >= t0`.
    User { name: String, log_psi: LogPsiFn, t0: f64 },
}

impl fmt::Debug for PsiFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PsiFamily::IteratedLog => f.write_str("IteratedLog"),
            PsiFamily::Perturbed => f.write_str("Perturbed"),
            PsiFamily::User { name, t0, .. } => write!(f, "User({name}, t0 = {t0})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PsiSpec {
    pub family: PsiFamily,
    pub k: usize,
    pub eps: f64,
    /// Regularity exponent: `t^(1/2 - delta) psi(t)` should eventually increase.
    pub delta: f64,
}

/// `exp(exp(...exp(1)))` with `k` exponentials; `log_(i) t >= 1` for all
/// `i <= k` exactly when `t` is at least this.
fn tower(k: usize) -> f64 {
    (0..k).fold(1.0, |x, _| x.exp())
}

impl PsiSpec {
    pub fn iterated(k: usize) -> Self {
        Self {
            family: PsiFamily::IteratedLog,
            k,
            eps: 0.0,
            delta: 0.25,
        }
    }

    pub fn perturbed(k: usize, eps: f64) -> Self {
        Self {
            family: PsiFamily::Perturbed,
            k,
            eps,
            delta: 0.25,
        }
    }

    pub fn user(name: impl Into<String>, t0: f64, log_psi: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            family: PsiFamily::User {
                name: name.into(),
                log_psi: Arc::new(log_psi),
                t0,
            },
            k: 0,
            eps: 0.0,
            delta: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match &self.family {
            PsiFamily::IteratedLog | PsiFamily::Perturbed => self.k >= 1 && self.eps >= 0.0,
            PsiFamily::User { t0, .. } => *t0 > 1.0,
        };
        if ok && self.delta > 0.0 && self.delta < 0.5 {
            Ok(())
        } else {
            Err(Error::DomainError(format!("invalid psi spec {self:?}")))
        }
    }

    /// Smallest admissible `t`. May be `inf` when `k >= 4`.
    pub fn t0(&self) -> f64 {
        match &self.family {
            PsiFamily::User { t0, .. } => *t0,
            _ => tower(self.k),
        }
    }

    /// `log t0`, finite for `k <= 4`.
    fn log_t0(&self) -> f64 {
        match &self.family {
            PsiFamily::User { t0, .. } => t0.ln(),
            _ => tower(self.k - 1),
        }
    }

    pub fn label(&self) -> String {
        match &self.family {
            PsiFamily::IteratedLog => format!("psi_{}", self.k),
            PsiFamily::Perturbed => format!("psi_{}^({})", self.k, self.eps),
            PsiFamily::User { name, .. } => name.clone(),
        }
    }

    fn is_builtin(&self) -> bool {
        !matches!(self.family, PsiFamily::User { .. })
    }

    /// `log psi` at `log t = ell`, without the domain check.
    fn log_psi_at(&self, ell: f64) -> f64 {
        match &self.family {
            PsiFamily::User { log_psi, .. } => log_psi(ell),
            _ => {
                let mut x = ell;
                let mut acc = 0.0;
                for i in 1..=self.k {
                    acc -= x.ln();
                    if i < self.k {
                        x = x.ln();
                    }
                }
                // x is now log_(k) t, and acc = -sum_{i=1}^k log log_(i) t.
                if matches!(self.family, PsiFamily::Perturbed) {
                    acc -= self.eps * x.ln();
                }
                acc
            }
        }
    }
}

/// `psi(t)` for `t >= t0`.
pub fn psi_value(spec: &PsiSpec, t: f64) -> Result<f64> {
    spec.validate()?;
    let t0 = spec.t0();
    if !(t >= t0 * (1.0 - 1e-15)) {
        return Err(Error::DomainError(format!("t = {t} below t0 = {t0} for {}", spec.label())));
    }
    Ok(spec.log_psi_at(t.ln().max(spec.log_t0())).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegralClass {
    Convergent,
    Divergent,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegralTest {
    pub class: IntegralClass,
    /// `analytic` or `numeric`.
    pub method: String,
    /// Level `m` of the substitution `u = log_(m) t` that decided the class.
    pub level: Option<usize>,
    /// Extrapolated tail exponent of the integrand at that level.
    pub exponent: Option<f64>,
}

/// Classifies `int^inf psi(t) / t dt`.
pub fn integral_test(spec: &PsiSpec) -> IntegralTest {
    match spec.family {
        PsiFamily::IteratedLog => IntegralTest {
            class: IntegralClass::Divergent,
            method: "analytic".into(),
            level: Some(spec.k + 1),
            exponent: Some(0.0),
        },
        PsiFamily::Perturbed => IntegralTest {
            class: if spec.eps > 0.0 {
                IntegralClass::Convergent
            } else {
                IntegralClass::Divergent
            },
            method: "analytic".into(),
            level: Some(spec.k),
            exponent: Some(1.0 + spec.eps),
        },
        PsiFamily::User { .. } => integral_test_numeric(spec),
    }
}

/// Numeric classification. With `u = log_(m) t` the integral becomes
/// `int g_m(u) du` where `g_m = psi prod_{i<m} log_(i) t`. At each level the
/// decay exponent `p` of `g_m` at the top of the representable range is
/// extrapolated assuming a `1 / log u` correction; `p > 1` converges,
/// `p < 1` diverges and `p = 1` defers to the next level.
pub fn integral_test_numeric(spec: &PsiSpec) -> IntegralTest {
    let inconclusive = |level, exponent| IntegralTest {
        class: IntegralClass::Inconclusive,
        method: "numeric".into(),
        level,
        exponent,
    };
    if spec.validate().is_err() {
        return inconclusive(None, None);
    }
    let ell0 = spec.log_t0();
    let mut last = None;
    for m in 1..=MAX_LEVEL {
        // u = log_(m-1) ell; range [u_lo, u_hi].
        let down = |mut x: f64| {
            for _ in 1..m {
                x = x.ln();
            }
            x
        };
        let up = |mut x: f64| {
            for _ in 1..m {
                x = x.exp();
            }
            x
        };
        let (u_lo, u_hi) = (down(ell0.max(1.0 + 1e-9)), down(LOG_T_MAX));
        let log_g = |u: f64| {
            let ell = up(u);
            let mut acc = spec.log_psi_at(ell);
            let mut x = ell;
            for _ in 1..m {
                acc += x.ln();
                x = x.ln();
            }
            acc
        };
        let h: f64 = 0.05;
        let top = u_hi * (-h).exp();
        let mid = (0.5 * top.ln()).exp();
        if !(top.ln() > 0.2 && mid * (-h).exp() > u_lo) {
            return inconclusive(Some(m), last);
        }
        let slope = |u: f64| -(log_g(u * h.exp()) - log_g(u * (-h).exp())) / (2.0 * h);
        let (p_top, p_mid) = (slope(top), slope(mid));
        let p = 2.0 * p_top - p_mid;
        if !p.is_finite() {
            return inconclusive(Some(m), last);
        }
        last = Some(p);
        let class = if p > 1.0 + EXPONENT_MARGIN {
            IntegralClass::Convergent
        } else if p < 1.0 - EXPONENT_MARGIN {
            IntegralClass::Divergent
        } else {
            continue;
        };
        return IntegralTest {
            class,
            method: "numeric".into(),
            level: Some(m),
            exponent: Some(p),
        };
    }
    inconclusive(Some(MAX_LEVEL), last)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub decreasing: bool,
    /// `log t` beyond which `t^(1/2 - delta) psi(t)` increases on the grid.
    pub increasing_beyond: Option<f64>,
    /// `analytic` for the built-in families, `hypothesis-checked: grid-only` otherwise.
    pub label: String,
}

/// Checks monotonicity of `psi` and eventual increase of
/// `t^(1/2 - delta) psi(t)` on a log-spaced grid of `log t` up to `log_t_max`.
pub fn check_hypotheses(spec: &PsiSpec, log_t_max: f64, points: usize) -> Result<HypothesisCheck> {
    spec.validate()?;
    let lo = spec.log_t0();
    if !(log_t_max > lo) || points < 3 {
        return Err(Error::DomainError("hypothesis grid is empty".into()));
    }
    let ratio = (log_t_max / lo).ln() / (points - 1) as f64;
    let grid: Vec<f64> = (0..points).map(|i| lo * (ratio * i as f64).exp()).collect();
    let lp: Vec<f64> = grid.iter().map(|&l| spec.log_psi_at(l)).collect();
    let decreasing = lp.windows(2).all(|w| w[1] <= w[0]);
    let reg: Vec<f64> = grid.iter().zip(&lp).map(|(&l, &p)| (0.5 - spec.delta) * l + p).collect();
    let mut first = None;
    for i in (0..points - 1).rev() {
        if reg[i + 1] > reg[i] {
            first = Some(grid[i]);
        } else {
            break;
        }
    }
    Ok(HypothesisCheck {
        decreasing,
        increasing_beyond: first,
        label: if spec.is_builtin() {
            "analytic".into()
        } else {
            "hypothesis-checked: grid-only".into()
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LilSummary {
    pub depth: usize,
    pub sigma2: f64,
    /// Per-path `max_{N/2 <= n <= N} S_n / sqrt(2 sigma2 n log log n)`.
    pub values: Vec<f64>,
    pub median: f64,
    /// 5%, 25%, 75% and 95% quantiles.
    pub quantiles: [f64; 4],
}

/// The LIL statistic over paths `S_0, ..., S_N` of common depth `N`.
pub fn lil_statistic(paths: &[Vec<f64>], sigma2: f64) -> Result<LilSummary> {
    let depth = paths.iter().map(|p| p.len().saturating_sub(1)).min().unwrap_or(0);
    if depth < LIL_MIN_DEPTH {
        return Err(Error::DepthTooShallow {
            depth,
            required: LIL_MIN_DEPTH,
        });
    }
    if !(sigma2 > 0.0) {
        return Err(Error::DomainError(format!("sigma2 = {sigma2}")));
    }
    let values: Vec<f64> = paths
        .iter()
        .map(|p| {
            (depth / 2..=depth)
                .map(|n| {
                    let nf = n as f64;
                    p[n] / (2.0 * sigma2 * nf * nf.ln().ln()).sqrt()
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(LilSummary {
        depth,
        sigma2,
        median: median(&values),
        quantiles: [0.05, 0.25, 0.75, 0.95].map(|q| quantile(&values, q)),
        values,
    })
}

/// `-log phi(n)` for `phi(n) = exp(-scale sqrt(2 sigma2 n log log n))`.
pub fn lil_envelope(sigma2: f64, scale: f64) -> impl Fn(usize) -> f64 {
    move |n| {
        let nf = n as f64;
        scale * (2.0 * sigma2 * nf * nf.ln().ln()).sqrt()
    }
}

/// `-log phi(n)` for `phi(n) = exp(-sqrt(n) psi(n))`.
pub fn psi_envelope(spec: &PsiSpec) -> impl Fn(usize) -> f64 + '_ {
    move |n| psi_value(spec, n as f64).map_or(f64::NAN, |p| (n as f64).sqrt() * p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaExceedance {
    pub replica: usize,
    /// `#{n >= n0 : mass > phi(n)}`.
    pub above: usize,
    /// `#{n >= n0 : mass < phi(n)}`.
    pub below: usize,
    /// Per dyadic window, `#{n : mass >= phi(n)}`.
    pub window_at_or_above: Vec<usize>,
    /// Per dyadic window, `#{n : mass <= phi(n)}`.
    pub window_at_or_below: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSummary {
    pub label: String,
    pub n0: usize,
    pub horizon: usize,
    pub replicas: usize,
    pub windows: Vec<(usize, usize)>,
    /// Fraction with no `n >= n0` where `mass > phi(n)`: proxy for `mass <= phi` a.a.
    pub aa_below_fraction: f64,
    /// Fraction with no `n >= n0` where `mass < phi(n)`: proxy for `mass >= phi` a.a.
    pub aa_above_fraction: f64,
    /// Fraction with `mass >= phi(n)` somewhere in every window: proxy for i.o.
    pub io_above_fraction: f64,
    /// Fraction with `mass <= phi(n)` somewhere in every window: proxy for i.o.
    pub io_below_fraction: f64,
    pub per_replica: Vec<ReplicaExceedance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    /// `-log phi(n)` for `n = n0..=N`.
    pub neg_log_phi: Vec<f64>,
    /// Observed `-log mass` per replica for `n = n0..=N`.
    pub neg_log_mass: Vec<Vec<f64>>,
    /// Sign of `mass - phi(n)` per replica for `n = n0..=N`.
    pub comparison: Vec<Vec<i8>>,
    pub summary: EnvelopeSummary,
}

/// Dyadic windows `[2^j, 2^(j+1))` contained in `[n0, horizon]`.
pub fn dyadic_windows(n0: usize, horizon: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut a = 1usize;
    while 2 * a - 1 <= horizon {
        if a >= n0 {
            out.push((a, 2 * a));
        }
        a *= 2;
    }
    out
}

/// Compares `-log mass` series (index `n`, common horizon `N` = shortest
/// length minus one) against `-log phi(n)` from `n0` on.
pub fn envelope_exceedance(
    label: &str,
    neg_log_mass: &[Vec<f64>],
    neg_log_phi: impl Fn(usize) -> f64,
    n0: usize,
) -> Result<EnvelopeReport> {
    let horizon = neg_log_mass.iter().map(|s| s.len().saturating_sub(1)).min().unwrap_or(0);
    let windows = dyadic_windows(n0, horizon);
    if neg_log_mass.is_empty() || horizon < n0 {
        return Err(Error::DepthTooShallow {
            depth: horizon,
            required: n0,
        });
    }
    let phi: Vec<f64> = (n0..=horizon).map(&neg_log_phi).collect();
    if let Some(i) = phi.iter().position(|p| p.is_nan()) {
        return Err(Error::DomainError(format!("envelope undefined at n = {}", n0 + i)));
    }
    let mut masses = Vec::with_capacity(neg_log_mass.len());
    let mut comparison = Vec::with_capacity(neg_log_mass.len());
    let mut per_replica = Vec::with_capacity(neg_log_mass.len());
    for (r, series) in neg_log_mass.iter().enumerate() {
        let s = &series[n0..=horizon];
        if let Some(i) = s.iter().position(|x| !(*x < f64::INFINITY)) {
            return Err(Error::NonpositiveMass { replica: r, n: n0 + i });
        }
        // mass > phi  <=>  -log mass < -log phi.
        let cmp: Vec<i8> = s
            .iter()
            .zip(&phi)
            .map(|(&m, &p)| if m < p { 1 } else if m > p { -1 } else { 0 })
            .collect();
        let count = |range: std::ops::Range<usize>, f: &dyn Fn(i8) -> bool| cmp[range].iter().filter(|&&c| f(c)).count();
        let rel = |(a, b): (usize, usize)| (a - n0)..(b - n0);
        per_replica.push(ReplicaExceedance {
            replica: r,
            above: count(0..cmp.len(), &|c| c > 0),
            below: count(0..cmp.len(), &|c| c < 0),
            window_at_or_above: windows.iter().map(|&w| count(rel(w), &|c| c >= 0)).collect(),
            window_at_or_below: windows.iter().map(|&w| count(rel(w), &|c| c <= 0)).collect(),
        });
        masses.push(s.to_vec());
        comparison.push(cmp);
    }
    let reps = per_replica.len() as f64;
    let frac = |f: &dyn Fn(&ReplicaExceedance) -> bool| per_replica.iter().filter(|r| f(r)).count() as f64 / reps;
    let summary = EnvelopeSummary {
        label: label.to_string(),
        n0,
        horizon,
        replicas: per_replica.len(),
        aa_below_fraction: frac(&|r| r.above == 0),
        aa_above_fraction: frac(&|r| r.below == 0),
        io_above_fraction: frac(&|r| !windows.is_empty() && r.window_at_or_above.iter().all(|&c| c > 0)),
        io_below_fraction: frac(&|r| !windows.is_empty() && r.window_at_or_below.iter().all(|&c| c > 0)),
        windows,
        per_replica,
    };
    Ok(EnvelopeReport {
        neg_log_phi: phi,
        neg_log_mass: masses,
        comparison,
        summary,
    })
}

impl EnvelopeReport {
    pub const CSV_HEADER: &'static str = "replica,n,neg_log_phi,neg_log_mass,comparison";

    /// Plot-ready rows `(n, -log phi(n), -log mass)` per replica.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        let n0 = self.summary.n0;
        for (r, (masses, cmp)) in self.neg_log_mass.iter().zip(&self.comparison).enumerate() {
            for (i, (&m, &c)) in masses.iter().zip(cmp).enumerate() {
                writeln!(w, "{r},{},{:.17e},{:.17e},{c}", n0 + i, self.neg_log_phi[i], m)?;
            }
        }
        Ok(())
    }

    pub fn write_json_summary<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, &self.summary).map_err(|e| Error::DomainError(e.to_string()))
    }
}
