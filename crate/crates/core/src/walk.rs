//! The associated one-dimensional walk, its descending ladder heights, the
//! renewal function `R`, and the walk conditioned to stay above `-alpha`
//! (the Doob transform with harmonic function `R(. + alpha)`).

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::offspring::{Atom, Displacement, OffspringLaw};
use crate::rng::{derive_stream, par_replicas, purpose};
use crate::stats::{normal_pdf, normal_sf, Estimate, Welford};

/// Step cap for a single ladder-height excursion.
pub const DEFAULT_STEP_CAP: usize = 10_000_000;
/// Independent batches behind Monte Carlo renewal tables.
pub const RENEWAL_BATCHES: usize = 16;
/// Bootstrap renewal sequences per batch.
pub const SEQUENCES_PER_BATCH: usize = 16_384;
/// Grid points per standard deviation for continuous tables.
pub const GRID_PER_SIGMA: f64 = 50.0;
/// Table range in standard deviations for continuous tables.
pub const RANGE_IN_SIGMA: f64 = 50.0;
const MEAN_TOL: f64 = 1e-9;
const LATTICE_SNAP: f64 = 1e-9;
/// Gaussian kernels are truncated this many standard deviations out.
const KERNEL_SPREAD: f64 = 8.0;
const REJECTION_BUDGET: usize = 1_000_000;

/// Step law of a centered walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkLaw {
    step: Displacement,
    lattice_span: Option<f64>,
    mean: f64,
    variance: f64,
}

impl WalkLaw {
    pub fn new(step: Displacement) -> Result<Self> {
        let (mean, variance, lattice_span) = match &step {
            Displacement::Atoms(atoms) => {
                let total: f64 = atoms.iter().map(|a| a.prob).sum();
                if (total - 1.0).abs() > 1e-9 || atoms.iter().any(|a| a.prob < 0.0) {
                    return Err(Error::InvalidLaw(format!("walk step probabilities sum to {total}")));
                }
                let mean: f64 = atoms.iter().map(|a| a.prob * a.value).sum();
                let var = atoms.iter().map(|a| a.prob * (a.value - mean).powi(2)).sum();
                let values: Vec<f64> = atoms.iter().map(|a| a.value).collect();
                (mean, var, crate::offspring::lattice_span(&values))
            }
            Displacement::Gaussian { mean, var } => (*mean, *var, None),
        };
        if mean.abs() >= MEAN_TOL {
            return Err(Error::InvalidLaw(format!("walk step has mean {mean}, expected 0")));
        }
        if !(variance > 0.0) {
            return Err(Error::InvalidLaw("walk step is degenerate".into()));
        }
        Ok(Self {
            step,
            lattice_span,
            mean,
            variance,
        })
    }

    pub fn step(&self) -> &Displacement {
        &self.step
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn sigma(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn lattice_span(&self) -> Option<f64> {
        self.lattice_span
    }

    /// Lattice walk whose only downward step is one span.
    pub fn is_downward_skip_free(&self) -> bool {
        match (&self.step, self.lattice_span) {
            (Displacement::Atoms(atoms), Some(d)) => {
                let min = atoms
                    .iter()
                    .filter(|a| a.prob > 0.0)
                    .fold(f64::INFINITY, |m, a| m.min(a.value));
                (min + d).abs() < LATTICE_SNAP * d.max(1.0)
            }
            _ => false,
        }
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(&self.step).expect("step law serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn sample_step<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.step.sample(rng)
    }

    /// `(S_1, ..., S_n)` from `S_0 = 0`.
    pub fn sample_path<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let mut s = 0.0;
        (0..n)
            .map(|_| {
                s += self.sample_step(rng);
                self.snap(s)
            })
            .collect()
    }

    /// Rounds lattice states to the nearest lattice point.
    pub fn snap(&self, x: f64) -> f64 {
        match self.lattice_span {
            Some(d) => (x / d).round() * d,
            None => x,
        }
    }
}

/// Step law `E[f(S_1)] = E[sum_{|x|=1} f(V(x)) exp(-V(x))]`.
pub fn associated_walk(law: &OffspringLaw) -> Result<WalkLaw> {
    let en = law.mean_children();
    if !law.is_boundary_normalized() {
        return Err(Error::NotBoundaryNormalized {
            m0: law.rho(1.0),
            m1: walk_mean_of(law),
        });
    }
    let step = match law.displacement() {
        Displacement::Atoms(atoms) => {
            let weights: Vec<f64> = atoms.iter().map(|a| en * a.prob * (-a.value).exp()).collect();
            let total: f64 = weights.iter().sum();
            Displacement::Atoms(
                atoms
                    .iter()
                    .zip(&weights)
                    .map(|(a, w)| Atom::new(a.value, w / total))
                    .collect(),
            )
        }
        Displacement::Gaussian { mean, var } => {
            let m = mean - var;
            Displacement::Gaussian {
                mean: if m.abs() < MEAN_TOL { 0.0 } else { m },
                var: *var,
            }
        }
    };
    WalkLaw::new(step)
}

fn walk_mean_of(law: &OffspringLaw) -> f64 {
    let en = law.mean_children();
    match law.displacement() {
        Displacement::Atoms(atoms) => en * atoms.iter().map(|a| a.prob * a.value * (-a.value).exp()).sum::<f64>(),
        Displacement::Gaussian { mean, var } => (mean - var) * law.rho(1.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderSummary {
    /// Samples of `|H_1|`, in replica order, overflows omitted.
    pub heights: Vec<f64>,
    pub mean_abs: Estimate,
    pub overflows: usize,
    pub step_cap: usize,
}

/// First strictly descending ladder height `H_1 = S_tau`, `tau = inf{n >= 1: S_n < 0}`,
/// or `None` when the path stays nonnegative for `step_cap` steps.
pub fn sample_ladder_height<R: Rng + ?Sized>(walk: &WalkLaw, step_cap: usize, rng: &mut R) -> Option<f64> {
    let tol = walk.lattice_span().map_or(0.0, |d| LATTICE_SNAP * d);
    let mut s = 0.0;
    for _ in 0..step_cap {
        s += walk.sample_step(rng);
        if s < -tol {
            return Some(walk.snap(s));
        }
    }
    None
}

/// Monte Carlo sample of `|H_1|`, replica `i` on stream `(seed, i, LADDER)`.
pub fn ladder_heights(walk: &WalkLaw, reps: usize, step_cap: usize, seed: u64) -> Result<LadderSummary> {
    if reps == 0 {
        return Err(Error::DomainError("ladder sampling needs reps > 0".into()));
    }
    let draws = par_replicas(seed, purpose::LADDER, reps, |_, rng| sample_ladder_height(walk, step_cap, rng));
    let heights: Vec<f64> = draws.iter().flatten().map(|h| -h).collect();
    let overflows = reps - heights.len();
    if heights.is_empty() {
        return Err(Error::HorizonExceeded);
    }
    Ok(LadderSummary {
        mean_abs: Estimate::from_samples(&heights),
        heights,
        overflows,
        step_cap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenewalMethod {
    ExactLattice,
    MonteCarlo,
}

impl RenewalMethod {
    pub fn name(self) -> &'static str {
        match self {
            RenewalMethod::ExactLattice => "exact-lattice",
            RenewalMethod::MonteCarlo => "monte-carlo",
        }
    }
}

/// Tabulated renewal function on the grid `u_k = k h`, extended linearly
/// with slope `c0` past the last grid point. Lattice tables are step
/// functions; continuous tables interpolate linearly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenewalTable {
    method: RenewalMethod,
    h: f64,
    lattice: bool,
    values: Vec<f64>,
    se: Vec<f64>,
    /// Independent per-batch tables behind a Monte Carlo estimate.
    batches: Vec<Vec<f64>>,
    c0: f64,
    c0_se: f64,
    mean_abs_ladder: Estimate,
    c3: f64,
    overflows: usize,
    walk_fingerprint: String,
}

impl RenewalTable {
    pub fn method(&self) -> RenewalMethod {
        self.method
    }

    pub fn grid_step(&self) -> f64 {
        self.h
    }

    pub fn u_max(&self) -> f64 {
        (self.values.len() - 1) as f64 * self.h
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn standard_errors(&self) -> &[f64] {
        &self.se
    }

    pub fn batch_count(&self) -> usize {
        self.batches.len()
    }

    /// Extension slope, `1 / E|H_1|`.
    pub fn c0(&self) -> f64 {
        self.c0
    }

    pub fn c0_se(&self) -> f64 {
        self.c0_se
    }

    pub fn mean_abs_ladder(&self) -> Estimate {
        self.mean_abs_ladder
    }

    /// Smallest `c` with `R(u + x) - R(u) <= c (1 + x)` over grid pairs.
    pub fn c3(&self) -> f64 {
        self.c3
    }

    pub fn ladder_overflows(&self) -> usize {
        self.overflows
    }

    pub fn walk_fingerprint(&self) -> &str {
        &self.walk_fingerprint
    }

    pub fn is_lattice(&self) -> bool {
        self.lattice
    }

    pub fn eval(&self, u: f64) -> f64 {
        eval_table(&self.values, self.h, self.lattice, self.c0, u)
    }

    /// Like [`RenewalTable::eval`] but rejects non-finite arguments.
    pub fn checked_eval(&self, u: f64) -> Result<f64> {
        if u.is_finite() {
            Ok(self.eval(u))
        } else {
            Err(Error::RenewalDomainExceeded(u))
        }
    }

    /// `R` from batch `b` alone.
    pub fn eval_batch(&self, b: usize, u: f64) -> f64 {
        eval_table(&self.batches[b], self.h, self.lattice, self.c0, u)
    }

    /// Standard error of `eval(u)` from the batch spread; 0 for exact tables.
    pub fn se_eval(&self, u: f64) -> f64 {
        if self.batches.is_empty() {
            return 0.0;
        }
        let vals: Vec<f64> = (0..self.batches.len()).map(|b| self.eval_batch(b, u)).collect();
        Estimate::from_samples(&vals).se
    }

    /// A copy with every value passed through `f` (for perturbation tests).
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> RenewalTable {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = f(*v));
        for b in &mut out.batches {
            b.iter_mut().for_each(|v| *v = f(*v));
        }
        out
    }

    /// CSV with a commented header recording method, walk fingerprint,
    /// `c0` and `E|H_1|`, then rows `u,R,se`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# method={}", self.method.name())?;
        writeln!(w, "# walk={}", self.walk_fingerprint)?;
        writeln!(w, "# c0={:.12e}", self.c0)?;
        writeln!(
            w,
            "# mean_abs_ladder={:.12e} se={:.6e}",
            self.mean_abs_ladder.mean, self.mean_abs_ladder.se
        )?;
        writeln!(w, "u,R,se")?;
        for (k, (v, s)) in self.values.iter().zip(&self.se).enumerate() {
            writeln!(w, "{:.12e},{:.12e},{:.6e}", k as f64 * self.h, v, s)?;
        }
        Ok(())
    }
}

fn eval_table(values: &[f64], h: f64, lattice: bool, slope: f64, u: f64) -> f64 {
    if u < 0.0 {
        return 0.0;
    }
    let last = values.len() - 1;
    let u_max = last as f64 * h;
    if lattice {
        let k = (u / h + LATTICE_SNAP).floor();
        if k <= last as f64 {
            values[k as usize]
        } else {
            values[last] + slope * (k - last as f64) * h
        }
    } else if u >= u_max {
        values[last] + slope * (u - u_max)
    } else {
        let pos = u / h;
        let k = pos.floor() as usize;
        let frac = pos - k as f64;
        values[k] + frac * (values[k + 1] - values[k])
    }
}

fn fit_c3(values: &[f64], h: f64) -> f64 {
    let mut c3: f64 = 0.0;
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            c3 = c3.max((values[j] - values[i]) / (1.0 + (j - i) as f64 * h));
        }
    }
    c3
}

/// Builds the renewal table of the walk's descending ladder process,
/// `R(u) = sum_{k >= 0} P[H_k >= -u]`.
///
/// `exact-lattice` applies to downward skip-free lattice walks, where
/// `H_k = -k d`. `monte-carlo` samples `reps` ladder heights, splits them
/// into independent batches, and estimates each batch's renewal function
/// from bootstrap renewal sequences; standard errors come from the spread
/// of the batch tables.
pub fn build_renewal(
    walk: &WalkLaw,
    u_max: f64,
    grid: f64,
    method: RenewalMethod,
    reps: usize,
    seed: u64,
) -> Result<RenewalTable> {
    build_renewal_with_cap(walk, u_max, grid, method, reps, DEFAULT_STEP_CAP, seed)
}

pub fn build_renewal_with_cap(
    walk: &WalkLaw,
    u_max: f64,
    grid: f64,
    method: RenewalMethod,
    reps: usize,
    step_cap: usize,
    seed: u64,
) -> Result<RenewalTable> {
    if !(u_max > 0.0) {
        return Err(Error::DomainError(format!("u_max must be positive, got {u_max}")));
    }
    match method {
        RenewalMethod::ExactLattice => {
            let d = walk.lattice_span().ok_or_else(|| Error::MethodMismatch {
                method: method.name(),
                reason: "walk is not lattice".into(),
            })?;
            if !walk.is_downward_skip_free() {
                return Err(Error::MethodMismatch {
                    method: method.name(),
                    reason: "walk can jump down more than one lattice step".into(),
                });
            }
            let kmax = (u_max / d).ceil() as usize;
            let values: Vec<f64> = (0..=kmax).map(|k| (k + 1) as f64).collect();
            let c3 = fit_c3(&values, d);
            Ok(RenewalTable {
                method,
                h: d,
                lattice: true,
                se: vec![0.0; values.len()],
                values,
                batches: Vec::new(),
                c0: 1.0 / d,
                c0_se: 0.0,
                mean_abs_ladder: Estimate::exact(d),
                c3,
                overflows: 0,
                walk_fingerprint: walk.fingerprint(),
            })
        }
        RenewalMethod::MonteCarlo => {
            let lattice = walk.lattice_span();
            let h = lattice.unwrap_or(grid);
            if !(h > 0.0) {
                return Err(Error::DomainError(format!("grid step must be positive, got {grid}")));
            }
            if reps < RENEWAL_BATCHES * 2 {
                return Err(Error::DomainError(format!(
                    "monte-carlo renewal needs at least {} ladder samples",
                    RENEWAL_BATCHES * 2
                )));
            }
            let ladder = ladder_heights(walk, reps, step_cap, seed)?;
            let npts = (u_max / h).ceil() as usize + 1;
            let per = ladder.heights.len() / RENEWAL_BATCHES;
            let batches: Vec<Vec<f64>> = par_replicas(seed, purpose::RENEWAL, RENEWAL_BATCHES, |b, rng| {
                let sample = &ladder.heights[b * per..(b + 1) * per];
                bootstrap_renewal(sample, h, npts, lattice.is_some(), rng)
            });
            let mut values = vec![0.0; npts];
            let mut se = vec![0.0; npts];
            for k in 0..npts {
                let mut acc = Welford::default();
                for b in &batches {
                    acc.push(b[k]);
                }
                let e = acc.estimate();
                values[k] = e.mean;
                se[k] = e.se;
            }
            let m = ladder.mean_abs_ladder_estimate();
            let c0 = 1.0 / m.mean;
            let c0_se = m.se / (m.mean * m.mean);
            let c3 = fit_c3(&values, h);
            Ok(RenewalTable {
                method,
                h,
                lattice: lattice.is_some(),
                values,
                se,
                batches,
                c0,
                c0_se,
                mean_abs_ladder: m,
                c3,
                overflows: ladder.overflows,
                walk_fingerprint: walk.fingerprint(),
            })
        }
    }
}

impl LadderSummary {
    fn mean_abs_ladder_estimate(&self) -> Estimate {
        self.mean_abs
    }
}

/// Mean count of renewal epochs `0 = T_0 < T_1 < ...` at or below each grid
/// point, with increments resampled from `sample`.
fn bootstrap_renewal<R: Rng + ?Sized>(sample: &[f64], h: f64, npts: usize, lattice: bool, rng: &mut R) -> Vec<f64> {
    let u_max = (npts - 1) as f64 * h;
    let mut hist = vec![0u64; npts];
    for _ in 0..SEQUENCES_PER_BATCH {
        let mut t = 0.0;
        loop {
            // Epoch t counts toward every grid point u_k >= t.
            let bin = if lattice {
                (t / h - LATTICE_SNAP).round() as usize
            } else {
                (t / h).ceil() as usize
            };
            if bin >= npts {
                break;
            }
            hist[bin] += 1;
            t += sample[rng.random_range(0..sample.len())];
            if t > u_max + h {
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(npts);
    let mut cum = 0u64;
    for c in hist {
        cum += c;
        out.push(cum as f64 / SEQUENCES_PER_BATCH as f64);
    }
    out
}

/// Default table for a walk: exact for skip-free lattice walks, Monte Carlo
/// on `h = sigma / 50` up to `50 sigma` otherwise.
pub fn default_renewal(walk: &WalkLaw, reps: usize, seed: u64) -> Result<RenewalTable> {
    let sigma = walk.sigma();
    if walk.is_downward_skip_free() {
        build_renewal(walk, RANGE_IN_SIGMA * sigma, sigma, RenewalMethod::ExactLattice, 0, seed)
    } else {
        build_renewal(
            walk,
            RANGE_IN_SIGMA * sigma,
            sigma / GRID_PER_SIGMA,
            RenewalMethod::MonteCarlo,
            reps,
            seed,
        )
    }
}

/// `E[g(S_1) 1{S_1 >= lo}]`; `g` may have kinks every `breaks` from `lo`.
fn step_expectation(walk: &WalkLaw, lo: f64, breaks: f64, g: impl Fn(f64) -> f64) -> f64 {
    displacement_expectation(walk.step(), lo, breaks, g)
}

/// `E[g(U) 1{U >= lo}]` for a displacement law, exact for atoms and by
/// composite Simpson on `[lo, mean + 10 sd]` for Gaussians, with panel edges
/// on `lo + k breaks / 4`.
pub(crate) fn displacement_expectation(step: &Displacement, lo: f64, breaks: f64, g: impl Fn(f64) -> f64) -> f64 {
    match step {
        Displacement::Atoms(atoms) => atoms
            .iter()
            .filter(|a| a.value >= lo - LATTICE_SNAP)
            .map(|a| a.prob * g(a.value))
            .sum(),
        Displacement::Gaussian { mean, var } => {
            let sd = var.sqrt();
            let a = lo.max(mean - 10.0 * sd);
            let b = mean + 10.0 * sd;
            if a >= b {
                return 0.0;
            }
            // Panels of width breaks / 4, starting at lo so kinks fall on panel edges.
            let panel = breaks / 4.0;
            let start = lo + ((a - lo) / panel).floor() * panel;
            let panels = ((b - start) / panel).ceil() as usize;
            let f = |y: f64| {
                if y < lo {
                    0.0
                } else {
                    g(y) * normal_pdf((y - mean) / sd) / sd
                }
            };
            let mut sum = 0.0;
            for i in 0..panels {
                let x0 = start + i as f64 * panel;
                let x1 = x0 + panel;
                sum += panel / 6.0 * (f(x0) + 4.0 * f(0.5 * (x0 + x1)) + f(x1));
            }
            sum
        }
    }
}

/// `R(u) - E[R(S_1 + u) 1{S_1 >= -u}]`. Monte Carlo tables report the mean
/// and standard error over their independent batches.
pub fn renewal_identity_residual(renewal: &RenewalTable, walk: &WalkLaw, u: f64) -> Result<Estimate> {
    if u < 0.0 {
        return Err(Error::DomainError(format!("harmonicity residual needs u >= 0, got {u}")));
    }
    let residual = |r: &dyn Fn(f64) -> f64| r(u) - step_expectation(walk, -u, renewal.h, |s| r(s + u));
    if renewal.batches.is_empty() {
        return Ok(Estimate::exact(residual(&|x| renewal.eval(x))));
    }
    let mut acc = Welford::default();
    for b in 0..renewal.batches.len() {
        acc.push(residual(&|x| renewal.eval_batch(b, x)));
    }
    Ok(acc.estimate())
}

/// Normalizing mass `E[R(x + S_1 + alpha) 1{x + S_1 >= -alpha}]` of the
/// conditioned kernel at state `x`; equals `R(x + alpha)` when `R` is
/// harmonic.
pub fn kernel_mass(walk: &WalkLaw, renewal: &RenewalTable, alpha: f64, x: f64) -> f64 {
    step_expectation(walk, -alpha - x, renewal.h, |s| renewal.eval(x + s + alpha))
}

/// Samples `y >= floor` with density proportional to
/// `weight(y) * phi((y - center) / sd)` where `weight` is nondecreasing.
///
/// The window `[max(floor, center - 8 sd), center + 8 sd]` is cut into blocks
/// of width `sd / 4`; a block is chosen by its envelope mass
/// `weight(block end) * max phi * width`, a point is proposed uniformly in
/// it and accepted with the ratio of the true density to the envelope.
pub(crate) fn sample_weighted_gaussian<R: Rng + ?Sized>(
    center: f64,
    sd: f64,
    floor: f64,
    weight: impl Fn(f64) -> f64,
    rng: &mut R,
) -> Result<f64> {
    let lo = floor.max(center - KERNEL_SPREAD * sd);
    let hi = center + KERNEL_SPREAD * sd;
    if lo >= hi {
        return Err(Error::DomainError(format!(
            "kernel window empty: floor {floor} above center {center} + {KERNEL_SPREAD} sd"
        )));
    }
    let width = sd / 4.0;
    let nblocks = ((hi - lo) / width).ceil() as usize;
    // (start, end, weight bound, density bound, cumulative envelope mass)
    let mut blocks: Vec<(f64, f64, f64, f64, f64)> = Vec::with_capacity(nblocks);
    let mut total = 0.0;
    let mut inside_lower = 0.0;
    for j in 0..nblocks {
        let a = lo + j as f64 * width;
        let b = (a + width).min(hi);
        let wmax = weight(b);
        let z = (center.clamp(a, b) - center) / sd;
        let phimax = (-0.5 * z * z).exp();
        total += wmax * phimax * (b - a);
        let (za, zb) = ((a - center) / sd, (b - center) / sd);
        inside_lower += weight(a) * (-0.5 * za.abs().max(zb.abs()).powi(2)).exp() * (b - a);
        blocks.push((a, b, wmax, phimax, total));
    }
    // Mass cut off above the window is negligible against the kernel mass.
    debug_assert!(
        normal_sf(KERNEL_SPREAD) * sd * (2.0 * std::f64::consts::PI).sqrt() * (weight(hi + 4.0 * sd) + 1.0)
            <= 1e-8 * inside_lower
    );
    if !(total > 0.0) {
        return Err(Error::DomainError("kernel has zero mass".into()));
    }
    for _ in 0..REJECTION_BUDGET {
        let target = rng.random::<f64>() * total;
        let idx = blocks.iter().position(|blk| target < blk.4).unwrap_or(blocks.len() - 1);
        let (a, b, wmax, phimax, _) = blocks[idx];
        let y = a + rng.random::<f64>() * (b - a);
        let z = (y - center) / sd;
        let accept = (-0.5 * z * z).exp() / phimax * weight(y) / wmax;
        if rng.random::<f64>() < accept {
            return Ok(y);
        }
    }
    Err(Error::RejectionBudgetExceeded(REJECTION_BUDGET))
}

/// One step of the walk conditioned to stay in `[-alpha, inf)`:
/// `P(x, dy) = 1{y >= -alpha} R(y + alpha) P(x + S_1 in dy) / R(x + alpha)`.
pub fn conditioned_step<R: Rng + ?Sized>(
    state: f64,
    walk: &WalkLaw,
    renewal: &RenewalTable,
    alpha: f64,
    rng: &mut R,
) -> Result<f64> {
    let slack = walk.lattice_span().map_or(0.0, |d| LATTICE_SNAP * d);
    if state < -alpha - slack {
        return Err(Error::StateBelowBarrier {
            state,
            barrier: -alpha,
        });
    }
    match walk.step() {
        Displacement::Atoms(atoms) => {
            let x = walk.snap(state);
            let weights = atom_kernel_weights(x, atoms, renewal, alpha, slack);
            let idx = pick_weighted(&weights, rng)?;
            Ok(walk.snap(x + atoms[idx].value))
        }
        Displacement::Gaussian { mean, var } => {
            sample_weighted_gaussian(state + mean, var.sqrt(), -alpha, |y| renewal.eval(y + alpha), rng)
        }
    }
}

fn atom_kernel_weights(x: f64, atoms: &[Atom], renewal: &RenewalTable, alpha: f64, slack: f64) -> Vec<f64> {
    atoms
        .iter()
        .map(|a| {
            let y = x + a.value;
            if y >= -alpha - slack {
                a.prob * renewal.eval(y + alpha)
            } else {
                0.0
            }
        })
        .collect()
}

/// The conditioned kernel from `state` as `(next state, probability)` pairs,
/// for walks with finitely many atoms. Probabilities are the unnormalized
/// weights divided by `R(state + alpha)`, so their sum exposes any
/// harmonicity defect of the table.
pub fn conditioned_kernel(
    state: f64,
    walk: &WalkLaw,
    renewal: &RenewalTable,
    alpha: f64,
) -> Result<Vec<(f64, f64)>> {
    let Displacement::Atoms(atoms) = walk.step() else {
        return Err(Error::MethodMismatch {
            method: "conditioned-kernel",
            reason: "walk step is not atomic".into(),
        });
    };
    let slack = walk.lattice_span().map_or(0.0, |d| LATTICE_SNAP * d);
    if state < -alpha - slack {
        return Err(Error::StateBelowBarrier {
            state,
            barrier: -alpha,
        });
    }
    let x = walk.snap(state);
    let norm = renewal.eval(x + alpha);
    Ok(atoms
        .iter()
        .zip(atom_kernel_weights(x, atoms, renewal, alpha, slack))
        .map(|(a, w)| (walk.snap(x + a.value), w / norm))
        .collect())
}

pub(crate) fn pick_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DomainError("kernel has zero mass".into()));
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if target < acc {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionedPath {
    pub alpha: f64,
    pub start: f64,
    /// `S_1, ..., S_n`.
    pub states: Vec<f64>,
    pub method: String,
}

impl ConditionedPath {
    pub fn last(&self) -> f64 {
        self.states.last().copied().unwrap_or(self.start)
    }
}

pub fn conditioned_path<R: Rng + ?Sized>(
    walk: &WalkLaw,
    renewal: &RenewalTable,
    alpha: f64,
    n: usize,
    rng: &mut R,
) -> Result<ConditionedPath> {
    conditioned_path_from(walk, renewal, alpha, 0.0, n, rng)
}

pub fn conditioned_path_from<R: Rng + ?Sized>(
    walk: &WalkLaw,
    renewal: &RenewalTable,
    alpha: f64,
    start: f64,
    n: usize,
    rng: &mut R,
) -> Result<ConditionedPath> {
    let mut states = Vec::with_capacity(n);
    let mut x = start;
    for _ in 0..n {
        x = conditioned_step(x, walk, renewal, alpha, rng)?;
        states.push(x);
    }
    let method = match walk.step() {
        Displacement::Atoms(_) => "atom-enumeration",
        Displacement::Gaussian { .. } => "block-rejection",
    };
    Ok(ConditionedPath {
        alpha,
        start,
        states,
        method: method.into(),
    })
}

/// `reps` independent conditioned paths, replica `i` on stream
/// `(seed, i, CONDITIONED)`.
pub fn conditioned_paths(
    walk: &WalkLaw,
    renewal: &RenewalTable,
    alpha: f64,
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<ConditionedPath>> {
    par_replicas(seed, purpose::CONDITIONED, reps, |_, rng| {
        conditioned_path(walk, renewal, alpha, n, rng)
    })
    .into_iter()
    .collect()
}

/// `P[min_{n >= 1} S_n >= x | S_0 = y] = R(y - x) / R(alpha + y)` under the
/// conditioned law; the inequality is weak at lattice points.
pub fn stay_above_probability(renewal: &RenewalTable, alpha: f64, y: f64, x: f64) -> Result<f64> {
    let slack = 1e-9 * (1.0 + y.abs());
    if !(y + slack >= x && x + slack >= -alpha) {
        return Err(Error::DomainError(format!(
            "need y >= x >= -alpha, got y = {y}, x = {x}, alpha = {alpha}"
        )));
    }
    Ok(renewal.eval(y - x) / renewal.eval(alpha + y))
}

/// Monte Carlo of the stay-above event from `y`: simulate `horizon` steps,
/// then close the remaining future with the exact conditional probability
/// at the horizon state.
#[allow(clippy::too_many_arguments)]
pub fn stay_above_monte_carlo(
    walk: &WalkLaw,
    renewal: &RenewalTable,
    alpha: f64,
    y: f64,
    x: f64,
    horizon: usize,
    reps: usize,
    seed: u64,
) -> Result<Estimate> {
    let slack = walk.lattice_span().map_or(0.0, |d| LATTICE_SNAP * d);
    let vals: Vec<Result<f64>> = par_replicas(seed, purpose::CONDITIONED, reps, |_, rng| {
        let path = conditioned_path_from(walk, renewal, alpha, y, horizon, rng)?;
        if path.states.iter().any(|&s| s < x - slack) {
            return Ok(0.0);
        }
        let end = path.last();
        Ok(renewal.eval(end - x) / renewal.eval(alpha + end))
    });
    let mut acc = Welford::default();
    for v in vals {
        acc.push(v?);
    }
    Ok(acc.estimate())
}

/// `P[min_{k >= n} S_k <= x]` under the conditioned law from 0 for each `n`
/// in `ns`, all from the same simulated paths. Paths run to `horizon` and
/// the future beyond it is closed analytically, so each path contributes a
/// value nonincreasing in `n`.
#[allow(clippy::too_many_arguments)]
pub fn min_tail_curve(
    walk: &WalkLaw,
    renewal: &RenewalTable,
    alpha: f64,
    x: f64,
    ns: &[usize],
    horizon: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<Estimate>> {
    if ns.iter().any(|&n| n > horizon || n == 0) {
        return Err(Error::DomainError("need 1 <= n <= horizon".into()));
    }
    if x < -alpha {
        return Ok(vec![Estimate::exact(0.0); ns.len()]);
    }
    // Complement event {min > x} equals {min >= x'} with x' the next state above x.
    let (x_next, slack) = match walk.lattice_span() {
        Some(d) => (((x / d) + LATTICE_SNAP).floor() * d + d, LATTICE_SNAP * d),
        None => (x, 0.0),
    };
    let rows: Vec<Result<Vec<f64>>> = par_replicas(seed, purpose::CONDITIONED, reps, |_, rng| {
        let path = conditioned_path(walk, renewal, alpha, horizon, rng)?;
        let end = path.last();
        let closure = 1.0 - renewal.eval(end - x_next) / renewal.eval(alpha + end);
        // suffix_min[k] = min of S_{k+1..=horizon}.
        let mut suffix = vec![f64::INFINITY; horizon + 1];
        for k in (0..horizon).rev() {
            suffix[k] = suffix[k + 1].min(path.states[k]);
        }
        Ok(ns
            .iter()
            .map(|&n| if suffix[n - 1] <= x + slack { 1.0 } else { closure })
            .collect())
    });
    let mut accs = vec![Welford::default(); ns.len()];
    for row in rows {
        for (a, v) in accs.iter_mut().zip(row?) {
            a.push(v);
        }
    }
    Ok(accs.iter().map(Welford::estimate).collect())
}

#[allow(clippy::too_many_arguments)]
pub fn min_tail_probability(
    walk: &WalkLaw,
    renewal: &RenewalTable,
    alpha: f64,
    x: f64,
    n: usize,
    horizon: usize,
    reps: usize,
    seed: u64,
) -> Result<Estimate> {
    Ok(min_tail_curve(walk, renewal, alpha, x, &[n], horizon, reps, seed)?[0])
}

/// Paths of the plain walk, replica `i` on stream `(seed, i, WALK)`.
pub fn walk_paths(walk: &WalkLaw, n: usize, reps: usize, seed: u64) -> Vec<Vec<f64>> {
    par_replicas(seed, purpose::WALK, reps, |_, rng| walk.sample_path(n, rng))
}

/// Stream used for ad-hoc single draws in examples and bindings.
pub fn stream(seed: u64, replica: u64) -> crate::rng::Stream {
    derive_stream(seed, replica, purpose::CONDITIONED)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offspring::{gaussian_boundary_model, lattice_boundary_model, LATTICE_SPAN};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: f64 = LATTICE_SPAN;

    fn lattice() -> (WalkLaw, RenewalTable) {
        let w = associated_walk(&lattice_boundary_model()).unwrap();
        let r = build_renewal(&w, 60.0 * D, D, RenewalMethod::ExactLattice, 0, 0).unwrap();
        (w, r)
    }

    #[test]
    fn lattice_walk_is_simple_symmetric() {
        let w = associated_walk(&lattice_boundary_model()).unwrap();
        let Displacement::Atoms(atoms) = w.step() else { panic!() };
        // Enumeration oracle: 2 q e^d and 2 (1 - q) e^-d.
        let q = (2.0 - 3f64.sqrt()) / 4.0;
        assert!((2.0 * q * D.exp() - 0.5).abs() < 1e-14);
        for a in atoms {
            assert!((a.prob - 0.5).abs() < 1e-14);
            assert!((a.value.abs() - D).abs() < 1e-15);
        }
        assert!(w.mean().abs() < 1e-14);
        assert!((w.variance() - D * D).abs() < 1e-13);
        assert!(w.is_downward_skip_free());
    }

    #[test]
    fn gaussian_walk_is_centered_normal() {
        let w = associated_walk(&gaussian_boundary_model()).unwrap();
        assert_eq!(
            *w.step(),
            Displacement::Gaussian {
                mean: 0.0,
                var: 2.0 * std::f64::consts::LN_2
            }
        );
    }

    #[test]
    fn unnormalized_law_is_rejected() {
        let law = OffspringLaw::new(
            crate::offspring::LawKind::UserTemplate,
            crate::offspring::CountLaw::fixed(2),
            Displacement::Gaussian { mean: 0.0, var: 1.0 },
        )
        .unwrap();
        assert!(matches!(associated_walk(&law), Err(Error::NotBoundaryNormalized { .. })));
    }

    #[test]
    fn lattice_ladder_height_is_one_step() {
        let (w, _) = lattice();
        let s = ladder_heights(&w, 2000, 1_000_000, 3).unwrap();
        let ok: Vec<_> = s.heights.iter().filter(|&&h| (h - D).abs() < 1e-12).collect();
        assert_eq!(ok.len() + s.overflows, 2000);
        assert!(s.overflows < 10);
    }

    #[test]
    fn exact_lattice_table() {
        let (_, r) = lattice();
        for k in 0..=20 {
            assert_eq!(r.eval(k as f64 * D), (k + 1) as f64);
            assert_eq!(r.eval(k as f64 * D + 0.5 * D), (k + 1) as f64);
        }
        assert_eq!(r.eval(-0.1), 0.0);
        assert_eq!(r.eval(200.0 * D), 201.0);
        assert!((r.c0() - 1.0 / D).abs() < 1e-15);
        assert!(r.c3() <= 1.0 / D + 1e-12);
    }

    #[test]
    fn exact_lattice_rejects_gaussian() {
        let w = associated_walk(&gaussian_boundary_model()).unwrap();
        assert!(matches!(
            build_renewal(&w, 10.0, 0.1, RenewalMethod::ExactLattice, 0, 0),
            Err(Error::MethodMismatch { .. })
        ));
    }

    #[test]
    fn lattice_harmonicity_is_exact() {
        let (w, r) = lattice();
        // Hand check: (R(4d) + R(2d)) / 2 = 4 = R(3d).
        assert!(renewal_identity_residual(&r, &w, 3.0 * D).unwrap().mean.abs() < 1e-12);
        for k in 0..10 {
            assert!(renewal_identity_residual(&r, &w, k as f64 * D).unwrap().mean.abs() < 1e-12);
        }
    }

    #[test]
    fn shifted_table_residual_is_detected() {
        let (w, r) = lattice();
        let bad = r.map_values(|v| v + 0.1);
        // Residual 0.1 P[S_1 < -u]: 0.05 at u = 0, 0 above.
        let res = renewal_identity_residual(&bad, &w, 0.0).unwrap().mean;
        assert!((res - 0.05).abs() < 1e-12);
        let scaled = r.map_values(|v| 1.1 * v);
        assert!(renewal_identity_residual(&scaled, &w, 2.0 * D).unwrap().mean.abs() < 1e-12);
    }

    #[test]
    fn lattice_kernel_enumeration() {
        let (w, r) = lattice();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(conditioned_step(0.0, &w, &r, 0.0, &mut rng).unwrap(), D);
        }
        let n = 100_000;
        let ups = (0..n)
            .filter(|_| conditioned_step(D, &w, &r, 0.0, &mut rng).unwrap() > 1.5 * D)
            .count();
        let p = ups as f64 / n as f64;
        assert!((p - 0.75).abs() < 3.0 * (0.75f64 * 0.25 / n as f64).sqrt() + 1e-9, "{p}");
        assert!(matches!(
            conditioned_step(-2.0 * D, &w, &r, 0.0, &mut rng),
            Err(Error::StateBelowBarrier { .. })
        ));
    }

    #[test]
    fn stay_above_values() {
        let (_, r) = lattice();
        assert_eq!(stay_above_probability(&r, 0.0, 3.0 * D, D).unwrap(), 0.75);
        assert_eq!(stay_above_probability(&r, 2.0, 1.0, -2.0).unwrap(), 1.0);
        assert!(matches!(stay_above_probability(&r, 0.0, 1.0, 2.0), Err(Error::DomainError(_))));
    }

    #[test]
    fn min_tail_is_monotone_and_zero_below_barrier() {
        let (w, r) = lattice();
        let ns = [1, 4, 16, 64, 256];
        let est = min_tail_curve(&w, &r, 0.0, 2.0 * D, &ns, 256, 500, 5).unwrap();
        for pair in est.windows(2) {
            assert!(pair[1].mean <= pair[0].mean);
        }
        let zero = min_tail_curve(&w, &r, 1.0, -1.5, &ns, 256, 10, 5).unwrap();
        assert!(zero.iter().all(|e| e.mean == 0.0));
    }

    #[test]
    fn gaussian_kernel_sampler_matches_density() {
        // Oracle: weight 1 + max(y, 0) against a normal density, moments by
        // direct numerical integration.
        let weight = |y: f64| 1.0 + y.max(0.0);
        let (c, sd, floor) = (0.3, 1.2, -0.5);
        let mut z = 0.0;
        let mut m1 = 0.0;
        let h = 1e-4;
        let mut y = floor;
        while y < c + 12.0 * sd {
            let f = weight(y) * normal_pdf((y - c) / sd);
            z += f * h;
            m1 += y * f * h;
            y += h;
        }
        let mean = m1 / z;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<f64> = (0..200_000)
            .map(|_| sample_weighted_gaussian(c, sd, floor, weight, &mut rng).unwrap())
            .collect();
        assert!(xs.iter().all(|&v| v >= floor));
        let est = Estimate::from_samples(&xs);
        assert!(est.within(mean, 3.5), "{est:?} vs {mean}");
    }
}
