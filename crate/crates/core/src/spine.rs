//! The spine under the truncated change of measure: size-biased
//! reproduction along a distinguished ray, ordinary branching off it, and
//! the decomposition of ball masses along the ray.
//!
//! Children are i.i.d. given their count for every representable law, so
//! the spine step is sampled exactly: a size-biased count, a uniform spine
//! slot, a spine displacement from the tilted density
//! `R(alpha + v + u) exp(-u) 1{v + u >= -alpha}` relative to the child law,
//! and ordinary displacements for the siblings.

use std::io::Write;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::cascade::c8;
use crate::error::{Error, Result};
use crate::offspring::{Displacement, OffspringLaw};
use crate::rng::{par_replicas, purpose};
use crate::stats::{ks_two_sample, quantile, TestResult};
use crate::walk::{conditioned_paths, displacement_expectation, pick_weighted, sample_weighted_gaussian, RenewalTable, WalkLaw};

/// Default side-subtree depth.
pub const DEFAULT_SIDE_DEPTH: usize = 20;
/// Default per-generation cap inside a side subtree.
pub const DEFAULT_SIDE_CAP: usize = 1 << 20;
const UNBIASED_BUDGET: usize = 1_000_000;

/// How the spine child's displacement is drawn. `Unbiased` ignores the
/// tilt and exists only as a negative control for the marginal check.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpineChildRule {
    SizeBiased,
    Unbiased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpineStep {
    /// Displacements of all children relative to the parent.
    pub children: Vec<f64>,
    /// Index of the spine child in `children`.
    pub spine: usize,
}

/// `int R(alpha + v + u) exp(-u) 1{v + u >= -alpha} p(du)`; equals
/// `R(alpha + v) / E[N]` when `R` is harmonic.
pub fn tilted_normalizer(law: &OffspringLaw, renewal: &RenewalTable, alpha: f64, v: f64) -> f64 {
    let lo = -(alpha + v);
    match law.displacement() {
        Displacement::Atoms(_) => {
            displacement_expectation(law.displacement(), lo, renewal.grid_step(), |u| {
                renewal.eval(alpha + v + u) * (-u).exp()
            })
        }
        Displacement::Gaussian { mean, var } => {
            // exp(-u) N(mean, var)(du) = exp(-mean + var / 2) N(mean - var, var)(du).
            let shift = (-mean + 0.5 * var).exp();
            let tilted = Displacement::Gaussian {
                mean: mean - var,
                var: *var,
            };
            shift * displacement_expectation(&tilted, lo, renewal.grid_step(), |u| renewal.eval(alpha + v + u))
        }
    }
}

fn spine_displacement<R: Rng + ?Sized>(
    law: &OffspringLaw,
    renewal: &RenewalTable,
    alpha: f64,
    v: f64,
    rule: SpineChildRule,
    rng: &mut R,
) -> Result<f64> {
    match rule {
        SpineChildRule::Unbiased => {
            for _ in 0..UNBIASED_BUDGET {
                let u = law.displacement().sample(rng);
                if v + u >= -alpha {
                    return Ok(u);
                }
            }
            Err(Error::RejectionBudgetExceeded(UNBIASED_BUDGET))
        }
        SpineChildRule::SizeBiased => match law.displacement() {
            Displacement::Atoms(atoms) => {
                let weights: Vec<f64> = atoms
                    .iter()
                    .map(|a| {
                        if v + a.value >= -alpha - 1e-9 * (1.0 + alpha.abs()) {
                            a.prob * (-a.value).exp() * renewal.eval(alpha + v + a.value)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Ok(atoms[pick_weighted(&weights, rng)?].value)
            }
            Displacement::Gaussian { mean, var } => {
                let y = sample_weighted_gaussian(v + mean - var, var.sqrt(), -alpha, |y| renewal.eval(y + alpha), rng)?;
                Ok(y - v)
            }
        },
    }
}

/// One reproduction event of the spine particle at position `v`.
pub fn spine_step<R: Rng + ?Sized>(
    law: &OffspringLaw,
    renewal: &RenewalTable,
    alpha: f64,
    v: f64,
    rng: &mut R,
) -> Result<SpineStep> {
    spine_step_with(law, renewal, alpha, v, SpineChildRule::SizeBiased, rng)
}

#[doc(hidden)]
pub fn spine_step_with<R: Rng + ?Sized>(
    law: &OffspringLaw,
    renewal: &RenewalTable,
    alpha: f64,
    v: f64,
    rule: SpineChildRule,
    rng: &mut R,
) -> Result<SpineStep> {
    if v < -alpha - 1e-9 * (1.0 + alpha.abs()) {
        return Err(Error::BarrierViolated {
            position: v,
            barrier: -alpha,
        });
    }
    let k = law.count().sample_size_biased(rng);
    let spine = rng.random_range(0..k);
    let mut children = Vec::with_capacity(k);
    for i in 0..k {
        if i == spine {
            children.push(spine_displacement(law, renewal, alpha, v, rule, rng)?);
        } else {
            children.push(law.displacement().sample(rng));
        }
    }
    let next = v + children[spine];
    if next < -alpha - 1e-9 * (1.0 + alpha.abs()) {
        return Err(Error::BarrierViolated {
            position: next,
            barrier: -alpha,
        });
    }
    Ok(SpineStep { children, spine })
}

/// Spine positions `V(w_0), ..., V(w_n)` without side information.
#[doc(hidden)]
pub fn sample_spine_path<R: Rng + ?Sized>(
    law: &OffspringLaw,
    renewal: &RenewalTable,
    alpha: f64,
    n: usize,
    rule: SpineChildRule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let lattice = law.lattice_span();
    let mut pos = Vec::with_capacity(n + 1);
    let mut v = 0.0;
    pos.push(v);
    for _ in 0..n {
        let step = spine_step_with(law, renewal, alpha, v, rule, rng)?;
        v += step.children[step.spine];
        if let Some(d) = lattice {
            v = (v / d).round() * d;
        }
        pos.push(v);
    }
    Ok(pos)
}

/// `D_{x,m}` of one fresh subtree rooted at 0, grown generation by
/// generation. If a generation would exceed `cap`, the last complete one
/// is used and the second component is `true`.
pub fn side_derivative<R: Rng + ?Sized>(law: &OffspringLaw, m: usize, cap: usize, rng: &mut R) -> (f64, bool) {
    if let Some(h) = LatticeHistogram::new(law) {
        return h.derivative(m, cap, rng);
    }
    let mut current = vec![0.0f64];
    let mut next = Vec::new();
    for _ in 0..m {
        next.clear();
        let mut over = false;
        for &v in &current {
            let start = next.len();
            law.sample_offspring_into(rng, &mut next);
            for u in &mut next[start..] {
                *u += v;
            }
            if next.len() > cap {
                over = true;
                break;
            }
        }
        if over {
            return (current.iter().map(|v| v * (-v).exp()).sum(), true);
        }
        std::mem::swap(&mut current, &mut next);
        if current.is_empty() {
            break;
        }
    }
    (current.iter().map(|v| v * (-v).exp()).sum(), false)
}

/// Fixed count with displacements on `span * Z`: a generation is a vector of
/// occupation counts per site, and the children of `c` particles at one site
/// spread over the atoms multinomially. Same law as particle-by-particle
/// growth at a cost independent of the population.
struct LatticeHistogram {
    count: usize,
    span: f64,
    /// `(site offset, probability)` per atom.
    atoms: Vec<(i64, f64)>,
}

impl LatticeHistogram {
    fn new(law: &OffspringLaw) -> Option<Self> {
        let count = law.count().fixed_value()?;
        let span = law.lattice_span()?;
        let Displacement::Atoms(atoms) = law.displacement() else {
            return None;
        };
        let mut out = Vec::with_capacity(atoms.len());
        for a in atoms {
            let k = (a.value / span).round();
            if (k * span - a.value).abs() > 1e-9 * span || k.abs() > 64.0 {
                return None;
            }
            out.push((k as i64, a.prob));
        }
        Some(Self { count, span, atoms: out })
    }

    fn derivative<R: Rng + ?Sized>(&self, m: usize, cap: usize, rng: &mut R) -> (f64, bool) {
        let lo = self.atoms.iter().map(|a| a.0).min().unwrap_or(0).min(0);
        let hi = self.atoms.iter().map(|a| a.0).max().unwrap_or(0).max(0);
        // Site i of the vector is lattice point (i + offset) * span.
        let mut offset = 0i64;
        let mut sites: Vec<u64> = vec![1];
        let mut population = 1u64;
        let mut capped = false;
        for _ in 0..m {
            let next_population = population * self.count as u64;
            if next_population > cap as u64 {
                capped = true;
                break;
            }
            let mut next = vec![0u64; sites.len() + (hi - lo) as usize];
            for (i, &c) in sites.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let mut left = c * self.count as u64;
                let mut mass = 1.0;
                for (j, &(k, p)) in self.atoms.iter().enumerate() {
                    let take = if j + 1 == self.atoms.len() || left == 0 {
                        left
                    } else {
                        let q = (p / mass).clamp(0.0, 1.0);
                        Binomial::new(left, q).map_or(0, |b| b.sample(rng))
                    };
                    next[(i as i64 + k - lo) as usize] += take;
                    left -= take;
                    mass -= p;
                }
            }
            offset += lo;
            sites = next;
            population = next_population;
            if population == 0 {
                break;
            }
        }
        let d = sites
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| {
                let v = (i as i64 + offset) as f64 * self.span;
                c as f64 * v * (-v).exp()
            })
            .sum();
        (d, capped)
    }
}

/// Pre-grown side-subtree summaries, resampled with replacement by spines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidePool {
    pub depth: usize,
    pub cap: usize,
    /// Raw `D_{x,m}` values, possibly negative.
    pub values: Vec<f64>,
    pub cap_hits: Vec<bool>,
}

pub fn build_side_pool(law: &OffspringLaw, depth: usize, cap: usize, size: usize, seed: u64) -> SidePool {
    let draws = par_replicas(seed, purpose::SIDE_POOL, size, |_, rng| side_derivative(law, depth, cap, rng));
    SidePool {
        depth,
        cap,
        values: draws.iter().map(|d| d.0).collect(),
        cap_hits: draws.iter().map(|d| d.1).collect(),
    }
}

/// Where side-subtree summaries come from.
#[derive(Debug, Clone, Copy)]
pub enum SideSubtrees<'a> {
    /// A fresh subtree per sibling.
    Grow { depth: usize, cap: usize },
    /// Bootstrap draws from a shared pool.
    Pool(&'a SidePool),
}

impl SideSubtrees<'_> {
    fn depth(&self) -> usize {
        match self {
            SideSubtrees::Grow { depth, .. } => *depth,
            SideSubtrees::Pool(p) => p.depth,
        }
    }

    fn draw<R: Rng + ?Sized>(&self, law: &OffspringLaw, rng: &mut R) -> (f64, bool) {
        match self {
            SideSubtrees::Grow { depth, cap } => side_derivative(law, *depth, *cap, rng),
            SideSubtrees::Pool(p) => {
                let i = rng.random_range(0..p.values.len());
                (p.values[i], p.cap_hits[i])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpineRealization {
    pub alpha: f64,
    /// `V(w_0), ..., V(w_n)`.
    pub positions: Vec<f64>,
    /// Displacements of the non-spine children of `w_k`, relative to `w_k`.
    pub siblings: Vec<Vec<f64>>,
    /// `D-hat_k` for `k = 0, ..., n - 1`.
    pub dhat: Vec<f64>,
    pub side_depth: usize,
    pub side_cap_hit: Vec<bool>,
    /// Side summaries with negative `D_{x,m}` that were clamped to 0.
    pub clamped: usize,
    /// Side depth 0 makes every `D-hat_k` vanish.
    pub degenerate_side_depth: bool,
}

impl SpineRealization {
    /// Number of spine steps.
    pub fn depth(&self) -> usize {
        self.dhat.len()
    }

    pub const CSV_HEADER: &'static str = "replica,k,V_wk,dhat_k,side_cap_hit";

    pub fn write_csv_rows<W: Write>(&self, replica: usize, mut w: W) -> Result<()> {
        for k in 0..self.dhat.len() {
            writeln!(
                w,
                "{replica},{k},{:.17e},{:.17e},{}",
                self.positions[k],
                self.dhat[k],
                u8::from(self.side_cap_hit[k])
            )?;
        }
        Ok(())
    }

    /// `-log sum_{k >= n} exp(-V(w_k)) D-hat_k` for `n = 0..upto`, using
    /// every step the realization holds as the tail.
    pub fn neg_log_masses(&self, upto: usize) -> Vec<f64> {
        let n = self.dhat.len();
        let terms: Vec<f64> = (0..n).map(|k| -self.positions[k] + self.dhat[k].ln()).collect();
        let mut out = vec![f64::INFINITY; n + 1];
        let mut acc = f64::NEG_INFINITY;
        for k in (0..n).rev() {
            acc = log_add_exp(acc, terms[k]);
            out[k] = -acc;
        }
        out.truncate(upto.min(n) + 1);
        out
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Evolves the spine `n` steps and attaches `D-hat_k = c8 sum exp(-u_x) D_{x,m}`
/// over the siblings `x` of `w_{k+1}`, with `u_x` their displacement.
pub fn sample_spine<R: Rng + ?Sized>(
    law: &OffspringLaw,
    renewal: &RenewalTable,
    alpha: f64,
    n: usize,
    side: SideSubtrees<'_>,
    sigma2: f64,
    rng: &mut R,
) -> Result<SpineRealization> {
    let c8 = c8(sigma2);
    let lattice = law.lattice_span();
    let mut out = SpineRealization {
        alpha,
        positions: Vec::with_capacity(n + 1),
        siblings: Vec::with_capacity(n),
        dhat: Vec::with_capacity(n),
        side_depth: side.depth(),
        side_cap_hit: Vec::with_capacity(n),
        clamped: 0,
        degenerate_side_depth: side.depth() == 0,
    };
    let mut v = 0.0;
    out.positions.push(v);
    for _ in 0..n {
        let step = spine_step(law, renewal, alpha, v, rng)?;
        let mut sibs = Vec::with_capacity(step.children.len().saturating_sub(1));
        let mut dhat = 0.0;
        let mut hit = false;
        for (i, &u) in step.children.iter().enumerate() {
            if i == step.spine {
                continue;
            }
            sibs.push(u);
            let (d, cap_hit) = side.draw(law, rng);
            hit |= cap_hit;
            if d < 0.0 {
                out.clamped += 1;
            }
            dhat += (-u).exp() * d.max(0.0);
        }
        v += step.children[step.spine];
        if let Some(d) = lattice {
            v = (v / d).round() * d;
        }
        out.positions.push(v);
        out.siblings.push(sibs);
        out.dhat.push(c8 * dhat);
        out.side_cap_hit.push(hit);
    }
    Ok(out)
}

/// Spines for replicas `0..reps`, replica `i` on stream `(seed, i, SPINE)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_spines(
    law: &OffspringLaw,
    renewal: &RenewalTable,
    alpha: f64,
    n: usize,
    side: SideSubtrees<'_>,
    sigma2: f64,
    reps: usize,
    seed: u64,
) -> Result<Vec<SpineRealization>> {
    par_replicas(seed, purpose::SPINE, reps, |_, rng| {
        sample_spine(law, renewal, alpha, n, side, sigma2, rng)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpineMass {
    /// `sum_{k=n}^{n+K} exp(-V(w_k)) D-hat_k`.
    pub partial: f64,
    /// `exp(-min_{k > n+K} V(w_k))` over the remaining realized steps, a
    /// proxy for the size of the omitted tail (0 if none remain).
    pub tail_proxy: f64,
}

pub fn spine_ball_mass(spine: &SpineRealization, n: usize, window: usize) -> Result<SpineMass> {
    let depth = spine.depth();
    if n + window >= depth {
        return Err(Error::WindowOutOfRange {
            start: n,
            end: n + window,
            depth,
        });
    }
    let partial = (n..=n + window)
        .map(|k| (-spine.positions[k]).exp() * spine.dhat[k])
        .sum();
    let rest = &spine.positions[n + window + 1..];
    let tail_proxy = rest
        .iter()
        .fold(None, |m: Option<f64>, &v| Some(m.map_or(v, |m| m.min(v))))
        .map_or(0.0, |m| (-m).exp());
    Ok(SpineMass { partial, tail_proxy })
}

/// Two-sample KS comparison of `V(w_n)` from spine sampling against `S_n`
/// from the conditioned walk at the same `alpha`.
#[allow(clippy::too_many_arguments)]
pub fn spine_marginal_check(
    law: &OffspringLaw,
    walk: &WalkLaw,
    renewal: &RenewalTable,
    alpha: f64,
    n: usize,
    reps: usize,
    seed: u64,
    rule: SpineChildRule,
) -> Result<TestResult> {
    let spines: Vec<Result<f64>> = par_replicas(seed, purpose::SPINE, reps, |_, rng| {
        Ok(*sample_spine_path(law, renewal, alpha, n, rule, rng)?.last().expect("n + 1 positions"))
    });
    let a: Vec<f64> = spines.into_iter().collect::<Result<_>>()?;
    let b: Vec<f64> = conditioned_paths(walk, renewal, alpha, n, reps, seed)?
        .iter()
        .map(|p| p.last())
        .collect();
    Ok(ks_two_sample(&a, &b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DhatReport {
    pub delta: f64,
    /// `(n0, fraction of spines with D-hat_k > exp(k^delta) for some k >= n0)`.
    pub upper_violations: Vec<(usize, f64)>,
    /// `(eta, fraction of spines whose every block max is >= eta)`.
    pub lower_satisfaction: Vec<(f64, f64)>,
    /// Largest `eta` met by at least 95% of spines in every block.
    pub eta95: f64,
    pub blocks: usize,
}

/// Checks `D-hat_n <= exp(n^delta)` beyond each `n0` and the block maxima
/// `max_{j^3 <= k < (j+1)^3} D-hat_k` against the `probes`.
pub fn dhat_bounds_check(spines: &[SpineRealization], delta: f64, n0s: &[usize], probes: &[f64]) -> Result<DhatReport> {
    let depth = spines.iter().map(|s| s.depth()).min().unwrap_or(0);
    if depth < 8 {
        return Err(Error::DepthTooShallow { depth, required: 8 });
    }
    let upper_violations = n0s
        .iter()
        .map(|&n0| {
            let bad = spines
                .iter()
                .filter(|s| (n0..depth).any(|k| s.dhat[k] > (k as f64).powf(delta).exp()))
                .count();
            (n0, bad as f64 / spines.len() as f64)
        })
        .collect();
    let mut blocks = Vec::new();
    let mut j = 1usize;
    while (j + 1).pow(3) <= depth {
        blocks.push(j.pow(3)..(j + 1).pow(3));
        j += 1;
    }
    let min_block_max: Vec<f64> = spines
        .iter()
        .map(|s| {
            blocks
                .iter()
                .map(|b| s.dhat[b.clone()].iter().fold(0.0f64, |m, &v| m.max(v)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let lower_satisfaction = probes
        .iter()
        .map(|&eta| {
            let ok = min_block_max.iter().filter(|&&m| m >= eta).count();
            (eta, ok as f64 / spines.len() as f64)
        })
        .collect();
    Ok(DhatReport {
        delta,
        upper_violations,
        lower_satisfaction,
        eta95: quantile(&min_block_max, 0.05),
        blocks: blocks.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offspring::{
        gaussian_boundary_model, lattice_boundary_model, Atom, CountLaw, LawKind, LATTICE_SPAN,
    };
    use crate::stats::chi_square_gof;
    use crate::walk::{associated_walk, build_renewal, RenewalMethod};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: f64 = LATTICE_SPAN;

    fn lattice() -> (OffspringLaw, WalkLaw, RenewalTable) {
        let law = lattice_boundary_model();
        let w = associated_walk(&law).unwrap();
        let r = build_renewal(&w, 100.0 * D, D, RenewalMethod::ExactLattice, 0, 0).unwrap();
        (law, w, r)
    }

    #[test]
    fn lattice_normalizer_is_half_renewal() {
        let (law, _, r) = lattice();
        for alpha in [0.0, 2.0 * D, 5.0 * D] {
            for k in 0..10 {
                let v = k as f64 * D;
                let z = tilted_normalizer(&law, &r, alpha, v);
                assert!((z - r.eval(alpha + v) / 2.0).abs() < 1e-8, "{z}");
            }
        }
    }

    #[test]
    fn degenerate_symmetric_law_has_uniform_spine_index() {
        let law = OffspringLaw::new_allow_subcritical(
            LawKind::FiniteAtom,
            CountLaw::fixed(2),
            Displacement::Atoms(vec![Atom::new(0.3, 1.0)]),
        )
        .unwrap();
        let (_, _, r) = lattice();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let mut counts = [0u64; 2];
        for _ in 0..n {
            counts[spine_step(&law, &r, 1.0, 0.0, &mut rng).unwrap().spine] += 1;
        }
        assert!(chi_square_gof(&counts, &[0.5, 0.5]).p_value > 0.01);
    }

    #[test]
    fn spine_child_frequencies_match_weights() {
        // At v = d with alpha = 0: up has weight R(2d) e^-d (1-q), down has
        // R(0) e^d q, so the spine steps down with probability 1/4.
        let (law, _, r) = lattice();
        let q = (2.0 - 3f64.sqrt()) / 4.0;
        let up = 3.0 * (-D).exp() * (1.0 - q);
        let down = 1.0 * D.exp() * q;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0u64; 2];
        for _ in 0..100_000 {
            let s = spine_step(&law, &r, 0.0, D, &mut rng).unwrap();
            let u = s.children[s.spine];
            counts[usize::from(u > 0.0)] += 1;
        }
        let t = chi_square_gof(&counts, &[down / (up + down), up / (up + down)]);
        assert!(t.p_value > 0.01, "{t:?} {counts:?}");
        assert!((down / (up + down) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn barrier_is_enforced() {
        let (law, _, r) = lattice();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            spine_step(&law, &r, 0.0, -2.0 * D, &mut rng),
            Err(Error::BarrierViolated { .. })
        ));
        let path = sample_spine_path(&law, &r, 0.0, 2000, SpineChildRule::SizeBiased, &mut rng).unwrap();
        assert!(path.iter().all(|&v| v >= -1e-9));
    }

    #[test]
    fn zero_side_depth_gives_zero_dhat() {
        let (law, w, r) = lattice();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sample_spine(&law, &r, 0.0, 20, SideSubtrees::Grow { depth: 0, cap: 16 }, w.variance(), &mut rng)
            .unwrap();
        assert!(s.degenerate_side_depth);
        assert!(s.dhat.iter().all(|&d| d == 0.0));
        assert!(s.siblings.iter().all(|c| c.len() == 1));
    }

    #[test]
    fn side_cap_is_reported() {
        let law = lattice_boundary_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, hit) = side_derivative(&law, 10, 100, &mut rng);
        assert!(hit);
        let (_, hit) = side_derivative(&law, 6, 100, &mut rng);
        assert!(!hit);
    }

    #[test]
    fn histogram_side_growth_matches_particle_growth() {
        let law = lattice_boundary_model();
        let h = LatticeHistogram::new(&law).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 4000;
        let fast: Vec<f64> = (0..n).map(|_| h.derivative(8, 1 << 20, &mut rng).0).collect();
        let slow: Vec<f64> = (0..n)
            .map(|_| {
                let t = crate::tree::grow_tree(&law, 8, 1 << 20, &mut rng).unwrap();
                crate::cascade::derivative_martingale(&t, 8).unwrap()
            })
            .collect();
        let t = ks_two_sample(&fast, &slow);
        assert!(t.p_value > 0.001, "{t:?}");
        // Both have mean E[D_8] = 0.
        let mean = fast.iter().sum::<f64>() / n as f64;
        let sd = (fast.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * sd / (n as f64).sqrt(), "{mean} {sd}");
    }

    #[test]
    fn ball_mass_window_and_monotonicity() {
        let (law, w, r) = lattice();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = sample_spine(&law, &r, 2.0, 60, SideSubtrees::Grow { depth: 6, cap: 1 << 10 }, w.variance(), &mut rng)
            .unwrap();
        let mut last = 0.0;
        for k in 0..20 {
            let m = spine_ball_mass(&s, 5, k).unwrap().partial;
            assert!(m >= last);
            last = m;
        }
        let m0 = spine_ball_mass(&s, 5, 0).unwrap().partial;
        assert_eq!(m0, (-s.positions[5]).exp() * s.dhat[5]);
        assert!(matches!(spine_ball_mass(&s, 50, 10), Err(Error::WindowOutOfRange { .. })));
        let nl = s.neg_log_masses(30);
        let direct: f64 = (5..60).map(|k| (-s.positions[k]).exp() * s.dhat[k]).sum();
        assert!((nl[5] + direct.ln()).abs() < 1e-10);
    }

    #[test]
    fn marginal_check_and_negative_control() {
        let (law, w, r) = lattice();
        let ok = spine_marginal_check(&law, &w, &r, 0.0, 10, 4000, 1, SpineChildRule::SizeBiased).unwrap();
        assert!(ok.p_value > 0.001, "{ok:?}");
        let bad = spine_marginal_check(&law, &w, &r, 0.0, 10, 4000, 1, SpineChildRule::Unbiased).unwrap();
        assert!(bad.p_value < 1e-6, "{bad:?}");
    }

    #[test]
    fn gaussian_normalizer_against_renewal() {
        let law = gaussian_boundary_model();
        let w = associated_walk(&law).unwrap();
        let sigma = w.sigma();
        let r = build_renewal(&w, 50.0 * sigma, sigma / 50.0, RenewalMethod::MonteCarlo, 20_000, 3).unwrap();
        for v in [0.0, 1.0, 4.0] {
            let z = tilted_normalizer(&law, &r, 2.0, v);
            let target = r.eval(2.0 + v) / 2.0;
            assert!((z - target).abs() < 0.02 * target, "{z} vs {target}");
        }
    }

    #[test]
    fn dhat_report_shapes() {
        let (law, w, r) = lattice();
        let spines = sample_spines(&law, &r, 3.0, 130, SideSubtrees::Grow { depth: 4, cap: 64 }, w.variance(), 20, 9)
            .unwrap();
        let rep = dhat_bounds_check(&spines, 0.6, &[10, 50, 100], &[0.0, 1e-3, 1.0]).unwrap();
        assert_eq!(rep.blocks, 4);
        let v: Vec<f64> = rep.upper_violations.iter().map(|x| x.1).collect();
        assert!(v.windows(2).all(|p| p[1] <= p[0]));
        assert_eq!(rep.lower_satisfaction[0].1, 1.0);
    }
}
