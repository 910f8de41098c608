//! The acceptance suite: twelve criteria, each a finite-sample check with a
//! fixed tolerance. Every criterion draws from streams derived from the
//! suite seed and a per-criterion tag, so criteria can run alone or
//! together with identical results.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{additive_martingale, derivative_martingale, truncated_martingale};
use crate::envelope::{envelope_exceedance, lil_envelope, lil_statistic, psi_envelope, PsiSpec};
use crate::error::{Error, Result};
use crate::offspring::{
    boundary_diagnostics, gaussian_boundary_model, lattice_boundary_model, DiagnosticMethod, OffspringLaw,
};
use crate::rng::{derive_stream, purpose, with_workers};
use crate::spine::{sample_spines, spine_marginal_check, SideSubtrees, SpineChildRule};
use crate::stats::{linear_fit, Estimate, Welford};
use crate::tree::{many_to_one_multi, map_trees, PathFunctional, DEFAULT_CAP};
use crate::walk::{
    associated_walk, conditioned_kernel, conditioned_paths, default_renewal, min_tail_curve, renewal_identity_residual,
    stay_above_monte_carlo, stay_above_probability, RenewalTable, WalkLaw,
};

pub const CRITERIA: [u8; 12] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12];

/// Ladder samples behind the Gaussian renewal table.
pub const DEFAULT_RENEWAL_REPS: usize = 200_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Multiplies every replica count; 1 is the full suite.
    pub scale: f64,
    pub workers: usize,
    pub renewal_reps: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 20_240_601,
            scale: 1.0,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            renewal_reps: DEFAULT_RENEWAL_REPS,
        }
    }
}

impl SuiteOptions {
    fn reps(&self, full: usize) -> usize {
        ((full as f64 * self.scale).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub details: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
    /// sha256 of the criterion's serialized details and metrics.
    pub checksum: String,
}

impl CriterionResult {
    fn new(id: u8, name: &str) -> Self {
        Self {
            id,
            name: name.to_string(),
            passed: true,
            details: Vec::new(),
            metrics: BTreeMap::new(),
            checksum: String::new(),
        }
    }

    fn check(&mut self, ok: bool, line: String) {
        self.passed &= ok;
        self.details.push(format!("[{}] {line}", if ok { "ok" } else { "FAIL" }));
    }

    fn metric(&mut self, key: impl Into<String>, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    fn seal(mut self) -> Self {
        let body = serde_json::to_vec(&(&self.id, &self.details, &self.metrics)).expect("plain data serializes");
        self.checksum = hex::encode(Sha256::digest(body));
        self
    }

    /// One line: `criterion N [PASS|FAIL] name`.
    pub fn summary_line(&self) -> String {
        format!(
            "criterion {:>2} [{}] {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name
        )
    }
}

pub fn criterion_name(id: u8) -> &'static str {
    match id {
        1 => "boundary normalization",
        2 => "many-to-one identity",
        3 => "martingale means",
        4 => "renewal exactness and harmonicity",
        5 => "conditioned walk kernel and birth-death oracle",
        6 => "stay-above formula",
        7 => "min-tail decay slope",
        8 => "spine marginal law",
        9 => "LIL proxy",
        10 => "LIL envelope proxies on spines",
        11 => "integral-test envelope proxies on spines",
        12 => "determinism across worker counts",
        _ => "unknown",
    }
}

/// A built-in model with its walk and renewal table.
pub struct ModelContext {
    pub name: &'static str,
    pub law: OffspringLaw,
    pub walk: WalkLaw,
    pub renewal: RenewalTable,
}

impl ModelContext {
    fn lattice(&self) -> bool {
        self.walk.lattice_span().is_some()
    }

    pub fn sigma2(&self) -> f64 {
        self.walk.variance()
    }
}

/// Seed for one sub-experiment: sha256 of the suite seed and a tag.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub struct Suite {
    pub options: SuiteOptions,
    pub models: Vec<ModelContext>,
    spine_masses: OnceLock<Vec<Vec<f64>>>,
}

impl Suite {
    pub fn new(options: SuiteOptions) -> Result<Self> {
        let workers = options.workers;
        let opts = options.clone();
        let models = with_workers(workers, move || -> Result<Vec<ModelContext>> {
            let mut out = Vec::new();
            for (name, law) in [("lattice", lattice_boundary_model()), ("gaussian", gaussian_boundary_model())] {
                let walk = associated_walk(&law)?;
                let renewal = default_renewal(&walk, opts.renewal_reps, sub_seed(opts.seed, "renewal"))?;
                out.push(ModelContext {
                    name,
                    law,
                    walk,
                    renewal,
                });
            }
            Ok(out)
        })?;
        Ok(Self {
            options,
            models,
            spine_masses: OnceLock::new(),
        })
    }

    fn seed(&self, tag: &str) -> u64 {
        sub_seed(self.options.seed, tag)
    }

    fn lattice(&self) -> &ModelContext {
        &self.models[0]
    }

    /// Runs one criterion on the suite's worker pool. Criterion 12 reruns
    /// criteria 1 to 11 twice with different worker counts.
    pub fn run(&self, id: u8) -> Result<CriterionResult> {
        if id == 12 {
            return self.criterion_12(None);
        }
        with_workers(self.options.workers, || self.dispatch(id))
    }

    /// Runs `ids` in order. When 12 is included it reuses the results of
    /// 1 to 11 from this call as the reference run.
    pub fn run_all(&self, ids: &[u8]) -> Vec<Result<CriterionResult>> {
        let mut out: Vec<Result<CriterionResult>> = Vec::new();
        for &id in ids {
            if id == 12 {
                let reference: Option<Vec<CriterionResult>> = if (1..=11).all(|c| ids.contains(&c)) {
                    out.iter().filter_map(|r| r.as_ref().ok().cloned()).collect::<Vec<_>>().into()
                } else {
                    None
                };
                out.push(self.criterion_12(reference.filter(|r| r.len() == 11)));
            } else {
                out.push(with_workers(self.options.workers, || self.dispatch(id)));
            }
        }
        out
    }

    fn dispatch(&self, id: u8) -> Result<CriterionResult> {
        let r = match id {
            1 => self.criterion_1(),
            2 => self.criterion_2(),
            3 => self.criterion_3(),
            4 => self.criterion_4(),
            5 => self.criterion_5(),
            6 => self.criterion_6(),
            7 => self.criterion_7(),
            8 => self.criterion_8(),
            9 => self.criterion_9(),
            10 => self.criterion_10(),
            11 => self.criterion_11(),
            _ => return Err(Error::ConfigInvalid(format!("no acceptance criterion {id}"))),
        }?;
        Ok(r.seal())
    }

    fn criterion_1(&self) -> Result<CriterionResult> {
        let mut res = CriterionResult::new(1, criterion_name(1));
        let samples = self.options.reps(1_000_000);
        for ctx in &self.models {
            let method = if ctx.lattice() {
                DiagnosticMethod::ClosedForm
            } else {
                DiagnosticMethod::Quadrature
            };
            let mut rng = derive_stream(self.seed(&format!("c1/{}", ctx.name)), 0, purpose::DIAGNOSTICS);
            let exact = boundary_diagnostics(&ctx.law, method, 0, &mut rng)?;
            let mc = boundary_diagnostics(&ctx.law, DiagnosticMethod::MonteCarlo, samples, &mut rng)?;
            res.check(
                (exact.m0 - 1.0).abs() < 1e-6 && exact.m1.abs() < 1e-6,
                format!("{}: m0 = {:.3e} + 1, m1 = {:.3e}", ctx.name, exact.m0 - 1.0, exact.m1),
            );
            for (what, e, m, se) in [
                ("m0", exact.m0, mc.m0, mc.m0_se),
                ("m1", exact.m1, mc.m1, mc.m1_se),
                ("sigma2", exact.sigma2, mc.sigma2, mc.sigma2_se),
            ] {
                let z = (m - e) / se;
                res.check(
                    z.abs() <= 3.0,
                    format!("{}: monte-carlo {what} = {m:.6} vs {e:.6} ({z:+.2} SE)", ctx.name),
                );
                res.metric(format!("{}/{what}_z", ctx.name), z);
            }
            res.metric(format!("{}/m0", ctx.name), exact.m0);
            res.metric(format!("{}/m1", ctx.name), exact.m1);
            res.metric(format!("{}/sigma2", ctx.name), exact.sigma2);
        }
        Ok(res)
    }

    fn criterion_2(&self) -> Result<CriterionResult> {
        let mut res = CriterionResult::new(2, criterion_name(2));
        let reps = self.options.reps(100_000);
        let last = |p: &[f64]| p.last().copied().unwrap_or(0.0);
        let one = |_: &[f64]| 1.0;
        let positive = move |p: &[f64]| f64::from(u8::from(last(p) > 0.0));
        let tanh = move |p: &[f64]| last(p).tanh();
        let above = |p: &[f64]| f64::from(u8::from(p.iter().all(|&v| v >= -1.5)));
        let bump = move |p: &[f64]| (-0.5 * last(p) * last(p)).exp();
        let gs: [(&str, &PathFunctional<'_>); 5] = [
            ("one", &one),
            ("end>0", &positive),
            ("tanh(end)", &tanh),
            ("min>=-1.5", &above),
            ("exp(-end^2/2)", &bump),
        ];
        let fns: Vec<&PathFunctional<'_>> = gs.iter().map(|g| g.1).collect();
        for ctx in &self.models {
            for n in 1..=5 {
                let est = many_to_one_multi(&ctx.law, &fns, n, reps, self.seed(&format!("c2/{}/{n}", ctx.name)))?;
                for ((name, _), e) in gs.iter().zip(est) {
                    let ok = e.tree_side.intervals_overlap(&e.walk_side, 0.99);
                    res.check(
                        ok,
                        format!(
                            "{} n={n} {name}: tree {:.5} +- {:.5}, walk {:.5} +- {:.5}",
                            ctx.name, e.tree_side.mean, e.tree_side.se, e.walk_side.mean, e.walk_side.se
                        ),
                    );
                    res.metric(format!("{}/{n}/{name}/tree", ctx.name), e.tree_side.mean);
                    res.metric(format!("{}/{n}/{name}/walk", ctx.name), e.walk_side.mean);
                }
            }
        }
        Ok(res)
    }

    fn criterion_3(&self) -> Result<CriterionResult> {
        let mut res = CriterionResult::new(3, criterion_name(3));
        let reps = self.options.reps(100_000);
        let ns = [5usize, 10, 15];
        let trunc: Vec<(usize, f64)> = [4usize, 8]
            .iter()
            .flat_map(|&n| [2.0, 5.0, 10.0].map(|a| (n, a)))
            .collect();
        for ctx in &self.models {
            let rows = map_trees(&ctx.law, 15, DEFAULT_CAP, reps, self.seed(&format!("c3/{}", ctx.name)), |_, t| {
                let mut row = Vec::with_capacity(2 * ns.len() + trunc.len());
                for &n in &ns {
                    row.push(additive_martingale(t, n)?);
                    row.push(derivative_martingale(t, n)?);
                }
                for &(n, a) in &trunc {
                    row.push(truncated_martingale(t, n, a, &ctx.renewal)?);
                }
                Ok(row)
            });
            let mut acc = vec![Welford::default(); 2 * ns.len() + trunc.len()];
            for row in rows {
                for (a, v) in acc.iter_mut().zip(row?) {
                    a.push(v);
                }
            }
            for (i, &n) in ns.iter().enumerate() {
                let w = acc[2 * i].estimate();
                let d = acc[2 * i + 1].estimate();
                res.check(
                    w.within(1.0, 3.0),
                    format!("{}: E[W_{n}] = {:.5} +- {:.5}", ctx.name, w.mean, w.se),
                );
                res.check(
                    d.within(0.0, 3.0),
                    format!("{}: E[D_{n}] = {:.5} +- {:.5}", ctx.name, d.mean, d.se),
                );
                res.metric(format!("{}/W{n}", ctx.name), w.mean);
                res.metric(format!("{}/D{n}", ctx.name), d.mean);
            }
            for (j, &(n, a)) in trunc.iter().enumerate() {
                let e = acc[2 * ns.len() + j].estimate();
                let target = ctx.renewal.eval(a);
                let se = e.se.hypot(ctx.renewal.se_eval(a));
                let z = (e.mean - target) / se;
                res.check(
                    z.abs() <= 3.0,
                    format!("{}: E[D_{n}^({a})] = {:.4} +- {:.4} vs R({a}) = {target:.4} ({z:+.2} SE)", ctx.name, e.mean, se),
                );
                res.metric(format!("{}/Dtrunc/{n}/{a}", ctx.name), e.mean);
            }
        }
        Ok(res)
    }

    fn criterion_4(&self) -> Result<CriterionResult> {
        let mut res = CriterionResult::new(4, criterion_name(4));
        let lat = self.lattice();
        let d = lat.walk.lattice_span().expect("lattice model");
        let exact = (0..=20).all(|k| lat.renewal.eval(k as f64 * d) == (k + 1) as f64);
        res.check(exact, "lattice: R(kd) = k + 1 for k = 0..20".into());
        for ctx in &self.models {
            let r0 = ctx.renewal.eval(0.0);
            res.check(r0 == 1.0, format!("{}: R(0) = {r0}", ctx.name));
        }
        let gauss = &self.models[1];
        for u in [0.5, 1.0, 2.0, 5.0] {
            let e = renewal_identity_residual(&gauss.renewal, &gauss.walk, u)?;
            res.check(
                e.within(0.0, 3.0),
                format!("gaussian: residual at u = {u}: {:.3e} +- {:.3e}", e.mean, e.se),
            );
            res.metric(format!("gaussian/residual/{u}"), e.mean);
        }
        Ok(res)
    }

    fn criterion_5(&self) -> Result<CriterionResult> {
        let mut res = CriterionResult::new(5, criterion_name(5));
        let lat = self.lattice();
        let d = lat.walk.lattice_span().expect("lattice model");
        let r = &lat.renewal;
        let mut worst: f64 = 0.0;
        for alpha in [0.0, d, 2.0 * d] {
            for s1 in [-1.0, 1.0] {
                for s2 in [-1.0, 1.0] {
                    let (x1, x2) = (s1 * d, (s1 + s2) * d);
                    let step = |from: f64, to: f64| -> Result<f64> {
                        if from < -alpha - 1e-9 {
                            return Ok(0.0);
                        }
                        Ok(conditioned_kernel(from, &lat.walk, r, alpha)?
                            .iter()
                            .filter(|(y, _)| (y - to).abs() < 1e-9)
                            .map(|(_, p)| p)
                            .sum())
                    };
                    let kernel = step(0.0, x1)? * step(x1, x2)?;
                    let alive = x1 >= -alpha - 1e-9 && x2 >= -alpha - 1e-9;
                    let h = if alive { 0.25 * r.eval(x2 + alpha) / r.eval(alpha) } else { 0.0 };
                    worst = worst.max((kernel - h).abs());
                }
            }
        }
        res.check(worst <= 1e-12, format!("lattice two-step enumeration: max |kernel - h-transform| = {worst:.2e}"));
        res.metric("enumeration_max_diff", worst);
        let reps = self.options.reps(100_000);
        for y in [1usize, 2, 3, 5] {
            let e = stay_above_monte_carlo(&lat.walk, r, 0.0, y as f64 * d, d, 100, reps, self.seed(&format!("c5/{y}")))?;
            let target = y as f64 / (y as f64 + 1.0);
            res.check(
                e.within(target, 3.0),
                format!("never hit 0 from {y}d: {:.5} +- {:.5} vs {target:.5}", e.mean, e.se),
            );
            res.metric(format!("birth_death/{y}"), e.mean);
        }
        Ok(res)
    }

    fn criterion_6(&self) -> Result<CriterionResult> {
        let mut res = CriterionResult::new(6, criterion_name(6));
        let lat = self.lattice();
        let d = lat.walk.lattice_span().expect("lattice model");
        let lattice_grid = [
            (0.0, 3.0 * d, d),
            (0.0, 5.0 * d, 2.0 * d),
            (2.0 * d, 0.0, -d),
            (2.0 * d, 2.0 * d, -d),
            (5.0 * d, 2.0 * d, 0.0),
            (5.0 * d, 0.0, -3.0 * d),
        ];
        let gauss_grid = [(5.0, 2.0, 0.0), (0.0, 1.0, 0.5), (0.0, 3.0, 1.0), (2.0, 0.0, -1.0), (2.0, 1.0, -1.5), (5.0, 0.0, -3.0)];
        for (ctx, grid, reps) in [
            (&self.models[0], &lattice_grid, self.options.reps(100_000)),
            (&self.models[1], &gauss_grid, self.options.reps(20_000)),
        ] {
            for (i, &(alpha, y, x)) in grid.iter().enumerate() {
                let formula = stay_above_probability(&ctx.renewal, alpha, y, x)?;
                let batches = ctx.renewal.batch_count();
                let formula_se = if batches > 1 {
                    let vals: Vec<f64> = (0..batches)
                        .map(|b| ctx.renewal.eval_batch(b, y - x) / ctx.renewal.eval_batch(b, alpha + y))
                        .collect();
                    Estimate::from_samples(&vals).se
                } else {
                    0.0
                };
                let mc = stay_above_monte_carlo(
                    &ctx.walk,
                    &ctx.renewal,
                    alpha,
                    y,
                    x,
                    50,
                    reps,
                    self.seed(&format!("c6/{}/{i}", ctx.name)),
                )?;
                let se = mc.se.hypot(formula_se);
                let z = if se > 0.0 {
                    (mc.mean - formula) / se
                } else if mc.mean == formula {
                    0.0
                } else {
                    f64::INFINITY
                };
                res.check(
                    z.abs() <= 3.0,
                    format!(
                        "{} (alpha, y, x) = ({alpha:.3}, {y:.3}, {x:.3}): {:.5} vs formula {formula:.5} ({z:+.2} SE)",
                        ctx.name, mc.mean
                    ),
                );
                res.metric(format!("{}/{i}/z", ctx.name), z);
            }
        }
        Ok(res)
    }

    fn criterion_7(&self) -> Result<CriterionResult> {
        let mut res = CriterionResult::new(7, criterion_name(7));
        let ns = [64usize, 256, 1024, 4096];
        let d = self.lattice().walk.lattice_span().expect("lattice model");
        for (ctx, x, reps) in [
            (&self.models[0], 2.0 * d, self.options.reps(10_000)),
            (&self.models[1], 2.0, self.options.reps(2_000)),
        ] {
            let curve = min_tail_curve(
                &ctx.walk,
                &ctx.renewal,
                0.0,
                x,
                &ns,
                4096,
                reps,
                self.seed(&format!("c7/{}", ctx.name)),
            )?;
            let lx: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
            let ly: Vec<f64> = curve.iter().map(|e| e.mean.ln()).collect();
            let fit = linear_fit(&lx, &ly);
            res.check(
                (-0.70..=-0.35).contains(&fit.slope),
                format!(
                    "{}: slope {:.4} +- {:.4}; P = {}",
                    ctx.name,
                    fit.slope,
                    fit.slope_se,
                    curve.iter().map(|e| format!("{:.4}", e.mean)).collect::<Vec<_>>().join(", ")
                ),
            );
            res.metric(format!("{}/slope", ctx.name), fit.slope);
        }
        Ok(res)
    }

    fn criterion_8(&self) -> Result<CriterionResult> {
        let mut res = CriterionResult::new(8, criterion_name(8));
        let reps = self.options.reps(10_000);
        for ctx in &self.models {
            for alpha in [0.0, 5.0] {
                for n in [10usize, 50] {
                    let t = spine_marginal_check(
                        &ctx.law,
                        &ctx.walk,
                        &ctx.renewal,
                        alpha,
                        n,
                        reps,
                        self.seed(&format!("c8/{}/{alpha}/{n}", ctx.name)),
                        SpineChildRule::SizeBiased,
                    )?;
                    res.check(
                        t.p_value > 0.0025,
                        format!("{} alpha={alpha} n={n}: KS {:.4}, p = {:.4}", ctx.name, t.statistic, t.p_value),
                    );
                    res.metric(format!("{}/{alpha}/{n}/p", ctx.name), t.p_value);
                }
            }
        }
        let lat = self.lattice();
        let t = spine_marginal_check(
            &lat.law,
            &lat.walk,
            &lat.renewal,
            0.0,
            10,
            reps,
            self.seed("c8/negative"),
            SpineChildRule::Unbiased,
        )?;
        res.check(t.p_value < 1e-6, format!("negative control: p = {:.3e}", t.p_value));
        res.metric("negative_control/p", t.p_value);
        Ok(res)
    }

    fn criterion_9(&self) -> Result<CriterionResult> {
        let mut res = CriterionResult::new(9, criterion_name(9));
        let lat = self.lattice();
        let n = 10_000;
        let reps = self.options.reps(1_000);
        let paths: Vec<Vec<f64>> = conditioned_paths(&lat.walk, &lat.renewal, 0.0, n, reps, self.seed("c9"))?
            .into_iter()
            .map(|p| std::iter::once(0.0).chain(p.states).collect())
            .collect();
        let s2 = lat.sigma2();
        let lil = lil_statistic(&paths, s2)?;
        res.check(
            (0.5..=1.2).contains(&lil.median),
            format!("median statistic {:.4} (5%..95%: {:.4}..{:.4})", lil.median, lil.quantiles[0], lil.quantiles[3]),
        );
        let scaled = lil_statistic(&paths, 4.0 * s2)?;
        let exact = lil.values.iter().zip(&scaled.values).all(|(a, b)| *a == 2.0 * b);
        res.check(exact, "quadrupling sigma^2 halves every per-path statistic exactly".into());
        let positive = lil.values.iter().all(|&v| v > 0.0);
        res.check(positive, "every per-path statistic is positive".into());
        res.metric("median", lil.median);
        Ok(res)
    }

    /// Spine batch shared by criteria 10 and 11: lattice model, alpha = 8,
    /// horizon 10^4 plus a tail window of 10^4, side subtrees of depth 20.
    fn envelope_spines(&self) -> Result<(&[Vec<f64>], f64)> {
        let lat = self.lattice();
        if self.spine_masses.get().is_none() {
            let horizon = 10_000;
            let spines = sample_spines(
                &lat.law,
                &lat.renewal,
                8.0,
                2 * horizon,
                SideSubtrees::Grow { depth: 20, cap: 1 << 20 },
                lat.sigma2(),
                self.options.reps(200),
                self.seed("spines"),
            )?;
            let masses = spines.iter().map(|s| s.neg_log_masses(horizon)).collect();
            let _ = self.spine_masses.set(masses);
        }
        Ok((self.spine_masses.get().expect("set above"), lat.sigma2()))
    }

    fn criterion_10(&self) -> Result<CriterionResult> {
        let mut res = CriterionResult::new(10, criterion_name(10));
        let (masses, s2) = self.envelope_spines()?;
        let delta = 0.3;
        let lower = envelope_exceedance("lil-lower", masses, lil_envelope(s2, 1.0 + delta), 100)?;
        let upper = envelope_exceedance("lil-upper", masses, lil_envelope(s2, 1.0 - delta), 100)?;
        let a = lower.summary.aa_above_fraction;
        let b = upper.summary.io_below_fraction;
        res.check(a >= 0.9, format!("mass >= exp(-1.3 sqrt(2 s2 n log log n)) for all n >= 100: {a:.3}"));
        res.check(b >= 0.9, format!("mass <= exp(-0.7 sqrt(2 s2 n log log n)) in every dyadic window: {b:.3}"));
        res.metric("lower_aa", a);
        res.metric("upper_io", b);
        Ok(res)
    }

    fn criterion_11(&self) -> Result<CriterionResult> {
        let mut res = CriterionResult::new(11, criterion_name(11));
        let (masses, _) = self.envelope_spines()?;
        let conv = PsiSpec::perturbed(1, 1.0);
        let div = PsiSpec::iterated(1);
        let c = envelope_exceedance("psi_1^(1)", masses, psi_envelope(&conv), 100)?;
        let d = envelope_exceedance("psi_1", masses, psi_envelope(&div), 100)?;
        let a = c.summary.aa_below_fraction;
        let b = d.summary.io_above_fraction;
        res.check(a > 0.9, format!("mass <= exp(-sqrt(n) psi_1^(1)(n)) for all n >= 100: {a:.3}"));
        res.check(b > 0.9, format!("mass >= exp(-sqrt(n) psi_1(n)) in every dyadic window: {b:.3}"));
        res.metric("convergent_aa", a);
        res.metric("divergent_io", b);
        Ok(res)
    }

    /// Reruns criteria 1 to 11 with a second worker count and compares
    /// checksums. `reference` holds results already computed with the
    /// suite's own worker count.
    fn criterion_12(&self, reference: Option<Vec<CriterionResult>>) -> Result<CriterionResult> {
        let mut res = CriterionResult::new(12, criterion_name(12));
        let first = match reference {
            Some(r) => r,
            None => (1..=11)
                .map(|id| with_workers(self.options.workers, || self.dispatch(id)))
                .collect::<Result<_>>()?,
        };
        let other = if self.options.workers == 1 { 3 } else { 1 };
        let alt_opts = SuiteOptions {
            workers: other,
            ..self.options.clone()
        };
        let alt = Suite::new(alt_opts)?;
        for (m, a) in self.models.iter().zip(&alt.models) {
            let same = m.renewal == a.renewal;
            res.check(same, format!("{} renewal table identical across worker counts", m.name));
        }
        for r in &first {
            let again = with_workers(other, || alt.dispatch(r.id))?;
            res.check(
                again.checksum == r.checksum,
                format!("criterion {}: {} vs {}", r.id, &r.checksum[..16], &again.checksum[..16]),
            );
        }
        Ok(res.seal())
    }
}
