//! Config-driven experiment runs with checksummed outputs.
//!
//! A run reads one TOML document with `[experiment]`, `[model]` and
//! `[params]` sections, executes the experiment over replicas on a worker
//! pool, merges per-replica results in replica order and writes CSV/JSON
//! outputs plus `manifest.json`. Output bytes depend only on the config and
//! the code version; worker count and timestamps appear only in the
//! manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{additive_martingale, derivative_martingale, martingale_trace, partition_function, MartingaleTrace};
use crate::envelope::{
    envelope_exceedance, lil_envelope, lil_statistic, psi_envelope, EnvelopeSummary, PsiSpec, LIL_MIN_DEPTH,
};
use crate::error::{Error, Result};
use crate::offspring::{
    boundary_diagnostics, gaussian_boundary_model, lattice_boundary_model, normalize_to_boundary,
    normalize_walk_template, Atom, BoundaryDiagnostics, CountLaw, DiagnosticMethod, Displacement, LawKind,
    OffspringLaw, DEFAULT_NORMALIZE_TOL,
};
use crate::rng::{derive_stream, par_replicas, purpose, with_workers, PURPOSE_BITS};
use crate::spine::{dhat_bounds_check, sample_spines, DhatReport, SideSubtrees, SpineRealization};
use crate::stats::{median, quantile, Estimate, Welford};
use crate::tree::{grow_tree, BrwTree, DEFAULT_CAP};
use crate::verify::{sub_seed, CriterionResult, Suite, SuiteOptions, CRITERIA, DEFAULT_RENEWAL_REPS};
use crate::walk::{
    associated_walk, build_renewal, conditioned_paths, default_renewal, renewal_identity_residual, RenewalMethod,
    RenewalTable, WalkLaw,
};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ModelDiagnose,
    Grow,
    #[serde(alias = "martingales")]
    TreeMartingales,
    Renewal,
    #[serde(alias = "cwalk")]
    ConditionedWalk,
    Spine,
    #[serde(alias = "envelope")]
    SpineEnvelope,
    PhaseScan,
    Verify,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ModelDiagnose => "model-diagnose",
            ExperimentKind::Grow => "grow",
            ExperimentKind::TreeMartingales => "tree-martingales",
            ExperimentKind::Renewal => "renewal",
            ExperimentKind::ConditionedWalk => "conditioned-walk",
            ExperimentKind::Spine => "spine",
            ExperimentKind::SpineEnvelope => "spine-envelope",
            ExperimentKind::PhaseScan => "phase-scan",
            ExperimentKind::Verify => "verify",
        }
    }
}

fn default_seed() -> u64 {
    1
}
fn default_replicas() -> usize {
    100
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// The built-in lattice model.
    Lattice,
    /// The built-in Gaussian model.
    Gaussian,
    FiniteAtom,
    GaussianBinary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `V = theta U + a` applied to the child displacements.
    #[default]
    Affine,
    /// The template is read as the associated walk's step law.
    WalkTemplate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub value: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub atoms: Vec<AtomSpec>,
    /// `P[N = k]` for `k = 0, 1, ...`; two children when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    #[serde(default)]
    pub boundary_normalize: bool,
    #[serde(default)]
    pub normalization: Normalization,
}

impl ModelSection {
    pub fn builtin(kind: ModelKind) -> Self {
        Self {
            kind,
            atoms: Vec::new(),
            count: None,
            mean: None,
            variance: None,
            boundary_normalize: false,
            normalization: Normalization::Affine,
        }
    }

    pub fn build(&self) -> Result<OffspringLaw> {
        let count = match &self.count {
            Some(p) => CountLaw::new(p.clone())?,
            None => CountLaw::fixed(2),
        };
        let template = match self.kind {
            ModelKind::Lattice => return self.builtin_only(lattice_boundary_model()),
            ModelKind::Gaussian => return self.builtin_only(gaussian_boundary_model()),
            ModelKind::FiniteAtom => {
                if self.atoms.is_empty() {
                    return Err(Error::ConfigInvalid("finite-atom model needs atoms".into()));
                }
                let atoms = self.atoms.iter().map(|a| Atom::new(a.value, a.prob)).collect();
                OffspringLaw::new(LawKind::FiniteAtom, count, Displacement::Atoms(atoms))?
            }
            ModelKind::GaussianBinary => {
                let (Some(mean), Some(var)) = (self.mean, self.variance) else {
                    return Err(Error::ConfigInvalid("gaussian-binary model needs mean and variance".into()));
                };
                OffspringLaw::new(LawKind::GaussianBinary, count, Displacement::Gaussian { mean, var })?
            }
        };
        if !self.boundary_normalize {
            return Ok(template);
        }
        match self.normalization {
            Normalization::Affine => normalize_to_boundary(&template, DEFAULT_NORMALIZE_TOL),
            Normalization::WalkTemplate => normalize_walk_template(&template, DEFAULT_NORMALIZE_TOL),
        }
    }

    fn builtin_only(&self, law: OffspringLaw) -> Result<OffspringLaw> {
        if !self.atoms.is_empty() || self.count.is_some() || self.mean.is_some() || self.variance.is_some() {
            return Err(Error::ConfigInvalid(
                "built-in models take no atoms, count, mean or variance".into(),
            ));
        }
        Ok(law)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsiFamilyName {
    Iterated,
    Perturbed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsiConfig {
    pub family: PsiFamilyName,
    pub k: usize,
    #[serde(default)]
    pub eps: f64,
}

impl PsiConfig {
    pub fn spec(&self) -> PsiSpec {
        match self.family {
            PsiFamilyName::Iterated => PsiSpec::iterated(self.k),
            PsiFamilyName::Perturbed => PsiSpec::perturbed(self.k, self.eps),
        }
    }
}

fn d_depth() -> usize {
    12
}
fn d_alpha() -> f64 {
    2.0
}
fn d_cap() -> usize {
    DEFAULT_CAP
}
fn d_side_depth() -> usize {
    20
}
fn d_side_cap() -> usize {
    1 << 20
}
fn d_betas() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn d_renewal_reps() -> usize {
    DEFAULT_RENEWAL_REPS
}
fn d_diag_samples() -> usize {
    1_000_000
}
fn d_delta() -> f64 {
    0.3
}
fn d_dhat_delta() -> f64 {
    0.6
}
fn d_n0() -> usize {
    100
}
fn d_psi() -> Vec<PsiConfig> {
    vec![
        PsiConfig {
            family: PsiFamilyName::Perturbed,
            k: 1,
            eps: 1.0,
        },
        PsiConfig {
            family: PsiFamilyName::Iterated,
            k: 1,
            eps: 0.0,
        },
    ]
}
fn d_scale() -> f64 {
    1.0
}
fn d_criteria() -> Vec<u8> {
    CRITERIA.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    /// Tree depth, walk length or spine length, depending on the experiment.
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Per-generation particle cap for trees.
    #[serde(default = "d_cap")]
    pub cap: usize,
    #[serde(default = "d_side_depth")]
    pub side_depth: usize,
    #[serde(default = "d_side_cap")]
    pub side_cap: usize,
    /// Extra spine steps past `depth` that feed the ball-mass tail.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_window: Option<usize>,
    #[serde(default = "d_betas")]
    pub betas: Vec<f64>,
    #[serde(default = "d_renewal_reps")]
    pub renewal_reps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<f64>,
    #[serde(default = "d_diag_samples")]
    pub diagnostics_samples: usize,
    /// Envelope width for the LIL envelopes `(1 -+ delta)`.
    #[serde(default = "d_delta")]
    pub delta: f64,
    /// Exponent for the `D-hat_n <= exp(n^delta)` check.
    #[serde(default = "d_dhat_delta")]
    pub dhat_delta: f64,
    #[serde(default = "d_n0")]
    pub n0: usize,
    #[serde(default = "d_psi")]
    pub psi: Vec<PsiConfig>,
    #[serde(default)]
    pub save_trees: bool,
    /// Replica multiplier for `verify`.
    #[serde(default = "d_scale")]
    pub scale: f64,
    #[serde(default = "d_criteria")]
    pub criteria: Vec<u8>,
}

impl Default for Params {
    fn default() -> Self {
        toml::from_str("").expect("all params have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    #[serde(default)]
    pub params: Params,
}

impl ExperimentConfig {
    /// A lattice-model config for `kind` with every parameter at its default.
    pub fn default_for(kind: ExperimentKind) -> Self {
        Self {
            experiment: ExperimentSection {
                kind,
                seed: default_seed(),
                replicas: default_replicas(),
                workers: None,
                output: default_output(),
            },
            model: ModelSection::builtin(ModelKind::Lattice),
            params: Params::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    /// The config without run-local settings (worker count, output directory),
    /// which must not influence any output.
    pub fn canonical(&self) -> Self {
        let mut c = self.clone();
        c.experiment.workers = None;
        c.experiment.output = default_output();
        c
    }

    /// sha256 of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical().to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        let p = &self.params;
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if e.replicas == 0 || e.replicas >= 1usize << (64 - PURPOSE_BITS).min(40) {
            return bad(format!("replicas must be in 1..2^40, got {}", e.replicas));
        }
        if e.seed > i64::MAX as u64 {
            return bad(format!("seed must fit a TOML integer (at most 2^63 - 1), got {}", e.seed));
        }
        if e.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        if p.depth == 0 || p.depth > 1_000_000 {
            return bad(format!("depth must be in 1..=10^6, got {}", p.depth));
        }
        if matches!(e.kind, ExperimentKind::Grow | ExperimentKind::TreeMartingales | ExperimentKind::PhaseScan)
            && p.depth > 40
        {
            return bad(format!("tree depth must be at most 40, got {}", p.depth));
        }
        if !(p.alpha >= 0.0 && p.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", p.alpha));
        }
        if p.cap == 0 || p.side_cap == 0 {
            return bad("caps must be positive".into());
        }
        if p.side_depth > 40 {
            return bad(format!("side_depth must be at most 40, got {}", p.side_depth));
        }
        if p.betas.is_empty() || p.betas.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return bad("betas must be a nonempty list of positive numbers".into());
        }
        if p.renewal_reps < 32 {
            return bad("renewal_reps must be at least 32".into());
        }
        if p.u_max.is_some_and(|u| !(u > 0.0)) || p.grid.is_some_and(|g| !(g > 0.0)) {
            return bad("u_max and grid must be positive".into());
        }
        if !(p.delta > 0.0 && p.delta < 1.0) {
            return bad(format!("delta must be in (0, 1), got {}", p.delta));
        }
        if !(p.dhat_delta > 0.0 && p.dhat_delta < 1.0) {
            return bad(format!("dhat_delta must be in (0, 1), got {}", p.dhat_delta));
        }
        if p.n0 < 3 {
            return bad(format!("n0 must be at least 3, got {}", p.n0));
        }
        for psi in &p.psi {
            psi.spec().validate().map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        }
        if !(p.scale > 0.0 && p.scale.is_finite()) {
            return bad(format!("scale must be positive, got {}", p.scale));
        }
        if p.criteria.is_empty() || p.criteria.iter().any(|c| !(1..=12).contains(c)) {
            return bad("criteria must list ids from 1 to 12".into());
        }
        Ok(())
    }

    pub fn workers(&self) -> usize {
        self.experiment
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub master_seed: u64,
    /// How per-replica streams are derived.
    pub scheme: String,
    pub purposes: BTreeMap<String, u16>,
    pub replicas: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub replica: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub code_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub workers: usize,
    pub seeds: SeedRecord,
    pub outputs: Vec<OutputFile>,
    pub complete: bool,
    pub failures: Vec<FailureRecord>,
    /// For `verify`: whether every criterion passed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance_passed: Option<bool>,
}

impl RunManifest {
    /// `path -> sha256` for every output file.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.outputs.iter().map(|o| (o.path.clone(), o.sha256.clone())).collect()
    }
}

/// Collects output files in memory and writes them with their checksums.
struct Outputs {
    dir: PathBuf,
    files: Vec<OutputFile>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.files.push(OutputFile {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len(),
        });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::DomainError(e.to_string()))?;
        bytes.push(b'\n');
        self.put(name, &bytes)
    }

    /// One JSON object per line.
    fn json_lines<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut bytes = Vec::new();
        for r in rows {
            serde_json::to_writer(&mut bytes, r).map_err(|e| Error::DomainError(e.to_string()))?;
            bytes.push(b'\n');
        }
        self.put(name, &bytes)
    }
}

/// Splits per-replica results into successes (with their replica index)
/// and failure records, both in replica order.
fn partition_results<T>(results: Vec<Result<T>>) -> (Vec<(usize, T)>, Vec<FailureRecord>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push((i, v)),
            Err(e) => failed.push(FailureRecord {
                replica: i,
                error: e.to_string(),
            }),
        }
    }
    (ok, failed)
}

struct RunState {
    outputs: Outputs,
    failures: Vec<FailureRecord>,
    acceptance: Option<bool>,
    purposes: BTreeMap<String, u16>,
}

impl RunState {
    fn uses(&mut self, name: &str, code: u16) {
        self.purposes.insert(name.to_string(), code);
    }
}

/// Runs the configured experiment into `config.experiment.output`.
///
/// Replicas that fail are recorded in the manifest, completed replicas are
/// still written, and the call then returns `WorkerFailure`.
pub fn run(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let workers = config.workers();
    let mut state = RunState {
        outputs: Outputs::new(&config.experiment.output)?,
        failures: Vec::new(),
        acceptance: None,
        purposes: BTreeMap::new(),
    };
    state.outputs.put("config.toml", config.canonical().to_toml()?.as_bytes())?;
    with_workers(workers, || execute(config, &mut state))?;
    let manifest = RunManifest {
        kind: config.experiment.kind,
        config_hash: config.hash()?,
        code_version: CODE_VERSION.to_string(),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        workers,
        seeds: SeedRecord {
            master_seed: config.experiment.seed,
            scheme: format!(
                "ChaCha8 keyed by the master seed; stream id = replica << {PURPOSE_BITS} | purpose"
            ),
            purposes: state.purposes,
            replicas: config.experiment.replicas,
        },
        outputs: state.outputs.files,
        complete: state.failures.is_empty(),
        failures: state.failures,
        acceptance_passed: state.acceptance,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::DomainError(e.to_string()))?;
    std::fs::write(config.experiment.output.join("manifest.json"), text + "\n")?;
    if let Some(first) = manifest.failures.first() {
        return Err(Error::WorkerFailure {
            failed: manifest.failures.len(),
            total: config.experiment.replicas,
            first: format!("replica {}: {}", first.replica, first.error),
        });
    }
    Ok(manifest)
}

fn execute(cfg: &ExperimentConfig, st: &mut RunState) -> Result<()> {
    match cfg.experiment.kind {
        ExperimentKind::ModelDiagnose => model_diagnose(cfg, st),
        ExperimentKind::Grow => grow(cfg, st),
        ExperimentKind::TreeMartingales => martingales(cfg, st),
        ExperimentKind::Renewal => renewal(cfg, st),
        ExperimentKind::ConditionedWalk => cwalk(cfg, st),
        ExperimentKind::Spine => spine(cfg, st),
        ExperimentKind::SpineEnvelope => envelope(cfg, st),
        ExperimentKind::PhaseScan => phase_scan(cfg, st),
        ExperimentKind::Verify => verify(cfg, st),
    }
}

fn model_walk_renewal(cfg: &ExperimentConfig, st: &mut RunState) -> Result<(OffspringLaw, WalkLaw, RenewalTable)> {
    let law = cfg.model.build()?;
    let walk = associated_walk(&law)?;
    st.uses("ladder", purpose::LADDER);
    st.uses("renewal", purpose::RENEWAL);
    let seed = sub_seed(cfg.experiment.seed, "renewal");
    let p = &cfg.params;
    let renewal = match (p.u_max, p.grid) {
        (None, None) => default_renewal(&walk, p.renewal_reps, seed)?,
        (u_max, grid) => {
            let sigma = walk.sigma();
            let method = if walk.is_downward_skip_free() {
                RenewalMethod::ExactLattice
            } else {
                RenewalMethod::MonteCarlo
            };
            build_renewal(
                &walk,
                u_max.unwrap_or(50.0 * sigma),
                grid.unwrap_or(sigma / 50.0),
                method,
                p.renewal_reps,
                seed,
            )?
        }
    };
    Ok((law, walk, renewal))
}

#[derive(Serialize)]
struct DiagnoseReport<'a> {
    kind: LawKind,
    lattice_span: Option<f64>,
    boundary: bool,
    exact: &'a BoundaryDiagnostics,
    monte_carlo: &'a BoundaryDiagnostics,
}

fn model_diagnose(cfg: &ExperimentConfig, st: &mut RunState) -> Result<()> {
    let law = cfg.model.build()?;
    st.uses("diagnostics", purpose::DIAGNOSTICS);
    let mut rng = derive_stream(cfg.experiment.seed, 0, purpose::DIAGNOSTICS);
    let method = match law.displacement() {
        Displacement::Atoms(_) => DiagnosticMethod::ClosedForm,
        Displacement::Gaussian { .. } => DiagnosticMethod::Quadrature,
    };
    let exact = boundary_diagnostics(&law, method, 0, &mut rng)?;
    let mc = boundary_diagnostics(&law, DiagnosticMethod::MonteCarlo, cfg.params.diagnostics_samples, &mut rng)?;
    st.outputs.json(
        "diagnostics.json",
        &DiagnoseReport {
            kind: law.kind(),
            lattice_span: law.lattice_span(),
            boundary: exact.is_boundary(1e-6),
            exact: &exact,
            monte_carlo: &mc,
        },
    )
}

fn grow(cfg: &ExperimentConfig, st: &mut RunState) -> Result<()> {
    let law = cfg.model.build()?;
    let p = &cfg.params;
    st.uses("tree", purpose::TREE);
    let results = par_replicas(cfg.experiment.seed, purpose::TREE, cfg.experiment.replicas, |_, rng| {
        let tree = grow_tree(&law, p.depth, p.cap, rng)?;
        let mut rows = String::new();
        for n in 0..=p.depth {
            let pos = tree.generation_positions(n)?;
            let min = pos.iter().copied().fold(f64::INFINITY, f64::min);
            writeln!(
                rows,
                "{},{},{:.17e},{:.17e},{:.17e}",
                n,
                pos.len(),
                min,
                additive_martingale(&tree, n)?,
                derivative_martingale(&tree, n)?
            )
            .expect("writing to a string");
        }
        let bytes = if p.save_trees {
            let mut b = Vec::new();
            tree.write_columnar(&mut b)?;
            Some(b)
        } else {
            None
        };
        Ok((rows, bytes))
    });
    let (ok, failed) = partition_results(results);
    let mut csv = String::from("replica,n,population,min_position,W_n,D_n\n");
    for (r, (rows, bytes)) in &ok {
        for line in rows.lines() {
            writeln!(csv, "{r},{line}").expect("writing to a string");
        }
        if let Some(b) = bytes {
            st.outputs.put(&format!("trees/replica_{r:06}.brw"), b)?;
        }
    }
    st.outputs.put("generations.csv", csv.as_bytes())?;
    st.failures.extend(failed);
    Ok(())
}

#[derive(Serialize)]
struct MartingaleSummaryRow {
    n: usize,
    w: Estimate,
    d: Estimate,
    d_alpha: Estimate,
    sqrt_n_w_median: f64,
}

fn martingales(cfg: &ExperimentConfig, st: &mut RunState) -> Result<()> {
    let (law, _, renewal) = model_walk_renewal(cfg, st)?;
    let p = &cfg.params;
    st.uses("tree", purpose::TREE);
    let results: Vec<Result<MartingaleTrace>> =
        par_replicas(cfg.experiment.seed, purpose::TREE, cfg.experiment.replicas, |_, rng| {
            let tree = grow_tree(&law, p.depth, p.cap, rng)?;
            martingale_trace(&tree, p.alpha, &renewal)
        });
    let (ok, failed) = partition_results(results);
    let mut csv = format!("{}\n", MartingaleTrace::CSV_HEADER);
    let mut bytes = Vec::new();
    for (r, trace) in &ok {
        trace.write_csv_rows(*r, &mut bytes)?;
    }
    csv.push_str(std::str::from_utf8(&bytes).expect("ascii rows"));
    st.outputs.put("martingales.csv", csv.as_bytes())?;
    let summary: Vec<MartingaleSummaryRow> = (0..=p.depth)
        .map(|n| {
            let col = |f: &dyn Fn(&MartingaleTrace) -> f64| ok.iter().map(|(_, t)| f(t)).collect::<Vec<f64>>();
            let est = |v: Vec<f64>| {
                let mut w = Welford::default();
                v.iter().for_each(|x| w.push(*x));
                w.estimate()
            };
            MartingaleSummaryRow {
                n,
                w: est(col(&|t| t.w[n])),
                d: est(col(&|t| t.d[n])),
                d_alpha: est(col(&|t| t.d_alpha[n])),
                sqrt_n_w_median: if ok.is_empty() { f64::NAN } else { median(&col(&|t| t.sqrt_n_w[n])) },
            }
        })
        .collect();
    st.outputs.json("martingales_summary.json", &summary)?;
    st.failures.extend(failed);
    Ok(())
}

#[derive(Serialize)]
struct RenewalReport {
    method: String,
    grid_step: f64,
    u_max: f64,
    c0: f64,
    c0_se: f64,
    mean_abs_ladder: Estimate,
    c3: f64,
    ladder_overflows: usize,
    walk_fingerprint: String,
    /// `(u, residual)` of the harmonicity identity.
    residuals: Vec<(f64, Estimate)>,
}

fn renewal(cfg: &ExperimentConfig, st: &mut RunState) -> Result<()> {
    let (_, walk, table) = model_walk_renewal(cfg, st)?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    st.outputs.put("renewal.csv", &csv)?;
    let sigma = walk.sigma();
    let residuals = [0.0, 0.5, 1.0, 2.0, 5.0, 10.0 * sigma]
        .iter()
        .map(|&u| Ok((u, renewal_identity_residual(&table, &walk, u)?)))
        .collect::<Result<Vec<_>>>()?;
    st.outputs.json(
        "renewal.json",
        &RenewalReport {
            method: table.method().name().to_string(),
            grid_step: table.grid_step(),
            u_max: table.u_max(),
            c0: table.c0(),
            c0_se: table.c0_se(),
            mean_abs_ladder: table.mean_abs_ladder(),
            c3: table.c3(),
            ladder_overflows: table.ladder_overflows(),
            walk_fingerprint: table.walk_fingerprint().to_string(),
            residuals,
        },
    )
}

#[derive(Serialize)]
struct CwalkSummary {
    alpha: f64,
    depth: usize,
    final_state_quantiles: [f64; 5],
    minimum_state: f64,
    lil_median: Option<f64>,
}

fn cwalk(cfg: &ExperimentConfig, st: &mut RunState) -> Result<()> {
    let (_, walk, renewal) = model_walk_renewal(cfg, st)?;
    let p = &cfg.params;
    st.uses("conditioned", purpose::CONDITIONED);
    let paths = conditioned_paths(&walk, &renewal, p.alpha, p.depth, cfg.experiment.replicas, cfg.experiment.seed)?;
    let mut csv = String::from("replica,k,S_k\n");
    for (r, path) in paths.iter().enumerate() {
        writeln!(csv, "{r},0,{:.17e}", path.start).expect("writing to a string");
        for (k, s) in path.states.iter().enumerate() {
            writeln!(csv, "{r},{},{s:.17e}", k + 1).expect("writing to a string");
        }
    }
    st.outputs.put("paths.csv", csv.as_bytes())?;
    let finals: Vec<f64> = paths.iter().map(|p| p.last()).collect();
    let full: Vec<Vec<f64>> = paths
        .iter()
        .map(|p| std::iter::once(p.start).chain(p.states.iter().copied()).collect())
        .collect();
    let lil_median = if p.depth >= LIL_MIN_DEPTH {
        Some(lil_statistic(&full, walk.variance())?.median)
    } else {
        None
    };
    st.outputs.json(
        "cwalk_summary.json",
        &CwalkSummary {
            alpha: p.alpha,
            depth: p.depth,
            final_state_quantiles: [0.05, 0.25, 0.5, 0.75, 0.95].map(|q| quantile(&finals, q)),
            minimum_state: full.iter().flatten().copied().fold(f64::INFINITY, f64::min),
            lil_median,
        },
    )
}

fn sample_config_spines(
    cfg: &ExperimentConfig,
    st: &mut RunState,
    steps: usize,
) -> Result<(WalkLaw, Vec<SpineRealization>)> {
    let (law, walk, renewal) = model_walk_renewal(cfg, st)?;
    let p = &cfg.params;
    st.uses("spine", purpose::SPINE);
    let spines = sample_spines(
        &law,
        &renewal,
        p.alpha,
        steps,
        SideSubtrees::Grow {
            depth: p.side_depth,
            cap: p.side_cap,
        },
        walk.variance(),
        cfg.experiment.replicas,
        cfg.experiment.seed,
    )?;
    Ok((walk, spines))
}

#[derive(Serialize)]
struct SpineSummary {
    alpha: f64,
    depth: usize,
    side_depth: usize,
    clamped_side_values: usize,
    side_cap_hits: usize,
    dhat: Option<DhatReport>,
}

fn spine_csv(spines: &[SpineRealization]) -> Result<Vec<u8>> {
    let mut csv = format!("{}\n", SpineRealization::CSV_HEADER).into_bytes();
    for (r, s) in spines.iter().enumerate() {
        s.write_csv_rows(r, &mut csv)?;
    }
    Ok(csv)
}

fn spine(cfg: &ExperimentConfig, st: &mut RunState) -> Result<()> {
    let p = &cfg.params;
    let (_, spines) = sample_config_spines(cfg, st, p.depth)?;
    st.outputs.put("spine.csv", &spine_csv(&spines)?)?;
    let dhat = if p.depth >= 8 {
        let n0s: Vec<usize> = [10, 30, 100, 300, 1000, 3000].into_iter().filter(|&n| n < p.depth).collect();
        Some(dhat_bounds_check(&spines, p.dhat_delta, &n0s, &[1e-6, 1e-4, 1e-3, 1e-2, 0.1, 1.0])?)
    } else {
        None
    };
    st.outputs.json(
        "spine_summary.json",
        &SpineSummary {
            alpha: p.alpha,
            depth: p.depth,
            side_depth: p.side_depth,
            clamped_side_values: spines.iter().map(|s| s.clamped).sum(),
            side_cap_hits: spines.iter().map(|s| s.side_cap_hit.iter().filter(|&&h| h).count()).sum(),
            dhat,
        },
    )
}

fn envelope(cfg: &ExperimentConfig, st: &mut RunState) -> Result<()> {
    let p = &cfg.params;
    let tail = p.tail_window.unwrap_or(p.depth);
    let (walk, spines) = sample_config_spines(cfg, st, p.depth + tail)?;
    st.outputs.put("spine.csv", &spine_csv(&spines)?)?;
    let masses: Vec<Vec<f64>> = spines.iter().map(|s| s.neg_log_masses(p.depth)).collect();
    let s2 = walk.variance();
    let mut reports = Vec::new();
    let mut summaries: Vec<EnvelopeSummary> = Vec::new();
    reports.push(envelope_exceedance("lil-lower", &masses, lil_envelope(s2, 1.0 + p.delta), p.n0)?);
    reports.push(envelope_exceedance("lil-upper", &masses, lil_envelope(s2, 1.0 - p.delta), p.n0)?);
    for psi in &p.psi {
        let spec = psi.spec();
        reports.push(envelope_exceedance(&spec.label(), &masses, psi_envelope(&spec), p.n0)?);
    }
    for (i, r) in reports.into_iter().enumerate() {
        let mut csv = Vec::new();
        r.write_csv(&mut csv)?;
        st.outputs.put(&format!("envelope_{i}_{}.csv", slug(&r.summary.label)), &csv)?;
        summaries.push(r.summary);
    }
    st.outputs.json("envelope_summary.json", &summaries)
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

#[derive(Serialize)]
struct PhaseRow {
    replica: usize,
    beta: f64,
    n: usize,
    z: f64,
    normalized: f64,
}

fn phase_scan(cfg: &ExperimentConfig, st: &mut RunState) -> Result<()> {
    let law = cfg.model.build()?;
    let p = &cfg.params;
    st.uses("tree", purpose::TREE);
    let results: Vec<Result<Vec<PhaseRow>>> =
        par_replicas(cfg.experiment.seed, purpose::TREE, cfg.experiment.replicas, |r, rng| {
            let tree: BrwTree = grow_tree(&law, p.depth, p.cap, rng)?;
            let mut rows = Vec::new();
            for &beta in &p.betas {
                for n in 1..=p.depth {
                    let pf = partition_function(&tree, beta, n)?;
                    rows.push(PhaseRow {
                        replica: r,
                        beta,
                        n,
                        z: pf.z,
                        normalized: pf.z * pf.suggested_normalization,
                    });
                }
            }
            Ok(rows)
        });
    let (ok, failed) = partition_results(results);
    let mut csv = String::from("replica,beta,n,Z,normalized_Z\n");
    for (_, rows) in &ok {
        for row in rows {
            writeln!(csv, "{},{},{},{:.17e},{:.17e}", row.replica, row.beta, row.n, row.z, row.normalized)
                .expect("writing to a string");
        }
    }
    st.outputs.put("phase_scan_replicas.csv", csv.as_bytes())?;
    let mut med = String::from("beta,n,median_normalized_Z,median_Z\n");
    if !ok.is_empty() {
        for (bi, &beta) in p.betas.iter().enumerate() {
            for n in 1..=p.depth {
                let idx = bi * p.depth + (n - 1);
                let norm: Vec<f64> = ok.iter().map(|(_, rows)| rows[idx].normalized).collect();
                let z: Vec<f64> = ok.iter().map(|(_, rows)| rows[idx].z).collect();
                writeln!(med, "{beta},{n},{:.17e},{:.17e}", median(&norm), median(&z)).expect("writing to a string");
            }
        }
    }
    st.outputs.put("phase_scan.csv", med.as_bytes())?;
    st.failures.extend(failed);
    Ok(())
}

#[derive(Serialize)]
struct VerifyReport {
    seed: u64,
    scale: f64,
    passed: bool,
    results: Vec<CriterionResult>,
    errors: Vec<FailureRecord>,
}

fn verify(cfg: &ExperimentConfig, st: &mut RunState) -> Result<()> {
    let p = &cfg.params;
    let suite = Suite::new(SuiteOptions {
        seed: cfg.experiment.seed,
        scale: p.scale,
        workers: cfg.workers(),
        renewal_reps: p.renewal_reps,
    })?;
    let mut results = Vec::new();
    let mut errors = Vec::new();
    for (id, r) in p.criteria.iter().zip(suite.run_all(&p.criteria)) {
        match r {
            Ok(r) => results.push(r),
            Err(e) => errors.push(FailureRecord {
                replica: usize::from(*id),
                error: e.to_string(),
            }),
        }
    }
    let passed = errors.is_empty() && results.iter().all(|r| r.passed);
    st.outputs.json_lines("verify_criteria.jsonl", &results)?;
    st.outputs.json(
        "verify.json",
        &VerifyReport {
            seed: cfg.experiment.seed,
            scale: p.scale,
            passed,
            results,
            errors: errors.clone(),
        },
    )?;
    st.acceptance = Some(passed);
    st.failures.extend(errors);
    Ok(())
}
