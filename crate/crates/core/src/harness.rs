//! Experiment plans, scheduling with resume, and figure emitters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asymptotics::{build_reference, ReferenceOptions};
use crate::error::{precondition, Error, Result};
use crate::io::{
    read_dataset, read_json, read_reference, read_trace, trace_filename, write_dataset, write_json, write_reference, write_table1,
    write_trace,
};
use crate::kernels::{run_chain, ChainTrace, InitPolicy, KernelOptions, TransformKind, VariantId};
use crate::metrics::{
    classification_transforms, classify_table1, estimate_r_with, estimate_rprime, one_step_statistics, table1_rows, CellInput, CellTrend,
    CellVerdict, ChainSource, DiagnosticSpec, DiagnosticsReport, TrendPoint, MIN_TABLE1_REPLICATIONS, REFERENCE_LABEL,
};
use crate::model::{default_theta0, sample_dataset, ExpandedTheta, ModelConfig, PriorSpec, Theta};
use crate::oracles::{oracle_suite, stationarity_suite, OracleCheck};
use crate::rng::path_id;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Fig1,
    Fig2,
    Fig3,
    Table1,
    Diagnose,
    Custom,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Fig1 => "fig1",
            Scenario::Fig2 => "fig2",
            Scenario::Fig3 => "fig3",
            Scenario::Table1 => "table1",
            Scenario::Diagnose => "diagnose",
            Scenario::Custom => "custom",
        }
    }

    fn is_figure(&self) -> bool {
        matches!(self, Scenario::Fig1 | Scenario::Fig2 | Scenario::Fig3)
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Scenario::Fig1, Scenario::Fig2, Scenario::Fig3, Scenario::Table1, Scenario::Diagnose, Scenario::Custom]
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario '{s}'")))
    }
}

/// Where diagnose runs get their reference posteriors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferencePolicy {
    /// Build one per replication and store it under the output directory.
    Build,
    /// Load references stored by an earlier run from this directory.
    Load(PathBuf),
    /// Skip `R_m`.
    None,
}

impl ReferencePolicy {
    /// `build`, `none`, or a directory.
    pub fn parse(s: &str) -> Self {
        match s {
            "build" => ReferencePolicy::Build,
            "none" => ReferencePolicy::None,
            dir => ReferencePolicy::Load(PathBuf::from(dir)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub variant: VariantId,
    pub c: usize,
    pub p: usize,
    pub n: Vec<usize>,
    pub m: usize,
    pub replications: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub scenario: Scenario,
    pub grid: Vec<GridCell>,
    pub seed: u64,
    pub out: PathBuf,
    pub reference: ReferencePolicy,
    /// Reference chain length for `R_m`.
    pub reference_length: usize,
    /// Stationary starts per replication for `D_n`.
    pub pairs: usize,
}

fn model_config(variant: VariantId, c: usize, p: usize) -> Result<ModelConfig> {
    if variant.is_binary() {
        variant.check_shape(c, p)?;
        Ok(ModelConfig::binary())
    } else {
        ModelConfig::new(c, p, PriorSpec::default())
    }
}

impl ExperimentPlan {
    fn base(scenario: Scenario, grid: Vec<GridCell>, seed: u64, out: PathBuf) -> Self {
        Self { scenario, grid, seed, out, reference: ReferencePolicy::None, reference_length: 50_000, pairs: 20 }
    }

    /// Binary null and β'x samplers at n = 100 and 1000, m = 200.
    pub fn fig1(seed: u64, out: PathBuf) -> Self {
        let cell = |variant| GridCell { variant, c: 2, p: 1, n: vec![100, 1000], m: 200, replications: 1 };
        Self::base(Scenario::Fig1, vec![cell(VariantId::BinaryNull), cell(VariantId::BinaryBeta)], seed, out)
    }

    /// β'x sampler with and without the working scale, c = 4, n = 1000, m = 200.
    pub fn fig2(seed: u64, out: PathBuf) -> Self {
        let cell = |variant| GridCell { variant, c: 4, p: 1, n: vec![1000], m: 200, replications: 1 };
        Self::base(Scenario::Fig2, vec![cell(VariantId::Beta), cell(VariantId::BetaMa)], seed, out)
    }

    /// Cut-point ratio for the same pair, m = 1000.
    pub fn fig3(seed: u64, out: PathBuf) -> Self {
        let cell = |variant| GridCell { variant, c: 4, p: 1, n: vec![1000], m: 1000, replications: 1 };
        Self::base(Scenario::Fig3, vec![cell(VariantId::Beta), cell(VariantId::BetaMa)], seed, out)
    }

    /// The four generic variants at c = 2, 3, 4.
    pub fn table1(ns: Vec<usize>, replications: usize, p: usize, seed: u64, out: PathBuf) -> Self {
        let mut grid = Vec::new();
        for v in [VariantId::Null, VariantId::Beta, VariantId::NullMa, VariantId::BetaMa] {
            for c in [2, 3, 4] {
                grid.push(GridCell { variant: v, c, p, n: ns.clone(), m: 1, replications });
            }
        }
        Self::base(Scenario::Table1, grid, seed, out)
    }

    pub fn diagnose(cell: GridCell, seed: u64, out: PathBuf, reference: ReferencePolicy) -> Self {
        Self { reference, ..Self::base(Scenario::Diagnose, vec![cell], seed, out) }
    }

    pub fn custom(grid: Vec<GridCell>, seed: u64, out: PathBuf) -> Self {
        Self::base(Scenario::Custom, grid, seed, out)
    }

    pub fn validate(&self) -> Result<()> {
        precondition!(!self.grid.is_empty(), "plan has an empty grid");
        for cell in &self.grid {
            precondition!(cell.c >= 2 && cell.p >= 1, "cell {} needs c >= 2 and p >= 1", cell.variant);
            cell.variant.check_shape(cell.c, cell.p)?;
            precondition!(!cell.n.is_empty() && cell.n.iter().all(|&n| n >= 1), "cell {} needs positive sample sizes", cell.variant);
            precondition!(cell.m >= 1 && cell.replications >= 1, "cell {} needs m >= 1 and R >= 1", cell.variant);
            if self.scenario == Scenario::Fig3 {
                precondition!(cell.c >= 4, "fig3 plots the alpha-ratio transform, which requires c >= 4 (got c={})", cell.c);
            }
            if matches!(self.scenario, Scenario::Table1 | Scenario::Diagnose) {
                precondition!(cell.replications >= 2, "{} needs R >= 2", self.scenario.as_str());
            }
            if self.scenario == Scenario::Table1 {
                precondition!(cell.replications >= MIN_TABLE1_REPLICATIONS, "table1 classification needs R >= {MIN_TABLE1_REPLICATIONS}");
            }
            if self.scenario == Scenario::Diagnose {
                precondition!(cell.m >= 2, "diagnose needs m >= 2");
            }
        }
        precondition!(self.pairs >= 1, "pairs must be positive");
        let mut keys = std::collections::BTreeSet::new();
        let mut seeds = BTreeMap::new();
        for u in self.units() {
            let key = u.key(self);
            if let Some(other) = seeds.insert(unit_seed(self, &u), key.clone()) {
                return Err(Error::Config(format!("seed collision between {other} and {key}")));
            }
            keys.insert(key);
        }
        let mut outputs = std::collections::BTreeSet::new();
        for gc in &self.grid {
            precondition!(outputs.insert((gc.variant, gc.c, gc.p, gc.n.clone())), "grid lists {} c={} p={} twice", gc.variant, gc.c, gc.p);
        }
        Ok(())
    }

    /// Work units in a fixed order; figure and custom plans generate their
    /// datasets first so samplers compared side by side share data.
    fn units(&self) -> Vec<Unit> {
        let mut out = Vec::new();
        let traces = self.scenario.is_figure() || self.scenario == Scenario::Custom;
        if traces {
            let mut seen = std::collections::BTreeSet::new();
            for cell in &self.grid {
                for &n in &cell.n {
                    for r in 0..cell.replications {
                        if seen.insert((cell.c, cell.p, n, r)) {
                            out.push(Unit::Data { c: cell.c, p: cell.p, n, rep: r, binary: cell.variant.is_binary() });
                        }
                    }
                }
            }
        }
        for (ci, cell) in self.grid.iter().enumerate() {
            for &n in &cell.n {
                if traces {
                    for r in 0..cell.replications {
                        out.push(Unit::Trace { cell: ci, n, rep: r });
                    }
                } else {
                    out.push(Unit::Cell { cell: ci, n });
                }
            }
        }
        out
    }

    fn dir(&self) -> PathBuf {
        self.out.join(self.scenario.as_str())
    }

    fn data_path(&self, c: usize, p: usize, n: usize, rep: usize) -> PathBuf {
        self.dir().join(format!("data_c{c}_p{p}_n{n}_r{rep}.csv"))
    }

    fn cell_path(&self, cell: &GridCell, n: usize) -> PathBuf {
        self.dir().join(format!("{}_c{}_p{}_n{n}.json", cell.variant, cell.c, cell.p))
    }

    fn trace_path(&self, cell: &GridCell, n: usize, rep: usize) -> PathBuf {
        self.dir().join(format!("c{}_p{}", cell.c, cell.p)).join(trace_filename(cell.variant, n, rep))
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Unit {
    Data { c: usize, p: usize, n: usize, rep: usize, binary: bool },
    Trace { cell: usize, n: usize, rep: usize },
    Cell { cell: usize, n: usize },
}

impl Unit {
    fn key(&self, plan: &ExperimentPlan) -> String {
        match self {
            Unit::Data { c, p, n, rep, .. } => format!("data/c{c}/p{p}/n{n}/r{rep}"),
            Unit::Trace { cell, n, rep } => format!("trace/{}/{}/n{n}/r{rep}", cell, plan.grid[*cell].variant),
            Unit::Cell { cell, n } => format!("cell/{}/{}/c{}/n{n}", cell, plan.grid[*cell].variant, plan.grid[*cell].c),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

fn file_record(root: &Path, path: &Path) -> Result<FileRecord> {
    let bytes = fs::read(path)?;
    let rel = path.strip_prefix(root).unwrap_or(path);
    Ok(FileRecord {
        path: rel.to_string_lossy().replace('\\', "/"),
        bytes: bytes.len() as u64,
        sha256: format!("{:x}", Sha256::digest(&bytes)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitStatus {
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub key: String,
    pub seed: u64,
    pub status: UnitStatus,
    pub files: Vec<FileRecord>,
    /// Error kind and message of a failed unit.
    pub error: Option<(String, String)>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub plan: ExperimentPlan,
    pub threads: usize,
    pub units: BTreeMap<String, UnitRecord>,
    /// Files produced by the aggregation step.
    pub outputs: Vec<FileRecord>,
    pub seconds: f64,
}

impl RunManifest {
    pub fn failures(&self) -> Vec<&UnitRecord> {
        self.units.values().filter(|u| u.status == UnitStatus::Failed).collect()
    }

    /// Files are listed for every completed unit and still match their hashes.
    fn unit_intact(&self, key: &str) -> bool {
        let root = &self.plan.out;
        self.units.get(key).is_some_and(|u| {
            u.status == UnitStatus::Done && u.files.iter().all(|f| file_record(root, &root.join(&f.path)).map(|r| &r == f).unwrap_or(false))
        })
    }
}

/// Resolves a worker count: explicit value, then `MCMCDEGEN_THREADS`, then all cores.
pub fn resolve_threads(explicit: Option<usize>) -> Result<usize> {
    if let Some(t) = explicit {
        precondition!(t >= 1, "thread count must be positive");
        return Ok(t);
    }
    match std::env::var("MCMCDEGEN_THREADS") {
        Ok(v) => {
            let t: usize = v.trim().parse().map_err(|_| Error::Config(format!("MCMCDEGEN_THREADS='{v}' is not a number")))?;
            precondition!(t >= 1, "thread count must be positive");
            Ok(t)
        }
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("could not start thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Executes `plan` on `threads` workers, skipping units an earlier run
/// finished, and writes the manifest. Unit failures are recorded rather
/// than aborting the run.
pub fn orchestrate(plan: &ExperimentPlan, threads: usize) -> Result<RunManifest> {
    plan.validate()?;
    let start = Instant::now();
    fs::create_dir_all(plan.dir())?;
    let manifest_path = plan.out.join(MANIFEST);
    let previous: Option<RunManifest> = if manifest_path.exists() {
        let m: RunManifest = read_json(&manifest_path)?;
        precondition!(m.plan == *plan, "{} belongs to a different plan; use a fresh output directory", manifest_path.display());
        Some(m)
    } else {
        None
    };
    let manifest = Mutex::new(RunManifest {
        version: VERSION.to_string(),
        plan: plan.clone(),
        threads,
        units: BTreeMap::new(),
        outputs: Vec::new(),
        seconds: 0.0,
    });
    let units = plan.units();
    let (data_units, work_units): (Vec<Unit>, Vec<Unit>) = units.into_iter().partition(|u| matches!(u, Unit::Data { .. }));
    with_threads(threads, || -> Result<()> {
        for phase in [data_units, work_units] {
            phase.par_iter().try_for_each(|u| -> Result<()> {
                let key = u.key(plan);
                if let Some(prev) = previous.as_ref().filter(|p| p.unit_intact(&key)) {
                    let rec = prev.units[&key].clone();
                    manifest.lock().unwrap().units.insert(key, rec);
                    return Ok(());
                }
                let t = Instant::now();
                let seed = unit_seed(plan, u);
                let rec = match run_unit(plan, u, seed) {
                    Ok(files) => UnitRecord {
                        key: key.clone(),
                        seed,
                        status: UnitStatus::Done,
                        files: files.iter().map(|f| file_record(&plan.out, f)).collect::<Result<Vec<_>>>()?,
                        error: None,
                        seconds: t.elapsed().as_secs_f64(),
                    },
                    Err(e) => UnitRecord {
                        key: key.clone(),
                        seed,
                        status: UnitStatus::Failed,
                        files: Vec::new(),
                        error: Some((e.kind().to_string(), e.to_string())),
                        seconds: t.elapsed().as_secs_f64(),
                    },
                };
                let mut m = manifest.lock().unwrap();
                m.units.insert(key, rec);
                write_json(&manifest_path, &*m)
            })?;
        }
        Ok(())
    })??;
    let mut m = manifest.into_inner().unwrap();
    if m.failures().is_empty() {
        let files = aggregate(plan)?;
        m.outputs = files.iter().map(|f| file_record(&plan.out, f)).collect::<Result<Vec<_>>>()?;
    }
    m.seconds = start.elapsed().as_secs_f64();
    write_json(&manifest_path, &m)?;
    Ok(m)
}

/// Seeds derive from `(master, cell index, n)`; figure datasets depend only
/// on the sample size so every sampler in a figure sees the same data.
fn unit_seed(plan: &ExperimentPlan, u: &Unit) -> u64 {
    match u {
        Unit::Data { c, p, n, rep, .. } => dataset_seed(plan.seed, *c, *p, *n, *rep),
        Unit::Trace { cell, n, rep } => path_id(&[plan.seed, *cell as u64, *n as u64, *rep as u64]),
        Unit::Cell { cell, n } => path_id(&[plan.seed, *cell as u64, *n as u64]),
    }
}

/// Seed of the shared dataset for `(c, p, n, replication)`.
pub fn dataset_seed(master: u64, c: usize, p: usize, n: usize, rep: usize) -> u64 {
    path_id(&[master, 0xDA7A, c as u64, p as u64, n as u64, rep as u64])
}

/// Writes `data_c{c}_p{p}_n{n}_r{rep}.csv` for each size and replication,
/// drawn at the default true parameter.
pub fn generate_datasets(c: usize, p: usize, ns: &[usize], replications: usize, master: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    let cfg = ModelConfig::new(c, p, PriorSpec::default())?;
    let theta0 = default_theta0(c, p)?;
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for &n in ns {
        for rep in 0..replications {
            let data = sample_dataset(&cfg, &theta0, n, dataset_seed(master, c, p, n, rep))?;
            let path = dir.join(format!("data_c{c}_p{p}_n{n}_r{rep}.csv"));
            write_dataset(&path, &data)?;
            files.push(path);
        }
    }
    Ok(files)
}

fn trace_start(plan: &ExperimentPlan, cell: &GridCell) -> Result<InitPolicy> {
    Ok(match plan.scenario {
        Scenario::Fig1 => InitPolicy::Fixed(ExpandedTheta::unit(Theta::new(vec![], vec![1.5])?)),
        Scenario::Fig2 | Scenario::Fig3 => InitPolicy::Fixed(ExpandedTheta::unit(default_theta0(cell.c, cell.p)?.scaled(0.8))),
        _ => InitPolicy::Prior,
    })
}

fn trace_transforms(plan: &ExperimentPlan, cell: &GridCell) -> Vec<TransformKind> {
    match plan.scenario {
        Scenario::Fig1 | Scenario::Fig2 => vec![TransformKind::GTheta],
        Scenario::Fig3 => vec![TransformKind::AlphaRatio, TransformKind::GTheta],
        _ => {
            let mut t = vec![TransformKind::Theta];
            t.extend(classification_transforms(cell.c, cell.p));
            t
        }
    }
}

fn run_unit(plan: &ExperimentPlan, u: &Unit, seed: u64) -> Result<Vec<PathBuf>> {
    match *u {
        Unit::Data { c, p, n, rep, binary } => {
            let cfg = if binary { ModelConfig::binary() } else { ModelConfig::new(c, p, PriorSpec::default())? };
            let data = sample_dataset(&cfg, &default_theta0(c, p)?, n, seed)?;
            let path = plan.data_path(c, p, n, rep);
            write_dataset(&path, &data)?;
            Ok(vec![path.clone(), crate::io::sidecar(&path)])
        }
        Unit::Trace { cell, n, rep } => {
            let gc = &plan.grid[cell];
            let cfg = model_config(gc.variant, gc.c, gc.p)?;
            let data = read_dataset(&plan.data_path(gc.c, gc.p, n, rep))?;
            let tr = run_chain(
                gc.variant,
                &cfg,
                &data,
                gc.m,
                &trace_start(plan, gc)?,
                &trace_transforms(plan, gc),
                KernelOptions::default(),
                seed,
                0,
            )?;
            let path = plan.trace_path(gc, n, rep);
            fs::create_dir_all(path.parent().unwrap())?;
            write_trace(&path, &tr)?;
            Ok(vec![path.clone(), crate::io::sidecar(&path)])
        }
        Unit::Cell { cell, n } => {
            let gc = &plan.grid[cell];
            let spec = cell_spec(plan, cell, n)?;
            debug_assert_eq!(spec.seed, seed);
            let path = plan.cell_path(gc, n);
            match plan.scenario {
                Scenario::Table1 => {
                    let views: Vec<_> = classification_transforms(gc.c, gc.p).into_iter().map(|t| (t, None)).collect();
                    let reports = one_step_statistics(&spec, &views, plan.pairs)?;
                    write_json(&path, &reports)?;
                    Ok(vec![path])
                }
                _ => {
                    let (report, mut files) = diagnose_cell(plan, gc, &spec)?;
                    write_json(&path, &report)?;
                    files.push(path);
                    Ok(files)
                }
            }
        }
    }
}

/// Builds the reference posteriors a diagnose plan would use and writes them
/// to `dir` as `ref_c{c}_p{p}_n{n}_r{r}.csv`; returns the written files.
pub fn build_references(plan: &ExperimentPlan, dir: &Path) -> Result<Vec<PathBuf>> {
    plan.validate()?;
    fs::create_dir_all(dir)?;
    let mut jobs = Vec::new();
    for (ci, gc) in plan.grid.iter().enumerate() {
        for &n in &gc.n {
            for r in 0..gc.replications {
                jobs.push((ci, n, r));
            }
        }
    }
    let files = jobs
        .par_iter()
        .map(|&(ci, n, r)| -> Result<Vec<PathBuf>> {
            let gc = &plan.grid[ci];
            let spec = cell_spec(plan, ci, n)?;
            let data = spec.dataset(r)?;
            let o = ReferenceOptions {
                length: plan.reference_length,
                seed: path_id(&[spec.seed, r as u64, REFERENCE_LABEL]),
                ..Default::default()
            };
            let refp = build_reference(&spec.cfg, &data, &o)?;
            let path = reference_path(dir, gc.c, gc.p, n, r);
            write_reference(&path, &refp)?;
            Ok(vec![path.clone(), crate::io::sidecar(&path)])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(files.into_iter().flatten().collect())
}

fn cell_spec(plan: &ExperimentPlan, ci: usize, n: usize) -> Result<DiagnosticSpec> {
    let gc = &plan.grid[ci];
    let cfg = model_config(gc.variant, gc.c, gc.p)?;
    let theta0 = default_theta0(gc.c, gc.p)?;
    let seed = unit_seed(plan, &Unit::Cell { cell: ci, n });
    Ok(DiagnosticSpec::new(ChainSource::Kernel(gc.variant), cfg, theta0, n, gc.replications, seed))
}

/// Everything the diagnose scenario reports for one cell and sample size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDiagnostics {
    pub r_prime: DiagnosticsReport,
    pub r: Option<DiagnosticsReport>,
    pub one_step: Vec<DiagnosticsReport>,
}

fn reference_path(dir: &Path, c: usize, p: usize, n: usize, rep: usize) -> PathBuf {
    dir.join(format!("ref_c{c}_p{p}_n{n}_r{rep}.csv"))
}

fn diagnose_cell(plan: &ExperimentPlan, gc: &GridCell, spec: &DiagnosticSpec) -> Result<(CellDiagnostics, Vec<PathBuf>)> {
    let r_prime = estimate_rprime(spec, gc.m)?;
    let mut views: Vec<_> = classification_transforms(gc.c, gc.p).into_iter().map(|t| (t, None)).collect();
    // Raw summaries whose collapse characterizes the augmented kernels.
    if gc.variant.is_ma() {
        views.push((if gc.variant.is_null_type() { TransformKind::Theta } else { TransformKind::Alpha }, None));
        views.retain(|(t, _)| *t != TransformKind::Alpha || gc.c >= 3);
    }
    let one_step = one_step_statistics(spec, &views, plan.pairs)?;
    let mut files = Vec::new();
    let r = match &plan.reference {
        ReferencePolicy::None => None,
        ReferencePolicy::Build => {
            let dir = plan.dir().join("references");
            fs::create_dir_all(&dir)?;
            let opts = ReferenceOptions { length: plan.reference_length, ..Default::default() };
            let built = Mutex::new(Vec::new());
            let rep = estimate_r_with(spec, gc.m, |r, data| {
                let o = ReferenceOptions { seed: path_id(&[spec.seed, r as u64, REFERENCE_LABEL]), ..opts };
                let refp = build_reference(&spec.cfg, data, &o)?;
                let path = reference_path(&dir, gc.c, gc.p, data.n, r);
                write_reference(&path, &refp)?;
                built.lock().unwrap().push((r, path));
                Ok(refp)
            })?;
            let mut b = built.into_inner().unwrap();
            b.sort();
            for (_, p) in b {
                files.push(crate::io::sidecar(&p));
                files.push(p);
            }
            Some(rep)
        }
        ReferencePolicy::Load(dir) => Some(estimate_r_with(spec, gc.m, |r, data| {
            let path = reference_path(dir, gc.c, gc.p, data.n, r);
            if !path.exists() {
                return Err(Error::Missing(format!("reference {} not found", path.display())));
            }
            read_reference(&path)
        })?),
    };
    Ok((CellDiagnostics { r_prime, r, one_step }, files))
}

/// Builds the scenario-level outputs from the unit files.
fn aggregate(plan: &ExperimentPlan) -> Result<Vec<PathBuf>> {
    match plan.scenario {
        Scenario::Fig1 | Scenario::Fig2 | Scenario::Fig3 => {
            let traces = plan
                .grid
                .iter()
                .flat_map(|gc| gc.n.iter().map(move |&n| (gc, n)))
                .map(|(gc, n)| read_trace(&plan.trace_path(gc, n, 0)))
                .collect::<Result<Vec<_>>>()?;
            emit_figure(plan.scenario, &traces, &plan.out)
        }
        Scenario::Table1 => {
            let mut cells = Vec::new();
            for gc in &plan.grid {
                let mut by_kind: BTreeMap<usize, CellTrend> = BTreeMap::new();
                for &n in &gc.n {
                    let reports: Vec<DiagnosticsReport> = read_json(&plan.cell_path(gc, n))?;
                    for (k, rep) in reports.iter().enumerate() {
                        by_kind
                            .entry(k)
                            .or_insert_with(|| CellTrend { transform: rep.transform, points: Vec::new() })
                            .points
                            .push(TrendPoint::from_report(rep)?);
                    }
                }
                cells.push(CellInput { variant: gc.variant, c: gc.c, p: gc.p, trends: by_kind.into_values().collect() });
            }
            let verdicts = classify_table1(&cells)?;
            let csv = plan.out.join("table1.csv");
            let json = plan.out.join("table1.json");
            write_table1(&csv, &table1_rows(&verdicts))?;
            write_json(&json, &verdicts)?;
            Ok(vec![csv, json])
        }
        Scenario::Diagnose | Scenario::Custom => Ok(Vec::new()),
    }
}

/// Verdicts written by a finished table1 run.
pub fn read_verdicts(out: &Path) -> Result<Vec<CellVerdict>> {
    read_json(&out.join("table1.json"))
}

/// One line series of a panel.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub dashed: bool,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
    /// Horizontal reference line, e.g. the true value.
    pub hline: Option<f64>,
}

fn trace_column(tr: &ChainTrace, kind: TransformKind, k: usize) -> Result<Vec<f64>> {
    let s = tr.series(kind).ok_or_else(|| Error::Missing(format!("trace of {} has no {} column", tr.variant, kind.as_str())))?;
    s.iter().map(|v| v.get(k).copied().ok_or_else(|| Error::Missing(format!("{} has no coordinate {k}", kind.as_str())))).collect()
}

/// Panels of a figure scenario from its traces.
pub fn figure_panels(scenario: Scenario, traces: &[ChainTrace]) -> Result<Vec<Panel>> {
    precondition!(!traces.is_empty(), "no traces to plot");
    let style = |v: VariantId| !matches!(v, VariantId::BinaryNull | VariantId::Beta);
    match scenario {
        Scenario::Fig1 => {
            let mut ns: Vec<usize> = traces.iter().map(|t| t.meta.n).collect();
            ns.sort_unstable();
            ns.dedup();
            ns.iter()
                .map(|&n| {
                    let series = traces
                        .iter()
                        .filter(|t| t.meta.n == n)
                        .map(|t| {
                            Ok(Series {
                                label: t.variant.to_string(),
                                dashed: style(t.variant),
                                values: trace_column(t, TransformKind::GTheta, 0)?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Panel { title: format!("theta, n={n}"), series, hline: Some(2.0) })
                })
                .collect()
        }
        Scenario::Fig2 => {
            let (c, p) = (traces[0].meta.c, traces[0].meta.p);
            let truth = default_theta0(c, p)?.to_vec();
            crate::io::theta_columns(c, p)
                .into_iter()
                .enumerate()
                .map(|(k, name)| {
                    let series = traces
                        .iter()
                        .map(|t| {
                            Ok(Series {
                                label: t.variant.to_string(),
                                dashed: style(t.variant),
                                values: trace_column(t, TransformKind::GTheta, k)?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Panel { title: name, series, hline: Some(truth[k]) })
                })
                .collect()
        }
        Scenario::Fig3 => {
            let c = traces[0].meta.c;
            precondition!(c >= 4, "fig3 plots alpha3/alpha2, which requires c >= 4 (got c={c})");
            let truth = default_theta0(c, traces[0].meta.p)?;
            let series = traces
                .iter()
                .map(|t| {
                    Ok(Series {
                        label: t.variant.to_string(),
                        dashed: style(t.variant),
                        values: trace_column(t, TransformKind::AlphaRatio, 0)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(vec![Panel { title: "alpha3/alpha2".into(), series, hline: Some(truth.alpha[1] / truth.alpha[0]) }])
        }
        other => Err(Error::Config(format!("{} is not a figure scenario", other.as_str()))),
    }
}

/// Writes `<scenario>.csv` (`panel,series,step,value`) and `<scenario>.svg`.
pub fn emit_figure(scenario: Scenario, traces: &[ChainTrace], out: &Path) -> Result<Vec<PathBuf>> {
    let panels = figure_panels(scenario, traces)?;
    let csv_path = out.join(format!("{}.csv", scenario.as_str()));
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["panel", "series", "step", "value"])?;
    for p in &panels {
        for s in &p.series {
            for (i, v) in s.values.iter().enumerate() {
                w.write_record([p.title.clone(), s.label.clone(), i.to_string(), format!("{v}")])?;
            }
        }
    }
    w.flush()?;
    let svg_path = out.join(format!("{}.svg", scenario.as_str()));
    fs::write(&svg_path, render_svg(&panels))?;
    Ok(vec![csv_path, svg_path])
}

/// Stacked line-plot panels as a standalone SVG document.
pub fn render_svg(panels: &[Panel]) -> String {
    const W: f64 = 800.0;
    const H: f64 = 220.0;
    const L: f64 = 70.0;
    const R: f64 = 20.0;
    const T: f64 = 30.0;
    const B: f64 = 30.0;
    let total = H * panels.len() as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{total}" viewBox="0 0 {W} {total}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{total}" fill="white"/>"#);
    for (k, p) in panels.iter().enumerate() {
        let y0 = H * k as f64;
        let len = p.series.iter().map(|x| x.values.len()).max().unwrap_or(1).max(2);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in p.series.iter().flat_map(|x| x.values.iter()).chain(p.hline.iter()) {
            if v.is_finite() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        let (lo, hi) = (lo - pad, hi + pad);
        let px = |i: usize| L + (W - L - R) * i as f64 / (len - 1) as f64;
        let py = |v: f64| y0 + T + (H - T - B) * (hi - v) / (hi - lo);
        let _ = writeln!(s, r#"<g>"#);
        let _ = writeln!(s, r#"<text x="{L}" y="{:.2}" font-family="sans-serif" font-size="13">{}</text>"#, y0 + 18.0, escape(&p.title));
        let _ = writeln!(
            s,
            r#"<rect x="{L}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black" stroke-width="0.8"/>"#,
            y0 + T,
            W - L - R,
            H - T - B
        );
        for (v, anchor) in [(hi, y0 + T + 4.0), (lo, y0 + H - B)] {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{anchor:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.3}</text>"#,
                L - 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#,
            W - R,
            y0 + H - B + 14.0,
            len - 1
        );
        if let Some(h) = p.hline {
            let _ =
                writeln!(s, r#"<line x1="{L}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="gray" stroke-width="0.8"/>"#, W - R, y = py(h));
        }
        for x in &p.series {
            let pts: Vec<String> =
                x.values.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, v)| format!("{:.2},{:.2}", px(i), py(*v))).collect();
            let dash = if x.dashed { r#" stroke-dasharray="5,3""# } else { "" };
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="black" stroke-width="1"{dash} points="{}"><title>{}</title></polyline>"#,
                pts.join(" "),
                escape(&x.label)
            );
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Oracle checks; the stationarity suite runs when `stationarity_n` is nonempty.
pub fn verify(seed: u64, stationarity_n: &[usize], draws: usize) -> Result<Vec<OracleCheck>> {
    let mut out = oracle_suite(seed)?;
    if !stationarity_n.is_empty() {
        out.extend(stationarity_suite(stationarity_n, draws, seed)?);
    }
    Ok(out)
}
