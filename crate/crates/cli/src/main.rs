use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcmcdegen::harness::{
    build_references, generate_datasets, orchestrate, read_verdicts, resolve_threads, verify, with_threads, ExperimentPlan, GridCell,
    ReferencePolicy, RunManifest, Scenario,
};
use mcmcdegen::kernels::VariantId;
use mcmcdegen::{Error, Result};
use serde::Deserialize;

#[derive(Parser, Debug)]
#[command(name = "mcmcdegen", version, about = "Gibbs samplers for cumulative probit models and local degeneracy diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate datasets at the default true parameter.
    GenData(Settings),
    /// Run sampler chains and write their traces.
    RunChain(Settings),
    /// Build reference posteriors for a later `diagnose --reference <dir>`.
    BuildReference(Settings),
    /// Estimate R'_m, D_n and (optionally) R_m for one grid cell.
    Diagnose(Settings),
    /// Classify the variant × c grid as locally consistent or degenerate.
    Table1(Settings),
    /// Trajectory figures as CSV and SVG.
    Figure(Settings),
    /// Run the oracle and stationarity checks.
    Verify(Settings),
}

/// Every option may also come from the `--config` JSON file; flags win.
#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Settings {
    /// JSON file with any of the options below.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// Chain length.
    #[arg(long)]
    m: Option<usize>,
    /// Replications.
    #[arg(long = "R")]
    #[serde(rename = "R")]
    replications: Option<usize>,
    #[arg(long)]
    variant: Option<VariantId>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    scenario: Option<Scenario>,
    /// `build`, `none`, or a directory written by build-reference.
    #[arg(long)]
    reference: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    /// Reference chain length.
    #[arg(long)]
    reference_length: Option<usize>,
    /// Stationary starts per replication for D_n.
    #[arg(long)]
    pairs: Option<usize>,
    /// Paired draws per stationarity test in `verify`.
    #[arg(long)]
    draws: Option<usize>,
}

macro_rules! merge {
    ($flags:ident, $file:ident, $($f:ident),*) => {
        Settings { config: None, $($f: $flags.$f.or($file.$f)),* }
    };
}

impl Settings {
    fn resolve(self) -> Result<Settings> {
        let Some(path) = self.config.clone() else { return Ok(self) };
        let text = std::fs::read_to_string(&path)?;
        let file: Settings = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let flags = self;
        Ok(merge!(flags, file, seed, out, n, m, replications, variant, c, p, scenario, reference, threads, reference_length, pairs, draws))
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    fn need<T: Clone>(v: &Option<T>, name: &str) -> Result<T> {
        v.clone().ok_or_else(|| Error::Config(format!("--{name} is required")))
    }

    fn cell(&self, default_m: usize, default_r: usize) -> Result<GridCell> {
        let variant = Self::need(&self.variant, "variant")?;
        let binary = variant.is_binary();
        Ok(GridCell {
            variant,
            c: self.c.unwrap_or(if binary { 2 } else { 3 }),
            p: self.p.unwrap_or(1),
            n: Self::need(&self.n, "n")?,
            m: self.m.unwrap_or(default_m),
            replications: self.replications.unwrap_or(default_r),
        })
    }

    fn tune(&self, plan: &mut ExperimentPlan) {
        if let Some(l) = self.reference_length {
            plan.reference_length = l;
        }
        if let Some(p) = self.pairs {
            plan.pairs = p;
        }
    }
}

/// What the CLI prints as error JSON.
struct Failure {
    kind: String,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { kind: e.kind().to_string(), message: e.to_string() }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn report(manifest: &RunManifest) -> Outcome {
    for f in manifest.outputs.iter() {
        println!("{}", manifest.plan.out.join(&f.path).display());
    }
    let failures = manifest.failures();
    if failures.is_empty() {
        println!("{} units done in {:.1}s", manifest.units.len(), manifest.seconds);
        return Ok(());
    }
    let first = failures[0];
    let (kind, message) = first.error.clone().unwrap_or_default();
    Err(Failure { kind, message: format!("{} of {} units failed; first {}: {message}", failures.len(), manifest.units.len(), first.key) })
}

fn list(files: &[PathBuf]) {
    for f in files {
        println!("{}", f.display());
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::GenData(s) => {
            let s = s.resolve()?;
            let c = s.c.unwrap_or(2);
            let files =
                generate_datasets(c, s.p.unwrap_or(1), &Settings::need(&s.n, "n")?, s.replications.unwrap_or(1), s.seed(), &s.out())?;
            list(&files);
            Ok(())
        }
        Command::RunChain(s) => {
            let s = s.resolve()?;
            let plan = ExperimentPlan::custom(vec![s.cell(200, 1)?], s.seed(), s.out());
            report(&orchestrate(&plan, resolve_threads(s.threads)?)?)
        }
        Command::BuildReference(s) => {
            let s = s.resolve()?;
            let mut plan = ExperimentPlan::diagnose(s.cell(200, 20)?, s.seed(), s.out(), ReferencePolicy::None);
            s.tune(&mut plan);
            let threads = resolve_threads(s.threads)?;
            let files = with_threads(threads, || build_references(&plan, &s.out()))??;
            list(&files);
            Ok(())
        }
        Command::Diagnose(s) => {
            let s = s.resolve()?;
            let reference = ReferencePolicy::parse(s.reference.as_deref().unwrap_or("none"));
            let mut plan = ExperimentPlan::diagnose(s.cell(200, 20)?, s.seed(), s.out(), reference);
            s.tune(&mut plan);
            let m = orchestrate(&plan, resolve_threads(s.threads)?)?;
            report(&m)?;
            for u in m.units.values() {
                for f in &u.files {
                    if f.path.ends_with(".json") {
                        println!("{}", m.plan.out.join(&f.path).display());
                    }
                }
            }
            Ok(())
        }
        Command::Table1(s) => {
            let s = s.resolve()?;
            let ns = s.n.clone().unwrap_or_else(|| vec![100, 400, 1600]);
            let mut plan = ExperimentPlan::table1(ns, s.replications.unwrap_or(50), s.p.unwrap_or(1), s.seed(), s.out());
            s.tune(&mut plan);
            let m = orchestrate(&plan, resolve_threads(s.threads)?)?;
            report(&m)?;
            for v in read_verdicts(&s.out())? {
                println!("{:<8} c={} {:<12} via {}", v.variant.to_string(), v.c, v.label.as_str(), v.decisive_trend().transform.as_str());
            }
            Ok(())
        }
        Command::Figure(s) => {
            let s = s.resolve()?;
            let scenario = Settings::need(&s.scenario, "scenario")?;
            let (seed, out) = (s.seed(), s.out());
            let mut plan = match scenario {
                Scenario::Fig1 => ExperimentPlan::fig1(seed, out),
                Scenario::Fig2 => ExperimentPlan::fig2(seed, out),
                Scenario::Fig3 => ExperimentPlan::fig3(seed, out),
                other => return Err(Error::Config(format!("{} is not a figure scenario", other.as_str())).into()),
            };
            for g in plan.grid.iter_mut() {
                if let Some(c) = s.c {
                    g.c = c;
                }
                if let Some(m) = s.m {
                    g.m = m;
                }
                if let Some(n) = &s.n {
                    g.n = n.clone();
                }
            }
            report(&orchestrate(&plan, resolve_threads(s.threads)?)?)
        }
        Command::Verify(s) => {
            let s = s.resolve()?;
            let ns = s.n.clone().unwrap_or_else(|| vec![100, 400]);
            let threads = resolve_threads(s.threads)?;
            let checks = with_threads(threads, || verify(s.seed(), &ns, s.draws.unwrap_or(2000)))??;
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{} {} worst={:.3e} tol={:.1e} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.worst,
                    c.tolerance,
                    c.detail
                );
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(Failure { kind: "verify".into(), message: format!("{failed} of {} checks failed", checks.len()) });
            }
            Ok(())
        }
    }
}

fn error_json(kind: &str, message: &str) -> String {
    serde_json::json!({ "kind": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", error_json("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e.kind, &e.message));
            ExitCode::FAILURE
        }
    }
}
