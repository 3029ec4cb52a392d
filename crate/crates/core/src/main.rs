use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use metafl::energy::{response_fixture, table1, EnergyProfile, Response};
use metafl::runner::{self, Aggregate, ExperimentConfig, Named, OutputDir, Simulation};
use metafl::Error;

#[derive(Parser)]
#[command(
    name = "metafl",
    version,
    about = "Meta-learned initialization with decentralized adaptation and energy accounting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment directory to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated t0 values.
    #[arg(long, value_delimiter = ',')]
    t0: Option<Vec<usize>>,
    /// Built-in profile name or JSON path.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Exit with status 2 when any task misses its threshold.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one pipeline at `maml.rounds` (or the single `--t0`).
    Simulate(Common),
    /// Run `monte_carlo_runs` pipelines and aggregate.
    Montecarlo(Common),
    /// Simulate every t0 candidate, or price a stored response with `--response`.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Response fixture name or JSON path; skips simulation.
        #[arg(long)]
        response: Option<String>,
    },
    /// Price a response fixture in closed form.
    Energy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "table2")]
        response: String,
    },
    /// Print or write the built-in profile and response fixtures.
    Fixtures {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Invalid(Error),
    NotConverged,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Invalid(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Invalid(e.into())
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::NotConverged) => {
            eprintln!("error: some tasks did not reach their threshold");
            ExitCode::from(2)
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.master_seed = s;
    }
    if let Some(t0) = &c.t0 {
        cfg.t0_candidates = t0.clone();
    }
    if let Some(p) = &c.profile {
        cfg.profile = Named::Name(p.clone());
    }
    if c.workers.is_some() {
        cfg.workers = c.workers;
    }
    Ok(cfg)
}

fn load_response(name: &str) -> Result<Response<f64>, Error> {
    match response_fixture(name) {
        Err(Error::UnknownBuiltin(_)) => Ok(serde_json::from_str(&fs::read_to_string(name)?)?),
        other => other,
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(io::stdout().lock(), "{text}") {
        // A closed reader (e.g. `| head`) is not an error.
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(c) => simulate(&c),
        Command::Montecarlo(c) => montecarlo(&c),
        Command::Sweep { common, response } => sweep(&common, response.as_deref()),
        Command::Energy { common, response } => energy(&common, &response),
        Command::Fixtures { out } => fixtures(out.as_deref()),
    }
}

fn simulate(c: &Common) -> Result<(), Failure> {
    let mut cfg = load_config(c)?;
    let t0 = match cfg.t0_candidates.as_slice() {
        [t] if c.t0.is_some() => *t,
        _ if c.t0.is_some() => return Err(Error::config("--t0", "simulate takes a single value").into()),
        _ => cfg.maml.rounds,
    };
    cfg.maml.rounds = t0;
    let sim = Simulation::new(cfg)?;
    let (record, params) = sim.run_with(sim.cfg.master_seed, t0)?;
    if let Some(dir) = &c.out {
        let out = OutputDir::create(dir, &sim.cfg)?;
        out.record("run-0000", &record)?;
        out.params(&format!("meta-t0-{t0}"), &params, &sim.hash, t0)?;
        runner::write_bars(fs::File::create(out.table("bars.csv"))?, std::slice::from_ref(&record))?;
    }
    match c.format {
        Format::Json => print_json(&record)?,
        Format::Csv => runner::write_bars(io::stdout(), std::slice::from_ref(&record))?,
    }
    if c.strict && !record.all_converged() {
        return Err(Failure::NotConverged);
    }
    Ok(())
}

fn montecarlo(c: &Common) -> Result<(), Failure> {
    let sim = Simulation::new(load_config(c)?)?;
    let mc = sim.monte_carlo()?;
    let by_t0: BTreeMap<usize, Aggregate> = [(sim.cfg.maml.rounds, mc.aggregate.clone())].into_iter().collect();
    if let Some(dir) = &c.out {
        let out = OutputDir::create(dir, &sim.cfg)?;
        for (i, r) in mc.records.iter().enumerate() {
            out.record(&format!("run-{i:04}"), r)?;
        }
        runner::write_rounds(fs::File::create(out.table("rounds.csv"))?, &by_t0)?;
        runner::write_bars(fs::File::create(out.table("bars.csv"))?, &mc.records)?;
    }
    match c.format {
        Format::Json => print_json(&mc.aggregate)?,
        Format::Csv => runner::write_rounds(io::stdout(), &by_t0)?,
    }
    if c.strict && !mc.records.iter().all(|r| r.all_converged()) {
        return Err(Failure::NotConverged);
    }
    Ok(())
}

fn sweep(c: &Common, response: Option<&str>) -> Result<(), Failure> {
    if let Some(r) = response {
        return energy(c, r);
    }
    let sim = Simulation::new(load_config(c)?)?;
    let s = sim.sweep(&sim.cfg.t0_candidates)?;
    if let Some(dir) = &c.out {
        let out = OutputDir::create(dir, &sim.cfg)?;
        for (t0, recs) in &s.records {
            for (i, r) in recs.iter().enumerate() {
                out.record(&format!("t0-{t0}-run-{i:04}"), r)?;
            }
        }
        runner::write_tradeoff(fs::File::create(out.table("tradeoff.csv"))?, &s.tradeoff)?;
        runner::write_rounds(fs::File::create(out.table("rounds.csv"))?, &s.aggregates)?;
        if let Some(recs) = s.records.values().next_back() {
            runner::write_bars(fs::File::create(out.table("bars.csv"))?, recs)?;
        }
    }
    match c.format {
        Format::Json => print_json(&s.tradeoff)?,
        Format::Csv => runner::write_tradeoff(io::stdout(), &s.tradeoff)?,
    }
    if c.strict && !s.records.values().flatten().all(|r| r.all_converged()) {
        return Err(Failure::NotConverged);
    }
    Ok(())
}

fn energy(c: &Common, response: &str) -> Result<(), Failure> {
    let cfg = load_config(c)?;
    let sim = Simulation::new(cfg)?;
    let mut response = load_response(response)?;
    if c.t0.is_some() {
        response.retain(|t0, _| sim.cfg.t0_candidates.contains(t0));
    }
    // Closed-form pricing uses the profile as given, not the simulator's
    // batch counts.
    let profile = match &sim.cfg.profile {
        Named::Name(n) => EnergyProfile::resolve(n)?,
        Named::Inline(d) => EnergyProfile::from_doc(d)?,
    };
    let priced = runner::price(&response, &profile, &sim.energy_topology()?, &sim.cfg.efficiency_pairs)?;
    if let Some(dir) = &c.out {
        let out = OutputDir::create(dir, &sim.cfg)?;
        runner::write_tradeoff(fs::File::create(out.table("tradeoff.csv"))?, &priced)?;
    }
    match c.format {
        Format::Json => print_json(&priced)?,
        Format::Csv => runner::write_tradeoff(io::stdout(), &priced)?,
    }
    Ok(())
}

fn fixtures(out: Option<&Path>) -> Result<(), Failure> {
    let table2 = response_fixture("table2")?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(
                dir.join("table1.json"),
                serde_json::to_string_pretty(&table1()).map_err(Error::from)?,
            )?;
            fs::write(
                dir.join("table2.json"),
                serde_json::to_string_pretty(&table2).map_err(Error::from)?,
            )?;
        }
        None => print_json(&serde_json::json!({ "table1": table1(), "table2": table2 }))?,
    }
    Ok(())
}
