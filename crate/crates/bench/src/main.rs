use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use msfem_bench::run::{run_csv, write_run, write_sweep};
use msfem_bench::tables::{reproduce, ReferenceCache, TABLES};
use msfem_bench::{run, sweep, theory, Check, ExperimentConfig};

/// Multiscale advection-diffusion experiments.
#[derive(Parser)]
#[command(name = "msfem-bench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve every configured method once and write the error CSV.
    Run(ConfigArgs),
    /// Repeat a run along one parameter axis.
    Sweep(ConfigArgs),
    /// Check the analytic results; exits with 1 if any check fails.
    VerifyTheory {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run the damped splitting on the full reference mesh.
        #[arg(long)]
        full: bool,
    },
    /// Reproduce a published table (or `all`); exits with 1 if a target is missed.
    ReproduceTable {
        name: String,
        /// Use the full-size meshes (minutes per table).
        #[arg(long)]
        full: bool,
        #[arg(long, default_value = "out")]
        output: PathBuf,
    },
}

/// Config sources, applied in order: preset, file, flags, `--set`.
#[derive(Args)]
struct ConfigArgs {
    /// desk, reference or one-d
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, as key=value; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(flatten)]
    fields: FieldArgs,
}

macro_rules! field_args {
    ($($field:ident => $key:literal),* $(,)?) => {
        /// One flag per config key.
        #[derive(Args)]
        struct FieldArgs {
            $(
                #[arg(long, value_name = "VALUE")]
                $field: Option<String>,
            )*
        }

        impl FieldArgs {
            fn pairs(&self) -> Vec<(&'static str, &str)> {
                let mut v = Vec::new();
                $(if let Some(x) = &self.$field { v.push(($key, x.as_str())); })*
                v
            }
        }
    };
}

field_args! {
    name => "name",
    dim => "dim",
    length => "length",
    alpha => "alpha",
    delta => "delta",
    epsilon => "epsilon",
    b => "b",
    f => "f",
    h_coarse => "H",
    coarse_n => "coarse_n",
    fine => "fine",
    methods => "methods",
    tau => "tau",
    tau_norm => "tau_norm",
    bc => "bc",
    backend => "backend",
    tolerance => "tolerance",
    direct_limit => "direct_limit",
    alpha_spl => "alpha_spl",
    beta => "beta",
    projection => "projection",
    spl_tolerance => "spl_tolerance",
    spl_max_iter => "spl_max_iter",
    spl_source => "spl_source",
    online_min_seconds => "online_min_seconds",
    sweep_axis => "sweep_axis",
    sweep_values => "sweep_values",
    workers => "workers",
    output => "output",
    seed => "seed",
}

impl ConfigArgs {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg = ExperimentConfig::parse_onto(cfg, &text).with_context(|| format!("in {}", path.display()))?;
        }
        for (k, v) in self.fields.pairs() {
            cfg.set(k, v)?;
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else { bail!("--set expects KEY=VALUE, got {kv:?}") };
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report(checks: &[Check]) -> bool {
    for c in checks {
        println!("{}", c.line());
    }
    checks.iter().all(|c| c.passed)
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.build()?;
            let rec = run(&cfg)?;
            let path = write_run(&rec)?;
            print!("{}", run_csv(&rec));
            if !rec.fine_constraints_met {
                eprintln!("note: fine mesh h = {} is coarser than the resolution constraints ask for", rec.h_fine);
            }
            eprintln!("wrote {}", path.display());
            Ok(true)
        }
        Command::Sweep(args) => {
            let cfg = args.build()?;
            if cfg.sweep_axis.is_none() {
                bail!("sweep needs --sweep-axis and --sweep-values");
            }
            let points = sweep(&cfg)?;
            for (v, r) in &points {
                if let Err(e) = r {
                    eprintln!("point {v}: {e}");
                }
            }
            let path = write_sweep(&cfg, &points)?;
            println!("{}", path.display());
            Ok(true)
        }
        Command::VerifyTheory { seed, full } => Ok(report(&theory::verify_all(seed, full))),
        Command::ReproduceTable { name, full, output } => {
            let names: Vec<&str> = if name == "all" { TABLES.to_vec() } else { vec![name.as_str()] };
            let cache = ReferenceCache::new();
            let mut ok = true;
            for n in names {
                let mut out = reproduce(n, full, &cache)?;
                for rec in &mut out.records {
                    rec.config.output = output.clone();
                    write_run(rec)?;
                }
                if let Some(t) = &out.costs {
                    let path = output.join("costs_table.csv");
                    std::fs::write(&path, t.to_csv()).with_context(|| format!("writing {}", path.display()))?;
                    print!("{}", t.to_csv());
                }
                for rec in &out.records {
                    println!("# {}", rec.config.name);
                    print!("{}", run_csv(rec));
                }
                ok &= report(&out.checks);
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
