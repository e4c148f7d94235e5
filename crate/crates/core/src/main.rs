use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sessionkv::checker::{self, Scope};
use sessionkv::config::SimConfig;
use sessionkv::harness::{self, presets, render_report};
use sessionkv::trace::Trace;

const EXIT_VIOLATION: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_IO: u8 = 1;

#[derive(Parser)]
#[command(name = "sessionkv", version, about = "Per-key session guarantee simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    /// Only the guarantees each operation asked for.
    Requested,
    /// Every guarantee for every operation.
    All,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Scope {
        match s {
            ScopeArg::Requested => Scope::Requested,
            ScopeArg::All => Scope::All,
        }
    }
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML scenario file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in scenario (see `presets`).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Override a config key, e.g. `--set local_prob=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario, write its trace, metrics and violation report.
    Run {
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for trace.ndjson, metrics.csv and violations.txt.
        #[arg(long, default_value = "sessionkv-out")]
        out: PathBuf,
        #[arg(long, value_enum)]
        scope: Option<ScopeArg>,
    },
    /// Run every consistency variant over a parameter range and emit one CSV.
    Sweep {
        /// clients_per_dc, local_prob or write_prob.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run the checkers on a saved trace.
    Check {
        trace: PathBuf,
        #[arg(long, value_enum, default_value = "requested")]
        scope: ScopeArg,
    },
    /// List built-in scenarios, or print one as TOML.
    Presets {
        #[arg(long)]
        show: Option<String>,
    },
}

enum Failure {
    Usage(String),
    Io(String),
}

fn load_config(args: &ConfigArgs) -> Result<(SimConfig, Option<Scope>), Failure> {
    let (mut cfg, scope) = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
            (SimConfig::from_toml(&text).map_err(|e| Failure::Usage(e.to_string()))?, None)
        }
        (None, Some(name)) => {
            let p = presets::by_name(name)
                .ok_or_else(|| Failure::Usage(format!("unknown preset {name:?}")))?;
            (p.config(), Some(p.scope))
        }
        (None, None) => (SimConfig::default(), None),
    };
    for s in &args.sets {
        cfg.apply_override(s).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok((cfg, scope))
}

fn write_file(path: &Path, data: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, data).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn exec(cmd: Cmd) -> Result<bool, Failure> {
    match cmd {
        Cmd::Run { seed, cfg, out, scope } => {
            let (mut config, preset_scope) = load_config(&cfg)?;
            config.seed = seed;
            let scope = scope.map(Scope::from).or(preset_scope).unwrap_or(Scope::Requested);
            let r = harness::run_scenario(&config, scope);
            std::fs::create_dir_all(&out).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
            r.output
                .trace
                .save(&out.join("trace.ndjson"))
                .map_err(|e| Failure::Io(e.to_string()))?;
            write_file(&out.join("metrics.csv"), r.metrics.to_csv().as_bytes())?;
            write_file(
                &out.join("violations.txt"),
                render_report(&r.output.trace, &r.check).as_bytes(),
            )?;
            print!("{}", r.summary());
            if let Err(e) = r.metrics.reconcile(&r.output.trace) {
                eprintln!("metrics do not reconcile: {e}");
            }
            Ok(r.passed())
        }
        Cmd::Sweep { param, values, seed, cfg, out } => {
            let (mut config, _) = load_config(&cfg)?;
            if let Some(s) = seed {
                config.seed = s;
            }
            let s = harness::sweep(&config, &param, &values).map_err(|e| Failure::Usage(e.to_string()))?;
            let csv = s.to_csv();
            match out {
                Some(p) => write_file(&p, csv.as_bytes())?,
                None => print!("{csv}"),
            }
            for c in s.cells.iter().filter(|c| !c.clean) {
                eprintln!("{}={} {}: {} violations", param, c.value, c.variant.name, c.violations);
            }
            Ok(s.failures() == 0)
        }
        Cmd::Check { trace, scope } => {
            let t = Trace::load(&trace).map_err(|e| Failure::Usage(format!("{}: {e}", trace.display())))?;
            let report = checker::check(&t, scope.into());
            print!("{}", render_report(&t, &report));
            Ok(report.is_clean())
        }
        Cmd::Presets { show } => {
            match show {
                Some(name) => {
                    let p = presets::by_name(&name)
                        .ok_or_else(|| Failure::Usage(format!("unknown preset {name:?}")))?;
                    print!("{}", p.config().to_toml().map_err(|e| Failure::Io(e.to_string()))?);
                }
                None => {
                    for p in presets::all() {
                        let scope = match p.scope {
                            Scope::Requested => "requested",
                            Scope::All => "all",
                        };
                        println!("{:<20} scope={:<9} {}", p.name, scope, p.about);
                    }
                }
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match exec(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VIOLATION),
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_IO)
        }
    }
}
