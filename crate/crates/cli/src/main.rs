use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smkt::campaign::{run_campaign, CampaignName};
use smkt::commands::{self, linspace, RunError};
use smkt::emit::{emit_outputs, Format};
use smkt::scenario::{bundled, load_scenario, Scenario, ScenarioError, BUNDLED};
use sponsored_market::ne_search::GradientMode;

const EXIT_VALIDATION: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "smkt", version, about = "Sponsored mobile data market: dynamics and equilibria")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long, global = true)]
    scenario: Option<String>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides every seed of the scenario.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long, global = true, value_parser = parse_gradient_mode)]
    gradient_mode: Option<GradientMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Replicator trajectory under the initial strategies.
    Evolve,
    /// Delayed trajectories, one per delay.
    EvolveDelayed {
        /// Comma-separated uniform delays; defaults to the scenario's delay block.
        #[arg(long, value_delimiter = ',')]
        tau: Vec<f64>,
    },
    /// Provider equilibrium by distributed projected-gradient search.
    Ne,
    /// Stackelberg equilibrium by diagonalization.
    Se,
    /// Myopic leader play.
    Myopic {
        #[arg(long, default_value_t = 50)]
        rounds: usize,
    },
    /// Follower equilibrium over a range of one quantity.
    Sweep {
        /// `pu`, `pc`, `theta<j>`, `b<j>` or `population`.
        #[arg(long)]
        sweep_var: String,
        /// `lo:hi:n`.
        #[arg(long, value_parser = parse_range)]
        sweep_range: (f64, f64, usize),
    },
    /// Batch reproduction of one figure.
    Campaign {
        #[arg(value_enum)]
        name: CampaignName,
        /// Also write SVG line charts.
        #[arg(long)]
        svg: bool,
    },
    /// Load and check the scenario (or every bundled one) without solving.
    Validate,
}

fn parse_gradient_mode(s: &str) -> Result<GradientMode, String> {
    match s {
        "partial" => Ok(GradientMode::Partial),
        "sensitivity" => Ok(GradientMode::Sensitivity),
        _ => Err(format!("expected `partial` or `sensitivity`, got `{s}`")),
    }
}

fn parse_range(s: &str) -> Result<(f64, f64, usize), String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, n] = parts[..] else {
        return Err(format!("expected lo:hi:n, got `{s}`"));
    };
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    let n = n.trim().parse::<usize>().map_err(|e| format!("`{n}`: {e}"))?;
    if n == 0 {
        return Err("n must be positive".into());
    }
    Ok((num(lo)?, num(hi)?, n))
}

fn resolve(arg: &str) -> Result<Scenario, ScenarioError> {
    let path = Path::new(arg);
    if !path.exists() && BUNDLED.iter().any(|(n, _)| *n == arg.trim_end_matches(".scenario")) {
        bundled(arg)
    } else {
        load_scenario(path)
    }
}

fn scenario(cli: &Cli) -> Result<Scenario, RunError> {
    let arg = cli.scenario.as_deref().ok_or_else(|| RunError::Usage("--scenario is required".into()))?;
    let mut sc = resolve(arg)?;
    if let Some(seed) = cli.seed {
        sc.meta.seed = seed;
        sc.ne.seed = seed;
        sc.ne.agent.seed = seed;
        sc.agent.seed = seed;
    }
    if let Some(mode) = cli.gradient_mode {
        sc.ne.gradient_mode = mode;
    }
    Ok(sc)
}

fn run(cli: &Cli) -> Result<bool, RunError> {
    let art = match &cli.command {
        Command::Validate => {
            match &cli.scenario {
                Some(_) => {
                    let sc = scenario(cli)?;
                    println!("{}: ok", sc.meta.name);
                }
                None => {
                    for (name, _) in BUNDLED {
                        bundled(name)?;
                        println!("{name}: ok");
                    }
                }
            }
            return Ok(true);
        }
        Command::Campaign { name, svg } => {
            let out = run_campaign(*name, &cli.out, *svg)?;
            for f in &out.failures {
                eprintln!("failed: {f}");
            }
            println!("{name}: {} runs, {} failures, written to {}", out.artifacts.len(), out.failures.len(), cli.out.display());
            return Ok(out.failures.is_empty() && out.artifacts.iter().all(|a| a.converged));
        }
        Command::Evolve => commands::evolve(&scenario(cli)?)?,
        Command::EvolveDelayed { tau } => commands::evolve_delayed(&scenario(cli)?, tau)?,
        Command::Ne => commands::ne(&scenario(cli)?)?,
        Command::Se => commands::se(&scenario(cli)?)?,
        Command::Myopic { rounds } => commands::myopic(&scenario(cli)?, *rounds)?,
        Command::Sweep { sweep_var, sweep_range: (lo, hi, n) } => {
            let (art, failures) = commands::sweep(&scenario(cli)?, sweep_var, &linspace(*lo, *hi, *n))?;
            for f in &failures {
                eprintln!("failed: {f}");
            }
            art
        }
    };
    for path in emit_outputs(&art, &cli.out, cli.format)? {
        println!("{}", path.display());
    }
    let r = art.residuals;
    let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3e}"));
    println!(
        "{} {}: converged {} ne_gap {} gqvi {} kkt {} ({:.2} s)",
        art.scenario,
        art.command,
        art.converged,
        show(r.ne_gap),
        show(r.gqvi),
        show(r.kkt),
        art.wall_clock_s
    );
    Ok(art.converged)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NOT_CONVERGED),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                RunError::Scenario(_) => ExitCode::from(EXIT_VALIDATION),
                RunError::Market(sponsored_market::MarketError::NotConverged(_)) => ExitCode::from(EXIT_NOT_CONVERGED),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
