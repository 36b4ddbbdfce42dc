use std::path::PathBuf;
use std::process::ExitCode;

use biastrial::config::parse_seeds;
use biastrial::report::{emit_report, Format};
use biastrial::{collect_report, run_trial, Cell, Method, Result, Trial, TrialConfig};
use biastrial_core::simba_gen::ScenarioKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "biastrial", version, about = "Counterfactual bias trials on synthetic volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Trial configuration (JSON); absent fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated seed list (overrides `seeds`).
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Restrict to one scenario: no-bias, near-bias or far-bias.
    #[arg(long, global = true)]
    scenario: Option<String>,
    /// Reuse completed artifacts whose hashes verify.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scenario datasets.
    Gen,
    /// Train naive models.
    Train,
    /// Train the configured mitigation methods.
    Mitigate,
    /// Evaluate trained models on the test split.
    Eval,
    /// Compute saliency maps and regional scores.
    Saliency,
    /// Run everything end to end and write the report.
    Trial {
        #[arg(long, value_delimiter = ',', default_value = "csv,json,plotdata")]
        format: Vec<String>,
    },
    /// Assemble the report from existing artifacts.
    Report {
        #[arg(long, value_delimiter = ',', default_value = "csv,json,plotdata")]
        format: Vec<String>,
    },
}

fn load(common: &Common) -> Result<(TrialConfig, Option<ScenarioKind>)> {
    let mut cfg = TrialConfig::load(common.config.as_deref(), std::env::vars())?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(s) = &common.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    let scenario = common.scenario.as_deref().map(ScenarioKind::parse).transpose()?;
    cfg.validate()?;
    Ok((cfg, scenario))
}

fn formats(names: &[String]) -> Result<Vec<Format>> {
    names.iter().map(|s| Format::parse(s.trim())).collect()
}

fn selected(cfg: &TrialConfig, scenario: Option<ScenarioKind>, keep: impl Fn(Method) -> bool) -> Vec<Cell> {
    cfg.cells().into_iter().filter(|c| scenario.is_none_or(|s| c.scenario == s) && keep(c.method)).collect()
}

fn run(cli: Cli) -> Result<()> {
    let (mut cfg, scenario) = load(&cli.common)?;
    let resume = cli.common.resume;
    match cli.command {
        Command::Gen => {
            let mut trial = Trial::new(cfg, resume)?;
            for kind in trial.cfg.scenarios.clone() {
                if scenario.is_none_or(|s| s == kind) {
                    trial.ensure_dataset(kind)?;
                }
            }
            println!("datasets in {}", trial.data_root().display());
        }
        Command::Train | Command::Mitigate | Command::Eval | Command::Saliency => {
            let cells = match cli.command {
                Command::Train => selected(&cfg, scenario, |m| m == Method::Naive),
                Command::Mitigate => selected(&cfg, scenario, |m| m != Method::Naive),
                _ => selected(&cfg, scenario, |_| true),
            };
            let mut trial = Trial::new(cfg, resume)?;
            trial.reuse_fits = match cli.command {
                Command::Train => Vec::new(),
                Command::Mitigate => vec![Method::Naive],
                _ => Method::ALL.to_vec(),
            };
            for cell in cells {
                match cli.command {
                    Command::Eval => {
                        let e = trial.evaluate(cell)?;
                        let acc = e.body.metrics.overall.accuracy.unwrap_or(f64::NAN);
                        println!("{cell}: accuracy {acc:.4}");
                    }
                    Command::Saliency => {
                        trial.saliency(cell)?;
                    }
                    _ => {
                        let (fit, _) = trial.fit(cell)?;
                        println!("{cell}: {}", fit.hash);
                    }
                }
            }
        }
        Command::Trial { format } => {
            let formats = formats(&format)?;
            if let Some(s) = scenario {
                cfg.scenarios.retain(|&k| k == s);
                cfg.validate()?;
            }
            let dir = cfg.out_dir.join("report");
            let report = run_trial(cfg, resume)?;
            emit_report(&report, &formats, &dir)?;
            println!("{}", report.hash);
        }
        Command::Report { format } => {
            let formats = formats(&format)?;
            if let Some(s) = scenario {
                cfg.scenarios.retain(|&k| k == s);
                cfg.validate()?;
            }
            let dir = cfg.out_dir.join("report");
            let report = collect_report(cfg)?;
            emit_report(&report, &formats, &dir)?;
            println!("{}", report.hash);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
