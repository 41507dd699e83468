use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sca_core::report::{render_json, render_text, run_sca, AnalysisOptions, DashedSelection, InputFormat, ReportFormat, RunConfig};

#[derive(Parser)]
#[command(name = "sca", version, about = "Structural control analysis of stock-and-flow models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify exogenous variables, build the control graph and report controllability.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Sdm,
    Xmile,
}

#[derive(Clone, Copy, ValueEnum)]
enum DashedArg {
    Both,
    Solid,
    Absent,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportArg {
    Text,
    Json,
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    /// Model file (.sdm, or XMILE).
    path: PathBuf,
    /// Input format; inferred from the extension by default.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Which treatment of dashed edges to report.
    #[arg(long, value_enum, default_value = "both")]
    dashed: DashedArg,
    /// Step of the baseline simulation check.
    #[arg(long, default_value_t = 0.25)]
    dt: f64,
    /// Sample states per exogenous variable, baseline included.
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write the control graph in Graphviz DOT format.
    #[arg(long)]
    dot: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    report: ReportArg,
    /// Debug only: treat delays as plain auxiliaries. Produces a wrong
    /// analysis on purpose, to show what hidden delay state changes.
    #[arg(long)]
    no_delay_expansion: bool,
}

fn main() -> ExitCode {
    let Command::Analyze(args) = Cli::parse().command;
    let cfg = RunConfig {
        input_path: args.path,
        format: args.format.map(|f| match f {
            FormatArg::Sdm => InputFormat::Sdm,
            FormatArg::Xmile => InputFormat::Xmile,
        }),
        options: AnalysisOptions {
            dashed: match args.dashed {
                DashedArg::Both => DashedSelection::Both,
                DashedArg::Solid => DashedSelection::Solid,
                DashedArg::Absent => DashedSelection::Absent,
            },
            dt: args.dt,
            samples: args.samples,
            seed: args.seed,
            expand_delays: !args.no_delay_expansion,
        },
        dot_path: args.dot,
        report_format: match args.report {
            ReportArg::Text => ReportFormat::Text,
            ReportArg::Json => ReportFormat::Json,
        },
    };
    match run_sca(&cfg) {
        Ok(report) => {
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            let out = match cfg.report_format {
                ReportFormat::Text => render_text(&report),
                ReportFormat::Json => render_json(&report),
            };
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            for line in e.details() {
                eprintln!("  {line}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
