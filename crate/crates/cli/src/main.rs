use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sjen::model::Preset;
use sjen::trainer::TrainPhase;
use sjen_cli::{
    cmd_bench, cmd_enhance, cmd_evaluate, cmd_simulate, cmd_train, load_config, BenchArgs, CliError, CliResult,
    EvaluateArgs, ReportFormat, SimulateArgs, TrainArgs,
};

#[derive(Parser)]
#[command(name = "sjen", version, about = "Monaural speech enhancement with binaural knowledge distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Teacher,
    BadStudent,
    Student,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Table,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize train and test corpora.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one of the three networks.
    Train {
        #[arg(value_enum)]
        phase: PhaseArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        ckpt_out: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        bad_student: Option<PathBuf>,
    },
    /// Enhance a mono WAV file.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Score a checkpoint per test SNR.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: FormatArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report parameters, FLOPs and real-time factor.
    Bench {
        #[arg(long, conflicts_with = "preset")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Simulate {
            config,
            out,
            seed,
            n_train,
            n_test,
            force,
        } => {
            let cfg = load_config(config.as_deref())?;
            cmd_simulate(
                &cfg,
                &SimulateArgs {
                    out,
                    seed,
                    n_train,
                    n_test,
                    force,
                },
            )
        }
        Command::Train {
            phase,
            config,
            manifest,
            ckpt_out,
            teacher,
            bad_student,
        } => {
            let cfg = load_config(config.as_deref())?;
            let phase = match phase {
                PhaseArg::Teacher => TrainPhase::Teacher,
                PhaseArg::BadStudent => TrainPhase::BadStudent,
                PhaseArg::Student => TrainPhase::Student,
            };
            cmd_train(
                &cfg,
                &TrainArgs {
                    phase,
                    manifest,
                    ckpt_out,
                    teacher,
                    bad_student,
                },
            )
        }
        Command::Enhance { ckpt, input, output } => cmd_enhance(&ckpt, &input, &output),
        Command::Evaluate {
            ckpt,
            config,
            manifest,
            format,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let format = match format {
                FormatArg::Table => ReportFormat::Table,
                FormatArg::Csv => ReportFormat::Csv,
            };
            cmd_evaluate(
                &cfg,
                &EvaluateArgs {
                    ckpt,
                    manifest,
                    format,
                    out,
                },
            )
        }
        Command::Bench {
            ckpt,
            preset,
            seconds,
            repeats,
        } => cmd_bench(&BenchArgs {
            ckpt,
            preset,
            seconds,
            repeats,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code() as u8
}
