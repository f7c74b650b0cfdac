use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ftl::fusion::FusionPolicy;
use ftl::hw::EngineSelection;
use ftl::par::Parallelism;
use ftl::report::{cmd_compare, cmd_dump_constraints, cmd_plan, emit, Format, FtlError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "ftl", version, about = "Fused layer tiling planner and schedule simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve tile sizes for every group and print them
    Plan(RunArgs),
    /// Simulate layer-per-layer and fused execution side by side
    Compare(RunArgs),
    /// Print variables, bindings and constraints per group
    DumpConstraints(RunArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EngineArg {
    Cluster,
    /// Gemm and Conv2D on the NPU, elementwise on the cluster
    Npu,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Network description (.net)
    #[arg(long)]
    model: PathBuf,

    /// Hardware profile (.hw)
    #[arg(long)]
    hw: PathBuf,

    /// Kernel descriptor table; defaults to the built-in one
    #[arg(long)]
    kernels: Option<PathBuf>,

    /// auto, none, or explicit chains like `a,b;c,d`
    #[arg(long, default_value = "auto")]
    fuse: String,

    #[arg(long, value_enum, default_value = "cluster")]
    engine: EngineArg,

    #[arg(long)]
    no_double_buffer: bool,

    #[arg(long, value_enum, default_value = "table")]
    format: Format,

    /// Write to this file instead of stdout
    #[arg(short, long)]
    output: Option<PathBuf>,

    /// Solve groups on one thread
    #[arg(long)]
    sequential: bool,
}

impl RunArgs {
    fn config(&self) -> RunConfig {
        RunConfig {
            model: self.model.clone(),
            hw: self.hw.clone(),
            kernels: self.kernels.clone(),
            fuse: FusionPolicy::parse(&self.fuse),
            engine: match self.engine {
                EngineArg::Cluster => EngineSelection::Cluster,
                EngineArg::Npu => EngineSelection::NpuForGemm,
            },
            double_buffering: !self.no_double_buffer,
            format: self.format,
            output: self.output.clone(),
            parallelism: if self.sequential {
                Parallelism::Sequential
            } else {
                Parallelism::Parallel
            },
        }
    }
}

fn run(cli: &Cli) -> Result<Option<String>, FtlError> {
    let (args, cmd): (_, fn(&RunConfig) -> Result<String, FtlError>) = match &cli.command {
        Command::Plan(a) => (a, cmd_plan),
        Command::Compare(a) => (a, cmd_compare),
        Command::DumpConstraints(a) => (a, cmd_dump_constraints),
    };
    let cfg = args.config();
    let text = cmd(&cfg)?;
    emit(&cfg, text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Some(text)) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
