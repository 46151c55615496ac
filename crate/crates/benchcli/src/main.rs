use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use offload_core::volume::{create_volume, Backing};
use offload_core::{ExtentFs, VolumeGeometry};

use benchcli::config::BenchConfig;
use benchcli::experiments::{run_experiment, serve_target, EXPERIMENTS};
use benchcli::metrics::write_csv;

#[derive(Parser)]
#[command(name = "bench", about = "Offload stack benchmark harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Format a volume with an empty file system
    Mkfs {
        /// Volume backing: a file path, or "mem" for throwaway memory
        #[arg(long)]
        vol: String,
        /// Volume size in blocks
        #[arg(long, default_value_t = 131_072)]
        blocks: u64,
        /// Block size in bytes (power of two, >= 512)
        #[arg(long, default_value_t = 512)]
        block_size: u32,
    },
    /// Serve a volume and its offload engine over TCP
    Target {
        /// Benchmark config file (key=value lines)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Address to listen on
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
    },
    /// Run one experiment and emit CSV
    Run {
        /// Experiment name
        #[arg(long)]
        experiment: String,
        /// Benchmark config file (key=value lines)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Workload seed
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// CSV output path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List available experiments
    List,
}

fn load_config(path: &Option<PathBuf>) -> Result<BenchConfig, String> {
    match path {
        None => Ok(BenchConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read {}: {e}", p.display()))?;
            BenchConfig::parse(&text).map_err(|e| e.to_string())
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Mkfs { vol, blocks, block_size } => {
            let backing = if vol == "mem" {
                Backing::Memory
            } else {
                Backing::File(PathBuf::from(&vol))
            };
            let geom = VolumeGeometry::new(block_size, blocks).map_err(|e| e.to_string())?;
            let store = create_volume(&backing, geom).map_err(|e| e.to_string())?;
            let fs = ExtentFs::mkfs(store).map_err(|e| e.to_string())?;
            println!("formatted {vol}: {blocks} x {block_size} B, volume id {}", fs.fs_uuid());
            Ok(())
        }
        Command::Target { config, listen } => {
            let cfg = load_config(&config)?;
            let server = serve_target(&cfg, &listen).map_err(|e| e.to_string())?;
            println!("serving volume \"{}\" on {}", cfg.vol_name, server.addr());
            loop {
                std::thread::park();
            }
        }
        Command::Run { experiment, config, seed, out } => {
            let cfg = load_config(&config)?;
            let rows = run_experiment(&experiment, &cfg, seed).map_err(|e| e.to_string())?;
            match out {
                Some(path) => {
                    let mut f = std::fs::File::create(&path)
                        .map_err(|e| format!("cannot create {}: {e}", path.display()))?;
                    write_csv(&rows, &mut f).map_err(|e| e.to_string())?;
                    eprintln!("wrote {} rows to {}", rows.len(), path.display());
                }
                None => {
                    let stdout = std::io::stdout();
                    write_csv(&rows, &mut stdout.lock()).map_err(|e| e.to_string())?;
                }
            }
            Ok(())
        }
        Command::List => {
            for name in EXPERIMENTS {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
