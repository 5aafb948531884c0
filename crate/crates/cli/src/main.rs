use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use apfl_core::client::local_accuracy;
use apfl_core::data::{synthetic_clusters, PartitionSpec, SyntheticSpec};
use apfl_core::experiments::{cmd_partition, cmd_run, cmd_sweep, prepare, RunConfig, RunReport, SweepParam, TransportKind};
use apfl_core::formats::{save_labels, save_matrix};
use apfl_core::protocol::MessageKind;
use apfl_core::transport::{join, serve};
use apfl_core::verify::{cmd_verify, VerifyOptions};

#[derive(Parser)]
#[command(name = "apfl", version, about = "Gradient-free personalized federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write report.json and accuracy.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = ["simulated", "socket"])]
        transport: Option<String>,
    },
    /// Run once per value of one parameter and write sweep.csv plus plots.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// lambda, gamma, beta, d_p, d_r, act_p, act_r or alpha.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check fusion equivalence, order and heterogeneity invariance, and
    /// refinement stationarity on random instances.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Finalize without the regularizer correction (harness self-check).
        #[arg(long)]
        inject_fault: bool,
        #[arg(long)]
        json: bool,
    },
    /// Write a Dirichlet partition manifest for a feature/label file pair.
    Partition {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        clients: usize,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic Gaussian-cluster dataset in the binary formats.
    Synth {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 5000)]
        samples: usize,
        #[arg(long, default_value_t = 0.35)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Act as the server of a multi-process round.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
    },
    /// Act as one client of a multi-process round. Every process derives
    /// the same partition from the shared config.
    Join {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        server: String,
        #[arg(long)]
        client: u32,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn print_report(r: &RunReport) {
    println!(
        "dual    mean {:.4}  weighted {:.4}",
        r.mean_accuracy, r.weighted_accuracy
    );
    println!(
        "primary mean {:.4}  weighted {:.4}",
        r.primary_mean_accuracy, r.primary_weighted_accuracy
    );
    println!(
        "uploads {} ({} bytes), global models {}",
        r.stats.received_count(MessageKind::Upload),
        r.stats.received_bytes(MessageKind::Upload),
        r.stats.sent_count(MessageKind::GlobalModel)
    );
    println!(
        "timings: prepare {:.3}s, round {:.3}s, evaluate {:.3}s",
        r.timings.prepare_secs, r.timings.round_secs, r.timings.evaluate_secs
    );
}

fn load_config(path: &PathBuf, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(out) = out {
        cfg.output_dir = Some(out);
    }
    if cfg.output_dir.is_none() {
        cfg.output_dir = Some(PathBuf::from("apfl-out"));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, out, transport } => {
            let mut cfg = load_config(&config, out)?;
            match transport.as_deref() {
                Some("socket") => cfg.transport = TransportKind::Socket,
                Some("simulated") => cfg.transport = TransportKind::Simulated,
                _ => {}
            }
            let report = cmd_run(&cfg)?;
            print_report(&report);
            println!("wrote {}", cfg.output_dir.as_ref().expect("set").display());
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let cfg = load_config(&config, out)?;
            let param: SweepParam = param.parse()?;
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            let table = cmd_sweep(&cfg, param, &values)?;
            print!("{}", table.to_csv());
            println!("wrote {}", cfg.output_dir.as_ref().expect("set").display());
        }
        Command::Verify {
            seed,
            inject_fault,
            json,
        } => {
            let report = cmd_verify(VerifyOptions { seed, inject_fault });
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                for s in &report.suites {
                    println!(
                        "{:<26} {:>3} instances  max error {:.3e}  budget {:.0e}  {}",
                        s.name,
                        s.instances,
                        s.max_error,
                        s.tolerance,
                        if s.passed { "PASS" } else { "FAIL" }
                    );
                }
            }
            if !report.passed() {
                for s in &report.suites {
                    if let Some(seed) = s.failing_seed() {
                        eprintln!("{} failed; worst instance seed {seed}", s.name);
                    }
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Partition {
            features,
            labels,
            clients,
            alpha,
            seed,
            out,
        } => {
            let spec = PartitionSpec::new(clients, alpha, seed);
            let summary = cmd_partition(&features, &labels, &spec, &out)?;
            for h in &summary.histograms {
                let counts: Vec<String> = h.counts.iter().map(|c| c.to_string()).collect();
                println!("client {:>3}: [{}]  entropy {:.3}", h.client_id, counts.join(" "), h.entropy);
            }
            println!("mean entropy {:.4}", summary.mean_entropy);
            println!("wrote {}", out.display());
        }
        Command::Synth {
            classes,
            dim,
            samples,
            separation,
            noise,
            seed,
            out_dir,
        } => {
            let ds = synthetic_clusters(&SyntheticSpec {
                num_classes: classes,
                input_dim: dim,
                samples,
                separation,
                noise,
                seed,
            })?;
            std::fs::create_dir_all(&out_dir)?;
            save_matrix(out_dir.join("features.bin"), ds.features())?;
            save_labels(out_dir.join("labels.bin"), ds.labels(), ds.num_classes())?;
            println!("wrote {} samples to {}", ds.len(), out_dir.display());
        }
        Command::Serve { config, bind } => {
            let cfg = RunConfig::load(&config)?;
            let prepared = prepare(&cfg)?;
            let listener = TcpListener::bind(&bind).with_context(|| format!("binding {bind}"))?;
            println!("listening on {} for {} clients", listener.local_addr()?, prepared.server.roster.len());
            let report = serve(listener, &prepared.server)?;
            println!(
                "fused {} uploads in order {:?}; global stream {}x{}",
                report.arrival_order.len(),
                report.arrival_order,
                report.g_global.rows(),
                report.g_global.cols()
            );
            println!("bytes received {}, sent {}", report.stats.bytes_received, report.stats.bytes_sent);
        }
        Command::Join { config, server, client } => {
            let cfg = RunConfig::load(&config)?;
            let prepared = prepare(&cfg)?;
            let Some(node) = prepared.clients.iter().find(|c| c.id() == client) else {
                bail!("config defines clients 0..{}", prepared.clients.len());
            };
            let addr: SocketAddr = server.parse().with_context(|| format!("parsing {server}"))?;
            let timeout = Duration::from_secs_f64(cfg.timeout_secs);
            let model = join(addr, node, timeout)?.expect("normal clients upload");
            let test = &prepared.tests[client as usize];
            if test.is_empty() {
                println!("client {client}: no held-out samples");
            } else {
                let dual = local_accuracy(&model, test)?;
                let primary = local_accuracy(&model.with_lambda(0.0)?, test)?;
                println!("client {client}: dual {dual:.4}, primary {primary:.4} on {} samples", test.len());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
