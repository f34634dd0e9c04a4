//! `skb-coop`: run, sweep, or host the cooperative SKB update experiment.
//!
//! Exit codes: 0 on success, 2 for bad arguments or configuration, 3 for
//! runtime failures (I/O, transport, protocol).

use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use skb_coop::channel::{write_uplink_csv, NoisePreset, UplinkStats};
use skb_coop::coordination::transport::{join, serve, ClientConfig, ServerConfig, SocketOptions};
use skb_coop::coordination::WireFormat;
use skb_coop::harness::{pretrain_pair, run_once, sweep_gamma, write_report};
use skb_coop::metrics::write_class_scores_csv;
use skb_coop::scenario::{load_scenario, ScenarioConfig, TransportMode};
use skb_coop::{Error, PairId};

#[derive(Parser)]
#[command(
    name = "skb-coop",
    version,
    about = "Cooperative semantic knowledge base update simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one cooperation at a single threshold.
    Run {
        #[command(flatten)]
        common: Common,
        /// Upload threshold γ in [0, 1]; defaults to the scenario's gamma.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Run every threshold of the scenario's gamma grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated thresholds overriding the scenario grid.
        #[arg(long, value_delimiter = ',')]
        gamma: Option<Vec<f64>>,
    },
    /// Host the server for standalone pairs connecting over TCP.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        /// Threshold used only to label the uplink report.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Run one pair against a server started with `serve`.
    Join {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        /// 1-based pair id from the scenario.
        #[arg(long)]
        pair: u16,
        #[arg(long)]
        gamma: Option<f64>,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario TOML or a previous run's manifest.json; the bundled
    /// three-pair scenario when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_parser = ["sim", "socket"])]
    transport: Option<String>,
    #[arg(long, value_parser = ["paper-text", "paper-results"])]
    noise_preset: Option<String>,
    #[arg(long, value_parser = ["binary", "json"])]
    wire: Option<String>,
}

impl Common {
    fn scenario(&self) -> skb_coop::Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_scenario(path).map_err(|e| match e {
                Error::File { path, source } => {
                    Error::Config(format!("{}: {source}", path.display()))
                }
                other => other,
            })?,
            None => ScenarioConfig::three_pair(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(t) = &self.transport {
            cfg.transport = t.parse::<TransportMode>()?;
        }
        if let Some(p) = &self.noise_preset {
            cfg.set_noise_preset(p.parse::<NoisePreset>()?);
        }
        if let Some(w) = &self.wire {
            cfg.wire = w.parse::<WireFormat>()?;
        }
        Ok(cfg)
    }

    fn socket_options(&self, cfg: &ScenarioConfig) -> SocketOptions {
        SocketOptions {
            wire: cfg.wire,
            ..SocketOptions::default()
        }
    }
}

fn check_gamma(gamma: f64) -> skb_coop::Result<f64> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(gamma)
    } else {
        Err(Error::InvalidThreshold(gamma))
    }
}

fn create(dir: &Path, name: &str) -> skb_coop::Result<fs::File> {
    fs::create_dir_all(dir).map_err(|source| Error::File {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    fs::File::create(&path).map_err(|source| Error::File { path, source })
}

fn run(cli: Cli) -> skb_coop::Result<()> {
    match cli.command {
        Command::Run { common, gamma } => {
            let cfg = common.scenario()?;
            let gamma = check_gamma(gamma.unwrap_or(cfg.gamma))?;
            let transport = cfg.transport();
            let result = run_once(&cfg, gamma, &transport)?;
            for r in &result.rows {
                println!(
                    "pair {}: M_l={} T_l={:.4}s macro-F1 {:.4} -> {:.4}",
                    r.pair,
                    r.uplink.uploaded_classes,
                    r.uplink.latency_s,
                    r.before.macro_f1,
                    r.after.macro_f1
                );
            }
            println!("total latency {:.4}s", result.total_latency(gamma));
            write_report(&common.out, &cfg, &result, "run", &transport)?;
            info!("wrote {}", common.out.display());
        }
        Command::Sweep { common, gamma } => {
            let cfg = common.scenario()?;
            let grid = gamma.unwrap_or_else(|| cfg.gamma_grid.clone());
            for &g in &grid {
                check_gamma(g)?;
            }
            let transport = cfg.transport();
            let result = sweep_gamma(&cfg, &grid, &transport)?;
            for g in result.gammas() {
                println!(
                    "gamma {g:.2}: total M_l={} total T={:.4}s",
                    result.total_uploaded(g),
                    result.total_latency(g)
                );
            }
            write_report(&common.out, &cfg, &result, "sweep", &transport)?;
            info!("wrote {}", common.out.display());
        }
        Command::Serve {
            common,
            addr,
            gamma,
        } => {
            let cfg = common.scenario()?;
            let gamma = check_gamma(gamma.unwrap_or(cfg.gamma))?;
            let listener = TcpListener::bind(&addr)?;
            eprintln!("listening on {}", listener.local_addr()?);
            let server_cfg = ServerConfig {
                pairs: cfg.pairs.iter().map(|p| p.id).collect(),
                num_classes: cfg.num_classes,
                dim: cfg.dim,
                rounds: 1..cfg.rounds + 1,
                options: common.socket_options(&cfg),
            };
            let reports = serve(&listener, &server_cfg)?;
            let link = cfg.link_params()?;
            let stats = cfg
                .pairs
                .iter()
                .map(|p| {
                    let m = reports
                        .iter()
                        .map(|r| r.uploaded.get(&p.id).copied().unwrap_or(0))
                        .sum();
                    UplinkStats::compute(p.id, m, cfg.dim, p.distance_m, &link)
                })
                .collect::<skb_coop::Result<Vec<_>>>()?;
            let rows: Vec<(f64, &UplinkStats)> = stats.iter().map(|s| (gamma, s)).collect();
            write_uplink_csv(create(&common.out, "uplink.csv")?, &rows)?;
            let mut csv = csv::Writer::from_writer(create(&common.out, "global.csv")?);
            let mut header = vec![
                "round".to_string(),
                "class".into(),
                "source_pair".into(),
                "f1".into(),
            ];
            header.extend((1..=cfg.dim).map(|i| format!("a{i}")));
            csv.write_record(&header).map_err(Error::from)?;
            for report in &reports {
                for (class, entry) in report.global.iter() {
                    let mut rec = vec![
                        report.round.to_string(),
                        class.to_string(),
                        entry.source.to_string(),
                        entry.f1.to_string(),
                    ];
                    rec.extend(entry.vector.values().iter().map(f64::to_string));
                    csv.write_record(&rec).map_err(Error::from)?;
                }
            }
            csv.flush()?;
            let total: f64 = stats.iter().map(|s| s.latency_s).sum();
            println!(
                "served {} round(s); total uplink latency {total:.4}s",
                reports.len()
            );
        }
        Command::Join {
            common,
            addr,
            pair,
            gamma,
        } => {
            let cfg = common.scenario()?;
            let gamma = check_gamma(gamma.unwrap_or(cfg.gamma))?;
            let mut state = pretrain_pair(&cfg, PairId(pair))?;
            let before = state
                .scores()
                .cloned()
                .ok_or(Error::UntrainedPair(PairId(pair)))?;
            let client_cfg = ClientConfig {
                gamma,
                samples_per_class: cfg.samples_per_class,
                rounds: 1..cfg.rounds + 1,
                options: common.socket_options(&cfg),
            };
            let addr = std::net::ToSocketAddrs::to_socket_addrs(addr.as_str())?
                .next()
                .ok_or_else(|| Error::Config(format!("cannot resolve {addr}")))?;
            let results = join(addr, &mut state, &client_cfg)?;
            let after = results
                .last()
                .map(|r| r.after.clone())
                .ok_or_else(|| Error::Protocol("no rounds completed".into()))?;
            let id = PairId(pair);
            write_class_scores_csv(
                create(&common.out, &format!("pair{pair}_class_f1_pre.csv"))?,
                &[(id, &before)],
            )?;
            write_class_scores_csv(
                create(&common.out, &format!("pair{pair}_class_f1_post.csv"))?,
                &[(id, &after)],
            )?;
            let mut summary = create(&common.out, &format!("pair{pair}_summary.csv"))?;
            writeln!(summary, "pair,gamma,macro_f1_pre,macro_f1_post")?;
            writeln!(
                summary,
                "{pair},{gamma},{},{}",
                before.macro_f1, after.macro_f1
            )?;
            println!(
                "pair {pair}: macro-F1 {:.4} -> {:.4}",
                before.macro_f1, after.macro_f1
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
