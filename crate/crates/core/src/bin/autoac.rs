use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use autoac::experiment::{compare_reports, run_oracle, run_repeats, OperatorDistribution, OracleReport, SearchReport};
use autoac::graph::{build_graph, GraphDescription, HeteroGraph};
use autoac::io::{read_json, read_toml, write_atomic, write_json};
use autoac::search::SearchConfig;
use autoac::synth::{assignment_label, gen_synthetic, PlantedSpec, PlantedTruth};
use autoac::{Error, Result};

#[derive(Parser)]
#[command(name = "autoac", version, about = "Attribute-completion search for heterogeneous graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted synthetic graph and its truth sidecar.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Truth sidecar path; defaults to `<out stem>.truth.json`.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Search completion operators, retrain and evaluate, once per seed.
    Search {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// First seed; overrides the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Freeze the cluster map to the planted groups of this truth file.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Train every per-group operator assignment of a planted graph.
    Oracle {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare search results with oracle results of the same seeds.
    Compare {
        #[arg(long)]
        search: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the searched operator distribution per node type.
    Report {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_structured<T: DeserializeOwned>(path: &Path) -> Result<T> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => read_json(path),
        _ => read_toml(path),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<SearchConfig> {
    let mut cfg: SearchConfig = match path {
        Some(p) => read_structured(p)?,
        None => SearchConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_graph(path: &Path) -> Result<HeteroGraph> {
    let desc: GraphDescription = read_json(path)?;
    build_graph(&desc)
}

fn truth_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("graph");
    out.with_file_name(format!("{stem}.truth.json"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, out, truth } => {
            let spec: PlantedSpec = read_structured(&spec)?;
            let (desc, planted) = gen_synthetic(&spec)?;
            let truth = truth.unwrap_or_else(|| truth_path(&out));
            write_json(&out, &desc)?;
            write_json(&truth, &planted)?;
            let nodes: usize = desc.node_types.iter().map(|t| t.count).sum();
            println!("wrote {} ({nodes} nodes) and {}", out.display(), truth.display());
        }
        Command::Search { graph, config, out, repeats, seed, truth } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let g = load_graph(&graph)?;
            let planted: Option<PlantedTruth> = truth.as_deref().map(read_json).transpose()?;
            let report = run_repeats(&g, &cfg, repeats, planted.as_ref())?;
            write_json(&out, &report)?;
            for r in &report.runs {
                println!(
                    "seed {:>3}  operators {:<28} val loss {:.4}",
                    r.config.seed,
                    assignment_label(&r.cluster_operators),
                    r.retrain.val_loss
                );
            }
            println!("val loss     {}", report.val_loss);
            for (k, s) in &report.test_metrics {
                println!("test {k:<8} {s}");
            }
        }
        Command::Oracle { graph, truth, config, out, repeats, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let g = load_graph(&graph)?;
            let planted: PlantedTruth = read_json(&truth)?;
            let report = run_oracle(&g, &planted, &cfg, repeats)?;
            write_json(&out, &report)?;
            for o in &report.results {
                let best = o.best_row();
                let planted_rank = o.ranking().iter().position(|r| r.assignment == planted.operators);
                println!(
                    "seed {:>3}  best {:<28} val loss {:.4}  planted rank {}",
                    o.seed,
                    best.label,
                    best.val_loss,
                    planted_rank.map_or("-".to_string(), |r| r.to_string())
                );
            }
        }
        Command::Compare { search, oracle, out } => {
            let s: SearchReport = read_json(&search)?;
            let o: OracleReport = read_json(&oracle)?;
            let summary = compare_reports(&s, &o)?;
            for (seed, c) in &summary.per_seed {
                println!(
                    "seed {:>3}  searched {:<28} oracle {:<28} match {:.2}  relative gap {:+.4}",
                    seed,
                    assignment_label(&c.search_assignment),
                    assignment_label(&c.oracle_assignment),
                    c.match_rate,
                    c.relative_loss_gap
                );
            }
            println!("recovery {:.3}  mean relative gap {:+.4}", summary.recovery, summary.mean_relative_loss_gap);
            if let Some(p) = out {
                write_json(&p, &summary)?;
            }
        }
        Command::Report { result, out } => {
            let s: SearchReport = read_json(&result)?;
            let dist = OperatorDistribution::from_runs(&s.runs);
            let text = dist.render();
            print!("{text}");
            if let Some(p) = out {
                write_atomic(&p, text.as_bytes())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else {
        3
    }
}
