//! `sac`: train, evaluate and inspect SAC bipartite graph embeddings.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid config, 3 data error,
//! 4 checkpoint/config dimension mismatch.

mod config;
mod export;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sac::eval::coding_table;
use sac::graph::read_edge_list;
use sac::negatives::{sample_easy, sample_hard_traced};
use sac::sampler::{mask_multi_hop, sample_subgraph, SampleError, Token};
use sac::synth::{generate_sbm, split_edges, SbmConfig};
use sac::{
    evaluate, BipartiteGraph, Checkpoint32, ConfigError, ModelParams32, NodeId, TrainError,
    Trainer32,
};
use serde_json::json;

use config::{required, RunConfig};
use export::{node_label, Format};

#[derive(Parser)]
#[command(
    name = "sac",
    version,
    about = "Spatial autoregressive coding for bipartite graphs"
)]
struct Cli {
    /// Overrides the seed in the config (and seeds `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on `paths.train_edges`, writing checkpoints and a JSON-lines log
    /// into `paths.checkpoint_dir`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print Recall@k / NDCG@k on `paths.test_edges` as JSON.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "random")]
        checkpoint: Option<PathBuf>,
        /// Score with freshly initialized embeddings instead (baseline).
        #[arg(long)]
        random: bool,
        /// Score users by their node embedding rows instead of their codings.
        #[arg(long)]
        raw_rows: bool,
    },
    /// Write node embeddings from a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "tsv")]
        format: Format,
    },
    /// Generate a stochastic block model edge list plus a `.json` sidecar.
    Synth {
        #[arg(long)]
        users: usize,
        #[arg(long)]
        items: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long)]
        p_in: f64,
        #[arg(long)]
        p_out: f64,
        #[arg(long)]
        out: PathBuf,
        /// Hold out this fraction of edges into `--test-out`.
        #[arg(long, requires = "test_out")]
        test_fraction: Option<f64>,
        #[arg(long)]
        test_out: Option<PathBuf>,
    },
    /// Dump one sampled training instance as JSON.
    SampleDebug {
        #[arg(long)]
        config: PathBuf,
        /// Raw user id of the target.
        #[arg(long, conflicts_with = "item")]
        user: Option<u64>,
        /// Raw item id of the target.
        #[arg(long)]
        item: Option<u64>,
    },
}

#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Mismatch(anyhow::Error),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Mismatch(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Data(e) | Failure::Mismatch(e) | Failure::Other(e) => e,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.into())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => c.into(),
            TrainError::Incompatible(_) => Failure::Mismatch(e.into()),
            TrainError::NoTargets | TrainError::Checkpoint(_) => Failure::Data(e.into()),
            other => Failure::Other(other.into()),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn data<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Data(e.into())
}

fn other<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Other(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => train(&config, resume.as_deref(), cli.seed),
        Command::Evaluate {
            config,
            checkpoint,
            random,
            raw_rows,
        } => evaluate_cmd(&config, checkpoint.as_deref(), random, raw_rows, cli.seed),
        Command::Export {
            checkpoint,
            out,
            format,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            export::write(&ckpt, &out, format)
                .with_context(|| format!("writing {}", out.display()))
                .map_err(other)
        }
        Command::Synth {
            users,
            items,
            blocks,
            p_in,
            p_out,
            out,
            test_fraction,
            test_out,
        } => synth(
            SbmConfig {
                users,
                items,
                blocks,
                p_in,
                p_out,
                seed: cli.seed.unwrap_or(0),
            },
            &out,
            test_fraction.zip(test_out),
        ),
        Command::SampleDebug { config, user, item } => sample_debug(&config, user, item, cli.seed),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = RunConfig::load(path, seed).map_err(Failure::Config)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_graph(path: &Path) -> Result<BipartiteGraph> {
    BipartiteGraph::load_edge_list(path).map_err(data)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint32> {
    Checkpoint32::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(Failure::Data)
}

fn train(config: &Path, resume: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let edges = required(&cfg.paths.train_edges, "paths.train_edges")?;
    let dir = required(&cfg.paths.checkpoint_dir, "paths.checkpoint_dir")?;
    let graph = load_graph(edges)?;
    let mut trainer = match resume {
        Some(p) => Trainer32::from_checkpoint(&graph, cfg.train.clone(), load_checkpoint(p)?)?,
        None => Trainer32::new(&graph, cfg.train.clone())?,
    };
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(other)?;
    let log_path = dir.join("train_log.jsonl");
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))
        .map_err(other)?;
    let mut log = BufWriter::new(log_file);
    let interval = cfg.train.checkpoint_interval;
    let start = Instant::now();
    trainer.run(|t, l| -> Result<()> {
        let line = json!({
            "step": l.step,
            "vanilla": l.vanilla,
            "nib": l.nib,
            "total": l.total,
            "seconds": start.elapsed().as_secs_f64(),
        });
        writeln!(log, "{line}").map_err(other)?;
        if interval > 0 && t.step_count() % interval == 0 {
            let p = dir.join(format!("step-{:08}.sack", t.step_count()));
            t.checkpoint().save(&p).map_err(other)?;
        }
        Ok(())
    })?;
    log.flush().map_err(other)?;
    let final_path = dir.join("final.sack");
    trainer.checkpoint().save(&final_path).map_err(other)?;
    println!("{}", final_path.display());
    Ok(())
}

fn read_test_edges(cfg: &RunConfig) -> Result<Vec<(u64, u64)>> {
    let path = required(&cfg.paths.test_edges, "paths.test_edges")?;
    let test = read_edge_list(path).map_err(data)?;
    if test.is_empty() {
        log::warn!("test file {} has no interactions", path.display());
    }
    Ok(test)
}

fn evaluate_cmd(
    config: &Path,
    checkpoint: Option<&Path>,
    random: bool,
    raw_rows: bool,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let graph = load_graph(required(&cfg.paths.train_edges, "paths.train_edges")?)?;
    let test = read_test_edges(&cfg)?;
    let table = if random {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        ModelParams32::xavier(
            graph.num_nodes(),
            cfg.train.sampler.hops(),
            &cfg.train.encoder,
            &mut rng,
        )
        .node_embeddings
    } else {
        let ckpt = load_checkpoint(checkpoint.expect("clap requires it"))?;
        if ckpt.encoder.d != cfg.train.encoder.d {
            return Err(Failure::Mismatch(anyhow::anyhow!(
                "checkpoint has d = {}, config has d = {}",
                ckpt.encoder.d,
                cfg.train.encoder.d
            )));
        }
        if ckpt.num_nodes() != graph.num_nodes()
            || ckpt.user_ids != graph.raw_user_ids()
            || ckpt.item_ids != graph.raw_item_ids()
        {
            return Err(Failure::Mismatch(anyhow::anyhow!(
                "checkpoint has {} nodes, training graph has {} (or the ids differ)",
                ckpt.num_nodes(),
                graph.num_nodes()
            )));
        }
        if raw_rows {
            ckpt.params.node_embeddings
        } else {
            let t = &cfg.train;
            coding_table(&ckpt.params, &graph, &t.sampler, t.encoder.heads, cfg.seed)
                .map_err(other)?
        }
    };
    let report = evaluate(&table, &graph, &test, &cfg.eval).map_err(other)?;
    println!("{}", serde_json::to_string(&report).map_err(other)?);
    Ok(())
}

fn synth(cfg: SbmConfig, out: &Path, split: Option<(f64, PathBuf)>) -> Result<()> {
    if let Some((f, _)) = &split {
        if !(0.0..1.0).contains(f) {
            return Err(ConfigError::new("test_fraction", "must lie in [0, 1)").into());
        }
    }
    let mut g = generate_sbm(&cfg)?;
    if let Some((fraction, test_out)) = split {
        let (train, test) = split_edges(&g.edges, fraction, cfg.seed);
        sac::graph::write_edge_list(&test_out, &test).map_err(other)?;
        g.edges = train;
    }
    g.write(out).map_err(other)?;
    Ok(())
}

fn sample_debug(
    config: &Path,
    user: Option<u64>,
    item: Option<u64>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let graph = load_graph(required(&cfg.paths.train_edges, "paths.train_edges")?)?;
    let target = match (user, item) {
        (Some(u), _) => graph.user_node(u),
        (None, Some(i)) => graph.item_node(i),
        (None, None) => return Err(ConfigError::new("target", "pass --user or --item").into()),
    }
    .ok_or_else(|| data(anyhow::anyhow!("unknown target id")))?;
    let label = |v: NodeId| node_label(graph.kind(v), graph.raw_id(v));
    let token = |t: &Token| json!({"node": label(t.node), "hop": t.hop});

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let raw = match sample_subgraph(&graph, target, &cfg.train.sampler, &mut rng) {
        Ok(raw) => raw,
        Err(e @ SampleError::Isolated(_)) => {
            println!(
                "{}",
                json!({"target": label(target), "skip": e.to_string()})
            );
            return Ok(());
        }
        Err(e) => return Err(data(e)),
    };
    let ms = mask_multi_hop(&raw, &mut rng);
    let forbidden = ms.subgraph_nodes.as_slice();
    let walk = &cfg.train.walk;
    let easy = sample_easy(&graph, walk.easy_count, forbidden, &mut rng).map_err(data)?;
    let (hard, walks) =
        sample_hard_traced(&graph, target, walk, forbidden, &mut rng).map_err(data)?;

    let dump = json!({
        "target": label(target),
        "hops": raw.hops.iter().map(|h| h.iter().map(|&v| label(v)).collect::<Vec<_>>()).collect::<Vec<_>>(),
        "parents": raw.parents,
        "masked_positives": ms.masked_positives.iter().map(token).collect::<Vec<_>>(),
        "kept_tokens": ms.kept_tokens.iter().map(token).collect::<Vec<_>>(),
        "negatives": {
            "easy_count": easy.len(),
            "hard_count": hard.len(),
            "hard": hard.iter().map(|&v| label(v)).collect::<Vec<_>>(),
            "walks": walks.iter().map(|w| w.iter().map(|&v| label(v)).collect::<Vec<_>>()).collect::<Vec<_>>(),
        },
    });
    let text = serde_json::to_string_pretty(&dump).map_err(other)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(other)?;
    Ok(())
}
