use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use graphhash::config::{load_test_edges, parse_override, parse_pairs, parse_topn, Manifest, RunConfig};
use graphhash::eval::{evaluate, EvalReport};
use graphhash::graph::{load_edge_list, BipartiteGraph};
use graphhash::index::{bench, HammingIndex, QueryCodes};
use graphhash::table::HashTable;
use graphhash::train::{Checkpoint, Trainer, Variant};

#[derive(Parser)]
#[command(name = "graphhash", version, about = "Binary codes for bipartite graphs and Hamming retrieval")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write its hash table.
    Train(TrainArgs),
    /// Score a table against held-out edges.
    Eval(EvalArgs),
    /// Top-N V2 nodes for one V1 node.
    Query(QueryArgs),
    /// Time popcount retrieval against a float32 baseline.
    Bench(BenchArgs),
    /// Train the full model and one variant, and compare them.
    Ablate(AblateArgs),
    /// Write the hash table of a checkpoint.
    Export(ExportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set model.d=128`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut pairs = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        for s in &self.overrides {
            pairs.push(parse_override(s)?);
        }
        let cfg = RunConfig::from_pairs(&pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Tsv,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = "20,50,100")]
    topn: String,
    /// Edge list whose edges are removed from every ranking (usually the training edges).
    #[arg(long)]
    exclude: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    /// V1 node id.
    #[arg(long)]
    node: usize,
    #[arg(long, default_value_t = 20)]
    topn: usize,
    #[arg(long)]
    exclude: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Table to benchmark; without it a random table is generated.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    queries: usize,
    #[arg(long, default_value_t = 20)]
    topn: usize,
    /// Random table: V2 candidates.
    #[arg(long, default_value_t = 50_000)]
    candidates: usize,
    /// Random table: bits per layer.
    #[arg(long, default_value_t = 256)]
    dim: usize,
    /// Random table: propagation layers.
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    variant: String,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRAPHHASH_LOG", "info")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Query(a) => cmd_query(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Export(a) => cmd_export(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let data = cfg.load_data()?;
    let out = &cfg.output;
    fs::create_dir_all(&out.dir).with_context(|| format!("creating {}", out.dir.display()))?;

    let manifest = Manifest::new("train", &cfg)?;
    let manifest_path = match &a.resume {
        None => out.manifest_path(),
        Some(_) => (1..)
            .map(|k| out.dir.join(format!("run.resume{k}.json")))
            .find(|p| !p.exists())
            .expect("unbounded search"),
    };
    manifest
        .write_new(&manifest_path)
        .with_context(|| "run manifests are never overwritten; choose a fresh output.dir")?;
    if !data.test.is_empty() {
        graphhash::graph::write_edge_list(out.dir.join("train.edges"), data.train.n1(), data.train.n2(), data.train.edges())?;
        graphhash::graph::write_edge_list(out.dir.join("test.edges"), data.train.n1(), data.train.n2(), &data.test)?;
    }

    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(data.train.clone(), cfg.train.clone(), Checkpoint::read(p)?)?,
        None => Trainer::new(data.train.clone(), cfg.train.clone())?,
    };
    let log_path = out.log_path();
    let ckpt_path = out.checkpoint_path();
    let result = trainer.train(|t, log| {
        let mut line = serde_json::to_value(log).expect("log serializes");
        if cfg.eval.every > 0 && log.epoch % cfg.eval.every == 0 && !data.test.is_empty() {
            let r = evaluate(&t.table()?, Some(t.graph()), &data.test, &cfg.eval.topn)?;
            line["eval"] = serde_json::to_value(&r).expect("report serializes");
        }
        append_line(&log_path, &line.to_string()).map_err(|e| graphhash::Error::Io {
            path: log_path.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
        if cfg.checkpoint_every > 0 && log.epoch % cfg.checkpoint_every == 0 {
            t.checkpoint().write(&ckpt_path)?;
        }
        Ok(())
    });
    if let Err(e) = result {
        trainer.last_good().write(&ckpt_path)?;
        bail!("{e}; last good state saved to {}", ckpt_path.display());
    }
    trainer.checkpoint().write(&ckpt_path)?;
    let table = trainer.table()?;
    table.write(out.table_path())?;
    log::info!("wrote {}", out.table_path().display());
    if !data.test.is_empty() {
        let r = evaluate(&table, Some(&data.train), &data.test, &cfg.eval.topn)?;
        fs::write(out.dir.join("eval.json"), r.to_json())?;
        println!("{}", r.to_json());
    }
    Ok(())
}

fn load_exclusion(path: &Option<PathBuf>) -> Result<Option<BipartiteGraph>> {
    Ok(match path {
        Some(p) => Some(load_edge_list(p)?.graph),
        None => None,
    })
}

/// Exclusion graphs may declare fewer nodes than the table; pad to the table's shape.
fn fit_exclusion(g: Option<BipartiteGraph>, table: &HashTable) -> Result<Option<BipartiteGraph>> {
    match g {
        None => Ok(None),
        Some(g) if g.n1() == table.n1() && g.n2() == table.n2() => Ok(Some(g)),
        Some(g) => {
            if g.n1() > table.n1() || g.n2() > table.n2() {
                bail!(
                    "exclusion edges exceed the table (n1={}, n2={})",
                    table.n1(),
                    table.n2()
                );
            }
            Ok(Some(BipartiteGraph::from_edges(table.n1(), table.n2(), g.edges().iter().copied())?))
        }
    }
}

fn print_report(r: &EvalReport, format: Format) {
    match format {
        Format::Json => println!("{}", r.to_json()),
        Format::Tsv => print!("{}", r.to_tsv()),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let table = HashTable::read(&a.index)?;
    let ns = parse_topn(&a.topn)?;
    let exclude = fit_exclusion(load_exclusion(&a.exclude)?, &table)?;
    let shape = BipartiteGraph::from_edges(table.n1(), table.n2(), [(0, 0)])?;
    let test = load_test_edges(&a.test, exclude.as_ref().unwrap_or(&shape))?;
    let r = evaluate(&table, exclude.as_ref(), &test, &ns)?;
    print_report(&r, a.format);
    Ok(())
}

fn cmd_query(a: QueryArgs) -> Result<()> {
    let table = HashTable::read(&a.index)?;
    let index = HammingIndex::build(&table);
    let q = QueryCodes::from_table(&table, a.node)?;
    let exclude = fit_exclusion(load_exclusion(&a.exclude)?, &table)?;
    let mask: Option<Vec<bool>> = exclude.map(|g| {
        let mut m = vec![false; table.n2()];
        g.items_of(a.node).for_each(|v| m[v] = true);
        m
    });
    let top = index.topn(&q, a.topn, mask.as_deref())?;
    let mut out = String::from("rank\tnode\tscore\n");
    for (rank, hit) in top.hits.iter().enumerate() {
        out.push_str(&format!("{}\t{}\t{}\n", rank + 1, hit.node, hit.score));
    }
    print!("{out}");
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let table = match &a.index {
        Some(p) => HashTable::read(p)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            HashTable::random(a.queries.clamp(1, 1000), a.candidates, a.dim, a.layers, &mut rng)
        }
    };
    let index = HammingIndex::build(&table);
    let report = bench(&table, &index, a.queries, a.topn)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn train_and_eval(cfg: &RunConfig, variant: Variant) -> Result<serde_json::Value> {
    let data = cfg.load_data()?;
    if data.test.is_empty() {
        bail!("ablation needs held-out edges: use data.edges, data.synthetic, or data.train with data.test");
    }
    let tc = variant.apply(&cfg.train);
    let mut trainer = Trainer::new(data.train.clone(), tc)?;
    let logs = trainer.train(|_, _| Ok(()))?;
    let report = evaluate(&trainer.table()?, Some(&data.train), &data.test, &cfg.eval.topn)?;
    Ok(serde_json::json!({
        "variant": variant.to_string(),
        "final_loss": logs.last().map(|l| l.loss),
        "report": report,
    }))
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let variant: Variant = a.variant.parse()?;
    let baseline = train_and_eval(&cfg, Variant::Full)?;
    let other = train_and_eval(&cfg, variant)?;
    println!("{}", serde_json::to_string_pretty(&serde_json::json!({ "full": baseline, "variant": other }))?);
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let data = cfg.load_data()?;
    let trainer = Trainer::resume(data.train, cfg.train.clone(), Checkpoint::read(&a.checkpoint)?)?;
    trainer.table()?.write(&a.out)?;
    log::info!("wrote {} (epoch {})", a.out.display(), trainer.epoch());
    Ok(())
}
