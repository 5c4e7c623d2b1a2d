use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use issr::data::{self, build_eval_instances, Format, Segment};
use issr::metrics;
use issr::model::Graphs;
use issr::trainer;
use issr::{BipartiteGraph, Checkpoint, CoocGraph, SplitDataset, TrainConfig};

const SPLITS: &str = "splits.tsv";
const USERS: &str = "users.txt";
const ITEMS: &str = "items.txt";
const BIPARTITE: &str = "bipartite.adj";
const COOC: &str = "cooc.adj";

#[derive(Parser)]
#[command(name = "issr", version, about = "Sequential recommendation with inter-sequence graph encoders")]
struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads (defaults to all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a ratings file, split it and write splits and graphs.
    Prepare(PrepareArgs),
    /// Train a model on a prepared data directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation or test segment.
    Eval(EvalArgs),
    /// Print the top-k items for one user.
    Predict(PredictArgs),
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.7,0.1,0.2")]
    ratios: String,
    /// auto, tsv, csv or movielens-dat.
    #[arg(long, default_value = "auto")]
    format: String,
    /// Drop items with fewer interactions than this before splitting.
    #[arg(long, default_value_t = 1)]
    min_item_count: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Where to write the checkpoint with the best validation Recall@10.
    #[arg(long)]
    out: PathBuf,
    /// Also write the final-epoch checkpoint here.
    #[arg(long)]
    last: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// val or test.
    #[arg(long, default_value = "test")]
    segment: String,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Raw user id as it appears in the input file.
    #[arg(long)]
    user: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ISSR_LOG", "error")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
    }
}

fn parse_ratios(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad --ratios `{s}`"))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => bail!("--ratios needs three comma-separated values, got `{s}`"),
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))
}

fn lines(ids: &[String]) -> String {
    let mut s = ids.join("\n");
    s.push('\n');
    s
}

fn cmd_prepare(a: PrepareArgs) -> Result<()> {
    let ratios = parse_ratios(&a.ratios)?;
    let format: Format = a.format.parse()?;
    let mut log = data::parse_interactions(&a.input, format)?;
    if a.min_item_count > 1 {
        log = log.filter_min_item_count(a.min_item_count);
    }
    let split = data::chronological_split(&log, ratios)?;
    let graphs = Graphs::build(&split);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out, SPLITS, &split.to_tsv())?;
    write(&a.out, USERS, &lines(&log.user_ids))?;
    write(&a.out, ITEMS, &lines(&log.item_ids))?;
    write(&a.out, BIPARTITE, &graphs.bipartite.to_text())?;
    write(&a.out, COOC, &graphs.cooc.to_text())?;
    println!("{}", log.summary());
    Ok(())
}

struct DataDir {
    split: SplitDataset,
    graphs: Graphs,
    users: Vec<String>,
    items: Vec<String>,
}

fn load_data(dir: &Path) -> Result<DataDir> {
    let split = SplitDataset::from_tsv(&read(dir, SPLITS)?).context(SPLITS)?;
    let graphs = Graphs {
        bipartite: BipartiteGraph::from_text(&read(dir, BIPARTITE)?).context(BIPARTITE)?,
        cooc: CoocGraph::from_text(&read(dir, COOC)?).context(COOC)?,
    };
    let users: Vec<String> = read(dir, USERS)?.lines().map(str::to_string).collect();
    let items: Vec<String> = read(dir, ITEMS)?.lines().map(str::to_string).collect();
    if users.len() != split.num_users() || items.len() != split.num_items {
        bail!(
            "{} lists {} users / {} items but {} and {} were found in the vocabulary files",
            SPLITS,
            split.num_users(),
            split.num_items,
            users.len(),
            items.len()
        );
    }
    Ok(DataDir {
        split,
        graphs,
        users,
        items,
    })
}

fn cmd_train(a: TrainArgs, seed: u64) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut config = TrainConfig::from_config_text(&text).with_context(|| a.config.display().to_string())?;
    config.seed = seed;
    let d = load_data(&a.data)?;
    log::info!(
        "training {} on {} users / {} items",
        config.variant,
        d.split.num_users(),
        d.split.num_items
    );
    println!("epoch\tloss\trecall@10\tndcg@10");
    let outcome = trainer::train_with(config, &d.split, &d.graphs, |e| println!("{}", e.line()))?;
    outcome.best.save(&a.out)?;
    if let Some(last) = &a.last {
        outcome.last.save(last)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let segment: Segment = a.segment.parse()?;
    let ck = Checkpoint::load(&a.ckpt)?;
    let d = load_data(&a.data)?;
    check_shapes(&ck, &d)?;
    let c = &ck.model.config;
    let instances = build_eval_instances(&d.split, segment, c.context_len, c.targets);
    let report = metrics::evaluate(&ck.model, &d.graphs, &d.split, &instances, segment, trainer::eval_seed(c))?;
    print!("{}\n{}", report.to_tsv(), report.to_key_values());
    Ok(())
}

fn check_shapes(ck: &Checkpoint, d: &DataDir) -> Result<()> {
    if ck.model.num_users() != d.split.num_users() || ck.model.num_items() != d.split.num_items {
        bail!(
            "checkpoint was trained on {} users / {} items, data has {} / {}",
            ck.model.num_users(),
            ck.model.num_items(),
            d.split.num_users(),
            d.split.num_items
        );
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let d = load_data(&a.data)?;
    check_shapes(&ck, &d)?;
    let user = d
        .users
        .iter()
        .position(|u| *u == a.user)
        .with_context(|| format!("unknown user `{}`", a.user))?;
    let c = &ck.model.config;
    let full = d.split.users[user].full_sequence();
    let context = &full[full.len().saturating_sub(c.context_len)..];
    if context.is_empty() {
        bail!("user `{}` has no history", a.user);
    }
    let interest = ck.model.interest(&d.graphs, user, context, trainer::eval_seed(c));
    let scores = ck.model.score_all(&interest);
    for v in metrics::top_k(&scores, d.split.history(user), a.k) {
        println!("{}\t{:.6}", d.items[v], scores[v]);
    }
    Ok(())
}
