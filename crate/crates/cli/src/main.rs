mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use catt_core::checkpoint::{load_checkpoint_for, save_checkpoint};
use catt_core::imaging::{render_overlay, GrayImage};
use catt_core::metrics::MetricsReport;
use catt_core::pairing::generate_pairs;
use catt_core::recovery::{recover_structure, RelationGraph};
use catt_core::synth::{write_dataset, Manifest};
use catt_core::table::{apply_empty_cell_policy, RelationMap, Table};
use catt_core::train::{evaluate, evaluate_oracle, predict_table, train, write_history_csv, TablePrediction};
use catt_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "catt", version, about = "Table structure recognition from cell-pair relations")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Neighbors per cell when generating candidate pairs.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// full | no_attention | position_only
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// aligned | text_focused
    #[arg(long, global = true)]
    pub bbox_mode: Option<String>,
    /// Worker threads for per-table stages.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// TOML file with run settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Repeat for more logging.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Emit candidate pairs and label statistics.
    Pairs(PairsArgs),
    /// Train a model and write a checkpoint plus history.
    Train(TrainArgs),
    /// Score a checkpoint, or the oracle predictor, on a split.
    Eval(EvalArgs),
    /// Predict the relation graph of one table.
    Infer(InferArgs),
    /// Recover rows and columns from a relation graph.
    Recover(RecoverArgs),
    /// Draw boxes and relations over a table image.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Training tables.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    /// Style profile, A or B.
    #[arg(long)]
    profile: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn ids(self, m: &Manifest) -> &[String] {
        match self {
            Split::Train => &m.splits.train,
            Split::Val => &m.splits.val,
            Split::Test => &m.splits.test,
        }
    }
}

#[derive(Args, Debug)]
struct PairsArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    split: Split,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Loss weights for classes 0,1,2.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    class_weights: Option<Vec<f64>>,
    /// Crop side length fed to the network.
    #[arg(long)]
    input_size: Option<usize>,
    /// Filters per convolution.
    #[arg(long)]
    channels: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Score a predictor that always returns the ground truth.
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Annotation JSON of the table.
    #[arg(long)]
    table: PathBuf,
    /// Table image; defaults to the path recorded in the annotation.
    #[arg(long)]
    image: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RecoverArgs {
    #[arg(long)]
    table: PathBuf,
    /// Relations written by `infer`; ground-truth relations when absent.
    #[arg(long)]
    relations: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    image: Option<PathBuf>,
    /// Relations written by `infer`; ground-truth relations when absent.
    #[arg(long)]
    relations: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.global.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for missing or unreadable files, 4 for malformed annotations, 5 for
/// checkpoint problems, 6 for training failures, 1 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Io { .. }) => 3,
        Some(
            Error::Annotation(_)
            | Error::GridOverlap { .. }
            | Error::MissingTextBox(_)
            | Error::OutOfBounds { .. }
            | Error::Json(_)
            | Error::PngDecode(_),
        ) => 4,
        Some(Error::Checkpoint(_) | Error::Checksum { .. } | Error::Version(_) | Error::VariantMismatch { .. }) => 5,
        Some(Error::Diverged { .. } | Error::EmptyPairSet) => 6,
        _ if e.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some()) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides::from_global(&cli.global)?);
    if let Some(j) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let out = cli.global.out.clone().unwrap_or_else(|| PathBuf::from("."));
    match cli.command {
        Command::Synth(a) => synth(&mut cfg, a, &out),
        Command::Pairs(a) => pairs(&mut cfg, a, &out),
        Command::Train(a) => train_cmd(&mut cfg, a, &out),
        Command::Eval(a) => eval(&mut cfg, a, &out),
        Command::Infer(a) => infer(&mut cfg, a, &out),
        Command::Recover(a) => recover(&mut cfg, a, &out),
        Command::Render(a) => render(&mut cfg, a, &out),
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")).into());
    }
    Ok(())
}

fn require_dataset(dir: &Path) -> anyhow::Result<Manifest> {
    require_file(&dir.join("manifest.json"))?;
    Ok(Manifest::load(dir)?)
}

/// Loads an annotation and its image. Relative image paths are tried against
/// the annotation's directory and then its parent, which covers both loose
/// files and dataset trees.
fn load_table(table: &Path, image: Option<&Path>) -> anyhow::Result<(Table, GrayImage)> {
    require_file(table)?;
    let t = Table::load(table)?;
    let img_path = match image {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = table.parent().unwrap_or(Path::new("."));
            let candidates = [dir.join(&t.image_path), dir.join("..").join(&t.image_path)];
            candidates
                .iter()
                .find(|p| p.is_file())
                .cloned()
                .unwrap_or_else(|| candidates[0].clone())
        }
    };
    require_file(&img_path)?;
    let img = GrayImage::load(&img_path)?;
    if img.width() != t.width || img.height() != t.height {
        bail!(Error::Annotation(format!(
            "{}: annotation says {}x{}, image {} is {}x{}",
            t.id,
            t.width,
            t.height,
            img_path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok((t, img))
}

fn load_prediction(path: &Path) -> anyhow::Result<TablePrediction> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn synth(cfg: &mut RunConfig, a: SynthArgs, out: &Path) -> anyhow::Result<()> {
    let s = &mut cfg.synth;
    if let Some(v) = a.count {
        s.train = v;
    }
    if let Some(v) = a.val {
        s.val = v;
    }
    if let Some(v) = a.test {
        s.test = v;
    }
    if let Some(p) = a.profile {
        s.profile = p;
    }
    let params = cfg.gen_params()?;
    create_dir(out)?;
    let s = &cfg.synth;
    let m = write_dataset(out, &params, s.train, s.val, s.test)?;
    cfg.record("synth", &[("out", out)]);
    cfg.save(&out.join("run_config.toml"))?;
    log::info!(
        "wrote {} train, {} val, {} test tables to {}",
        m.splits.train.len(),
        m.splits.val.len(),
        m.splits.test.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PairRecord<'a> {
    table_id: &'a str,
    cell_id_a: u32,
    cell_id_b: u32,
    label: u8,
    distance: f64,
}

#[derive(Serialize)]
struct PairStats {
    tables: usize,
    pairs: usize,
    no_connection: usize,
    vertical: usize,
    horizontal: usize,
}

fn pairs(cfg: &mut RunConfig, a: PairsArgs, out: &Path) -> anyhow::Result<()> {
    let m = require_dataset(&a.data)?;
    let tables = Manifest::load_split(&a.data, a.split.ids(&m))?;
    let mode = cfg.train.bbox_mode;
    let k = cfg.train.k;
    let per_table: Vec<(Table, Vec<_>)> = tables
        .iter()
        .map(|(t, _)| -> anyhow::Result<_> {
            let t = apply_empty_cell_policy(t, mode)?;
            let p = generate_pairs(&t, k)?;
            Ok((t, p))
        })
        .collect::<anyhow::Result<_>>()?;
    let mut records = Vec::new();
    let mut counts = [0usize; 3];
    for (t, ps) in &per_table {
        for p in ps {
            counts[p.label.index()] += 1;
            records.push(PairRecord {
                table_id: &t.id,
                cell_id_a: p.cell_id_a,
                cell_id_b: p.cell_id_b,
                label: p.label as u8,
                distance: p.distance,
            });
        }
    }
    let stats = PairStats {
        tables: tables.len(),
        pairs: records.len(),
        no_connection: counts[0],
        vertical: counts[1],
        horizontal: counts[2],
    };
    create_dir(out)?;
    write_json(&out.join("pairs.json"), &records)?;
    write_json(&out.join("pair_stats.json"), &stats)?;
    cfg.record("pairs", &[("data", &a.data), ("out", out)]);
    cfg.split = Some(format!("{:?}", a.split).to_lowercase());
    cfg.save(&out.join("run_config.toml"))?;
    println!(
        "{} pairs over {} tables: {} none, {} vertical, {} horizontal",
        stats.pairs, stats.tables, stats.no_connection, stats.vertical, stats.horizontal
    );
    Ok(())
}

fn train_cmd(cfg: &mut RunConfig, a: TrainArgs, out: &Path) -> anyhow::Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.patience {
        t.patience = v;
    }
    if let Some(w) = a.class_weights {
        t.class_weights = Some([w[0], w[1], w[2]]);
    }
    if let Some(v) = a.input_size {
        t.model.input_size = v;
    }
    if let Some(v) = a.channels {
        t.model.channels = v;
    }
    t.validate()?;
    let m = require_dataset(&a.data)?;
    let train_set = Manifest::load_split(&a.data, &m.splits.train)?;
    let val_set = Manifest::load_split(&a.data, &m.splits.val)?;
    let outcome = train(&train_set, &val_set, &cfg.train)?;
    create_dir(out)?;
    save_checkpoint(&out.join("model.ckpt"), &outcome.model, &outcome.optimizer)?;
    write_history_csv(&outcome.history, &out.join("history.csv"))?;
    cfg.record("train", &[("data", &a.data), ("out", out)]);
    cfg.save(&out.join("run_config.toml"))?;
    let best = outcome.best();
    println!(
        "best epoch {} of {}: val micro-F1 {:.4}, macro-F1 {:.4}",
        outcome.best_epoch,
        outcome.history.len(),
        best.val_micro_f1,
        best.val_macro_f1
    );
    Ok(())
}

fn eval(cfg: &mut RunConfig, a: EvalArgs, out: &Path) -> anyhow::Result<()> {
    let m = require_dataset(&a.data)?;
    let tables = Manifest::load_split(&a.data, a.split.ids(&m))?;
    let report: MetricsReport = if a.oracle {
        let ts: Vec<Table> = tables.into_iter().map(|(t, _)| t).collect();
        evaluate_oracle(&ts, cfg.train.bbox_mode, cfg.train.k)?
    } else {
        let path = a.checkpoint.as_deref().expect("clap requires a checkpoint without --oracle");
        require_file(path)?;
        let ck = load_checkpoint_for(path, &cfg.train.model)?;
        cfg.train.model = ck.model.config.clone();
        evaluate(&ck.model, &tables, &cfg.train)?
    };
    create_dir(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    let mut inputs: Vec<(&str, &Path)> = vec![("data", &a.data), ("out", out)];
    if let Some(c) = &a.checkpoint {
        inputs.push(("checkpoint", c));
    }
    cfg.record("eval", &inputs);
    cfg.split = Some(format!("{:?}", a.split).to_lowercase());
    cfg.oracle = a.oracle;
    cfg.save(&out.join("run_config.toml"))?;
    print!("{report}");
    Ok(())
}

fn infer(cfg: &mut RunConfig, a: InferArgs, out: &Path) -> anyhow::Result<()> {
    require_file(&a.checkpoint)?;
    let ck = load_checkpoint_for(&a.checkpoint, &cfg.train.model)?;
    cfg.train.model = ck.model.config.clone();
    let (t, img) = load_table(&a.table, a.image.as_deref())?;
    let (_, prediction) = predict_table(&ck.model, &t, &img, cfg.train.bbox_mode, cfg.train.k)?;
    create_dir(out)?;
    write_json(&out.join("relations.json"), &prediction)?;
    let mut inputs: Vec<(&str, &Path)> = vec![("checkpoint", &a.checkpoint), ("table", &a.table), ("out", out)];
    if let Some(i) = &a.image {
        inputs.push(("image", i));
    }
    cfg.record("infer", &inputs);
    cfg.save(&out.join("run_config.toml"))?;
    let wrong = prediction.pairs.iter().filter(|p| p.predicted != p.truth).count();
    println!("{} pairs classified, {wrong} differ from the annotation", prediction.pairs.len());
    Ok(())
}

/// The table with the policy of `mode` applied and the relations to use:
/// predicted ones from `relations` when given, otherwise the annotation's.
fn resolve_relations(
    cfg: &mut RunConfig,
    table: &Table,
    relations: Option<&Path>,
) -> anyhow::Result<(Table, Option<RelationMap>)> {
    match relations {
        Some(p) => {
            let pred = load_prediction(p)?;
            if pred.table_id != table.id {
                bail!(Error::InvalidArgument(format!(
                    "relations are for table `{}`, annotation is `{}`",
                    pred.table_id, table.id
                )));
            }
            cfg.train.bbox_mode = pred.bbox_mode;
            cfg.train.k = pred.k;
            let t = apply_empty_cell_policy(table, pred.bbox_mode)?;
            Ok((t, Some(pred.relations())))
        }
        None => Ok((apply_empty_cell_policy(table, cfg.train.bbox_mode)?, None)),
    }
}

fn recover(cfg: &mut RunConfig, a: RecoverArgs, out: &Path) -> anyhow::Result<()> {
    require_file(&a.table)?;
    let table = Table::load(&a.table)?;
    let (t, rel) = resolve_relations(cfg, &table, a.relations.as_deref())?;
    let graph = match &rel {
        Some(r) => RelationGraph::from_relations(&t, r)?,
        None => RelationGraph::from_table(&t)?,
    };
    let s = recover_structure(&graph);
    create_dir(out)?;
    write_json(&out.join("structure.json"), &s)?;
    let mut inputs: Vec<(&str, &Path)> = vec![("table", &a.table), ("out", out)];
    if let Some(r) = &a.relations {
        inputs.push(("relations", r));
    }
    cfg.record("recover", &inputs);
    cfg.save(&out.join("run_config.toml"))?;
    println!(
        "{} rows, {} columns, {} unassigned cells",
        s.rows.len(),
        s.columns.len(),
        s.unassigned.len()
    );
    Ok(())
}

fn render(cfg: &mut RunConfig, a: RenderArgs, out: &Path) -> anyhow::Result<()> {
    let (table, img) = load_table(&a.table, a.image.as_deref())?;
    let (t, rel) = resolve_relations(cfg, &table, a.relations.as_deref())?;
    let overlay = render_overlay(&img, &t, rel.as_ref());
    create_dir(out)?;
    overlay.save(&out.join("overlay.png"))?;
    let mut inputs: Vec<(&str, &Path)> = vec![("table", &a.table), ("out", out)];
    if let Some(r) = &a.relations {
        inputs.push(("relations", r));
    }
    if let Some(i) = &a.image {
        inputs.push(("image", i));
    }
    cfg.record("render", &inputs);
    cfg.save(&out.join("run_config.toml"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_failure_kind() {
        let io = anyhow::Error::from(Error::io("x", std::io::Error::from(std::io::ErrorKind::NotFound)));
        let ann = anyhow::Error::from(Error::Annotation("bad".into()));
        let ck = anyhow::Error::from(Error::Version(9));
        let other = anyhow::anyhow!("something else");
        assert_eq!([exit_code(&io), exit_code(&ann), exit_code(&ck), exit_code(&other)], [3, 4, 5, 1]);
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "catt", "--seed", "7", "synth", "--count", "3", "--out", "/tmp/x", "--bbox-mode", "text_focused",
        ])
        .unwrap();
        assert_eq!(cli.global.seed, Some(7));
        assert_eq!(cli.global.bbox_mode.as_deref(), Some("text_focused"));
        assert!(matches!(cli.command, Command::Synth(SynthArgs { count: Some(3), .. })));
        assert!(Cli::try_parse_from(["catt", "synth", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["catt", "eval", "--data", "d"]).is_err());
    }
}
