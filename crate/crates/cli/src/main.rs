mod artifacts;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use affmtl::data::{split_by_video, synth_generate, write_annotations, DatasetSplit, FeatureTable, SynthConfig};
use affmtl::search::{emit_tables, enumerate_grid, run_search, GridConfig, SearchInputs, TableFormat};
use affmtl::training::{
    apply_overrides, evaluate, extract_bank, train_joint, train_single, TrainConfig,
};
use affmtl::{Error, Result, TaskKind};

use artifacts::{load_banks, load_checkpoints, load_data, read_text, write_atomic, write_report, write_run};

const SEED_VAR: &str = "AFFMTL_SEED";

#[derive(Parser, Debug)]
#[command(name = "affmtl", version, about = "Progressive multi-task affect learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (annotations.csv + features.bin).
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        input_dim: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value override, repeatable
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoder and one task head.
    TrainSingle {
        #[arg(long)]
        task: TaskKind,
        #[command(flatten)]
        common: TrainArgs,
    },
    /// Freeze a single-task encoder's outputs into bank.<task>.
    ExtractBank {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint training with fused banks and optional temporal module.
    TrainJoint {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long = "bank")]
        banks: Vec<PathBuf>,
        /// Single-task checkpoint of the primary task
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Run a strategy grid.
    Search {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "bank")]
        banks: Vec<PathBuf>,
        /// Single-task checkpoints, one per target task
        #[arg(long = "init")]
        inits: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// key=value override of the shared training settings, repeatable
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "bank")]
        banks: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the reports of several run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value override, repeatable
    #[arg(long = "set")]
    set: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_VAR}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Config file, then `AFFMTL_SEED`, then `--set` overrides.
fn load_train_config(path: Option<&Path>, set: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    cfg.with_overrides(set)
}

fn splits(data: &Path, cfg: &TrainConfig) -> Result<(DatasetSplit, DatasetSplit)> {
    split_by_video(&load_data(data)?, cfg.val_videos)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            seed,
            videos,
            frames,
            input_dim,
            config,
            set,
            out,
        } => {
            let mut cfg: SynthConfig = match &config {
                Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(e.to_string()))?,
                None => SynthConfig::default(),
            };
            if let Some(s) = env_seed()? {
                cfg.seed = s;
            }
            cfg = apply_overrides(&cfg, &set)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.num_videos = videos.unwrap_or(cfg.num_videos);
            cfg.frames_per_video = frames.unwrap_or(cfg.frames_per_video);
            cfg.input_dim = input_dim.unwrap_or(cfg.input_dim);
            let records = synth_generate(&cfg)?;
            let mut csv = Vec::new();
            write_annotations(&mut csv, &records)?;
            let mut bin = Vec::new();
            FeatureTable::from_records(&records)?
                .write(&mut bin)
                .map_err(|e| Error::io(&out, e))?;
            write_atomic(&out.join(artifacts::ANNOTATIONS), &csv)?;
            write_atomic(&out.join(artifacts::FEATURES), &bin)?;
            write_atomic(
                &out.join("synth.toml"),
                toml::to_string(&cfg).expect("synth config serializes").as_bytes(),
            )?;
            log::info!("wrote {} records to {}", records.len(), out.display());
        }
        Command::TrainSingle { task, common } => {
            let mut cfg = load_train_config(common.config.as_deref(), &common.set)?;
            cfg.tasks = vec![task];
            if cfg.loss_weights.is_some_and(|w| w.check_against(&cfg.tasks).is_err()) {
                cfg.loss_weights = None;
            }
            cfg.validate()?;
            let (train, val) = splits(&common.data, &cfg)?;
            let outcome = train_single(task, &cfg, &train, &val)?;
            write_run(&common.out, &outcome)?;
            println!(
                "{task}: best {:.4} at epoch {}",
                outcome.checkpoint.best_score, outcome.checkpoint.best_epoch
            );
        }
        Command::ExtractBank {
            checkpoint,
            data,
            out,
        } => {
            let ck = affmtl::training::Checkpoint::load(&checkpoint)?;
            let records = load_data(&data)?;
            let bank = extract_bank(&ck, &records)?;
            let path = out.join(format!("bank.{}", bank.source));
            write_atomic(&path, &bank.to_bytes())?;
            println!("{}", path.display());
        }
        Command::TrainJoint {
            common,
            banks,
            init,
        } => {
            let cfg = load_train_config(common.config.as_deref(), &common.set)?;
            cfg.validate()?;
            let banks = load_banks(&banks)?;
            let init = init.map(|p| affmtl::training::Checkpoint::load(&p)).transpose()?;
            let (train, val) = splits(&common.data, &cfg)?;
            let refs: Vec<_> = banks.iter().collect();
            let outcome = train_joint(&cfg, &train, &val, &refs, init.as_ref())?;
            write_run(&common.out, &outcome)?;
            println!(
                "{}: best {:.4} at epoch {}",
                cfg.primary(),
                outcome.checkpoint.best_score,
                outcome.checkpoint.best_epoch
            );
        }
        Command::Search {
            grid,
            data,
            banks,
            inits,
            jobs,
            set,
            out,
        } => {
            let grid = GridConfig::from_toml(&read_text(&grid)?)?;
            let mut base = grid.base_config()?;
            if let Some(s) = env_seed()? {
                base.seed = s;
            }
            let base = base.with_overrides(&set)?;
            let specs = enumerate_grid(&grid)?;
            for s in &specs {
                s.apply(&base, base.seed).validate()?;
            }
            let banks = load_banks(&banks)?;
            let inits = load_checkpoints(&inits)?;
            let (train, val) = splits(&data, &base)?;
            let bank_refs: Vec<_> = banks.iter().collect();
            let init_refs: Vec<_> = inits.iter().collect();
            let inputs = SearchInputs {
                base: &base,
                train: &train,
                val: &val,
                banks: &bank_refs,
                singles: &init_refs,
            };
            let (report, results) = run_search(&specs, &inputs, base.seed, &grid.hash(), jobs)?;
            let mut timings = String::from("spec,seed,seconds\n");
            for r in &results {
                let seed = specs[r.spec_index].seeds[r.seed_index];
                let dir = out
                    .join("runs")
                    .join(format!("{:03}-{}-seed{seed}", r.spec_index, specs[r.spec_index].target));
                match &r.outcome {
                    Ok(o) => write_run(&dir, o)?,
                    Err(e) => write_atomic(&dir.join("error"), format!("{e}\n").as_bytes())?,
                }
                timings.push_str(&format!("{},{seed},{:.3}\n", r.spec_index, r.elapsed.as_secs_f64()));
            }
            let md = emit_tables(&report, TableFormat::Markdown)?;
            write_atomic(&out.join("search_report.md"), md.as_bytes())?;
            write_atomic(
                &out.join("search_report.csv"),
                emit_tables(&report, TableFormat::Csv)?.as_bytes(),
            )?;
            write_atomic(&out.join("search_timings.csv"), timings.as_bytes())?;
            print!("{md}");
        }
        Command::Evaluate {
            checkpoint,
            data,
            banks,
            split,
            out,
        } => {
            let ck = affmtl::training::Checkpoint::load(&checkpoint)?;
            let banks = load_banks(&banks)?;
            let records = load_data(&data)?;
            let target = match split {
                SplitArg::All => DatasetSplit::new(records),
                SplitArg::Train => split_by_video(&records, ck.config.val_videos)?.0,
                SplitArg::Val => split_by_video(&records, ck.config.val_videos)?.1,
            };
            let refs: Vec<_> = banks.iter().collect();
            let report = evaluate(&ck, &target, &refs)?;
            write_report(&out, &report)?;
            print!("{}", report.to_kv_text());
        }
        Command::Report { runs, out } => {
            let mut rows = runs
                .iter()
                .map(|d| report::load_row(d))
                .collect::<Result<Vec<_>>>()?;
            report::sort_rows(&mut rows);
            let table = report::render(&rows);
            if let Some(path) = out {
                write_atomic(&path, table.as_bytes())?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

/// Every config key with its default, appended to `--help`.
fn config_help() -> String {
    let mut s = String::from("Training config keys (TOML; defaults shown):\n");
    for (k, v, doc) in TrainConfig::key_docs() {
        s.push_str(&format!("  {k} = {v}\n      {doc}\n"));
    }
    s.push_str("\nSynthetic corpus keys (synth --config / --set):\n");
    let synth = toml::Table::try_from(SynthConfig::default()).expect("synth config serializes");
    for (k, v) in flatten(&synth, "") {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str(
        "\nGrid keys (search --grid):\n  \
         seeds = [0, 1, 2]\n  \
         train = {} (training keys above)\n  \
         [[target]] task, fusion = [[]], joint, windows = [[1, 1]]\n",
    );
    s.push_str(&format!(
        "\n{SEED_VAR} overrides the seed from a config file; --set and explicit flags win over it.\n\
         Exit status: 0 success, 1 invalid input or configuration, 2 runtime failure.\n"
    ));
    s
}

fn flatten(t: &toml::Table, prefix: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (k, v) in t {
        let key = format!("{prefix}{k}");
        match v {
            toml::Value::Table(inner) => out.extend(flatten(inner, &format!("{key}."))),
            other => out.push((key, other.to_string())),
        }
    }
    out
}

fn parse_args() -> std::result::Result<Cli, clap::Error> {
    let help = config_help();
    let mut cmd = Cli::command().after_long_help(help.clone());
    for name in ["synth", "train-single", "train-joint", "search"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_long_help(help.clone()));
    }
    let matches = cmd.try_get_matches()?;
    Cli::from_arg_matches(&matches)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match parse_args() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
