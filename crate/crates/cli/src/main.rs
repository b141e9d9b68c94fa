use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ragmds_core::decode::{
    aggregate_path, evaluate_records, generate_record, score_texts, write_eval_jsonl, EvalRecord, EvalReport,
    GenerationSettings,
};
use ragmds_core::index::MemoryIndex;
use ragmds_core::retrieve::{build_index, memory_corpus};
use ragmds_core::text::{read_dataset, ExampleRecord, Vocabulary};
use ragmds_core::train::{
    joint_examples, load_checkpoint, pretrain_pairs, run_joint_training, run_pretraining, save_checkpoint, Phase,
    Trainer,
};
use ragmds_core::{Model, PipelineConfig};

#[derive(Parser)]
#[command(name = "ragmds", version, about = "Retrieval-augmented related-work generation")]
struct Cli {
    /// JSON run configuration. Top-level keys are joint-training settings;
    /// `pretrain`, `model`, `decode` and `quantizer` are nested sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of every training phase.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode the targets of a dataset into a memory index.
    BuildIndex {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Contrastive pretraining of the query and memory encoders.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory to write.
        #[arg(long)]
        output: PathBuf,
        /// Use this vocabulary instead of building one from the data.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Joint retrieval and generation training.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Start from this checkpoint (pretrained or a joint run to resume).
        #[arg(long, required_unless_present = "skip_pretrain", conflicts_with = "skip_pretrain")]
        checkpoint: Option<PathBuf>,
        /// Start from random weights.
        #[arg(long)]
        skip_pretrain: bool,
        /// Memory index to use; built from the training targets if absent.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate for every record of a dataset, writing JSONL {id, generated}.
    Generate {
        #[command(flatten)]
        run: GenerationArgs,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate and score against targets; the aggregate goes to stdout and
    /// to `<output>.aggregate.json`.
    Evaluate {
        #[command(flatten)]
        run: GenerationArgs,
        #[arg(long)]
        output: PathBuf,
    },
    /// ROUGE between two line-aligned text files.
    Score { candidates: PathBuf, references: PathBuf },
}

#[derive(Args)]
struct GenerationArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Without an index, decoding runs without retrieved candidates.
    #[arg(long)]
    index: Option<PathBuf>,
}

struct Settings {
    config: Option<PipelineConfig>,
    seed: Option<u64>,
}

impl Settings {
    /// `--config` if given, else `fallback`, with `--seed` applied.
    fn resolve(&self, fallback: PipelineConfig) -> PipelineConfig {
        let mut cfg = self.config.clone().unwrap_or(fallback);
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.pretrain.seed = seed;
        }
        cfg
    }
}

fn load_records(path: &Path) -> Result<Vec<ExampleRecord>> {
    let records = read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))?;
    if records.is_empty() {
        bail!("dataset {} is empty", path.display());
    }
    Ok(records)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn index_for(records: &[ExampleRecord], model: &Model, vocab: &Vocabulary, cfg: &PipelineConfig) -> Result<MemoryIndex> {
    let docs = memory_corpus(records, vocab, model.config.max_len);
    let mut index = build_index(&docs, &model.memory, &model.params)?;
    if let Some(q) = cfg.quantizer {
        index.train_quantizer(q)?;
    }
    Ok(index)
}

fn build_index_cmd(settings: &Settings, data: &Path, checkpoint: &Path, output: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let cfg = settings.resolve(ckpt.meta.config.clone());
    let records = load_records(data)?;
    let index = index_for(&records, &ckpt.model, &ckpt.vocab, &cfg)?;
    index.save(output)?;
    eprintln!("indexed {} documents into {}", index.len(), output.display());
    Ok(())
}

fn pretrain_cmd(settings: &Settings, data: &Path, output: &Path, vocab: Option<&Path>, log: Option<&Path>) -> Result<()> {
    let mut cfg = settings.resolve(PipelineConfig::default());
    let records = load_records(data)?;
    let vocab = match vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::build(&records, cfg.vocab_size, cfg.min_freq)?,
    };
    cfg.model.vocab_size = vocab.len();
    let model = Model::new(cfg.model.clone(), cfg.pretrain.seed)?;
    let mut trainer = Trainer::new(model, cfg.pretrain.clone(), Phase::Pretrain)?;
    let pairs = pretrain_pairs(&records, &vocab, cfg.model.max_len);
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| output.join("pretrain_log.jsonl"));
    std::fs::create_dir_all(output)?;
    let mut log = create(&log_path)?;
    let logs = run_pretraining(&mut trainer, &pairs, cfg.pretrain.total_steps, Some(&mut log))?;
    log.flush()?;
    save_checkpoint(output, &trainer, &cfg, &vocab, None)?;
    if let Some(last) = logs.last() {
        eprintln!("pretrained {} steps, final loss {:.4}", trainer.step, last.loss);
    }
    Ok(())
}

struct TrainArgs<'a> {
    data: &'a Path,
    output: &'a Path,
    checkpoint: Option<&'a Path>,
    index: Option<&'a Path>,
    log: Option<&'a Path>,
}

fn train_cmd(settings: &Settings, args: TrainArgs) -> Result<()> {
    let records = load_records(args.data)?;
    let (mut trainer, vocab, cfg) = match args.checkpoint {
        Some(dir) => {
            let ckpt = load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
            let mut cfg = settings.resolve(ckpt.meta.config.clone());
            cfg.model = ckpt.model.config.clone();
            let vocab = ckpt.vocab.clone();
            let trainer = match ckpt.meta.phase {
                // a pretrained model starts joint training with fresh moments
                Phase::Pretrain => Trainer::new(ckpt.model, cfg.train.clone(), Phase::Joint)?,
                Phase::Joint => {
                    let mut t = ckpt.into_trainer()?;
                    t.config = cfg.train.clone();
                    t.config.validate()?;
                    t
                }
            };
            (trainer, vocab, cfg)
        }
        None => {
            let mut cfg = settings.resolve(PipelineConfig::default());
            let vocab = Vocabulary::build(&records, cfg.vocab_size, cfg.min_freq)?;
            cfg.model.vocab_size = vocab.len();
            let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
            (Trainer::new(model, cfg.train.clone(), Phase::Joint)?, vocab, cfg)
        }
    };
    let mut index = match args.index {
        Some(p) => MemoryIndex::load(p).with_context(|| format!("loading index {}", p.display()))?,
        None => index_for(&records, &trainer.model, &vocab, &cfg)?,
    };
    let examples = joint_examples(&records, &vocab, cfg.model.max_len, cfg.model.max_target_len);
    let remaining = (cfg.train.total_steps as u64).saturating_sub(trainer.step) as usize;
    std::fs::create_dir_all(args.output)?;
    let log_path = args.log.map(Path::to_path_buf).unwrap_or_else(|| args.output.join("train_log.jsonl"));
    let mut log = create(&log_path)?;
    let dump = args.output.join("failure");
    let result = run_joint_training(&mut trainer, &examples, &mut index, remaining, Some(&mut log), Some(&dump));
    log.flush()?;
    let logs = result?;
    save_checkpoint(args.output, &trainer, &cfg, &vocab, Some(index.epoch()))?;
    index.save(args.output.join("index.bin"))?;
    if let Some(last) = logs.last() {
        eprintln!(
            "trained to step {}, final loss {:.4}, index epoch {}",
            trainer.step,
            last.loss,
            index.epoch()
        );
    }
    Ok(())
}

struct GenerationRun {
    model: Model,
    vocab: Vocabulary,
    index: Option<MemoryIndex>,
    records: Vec<ExampleRecord>,
    settings: GenerationSettings,
}

fn prepare_generation(settings: &Settings, args: &GenerationArgs) -> Result<GenerationRun> {
    let ckpt = load_checkpoint(&args.checkpoint).with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let cfg = settings.resolve(ckpt.meta.config.clone());
    cfg.decode.validate()?;
    let index = args
        .index
        .as_deref()
        .map(|p| MemoryIndex::load(p).with_context(|| format!("loading index {}", p.display())))
        .transpose()?;
    Ok(GenerationRun {
        model: ckpt.model,
        vocab: ckpt.vocab,
        index,
        records: load_records(&args.data)?,
        settings: GenerationSettings {
            top_k: cfg.train.top_k,
            search: cfg.train.search,
            decode: cfg.decode,
            exclude_self: true,
        },
    })
}

fn generate_cmd(settings: &Settings, args: &GenerationArgs, output: Option<&Path>) -> Result<()> {
    let run = prepare_generation(settings, args)?;
    let mut out: Box<dyn Write> = match output {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for rec in &run.records {
        let r = generate_record(&run.model, &run.vocab, run.index.as_ref(), rec, &run.settings)?;
        let line = serde_json::json!({ "id": r.id, "generated": r.generated, "forced": r.forced });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn evaluate_cmd(settings: &Settings, args: &GenerationArgs, output: &Path) -> Result<()> {
    let run = prepare_generation(settings, args)?;
    let (records, report) = evaluate_records(&run.model, &run.vocab, run.index.as_ref(), &run.records, &run.settings)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_eval_jsonl(output, &records)?;
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(aggregate_path(output), &text)?;
    println!("{text}");
    Ok(())
}

fn score_cmd(candidates: &Path, references: &Path) -> Result<()> {
    let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let cands = read(candidates)?;
    let refs = read(references)?;
    let (c, r): (Vec<&str>, Vec<&str>) = (cands.lines().collect(), refs.lines().collect());
    if c.len() != r.len() {
        bail!("{} candidate lines but {} reference lines", c.len(), r.len());
    }
    let records: Vec<EvalRecord> = c
        .iter()
        .zip(&r)
        .enumerate()
        .map(|(i, (cand, reference))| {
            let s = score_texts(cand, reference);
            EvalRecord {
                id: (i + 1).to_string(),
                generated: cand.to_string(),
                target: reference.to_string(),
                r1: s.r1,
                r2: s.r2,
                rl: s.rl,
                forced: false,
            }
        })
        .collect();
    println!("{}", serde_json::to_string_pretty(&EvalReport::from_records(&records))?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let settings = Settings {
        config: cli
            .config
            .as_deref()
            .map(|p| PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display())))
            .transpose()?,
        seed: cli.seed,
    };
    match &cli.command {
        Command::BuildIndex { data, checkpoint, output } => build_index_cmd(&settings, data, checkpoint, output),
        Command::Pretrain { data, output, vocab, log } => {
            pretrain_cmd(&settings, data, output, vocab.as_deref(), log.as_deref())
        }
        Command::Train {
            data,
            output,
            checkpoint,
            index,
            log,
            ..
        } => train_cmd(
            &settings,
            TrainArgs {
                data,
                output,
                checkpoint: checkpoint.as_deref(),
                index: index.as_deref(),
                log: log.as_deref(),
            },
        ),
        Command::Generate { run, output } => generate_cmd(&settings, run, output.as_deref()),
        Command::Evaluate { run, output } => evaluate_cmd(&settings, run, output),
        Command::Score { candidates, references } => score_cmd(candidates, references),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
