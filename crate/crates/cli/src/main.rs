//! `smart`: data generation, training, decoding, evaluation, ablations and
//! gradient checks for CMLM models.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error, 3 failed check.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use smart_core::ablate::{run_ablation, ModelCache, Which};
use smart_core::checkpoint::Container;
use smart_core::config::RunConfig;
use smart_core::data::{self, build_vocab, encode_pairs, Corpus, Split, TaskSpec};
use smart_core::decode::{mask_predict, trace_records, DecodeOptions, Variant};
use smart_core::error::{write_atomic, Error};
use smart_core::metrics::{evaluate, parse_grid};
use smart_core::tensor::gradcheck::GradcheckOptions;
use smart_core::tensor::OpKind;
use smart_core::train::{check_vocab, gradcheck_cmlm, restore, DirSink, Trainer};
use smart_core::vocab::Vocab;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "smart", version, about = "CMLM training and mask-predict decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a task spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and metrics.jsonl into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corpus directory from gen-data (default: generate from the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode source sentences (one per line; `-` reads stdin).
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "T", default_value_t = 10)]
        iterations: usize,
        #[arg(long, default_value_t = 3)]
        length_beam: usize,
        #[arg(long, default_value = "masked_only")]
        variant: String,
        /// Write per-iteration JSON lines here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Vocabulary the input is expected to use; must match the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over a decoding grid.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "T=1,4,10;l=1,3")]
        grid: String,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write one JSON line per grid cell here.
        #[arg(long)]
        jsonl: Option<PathBuf>,
        /// Write per-sentence records here.
        #[arg(long)]
        sentences: Option<PathBuf>,
    },
    /// Run an ablation sweep.
    Ablate {
        #[arg(long)]
        which: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full training objective.
    Gradcheck {
        /// Corrupt one backward rule (negative control), e.g. `matmul`.
        #[arg(long)]
        fault: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// Errors that map to exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A check that ran and failed (exit code 3).
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("SMART_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Usage(format!("SMART_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn load_corpus(data: Option<&Path>, spec: &TaskSpec) -> anyhow::Result<Corpus> {
    Ok(match data {
        Some(dir) => data::read_corpus(dir)?,
        None => data::generate(spec)?,
    })
}

fn gen_data(spec: &Path, out: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let spec: TaskSpec = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
    spec.validate()?;
    let corpus = data::generate(&spec)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let vocab = data::write_corpus(&corpus, out)?;
    println!(
        "wrote {} train, {} dev, {} test pairs and a {}-token vocabulary ({}) to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        vocab.len(),
        vocab.fingerprint(),
        out.display()
    );
    Ok(())
}

fn train(config: &Path, out: &Path, data: Option<&Path>, resume: Option<&Path>) -> anyhow::Result<()> {
    let (cfg, text) = RunConfig::load(config)?;
    let corpus = load_corpus(data, &cfg.task)?;
    let vocab = build_vocab(&corpus);
    let train_pairs = encode_pairs(&vocab, &corpus.train);
    let dev_pairs = encode_pairs(&vocab, &corpus.dev);
    let sink_dir = DirSink::new(out)?;
    write_file(&out.join("config.toml"), &text)?;
    vocab.save(&out.join("vocab.txt"))?;
    let mut trainer = match resume {
        Some(path) => {
            let c = Container::load(path)?;
            let t = Trainer::resume(&c, Some(cfg), &vocab, &train_pairs, &dev_pairs)?;
            sink_dir.truncate_metrics(t.update())?;
            log::info!("resuming from {} at update {}", path.display(), t.update());
            t
        }
        None => {
            let _ = std::fs::remove_file(out.join(DirSink::METRICS));
            Trainer::new(cfg, vocab, &train_pairs, &dev_pairs)?
        }
    };
    let mut sink = sink_dir;
    let summary = trainer.run(&mut sink)?;
    println!(
        "trained {} updates; last checkpoint {}",
        summary.updates, summary.last_checkpoint
    );
    if let Some(r) = summary.last_record {
        println!("{}", serde_json::to_string(&r)?);
    }
    Ok(())
}

fn read_lines(input: &Path) -> anyhow::Result<Vec<String>> {
    let reader: Box<dyn BufRead> = if input == Path::new("-") {
        Box::new(std::io::stdin().lock())
    } else {
        let f = std::fs::File::open(input).with_context(|| format!("opening {}", input.display()))?;
        Box::new(std::io::BufReader::new(f))
    };
    let mut lines = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    Ok(lines)
}

#[allow(clippy::too_many_arguments)]
fn decode(
    ckpt: &Path,
    input: &Path,
    iterations: usize,
    length_beam: usize,
    variant: &str,
    trace: Option<&Path>,
    vocab_path: Option<&Path>,
) -> anyhow::Result<()> {
    let variant: Variant = variant.parse().map_err(|e: Error| Usage(e.to_string()))?;
    let opts = DecodeOptions::new(iterations, length_beam, variant);
    let restored = restore(&Container::load(ckpt)?)?;
    if let Some(p) = vocab_path {
        check_vocab(&restored.meta, &Vocab::load(p)?)?;
    }
    opts.validate(restored.model.config().max_len)
        .map_err(|e| Usage(e.to_string()))?;
    let vocab = &restored.vocab;
    let lines = read_lines(input)?;
    let sources: Vec<Vec<u32>> = lines.iter().map(|l| vocab.encode_line(l)).collect();
    let refs: Vec<&[u32]> = sources.iter().map(Vec::as_slice).collect();
    let results = mask_predict(&restored.model, &refs, &opts)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for r in &results {
        writeln!(out, "{}", vocab.detokenize(&r.tokens))?;
    }
    if let Some(path) = trace {
        let mut text = String::new();
        for (i, r) in results.iter().enumerate() {
            for rec in trace_records(i, r) {
                text.push_str(&rec.to_string());
                text.push('\n');
            }
        }
        write_file(path, &text)?;
    }
    Ok(())
}

fn evaluate_cmd(
    ckpt: &Path,
    split: &str,
    grid: &str,
    data: Option<&Path>,
    jsonl: Option<&Path>,
    sentences: Option<&Path>,
) -> anyhow::Result<()> {
    let split = match split {
        "dev" => Split::Dev,
        "test" => Split::Test,
        other => bail!(Usage(format!("--split must be dev or test, got {other:?}"))),
    };
    let grid = parse_grid(grid).map_err(|e| Usage(e.to_string()))?;
    let restored = restore(&Container::load(ckpt)?)?;
    for g in &grid {
        g.validate(restored.model.config().max_len)
            .map_err(|e| Usage(e.to_string()))?;
    }
    let corpus = load_corpus(data, &restored.meta.config.task)?;
    let vocab = build_vocab(&corpus);
    check_vocab(&restored.meta, &vocab)?;
    let pairs = encode_pairs(&vocab, corpus.split(split));
    let system = format!("{:?} @ update {}", restored.meta.config.train.mode, restored.meta.update);
    let report = evaluate(&restored.model, &system, &vocab, &pairs, &grid, sentences.is_some())?;
    print!("{}", report.to_table());
    if let Some(p) = jsonl {
        write_file(p, &report.to_jsonl())?;
    }
    if let Some(p) = sentences {
        let mut text = String::new();
        for row in &report.rows {
            for s in row.sentences.iter().flatten() {
                let mut v = serde_json::to_value(s)?;
                v["iterations"] = row.iterations.into();
                v["length_beam"] = row.length_beam.into();
                v["variant"] = row.variant.to_string().into();
                text.push_str(&v.to_string());
                text.push('\n');
            }
        }
        write_file(p, &text)?;
    }
    Ok(())
}

fn ablate(which: &str, config: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let which: Which = which.parse().map_err(|e: Error| Usage(e.to_string()))?;
    let (cfg, text) = RunConfig::load(config)?;
    let corpus = data::generate(&cfg.task)?;
    let vocab = build_vocab(&corpus);
    let train_pairs = encode_pairs(&vocab, &corpus.train);
    let dev_pairs = encode_pairs(&vocab, &corpus.dev);
    let mut cache = ModelCache::new(&vocab, &train_pairs, &dev_pairs);
    let table = run_ablation(&mut cache, &cfg, which, &dev_pairs)?;
    print!("{}", table.to_table());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_file(&dir.join("config.toml"), &text)?;
        write_file(&dir.join(format!("ablate_{which}.md")), &table.to_table())?;
        write_file(&dir.join(format!("ablate_{which}.jsonl")), &table.to_jsonl())?;
    }
    Ok(())
}

fn gradcheck_cmd(fault: Option<&str>, seed: u64) -> anyhow::Result<()> {
    let fault = match fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Usage(format!("unknown op {name:?}")))?),
    };
    let opts = GradcheckOptions {
        fault,
        ..GradcheckOptions::default()
    };
    let start = std::time::Instant::now();
    let report = gradcheck_cmlm(seed, &opts)?;
    for g in &report.groups {
        println!(
            "{:<28} {:>5} entries  max rel err {:.3e}  {}",
            g.name,
            g.entries_checked,
            g.max_rel_err,
            if g.passed { "ok" } else { "FAIL" }
        );
    }
    println!(
        "gradcheck {} (tolerance {:e}, {:.1}s)",
        if report.passed() { "passed" } else { "FAILED" },
        report.tolerance,
        start.elapsed().as_secs_f64()
    );
    if !report.passed() {
        bail!(CheckFailed(format!(
            "{} parameter groups exceed the tolerance",
            report.failing().count()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Train {
            config,
            out,
            data,
            resume,
        } => train(&config, &out, data.as_deref(), resume.as_deref()),
        Command::Decode {
            ckpt,
            input,
            iterations,
            length_beam,
            variant,
            trace,
            vocab,
        } => decode(
            &ckpt,
            &input,
            iterations,
            length_beam,
            &variant,
            trace.as_deref(),
            vocab.as_deref(),
        ),
        Command::Evaluate {
            ckpt,
            split,
            grid,
            data,
            jsonl,
            sentences,
        } => evaluate_cmd(&ckpt, &split, &grid, data.as_deref(), jsonl.as_deref(), sentences.as_deref()),
        Command::Ablate { which, config, out } => ablate(&which, &config, out.as_deref()),
        Command::Gradcheck { fault, seed } => gradcheck_cmd(fault.as_deref(), seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)));
            if e.is::<Usage>() || config_error {
                ExitCode::from(EXIT_USAGE)
            } else if e.is::<CheckFailed>() {
                ExitCode::from(EXIT_CHECK)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}
