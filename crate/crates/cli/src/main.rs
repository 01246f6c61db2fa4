//! `exsum`: ingest → train-retriever → retrieve → train-summarizer →
//! summarize → evaluate, plus synth-corpus and ablate.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use exsum::evalharness::AblationArm;
use exsum::pipeline::{self, RunConfig, SynthKind, Workdir};
use exsum::retriever::RetrievalMode;
use exsum::Error;

#[derive(Parser)]
#[command(name = "exsum", version, about = "Exemplar-guided abstractive summarization")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Root of the artifact tree.
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set retriever.dropout=0`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Contrastive temperature τ.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Similarity heads H.
    #[arg(long, global = true)]
    heads: Option<usize>,
    /// Exemplars per document (e).
    #[arg(long, global = true)]
    exemplars: Option<usize>,
    /// Coarse candidate pool size.
    #[arg(long, global = true)]
    pool_cap: Option<usize>,
    /// Negatives per training query.
    #[arg(long, global = true)]
    negatives: Option<usize>,
    /// Credit start step l_s.
    #[arg(long, global = true)]
    credit_start: Option<usize>,
    /// Steps between credit applications.
    #[arg(long, global = true)]
    credit_interval: Option<usize>,
    /// Credit weight λ.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    beam_size: Option<usize>,
    /// Group-tag table rows N.
    #[arg(long, global = true)]
    max_tags: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Read a JSONL corpus into the work directory and build its vocabulary.
    Ingest {
        #[arg(long)]
        input: PathBuf,
    },
    /// Generate a seeded synthetic corpus.
    SynthCorpus {
        #[arg(long, default_value = "clustered")]
        kind: SynthKind,
        /// Generator seed.
        #[arg(long)]
        synth_seed: Option<u64>,
    },
    /// Build candidate pools and train the dense retriever.
    TrainRetriever {
        #[arg(long)]
        epochs: Option<usize>,
        /// Fraction of train queries used.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Retrieve exemplar sets for every record.
    Retrieve {
        #[arg(long, default_value = "dense")]
        mode: RetrievalMode,
    },
    /// Train the summarizer on exemplar-augmented inputs.
    TrainSummarizer {
        #[arg(long)]
        epochs: Option<usize>,
        /// Exemplar source: dense, tfidf, random, oracle or none.
        #[arg(long)]
        exemplars_from: Option<String>,
        /// Write the assembled inputs to summarizer/inputs.jsonl.
        #[arg(long)]
        dump_input: bool,
    },
    /// Decode the test split.
    Summarize {
        #[arg(long, default_value = "full")]
        label: String,
        /// Write per-step beams to reports/<label>.trace.jsonl.
        #[arg(long)]
        trace: bool,
        /// Disable ROUGE credit.
        #[arg(long)]
        no_credit: bool,
    },
    /// Score the summarizer on the test split.
    Evaluate {
        #[arg(long, default_value = "full")]
        label: String,
    },
    /// Train and score the ablation arms.
    Ablate {
        /// Comma-separated arms; all six by default.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<AblationArm>,
    },
    /// Print the effective configuration and its fingerprint.
    Config,
}

fn build_config(g: &Global, cmd: &Command) -> exsum::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    macro_rules! flag {
        ($opt:expr, $field:expr) => {
            if let Some(v) = $opt {
                $field = v;
            }
        };
    }
    flag!(g.tau, cfg.retriever.tau);
    flag!(g.heads, cfg.retriever.sim_heads);
    if let Some(e) = g.exemplars {
        cfg.retriever.exemplars = e;
        cfg.budgets.exemplars = e;
    }
    flag!(g.pool_cap, cfg.pool.cap);
    flag!(g.negatives, cfg.retriever.negatives);
    flag!(g.credit_start, cfg.decoder.start);
    flag!(g.credit_interval, cfg.decoder.interval);
    flag!(g.lambda, cfg.decoder.lambda);
    flag!(g.beam_size, cfg.decoder.beam_size);
    flag!(g.max_tags, cfg.budgets.max_tags);
    flag!(g.seed, cfg.seed);
    match cmd {
        Command::SynthCorpus { synth_seed, .. } => {
            flag!(*synth_seed, cfg.synth.seed);
            flag!(*synth_seed, cfg.paraphrase.seed);
        }
        Command::TrainRetriever { epochs, fraction } => {
            flag!(*epochs, cfg.retriever.epochs);
            flag!(*fraction, cfg.retriever.fraction);
        }
        Command::TrainSummarizer {
            epochs, exemplars_from, ..
        } => {
            flag!(*epochs, cfg.summarizer.epochs);
            if let Some(s) = exemplars_from {
                cfg.summarizer.exemplars = s.parse()?;
            }
        }
        Command::Summarize { no_credit: true, .. } => cfg.decoder.enabled = false,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> exsum::Result<()> {
    let cfg = build_config(&cli.global, &cli.command)?;
    let wd = Workdir::new(&cli.global.workdir);
    match cli.command {
        Command::Ingest { input } => {
            let c = pipeline::stage_ingest(&wd, &cfg, &input)?;
            println!("ingested {} records", c.len());
        }
        Command::SynthCorpus { kind, .. } => {
            let s = pipeline::stage_synth(&wd, &cfg, kind)?;
            println!("generated {} records", s.corpus.len());
        }
        Command::TrainRetriever { .. } => {
            let r = pipeline::stage_train_retriever(&wd, &cfg)?;
            for (i, l) in r.epoch_losses.iter().enumerate() {
                println!("epoch {}: loss {l:.4}", i + 1);
            }
        }
        Command::Retrieve { mode } => {
            let sets = pipeline::stage_retrieve(&wd, &cfg, mode)?;
            println!("{} exemplar sets -> {}", sets.len(), wd.exemplar_file(mode).display());
        }
        Command::TrainSummarizer { dump_input, .. } => {
            let r = pipeline::stage_train_summarizer(&wd, &cfg, dump_input)?;
            for (i, l) in r.epoch_losses.iter().enumerate() {
                println!("epoch {}: loss {l:.4}", i + 1);
            }
        }
        Command::Summarize { label, trace, .. } => {
            let lines = pipeline::stage_summarize(&wd, &cfg, &label, trace)?;
            println!("{} summaries", lines.len());
        }
        Command::Evaluate { label } => {
            let r = pipeline::stage_evaluate(&wd, &cfg, &label)?;
            print!("{}", r.summary_json());
        }
        Command::Ablate { arms } => {
            let arms = if arms.is_empty() { AblationArm::ALL.to_vec() } else { arms };
            for (arm, r) in pipeline::stage_ablate(&wd, &cfg, &arms)? {
                println!("{arm}: R-1 {:.2} R-2 {:.2} R-L {:.2}", r.mean.r1.f1 * 100.0, r.mean.r2.f1 * 100.0, r.mean.rl.f1 * 100.0);
            }
        }
        Command::Config => {
            println!("# fingerprint {}", cfg.fingerprint());
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
