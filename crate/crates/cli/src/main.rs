mod inputs;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pmlm::checkpoint::{self, Checkpoint};
use pmlm::config::RunConfig;
use pmlm::corpus::{ingest_with_vocab, Split, Vocabulary};
use pmlm::equivalence::{verify_equivalence_with_tolerance, EQUIVALENCE_TOLERANCE};
use pmlm::evaluation::{bench_latency, ppl, EvalMode};
use pmlm::generation::{
    generate, generate_causal, GenerationConstraints, GenerationOrder, GenerationStep, GenerationTrace, SamplerSpec,
};
use pmlm::sequence::NUM_SPECIAL;
use pmlm::{AttentionMode, TokenId, TokenSequence, Transformer, TransformerConfig};

#[derive(Parser)]
#[command(name = "pmlm", version, about = "Probabilistically masked language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a preset or a JSON run config
    Train(TrainArgs),
    /// Generate a sequence in random, left-to-right or explicit order
    Generate(GenerateArgs),
    /// Teacher-forced perplexity on a corpus
    EvalPpl(EvalArgs),
    /// Exact check of the masked/permuted objective identity on one sequence
    VerifyEquivalence(VerifyArgs),
    /// Time cached causal generation against full-recompute bidirectional generation
    BenchLatency(BenchArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Bundled preset: upmlm, bert-like or gpt-like
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// JSON run config
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the loss every this many steps
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Random,
    Ltr,
    File,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Greedy,
    Temperature,
    TopK,
}

#[derive(clap::Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "random")]
    order: OrderArg,
    /// 1-based positions, required with `--order file`
    #[arg(long)]
    order_file: Option<PathBuf>,
    /// Lines of `<position>:<token>`
    #[arg(long)]
    anchors: Option<PathBuf>,
    /// Defaults to the model's max_len
    #[arg(long)]
    length: Option<usize>,
    #[arg(long, value_enum, default_value = "top-k")]
    sampler: SamplerArg,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 40)]
    top_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON-lines trace, one line per step
    #[arg(long)]
    trace: Option<PathBuf>,
    /// JSON result
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sequential,
    Random,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// UTF-8 text, one document per line
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "sequential")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct VerifyArgs {
    /// Sequence length (1..=6)
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bidirectional checkpoint; a fresh seeded model is used if omitted
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = EQUIVALENCE_TOLERANCE)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Causal checkpoint; fresh desk-size models are used if both are omitted
    #[arg(long, requires = "bidirectional")]
    causal: Option<PathBuf>,
    /// Bidirectional checkpoint of the same size
    #[arg(long, requires = "causal")]
    bidirectional: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = match (&args.preset, &args.config) {
        (Some(name), None) => RunConfig::preset(name)?,
        (None, Some(path)) => RunConfig::load(path)?,
        _ => bail!("pass exactly one of --preset or --config"),
    };
    if let Some(p) = args.train {
        config.corpus.train = p;
    }
    if let Some(p) = args.test {
        config.corpus.test = Some(p);
    }
    if let Some(p) = args.checkpoint {
        config.checkpoint = p;
    }
    if let Some(p) = args.loss_log {
        config.loss_log = Some(p);
    }
    if let Some(s) = args.steps {
        config.training.steps = s;
    }
    if let Some(b) = args.batch_size {
        config.training.batch_size = b;
    }
    if let Some(s) = args.seed {
        config.training.seed = s;
    }
    config.validate()?;
    let every = args.log_every.max(1);
    let summary = pmlm::train::train(&config, |r| {
        if r.step % every == 0 || r.step == 1 {
            eprintln!("step {:>6}  loss {:.4}", r.step, r.loss);
        }
    })?;
    println!(
        "trained {} steps; checkpoint {}; vocab {}",
        summary.records.len(),
        summary.checkpoint.display(),
        summary.vocab.len()
    );
    if let Some(test) = &config.corpus.test {
        let corpus = ingest_with_vocab(test, &summary.vocab, config.model.max_len, Split::Test)?;
        let report = ppl(&summary.model, &corpus.documents, EvalMode::Sequential, config.training.seed)?;
        print!("{}", report.to_table());
    }
    Ok(())
}

fn sampler_spec(args: &GenerateArgs) -> SamplerSpec {
    match args.sampler {
        SamplerArg::Greedy => SamplerSpec::Greedy,
        SamplerArg::Temperature => SamplerSpec::Temperature {
            temperature: args.temperature,
        },
        SamplerArg::TopK => SamplerSpec::TopK {
            k: args.top_k,
            temperature: args.temperature,
        },
    }
}

fn render(vocab: Option<&Vocabulary>, ids: &[TokenId]) -> String {
    match vocab {
        Some(v) => v.render(ids),
        None => format!("{ids:?}"),
    }
}

fn generate_cmd(args: GenerateArgs) -> Result<()> {
    let Checkpoint { model, vocab } = load_checkpoint(&args.checkpoint)?;
    let length = args.length.unwrap_or(model.config().max_len);
    let anchors = match &args.anchors {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            inputs::parse_anchors(&text, vocab.as_ref())?
        }
        None => Default::default(),
    };
    let constraints = GenerationConstraints::with_anchors(length, anchors);
    let sampler = sampler_spec(&args);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);

    let (output, trace) = match model.mode() {
        AttentionMode::Bidirectional => {
            let order = match args.order {
                OrderArg::Random => GenerationOrder::random(&constraints, &mut rng),
                OrderArg::Ltr => GenerationOrder::left_to_right(&constraints),
                OrderArg::File => {
                    let p = args.order_file.as_ref().context("--order file needs --order-file")?;
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    GenerationOrder::explicit(inputs::parse_order(&text)?)
                }
            };
            generate(&model, &constraints, &order, &sampler, &mut rng)?
        }
        AttentionMode::Causal => {
            if !matches!(args.order, OrderArg::Ltr) {
                bail!("a causal model only generates left to right; use --order ltr");
            }
            let prompt: Vec<TokenId> = constraints.anchors.values().copied().collect();
            if constraints.anchors.keys().copied().ne(0..prompt.len()) {
                bail!("a causal model only accepts anchors that form a prefix 1..k");
            }
            let out = generate_causal(&model, &TokenSequence::new(prompt.clone()), length, &sampler, &mut rng)?;
            let mut snapshot = constraints.initial_snapshot();
            let steps = (prompt.len()..length)
                .enumerate()
                .map(|(t, pos)| {
                    snapshot[pos] = out.ids()[pos];
                    GenerationStep {
                        step: t + 1,
                        position: pos,
                        token: out.ids()[pos],
                        snapshot: snapshot.clone(),
                    }
                })
                .collect();
            (out, GenerationTrace { constraints, steps })
        }
    };

    let vocab = vocab.as_ref();
    if let Some(p) = &args.trace {
        let lines = trace.to_json_lines(|ids| render(vocab, ids))?;
        fs::write(p, lines).with_context(|| format!("writing {}", p.display()))?;
        print!("{}", trace.to_table(|ids| render(vocab, ids)));
    }
    let text = match vocab {
        Some(v) => v.detokenize(output.ids()),
        None => render(None, output.ids()),
    };
    println!("{text}");
    if let Some(p) = &args.out {
        let order: Vec<usize> = trace.steps.iter().map(|s| s.position + 1).collect();
        let anchors: std::collections::BTreeMap<usize, TokenId> =
            trace.constraints.anchors.iter().map(|(&p, &t)| (p + 1, t)).collect();
        write_json(
            p,
            &serde_json::json!({
                "tokens": output.ids(),
                "text": text,
                "order": order,
                "anchors": anchors,
                "sampler": sampler,
                "seed": args.seed,
            }),
        )?;
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let Checkpoint { model, vocab } = load_checkpoint(&args.checkpoint)?;
    let vocab = vocab.context("checkpoint has no vocabulary to tokenize the corpus with")?;
    let corpus = ingest_with_vocab(&args.corpus, &vocab, model.config().max_len, Split::Test)?;
    let mode = match args.mode {
        ModeArg::Sequential => EvalMode::Sequential,
        ModeArg::Random => EvalMode::Random,
    };
    let report = ppl(&model, &corpus.documents, mode, args.seed)?;
    print!("{}", report.to_table());
    if let Some(p) = &args.out {
        write_json(p, &report)?;
    }
    Ok(())
}

/// Returns whether the identity held within tolerance.
fn verify_cmd(args: VerifyArgs) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let model = match &args.checkpoint {
        Some(p) => load_checkpoint(p)?.model,
        None => {
            let mut config = TransformerConfig::tiny(12);
            config.max_len = config.max_len.max(args.n);
            Transformer::with_init_std(config, args.seed, 0.5)?
        }
    };
    let vocab_size = model.config().vocab_size as TokenId;
    let ids = (0..args.n).map(|_| rng.random_range(NUM_SPECIAL as TokenId..vocab_size)).collect();
    let report = verify_equivalence_with_tolerance(&model, &TokenSequence::new(ids), args.tolerance)?;
    println!("n                       {}", report.n);
    println!("masked objective        {:.17e}", report.pmlm_exact);
    println!("mean over orders        {:.17e}", report.aplm_mean);
    println!("(N+1)!                  {}", report.constant_c);
    println!("gap, mean form          {:.3e}", report.gap_mean_form);
    println!("gap, (N+1)! form        {:.3e}", report.gap_c_form);
    println!("max_abs_gap             {:.3e}", report.max_abs_gap);
    for e in &report.duplication_audit {
        println!(
            "duplication K={}: expected {} observed {}..{} over {} groups{}",
            e.k,
            e.expected,
            e.observed_min,
            e.observed_max,
            e.groups,
            if e.matches { "" } else { "  MISMATCH" }
        );
    }
    println!("{}", if report.passed { "PASS" } else { "FAIL" });
    if let Some(p) = &args.out {
        write_json(p, &report)?;
    }
    Ok(report.passed)
}

fn bench_cmd(args: BenchArgs) -> Result<()> {
    let (causal, bidirectional) = match (&args.causal, &args.bidirectional) {
        (Some(c), Some(b)) => (load_checkpoint(c)?.model, load_checkpoint(b)?.model),
        _ => {
            let mut config = TransformerConfig::desk(64);
            config.max_len = config.max_len.max(args.length);
            config.dropout_rate = 0.0;
            (
                Transformer::new(config.clone().with_mode(AttentionMode::Causal), args.seed)?,
                Transformer::new(config, args.seed)?,
            )
        }
    };
    let report = bench_latency(&causal, &bidirectional, args.count, args.length, &SamplerSpec::Greedy, args.seed)?;
    print!("{}", report.to_table());
    if let Some(p) = &args.out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Generate(a) => generate_cmd(a).map(|_| true),
        Command::EvalPpl(a) => eval_cmd(a).map(|_| true),
        Command::VerifyEquivalence(a) => verify_cmd(a),
        Command::BenchLatency(a) => bench_cmd(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
