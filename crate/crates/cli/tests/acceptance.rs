//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! `PMLM_ACCEPTANCE=1,7` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::Instant;

use pmlm::autodiff::Tape;
use pmlm::checkpoint;
use pmlm::config::RunConfig;
use pmlm::corpus::{ingest_text, ingest_with_vocab, Split, TokenizerKind, Vocabulary};
use pmlm::equivalence::{beta_identity, duplication_audit, verify_equivalence};
use pmlm::evaluation::{bench_latency, ppl, EvalMode};
use pmlm::generation::{
    generate, generate_left_to_right, replay_greedy_trace, GenerationConstraints, GenerationOrder, SamplerSpec,
};
use pmlm::masking::{enumerate_masks, mask_probability, sample_mask, MaskingPrior};
use pmlm::objectives::{pmlm_exact_loss, pmlm_training_step};
use pmlm::train::train;
use pmlm::{
    AttentionMode, Error, PositionalKind, TokenId, TokenSequence, Transformer, TransformerConfig, MASK_ID, PAD_ID,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_sequence(n: usize, vocab: usize, rng: &mut impl Rng) -> TokenSequence {
    TokenSequence::new((0..n).map(|_| rng.random_range(3..vocab as TokenId)).collect())
}

fn equivalence() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let model = Transformer::with_init_std(TransformerConfig::tiny(12), seed, 0.5).map_err(|e| e.to_string())?;
        for n in 1..=5 {
            let x = random_sequence(n, 12, &mut rng);
            let r = verify_equivalence(&model, &x).map_err(|e| e.to_string())?;
            ensure(r.max_abs_gap < 1e-9, || format!("model {seed} N={n}: gap {:e}", r.max_abs_gap))?;
            worst = worst.max(r.max_abs_gap);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1} s"))?;
    Ok(format!("20 models x N=1..5, max_abs_gap {worst:.2e} < 1e-9, {secs:.2} s"))
}

fn duplication() -> Result<String, String> {
    let mut checked = 0;
    for n in 1..=7 {
        for e in duplication_audit(n).map_err(|e| e.to_string())? {
            ensure(e.matches, || {
                format!("N={n} K={}: expected {} saw {}..{}", e.k, e.expected, e.observed_min, e.observed_max)
            })?;
            checked += 1;
        }
    }
    let beta = beta_identity(20);
    ensure(beta.iter().all(|e| e.holds), || "Beta identity fails".into())?;
    Ok(format!("{checked} (N,K) counts exact for N<=7; Beta identity exact for {} (N,K) up to N=20", beta.len()))
}

/// Upper 0.001 quantile of chi-square with 10 degrees of freedom.
const CHI2_10_999: f64 = 29.588;

fn normalization() -> Result<String, String> {
    let priors = [
        MaskingPrior::Uniform,
        MaskingPrior::point_mass(0.15).unwrap(),
        MaskingPrior::truncated_uniform(0.2, 0.8).unwrap(),
    ];
    let mut worst: f64 = 0.0;
    for prior in &priors {
        for n in 0..=12 {
            let masks = enumerate_masks(n).map_err(|e| e.to_string())?;
            let total: f64 = masks.iter().map(|m| mask_probability(m, prior).alpha()).sum();
            ensure((total - 1.0).abs() < 1e-12, || format!("{prior:?} N={n}: sum {total}"))?;
            worst = worst.max((total - 1.0).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0usize; 11];
    for _ in 0..100_000 {
        let r = MaskingPrior::Uniform.sample_ratio(&mut rng);
        counts[sample_mask(r, &mut rng, &[false; 10]).k()] += 1;
    }
    let expected = 100_000.0 / 11.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    ensure(chi2 < CHI2_10_999, || format!("chi-square {chi2:.2} >= {CHI2_10_999}"))?;
    Ok(format!("max |sum - 1| {worst:.1e} over 3 priors, N<=12; chi-square {chi2:.2} < {CHI2_10_999} (N=10, 1e5 draws)"))
}

/// Worst relative error of every parameter gradient of a padded two-sequence
/// masked loss against central differences.
fn model_gradcheck(mode: AttentionMode, kind: PositionalKind) -> Result<f64, String> {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-5;
    let mut cfg = TransformerConfig::tiny(12).with_mode(mode).with_positional(kind);
    cfg.max_len = 6;
    cfg.relative_window = 2;
    let model = Transformer::with_init_std(cfg, 7, 0.3).map_err(|e| e.to_string())?;
    let batch: [&[TokenId]; 2] = [&[3, MASK_ID, 7, 9, MASK_ID, 4], &[MASK_ID, 5, 8, 11, PAD_ID, PAD_ID]];
    let targets = [Some(5), Some(6), None, Some(3), Some(10), None, Some(3), None, Some(4), None, None, None];
    let weights = [0.3, 0.2, 0.0, 0.1, 0.4, 0.0, 0.5, 0.0, 0.25, 0.0, 0.0, 0.0];
    let loss_of = |m: &Transformer| {
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape);
        let logits = m.forward_graph(&mut tape, &bound, &batch, None).unwrap();
        let loss = tape.nll(logits, &targets, &weights).unwrap();
        (tape, bound, loss)
    };
    let (mut tape, bound, loss) = loss_of(&model);
    tape.backward(loss).map_err(|e| e.to_string())?;
    let mut with_grads = model.clone();
    with_grads.params_mut().zero_grad();
    with_grads.params_mut().absorb_grads(&tape, &bound).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (name, p) in with_grads.params().iter() {
        let analytic = p.grad().ok_or("missing gradient")?;
        for (j, &a) in analytic.iter().enumerate() {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().get_mut(name).unwrap().data_mut()[j] += delta;
                let (tape, _, loss) = loss_of(&m);
                tape.value(loss).item()
            };
            let numeric = (shifted(H) - shifted(-H)) / (2.0 * H);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR));
        }
    }
    Ok(worst)
}

fn gradients() -> Result<String, String> {
    let mut parts = Vec::new();
    for mode in [AttentionMode::Bidirectional, AttentionMode::Causal] {
        for kind in [PositionalKind::Absolute, PositionalKind::Relative] {
            let worst = model_gradcheck(mode, kind)?;
            ensure(worst < 1e-4, || format!("{mode}/{kind:?}: relative error {worst:.2e}"))?;
            parts.push(format!("{mode}/{kind:?} {worst:.1e}"));
        }
    }
    Ok(format!("worst relative error: {}", parts.join(", ")))
}

fn monte_carlo() -> Result<String, String> {
    let model = Transformer::with_init_std(TransformerConfig::tiny(12), 77, 0.5).map_err(|e| e.to_string())?;
    let x = TokenSequence::new(vec![4, 9, 6, 10]);
    let exact = pmlm_exact_loss(&model, &x, &MaskingPrior::Uniform).map_err(|e| e.to_string())?.value;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<f64> = (0..10_000)
        .map(|_| pmlm_training_step(&model, &x, &MaskingPrior::Uniform, &mut rng).map(|l| l.value))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
    let se = (var / samples.len() as f64).sqrt();
    let z = (mean - exact) / se;
    ensure(z.abs() < 3.0, || format!("mean {mean:.6} exact {exact:.6}, {z:.2} SE"))?;
    Ok(format!("mean {mean:.5} vs exact {exact:.5}, {z:+.2} SE (1e4 samples, N=4)"))
}

/// Deterministic text built from a small grammar and running counters, so
/// both local spelling and long-range structure are learnable.
fn synthetic_corpus(bytes: usize, seed: u64) -> String {
    const SUBJECTS: [&str; 6] = ["the cat", "a dog", "my aunt", "the old man", "two birds", "the robot"];
    const VERBS: [&str; 6] = ["sees", "likes", "paints", "follows", "counts", "finds"];
    const OBJECTS: [&str; 5] = ["the red ball", "a green box", "three apples", "the blue door", "an empty cup"];
    const TAILS: [&str; 4] = [" today", " again", " at noon", " near the river"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 256);
    while out.len() < bytes {
        let mut line = String::new();
        let target = rng.random_range(80..200);
        while line.len() < target {
            if rng.random_bool(0.25) {
                let n = rng.random_range(10..50);
                line.push_str(&format!("item {n} costs {} coins; ", 2 * n));
            } else {
                line.push_str(&format!(
                    "{} {} {}{}. ",
                    SUBJECTS[rng.random_range(0..SUBJECTS.len())],
                    VERBS[rng.random_range(0..VERBS.len())],
                    OBJECTS[rng.random_range(0..OBJECTS.len())],
                    TAILS[rng.random_range(0..TAILS.len())]
                ));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn desk_training() -> Result<String, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let train_path = dir.path().join("train.txt");
    let test_path = dir.path().join("test.txt");
    std::fs::write(&train_path, synthetic_corpus(100_000, 11)).map_err(|e| e.to_string())?;
    std::fs::write(&test_path, synthetic_corpus(4_000, 12)).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for preset in ["upmlm", "bert-like", "gpt-like"] {
        let mut config = RunConfig::preset(preset).map_err(|e| e.to_string())?;
        config.corpus.train = train_path.clone();
        config.corpus.test = Some(test_path.clone());
        config.checkpoint = dir.path().join(format!("{preset}.ckpt"));
        config.loss_log = Some(dir.path().join(format!("{preset}.loss.jsonl")));
        let summary = train(&config, |_| {}).map_err(|e| format!("{preset}: {e}"))?;
        let test = ingest_with_vocab(&test_path, &summary.vocab, config.model.max_len, Split::Test)
            .map_err(|e| e.to_string())?;
        // the same initialization train() starts from
        let mut untrained_config = config.model.clone();
        untrained_config.vocab_size = summary.vocab.len();
        let untrained = Transformer::new(untrained_config, config.training.seed).map_err(|e| e.to_string())?;
        let seed = config.training.seed;
        let before = ppl(&untrained, &test.documents, EvalMode::Sequential, seed).map_err(|e| e.to_string())?;
        let after = ppl(&summary.model, &test.documents, EvalMode::Sequential, seed).map_err(|e| e.to_string())?;
        let ratio = after.ppl / before.ppl;
        parts.push(format!("{preset} {:.2} -> {:.2} ({:.0}%)", before.ppl, after.ppl, 100.0 * ratio));
        if ratio >= 0.6 {
            failures.push(format!("{preset} reached {:.0}% of untrained PPL", 100.0 * ratio));
        }
        if preset == "upmlm" {
            let random = ppl(&summary.model, &test.documents, EvalMode::Random, seed).map_err(|e| e.to_string())?;
            let gap = random.ppl / after.ppl - 1.0;
            parts.push(format!("upmlm random {:.2} ({:+.1}% vs sequential)", random.ppl, 100.0 * gap));
            if gap > 0.35 {
                failures.push(format!("random PPL exceeds sequential by {:.1}%", 100.0 * gap));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 1800.0 {
        failures.push(format!("took {secs:.0} s"));
    }
    let detail = format!("{}; {secs:.0} s", parts.join("; "));
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}: {detail}", failures.join(", ")))
    }
}

fn generation() -> Result<String, String> {
    let mut cfg = TransformerConfig::tiny(12);
    cfg.max_len = 32;
    let model = Transformer::with_init_std(cfg, 5, 0.5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut anchors_checked = 0;
    for run in 0..1000 {
        let n = rng.random_range(1..=32);
        let density = rng.random_range(0.0..0.5);
        let mut anchors = BTreeMap::new();
        for p in 0..n {
            if rng.random_bool(density) {
                anchors.insert(p, rng.random_range(3..12 as TokenId));
            }
        }
        let constraints = GenerationConstraints::with_anchors(n, anchors.clone());
        let order = GenerationOrder::random(&constraints, &mut rng);
        let (out, trace) =
            generate(&model, &constraints, &order, &SamplerSpec::Greedy, &mut rng).map_err(|e| e.to_string())?;
        ensure(!out.ids().contains(&MASK_ID), || format!("run {run}: residual mask"))?;
        ensure(anchors.iter().all(|(&p, &t)| out.ids()[p] == t), || format!("run {run}: anchor lost"))?;
        let replay = replay_greedy_trace(&model, &trace).map_err(|e| e.to_string())?;
        ensure(replay.is_none(), || format!("run {run}: replay diverges at step {replay:?}"))?;
        anchors_checked += anchors.len();
    }
    for run in 0..100 {
        let n = rng.random_range(1..=32);
        let prompt = random_sequence(rng.random_range(0..n), 12, &mut rng);
        let ltr = generate_left_to_right(&model, &prompt, n, &SamplerSpec::Greedy, &mut rng).map_err(|e| e.to_string())?;
        let constraints = GenerationConstraints::with_anchors(n, prompt.ids().iter().copied().enumerate().collect());
        let identity = GenerationOrder::explicit(constraints.free_positions());
        let (out, _) =
            generate(&model, &constraints, &identity, &SamplerSpec::Greedy, &mut rng).map_err(|e| e.to_string())?;
        ensure(out == ltr, || format!("identity order run {run} differs from left-to-right"))?;
    }
    Ok(format!(
        "1000 greedy runs (N<=32, {anchors_checked} anchors): no mask left, anchors kept, replay exact; 100 identity-order runs equal left-to-right"
    ))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pmlm"))
}

fn run(cmd: &mut Command) -> Result<Output, String> {
    cmd.output().map_err(|e| format!("spawning pmlm: {e}"))
}

/// A fresh model and vocabulary saved as a checkpoint, with a matching corpus.
fn fresh_checkpoint(dir: &Path, mode: AttentionMode) -> Result<(PathBuf, PathBuf), String> {
    let text = synthetic_corpus(600, 3);
    let vocab = Vocabulary::build(TokenizerKind::Char, text.lines());
    let mut cfg = TransformerConfig::tiny(vocab.len()).with_mode(mode);
    cfg.max_len = 16;
    let model = Transformer::new(cfg, 4).map_err(|e| e.to_string())?;
    let ckpt = dir.join(format!("{mode}.ckpt"));
    let corpus = dir.join("corpus.txt");
    checkpoint::save(&ckpt, &model, Some(&vocab)).map_err(|e| e.to_string())?;
    std::fs::write(&corpus, text).map_err(|e| e.to_string())?;
    Ok((ckpt, corpus))
}

fn random_mode_refusal() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ckpt, corpus) = fresh_checkpoint(dir.path(), AttentionMode::Causal)?;
    let loaded = checkpoint::load(&ckpt).map_err(|e| e.to_string())?;
    let docs = ingest_text(&std::fs::read_to_string(&corpus).unwrap(), loaded.vocab.clone().unwrap(), 16, Split::Test)
        .map_err(|e| e.to_string())?;
    let lib = ppl(&loaded.model, &docs.documents, EvalMode::Random, 0);
    ensure(matches!(lib, Err(Error::UnsupportedMode(_))), || format!("library returned {lib:?}"))?;
    let out = run(bin().args(["eval-ppl", "--mode", "random", "--checkpoint"]).arg(&ckpt).arg("--corpus").arg(&corpus))?;
    let stderr = String::from_utf8_lossy(&out.stderr);
    ensure(!out.status.success(), || "eval-ppl --mode random succeeded on a causal checkpoint".into())?;
    ensure(stderr.contains("random"), || format!("message does not name the mode: {stderr}"))?;
    let sequential =
        run(bin().args(["eval-ppl", "--mode", "sequential", "--checkpoint"]).arg(&ckpt).arg("--corpus").arg(&corpus))?;
    ensure(sequential.status.success(), || "sequential mode failed on the same checkpoint".into())?;
    Ok(format!("exit {}: {}", out.status.code().unwrap_or(-1), stderr.trim()))
}

fn latency() -> Result<String, String> {
    let mut cfg = TransformerConfig::desk(64);
    cfg.dropout_rate = 0.0;
    let causal = Transformer::new(cfg.clone().with_mode(AttentionMode::Causal), 0).map_err(|e| e.to_string())?;
    let bidirectional = Transformer::new(cfg, 0).map_err(|e| e.to_string())?;
    let report = bench_latency(&causal, &bidirectional, 4, 32, &SamplerSpec::Greedy, 0).map_err(|e| e.to_string())?;
    let table = report.to_table();
    let lines: Vec<&str> = table.lines().collect();
    ensure(lines.get(1).is_some_and(|l| l.starts_with("Model") && l.ends_with("Latency (s)")), || {
        format!("missing two-column header:\n{table}")
    })?;
    for (i, r) in [&report.causal, &report.bidirectional].into_iter().enumerate() {
        let row = lines.get(2 + i).copied().unwrap_or("");
        ensure(row.starts_with(&r.model_kind) && row.split_whitespace().last().and_then(|v| v.parse::<f64>().ok()).is_some(), || {
            format!("row {i} malformed: {row}")
        })?;
    }
    let ratio = report.bidirectional.wall_seconds / report.causal.wall_seconds;
    ensure(ratio > 1.1, || format!("bidirectional/causal ratio {ratio:.2}"))?;
    Ok(format!(
        "length 32 x 4: causal {:.4} s, bidirectional {:.4} s, ratio {ratio:.2}x",
        report.causal.wall_seconds, report.bidirectional.wall_seconds
    ))
}

/// Runs the command twice and returns the outputs of the first run if
/// stdout, exit status and every listed file agree byte for byte.
fn twice(label: &str, args: &[&str], files: &[&Path]) -> Result<Output, String> {
    let mut runs = Vec::new();
    for _ in 0..2 {
        let out = run(bin().args(args))?;
        ensure(out.status.success(), || format!("{label} failed: {}", String::from_utf8_lossy(&out.stderr)))?;
        let contents: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap_or_default()).collect();
        runs.push((out, contents));
    }
    let (second, second_files) = runs.pop().unwrap();
    let (first, first_files) = runs.pop().unwrap();
    ensure(first.stdout == second.stdout, || format!("{label}: stdout differs"))?;
    ensure(first_files == second_files, || format!("{label}: output files differ"))?;
    ensure(first_files.iter().all(|f| !f.is_empty()), || format!("{label}: an output file is missing"))?;
    Ok(first)
}

fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let (fresh, _) = fresh_checkpoint(d, AttentionMode::Bidirectional)?;
    let bytes = std::fs::read(&fresh).map_err(|e| e.to_string())?;
    let loaded = checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let again = checkpoint::to_bytes(&loaded.model, loaded.vocab.as_ref()).map_err(|e| e.to_string())?;
    ensure(bytes == again, || "checkpoint round trip changed bytes".into())?;

    let train_txt = d.join("train.txt");
    let eval_txt = d.join("eval.txt");
    std::fs::write(&train_txt, synthetic_corpus(3_000, 5)).map_err(|e| e.to_string())?;
    std::fs::write(&eval_txt, synthetic_corpus(400, 6)).map_err(|e| e.to_string())?;
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let (ckpt, log) = (d.join("u.ckpt"), d.join("u.loss.jsonl"));
    twice(
        "train",
        &["train", "--preset", "upmlm", "--steps", "20", "--train", &s(&train_txt), "--test", &s(&eval_txt),
          "--checkpoint", &s(&ckpt), "--loss-log", &s(&log)],
        &[&ckpt, &log],
    )?;
    let (trace, gen_out) = (d.join("trace.jsonl"), d.join("gen.json"));
    let anchors = d.join("anchors.txt");
    std::fs::write(&anchors, "1:t\n5:e\n").map_err(|e| e.to_string())?;
    twice(
        "generate",
        &["generate", "--checkpoint", &s(&ckpt), "--length", "8", "--order", "random", "--seed", "1",
          "--anchors", &s(&anchors), "--trace", &s(&trace), "--out", &s(&gen_out)],
        &[&trace, &gen_out],
    )?;
    let steps = std::fs::read_to_string(&trace).map_err(|e| e.to_string())?.lines().count();
    ensure(steps == 6, || format!("trace has {steps} steps, expected 6"))?;
    let eval_out = d.join("eval.json");
    twice(
        "eval-ppl",
        &["eval-ppl", "--checkpoint", &s(&ckpt), "--corpus", &s(&eval_txt), "--mode", "random", "--seed", "3",
          "--out", &s(&eval_out)],
        &[&eval_out],
    )?;
    let verify_out = d.join("verify.json");
    twice("verify-equivalence", &["verify-equivalence", "--n", "4", "--seed", "7", "--out", &s(&verify_out)], &[&verify_out])?;
    Ok(format!(
        "checkpoint round trip byte-identical ({} bytes); train, generate, eval-ppl, verify-equivalence repeat bit-identically",
        bytes.len()
    ))
}

const CRITERIA: [(u32, &str, Check); 10] = [
    (1, "equivalence identity", equivalence),
    (2, "duplication factor and Beta identity", duplication),
    (3, "mask prior normalization", normalization),
    (4, "gradient correctness", gradients),
    (5, "Monte-Carlo estimator", monte_carlo),
    (6, "desk-scale training", desk_training),
    (7, "generation invariants", generation),
    (8, "random-mode refusal on causal models", random_mode_refusal),
    (9, "latency benchmark", latency),
    (10, "checkpoint and determinism", determinism),
];

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("PMLM_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name} [{secs:.1} s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name} [{secs:.1} s]: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
