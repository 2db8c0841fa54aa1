//! Batch CLI over the library: trace simplification, tokenization, metric
//! evaluation, gradient verification, loss computation, and corpus stats.
//!
//! All subcommands read JSONL (gzip by `.gz` extension), write JSONL, and
//! preserve input order regardless of `--jobs`. Exit codes: 0 success,
//! 1 usage error, 2 record-level data errors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use tracekit::ingest::{merge_to_phrases, open_jsonl, parse_record, segment_by_words};
use tracekit::metrics::{lbm, LbmConfig, WindowMode};
use tracekit::seg::{
    dice_loss, read_gt_masks, read_pred_masks, refinement_loss, total_loss, MaskBatch,
    DEFAULT_ALPHA, DEFAULT_LAMBDA_DICE, DEFAULT_LAMBDA_REF,
};
use tracekit::simplify::simplify_semantic;
use tracekit::tokenize;
use tracekit::trace::{PhraseSpan, TimedTrace, TracePoint};
use tracekit::tvp::{grad_check, TvpConfig};
use tracekit::weights::{
    external_score, heuristic_phrase_spans, heuristic_score, ScorerConfig, ScorerMode,
    DEFAULT_EPS_BASE,
};

#[derive(Parser)]
#[command(name = "tracekit", version, about = "Trajectory processing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScorerArg {
    Heuristic,
    External,
}

#[derive(Subcommand)]
enum Cmd {
    /// Segment, score, and simplify narrative traces.
    Simplify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_EPS_BASE)]
        eps_base: f64,
        #[arg(long, value_enum, default_value = "heuristic")]
        scorer: ScorerArg,
        /// Scorer endpoint; falls back to env TRACEKIT_SCORER_URL.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Abort on the first record error instead of continuing.
        #[arg(long)]
        strict: bool,
    },
    /// Quantize traces to the token grammar; idempotent on its own output.
    Tokenize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        strict: bool,
    },
    /// Score predicted traces against ground truth with the trace metric.
    EvalLbm {
        #[arg(long)]
        input: PathBuf,
        /// Ground-truth file in the same format.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0)]
        k: usize,
        /// `word` or `fixed:L`.
        #[arg(long, default_value = "fixed:5")]
        window: String,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        strict: bool,
    },
    /// Verify analytic cross-attention gradients against finite differences.
    CheckTvp {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compute segmentation losses from binary mask files.
    Loss {
        /// Predicted masks (f32 grid format).
        #[arg(long)]
        input: PathBuf,
        /// Ground-truth masks (byte grid format).
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        /// Text loss component to fold into the total.
        #[arg(long, default_value_t = 0.0)]
        l_txt: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Summarize a narrative corpus.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        strict: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not usage errors
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(had_data_errors) => {
            if had_data_errors {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(RunError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(RunError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

enum RunError {
    Usage(String),
    Data(String),
}

fn writer(output: &Option<PathBuf>) -> Result<Box<dyn Write>, RunError> {
    match output {
        Some(path) => Ok(Box::new(BufWriter::new(File::create(path).map_err(
            |e| RunError::Usage(format!("cannot create {}: {e}", path.display())),
        )?))),
        None => Ok(Box::new(std::io::stdout().lock())),
    }
}

fn read_lines(path: &PathBuf) -> Result<Vec<String>, RunError> {
    let reader = open_jsonl(path)
        .map_err(|e| RunError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = Vec::new();
    for line in std::io::BufRead::lines(reader) {
        let line = line.map_err(|e| RunError::Data(format!("read error: {e}")))?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    Ok(lines)
}

/// Map each input line to an output line in order, optionally in parallel.
/// Failed records become `{"line": n, "error": ...}` lines. Returns the
/// rendered lines and whether any record failed.
fn process_lines<F>(
    lines: &[String],
    jobs: usize,
    strict: bool,
    f: F,
) -> Result<(Vec<String>, bool), RunError>
where
    F: Fn(&str) -> Result<String, String> + Sync,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| RunError::Usage(format!("cannot build worker pool: {e}")))?;
    let results: Vec<Result<String, String>> =
        pool.install(|| lines.par_iter().map(|line| f(line)).collect());

    let mut out = Vec::with_capacity(results.len());
    let mut had_errors = false;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(line) => out.push(line),
            Err(msg) => {
                had_errors = true;
                let line_no = i + 1;
                if strict {
                    return Err(RunError::Data(format!("line {line_no}: {msg}")));
                }
                out.push(
                    serde_json::json!({ "line": line_no, "error": msg }).to_string(),
                );
            }
        }
    }
    Ok((out, had_errors))
}

#[derive(Serialize, Deserialize)]
struct SimplifiedLine {
    image_id: String,
    image_width: f64,
    image_height: f64,
    /// `[x, y, t]` triples.
    points: Vec<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<tracekit::simplify::SimplifyReport>,
}

#[derive(Serialize, Deserialize)]
struct TokenLine {
    image_id: String,
    traj: String,
}

fn scorer_config(
    arg: ScorerArg,
    endpoint: Option<String>,
    eps_base: f64,
) -> Result<ScorerConfig, RunError> {
    let mode = match arg {
        ScorerArg::Heuristic => ScorerMode::Heuristic,
        ScorerArg::External => ScorerMode::External,
    };
    let endpoint_url = endpoint
        .or_else(|| std::env::var("TRACEKIT_SCORER_URL").ok())
        .unwrap_or_default();
    if mode == ScorerMode::External && endpoint_url.is_empty() {
        return Err(RunError::Usage(
            "external scorer needs --endpoint or TRACEKIT_SCORER_URL".into(),
        ));
    }
    Ok(ScorerConfig {
        mode,
        endpoint_url,
        eps_base,
        ..ScorerConfig::default()
    })
}

fn simplify_line(line: &str, scorer: &ScorerConfig) -> Result<String, String> {
    let record = parse_record(line).map_err(|e| e.to_string())?;
    let segments = segment_by_words(&record.trace, &record.timed_words);
    let words: Vec<String> = record.timed_words.iter().map(|w| w.text.clone()).collect();
    let span_ranges = heuristic_phrase_spans(&words);
    let phrases: Vec<String> = span_ranges
        .iter()
        .map(|&(s, e)| words[s..e].join(" "))
        .collect();
    let scores: Vec<u8> = match scorer.mode {
        ScorerMode::Heuristic => phrases.iter().map(|p| heuristic_score(p)).collect(),
        ScorerMode::External => {
            external_score(&phrases, &record.caption, scorer)
                .map_err(|e| e.to_string())?
                .0
        }
    };
    let spans: Vec<PhraseSpan> = span_ranges
        .iter()
        .zip(&scores)
        .map(|(&(s, e), &score)| PhraseSpan::new(s, e, score))
        .collect();
    let aligned =
        merge_to_phrases(&segments, &spans, scorer.eps_base).map_err(|e| e.to_string())?;
    let (trace, report) =
        simplify_semantic(&aligned, record.trace.image_width, record.trace.image_height);
    let out = SimplifiedLine {
        image_id: record.image_id,
        image_width: trace.image_width,
        image_height: trace.image_height,
        points: trace.points.iter().map(|p| [p.x, p.y, p.t]).collect(),
        report: Some(report),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

fn tokenize_line(line: &str) -> Result<String, String> {
    // own-output form first, so tokenize is idempotent byte-for-byte
    if let Ok(tok) = serde_json::from_str::<TokenLine>(line) {
        let qt = tokenize::parse(&tok.traj).map_err(|e| e.to_string())?;
        let traj = tokenize::serialize(&qt).map_err(|e| e.to_string())?;
        return serde_json::to_string(&TokenLine {
            image_id: tok.image_id,
            traj,
        })
        .map_err(|e| e.to_string());
    }
    if let Ok(s) = serde_json::from_str::<SimplifiedLine>(line) {
        let trace = simplified_to_trace(&s);
        let qt = tokenize::quantize(&trace).map_err(|e| e.to_string())?;
        let traj = tokenize::serialize(&qt).map_err(|e| e.to_string())?;
        return serde_json::to_string(&TokenLine {
            image_id: s.image_id,
            traj,
        })
        .map_err(|e| e.to_string());
    }
    let record = parse_record(line).map_err(|e| e.to_string())?;
    let qt = tokenize::quantize(&record.trace).map_err(|e| e.to_string())?;
    let traj = tokenize::serialize(&qt).map_err(|e| e.to_string())?;
    serde_json::to_string(&TokenLine {
        image_id: record.image_id,
        traj,
    })
    .map_err(|e| e.to_string())
}

fn simplified_to_trace(s: &SimplifiedLine) -> TimedTrace {
    TimedTrace::new(
        s.points
            .iter()
            .map(|&[x, y, t]| TracePoint::new(x, y, t))
            .collect(),
        s.image_width,
        s.image_height,
    )
}

/// A trace plus optional word boundaries, from any accepted line format.
fn load_trace(line: &str) -> Result<(String, TimedTrace, Option<Vec<usize>>), String> {
    if let Ok(s) = serde_json::from_str::<SimplifiedLine>(line) {
        return Ok((s.image_id.clone(), simplified_to_trace(&s), None));
    }
    let record = parse_record(line).map_err(|e| e.to_string())?;
    let segments = segment_by_words(&record.trace, &record.timed_words);
    let mut starts = vec![0usize];
    let mut acc = 0usize;
    for seg in &segments {
        if !seg.points.is_empty() {
            if acc > 0 && *starts.last().unwrap() != acc {
                starts.push(acc);
            }
            acc += seg.points.len();
        }
    }
    Ok((record.image_id, record.trace, Some(starts)))
}

fn parse_window(spec: &str) -> Result<Option<usize>, RunError> {
    if spec == "word" {
        return Ok(None);
    }
    if let Some(rest) = spec.strip_prefix("fixed:") {
        let len: usize = rest
            .parse()
            .map_err(|_| RunError::Usage(format!("bad window length in {spec:?}")))?;
        if len == 0 {
            return Err(RunError::Usage("window length must be positive".into()));
        }
        return Ok(Some(len));
    }
    Err(RunError::Usage(format!(
        "--window must be `word` or `fixed:L`, got {spec:?}"
    )))
}

fn eval_lbm_pair(
    pred_line: &str,
    gt_line: &str,
    k: usize,
    fixed_len: Option<usize>,
) -> Result<String, String> {
    let (pred_id, pred, pred_words) = load_trace(pred_line)?;
    let (_, gt, gt_words) = load_trace(gt_line)?;
    let window = match fixed_len {
        Some(len) => WindowMode::Fixed(len),
        None => {
            let (p, g) = (pred_words, gt_words);
            match (p, g) {
                (Some(pred), Some(gt)) => WindowMode::Boundaries { pred, gt },
                _ => return Err("word windows need narrative records with timed words".into()),
            }
        }
    };
    let config = LbmConfig { k, window };
    let score = lbm(&pred, &gt, &config).map_err(|e| e.to_string())?;
    serde_json::to_string(&serde_json::json!({
        "image_id": pred_id,
        "fingerprint": config.fingerprint(),
        "score": score.score,
        "n_pairs": score.n_pairs,
        "n_penalized": score.n_penalized,
    }))
    .map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<bool, RunError> {
    match cli.command {
        Cmd::Simplify {
            input,
            output,
            eps_base,
            scorer,
            endpoint,
            jobs,
            strict,
        } => {
            if eps_base <= 0.0 {
                return Err(RunError::Usage("--eps-base must be positive".into()));
            }
            let config = scorer_config(scorer, endpoint, eps_base)?;
            let lines = read_lines(&input)?;
            let (out, had_errors) =
                process_lines(&lines, jobs, strict, |line| simplify_line(line, &config))?;
            let mut w = writer(&output)?;
            let mut total_in = 0usize;
            let mut total_out = 0usize;
            let mut ok_records = 0usize;
            for line in &out {
                writeln!(w, "{line}").map_err(|e| RunError::Data(e.to_string()))?;
                if let Ok(s) = serde_json::from_str::<SimplifiedLine>(line) {
                    if let Some(r) = s.report {
                        total_in += r.input_points;
                        total_out += r.output_points;
                        ok_records += 1;
                    }
                }
            }
            let compression = if total_in == 0 {
                0.0
            } else {
                1.0 - total_out as f64 / total_in as f64
            };
            let summary = serde_json::json!({
                "summary": {
                    "records": lines.len(),
                    "ok": ok_records,
                    "errors": lines.len() - ok_records,
                    "input_points": total_in,
                    "output_points": total_out,
                    "compression": compression,
                }
            });
            writeln!(w, "{summary}").map_err(|e| RunError::Data(e.to_string()))?;
            Ok(had_errors)
        }
        Cmd::Tokenize {
            input,
            output,
            jobs,
            strict,
        } => {
            let lines = read_lines(&input)?;
            let (out, had_errors) = process_lines(&lines, jobs, strict, tokenize_line)?;
            let mut w = writer(&output)?;
            for line in &out {
                writeln!(w, "{line}").map_err(|e| RunError::Data(e.to_string()))?;
            }
            Ok(had_errors)
        }
        Cmd::EvalLbm {
            input,
            gt,
            k,
            window,
            output,
            jobs,
            strict,
        } => {
            if k > 1 {
                return Err(RunError::Usage("--k must be 0 or 1".into()));
            }
            let fixed_len = parse_window(&window)?;
            let pred_lines = read_lines(&input)?;
            let gt_lines = read_lines(&gt)?;
            if pred_lines.len() != gt_lines.len() {
                return Err(RunError::Data(format!(
                    "record count mismatch: {} predictions vs {} ground truths",
                    pred_lines.len(),
                    gt_lines.len()
                )));
            }
            let paired: Vec<String> = pred_lines
                .iter()
                .zip(&gt_lines)
                .map(|(p, g)| format!("{p}\u{1e}{g}"))
                .collect();
            let (out, had_errors) = process_lines(&paired, jobs, strict, |pair| {
                let (p, g) = pair.split_once('\u{1e}').expect("paired line");
                eval_lbm_pair(p, g, k, fixed_len)
            })?;
            let mut w = writer(&output)?;
            for line in &out {
                writeln!(w, "{line}").map_err(|e| RunError::Data(e.to_string()))?;
            }
            Ok(had_errors)
        }
        Cmd::CheckTvp { seed, output } => {
            let mut w = writer(&output)?;
            let mut failed = false;
            for (d, h, b, samples) in [(8usize, 1usize, 1usize, None), (64, 4, 2, Some(12))] {
                let config = TvpConfig::new(d, h, b, seed);
                let report = grad_check(config, seed, samples)
                    .map_err(|e| RunError::Data(e.to_string()))?;
                let pass = report.max_rel_err < 1e-4;
                failed |= !pass;
                let line = serde_json::json!({
                    "d_model": d,
                    "n_heads": h,
                    "n_blocks": b,
                    "seed": seed,
                    "checked_coords": report.checked_coords,
                    "max_rel_err": report.max_rel_err,
                    "pass": pass,
                });
                writeln!(w, "{line}").map_err(|e| RunError::Data(e.to_string()))?;
            }
            Ok(failed)
        }
        Cmd::Loss {
            input,
            gt,
            alpha,
            l_txt,
            output,
        } => {
            let open = |p: &PathBuf| {
                File::open(p).map_err(|e| RunError::Usage(format!("cannot open {}: {e}", p.display())))
            };
            let pred = read_pred_masks(open(&input)?)
                .map_err(|e| RunError::Data(e.to_string()))?;
            let gtm = read_gt_masks(open(&gt)?).map_err(|e| RunError::Data(e.to_string()))?;
            let batch =
                MaskBatch::new(pred, gtm, alpha).map_err(|e| RunError::Data(e.to_string()))?;
            let k = batch.pred.dim().0;
            let mut dices = Vec::with_capacity(k);
            for m in 0..k {
                let p = batch.pred.index_axis(ndarray::Axis(0), m).to_owned();
                let g = batch.gt.index_axis(ndarray::Axis(0), m).to_owned();
                dices.push(dice_loss(&p, &g).map_err(|e| RunError::Data(e.to_string()))?);
            }
            let l_dice = dices.iter().sum::<f64>() / k as f64;
            let l_ref = refinement_loss(&batch).map_err(|e| RunError::Data(e.to_string()))?;
            let total = total_loss(l_txt, l_ref, l_dice, DEFAULT_LAMBDA_REF, DEFAULT_LAMBDA_DICE)
                .map_err(|e| RunError::Data(e.to_string()))?;
            let mut w = writer(&output)?;
            let line = serde_json::json!({
                "masks": k,
                "dice": dices,
                "l_dice": l_dice,
                "l_ref": l_ref,
                "l_txt": l_txt,
                "lambda_ref": DEFAULT_LAMBDA_REF,
                "lambda_dice": DEFAULT_LAMBDA_DICE,
                "total": total,
            });
            writeln!(w, "{line}").map_err(|e| RunError::Data(e.to_string()))?;
            Ok(false)
        }
        Cmd::Stats {
            input,
            output,
            jobs,
            strict,
        } => {
            let lines = read_lines(&input)?;
            let (out, had_errors) = process_lines(&lines, jobs, strict, |line| {
                let r = parse_record(line).map_err(|e| e.to_string())?;
                Ok(serde_json::json!({
                    "image_id": r.image_id,
                    "words": r.timed_words.len(),
                    "points": r.trace.points.len(),
                    "duration": r.trace.points.last().map(|p| p.t).unwrap_or(0.0)
                        - r.trace.points.first().map(|p| p.t).unwrap_or(0.0),
                    "warnings": r.warnings,
                })
                .to_string())
            })?;
            let mut w = writer(&output)?;
            let mut total_points = 0usize;
            let mut ok = 0usize;
            for line in &out {
                writeln!(w, "{line}").map_err(|e| RunError::Data(e.to_string()))?;
                if let Ok(v) = serde_json::from_str::<serde_json::Value>(line) {
                    if let Some(p) = v.get("points").and_then(|p| p.as_u64()) {
                        total_points += p as usize;
                        ok += 1;
                    }
                }
            }
            let summary = serde_json::json!({
                "summary": {
                    "records": lines.len(),
                    "ok": ok,
                    "errors": lines.len() - ok,
                    "total_points": total_points,
                }
            });
            writeln!(w, "{summary}").map_err(|e| RunError::Data(e.to_string()))?;
            Ok(had_errors)
        }
    }
}
