use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vskip_core::gating::Strategy;
use vskip_core::pipeline::{
    evaluate, evaluate_generated, load_dataset, run_phase1, run_phase2, save_dataset, sweep_csv, synth_corpus,
    write_curve, FilterMode, PipelineConfig, Range, SweepPoint, SweepRow, SynthSpec,
};
use vskip_core::scoring::{score_trace, ScoredRecord};
use vskip_core::toy::{load_checkpoint, save_checkpoint, Checkpoint, ToyConfig, ToyReasonerParams, TrainConfig};
use vskip_core::trace::{load_traces, save_traces, ReasoningTrace};
use vskip_core::{GateConfig, ScoringConfig, VskipError};

#[derive(Parser, Debug)]
#[command(name = "vskip", version, about = "Dual-path token compression for multimodal reasoning traces")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Input trace file (JSONL).
    #[arg(long, global = true)]
    traces: Option<PathBuf>,
    /// Output path; standard output when omitted and the command allows it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Target retention ratio in (0, 1].
    #[arg(long, global = true, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, global = true, default_value = "union")]
    strategy: Strategy,
    #[arg(long, global = true, default_value_t = 0.25)]
    focus_lo: f64,
    #[arg(long, global = true, default_value_t = 0.75)]
    focus_hi: f64,
    /// `exact` or `anls:<theta>`.
    #[arg(long, global = true, default_value = "exact")]
    filter: FilterMode,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Comma-separated positions that are always retained.
    #[arg(long, global = true, value_delimiter = ',')]
    protect: Vec<usize>,
    /// Report zero wall-clock so output files are reproducible.
    #[arg(long, global = true)]
    no_timing: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-anchor trace corpus.
    Synth(SynthArgs),
    /// Write per-token textual and visual scores.
    Score,
    /// Filter, score, gate and compress traces into a distillation dataset.
    Prune,
    /// Train a low-rank adapter on a pruned dataset.
    Distill(DistillArgs),
    /// Evaluate one retention ratio and strategy, or a distilled student.
    Eval(EvalArgs),
    /// Evaluate a grid of retention ratios and strategies.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    n_traces: usize,
    #[arg(long, default_value_t = 20)]
    trace_len: usize,
    #[arg(long, default_value_t = 0.2)]
    anchor_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    key_rate: f64,
    /// Fraction of traces whose predicted answer is wrong.
    #[arg(long, default_value_t = 0.1)]
    error_rate: f64,
    /// Anchor visual mass interval as `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    anchor_mass: Option<Vec<f64>>,
    /// Filler visual mass interval as `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    filler_mass: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct DistillArgs {
    /// Dataset written by `prune`.
    #[arg(long)]
    dataset: PathBuf,
    /// Base model checkpoint; a seeded initialization when omitted.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Where to write the `step,loss` curve.
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, default_value_t = 32.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    dropout: f64,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1200)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
    /// Clip the gradient to this global L2 norm.
    #[arg(long)]
    clip: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Evaluate this checkpoint's generations instead of pruned chains.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.7,0.5,0.3")]
    gammas: Vec<f64>,
    /// Strategies to sweep; all six when omitted.
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<Strategy>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if is_broken_pipe(&err) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for bad input or configuration, 3 for failures while processing.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<VskipError>() {
        Some(e) if e.is_validation() || matches!(e, VskipError::Config(_)) => 2,
        Some(_) => 3,
        None if err.downcast_ref::<UsageError>().is_some() => 2,
        None => 3,
    }
}

fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<io::Error>().is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)
            || matches!(e.downcast_ref::<VskipError>(), Some(VskipError::Io(io)) if io.kind() == io::ErrorKind::BrokenPipe)
    })
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl Global {
    fn scoring(&self) -> anyhow::Result<ScoringConfig> {
        Ok(ScoringConfig::new(self.focus_lo, self.focus_hi)?)
    }

    fn gate(&self) -> anyhow::Result<GateConfig> {
        let mut gate = GateConfig::new(self.gamma, self.strategy)?.with_seed(self.seed);
        gate.protect_positions = self.protect.clone();
        Ok(gate)
    }

    fn pipeline(&self) -> anyhow::Result<PipelineConfig> {
        Ok(PipelineConfig {
            scoring: self.scoring()?,
            gate: self.gate()?,
            distill: TrainConfig { seed: self.seed, ..TrainConfig::default() },
            filter: self.filter,
            toy: ToyConfig { seed: self.seed, ..ToyConfig::default() },
        })
    }

    fn traces_path(&self) -> anyhow::Result<&Path> {
        self.traces.as_deref().ok_or_else(|| usage("--traces is required"))
    }

    fn load(&self) -> anyhow::Result<Vec<ReasoningTrace>> {
        let path = self.traces_path()?;
        load_traces(path).with_context(|| format!("reading {}", path.display()))
    }

    fn out_path(&self) -> anyhow::Result<&Path> {
        self.out.as_deref().ok_or_else(|| usage("--out is required"))
    }

    /// The output file, or standard output.
    fn sink(&self) -> anyhow::Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(BufWriter::new(
                File::create(p).with_context(|| format!("creating {}", p.display()))?,
            )),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth(args) => synth(g, args),
        Command::Score => score(g),
        Command::Prune => prune(g),
        Command::Distill(args) => distill(g, args),
        Command::Eval(args) => eval(g, args),
        Command::Sweep(args) => sweep(g, args),
    }
}

fn interval(values: &Option<Vec<f64>>, default: Range) -> Range {
    match values.as_deref() {
        Some([lo, hi]) => Range::new(*lo, *hi),
        _ => default,
    }
}

fn synth(g: &Global, args: &SynthArgs) -> anyhow::Result<()> {
    let defaults = SynthSpec::default();
    let spec = SynthSpec {
        n_traces: args.n_traces,
        trace_len: args.trace_len,
        anchor_rate: args.anchor_rate,
        key_rate: args.key_rate,
        error_rate: args.error_rate,
        anchor_mass: interval(&args.anchor_mass, defaults.anchor_mass),
        filler_mass: interval(&args.filler_mass, defaults.filler_mass),
        seed: g.seed,
        ..defaults
    };
    let corpus = synth_corpus(&spec)?;
    save_traces(&corpus, g.out_path()?)?;
    eprintln!("wrote {} traces to {}", corpus.len(), g.out_path()?.display());
    Ok(())
}

fn score(g: &Global) -> anyhow::Result<()> {
    let traces = g.load()?;
    let cfg = g.scoring()?;
    let mut out = g.sink()?;
    match g.format {
        Format::Json => {
            for t in &traces {
                let scored = score_trace(t, &cfg)?;
                serde_json::to_writer(&mut out, &ScoredRecord::from_scored(&scored))?;
                out.write_all(b"\n")?;
            }
        }
        Format::Csv => {
            writeln!(out, "trace_id,position,token,s_text,s_vis")?;
            for t in &traces {
                let scored = score_trace(t, &cfg)?;
                for (i, tok) in t.tokens.iter().enumerate() {
                    writeln!(out, "{},{i},{},{},{}", t.trace_id, csv_field(&tok.text), scored.s_text[i], scored.s_vis[i])?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn prune(g: &Global) -> anyhow::Result<()> {
    let traces = g.load()?;
    let dataset = run_phase1(&traces, &g.pipeline()?)?;
    save_dataset(&dataset, g.out_path()?)?;
    eprintln!("kept {} of {} traces", dataset.len(), traces.len());
    Ok(())
}

fn distill(g: &Global, args: &DistillArgs) -> anyhow::Result<()> {
    let dataset = load_dataset(&args.dataset).with_context(|| format!("reading {}", args.dataset.display()))?;
    let base = match &args.base {
        Some(path) => load_checkpoint(path).with_context(|| format!("reading {}", path.display()))?.params,
        None => ToyReasonerParams::init(ToyConfig { seed: g.seed, ..ToyConfig::default() })?,
    };
    let cfg = TrainConfig {
        rank: args.rank,
        alpha: args.alpha,
        dropout: args.dropout,
        lr: args.lr,
        steps: args.steps,
        batch_size: args.batch_size,
        clip_norm: args.clip,
        seed: g.seed,
    };
    let outcome = run_phase2(&dataset, &base, &cfg)?;
    save_checkpoint(&Checkpoint::new(base, Some(outcome.adapter)), g.out_path()?)?;
    if let Some(path) = &args.curve {
        write_curve(&outcome.curve, path)?;
    }
    if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
        eprintln!("trained {} steps: loss {first:.4} -> {last:.4}", outcome.curve.len());
    }
    Ok(())
}

fn write_rows(g: &Global, rows: &[SweepRow]) -> anyhow::Result<()> {
    let mut out = g.sink()?;
    match g.format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, rows)?;
            out.write_all(b"\n")?;
        }
        Format::Csv => out.write_all(sweep_csv(rows).as_bytes())?,
    }
    out.flush()?;
    Ok(())
}

fn eval(g: &Global, args: &EvalArgs) -> anyhow::Result<()> {
    let traces = g.load()?;
    if traces.is_empty() {
        bail!(VskipError::Pipeline("no traces to evaluate".into()));
    }
    let rows = match &args.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
            vec![evaluate_generated(&ckpt.params, ckpt.adapter.as_ref(), &traces, g.gamma, !g.no_timing)?]
        }
        None => {
            let point = SweepPoint { gamma: g.gamma, strategy: g.strategy };
            evaluate(&traces, &g.scoring()?, &[point], g.seed, &g.protect, !g.no_timing)?
        }
    };
    write_rows(g, &rows)
}

fn sweep(g: &Global, args: &SweepArgs) -> anyhow::Result<()> {
    let traces = g.load()?;
    if traces.is_empty() {
        bail!(VskipError::Pipeline("no traces to evaluate".into()));
    }
    let strategies = if args.strategies.is_empty() { Strategy::ALL.to_vec() } else { args.strategies.clone() };
    let points: Vec<SweepPoint> = args
        .gammas
        .iter()
        .flat_map(|&gamma| strategies.iter().map(move |&strategy| SweepPoint { gamma, strategy }))
        .collect();
    let rows = evaluate(&traces, &g.scoring()?, &points, g.seed, &g.protect, !g.no_timing)?;
    write_rows(g, &rows)
}
