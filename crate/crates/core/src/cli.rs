//! `depthprune` command line. Tables go to stdout as TSV; every failure is a
//! single `error\t<Class>\t<message>` line on stderr with exit status 1.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::alphasearch::{search_alpha_for_model, SearchConfig};
use crate::boundary::BoundarySet;
use crate::error::{Error, Result};
use crate::ingest;
use crate::metrics::{all_layer_metrics, MetricKind};
use crate::scoring::{build_plan_excluding, plan_from_metrics, PruningPlan};
use crate::toymodel::{bench_sweep, train_micro, BenchConfig, CalibrationSet, ToyConfig, ToyModel};

#[derive(Debug, Parser)]
#[command(name = "depthprune", version, about = "Score, plan and apply transformer depth pruning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a seeded toy-model checkpoint.
    Init {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a checkpoint with plain gradient descent on the calibration text.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        calib: CalibArgs,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the calibration set and write all layer boundaries as a dump.
    Capture {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        calib: CalibArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the per-layer score table.
    Score {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, default_value = "mssd")]
        metric: MetricKind,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a pruning plan at a fixed alpha (or `--alpha search`).
    Plan {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        select: SelectArgs,
        #[arg(long, default_value = "0.5")]
        alpha: AlphaArg,
        #[command(flatten)]
        search: SearchArgs,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ternary-search alpha on perplexity; writes the plan and the trace log.
    SearchAlpha {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        calib: CalibArgs,
        #[command(flatten)]
        select: SelectArgs,
        #[command(flatten)]
        search: SearchArgs,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove the planned layers and save the shallower checkpoint.
    Prune {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print perplexity on the calibration set, optionally under a plan.
    Ppl {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        calib: CalibArgs,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Greedy-generation throughput, dense versus each plan.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        plan: Vec<PathBuf>,
        #[arg(long, default_value_t = 256)]
        gen_tokens: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 4)]
        prompt_len: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        /// Seeds the random prompts.
        #[arg(long, default_value_t = 0)]
        prompt_seed: u64,
    },
}

/// Either a checkpoint directory or a freshly initialized toy model.
#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    /// Checkpoint directory; overrides the toy-model flags.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args, Clone)]
pub struct CalibArgs {
    /// Byte-level text file, or whitespace-separated token ids if it ends in `.ids`.
    /// Without it a synthetic corpus seeded by --calib-seed is used.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long, default_value_t = 256)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub calib_seed: u64,
}

#[derive(Debug, Args, Clone)]
pub struct SourceArgs {
    /// Hidden-state dump directory; when absent boundaries come from the model.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub calib: CalibArgs,
}

#[derive(Debug, Args, Clone)]
#[group(required = true, multiple = false, id = "count")]
pub struct PruneCount {
    /// Number of layers to remove.
    #[arg(long)]
    pub k: Option<usize>,
    /// Fraction of layers to remove, in (0, 1]; K = floor(ratio * L).
    #[arg(long)]
    pub ratio: Option<f64>,
}

#[derive(Debug, Args, Clone)]
pub struct SelectArgs {
    #[command(flatten)]
    pub count: PruneCount,
    #[arg(long, default_value = "mssd")]
    pub metric: MetricKind,
    /// Layers never pruned, e.g. `0-1,11`.
    #[arg(long, default_value = "")]
    pub exclude: String,
}

#[derive(Debug, Args, Clone)]
pub struct SearchArgs {
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 20)]
    pub max_iters: usize,
    /// Calibration sequences used for perplexity during the search (a prefix
    /// of the scoring set).
    #[arg(long, default_value_t = 8)]
    pub search_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaArg {
    Fixed(f64),
    Search,
}

impl std::str::FromStr for AlphaArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("search") {
            return Ok(AlphaArg::Search);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::Value(format!("alpha must be a number or \"search\", got {s:?}")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Value(format!("alpha={v} outside [0, 1]")));
        }
        Ok(AlphaArg::Fixed(v))
    }
}

/// `K = floor(ratio * L)`; a 1e-9 slack absorbs binary rounding of the ratio.
pub fn ratio_to_k(ratio: f64, layers: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("ratio must lie in (0, 1], got {ratio}")));
    }
    Ok((ratio * layers as f64 + 1e-9).floor() as usize)
}

/// Parses `a-b,c,...` into a sorted list of layer indices.
pub fn parse_exclude(spec: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Error::Config(format!("bad exclude range {part:?}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) =
                    (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

impl PruneCount {
    fn resolve(&self, layers: usize) -> Result<usize> {
        match (self.k, self.ratio) {
            (Some(k), None) => Ok(k),
            (None, Some(r)) => ratio_to_k(r, layers),
            _ => Err(Error::Config("give exactly one of --k and --ratio".into())),
        }
    }
}

fn load_model(args: &ModelArgs) -> Result<ToyModel> {
    match &args.model {
        Some(dir) => ingest::load_checkpoint(dir),
        None => ToyModel::init(
            ToyConfig::new(args.vocab, args.hidden, args.layers, args.heads),
            args.seed,
        ),
    }
}

fn load_calib(args: &CalibArgs) -> Result<CalibrationSet> {
    match &args.calib {
        None => CalibrationSet::synthetic(args.samples, args.seq_len, args.calib_seed),
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            if path.extension().is_some_and(|e| e == "ids") {
                let text = String::from_utf8(bytes)
                    .map_err(|_| Error::Data(format!("{}: not UTF-8", path.display())))?;
                let ids = CalibrationSet::parse_id_stream(&text)?;
                CalibrationSet::from_ids(&ids, args.samples, args.seq_len)
            } else {
                CalibrationSet::from_bytes(&bytes, args.samples, args.seq_len)
            }
        }
    }
}

fn load_boundaries(source: &SourceArgs) -> Result<BoundarySet> {
    match &source.dump {
        Some(dir) => ingest::read_dump(dir),
        None => {
            let model = load_model(&source.model)?;
            let calib = load_calib(&source.calib)?;
            Ok(model.forward_capture(&calib)?.0)
        }
    }
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn score_table(plan: &PruningPlan) -> String {
    let mut s = String::from("layer\tl_sim\tl_diff\ti_sim\ti_diff\timportance\tdegenerate_tokens\n");
    for r in &plan.scores {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.layer_index, r.l_sim, r.l_diff, r.i_sim, r.i_diff, r.importance, r.degenerate_token_count
        );
    }
    s
}

fn warn_full_prune(plan: &PruningPlan, err: &mut dyn Write) {
    if plan.is_full_prune() {
        let _ = writeln!(err, "warning\tfull prune: all {} layers removed", plan.total_layers);
    }
}

fn trace_path(trace: Option<&Path>, out: Option<&Path>) -> Option<PathBuf> {
    trace.map(Path::to_path_buf).or_else(|| {
        out.map(|o| {
            let mut s = o.as_os_str().to_owned();
            s.push(".trace.tsv");
            PathBuf::from(s)
        })
    })
}

fn run_search(
    model_args: &ModelArgs,
    calib_args: &CalibArgs,
    select: &SelectArgs,
    search: &SearchArgs,
) -> Result<crate::alphasearch::AlphaSearch> {
    let model = load_model(model_args)?;
    let calib = load_calib(calib_args)?;
    let subset = calib.take(search.search_samples.min(calib.len()))?;
    let config = SearchConfig {
        epsilon: search.epsilon,
        max_iterations: search.max_iters,
        k: select.count.resolve(model.layer_count())?,
        metric_kind: select.metric,
        excluded: parse_exclude(&select.exclude)?,
    };
    search_alpha_for_model(&model, &calib, &subset, &config)
}

/// Runs one parsed command, writing results to `out` and warnings to `err`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Init { model, out: dir } => {
            let m = load_model(&model)?;
            ingest::save_checkpoint(&m, &dir)?;
            emit(out, None, &format!("{}\n", m.checksum()))
        }
        Command::Train {
            model,
            calib,
            steps,
            lr,
            out: dir,
        } => {
            let m = load_model(&model)?;
            let data = load_calib(&calib)?;
            let before = m.perplexity(None, &data)?.ln();
            let trained = train_micro(&m, &data, steps, lr)?;
            let after = trained.perplexity(None, &data)?.ln();
            ingest::save_checkpoint(&trained, &dir)?;
            emit(out, None, &format!("loss_before\tloss_after\n{before}\t{after}\n"))
        }
        Command::Capture { model, calib, out: dir } => {
            let m = load_model(&model)?;
            let data = load_calib(&calib)?;
            let (boundaries, _) = m.forward_capture(&data)?;
            ingest::write_dump(&boundaries, &dir)?;
            Ok(())
        }
        Command::Score {
            source,
            metric,
            alpha,
            out: path,
        } => {
            let boundaries = load_boundaries(&source)?;
            let raw = all_layer_metrics(&boundaries, metric)?;
            let plan = plan_from_metrics(&raw, alpha, 0, &[], &boundaries.content_fingerprint())?;
            emit(out, path.as_deref(), &score_table(&plan))
        }
        Command::Plan {
            source,
            select,
            alpha,
            search,
            trace,
            out: path,
        } => {
            let plan = match alpha {
                AlphaArg::Fixed(a) => {
                    let boundaries = load_boundaries(&source)?;
                    let k = select.count.resolve(boundaries.layer_count())?;
                    build_plan_excluding(
                        &boundaries,
                        a,
                        select.metric,
                        k,
                        &parse_exclude(&select.exclude)?,
                    )?
                }
                AlphaArg::Search => {
                    if source.dump.is_some() {
                        return Err(Error::Config(
                            "--alpha search needs a model to evaluate perplexity, not --dump".into(),
                        ));
                    }
                    let result = run_search(&source.model, &source.calib, &select, &search)?;
                    if let Some(t) = trace_path(trace.as_deref(), path.as_deref()) {
                        emit(out, Some(&t), &result.trace.to_log())?;
                    }
                    result.plan
                }
            };
            warn_full_prune(&plan, err);
            emit(out, path.as_deref(), &ingest::plan_to_json(&plan))
        }
        Command::SearchAlpha {
            model,
            calib,
            select,
            search,
            trace,
            out: path,
        } => {
            let result = run_search(&model, &calib, &select, &search)?;
            warn_full_prune(&result.plan, err);
            ingest::write_plan(&result.plan, &path)?;
            let t = trace_path(trace.as_deref(), Some(&path)).expect("out is set");
            emit(out, Some(&t), &result.trace.to_log())?;
            emit(
                out,
                None,
                &format!(
                    "best_alpha\tbest_ppl\titerations\tevaluations\n{}\t{}\t{}\t{}\n",
                    result.trace.best_alpha,
                    result.trace.best_ppl,
                    result.trace.iterations.len(),
                    result.trace.evaluations
                ),
            )
        }
        Command::Prune { model, plan, out: dir } => {
            let m = load_model(&model)?;
            let p = ingest::read_plan(&plan)?;
            let pruned = m.without_layers(&p)?;
            ingest::save_checkpoint(&pruned, &dir)?;
            emit(out, None, &format!("{}\n", pruned.checksum()))
        }
        Command::Ppl { model, calib, plan } => {
            let m = load_model(&model)?;
            let data = load_calib(&calib)?;
            let p = plan.as_deref().map(ingest::read_plan).transpose()?;
            let ppl = m.perplexity(p.as_ref(), &data)?;
            emit(out, None, &format!("{ppl}\n"))
        }
        Command::Bench {
            model,
            plan,
            gen_tokens,
            batch,
            prompt_len,
            repeats,
            prompt_seed,
        } => {
            let m = load_model(&model)?;
            let plans = plan
                .iter()
                .map(|p| ingest::read_plan(p))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&PruningPlan> = plans.iter().collect();
            let cfg = BenchConfig {
                gen_tokens,
                batch,
                prompt_len,
                repeats,
                seed: prompt_seed,
            };
            let rows = bench_sweep(&m, &refs, &cfg)?;
            let mut s = String::from("pruned_layers\tratio\ttokens_per_sec\trel_std\tspeedup\n");
            for r in rows {
                let _ = writeln!(
                    s,
                    "{}\t{:.4}\t{:.2}\t{:.4}\t{:.3}",
                    r.pruned_layers,
                    r.pruned_layers as f64 / m.layer_count().max(1) as f64,
                    r.stats.mean,
                    r.stats.rel_std,
                    r.speedup
                );
            }
            emit(out, None, &s)
        }
    }
}

/// Parses arguments, runs, and maps the outcome to a process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout.lock(), "{e}");
                return 0;
            }
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("invalid arguments");
            let _ = writeln!(
                stderr.lock(),
                "error\tUsageError\t{}",
                line.trim_start_matches("error: ")
            );
            return 2;
        }
    };
    match run(cli, &mut stdout.lock(), &mut stderr.lock()) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\t'], " ");
            let _ = writeln!(stderr.lock(), "error\t{}\t{msg}", e.kind());
            1
        }
    }
}
