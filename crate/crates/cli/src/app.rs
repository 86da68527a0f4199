//! Subcommand definitions and their implementations.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use lglab_core::analyzers::analyze;
use lglab_core::rng::stream_rng;
use lglab_core::simulators::{best_markov_sim, build_joint_sim, find_filler, suffix_sim_report, SimReport};
use lglab_core::tasks::TaskSpec;
use lglab_core::{LtParams, PrecisionMode, TokenSeq};
use lglab_trainer::config::ArchConfig;
use lglab_trainer::sweep::{run_sweep, task_param, CSV_HEADER};
use lglab_trainer::train::sample_batch;
use lglab_trainer::{train, SweepSpec, TrainConfig};
use log::info;
use serde::Serialize;

use crate::config::{resolve_task, ExperimentConfig};
use crate::manifest::{read_bytes, ManifestBuilder};
use crate::plot::{render_svg, PlotSpec};
use crate::verify::run_verify;
use crate::CliError;

const PRECEDENCE: &str =
    "Values are taken from command-line flags first, then from the JSON file given by --config, then from built-in defaults.";

#[derive(Debug, Parser)]
#[command(
    name = "lglab",
    version,
    about = "Limit-transformer analysis, simulation strings, synthetic tasks and length-generalization sweeps"
)]
#[command(
    after_help = "Exit codes: 0 ok, 1 verification failure, 2 usage or input error, 3 model-shape error.\nLGLAB_THREADS caps worker threads; RUST_LOG sets log verbosity."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Margins, thresholds and norm constants of a model, as JSON.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 16)]
        p_bits: u32,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a simulation string for an input and report output discrepancies.
    Simulate {
        /// One model (suffix, markov) or two (joint).
        #[arg(long = "models", alias = "model", num_args = 1..=2, required = true)]
        models: Vec<PathBuf>,
        /// Whitespace-separated token ids.
        #[arg(long)]
        input_file: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Joint)]
        method: Method,
        /// Accuracy parameter of the joint construction.
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        /// Target length for suffix and markov.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 32)]
        tries: usize,
        /// Window kept by markov; defaults to the model's locality.
        #[arg(long)]
        tau: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        p_bits: u32,
        /// Measure suffix discrepancies without precision limits.
        #[arg(long)]
        infinite: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Best-of-k Markov subsample of an input for a two-layer local model.
    MarkovSim {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input_file: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        tries: usize,
        #[arg(long)]
        tau: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample task sequences, one per line, with targets in <out>.targets.json.
    Gen {
        #[arg(long)]
        task: String,
        /// Task parameters as key=value pairs, e.g. period=3,k=0.
        #[arg(long)]
        params: Option<String>,
        #[arg(long)]
        len: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and save a checkpoint.
    #[command(after_help = PRECEDENCE)]
    Train {
        #[command(flatten)]
        common: TrainArgs,
        /// Maximum training length [default: 64].
        #[arg(long)]
        train_len: Option<usize>,
        /// [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path; the step log goes to <out>.log.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train over a grid and write test-loss curves as CSV.
    #[command(after_help = PRECEDENCE)]
    Sweep {
        #[command(flatten)]
        common: TrainArgs,
        /// Values of the task's swept parameter (omega, period or vocabulary size).
        #[arg(long, value_delimiter = ',')]
        param_grid: Option<Vec<f64>>,
        /// Maximum training lengths [default: 16,32,64].
        #[arg(long, value_delimiter = ',')]
        train_lens: Option<Vec<usize>>,
        /// [default: 64,128,256,512,1024]
        #[arg(long, value_delimiter = ',')]
        test_lens: Option<Vec<usize>>,
        /// [default: 0,1,2,3]
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Evaluation batches per test length [default: 8].
        #[arg(long)]
        eval_batches: Option<usize>,
        /// [default: 256]
        #[arg(long)]
        eval_batch_size: Option<usize>,
        /// Save every trained model here as <task>_p<param>_n<len>_s<seed>.json.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run property suites and print a JSON summary.
    Verify {
        /// hardmax, rounding, markov, bulk, gradients, constructions or all.
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0, hide = true)]
        tolerance_scale: f64,
    },
    /// Render CSV columns as an SVG line plot.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
        #[arg(long)]
        group: Option<String>,
        #[arg(long)]
        log_x: bool,
        #[arg(long)]
        log_y: bool,
        #[arg(long)]
        title: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Joint,
    Suffix,
    Markov,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// JSON experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// simple, modp or kgram.
    #[arg(long)]
    pub task: Option<String>,
    /// Task parameters as key=value pairs, e.g. period=3,k=0.
    #[arg(long)]
    pub params: Option<String>,
    /// Model width [default: 16].
    #[arg(long)]
    pub d: Option<usize>,
    /// Sequences per step [default: 1024].
    #[arg(long)]
    pub batch: Option<usize>,
    /// [default: 20000]
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Stop once a batch loss falls below this [default: 1e-5].
    #[arg(long)]
    pub stop_loss: Option<f64>,
    /// Adam rate for attention and MLP weights [default: 1e-2 / d].
    #[arg(long)]
    pub lr_hidden: Option<f64>,
    /// Adam rate for embeddings and readout [default: 1e-2].
    #[arg(long)]
    pub lr_embed: Option<f64>,
}

fn load_model(path: &Path) -> Result<LtParams, CliError> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::Usage(format!("{}: not UTF-8: {e}", path.display())))?;
    LtParams::from_json_str(&text).map_err(|e| match e {
        lglab_core::Error::Schema(m) => CliError::Usage(format!("{}: {m}", path.display())),
        e => CliError::Core(e),
    })
}

fn load_seq(path: &Path) -> Result<TokenSeq, CliError> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::Usage(format!("{}: not UTF-8: {e}", path.display())))?;
    TokenSeq::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Writes `text` to `out` with a manifest, or to stdout.
fn emit(text: &str, out: Option<&Path>, manifest: ManifestBuilder) -> Result<(), CliError> {
    match out {
        Some(p) => {
            write_file(p, text.as_bytes())?;
            manifest.finish(&[p.to_path_buf()])?;
        }
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes()).map_err(|e| CliError::Io("<stdout>".into(), e))?;
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze { model, p_bits, out } => {
            let mb = ManifestBuilder::start("analyze").input(&model);
            let report = analyze(&load_model(&model)?, p_bits)?;
            emit(&to_json(&report), out.as_deref(), mb)
        }
        Command::Simulate { models, input_file, method, eps, n, tries, tau, seed, p_bits, infinite, out } => {
            let mut mb = ManifestBuilder::start("simulate").seed(seed);
            for m in &models {
                mb = mb.input(m);
            }
            mb = mb.input(&input_file);
            let x = load_seq(&input_file)?;
            let params: Vec<LtParams> = models.iter().map(|p| load_model(p)).collect::<Result<_, _>>()?;
            let report = match method {
                Method::Joint => {
                    let [f, g] = &params[..] else {
                        return Err(CliError::Usage("joint simulation needs exactly two --models".into()));
                    };
                    let filler = find_filler(f, g, p_bits, &x)?;
                    build_joint_sim(f, g, p_bits, &x, eps, filler)?
                }
                Method::Suffix | Method::Markov => {
                    let [f] = &params[..] else {
                        return Err(CliError::Usage(format!("{method:?} simulation needs exactly one --models").to_lowercase()));
                    };
                    let n = n.ok_or_else(|| CliError::Usage("--n is required for suffix and markov".into()))?;
                    if method == Method::Suffix {
                        let mode = if infinite { PrecisionMode::Infinite } else { PrecisionMode::finite(p_bits) };
                        suffix_sim_report(f, mode, &x, n)?
                    } else {
                        markov_report(f, &x, n, tries, tau, seed)?
                    }
                }
            };
            emit(&to_json(&report), out.as_deref(), mb)
        }
        Command::MarkovSim { model, input_file, n, tries, tau, seed, out } => {
            let mb = ManifestBuilder::start("markov-sim").seed(seed).input(&model).input(&input_file);
            let f = load_model(&model)?;
            let x = load_seq(&input_file)?;
            emit(&to_json(&markov_report(&f, &x, n, tries, tau, seed)?), out.as_deref(), mb)
        }
        Command::Gen { task, params, len, count, seed, out } => {
            let mb = ManifestBuilder::start("gen").seed(seed);
            let task = resolve_task(Some(&task), params.as_deref(), &ExperimentConfig::default())?;
            cmd_gen(&task, len, count, seed, &out, mb)
        }
        Command::Train { common, train_len, seed, out } => cmd_train(&common, train_len, seed, &out),
        Command::Sweep {
            common,
            param_grid,
            train_lens,
            test_lens,
            seeds,
            eval_batches,
            eval_batch_size,
            checkpoint_dir,
            out,
        } => {
            let cfg = ExperimentConfig::load(common.config.as_deref())?;
            let task = resolve_task(common.task.as_deref(), common.params.as_deref(), &cfg)?;
            let spec = SweepSpec {
                base: base_train_config(&common, &cfg, &task, 16, 0),
                task,
                params: param_grid.or(cfg.param_grid.clone()).unwrap_or_default(),
                train_lens: train_lens.or(cfg.train_lens.clone()).unwrap_or_else(|| vec![16, 32, 64]),
                test_lens: test_lens.or(cfg.test_lens.clone()).unwrap_or_else(|| vec![64, 128, 256, 512, 1024]),
                seeds: seeds.or(cfg.seeds.clone()).unwrap_or_else(|| vec![0, 1, 2, 3]),
                eval_batches: eval_batches.or(cfg.eval_batches).unwrap_or(8),
                eval_batch_size: eval_batch_size.or(cfg.eval_batch_size).unwrap_or(256),
            };
            cmd_sweep(spec, common.config.as_deref(), checkpoint_dir.as_deref(), &out)
        }
        Command::Verify { suite, seed, out, tolerance_scale } => {
            let mb = ManifestBuilder::start("verify").seed(seed);
            let report = run_verify(&suite, seed, tolerance_scale)?;
            emit(&to_json(&report), out.as_deref(), mb)?;
            if report.passed {
                Ok(())
            } else {
                Err(CliError::VerifyFailed(report.failures))
            }
        }
        Command::Plot { csv, x, y, group, log_x, log_y, title, out } => {
            let mb = ManifestBuilder::start("plot").input(&csv);
            let text = String::from_utf8(read_bytes(&csv)?)
                .map_err(|e| CliError::Usage(format!("{}: not UTF-8: {e}", csv.display())))?;
            let spec = PlotSpec { x_col: x, y_col: y, group_col: group, log_x, log_y, title };
            let svg = render_svg(&text, &spec)?;
            write_file(&out, svg.as_bytes())?;
            mb.finish(&[out])?;
            Ok(())
        }
    }
}

fn markov_report(
    f: &LtParams,
    x: &TokenSeq,
    n: usize,
    tries: usize,
    tau: Option<usize>,
    seed: u64,
) -> Result<SimReport, CliError> {
    let mut report = best_markov_sim(f, x, n, tau.unwrap_or(f.tau), tries, &mut stream_rng(seed, 0))?;
    report.seed = Some(seed);
    Ok(report)
}

#[derive(Serialize)]
struct TargetsFile<'a> {
    task: &'a TaskSpec,
    len: usize,
    seed: u64,
    targets: Vec<Vec<f64>>,
}

fn cmd_gen(task: &TaskSpec, len: usize, count: usize, seed: u64, out: &Path, mb: ManifestBuilder) -> Result<(), CliError> {
    let batch = sample_batch(task, len, count, &mut stream_rng(seed, 0))?;
    let mut text = String::new();
    for (x, _) in &batch {
        let ids: Vec<String> = x.tokens().iter().map(|t| t.to_string()).collect();
        text.push_str(&ids.join(" "));
        text.push('\n');
    }
    let targets_path = PathBuf::from(format!("{}.targets.json", out.display()));
    let targets = TargetsFile { task, len, seed, targets: batch.into_iter().map(|(_, t)| t).collect() };
    write_file(out, text.as_bytes())?;
    write_file(&targets_path, to_json(&targets).as_bytes())?;
    mb.finish(&[out.to_path_buf(), targets_path])?;
    Ok(())
}

fn base_train_config(args: &TrainArgs, cfg: &ExperimentConfig, task: &TaskSpec, train_len: usize, seed: u64) -> TrainConfig {
    let d = args.d.or(cfg.d).unwrap_or(16);
    let mut c = TrainConfig::new(ArchConfig::for_task(task, d), train_len, seed);
    c.batch = args.batch.or(cfg.batch).unwrap_or(c.batch);
    c.max_steps = args.max_steps.or(cfg.max_steps).unwrap_or(c.max_steps);
    c.stop_loss = args.stop_loss.or(cfg.stop_loss).unwrap_or(c.stop_loss);
    c.lr_hidden = args.lr_hidden.or(cfg.lr_hidden).unwrap_or(c.lr_hidden);
    c.lr_embed = args.lr_embed.or(cfg.lr_embed).unwrap_or(c.lr_embed);
    c
}

#[derive(Serialize)]
struct TrainSummary {
    task: TaskSpec,
    config: TrainConfig,
    steps: usize,
    final_loss: f64,
    converged: bool,
    checkpoint: PathBuf,
}

fn cmd_train(args: &TrainArgs, train_len: Option<usize>, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(args.config.as_deref())?;
    let task = resolve_task(args.task.as_deref(), args.params.as_deref(), &cfg)?;
    let train_len = train_len.or(cfg.train_len).unwrap_or(64);
    let seed = seed.or(cfg.seed).unwrap_or(0);
    let mb = ManifestBuilder::start("train").seed(seed).config(args.config.as_deref());
    let tc = base_train_config(args, &cfg, &task, train_len, seed);
    let result = train(&tc, &task, &mut stream_rng(seed, 0))?;
    let mut log = String::from("step,len,loss\n");
    for r in &result.log {
        log.push_str(&format!("{},{},{}\n", r.step, r.len, r.loss));
    }
    let log_path = PathBuf::from(format!("{}.log.csv", out.display()));
    write_file(out, result.model.to_checkpoint_json().as_bytes())?;
    write_file(&log_path, log.as_bytes())?;
    mb.finish(&[out.to_path_buf(), log_path])?;
    let summary = TrainSummary {
        task,
        config: tc,
        steps: result.log.len(),
        final_loss: result.log.last().map_or(f64::NAN, |r| r.loss),
        converged: result.converged,
        checkpoint: out.to_path_buf(),
    };
    print!("{}", to_json(&summary));
    Ok(())
}

fn cmd_sweep(mut spec: SweepSpec, config: Option<&Path>, checkpoint_dir: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let seed = spec.seeds.first().copied().unwrap_or(0);
    let mb = ManifestBuilder::start("sweep").seed(seed).config(config);
    if spec.params.is_empty() {
        spec.params = vec![task_param(&spec.task)];
    }
    if spec.train_lens.is_empty() || spec.test_lens.is_empty() || spec.seeds.is_empty() {
        return Err(CliError::Usage("train lengths, test lengths and seeds must be nonempty".into()));
    }
    info!("sweep: {} runs", spec.params.len() * spec.train_lens.len() * spec.seeds.len());
    let outcomes = run_sweep(&spec)?;
    let mut outputs = vec![out.to_path_buf()];
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    wtr.write_record(CSV_HEADER).expect("in-memory write");
    for o in &outcomes {
        for r in &o.rows {
            wtr.serialize(r).expect("in-memory write");
        }
    }
    let bytes = wtr.into_inner().map_err(|e| CliError::Usage(format!("CSV encoding failed: {e}")))?;
    write_file(out, &bytes)?;
    if let Some(dir) = checkpoint_dir {
        for o in &outcomes {
            let p = dir.join(format!("{}_p{}_n{}_s{}.json", o.task.name(), task_param(&o.task), o.train_len, o.seed));
            write_file(&p, o.model.to_checkpoint_json().as_bytes())?;
            outputs.push(p);
        }
    }
    mb.finish(&outputs)?;
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(n) = std::env::var("LGLAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
