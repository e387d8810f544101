use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use adaptq::harness::{
    analyze, evaluate, generate_synthetic, load_dump, render_csv, render_text, write_synthetic,
    EvalOptions, EvalReport, NamedPlan, RunConfig, SyntheticSpec, TransformCache,
};
use adaptq::model::TransformKind;
use adaptq::search::{run_joint_search, run_search};
use adaptq::selector::{heuristic_select, random_plan, SelectionPlan};
use adaptq::tensor::Seed;
use adaptq::transforms::{LayerProblem, Transform};
use adaptq::Error;

#[derive(Parser)]
#[command(name = "adaptq", version, about = "Per-layer transform selection for simulated quantization")]
struct Cli {
    /// Root seed for every random choice; defaults to the model's seed.
    #[arg(long, global = true, env = "ADAPTQ_SEED")]
    seed: Option<u64>,

    /// More log output (repeatable); RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectMode {
    Heuristic,
    Random,
    FixedAffine,
    FixedRotation,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic model from a JSON spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer kurtosis and robust z-scores.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a transform plan.
    Select {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        mode: SelectMode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Rotation share for random plans (overrides the config).
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Learn a plan with the softmax mixture search.
    Search {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        /// Train transforms together with the mixture weights (experimental).
        #[arg(long)]
        joint: bool,
    },
    /// Reconstruction error of one or more plans.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated plan files.
        #[arg(long, value_delimiter = ',', required = true)]
        plans: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Add the per-layer oracle plan.
        #[arg(long)]
        oracle: bool,
        /// Include wall-clock timings (not reproducible).
        #[arg(long)]
        timings: bool,
    },
    /// Render a report as a table or CSV.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

struct Failure {
    stage: &'static str,
    error: Error,
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T> Stage<T> for adaptq::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|error| Failure { stage, error })
    }
}

fn write_text(path: &Path, text: &str) -> adaptq::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_config(path: Option<&Path>) -> adaptq::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// `plan.json` -> `plan.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen { spec, out } => {
            let mut spec = SyntheticSpec::load(&spec).stage("read spec")?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let model = generate_synthetic(&spec).stage("generate")?;
            write_synthetic(&out, &model).stage("write model")?;
            log::info!("wrote {} layers to {}", model.layers.len(), out.display());
        }
        Command::Analyze { model, out } => {
            let dump = load_dump(&model).stage("load model")?;
            let stats = analyze(&dump.manifest.name, &dump.layers).stage("analyze")?;
            let mut text = serde_json::to_string_pretty(&stats).expect("stats serialize");
            text.push('\n');
            write_text(&out, &text).stage("write stats")?;
        }
        Command::Select {
            model,
            mode,
            out,
            config,
            fraction,
        } => {
            let cfg = load_config(config.as_deref()).stage("load config")?;
            let dump = load_dump(&model).stage("load model")?;
            let seed = Seed(cli.seed.unwrap_or(dump.manifest.seed));
            let kinds = dump.kinds();
            let plan = match mode {
                SelectMode::Heuristic => heuristic_select(&dump.layers, &cfg.selection).stage("select")?,
                SelectMode::Random => {
                    let f = fraction.unwrap_or(cfg.selection.random_fraction);
                    if !(0.0..=1.0).contains(&f) {
                        return Err(Failure {
                            stage: "select",
                            error: Error::InvalidArgument(format!("--fraction {f} is outside [0, 1]")),
                        });
                    }
                    random_plan(&kinds, f, seed)
                }
                SelectMode::FixedAffine => SelectionPlan::fixed(&kinds, TransformKind::Affine),
                SelectMode::FixedRotation => SelectionPlan::fixed(&kinds, TransformKind::Rotation),
                SelectMode::Oracle => TransformCache::new(&dump.layers, &cfg, seed)
                    .oracle()
                    .stage("calibrate")?,
            };
            write_text(&out, &plan.to_json()).stage("write plan")?;
        }
        Command::Search {
            model,
            out,
            config,
            steps,
            lambda,
            lr,
            joint,
        } => {
            let mut cfg = load_config(config.as_deref()).stage("load config")?;
            if let Some(s) = steps {
                cfg.search.steps = s;
            }
            if let Some(l) = lambda {
                cfg.search.lambda_entropy = l;
            }
            if let Some(l) = lr {
                cfg.search.lr = l;
            }
            cfg.search.joint |= joint;
            cfg.validate().stage("load config")?;
            let dump = load_dump(&model).stage("load model")?;
            let seed = Seed(cli.seed.unwrap_or(dump.manifest.seed));
            let mut cache = TransformCache::new(&dump.layers, &cfg, seed);
            let result = if cfg.search.joint {
                let mut problems = Vec::new();
                let mut start = Vec::new();
                for (i, l) in dump.layers.iter().enumerate() {
                    let a = cache.get(i, TransformKind::Affine).clone();
                    let r = cache.get(i, TransformKind::Rotation).clone();
                    let (Ok(a), Ok(r)) = (a, r) else {
                        return Err(Failure {
                            stage: "calibrate",
                            error: Error::Data(format!("layer {} failed to calibrate", l.name)),
                        });
                    };
                    let (Transform::Affine(a), Transform::Rotation(r)) =
                        (a.calibration.transform, r.calibration.transform)
                    else {
                        unreachable!("cache slots hold their own kind");
                    };
                    problems.push((LayerProblem::from_layer(l, cfg.calibration.smooth).stage("search")?, l.kind));
                    start.push((a, r));
                }
                run_joint_search(&problems, &start, &cfg.quant, &cfg.calibration, &cfg.search)
                    .stage("search")?
                    .result
            } else {
                let layers = cache.search_layers().stage("calibrate")?;
                run_search(&layers, &cfg.search).stage("search")?
            };
            let names: Vec<String> = dump.layers.iter().map(|l| l.name.clone()).collect();
            write_text(&out, &result.plan.to_json()).stage("write plan")?;
            write_text(&sibling(&out, "search.json"), &result.to_json(&names)).stage("write plan")?;
            write_text(&sibling(&out, "loss.csv"), &result.loss_csv()).stage("write plan")?;
        }
        Command::Evaluate {
            model,
            plans,
            config,
            out,
            oracle,
            timings,
        } => {
            let cfg = load_config(config.as_deref()).stage("load config")?;
            let dump = load_dump(&model).stage("load model")?;
            let seed = Seed(cli.seed.unwrap_or(dump.manifest.seed));
            let mut named = Vec::new();
            for p in &plans {
                let plan = SelectionPlan::load(p).stage("load plan")?;
                if plan.len() != dump.layers.len() {
                    return Err(Failure {
                        stage: "load plan",
                        error: Error::Data(format!(
                            "{}: plan has {} layers but model has {} layers",
                            p.display(),
                            plan.len(),
                            dump.layers.len()
                        )),
                    });
                }
                let base = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let mut name = base.clone();
                let mut k = 2;
                while named.iter().any(|n: &NamedPlan| n.name == name) {
                    name = format!("{base}-{k}");
                    k += 1;
                }
                named.push(NamedPlan::new(name, plan));
            }
            let opts = EvalOptions {
                with_oracle: oracle,
                timings,
            };
            let report =
                evaluate(&dump.manifest.name, &dump.layers, &named, &cfg, seed, opts).stage("evaluate")?;
            write_text(&out, &report.to_json()).stage("write report")?;
        }
        Command::Report { input, format } => {
            let report = EvalReport::load(&input).stage("read report")?;
            let text = match format {
                Format::Text => render_text(&report),
                Format::Csv => render_csv(&report),
            };
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error [{}]: {}", f.stage, f.error);
            ExitCode::from(f.error.exit_code() as u8)
        }
    }
}
