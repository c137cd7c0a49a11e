//! `branchml`: extract branch datasets from `.bcfg` corpora, train models,
//! annotate new code with predicted weights and measure the results.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use walkdir::WalkDir;

use branchml::baselines::{collect_branches, evaluate_heuristics, render_table, table_csv};
use branchml::dataset::{build_dataset, read_csv, split, to_csv_string, write_csv, Dataset};
use branchml::eval::{evaluate, metrics_csv, render_confusion, render_report};
use branchml::features::{feature_kind, FeatureKind, FeatureVector, FEATURE_NAMES};
use branchml::gbdt::{train, TrainParams};
use branchml::ir::{parse_bcfg_bytes, write_bcfg, CfgModule, ParseError};
use branchml::model::{annotate_module, bench_inference, emit_c, FlatModel};
use branchml::synth::{planted_corpus, CorpusConfig};

#[derive(Parser, Debug)]
#[command(name = "branchml", version, about = "Learned static branch probabilities")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for every random choice (dataset split, synthetic data).
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Number of probability classes.
    #[arg(long, global = true, default_value_t = 11, value_parser = parse_classes)]
    classes: usize,
    /// Minimum profiled executions for a branch to be labeled.
    #[arg(long, global = true, default_value_t = 100)]
    min_samples: u64,
}

fn parse_classes(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(k @ (3 | 11)) => Ok(k),
        _ => Err(format!("`{s}` is not a supported class count (use 3 or 11)")),
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a labeled dataset CSV from `.bcfg` files or directories.
    Extract {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output CSV (standard output if omitted).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Train a model on a dataset CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Model file to write (`.bcml`).
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 60)]
        rounds: usize,
        #[arg(long, default_value_t = 6)]
        depth: usize,
        #[arg(long, default_value_t = 0.3)]
        lr: f32,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Also write the held-out split to this CSV.
        #[arg(long)]
        holdout: Option<PathBuf>,
    },
    /// Attach predicted weights to every conditional branch of a `.bcfg`.
    Predict {
        #[arg(long)]
        model: PathBuf,
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Replace weights already present in the input.
        #[arg(long)]
        overwrite: bool,
    },
    /// Accuracy, logloss and confusion matrix on a dataset CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Write the confusion matrix counts to this CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the scalar metrics to this CSV.
        #[arg(long)]
        metrics_csv: Option<PathBuf>,
    },
    /// Coverage and accuracy of the static heuristics on a corpus.
    Baselines {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Generate C source for a model.
    EmitC {
        #[arg(long)]
        model: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Single-threaded inference throughput.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(short = 'n', long, default_value_t = 1_000_000)]
        count: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Feature vectors to cycle through (synthetic ones if omitted).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print the feature schema, one feature per line.
    Schema,
    /// Write a synthetic profiled corpus with planted branch rules.
    Synth {
        /// Output directory; one `.bcfg` file per module.
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 3000)]
        branches: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Extract { inputs, output } => cmd_extract(g, &inputs, output.as_deref()),
        Command::Train {
            data,
            output,
            rounds,
            depth,
            lr,
            lambda,
            holdout,
        } => {
            let params = TrainParams {
                rounds,
                max_depth: depth,
                learning_rate: lr,
                l2_lambda: lambda,
                seed: g.seed,
                ..TrainParams::default()
            };
            cmd_train(g, &data, &output, &params, holdout.as_deref())
        }
        Command::Predict {
            model,
            input,
            output,
            overwrite,
        } => cmd_predict(&model, &input, output.as_deref(), overwrite),
        Command::Eval {
            model,
            test,
            csv,
            metrics_csv,
        } => cmd_eval(&model, &test, csv.as_deref(), metrics_csv.as_deref()),
        Command::Baselines { inputs, csv } => cmd_baselines(g, &inputs, csv.as_deref()),
        Command::EmitC { model, output } => {
            let m = load_model(&model)?;
            write_output(output.as_deref(), emit_c(&m).as_bytes())
        }
        Command::Bench {
            model,
            count,
            reps,
            data,
        } => cmd_bench(g, &model, count, reps, data.as_deref()),
        Command::Schema => {
            let mut out = String::new();
            for (i, name) in FEATURE_NAMES.iter().enumerate() {
                let kind = match feature_kind(i) {
                    FeatureKind::Flag => "flag".to_owned(),
                    FeatureKind::Count => "count".to_owned(),
                    FeatureKind::Category { cardinality } => format!("category({cardinality})"),
                };
                out.push_str(&format!("{i}\t{name}\t{kind}\n"));
            }
            write_output(None, out.as_bytes())
        }
        Command::Synth {
            output,
            branches,
            noise,
        } => cmd_synth(g, &output, branches, noise),
    }
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes).with_context(|| format!("cannot write {}", p.display())),
        None => {
            let mut out = io::stdout().lock();
            match out.write_all(bytes).and_then(|()| out.flush()) {
                Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

/// `.bcfg` files named directly or found under directories, in a stable
/// order.
fn corpus_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            for entry in WalkDir::new(input).sort_by_file_name() {
                let entry = entry.with_context(|| format!("cannot read {}", input.display()))?;
                if entry.file_type().is_file() && entry.path().extension().is_some_and(|e| e == "bcfg") {
                    files.push(entry.into_path());
                }
            }
        } else if input.exists() {
            files.push(input.clone());
        } else {
            bail!("{}: no such file or directory", input.display());
        }
    }
    Ok(files)
}

/// `file:line:...` for errors that carry a position, `file: ...` otherwise.
fn located(path: &Path, e: &ParseError) -> String {
    match e.line() {
        Some(_) => format!("{}:{e}", path.display()),
        None => format!("{}: {e}", path.display()),
    }
}

/// Parses every file, reporting each failure on standard error before
/// giving up.
fn load_corpus(inputs: &[PathBuf]) -> Result<Vec<CfgModule>> {
    let files = corpus_files(inputs)?;
    let mut modules = Vec::with_capacity(files.len());
    let mut failures = 0;
    for f in &files {
        let bytes = fs::read(f).with_context(|| format!("cannot read {}", f.display()))?;
        match parse_bcfg_bytes(&bytes) {
            Ok(mut m) => {
                if m.source_name.is_empty() {
                    m.source_name = f.display().to_string();
                }
                modules.push(m);
            }
            Err(e) => {
                eprintln!("{}", located(f, &e));
                failures += 1;
            }
        }
    }
    if failures > 0 {
        bail!("{failures} of {} input files failed to parse", files.len());
    }
    Ok(modules)
}

fn cmd_extract(g: &Global, inputs: &[PathBuf], output: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(inputs)?;
    let d = build_dataset(&corpus, g.min_samples, g.classes)?;
    if d.is_empty() {
        eprintln!("warning: no labeled branches; writing an empty dataset");
    }
    log::info!("{} modules, {} labeled branches", corpus.len(), d.len());
    write_output(output, to_csv_string(&d).as_bytes())
}

fn read_dataset(path: &Path, classes: usize) -> Result<Dataset> {
    let file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_csv(io::BufReader::new(file), classes).with_context(|| format!("{}", path.display()))
}

fn load_model(path: &Path) -> Result<FlatModel> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    FlatModel::load(&bytes).with_context(|| format!("{}", path.display()))
}

fn cmd_train(g: &Global, data: &Path, output: &Path, params: &TrainParams, holdout: Option<&Path>) -> Result<()> {
    let d = read_dataset(data, g.classes)?;
    let (tr, te) = split(&d, g.seed)?;
    if let Some(p) = holdout {
        let file = fs::File::create(p).with_context(|| format!("cannot write {}", p.display()))?;
        write_csv(&te, io::BufWriter::new(file))?;
    }
    let out = train(&tr, params)?;
    for (round, loss) in out.train_logloss.iter().enumerate() {
        eprintln!("round {:>4}  train logloss {loss:.6}", round + 1);
    }
    let m = FlatModel::from_ensemble(&out.ensemble)?;
    let r = evaluate(&m, &te)?;
    fs::write(output, m.save()).with_context(|| format!("cannot write {}", output.display()))?;
    println!(
        "trained on {} samples, held out {}: accuracy {:.4}, off-by-one {:.4}, logloss {:.6}",
        tr.len(),
        te.len(),
        r.accuracy,
        r.off_by_one_accuracy,
        r.logloss
    );
    Ok(())
}

fn cmd_predict(model: &Path, input: &Path, output: Option<&Path>, overwrite: bool) -> Result<()> {
    let m = load_model(model)?;
    let bytes = fs::read(input).with_context(|| format!("cannot read {}", input.display()))?;
    let module = parse_bcfg_bytes(&bytes).map_err(|e| anyhow::anyhow!(located(input, &e)))?;
    let annotated = annotate_module(&m, &module, overwrite)?;
    write_output(output, write_bcfg(&annotated).as_bytes())
}

fn cmd_eval(model: &Path, test: &Path, csv: Option<&Path>, metrics: Option<&Path>) -> Result<()> {
    let m = load_model(model)?;
    let d = read_dataset(test, m.num_classes)?;
    let r = evaluate(&m, &d)?;
    let (heatmap, counts) = render_confusion(&r.confusion);
    print!("{}\nconfusion (rows: true class, columns: predicted class)\n{heatmap}", render_report(&r));
    if let Some(p) = csv {
        fs::write(p, counts).with_context(|| format!("cannot write {}", p.display()))?;
    }
    if let Some(p) = metrics {
        fs::write(p, metrics_csv(&r)).with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(())
}

fn cmd_baselines(g: &Global, inputs: &[PathBuf], csv: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(inputs)?;
    let t = evaluate_heuristics(&collect_branches(&corpus, g.min_samples))?;
    print!("{}", render_table(&t));
    if let Some(p) = csv {
        fs::write(p, table_csv(&t)).with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(())
}

fn cmd_bench(g: &Global, model: &Path, count: usize, reps: usize, data: Option<&Path>) -> Result<()> {
    let m = load_model(model)?;
    m.check_schema()?;
    let pool: Vec<FeatureVector> = match data {
        Some(p) => read_dataset(p, m.num_classes)?.samples.into_iter().map(|s| s.x).collect(),
        None => {
            let corpus = planted_corpus(&CorpusConfig {
                num_branches: 2000,
                seed: g.seed,
                ..CorpusConfig::default()
            });
            build_dataset(&corpus, 0, m.num_classes)?.samples.into_iter().map(|s| s.x).collect()
        }
    };
    if pool.is_empty() {
        bail!("no feature vectors to benchmark with");
    }
    if count == 0 {
        bail!("inference count must be positive");
    }
    let r = bench_inference(&m, &pool, count, reps);
    println!(
        "model: {} classes x {} rounds, {} nodes",
        m.num_classes,
        m.num_rounds,
        m.num_nodes()
    );
    println!(
        "throughput: {:.0} +/- {:.0} inferences/s ({} reps of {count})",
        r.mean,
        r.stddev,
        r.per_rep.len()
    );
    Ok(())
}

fn cmd_synth(g: &Global, output: &Path, branches: usize, noise: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&noise) {
        bail!("noise must lie in [0, 1], got {noise}");
    }
    let corpus = planted_corpus(&CorpusConfig {
        num_branches: branches,
        noise,
        seed: g.seed,
        ..CorpusConfig::default()
    });
    fs::create_dir_all(output).with_context(|| format!("cannot create {}", output.display()))?;
    for m in &corpus {
        let path = output.join(format!("{}.bcfg", m.source_name));
        fs::write(&path, write_bcfg(m)).with_context(|| format!("cannot write {}", path.display()))?;
    }
    println!("wrote {} modules to {}", corpus.len(), output.display());
    Ok(())
}
