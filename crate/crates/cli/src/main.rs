use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anchorgcd::autodiff::{grad_check, Tensor};
use anchorgcd::config::{DataSource, ExperimentConfig};
use anchorgcd::das::{select_anchors, ClusterState};
use anchorgcd::data::{save_dir, synth_gmm, SynthConfig};
use anchorgcd::eval::anchor_purity;
use anchorgcd::losses::{self, Batch};
use anchorgcd::model::{Model, ParamVars};
use anchorgcd::rng::{seeded, stream};
use anchorgcd::train::{self, eta_override, load_dataset, predict_unlabeled, write_anchor_dump};
use anchorgcd::{checkpoint, data};
use clap::{Args, Parser, Subcommand};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "anchorgcd", version, about = "Generalized category discovery with sharpness-aware training and anchor selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value configuration file
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a setting; repeatable, applied after the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-mixture dataset directory
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        old: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        std: Option<f64>,
        #[arg(long)]
        separation: Option<f64>,
        /// Geometric class-size decay
        #[arg(long)]
        long_tail: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write metrics, anchors, checkpoint and flatness
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// baseline, lsp, das or lsp+das
        #[arg(long)]
        method: Option<String>,
        /// Dataset directory written by `synth`
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Clustering accuracy of a checkpoint on the unlabeled samples
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run one anchor selection with a checkpoint
    SelectAnchors {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Epoch number used in the output file name
        #[arg(long, default_value_t = 0)]
        epoch: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dominant Hessian eigenvalue and Hessian trace of a checkpoint
    DiagHessian {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the training loss gradient
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Check this model instead of a fresh initialization
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

enum CliError {
    Usage(String),
    Lib(anchorgcd::Error),
    Failed(String),
}

impl From<anchorgcd::Error> for CliError {
    fn from(e: anchorgcd::Error) -> Self {
        CliError::Lib(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Lib(e) if e.is_usage() => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn load_config(args: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn with_data(mut cfg: ExperimentConfig, data: &Option<PathBuf>) -> CliResult<ExperimentConfig> {
    if let Some(d) = data {
        cfg.data = DataSource::Dir(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path, ds: &data::GcdDataset) -> CliResult<Model> {
    let model = checkpoint::load(path)?;
    let c = &model.config;
    if c.input_dim != ds.dim() || c.num_classes != ds.num_classes {
        return Err(CliError::Usage(format!(
            "{} expects {}-dim inputs and {} classes, dataset has {} and {}",
            path.display(),
            c.input_dim,
            c.num_classes,
            ds.dim(),
            ds.num_classes
        )));
    }
    Ok(model)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn synth(cfg: &SynthConfig, out: &Path) -> CliResult<()> {
    let ds = synth_gmm(cfg)?;
    save_dir(out, &ds)?;
    println!(
        "wrote {} samples ({} labeled) in {} dims to {}",
        ds.len(),
        ds.labeled_indices().len(),
        ds.dim(),
        out.display()
    );
    Ok(())
}

fn train(cfg: ExperimentConfig) -> CliResult<()> {
    if cfg.out.is_none() {
        return Err(CliError::Usage("train needs --out or out= in the config".into()));
    }
    let ds = load_dataset(&cfg)?;
    let out = train::run(&cfg, &ds)?;
    let f = &out.final_eval;
    println!("method,acc_all,acc_old,acc_new");
    println!("{},{},{},{}", cfg.method, f.acc_all, f.acc_old, f.acc_new);
    if let Some(fl) = &out.flatness {
        println!("lambda_max={} trace={}", fl.lambda_max.value, fl.trace.value);
    }
    Ok(())
}

fn eval(cfg: ExperimentConfig, ckpt: &Path) -> CliResult<()> {
    let ds = load_dataset(&cfg)?;
    let model = load_model(ckpt, &ds)?;
    let r = train::evaluate(&model, &ds, cfg.loss.tau_student)?;
    println!("acc_all,acc_old,acc_new");
    println!("{},{},{}", r.acc_all, r.acc_old, r.acc_new);
    Ok(())
}

fn select(cfg: ExperimentConfig, ckpt: &Path, epoch: usize, out: &Path) -> CliResult<()> {
    let ds = load_dataset(&cfg)?;
    let model = load_model(ckpt, &ds)?;
    let (idx, pred) = predict_unlabeled(&model, &ds, cfg.loss.tau_student)?;
    let truth: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
    let report = anchorgcd::eval::cluster_acc(&pred.argmax(), &truth, ds.num_classes, &ds.old_classes)?;
    let state = ClusterState::new(pred.features, pred.probs, idx)?;
    let mut das = cfg.das.clone();
    das.eta_override = eta_override(&cfg, &ds);
    let sel = select_anchors(&state, &ds.new_classes(), &das, epoch)?;
    create_dir(out)?;
    let path = out.join(format!("anchors_epoch_{epoch}.csv"));
    write_anchor_dump(&path, &state, &ds.new_classes(), &sel.anchors)?;
    let purity = anchor_purity(&sel.anchors.pairs(), &ds.labels, &report.mapping);
    println!(
        "anchors={} eta={} purity={} file={}",
        sel.anchors.len(),
        sel.eta,
        purity.map_or("n/a".to_string(), |p| p.to_string()),
        path.display()
    );
    Ok(())
}

fn diag(cfg: ExperimentConfig, ckpt: &Path, out: &Option<PathBuf>) -> CliResult<()> {
    let ds = load_dataset(&cfg)?;
    let model = load_model(ckpt, &ds)?;
    let report = train::flatness(&cfg, &ds, &model)?;
    print!("{}", report.to_key_values());
    if let Some(dir) = out {
        create_dir(dir)?;
        report.write(&dir.join("flatness.txt"))?;
    }
    Ok(())
}

fn gradcheck(cfg: ExperimentConfig, ckpt: &Option<PathBuf>, batch: usize, tol: f64, step: f64) -> CliResult<()> {
    if batch < 2 {
        return Err(CliError::Usage("--batch must be at least 2".into()));
    }
    let ds = load_dataset(&cfg)?;
    let model = match ckpt {
        Some(p) => load_model(p, &ds)?,
        None => Model::new(cfg.model_config(ds.dim(), ds.num_classes), &mut seeded(cfg.seed, stream::INIT))?,
    };
    let idx = data::sample_indices(ds.len(), batch, cfg.seed);
    let (view1, view2) = cfg.augment.views(&ds.rows(&idx), &mut seeded(cfg.seed, stream::AUGMENT));
    let visible = ds.visible_labels();
    let batch = Batch {
        view1,
        view2,
        labels: idx.iter().map(|&i| visible[i]).collect(),
    };
    let tau_t = cfg.loss.tau_teacher_final;

    // Teacher targets are constants of the loss, so they are fixed at the
    // starting point.
    let teacher = {
        let mut tape = anchorgcd::autodiff::Tape::new();
        let vars = model.register(&mut tape);
        let x = Tensor::matrix(2 * batch.len(), ds.dim(), [batch.view1.data(), batch.view2.data()].concat())?;
        let x = tape.leaf(x);
        let fwd = model.forward(&mut tape, &vars, x)?;
        losses::teacher_targets(tape.value(fwd.logits), tau_t)?
    };
    let params: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
    let (ne, np) = (model.encoder.len(), model.projection.len());
    let report = grad_check(
        |tape, v| {
            let pair = |i: usize| (v[2 * i], v[2 * i + 1]);
            let vars = ParamVars {
                encoder: (0..ne).map(pair).collect(),
                projection: (ne..ne + np).map(pair).collect(),
                prototypes: v[2 * (ne + np)],
            };
            let t = losses::total_loss_with_teacher(tape, &model, &vars, &batch, &cfg.loss, tau_t, Some(&teacher))?;
            Ok(t.total)
        },
        &params,
        step,
        tol,
    )?;
    println!(
        "coordinates={} max_rel_error={:e} tol={:e} passed={}",
        report.coordinates, report.max_rel_error, report.tol, report.passed
    );
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check failed: relative error {:e} at tensor {} coordinate {}",
            report.max_rel_error, report.worst.0, report.worst.1
        )))
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth {
            config,
            classes,
            old,
            per_class,
            dim,
            std,
            separation,
            long_tail,
            out,
        } => {
            let cfg = load_config(&config)?;
            let mut s = match &cfg.data {
                DataSource::Synth(s) => s.clone(),
                _ => SynthConfig::default(),
            };
            s.classes = classes.unwrap_or(s.classes);
            s.old = old.unwrap_or(s.old);
            s.per_class = per_class.unwrap_or(s.per_class);
            s.dim = dim.unwrap_or(s.dim);
            s.std = std.unwrap_or(s.std);
            s.separation = separation.unwrap_or(s.separation);
            s.long_tail = long_tail.or(s.long_tail);
            if let Some(seed) = config.seed {
                s.seed = seed;
            }
            s.validate()?;
            synth(&s, &out)
        }
        Command::Train {
            config,
            method,
            data,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = method {
                cfg.set("method", &m)?;
            }
            if out.is_some() {
                cfg.out = out;
            }
            train(with_data(cfg, &data)?)
        }
        Command::Eval {
            config,
            checkpoint,
            data,
        } => eval(with_data(load_config(&config)?, &data)?, &checkpoint),
        Command::SelectAnchors {
            config,
            checkpoint,
            data,
            epoch,
            out,
        } => select(with_data(load_config(&config)?, &data)?, &checkpoint, epoch, &out),
        Command::DiagHessian {
            config,
            checkpoint,
            data,
            out,
        } => diag(with_data(load_config(&config)?, &data)?, &checkpoint, &out),
        Command::Gradcheck {
            config,
            checkpoint,
            data,
            batch,
            tol,
            step,
        } => gradcheck(with_data(load_config(&config)?, &data)?, &checkpoint, batch, tol, step),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("anchorgcd: error: {first} (see --help)");
            return ExitCode::from(EXIT_USAGE);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("anchorgcd: error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.code())
        }
    }
}
