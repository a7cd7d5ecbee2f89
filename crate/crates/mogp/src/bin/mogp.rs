//! Batch command-line interface: synthesize data, train generatively or
//! discriminatively, evaluate, predict, and check gradients.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use mogp::classify::evaluate;
use mogp::data::{
    load_dataset, load_model, load_synth_spec, normalize_apply, normalize_dataset, normalize_fit,
    save_dataset, save_model, synth_generate,
};
use mogp::error::MogpError;
use mogp::likelihood::gradient_check;
use mogp::model::{Approx, Dataset, GScaling, KernelConfig, KernelMode, MceConfig, ModelBundle};
use mogp::optimize::OptimizerConfig;
use mogp::train::{default_scale_a, fit_generative, fit_mce, init_hyperparams};

#[derive(Parser)]
#[command(
    name = "mogp",
    version,
    about = "Multi-output GP classifiers over vector-valued signals",
    long_about = "Trains multi-output Gaussian-process classifiers over vector-valued \
functions of continuous inputs. Training is generative (per-class maximum marginal \
likelihood) or discriminative (joint minimum-classification-error); likelihoods are \
exact or low-rank (FITC/PITC). The kernel is a convolved multi-output covariance with \
Q=2 latent functions. Set MOGP_THREADS to cap worker parallelism (0 = auto)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainMode {
    /// Per-class maximum marginal likelihood.
    Gen,
    /// Minimum classification error, initialized from the generative fit.
    Mce,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ApproxArg {
    Exact,
    Fitc,
    Pitc,
}

impl From<ApproxArg> for Approx {
    fn from(a: ApproxArg) -> Approx {
        match a {
            ApproxArg::Exact => Approx::Exact,
            ApproxArg::Fitc => Approx::Fitc,
            ApproxArg::Pitc => Approx::Pitc,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file into a directory.
    Synth {
        /// JSON generator spec (kernel, per-class hyperparameters, grid, seed).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for the manifest and instance files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model on a dataset directory and save it.
    Train {
        /// Dataset directory (or manifest path).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: TrainMode,
        #[arg(long, value_enum, default_value = "exact")]
        approx: ApproxArg,
        /// Number of inducing inputs; required for fitc/pitc.
        #[arg(long)]
        num_inducing: Option<usize>,
        /// Also optimize the inducing-input locations.
        #[arg(long)]
        opt_inducing: bool,
        /// Rival-softmax sharpness of the MCE measure.
        #[arg(long, default_value_t = 2.0)]
        eta: f64,
        /// Sigmoid slope of the MCE loss.
        #[arg(long, default_value_t = 1.0)]
        gamma1: f64,
        /// Sigmoid offset of the MCE loss.
        #[arg(long, default_value_t = 0.0)]
        gamma2: f64,
        /// Normalize outputs per channel; the statistics are stored in the model.
        #[arg(long)]
        normalize: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the model file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model on a labeled dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional JSON report file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score every instance of a dataset and write predictions.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Predictions file: one tab-separated line per instance
        /// (source, predicted class, all g-scores).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic likelihood and MCE gradients against central
    /// finite differences (small datasets only).
    Gradcheck {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

fn exit_code_for(err: &MogpError) -> u8 {
    match err {
        MogpError::Config(_) => 1,
        MogpError::Dim(_) | MogpError::Data(_) | MogpError::Schema { .. } | MogpError::Io { .. } => 2,
        MogpError::Numerical(_) => 3,
    }
}

fn main() -> ExitCode {
    mogp::init_thread_pool_from_env();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // Help/version go to stdout, genuine usage errors to stderr.
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run(command: Command) -> Result<(), MogpError> {
    match command {
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::Train {
            data,
            mode,
            approx,
            num_inducing,
            opt_inducing,
            eta,
            gamma1,
            gamma2,
            normalize,
            seed,
            out,
        } => cmd_train(
            &data,
            mode,
            approx.into(),
            num_inducing,
            opt_inducing,
            eta,
            gamma1,
            gamma2,
            normalize,
            seed,
            &out,
        ),
        Command::Eval { model, data, report } => cmd_eval(&model, &data, report.as_deref()),
        Command::Predict { model, data, out } => cmd_predict(&model, &data, &out),
        Command::Gradcheck { model, data, step, tolerance } => cmd_gradcheck(&model, &data, step, tolerance),
    }
}

fn cmd_synth(spec_path: &Path, out: &Path) -> Result<(), MogpError> {
    let spec = load_synth_spec(spec_path)?;
    let ds = synth_generate(&spec)?;
    let manifest = save_dataset(&ds, out)?;
    println!(
        "wrote {} classes x {} instances (N={}, D={}) to {}",
        ds.n_classes(),
        spec.instances_per_class,
        spec.grid.n,
        ds.output_dim,
        manifest.display()
    );
    Ok(())
}

fn trace_line(label: &str, trace: &[f64]) -> String {
    let body: Vec<String> = trace.iter().map(|v| format!("{v:.6}")).collect();
    format!("{label} trace ({} steps): {}", trace.len() - 1, body.join(" "))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    mode: TrainMode,
    approx: Approx,
    num_inducing: Option<usize>,
    opt_inducing: bool,
    eta: f64,
    gamma1: f64,
    gamma2: f64,
    normalize: bool,
    seed: u64,
    out: &Path,
) -> Result<(), MogpError> {
    if approx != Approx::Exact && num_inducing.is_none() {
        return Err(MogpError::Config(format!("--approx {approx} requires --num-inducing")));
    }
    if let Some(k) = num_inducing {
        if k == 0 {
            return Err(MogpError::Config("--num-inducing must be at least 1".into()));
        }
    }
    let raw = load_dataset(data)?;
    if mode == TrainMode::Mce && raw.n_classes() < 2 {
        return Err(MogpError::Config("--mode mce needs at least 2 classes".into()));
    }

    let stats = if normalize { Some(normalize_fit(&raw)?) } else { None };
    let ds: Dataset = match &stats {
        Some(s) => normalize_dataset(&raw, s)?,
        None => raw,
    };

    let kernel = KernelConfig { q: 2, mode: KernelMode::Convolved, input_dim: ds.input_dim };
    let inducing = if approx == Approx::Exact { None } else { num_inducing };
    let opt = OptimizerConfig { seed, ..Default::default() };
    let scale_a = default_scale_a(&ds);

    let mut per_class = Vec::with_capacity(ds.n_classes());
    for (c, class) in ds.classes.iter().enumerate() {
        let init = init_hyperparams(&class.instances, &kernel, seed.wrapping_add(c as u64), inducing)?;
        let (theta, report) = fit_generative(&class.instances, &kernel, &init, &opt, approx, opt_inducing)
            .map_err(|e| e.with_context(&format!("class '{}'", class.name)))?;
        println!("{}", trace_line(&format!("gen '{}'", class.name), &report.objective_trace));
        per_class.push(theta);
    }

    let mut bundle = ModelBundle {
        per_class,
        class_names: ds.classes.iter().map(|c| c.name.clone()).collect(),
        kernel,
        approx,
        scaling: GScaling { a: scale_a, b: 0.0 },
        normalization: stats,
    };

    if mode == TrainMode::Mce {
        let mce = MceConfig { eta, gamma1, gamma2, a: scale_a, b: 0.0 };
        let (trained, report) = fit_mce(&ds, &bundle, &mce, &opt, opt_inducing)?;
        println!("{}", trace_line("mce", &report.objective_trace));
        bundle = trained;
    }

    save_model(&bundle, out)?;
    println!("wrote model ({} classes, approx {}) to {}", bundle.n_classes(), bundle.approx, out.display());
    Ok(())
}

fn cmd_eval(model_path: &Path, data: &Path, report_path: Option<&Path>) -> Result<(), MogpError> {
    let model = load_model(model_path)?;
    let ds = load_dataset(data)?;
    let report = evaluate(&model, &ds)?;
    println!("accuracy {:.4} over {} instances", report.accuracy, ds.n_instances());
    println!("confusion (rows = truth):");
    for (i, row) in report.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:6}")).collect();
        println!("  {:>12} {}", report.class_names[i], cells.join(" "));
    }
    if let Some(path) = report_path {
        let json = serde_json::json!({
            "accuracy": report.accuracy,
            "per_class_accuracy": report.per_class_accuracy,
            "confusion": report.confusion,
            "class_names": report.class_names,
        });
        fs::write(path, serde_json::to_string_pretty(&json).unwrap() + "\n")
            .map_err(|source| MogpError::Io { path: path.to_path_buf(), source })?;
        println!("wrote report to {}", path.display());
    }
    Ok(())
}

fn cmd_predict(model_path: &Path, data: &Path, out: &Path) -> Result<(), MogpError> {
    let model = load_model(model_path)?;
    let ds = load_dataset(data)?;
    let mut lines = Vec::with_capacity(ds.n_instances());
    for (ci, class) in ds.classes.iter().enumerate() {
        for (li, inst) in class.instances.iter().enumerate() {
            let pred = mogp::classify::predict(inst, &model)?;
            let source = inst
                .source
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| format!("{}:{}", ci, li));
            let scores: Vec<String> = pred.scores.iter().map(|s| format!("{s}")).collect();
            lines.push(format!(
                "{source}\t{}\t{}",
                model.class_names[pred.predicted_class],
                scores.join(" ")
            ));
        }
    }
    fs::write(out, lines.join("\n") + "\n")
        .map_err(|source| MogpError::Io { path: out.to_path_buf(), source })?;
    println!("wrote {} predictions to {}", lines.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(model_path: &Path, data: &Path, step: f64, tolerance: f64) -> Result<(), MogpError> {
    let model = load_model(model_path)?;
    let raw = load_dataset(data)?;
    let ds = match &model.normalization {
        Some(stats) => {
            let mut normed = raw.clone();
            for class in &mut normed.classes {
                for inst in &mut class.instances {
                    *inst = normalize_apply(inst, stats)?;
                }
            }
            normed
        }
        None => raw,
    };
    let mce = MceConfig { a: model.scaling.a, b: model.scaling.b, ..Default::default() };
    let report = gradient_check(&model, &ds, &mce, step, tolerance)?;
    print!("{report}");
    if report.all_pass() {
        println!("gradient check passed ({} groups)", report.groups.len());
        Ok(())
    } else {
        let failing = report.groups.iter().filter(|g| !g.pass).count();
        Err(MogpError::Numerical(format!("gradient check failed in {failing} group(s)")))
    }
}
