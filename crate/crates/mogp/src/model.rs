//! Core domain types: instances, datasets, kernel configuration and
//! per-class hyperparameters, plus the packed-vector view the optimizers
//! work on.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};

use crate::error::{MogpError, Result};

/// One vector-valued field sample: `n` input points in R^p and a `d × n`
/// output matrix (row `d` is output channel `d` sampled at every input).
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// Input locations, one column per point (p × n).
    pub inputs: DMatrix<f64>,
    /// Sampled outputs, one column per point (d × n).
    pub outputs: DMatrix<f64>,
    /// Class label when known.
    pub class_id: Option<usize>,
    /// Where this instance was loaded from, for reporting.
    pub source: Option<PathBuf>,
}

impl Instance {
    pub fn new(inputs: DMatrix<f64>, outputs: DMatrix<f64>) -> Result<Self> {
        if inputs.ncols() != outputs.ncols() {
            return Err(MogpError::Dim(format!(
                "instance has {} input points but {} output columns",
                inputs.ncols(),
                outputs.ncols()
            )));
        }
        if inputs.ncols() == 0 || inputs.nrows() == 0 || outputs.nrows() == 0 {
            return Err(MogpError::Dim(
                "instance needs at least one point, one input dim and one output dim".into(),
            ));
        }
        Ok(Instance { inputs, outputs, class_id: None, source: None })
    }

    pub fn n_points(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.nrows()
    }

    /// Outputs stacked output-major: all n points of channel 1, then
    /// channel 2, and so on. This is the ordering every covariance matrix
    /// in the crate uses.
    pub fn stacked_outputs(&self) -> DVector<f64> {
        let d = self.output_dim();
        let n = self.n_points();
        let mut f = DVector::zeros(d * n);
        for di in 0..d {
            for ni in 0..n {
                f[di * n + ni] = self.outputs[(di, ni)];
            }
        }
        f
    }
}

/// A named class and its training instances.
#[derive(Debug, Clone)]
pub struct ClassData {
    pub name: String,
    pub instances: Vec<Instance>,
}

/// A labeled dataset: M named classes of instances sharing input and output
/// dimensionality. Instance lengths may differ.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<ClassData>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_instances(&self) -> usize {
        self.classes.iter().map(|c| c.instances.len()).sum()
    }

    /// Mean instance length over the whole dataset.
    pub fn mean_points(&self) -> f64 {
        let total: usize = self
            .classes
            .iter()
            .flat_map(|c| c.instances.iter().map(Instance::n_points))
            .sum();
        let count = self.n_instances();
        if count == 0 {
            0.0
        } else {
            total as f64 / count as f64
        }
    }
}

/// One broken invariant found by [`validate_dataset`]. Violations are data,
/// not failures: inspecting a malformed dataset is a supported operation.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Class name, when the violation is tied to a class.
    pub class: Option<String>,
    /// Instance index within the class, when applicable.
    pub instance: Option<usize>,
    /// Which field is at fault ("inputs", "outputs", "classes", ...).
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (&self.class, self.instance) {
            (Some(c), Some(i)) => write!(f, "class '{c}' instance {i} [{}]: {}", self.field, self.message),
            (Some(c), None) => write!(f, "class '{c}' [{}]: {}", self.field, self.message),
            _ => write!(f, "[{}]: {}", self.field, self.message),
        }
    }
}

/// Check every structural invariant of a dataset and return the list of
/// violations (empty iff the dataset is well formed).
pub fn validate_dataset(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    if ds.input_dim == 0 {
        out.push(Violation {
            class: None,
            instance: None,
            field: "input_dim".into(),
            message: "input dimension must be at least 1".into(),
        });
    }
    if ds.output_dim == 0 {
        out.push(Violation {
            class: None,
            instance: None,
            field: "output_dim".into(),
            message: "output dimension must be at least 1".into(),
        });
    }
    for class in &ds.classes {
        if class.instances.is_empty() {
            out.push(Violation {
                class: Some(class.name.clone()),
                instance: None,
                field: "instances".into(),
                message: "class has no instances".into(),
            });
        }
        for (i, inst) in class.instances.iter().enumerate() {
            let mut push = |field: &str, message: String| {
                out.push(Violation {
                    class: Some(class.name.clone()),
                    instance: Some(i),
                    field: field.into(),
                    message,
                })
            };
            if inst.inputs.ncols() != inst.outputs.ncols() {
                push(
                    "outputs",
                    format!(
                        "column count mismatch: {} input points vs {} output columns",
                        inst.inputs.ncols(),
                        inst.outputs.ncols()
                    ),
                );
            }
            if inst.n_points() == 0 {
                push("inputs", "instance has no points".into());
            }
            if inst.input_dim() != ds.input_dim {
                push(
                    "inputs",
                    format!("input dim {} differs from dataset p={}", inst.input_dim(), ds.input_dim),
                );
            }
            if inst.output_dim() != ds.output_dim {
                push(
                    "outputs",
                    format!("output dim {} differs from dataset D={}", inst.output_dim(), ds.output_dim),
                );
            }
            if inst.inputs.iter().any(|v| !v.is_finite()) {
                push("inputs", "non-finite value in inputs".into());
            }
            if inst.outputs.iter().any(|v| !v.is_finite()) {
                push("outputs", "non-finite value in outputs".into());
            }
        }
    }
    out
}

/// Which covariance construction to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    /// Latent GPs convolved with per-output Gaussian smoothing kernels.
    Convolved,
    /// Linear model of coregionalization: the smoothing kernel collapses to
    /// a delta, leaving constant mixing of the latent GPs.
    Lmc,
}

/// Kernel structure shared by every class of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelConfig {
    /// Number of latent functions Q (each contributes one mixing column).
    pub q: usize,
    pub mode: KernelMode,
    pub input_dim: usize,
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(MogpError::Config("kernel needs at least one latent function".into()));
        }
        if self.input_dim == 0 {
            return Err(MogpError::Config("kernel input dimension must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-class kernel hyperparameters. Precisions and noise variances are kept
/// in log space so optimizers work unconstrained; the exponentiated values
/// are the diagonal precision entries of the Gaussian kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHyperparams {
    /// Q diagonal log-precision vectors of the latent kernels (each length p).
    pub latent_log_precisions: Vec<DVector<f64>>,
    /// D diagonal log-precision vectors of the output smoothing kernels
    /// (each length p; present but inert in LMC mode).
    pub output_log_precisions: Vec<DVector<f64>>,
    /// D×Q mixing weights.
    pub mixing: DMatrix<f64>,
    /// D log noise variances, one per output channel.
    pub log_noise_vars: DVector<f64>,
    /// Optional inducing inputs for the low-rank likelihoods, one column per
    /// point (p × K). Shared across latent functions.
    pub inducing_inputs: Option<DMatrix<f64>>,
}

impl ClassHyperparams {
    pub fn n_outputs(&self) -> usize {
        self.mixing.nrows()
    }

    pub fn n_latent(&self) -> usize {
        self.mixing.ncols()
    }

    pub fn n_inducing(&self) -> usize {
        self.inducing_inputs.as_ref().map_or(0, |z| z.ncols())
    }

    /// Noise variance of output channel `d`.
    pub fn noise_var(&self, d: usize) -> f64 {
        self.log_noise_vars[d].exp()
    }

    /// Check internal consistency against a kernel configuration.
    pub fn validate(&self, cfg: &KernelConfig) -> Result<()> {
        let p = cfg.input_dim;
        let d = self.n_outputs();
        if self.latent_log_precisions.len() != cfg.q {
            return Err(MogpError::Dim(format!(
                "{} latent precision vectors for Q={}",
                self.latent_log_precisions.len(),
                cfg.q
            )));
        }
        if self.output_log_precisions.len() != d {
            return Err(MogpError::Dim(format!(
                "{} output precision vectors for D={}",
                self.output_log_precisions.len(),
                d
            )));
        }
        for v in self.latent_log_precisions.iter().chain(self.output_log_precisions.iter()) {
            if v.len() != p {
                return Err(MogpError::Dim(format!("precision vector length {} != p={}", v.len(), p)));
            }
            if v.iter().any(|x| !x.is_finite() || x.exp() == 0.0 || !x.exp().is_finite()) {
                return Err(MogpError::Config("precision out of range (exp must be positive finite)".into()));
            }
        }
        if self.log_noise_vars.len() != d {
            return Err(MogpError::Dim(format!("{} noise vars for D={}", self.log_noise_vars.len(), d)));
        }
        if self.log_noise_vars.iter().any(|x| !x.is_finite() || !x.exp().is_finite()) {
            return Err(MogpError::Config("noise variance out of range".into()));
        }
        if self.mixing.iter().any(|x| !x.is_finite()) {
            return Err(MogpError::Config("non-finite mixing weight".into()));
        }
        if let Some(z) = &self.inducing_inputs {
            if z.ncols() == 0 {
                return Err(MogpError::Config("inducing inputs present but empty".into()));
            }
            if z.nrows() != p {
                return Err(MogpError::Dim(format!("inducing inputs have dim {} != p={}", z.nrows(), p)));
            }
            if z.iter().any(|x| !x.is_finite()) {
                return Err(MogpError::Config("non-finite inducing input".into()));
            }
        }
        Ok(())
    }
}

/// Flat layout of a packed parameter vector. Order is fixed and documented:
/// latent log precisions (latent-major), output log precisions
/// (output-major), mixing row-major, log noise variances, then inducing
/// inputs (point-major) when present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub q: usize,
    pub d: usize,
    pub p: usize,
    /// Number of inducing points packed at the tail (0 when absent).
    pub k: usize,
}

impl ParamLayout {
    pub fn of(theta: &ClassHyperparams, cfg: &KernelConfig) -> ParamLayout {
        ParamLayout { q: cfg.q, d: theta.n_outputs(), p: cfg.input_dim, k: theta.n_inducing() }
    }

    pub fn latent_start(&self) -> usize {
        0
    }
    pub fn output_start(&self) -> usize {
        self.q * self.p
    }
    pub fn mixing_start(&self) -> usize {
        self.output_start() + self.d * self.p
    }
    pub fn noise_start(&self) -> usize {
        self.mixing_start() + self.d * self.q
    }
    pub fn inducing_start(&self) -> usize {
        self.noise_start() + self.d
    }
    /// Length without the inducing tail.
    pub fn hyper_len(&self) -> usize {
        self.inducing_start()
    }
    pub fn total_len(&self) -> usize {
        self.inducing_start() + self.k * self.p
    }

    pub fn latent_index(&self, q: usize, dim: usize) -> usize {
        self.latent_start() + q * self.p + dim
    }
    pub fn output_index(&self, d: usize, dim: usize) -> usize {
        self.output_start() + d * self.p + dim
    }
    pub fn mixing_index(&self, d: usize, q: usize) -> usize {
        self.mixing_start() + d * self.q + q
    }
    pub fn noise_index(&self, d: usize) -> usize {
        self.noise_start() + d
    }
    pub fn inducing_index(&self, k: usize, dim: usize) -> usize {
        self.inducing_start() + k * self.p + dim
    }
}

/// Flatten hyperparameters into the documented packed layout.
pub fn pack_params(theta: &ClassHyperparams, cfg: &KernelConfig) -> DVector<f64> {
    let layout = ParamLayout::of(theta, cfg);
    let mut v = DVector::zeros(layout.total_len());
    for (qi, lp) in theta.latent_log_precisions.iter().enumerate() {
        for dim in 0..layout.p {
            v[layout.latent_index(qi, dim)] = lp[dim];
        }
    }
    for (di, op) in theta.output_log_precisions.iter().enumerate() {
        for dim in 0..layout.p {
            v[layout.output_index(di, dim)] = op[dim];
        }
    }
    for di in 0..layout.d {
        for qi in 0..layout.q {
            v[layout.mixing_index(di, qi)] = theta.mixing[(di, qi)];
        }
    }
    for di in 0..layout.d {
        v[layout.noise_index(di)] = theta.log_noise_vars[di];
    }
    if let Some(z) = &theta.inducing_inputs {
        for ki in 0..layout.k {
            for dim in 0..layout.p {
                v[layout.inducing_index(ki, dim)] = z[(dim, ki)];
            }
        }
    }
    v
}

/// Inverse of [`pack_params`]; errors on length mismatch.
pub fn unpack_params(v: &[f64], layout: &ParamLayout) -> Result<ClassHyperparams> {
    if v.len() != layout.total_len() {
        return Err(MogpError::Dim(format!(
            "packed vector has length {} but layout expects {}",
            v.len(),
            layout.total_len()
        )));
    }
    let latent = (0..layout.q)
        .map(|qi| DVector::from_fn(layout.p, |dim, _| v[layout.latent_index(qi, dim)]))
        .collect();
    let output = (0..layout.d)
        .map(|di| DVector::from_fn(layout.p, |dim, _| v[layout.output_index(di, dim)]))
        .collect();
    let mixing = DMatrix::from_fn(layout.d, layout.q, |di, qi| v[layout.mixing_index(di, qi)]);
    let noise = DVector::from_fn(layout.d, |di, _| v[layout.noise_index(di)]);
    let inducing = if layout.k > 0 {
        Some(DMatrix::from_fn(layout.p, layout.k, |dim, ki| v[layout.inducing_index(ki, dim)]))
    } else {
        None
    };
    Ok(ClassHyperparams {
        latent_log_precisions: latent,
        output_log_precisions: output,
        mixing,
        log_noise_vars: noise,
        inducing_inputs: inducing,
    })
}

/// Which likelihood to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Approx {
    Exact,
    Fitc,
    Pitc,
}

impl std::fmt::Display for Approx {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Approx::Exact => write!(f, "exact"),
            Approx::Fitc => write!(f, "fitc"),
            Approx::Pitc => write!(f, "pitc"),
        }
    }
}

/// Per-output normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputStats {
    pub mean: f64,
    pub std: f64,
}

/// Affine scaling of log marginal likelihoods used for scoring:
/// g = a·log p + b. `a` keeps exp(η·g) inside double range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GScaling {
    pub a: f64,
    pub b: f64,
}

impl Default for GScaling {
    fn default() -> Self {
        GScaling { a: 1.0, b: 0.0 }
    }
}

/// A trained classifier: one set of hyperparameters per class plus everything
/// needed to score new instances consistently.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub per_class: Vec<ClassHyperparams>,
    pub class_names: Vec<String>,
    pub kernel: KernelConfig,
    pub approx: Approx,
    pub scaling: GScaling,
    pub normalization: Option<Vec<OutputStats>>,
}

impl ModelBundle {
    pub fn n_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.per_class.len() != self.class_names.len() {
            return Err(MogpError::Dim(format!(
                "{} parameter sets vs {} class names",
                self.per_class.len(),
                self.class_names.len()
            )));
        }
        if self.per_class.is_empty() {
            return Err(MogpError::Config("model has no classes".into()));
        }
        if !(self.scaling.a > 0.0) || !self.scaling.a.is_finite() || !self.scaling.b.is_finite() {
            return Err(MogpError::Config("score scaling requires finite a > 0 and finite b".into()));
        }
        let d0 = self.per_class[0].n_outputs();
        for (name, theta) in self.class_names.iter().zip(&self.per_class) {
            theta.validate(&self.kernel).map_err(|e| e.with_context(&format!("class '{name}'")))?;
            if theta.n_outputs() != d0 {
                return Err(MogpError::Dim(format!("class '{name}' has D={} but model D={d0}", theta.n_outputs())));
            }
            if self.approx != Approx::Exact && theta.inducing_inputs.is_none() {
                return Err(MogpError::Config(format!(
                    "approximation '{}' requires inducing inputs (class '{name}' has none)",
                    self.approx
                )));
            }
        }
        if let Some(stats) = &self.normalization {
            if stats.len() != d0 {
                return Err(MogpError::Dim(format!("{} normalization entries for D={d0}", stats.len())));
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.per_class.first().map_or(0, |t| t.n_outputs())
    }
}

/// Settings of the minimum-classification-error objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MceConfig {
    /// Softmax sharpness of the rival-score aggregation (must be > 0).
    pub eta: f64,
    /// Sigmoid slope of the soft loss (must be > 0).
    pub gamma1: f64,
    /// Sigmoid offset of the soft loss.
    pub gamma2: f64,
    /// Score scale, g = a·log p + b (must be > 0).
    pub a: f64,
    /// Score offset.
    pub b: f64,
}

impl Default for MceConfig {
    fn default() -> Self {
        MceConfig { eta: 2.0, gamma1: 1.0, gamma2: 0.0, a: 1.0, b: 0.0 }
    }
}

impl MceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(MogpError::Config("eta must be > 0".into()));
        }
        if !(self.gamma1 > 0.0) {
            return Err(MogpError::Config("gamma1 must be > 0".into()));
        }
        if !(self.a > 0.0) {
            return Err(MogpError::Config("scaling a must be > 0".into()));
        }
        if ![self.eta, self.gamma1, self.gamma2, self.a, self.b].iter().all(|v| v.is_finite()) {
            return Err(MogpError::Config("MCE parameters must be finite".into()));
        }
        Ok(())
    }
}

/// What a training run did.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Objective value at the initial point and after every accepted step.
    pub objective_trace: Vec<f64>,
    /// Number of accepted steps (trace length is iterations + 1).
    pub iterations: usize,
    pub converged: bool,
    /// Seconds of wall time.
    pub wall_time: f64,
}
