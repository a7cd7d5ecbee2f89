//! Dataset and model persistence, per-output normalization, the synthetic
//! MOGP generator that stands in for real captures, and grid decimation for
//! frame-rate experiments.
//!
//! All formats are text. A dataset is a JSON manifest plus one CSV per
//! instance (header `x1..xp,f1..fD`, one row per input point); a model is a
//! single versioned JSON document. Floats are written in shortest
//! round-trip form, so save/load is lossless.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MogpError, Result};
use crate::kernel::build_kff_factored;
use crate::model::{
    validate_dataset, Approx, ClassData, ClassHyperparams, Dataset, GScaling, Instance,
    KernelConfig, KernelMode, ModelBundle, OutputStats,
};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MODEL_FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Dataset manifest + instance files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    format_version: u32,
    input_dim: usize,
    output_dim: usize,
    classes: Vec<ManifestClass>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestClass {
    name: String,
    instances: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MogpError + '_ {
    move |source| MogpError::Io { path: path.to_path_buf(), source }
}

fn schema_err(path: &Path, message: impl Into<String>) -> MogpError {
    MogpError::Schema { path: path.to_path_buf(), message: message.into() }
}

/// Resolve a dataset argument: either a manifest file or a directory
/// containing `manifest.json`.
fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

fn expected_header(p: usize, d: usize) -> Vec<String> {
    (1..=p).map(|i| format!("x{i}")).chain((1..=d).map(|i| format!("f{i}"))).collect()
}

fn load_instance_file(path: &Path, p: usize, d: usize) -> Result<Instance> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| schema_err(path, e.to_string()))?;
    let want = expected_header(p, d);
    let headers = reader.headers().map_err(|e| schema_err(path, e.to_string()))?;
    let got: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    if got != want {
        return Err(schema_err(
            path,
            format!("bad header: expected '{}', found '{}'", want.join(","), got.join(",")),
        ));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| schema_err(path, e.to_string()))?;
        let line = record.position().map(|pos| pos.line()).unwrap_or(0);
        if record.len() != p + d {
            return Err(schema_err(
                path,
                format!("line {line}: expected {} columns, found {}", p + d, record.len()),
            ));
        }
        let mut row = Vec::with_capacity(p + d);
        for (col, cell) in record.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| {
                schema_err(path, format!("line {line}: non-numeric cell '{cell}' in column {}", col + 1))
            })?;
            if !value.is_finite() {
                return Err(schema_err(path, format!("line {line}: non-finite value '{cell}'")));
            }
            row.push(value);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(schema_err(path, "instance file has no data rows"));
    }
    let n = rows.len();
    let inputs = DMatrix::from_fn(p, n, |dim, j| rows[j][dim]);
    let outputs = DMatrix::from_fn(d, n, |dim, j| rows[j][p + dim]);
    let mut inst = Instance::new(inputs, outputs)?;
    inst.source = Some(path.to_path_buf());
    Ok(inst)
}

/// Load a dataset from a manifest (or a directory holding `manifest.json`).
/// Instance paths are resolved relative to the manifest. The result is
/// guaranteed to pass [`validate_dataset`].
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = manifest_path(path);
    let text = fs::read_to_string(&manifest).map_err(io_err(&manifest))?;
    let parsed: ManifestFile =
        serde_json::from_str(&text).map_err(|e| schema_err(&manifest, e.to_string()))?;
    if parsed.format_version != DATASET_FORMAT_VERSION {
        return Err(schema_err(
            &manifest,
            format!("unsupported format_version {} (expected {DATASET_FORMAT_VERSION})", parsed.format_version),
        ));
    }
    if parsed.input_dim == 0 || parsed.output_dim == 0 {
        return Err(schema_err(&manifest, "input_dim and output_dim must be positive"));
    }
    let base = manifest.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut classes = Vec::with_capacity(parsed.classes.len());
    for (ci, class) in parsed.classes.iter().enumerate() {
        let mut instances = Vec::with_capacity(class.instances.len());
        for rel in &class.instances {
            let file = base.join(rel);
            let mut inst = load_instance_file(&file, parsed.input_dim, parsed.output_dim)?;
            inst.class_id = Some(ci);
            instances.push(inst);
        }
        classes.push(ClassData { name: class.name.clone(), instances });
    }
    let ds = Dataset { classes, input_dim: parsed.input_dim, output_dim: parsed.output_dim };
    let violations = validate_dataset(&ds);
    if !violations.is_empty() {
        let listed: Vec<String> = violations.iter().take(5).map(|v| v.to_string()).collect();
        return Err(MogpError::Data(format!(
            "dataset fails validation ({} violations): {}",
            violations.len(),
            listed.join("; ")
        )));
    }
    Ok(ds)
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

/// Write a dataset as manifest + instance CSVs under `dir`; returns the
/// manifest path. Existing files are overwritten.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = ManifestFile {
        format_version: DATASET_FORMAT_VERSION,
        input_dim: ds.input_dim,
        output_dim: ds.output_dim,
        classes: Vec::new(),
    };
    for (ci, class) in ds.classes.iter().enumerate() {
        let subdir_name = format!("c{ci}_{}", sanitize(&class.name));
        let subdir = dir.join(&subdir_name);
        fs::create_dir_all(&subdir).map_err(io_err(&subdir))?;
        let mut paths = Vec::with_capacity(class.instances.len());
        for (li, inst) in class.instances.iter().enumerate() {
            let rel = format!("{subdir_name}/instance_{li:04}.csv");
            let file = dir.join(&rel);
            let mut writer = csv::Writer::from_path(&file).map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(source) => MogpError::Io { path: file.clone(), source },
                other => schema_err(&file, format!("{other:?}")),
            })?;
            writer
                .write_record(expected_header(ds.input_dim, ds.output_dim))
                .and_then(|_| {
                    for j in 0..inst.n_points() {
                        let mut row: Vec<String> = Vec::with_capacity(ds.input_dim + ds.output_dim);
                        for dim in 0..ds.input_dim {
                            row.push(format!("{}", inst.inputs[(dim, j)]));
                        }
                        for d in 0..ds.output_dim {
                            row.push(format!("{}", inst.outputs[(d, j)]));
                        }
                        writer.write_record(&row)?;
                    }
                    writer.flush()?;
                    Ok(())
                })
                .map_err(|e| schema_err(&file, e.to_string()))?;
            paths.push(rel);
        }
        manifest.classes.push(ManifestClass { name: class.name.clone(), instances: paths });
    }
    let manifest_file = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| schema_err(&manifest_file, e.to_string()))?;
    fs::write(&manifest_file, text + "\n").map_err(io_err(&manifest_file))?;
    Ok(manifest_file)
}

// ---------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    kernel: KernelSchema,
    approx: String,
    scaling: ScalingSchema,
    #[serde(default)]
    normalization: Option<Vec<StatsSchema>>,
    classes: Vec<ClassSchema>,
}

#[derive(Debug, Serialize, Deserialize)]
struct KernelSchema {
    q: usize,
    mode: String,
    input_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScalingSchema {
    a: f64,
    b: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsSchema {
    mean: f64,
    std: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassSchema {
    name: String,
    latent_log_precisions: Vec<Vec<f64>>,
    output_log_precisions: Vec<Vec<f64>>,
    /// D rows of Q mixing weights.
    mixing: Vec<Vec<f64>>,
    log_noise_vars: Vec<f64>,
    /// K inducing points of p coordinates each.
    #[serde(default)]
    inducing_inputs: Option<Vec<Vec<f64>>>,
}

fn mode_to_str(mode: KernelMode) -> &'static str {
    match mode {
        KernelMode::Convolved => "convolved",
        KernelMode::Lmc => "lmc",
    }
}

fn mode_from_str(s: &str, path: &Path) -> Result<KernelMode> {
    match s {
        "convolved" => Ok(KernelMode::Convolved),
        "lmc" => Ok(KernelMode::Lmc),
        other => Err(schema_err(path, format!("unknown kernel mode '{other}'"))),
    }
}

fn approx_to_str(approx: Approx) -> &'static str {
    match approx {
        Approx::Exact => "exact",
        Approx::Fitc => "fitc",
        Approx::Pitc => "pitc",
    }
}

fn approx_from_str(s: &str, path: &Path) -> Result<Approx> {
    match s {
        "exact" => Ok(Approx::Exact),
        "fitc" => Ok(Approx::Fitc),
        "pitc" => Ok(Approx::Pitc),
        other => Err(schema_err(path, format!("unknown approximation tag '{other}'"))),
    }
}

fn theta_to_schema(name: &str, theta: &ClassHyperparams) -> ClassSchema {
    ClassSchema {
        name: name.to_string(),
        latent_log_precisions: theta
            .latent_log_precisions
            .iter()
            .map(|v| v.iter().cloned().collect())
            .collect(),
        output_log_precisions: theta
            .output_log_precisions
            .iter()
            .map(|v| v.iter().cloned().collect())
            .collect(),
        mixing: (0..theta.mixing.nrows())
            .map(|d| (0..theta.mixing.ncols()).map(|q| theta.mixing[(d, q)]).collect())
            .collect(),
        log_noise_vars: theta.log_noise_vars.iter().cloned().collect(),
        inducing_inputs: theta.inducing_inputs.as_ref().map(|z| {
            (0..z.ncols()).map(|k| (0..z.nrows()).map(|dim| z[(dim, k)]).collect()).collect()
        }),
    }
}

fn theta_from_schema(schema: &ClassSchema, path: &Path) -> Result<ClassHyperparams> {
    let to_vecs = |rows: &Vec<Vec<f64>>| -> Vec<DVector<f64>> {
        rows.iter().map(|r| DVector::from_vec(r.clone())).collect()
    };
    let d = schema.mixing.len();
    let q = schema.mixing.first().map_or(0, |r| r.len());
    if schema.mixing.iter().any(|r| r.len() != q) {
        return Err(schema_err(path, format!("ragged mixing matrix in class '{}'", schema.name)));
    }
    let mixing = DMatrix::from_fn(d, q, |di, qi| schema.mixing[di][qi]);
    let inducing = match &schema.inducing_inputs {
        None => None,
        Some(points) => {
            if points.is_empty() {
                return Err(schema_err(path, "inducing_inputs present but empty"));
            }
            let p = points[0].len();
            if points.iter().any(|pt| pt.len() != p) {
                return Err(schema_err(path, "ragged inducing_inputs"));
            }
            Some(DMatrix::from_fn(p, points.len(), |dim, k| points[k][dim]))
        }
    };
    Ok(ClassHyperparams {
        latent_log_precisions: to_vecs(&schema.latent_log_precisions),
        output_log_precisions: to_vecs(&schema.output_log_precisions),
        mixing,
        log_noise_vars: DVector::from_vec(schema.log_noise_vars.clone()),
        inducing_inputs: inducing,
    })
}

/// Write a model as a versioned JSON document. Floats round-trip exactly.
pub fn save_model(model: &ModelBundle, path: &Path) -> Result<()> {
    model.validate()?;
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        kernel: KernelSchema {
            q: model.kernel.q,
            mode: mode_to_str(model.kernel.mode).to_string(),
            input_dim: model.kernel.input_dim,
        },
        approx: approx_to_str(model.approx).to_string(),
        scaling: ScalingSchema { a: model.scaling.a, b: model.scaling.b },
        normalization: model
            .normalization
            .as_ref()
            .map(|stats| stats.iter().map(|s| StatsSchema { mean: s.mean, std: s.std }).collect()),
        classes: model
            .class_names
            .iter()
            .zip(&model.per_class)
            .map(|(name, theta)| theta_to_schema(name, theta))
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| schema_err(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let parsed: ModelFile = serde_json::from_str(&text).map_err(|e| schema_err(path, e.to_string()))?;
    if parsed.format_version != MODEL_FORMAT_VERSION {
        return Err(schema_err(
            path,
            format!("unsupported format_version {} (expected {MODEL_FORMAT_VERSION})", parsed.format_version),
        ));
    }
    let kernel = KernelConfig {
        q: parsed.kernel.q,
        mode: mode_from_str(&parsed.kernel.mode, path)?,
        input_dim: parsed.kernel.input_dim,
    };
    let model = ModelBundle {
        per_class: parsed
            .classes
            .iter()
            .map(|c| theta_from_schema(c, path))
            .collect::<Result<Vec<_>>>()?,
        class_names: parsed.classes.iter().map(|c| c.name.clone()).collect(),
        kernel,
        approx: approx_from_str(&parsed.approx, path)?,
        scaling: GScaling { a: parsed.scaling.a, b: parsed.scaling.b },
        normalization: parsed
            .normalization
            .map(|stats| stats.iter().map(|s| OutputStats { mean: s.mean, std: s.std }).collect()),
    };
    model.validate().map_err(|e| schema_err(path, e.to_string()))?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

const STD_FLOOR: f64 = 1e-12;

/// Per-output mean and standard deviation over every instance of a dataset.
pub fn normalize_fit(ds: &Dataset) -> Result<Vec<OutputStats>> {
    if ds.n_instances() == 0 {
        return Err(MogpError::Data("cannot fit normalization on an empty dataset".into()));
    }
    let d = ds.output_dim;
    let mut mean = vec![0.0; d];
    let mut count = 0usize;
    for inst in ds.classes.iter().flat_map(|c| &c.instances) {
        count += inst.n_points();
        for j in 0..inst.n_points() {
            for di in 0..d {
                mean[di] += inst.outputs[(di, j)];
            }
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; d];
    for inst in ds.classes.iter().flat_map(|c| &c.instances) {
        for j in 0..inst.n_points() {
            for di in 0..d {
                let dv = inst.outputs[(di, j)] - mean[di];
                var[di] += dv * dv;
            }
        }
    }
    Ok((0..d)
        .map(|di| OutputStats { mean: mean[di], std: (var[di] / count as f64).sqrt().max(STD_FLOOR) })
        .collect())
}

/// Map each output channel through `(f - mean) / std`.
pub fn normalize_apply(inst: &Instance, stats: &[OutputStats]) -> Result<Instance> {
    if stats.len() != inst.output_dim() {
        return Err(MogpError::Dim(format!(
            "{} normalization entries for D={}",
            stats.len(),
            inst.output_dim()
        )));
    }
    let mut out = inst.clone();
    for d in 0..inst.output_dim() {
        for j in 0..inst.n_points() {
            out.outputs[(d, j)] = (inst.outputs[(d, j)] - stats[d].mean) / stats[d].std;
        }
    }
    Ok(out)
}

/// Normalize every instance of a dataset.
pub fn normalize_dataset(ds: &Dataset, stats: &[OutputStats]) -> Result<Dataset> {
    let mut out = ds.clone();
    for class in &mut out.classes {
        for inst in &mut class.instances {
            *inst = normalize_apply(inst, stats)?;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// 1-D sampling grid of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub start: f64,
    pub end: f64,
    pub n: usize,
    /// When set, every instance gets its own grid with points perturbed by
    /// up to 0.3 of the spacing (grids then differ between instances).
    #[serde(default)]
    pub jitter: bool,
}

/// Deliberate model mismatch applied to the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Misspec {
    None,
    /// Smooth monotone time warp of strength `s < 1`: the signal is drawn on
    /// warped positions `u + s·sin(2πu)/(2π)` but presented on the straight
    /// grid, breaking stationarity while preserving marginal ranges.
    Warp { strength: f64 },
}

impl Default for Misspec {
    fn default() -> Self {
        Misspec::None
    }
}

/// Everything the generator needs; serializable as the `synth` CLI spec.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub kernel: KernelConfig,
    pub class_names: Vec<String>,
    /// Per-class generating hyperparameters.
    pub per_class: Vec<ClassHyperparams>,
    pub instances_per_class: usize,
    pub grid: GridSpec,
    pub misspec: Misspec,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SynthSpecFile {
    format_version: u32,
    seed: u64,
    kernel: KernelSchema,
    grid: GridSpec,
    instances_per_class: usize,
    #[serde(default)]
    misspecification: Option<Misspec>,
    classes: Vec<ClassSchema>,
}

pub fn load_synth_spec(path: &Path) -> Result<SynthSpec> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let parsed: SynthSpecFile = serde_json::from_str(&text).map_err(|e| schema_err(path, e.to_string()))?;
    if parsed.format_version != DATASET_FORMAT_VERSION {
        return Err(schema_err(path, format!("unsupported format_version {}", parsed.format_version)));
    }
    let kernel = KernelConfig {
        q: parsed.kernel.q,
        mode: mode_from_str(&parsed.kernel.mode, path)?,
        input_dim: parsed.kernel.input_dim,
    };
    let spec = SynthSpec {
        kernel,
        class_names: parsed.classes.iter().map(|c| c.name.clone()).collect(),
        per_class: parsed
            .classes
            .iter()
            .map(|c| theta_from_schema(c, path))
            .collect::<Result<Vec<_>>>()?,
        instances_per_class: parsed.instances_per_class,
        grid: parsed.grid,
        misspec: parsed.misspecification.unwrap_or_default(),
        seed: parsed.seed,
    };
    spec.validate().map_err(|e| schema_err(path, e.to_string()))?;
    Ok(spec)
}

pub fn save_synth_spec(spec: &SynthSpec, path: &Path) -> Result<()> {
    spec.validate()?;
    let file = SynthSpecFile {
        format_version: DATASET_FORMAT_VERSION,
        seed: spec.seed,
        kernel: KernelSchema {
            q: spec.kernel.q,
            mode: mode_to_str(spec.kernel.mode).to_string(),
            input_dim: spec.kernel.input_dim,
        },
        grid: spec.grid,
        instances_per_class: spec.instances_per_class,
        misspecification: Some(spec.misspec),
        classes: spec
            .class_names
            .iter()
            .zip(&spec.per_class)
            .map(|(name, theta)| theta_to_schema(name, theta))
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| schema_err(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.kernel.input_dim != 1 {
            return Err(MogpError::Config("synthetic grids are one-dimensional (input_dim must be 1)".into()));
        }
        if self.per_class.is_empty() || self.per_class.len() != self.class_names.len() {
            return Err(MogpError::Config("need one named hyperparameter set per class".into()));
        }
        if self.instances_per_class == 0 {
            return Err(MogpError::Config("instances_per_class must be at least 1".into()));
        }
        if self.grid.n < 2 {
            return Err(MogpError::Config("grid needs at least 2 points".into()));
        }
        if !(self.grid.start < self.grid.end) {
            return Err(MogpError::Config("grid start must be below end".into()));
        }
        if let Misspec::Warp { strength } = self.misspec {
            if !(0.0..1.0).contains(&strength) {
                return Err(MogpError::Config("warp strength must lie in [0, 1) to stay monotone".into()));
            }
        }
        let d = self.per_class[0].n_outputs();
        for (name, theta) in self.class_names.iter().zip(&self.per_class) {
            theta.validate(&self.kernel).map_err(|e| e.with_context(&format!("class '{name}'")))?;
            if theta.n_outputs() != d {
                return Err(MogpError::Config(format!("class '{name}' has a different output count")));
            }
        }
        Ok(())
    }
}

fn instance_rng(seed: u64, class: usize, instance: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 32) | instance as u64);
    rng
}

fn warp_grid(grid: &GridSpec, strength: f64, points: &[f64]) -> Vec<f64> {
    let span = grid.end - grid.start;
    points
        .iter()
        .map(|t| {
            let u = (t - grid.start) / span;
            let w = u + strength * (2.0 * std::f64::consts::PI * u).sin() / (2.0 * std::f64::consts::PI);
            grid.start + span * w
        })
        .collect()
}

/// Draw a dataset from per-class MOGP priors: `f ~ N(0, K_θ + noise)` on the
/// grid via Cholesky, warped when configured. Fully reproducible from the
/// seed; instances are generated on independent sub-streams so parallel and
/// sequential runs agree bit for bit.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let d_out = spec.per_class[0].n_outputs();
    let n = spec.grid.n;
    let strength = match spec.misspec {
        Misspec::None => 0.0,
        Misspec::Warp { strength } => strength,
    };
    let spacing = (spec.grid.end - spec.grid.start) / (n - 1) as f64;

    let jobs: Vec<(usize, usize)> = (0..spec.per_class.len())
        .flat_map(|c| (0..spec.instances_per_class).map(move |l| (c, l)))
        .collect();
    let instances: Result<Vec<(usize, Instance)>> = jobs
        .par_iter()
        .map(|&(c, l)| {
            let mut rng = instance_rng(spec.seed, c, l);
            let mut points: Vec<f64> =
                (0..n).map(|i| spec.grid.start + spacing * i as f64).collect();
            if spec.grid.jitter {
                for pt in &mut points {
                    *pt += 0.3 * spacing * rng.random_range(-1.0..1.0);
                }
            }
            let warped = warp_grid(&spec.grid, strength, &points);
            let x_draw = DMatrix::from_fn(1, n, |_, j| warped[j]);
            let (_, chol) = build_kff_factored(&x_draw, &spec.per_class[c], &spec.kernel, true)
                .map_err(|e| e.with_context(&format!("class {c} instance {l}")))?;
            let eps = DVector::from_fn(d_out * n, |_, _| rng.sample(StandardNormal));
            let f = chol.l() * eps;
            let outputs = DMatrix::from_fn(d_out, n, |d, j| f[d * n + j]);
            let inputs = DMatrix::from_fn(1, n, |_, j| points[j]);
            let mut inst = Instance::new(inputs, outputs)?;
            inst.class_id = Some(c);
            Ok((c, inst))
        })
        .collect();

    let mut classes: Vec<ClassData> = spec
        .class_names
        .iter()
        .map(|name| ClassData { name: name.clone(), instances: Vec::new() })
        .collect();
    for (c, inst) in instances? {
        classes[c].instances.push(inst);
    }
    Ok(Dataset { classes, input_dim: 1, output_dim: d_out })
}

// ---------------------------------------------------------------------------
// Decimation
// ---------------------------------------------------------------------------

/// Keep every k-th point of an instance (indices 0, k, 2k, ...). Inputs keep
/// their original coordinates, so the decimated grid genuinely differs from
/// the original. Errors when fewer than 2 points would remain.
pub fn decimate(inst: &Instance, keep_every: usize) -> Result<Instance> {
    if keep_every == 0 {
        return Err(MogpError::Config("keep_every must be at least 1".into()));
    }
    let kept: Vec<usize> = (0..inst.n_points()).step_by(keep_every).collect();
    if kept.len() < 2 {
        return Err(MogpError::Config(format!(
            "decimation by {keep_every} leaves {} point(s); need at least 2",
            kept.len()
        )));
    }
    let inputs = DMatrix::from_fn(inst.input_dim(), kept.len(), |dim, j| inst.inputs[(dim, kept[j])]);
    let outputs = DMatrix::from_fn(inst.output_dim(), kept.len(), |dim, j| inst.outputs[(dim, kept[j])]);
    let mut out = Instance::new(inputs, outputs)?;
    out.class_id = inst.class_id;
    out.source = inst.source.clone();
    Ok(out)
}

/// Decimate every instance of a dataset.
pub fn decimate_dataset(ds: &Dataset, keep_every: usize) -> Result<Dataset> {
    let mut out = ds.clone();
    for class in &mut out.classes {
        for inst in &mut class.instances {
            *inst = decimate(inst, keep_every)?;
        }
    }
    Ok(out)
}
