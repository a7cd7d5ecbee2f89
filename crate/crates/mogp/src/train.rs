//! Generative per-class fitting (maximize the class log marginal) and joint
//! discriminative MCE fitting (minimize a smooth count of classification
//! errors), both over the backtracking gradient-descent optimizer.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{MogpError, Result};
use crate::likelihood::{grad_log_marginal, grad_log_marginal_sum, log_marginal, log_marginal_sum};
use crate::model::{
    pack_params, unpack_params, Approx, ClassHyperparams, Dataset, GScaling, Instance,
    KernelConfig, MceConfig, ModelBundle, ParamLayout, TrainReport,
};
use crate::optimize::{minimize, MinimizeOutcome, OptimizerConfig};

/// Per-instance quantities of the MCE objective.
#[derive(Debug, Clone)]
pub struct InstanceMce {
    pub class_idx: usize,
    pub instance_idx: usize,
    /// g-score under every class model.
    pub scores: Vec<f64>,
    /// Misclassification measure of the true class.
    pub measure: f64,
    /// Soft loss, strictly inside (0, 1) up to floating-point underflow.
    pub loss: f64,
}

/// All per-instance MCE quantities of one evaluation.
#[derive(Debug, Clone)]
pub struct MceState {
    pub entries: Vec<InstanceMce>,
}

/// Scaled and translated log marginal likelihood, `a·log p + b`.
pub fn g_score(
    inst: &Instance,
    theta: &ClassHyperparams,
    cfg: &KernelConfig,
    approx: Approx,
    a: f64,
    b: f64,
) -> Result<f64> {
    if !(a > 0.0) {
        return Err(MogpError::Config("scaling a must be > 0".into()));
    }
    Ok(a * log_marginal(inst, theta, cfg, approx)?.log_marginal + b)
}

/// Misclassification measure: `−g_m + (1/η)·log[(1/(M−1)) Σ_{k≠m} exp(η g_k)]`,
/// evaluated through a max-shifted log-sum-exp so it is finite for any
/// finite scores.
pub fn misclassification_measure(scores: &[f64], true_class: usize, eta: f64) -> f64 {
    assert!(scores.len() >= 2, "need at least two classes");
    assert!(true_class < scores.len());
    assert!(eta > 0.0);
    let mx = scores
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != true_class)
        .map(|(_, g)| *g)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != true_class)
        .map(|(_, g)| (eta * (g - mx)).exp())
        .sum();
    -scores[true_class] + mx + (sum.ln() - ((scores.len() - 1) as f64).ln()) / eta
}

/// Softmax weights of the rival classes inside the measure; used by the
/// gradient chain rule. Returns one weight per class, zero at `true_class`.
pub(crate) fn rival_weights(scores: &[f64], true_class: usize, eta: f64) -> Vec<f64> {
    let mx = scores
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != true_class)
        .map(|(_, g)| *g)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(k, g)| if k == true_class { 0.0 } else { (eta * (g - mx)).exp() })
        .collect();
    let total: f64 = w.iter().sum();
    for wi in &mut w {
        *wi /= total;
    }
    w
}

/// Soft 0/1 loss: logistic of the misclassification measure. Computed on
/// whichever side of zero keeps exp from overflowing.
pub fn mce_loss_single(d: f64, gamma1: f64, gamma2: f64) -> f64 {
    assert!(gamma1 > 0.0);
    let t = gamma1 * d - gamma2;
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn instance_scores(
    inst: &Instance,
    model: &ModelBundle,
    mce: &MceConfig,
) -> Result<Vec<f64>> {
    model
        .per_class
        .iter()
        .enumerate()
        .map(|(c, theta)| {
            g_score(inst, theta, &model.kernel, model.approx, mce.a, mce.b)
                .map_err(|e| e.with_context(&format!("class '{}'", model.class_names[c])))
        })
        .collect()
}

fn mce_entry(scores: Vec<f64>, class_idx: usize, instance_idx: usize, mce: &MceConfig) -> InstanceMce {
    let measure = misclassification_measure(&scores, class_idx, mce.eta);
    let loss = mce_loss_single(measure, mce.gamma1, mce.gamma2);
    InstanceMce { class_idx, instance_idx, scores, measure, loss }
}

/// Total MCE loss over a labeled dataset: the sum of per-instance soft
/// losses, strictly between 0 and the instance count.
pub fn mce_total_loss(model: &ModelBundle, ds: &Dataset, mce: &MceConfig) -> Result<(f64, MceState)> {
    mce.validate()?;
    if model.n_classes() != ds.n_classes() {
        return Err(MogpError::Dim(format!(
            "model has {} classes but dataset has {}",
            model.n_classes(),
            ds.n_classes()
        )));
    }
    if model.n_classes() < 2 {
        return Err(MogpError::Config("MCE needs at least two classes".into()));
    }
    let jobs: Vec<(usize, usize, &Instance)> = ds
        .classes
        .iter()
        .enumerate()
        .flat_map(|(m, c)| c.instances.iter().enumerate().map(move |(l, inst)| (m, l, inst)))
        .collect();
    let entries: Result<Vec<InstanceMce>> = jobs
        .par_iter()
        .map(|(m, l, inst)| Ok(mce_entry(instance_scores(inst, model, mce)?, *m, *l, mce)))
        .collect();
    let entries = entries?;
    let total = entries.iter().map(|e| e.loss).sum();
    Ok((total, MceState { entries }))
}

/// Offsets of each class's packed parameters inside the concatenated MCE
/// vector.
fn class_offsets(model: &ModelBundle) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(model.n_classes());
    let mut total = 0;
    for theta in &model.per_class {
        offsets.push(total);
        total += ParamLayout::of(theta, &model.kernel).total_len();
    }
    (offsets, total)
}

fn mce_value_grad(
    model: &ModelBundle,
    ds: &Dataset,
    mce: &MceConfig,
    include_inducing: bool,
) -> Result<(f64, DVector<f64>)> {
    let (offsets, total_len) = class_offsets(model);
    let jobs: Vec<(usize, usize, &Instance)> = ds
        .classes
        .iter()
        .enumerate()
        .flat_map(|(m, c)| c.instances.iter().enumerate().map(move |(l, inst)| (m, l, inst)))
        .collect();

    // Each instance contributes to the gradient of every class.
    let per_instance: Result<Vec<(f64, Vec<DVector<f64>>, Vec<f64>)>> = jobs
        .par_iter()
        .map(|(m, _l, inst)| {
            let mut scores = Vec::with_capacity(model.n_classes());
            let mut grads = Vec::with_capacity(model.n_classes());
            for theta in &model.per_class {
                let res = grad_log_marginal(inst, theta, &model.kernel, model.approx, include_inducing)?;
                scores.push(mce.a * res.log_marginal + mce.b);
                grads.push(res.gradient.expect("gradient requested"));
            }
            let measure = misclassification_measure(&scores, *m, mce.eta);
            let loss = mce_loss_single(measure, mce.gamma1, mce.gamma2);
            let factor = mce.gamma1 * loss * (1.0 - loss);
            let weights = rival_weights(&scores, *m, mce.eta);
            let mut coeff = vec![0.0; model.n_classes()];
            for c in 0..model.n_classes() {
                // ∂d_m/∂θ_c chained through g = a·log p + b.
                coeff[c] = if c == *m { -factor * mce.a } else { factor * weights[c] * mce.a };
            }
            Ok((loss, grads, coeff))
        })
        .collect();

    let mut grad = DVector::zeros(total_len);
    let mut total = 0.0;
    for (loss, grads, coeff) in per_instance? {
        total += loss;
        for c in 0..model.n_classes() {
            if coeff[c] == 0.0 {
                continue;
            }
            let g = &grads[c];
            for j in 0..g.len() {
                grad[offsets[c] + j] += coeff[c] * g[j];
            }
        }
    }
    Ok((total, grad))
}

/// Gradient of the total MCE loss over the concatenation of every class's
/// packed parameters. Inducing coordinates are populated only when
/// `include_inducing` is set (and the approximation uses them).
pub fn mce_gradient(
    model: &ModelBundle,
    ds: &Dataset,
    mce: &MceConfig,
    include_inducing: bool,
) -> Result<DVector<f64>> {
    mce.validate()?;
    Ok(mce_value_grad(model, ds, mce, include_inducing)?.1)
}

/// Guard against parameters wandering to where exp() overflows.
fn plausible(theta: &ClassHyperparams, cfg: &KernelConfig) -> Result<()> {
    theta.validate(cfg)?;
    let bound = 60.0;
    let ok = theta
        .latent_log_precisions
        .iter()
        .chain(theta.output_log_precisions.iter())
        .all(|v| v.iter().all(|x| x.abs() < bound))
        && theta.log_noise_vars.iter().all(|x| x.abs() < bound);
    if ok {
        Ok(())
    } else {
        Err(MogpError::Numerical("log parameter out of plausible range".into()))
    }
}

/// Maximize the summed log marginal likelihood of one class by gradient
/// ascent from `init`. The returned trace is the (maximized) objective, so
/// it is non-decreasing across accepted steps; `max_iters = 0` returns the
/// initialization untouched.
pub fn fit_generative(
    class_data: &[Instance],
    cfg: &KernelConfig,
    init: &ClassHyperparams,
    opt: &OptimizerConfig,
    approx: Approx,
    optimize_inducing: bool,
) -> Result<(ClassHyperparams, TrainReport)> {
    if class_data.is_empty() {
        return Err(MogpError::Data("class has no instances".into()));
    }
    init.validate(cfg)?;
    let start = Instant::now();
    let layout = ParamLayout::of(init, cfg);
    let move_inducing = optimize_inducing && approx != Approx::Exact && layout.k > 0;
    let n_opt = if move_inducing { layout.total_len() } else { layout.hyper_len() };
    let full_init = pack_params(init, cfg);
    let frozen_tail = full_init.rows(n_opt, layout.total_len() - n_opt).into_owned();

    let assemble = |x: &DVector<f64>| -> Result<ClassHyperparams> {
        let mut full = DVector::zeros(layout.total_len());
        full.rows_mut(0, n_opt).copy_from(x);
        full.rows_mut(n_opt, frozen_tail.len()).copy_from(&frozen_tail);
        let theta = unpack_params(full.as_slice(), &layout)?;
        plausible(&theta, cfg)?;
        Ok(theta)
    };

    let objective = |x: &DVector<f64>, need_grad: bool| -> Result<(f64, Option<DVector<f64>>)> {
        let theta = assemble(x)?;
        if need_grad {
            let (value, grad) = grad_log_marginal_sum(class_data, &theta, cfg, approx, move_inducing)?;
            let g = DVector::from_fn(n_opt, |i, _| -grad[i]);
            Ok((-value, Some(g)))
        } else {
            Ok((-log_marginal_sum(class_data, &theta, cfg, approx)?, None))
        }
    };

    let x0 = full_init.rows(0, n_opt).into_owned();
    let out: MinimizeOutcome = minimize(objective, x0, opt)?;
    let theta = assemble(&out.x)?;
    let report = TrainReport {
        objective_trace: out.trace.iter().map(|v| -v).collect(),
        iterations: out.iterations,
        converged: out.converged,
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((theta, report))
}

/// Minimize the total MCE loss jointly over every class's parameters,
/// starting from the models in `init` (normally the generative fits). The
/// returned bundle carries the MCE scaling so prediction scores match
/// training scores; the trace is non-increasing across accepted steps.
pub fn fit_mce(
    ds: &Dataset,
    init: &ModelBundle,
    mce: &MceConfig,
    opt: &OptimizerConfig,
    optimize_inducing: bool,
) -> Result<(ModelBundle, TrainReport)> {
    mce.validate()?;
    init.validate()?;
    if ds.n_classes() < 2 {
        return Err(MogpError::Config("MCE training needs at least two classes".into()));
    }
    if init.n_classes() != ds.n_classes() {
        return Err(MogpError::Dim(format!(
            "init has {} classes but dataset has {}",
            init.n_classes(),
            ds.n_classes()
        )));
    }
    let start = Instant::now();
    let mut bundle = init.clone();
    bundle.scaling = GScaling { a: mce.a, b: mce.b };

    let layouts: Vec<ParamLayout> =
        bundle.per_class.iter().map(|t| ParamLayout::of(t, &bundle.kernel)).collect();
    let move_inducing = optimize_inducing && bundle.approx != Approx::Exact;
    // Per-class slice of the optimized vector: full packed params when the
    // inducing inputs move, the hyper prefix otherwise.
    let opt_lens: Vec<usize> = layouts
        .iter()
        .map(|l| if move_inducing && l.k > 0 { l.total_len() } else { l.hyper_len() })
        .collect();
    let opt_offsets: Vec<usize> = opt_lens
        .iter()
        .scan(0, |acc, len| {
            let v = *acc;
            *acc += len;
            Some(v)
        })
        .collect();
    let n_opt: usize = opt_lens.iter().sum();

    let full_init: Vec<DVector<f64>> =
        bundle.per_class.iter().map(|t| pack_params(t, &bundle.kernel)).collect();

    let assemble = |x: &DVector<f64>, bundle: &ModelBundle| -> Result<Vec<ClassHyperparams>> {
        let mut thetas = Vec::with_capacity(bundle.n_classes());
        for c in 0..bundle.n_classes() {
            let mut full = full_init[c].clone();
            for j in 0..opt_lens[c] {
                full[j] = x[opt_offsets[c] + j];
            }
            let theta = unpack_params(full.as_slice(), &layouts[c])?;
            plausible(&theta, &bundle.kernel)?;
            thetas.push(theta);
        }
        Ok(thetas)
    };

    let x0 = {
        let mut x = DVector::zeros(n_opt);
        for c in 0..bundle.n_classes() {
            for j in 0..opt_lens[c] {
                x[opt_offsets[c] + j] = full_init[c][j];
            }
        }
        x
    };

    let bundle_ref = bundle.clone();
    let objective = |x: &DVector<f64>, need_grad: bool| -> Result<(f64, Option<DVector<f64>>)> {
        let mut candidate = bundle_ref.clone();
        candidate.per_class = assemble(x, &bundle_ref)?;
        if need_grad {
            let (value, grad) = mce_value_grad(&candidate, ds, mce, move_inducing)?;
            // Project the concatenated gradient onto the optimized slices.
            let mut g = DVector::zeros(n_opt);
            let (full_offsets, _) = class_offsets(&candidate);
            for c in 0..candidate.n_classes() {
                for j in 0..opt_lens[c] {
                    g[opt_offsets[c] + j] = grad[full_offsets[c] + j];
                }
            }
            Ok((value, Some(g)))
        } else {
            Ok((mce_total_loss(&candidate, ds, mce)?.0, None))
        }
    };

    let out = minimize(objective, x0, opt)?;
    bundle.per_class = assemble(&out.x, &bundle_ref)?;
    let report = TrainReport {
        objective_trace: out.trace,
        iterations: out.iterations,
        converged: out.converged,
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((bundle, report))
}

/// Default score scale `a = 1/(D·N̄)`: one over the mean stacked length, so
/// g-scores sit at per-point scale regardless of instance size.
pub fn default_scale_a(ds: &Dataset) -> f64 {
    let denom = ds.output_dim as f64 * ds.mean_points();
    if denom > 0.0 {
        1.0 / denom
    } else {
        1.0
    }
}

/// Data-driven deterministic initialization for training. Lengthscales are
/// set relative to the class's input range (latent scales spread across
/// latent functions, smoothing scales sharper), noise starts at 1e-4 of the
/// per-output variance, and mixing weights are scaled so the prior marginal
/// variance matches the sample variance, with seeded sign and magnitude
/// perturbation to break symmetry between latent functions.
pub fn init_hyperparams(
    class_data: &[Instance],
    cfg: &KernelConfig,
    seed: u64,
    num_inducing: Option<usize>,
) -> Result<ClassHyperparams> {
    if class_data.is_empty() {
        return Err(MogpError::Data("class has no instances".into()));
    }
    let p = cfg.input_dim;
    let d_out = class_data[0].output_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_6770);

    // Per-dimension input range over the class.
    let mut lo = vec![f64::INFINITY; p];
    let mut hi = vec![f64::NEG_INFINITY; p];
    for inst in class_data {
        for j in 0..inst.n_points() {
            for dim in 0..p {
                lo[dim] = lo[dim].min(inst.inputs[(dim, j)]);
                hi[dim] = hi[dim].max(inst.inputs[(dim, j)]);
            }
        }
    }
    let range: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| (b - a).max(1e-6)).collect();

    // Per-output sample variance.
    let mut var = vec![0.0; d_out];
    let mut mean = vec![0.0; d_out];
    let mut count = 0usize;
    for inst in class_data {
        count += inst.n_points();
        for j in 0..inst.n_points() {
            for d in 0..d_out {
                mean[d] += inst.outputs[(d, j)];
            }
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    for inst in class_data {
        for j in 0..inst.n_points() {
            for d in 0..d_out {
                let dv = inst.outputs[(d, j)] - mean[d];
                var[d] += dv * dv;
            }
        }
    }
    for v in &mut var {
        *v = (*v / count as f64).max(1e-8);
    }

    // Latent lengthscales spread over [0.12, 0.35]·range.
    let latent_log_precisions: Vec<DVector<f64>> = (0..cfg.q)
        .map(|q| {
            let frac = if cfg.q == 1 { 0.2 } else { 0.12 + 0.23 * q as f64 / (cfg.q - 1) as f64 };
            DVector::from_fn(p, |dim, _| {
                let ell = frac * range[dim];
                -2.0 * ell.ln()
            })
        })
        .collect();
    let output_log_precisions: Vec<DVector<f64>> = (0..d_out)
        .map(|_| {
            DVector::from_fn(p, |dim, _| {
                let ell = 0.05 * range[dim];
                -2.0 * ell.ln()
            })
        })
        .collect();

    let mut theta = ClassHyperparams {
        latent_log_precisions,
        output_log_precisions,
        mixing: DMatrix::zeros(d_out, cfg.q),
        log_noise_vars: DVector::from_fn(d_out, |d, _| (1e-4 * var[d]).ln()),
        inducing_inputs: None,
    };

    // Mixing such that k_dd(x, x) ≈ var_d, split across latent functions.
    let dens0 = {
        let eval = crate::kernel::KernelEval::new(&theta, cfg)?;
        (0..d_out)
            .map(|d| (0..cfg.q).map(|q| eval.ff_params(q, d, d).norm).collect::<Vec<f64>>())
            .collect::<Vec<_>>()
    };
    for d in 0..d_out {
        for q in 0..cfg.q {
            let base = (var[d] / (cfg.q as f64 * dens0[d][q])).sqrt();
            let scale = 0.7 + 0.6 * rng.random_range(0.0..1.0);
            let sign = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
            theta.mixing[(d, q)] = sign * scale * base;
        }
    }

    if let Some(k) = num_inducing {
        theta.inducing_inputs = Some(uniform_inducing_grid(&lo, &hi, k)?);
    }
    theta.validate(cfg)?;
    Ok(theta)
}

/// K inducing points on a uniform grid over the bounding box. For p = 1 this
/// is a plain linspace; in higher dimensions a lattice with ⌈K^(1/p)⌉ points
/// per axis is built and the first K lattice points are kept.
pub fn uniform_inducing_grid(lo: &[f64], hi: &[f64], k: usize) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Err(MogpError::Config("need at least one inducing point".into()));
    }
    let p = lo.len();
    let per_axis = (k as f64).powf(1.0 / p as f64).ceil() as usize;
    let per_axis = per_axis.max(1);
    let coord = |dim: usize, i: usize| -> f64 {
        if per_axis == 1 {
            0.5 * (lo[dim] + hi[dim])
        } else {
            lo[dim] + (hi[dim] - lo[dim]) * i as f64 / (per_axis - 1) as f64
        }
    };
    let mut z = DMatrix::zeros(p, k);
    for flat in 0..k {
        let mut rem = flat;
        for dim in 0..p {
            let i = rem % per_axis;
            rem /= per_axis;
            z[(dim, flat)] = coord(dim, i);
        }
    }
    Ok(z)
}
