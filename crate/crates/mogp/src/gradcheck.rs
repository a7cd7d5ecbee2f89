//! Central-difference verification of every analytic gradient in the crate:
//! the per-class likelihood gradients under the configured approximation and
//! the MCE total-loss gradient. Failures are report entries, not errors.

use nalgebra::DVector;

use crate::error::{MogpError, Result};
use crate::likelihood::{grad_log_marginal_sum, log_marginal_sum};
use crate::model::{
    pack_params, unpack_params, Approx, Dataset, MceConfig, ModelBundle, ParamLayout,
};
use crate::train::{mce_gradient, mce_total_loss};

/// Parameter groups of the packed layout, reported separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    LatentPrecision,
    OutputPrecision,
    Mixing,
    Noise,
    Inducing,
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamGroup::LatentPrecision => write!(f, "latent-precision"),
            ParamGroup::OutputPrecision => write!(f, "output-precision"),
            ParamGroup::Mixing => write!(f, "mixing"),
            ParamGroup::Noise => write!(f, "noise"),
            ParamGroup::Inducing => write!(f, "inducing"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    /// What was differentiated: "likelihood 'class'" or "mce 'class'".
    pub scope: String,
    pub group: ParamGroup,
    /// Worst per-parameter error in the group (relative where the gradient
    /// is above the absolute floor, see below).
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{} {:>18} {:<16} max err {:.3e}",
                if g.pass { "ok  " } else { "FAIL" },
                g.scope,
                g.group.to_string(),
                g.max_rel_err
            )?;
        }
        Ok(())
    }
}

const ABS_FLOOR: f64 = 1e-8;

/// Error metric per parameter: relative where either side is above the
/// absolute floor; below the floor the pair passes when it agrees to the
/// floor (reported as its absolute gap scaled onto the floor otherwise).
fn param_err(analytic: f64, fd: f64) -> f64 {
    let denom = analytic.abs().max(fd.abs());
    let diff = (analytic - fd).abs();
    if denom < ABS_FLOOR {
        if diff <= ABS_FLOOR {
            0.0
        } else {
            diff / ABS_FLOOR
        }
    } else {
        diff / denom
    }
}

fn group_of(layout: &ParamLayout, idx: usize) -> ParamGroup {
    if idx < layout.output_start() {
        ParamGroup::LatentPrecision
    } else if idx < layout.mixing_start() {
        ParamGroup::OutputPrecision
    } else if idx < layout.noise_start() {
        ParamGroup::Mixing
    } else if idx < layout.inducing_start() {
        ParamGroup::Noise
    } else {
        ParamGroup::Inducing
    }
}

pub(crate) fn compare_grads(
    scope: &str,
    analytic: &DVector<f64>,
    fd: &DVector<f64>,
    layout: &ParamLayout,
    tolerance: f64,
    skip_inducing: bool,
) -> Vec<GroupReport> {
    let mut worst: Vec<(ParamGroup, f64)> = vec![
        (ParamGroup::LatentPrecision, 0.0),
        (ParamGroup::OutputPrecision, 0.0),
        (ParamGroup::Mixing, 0.0),
        (ParamGroup::Noise, 0.0),
        (ParamGroup::Inducing, 0.0),
    ];
    for j in 0..analytic.len() {
        let group = group_of(layout, j);
        if skip_inducing && group == ParamGroup::Inducing {
            continue;
        }
        let err = param_err(analytic[j], fd[j]);
        for w in &mut worst {
            if w.0 == group && err > w.1 {
                w.1 = err;
            }
        }
    }
    worst
        .into_iter()
        .filter(|(g, _)| !(skip_inducing && *g == ParamGroup::Inducing))
        .filter(|(g, _)| layout.k > 0 || *g != ParamGroup::Inducing)
        .map(|(group, err)| GroupReport {
            scope: scope.to_string(),
            group,
            max_rel_err: err,
            pass: err <= tolerance,
        })
        .collect()
}

#[cfg(feature = "fault-injection")]
fn inject_fault(scope_index: usize, layout: &ParamLayout, analytic: &mut DVector<f64>) {
    // Corrupt the first class's mixing gradient so the checker must flag it.
    if scope_index == 0 {
        analytic[layout.mixing_index(0, 0)] += 1.0;
    }
}

#[cfg(not(feature = "fault-injection"))]
fn inject_fault(_scope_index: usize, _layout: &ParamLayout, _analytic: &mut DVector<f64>) {}

/// Run central-difference checks of every packed parameter of every class,
/// for the model's configured approximation, and of the MCE total loss.
/// Guarded to small data: every instance must satisfy ND ≤ 200.
pub fn gradient_check(
    model: &ModelBundle,
    ds: &Dataset,
    mce: &MceConfig,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    model.validate()?;
    mce.validate()?;
    if !(step > 0.0) || !(tolerance > 0.0) {
        return Err(MogpError::Config("step and tolerance must be > 0".into()));
    }
    for class in &ds.classes {
        for inst in &class.instances {
            let nd = inst.n_points() * inst.output_dim();
            if nd > 200 {
                return Err(MogpError::Config(format!(
                    "gradient check is guarded to ND <= 200 per instance (got {nd})"
                )));
            }
        }
    }
    if model.n_classes() != ds.n_classes() {
        return Err(MogpError::Dim(format!(
            "model has {} classes, dataset has {}",
            model.n_classes(),
            ds.n_classes()
        )));
    }

    let include_inducing = model.approx != Approx::Exact;
    let mut groups = Vec::new();

    // Per-class likelihood gradients.
    for (c, class) in ds.classes.iter().enumerate() {
        let theta = &model.per_class[c];
        let layout = ParamLayout::of(theta, &model.kernel);
        let (_, mut analytic) =
            grad_log_marginal_sum(&class.instances, theta, &model.kernel, model.approx, include_inducing)?;
        inject_fault(c, &layout, &mut analytic);
        let packed = pack_params(theta, &model.kernel);
        let mut fd = DVector::zeros(layout.total_len());
        for j in 0..layout.total_len() {
            let mut plus = packed.clone();
            plus[j] += step;
            let mut minus = packed.clone();
            minus[j] -= step;
            let tp = unpack_params(plus.as_slice(), &layout)?;
            let tm = unpack_params(minus.as_slice(), &layout)?;
            let fp = log_marginal_sum(&class.instances, &tp, &model.kernel, model.approx)?;
            let fm = log_marginal_sum(&class.instances, &tm, &model.kernel, model.approx)?;
            fd[j] = (fp - fm) / (2.0 * step);
        }
        // In exact mode the inducing coordinates are inert on both sides;
        // comparing them is meaningless noise.
        let skip_inducing = model.approx == Approx::Exact;
        groups.extend(compare_grads(
            &format!("likelihood '{}'", class.name),
            &analytic,
            &fd,
            &layout,
            tolerance,
            skip_inducing,
        ));
    }

    // MCE total-loss gradient over the concatenated parameters.
    if model.n_classes() >= 2 {
        let analytic = mce_gradient(model, ds, mce, include_inducing)?;
        let mut offset = 0;
        for (c, class) in ds.classes.iter().enumerate() {
            let theta = &model.per_class[c];
            let layout = ParamLayout::of(theta, &model.kernel);
            let packed = pack_params(theta, &model.kernel);
            let mut fd = DVector::zeros(layout.total_len());
            for j in 0..layout.total_len() {
                let eval_at = |delta: f64| -> Result<f64> {
                    let mut v = packed.clone();
                    v[j] += delta;
                    let mut m2 = model.clone();
                    m2.per_class[c] = unpack_params(v.as_slice(), &layout)?;
                    Ok(mce_total_loss(&m2, ds, mce)?.0)
                };
                fd[j] = (eval_at(step)? - eval_at(-step)?) / (2.0 * step);
            }
            let analytic_slice = analytic.rows(offset, layout.total_len()).into_owned();
            groups.extend(compare_grads(
                &format!("mce '{}'", class.name),
                &analytic_slice,
                &fd,
                &layout,
                tolerance,
                model.approx == Approx::Exact,
            ));
            offset += layout.total_len();
        }
    }

    Ok(GradCheckReport { step, tolerance, groups })
}
