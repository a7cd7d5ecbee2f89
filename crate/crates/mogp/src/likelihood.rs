//! Log marginal likelihoods of an instance under a class model — exact,
//! FITC and PITC — with analytic gradients for every packed hyperparameter
//! and, optionally, the inducing inputs.
//!
//! The low-rank paths never form the ND×ND covariance. With
//! `K̃ = Σ + K_fu K_uu⁻¹ K_uf` (Σ the residual-corrected noise, diagonal for
//! FITC and per-output block-diagonal for PITC), everything runs through the
//! K×K Woodbury and determinant identities, so one evaluation costs
//! O(K²DN) for FITC.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{MogpError, Result};
use crate::kernel::{
    build_kff_factored, build_kfu, build_kuu_factored, cholesky_with_jitter, kff_diag,
    kff_output_block, KernelEval,
};
use crate::model::{Approx, ClassHyperparams, Instance, KernelConfig, ParamLayout};

pub use crate::gradcheck::{gradient_check, GradCheckReport, GroupReport, ParamGroup};

const LN_2PI: f64 = 1.8378770664093453;

/// Value of a likelihood evaluation, with the gradient aligned to the
/// [`crate::model::pack_params`] layout when one was requested.
#[derive(Debug, Clone)]
pub struct LikelihoodResult {
    pub log_marginal: f64,
    pub gradient: Option<DVector<f64>>,
}

fn ln_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Log density of `f` under N(0, cov), with the shared jitter ladder. This
/// is the seam the exact likelihood reduces to once the covariance is built.
pub fn gaussian_log_density(f: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if cov.nrows() != f.len() || cov.ncols() != f.len() {
        return Err(MogpError::Dim(format!(
            "covariance is {}x{} but the observation has length {}",
            cov.nrows(),
            cov.ncols(),
            f.len()
        )));
    }
    let (chol, _) = cholesky_with_jitter(cov)?;
    let alpha = chol.solve(f);
    Ok(-0.5 * f.dot(&alpha) - 0.5 * ln_det(&chol) - 0.5 * f.len() as f64 * LN_2PI)
}

/// The per-parameter gradient form `½ αᵀ (∂K) α − ½ tr(K⁻¹ ∂K)` with
/// `α = K⁻¹ f`, exposed directly so it can be exercised against hand-built
/// covariances.
pub fn gradient_quadratic_trace(f: &DVector<f64>, cov: &DMatrix<f64>, dcov: &DMatrix<f64>) -> Result<f64> {
    if dcov.shape() != cov.shape() {
        return Err(MogpError::Dim("covariance and derivative shapes differ".into()));
    }
    let (chol, _) = cholesky_with_jitter(cov)?;
    let alpha = chol.solve(f);
    let trace = chol.solve(dcov).trace();
    Ok(0.5 * alpha.dot(&(dcov * &alpha)) - 0.5 * trace)
}

fn check_instance(inst: &Instance, theta: &ClassHyperparams, cfg: &KernelConfig) -> Result<()> {
    if inst.input_dim() != cfg.input_dim {
        return Err(MogpError::Dim(format!(
            "instance input dim {} but kernel expects p={}",
            inst.input_dim(),
            cfg.input_dim
        )));
    }
    if inst.output_dim() != theta.n_outputs() {
        return Err(MogpError::Dim(format!(
            "instance output dim {} but model has D={}",
            inst.output_dim(),
            theta.n_outputs()
        )));
    }
    Ok(())
}

/// Exact log marginal likelihood via Cholesky of the full ND×ND covariance
/// (noise always included).
pub fn log_marginal_exact(inst: &Instance, theta: &ClassHyperparams, cfg: &KernelConfig) -> Result<LikelihoodResult> {
    check_instance(inst, theta, cfg)?;
    let f = inst.stacked_outputs();
    let (_, chol) = build_kff_factored(&inst.inputs, theta, cfg, true)?;
    let alpha = chol.solve(&f);
    let value = -0.5 * f.dot(&alpha) - 0.5 * ln_det(&chol) - 0.5 * f.len() as f64 * LN_2PI;
    Ok(LikelihoodResult { log_marginal: value, gradient: None })
}

pub fn log_marginal_fitc(inst: &Instance, theta: &ClassHyperparams, cfg: &KernelConfig) -> Result<LikelihoodResult> {
    sparse_log_marginal(inst, theta, cfg, Approx::Fitc)
}

pub fn log_marginal_pitc(inst: &Instance, theta: &ClassHyperparams, cfg: &KernelConfig) -> Result<LikelihoodResult> {
    sparse_log_marginal(inst, theta, cfg, Approx::Pitc)
}

/// Dispatch on the approximation kind.
pub fn log_marginal(inst: &Instance, theta: &ClassHyperparams, cfg: &KernelConfig, approx: Approx) -> Result<LikelihoodResult> {
    match approx {
        Approx::Exact => log_marginal_exact(inst, theta, cfg),
        Approx::Fitc | Approx::Pitc => sparse_log_marginal(inst, theta, cfg, approx),
    }
}

/// Sum of per-instance log marginals (the class objective). Instances are
/// evaluated in parallel and reduced in index order so the result is
/// deterministic.
pub fn log_marginal_sum(instances: &[Instance], theta: &ClassHyperparams, cfg: &KernelConfig, approx: Approx) -> Result<f64> {
    let vals: Result<Vec<f64>> = instances
        .par_iter()
        .enumerate()
        .map(|(l, inst)| {
            log_marginal(inst, theta, cfg, approx)
                .map(|r| r.log_marginal)
                .map_err(|e| e.with_context(&format!("instance {l}")))
        })
        .collect();
    Ok(vals?.iter().sum())
}

/// Value and gradient of the class objective, reduced deterministically.
pub fn grad_log_marginal_sum(
    instances: &[Instance],
    theta: &ClassHyperparams,
    cfg: &KernelConfig,
    approx: Approx,
    include_inducing: bool,
) -> Result<(f64, DVector<f64>)> {
    let results: Result<Vec<LikelihoodResult>> = instances
        .par_iter()
        .enumerate()
        .map(|(l, inst)| {
            grad_log_marginal(inst, theta, cfg, approx, include_inducing)
                .map_err(|e| e.with_context(&format!("instance {l}")))
        })
        .collect();
    let results = results?;
    let layout = ParamLayout::of(theta, cfg);
    let mut value = 0.0;
    let mut grad = DVector::zeros(layout.total_len());
    for r in results {
        value += r.log_marginal;
        grad += r.gradient.expect("gradient requested");
    }
    Ok((value, grad))
}

/// Log marginal likelihood with its gradient for every packed parameter.
/// Inducing-input coordinates are populated only when `include_inducing` is
/// set and the approximation actually depends on them; in exact mode they
/// are identically zero.
pub fn grad_log_marginal(
    inst: &Instance,
    theta: &ClassHyperparams,
    cfg: &KernelConfig,
    approx: Approx,
    include_inducing: bool,
) -> Result<LikelihoodResult> {
    check_instance(inst, theta, cfg)?;
    match approx {
        Approx::Exact => exact_gradient(inst, theta, cfg),
        Approx::Fitc | Approx::Pitc => sparse_gradient(inst, theta, cfg, approx, include_inducing),
    }
}

/// Second derivative shared by every Gaussian-factor partial:
/// d dens / d v_dim given the density value, the squared offset and 1/(2v).
#[inline]
fn ddens_dv(dens: f64, delta_sq: f64, inv2v: f64) -> f64 {
    dens * (delta_sq * 2.0 * inv2v * inv2v - inv2v)
}

fn exact_gradient(inst: &Instance, theta: &ClassHyperparams, cfg: &KernelConfig) -> Result<LikelihoodResult> {
    let f = inst.stacked_outputs();
    let x = &inst.inputs;
    let n = inst.n_points();
    let d_out = theta.n_outputs();
    let p = cfg.input_dim;
    let layout = ParamLayout::of(theta, cfg);
    let eval = KernelEval::new(theta, cfg)?;

    let (_, chol) = build_kff_factored(x, theta, cfg, true)?;
    let alpha = chol.solve(&f);
    let value = -0.5 * f.dot(&alpha) - 0.5 * ln_det(&chol) - 0.5 * f.len() as f64 * LN_2PI;

    // G = ½(ααᵀ − K⁻¹); the gradient of any parameter is ⟨G, ∂K⟩_F, so one
    // sweep over the upper triangle accumulates every parameter at once.
    let kinv = chol.inverse();
    let mut grad = DVector::zeros(layout.total_len());
    let convolved = matches!(cfg.mode, crate::model::KernelMode::Convolved);

    for d in 0..d_out {
        for d2 in d..d_out {
            let params: Vec<_> = (0..cfg.q).map(|q| eval.ff_params(q, d, d2)).collect();
            for i in 0..n {
                let j0 = if d == d2 { i } else { 0 };
                for j in j0..n {
                    let row = d * n + i;
                    let col = d2 * n + j;
                    let g = 0.5 * (alpha[row] * alpha[col] - kinv[(row, col)]);
                    let w = if row == col { g } else { 2.0 * g };
                    for q in 0..cfg.q {
                        let s_d = theta.mixing[(d, q)];
                        let s_d2 = theta.mixing[(d2, q)];
                        let pr = &params[q];
                        let mut expo = 0.0;
                        for dim in 0..p {
                            let delta = x[(dim, i)] - x[(dim, j)];
                            expo += delta * delta * pr.inv2v[dim];
                        }
                        let dens = pr.norm * (-expo).exp();
                        grad[layout.mixing_index(d, q)] += w * s_d2 * dens;
                        grad[layout.mixing_index(d2, q)] += w * s_d * dens;
                        let s_pair = s_d * s_d2;
                        if s_pair != 0.0 {
                            for dim in 0..p {
                                let delta = x[(dim, i)] - x[(dim, j)];
                                let dv = ddens_dv(dens, delta * delta, pr.inv2v[dim]);
                                grad[layout.latent_index(q, dim)] +=
                                    w * s_pair * dv * (-eval.inv_latent[q][dim]);
                                if convolved {
                                    grad[layout.output_index(d, dim)] +=
                                        w * s_pair * dv * (-eval.inv_output[d][dim]);
                                    grad[layout.output_index(d2, dim)] +=
                                        w * s_pair * dv * (-eval.inv_output[d2][dim]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    for d in 0..d_out {
        let noise = theta.noise_var(d);
        let mut diag_sum = 0.0;
        for i in 0..n {
            let idx = d * n + i;
            diag_sum += 0.5 * (alpha[idx] * alpha[idx] - kinv[(idx, idx)]);
        }
        grad[layout.noise_index(d)] = diag_sum * noise;
    }

    Ok(LikelihoodResult { log_marginal: value, gradient: Some(grad) })
}

/// Residual-corrected noise structure Σ of the low-rank covariance.
enum Sigma {
    Diag(DVector<f64>),
    Blocks { chols: Vec<Cholesky<f64, Dyn>> },
}

impl Sigma {
    fn solve_vec(&self, b: &DVector<f64>, n_pts: usize) -> DVector<f64> {
        match self {
            Sigma::Diag(s) => b.component_div(s),
            Sigma::Blocks { chols, .. } => {
                let mut out = DVector::zeros(b.len());
                for (d, ch) in chols.iter().enumerate() {
                    let seg = b.rows(d * n_pts, n_pts).into_owned();
                    out.rows_mut(d * n_pts, n_pts).copy_from(&ch.solve(&seg));
                }
                out
            }
        }
    }

    fn solve_mat(&self, b: &DMatrix<f64>, n_pts: usize) -> DMatrix<f64> {
        match self {
            Sigma::Diag(s) => {
                let mut out = b.clone();
                for (i, si) in s.iter().enumerate() {
                    for j in 0..out.ncols() {
                        out[(i, j)] /= si;
                    }
                }
                out
            }
            Sigma::Blocks { chols, .. } => {
                let mut out = DMatrix::zeros(b.nrows(), b.ncols());
                for (d, ch) in chols.iter().enumerate() {
                    let seg = b.rows(d * n_pts, n_pts).into_owned();
                    out.rows_mut(d * n_pts, n_pts).copy_from(&ch.solve(&seg));
                }
                out
            }
        }
    }

    fn ln_det(&self) -> f64 {
        match self {
            Sigma::Diag(s) => s.iter().map(|v| v.ln()).sum(),
            Sigma::Blocks { chols, .. } => chols.iter().map(ln_det).sum(),
        }
    }
}

/// Everything one low-rank evaluation shares between the value and the
/// gradient.
struct SparseParts {
    /// A⁻¹ Uᵀ (r × n), also reused as Vᵀ.
    ainv_ut: DMatrix<f64>,
    chol_m: Cholesky<f64, Dyn>,
    sigma: Sigma,
    /// Σ⁻¹ U (n × r).
    s_mat: DMatrix<f64>,
    /// Diagonal residual entries clipped to zero by the floor.
    clipped: Vec<bool>,
    value: f64,
    alpha: DVector<f64>,
}

fn sparse_parts(inst: &Instance, theta: &ClassHyperparams, cfg: &KernelConfig, approx: Approx) -> Result<SparseParts> {
    let z = theta.inducing_inputs.as_ref().ok_or_else(|| {
        MogpError::Config(format!("{approx} likelihood requires inducing inputs"))
    })?;
    let eval = KernelEval::new(theta, cfg)?;
    let x = &inst.inputs;
    let n_pts = inst.n_points();
    let d_out = theta.n_outputs();
    let n = d_out * n_pts;
    let f = inst.stacked_outputs();

    let u = build_kfu(x, z, theta, cfg)?;
    let (kuu, chol_a) = build_kuu_factored(z, theta, cfg)?;
    let ainv_ut = chol_a.solve(&u.transpose());
    let r = u.ncols();

    let mut clipped = vec![false; n];
    let sigma = match approx {
        Approx::Fitc => {
            let kdiag = kff_diag(x, &eval);
            let mut s = DVector::zeros(n);
            for i in 0..n {
                let mut q_ii = 0.0;
                for k in 0..r {
                    q_ii += u[(i, k)] * ainv_ut[(k, i)];
                }
                let mut delta = kdiag[i] - q_ii;
                if delta < 0.0 {
                    delta = 0.0;
                    clipped[i] = true;
                }
                s[i] = delta + theta.noise_var(i / n_pts);
            }
            Sigma::Diag(s)
        }
        Approx::Pitc => {
            let mut chols = Vec::with_capacity(d_out);
            for d in 0..d_out {
                let kbb = kff_output_block(x, &eval, d);
                let qbb = u.rows(d * n_pts, n_pts) * ainv_ut.columns(d * n_pts, n_pts);
                let mut block = kbb - qbb;
                let noise = theta.noise_var(d);
                for i in 0..n_pts {
                    if block[(i, i)] < 0.0 {
                        block[(i, i)] = 0.0;
                        clipped[d * n_pts + i] = true;
                    }
                    block[(i, i)] += noise;
                }
                let (ch, _) = cholesky_with_jitter(&block)
                    .map_err(|e| e.with_context(&format!("PITC residual block {d}")))?;
                chols.push(ch);
            }
            Sigma::Blocks { chols }
        }
        Approx::Exact => unreachable!("sparse path called with exact approximation"),
    };

    let s_mat = sigma.solve_mat(&u, n_pts);
    let mut m = kuu.mat + u.transpose() * &s_mat;
    // Round-off symmetrization before factoring.
    let mt = m.transpose();
    m = (m + mt) * 0.5;
    let (chol_m, _) = cholesky_with_jitter(&m)?;

    let beta = sigma.solve_vec(&f, n_pts);
    let gamma = u.transpose() * &beta;
    let w = chol_m.solve(&gamma);
    let quad = f.dot(&beta) - gamma.dot(&w);
    let ln_det_total = ln_det(&chol_m) - ln_det(&chol_a) + sigma.ln_det();
    let value = -0.5 * quad - 0.5 * ln_det_total - 0.5 * n as f64 * LN_2PI;
    let alpha = &beta - &s_mat * &w;

    Ok(SparseParts { ainv_ut, chol_m, sigma, s_mat, clipped, value, alpha })
}

fn sparse_log_marginal(inst: &Instance, theta: &ClassHyperparams, cfg: &KernelConfig, approx: Approx) -> Result<LikelihoodResult> {
    check_instance(inst, theta, cfg)?;
    let parts = sparse_parts(inst, theta, cfg, approx)?;
    Ok(LikelihoodResult { log_marginal: parts.value, gradient: None })
}

/// Block-diagonal part of the sensitivity G = ½(ααᵀ − K̃⁻¹).
enum BlockG {
    Diag(DVector<f64>),
    Blocks(Vec<DMatrix<f64>>),
}

fn sparse_gradient(
    inst: &Instance,
    theta: &ClassHyperparams,
    cfg: &KernelConfig,
    approx: Approx,
    include_inducing: bool,
) -> Result<LikelihoodResult> {
    let parts = sparse_parts(inst, theta, cfg, approx)?;
    let eval = KernelEval::new(theta, cfg)?;
    let x = &inst.inputs;
    let z = theta.inducing_inputs.as_ref().unwrap();
    let n_pts = inst.n_points();
    let d_out = theta.n_outputs();
    let n = d_out * n_pts;
    let k_ind = z.ncols();
    let p = cfg.input_dim;
    let layout = ParamLayout::of(theta, cfg);
    let convolved = matches!(cfg.mode, crate::model::KernelMode::Convolved);

    let SparseParts { ainv_ut, chol_m, sigma, s_mat, clipped, value, alpha } = parts;
    let v_mat = ainv_ut.transpose(); // U A⁻¹, n × r

    // K̃⁻¹ V = Σ⁻¹V − S M⁻¹ (Sᵀ V).
    let sigma_inv_v = sigma.solve_mat(&v_mat, n_pts);
    let stv = s_mat.transpose() * &v_mat;
    let ktilde_inv_v = &sigma_inv_v - &s_mat * chol_m.solve(&stv);
    // G V = ½(α (αᵀV) − K̃⁻¹V).
    let alpha_t_v = v_mat.transpose() * &alpha; // r
    let g_v = 0.5 * (&alpha * alpha_t_v.transpose() - ktilde_inv_v);

    // T Tᵀ = S M⁻¹ Sᵀ via T = S L_M⁻ᵀ (so TTᵀ block diagonals are cheap).
    let y = chol_m
        .l_dirty()
        .lower_triangle()
        .solve_lower_triangular(&s_mat.transpose())
        .ok_or_else(|| MogpError::Numerical("triangular solve failed".into()))?; // r × n

    // Block-diagonal of G, unmasked (needed for the noise term) ...
    let bg = match &sigma {
        Sigma::Diag(s) => {
            let mut d = DVector::zeros(n);
            for i in 0..n {
                let mut tt = 0.0;
                for kk in 0..y.nrows() {
                    tt += y[(kk, i)] * y[(kk, i)];
                }
                d[i] = 0.5 * (alpha[i] * alpha[i] - 1.0 / s[i] + tt);
            }
            BlockG::Diag(d)
        }
        Sigma::Blocks { chols, .. } => {
            let mut blocks = Vec::with_capacity(d_out);
            for d in 0..d_out {
                let yb = y.columns(d * n_pts, n_pts);
                let ttb = yb.transpose() * yb;
                let ab = alpha.rows(d * n_pts, n_pts);
                let sig_inv_b = chols[d].inverse();
                blocks.push(0.5 * (ab * ab.transpose() - sig_inv_b + ttb));
            }
            BlockG::Blocks(blocks)
        }
    };

    // ... and masked on floored diagonal entries for the residual terms.
    let bg_masked_diag = |i: usize| -> f64 {
        if clipped[i] {
            0.0
        } else {
            match &bg {
                BlockG::Diag(d) => d[i],
                BlockG::Blocks(blocks) => blocks[i / n_pts][(i % n_pts, i % n_pts)],
            }
        }
    };

    // H V = G V − Mask∘B(G) · V.
    let mut h_v = g_v.clone();
    match &bg {
        BlockG::Diag(_) => {
            for i in 0..n {
                let w = bg_masked_diag(i);
                for c in 0..h_v.ncols() {
                    h_v[(i, c)] -= w * v_mat[(i, c)];
                }
            }
        }
        BlockG::Blocks(blocks) => {
            for d in 0..d_out {
                let mut bm = blocks[d].clone();
                for i in 0..n_pts {
                    if clipped[d * n_pts + i] {
                        bm[(i, i)] = 0.0;
                    }
                }
                let prod = &bm * v_mat.rows(d * n_pts, n_pts);
                for i in 0..n_pts {
                    for c in 0..h_v.ncols() {
                        h_v[(d * n_pts + i, c)] -= prod[(i, c)];
                    }
                }
            }
        }
    }
    let w_uu = v_mat.transpose() * &h_v; // Vᵀ H V, r × r

    let mut grad = DVector::zeros(layout.total_len());

    // Sweep K_fu: contribution 2·⟨HV, ∂U⟩.
    for d in 0..d_out {
        for q in 0..cfg.q {
            let s = theta.mixing[(d, q)];
            let pr = eval.fu_params(q, d);
            for i in 0..n_pts {
                let row = d * n_pts + i;
                for j in 0..k_ind {
                    let col = q * k_ind + j;
                    let e = 2.0 * h_v[(row, col)];
                    if e == 0.0 {
                        continue;
                    }
                    let mut expo = 0.0;
                    for dim in 0..p {
                        let delta = x[(dim, i)] - z[(dim, j)];
                        expo += delta * delta * pr.inv2v[dim];
                    }
                    let dens = pr.norm * (-expo).exp();
                    grad[layout.mixing_index(d, q)] += e * dens;
                    if s != 0.0 {
                        for dim in 0..p {
                            let delta = x[(dim, i)] - z[(dim, j)];
                            let dv = ddens_dv(dens, delta * delta, pr.inv2v[dim]);
                            grad[layout.latent_index(q, dim)] += e * s * dv * (-eval.inv_latent[q][dim]);
                            if convolved {
                                grad[layout.output_index(d, dim)] += e * s * dv * (-eval.inv_output[d][dim]);
                            }
                            if include_inducing {
                                grad[layout.inducing_index(j, dim)] +=
                                    e * s * dens * delta / pr.v[dim];
                            }
                        }
                    }
                }
            }
        }
    }

    // Sweep K_uu: contribution −⟨VᵀHV, ∂A⟩; A is block diagonal over q.
    for q in 0..cfg.q {
        let pr = eval.uu_params(q);
        for i in 0..k_ind {
            for j in 0..k_ind {
                let e = -w_uu[(q * k_ind + i, q * k_ind + j)];
                if e == 0.0 {
                    continue;
                }
                let mut expo = 0.0;
                for dim in 0..p {
                    let delta = z[(dim, i)] - z[(dim, j)];
                    expo += delta * delta * pr.inv2v[dim];
                }
                let dens = pr.norm * (-expo).exp();
                for dim in 0..p {
                    let delta = z[(dim, i)] - z[(dim, j)];
                    let dv = ddens_dv(dens, delta * delta, pr.inv2v[dim]);
                    grad[layout.latent_index(q, dim)] += e * dv * (-eval.inv_latent[q][dim]);
                    if include_inducing {
                        // ∂/∂z_j is +δ/v, ∂/∂z_i is −δ/v.
                        let slope = dens * delta / pr.v[dim];
                        grad[layout.inducing_index(j, dim)] += e * slope;
                        grad[layout.inducing_index(i, dim)] -= e * slope;
                    }
                }
            }
        }
    }

    // Sweep the block diagonal of K_ff against Mask∘B(G).
    match approx {
        Approx::Fitc => {
            // Diagonal entries are stationary per output; one partial vector
            // per output scaled by the summed masked weights.
            for d in 0..d_out {
                let mut wsum = 0.0;
                for i in 0..n_pts {
                    wsum += bg_masked_diag(d * n_pts + i);
                }
                if wsum == 0.0 {
                    continue;
                }
                for q in 0..cfg.q {
                    let s = theta.mixing[(d, q)];
                    let pr = eval.ff_params(q, d, d);
                    let dens = pr.norm;
                    grad[layout.mixing_index(d, q)] += wsum * 2.0 * s * dens;
                    let s2 = s * s;
                    if s2 != 0.0 {
                        for dim in 0..p {
                            let dv = ddens_dv(dens, 0.0, pr.inv2v[dim]);
                            grad[layout.latent_index(q, dim)] += wsum * s2 * dv * (-eval.inv_latent[q][dim]);
                            if convolved {
                                grad[layout.output_index(d, dim)] +=
                                    wsum * s2 * dv * (-2.0 * eval.inv_output[d][dim]);
                            }
                        }
                    }
                }
            }
        }
        Approx::Pitc => {
            let blocks = match &bg {
                BlockG::Blocks(b) => b,
                BlockG::Diag(_) => unreachable!(),
            };
            for d in 0..d_out {
                let bgb = &blocks[d];
                for q in 0..cfg.q {
                    let s = theta.mixing[(d, q)];
                    let pr = eval.ff_params(q, d, d);
                    for i in 0..n_pts {
                        for j in i..n_pts {
                            let w = if i == j {
                                if clipped[d * n_pts + i] {
                                    continue;
                                }
                                bgb[(i, i)]
                            } else {
                                2.0 * bgb[(i, j)]
                            };
                            if w == 0.0 {
                                continue;
                            }
                            let mut expo = 0.0;
                            for dim in 0..p {
                                let delta = x[(dim, i)] - x[(dim, j)];
                                expo += delta * delta * pr.inv2v[dim];
                            }
                            let dens = pr.norm * (-expo).exp();
                            grad[layout.mixing_index(d, q)] += w * 2.0 * s * dens;
                            let s2 = s * s;
                            if s2 != 0.0 {
                                for dim in 0..p {
                                    let delta = x[(dim, i)] - x[(dim, j)];
                                    let dv = ddens_dv(dens, delta * delta, pr.inv2v[dim]);
                                    grad[layout.latent_index(q, dim)] +=
                                        w * s2 * dv * (-eval.inv_latent[q][dim]);
                                    if convolved {
                                        grad[layout.output_index(d, dim)] +=
                                            w * s2 * dv * (-2.0 * eval.inv_output[d][dim]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Approx::Exact => unreachable!(),
    }

    // Noise enters Σ directly (never floored): unmasked B(G) diagonal.
    for d in 0..d_out {
        let noise = theta.noise_var(d);
        let mut wsum = 0.0;
        for i in 0..n_pts {
            wsum += match &bg {
                BlockG::Diag(v) => v[d * n_pts + i],
                BlockG::Blocks(blocks) => blocks[d][(i, i)],
            };
        }
        grad[layout.noise_index(d)] = wsum * noise;
    }

    Ok(LikelihoodResult { log_marginal: value, gradient: Some(grad) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{pack_params, unpack_params, KernelMode};
    use crate::testutil::{random_instance, random_theta};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(q: usize, mode: KernelMode, p: usize) -> KernelConfig {
        KernelConfig { q, mode, input_dim: p }
    }

    /// Naive dense reference: explicit inverse and determinant, no Cholesky.
    fn naive_log_density(f: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let inv = cov.clone().try_inverse().unwrap();
        let det = cov.determinant();
        -0.5 * f.dot(&(&inv * f)) - 0.5 * det.ln() - 0.5 * f.len() as f64 * LN_2PI
    }

    #[test]
    fn log_density_identity_covariance() {
        let f = DVector::zeros(2);
        let cov = DMatrix::identity(2, 2);
        let v = gaussian_log_density(&f, &cov).unwrap();
        assert!((v - (-LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn log_density_scalar() {
        let f = DVector::from_vec(vec![1.0]);
        let cov = DMatrix::from_element(1, 1, 1.0);
        let v = gaussian_log_density(&f, &cov).unwrap();
        assert!((v - (-1.4189385332046727)).abs() < 1e-12);
    }

    #[test]
    fn exact_matches_naive_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..10 {
            let c = cfg(2, if trial % 2 == 0 { KernelMode::Convolved } else { KernelMode::Lmc }, 1);
            let theta = random_theta(&mut rng, &c, 2, None);
            let inst = random_instance(&mut rng, 1, 2, 6);
            let got = log_marginal_exact(&inst, &theta, &c).unwrap().log_marginal;
            let cov = crate::kernel::build_kff(&inst.inputs, &theta, &c, true).unwrap();
            let want = naive_log_density(&inst.stacked_outputs(), &cov.mat);
            assert!((got - want).abs() <= 1e-9 * want.abs(), "trial {trial}: {got} vs {want}");
        }
    }

    #[test]
    fn gradient_seam_trace_term() {
        // f = 0, K = I₂, ∂K = I₂ ⇒ −N/(2σ²) = −1.
        let f = DVector::zeros(2);
        let cov = DMatrix::identity(2, 2);
        let v = gradient_quadratic_trace(&f, &cov, &cov).unwrap();
        assert!((v + 1.0).abs() < 1e-12);
    }

    fn fd_gradient(
        inst: &Instance,
        theta: &ClassHyperparams,
        c: &KernelConfig,
        approx: Approx,
        step: f64,
    ) -> DVector<f64> {
        let layout = ParamLayout::of(theta, c);
        let packed = pack_params(theta, c);
        let mut fd = DVector::zeros(layout.total_len());
        for j in 0..layout.total_len() {
            let mut plus = packed.clone();
            plus[j] += step;
            let mut minus = packed.clone();
            minus[j] -= step;
            let tp = unpack_params(plus.as_slice(), &layout).unwrap();
            let tm = unpack_params(minus.as_slice(), &layout).unwrap();
            let fp = log_marginal(inst, &tp, c, approx).unwrap().log_marginal;
            let fm = log_marginal(inst, &tm, c, approx).unwrap().log_marginal;
            fd[j] = (fp - fm) / (2.0 * step);
        }
        fd
    }

    fn assert_grad_close(analytic: &DVector<f64>, fd: &DVector<f64>, tol: f64) {
        for j in 0..analytic.len() {
            let denom = analytic[j].abs().max(fd[j].abs());
            if denom < 1e-8 {
                assert!((analytic[j] - fd[j]).abs() <= 1e-8, "param {j}: {} vs {}", analytic[j], fd[j]);
            } else {
                let rel = (analytic[j] - fd[j]).abs() / denom;
                assert!(rel <= tol, "param {j}: rel {rel:.2e} ({} vs {})", analytic[j], fd[j]);
            }
        }
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for mode in [KernelMode::Convolved, KernelMode::Lmc] {
            let c = cfg(2, mode, 1);
            let theta = random_theta(&mut rng, &c, 2, None);
            let inst = random_instance(&mut rng, 1, 2, 5);
            let res = grad_log_marginal(&inst, &theta, &c, Approx::Exact, false).unwrap();
            let fd = fd_gradient(&inst, &theta, &c, Approx::Exact, 1e-5);
            assert_grad_close(res.gradient.as_ref().unwrap(), &fd, 1e-5);
        }
    }

    #[test]
    fn sparse_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for approx in [Approx::Fitc, Approx::Pitc] {
            for mode in [KernelMode::Convolved, KernelMode::Lmc] {
                let c = cfg(2, mode, 1);
                let theta = random_theta(&mut rng, &c, 2, Some(3));
                let inst = random_instance(&mut rng, 1, 2, 6);
                let res = grad_log_marginal(&inst, &theta, &c, approx, true).unwrap();
                let fd = fd_gradient(&inst, &theta, &c, approx, 1e-5);
                assert_grad_close(res.gradient.as_ref().unwrap(), &fd, 1e-5);
            }
        }
    }

    #[test]
    fn exact_gradient_zero_on_inducing_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let c = cfg(1, KernelMode::Convolved, 1);
        let theta = random_theta(&mut rng, &c, 2, Some(4));
        let inst = random_instance(&mut rng, 1, 2, 4);
        let layout = ParamLayout::of(&theta, &c);
        let res = grad_log_marginal(&inst, &theta, &c, Approx::Exact, false).unwrap();
        let g = res.gradient.unwrap();
        for j in layout.inducing_start()..layout.total_len() {
            assert_eq!(g[j], 0.0);
        }
    }

    #[test]
    fn fitc_pitc_equal_exact_when_z_is_x_in_lmc() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cfg(1, KernelMode::Lmc, 1);
        let mut theta = random_theta(&mut rng, &c, 1, None);
        let inst = random_instance(&mut rng, 1, 1, 8);
        theta.inducing_inputs = Some(inst.inputs.clone());
        let exact = log_marginal_exact(&inst, &theta, &c).unwrap().log_marginal;
        let fitc = log_marginal_fitc(&inst, &theta, &c).unwrap().log_marginal;
        let pitc = log_marginal_pitc(&inst, &theta, &c).unwrap().log_marginal;
        assert!((fitc - exact).abs() < 1e-8, "fitc {fitc} vs exact {exact}");
        assert!((pitc - exact).abs() < 1e-8, "pitc {pitc} vs exact {exact}");
    }

    #[test]
    fn pitc_single_output_block_restores_exact() {
        // D=1: the per-output block spans the whole instance.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let c = cfg(2, KernelMode::Convolved, 1);
        let theta = random_theta(&mut rng, &c, 1, Some(3));
        let inst = random_instance(&mut rng, 1, 1, 7);
        let exact = log_marginal_exact(&inst, &theta, &c).unwrap().log_marginal;
        let pitc = log_marginal_pitc(&inst, &theta, &c).unwrap().log_marginal;
        assert!((pitc - exact).abs() < 1e-8, "pitc {pitc} vs exact {exact}");
    }

    #[test]
    fn likelihood_invariant_to_point_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = cfg(2, KernelMode::Convolved, 1);
        let theta = random_theta(&mut rng, &c, 2, None);
        let inst = random_instance(&mut rng, 1, 2, 6);
        let base = log_marginal_exact(&inst, &theta, &c).unwrap().log_marginal;
        let perm = [3usize, 0, 5, 1, 4, 2];
        let inputs = DMatrix::from_fn(1, 6, |r, j| inst.inputs[(r, perm[j])]);
        let outputs = DMatrix::from_fn(2, 6, |r, j| inst.outputs[(r, perm[j])]);
        let shuffled = Instance::new(inputs, outputs).unwrap();
        let v = log_marginal_exact(&shuffled, &theta, &c).unwrap().log_marginal;
        assert!((v - base).abs() <= 1e-9 * base.abs());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let c = cfg(2, KernelMode::Convolved, 1);
        let theta = random_theta(&mut rng, &c, 2, Some(3));
        let inst = random_instance(&mut rng, 1, 2, 10);
        for approx in [Approx::Exact, Approx::Fitc, Approx::Pitc] {
            let a = log_marginal(&inst, &theta, &c, approx).unwrap().log_marginal;
            let b = log_marginal(&inst, &theta, &c, approx).unwrap().log_marginal;
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn missing_inducing_inputs_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cfg(1, KernelMode::Lmc, 1);
        let theta = random_theta(&mut rng, &c, 1, None);
        let inst = random_instance(&mut rng, 1, 1, 4);
        let err = log_marginal_fitc(&inst, &theta, &c).unwrap_err();
        assert!(matches!(err, MogpError::Config(_)));
    }

    #[test]
    fn fitc_close_to_exact_on_smooth_data_with_few_inducing() {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let c = cfg(1, KernelMode::Lmc, 1);
        let mut theta = random_theta(&mut rng, &c, 1, None);
        // Long lengthscale so K=5 inducing points can carry N=40.
        theta.latent_log_precisions[0][0] = (2.0f64).ln();
        theta.log_noise_vars[0] = (1e-2f64).ln();
        let n = 40;
        let inputs = DMatrix::from_fn(1, n, |_, j| j as f64 / n as f64 * 2.0);
        // Smooth signal.
        let outputs = DMatrix::from_fn(1, n, |_, j| (j as f64 / n as f64 * 3.0).sin());
        let inst = Instance::new(inputs, outputs).unwrap();
        theta.inducing_inputs = Some(DMatrix::from_fn(1, 5, |_, j| j as f64 / 4.0 * 2.0));
        let exact = log_marginal_exact(&inst, &theta, &c).unwrap().log_marginal;
        let fitc = log_marginal_fitc(&inst, &theta, &c).unwrap().log_marginal;
        assert!(fitc.is_finite());
        assert!((fitc - exact).abs() <= 0.25 * exact.abs(), "fitc {fitc} vs exact {exact}");
    }
}
