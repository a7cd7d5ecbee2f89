//! Closed-form evaluation of the multi-output covariance built from latent
//! GPs convolved with per-output Gaussian smoothing kernels, plus the
//! cross-covariances needed by the low-rank likelihoods.
//!
//! Everything here reduces to one primitive: the normalized Gaussian density
//! `|Λ|^{1/2} (2π)^{-p/2} exp(-½ δᵀΛδ)` with diagonal precision Λ. Convolving
//! Gaussians adds their covariances, so the double integral defining the
//! output covariance collapses to a density whose per-dimension variance is
//! `1/λ_d + 1/λ_d' + 1/λ_q`; collapses further to `1/λ_q` in LMC mode where
//! the smoothing kernel is a delta.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{MogpError, Result};
use crate::model::{ClassHyperparams, KernelConfig, KernelMode};

/// Dense symmetric covariance with recorded block structure: `n_blocks`
/// blocks of `block_size` rows each (output-major for K_ff, latent-major for
/// K_uu), and the diagonal jitter that was needed for Cholesky to succeed.
#[derive(Debug, Clone)]
pub struct CovMatrix {
    pub mat: DMatrix<f64>,
    pub n_blocks: usize,
    pub block_size: usize,
    pub jitter_applied: f64,
}

/// Precomputed per-dimension quantities of one Gaussian density factor:
/// the variance vector, its normalizer and `1/(2v)` for the exponent.
#[derive(Debug, Clone)]
pub(crate) struct DensParams {
    pub v: Vec<f64>,
    pub norm: f64,
    pub inv2v: Vec<f64>,
}

impl DensParams {
    pub(crate) fn from_variances(v: Vec<f64>) -> DensParams {
        let norm = v.iter().map(|vi| 1.0 / (2.0 * std::f64::consts::PI * vi).sqrt()).product();
        let inv2v = v.iter().map(|vi| 1.0 / (2.0 * vi)).collect();
        DensParams { v, norm, inv2v }
    }

    /// Density evaluated at the difference of column `i` of `xs` and column
    /// `j` of `ys`.
    #[inline]
    pub(crate) fn at(&self, xs: &DMatrix<f64>, i: usize, ys: &DMatrix<f64>, j: usize) -> f64 {
        let mut s = 0.0;
        for (dim, w) in self.inv2v.iter().enumerate() {
            let delta = xs[(dim, i)] - ys[(dim, j)];
            s += delta * delta * w;
        }
        self.norm * (-s).exp()
    }

    #[inline]
    pub(crate) fn at_slices(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for (dim, w) in self.inv2v.iter().enumerate() {
            let delta = x[dim] - y[dim];
            s += delta * delta * w;
        }
        self.norm * (-s).exp()
    }
}

/// Hyperparameters with the exponentials already taken: `inv_latent[q][i]`
/// is `1/λ_{q,i}`, `inv_output[d][i]` is `1/λ_{d,i}`. Built once per
/// evaluation and shared by the matrix builders and gradient sweeps.
pub(crate) struct KernelEval<'a> {
    pub theta: &'a ClassHyperparams,
    pub cfg: &'a KernelConfig,
    pub inv_latent: Vec<Vec<f64>>,
    pub inv_output: Vec<Vec<f64>>,
}

impl<'a> KernelEval<'a> {
    pub(crate) fn new(theta: &'a ClassHyperparams, cfg: &'a KernelConfig) -> Result<Self> {
        theta.validate(cfg)?;
        let inv_latent = theta
            .latent_log_precisions
            .iter()
            .map(|lp| lp.iter().map(|l| (-l).exp()).collect())
            .collect();
        let inv_output = theta
            .output_log_precisions
            .iter()
            .map(|lp| lp.iter().map(|l| (-l).exp()).collect())
            .collect();
        Ok(KernelEval { theta, cfg, inv_latent, inv_output })
    }

    /// Variance vector of the output-output factor for latent q between
    /// outputs d and d2.
    pub(crate) fn ff_params(&self, q: usize, d: usize, d2: usize) -> DensParams {
        let p = self.cfg.input_dim;
        let v = (0..p)
            .map(|i| match self.cfg.mode {
                KernelMode::Convolved => {
                    self.inv_output[d][i] + self.inv_output[d2][i] + self.inv_latent[q][i]
                }
                KernelMode::Lmc => self.inv_latent[q][i],
            })
            .collect();
        DensParams::from_variances(v)
    }

    /// Variance vector of the output-latent factor for latent q and output d.
    pub(crate) fn fu_params(&self, q: usize, d: usize) -> DensParams {
        let p = self.cfg.input_dim;
        let v = (0..p)
            .map(|i| match self.cfg.mode {
                KernelMode::Convolved => self.inv_output[d][i] + self.inv_latent[q][i],
                KernelMode::Lmc => self.inv_latent[q][i],
            })
            .collect();
        DensParams::from_variances(v)
    }

    /// Variance vector of the latent kernel q.
    pub(crate) fn uu_params(&self, q: usize) -> DensParams {
        DensParams::from_variances(self.inv_latent[q].clone())
    }
}

/// Normalized Gaussian kernel `|Λ|^{1/2} (2π)^{-p/2} exp(-½ (x-x2)ᵀ Λ (x-x2))`
/// with diagonal precision given by `precision_diag`.
pub fn gaussian_density_kernel(x: &[f64], x2: &[f64], precision_diag: &[f64]) -> Result<f64> {
    if x.len() != x2.len() || x.len() != precision_diag.len() {
        return Err(MogpError::Dim(format!(
            "point dims {} / {} and precision dim {} differ",
            x.len(),
            x2.len(),
            precision_diag.len()
        )));
    }
    if precision_diag.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(MogpError::Config("precision entries must be positive and finite".into()));
    }
    let params = DensParams::from_variances(precision_diag.iter().map(|l| 1.0 / l).collect());
    Ok(params.at_slices(x, x2))
}

fn check_output_index(theta: &ClassHyperparams, d: usize) -> Result<()> {
    if d >= theta.n_outputs() {
        return Err(MogpError::Dim(format!("output index {d} out of range (D={})", theta.n_outputs())));
    }
    Ok(())
}

fn check_latent_index(theta: &ClassHyperparams, q: usize) -> Result<()> {
    if q >= theta.n_latent() {
        return Err(MogpError::Dim(format!("latent index {q} out of range (Q={})", theta.n_latent())));
    }
    Ok(())
}

/// Covariance between output `d` at `x` and output `d2` at `x2`: the closed
/// form of the smoothing-kernel double integral, summed over latent
/// functions.
pub fn output_cross_cov(
    d: usize,
    d2: usize,
    x: &[f64],
    x2: &[f64],
    theta: &ClassHyperparams,
    cfg: &KernelConfig,
) -> Result<f64> {
    check_output_index(theta, d)?;
    check_output_index(theta, d2)?;
    if x.len() != cfg.input_dim || x2.len() != cfg.input_dim {
        return Err(MogpError::Dim("point dimension differs from kernel input_dim".into()));
    }
    let eval = KernelEval::new(theta, cfg)?;
    let mut sum = 0.0;
    for q in 0..cfg.q {
        let s = theta.mixing[(d, q)] * theta.mixing[(d2, q)];
        if s != 0.0 {
            sum += s * eval.ff_params(q, d, d2).at_slices(x, x2);
        }
    }
    Ok(sum)
}

/// Kernel of latent function `q` between two latent inputs.
pub fn latent_cov(q: usize, z: &[f64], z2: &[f64], theta: &ClassHyperparams) -> Result<f64> {
    check_latent_index(theta, q)?;
    let lp = &theta.latent_log_precisions[q];
    let precision: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    gaussian_density_kernel(z, z2, &precision)
}

/// Cross-covariance between output `d` at `x` and latent function `q` at `z`.
pub fn output_latent_cross_cov(
    d: usize,
    q: usize,
    x: &[f64],
    z: &[f64],
    theta: &ClassHyperparams,
    cfg: &KernelConfig,
) -> Result<f64> {
    check_output_index(theta, d)?;
    check_latent_index(theta, q)?;
    let eval = KernelEval::new(theta, cfg)?;
    Ok(theta.mixing[(d, q)] * eval.fu_params(q, d).at_slices(x, z))
}

/// Scan for non-finite entries before handing a matrix to Cholesky.
fn ensure_finite(mat: &DMatrix<f64>, what: &str) -> Result<()> {
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(MogpError::Numerical(format!("non-finite entry in {what}")));
    }
    Ok(())
}

/// Factor a symmetric matrix, escalating diagonal jitter until Cholesky
/// succeeds: first attempt unjittered, then 1e-10·mean(diag) growing by 10×
/// per failure up to a 1e-4·mean(diag) ceiling. Returns the factor and the
/// jitter that was used.
pub(crate) fn cholesky_with_jitter(mat: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    ensure_finite(mat, "covariance matrix")?;
    if let Some(ch) = Cholesky::new(mat.clone()) {
        return Ok((ch, 0.0));
    }
    let n = mat.nrows();
    let mean_diag = mat.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n.max(1) as f64;
    if mean_diag > 0.0 {
        let ceiling = 1e-4 * mean_diag;
        let mut jitter = 1e-10 * mean_diag;
        while jitter <= ceiling * (1.0 + 1e-12) {
            let mut m = mat.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(ch) = Cholesky::new(m) {
                return Ok((ch, jitter));
            }
            jitter *= 10.0;
        }
    }
    let eig_min = mat
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Err(MogpError::Numerical(format!(
        "Cholesky failed at jitter ceiling {:.3e} (mean diagonal {:.3e}); smallest eigenvalue {:.3e}",
        1e-4 * mean_diag,
        mean_diag,
        eig_min
    )))
}

fn kff_matrix(
    x: &DMatrix<f64>,
    eval: &KernelEval<'_>,
    include_noise: bool,
) -> DMatrix<f64> {
    let n = x.ncols();
    let d_out = eval.theta.n_outputs();
    let size = d_out * n;
    let mut mat = DMatrix::zeros(size, size);
    for d in 0..d_out {
        for d2 in d..d_out {
            for q in 0..eval.cfg.q {
                let s = eval.theta.mixing[(d, q)] * eval.theta.mixing[(d2, q)];
                if s == 0.0 {
                    continue;
                }
                let params = eval.ff_params(q, d, d2);
                for i in 0..n {
                    let j0 = if d == d2 { i } else { 0 };
                    for j in j0..n {
                        let val = s * params.at(x, i, x, j);
                        mat[(d * n + i, d2 * n + j)] += val;
                        if d != d2 || i != j {
                            mat[(d2 * n + j, d * n + i)] += val;
                        }
                    }
                }
            }
        }
    }
    if include_noise {
        for d in 0..d_out {
            let noise = eval.theta.noise_var(d);
            for i in 0..n {
                mat[(d * n + i, d * n + i)] += noise;
            }
        }
    }
    mat
}

/// Full ND×ND output covariance on the input set `x` (one column per point),
/// output-major block order, with per-output noise on the diagonal when
/// requested and the adaptive jitter already added.
pub fn build_kff(
    x: &DMatrix<f64>,
    theta: &ClassHyperparams,
    cfg: &KernelConfig,
    include_noise: bool,
) -> Result<CovMatrix> {
    Ok(build_kff_factored(x, theta, cfg, include_noise)?.0)
}

/// Same as [`build_kff`] but keeps the Cholesky factor of the jittered
/// matrix so likelihood code does not factor twice.
pub(crate) fn build_kff_factored(
    x: &DMatrix<f64>,
    theta: &ClassHyperparams,
    cfg: &KernelConfig,
    include_noise: bool,
) -> Result<(CovMatrix, Cholesky<f64, Dyn>)> {
    if x.ncols() == 0 {
        return Err(MogpError::Dim("empty input set".into()));
    }
    if x.nrows() != cfg.input_dim {
        return Err(MogpError::Dim(format!("inputs have dim {} but kernel expects p={}", x.nrows(), cfg.input_dim)));
    }
    let eval = KernelEval::new(theta, cfg)?;
    let mut mat = kff_matrix(x, &eval, include_noise);
    let (chol, jitter) = cholesky_with_jitter(&mat)?;
    if jitter > 0.0 {
        for i in 0..mat.nrows() {
            mat[(i, i)] += jitter;
        }
    }
    Ok((
        CovMatrix { mat, n_blocks: theta.n_outputs(), block_size: x.ncols(), jitter_applied: jitter },
        chol,
    ))
}

/// Diagonal of the noiseless output covariance (length ND, output-major).
pub(crate) fn kff_diag(x: &DMatrix<f64>, eval: &KernelEval<'_>) -> DVector<f64> {
    let n = x.ncols();
    let d_out = eval.theta.n_outputs();
    let mut diag = DVector::zeros(d_out * n);
    for d in 0..d_out {
        let mut at_zero = 0.0;
        for q in 0..eval.cfg.q {
            let s = eval.theta.mixing[(d, q)];
            at_zero += s * s * eval.ff_params(q, d, d).norm;
        }
        for i in 0..n {
            diag[d * n + i] = at_zero;
        }
    }
    diag
}

/// One noiseless N×N diagonal block (output `d` against itself).
pub(crate) fn kff_output_block(x: &DMatrix<f64>, eval: &KernelEval<'_>, d: usize) -> DMatrix<f64> {
    let n = x.ncols();
    let mut block = DMatrix::zeros(n, n);
    for q in 0..eval.cfg.q {
        let s = eval.theta.mixing[(d, q)];
        if s == 0.0 {
            continue;
        }
        let s2 = s * s;
        let params = eval.ff_params(q, d, d);
        for i in 0..n {
            for j in i..n {
                let val = s2 * params.at(x, i, x, j);
                block[(i, j)] += val;
                if i != j {
                    block[(j, i)] += val;
                }
            }
        }
    }
    block
}

/// ND×QK cross-covariance between outputs on `x` and latent functions on the
/// inducing set `z`. Columns are latent-major: block q holds the K columns
/// of latent function q.
pub fn build_kfu(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    theta: &ClassHyperparams,
    cfg: &KernelConfig,
) -> Result<DMatrix<f64>> {
    if z.ncols() == 0 {
        return Err(MogpError::Dim("empty inducing set".into()));
    }
    if x.nrows() != cfg.input_dim || z.nrows() != cfg.input_dim {
        return Err(MogpError::Dim("input dims differ from kernel input_dim".into()));
    }
    let eval = KernelEval::new(theta, cfg)?;
    let n = x.ncols();
    let k = z.ncols();
    let d_out = theta.n_outputs();
    let mut mat = DMatrix::zeros(d_out * n, cfg.q * k);
    for d in 0..d_out {
        for q in 0..cfg.q {
            let s = theta.mixing[(d, q)];
            if s == 0.0 {
                continue;
            }
            let params = eval.fu_params(q, d);
            for i in 0..n {
                for j in 0..k {
                    mat[(d * n + i, q * k + j)] = s * params.at(x, i, z, j);
                }
            }
        }
    }
    Ok(mat)
}

/// QK×QK latent covariance on the inducing set: block-diagonal over latent
/// functions (they are mutually independent), jittered like [`build_kff`].
pub fn build_kuu(z: &DMatrix<f64>, theta: &ClassHyperparams, cfg: &KernelConfig) -> Result<CovMatrix> {
    Ok(build_kuu_factored(z, theta, cfg)?.0)
}

pub(crate) fn build_kuu_factored(
    z: &DMatrix<f64>,
    theta: &ClassHyperparams,
    cfg: &KernelConfig,
) -> Result<(CovMatrix, Cholesky<f64, Dyn>)> {
    if z.ncols() == 0 {
        return Err(MogpError::Dim("empty inducing set".into()));
    }
    if z.nrows() != cfg.input_dim {
        return Err(MogpError::Dim(format!("inducing inputs have dim {} but kernel expects p={}", z.nrows(), cfg.input_dim)));
    }
    let eval = KernelEval::new(theta, cfg)?;
    let k = z.ncols();
    let mut mat = DMatrix::zeros(cfg.q * k, cfg.q * k);
    for q in 0..cfg.q {
        let params = eval.uu_params(q);
        for i in 0..k {
            for j in i..k {
                let val = params.at(z, i, z, j);
                mat[(q * k + i, q * k + j)] = val;
                if i != j {
                    mat[(q * k + j, q * k + i)] = val;
                }
            }
        }
    }
    let (chol, jitter) = cholesky_with_jitter(&mat)?;
    if jitter > 0.0 {
        for i in 0..mat.nrows() {
            mat[(i, i)] += jitter;
        }
    }
    Ok((CovMatrix { mat, n_blocks: cfg.q, block_size: k, jitter_applied: jitter }, chol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_instance, random_theta};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const INV_SQRT_2PI: f64 = 0.3989422804014327;

    fn cfg(q: usize, mode: KernelMode, p: usize) -> KernelConfig {
        KernelConfig { q, mode, input_dim: p }
    }

    fn unit_theta(d: usize, q: usize, p: usize) -> ClassHyperparams {
        ClassHyperparams {
            latent_log_precisions: vec![DVector::zeros(p); q],
            output_log_precisions: vec![DVector::zeros(p); d],
            mixing: DMatrix::from_element(d, q, 1.0),
            log_noise_vars: DVector::from_element(d, (0.01f64).ln()),
            inducing_inputs: None,
        }
    }

    #[test]
    fn density_at_zero_is_normalizer() {
        let v = gaussian_density_kernel(&[0.3], &[0.3], &[1.0]).unwrap();
        assert!((v - INV_SQRT_2PI).abs() < 1e-7);
    }

    #[test]
    fn density_unit_gap() {
        // e^{-1/2} / sqrt(2 pi)
        let v = gaussian_density_kernel(&[0.0], &[1.0], &[1.0]).unwrap();
        assert!((v - 0.24197072451914337).abs() < 1e-12);
    }

    #[test]
    fn density_symmetric_in_arguments() {
        let a = gaussian_density_kernel(&[0.2, -1.4], &[1.1, 0.7], &[2.0, 3.0]).unwrap();
        let b = gaussian_density_kernel(&[1.1, 0.7], &[0.2, -1.4], &[2.0, 3.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn density_rejects_nonpositive_precision() {
        assert!(gaussian_density_kernel(&[0.0], &[0.0], &[0.0]).is_err());
        assert!(gaussian_density_kernel(&[0.0], &[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn convolved_cross_cov_triple_unit() {
        // All precisions 1 => variance sum 3 => 1/sqrt(6 pi) at x = x2.
        let theta = unit_theta(2, 1, 1);
        let c = cfg(1, KernelMode::Convolved, 1);
        let v = output_cross_cov(0, 1, &[0.5], &[0.5], &theta, &c).unwrap();
        assert!((v - 0.23032943298089032).abs() < 1e-12);
    }

    #[test]
    fn zero_mixing_kills_cross_cov() {
        let mut theta = unit_theta(2, 2, 1);
        theta.mixing.fill(0.0);
        let c = cfg(2, KernelMode::Convolved, 1);
        let v = output_cross_cov(0, 1, &[0.1], &[0.9], &theta, &c).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn lmc_cross_cov_is_plain_latent_kernel() {
        let theta = unit_theta(1, 1, 1);
        let c = cfg(1, KernelMode::Lmc, 1);
        let v = output_cross_cov(0, 0, &[0.0], &[1.0], &theta, &c).unwrap();
        assert!((v - 0.24197072451914337).abs() < 1e-12);
    }

    #[test]
    fn exchange_symmetry_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = cfg(2, KernelMode::Convolved, 2);
        for _ in 0..20 {
            let theta = random_theta(&mut rng, &c, 3, None);
            let x = [0.3, -0.8];
            let x2 = [1.2, 0.4];
            let a = output_cross_cov(0, 2, &x, &x2, &theta, &c).unwrap();
            let b = output_cross_cov(2, 0, &x2, &x, &theta, &c).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn latent_cov_values() {
        let theta = unit_theta(1, 1, 1);
        let v = latent_cov(0, &[0.7], &[0.7], &theta).unwrap();
        assert!((v - INV_SQRT_2PI).abs() < 1e-7);

        let mut sharp = unit_theta(1, 1, 1);
        sharp.latent_log_precisions[0][0] = (4.0f64).ln();
        let v = latent_cov(0, &[0.0], &[0.5], &sharp).unwrap();
        assert!((v - 0.4839414490382867).abs() < 1e-12);
    }

    #[test]
    fn output_latent_cross_cov_values() {
        let theta = unit_theta(1, 1, 1);
        let c = cfg(1, KernelMode::Convolved, 1);
        // Variance sum 2 at x = z: 1/sqrt(4 pi).
        let v = output_latent_cross_cov(0, 0, &[1.3], &[1.3], &theta, &c).unwrap();
        assert!((v - 0.2820947917738781).abs() < 1e-12);

        let mut zero = unit_theta(1, 1, 1);
        zero.mixing[(0, 0)] = 0.0;
        assert_eq!(output_latent_cross_cov(0, 0, &[0.0], &[2.0], &zero, &c).unwrap(), 0.0);

        // Stationarity: swapping the two points changes nothing.
        let a = output_latent_cross_cov(0, 0, &[0.2], &[1.9], &theta, &c).unwrap();
        let b = output_latent_cross_cov(0, 0, &[1.9], &[0.2], &theta, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kff_single_point_entry() {
        let theta = unit_theta(1, 1, 1);
        let c = cfg(1, KernelMode::Convolved, 1);
        let x = DMatrix::from_element(1, 1, 0.0);
        let cov = build_kff(&x, &theta, &c, true).unwrap();
        assert_eq!(cov.jitter_applied, 0.0);
        assert!((cov.mat[(0, 0)] - (0.23032943298089032 + 0.01)).abs() < 1e-12);
    }

    #[test]
    fn kff_is_symmetric_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = cfg(2, KernelMode::Convolved, 1);
        let theta = random_theta(&mut rng, &c, 3, None);
        let inst = random_instance(&mut rng, 1, 3, 6);
        let cov = build_kff(&inst.inputs, &theta, &c, true).unwrap();
        let max_entry = cov.mat.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let asym = (&cov.mat - cov.mat.transpose()).iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(asym <= 1e-12 * max_entry);
        let eigs = cov.mat.clone().symmetric_eigen().eigenvalues;
        assert!(eigs.iter().all(|&e| e > 0.0), "eigenvalues {eigs:?}");
    }

    #[test]
    fn kfu_equals_kuu_when_z_is_x_in_lmc() {
        let theta = unit_theta(1, 1, 1);
        let c = cfg(1, KernelMode::Lmc, 1);
        let x = DMatrix::from_row_slice(1, 4, &[0.0, 0.5, 1.0, 1.5]);
        let kfu = build_kfu(&x, &x, &theta, &c).unwrap();
        let kuu = build_kuu(&x, &theta, &c).unwrap();
        assert_eq!(kuu.jitter_applied, 0.0);
        assert!((&kfu - &kuu.mat).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn kuu_is_block_diagonal_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg(2, KernelMode::Convolved, 1);
        let theta = random_theta(&mut rng, &c, 2, Some(4));
        let z = theta.inducing_inputs.clone().unwrap();
        let kuu = build_kuu(&z, &theta, &c).unwrap();
        let k = z.ncols();
        for i in 0..k {
            for j in 0..k {
                assert_eq!(kuu.mat[(i, k + j)], 0.0);
                assert_eq!(kuu.mat[(k + i, j)], 0.0);
            }
        }
        let eigs = kuu.mat.clone().symmetric_eigen().eigenvalues;
        assert!(eigs.iter().all(|&e| e >= -1e-12));
    }

    #[test]
    fn convolved_approaches_lmc_with_sharp_smoothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c_conv = cfg(2, KernelMode::Convolved, 1);
        let c_lmc = cfg(2, KernelMode::Lmc, 1);
        let mut theta = random_theta(&mut rng, &c_conv, 2, None);
        for op in &mut theta.output_log_precisions {
            op.fill((1e6f64).ln());
        }
        for d in 0..2 {
            for d2 in 0..2 {
                let a = output_cross_cov(d, d2, &[0.3], &[0.8], &theta, &c_conv).unwrap();
                let b = output_cross_cov(d, d2, &[0.3], &[0.8], &theta, &c_lmc).unwrap();
                assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-12), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn jitter_ceiling_reports_eigenvalue() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = cholesky_with_jitter(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("smallest eigenvalue"), "{msg}");
        assert!(msg.contains("-1.0"), "{msg}");
    }

    #[test]
    fn jitter_ladder_recovers_near_singular() {
        // Rank-one matrix: needs jitter but within the ceiling.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (_, jitter) = cholesky_with_jitter(&m).unwrap();
        assert!(jitter > 0.0 && jitter <= 1e-4);
    }
}
