//! Locally Gaussian transition machinery: generator operators applied to the
//! smooth drift, the step-size-standardized covariance Sigma and its inverse
//! Lambda, standardized residuals, and the LG / Euler-Maruyama log-densities.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{
    diffusion_matrix_a_r, rough_drift, smooth_jacobian_rough, Cloud, Dims, Model,
};
use crate::params::ParameterVector;

const LN_2PI: f64 = 1.8378770664093453;

/// Evaluation switches for the LG moments.
#[derive(Debug, Clone, Copy, Default)]
pub struct MomentOptions {
    /// Drop the second-order drift correction in the smooth conditional mean.
    /// Exists only to demonstrate the resulting estimation bias; never enable
    /// it for actual estimation.
    pub omit_smooth_correction: bool,
}

/// Covariance package for one (theta, state, particle) evaluation point.
///
/// `sigma` is the standardized covariance with blocks
/// Sigma_SS = a_S/3, Sigma_SR = J_R a_R / 2, Sigma_RR = a_R, where J_R is the
/// rough-block sub-Jacobian of the smooth drift. `lambda` is its inverse,
/// computed in closed form by block inversion (the Schur complement of the
/// rough block is a_S/12). `log_det_sigma` comes from the Cholesky factor,
/// which gives an independent route for the Lambda * Sigma = I test.
#[derive(Debug, Clone)]
pub struct SigmaPack {
    pub a_r: DMatrix<f64>,
    pub a_r_inv: DMatrix<f64>,
    pub log_det_a_r: f64,
    pub a_s: Option<DMatrix<f64>>,
    pub j_r: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub log_det_sigma: f64,
    pub chol: DMatrix<f64>,
}

/// Per-(particle, step) conditional moments of the LG transition.
#[derive(Debug, Clone)]
pub struct LgMoments {
    /// Deterministic LG prediction of the smooth block (length d_s).
    pub mean_smooth: Vec<f64>,
    /// Euler prediction of the rough block (length d_r).
    pub mean_rough: Vec<f64>,
    pub sigma: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub log_det_sigma: f64,
    pub chol: DMatrix<f64>,
}

/// Assemble Sigma, Lambda, log det Sigma for particle `i` of the cloud.
pub fn build_sigma<M: Model + ?Sized>(
    model: &M,
    theta: &ParameterVector,
    cloud: &Cloud,
    i: usize,
) -> Result<SigmaPack> {
    let dims = model.dims();
    let (d_s, d_r) = (dims.d_s, dims.d_r);
    let d = dims.d();
    let a_r = diffusion_matrix_a_r(model, &theta.beta, cloud, i)?;
    let a_r_chol = a_r
        .clone()
        .cholesky()
        .ok_or_else(|| degenerate(i, "a_R Cholesky failed"))?;
    let a_r_inv = a_r_chol.inverse();
    let log_det_a_r = 2.0 * a_r_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();

    if d_s == 0 {
        return Ok(SigmaPack {
            sigma: a_r.clone(),
            lambda: a_r_inv.clone(),
            log_det_sigma: log_det_a_r,
            chol: a_r_chol.l(),
            a_r,
            a_r_inv,
            log_det_a_r,
            a_s: None,
            j_r: DMatrix::zeros(0, d_r),
        });
    }

    let j_r = smooth_jacobian_rough(model, &theta.alpha_s, cloud.row(i));
    let a_s = &j_r * &a_r * j_r.transpose();
    let a_s_inv = a_s.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| {
        Error::HypoellipticityViolation(format!("a_S not positive definite at particle {i}"))
    })?;

    let mut sigma = DMatrix::zeros(d, d);
    let sigma_sr = &j_r * &a_r * 0.5;
    sigma.view_mut((0, 0), (d_s, d_s)).copy_from(&(&a_s / 3.0));
    sigma.view_mut((0, d_s), (d_s, d_r)).copy_from(&sigma_sr);
    sigma
        .view_mut((d_s, 0), (d_r, d_s))
        .copy_from(&sigma_sr.transpose());
    sigma.view_mut((d_s, d_s), (d_r, d_r)).copy_from(&a_r);

    // Block inverse: Schur complement of Sigma_RR in Sigma equals a_S/12.
    let lam_ss = &a_s_inv * 12.0;
    let lam_sr = -6.0 * (&a_s_inv * &j_r);
    let lam_rr = &a_r_inv + 3.0 * (j_r.transpose() * &a_s_inv * &j_r);
    let mut lambda = DMatrix::zeros(d, d);
    lambda.view_mut((0, 0), (d_s, d_s)).copy_from(&lam_ss);
    lambda.view_mut((0, d_s), (d_s, d_r)).copy_from(&lam_sr);
    lambda
        .view_mut((d_s, 0), (d_r, d_s))
        .copy_from(&lam_sr.transpose());
    lambda.view_mut((d_s, d_s), (d_r, d_r)).copy_from(&lam_rr);

    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| degenerate(i, "Sigma Cholesky failed"))?;
    let log_det_sigma = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();

    Ok(SigmaPack {
        a_r,
        a_r_inv,
        log_det_a_r,
        a_s: Some(a_s),
        j_r,
        sigma,
        lambda,
        log_det_sigma,
        chol: chol.l(),
    })
}

fn degenerate(particle: usize, detail: &str) -> Error {
    Error::DegenerateCovariance {
        particle,
        step: 0,
        detail: detail.into(),
    }
}

/// Apply the generator operator of index `m` (0..=d_B) to the smooth drift:
/// for m = 0 the full second-order operator, for m >= 1 the first-order
/// operator along the m-th diffusion column. The second-order a-contraction
/// collapses to the rough block because the diffusion columns have zero
/// smooth block.
pub fn generator_on_smooth_drift<M: Model + ?Sized>(
    model: &M,
    theta: &ParameterVector,
    cloud: &Cloud,
    i: usize,
    m: usize,
) -> Result<Vec<f64>> {
    let dims = model.dims();
    let (d_s, d_r) = (dims.d_s, dims.d_r);
    let d = dims.d();
    if d_s == 0 {
        return Err(Error::EllipticModel);
    }
    if m > dims.d_b {
        return Err(Error::Shape(format!("generator index {m} > d_B = {}", dims.d_b)));
    }
    let x = cloud.row(i);
    let mut jac = vec![0.0; d_s * d];
    model.smooth_jacobian(&theta.alpha_s, x, &mut jac);

    if m >= 1 {
        let cols = crate::model::diffusion_columns(model, &theta.beta, cloud, i)?;
        let mut out = vec![0.0; d_s];
        for s in 0..d_s {
            for r in 0..d_r {
                out[s] += jac[s * d + d_s + r] * cols[(r, m - 1)];
            }
        }
        return Ok(out);
    }

    let mut v0 = vec![0.0; d];
    model.smooth_drift(&theta.alpha_s, x, &mut v0[..d_s]);
    let mut v_r0 = vec![0.0; d_r];
    rough_drift(model, &theta.alpha_r, cloud, i, &mut v_r0)?;
    v0[d_s..].copy_from_slice(&v_r0);

    let a_r = diffusion_matrix_a_r(model, &theta.beta, cloud, i)?;
    let mut hess = vec![0.0; d_s * d_r * d_r];
    model.smooth_rr_hessian(&theta.alpha_s, x, &mut hess);

    let mut out = vec![0.0; d_s];
    for s in 0..d_s {
        let mut acc = 0.0;
        for k in 0..d {
            acc += jac[s * d + k] * v0[k];
        }
        for k1 in 0..d_r {
            for k2 in 0..d_r {
                acc += 0.5 * a_r[(k1, k2)] * hess[s * d_r * d_r + k1 * d_r + k2];
            }
        }
        out[s] = acc;
    }
    Ok(out)
}

/// Conditional mean pieces plus covariance package for the LG transition of
/// particle `i` over a step of length `delta`.
pub fn lg_moments<M: Model + ?Sized>(
    model: &M,
    theta: &ParameterVector,
    cloud: &Cloud,
    i: usize,
    delta: f64,
    opts: MomentOptions,
) -> Result<LgMoments> {
    let dims = model.dims();
    let (d_s, d_r) = (dims.d_s, dims.d_r);
    let pack = build_sigma(model, theta, cloud, i)?;
    let x = cloud.row(i);

    let mut mean_smooth = vec![0.0; d_s];
    if d_s > 0 {
        let mut v_s = vec![0.0; d_s];
        model.smooth_drift(&theta.alpha_s, x, &mut v_s);
        let corr = if opts.omit_smooth_correction {
            vec![0.0; d_s]
        } else {
            generator_on_smooth_drift(model, theta, cloud, i, 0)?
        };
        for s in 0..d_s {
            mean_smooth[s] = x[s] + v_s[s] * delta + corr[s] * delta * delta / 2.0;
        }
    }

    let mut v_r = vec![0.0; d_r];
    rough_drift(model, &theta.alpha_r, cloud, i, &mut v_r)?;
    let mean_rough: Vec<f64> = (0..d_r).map(|r| x[d_s + r] + v_r[r] * delta).collect();

    Ok(LgMoments {
        mean_smooth,
        mean_rough,
        sigma: pack.sigma,
        lambda: pack.lambda,
        log_det_sigma: pack.log_det_sigma,
        chol: pack.chol,
    })
}

/// Deterministic part of the LG one-step map for particle `i`, written into
/// `out` (full state order, length d). Cheaper than [`lg_moments`] when the
/// covariance is not needed.
pub fn lg_mean<M: Model + ?Sized>(
    model: &M,
    theta: &ParameterVector,
    cloud: &Cloud,
    i: usize,
    delta: f64,
    opts: MomentOptions,
    out: &mut [f64],
) -> Result<()> {
    let dims = model.dims();
    let (d_s, d_r) = (dims.d_s, dims.d_r);
    if out.len() != dims.d() {
        return Err(Error::Shape(format!(
            "lg_mean: out has {} slots, model dimension is {}",
            out.len(),
            dims.d()
        )));
    }
    let x = cloud.row(i);
    if d_s > 0 {
        let mut v_s = vec![0.0; d_s];
        model.smooth_drift(&theta.alpha_s, x, &mut v_s);
        if opts.omit_smooth_correction {
            for s in 0..d_s {
                out[s] = x[s] + v_s[s] * delta;
            }
        } else {
            let corr = generator_on_smooth_drift(model, theta, cloud, i, 0)?;
            for s in 0..d_s {
                out[s] = x[s] + v_s[s] * delta + corr[s] * delta * delta / 2.0;
            }
        }
    }
    let mut v_r = vec![0.0; d_r];
    rough_drift(model, &theta.alpha_r, cloud, i, &mut v_r)?;
    for r in 0..d_r {
        out[d_s + r] = x[d_s + r] + v_r[r] * delta;
    }
    Ok(())
}

/// Reusable buffers for LG mean evaluations in likelihood hot loops.
#[derive(Debug, Clone)]
pub struct MeanScratch {
    v_s: Vec<f64>,
    v_r: Vec<f64>,
    pair: Vec<f64>,
    jac: Vec<f64>,
    hess: Vec<f64>,
}

impl MeanScratch {
    pub fn new(dims: Dims) -> Self {
        let (d_s, d_r) = (dims.d_s, dims.d_r);
        let d = dims.d();
        MeanScratch {
            v_s: vec![0.0; d_s],
            v_r: vec![0.0; d_r],
            pair: vec![0.0; d_r],
            jac: vec![0.0; d_s * d],
            hess: vec![0.0; d_s * d_r * d_r],
        }
    }
}

/// `lg_mean` with caller-provided a_R and scratch buffers, allocation-free.
/// Numerically identical to `lg_mean`: the generator term is the same
/// J . V_0 + a_R-contracted-Hessian contraction.
pub fn lg_mean_scratch<M: Model + ?Sized>(
    model: &M,
    theta: &ParameterVector,
    cloud: &Cloud,
    i: usize,
    delta: f64,
    a_r: &DMatrix<f64>,
    ws: &mut MeanScratch,
    out: &mut [f64],
) -> Result<()> {
    let dims = model.dims();
    let (d_s, d_r) = (dims.d_s, dims.d_r);
    let d = dims.d();
    if out.len() != d {
        return Err(Error::Shape(format!(
            "lg_mean_scratch: out has {} slots, model dimension is {d}",
            out.len()
        )));
    }
    let x = cloud.row(i);
    model.rough_drift_self(&theta.alpha_r, x, &mut ws.v_r);
    model.rough_drift_pair_mean(&theta.alpha_r, x, cloud, &mut ws.pair);
    if d_s > 0 {
        model.smooth_drift(&theta.alpha_s, x, &mut ws.v_s);
        model.smooth_jacobian(&theta.alpha_s, x, &mut ws.jac);
        model.smooth_rr_hessian(&theta.alpha_s, x, &mut ws.hess);
        for s in 0..d_s {
            let mut g = 0.0;
            for k in 0..d_s {
                g += ws.jac[s * d + k] * ws.v_s[k];
            }
            for r in 0..d_r {
                g += ws.jac[s * d + d_s + r] * (ws.v_r[r] + ws.pair[r]);
            }
            for k1 in 0..d_r {
                for k2 in 0..d_r {
                    g += 0.5 * a_r[(k1, k2)] * ws.hess[s * d_r * d_r + k1 * d_r + k2];
                }
            }
            out[s] = x[s] + ws.v_s[s] * delta + g * delta * delta / 2.0;
        }
    }
    for r in 0..d_r {
        out[d_s + r] = x[d_s + r] + (ws.v_r[r] + ws.pair[r]) * delta;
    }
    Ok(())
}

/// Standardized residual m: smooth block scaled by delta^{3/2}, rough block
/// by delta^{1/2}.
pub fn standardized_residual(moments: &LgMoments, x_next: &[f64], delta: f64) -> Vec<f64> {
    let d_s = moments.mean_smooth.len();
    let d_r = moments.mean_rough.len();
    let s_scale = delta.powf(1.5);
    let r_scale = delta.sqrt();
    let mut m = Vec::with_capacity(d_s + d_r);
    for s in 0..d_s {
        m.push((x_next[s] - moments.mean_smooth[s]) / s_scale);
    }
    for r in 0..d_r {
        m.push((x_next[d_s + r] - moments.mean_rough[r]) / r_scale);
    }
    m
}

/// Quadratic form m^T Lambda m.
pub fn quad_form(lambda: &DMatrix<f64>, m: &[f64]) -> f64 {
    let d = m.len();
    let mut acc = 0.0;
    for r in 0..d {
        let mut row = 0.0;
        for c in 0..d {
            row += lambda[(r, c)] * m[c];
        }
        acc += m[r] * row;
    }
    acc
}

/// Log of the LG transition density of x_next given the state behind
/// `moments`.
pub fn lg_log_density(moments: &LgMoments, x_next: &[f64], delta: f64) -> f64 {
    let d_s = moments.mean_smooth.len();
    let d_r = moments.mean_rough.len();
    let d = d_s + d_r;
    let m = standardized_residual(moments, x_next, delta);
    let quad = quad_form(&moments.lambda, &m);
    -0.5 * (quad
        + moments.log_det_sigma
        + (3 * d_s + d_r) as f64 * delta.ln()
        + d as f64 * LN_2PI)
}

/// Euler-Maruyama log-density of the rough block only: Gaussian with mean
/// x_R + V_{R,0} delta and covariance delta * a_R.
pub fn em_log_density_rough<M: Model + ?Sized>(
    model: &M,
    theta: &ParameterVector,
    cloud: &Cloud,
    i: usize,
    x_next_rough: &[f64],
    delta: f64,
) -> Result<f64> {
    let dims = model.dims();
    let (d_s, d_r) = (dims.d_s, dims.d_r);
    let a_r = diffusion_matrix_a_r(model, &theta.beta, cloud, i)?;
    let chol = a_r
        .cholesky()
        .ok_or_else(|| degenerate(i, "a_R Cholesky failed"))?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();

    let mut v_r = vec![0.0; d_r];
    rough_drift(model, &theta.alpha_r, cloud, i, &mut v_r)?;
    let x = cloud.row(i);
    let r_scale = delta.sqrt();
    let resid = nalgebra::DVector::from_iterator(
        d_r,
        (0..d_r).map(|r| (x_next_rough[r] - x[d_s + r] - v_r[r] * delta) / r_scale),
    );
    let solved = chol.solve(&resid);
    let quad = resid.dot(&solved);
    Ok(-0.5 * (quad + log_det + d_r as f64 * (delta.ln() + LN_2PI)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::column_means;
    use crate::models::{InteractingFhn, InteractingLangevin1d, MeanFieldOu};

    fn cloud_from<'a>(states: &'a [f64], n: usize, d: usize, mean: &'a [f64]) -> Cloud<'a> {
        Cloud::new(states, n, d, mean)
    }

    fn langevin_theta() -> ParameterVector {
        ParameterVector::unbounded(vec![], vec![2.0, 1.5, 2.0], vec![0.5])
    }

    fn fhn_theta() -> ParameterVector {
        ParameterVector::unbounded(vec![0.2, 0.8, 1.5], vec![2.0], vec![0.5])
    }

    #[test]
    fn langevin_sigma_and_lambda_closed_form() {
        let model = InteractingLangevin1d;
        let states = [0.3, -0.2];
        let mean = column_means(&states, 1, 2);
        let cloud = cloud_from(&states, 1, 2, &mean);
        let pack = build_sigma(&model, &langevin_theta(), &cloud, 0).unwrap();
        let s2 = 0.25;
        let sig = [[s2 / 3.0, s2 / 2.0], [s2 / 2.0, s2]];
        let lam = [[48.0, -24.0], [-24.0, 16.0]];
        for r in 0..2 {
            for c in 0..2 {
                assert!((pack.sigma[(r, c)] - sig[r][c]).abs() <= 1e-14);
                assert!((pack.lambda[(r, c)] - lam[r][c]).abs() <= 1e-14);
            }
        }
        // det Sigma = sigma^4 / 12
        assert!((pack.log_det_sigma - (0.5f64.powi(4) / 12.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn fhn_sigma_blocks() {
        let model = InteractingFhn;
        let states = [0.1, -0.4];
        let mean = column_means(&states, 1, 2);
        let cloud = cloud_from(&states, 1, 2, &mean);
        let pack = build_sigma(&model, &fhn_theta(), &cloud, 0).unwrap();
        let (c, s2) = (1.5, 0.25);
        assert!((pack.sigma[(0, 0)] - s2 / (3.0 * c * c)).abs() < 1e-15);
        assert!((pack.sigma[(0, 1)] - s2 / (2.0 * c)).abs() < 1e-15);
        assert!((pack.sigma[(1, 1)] - s2).abs() < 1e-15);
        // a_S = sigma^2 / c^2 = 0.25 / 2.25
        let a_s = pack.a_s.as_ref().unwrap();
        assert!((a_s[(0, 0)] - 0.25 / 2.25).abs() < 1e-15);
    }

    #[test]
    fn generator_examples() {
        // Langevin: L_0[V_S] equals the full rough drift, L_1[V_S] = sigma.
        let model = InteractingLangevin1d;
        let theta = langevin_theta();
        let states = [0.5, 1.0, 1.0, 0.0];
        let mean = column_means(&states, 2, 2);
        let cloud = cloud_from(&states, 2, 2, &mean);
        let l0 = generator_on_smooth_drift(&model, &theta, &cloud, 0, 0).unwrap();
        let mut vr = vec![0.0];
        rough_drift(&model, &theta.alpha_r, &cloud, 0, &mut vr).unwrap();
        assert!((l0[0] - vr[0]).abs() < 1e-15);
        let l1 = generator_on_smooth_drift(&model, &theta, &cloud, 0, 1).unwrap();
        assert!((l1[0] - 0.5).abs() < 1e-15);

        // FHN: L_0 = (1/c)(V_R0 - b V_S), L_1 = sigma / c.
        let model = InteractingFhn;
        let theta = fhn_theta();
        let states = [0.3, -0.7];
        let mean = column_means(&states, 1, 2);
        let cloud = cloud_from(&states, 1, 2, &mean);
        let l0 = generator_on_smooth_drift(&model, &theta, &cloud, 0, 0).unwrap();
        let mut vr = vec![0.0];
        rough_drift(&model, &theta.alpha_r, &cloud, 0, &mut vr).unwrap();
        let mut vs = vec![0.0];
        model.smooth_drift(&theta.alpha_s, cloud.row(0), &mut vs);
        let expect = (vr[0] - 0.8 * vs[0]) / 1.5;
        assert!((l0[0] - expect).abs() < 1e-14);
        let l1 = generator_on_smooth_drift(&model, &theta, &cloud, 0, 1).unwrap();
        assert!((l1[0] - 0.5 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn elliptic_generator_is_rejected() {
        let model = MeanFieldOu;
        let theta = ParameterVector::unbounded(vec![], vec![1.0, 0.5], vec![0.5]);
        let states = [0.2];
        let mean = column_means(&states, 1, 1);
        let cloud = cloud_from(&states, 1, 1, &mean);
        assert!(matches!(
            generator_on_smooth_drift(&model, &theta, &cloud, 0, 0),
            Err(Error::EllipticModel)
        ));
    }

    #[test]
    fn residual_zero_at_mean_and_scaling() {
        let model = InteractingLangevin1d;
        let theta = langevin_theta();
        let states = [0.4, -0.3];
        let mean = column_means(&states, 1, 2);
        let cloud = cloud_from(&states, 1, 2, &mean);
        let delta = 0.01;
        let mom = lg_moments(&model, &theta, &cloud, 0, delta, MomentOptions::default()).unwrap();
        let at_mean = [mom.mean_smooth[0], mom.mean_rough[0]];
        let m = standardized_residual(&mom, &at_mean, delta);
        assert!(m.iter().all(|v| v.abs() < 1e-15));

        // Fixed offset from the mean: doubling delta scales the smooth
        // residual by 2^{-3/2} and the rough one by 2^{-1/2}.
        let off = [at_mean[0] + 0.02, at_mean[1] + 0.05];
        let m1 = standardized_residual(&mom, &off, delta);
        let mom2 =
            lg_moments(&model, &theta, &cloud, 0, 2.0 * delta, MomentOptions::default()).unwrap();
        let off2 = [mom2.mean_smooth[0] + 0.02, mom2.mean_rough[0] + 0.05];
        let m2 = standardized_residual(&mom2, &off2, 2.0 * delta);
        assert!((m2[0] / m1[0] - 0.5f64.powf(1.5)).abs() < 1e-12);
        assert!((m2[1] / m1[1] - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn lg_density_at_mean_is_normalizing_constant() {
        let model = InteractingLangevin1d;
        let theta = langevin_theta();
        let states = [0.4, -0.3];
        let mean = column_means(&states, 1, 2);
        let cloud = cloud_from(&states, 1, 2, &mean);
        let delta = 0.01;
        let mom = lg_moments(&model, &theta, &cloud, 0, delta, MomentOptions::default()).unwrap();
        let at_mean = [mom.mean_smooth[0], mom.mean_rough[0]];
        let got = lg_log_density(&mom, &at_mean, delta);
        let expect = -0.5 * (mom.log_det_sigma + 4.0 * delta.ln() + 2.0 * LN_2PI);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn em_density_matches_lg_for_elliptic_model() {
        let model = MeanFieldOu;
        let theta = ParameterVector::unbounded(vec![], vec![1.0, 0.5], vec![0.5]);
        let states = [0.2, -0.6, 1.1];
        let mean = column_means(&states, 3, 1);
        let cloud = cloud_from(&states, 3, 1, &mean);
        let delta = 0.02;
        for i in 0..3 {
            let mom =
                lg_moments(&model, &theta, &cloud, i, delta, MomentOptions::default()).unwrap();
            for target in [-0.5, 0.1, 0.9] {
                let lg = lg_log_density(&mom, &[target], delta);
                let em = em_log_density_rough(&model, &theta, &cloud, i, &[target], delta).unwrap();
                assert!((lg - em).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn sigma_ignores_alpha_r() {
        let model = InteractingFhn;
        let states = [0.1, -0.4, 0.8, 0.2];
        let mean = column_means(&states, 2, 2);
        let cloud = cloud_from(&states, 2, 2, &mean);
        let t1 = fhn_theta();
        let mut t2 = t1.clone();
        t2.alpha_r[0] = 7.5;
        let p1 = build_sigma(&model, &t1, &cloud, 1).unwrap();
        let p2 = build_sigma(&model, &t2, &cloud, 1).unwrap();
        assert_eq!(p1.sigma, p2.sigma);
        assert_eq!(p1.lambda, p2.lambda);
        assert_eq!(p1.log_det_sigma, p2.log_det_sigma);
    }
}
