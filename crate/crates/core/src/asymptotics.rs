//! Plug-in limit precision matrices for the contrast estimator and CLT
//! scaling diagnostics.
//!
//! The limit integrals over the mean-field law are replaced by Monte Carlo
//! averages over simulated particle clouds: int_0^T E[.] dt is approximated
//! by (Delta / (M N)) * sum over M replicate simulations, N particles and n
//! grid times. Parameter derivatives of the drifts and of Sigma use central
//! finite differences.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::contrast::Method;
use crate::error::{Error, Result};
use crate::lg::build_sigma;
use crate::model::{column_means, Cloud, Model};
use crate::params::ParameterVector;
use crate::sim::{simulate_ips_replicate, ExperimentDesign};

/// Finite-difference step rule for the Gamma integrands. Wider than the
/// optimizer's gradient step: the integrands are smooth in theta and the
/// wider step keeps cancellation error far below the 1e-9 closed-form
/// checks.
const GAMMA_FD_SCALE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Elliptic,
    Hypoelliptic,
}

/// Plug-in estimates of the limit precision matrices, blockwise.
#[derive(Debug, Clone)]
pub struct PrecisionMatrices {
    /// Smooth-drift block (absent when d_S = 0 or alpha_S is empty).
    pub gamma_alpha_s: Option<DMatrix<f64>>,
    pub gamma_alpha_r: DMatrix<f64>,
    pub gamma_beta: DMatrix<f64>,
    /// Euler-Maruyama counterpart of the diffusion block (rough-block Sigma
    /// only); present in the hypoelliptic regime for method comparisons.
    pub gamma_beta_em: Option<DMatrix<f64>>,
    pub regime: Regime,
    /// Number of (particle, step) terms behind the Monte Carlo average.
    pub mc_particles_times_steps: usize,
    /// Entrywise standard errors across replicas (None when mc_replicas = 1).
    pub se_alpha_s: Option<DMatrix<f64>>,
    pub se_alpha_r: Option<DMatrix<f64>>,
    pub se_beta: Option<DMatrix<f64>>,
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for r in 0..n {
        for c in 0..r {
            let s = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = s;
            m[(c, r)] = s;
        }
    }
}

/// Central-difference derivative of `f` with respect to component `k` of
/// `theta_flat`, using the Gamma step rule.
fn fd_theta<T>(
    theta_flat: &[f64],
    k: usize,
    mut f: impl FnMut(&[f64]) -> Result<T>,
    combine: impl Fn(&T, &T, f64) -> T,
) -> Result<T> {
    let h = GAMMA_FD_SCALE * theta_flat[k].abs().max(1.0);
    let mut probe = theta_flat.to_vec();
    probe[k] += h;
    let up = f(&probe)?;
    probe[k] = theta_flat[k] - h;
    let dn = f(&probe)?;
    Ok(combine(&up, &dn, 2.0 * h))
}

fn fd_vec(up: &Vec<f64>, dn: &Vec<f64>, denom: f64) -> Vec<f64> {
    up.iter().zip(dn).map(|(u, d)| (u - d) / denom).collect()
}

fn fd_mat(up: &DMatrix<f64>, dn: &DMatrix<f64>, denom: f64) -> DMatrix<f64> {
    (up - dn) / denom
}

struct ReplicaAccum {
    alpha_s: Option<DMatrix<f64>>,
    alpha_r: DMatrix<f64>,
    beta: DMatrix<f64>,
    beta_em: Option<DMatrix<f64>>,
}

/// One replicate's contribution: simulate at theta, sweep the grid, and
/// average the three integrands.
fn replica_gamma<M: Model + ?Sized>(
    model: &M,
    theta: &ParameterVector,
    design: &ExperimentDesign,
    replicate: u64,
) -> Result<ReplicaAccum> {
    let dims = model.dims();
    let pd = model.param_dims();
    let (d_s, d_r) = (dims.d_s, dims.d_r);
    let d = dims.d();
    let hypo = d_s > 0;
    let (d_as, d_ar, d_b) = (pd.d_alpha_s, pd.d_alpha_r, pd.d_beta);
    let ds = simulate_ips_replicate(model, theta, design, replicate)?;
    let n = design.n_particles;
    let n_steps = design.n_obs;
    let delta = design.delta();
    let weight = delta / n as f64;

    let state_free = model.sigma_state_free();
    let alpha_s_flat = theta.alpha_s.clone();
    let alpha_r_flat = theta.alpha_r.clone();
    let beta_flat = theta.beta.clone();

    let mut g_as = (hypo && d_as > 0).then(|| DMatrix::zeros(d_as, d_as));
    let mut g_ar = DMatrix::zeros(d_ar, d_ar);
    let mut g_b = DMatrix::zeros(d_b, d_b);
    let mut g_b_em = hypo.then(|| DMatrix::zeros(d_b, d_b));

    // Sigma and its beta-derivatives for a state-free diffusion can be
    // computed once from any evaluation point.
    let mut cached_beta_terms: Option<(DMatrix<f64>, Option<DMatrix<f64>>)> = None;

    for j in 0..n_steps {
        let base = j * n * d;
        let slice = &ds.values[base..base + n * d];
        let mean = column_means(slice, n, d);
        let cloud = Cloud::new(slice, n, d, &mean);
        for i in 0..n {
            let pack = build_sigma(model, theta, &cloud, i)?;

            // alpha_S block: 4 dV_S^T Sigma_SS^{-1} dV_S.
            if let Some(g) = g_as.as_mut() {
                let x = cloud.row(i);
                let mut dvs: Vec<Vec<f64>> = Vec::with_capacity(d_as);
                for k in 0..d_as {
                    dvs.push(fd_theta(
                        &alpha_s_flat,
                        k,
                        |a| {
                            let mut v = vec![0.0; d_s];
                            model.smooth_drift(a, x, &mut v);
                            Ok(v)
                        },
                        fd_vec,
                    )?);
                }
                // Sigma_SS = a_S / 3, so Sigma_SS^{-1} = 3 a_S^{-1}.
                let a_s = pack.a_s.as_ref().expect("hypoelliptic pack has a_S");
                let ss_inv = a_s
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Numerical("a_S not SPD in Gamma plug-in".into()))?
                    .inverse()
                    * 3.0;
                for k1 in 0..d_as {
                    for k2 in 0..d_as {
                        let mut acc = 0.0;
                        for r in 0..d_s {
                            for c in 0..d_s {
                                acc += dvs[k1][r] * ss_inv[(r, c)] * dvs[k2][c];
                            }
                        }
                        g[(k1, k2)] += 4.0 * weight * acc;
                    }
                }
            }

            // alpha_R block: dV_R0^T Sigma_RR^{-1} dV_R0, with the full
            // rough drift including the interaction mean.
            {
                let mut dvr: Vec<Vec<f64>> = Vec::with_capacity(d_ar);
                for k in 0..d_ar {
                    dvr.push(fd_theta(
                        &alpha_r_flat,
                        k,
                        |a| {
                            let mut v = vec![0.0; d_r];
                            crate::model::rough_drift(model, a, &cloud, i, &mut v)?;
                            Ok(v)
                        },
                        fd_vec,
                    )?);
                }
                let rr_inv = pack
                    .a_r
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Numerical("a_R not SPD in Gamma plug-in".into()))?
                    .inverse();
                for k1 in 0..d_ar {
                    for k2 in 0..d_ar {
                        let mut acc = 0.0;
                        for r in 0..d_r {
                            for c in 0..d_r {
                                acc += dvr[k1][r] * rr_inv[(r, c)] * dvr[k2][c];
                            }
                        }
                        g_ar[(k1, k2)] += weight * acc;
                    }
                }
            }

            // beta block: 1/2 tr(dSigma Sigma^{-1} dSigma Sigma^{-1}), with
            // the full Sigma in the hypoelliptic regime and Sigma_RR in the
            // elliptic one; the EM counterpart always uses Sigma_RR.
            let (beta_term, beta_em_term) = match (&cached_beta_terms, state_free) {
                (Some(t), true) => t.clone(),
                _ => {
                    let full_term = {
                        let sigma_inv = &pack.lambda;
                        let mut dsig: Vec<DMatrix<f64>> = Vec::with_capacity(d_b);
                        for k in 0..d_b {
                            dsig.push(fd_theta(
                                &beta_flat,
                                k,
                                |b| {
                                    let t2 = ParameterVector::unbounded(
                                        theta.alpha_s.clone(),
                                        theta.alpha_r.clone(),
                                        b.to_vec(),
                                    );
                                    Ok(build_sigma(model, &t2, &cloud, i)?.sigma)
                                },
                                fd_mat,
                            )?);
                        }
                        let mut t = DMatrix::zeros(d_b, d_b);
                        for k1 in 0..d_b {
                            let m1 = &dsig[k1] * sigma_inv;
                            for k2 in 0..d_b {
                                let m2 = &dsig[k2] * sigma_inv;
                                t[(k1, k2)] = 0.5 * (&m1 * &m2).trace();
                            }
                        }
                        t
                    };
                    let em_term = hypo
                        .then(|| -> Result<DMatrix<f64>> {
                            let rr_inv = pack
                                .a_r
                                .clone()
                                .cholesky()
                                .ok_or_else(|| {
                                    Error::Numerical("a_R not SPD in Gamma plug-in".into())
                                })?
                                .inverse();
                            let mut dsig: Vec<DMatrix<f64>> = Vec::with_capacity(d_b);
                            for k in 0..d_b {
                                dsig.push(fd_theta(
                                    &beta_flat,
                                    k,
                                    |b| Ok(crate::model::diffusion_matrix_a_r(model, b, &cloud, i)?),
                                    fd_mat,
                                )?);
                            }
                            let mut t = DMatrix::zeros(d_b, d_b);
                            for k1 in 0..d_b {
                                let m1 = &dsig[k1] * &rr_inv;
                                for k2 in 0..d_b {
                                    let m2 = &dsig[k2] * &rr_inv;
                                    t[(k1, k2)] = 0.5 * (&m1 * &m2).trace();
                                }
                            }
                            Ok(t)
                        })
                        .transpose()?;
                    let pair = (full_term, em_term);
                    if state_free {
                        cached_beta_terms = Some(pair.clone());
                    }
                    pair
                }
            };
            g_b += weight * &beta_term;
            if let (Some(g), Some(t)) = (g_b_em.as_mut(), beta_em_term.as_ref()) {
                *g += weight * t;
            }
        }
    }
    Ok(ReplicaAccum {
        alpha_s: g_as,
        alpha_r: g_ar,
        beta: g_b,
        beta_em: g_b_em,
    })
}

fn mean_and_se(samples: &[DMatrix<f64>]) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
    let m = samples.len();
    let mut mean = samples[0].clone();
    for s in &samples[1..] {
        mean += s;
    }
    mean /= m as f64;
    if m < 2 {
        return (mean, None);
    }
    let mut var = DMatrix::zeros(mean.nrows(), mean.ncols());
    for s in samples {
        let d = s - &mean;
        var += d.component_mul(&d);
    }
    var /= (m - 1) as f64;
    let se = var.map(|v| (v / m as f64).sqrt());
    (mean, Some(se))
}

/// Plug-in Monte Carlo estimate of the Theorem-style limit precision
/// matrices at `theta`, averaging over `mc_replicas` independent replicate
/// simulations of `design`.
pub fn plugin_precision<M: Model + ?Sized>(
    model: &M,
    theta: &ParameterVector,
    design: &ExperimentDesign,
    mc_replicas: usize,
) -> Result<PrecisionMatrices> {
    theta.validate()?;
    if mc_replicas == 0 {
        return Err(Error::Config("need at least one Monte Carlo replica".into()));
    }
    let d = model.dims().d();
    if !design.is_complete(d) {
        return Err(Error::Config(
            "precision plug-in simulates and reads the full state; use a complete design".into(),
        ));
    }
    let hypo = model.dims().d_s > 0;
    let mut acc: Vec<ReplicaAccum> = Vec::with_capacity(mc_replicas);
    for m in 0..mc_replicas {
        acc.push(replica_gamma(model, theta, design, m as u64)?);
    }

    let collect =
        |f: &dyn Fn(&ReplicaAccum) -> DMatrix<f64>| acc.iter().map(f).collect::<Vec<_>>();
    let (mut g_ar, se_ar) = mean_and_se(&collect(&|a| a.alpha_r.clone()));
    let (mut g_b, se_b) = mean_and_se(&collect(&|a| a.beta.clone()));
    symmetrize(&mut g_ar);
    symmetrize(&mut g_b);
    let (g_as, se_as) = if acc[0].alpha_s.is_some() {
        let (mut m0, se) = mean_and_se(&collect(&|a| a.alpha_s.clone().unwrap()));
        symmetrize(&mut m0);
        (Some(m0), se)
    } else {
        (None, None)
    };
    let g_b_em = acc[0].beta_em.is_some().then(|| {
        let (mut m0, _) = mean_and_se(&collect(&|a| a.beta_em.clone().unwrap()));
        symmetrize(&mut m0);
        m0
    });

    Ok(PrecisionMatrices {
        gamma_alpha_s: g_as,
        gamma_alpha_r: g_ar,
        gamma_beta: g_b,
        gamma_beta_em: g_b_em,
        regime: if hypo { Regime::Hypoelliptic } else { Regime::Elliptic },
        mc_particles_times_steps: mc_replicas * design.n_particles * design.n_obs,
        se_alpha_s: se_as,
        se_alpha_r: se_ar,
        se_beta: se_b,
    })
}

/// CLT rescaling rates per flattened component: sqrt(N / Delta^2) for
/// alpha_S, sqrt(N) for alpha_R, sqrt(N / Delta) for beta.
pub fn clt_rates<M: Model + ?Sized>(model: &M, design: &ExperimentDesign) -> Vec<f64> {
    let pd = model.param_dims();
    let nf = design.n_particles as f64;
    let delta = design.delta();
    let mut rates = Vec::with_capacity(pd.d_alpha_s + pd.d_alpha_r + pd.d_beta);
    rates.extend(std::iter::repeat((nf / (delta * delta)).sqrt()).take(pd.d_alpha_s));
    rates.extend(std::iter::repeat(nf.sqrt()).take(pd.d_alpha_r));
    rates.extend(std::iter::repeat((nf / delta).sqrt()).take(pd.d_beta));
    rates
}

/// CLT scaling diagnostic over replicate estimates.
#[derive(Debug, Clone, Serialize)]
pub struct CltReport {
    /// Mean of the rate-rescaled estimation errors, per component.
    pub rescaled_mean: Vec<f64>,
    /// Sample covariance of the rescaled errors (row-major).
    pub rescaled_cov: Vec<Vec<f64>>,
    /// Sample variance of each rescaled component divided by the matching
    /// diagonal entry of the inverse precision block; near 1 when the CLT
    /// and the plug-in agree.
    pub variance_ratio: Vec<f64>,
    pub n_replicates: usize,
}

/// Rescale replicate estimation errors by their limit rates and compare the
/// sample spread against the plug-in precision matrices.
pub fn clt_diagnostic<M: Model + ?Sized>(
    model: &M,
    estimates: &[ParameterVector],
    theta_true: &ParameterVector,
    design: &ExperimentDesign,
    precision: &PrecisionMatrices,
) -> Result<CltReport> {
    const NEED: usize = 10;
    if estimates.len() < NEED {
        return Err(Error::InsufficientReplicates {
            got: estimates.len(),
            need: NEED,
        });
    }
    let pd = model.param_dims();
    let dim = theta_true.dim();
    let rates = clt_rates(model, design);
    let truth = theta_true.flatten();
    let n_rep = estimates.len();

    let rescaled: Vec<Vec<f64>> = estimates
        .iter()
        .map(|e| {
            let f = e.flatten();
            (0..dim).map(|k| rates[k] * (f[k] - truth[k])).collect()
        })
        .collect();
    let mut mean = vec![0.0; dim];
    for r in &rescaled {
        for k in 0..dim {
            mean[k] += r[k];
        }
    }
    mean.iter_mut().for_each(|v| *v /= n_rep as f64);
    let mut cov = vec![vec![0.0; dim]; dim];
    for r in &rescaled {
        for k1 in 0..dim {
            for k2 in 0..dim {
                cov[k1][k2] += (r[k1] - mean[k1]) * (r[k2] - mean[k2]);
            }
        }
    }
    for row in cov.iter_mut() {
        row.iter_mut().for_each(|v| *v /= (n_rep - 1) as f64);
    }

    // Limit variances: diagonal of each inverse precision block, in
    // flattened component order.
    let mut limit_var = Vec::with_capacity(dim);
    let inv_diag = |g: &DMatrix<f64>| -> Result<Vec<f64>> {
        Ok(g.clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("precision block is not SPD".into()))?
            .inverse()
            .diagonal()
            .iter()
            .copied()
            .collect())
    };
    if pd.d_alpha_s > 0 {
        match &precision.gamma_alpha_s {
            Some(g) => limit_var.extend(inv_diag(g)?),
            None => {
                return Err(Error::Shape(
                    "precision matrices lack the alpha_S block the model requires".into(),
                ))
            }
        }
    }
    limit_var.extend(inv_diag(&precision.gamma_alpha_r)?);
    limit_var.extend(inv_diag(&precision.gamma_beta)?);

    let variance_ratio = (0..dim).map(|k| cov[k][k] / limit_var[k]).collect();
    Ok(CltReport {
        rescaled_mean: mean,
        rescaled_cov: cov,
        variance_ratio,
        n_replicates: n_rep,
    })
}

/// Serializable report for the JSON interface.
#[derive(Debug, Clone, Serialize)]
pub struct PrecisionReport {
    pub regime: Regime,
    pub model_id: String,
    pub design: ExperimentDesign,
    pub mc_replicas: usize,
    pub mc_particles_times_steps: usize,
    pub gamma_alpha_s: Option<Vec<Vec<f64>>>,
    pub gamma_alpha_r: Vec<Vec<f64>>,
    pub gamma_beta: Vec<Vec<f64>>,
    pub gamma_beta_em: Option<Vec<Vec<f64>>>,
    pub se_alpha_s: Option<Vec<Vec<f64>>>,
    pub se_alpha_r: Option<Vec<Vec<f64>>>,
    pub se_beta: Option<Vec<Vec<f64>>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

impl PrecisionMatrices {
    pub fn report<M: Model + ?Sized>(
        &self,
        model: &M,
        design: &ExperimentDesign,
        mc_replicas: usize,
    ) -> PrecisionReport {
        PrecisionReport {
            regime: self.regime,
            model_id: model.id().to_string(),
            design: design.clone(),
            mc_replicas,
            mc_particles_times_steps: self.mc_particles_times_steps,
            gamma_alpha_s: self.gamma_alpha_s.as_ref().map(rows),
            gamma_alpha_r: rows(&self.gamma_alpha_r),
            gamma_beta: rows(&self.gamma_beta),
            gamma_beta_em: self.gamma_beta_em.as_ref().map(rows),
            se_alpha_s: self.se_alpha_s.as_ref().map(rows),
            se_alpha_r: self.se_alpha_r.as_ref().map(rows),
            se_beta: self.se_beta.as_ref().map(rows),
        }
    }
}

/// Method-aware diffusion-block precision, used by the CLT stddev-ratio
/// comparisons: the EM baseline's diffusion information is the rough-block
/// form.
pub fn gamma_beta_for_method(precision: &PrecisionMatrices, method: Method) -> &DMatrix<f64> {
    match (method, &precision.gamma_beta_em) {
        (Method::Em, Some(g)) => g,
        _ => &precision.gamma_beta,
    }
}
