//! Coefficient-function contract for the interacting particle model class.
//!
//! A particle state is laid out smooth-block-first: coordinates `0..d_s` are
//! the smooth block (no direct Brownian forcing), `d_s..d` the rough block.
//! The empirical measure is the uniform measure over all N current particle
//! rows, self-inclusive.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_s: usize,
    pub d_r: usize,
    pub d_b: usize,
}

impl Dims {
    pub fn d(&self) -> usize {
        self.d_s + self.d_r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamDims {
    pub d_alpha_s: usize,
    pub d_alpha_r: usize,
    pub d_beta: usize,
}

/// Positions of all N particles at one time, row-major N x d.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystemState {
    pub time: f64,
    pub states: Vec<f64>,
    pub n_particles: usize,
    pub dim: usize,
}

impl ParticleSystemState {
    pub fn new(time: f64, states: Vec<f64>, n_particles: usize, dim: usize) -> Result<Self> {
        if states.len() != n_particles * dim || n_particles == 0 {
            return Err(Error::Shape(format!(
                "state matrix {}x{} does not match buffer length {}",
                n_particles,
                dim,
                states.len()
            )));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite particle state".into()));
        }
        Ok(Self {
            time,
            states,
            n_particles,
            dim,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }
}

/// Borrowed view of one time-slice of the particle system together with the
/// precomputed coordinate means of the empirical measure.
#[derive(Debug, Clone, Copy)]
pub struct Cloud<'a> {
    pub states: &'a [f64],
    pub n_particles: usize,
    pub dim: usize,
    pub mean: &'a [f64],
}

impl<'a> Cloud<'a> {
    pub fn new(states: &'a [f64], n_particles: usize, dim: usize, mean: &'a [f64]) -> Self {
        debug_assert_eq!(states.len(), n_particles * dim);
        debug_assert_eq!(mean.len(), dim);
        Cloud {
            states,
            n_particles,
            dim,
            mean,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn column_means(states: &[f64], n_particles: usize, dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for i in 0..n_particles {
        for c in 0..dim {
            mean[c] += states[i * dim + c];
        }
    }
    for m in &mut mean {
        *m /= n_particles as f64;
    }
    mean
}

/// Coefficient functions of one interacting-particle model.
///
/// The smooth drift takes only (alpha_S, x). Rough drift and diffusion
/// columns split into a self part and a pair kernel whose measure term is the
/// empirical mean over all N particles (self-inclusive). Models supply
/// analytic x-derivatives of the smooth drift.
pub trait Model: Sync {
    fn id(&self) -> &'static str;
    fn dims(&self) -> Dims;
    fn param_dims(&self) -> ParamDims;

    /// V_{S,0}(alpha_S, x), length d_s.
    fn smooth_drift(&self, alpha_s: &[f64], x: &[f64], out: &mut [f64]);

    /// Jacobian of V_{S,0} w.r.t. x, row-major d_s x d.
    fn smooth_jacobian(&self, alpha_s: &[f64], x: &[f64], out: &mut [f64]);

    /// Rough-rough Hessian of V_{S,0}, row-major d_s x d_r x d_r.
    fn smooth_rr_hessian(&self, alpha_s: &[f64], x: &[f64], out: &mut [f64]);

    /// V^I_{R,0}(alpha_R, x), length d_r.
    fn rough_drift_self(&self, alpha_r: &[f64], x: &[f64], out: &mut [f64]);

    /// Pair kernel V^{II}_{R,0}(alpha_R, x, w), length d_r.
    fn rough_drift_pair(&self, alpha_r: &[f64], x: &[f64], w: &[f64], out: &mut [f64]);

    /// V^I_{R,j}(beta, x) for 1 <= j <= d_b, length d_r.
    fn diffusion_self(&self, j: usize, beta: &[f64], x: &[f64], out: &mut [f64]);

    /// Pair kernel V^{II}_{R,j}(beta, x, w), length d_r.
    fn diffusion_pair(&self, j: usize, beta: &[f64], x: &[f64], w: &[f64], out: &mut [f64]);

    /// Empirical mean of the rough-drift pair kernel over the cloud.
    ///
    /// The default loops over all particles; models whose kernel is linear in
    /// w may override it with an evaluation at the cloud mean.
    fn rough_drift_pair_mean(&self, alpha_r: &[f64], x: &[f64], cloud: &Cloud, out: &mut [f64]) {
        pair_mean_loop(out.len(), cloud, |w, buf| {
            self.rough_drift_pair(alpha_r, x, w, buf)
        }, out);
    }

    /// Empirical mean of the diffusion pair kernel over the cloud.
    fn diffusion_pair_mean(
        &self,
        j: usize,
        beta: &[f64],
        x: &[f64],
        cloud: &Cloud,
        out: &mut [f64],
    ) {
        pair_mean_loop(out.len(), cloud, |w, buf| {
            self.diffusion_pair(j, beta, x, w, buf)
        }, out);
    }

    /// True when the diffusion columns and the smooth Jacobian do not depend
    /// on the state, so Sigma is fixed across (particle, step) for a given
    /// theta. Enables caching in the contrast evaluation.
    fn sigma_state_free(&self) -> bool {
        false
    }
}

fn pair_mean_loop<F>(d_r: usize, cloud: &Cloud, mut kernel: F, out: &mut [f64])
where
    F: FnMut(&[f64], &mut [f64]),
{
    let mut buf = vec![0.0; d_r];
    out.fill(0.0);
    for l in 0..cloud.n_particles {
        kernel(cloud.row(l), &mut buf);
        for (o, b) in out.iter_mut().zip(&buf) {
            *o += b;
        }
    }
    let inv_n = 1.0 / cloud.n_particles as f64;
    for o in out.iter_mut() {
        *o *= inv_n;
    }
}

/// Full rough drift V_{R,0} = V^I + empirical mean of V^{II} for particle i.
pub fn rough_drift<M: Model + ?Sized>(
    model: &M,
    alpha_r: &[f64],
    cloud: &Cloud,
    i: usize,
    out: &mut [f64],
) -> Result<()> {
    let dims = model.dims();
    if i >= cloud.n_particles || cloud.dim != dims.d() || out.len() != dims.d_r {
        return Err(Error::Shape(format!(
            "rough_drift: particle {i} of {}, state dim {} (model d = {}), out {}",
            cloud.n_particles,
            cloud.dim,
            dims.d(),
            out.len()
        )));
    }
    if alpha_r.len() != model.param_dims().d_alpha_r {
        return Err(Error::Shape(format!(
            "rough_drift: alpha_R length {} != {}",
            alpha_r.len(),
            model.param_dims().d_alpha_r
        )));
    }
    let x = cloud.row(i);
    model.rough_drift_self(alpha_r, x, out);
    let mut pair = vec![0.0; dims.d_r];
    model.rough_drift_pair_mean(alpha_r, x, cloud, &mut pair);
    for (o, p) in out.iter_mut().zip(&pair) {
        *o += p;
    }
    Ok(())
}

/// Diffusion columns V_R = [V_{R,1} .. V_{R,d_B}] with measure terms, d_r x d_b.
pub fn diffusion_columns<M: Model + ?Sized>(
    model: &M,
    beta: &[f64],
    cloud: &Cloud,
    i: usize,
) -> Result<DMatrix<f64>> {
    let dims = model.dims();
    if i >= cloud.n_particles || cloud.dim != dims.d() {
        return Err(Error::Shape(format!(
            "diffusion_columns: particle {i} of {}, state dim {}",
            cloud.n_particles, cloud.dim
        )));
    }
    let x = cloud.row(i);
    let mut cols = DMatrix::zeros(dims.d_r, dims.d_b);
    let mut self_part = vec![0.0; dims.d_r];
    let mut pair_part = vec![0.0; dims.d_r];
    for j in 1..=dims.d_b {
        model.diffusion_self(j, beta, x, &mut self_part);
        model.diffusion_pair_mean(j, beta, x, cloud, &mut pair_part);
        for r in 0..dims.d_r {
            cols[(r, j - 1)] = self_part[r] + pair_part[r];
        }
    }
    Ok(cols)
}

/// a_R = V_R V_R^T for particle i, d_r x d_r.
pub fn diffusion_matrix_a_r<M: Model + ?Sized>(
    model: &M,
    beta: &[f64],
    cloud: &Cloud,
    i: usize,
) -> Result<DMatrix<f64>> {
    let cols = diffusion_columns(model, beta, cloud, i)?;
    let a_r = &cols * cols.transpose();
    if a_r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "a_R contains non-finite entries at particle {i}"
        )));
    }
    Ok(a_r)
}

/// Rough-block sub-Jacobian of the smooth drift, d_s x d_r (columns d_s..d).
pub fn smooth_jacobian_rough<M: Model + ?Sized>(
    model: &M,
    alpha_s: &[f64],
    x: &[f64],
) -> DMatrix<f64> {
    let dims = model.dims();
    let d = dims.d();
    let mut full = vec![0.0; dims.d_s * d];
    model.smooth_jacobian(alpha_s, x, &mut full);
    let mut jr = DMatrix::zeros(dims.d_s, dims.d_r);
    for s in 0..dims.d_s {
        for r in 0..dims.d_r {
            jr[(s, r)] = full[s * d + dims.d_s + r];
        }
    }
    jr
}

/// a_S = (d_{x_R} V_{S,0}) a_R (d_{x_R} V_{S,0})^T for particle i.
pub fn hypo_matrix_a_s<M: Model + ?Sized>(
    model: &M,
    theta: &crate::params::ParameterVector,
    cloud: &Cloud,
    i: usize,
) -> Result<DMatrix<f64>> {
    let dims = model.dims();
    if dims.d_s == 0 {
        return Err(Error::EllipticModel);
    }
    let a_r = diffusion_matrix_a_r(model, &theta.beta, cloud, i)?;
    let jr = smooth_jacobian_rough(model, &theta.alpha_s, cloud.row(i));
    let a_s = &jr * &a_r * jr.transpose();
    // SPD check: Cholesky fails exactly when a_S is degenerate at this point.
    if a_s.clone().cholesky().is_none() {
        return Err(Error::HypoellipticityViolation(format!(
            "a_S singular at particle {i} (rough sub-Jacobian may vanish)"
        )));
    }
    Ok(a_s)
}
