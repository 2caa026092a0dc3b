//! Built-in models: interacting FitzHugh-Nagumo, interacting underdamped
//! Langevin in one spatial dimension, and a mean-field elliptic OU system.

use crate::model::{Cloud, Dims, Model, ParamDims};

/// Interacting FitzHugh-Nagumo neurons, theta = (a, b, c, kappa, sigma).
///
/// State rows are stored (Y, X): the recovery variable Y is the smooth
/// coordinate, the voltage X the rough (noisy) one.
///
///   dX = (X - X^3/3 - Y) dt - (kappa/N) sum_l (X - X_l) dt + sigma dB
///   dY = (1/c)(X + a - b Y) dt
#[derive(Debug, Clone, Copy, Default)]
pub struct InteractingFhn;

impl Model for InteractingFhn {
    fn id(&self) -> &'static str {
        "ifhn"
    }

    fn dims(&self) -> Dims {
        Dims { d_s: 1, d_r: 1, d_b: 1 }
    }

    fn param_dims(&self) -> ParamDims {
        ParamDims { d_alpha_s: 3, d_alpha_r: 1, d_beta: 1 }
    }

    fn smooth_drift(&self, alpha_s: &[f64], x: &[f64], out: &mut [f64]) {
        let (a, b, c) = (alpha_s[0], alpha_s[1], alpha_s[2]);
        out[0] = (x[1] + a - b * x[0]) / c;
    }

    fn smooth_jacobian(&self, alpha_s: &[f64], _x: &[f64], out: &mut [f64]) {
        let (b, c) = (alpha_s[1], alpha_s[2]);
        out[0] = -b / c;
        out[1] = 1.0 / c;
    }

    fn smooth_rr_hessian(&self, _alpha_s: &[f64], _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn rough_drift_self(&self, _alpha_r: &[f64], x: &[f64], out: &mut [f64]) {
        let v = x[1];
        out[0] = v - v * v * v / 3.0 - x[0];
    }

    fn rough_drift_pair(&self, alpha_r: &[f64], x: &[f64], w: &[f64], out: &mut [f64]) {
        out[0] = -alpha_r[0] * (x[1] - w[1]);
    }

    fn rough_drift_pair_mean(&self, alpha_r: &[f64], x: &[f64], cloud: &Cloud, out: &mut [f64]) {
        // Kernel is linear in w, so the mean collapses to the cloud mean.
        out[0] = -alpha_r[0] * (x[1] - cloud.mean[1]);
    }

    fn diffusion_self(&self, _j: usize, beta: &[f64], _x: &[f64], out: &mut [f64]) {
        out[0] = beta[0];
    }

    fn diffusion_pair(&self, _j: usize, _beta: &[f64], _x: &[f64], _w: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn diffusion_pair_mean(
        &self,
        _j: usize,
        _beta: &[f64],
        _x: &[f64],
        _cloud: &Cloud,
        out: &mut [f64],
    ) {
        out[0] = 0.0;
    }

    fn sigma_state_free(&self) -> bool {
        true
    }
}

/// Interacting underdamped Langevin dynamics with d' = 1,
/// theta = (lambda, gamma, kappa, sigma), alpha_S empty.
///
/// Confining potential V(q) = lambda (q - 0.5)^2, interaction U(q) = q^2/2:
///
///   dq = p dt
///   dp = -2 lambda (q - 0.5) dt - (kappa/N) sum_l (q - q_l) dt - gamma p dt + sigma dB
#[derive(Debug, Clone, Copy, Default)]
pub struct InteractingLangevin1d;

impl Model for InteractingLangevin1d {
    fn id(&self) -> &'static str {
        "ilangevin1d"
    }

    fn dims(&self) -> Dims {
        Dims { d_s: 1, d_r: 1, d_b: 1 }
    }

    fn param_dims(&self) -> ParamDims {
        ParamDims { d_alpha_s: 0, d_alpha_r: 3, d_beta: 1 }
    }

    fn smooth_drift(&self, _alpha_s: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = x[1];
    }

    fn smooth_jacobian(&self, _alpha_s: &[f64], _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 1.0;
    }

    fn smooth_rr_hessian(&self, _alpha_s: &[f64], _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn rough_drift_self(&self, alpha_r: &[f64], x: &[f64], out: &mut [f64]) {
        let (lambda, gamma) = (alpha_r[0], alpha_r[1]);
        out[0] = -2.0 * lambda * (x[0] - 0.5) - gamma * x[1];
    }

    fn rough_drift_pair(&self, alpha_r: &[f64], x: &[f64], w: &[f64], out: &mut [f64]) {
        out[0] = -alpha_r[2] * (x[0] - w[0]);
    }

    fn rough_drift_pair_mean(&self, alpha_r: &[f64], x: &[f64], cloud: &Cloud, out: &mut [f64]) {
        out[0] = -alpha_r[2] * (x[0] - cloud.mean[0]);
    }

    fn diffusion_self(&self, _j: usize, beta: &[f64], _x: &[f64], out: &mut [f64]) {
        out[0] = beta[0];
    }

    fn diffusion_pair(&self, _j: usize, _beta: &[f64], _x: &[f64], _w: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn diffusion_pair_mean(
        &self,
        _j: usize,
        _beta: &[f64],
        _x: &[f64],
        _cloud: &Cloud,
        out: &mut [f64],
    ) {
        out[0] = 0.0;
    }

    fn sigma_state_free(&self) -> bool {
        true
    }
}

/// Mean-field attractive Ornstein-Uhlenbeck system, elliptic (d_S = 0),
/// theta = (alpha, kappa, sigma):
///
///   dX = -alpha X dt - (kappa/N) sum_l (X - X_l) dt + sigma dB
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanFieldOu;

impl Model for MeanFieldOu {
    fn id(&self) -> &'static str {
        "mfou"
    }

    fn dims(&self) -> Dims {
        Dims { d_s: 0, d_r: 1, d_b: 1 }
    }

    fn param_dims(&self) -> ParamDims {
        ParamDims { d_alpha_s: 0, d_alpha_r: 2, d_beta: 1 }
    }

    fn smooth_drift(&self, _alpha_s: &[f64], _x: &[f64], _out: &mut [f64]) {}

    fn smooth_jacobian(&self, _alpha_s: &[f64], _x: &[f64], _out: &mut [f64]) {}

    fn smooth_rr_hessian(&self, _alpha_s: &[f64], _x: &[f64], _out: &mut [f64]) {}

    fn rough_drift_self(&self, alpha_r: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = -alpha_r[0] * x[0];
    }

    fn rough_drift_pair(&self, alpha_r: &[f64], x: &[f64], w: &[f64], out: &mut [f64]) {
        out[0] = -alpha_r[1] * (x[0] - w[0]);
    }

    fn rough_drift_pair_mean(&self, alpha_r: &[f64], x: &[f64], cloud: &Cloud, out: &mut [f64]) {
        out[0] = -alpha_r[1] * (x[0] - cloud.mean[0]);
    }

    fn diffusion_self(&self, _j: usize, beta: &[f64], _x: &[f64], out: &mut [f64]) {
        out[0] = beta[0];
    }

    fn diffusion_pair(&self, _j: usize, _beta: &[f64], _x: &[f64], _w: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn diffusion_pair_mean(
        &self,
        _j: usize,
        _beta: &[f64],
        _x: &[f64],
        _cloud: &Cloud,
        out: &mut [f64],
    ) {
        out[0] = 0.0;
    }

    fn sigma_state_free(&self) -> bool {
        true
    }
}

/// Known model identifiers, accepted in configs.
pub const BUILTIN_IDS: [&str; 3] = ["ifhn", "ilangevin1d", "mfou"];

/// Run a closure against the built-in model named by `id` via dynamic dispatch.
pub fn with_builtin<R>(id: &str, f: impl FnOnce(&dyn Model) -> R) -> Option<R> {
    match id {
        "ifhn" => Some(f(&InteractingFhn)),
        "ilangevin1d" => Some(f(&InteractingLangevin1d)),
        "mfou" => Some(f(&MeanFieldOu)),
        _ => None,
    }
}

/// Statically dispatch on a built-in model id, keeping the numerical kernels
/// monomorphized over the concrete model type. Evaluates to `Option<_>`.
#[macro_export]
macro_rules! dispatch_builtin {
    ($id:expr, |$m:ident| $body:expr) => {
        match $id {
            "ifhn" => {
                let $m = &$crate::models::InteractingFhn;
                Some($body)
            }
            "ilangevin1d" => {
                let $m = &$crate::models::InteractingLangevin1d;
                Some($body)
            }
            "mfou" => {
                let $m = &$crate::models::MeanFieldOu;
                Some($body)
            }
            _ => None,
        }
    };
}
