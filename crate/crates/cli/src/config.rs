//! Experiment configuration: a single JSON document. Optional fields are
//! materialized into the resolved form, which is echoed next to the outputs
//! so every run records exactly what it executed.

use serde::{Deserialize, Serialize};

use ips_core::contrast::{AdamConfig, Method, ObservationMode};
use ips_core::models::with_builtin;
use ips_core::sim::{ExperimentDesign, InitialLaw};
use ips_core::{Error, ParameterVector, Result};

/// Observation design as written in configs; the RNG seed and the observed
/// coordinates are filled in per run and per mode.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DesignSpec {
    pub n_particles: usize,
    pub n_obs: usize,
    pub t_horizon: f64,
    pub fine_step: f64,
    pub initial_law: Option<InitialLaw>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RawConfig {
    pub model: String,
    pub theta_true: ThetaSpec,
    pub design: DesignSpec,
    #[serde(default)]
    pub observed_coords: Option<Vec<usize>>,
    #[serde(default)]
    pub replicates: Option<usize>,
    #[serde(default)]
    pub methods: Option<Vec<Method>>,
    #[serde(default)]
    pub modes: Option<Vec<ObservationMode>>,
    #[serde(default)]
    pub adam: Option<AdamConfig>,
    #[serde(default)]
    pub bounds_margin: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub mc_replicas: Option<usize>,
    #[serde(default)]
    pub clt: Option<bool>,
}

/// True parameter as written in configs (bounds are derived).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ThetaSpec {
    pub alpha_s: Vec<f64>,
    pub alpha_r: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Fully materialized configuration; round-trips through JSON bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub model: String,
    pub theta_true: ThetaSpec,
    pub design: DesignSpec,
    /// Coordinates recorded in partial mode.
    pub observed_coords: Vec<usize>,
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub modes: Vec<ObservationMode>,
    pub adam: AdamConfig,
    /// Optimization box: theta_true * [1 - margin, 1 + margin] per component.
    pub bounds_margin: f64,
    pub seed: u64,
    /// Monte Carlo replicas behind the precision plug-in.
    pub mc_replicas: usize,
    /// Whether `asymptotics` also runs the CLT diagnostic over estimates.csv.
    pub clt: bool,
}

impl RawConfig {
    pub fn resolve(self, seed_override: Option<u64>) -> Result<ExperimentConfig> {
        let dims = with_builtin(&self.model, |m| m.dims())
            .ok_or_else(|| Error::Config(format!("unknown model id {:?}", self.model)))?;
        let pd = with_builtin(&self.model, |m| m.param_dims()).unwrap();
        let t = &self.theta_true;
        if (t.alpha_s.len(), t.alpha_r.len(), t.beta.len())
            != (pd.d_alpha_s, pd.d_alpha_r, pd.d_beta)
        {
            return Err(Error::Config(format!(
                "theta_true block lengths ({}, {}, {}) do not match model {:?} ({}, {}, {})",
                t.alpha_s.len(),
                t.alpha_r.len(),
                t.beta.len(),
                self.model,
                pd.d_alpha_s,
                pd.d_alpha_r,
                pd.d_beta
            )));
        }
        let observed_coords = self
            .observed_coords
            .unwrap_or_else(|| (0..dims.d_s).collect());
        let modes = self.modes.unwrap_or_else(|| vec![ObservationMode::Complete]);
        if modes.contains(&ObservationMode::Partial) {
            if observed_coords.is_empty() || observed_coords.len() >= dims.d() {
                return Err(Error::Config(format!(
                    "partial mode needs a nonempty strict subset of coordinates, got {observed_coords:?}"
                )));
            }
        }
        let bounds_margin = self.bounds_margin.unwrap_or(0.5);
        if !(bounds_margin > 0.0 && bounds_margin.is_finite()) {
            return Err(Error::Config(format!(
                "bounds_margin must be positive and finite, got {bounds_margin}"
            )));
        }
        let config = ExperimentConfig {
            model: self.model,
            theta_true: self.theta_true,
            design: self.design,
            observed_coords,
            replicates: self.replicates.unwrap_or(1),
            methods: self.methods.unwrap_or_else(|| vec![Method::Lg]),
            modes,
            adam: self.adam.unwrap_or_default(),
            bounds_margin,
            seed: seed_override.or(self.seed).unwrap_or(0),
            mc_replicas: self.mc_replicas.unwrap_or(2),
            clt: self.clt.unwrap_or(false),
        };
        config.adam.validate()?;
        config.theta_template()?.validate()?;
        config.full_design().validate(dims.d())?;
        if config.methods.is_empty() || config.modes.is_empty() {
            return Err(Error::Config("methods and modes must be nonempty".into()));
        }
        Ok(config)
    }
}

impl ExperimentConfig {
    /// True parameter with the multiplicative optimization box attached.
    pub fn theta_template(&self) -> Result<ParameterVector> {
        let t = &self.theta_true;
        let pv = ParameterVector::unbounded(t.alpha_s.clone(), t.alpha_r.clone(), t.beta.clone());
        let pv = pv.with_multiplicative_bounds(self.bounds_margin);
        pv.validate()?;
        Ok(pv)
    }

    fn design_with(&self, observed_coords: Vec<usize>) -> ExperimentDesign {
        let d = with_builtin(&self.model, |m| m.dims().d()).unwrap();
        ExperimentDesign {
            n_particles: self.design.n_particles,
            n_obs: self.design.n_obs,
            t_horizon: self.design.t_horizon,
            fine_step: self.design.fine_step,
            seed: self.seed,
            observed_coords,
            initial_law: self
                .design
                .initial_law
                .clone()
                .unwrap_or_else(|| InitialLaw::standard(d)),
        }
    }

    /// Complete-observation design (the full state is recorded).
    pub fn full_design(&self) -> ExperimentDesign {
        let d = with_builtin(&self.model, |m| m.dims().d()).unwrap();
        self.design_with((0..d).collect())
    }

    /// Design for the given observation mode.
    pub fn design_for(&self, mode: ObservationMode) -> ExperimentDesign {
        match mode {
            ObservationMode::Complete => self.full_design(),
            ObservationMode::Partial => self.design_with(self.observed_coords.clone()),
        }
    }

    /// Flattened component labels following the (alpha_S, alpha_R, beta)
    /// ordering.
    pub fn component_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for k in 0..self.theta_true.alpha_s.len() {
            names.push(format!("alpha_s_{k}"));
        }
        for k in 0..self.theta_true.alpha_r.len() {
            names.push(format!("alpha_r_{k}"));
        }
        for k in 0..self.theta_true.beta.len() {
            names.push(format!("beta_{k}"));
        }
        names
    }
}

pub fn load_config(path: &std::path::Path, seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let raw: RawConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
    raw.resolve(seed_override)
}
