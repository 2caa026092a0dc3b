use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter vector theta = (alpha_S, alpha_R, beta) with per-component box
/// bounds. Flattening order is always (alpha_S, alpha_R, beta).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub alpha_s: Vec<f64>,
    pub alpha_r: Vec<f64>,
    pub beta: Vec<f64>,
    /// Closed interval [lo, hi] per flattened component.
    #[serde(with = "bounds_serde")]
    pub bounds: Vec<(f64, f64)>,
}

/// JSON has no infinities, so unbounded interval ends round-trip as nulls.
mod bounds_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(bounds: &[(f64, f64)], s: S) -> Result<S::Ok, S::Error> {
        let enc: Vec<(Option<f64>, Option<f64>)> = bounds
            .iter()
            .map(|&(lo, hi)| (lo.is_finite().then_some(lo), hi.is_finite().then_some(hi)))
            .collect();
        enc.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(f64, f64)>, D::Error> {
        let enc: Vec<(Option<f64>, Option<f64>)> = Vec::deserialize(d)?;
        Ok(enc
            .into_iter()
            .map(|(lo, hi)| {
                (
                    lo.unwrap_or(f64::NEG_INFINITY),
                    hi.unwrap_or(f64::INFINITY),
                )
            })
            .collect())
    }
}

impl ParameterVector {
    pub fn new(
        alpha_s: Vec<f64>,
        alpha_r: Vec<f64>,
        beta: Vec<f64>,
        bounds: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let pv = Self {
            alpha_s,
            alpha_r,
            beta,
            bounds,
        };
        pv.validate()?;
        Ok(pv)
    }

    /// Unbounded constructor: bounds are set to the whole real line.
    pub fn unbounded(alpha_s: Vec<f64>, alpha_r: Vec<f64>, beta: Vec<f64>) -> Self {
        let n = alpha_s.len() + alpha_r.len() + beta.len();
        Self {
            alpha_s,
            alpha_r,
            beta,
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); n],
        }
    }

    pub fn dim(&self) -> usize {
        self.alpha_s.len() + self.alpha_r.len() + self.beta.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend_from_slice(&self.alpha_s);
        out.extend_from_slice(&self.alpha_r);
        out.extend_from_slice(&self.beta);
        out
    }

    /// Rebuild from a flat vector, keeping this vector's block layout and bounds.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.dim() {
            return Err(Error::Shape(format!(
                "flat parameter length {} != {}",
                flat.len(),
                self.dim()
            )));
        }
        let (ds, dr) = (self.alpha_s.len(), self.alpha_r.len());
        Ok(Self {
            alpha_s: flat[..ds].to_vec(),
            alpha_r: flat[ds..ds + dr].to_vec(),
            beta: flat[ds + dr..].to_vec(),
            bounds: self.bounds.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.bounds.len() != self.dim() {
            return Err(Error::Shape(format!(
                "bounds length {} != parameter dimension {}",
                self.bounds.len(),
                self.dim()
            )));
        }
        for (k, (v, (lo, hi))) in self.flatten().iter().zip(&self.bounds).enumerate() {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("parameter component {k} not finite")));
            }
            if v < lo || v > hi {
                return Err(Error::Config(format!(
                    "parameter component {k} = {v} outside bounds [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Componentwise projection onto the bound box.
    pub fn clamp_flat(&self, flat: &mut [f64]) {
        for (v, (lo, hi)) in flat.iter_mut().zip(&self.bounds) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Bounds theta_k * [1 - margin, 1 + margin] around this value
    /// (interval endpoints swapped for negative components).
    pub fn with_multiplicative_bounds(&self, margin: f64) -> Self {
        let bounds = self
            .flatten()
            .iter()
            .map(|&v| {
                let (a, b) = (v * (1.0 - margin), v * (1.0 + margin));
                (a.min(b), a.max(b))
            })
            .collect();
        Self {
            bounds,
            ..self.clone()
        }
    }

    pub fn box_midpoint(&self) -> Vec<f64> {
        self.bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_order_is_alpha_s_alpha_r_beta() {
        let pv = ParameterVector::unbounded(vec![1.0, 2.0], vec![3.0], vec![4.0]);
        assert_eq!(pv.flatten(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pv.dim(), 4);
    }

    #[test]
    fn out_of_bounds_is_rejected() {
        let r = ParameterVector::new(vec![], vec![2.0], vec![0.5], vec![(0.0, 1.0), (0.0, 1.0)]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn with_flat_round_trips() {
        let pv = ParameterVector::unbounded(vec![0.2, 0.8, 1.5], vec![2.0], vec![0.5]);
        let back = pv.with_flat(&pv.flatten()).unwrap();
        assert_eq!(back, pv);
    }
}
