//! Activation-function algebra: forward map, closed-form inverse, and
//! derivative evaluated at pre-activation values.
//!
//! Training never runs the activation forward; it maps encoded targets
//! through the inverse and weights the samples by the derivative there.
//! Only activations with a closed-form inverse are admissible.

use ndarray::{Array, ArrayView, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supported activation functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    /// `f(z) = 1 / (1 + e^-z)`, inverse `logit(d) = ln(d / (1 - d))`.
    Logistic,
}

/// An activation function plus the clip margin that keeps its inverse finite.
///
/// Inverse evaluation is only defined on `[epsilon_clip, 1 - epsilon_clip]`;
/// target encodings must stay inside that band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    kind: ActivationKind,
    epsilon_clip: f64,
}

/// Default clip margin, matching the default target encoding of 0.05 / 0.95.
pub const DEFAULT_EPSILON_CLIP: f64 = 0.05;

impl ActivationSpec {
    pub fn new(kind: ActivationKind, epsilon_clip: f64) -> Result<Self> {
        if !(epsilon_clip > 0.0 && epsilon_clip < 0.5) {
            return Err(Error::Argument(format!(
                "epsilon_clip must lie in (0, 0.5), got {epsilon_clip}"
            )));
        }
        Ok(Self { kind, epsilon_clip })
    }

    /// Logistic activation with the default clip margin.
    pub fn logistic() -> Self {
        Self {
            kind: ActivationKind::Logistic,
            epsilon_clip: DEFAULT_EPSILON_CLIP,
        }
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn epsilon_clip(&self) -> f64 {
        self.epsilon_clip
    }

    /// The (low, high) target-encoding band implied by the clip margin.
    pub fn encoding_bounds(&self) -> (f64, f64) {
        (self.epsilon_clip, 1.0 - self.epsilon_clip)
    }

    /// Forward map applied to a single pre-activation value.
    pub fn forward(&self, z: f64) -> f64 {
        match self.kind {
            ActivationKind::Logistic => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Elementwise forward map.
    pub fn forward_map<D: Dimension>(&self, z: ArrayView<'_, f64, D>) -> Array<f64, D> {
        z.mapv(|v| self.forward(v))
    }

    /// Elementwise inverse, `f^-1(d)`. Every entry must lie in
    /// `[epsilon_clip, 1 - epsilon_clip]`.
    pub fn inverse<D: Dimension>(&self, values: ArrayView<'_, f64, D>) -> Result<Array<f64, D>> {
        let (lo, hi) = self.encoding_bounds();
        for &v in values.iter() {
            if !(v >= lo && v <= hi) {
                return Err(Error::Domain(format!(
                    "activation inverse undefined for {v}: outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(match self.kind {
            ActivationKind::Logistic => values.mapv(|d| (d / (1.0 - d)).ln()),
        })
    }

    /// Elementwise derivative `f'` evaluated at pre-activation values.
    pub fn derivative_at<D: Dimension>(
        &self,
        values: ArrayView<'_, f64, D>,
    ) -> Result<Array<f64, D>> {
        for &v in values.iter() {
            if !v.is_finite() {
                return Err(Error::Domain(format!(
                    "activation derivative undefined for non-finite value {v}"
                )));
            }
        }
        Ok(match self.kind {
            ActivationKind::Logistic => values.mapv(|z| {
                let f = 1.0 / (1.0 + (-z).exp());
                f * (1.0 - f)
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};

    #[test]
    fn clip_margin_validated() {
        assert!(ActivationSpec::new(ActivationKind::Logistic, 0.0).is_err());
        assert!(ActivationSpec::new(ActivationKind::Logistic, 0.5).is_err());
        assert!(ActivationSpec::new(ActivationKind::Logistic, -0.1).is_err());
        assert!(ActivationSpec::new(ActivationKind::Logistic, 0.05).is_ok());
    }

    #[test]
    fn inverse_known_values() {
        let act = ActivationSpec::logistic();
        let out = act.inverse(arr1(&[0.5, 0.95, 0.05]).view()).unwrap();
        assert_abs_diff_eq!(out[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 19.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(out[2], -(19.0f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn inverse_rejects_out_of_band() {
        let act = ActivationSpec::logistic();
        let err = act.inverse(arr1(&[0.5, 0.04]).view()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("0.04"), "should name the offending value: {msg}");
        assert!(act.inverse(arr1(&[0.96]).view()).is_err());
        assert!(act.inverse(arr1(&[f64::NAN]).view()).is_err());
    }

    #[test]
    fn derivative_known_values() {
        let act = ActivationSpec::logistic();
        let z = arr2(&[[0.0, 19.0f64.ln()], [-(19.0f64.ln()), 0.0]]);
        let out = act.derivative_at(z.view()).unwrap();
        assert_abs_diff_eq!(out[[0, 0]], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(out[[0, 1]], 0.0475, epsilon = 1e-12);
        assert_abs_diff_eq!(out[[1, 0]], 0.0475, epsilon = 1e-12);
    }

    #[test]
    fn derivative_rejects_non_finite() {
        let act = ActivationSpec::logistic();
        assert!(act.derivative_at(arr1(&[f64::INFINITY]).view()).is_err());
        assert!(act.derivative_at(arr1(&[f64::NAN]).view()).is_err());
    }

    #[test]
    fn round_trip_identities() {
        // forward(inverse(d)) = d and f'(f^-1(d)) = d (1 - d) across the band.
        let act = ActivationSpec::logistic();
        let d: Vec<f64> = (0..=90).map(|i| 0.05 + 0.01 * i as f64).collect();
        let d = arr1(&d);
        let dbar = act.inverse(d.view()).unwrap();
        let back = act.forward_map(dbar.view());
        let deriv = act.derivative_at(dbar.view()).unwrap();
        for i in 0..d.len() {
            assert_abs_diff_eq!(back[i], d[i], epsilon = 1e-12);
            assert_abs_diff_eq!(deriv[i], d[i] * (1.0 - d[i]), epsilon = 1e-12);
        }
    }
}
