//! Linear predictors over the latent space and the evaluation interface
//! shared with the piecewise featurizer.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// A linear featurizer over latents (blocks `A`, `B`) with a classifier
/// vector and intercept. The induced logit is
/// `beta . (A z_c + B z_e) + beta0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearPredictor {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    beta: DVector<f64>,
    beta0: f64,
    /// Names the construction or training run that produced this predictor.
    #[serde(default)]
    pub provenance: String,
}

impl LinearPredictor {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, beta: DVector<f64>, beta0: f64) -> Result<Self> {
        if a.nrows() != b.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "featurizer blocks disagree on output dim: {} vs {}",
                a.nrows(),
                b.nrows()
            )));
        }
        if beta.len() != a.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "classifier has {} coefficients for {} features",
                beta.len(),
                a.nrows()
            )));
        }
        if !beta0.is_finite() || beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("classifier contains non-finite entries"));
        }
        Ok(Self {
            a,
            b,
            beta,
            beta0,
            provenance: String::new(),
        })
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn feature_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_c(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_e(&self) -> usize {
        self.b.ncols()
    }

    /// Effective classifier direction on the invariant block: `A^T beta`.
    pub fn at_beta(&self) -> DVector<f64> {
        self.a.transpose() * &self.beta
    }

    /// Effective classifier direction on the environmental block: `B^T beta`.
    pub fn bt_beta(&self) -> DVector<f64> {
        self.b.transpose() * &self.beta
    }

    /// Numerical rank of the stacked featurizer `[A | B]`.
    pub fn featurizer_rank(&self) -> usize {
        let mut stacked = DMatrix::zeros(self.feature_dim(), self.d_c() + self.d_e());
        stacked.view_mut((0, 0), (self.feature_dim(), self.d_c())).copy_from(&self.a);
        stacked
            .view_mut((0, self.d_c()), (self.feature_dim(), self.d_e()))
            .copy_from(&self.b);
        crate::linalg::rank(&stacked, crate::linalg::SV_RTOL)
    }

    pub fn logit(&self, z_c: &[f64], z_e: &[f64]) -> f64 {
        let at = self.at_beta();
        let bt = self.bt_beta();
        let mut t = self.beta0;
        for (w, z) in at.iter().zip(z_c) {
            t += w * z;
        }
        for (w, z) in bt.iter().zip(z_e) {
            t += w * z;
        }
        t
    }

    /// Mutable flat view over (A, B, beta, beta0) used by the trainers.
    pub fn params_to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend(self.a.iter());
        v.extend(self.b.iter());
        v.extend(self.beta.iter());
        v.push(self.beta0);
        v
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len() + self.beta.len() + 1
    }

    pub fn set_params_from_vec(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.param_count());
        let (na, nb, nk) = (self.a.len(), self.b.len(), self.beta.len());
        self.a.iter_mut().zip(&v[..na]).for_each(|(p, &x)| *p = x);
        self.b
            .iter_mut()
            .zip(&v[na..na + nb])
            .for_each(|(p, &x)| *p = x);
        self.beta
            .iter_mut()
            .zip(&v[na + nb..na + nb + nk])
            .for_each(|(p, &x)| *p = x);
        self.beta0 = v[na + nb + nk];
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Evaluation interface shared by linear predictors and the piecewise
/// featurizer: given latents, produce the feature vector (without the
/// constant slot) and the logit.
pub trait LatentPredictor: Sync {
    fn feature_dim(&self) -> usize;

    /// Writes the feature vector and returns the logit.
    fn features_and_logit(&self, z_c: &[f64], z_e: &[f64], features: &mut [f64]) -> f64;

    /// Logit only; default goes through a scratch feature buffer.
    fn logit_at(&self, z_c: &[f64], z_e: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.feature_dim()];
        self.features_and_logit(z_c, z_e, &mut buf)
    }
}

impl LatentPredictor for LinearPredictor {
    fn feature_dim(&self) -> usize {
        self.feature_dim()
    }

    fn features_and_logit(&self, z_c: &[f64], z_e: &[f64], features: &mut [f64]) -> f64 {
        debug_assert_eq!(features.len(), self.feature_dim());
        let k = self.feature_dim();
        let mut t = self.beta0;
        for r in 0..k {
            let mut f = 0.0;
            for (j, z) in z_c.iter().enumerate() {
                f += self.a[(r, j)] * z;
            }
            for (j, z) in z_e.iter().enumerate() {
                f += self.b[(r, j)] * z;
            }
            features[r] = f;
            t += self.beta[r] * f;
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logit_matches_block_formula() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.5, -0.5]);
        let beta = DVector::from_column_slice(&[1.0, -1.0]);
        let p = LinearPredictor::new(a, b, beta, 0.25).unwrap();
        let t = p.logit(&[1.0, 2.0], &[3.0]);
        // features: [1 + 1.5, 4 - 1.5] = [2.5, 2.5]; logit = 2.5 - 2.5 + 0.25
        assert_relative_eq!(t, 0.25);
        let mut buf = [0.0; 2];
        let t2 = p.features_and_logit(&[1.0, 2.0], &[3.0], &mut buf);
        assert_relative_eq!(t, t2);
        assert_relative_eq!(buf[0], 2.5);
        assert_relative_eq!(buf[1], 2.5);
    }

    #[test]
    fn param_vec_round_trip() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let b = DMatrix::from_row_slice(1, 1, &[3.0]);
        let beta = DVector::from_column_slice(&[4.0]);
        let mut p = LinearPredictor::new(a, b, beta, 5.0).unwrap();
        let v = p.params_to_vec();
        assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        p.set_params_from_vec(&[5.0, 4.0, 3.0, 2.0, 1.0]);
        assert_eq!(p.params_to_vec(), vec![5.0, 4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn json_round_trip_keeps_provenance() {
        let a = DMatrix::identity(1, 1);
        let b = DMatrix::zeros(1, 1);
        let p = LinearPredictor::new(a, b, DVector::from_column_slice(&[1.0]), 0.0)
            .unwrap()
            .with_provenance("unit-test");
        let s = p.to_json().unwrap();
        let q = LinearPredictor::from_json(&s).unwrap();
        assert_eq!(q.provenance, "unit-test");
        assert_relative_eq!(q.beta()[0], 1.0);
    }
}
