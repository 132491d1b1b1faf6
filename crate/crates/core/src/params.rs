//! Parameter files (TOML or JSON) describing a model instance: explicit
//! per-environment means or a Gaussian prior from which they are drawn.

use crate::error::{Error, Result};
use crate::model::{EnvironmentParams, EnvironmentSet, InvariantParams, ObservationMap};
use crate::rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Observation map selector in parameter files.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct MapSpec {
    /// "identity", "linear" or "nonlinear".
    #[serde(default = "default_kind")]
    pub kind: String,
    /// Seed for drawing the mixing matrix (defaults to the file seed).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_kind() -> String {
    "identity".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvSpec {
    pub mu_e: Vec<f64>,
    pub sigma_e_sq: f64,
}

/// Gaussian prior for environment means: a base vector `b` (drawn standard
/// normal or given explicitly) with isotropic noise of variance
/// `noise_var` around it, shared variance `sigma_e_sq` per environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvPriorSpec {
    pub count: usize,
    pub d_e: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_mean: Option<Vec<f64>>,
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
    #[serde(default = "default_sigma")]
    pub sigma_e_sq: f64,
}

fn default_noise_var() -> f64 {
    4.0
}

fn default_sigma() -> f64 {
    1.0
}

/// Schema of a model parameter file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamFile {
    pub eta: f64,
    pub mu_c: Vec<f64>,
    pub sigma_c_sq: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envs: Option<Vec<EnvSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_prior: Option<EnvPriorSpec>,
    #[serde(default)]
    pub f: MapSpec,
}

impl ParamFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Loads TOML or JSON based on the file extension (TOML when ambiguous).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }

    /// Draws environment means from the prior spec.
    pub fn draw_prior_means(prior: &EnvPriorSpec, seed: u64) -> Vec<EnvSpec> {
        let mut r = rng::stream_rng(seed, &[0xb45e]);
        let base: Vec<f64> = match &prior.base_mean {
            Some(b) => b.clone(),
            None => (0..prior.d_e)
                .map(|_| r.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let noise_sd = prior.noise_var.sqrt();
        (0..prior.count)
            .map(|_| EnvSpec {
                mu_e: base
                    .iter()
                    .map(|b| b + noise_sd * r.sample::<f64, _>(StandardNormal))
                    .collect(),
                sigma_e_sq: prior.sigma_e_sq,
            })
            .collect()
    }

    /// Materializes the environment set described by this file.
    pub fn build(&self) -> Result<EnvironmentSet> {
        let invariant = InvariantParams::new(self.eta, self.mu_c.clone(), self.sigma_c_sq)?;
        let env_specs = match (&self.envs, &self.env_prior) {
            (Some(_), Some(_)) => {
                return Err(Error::invalid(
                    "specify either explicit envs or env_prior, not both",
                ))
            }
            (Some(envs), None) => envs.clone(),
            (None, Some(prior)) => Self::draw_prior_means(prior, self.seed),
            (None, None) => return Err(Error::invalid("no environments specified")),
        };
        let envs = env_specs
            .into_iter()
            .map(|e| EnvironmentParams::new(e.mu_e, e.sigma_e_sq))
            .collect::<Result<Vec<_>>>()?;
        let dim = invariant.d_c() + envs[0].d_e();
        let map_seed = self.f.seed.unwrap_or(self.seed);
        let map = match self.f.kind.as_str() {
            "identity" => ObservationMap::identity(),
            "linear" => ObservationMap::random_linear(dim, map_seed),
            "nonlinear" => ObservationMap::random_nonlinear(dim, map_seed),
            other => {
                return Err(Error::invalid(format!(
                    "unknown observation map kind '{other}'"
                )))
            }
        };
        EnvironmentSet::new(invariant, envs, map)
    }
}

/// Dumps labelled samples as CSV with header `y,z_c_0,..,z_e_0,..,x_0,..`.
pub fn samples_to_csv(samples: &[(crate::model::LatentSample, Vec<f64>)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("no samples to write"))?;
    let (d_c, d_e, d_x) = (first.0.z_c.len(), first.0.z_e.len(), first.1.len());
    let mut header = vec!["y".to_string()];
    header.extend((0..d_c).map(|i| format!("z_c_{i}")));
    header.extend((0..d_e).map(|i| format!("z_e_{i}")));
    header.extend((0..d_x).map(|i| format!("x_{i}")));
    w.write_record(&header)?;
    for (s, x) in samples {
        let mut rec = vec![s.y.to_string()];
        rec.extend(s.z_c.iter().map(|v| v.to_string()));
        rec.extend(s.z_e.iter().map(|v| v.to_string()));
        rec.extend(x.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner().expect("vec writer")).expect("utf8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_with_explicit_envs() {
        let text = r#"
            eta = 0.5
            mu_c = [1.0, -1.0]
            sigma_c_sq = 2.0
            seed = 7

            [f]
            kind = "identity"

            [[envs]]
            mu_e = [2.0, 0.0]
            sigma_e_sq = 1.0

            [[envs]]
            mu_e = [0.0, 2.0]
            sigma_e_sq = 1.5
        "#;
        let file = ParamFile::from_toml(text).unwrap();
        let set = file.build().unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.d_c(), 2);
        assert_eq!(set.d_e(), 2);
        assert!(set.map().is_identity());
    }

    #[test]
    fn json_with_prior() {
        let text = r#"{
            "eta": 0.5,
            "mu_c": [0.5, 0.5, 0.5],
            "sigma_c_sq": 1.0,
            "seed": 3,
            "env_prior": {"count": 4, "d_e": 6, "noise_var": 4.0, "sigma_e_sq": 1.0},
            "f": {"kind": "nonlinear"}
        }"#;
        let file = ParamFile::from_json(text).unwrap();
        let set = file.build().unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set.d_e(), 6);
        // same file builds the same set
        let set2 = file.build().unwrap();
        assert_eq!(
            set.envs()[2].mu_e().as_slice(),
            set2.envs()[2].mu_e().as_slice()
        );
    }

    #[test]
    fn both_env_sources_rejected() {
        let text = r#"{
            "eta": 0.5, "mu_c": [1.0], "sigma_c_sq": 1.0,
            "envs": [{"mu_e": [1.0], "sigma_e_sq": 1.0}],
            "env_prior": {"count": 1, "d_e": 1}
        }"#;
        assert!(ParamFile::from_json(text).unwrap().build().is_err());
    }

    #[test]
    fn sample_csv_header_layout() {
        let inv = InvariantParams::new(0.5, vec![1.0], 1.0).unwrap();
        let envs = vec![EnvironmentParams::new(vec![1.0, 2.0], 1.0).unwrap()];
        let set = EnvironmentSet::with_identity_map(inv, envs).unwrap();
        let samples = crate::model::sample_environment(&set, 0, 3, 1).unwrap();
        let csv = samples_to_csv(&samples).unwrap();
        let header = csv.lines().next().unwrap();
        assert_eq!(header, "y,z_c_0,z_e_0,z_e_1,x_0,x_1,x_2");
        assert_eq!(csv.lines().count(), 4);
    }
}
