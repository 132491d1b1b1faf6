//! Risk evaluation: exact 0-1 risk for linear rules on Gaussian
//! class-conditionals, logistic risk by Gauss-Hermite quadrature, and
//! seeded Monte Carlo estimators (risk and classifier-gradient penalty)
//! with deterministic sharding.

use crate::error::Result;
use crate::model::{EnvironmentParams, EnvironmentSet, InvariantParams};
use crate::population;
use crate::predictor::{LatentPredictor, LinearPredictor};
use crate::quad::{default_rule, normal_cdf, sigmoid, softplus, GaussHermite};
use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Exact 0-1 risk of a linear predictor: the logit given the label is
/// Gaussian, so each class error is a normal CDF term. Ties at logit zero
/// predict +1, which fixes the all-zero classifier to risk `1 - eta`.
pub fn zero_one_risk_closed(
    pred: &LinearPredictor,
    env: &EnvironmentParams,
    inv: &InvariantParams,
) -> f64 {
    let mu_bar = pred.a() * inv.mu_c() + pred.b() * env.mu_e();
    let signal = pred.beta().dot(&mu_bar);
    let at_beta = pred.at_beta();
    let bt_beta = pred.bt_beta();
    let var = inv.sigma_c_sq() * at_beta.norm_squared() + env.sigma_e_sq() * bt_beta.norm_squared();
    let m_plus = signal + pred.beta0();
    let m_minus = signal - pred.beta0();
    let eta = inv.eta();
    if var <= 0.0 {
        // deterministic logit: +1 is predicted when the logit is >= 0
        let err_plus = if m_plus < 0.0 { 1.0 } else { 0.0 };
        let err_minus = if m_minus <= 0.0 { 1.0 } else { 0.0 };
        return eta * err_plus + (1.0 - eta) * err_minus;
    }
    let s = var.sqrt();
    eta * normal_cdf(-m_plus / s) + (1.0 - eta) * normal_cdf(-m_minus / s)
}

/// Population logistic risk via Gauss-Hermite quadrature on the 1-D logit.
pub fn logistic_risk_quadrature(
    pred: &LinearPredictor,
    env: &EnvironmentParams,
    inv: &InvariantParams,
) -> f64 {
    population::logistic_risk(pred, env, inv, default_rule())
}

/// Same with a caller-supplied rule (node count is configurable).
pub fn logistic_risk_quadrature_with(
    rule: &GaussHermite,
    pred: &LinearPredictor,
    env: &EnvironmentParams,
    inv: &InvariantParams,
) -> f64 {
    population::logistic_risk(pred, env, inv, rule)
}

/// Population variance of the per-environment logistic risks.
pub fn risk_variance(pred: &LinearPredictor, set: &EnvironmentSet) -> f64 {
    let risks: Vec<f64> = set
        .envs()
        .iter()
        .map(|env| logistic_risk_quadrature(pred, env, set.invariant()))
        .collect();
    let mean = risks.iter().sum::<f64>() / risks.len() as f64;
    risks.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / risks.len() as f64
}

pub(crate) fn draw_latents(
    r: &mut ChaCha8Rng,
    inv: &InvariantParams,
    env: &EnvironmentParams,
    z_c: &mut [f64],
    z_e: &mut [f64],
) -> i8 {
    let y: i8 = if r.gen::<f64>() < inv.eta() { 1 } else { -1 };
    let yf = y as f64;
    let sigma_c = inv.sigma_c_sq().sqrt();
    let sigma_e = env.sigma_e_sq().sqrt();
    for (i, z) in z_c.iter_mut().enumerate() {
        let g: f64 = r.sample(StandardNormal);
        *z = yf * inv.mu_c()[i] + sigma_c * g;
    }
    for (i, z) in z_e.iter_mut().enumerate() {
        let g: f64 = r.sample(StandardNormal);
        *z = yf * env.mu_e()[i] + sigma_e * g;
    }
    y
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n: u64,
    pub seed: u64,
}

fn mc_mean<P: LatentPredictor>(
    pred: &P,
    env: &EnvironmentParams,
    inv: &InvariantParams,
    n: u64,
    seed: u64,
    path_tag: u64,
    per_sample: impl Fn(f64, i8) -> f64 + Sync,
) -> McEstimate {
    let (d_c, d_e) = (inv.d_c(), env.d_e());
    let sums = rng::sharded_monte_carlo(seed, &[path_tag], n, |r, count| {
        let mut z_c = vec![0.0; d_c];
        let mut z_e = vec![0.0; d_e];
        let mut acc = vec![0.0; 2];
        for _ in 0..count {
            let y = draw_latents(r, inv, env, &mut z_c, &mut z_e);
            let v = per_sample(pred.logit_at(&z_c, &z_e), y);
            acc[0] += v;
            acc[1] += v * v;
        }
        acc
    });
    let nf = n as f64;
    let mean = sums[0] / nf;
    let var = (sums[1] / nf - mean * mean).max(0.0);
    McEstimate {
        value: mean,
        std_error: (var / (nf - 1.0)).sqrt(),
        n,
        seed,
    }
}

/// Monte Carlo 0-1 risk (tie at zero predicts +1).
pub fn mc_zero_one_risk<P: LatentPredictor>(
    pred: &P,
    env: &EnvironmentParams,
    inv: &InvariantParams,
    n: u64,
    seed: u64,
) -> McEstimate {
    mc_mean(pred, env, inv, n, seed, 0x2e01, |logit, y| {
        let predicted: i8 = if logit >= 0.0 { 1 } else { -1 };
        if predicted == y {
            0.0
        } else {
            1.0
        }
    })
}

/// Monte Carlo logistic risk.
pub fn mc_logistic_risk<P: LatentPredictor>(
    pred: &P,
    env: &EnvironmentParams,
    inv: &InvariantParams,
    n: u64,
    seed: u64,
) -> McEstimate {
    mc_mean(pred, env, inv, n, seed, 0x1061, |logit, y| {
        softplus(-(y as f64) * logit)
    })
}

/// Shard count for the jackknife penalty estimator.
const JACKKNIFE_SHARDS: u64 = 128;

/// Monte Carlo estimate of the squared norm of the classifier gradient
/// `E[(sigma(logit) - 1{y=1}) [features; 1]]`.
///
/// The plug-in estimator of a squared mean is biased upward by the sampling
/// variance, so the estimate is jackknife bias-corrected over shard means and
/// reported with the jackknife standard error. Values near zero may come out
/// slightly negative; that is ordinary estimator noise.
pub fn irm_penalty<P: LatentPredictor>(
    pred: &P,
    env: &EnvironmentParams,
    inv: &InvariantParams,
    n: u64,
    seed: u64,
) -> McEstimate {
    assert!(n >= 10_000, "penalty estimation needs n >= 1e4");
    let per_shard = n.div_ceil(JACKKNIFE_SHARDS);
    let n_used = per_shard * JACKKNIFE_SHARDS;
    let (d_c, d_e) = (inv.d_c(), env.d_e());
    let dim = pred.feature_dim() + 1;

    let shard_means = rng::sharded_vectors(
        seed,
        &[0x9e4a],
        JACKKNIFE_SHARDS,
        dim,
        |r, _count, out| {
            let mut z_c = vec![0.0; d_c];
            let mut z_e = vec![0.0; d_e];
            let mut features = vec![0.0; dim - 1];
            for _ in 0..per_shard {
                let y = draw_latents(r, inv, env, &mut z_c, &mut z_e);
                let logit = pred.features_and_logit(&z_c, &z_e, &mut features);
                let h = sigmoid(logit) - if y == 1 { 1.0 } else { 0.0 };
                for (o, f) in out.iter_mut().zip(&features) {
                    *o += h * f;
                }
                out[dim - 1] += h;
            }
            for o in out.iter_mut() {
                *o /= per_shard as f64;
            }
        },
    );

    let m = JACKKNIFE_SHARDS as f64;
    let mut mean = vec![0.0; dim];
    for shard in &shard_means {
        for (a, b) in mean.iter_mut().zip(shard) {
            *a += b / m;
        }
    }
    let theta_hat: f64 = mean.iter().map(|v| v * v).sum();
    let mut theta_loo = Vec::with_capacity(shard_means.len());
    for shard in &shard_means {
        let mut t = 0.0;
        for (a, b) in mean.iter().zip(shard) {
            let loo = (m * a - b) / (m - 1.0);
            t += loo * loo;
        }
        theta_loo.push(t);
    }
    let loo_mean = theta_loo.iter().sum::<f64>() / m;
    let value = m * theta_hat - (m - 1.0) * loo_mean;
    let se_sq = theta_loo
        .iter()
        .map(|t| (t - loo_mean).powi(2))
        .sum::<f64>()
        * (m - 1.0)
        / m;
    McEstimate {
        value,
        std_error: se_sq.sqrt(),
        n: n_used,
        seed,
    }
}

/// How a reported number was computed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Closed,
    Quadrature,
    Mc,
}

/// One reported value with its method tag and Monte Carlo details when used.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Measurement {
    pub value: f64,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Measurement {
    pub fn exact(value: f64, method: Method) -> Self {
        Measurement {
            value,
            method,
            std_error: None,
            n: None,
            seed: None,
        }
    }

    pub fn mc(est: McEstimate) -> Self {
        Measurement {
            value: est.value,
            method: Method::Mc,
            std_error: Some(est.std_error),
            n: Some(est.n),
            seed: Some(est.seed),
        }
    }
}

/// Per-environment risk entries plus the cross-environment risk variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskReport {
    pub envs: Vec<EnvRiskEntry>,
    pub risk_variance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvRiskEntry {
    pub env: usize,
    pub logistic: Measurement,
    pub zero_one: Measurement,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty: Option<Measurement>,
}

impl RiskReport {
    /// Closed-form / quadrature report for a linear predictor.
    pub fn population(pred: &LinearPredictor, set: &EnvironmentSet) -> Self {
        let envs = set
            .envs()
            .iter()
            .enumerate()
            .map(|(i, env)| EnvRiskEntry {
                env: i,
                logistic: Measurement::exact(
                    logistic_risk_quadrature(pred, env, set.invariant()),
                    Method::Quadrature,
                ),
                zero_one: Measurement::exact(
                    zero_one_risk_closed(pred, env, set.invariant()),
                    Method::Closed,
                ),
                penalty: None,
            })
            .collect();
        RiskReport {
            envs,
            risk_variance: risk_variance(pred, set),
        }
    }

    /// Adds Monte Carlo penalty entries for every environment.
    pub fn with_mc_penalty(mut self, pred: &LinearPredictor, set: &EnvironmentSet, n: u64, seed: u64) -> Self {
        for (i, env) in set.envs().iter().enumerate() {
            let est = irm_penalty(pred, env, set.invariant(), n, rng::derive_seed(seed, &[i as u64]));
            self.envs[i].penalty = Some(Measurement::mc(est));
        }
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Flat CSV, one row per environment.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "env",
            "logistic",
            "logistic_method",
            "logistic_se",
            "logistic_n",
            "logistic_seed",
            "zero_one",
            "zero_one_method",
            "zero_one_se",
            "zero_one_n",
            "zero_one_seed",
            "penalty",
            "penalty_se",
            "penalty_n",
            "penalty_seed",
            "risk_variance",
        ])?;
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let fmt_opt_u = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        let method_name = |m: Method| match m {
            Method::Closed => "closed",
            Method::Quadrature => "quadrature",
            Method::Mc => "mc",
        };
        for e in &self.envs {
            w.write_record([
                e.env.to_string(),
                e.logistic.value.to_string(),
                method_name(e.logistic.method).to_string(),
                fmt_opt(e.logistic.std_error),
                fmt_opt_u(e.logistic.n),
                fmt_opt_u(e.logistic.seed),
                e.zero_one.value.to_string(),
                method_name(e.zero_one.method).to_string(),
                fmt_opt(e.zero_one.std_error),
                fmt_opt_u(e.zero_one.n),
                fmt_opt_u(e.zero_one.seed),
                fmt_opt(e.penalty.as_ref().map(|p| p.value)),
                fmt_opt(e.penalty.as_ref().and_then(|p| p.std_error)),
                fmt_opt_u(e.penalty.as_ref().and_then(|p| p.n)),
                fmt_opt_u(e.penalty.as_ref().and_then(|p| p.seed)),
                self.risk_variance.to_string(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().expect("vec writer")).expect("utf8"))
    }
}
