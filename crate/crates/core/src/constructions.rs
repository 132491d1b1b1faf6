//! Explicit predictor constructions: the maximizing mean projection, the
//! feasible featurizer that uses environmental features yet keeps an
//! invariant optimal classifier, the purely environmental predictor, the
//! non-degeneracy report, per-featurizer optimal (Bayes) coefficients, the
//! pooled environmental classifier, and closeness-to-optimal diagnostics.

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{EnvironmentParams, EnvironmentSet, InvariantParams};
use crate::population::{self};
use crate::predictor::LinearPredictor;
use crate::quad::GaussHermite;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Threshold on the smallest/largest singular-value ratio below which the
/// environmental means are treated as linearly dependent.
pub const MEAN_INDEPENDENCE_RTOL: f64 = 1e-8;

/// Which per-environment weight the projection equalizes against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionWeighting {
    /// p . mu_e = sigma_e^2 * mu_tilde
    Variance,
    /// p . mu_e = sigma_e * mu_tilde
    Std,
}

/// Unit-norm direction `p` and the largest scalar `mu_tilde` such that
/// `p . mu_e = w_e * mu_tilde` for every environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionSolution {
    pub p: DVector<f64>,
    pub mu_tilde: f64,
    pub weighting: ProjectionWeighting,
}

/// Solves the maximizing projection: orthonormalize the means, solve the
/// ExE coefficient system in that basis, rotate back, and normalize. The
/// normalization step is what maximizes `mu_tilde`; adding any component
/// orthogonal to the mean span would only shrink it.
pub fn solve_max_projection(
    set: &EnvironmentSet,
    weighting: ProjectionWeighting,
) -> Result<ProjectionSolution> {
    let e = set.len();
    let d_e = set.d_e();
    if e > d_e {
        return Err(Error::invalid(format!(
            "projection needs E <= d_e, got E = {e}, d_e = {d_e}"
        )));
    }
    let m = set.mean_matrix();
    let inv_cond = linalg::inverse_condition(&m);
    if inv_cond <= MEAN_INDEPENDENCE_RTOL {
        return Err(Error::DependentMeans(format!(
            "smallest/largest singular value ratio {inv_cond:.3e} <= {MEAN_INDEPENDENCE_RTOL:.0e}"
        )));
    }
    let qr = m.clone().qr();
    let q = qr.q();
    let u = qr.r(); // coefficients of each mean in the orthonormal basis
    let weights = DVector::from_iterator(
        e,
        set.envs().iter().map(|env| match weighting {
            ProjectionWeighting::Variance => env.sigma_e_sq(),
            ProjectionWeighting::Std => env.sigma_e(),
        }),
    );
    let p_alpha = u
        .transpose()
        .lu()
        .solve(&weights)
        .ok_or_else(|| Error::DependentMeans("coefficient system is singular".into()))?;
    let norm = p_alpha.norm();
    let p = q * (p_alpha / norm);
    Ok(ProjectionSolution {
        p,
        mu_tilde: 1.0 / norm,
        weighting,
    })
}

/// Output of the feasible non-invariant construction.
#[derive(Debug, Clone)]
pub struct FeasibleConstruction {
    pub predictor: LinearPredictor,
    pub projection: ProjectionSolution,
    /// Set when the feasibility statement carries no content (E = 1).
    pub note: Option<String>,
}

/// Builds the rank `d_c + 1 + (d_e - E)` featurizer whose output depends on
/// the environmental features while the per-environment optimal classifier
/// is the same everywhere: invariant block passed through, the maximizing
/// projection as one feature, and an orthonormal completion of the mean
/// span (each completion feature has zero mean under every environment, so
/// its optimal coefficient is zero everywhere).
pub fn build_feasible_noninvariant_featurizer(set: &EnvironmentSet) -> Result<FeasibleConstruction> {
    let projection = solve_max_projection(set, ProjectionWeighting::Variance)?;
    let inv = set.invariant();
    let (d_c, d_e, e) = (set.d_c(), set.d_e(), set.len());
    let m = set.mean_matrix();
    let span = linalg::span_basis(&m, MEAN_INDEPENDENCE_RTOL);
    let completion = linalg::orthonormal_completion(&span);
    debug_assert_eq!(completion.ncols(), d_e - e);

    let k = d_c + 1 + (d_e - e);
    let mut a = DMatrix::zeros(k, d_c);
    a.view_mut((0, 0), (d_c, d_c))
        .copy_from(&DMatrix::identity(d_c, d_c));
    let mut b = DMatrix::zeros(k, d_e);
    b.row_mut(d_c).copy_from(&projection.p.transpose());
    for j in 0..d_e - e {
        b.row_mut(d_c + 1 + j)
            .copy_from(&completion.column(j).transpose());
    }

    let mut beta = DVector::zeros(k);
    beta.rows_mut(0, d_c).copy_from(&inv.beta_c());
    beta[d_c] = 2.0 * projection.mu_tilde;

    let predictor = LinearPredictor::new(a, b, beta, inv.beta0())?
        .with_provenance("max-projection-feasible");
    let note = (e == 1).then(|| {
        "single training environment: every featurizer is feasible, the construction carries no content".to_string()
    });
    Ok(FeasibleConstruction {
        predictor,
        projection,
        note,
    })
}

/// The predictor that reads only the projected environmental feature:
/// featurizer `[p . z_e]` with classifier `2 mu_tilde` and the label-marginal
/// intercept. Its invariant block is exactly zero.
pub fn build_environmental_predictor(set: &EnvironmentSet) -> Result<(LinearPredictor, ProjectionSolution)> {
    let projection = solve_max_projection(set, ProjectionWeighting::Variance)?;
    let inv = set.invariant();
    let a = DMatrix::zeros(1, set.d_c());
    let mut b = DMatrix::zeros(1, set.d_e());
    b.row_mut(0).copy_from(&projection.p.transpose());
    let beta = DVector::from_element(1, 2.0 * projection.mu_tilde);
    let predictor =
        LinearPredictor::new(a, b, beta, inv.beta0())?.with_provenance("environmental-only");
    Ok((predictor, projection))
}

/// Per-environment check of the two conditions under which the purely
/// environmental predictor beats the invariant one on 0-1 risk:
/// `sigma_e * mu_tilde > |mu_c| / sigma_c` (strength) and
/// `2 sigma_e mu_tilde |mu_c| / sigma_c >= |beta0|` (intercept balance).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnvDominanceConditions {
    pub strength_ok: bool,
    pub intercept_ok: bool,
}

impl EnvDominanceConditions {
    pub fn both(&self) -> bool {
        self.strength_ok && self.intercept_ok
    }
}

pub fn check_env_dominance_conditions(
    set: &EnvironmentSet,
    sol: &ProjectionSolution,
) -> Vec<EnvDominanceConditions> {
    let inv = set.invariant();
    let alpha = inv.mu_c().norm() / inv.sigma_c_sq().sqrt();
    let beta0 = inv.beta0().abs();
    set.envs()
        .iter()
        .map(|env| {
            let gamma = env.sigma_e() * sol.mu_tilde;
            EnvDominanceConditions {
                strength_ok: gamma > alpha,
                intercept_ok: 2.0 * gamma * alpha >= beta0,
            }
        })
        .collect()
}

/// A coefficient set witnessing a broken non-degeneracy condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegeneracyWitness {
    /// Index of the environment whose mean the coefficients reproduce.
    pub env: usize,
    pub coefficients: Vec<f64>,
    pub coefficient_sum: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
}

/// Result of the general-position checks on an environment collection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonDegeneracyReport {
    /// No representation of any mean by the others sums to exactly one.
    pub affine_condition_ok: bool,
    /// The variance ratio distinguishes at least two representable means.
    pub variance_ratio_ok: bool,
    pub witnesses: Vec<DegeneracyWitness>,
}

const COEFF_TOL: f64 = 1e-8;

/// Decides both non-degeneracy conditions by rank analysis: for every mean
/// in the span of the others, take the minimum-norm representation and probe
/// the full affine solution set through the null space of the other means.
pub fn check_nondegeneracy(set: &EnvironmentSet) -> NonDegeneracyReport {
    let e = set.len();
    let mut affine_ok = true;
    let mut witnesses = Vec::new();
    // (env, min-norm coefficients, ratio when the denominator is regular)
    let mut expressible: Vec<(usize, DVector<f64>, Option<f64>)> = Vec::new();

    for idx in 0..e {
        let others: Vec<DVector<f64>> = set
            .envs()
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != idx)
            .map(|(_, env)| env.mu_e().clone())
            .collect();
        if others.is_empty() {
            continue;
        }
        let m_others = DMatrix::from_columns(&others);
        let target = set.envs()[idx].mu_e();
        let alpha = linalg::pinv(&m_others, linalg::SV_RTOL) * target;
        let residual = (&m_others * &alpha - target).norm();
        if residual > COEFF_TOL * target.norm().max(1.0) {
            continue; // not in the span of the others
        }
        let nullspace = linalg::null_space(&m_others, linalg::SV_RTOL);
        let sum_min: f64 = alpha.iter().sum();
        let ones = DVector::from_element(alpha.len(), 1.0);
        // the affine set contains a sum-one representation iff some null
        // direction moves the sum, or the minimum-norm sum is already one
        let movable = (0..nullspace.ncols())
            .any(|j| nullspace.column(j).dot(&ones).abs() > COEFF_TOL);
        let sum_one_reachable = movable || (sum_min - 1.0).abs() <= COEFF_TOL;
        if sum_one_reachable {
            affine_ok = false;
            let witness_alpha = if (sum_min - 1.0).abs() <= COEFF_TOL || !movable {
                alpha.clone()
            } else {
                let j = (0..nullspace.ncols())
                    .find(|&j| nullspace.column(j).dot(&ones).abs() > COEFF_TOL)
                    .expect("movable direction exists");
                let dir = nullspace.column(j).into_owned();
                &alpha + &dir * ((1.0 - sum_min) / dir.dot(&ones))
            };
            witnesses.push(DegeneracyWitness {
                env: idx,
                coefficient_sum: witness_alpha.iter().sum(),
                coefficients: witness_alpha.as_slice().to_vec(),
                ratio: None,
            });
        }
        let sigma_others: Vec<f64> = set
            .envs()
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != idx)
            .map(|(_, env)| env.sigma_e_sq())
            .collect();
        let weighted: f64 = alpha
            .iter()
            .zip(&sigma_others)
            .map(|(a, s)| a * s)
            .sum();
        let den = 1.0 - sum_min;
        let ratio = (den.abs() > COEFF_TOL)
            .then(|| (set.envs()[idx].sigma_e_sq() - weighted) / den);
        expressible.push((idx, alpha, ratio));
    }

    // the ratio condition needs two representable means it can tell apart
    let ratios: Vec<(usize, f64)> = expressible
        .iter()
        .filter_map(|(idx, _, r)| r.map(|v| (*idx, v)))
        .collect();
    let variance_ratio_ok = if ratios.len() < 2 {
        true // nothing to distinguish: vacuously in general position
    } else {
        let distinct = ratios
            .iter()
            .any(|(_, r)| (r - ratios[0].1).abs() > COEFF_TOL * ratios[0].1.abs().max(1.0));
        if !distinct {
            for (idx, alpha, ratio) in &expressible {
                if ratio.is_some() {
                    witnesses.push(DegeneracyWitness {
                        env: *idx,
                        coefficients: alpha.as_slice().to_vec(),
                        coefficient_sum: alpha.iter().sum(),
                        ratio: *ratio,
                    });
                }
            }
        }
        distinct
    };

    NonDegeneracyReport {
        affine_condition_ok: affine_ok,
        variance_ratio_ok,
        witnesses,
    }
}

/// Optimal classifier for the featurizer `A z_c + B z_e` on one environment:
/// `2 (sigma_c^2 A A^T + sigma_e^2 B B^T)^+ (A mu_c + B mu_e)` with the
/// label-marginal intercept. Singular values below `1e-10` of the largest
/// are treated as zero, so rank-deficient featurizers get the minimum-norm
/// coefficients in the feature row space.
pub fn bayes_coefficients(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    env: &EnvironmentParams,
    inv: &InvariantParams,
) -> (DVector<f64>, f64) {
    let sigma_bar = a * a.transpose() * inv.sigma_c_sq() + b * b.transpose() * env.sigma_e_sq();
    let mu_bar = a * inv.mu_c() + b * env.mu_e();
    let beta = linalg::pinv_apply(&sigma_bar, &mu_bar, linalg::SV_RTOL) * 2.0;
    (beta, inv.beta0())
}

/// Per-environment Bayes classifier of an existing predictor's featurizer.
pub fn bayes_for_predictor(
    pred: &LinearPredictor,
    env: &EnvironmentParams,
    inv: &InvariantParams,
) -> (DVector<f64>, f64) {
    bayes_coefficients(pred.a(), pred.b(), env, inv)
}

/// Options for the pooled environmental-classifier solve.
#[derive(Debug, Clone)]
pub struct ErmOptions {
    pub max_steps: usize,
    pub grad_tol: f64,
    pub rule: GaussHermite,
}

impl Default for ErmOptions {
    fn default() -> Self {
        Self {
            max_steps: 50_000,
            grad_tol: 1e-9,
            rule: GaussHermite::new(crate::quad::DEFAULT_NODES),
        }
    }
}

/// Pooled environmental classifier with its response standard deviation.
#[derive(Debug, Clone)]
pub struct ErmSolution {
    pub beta_e: DVector<f64>,
    /// sqrt(|beta_c|^2 sigma_c^2 + |beta_e|^2 sigma_e^2), with the mean
    /// environmental variance when environments disagree.
    pub sigma_erm: f64,
    pub steps: usize,
    pub grad_norm: f64,
}

/// Minimizes the pooled logistic risk over the environmental coefficients
/// with the invariant coefficients and intercept held at their optimal
/// values, by deterministic gradient descent with backtracking line search
/// on the quadrature objective (the pooled risk is an equal-weight mixture
/// of per-environment risks, each reduced to a 1-D Gaussian expectation).
pub fn erm_env_classifier(set: &EnvironmentSet, opt: &ErmOptions) -> Result<ErmSolution> {
    let inv = set.invariant();
    let beta_c = inv.beta_c();
    let beta0 = inv.beta0();
    let eta = inv.eta();
    let m_c = beta_c.dot(inv.mu_c());
    let var_c = inv.sigma_c_sq() * beta_c.norm_squared();
    let d_e = set.d_e();

    let risk_and_grad = |beta_e: &DVector<f64>, want_grad: bool| -> (f64, Option<DVector<f64>>) {
        let mut risk = 0.0;
        let mut grad = want_grad.then(|| DVector::zeros(d_e));
        for env in set.envs() {
            let m = m_c + beta_e.dot(env.mu_e());
            let s_sq = var_c + env.sigma_e_sq() * beta_e.norm_squared();
            let s = s_sq.sqrt();
            let mut env_risk = 0.0;
            let mut alpha1 = 0.0;
            let mut alpha2 = 0.0;
            for (y, p, ind) in [(1.0, eta, 1.0), (-1.0, 1.0 - eta, 0.0)] {
                let a_y = y * m + beta0;
                let mut loss = 0.0;
                let mut h0 = 0.0;
                let mut h1 = 0.0;
                opt.rule.for_each_std_normal(|xi, w| {
                    let t = a_y + s * xi;
                    let sg = crate::quad::sigmoid(t);
                    loss += w * crate::quad::softplus(-y * t);
                    h0 += w * (sg - ind);
                    h1 += w * (sg - ind) * xi;
                });
                env_risk += p * loss;
                alpha1 += p * y * h0;
                alpha2 += p * h1;
            }
            risk += env_risk;
            if let Some(g) = grad.as_mut() {
                *g += env.mu_e() * alpha1;
                if s > 0.0 {
                    *g += beta_e * (alpha2 * env.sigma_e_sq() / s);
                }
            }
        }
        let e = set.len() as f64;
        (risk / e, grad.map(|g| g / e))
    };

    // warm start at the average of the per-environment optimal coefficients
    let mut beta_e = DVector::zeros(d_e);
    for env in set.envs() {
        beta_e += env.mu_e() * (2.0 / env.sigma_e_sq());
    }
    beta_e /= set.len() as f64;

    let (mut value, g) = risk_and_grad(&beta_e, true);
    let mut grad = g.expect("gradient requested");
    let mut step = 1.0;
    let mut steps_used = opt.max_steps;
    for iter in 0..opt.max_steps {
        let gnorm = grad.norm();
        if gnorm <= opt.grad_tol {
            steps_used = iter;
            break;
        }
        // Armijo backtracking with a gently growing initial step
        let mut t = step;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &beta_e - &grad * t;
            let (cand_value, _) = risk_and_grad(&cand, false);
            if cand_value <= value - 1e-4 * t * gnorm * gnorm {
                beta_e = cand;
                value = cand_value;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            steps_used = iter;
            break; // step collapsed: gradient tolerance is unreachable
        }
        step = (t * 2.0).min(1e3);
        let (_, g) = risk_and_grad(&beta_e, true);
        grad = g.expect("gradient requested");
    }
    let grad_norm = grad.norm();
    if grad_norm > opt.grad_tol.max(1e-6) {
        return Err(Error::NonConvergence {
            steps: opt.max_steps,
            grad_norm,
        });
    }
    let mean_sigma_sq =
        set.envs().iter().map(|e| e.sigma_e_sq()).sum::<f64>() / set.len() as f64;
    let sigma_erm = (var_c + mean_sigma_sq * beta_e.norm_squared()).sqrt();
    Ok(ErmSolution {
        beta_e,
        sigma_erm,
        steps: steps_used,
        grad_norm,
    })
}

/// Full-latent predictor using the pooled environmental classifier together
/// with the invariant-optimal coefficients.
pub fn erm_predictor(set: &EnvironmentSet, erm: &ErmSolution) -> LinearPredictor {
    let inv = set.invariant();
    let (d_c, d_e) = (set.d_c(), set.d_e());
    let k = d_c + d_e;
    let mut a = DMatrix::zeros(k, d_c);
    a.view_mut((0, 0), (d_c, d_c))
        .copy_from(&DMatrix::identity(d_c, d_c));
    let mut b = DMatrix::zeros(k, d_e);
    b.view_mut((d_c, 0), (d_e, d_e))
        .copy_from(&DMatrix::identity(d_e, d_e));
    let mut beta = DVector::zeros(k);
    beta.rows_mut(0, d_c).copy_from(&inv.beta_c());
    beta.rows_mut(d_c, d_e).copy_from(&erm.beta_e);
    LinearPredictor::new(a, b, beta, inv.beta0())
        .expect("dimensions consistent")
        .with_provenance("pooled-environmental")
}

/// How far a classifier's alignment with an environment's mean falls short
/// of the optimal alignment `2 mu^T Sigma^-1 mu`: returns
/// `1 - beta . mu_e / (2 |mu_e|^2 / sigma_e^2)`.
pub fn gamma_closeness(beta_e: &DVector<f64>, env: &EnvironmentParams) -> Result<f64> {
    let denom = 2.0 * env.mu_e().norm_squared() / env.sigma_e_sq();
    if denom == 0.0 {
        return Err(Error::invalid(
            "gamma-closeness is undefined for a zero environmental mean",
        ));
    }
    Ok(1.0 - beta_e.dot(env.mu_e()) / denom)
}

/// The smallest uniform closeness level that works for every environment,
/// clamped below at zero (a negative value means the classifier is better
/// than the per-environment optimum alignment requires).
pub fn assumption_gamma(set: &EnvironmentSet, beta_e: &DVector<f64>) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for env in set.envs() {
        worst = worst.max(gamma_closeness(beta_e, env)?);
    }
    Ok(worst.max(0.0))
}

/// Convenience wrapper: pooled logistic risk of a predictor across a set.
pub fn pooled_logistic_risk(pred: &LinearPredictor, set: &EnvironmentSet, rule: &GaussHermite) -> f64 {
    set.envs()
        .iter()
        .map(|env| population::logistic_risk(pred, env, set.invariant(), rule))
        .sum::<f64>()
        / set.len() as f64
}
