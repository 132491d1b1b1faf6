//! Population-level (infinite-sample) evaluation of logistic risk, the
//! classifier-gradient penalty, and their analytic parameter gradients.
//!
//! For a linear predictor the logit given the label is univariate Gaussian,
//! so every expectation reduces to a one-dimensional Gauss-Hermite sum. The
//! gradients below differentiate those quadrature expressions exactly, which
//! keeps them consistent with finite differences of the evaluated objective.

use crate::model::{EnvironmentParams, InvariantParams};
use crate::predictor::LinearPredictor;
use crate::quad::{sigmoid, softplus, GaussHermite};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Training objectives over a shared linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Pooled risk alone.
    Erm,
    /// Pooled risk plus `lambda` times the mean squared classifier-gradient.
    Irm,
    /// Pooled risk plus `lambda` times the variance of per-env risks.
    Rex,
}

/// Gradient with respect to every predictor parameter.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub beta0: f64,
}

impl ParamGrad {
    pub fn zeros_like(pred: &LinearPredictor) -> Self {
        Self {
            a: DMatrix::zeros(pred.a().nrows(), pred.a().ncols()),
            b: DMatrix::zeros(pred.b().nrows(), pred.b().ncols()),
            beta: DVector::zeros(pred.beta().len()),
            beta0: 0.0,
        }
    }

    pub fn axpy(&mut self, c: f64, other: &ParamGrad) {
        self.a.iter_mut().zip(other.a.iter()).for_each(|(x, &y)| *x += c * y);
        self.b.iter_mut().zip(other.b.iter()).for_each(|(x, &y)| *x += c * y);
        self.beta
            .iter_mut()
            .zip(other.beta.iter())
            .for_each(|(x, &y)| *x += c * y);
        self.beta0 += c * other.beta0;
    }

    pub fn scale(&mut self, c: f64) {
        self.a.iter_mut().for_each(|x| *x *= c);
        self.b.iter_mut().for_each(|x| *x *= c);
        self.beta.iter_mut().for_each(|x| *x *= c);
        self.beta0 *= c;
    }

    /// Flattened in the same order as `LinearPredictor::params_to_vec`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.a.len() + self.b.len() + self.beta.len() + 1);
        v.extend(self.a.iter());
        v.extend(self.b.iter());
        v.extend(self.beta.iter());
        v.push(self.beta0);
        v
    }

    pub fn norm(&self) -> f64 {
        let mut s = self.beta0 * self.beta0;
        s += self.a.iter().map(|x| x * x).sum::<f64>();
        s += self.b.iter().map(|x| x * x).sum::<f64>();
        s += self.beta.iter().map(|x| x * x).sum::<f64>();
        s.sqrt()
    }

    pub fn classifier_norm(&self) -> f64 {
        (self.beta.norm_squared() + self.beta0 * self.beta0).sqrt()
    }

    pub fn featurizer_a_norm(&self) -> f64 {
        self.a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn featurizer_norm(&self) -> f64 {
        (self.a.iter().map(|x| x * x).sum::<f64>() + self.b.iter().map(|x| x * x).sum::<f64>())
            .sqrt()
    }
}

/// Per-label quadrature functionals of the Gaussian logit.
#[derive(Debug, Clone, Copy, Default)]
struct LabelMoments {
    /// E[softplus(-y t)]
    loss: f64,
    /// E[h_y(t)] with h_y = sigma(t) - 1{y=+1}
    h0: f64,
    /// E[h_y(t) xi]
    h1: f64,
    /// E[sigma'(t)]
    d0: f64,
    /// E[sigma'(t) xi]
    d1: f64,
    /// E[sigma'(t) xi^2]
    d2: f64,
}

fn label_moments(rule: &GaussHermite, a: f64, s: f64, y: f64) -> LabelMoments {
    let mut m = LabelMoments::default();
    let indicator = if y > 0.0 { 1.0 } else { 0.0 };
    if s == 0.0 {
        let sg = sigmoid(a);
        m.loss = softplus(-y * a);
        m.h0 = sg - indicator;
        m.d0 = sg * (1.0 - sg);
        return m;
    }
    // accumulate all six functionals in one pass over the nodes
    let mut loss = 0.0;
    let mut h0 = 0.0;
    let mut h1 = 0.0;
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    rule.for_each_std_normal(|xi, w| {
        let t = a + s * xi;
        let sg = sigmoid(t);
        let h = sg - indicator;
        let sp = softplus(-y * t);
        let d = sg * (1.0 - sg);
        loss += w * sp;
        h0 += w * h;
        h1 += w * h * xi;
        d0 += w * d;
        d1 += w * d * xi;
        d2 += w * d * xi * xi;
    });
    m.loss = loss;
    m.h0 = h0;
    m.h1 = h1;
    m.d0 = d0;
    m.d1 = d1;
    m.d2 = d2;
    m
}

/// Everything the trainers and checks need from one environment.
#[derive(Debug, Clone)]
pub struct EnvEval {
    pub risk: f64,
    /// Classifier gradient: d risk / d beta.
    pub g_beta: DVector<f64>,
    /// Classifier gradient: d risk / d beta0.
    pub g_beta0: f64,
    /// Squared norm of the full classifier gradient (coefficients + intercept).
    pub penalty: f64,
    pub grad_risk: Option<ParamGrad>,
    pub grad_penalty: Option<ParamGrad>,
}

struct EnvContext {
    mu_bar: DVector<f64>,
    w: DVector<f64>,
    m: f64,
    s: f64,
    at_beta: DVector<f64>,
    bt_beta: DVector<f64>,
}

fn env_context(pred: &LinearPredictor, env: &EnvironmentParams, inv: &InvariantParams) -> EnvContext {
    let mu_bar = pred.a() * inv.mu_c() + pred.b() * env.mu_e();
    let at_beta = pred.at_beta();
    let bt_beta = pred.bt_beta();
    let w = pred.a() * &at_beta * inv.sigma_c_sq() + pred.b() * &bt_beta * env.sigma_e_sq();
    let m = pred.beta().dot(&mu_bar);
    let s_sq = (pred.beta().dot(&w)).max(0.0);
    EnvContext {
        mu_bar,
        w,
        m,
        s: s_sq.sqrt(),
        at_beta,
        bt_beta,
    }
}

/// Population logistic risk of a linear predictor on one environment.
pub fn logistic_risk(
    pred: &LinearPredictor,
    env: &EnvironmentParams,
    inv: &InvariantParams,
    rule: &GaussHermite,
) -> f64 {
    let ctx = env_context(pred, env, inv);
    let eta = inv.eta();
    let lp = label_moments(rule, ctx.m + pred.beta0(), ctx.s, 1.0);
    let lm = label_moments(rule, -ctx.m + pred.beta0(), ctx.s, -1.0);
    eta * lp.loss + (1.0 - eta) * lm.loss
}

/// Full per-environment evaluation; gradients are filled when `with_grads`.
pub fn env_eval(
    pred: &LinearPredictor,
    env: &EnvironmentParams,
    inv: &InvariantParams,
    rule: &GaussHermite,
    with_grads: bool,
) -> EnvEval {
    let ctx = env_context(pred, env, inv);
    let eta = inv.eta();
    let beta0 = pred.beta0();
    let lp = label_moments(rule, ctx.m + beta0, ctx.s, 1.0);
    let lm = label_moments(rule, -ctx.m + beta0, ctx.s, -1.0);

    let p = [eta, 1.0 - eta];
    let yv = [1.0, -1.0];
    let mom = [lp, lm];

    let risk = p[0] * mom[0].loss + p[1] * mom[1].loss;

    // scalar channels shared by the analytic gradients
    let alpha1: f64 = (0..2).map(|i| p[i] * yv[i] * mom[i].h0).sum();
    let alpha2: f64 = (0..2).map(|i| p[i] * mom[i].h1).sum();
    let c0: f64 = (0..2).map(|i| p[i] * mom[i].h0).sum();
    let q00: f64 = (0..2).map(|i| p[i] * mom[i].d0).sum();
    let q01: f64 = (0..2).map(|i| p[i] * yv[i] * mom[i].d0).sum();
    let q10: f64 = (0..2).map(|i| p[i] * mom[i].d1).sum();
    let q11: f64 = (0..2).map(|i| p[i] * yv[i] * mom[i].d1).sum();
    let q20: f64 = (0..2).map(|i| p[i] * mom[i].d2).sum();

    let degenerate = ctx.s <= f64::MIN_POSITIVE;
    let inv_s = if degenerate { 0.0 } else { 1.0 / ctx.s };
    let w_over_s = &ctx.w * inv_s;

    // classifier gradient of the risk = penalty vector
    let g_beta = &ctx.mu_bar * alpha1 + &w_over_s * alpha2;
    let g_beta0 = c0;
    let penalty = g_beta.norm_squared() + g_beta0 * g_beta0;

    let mut eval = EnvEval {
        risk,
        g_beta: g_beta.clone(),
        g_beta0,
        penalty,
        grad_risk: None,
        grad_penalty: None,
    };
    if !with_grads {
        return eval;
    }

    let beta = pred.beta();
    let mu_c = inv.mu_c();
    let mu_e = env.mu_e();
    let sc2 = inv.sigma_c_sq();
    let se2 = env.sigma_e_sq();

    // ---- risk gradient ----
    // d risk picks up dm through alpha1 and ds through alpha2 (= H1 channel)
    let mut gr = ParamGrad::zeros_like(pred);
    gr.beta = g_beta.clone();
    gr.beta0 = g_beta0;
    // dm/dA = beta mu_c^T ; ds/dA = (sigma_c^2/s) beta (A^T beta)^T
    let ds_a = if degenerate {
        DMatrix::zeros(beta.len(), mu_c.len())
    } else {
        beta * ctx.at_beta.transpose() * (sc2 * inv_s)
    };
    let ds_b = if degenerate {
        DMatrix::zeros(beta.len(), mu_e.len())
    } else {
        beta * ctx.bt_beta.transpose() * (se2 * inv_s)
    };
    let dm_a = beta * mu_c.transpose();
    let dm_b = beta * mu_e.transpose();
    gr.a = &dm_a * alpha1 + &ds_a * alpha2;
    gr.b = &dm_b * alpha1 + &ds_b * alpha2;

    // ---- penalty gradient ----
    // P = |G_beta|^2 + c0^2 with G_beta = alpha1 mu_bar + (alpha2/s) w
    let g_dot_mu = g_beta.dot(&ctx.mu_bar);
    let g_dot_w = g_beta.dot(&ctx.w);
    let mut gp = ParamGrad::zeros_like(pred);

    // beta block
    {
        let grad_alpha1 = &ctx.mu_bar * q00 + &w_over_s * q11;
        let grad_alpha2 = &ctx.mu_bar * q11 + &w_over_s * q20;
        let grad_c0 = &ctx.mu_bar * q01 + &w_over_s * q10;
        let sigma_g = pred.a() * (pred.a().transpose() * &g_beta) * sc2
            + pred.b() * (pred.b().transpose() * &g_beta) * se2;
        let mut v = grad_alpha1 * g_dot_mu;
        if !degenerate {
            // d(alpha2/s) = grad_alpha2 / s - (alpha2/s^2) * (w/s)
            v += (grad_alpha2 * inv_s - &w_over_s * (alpha2 * inv_s * inv_s)) * g_dot_w;
            v += sigma_g * (alpha2 * inv_s);
        }
        v += grad_c0 * c0;
        gp.beta = v * 2.0;
    }
    // beta0
    {
        let mut v = g_dot_mu * q01 + c0 * q00;
        if !degenerate {
            v += g_dot_w * (q10 * inv_s);
        }
        gp.beta0 = 2.0 * v;
    }
    // featurizer blocks: channels dm, ds, d mu_bar, d w
    {
        gp.a = featurizer_penalty_block(
            &dm_a, &ds_a, &g_beta, beta, mu_c, sc2, pred.a(), &ctx.at_beta, alpha1, alpha2, c0,
            q00, q01, q10, q11, q20, g_dot_mu, g_dot_w, inv_s, degenerate,
        );
        gp.b = featurizer_penalty_block(
            &dm_b, &ds_b, &g_beta, beta, mu_e, se2, pred.b(), &ctx.bt_beta, alpha1, alpha2, c0,
            q00, q01, q10, q11, q20, g_dot_mu, g_dot_w, inv_s, degenerate,
        );
    }

    eval.grad_risk = Some(gr);
    eval.grad_penalty = Some(gp);
    eval
}

#[allow(clippy::too_many_arguments)]
fn featurizer_penalty_block(
    dm: &DMatrix<f64>,
    ds: &DMatrix<f64>,
    g_beta: &DVector<f64>,
    beta: &DVector<f64>,
    mu_block: &DVector<f64>,
    sigma_sq: f64,
    block: &DMatrix<f64>,
    block_t_beta: &DVector<f64>,
    alpha1: f64,
    alpha2: f64,
    c0: f64,
    q00: f64,
    q01: f64,
    q10: f64,
    q11: f64,
    q20: f64,
    g_dot_mu: f64,
    g_dot_w: f64,
    inv_s: f64,
    degenerate: bool,
) -> DMatrix<f64> {
    // d alpha1 = q00 dm + q11 ds ; d alpha2 = q11 dm + q20 ds ; d c0 = q01 dm + q10 ds
    let mut out = dm * (g_dot_mu * q00 + c0 * q01) + ds * (g_dot_mu * q11 + c0 * q10);
    // d mu_bar channel: G^T d(mu_bar)/dX_{rj} = G_r mu_block_j
    out += g_beta * mu_block.transpose() * alpha1;
    if !degenerate {
        // d(alpha2/s) channel against G^T w
        out += (dm * q11 + ds * q20) * (g_dot_w * inv_s);
        out -= ds * (alpha2 * inv_s * inv_s * g_dot_w);
        // d w channel: dw/dX_{rj} = sigma^2 (e_r (X^T beta)_j + beta_r X_{:,j})
        let xt_g = block.transpose() * g_beta;
        out += (g_beta * block_t_beta.transpose() + beta * xt_g.transpose())
            * (sigma_sq * alpha2 * inv_s);
    }
    out * 2.0
}

/// Pooled objective value and gradient across an environment set.
pub struct PooledEval {
    pub objective: f64,
    pub mean_risk: f64,
    pub mean_penalty: f64,
    pub risk_variance: f64,
    pub per_env_risk: Vec<f64>,
    pub per_env_penalty: Vec<f64>,
    pub grad: Option<ParamGrad>,
}

pub fn pooled_eval(
    pred: &LinearPredictor,
    set: &crate::model::EnvironmentSet,
    objective: Objective,
    lambda: f64,
    rule: &GaussHermite,
    with_grads: bool,
) -> PooledEval {
    let inv = set.invariant();
    let evals: Vec<EnvEval> = set
        .envs()
        .iter()
        .map(|env| env_eval(pred, env, inv, rule, with_grads))
        .collect();
    let e = evals.len() as f64;
    let mean_risk = evals.iter().map(|v| v.risk).sum::<f64>() / e;
    let mean_penalty = evals.iter().map(|v| v.penalty).sum::<f64>() / e;
    let risk_variance =
        evals.iter().map(|v| (v.risk - mean_risk).powi(2)).sum::<f64>() / e;

    let objective_value = match objective {
        Objective::Erm => mean_risk,
        Objective::Irm => mean_risk + lambda * mean_penalty,
        Objective::Rex => mean_risk + lambda * risk_variance,
    };

    let grad = if with_grads {
        let mut g = ParamGrad::zeros_like(pred);
        for ev in &evals {
            g.axpy(1.0 / e, ev.grad_risk.as_ref().expect("grads requested"));
        }
        match objective {
            Objective::Erm => {}
            Objective::Irm => {
                if lambda != 0.0 {
                    for ev in &evals {
                        g.axpy(
                            lambda / e,
                            ev.grad_penalty.as_ref().expect("grads requested"),
                        );
                    }
                }
            }
            Objective::Rex => {
                if lambda != 0.0 {
                    for ev in &evals {
                        g.axpy(
                            lambda * 2.0 / e * (ev.risk - mean_risk),
                            ev.grad_risk.as_ref().expect("grads requested"),
                        );
                    }
                }
            }
        }
        Some(g)
    } else {
        None
    };

    PooledEval {
        objective: objective_value,
        mean_risk,
        mean_penalty,
        risk_variance,
        per_env_risk: evals.iter().map(|v| v.risk).collect(),
        per_env_penalty: evals.iter().map(|v| v.penalty).collect(),
        grad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EnvironmentParams, EnvironmentSet, InvariantParams};
    use crate::quad::default_rule;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    fn small_setup() -> (EnvironmentSet, LinearPredictor) {
        let inv = InvariantParams::new(0.4, vec![0.6, -0.3], 1.3).unwrap();
        let envs = vec![
            EnvironmentParams::new(vec![0.8, 0.2, -0.5], 0.9).unwrap(),
            EnvironmentParams::new(vec![-0.1, 0.7, 0.4], 1.4).unwrap(),
        ];
        let set = EnvironmentSet::with_identity_map(inv, envs).unwrap();
        let mut rng = crate::rng::stream_rng(77, &[1]);
        let k = 4;
        let a = DMatrix::from_fn(k, 2, |_, _| rng.gen::<f64>() - 0.5);
        let b = DMatrix::from_fn(k, 3, |_, _| rng.gen::<f64>() - 0.5);
        let beta = DVector::from_fn(k, |_, _| rng.gen::<f64>() - 0.5);
        let pred = LinearPredictor::new(a, b, beta, 0.2).unwrap();
        (set, pred)
    }

    #[test]
    fn zero_predictor_risk_is_log_two() {
        let inv = InvariantParams::new(0.5, vec![1.0], 1.0).unwrap();
        let env = EnvironmentParams::new(vec![1.0], 1.0).unwrap();
        let a = DMatrix::zeros(1, 1);
        let b = DMatrix::zeros(1, 1);
        let pred = LinearPredictor::new(a, b, DVector::zeros(1), 0.0).unwrap();
        let r = logistic_risk(&pred, &env, &inv, default_rule());
        assert_relative_eq!(r, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    fn fd_objective(
        pred: &LinearPredictor,
        set: &EnvironmentSet,
        objective: Objective,
        lambda: f64,
    ) -> Vec<f64> {
        let mut base = pred.clone();
        let theta = base.params_to_vec();
        let h = 1e-5;
        let mut out = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            let mut up = theta.clone();
            up[i] += h;
            base.set_params_from_vec(&up);
            let fu = pooled_eval(&base, set, objective, lambda, default_rule(), false).objective;
            let mut dn = theta.clone();
            dn[i] -= h;
            base.set_params_from_vec(&dn);
            let fd = pooled_eval(&base, set, objective, lambda, default_rule(), false).objective;
            out.push((fu - fd) / (2.0 * h));
        }
        out
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (set, pred) = small_setup();
        for (objective, lambda) in [
            (Objective::Erm, 0.0),
            (Objective::Irm, 0.7),
            (Objective::Rex, 1.3),
        ] {
            let eval = pooled_eval(&pred, &set, objective, lambda, default_rule(), true);
            let analytic = eval.grad.unwrap().to_vec();
            let numeric = fd_objective(&pred, &set, objective, lambda);
            for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
                let scale = n.abs().max(1e-6);
                assert!(
                    (a - n).abs() / scale < 1e-4,
                    "{objective:?} param {i}: analytic {a}, numeric {n}"
                );
            }
        }
    }

    #[test]
    fn penalty_is_squared_classifier_gradient() {
        let (set, pred) = small_setup();
        let ev = env_eval(
            &pred,
            &set.envs()[0],
            set.invariant(),
            default_rule(),
            false,
        );
        assert_relative_eq!(
            ev.penalty,
            ev.g_beta.norm_squared() + ev.g_beta0 * ev.g_beta0,
            epsilon = 1e-15
        );
    }
}
