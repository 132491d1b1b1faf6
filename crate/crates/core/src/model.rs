//! The generative model: a binary label drives Gaussian invariant features
//! (shared across environments) and Gaussian environmental features (mean and
//! variance vary per environment); observations are an injective map of the
//! concatenated latents.

use crate::error::{ensure_finite, Error, Result};
use crate::linalg;
use crate::predictor::LinearPredictor;
use crate::rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Environment-independent parameters: label marginal, class-conditional mean
/// and variance of the invariant features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvariantParams {
    eta: f64,
    mu_c: DVector<f64>,
    sigma_c_sq: f64,
}

impl InvariantParams {
    pub fn new(eta: f64, mu_c: Vec<f64>, sigma_c_sq: f64) -> Result<Self> {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(Error::invalid(format!("eta must lie in (0, 1), got {eta}")));
        }
        if !(sigma_c_sq > 0.0) || !sigma_c_sq.is_finite() {
            return Err(Error::invalid(format!(
                "sigma_c_sq must be positive and finite, got {sigma_c_sq}"
            )));
        }
        if mu_c.is_empty() {
            return Err(Error::invalid("mu_c must be non-empty"));
        }
        ensure_finite("mu_c", &mu_c)?;
        Ok(Self {
            eta,
            mu_c: DVector::from_vec(mu_c),
            sigma_c_sq,
        })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn mu_c(&self) -> &DVector<f64> {
        &self.mu_c
    }

    pub fn sigma_c_sq(&self) -> f64 {
        self.sigma_c_sq
    }

    pub fn d_c(&self) -> usize {
        self.mu_c.len()
    }

    /// Coefficients of the log-odds of the label given the invariant features.
    /// Recomputed on every call so they can never go stale.
    pub fn beta_c(&self) -> DVector<f64> {
        &self.mu_c * (2.0 / self.sigma_c_sq)
    }

    /// Intercept of the log-odds: log(eta / (1 - eta)).
    pub fn beta0(&self) -> f64 {
        (self.eta / (1.0 - self.eta)).ln()
    }
}

/// Per-environment mean and variance of the environmental features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvironmentParams {
    mu_e: DVector<f64>,
    sigma_e_sq: f64,
}

impl EnvironmentParams {
    pub fn new(mu_e: Vec<f64>, sigma_e_sq: f64) -> Result<Self> {
        if !(sigma_e_sq > 0.0) || !sigma_e_sq.is_finite() {
            return Err(Error::invalid(format!(
                "sigma_e_sq must be positive and finite, got {sigma_e_sq}"
            )));
        }
        if mu_e.is_empty() {
            return Err(Error::invalid("mu_e must be non-empty"));
        }
        ensure_finite("mu_e", &mu_e)?;
        Ok(Self {
            mu_e: DVector::from_vec(mu_e),
            sigma_e_sq,
        })
    }

    pub fn mu_e(&self) -> &DVector<f64> {
        &self.mu_e
    }

    pub fn sigma_e_sq(&self) -> f64 {
        self.sigma_e_sq
    }

    pub fn sigma_e(&self) -> f64 {
        self.sigma_e_sq.sqrt()
    }

    pub fn d_e(&self) -> usize {
        self.mu_e.len()
    }

    /// Same distribution with the feature-label correlation reversed.
    pub fn negated(&self) -> Self {
        Self {
            mu_e: -&self.mu_e,
            sigma_e_sq: self.sigma_e_sq,
        }
    }
}

/// An ordered collection of training environments over one invariant core,
/// together with the observation map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvironmentSet {
    invariant: InvariantParams,
    envs: Vec<EnvironmentParams>,
    map: ObservationMap,
}

impl EnvironmentSet {
    pub fn new(
        invariant: InvariantParams,
        envs: Vec<EnvironmentParams>,
        map: ObservationMap,
    ) -> Result<Self> {
        if envs.is_empty() {
            return Err(Error::invalid("need at least one environment"));
        }
        let d_e = envs[0].d_e();
        if envs.iter().any(|e| e.d_e() != d_e) {
            return Err(Error::DimensionMismatch(
                "all environments must share d_e".into(),
            ));
        }
        map.check_dims(invariant.d_c() + d_e)?;
        Ok(Self {
            invariant,
            envs,
            map,
        })
    }

    /// Identity observation map.
    pub fn with_identity_map(
        invariant: InvariantParams,
        envs: Vec<EnvironmentParams>,
    ) -> Result<Self> {
        Self::new(invariant, envs, ObservationMap::identity())
    }

    pub fn invariant(&self) -> &InvariantParams {
        &self.invariant
    }

    pub fn envs(&self) -> &[EnvironmentParams] {
        &self.envs
    }

    pub fn env(&self, index: usize) -> Result<&EnvironmentParams> {
        self.envs.get(index).ok_or(Error::EnvIndex {
            index,
            count: self.envs.len(),
        })
    }

    pub fn map(&self) -> &ObservationMap {
        &self.map
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn d_c(&self) -> usize {
        self.invariant.d_c()
    }

    pub fn d_e(&self) -> usize {
        self.envs[0].d_e()
    }

    /// Average squared norm of the environmental means; recomputed directly.
    pub fn mean_sq_norm_avg(&self) -> f64 {
        self.envs.iter().map(|e| e.mu_e().norm_squared()).sum::<f64>() / self.envs.len() as f64
    }

    /// Environmental means stacked as columns (d_e x E).
    pub fn mean_matrix(&self) -> DMatrix<f64> {
        let cols: Vec<_> = self.envs.iter().map(|e| e.mu_e().clone()).collect();
        DMatrix::from_columns(&cols)
    }
}

/// One latent draw: label plus the two feature blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub y: i8,
    pub z_c: Vec<f64>,
    pub z_e: Vec<f64>,
}

/// Strictly monotone scalar maps applied elementwise by the non-linear
/// observation map. The inverse is solved by safeguarded Newton iteration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ScalarMap {
    /// t + t^3: strictly increasing with a cheap, well-conditioned inverse.
    CubicPlus,
}

impl ScalarMap {
    pub fn forward(&self, t: f64) -> f64 {
        match self {
            ScalarMap::CubicPlus => t + t * t * t,
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            ScalarMap::CubicPlus => 1.0 + 3.0 * t * t,
        }
    }

    /// Inverse by Newton with a bisection safeguard; the map is strictly
    /// increasing so the bracket [lo, hi] always contains the root.
    pub fn invert(&self, v: f64) -> f64 {
        let bound = v.abs().max(1.0).min(v.abs().cbrt().max(1e-12));
        let (mut lo, mut hi) = if v >= 0.0 {
            (0.0, v.abs().min(bound.max(v.abs().cbrt() + 1.0)))
        } else {
            (-(v.abs().min(bound.max(v.abs().cbrt() + 1.0))), 0.0)
        };
        // widen the bracket if needed
        while self.forward(hi) < v {
            hi = hi * 2.0 + 1.0;
        }
        while self.forward(lo) > v {
            lo = lo * 2.0 - 1.0;
        }
        let mut t = 0.5 * (lo + hi);
        for _ in 0..64 {
            let f = self.forward(t) - v;
            if f == 0.0 {
                break;
            }
            if f > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let step = f / self.derivative(t);
            let mut next = t - step;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() <= 1e-16 * t.abs().max(1.0) {
                t = next;
                break;
            }
            t = next;
        }
        t
    }
}

/// Injective map from latents to observations.
///
/// The linear kind applies a well-conditioned square matrix; the non-linear
/// kind follows it with an elementwise strictly monotone map, so the exact
/// inverse is the scalar inverse followed by the matrix inverse.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ObservationMap {
    Identity,
    LinearInvertible {
        matrix: DMatrix<f64>,
        #[serde(skip)]
        inverse: std::sync::OnceLock<DMatrix<f64>>,
    },
    NonlinearInvertible {
        matrix: DMatrix<f64>,
        scalar: ScalarMap,
        #[serde(skip)]
        inverse: std::sync::OnceLock<DMatrix<f64>>,
    },
}

/// Condition-number ceiling for accepting a linear mixing matrix.
pub const MAP_MAX_CONDITION: f64 = 1e8;

impl ObservationMap {
    pub fn identity() -> Self {
        ObservationMap::Identity
    }

    pub fn linear(matrix: DMatrix<f64>) -> Result<Self> {
        Self::check_matrix(&matrix)?;
        Ok(ObservationMap::LinearInvertible {
            matrix,
            inverse: std::sync::OnceLock::new(),
        })
    }

    pub fn nonlinear(matrix: DMatrix<f64>, scalar: ScalarMap) -> Result<Self> {
        Self::check_matrix(&matrix)?;
        Ok(ObservationMap::NonlinearInvertible {
            matrix,
            scalar,
            inverse: std::sync::OnceLock::new(),
        })
    }

    /// Seeded random well-conditioned mixing matrix: Gaussian entries,
    /// re-drawn until the condition number is acceptable.
    pub fn random_linear(dim: usize, seed: u64) -> Self {
        let matrix = random_well_conditioned(dim, seed);
        ObservationMap::linear(matrix).expect("conditioned draw is invertible")
    }

    pub fn random_nonlinear(dim: usize, seed: u64) -> Self {
        let matrix = random_well_conditioned(dim, seed);
        ObservationMap::nonlinear(matrix, ScalarMap::CubicPlus)
            .expect("conditioned draw is invertible")
    }

    fn check_matrix(matrix: &DMatrix<f64>) -> Result<()> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch(
                "observation matrix must be square".into(),
            ));
        }
        let inv_cond = linalg::inverse_condition(matrix);
        if inv_cond <= 1.0 / MAP_MAX_CONDITION {
            return Err(Error::SingularMap {
                cond: if inv_cond > 0.0 {
                    1.0 / inv_cond
                } else {
                    f64::INFINITY
                },
            });
        }
        Ok(())
    }

    fn check_dims(&self, dim: usize) -> Result<()> {
        match self {
            ObservationMap::Identity => Ok(()),
            ObservationMap::LinearInvertible { matrix, .. }
            | ObservationMap::NonlinearInvertible { matrix, .. } => {
                if matrix.nrows() == dim {
                    Ok(())
                } else {
                    Err(Error::DimensionMismatch(format!(
                        "observation matrix is {}x{} but latent dimension is {dim}",
                        matrix.nrows(),
                        matrix.ncols()
                    )))
                }
            }
        }
    }

    fn inverse_matrix<'a>(
        matrix: &'a DMatrix<f64>,
        cache: &'a std::sync::OnceLock<DMatrix<f64>>,
    ) -> &'a DMatrix<f64> {
        cache.get_or_init(|| {
            matrix
                .clone()
                .try_inverse()
                .expect("matrix validated at construction")
        })
    }

    /// Observation from latents.
    pub fn forward(&self, latent: &[f64]) -> Vec<f64> {
        match self {
            ObservationMap::Identity => latent.to_vec(),
            ObservationMap::LinearInvertible { matrix, .. } => {
                let z = DVector::from_column_slice(latent);
                (matrix * z).data.into()
            }
            ObservationMap::NonlinearInvertible { matrix, scalar, .. } => {
                let z = DVector::from_column_slice(latent);
                let mut x = matrix * z;
                for v in x.iter_mut() {
                    *v = scalar.forward(*v);
                }
                x.data.into()
            }
        }
    }

    /// Latents from an observation.
    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ObservationMap::Identity => x.to_vec(),
            ObservationMap::LinearInvertible { matrix, inverse } => {
                let inv = Self::inverse_matrix(matrix, inverse);
                let v = DVector::from_column_slice(x);
                (inv * v).data.into()
            }
            ObservationMap::NonlinearInvertible {
                matrix,
                scalar,
                inverse,
            } => {
                let inv = Self::inverse_matrix(matrix, inverse);
                let mut v = DVector::from_column_slice(x);
                for t in v.iter_mut() {
                    *t = scalar.invert(*t);
                }
                (inv * v).data.into()
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, ObservationMap::Identity)
    }
}

fn random_well_conditioned(dim: usize, seed: u64) -> DMatrix<f64> {
    for attempt in 0..64u64 {
        let mut rng = rng::stream_rng(seed, &[0x0b5e, attempt]);
        let m = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        if linalg::inverse_condition(&m) > 1e-3 {
            return m;
        }
    }
    // Gaussian matrices are this ill-conditioned with vanishing probability.
    DMatrix::identity(dim, dim)
}

/// Splits a latent vector into its invariant and environmental blocks.
pub fn split_latent(latent: &[f64], d_c: usize) -> (&[f64], &[f64]) {
    latent.split_at(d_c)
}

/// Draws `n` labelled latent samples and their observations from one
/// environment. Identical `(set, env_index, n, seed)` reproduce the stream
/// bit for bit; shards derive their seeds from the master seed.
pub fn sample_environment(
    set: &EnvironmentSet,
    env_index: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<(LatentSample, Vec<f64>)>> {
    let env = set.env(env_index)?;
    let inv = set.invariant();
    let (d_c, d_e) = (inv.d_c(), env.d_e());
    let sigma_c = inv.sigma_c_sq().sqrt();
    let sigma_e = env.sigma_e_sq().sqrt();

    let shards = (n as u64).div_ceil(rng::SHARD_SIZE);
    let mut out = Vec::with_capacity(n);
    for shard in 0..shards {
        let mut r = rng::stream_rng(seed, &[0x5a17, env_index as u64, shard]);
        let count = rng::SHARD_SIZE.min(n as u64 - shard * rng::SHARD_SIZE) as usize;
        for _ in 0..count {
            let y: i8 = if r.gen::<f64>() < inv.eta() { 1 } else { -1 };
            let yf = y as f64;
            let mut latent = Vec::with_capacity(d_c + d_e);
            for i in 0..d_c {
                let g: f64 = r.sample(StandardNormal);
                latent.push(yf * inv.mu_c()[i] + sigma_c * g);
            }
            for i in 0..d_e {
                let g: f64 = r.sample(StandardNormal);
                latent.push(yf * env.mu_e()[i] + sigma_e * g);
            }
            let x = set.map().forward(&latent);
            let (z_c, z_e) = split_latent(&latent, d_c);
            out.push((
                LatentSample {
                    y,
                    z_c: z_c.to_vec(),
                    z_e: z_e.to_vec(),
                },
                x,
            ));
        }
    }
    Ok(out)
}

/// The predictor that recovers exactly the invariant features and applies the
/// log-odds classifier on them: featurizer rows select the invariant block
/// (B = 0), coefficients 2 mu_c / sigma_c^2, intercept log(eta/(1-eta)).
pub fn optimal_invariant_predictor(inv: &InvariantParams, d_e: usize) -> LinearPredictor {
    let d_c = inv.d_c();
    let a = DMatrix::identity(d_c, d_c);
    let b = DMatrix::zeros(d_c, d_e);
    LinearPredictor::new(a, b, inv.beta_c(), inv.beta0()).expect("dimensions consistent")
}

/// Recovers `(z_c, z_e)` from an observation.
pub fn invert_observation(
    map: &ObservationMap,
    x: &[f64],
    d_c: usize,
) -> (Vec<f64>, Vec<f64>) {
    let latent = map.invert(x);
    let (z_c, z_e) = split_latent(&latent, d_c);
    (z_c.to_vec(), z_e.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_env_set() -> EnvironmentSet {
        let inv = InvariantParams::new(0.5, vec![1.0, -1.0], 2.0).unwrap();
        let envs = vec![
            EnvironmentParams::new(vec![2.0, 0.0], 1.0).unwrap(),
            EnvironmentParams::new(vec![0.0, 1.5], 2.0).unwrap(),
        ];
        EnvironmentSet::with_identity_map(inv, envs).unwrap()
    }

    #[test]
    fn parameter_validation() {
        assert!(InvariantParams::new(0.0, vec![1.0], 1.0).is_err());
        assert!(InvariantParams::new(0.5, vec![f64::NAN], 1.0).is_err());
        assert!(InvariantParams::new(0.5, vec![1.0], -1.0).is_err());
        assert!(EnvironmentParams::new(vec![1.0], 0.0).is_err());
        let set = two_env_set();
        assert!(set.env(2).is_err());
    }

    #[test]
    fn derived_classifier_matches_formula() {
        let inv = InvariantParams::new(0.5, vec![1.0, -1.0], 2.0).unwrap();
        assert_relative_eq!(inv.beta0(), 0.0);
        let bc = inv.beta_c();
        assert_relative_eq!(bc[0], 1.0);
        assert_relative_eq!(bc[1], -1.0);

        let skew = InvariantParams::new(0.3, vec![1.0], 1.0).unwrap();
        assert_relative_eq!(skew.beta0(), (0.3f64 / 0.7).ln());
    }

    #[test]
    fn label_marginal_matches_eta() {
        let set = two_env_set();
        let n = 1_000_000;
        let samples = sample_environment(&set, 0, n, 11).unwrap();
        let frac = samples.iter().filter(|(s, _)| s.y == 1).count() as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.002, "frac = {frac}");
    }

    #[test]
    fn invariant_block_variance_matches() {
        let inv = InvariantParams::new(0.5, vec![0.3, -0.2], 1.0).unwrap();
        let envs = vec![EnvironmentParams::new(vec![1.0, 1.0], 1.0).unwrap()];
        let set = EnvironmentSet::with_identity_map(inv, envs).unwrap();
        let n = 1_000_000;
        let samples = sample_environment(&set, 0, n, 5).unwrap();
        for dim in 0..2 {
            // center per label to isolate the noise variance
            let mut sum = [0.0f64; 2];
            let mut sum_sq = [0.0f64; 2];
            let mut count = [0usize; 2];
            for (s, _) in &samples {
                let idx = if s.y == 1 { 0 } else { 1 };
                sum[idx] += s.z_c[dim];
                sum_sq[idx] += s.z_c[dim] * s.z_c[dim];
                count[idx] += 1;
            }
            for idx in 0..2 {
                let mean = sum[idx] / count[idx] as f64;
                let var = sum_sq[idx] / count[idx] as f64 - mean * mean;
                assert!((var - 1.0).abs() < 0.01, "var = {var}");
            }
        }
    }

    #[test]
    fn conditional_mean_of_environmental_block() {
        let inv = InvariantParams::new(0.5, vec![0.5], 1.0).unwrap();
        let envs = vec![EnvironmentParams::new(vec![2.0, 0.0], 1.0).unwrap()];
        let set = EnvironmentSet::with_identity_map(inv, envs).unwrap();
        let n = 1_000_000;
        let samples = sample_environment(&set, 0, n, 17).unwrap();
        let mut sum = [0.0f64; 2];
        let mut count = 0usize;
        for (s, _) in &samples {
            if s.y == 1 {
                sum[0] += s.z_e[0];
                sum[1] += s.z_e[1];
                count += 1;
            }
        }
        assert!((sum[0] / count as f64 - 2.0).abs() < 0.01);
        assert!((sum[1] / count as f64).abs() < 0.01);
    }

    #[test]
    fn sampling_is_bit_deterministic() {
        let set = two_env_set();
        let a = sample_environment(&set, 1, 10_000, 123).unwrap();
        let b = sample_environment(&set, 1, 10_000, 123).unwrap();
        for ((sa, xa), (sb, xb)) in a.iter().zip(&b) {
            assert_eq!(sa.y, sb.y);
            assert_eq!(sa.z_c, sb.z_c);
            assert_eq!(sa.z_e, sb.z_e);
            for (va, vb) in xa.iter().zip(xb) {
                assert_eq!(va.to_bits(), vb.to_bits());
            }
        }
    }

    #[test]
    fn identity_map_round_trip() {
        let map = ObservationMap::identity();
        let (z_c, z_e) = invert_observation(&map, &[1.0, 2.0, 3.0], 1);
        assert_eq!(z_c, vec![1.0]);
        assert_eq!(z_e, vec![2.0, 3.0]);
    }

    #[test]
    fn linear_map_round_trip() {
        let map = ObservationMap::random_linear(5, 42);
        let mut r = rng::stream_rng(1, &[9]);
        for _ in 0..50 {
            let z: Vec<f64> = (0..5).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let x = map.forward(&z);
            let back = map.invert(&x);
            let err: f64 = z
                .iter()
                .zip(&back)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let scale: f64 = z.iter().map(|v| v.abs()).fold(1.0, f64::max);
            assert!(err / scale <= 1e-10, "relative error {err}");
        }
    }

    #[test]
    fn singular_map_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            ObservationMap::linear(m),
            Err(Error::SingularMap { .. })
        ));
    }

    #[test]
    fn cubic_inverse_matches_bisection_oracle() {
        // independent oracle: plain bisection on t + t^3 = v
        fn bisect(v: f64) -> f64 {
            let (mut lo, mut hi) = (-1e3f64, 1e3f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid + mid * mid * mid < v {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        }
        let s = ScalarMap::CubicPlus;
        for &v in &[-123.0, -2.5, -1e-9, 0.0, 0.3, 7.0, 999.0] {
            let got = s.invert(v);
            let want = bisect(v);
            assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0));
            assert!((s.forward(got) - v).abs() <= 1e-10 * v.abs().max(1.0));
        }
    }

    #[test]
    fn nonlinear_map_round_trip() {
        let map = ObservationMap::random_nonlinear(4, 7);
        let mut r = rng::stream_rng(3, &[4]);
        for _ in 0..50 {
            let z: Vec<f64> = (0..4)
                .map(|_| 2.0 * r.sample::<f64, _>(StandardNormal))
                .collect();
            let x = map.forward(&z);
            let back = map.invert(&x);
            let scale: f64 = z.iter().map(|v| v.abs()).fold(1.0, f64::max);
            for (a, b) in z.iter().zip(&back) {
                assert!((a - b).abs() / scale <= 1e-8);
            }
        }
    }

    #[test]
    fn optimal_invariant_predictor_shape() {
        let inv = InvariantParams::new(0.5, vec![1.0, -1.0], 2.0).unwrap();
        let pred = optimal_invariant_predictor(&inv, 3);
        assert_eq!(pred.a().nrows(), 2);
        assert_eq!(pred.b().ncols(), 3);
        assert!(pred.b().iter().all(|&v| v == 0.0));
        assert_relative_eq!(pred.beta()[0], 1.0);
        assert_relative_eq!(pred.beta()[1], -1.0);
        assert_relative_eq!(pred.beta0(), 0.0);
    }
}
