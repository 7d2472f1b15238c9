//! Zero-mean Gaussian-process regression with a Matérn-5/2 covariance.
//!
//! Training inputs live in the unit cube (callers normalize with the search
//! space bounds). Targets are z-scored before fitting; cost surrogates are
//! log-transformed first, so their posterior is expressed in log-cost units
//! and draws must be exponentiated by the caller.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SQRT5: f64 = 2.236_067_977_499_79;

/// Jitter escalation: first attempt without jitter, then 1e-8 .. 1e-2.
const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;

pub const LENGTHSCALE_BOUNDS: (f64, f64) = (1e-3, 1e3);
pub const OUTPUT_SCALE_BOUNDS: (f64, f64) = (1e-3, 1e3);
pub const NOISE_BOUNDS: (f64, f64) = (1e-6, 1e1);

/// Slack allowed on the unit-cube check for training inputs.
const CUBE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub lengthscales: Vec<f64>,
    pub output_scale: f64,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn new(lengthscales: Vec<f64>, output_scale: f64, noise_variance: f64) -> Result<Self> {
        let params = KernelParams {
            lengthscales,
            output_scale,
            noise_variance,
        };
        params.validate(params.lengthscales.len())?;
        Ok(params)
    }

    /// Same lengthscale on every dimension.
    pub fn isotropic(dim: usize, lengthscale: f64, output_scale: f64, noise: f64) -> Result<Self> {
        Self::new(vec![lengthscale; dim], output_scale, noise)
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.lengthscales.len() != dim {
            return Err(Error::invalid(format!(
                "kernel has {} lengthscales but inputs have dimension {dim}",
                self.lengthscales.len()
            )));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !self.lengthscales.iter().all(|&l| positive(l))
            || !positive(self.output_scale)
            || !positive(self.noise_variance)
        {
            return Err(Error::invalid(
                "kernel parameters must be finite and strictly positive",
            ));
        }
        Ok(())
    }

    fn to_log_vec(&self) -> Vec<f64> {
        let mut theta: Vec<f64> = self.lengthscales.iter().map(|l| l.ln()).collect();
        theta.push(self.output_scale.ln());
        theta.push(self.noise_variance.ln());
        theta
    }

    fn from_log_vec(theta: &[f64]) -> Self {
        let d = theta.len() - 2;
        KernelParams {
            lengthscales: theta[..d].iter().map(|t| t.exp()).collect(),
            output_scale: theta[d].exp(),
            noise_variance: theta[d + 1].exp(),
        }
    }
}

/// Matérn-5/2 covariance between two points.
pub fn matern52(a: &[f64], b: &[f64], params: &KernelParams) -> Result<f64> {
    if a.len() != b.len() || a.len() != params.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: |a|={}, |b|={}, kernel dim={}",
            a.len(),
            b.len(),
            params.dim()
        )));
    }
    Ok(matern52_unchecked(a, b, params))
}

#[inline]
fn matern52_unchecked(a: &[f64], b: &[f64], params: &KernelParams) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(&params.lengthscales)
        .map(|((x, y), l)| {
            let t = (x - y) / l;
            t * t
        })
        .sum();
    matern52_from_r2(r2, params.output_scale)
}

#[inline]
fn matern52_from_r2(r2: f64, output_scale: f64) -> f64 {
    let r = r2.sqrt();
    output_scale * (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * (-SQRT5 * r).exp()
}

/// How raw targets are mapped before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetTransform {
    /// z-score (objective surrogate).
    Standardize,
    /// natural log, then z-score (cost surrogates).
    LogStandardize,
}

/// Affine map between model units and standardized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardization {
    pub shift: f64,
    pub scale: f64,
}

impl Standardization {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        let scale = if sd > 1e-12 * mean.abs().max(1.0) {
            sd
        } else {
            1.0
        };
        Standardization { shift: mean, scale }
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.shift) / self.scale
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.scale + self.shift
    }
}

/// Predictive marginal at one query point, in model units (log units for
/// cost surrogates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorGaussian {
    pub mean: f64,
    pub variance: f64,
}

impl PosteriorGaussian {
    pub fn std_dev(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }
}

/// Anything that yields a Gaussian predictive marginal at a point.
pub trait Surrogate: Send + Sync {
    fn dim(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Result<PosteriorGaussian>;
}

/// Surrogate with the same predictive distribution everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantSurrogate {
    pub dim: usize,
    pub posterior: PosteriorGaussian,
}

impl Surrogate for ConstantSurrogate {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, x: &[f64]) -> Result<PosteriorGaussian> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "query has dimension {}, expected {}",
                x.len(),
                self.dim
            )));
        }
        Ok(self.posterior)
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub seed: u64,
    pub transform: TargetTransform,
    /// Starting point for the first restart; later restarts are random.
    pub initial: Option<KernelParams>,
    pub restarts: usize,
    pub max_evals_per_restart: usize,
}

impl FitOptions {
    pub fn new(seed: u64, transform: TargetTransform) -> Self {
        FitOptions {
            seed,
            transform,
            initial: None,
            restarts: 3,
            max_evals_per_restart: 400,
        }
    }
}

/// A trained GP. Immutable once built.
#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Vec<Vec<f64>>,
    targets: DVector<f64>,
    params: KernelParams,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
    transform: TargetTransform,
    standardization: Standardization,
}

impl GpModel {
    /// Builds a model with fixed kernel parameters (no hyperparameter search).
    pub fn with_params(
        inputs: &[Vec<f64>],
        targets: &[f64],
        params: KernelParams,
        transform: TargetTransform,
    ) -> Result<Self> {
        let dim = check_training_data(inputs, targets, 1)?;
        params.validate(dim)?;
        let (z, standardization) = transform_targets(targets, transform)?;
        let sq = SquaredDistances::new(inputs);
        let (chol, jitter) = factorize(&sq, &params)?;
        let alpha = chol.solve(&z);
        Ok(GpModel {
            inputs: inputs.to_vec(),
            targets: z,
            params,
            chol,
            alpha,
            jitter,
            transform,
            standardization,
        })
    }

    /// Fits kernel parameters by multi-start coordinate ascent on the log
    /// marginal likelihood in log-parameter space.
    pub fn fit(inputs: &[Vec<f64>], targets: &[f64], options: &FitOptions) -> Result<Self> {
        let dim = check_training_data(inputs, targets, 2)?;
        let (z, _) = transform_targets(targets, options.transform)?;
        let sq = SquaredDistances::new(inputs);

        let mut lo = vec![LENGTHSCALE_BOUNDS.0.ln(); dim];
        let mut hi = vec![LENGTHSCALE_BOUNDS.1.ln(); dim];
        lo.extend([OUTPUT_SCALE_BOUNDS.0.ln(), NOISE_BOUNDS.0.ln()]);
        hi.extend([OUTPUT_SCALE_BOUNDS.1.ln(), NOISE_BOUNDS.1.ln()]);

        let objective = |theta: &[f64]| -> f64 {
            let params = KernelParams::from_log_vec(theta);
            match factorize(&sq, &params) {
                Ok((chol, _)) => lml_from_chol(&chol, &z),
                Err(_) => f64::NEG_INFINITY,
            }
        };

        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let mut starts = Vec::with_capacity(options.restarts.max(1));
        let first = match &options.initial {
            Some(p) if p.dim() == dim => p.to_log_vec(),
            _ => KernelParams::isotropic(dim, 0.5, 1.0, 1e-3)?.to_log_vec(),
        };
        starts.push(first);
        for _ in 1..options.restarts.max(1) {
            let mut theta: Vec<f64> = (0..dim)
                .map(|_| rng.random_range(0.05f64.ln()..2.0f64.ln()))
                .collect();
            theta.push(rng.random_range(0.3f64.ln()..3.0f64.ln()));
            theta.push(rng.random_range(1e-5f64.ln()..1e-1f64.ln()));
            starts.push(theta);
        }

        let mut best: Option<(Vec<f64>, f64)> = None;
        for start in starts {
            let clamped: Vec<f64> = start
                .iter()
                .zip(lo.iter().zip(&hi))
                .map(|(t, (l, h))| t.clamp(*l, *h))
                .collect();
            let (theta, value) =
                coordinate_ascent(clamped, &lo, &hi, options.max_evals_per_restart, &objective);
            if value.is_finite() && best.as_ref().is_none_or(|(_, b)| value > *b) {
                best = Some((theta, value));
            }
        }
        let (theta, _) = best.ok_or_else(|| {
            Error::NumericalFailure("covariance singular for every hyperparameter start".into())
        })?;
        Self::with_params(
            inputs,
            targets,
            KernelParams::from_log_vec(&theta),
            options.transform,
        )
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.params.dim()
    }

    pub fn transform(&self) -> TargetTransform {
        self.transform
    }

    pub fn standardization(&self) -> Standardization {
        self.standardization
    }

    /// Jitter added to the diagonal on top of the noise variance (0 when the
    /// first factorization succeeded).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower-triangular Cholesky factor of `K + (noise + jitter) I`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Log marginal likelihood in standardized units.
    pub fn log_marginal_likelihood(&self) -> f64 {
        lml_from_chol(&self.chol, &self.targets)
    }

    pub fn posterior(&self, queries: &[Vec<f64>]) -> Result<Vec<PosteriorGaussian>> {
        queries.iter().map(|q| self.predict(q)).collect()
    }

    /// Predictive mean and latent variance in standardized units.
    pub fn predict_standardized(&self, x: &[f64]) -> Result<PosteriorGaussian> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "query has dimension {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let kstar = DVector::from_iterator(
            self.inputs.len(),
            self.inputs
                .iter()
                .map(|xi| matern52_unchecked(xi, x, &self.params)),
        );
        let mean = kstar.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&kstar)
            .ok_or_else(|| Error::NumericalFailure("triangular solve failed".into()))?;
        let variance = (self.params.output_scale - v.norm_squared()).max(0.0);
        Ok(PosteriorGaussian { mean, variance })
    }
}

impl Surrogate for GpModel {
    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn predict(&self, x: &[f64]) -> Result<PosteriorGaussian> {
        let p = self.predict_standardized(x)?;
        let s = self.standardization;
        Ok(PosteriorGaussian {
            mean: s.inverse(p.mean),
            variance: p.variance * s.scale * s.scale,
        })
    }
}

/// Draws `count` values from the predictive marginal.
pub fn sample<R: Rng + ?Sized>(post: &PosteriorGaussian, count: usize, rng: &mut R) -> Vec<f64> {
    let sd = post.std_dev();
    (0..count)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            post.mean + sd * z
        })
        .collect()
}

fn check_training_data(inputs: &[Vec<f64>], targets: &[f64], min: usize) -> Result<usize> {
    if inputs.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if inputs.len() < min {
        return Err(Error::InsufficientData {
            needed: min,
            got: inputs.len(),
        });
    }
    let dim = inputs[0].len();
    if dim == 0 {
        return Err(Error::invalid("inputs must have at least one dimension"));
    }
    for row in inputs {
        if row.len() != dim {
            return Err(Error::invalid("ragged input matrix"));
        }
        if row
            .iter()
            .any(|v| !v.is_finite() || *v < -CUBE_TOL || *v > 1.0 + CUBE_TOL)
        {
            return Err(Error::invalid("training inputs must lie in the unit cube"));
        }
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("targets must be finite"));
    }
    Ok(dim)
}

fn transform_targets(
    targets: &[f64],
    transform: TargetTransform,
) -> Result<(DVector<f64>, Standardization)> {
    let raw: Vec<f64> = match transform {
        TargetTransform::Standardize => targets.to_vec(),
        TargetTransform::LogStandardize => {
            if targets.iter().any(|&t| t <= 0.0) {
                return Err(Error::invalid("cost targets must be strictly positive"));
            }
            targets.iter().map(|t| t.ln()).collect()
        }
    };
    let s = Standardization::from_values(&raw);
    Ok((
        DVector::from_iterator(raw.len(), raw.iter().map(|v| s.forward(*v))),
        s,
    ))
}

/// Per-dimension squared differences, reused across kernel evaluations.
struct SquaredDistances {
    n: usize,
    /// `per_dim[j][i * n + k] = (x_ij - x_kj)^2`
    per_dim: Vec<Vec<f64>>,
}

impl SquaredDistances {
    fn new(inputs: &[Vec<f64>]) -> Self {
        let n = inputs.len();
        let dim = inputs[0].len();
        let per_dim = (0..dim)
            .map(|j| {
                let mut m = vec![0.0; n * n];
                for i in 0..n {
                    for k in 0..n {
                        let d = inputs[i][j] - inputs[k][j];
                        m[i * n + k] = d * d;
                    }
                }
                m
            })
            .collect();
        SquaredDistances { n, per_dim }
    }

    fn gram(&self, params: &KernelParams) -> DMatrix<f64> {
        let n = self.n;
        let mut r2 = vec![0.0; n * n];
        for (sq, l) in self.per_dim.iter().zip(&params.lengthscales) {
            let w = 1.0 / (l * l);
            for (acc, s) in r2.iter_mut().zip(sq) {
                *acc += s * w;
            }
        }
        DMatrix::from_fn(n, n, |i, k| {
            matern52_from_r2(r2[i * n + k], params.output_scale)
        })
    }
}

fn factorize(sq: &SquaredDistances, params: &KernelParams) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let gram = sq.gram(params);
    let mut jitter = 0.0;
    loop {
        let mut k = gram.clone();
        for i in 0..sq.n {
            k[(i, i)] += params.noise_variance + jitter;
        }
        if let Some(chol) = k.cholesky() {
            let l = chol.l_dirty();
            if (0..sq.n).all(|i| l[(i, i)] > 0.0 && l[(i, i)].is_finite()) {
                return Ok((chol, jitter));
            }
        }
        jitter = if jitter == 0.0 {
            JITTER_START
        } else {
            jitter * 10.0
        };
        if jitter > JITTER_MAX * (1.0 + 1e-9) {
            return Err(Error::NumericalFailure(format!(
                "covariance not positive definite after jitter {JITTER_MAX:e}"
            )));
        }
    }
}

fn lml_from_chol(chol: &Cholesky<f64, Dyn>, y: &DVector<f64>) -> f64 {
    let alpha = chol.solve(y);
    let l = chol.l_dirty();
    let n = y.len();
    let log_diag: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
    -0.5 * y.dot(&alpha) - log_diag - 0.5 * n as f64 * LN_2PI
}

/// Greedy coordinate-wise pattern search with step halving.
fn coordinate_ascent(
    mut theta: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    max_evals: usize,
    f: &dyn Fn(&[f64]) -> f64,
) -> (Vec<f64>, f64) {
    let mut best = f(&theta);
    let mut evals = 1;
    let mut step = 1.0;
    while step >= 1e-2 && evals < max_evals {
        let mut improved = false;
        for i in 0..theta.len() {
            for dir in [1.0, -1.0] {
                let old = theta[i];
                let cand = (old + dir * step).clamp(lo[i], hi[i]);
                if cand == old {
                    continue;
                }
                theta[i] = cand;
                let v = f(&theta);
                evals += 1;
                if v > best + 1e-10 {
                    best = v;
                    improved = true;
                    break;
                }
                theta[i] = old;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (theta, best)
}
