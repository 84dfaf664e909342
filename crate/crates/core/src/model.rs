//! Cumulative link model `P(y <= j | x) = F(alpha^j + beta'x)`: parameters,
//! priors, data generation, likelihood, score and Fisher information.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::quadrature::integrate;
use crate::rng::RngStream;
use crate::special::{interval_mass, norm_cdf, norm_pdf};
use crate::stats::pairwise_sum;

/// Stream label for covariate/label generation.
const DATA_STREAM: u64 = 0xDA7A;
/// Stream label for the Monte Carlo Fisher information.
const FISHER_STREAM: u64 = 0xF15E;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    #[default]
    Probit,
}

/// Link CDF `F`, its density `f` and `f'/f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LinkSpec {
    pub kind: LinkKind,
}

impl LinkSpec {
    pub fn probit() -> Self {
        Self { kind: LinkKind::Probit }
    }

    #[inline]
    pub fn cdf(&self, z: f64) -> f64 {
        match self.kind {
            LinkKind::Probit => norm_cdf(z),
        }
    }

    #[inline]
    pub fn pdf(&self, z: f64) -> f64 {
        match self.kind {
            LinkKind::Probit => norm_pdf(z),
        }
    }

    /// `f'(z) / f(z)`.
    #[inline]
    pub fn dlogf(&self, z: f64) -> f64 {
        match self.kind {
            LinkKind::Probit => -z,
        }
    }

    /// `F(b) - F(a)` without cancellation in either tail.
    #[inline]
    pub fn mass(&self, a: f64, b: f64) -> f64 {
        match self.kind {
            LinkKind::Probit => interval_mass(a, b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateLaw {
    #[default]
    UniformUnitCube,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub p: usize,
    pub law: CovariateLaw,
}

impl CovariateSpec {
    pub fn uniform(p: usize) -> Self {
        Self { p, law: CovariateLaw::UniformUnitCube }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self.law {
            CovariateLaw::UniformUnitCube => {
                for v in out.iter_mut() {
                    *v = rng.sample(Open01);
                }
            }
        }
    }

    /// `E[x]` under the covariate law.
    pub fn mean(&self) -> DVector<f64> {
        match self.law {
            CovariateLaw::UniformUnitCube => DVector::from_element(self.p, 0.5),
        }
    }

    /// `E[x x']` under the covariate law.
    pub fn second_moment(&self) -> DMatrix<f64> {
        match self.law {
            CovariateLaw::UniformUnitCube => DMatrix::from_fn(self.p, self.p, |i, j| if i == j { 1.0 / 3.0 } else { 0.25 }),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self.law {
            CovariateLaw::UniformUnitCube => x.len() == self.p && x.iter().all(|&v| (0.0..=1.0).contains(&v)),
        }
    }
}

/// Normal priors on the cut-points and regression vector, Gamma prior on g².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    /// Shape of the Gamma prior on g².
    pub a0: f64,
    /// Rate of the Gamma prior on g².
    pub b0: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { sigma_alpha: 10.0, sigma_beta: 10.0, a0: 0.5, b0: 0.5 }
    }
}

impl PriorSpec {
    /// Standard normal prior on the single binary-probit coefficient.
    pub fn binary() -> Self {
        Self { sigma_beta: 1.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma_alpha", self.sigma_alpha), ("sigma_beta", self.sigma_beta), ("a0", self.a0), ("b0", self.b0)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("prior {name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    /// Unnormalized log prior density of θ (cone restriction not included).
    pub fn log_density(&self, theta: &Theta) -> f64 {
        let sa: f64 = theta.alpha.iter().map(|a| a * a).sum();
        let sb: f64 = theta.beta.iter().map(|b| b * b).sum();
        -0.5 * sa / (self.sigma_alpha * self.sigma_alpha) - 0.5 * sb / (self.sigma_beta * self.sigma_beta)
    }
}

/// Identified parameter: interior cut-points `alpha = (α², …, α^{c−1})` and
/// regression vector `beta`. `α⁰ = −∞`, `α¹ = 0` and `α^c = +∞` are implicit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Theta {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let t = Self { alpha, beta };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        precondition!(!self.beta.is_empty(), "beta must have at least one component");
        precondition!(self.alpha.iter().chain(&self.beta).all(|v| v.is_finite()), "theta has non-finite entries");
        let mut prev = 0.0;
        for (k, &a) in self.alpha.iter().enumerate() {
            precondition!(a > prev, "cut-points must satisfy 0 < α² < … ; α^{} = {a} after {prev}", k + 2);
            prev = a;
        }
        Ok(())
    }

    pub fn in_cone(&self) -> bool {
        let mut prev = 0.0;
        for &a in &self.alpha {
            if !(a > prev) {
                return false;
            }
            prev = a;
        }
        true
    }

    pub fn c(&self) -> usize {
        self.alpha.len() + 2
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn dim(&self) -> usize {
        self.alpha.len() + self.beta.len()
    }

    /// Flattened `(α², …, α^{c−1}, β₁, …, β_p)`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.alpha.iter().chain(&self.beta).copied().collect()
    }

    pub fn from_slice(c: usize, v: &[f64]) -> Self {
        let k = c - 2;
        Self { alpha: v[..k].to_vec(), beta: v[k..].to_vec() }
    }

    /// Cut-point `α^j` for `j ∈ 0..=c`.
    #[inline]
    pub fn cut(&self, j: usize) -> f64 {
        let c = self.c();
        match j {
            0 => f64::NEG_INFINITY,
            1 => 0.0,
            _ if j == c => f64::INFINITY,
            _ => self.alpha[j - 2],
        }
    }

    #[inline]
    pub fn linear(&self, x: &[f64]) -> f64 {
        self.beta.iter().zip(x).map(|(b, v)| b * v).sum()
    }

    pub fn scaled(&self, g: f64) -> Self {
        Self { alpha: self.alpha.iter().map(|a| a * g).collect(), beta: self.beta.iter().map(|b| b * g).collect() }
    }
}

/// Parameter of the marginally augmented model, `(θ, g)` with identified part `gθ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpandedTheta {
    pub theta: Theta,
    pub g: f64,
}

impl ExpandedTheta {
    pub fn new(theta: Theta, g: f64) -> Result<Self> {
        precondition!(g > 0.0 && g.is_finite(), "working scale g must be positive, got {g}");
        theta.validate()?;
        Ok(Self { theta, g })
    }

    pub fn unit(theta: Theta) -> Self {
        Self { theta, g: 1.0 }
    }

    pub fn identified(&self) -> Theta {
        self.theta.scaled(self.g)
    }
}

/// Observed covariates (row-major `n × p`) and labels in `1..=c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<usize>,
    pub n: usize,
    pub c: usize,
    pub p: usize,
    pub true_theta: Option<Theta>,
    pub seed: u64,
}

impl Dataset {
    pub fn new(x: Vec<f64>, y: Vec<usize>, c: usize, p: usize, true_theta: Option<Theta>, seed: u64) -> Result<Self> {
        let n = y.len();
        precondition!(c >= 2, "need at least two categories, got c={c}");
        precondition!(p >= 1, "need at least one covariate");
        precondition!(x.len() == n * p, "x has {} entries, expected n*p = {}", x.len(), n * p);
        precondition!(y.iter().all(|&v| (1..=c).contains(&v)), "labels must lie in 1..={c}");
        precondition!(x.iter().all(|v| v.is_finite()), "covariates must be finite");
        Ok(Self { x, y, n, c, p, true_theta, seed })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut k = vec![0; self.c + 1];
        for &y in &self.y {
            k[y] += 1;
        }
        k
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub c: usize,
    pub link: LinkSpec,
    pub covariates: CovariateSpec,
    pub prior: PriorSpec,
}

impl ModelConfig {
    pub fn new(c: usize, p: usize, prior: PriorSpec) -> Result<Self> {
        let cfg = Self { c, link: LinkSpec::probit(), covariates: CovariateSpec::uniform(p), prior };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Binary probit with one covariate and a standard normal prior.
    pub fn binary() -> Self {
        Self { c: 2, link: LinkSpec::probit(), covariates: CovariateSpec::uniform(1), prior: PriorSpec::binary() }
    }

    pub fn p(&self) -> usize {
        self.covariates.p
    }

    pub fn dim(&self) -> usize {
        self.c - 2 + self.covariates.p
    }

    pub fn validate(&self) -> Result<()> {
        if self.c < 2 {
            return Err(Error::Config(format!("c must be at least 2, got {}", self.c)));
        }
        if self.covariates.p < 1 {
            return Err(Error::Config("p must be at least 1".into()));
        }
        self.prior.validate()
    }

    pub fn check_theta(&self, theta: &Theta) -> Result<()> {
        theta.validate()?;
        precondition!(
            theta.c() == self.c && theta.p() == self.p(),
            "theta has shape (c={}, p={}), model expects (c={}, p={})",
            theta.c(),
            theta.p(),
            self.c,
            self.p()
        );
        Ok(())
    }

    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        precondition!(
            data.c == self.c && data.p == self.p(),
            "dataset has shape (c={}, p={}), model expects (c={}, p={})",
            data.c,
            data.p,
            self.c,
            self.p()
        );
        Ok(())
    }
}

/// Simulates `n` observations from the model at `theta0`.
pub fn sample_dataset(cfg: &ModelConfig, theta0: &Theta, n: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    cfg.check_theta(theta0)?;
    let p = cfg.p();
    let mut rng = RngStream::new(seed, DATA_STREAM);
    let mut x = vec![0.0; n * p];
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let row = &mut x[i * p..(i + 1) * p];
        cfg.covariates.draw(&mut rng, row);
        let eta = theta0.linear(row);
        let u: f64 = rng.sample(Open01);
        let mut label = cfg.c;
        for j in 1..cfg.c {
            if u <= cfg.link.cdf(theta0.cut(j) + eta) {
                label = j;
                break;
            }
        }
        y.push(label);
    }
    Dataset::new(x, y, cfg.c, p, Some(theta0.clone()), seed)
}

/// `p(y = j | x, θ) = F(α^j + β'x) − F(α^{j−1} + β'x)`.
pub fn cell_probability(cfg: &ModelConfig, theta: &Theta, x: &[f64], j: usize) -> Result<f64> {
    precondition!((1..=cfg.c).contains(&j), "label {j} outside 1..={}", cfg.c);
    precondition!(x.len() == theta.p(), "x has length {}, beta has {}", x.len(), theta.p());
    Ok(cell_prob_unchecked(&cfg.link, theta, x, j))
}

#[inline]
pub(crate) fn cell_prob_unchecked(link: &LinkSpec, theta: &Theta, x: &[f64], j: usize) -> f64 {
    let eta = theta.linear(x);
    link.mass(theta.cut(j - 1) + eta, theta.cut(j) + eta)
}

/// Derivative of the cell probability with respect to the flattened θ.
fn cell_gradient(link: &LinkSpec, theta: &Theta, x: &[f64], j: usize, out: &mut [f64]) {
    let c = theta.c();
    let eta = theta.linear(x);
    out.iter_mut().for_each(|v| *v = 0.0);
    let f_hi = link.pdf(theta.cut(j) + eta);
    let f_lo = link.pdf(theta.cut(j - 1) + eta);
    // ∂p/∂α^i = f(α^i+η)(1{j=i} − 1{j=i+1}) for interior cut-points i.
    if (2..c).contains(&j) {
        out[j - 2] += f_hi;
    }
    if (3..=c).contains(&j) {
        out[j - 3] -= f_lo;
    }
    let k = c - 2;
    for (m, &xm) in x.iter().enumerate() {
        out[k + m] = xm * (f_hi - f_lo);
    }
}

/// `η(xy|θ) = ∂_θ p / (2√p)`, the derivative of `√p(y|x,θ)`.
pub fn score_eta(cfg: &ModelConfig, theta: &Theta, x: &[f64], j: usize) -> Result<Vec<f64>> {
    let p = cell_probability(cfg, theta, x, j)?;
    if !(p > 0.0) {
        return Err(Error::Degenerate(format!("cell probability of label {j} vanishes")));
    }
    let mut g = vec![0.0; theta.dim()];
    cell_gradient(&cfg.link, theta, x, j, &mut g);
    let s = 2.0 * p.sqrt();
    Ok(g.into_iter().map(|v| v / s).collect())
}

/// `Z_n = n^{-1/2} Σ 2η/√p`, i.e. the scaled log-likelihood gradient.
pub fn normalized_score(cfg: &ModelConfig, theta: &Theta, data: &Dataset) -> Result<Vec<f64>> {
    cfg.check_data(data)?;
    precondition!(data.n >= 1, "normalized score needs at least one observation");
    let d = theta.dim();
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(data.n); d];
    let mut g = vec![0.0; d];
    for i in 0..data.n {
        let x = data.row(i);
        let y = data.y[i];
        let p = cell_prob_unchecked(&cfg.link, theta, x, y);
        if !(p > 0.0) {
            return Err(Error::Degenerate(format!("cell probability of observation {i} vanishes")));
        }
        cell_gradient(&cfg.link, theta, x, y, &mut g);
        for k in 0..d {
            cols[k].push(g[k] / p);
        }
    }
    let scale = 1.0 / (data.n as f64).sqrt();
    Ok(cols.iter().map(|c| pairwise_sum(c) * scale).collect())
}

/// Log-likelihood `Σ log p(y_i|x_i,θ)`.
pub fn log_likelihood(cfg: &ModelConfig, theta: &Theta, data: &Dataset) -> f64 {
    let terms: Vec<f64> = (0..data.n).map(|i| cell_prob_unchecked(&cfg.link, theta, data.row(i), data.y[i]).ln()).collect();
    pairwise_sum(&terms)
}

/// Log-likelihood and its gradient with respect to the flattened θ.
pub fn log_likelihood_grad(cfg: &ModelConfig, theta: &Theta, data: &Dataset) -> (f64, Vec<f64>) {
    let d = theta.dim();
    let mut ll = 0.0;
    let mut grad = vec![0.0; d];
    let mut g = vec![0.0; d];
    for i in 0..data.n {
        let x = data.row(i);
        let y = data.y[i];
        let p = cell_prob_unchecked(&cfg.link, theta, x, y);
        ll += p.ln();
        cell_gradient(&cfg.link, theta, x, y, &mut g);
        for k in 0..d {
            grad[k] += g[k] / p;
        }
    }
    (ll, grad)
}

/// Unnormalized log posterior; `-∞` outside the ordered cone.
pub fn log_posterior(cfg: &ModelConfig, theta: &Theta, data: &Dataset) -> f64 {
    if !theta.in_cone() {
        return f64::NEG_INFINITY;
    }
    log_likelihood(cfg, theta, data) + cfg.prior.log_density(theta)
}

/// How a Fisher information matrix was computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FisherMethod {
    Quadrature { abs_tol: f64, rel_tol: f64, max_abs_error: f64 },
    MonteCarlo { samples: usize, seed: u64, max_se: f64 },
}

#[derive(Clone, Debug)]
pub struct FisherInfo {
    pub matrix: DMatrix<f64>,
    pub method: FisherMethod,
}

/// Monte Carlo sample size used for `p >= 2`.
pub const FISHER_MC_SAMPLES: usize = 100_000;

/// Per-observation information `Σ_y ∂p ∂p' / p` at covariate `x`.
fn info_at(link: &LinkSpec, theta: &Theta, x: &[f64], out: &mut DMatrix<f64>) {
    let d = theta.dim();
    let mut g = vec![0.0; d];
    out.fill(0.0);
    for j in 1..=theta.c() {
        let p = cell_prob_unchecked(link, theta, x, j);
        if !(p > 0.0) {
            continue;
        }
        cell_gradient(link, theta, x, j, &mut g);
        for a in 0..d {
            for b in 0..d {
                out[(a, b)] += g[a] * g[b] / p;
            }
        }
    }
}

/// `I(θ) = 4 ∫ ηη' dν`, by adaptive quadrature over x when `p = 1` and by
/// Monte Carlo over the covariate law otherwise.
pub fn fisher_information(cfg: &ModelConfig, theta: &Theta) -> Result<FisherInfo> {
    fisher_information_with(cfg, theta, FISHER_MC_SAMPLES, 0)
}

pub fn fisher_information_with(cfg: &ModelConfig, theta: &Theta, samples: usize, seed: u64) -> Result<FisherInfo> {
    cfg.check_theta(theta)?;
    let d = theta.dim();
    let mut m = DMatrix::zeros(d, d);
    let method = if cfg.p() == 1 {
        let (abs_tol, rel_tol) = (1e-12, 1e-10);
        let mut max_err = 0.0f64;
        let mut buf = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in a..d {
                let q = integrate(
                    |x| {
                        info_at(&cfg.link, theta, &[x], &mut buf);
                        buf[(a, b)]
                    },
                    0.0,
                    1.0,
                    abs_tol,
                    rel_tol,
                )?;
                max_err = max_err.max(q.abs_error);
                m[(a, b)] = q.value;
                m[(b, a)] = q.value;
            }
        }
        FisherMethod::Quadrature { abs_tol, rel_tol, max_abs_error: max_err }
    } else {
        precondition!(samples >= 2, "Monte Carlo Fisher information needs at least two samples");
        let mut rng = RngStream::new(seed, FISHER_STREAM);
        let mut x = vec![0.0; cfg.p()];
        let mut buf = DMatrix::zeros(d, d);
        let mut sq = DMatrix::zeros(d, d);
        for _ in 0..samples {
            cfg.covariates.draw(&mut rng, &mut x);
            info_at(&cfg.link, theta, &x, &mut buf);
            m += &buf;
            sq += buf.component_mul(&buf);
        }
        let s = samples as f64;
        m /= s;
        let var = sq / s - m.component_mul(&m);
        let max_se = var.iter().map(|v| (v.max(0.0) / s).sqrt()).fold(0.0, f64::max);
        FisherMethod::MonteCarlo { samples, seed, max_se }
    };
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) {
        return Err(Error::Numerical(format!("Fisher information not positive definite (min eigenvalue {min:e})")));
    }
    Ok(FisherInfo { matrix: m, method })
}

/// Scale constants `K = ∫(1 + z f'/f)² f dz` and `L = ∫ f'/f (z f'/f + 1) f dz`.
pub fn scale_constants(link: &LinkSpec) -> Result<(f64, f64)> {
    use crate::quadrature::integrate_real_line;
    let k = integrate_real_line(
        |z| {
            let u = 1.0 + z * link.dlogf(z);
            u * u * link.pdf(z)
        },
        1e-13,
        1e-12,
    )?;
    let l = integrate_real_line(
        |z| {
            let s = link.dlogf(z);
            s * (z * s + 1.0) * link.pdf(z)
        },
        1e-13,
        1e-12,
    )?;
    Ok((k.value, l.value))
}

/// Location Fisher information `∫ (f'/f)² f dz` of the link density.
pub fn location_information(link: &LinkSpec) -> Result<f64> {
    use crate::quadrature::integrate_real_line;
    let q = integrate_real_line(
        |z| {
            let s = link.dlogf(z);
            s * s * link.pdf(z)
        },
        1e-13,
        1e-12,
    )?;
    Ok(q.value)
}

/// Default data-generating parameter: β = 2 for c = 2, α² = 1 and β = −1 for
/// c = 3, cut-points 1, 2, … and β = −1.5 for larger c. With p > 1 covariates
/// the slope is split evenly so the linear predictor keeps the same range.
pub fn default_theta0(c: usize, p: usize) -> Result<Theta> {
    precondition!(c >= 2 && p >= 1, "need c >= 2 and p >= 1, got c={c}, p={p}");
    let slope = match c {
        2 => 2.0,
        3 => -1.0,
        _ => -1.5,
    };
    let alpha = (1..=c - 2).map(|j| j as f64).collect();
    Theta::new(alpha, vec![slope / p as f64; p])
}

/// Collapses labels at interior cut `i` into the binary labels `1 + 1(y > i)`.
pub fn project_binary(data: &Dataset, i: usize) -> Result<Dataset> {
    precondition!(data.c >= 3, "binary projection needs an interior cut-point (c >= 3), got c={}", data.c);
    precondition!((2..data.c).contains(&i), "cut index {i} outside 2..={}", data.c - 1);
    let y = data.y.iter().map(|&v| 1 + usize::from(v > i)).collect();
    Dataset::new(data.x.clone(), y, 2, data.p, None, data.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg3() -> ModelConfig {
        ModelConfig::new(3, 1, PriorSpec::default()).unwrap()
    }

    #[test]
    fn theta_ordering() {
        assert!(Theta::new(vec![1.0, 2.0], vec![0.0]).is_ok());
        assert!(Theta::new(vec![2.0, 1.0], vec![0.0]).is_err());
        assert!(Theta::new(vec![-0.1], vec![0.0]).is_err());
        let t = Theta::new(vec![1.0, 2.0], vec![3.0]).unwrap();
        assert_eq!(t.cut(0), f64::NEG_INFINITY);
        assert_eq!(t.cut(1), 0.0);
        assert_eq!(t.cut(3), 2.0);
        assert_eq!(t.cut(4), f64::INFINITY);
    }

    #[test]
    fn symmetric_binary_cell() {
        let cfg = ModelConfig::binary();
        let t = Theta::new(vec![], vec![0.0]).unwrap();
        assert_eq!(cell_probability(&cfg, &t, &[0.37], 1).unwrap(), 0.5);
    }

    #[test]
    fn middle_cell_value() {
        let t = Theta::new(vec![1.0], vec![0.0]).unwrap();
        let p2 = cell_probability(&cfg3(), &t, &[0.5], 2).unwrap();
        // Φ(1) − Φ(0) from a high-precision evaluation.
        assert!((p2 - 0.341_344_746_068_542_9).abs() < 1e-14);
        let p3 = cell_probability(&cfg3(), &t, &[0.5], 3).unwrap();
        assert!((p3 - 0.158_655_253_931_457_05).abs() < 1e-14);
        assert!(cell_probability(&cfg3(), &t, &[0.5], 4).is_err());
    }

    #[test]
    fn invalid_theta_rejected() {
        let bad = Theta { alpha: vec![2.0, 1.0], beta: vec![0.0] };
        let cfg = ModelConfig::new(4, 1, PriorSpec::default()).unwrap();
        assert!(matches!(sample_dataset(&cfg, &bad, 10, 1), Err(Error::Precondition(_))));
    }

    #[test]
    fn binary_score_value() {
        let cfg = ModelConfig::binary();
        let t = Theta::new(vec![], vec![0.0]).unwrap();
        let e = score_eta(&cfg, &t, &[0.5], 1).unwrap();
        let expect = 0.5 * norm_pdf(0.0) / (2.0 * 0.5f64.sqrt());
        assert!((e[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn score_indicator_structure() {
        let cfg = ModelConfig::new(4, 1, PriorSpec::default()).unwrap();
        let t = Theta::new(vec![0.7, 1.9], vec![-0.4]).unwrap();
        let x = [0.3];
        let e = score_eta(&cfg, &t, &x, 2).unwrap();
        let p = cell_probability(&cfg, &t, &x, 2).unwrap();
        let eta = t.linear(&x);
        assert!((e[0] - norm_pdf(0.7 + eta) / (2.0 * p.sqrt())).abs() < 1e-15);
        assert_eq!(e[1], 0.0);
        let e3 = score_eta(&cfg, &t, &x, 3).unwrap();
        assert!(e3[0] < 0.0 && e3[1] > 0.0);
    }

    #[test]
    fn single_observation_normalized_score() {
        let cfg = cfg3();
        let t = Theta::new(vec![1.2], vec![0.5]).unwrap();
        let d = Dataset::new(vec![0.4], vec![2], 3, 1, None, 0).unwrap();
        let z = normalized_score(&cfg, &t, &d).unwrap();
        let e = score_eta(&cfg, &t, &[0.4], 2).unwrap();
        let p = cell_probability(&cfg, &t, &[0.4], 2).unwrap();
        for k in 0..2 {
            assert!((z[k] - 2.0 * e[k] / p.sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn fisher_binary_at_zero() {
        let cfg = ModelConfig::binary();
        let t = Theta::new(vec![], vec![0.0]).unwrap();
        let i = fisher_information(&cfg, &t).unwrap();
        // ∫₀¹ x² φ(0)² / (1/4) dx.
        let expect = 4.0 * norm_pdf(0.0).powi(2) / 3.0;
        assert!((i.matrix[(0, 0)] - expect).abs() < 1e-10);
    }

    #[test]
    fn fisher_symmetric_pd_on_grid() {
        let cfg = ModelConfig::new(4, 1, PriorSpec::default()).unwrap();
        for a2 in [0.3, 1.0, 2.0] {
            for gap in [0.2, 1.5] {
                for b in [-3.0, 0.0, 2.5] {
                    let t = Theta::new(vec![a2, a2 + gap], vec![b]).unwrap();
                    let i = fisher_information(&cfg, &t).unwrap().matrix;
                    assert!((&i - i.transpose()).amax() < 1e-12);
                    assert!(i.clone().symmetric_eigen().eigenvalues.min() > 0.0);
                }
            }
        }
    }

    #[test]
    fn fisher_monte_carlo_for_p2() {
        let cfg = ModelConfig::new(3, 2, PriorSpec::default()).unwrap();
        let t = Theta::new(vec![1.0], vec![0.5, -0.5]).unwrap();
        let i = fisher_information_with(&cfg, &t, 20_000, 3).unwrap();
        assert!(matches!(i.method, FisherMethod::MonteCarlo { samples: 20_000, .. }));
        assert!((&i.matrix - i.matrix.transpose()).amax() < 1e-12);
    }

    #[test]
    fn probit_scale_constants() {
        let (k, l) = scale_constants(&LinkSpec::probit()).unwrap();
        assert!((k - 2.0).abs() < 1e-8, "{k}");
        assert!(l.abs() < 1e-8, "{l}");
        assert!((location_information(&LinkSpec::probit()).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn projection_labels() {
        let d = Dataset::new(vec![0.1, 0.2, 0.3], vec![1, 2, 3], 3, 1, None, 0).unwrap();
        let b = project_binary(&d, 2).unwrap();
        assert_eq!(b.y, vec![1, 1, 2]);
        assert_eq!(b.x, d.x);
        let d2 = Dataset::new(vec![0.1], vec![1], 2, 1, None, 0).unwrap();
        assert!(project_binary(&d2, 2).is_err());
        assert!(project_binary(&d, 3).is_err());
    }

    #[test]
    fn projection_probability_identity() {
        let cfg = ModelConfig::new(4, 1, PriorSpec::default()).unwrap();
        let t = Theta::new(vec![0.8, 1.7], vec![-0.6]).unwrap();
        for &x in &[0.1, 0.5, 0.9] {
            for i in 2..4 {
                let below: f64 = (1..=i).map(|j| cell_probability(&cfg, &t, &[x], j).unwrap()).sum();
                assert!((below - norm_cdf(t.cut(i) + t.linear(&[x]))).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dataset_reproducible() {
        let cfg = cfg3();
        let t = Theta::new(vec![1.0], vec![-1.0]).unwrap();
        let a = sample_dataset(&cfg, &t, 50, 9).unwrap();
        let b = sample_dataset(&cfg, &t, 50, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.x.iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn loglik_gradient_matches_finite_difference() {
        let cfg = ModelConfig::new(4, 2, PriorSpec::default()).unwrap();
        let t0 = Theta::new(vec![0.8, 1.5], vec![-1.0, 0.7]).unwrap();
        let data = sample_dataset(&cfg, &t0, 200, 4).unwrap();
        let t = Theta::new(vec![0.9, 1.4], vec![-0.8, 0.5]).unwrap();
        let (_, g) = log_likelihood_grad(&cfg, &t, &data);
        let v = t.to_vec();
        for k in 0..v.len() {
            let h = 1e-6;
            let mut up = v.clone();
            up[k] += h;
            let mut dn = v.clone();
            dn[k] -= h;
            let fd = (log_likelihood(&cfg, &Theta::from_slice(4, &up), &data) - log_likelihood(&cfg, &Theta::from_slice(4, &dn), &data))
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-5 * (1.0 + g[k].abs()), "{k}: {fd} vs {}", g[k]);
        }
    }

    fn theta_strategy() -> impl Strategy<Value = (usize, Theta)> {
        (2usize..6, proptest::collection::vec(0.05f64..1.5, 4), proptest::collection::vec(-3.0f64..3.0, 1..3)).prop_map(
            |(c, gaps, beta)| {
                let mut alpha = Vec::new();
                let mut acc = 0.0;
                for g in gaps.iter().take(c - 2) {
                    acc += g;
                    alpha.push(acc);
                }
                (c, Theta::new(alpha, beta).unwrap())
            },
        )
    }

    proptest! {
        #[test]
        fn cells_sum_to_one((c, t) in theta_strategy(), xs in proptest::collection::vec(0.0f64..1.0, 2)) {
            let cfg = ModelConfig::new(c, t.p(), PriorSpec::default()).unwrap();
            let x = &xs[..t.p()];
            let s: f64 = (1..=c).map(|j| cell_probability(&cfg, &t, x, j).unwrap()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn score_matches_sqrt_p_differences((c, t) in theta_strategy(),
                                            xs in proptest::collection::vec(0.0f64..1.0, 2),
                                            ysel in 0usize..100) {
            let cfg = ModelConfig::new(c, t.p(), PriorSpec::default()).unwrap();
            let x = &xs[..t.p()];
            let j = 1 + ysel % c;
            let e = score_eta(&cfg, &t, x, j).unwrap();
            let v = t.to_vec();
            for k in 0..v.len() {
                let h = 1e-6;
                let mut up = v.clone();
                up[k] += h;
                let mut dn = v.clone();
                dn[k] -= h;
                let f = |w: &[f64]| cell_prob_unchecked(&cfg.link, &Theta::from_slice(c, w), x, j).sqrt();
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                prop_assert!((fd - e[k]).abs() < 1e-6, "k={} fd={} eta={}", k, fd, e[k]);
            }
        }
    }
}
