//! The six Gibbs kernels: binary probit with the null or β'x latent
//! parameterization, their cumulative-link generalizations, and the
//! marginal-augmentation versions with working scale g.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::model::{Dataset, ExpandedTheta, ModelConfig, PriorSpec, Theta};
use crate::rng::RngStream;
use crate::sampling::{gamma_draw, truncated_normal, GridSampler, Interval};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantId {
    BinaryNull,
    BinaryBeta,
    Null,
    Beta,
    NullMa,
    BetaMa,
}

impl VariantId {
    pub const ALL: [VariantId; 6] =
        [VariantId::BinaryNull, VariantId::BinaryBeta, VariantId::Null, VariantId::Beta, VariantId::NullMa, VariantId::BetaMa];

    pub fn as_str(&self) -> &'static str {
        match self {
            VariantId::BinaryNull => "binary-null",
            VariantId::BinaryBeta => "binary-beta",
            VariantId::Null => "null",
            VariantId::Beta => "beta",
            VariantId::NullMa => "null-ma",
            VariantId::BetaMa => "beta-ma",
        }
    }

    pub fn is_ma(&self) -> bool {
        matches!(self, VariantId::NullMa | VariantId::BetaMa)
    }

    /// Latent variable centred at zero with the linear predictor in the bounds.
    pub fn is_null_type(&self) -> bool {
        matches!(self, VariantId::BinaryNull | VariantId::Null | VariantId::NullMa)
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, VariantId::BinaryNull | VariantId::BinaryBeta)
    }

    /// Components of ϑ that the kernel moves at rate `n^{-1/2}` (`ϑ_F`) and the
    /// ones it moves by an autoregression (`ϑ_M`).
    pub fn partition(&self) -> (&'static str, &'static str) {
        if self.is_null_type() {
            ("theta", "g")
        } else {
            ("alpha", "beta,g")
        }
    }

    pub fn check_shape(&self, c: usize, p: usize) -> Result<()> {
        if self.is_binary() && (c != 2 || p != 1) {
            return Err(Error::Precondition(format!("{self} requires c=2 and p=1, got c={c}, p={p}")));
        }
        Ok(())
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantId::ALL.iter().find(|v| v.as_str() == s).copied().ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z: Vec<f64>,
}

/// Parameter summaries recorded along a chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    /// Raw θ, including the unidentified scale for augmented chains.
    Theta,
    /// Identified parameter gθ.
    GTheta,
    Alpha,
    /// Identified cut-points gα.
    GAlpha,
    /// Identified regression vector gβ.
    GBeta,
    /// Direction θ/|θ|.
    ThetaNorm,
    /// α³/α², needs c ≥ 4.
    AlphaRatio,
}

impl TransformKind {
    pub const ALL: [TransformKind; 7] = [
        TransformKind::Theta,
        TransformKind::GTheta,
        TransformKind::Alpha,
        TransformKind::GAlpha,
        TransformKind::GBeta,
        TransformKind::ThetaNorm,
        TransformKind::AlphaRatio,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TransformKind::Theta => "theta",
            TransformKind::GTheta => "g-theta",
            TransformKind::Alpha => "alpha",
            TransformKind::GAlpha => "g-alpha",
            TransformKind::GBeta => "g-beta",
            TransformKind::ThetaNorm => "theta-norm",
            TransformKind::AlphaRatio => "alpha-ratio",
        }
    }

    /// Output dimension for a model with `c` categories and `p` covariates.
    pub fn dim(&self, c: usize, p: usize) -> Result<usize> {
        let k = c - 2;
        let d = match self {
            TransformKind::Theta | TransformKind::GTheta | TransformKind::ThetaNorm => k + p,
            TransformKind::Alpha | TransformKind::GAlpha => k,
            TransformKind::GBeta => p,
            TransformKind::AlphaRatio => {
                if c < 4 {
                    return Err(Error::Precondition(format!("alpha-ratio needs c >= 4, got c={c}")));
                }
                1
            }
        };
        if d == 0 {
            return Err(Error::Precondition(format!("transform {} is empty for c={c}", self.as_str())));
        }
        Ok(d)
    }

    pub fn apply(&self, s: &ExpandedTheta) -> Result<Vec<f64>> {
        let t = &s.theta;
        Ok(match self {
            TransformKind::Theta => t.to_vec(),
            TransformKind::GTheta => t.to_vec().into_iter().map(|v| v * s.g).collect(),
            TransformKind::Alpha => {
                precondition!(!t.alpha.is_empty(), "alpha transform needs c >= 3");
                t.alpha.clone()
            }
            TransformKind::GAlpha => {
                precondition!(!t.alpha.is_empty(), "g-alpha transform needs c >= 3");
                t.alpha.iter().map(|v| v * s.g).collect()
            }
            TransformKind::GBeta => t.beta.iter().map(|v| v * s.g).collect(),
            TransformKind::ThetaNorm => {
                let v = t.to_vec();
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm == 0.0 {
                    v
                } else {
                    v.into_iter().map(|a| a / norm).collect()
                }
            }
            TransformKind::AlphaRatio => {
                precondition!(t.alpha.len() >= 2, "alpha-ratio transform needs c >= 4");
                vec![t.alpha[1] / t.alpha[0]]
            }
        })
    }

    /// CSV column names for this transform.
    pub fn columns(&self, c: usize, p: usize) -> Result<Vec<String>> {
        let d = self.dim(c, p)?;
        let base = self.as_str().replace('-', "_");
        Ok(if d == 1 && matches!(self, TransformKind::AlphaRatio) { vec![base] } else { (1..=d).map(|i| format!("{base}{i}")).collect() })
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL.iter().find(|v| v.as_str() == s).copied().ok_or_else(|| Error::Config(format!("unknown transform '{s}'")))
    }
}

/// Starting state of a chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitPolicy {
    Fixed(ExpandedTheta),
    /// A draw of the identified parameter from the posterior. Augmented chains
    /// pair it with g drawn from its prior, which is again a stationary start
    /// because the posterior makes gθ independent of g.
    Posterior(Theta),
    Prior,
}

impl InitPolicy {
    pub fn tag(&self) -> &'static str {
        match self {
            InitPolicy::Fixed(_) => "fixed",
            InitPolicy::Posterior(_) => "reference-posterior",
            InitPolicy::Prior => "prior",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub n: usize,
    pub m: usize,
    pub c: usize,
    pub p: usize,
    pub seed: u64,
    pub stream: u64,
    pub dataset_ref: String,
    pub init: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSeries {
    pub kind: TransformKind,
    pub values: Vec<Vec<f64>>,
}

/// States `s(0), …, s(m−1)` of a chain with requested transform outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub variant: VariantId,
    pub params: Vec<ExpandedTheta>,
    pub transforms: Vec<TransformSeries>,
    pub meta: TraceMeta,
}

impl ChainTrace {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn series(&self, kind: TransformKind) -> Option<&[Vec<f64>]> {
        self.transforms.iter().find(|t| t.kind == kind).map(|t| t.values.as_slice())
    }

    /// Recomputes every transform from `params` and compares.
    pub fn transforms_consistent(&self) -> bool {
        self.transforms.iter().all(|t| {
            t.values.len() == self.params.len()
                && t.values.iter().zip(&self.params).all(|(v, s)| t.kind.apply(s).map(|w| &w == v).unwrap_or(false))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelOptions {
    /// Coordinate scans per step for the null-type θ update.
    pub scans: usize,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self { scans: 1 }
    }
}

/// Per-dataset precomputation shared by every step of a chain.
pub struct Kernel<'a> {
    pub variant: VariantId,
    pub cfg: ModelConfig,
    pub data: &'a Dataset,
    pub opts: KernelOptions,
    /// Cholesky factor of `σ_β⁻² I + X'X` for the β'x-type β update.
    chol: Option<Cholesky<f64, Dyn>>,
    /// `σ_β⁻² + Σx²` in the single-covariate case.
    scalar_prec: f64,
}

impl<'a> Kernel<'a> {
    pub fn new(variant: VariantId, cfg: &ModelConfig, data: &'a Dataset, opts: KernelOptions) -> Result<Self> {
        cfg.validate()?;
        cfg.check_data(data)?;
        variant.check_shape(cfg.c, cfg.p())?;
        precondition!(opts.scans >= 1, "scans must be at least 1");
        if variant == VariantId::BinaryNull {
            precondition!(data.x.iter().all(|&v| v != 0.0), "binary null kernel divides by x and needs x_i != 0");
        }
        let p = cfg.p();
        let inv_var = 1.0 / (cfg.prior.sigma_beta * cfg.prior.sigma_beta);
        let mut scalar_prec = 0.0;
        let mut chol = None;
        if !variant.is_null_type() {
            if p == 1 {
                let mut sxx = 0.0;
                for &x in &data.x {
                    sxx += x * x;
                }
                scalar_prec = inv_var + sxx;
            } else {
                let x = DMatrix::from_row_slice(data.n, p, &data.x);
                let a = x.transpose() * &x + DMatrix::identity(p, p) * inv_var;
                chol = Some(Cholesky::new(a).ok_or_else(|| Error::Numerical("X'X + prior precision not positive definite".into()))?);
            }
        }
        Ok(Self { variant, cfg: *cfg, data, opts, chol, scalar_prec })
    }

    fn prior(&self) -> &PriorSpec {
        &self.cfg.prior
    }

    /// One transition `s → s'`.
    pub fn step<R: Rng + ?Sized>(&self, state: &ExpandedTheta, rng: &mut R) -> Result<ExpandedTheta> {
        let next = match self.variant {
            VariantId::BinaryNull => {
                let b = binary_null_step(state.theta.beta[0], self.data, self.prior(), rng)?;
                ExpandedTheta::unit(Theta { alpha: vec![], beta: vec![b] })
            }
            VariantId::BinaryBeta => {
                let b = binary_beta_step(state.theta.beta[0], self.data, self.prior(), rng)?;
                ExpandedTheta::unit(Theta { alpha: vec![], beta: vec![b] })
            }
            VariantId::Null | VariantId::Beta => {
                let z = self.latent(&state.theta, 1.0, rng)?;
                ExpandedTheta::unit(self.update_theta(&z.z, &state.theta, 1.0, rng)?)
            }
            VariantId::NullMa | VariantId::BetaMa => {
                let z = self.latent(&state.theta, state.g, rng)?;
                let g = self.update_g(&z.z, &state.theta, rng)?;
                ExpandedTheta { theta: self.update_theta(&z.z, &state.theta, g, rng)?, g }
            }
        };
        if !next.theta.in_cone() {
            return Err(Error::Numerical(format!("cut-point ordering violated after {} step: {:?}", self.variant, next.theta.alpha)));
        }
        Ok(next)
    }

    pub fn latent<R: Rng + ?Sized>(&self, theta: &Theta, g: f64, rng: &mut R) -> Result<LatentState> {
        draw_latent_impl(self.variant.is_null_type(), theta, g, self.data, rng)
    }

    pub fn update_theta<R: Rng + ?Sized>(&self, z: &[f64], current: &Theta, g: f64, rng: &mut R) -> Result<Theta> {
        if self.variant.is_null_type() {
            null_scan(z, current, g, self.data, self.prior(), self.opts.scans, rng)
        } else {
            let alpha = beta_type_alpha(z, current, g, self.data, self.prior(), rng)?;
            let beta = self.beta_type_beta(z, g, rng)?;
            Ok(Theta { alpha, beta })
        }
    }

    fn beta_type_beta<R: Rng + ?Sized>(&self, z: &[f64], g: f64, rng: &mut R) -> Result<Vec<f64>> {
        let data = self.data;
        if data.p == 1 {
            let mut sxz = 0.0;
            for i in 0..data.n {
                sxz += data.x[i] * z[i];
            }
            let mean = -sxz / self.scalar_prec;
            let sd = (1.0 / self.scalar_prec).sqrt() / g;
            let e: f64 = rng.sample(StandardNormal);
            return Ok(vec![mean + sd * e]);
        }
        let chol = self.chol.as_ref().expect("Cholesky factor present for beta-type kernels");
        let x = DMatrix::from_row_slice(data.n, data.p, &data.x);
        let xtz = x.transpose() * DVector::from_column_slice(z);
        let mean = -chol.solve(&xtz);
        let e = DVector::from_fn(data.p, |_, _| rng.sample::<f64, _>(StandardNormal));
        // A = LL'; a draw with precision g²A is L'^{-1} e / g.
        let l = chol.l();
        let w = l.transpose().solve_upper_triangular(&e).ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        Ok((mean + w / g).iter().copied().collect())
    }

    pub fn update_g<R: Rng + ?Sized>(&self, z: &[f64], theta: &Theta, rng: &mut R) -> Result<f64> {
        let (shape, rate) = g_conditional(self.variant, z, theta, self.data, self.prior())?;
        Ok(gamma_draw(shape, rate, rng)?.sqrt())
    }

    /// Initial state under `init`.
    pub fn initial<R: Rng + ?Sized>(&self, init: &InitPolicy, rng: &mut R) -> Result<ExpandedTheta> {
        let s = match init {
            InitPolicy::Fixed(s) => s.clone(),
            InitPolicy::Posterior(tau) => {
                if self.variant.is_ma() {
                    let g = draw_prior_g(self.prior(), rng)?;
                    ExpandedTheta { theta: tau.scaled(1.0 / g), g }
                } else {
                    ExpandedTheta::unit(tau.clone())
                }
            }
            InitPolicy::Prior => {
                let tau = draw_prior_theta(&self.cfg, rng);
                if self.variant.is_ma() {
                    let g = draw_prior_g(self.prior(), rng)?;
                    ExpandedTheta { theta: tau.scaled(1.0 / g), g }
                } else {
                    ExpandedTheta::unit(tau)
                }
            }
        };
        self.cfg.check_theta(&s.theta)?;
        precondition!(s.g > 0.0, "initial g must be positive");
        if !self.variant.is_ma() {
            precondition!(s.g == 1.0, "{} keeps g = 1", self.variant);
        }
        Ok(s)
    }
}

/// Draws `g` from its prior: `g² ~ Gamma(a0, b0)`.
pub fn draw_prior_g<R: Rng + ?Sized>(prior: &PriorSpec, rng: &mut R) -> Result<f64> {
    Ok(gamma_draw(prior.a0, prior.b0, rng)?.sqrt())
}

/// Draws θ from the normal prior restricted to the ordered cone.
pub fn draw_prior_theta<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Theta {
    // Sorted half-normal draws are uniform over orderings, so this is exact.
    let mut alpha: Vec<f64> = (0..cfg.c - 2)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            (e * cfg.prior.sigma_alpha).abs()
        })
        .collect();
    alpha.sort_by(|a, b| a.total_cmp(b));
    let beta = (0..cfg.p())
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            e * cfg.prior.sigma_beta
        })
        .collect();
    Theta { alpha, beta }
}

/// Draws from `N(mean, sd²)` on `[lo, hi)`, tolerating a collapsed interval
/// produced by rounding.
fn draw_bounded<R: Rng + ?Sized>(mean: f64, sd: f64, lo: f64, hi: f64, rng: &mut R) -> Result<f64> {
    if lo < hi {
        return truncated_normal(mean, sd, Interval::closed_open(lo, hi)?, rng);
    }
    let scale = lo.abs().max(hi.abs()).max(1.0);
    if lo - hi <= 1e-12 * scale {
        return Ok(lo);
    }
    Err(Error::Degenerate(format!("empty conditional interval [{lo}, {hi}); latent state inconsistent with parameters")))
}

/// Latent draw. Null-type: `z ~ N(0, g⁻²)` on `(α^{y−1}+η, α^y+η]`;
/// β'x-type: `z ~ N(−η, g⁻²)` on `(α^{y−1}, α^y]`.
pub fn draw_latent<R: Rng + ?Sized>(variant: VariantId, state: &ExpandedTheta, data: &Dataset, rng: &mut R) -> Result<LatentState> {
    if !variant.is_ma() {
        precondition!(state.g == 1.0, "{variant} keeps g = 1");
    }
    draw_latent_impl(variant.is_null_type(), &state.theta, state.g, data, rng)
}

fn draw_latent_impl<R: Rng + ?Sized>(null_type: bool, theta: &Theta, g: f64, data: &Dataset, rng: &mut R) -> Result<LatentState> {
    precondition!(theta.c() == data.c && theta.p() == data.p, "theta shape does not match data");
    let sd = 1.0 / g;
    let mut z = Vec::with_capacity(data.n);
    for i in 0..data.n {
        let eta = theta.linear(data.row(i));
        let y = data.y[i];
        let (mean, lo, hi) =
            if null_type { (0.0, theta.cut(y - 1) + eta, theta.cut(y) + eta) } else { (-eta, theta.cut(y - 1), theta.cut(y)) };
        let iv = Interval::open_closed(lo, hi)?;
        let v = match truncated_normal(mean, sd, iv, rng) {
            Err(Error::Degenerate(_)) => {
                // Fall back to a log-space grid sampler before giving up.
                let grid = GridSampler::new(|t| -0.5 * ((t - mean) / sd).powi(2), iv, 4096)?;
                grid.sample(rng).value
            }
            other => other?,
        };
        debug_assert!(iv.contains(v));
        z.push(v);
    }
    Ok(LatentState { z })
}

/// Exact coordinate scan for the null-type θ update given z and g.
fn null_scan<R: Rng + ?Sized>(
    z: &[f64],
    current: &Theta,
    g: f64,
    data: &Dataset,
    prior: &PriorSpec,
    scans: usize,
    rng: &mut R,
) -> Result<Theta> {
    let c = data.c;
    let p = data.p;
    let mut t = current.clone();
    let mut eta: Vec<f64> = (0..data.n).map(|i| t.linear(data.row(i))).collect();
    let sd_a = prior.sigma_alpha / g;
    let sd_b = prior.sigma_beta / g;
    for _ in 0..scans {
        for j in 2..c {
            // y = j needs α^j ≥ z − η; y = j+1 needs α^j < z − η.
            let mut lo = t.cut(j - 1);
            let mut hi = t.cut(j + 1);
            for i in 0..data.n {
                let r = z[i] - eta[i];
                if data.y[i] == j {
                    lo = lo.max(r);
                } else if data.y[i] == j + 1 {
                    hi = hi.min(r);
                }
            }
            t.alpha[j - 2] = draw_bounded(0.0, sd_a, lo, hi, rng)?;
        }
        for k in 0..p {
            let bk = t.beta[k];
            let mut lo = f64::NEG_INFINITY;
            let mut hi = f64::INFINITY;
            for i in 0..data.n {
                let x = data.x[i * p + k];
                let r = eta[i] - bk * x;
                let y = data.y[i];
                // α^{y−1} + r < z − β_k x ≤ α^y + r
                let a = z[i] - t.cut(y) - r;
                let b = z[i] - t.cut(y - 1) - r;
                if x > 0.0 {
                    lo = lo.max(a / x);
                    hi = hi.min(b / x);
                } else if x < 0.0 {
                    lo = lo.max(b / x);
                    hi = hi.min(a / x);
                }
            }
            let nb = draw_bounded(0.0, sd_b, lo, hi, rng)?;
            for i in 0..data.n {
                eta[i] += (nb - bk) * data.x[i * p + k];
            }
            t.beta[k] = nb;
            if p > 1 {
                // Refresh to avoid drift from incremental updates.
                for i in 0..data.n {
                    eta[i] = t.linear(data.row(i));
                }
            }
        }
    }
    Ok(t)
}

/// Cut-point block of the β'x-type update: `α^j ∈ [max_{y=j} z, min_{y=j+1} z)`
/// intersected with the neighbouring cut-points.
fn beta_type_alpha<R: Rng + ?Sized>(
    z: &[f64],
    current: &Theta,
    g: f64,
    data: &Dataset,
    prior: &PriorSpec,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let c = data.c;
    if c == 2 {
        return Ok(vec![]);
    }
    let mut lo_z = vec![f64::NEG_INFINITY; c + 1];
    let mut hi_z = vec![f64::INFINITY; c + 1];
    for i in 0..data.n {
        let y = data.y[i];
        lo_z[y] = lo_z[y].max(z[i]);
        hi_z[y] = hi_z[y].min(z[i]);
    }
    let mut t = current.clone();
    let sd = prior.sigma_alpha / g;
    for j in 2..c {
        let lo = lo_z[j].max(t.cut(j - 1));
        let hi = hi_z[j + 1].min(t.cut(j + 1));
        t.alpha[j - 2] = draw_bounded(0.0, sd, lo, hi, rng)?;
    }
    Ok(t.alpha)
}

/// Shape and rate of the full conditional of g².
pub fn g_conditional(variant: VariantId, z: &[f64], theta: &Theta, data: &Dataset, prior: &PriorSpec) -> Result<(f64, f64)> {
    precondition!(variant.is_ma(), "{variant} has no working scale");
    precondition!(z.len() == data.n, "latent vector length {} != n = {}", z.len(), data.n);
    let d = (data.c - 2 + data.p) as f64;
    let mut s = 0.0;
    for i in 0..data.n {
        let r = if variant.is_null_type() { z[i] } else { z[i] + theta.linear(data.row(i)) };
        s += r * r;
    }
    let sa: f64 = theta.alpha.iter().map(|a| a * a).sum();
    let sb: f64 = theta.beta.iter().map(|b| b * b).sum();
    let shape = prior.a0 + 0.5 * (data.n as f64 + d);
    let rate = prior.b0 + 0.5 * s + sa / (2.0 * prior.sigma_alpha * prior.sigma_alpha) + sb / (2.0 * prior.sigma_beta * prior.sigma_beta);
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::Numerical(format!("g² conditional has invalid rate {rate}")));
    }
    Ok((shape, rate))
}

/// Binary probit step with the null latent parameterization: latent
/// `z ~ N(0,1)` cut at `θx`, then θ from its prior restricted to
/// `[max_{y=1} z/x, min_{y=2} z/x)`.
pub fn step_binary_null<R: Rng + ?Sized>(theta: f64, data: &Dataset, prior: &PriorSpec, rng: &mut R) -> Result<f64> {
    precondition!(data.c == 2 && data.p == 1, "binary kernel needs c=2, p=1");
    precondition!(data.x.iter().all(|&v| v != 0.0), "binary null kernel divides by x and needs x_i != 0");
    binary_null_step(theta, data, prior, rng)
}

fn binary_null_step<R: Rng + ?Sized>(theta: f64, data: &Dataset, prior: &PriorSpec, rng: &mut R) -> Result<f64> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut z = Vec::with_capacity(data.n);
    for i in 0..data.n {
        let cut = theta * data.x[i];
        let iv = if data.y[i] == 1 { Interval::open_closed(f64::NEG_INFINITY, cut)? } else { Interval::open_closed(cut, f64::INFINITY)? };
        z.push(truncated_normal(0.0, 1.0, iv, rng)?);
    }
    for i in 0..data.n {
        let x = data.x[i];
        let r = z[i] / x;
        let (lo_side, hi_side) = if x > 0.0 { (data.y[i] == 1, data.y[i] == 2) } else { (data.y[i] == 2, data.y[i] == 1) };
        if lo_side {
            lo = lo.max(r);
        }
        if hi_side {
            hi = hi.min(r);
        }
    }
    draw_bounded(0.0, prior.sigma_beta, lo, hi, rng)
}

/// Binary probit step with the β'x latent parameterization: latent
/// `z ~ N(−θx, 1)` cut at 0, then θ from `N(μ, σ²)`,
/// `μ = −Σxz/(σ_β⁻² + Σx²)`, `σ² = 1/(σ_β⁻² + Σx²)`.
pub fn step_binary_beta<R: Rng + ?Sized>(theta: f64, data: &Dataset, prior: &PriorSpec, rng: &mut R) -> Result<f64> {
    precondition!(data.c == 2 && data.p == 1, "binary kernel needs c=2, p=1");
    binary_beta_step(theta, data, prior, rng)
}

fn binary_beta_step<R: Rng + ?Sized>(theta: f64, data: &Dataset, prior: &PriorSpec, rng: &mut R) -> Result<f64> {
    let mut z = Vec::with_capacity(data.n);
    for i in 0..data.n {
        let iv = if data.y[i] == 1 { Interval::open_closed(f64::NEG_INFINITY, 0.0)? } else { Interval::open_closed(0.0, f64::INFINITY)? };
        z.push(truncated_normal(-theta * data.x[i], 1.0, iv, rng)?);
    }
    let (mean, var) = binary_beta_moments(&z, data, prior);
    let e: f64 = rng.sample(StandardNormal);
    Ok(mean + var.sqrt() * e)
}

/// Conditional mean and variance of θ given z in the binary β'x kernel.
pub fn binary_beta_moments(z: &[f64], data: &Dataset, prior: &PriorSpec) -> (f64, f64) {
    let mut sxx = 0.0;
    let mut sxz = 0.0;
    for i in 0..data.n {
        sxx += data.x[i] * data.x[i];
        sxz += data.x[i] * z[i];
    }
    let prec = 1.0 / (prior.sigma_beta * prior.sigma_beta) + sxx;
    (-sxz / prec, 1.0 / prec)
}

/// Null-type θ update as a free function.
pub fn update_theta_null<R: Rng + ?Sized>(
    z: &[f64],
    current: &Theta,
    data: &Dataset,
    prior: &PriorSpec,
    g: f64,
    scans: usize,
    rng: &mut R,
) -> Result<Theta> {
    precondition!(z.len() == data.n, "latent vector length {} != n = {}", z.len(), data.n);
    precondition!(scans >= 1, "scans must be at least 1");
    null_scan(z, current, g, data, prior, scans, rng)
}

/// β'x-type θ update as a free function.
pub fn update_theta_beta<R: Rng + ?Sized>(
    z: &[f64],
    current: &Theta,
    data: &Dataset,
    prior: &PriorSpec,
    g: f64,
    rng: &mut R,
) -> Result<Theta> {
    precondition!(z.len() == data.n, "latent vector length {} != n = {}", z.len(), data.n);
    let cfg = ModelConfig { c: data.c, link: Default::default(), covariates: crate::model::CovariateSpec::uniform(data.p), prior: *prior };
    let k = Kernel::new(VariantId::Beta, &cfg, data, KernelOptions::default())?;
    k.update_theta(z, current, g, rng)
}

/// Draws g from its full conditional.
pub fn update_g<R: Rng + ?Sized>(
    z: &[f64],
    theta: &Theta,
    data: &Dataset,
    prior: &PriorSpec,
    variant: VariantId,
    rng: &mut R,
) -> Result<f64> {
    let (shape, rate) = g_conditional(variant, z, theta, data, prior)?;
    Ok(gamma_draw(shape, rate, rng)?.sqrt())
}

/// One kernel transition.
pub fn kernel_step<R: Rng + ?Sized>(
    variant: VariantId,
    state: &ExpandedTheta,
    cfg: &ModelConfig,
    data: &Dataset,
    rng: &mut R,
) -> Result<ExpandedTheta> {
    Kernel::new(variant, cfg, data, KernelOptions::default())?.step(state, rng)
}

/// Runs a chain of `m` states `s(0), …, s(m−1)` from the stream `(seed, stream)`.
#[allow(clippy::too_many_arguments)]
pub fn run_chain(
    variant: VariantId,
    cfg: &ModelConfig,
    data: &Dataset,
    m: usize,
    init: &InitPolicy,
    transforms: &[TransformKind],
    opts: KernelOptions,
    seed: u64,
    stream: u64,
) -> Result<ChainTrace> {
    precondition!(m >= 1, "chain length m must be at least 1");
    let kernel = Kernel::new(variant, cfg, data, opts)?;
    for t in transforms {
        t.dim(cfg.c, cfg.p())?;
    }
    let mut rng = RngStream::new(seed, stream);
    let mut state = kernel.initial(init, &mut rng)?;
    let mut params = Vec::with_capacity(m);
    params.push(state.clone());
    for _ in 1..m {
        state = kernel.step(&state, &mut rng)?;
        params.push(state.clone());
    }
    let transforms = transforms
        .iter()
        .map(|&kind| {
            let values = params.iter().map(|s| kind.apply(s)).collect::<Result<Vec<_>>>()?;
            Ok(TransformSeries { kind, values })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChainTrace {
        variant,
        params,
        transforms,
        meta: TraceMeta {
            n: data.n,
            m,
            c: cfg.c,
            p: cfg.p(),
            seed,
            stream,
            dataset_ref: format!("seed{}_n{}_c{}_p{}", data.seed, data.n, data.c, data.p),
            init: init.tag().to_string(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_dataset;
    use crate::special::truncated_mean;
    use crate::stats::{ks_two_sample, mean_se};

    fn binary_data(n: usize, seed: u64) -> (ModelConfig, Dataset) {
        let cfg = ModelConfig::binary();
        let d = sample_dataset(&cfg, &Theta::new(vec![], vec![2.0]).unwrap(), n, seed).unwrap();
        (cfg, d)
    }

    #[test]
    fn variant_round_trip() {
        for v in VariantId::ALL {
            assert_eq!(v.as_str().parse::<VariantId>().unwrap(), v);
            let js = serde_json::to_string(&v).unwrap();
            assert_eq!(js, format!("\"{}\"", v.as_str()));
        }
        assert!("nope".parse::<VariantId>().is_err());
        assert_eq!(VariantId::Null.partition(), ("theta", "g"));
        assert_eq!(VariantId::BetaMa.partition(), ("alpha", "beta,g"));
    }

    #[test]
    fn empty_data_is_prior_draw() {
        let cfg = ModelConfig::binary();
        let d = Dataset::new(vec![], vec![], 2, 1, None, 0).unwrap();
        let mut r = RngStream::new(1, 0);
        let a: Vec<f64> = (0..20_000).map(|_| step_binary_null(0.3, &d, &cfg.prior, &mut r).unwrap()).collect();
        let b: Vec<f64> = (0..20_000).map(|_| step_binary_beta(0.3, &d, &cfg.prior, &mut r).unwrap()).collect();
        for xs in [a, b] {
            let (m, se) = mean_se(&xs);
            assert!(m.abs() < 4.0 * se);
            let v = crate::stats::variance(&xs);
            assert!((v - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn all_successes_interval_is_one_sided() {
        let cfg = ModelConfig::binary();
        let d = Dataset::new(vec![0.5, 0.25], vec![1, 1], 2, 1, None, 0).unwrap();
        let mut r = RngStream::new(2, 0);
        // Upper side open: draws exceed the largest z/x but are otherwise unbounded.
        for _ in 0..1000 {
            assert!(step_binary_null(1.0, &d, &cfg.prior, &mut r).unwrap().is_finite());
        }
    }

    #[test]
    fn binary_null_needs_nonzero_x() {
        let cfg = ModelConfig::binary();
        let d = Dataset::new(vec![0.0], vec![1], 2, 1, None, 0).unwrap();
        let mut r = RngStream::new(3, 0);
        assert!(matches!(step_binary_null(1.0, &d, &cfg.prior, &mut r), Err(Error::Precondition(_))));
    }

    #[test]
    fn binary_beta_moments_match_least_squares() {
        let (cfg, d) = binary_data(50, 4);
        let mut r = RngStream::new(4, 1);
        let z = draw_latent(VariantId::BinaryBeta, &ExpandedTheta::unit(Theta { alpha: vec![], beta: vec![2.0] }), &d, &mut r).unwrap();
        let (m, v) = binary_beta_moments(&z.z, &d, &cfg.prior);
        // Posterior of θ in z = −θx + ε with a N(0,1) prior, via normal equations
        // on the augmented design [x; 1] and response [z; 0].
        let x = DMatrix::from_fn(d.n + 1, 1, |i, _| if i < d.n { -d.x[i] } else { 1.0 });
        let y = DVector::from_fn(d.n + 1, |i, _| if i < d.n { z.z[i] } else { 0.0 });
        let xtx = (x.transpose() * &x)[(0, 0)];
        let xty = (x.transpose() * &y)[0];
        assert!((m - xty / xtx).abs() < 1e-12);
        assert!((v - 1.0 / xtx).abs() < 1e-15);
    }

    #[test]
    fn generic_kernels_reproduce_binary_draws() {
        let (cfg, d) = binary_data(80, 5);
        let s0 = ExpandedTheta::unit(Theta { alpha: vec![], beta: vec![1.5] });
        for (bin, gen) in [(VariantId::BinaryNull, VariantId::Null), (VariantId::BinaryBeta, VariantId::Beta)] {
            let kb = Kernel::new(bin, &cfg, &d, KernelOptions::default()).unwrap();
            let kg = Kernel::new(gen, &cfg, &d, KernelOptions::default()).unwrap();
            let mut ra = RngStream::new(5, 9);
            let mut rb = RngStream::new(5, 9);
            let (mut a, mut b) = (s0.clone(), s0.clone());
            for _ in 0..50 {
                a = kb.step(&a, &mut ra).unwrap();
                b = kg.step(&b, &mut rb).unwrap();
                assert_eq!(a, b, "{bin} vs {gen}");
            }
        }
    }

    #[test]
    fn dispatch_matches_binary_functions() {
        let (cfg, d) = binary_data(60, 6);
        let s0 = ExpandedTheta::unit(Theta { alpha: vec![], beta: vec![1.5] });
        let mut ra = RngStream::new(6, 0);
        let mut rb = RngStream::new(6, 0);
        let a = kernel_step(VariantId::BinaryNull, &s0, &cfg, &d, &mut ra).unwrap();
        let b = step_binary_null(1.5, &d, &cfg.prior, &mut rb).unwrap();
        assert_eq!(a.theta.beta[0], b);
        let a = kernel_step(VariantId::BinaryBeta, &s0, &cfg, &d, &mut ra).unwrap();
        let b = step_binary_beta(1.5, &d, &cfg.prior, &mut rb).unwrap();
        assert_eq!(a.theta.beta[0], b);
    }

    #[test]
    fn latent_membership_and_mean() {
        let cfg = ModelConfig::new(4, 2, PriorSpec::default()).unwrap();
        let t = Theta::new(vec![0.8, 1.6], vec![-0.5, 0.7]).unwrap();
        let d = sample_dataset(&cfg, &t, 30, 7).unwrap();
        let mut r = RngStream::new(7, 0);
        for v in [VariantId::Null, VariantId::Beta, VariantId::NullMa, VariantId::BetaMa] {
            let g = if v.is_ma() { 1.7 } else { 1.0 };
            let s = ExpandedTheta { theta: t.clone(), g };
            for _ in 0..50 {
                let z = draw_latent(v, &s, &d, &mut r).unwrap();
                for i in 0..d.n {
                    let eta = t.linear(d.row(i));
                    let shift = if v.is_null_type() { eta } else { 0.0 };
                    assert!(z.z[i] > t.cut(d.y[i] - 1) + shift && z.z[i] <= t.cut(d.y[i]) + shift);
                }
            }
        }
        // c=2, β'x latent with y=1 lives on (−∞, 0] with truncated mean.
        let d1 = Dataset::new(vec![0.5], vec![1], 2, 1, None, 0).unwrap();
        let s = ExpandedTheta::unit(Theta { alpha: vec![], beta: vec![1.0] });
        let zs: Vec<f64> = (0..40_000).map(|_| draw_latent(VariantId::Beta, &s, &d1, &mut r).unwrap().z[0]).collect();
        let (m, se) = mean_se(&zs);
        let expect = -0.5 + truncated_mean(f64::NEG_INFINITY, 0.5);
        assert!(zs.iter().all(|&z| z <= 0.0));
        assert!((m - expect).abs() < 3.0 * se, "{m} vs {expect}");
    }

    #[test]
    fn alpha_and_beta_uncorrelated_given_z() {
        let cfg = ModelConfig::new(3, 1, PriorSpec::default()).unwrap();
        let t = Theta::new(vec![1.0], vec![-1.0]).unwrap();
        let d = sample_dataset(&cfg, &t, 200, 8).unwrap();
        let mut r = RngStream::new(8, 0);
        let z = draw_latent(VariantId::Beta, &ExpandedTheta::unit(t.clone()), &d, &mut r).unwrap();
        let k = Kernel::new(VariantId::Beta, &cfg, &d, KernelOptions::default()).unwrap();
        let draws: Vec<Theta> = (0..5000).map(|_| k.update_theta(&z.z, &t, 1.0, &mut r).unwrap()).collect();
        let a: Vec<f64> = draws.iter().map(|t| t.alpha[0]).collect();
        let b: Vec<f64> = draws.iter().map(|t| t.beta[0]).collect();
        let (ma, mb) = (crate::stats::mean(&a), crate::stats::mean(&b));
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / 4999.0;
        let corr = cov / (crate::stats::variance(&a) * crate::stats::variance(&b)).sqrt();
        assert!(corr.abs() < 4.0 / (5000f64).sqrt(), "{corr}");
    }

    #[test]
    fn empty_category_falls_back_to_ordering() {
        let cfg = ModelConfig::new(4, 1, PriorSpec::default()).unwrap();
        // No observation in category 3.
        let d = Dataset::new(vec![0.2, 0.5, 0.9], vec![1, 2, 4], 4, 1, None, 0).unwrap();
        let s = ExpandedTheta::unit(Theta::new(vec![1.0, 2.0], vec![0.5]).unwrap());
        let mut r = RngStream::new(9, 0);
        for v in [VariantId::Null, VariantId::Beta, VariantId::NullMa, VariantId::BetaMa] {
            let k = Kernel::new(v, &cfg, &d, KernelOptions::default()).unwrap();
            let mut st = s.clone();
            for _ in 0..200 {
                st = k.step(&st, &mut r).unwrap();
                assert!(st.theta.in_cone());
            }
        }
    }

    #[test]
    fn g_conditional_prior_case() {
        let d = Dataset::new(vec![], vec![], 3, 2, None, 0).unwrap();
        let t = Theta { alpha: vec![0.0], beta: vec![0.0, 0.0] };
        let prior = PriorSpec::default();
        let (shape, rate) = g_conditional(VariantId::NullMa, &[], &t, &d, &prior).unwrap();
        assert_eq!(shape, prior.a0 + 1.5);
        assert_eq!(rate, prior.b0);
        assert!(g_conditional(VariantId::Null, &[], &t, &d, &prior).is_err());
    }

    #[test]
    fn chain_reproducible_and_consistent() {
        let cfg = ModelConfig::new(4, 1, PriorSpec::default()).unwrap();
        let t = Theta::new(vec![1.0, 2.0], vec![-1.5]).unwrap();
        let d = sample_dataset(&cfg, &t, 100, 10).unwrap();
        let tr = [TransformKind::GTheta, TransformKind::AlphaRatio, TransformKind::ThetaNorm];
        let init = InitPolicy::Posterior(t.clone());
        let a = run_chain(VariantId::BetaMa, &cfg, &d, 30, &init, &tr, KernelOptions::default(), 11, 3).unwrap();
        let b = run_chain(VariantId::BetaMa, &cfg, &d, 30, &init, &tr, KernelOptions::default(), 11, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        assert!(a.transforms_consistent());
        let ratio = a.series(TransformKind::AlphaRatio).unwrap();
        for (v, s) in ratio.iter().zip(&a.params) {
            assert_eq!(v[0], s.theta.alpha[1] / s.theta.alpha[0]);
        }
        let one = run_chain(
            VariantId::Beta,
            &cfg,
            &d,
            1,
            &InitPolicy::Fixed(ExpandedTheta::unit(t.clone())),
            &[],
            KernelOptions::default(),
            1,
            1,
        )
        .unwrap();
        assert_eq!(one.params, vec![ExpandedTheta::unit(t)]);
    }

    #[test]
    fn alpha_ratio_requires_four_categories() {
        let cfg = ModelConfig::new(3, 1, PriorSpec::default()).unwrap();
        let t = Theta::new(vec![1.0], vec![-1.0]).unwrap();
        let d = sample_dataset(&cfg, &t, 10, 1).unwrap();
        let r = run_chain(VariantId::Beta, &cfg, &d, 2, &InitPolicy::Prior, &[TransformKind::AlphaRatio], KernelOptions::default(), 1, 1);
        assert!(r.is_err());
    }

    #[test]
    fn prior_identification_of_g_theta() {
        // Draw g ~ Λ_g, then θ | g with density λ(gθ)g^d, and compare gθ with Λ.
        let cfg = ModelConfig::new(3, 1, PriorSpec::default()).unwrap();
        let mut r = RngStream::new(12, 0);
        let (mut ga, mut gb, mut pa, mut pb) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..10_000 {
            let g = draw_prior_g(&cfg.prior, &mut r).unwrap();
            let a: f64 = rng_normal(&mut r) * cfg.prior.sigma_alpha / g;
            let b: f64 = rng_normal(&mut r) * cfg.prior.sigma_beta / g;
            ga.push(g * a.abs());
            gb.push(g * b);
            let q = draw_prior_theta(&cfg, &mut r);
            pa.push(q.alpha[0]);
            pb.push(q.beta[0]);
        }
        assert!(ks_two_sample(&ga, &pa).p_value > 1e-3);
        assert!(ks_two_sample(&gb, &pb).p_value > 1e-3);
    }

    fn rng_normal(r: &mut RngStream) -> f64 {
        r.sample(StandardNormal)
    }
}
