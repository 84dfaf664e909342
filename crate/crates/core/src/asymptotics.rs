//! Reference posterior, Fisher information blocks of the augmented model, the
//! normal approximation of one kernel transition, and the two-observation test.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::kernels::{run_chain, InitPolicy, Kernel, KernelOptions, VariantId};
use crate::metrics::central_value_columns;
use crate::model::{
    fisher_information, location_information, log_likelihood_grad, scale_constants, Dataset, ExpandedTheta, ModelConfig, Theta,
};
use crate::quadrature::integrate;
use crate::rng::RngStream;
use crate::special::norm_cdf;
use crate::stats::{ks_one_sample, ks_two_sample};

const MH_STREAM: u64 = 0x4D48;
const ORACLE_STREAM: u64 = 0x0AC1;

/// Sampler used to build the reference posterior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceMethod {
    /// Independence Metropolis–Hastings with a multivariate-t proposal fitted
    /// at the posterior mode, in log-gap coordinates for the cut-points.
    #[default]
    IndependenceMh,
    /// Long run of the β'x-type Gibbs kernel.
    BetaGibbs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOptions {
    pub length: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub method: ReferenceMethod,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self { length: 200_000, burn_in: 10_000, thin: 10, seed: 0, method: ReferenceMethod::IndependenceMh }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: ReferenceMethod,
    pub length: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub acceptance_rate: f64,
    /// Smallest split-half two-sample KS p-value over coordinates.
    pub split_half_p: f64,
    pub doubled: bool,
    pub warnings: Vec<String>,
    pub mode: Vec<f64>,
}

/// Long-run sample of the identified parameter with its centre and normal surrogate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePosterior {
    pub n: usize,
    pub c: usize,
    pub p: usize,
    /// Seed of the dataset the posterior conditions on.
    pub data_seed: u64,
    /// Draws of the flattened identified θ.
    pub sample: Vec<Vec<f64>>,
    pub theta_hat: Vec<f64>,
    /// Per-observation Fisher information at `theta_hat`.
    pub fisher: Vec<Vec<f64>>,
    pub bvm_mean: Vec<f64>,
    pub bvm_cov: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map_or(0, |v| v.len());
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

impl ReferencePosterior {
    pub fn dim(&self) -> usize {
        self.c - 2 + self.p
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.sample.iter().map(|v| v[k]).collect()
    }

    pub fn theta_hat(&self) -> Theta {
        Theta::from_slice(self.c, &self.theta_hat)
    }

    pub fn bvm_cov_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.bvm_cov)
    }

    /// One-sample KS distance of each marginal against the normal surrogate.
    pub fn bvm_ks(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|k| {
                let sd = self.bvm_cov[k][k].sqrt();
                let m = self.bvm_mean[k];
                ks_one_sample(&self.column(k), |x| norm_cdf((x - m) / sd)).statistic
            })
            .collect()
    }
}

/// Maps unconstrained `ψ = (log α², log(α³−α²), …, β)` to θ.
fn psi_to_theta(c: usize, psi: &[f64]) -> Theta {
    let k = c - 2;
    let mut alpha = Vec::with_capacity(k);
    let mut acc = 0.0;
    for &u in &psi[..k] {
        acc += u.exp();
        alpha.push(acc);
    }
    Theta { alpha, beta: psi[k..].to_vec() }
}

#[cfg(test)]
fn theta_to_psi(t: &Theta) -> Vec<f64> {
    let mut psi = Vec::with_capacity(t.dim());
    let mut prev = 0.0;
    for &a in &t.alpha {
        psi.push((a - prev).ln());
        prev = a;
    }
    psi.extend_from_slice(&t.beta);
    psi
}

/// Log posterior in ψ coordinates, including the log Jacobian, and its gradient.
fn log_target(cfg: &ModelConfig, data: &Dataset, psi: &[f64]) -> (f64, Vec<f64>) {
    let c = cfg.c;
    let k = c - 2;
    let t = psi_to_theta(c, psi);
    let (ll, g) = log_likelihood_grad(cfg, &t, data);
    let lp = ll + cfg.prior.log_density(&t) + psi[..k].iter().sum::<f64>();
    let mut grad_theta = g;
    let sa2 = cfg.prior.sigma_alpha * cfg.prior.sigma_alpha;
    let sb2 = cfg.prior.sigma_beta * cfg.prior.sigma_beta;
    for j in 0..k {
        grad_theta[j] -= t.alpha[j] / sa2;
    }
    for j in 0..t.p() {
        grad_theta[k + j] -= t.beta[j] / sb2;
    }
    let mut out = grad_theta.clone();
    // α^m = Σ_{l≤m} e^{ψ_l}, so ∂/∂ψ_l = e^{ψ_l} Σ_{m≥l} ∂/∂α^m, plus the Jacobian term.
    let mut tail = 0.0;
    for l in (0..k).rev() {
        tail += grad_theta[l];
        out[l] = psi[l].exp() * tail + 1.0;
    }
    (if lp.is_nan() { f64::NEG_INFINITY } else { lp }, out)
}

fn fd_hessian(cfg: &ModelConfig, data: &Dataset, psi: &[f64]) -> DMatrix<f64> {
    let d = psi.len();
    let mut h = DMatrix::zeros(d, d);
    for j in 0..d {
        let step = 1e-5 * (1.0 + psi[j].abs());
        let mut up = psi.to_vec();
        up[j] += step;
        let mut dn = psi.to_vec();
        dn[j] -= step;
        let (_, gu) = log_target(cfg, data, &up);
        let (_, gd) = log_target(cfg, data, &dn);
        for i in 0..d {
            h[(i, j)] = (gu[i] - gd[i]) / (2.0 * step);
        }
    }
    (&h + h.transpose()) * 0.5
}

/// Mode of the posterior in ψ coordinates and the negative Hessian there.
pub struct PosteriorMode {
    pub psi: Vec<f64>,
    pub neg_hessian: DMatrix<f64>,
    pub log_density: f64,
    pub iterations: usize,
}

fn initial_psi(cfg: &ModelConfig, data: &Dataset) -> Vec<f64> {
    let counts = data.counts();
    let n = data.n.max(1) as f64;
    let mut cum = 0.0;
    let mut cuts = Vec::new();
    for j in 1..cfg.c {
        cum += counts[j] as f64;
        let q = ((cum + 0.5) / (n + 1.0)).clamp(1e-3, 1.0 - 1e-3);
        cuts.push(crate::special::norm_quantile(q));
    }
    let mut psi = Vec::new();
    let mut prev = 0.0;
    for j in 1..cuts.len() {
        let a = (cuts[j] - cuts[0]).max(prev + 0.1);
        psi.push((a - prev).ln());
        prev = a;
    }
    psi.extend(std::iter::repeat_n(0.0, cfg.p()));
    psi
}

/// Damped Newton ascent on the log posterior.
pub fn posterior_mode(cfg: &ModelConfig, data: &Dataset) -> Result<PosteriorMode> {
    cfg.check_data(data)?;
    let mut psi = initial_psi(cfg, data);
    let d = psi.len();
    let (mut f, mut g) = log_target(cfg, data, &psi);
    let mut iterations = 0;
    for it in 0..200 {
        iterations = it + 1;
        let h = fd_hessian(cfg, data, &psi);
        let neg = -&h;
        let gv = DVector::from_column_slice(&g);
        let mut ridge = 0.0;
        let step = loop {
            let m = &neg + DMatrix::identity(d, d) * ridge;
            if let Some(ch) = Cholesky::new(m) {
                break ch.solve(&gv);
            }
            ridge = if ridge == 0.0 { 1e-6 * (1.0 + neg.diagonal().amax()) } else { ridge * 10.0 };
            if ridge > 1e12 {
                return Err(Error::Numerical("posterior Hessian could not be regularized".into()));
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = psi.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
            let (fc, gc) = log_target(cfg, data, &cand);
            if fc.is_finite() && fc >= f - 1e-12 * f.abs().max(1.0) {
                let gain = fc - f;
                psi = cand;
                f = fc;
                g = gc;
                accepted = true;
                if gain.abs() < 1e-12 * f.abs().max(1.0) && step.norm() * t < 1e-8 {
                    t = 0.0;
                }
                break;
            }
            t *= 0.5;
        }
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !accepted || t == 0.0 || gnorm < 1e-9 {
            break;
        }
    }
    let neg_hessian = -fd_hessian(cfg, data, &psi);
    if Cholesky::new(neg_hessian.clone()).is_none() {
        return Err(Error::Numerical("posterior mode has an indefinite Hessian".into()));
    }
    Ok(PosteriorMode { psi, neg_hessian, log_density: f, iterations })
}

/// Independence Metropolis–Hastings sampler targeting the posterior of θ.
pub struct PosteriorSampler<'a> {
    cfg: ModelConfig,
    data: &'a Dataset,
    mode: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    df: f64,
    state: Vec<f64>,
    log_w: f64,
    pub proposals: usize,
    pub accepted: usize,
}

impl<'a> PosteriorSampler<'a> {
    pub const DF: f64 = 6.0;
    pub const SCALE: f64 = 1.1;

    pub fn new(cfg: &ModelConfig, data: &'a Dataset) -> Result<Self> {
        let m = posterior_mode(cfg, data)?;
        let cov = m.neg_hessian.clone().try_inverse().ok_or_else(|| Error::Numerical("posterior Hessian not invertible".into()))?
            * (Self::SCALE * Self::SCALE);
        let cov = (&cov + cov.transpose()) * 0.5;
        let chol = Cholesky::new(cov).ok_or_else(|| Error::Numerical("proposal covariance not positive definite".into()))?;
        let mut s =
            Self { cfg: *cfg, data, mode: m.psi.clone(), chol, df: Self::DF, state: m.psi.clone(), log_w: 0.0, proposals: 0, accepted: 0 };
        s.log_w = s.log_weight(&m.psi);
        Ok(s)
    }

    pub fn mode_theta(&self) -> Theta {
        psi_to_theta(self.cfg.c, &self.mode)
    }

    fn log_proposal(&self, psi: &[f64]) -> f64 {
        let d = psi.len() as f64;
        let diff = DVector::from_iterator(psi.len(), psi.iter().zip(&self.mode).map(|(a, b)| a - b));
        let w = self.chol.l().solve_lower_triangular(&diff).expect("triangular solve");
        -0.5 * (self.df + d) * (1.0 + w.norm_squared() / self.df).ln()
    }

    fn log_weight(&self, psi: &[f64]) -> f64 {
        let (lp, _) = log_target(&self.cfg, self.data, psi);
        lp - self.log_proposal(psi)
    }

    /// Advances one MH step and returns the current θ.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Theta {
        let d = self.mode.len();
        let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let chi: f64 = ChiSquared::new(self.df).expect("df > 0").sample(rng);
        let x = &self.chol.l() * e * (self.df / chi).sqrt();
        let cand: Vec<f64> = self.mode.iter().zip(x.iter()).map(|(m, v)| m + v).collect();
        let lw = self.log_weight(&cand);
        self.proposals += 1;
        let u: f64 = rng.random();
        if lw.is_finite() && u.ln() < lw - self.log_w {
            self.state = cand;
            self.log_w = lw;
            self.accepted += 1;
        }
        psi_to_theta(self.cfg.c, &self.state)
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            return f64::NAN;
        }
        self.accepted as f64 / self.proposals as f64
    }

    /// `count` draws after `burn_in` steps, keeping every `thin`-th state.
    pub fn draws<R: Rng + ?Sized>(&mut self, count: usize, burn_in: usize, thin: usize, rng: &mut R) -> Vec<Theta> {
        for _ in 0..burn_in {
            self.step(rng);
        }
        let thin = thin.max(1);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let mut t = self.step(rng);
            for _ in 1..thin {
                t = self.step(rng);
            }
            out.push(t);
        }
        out
    }
}

fn split_half_p(sample: &[Vec<f64>]) -> f64 {
    let h = sample.len() / 2;
    if h < 10 {
        return 1.0;
    }
    let d = sample[0].len();
    (0..d)
        .map(|k| {
            let a: Vec<f64> = sample[..h].iter().map(|v| v[k]).collect();
            let b: Vec<f64> = sample[h..].iter().map(|v| v[k]).collect();
            ks_two_sample(&a, &b).p_value
        })
        .fold(1.0, f64::min)
}

fn run_reference(cfg: &ModelConfig, data: &Dataset, opts: &ReferenceOptions, length: usize) -> Result<(Vec<Vec<f64>>, f64, Vec<f64>)> {
    let thin = opts.thin.max(1);
    let count = (length / thin).max(1);
    match opts.method {
        ReferenceMethod::IndependenceMh => {
            let mut s = PosteriorSampler::new(cfg, data)?;
            let mut rng = RngStream::new(opts.seed, MH_STREAM);
            let draws = s.draws(count, opts.burn_in, thin, &mut rng);
            Ok((draws.iter().map(|t| t.to_vec()).collect(), s.acceptance_rate(), s.mode_theta().to_vec()))
        }
        ReferenceMethod::BetaGibbs => {
            let mode = posterior_mode(cfg, data)?;
            let start = psi_to_theta(cfg.c, &mode.psi);
            let total = opts.burn_in + count * thin;
            let tr = run_chain(
                VariantId::Beta,
                cfg,
                data,
                total,
                &InitPolicy::Fixed(ExpandedTheta::unit(start.clone())),
                &[],
                KernelOptions::default(),
                opts.seed,
                MH_STREAM,
            )?;
            let sample = tr.params.iter().skip(opts.burn_in).step_by(thin).take(count).map(|s| s.theta.to_vec()).collect();
            Ok((sample, 1.0, start.to_vec()))
        }
    }
}

/// Builds the reference posterior for `data`.
pub fn build_reference(cfg: &ModelConfig, data: &Dataset, opts: &ReferenceOptions) -> Result<ReferencePosterior> {
    cfg.validate()?;
    cfg.check_data(data)?;
    precondition!(opts.length >= 2 * opts.thin.max(1), "reference length too short for thinning {}", opts.thin);
    let mut warnings = Vec::new();
    let mut length = opts.length;
    let (mut sample, mut acc, mode) = run_reference(cfg, data, opts, length)?;
    let mut p = split_half_p(&sample);
    let mut doubled = false;
    if p < 1e-3 {
        warnings.push(format!("split-half KS p-value {p:.2e} below 1e-3; doubling length"));
        length *= 2;
        let again = run_reference(cfg, data, opts, length)?;
        sample = again.0;
        acc = again.1;
        p = split_half_p(&sample);
        doubled = true;
        if p < 1e-3 {
            warnings.push(format!("split-half KS p-value still {p:.2e} after doubling"));
        }
    }
    let theta_hat = central_value_columns(&sample);
    let th = Theta::from_slice(cfg.c, &theta_hat);
    let fisher = if th.in_cone() {
        fisher_information(cfg, &th)?.matrix
    } else {
        return Err(Error::Numerical("central value of the reference sample left the ordered cone".into()));
    };
    let cov = fisher.clone().try_inverse().ok_or_else(|| Error::Numerical("Fisher information not invertible".into()))? / data.n as f64;
    Ok(ReferencePosterior {
        n: data.n,
        c: cfg.c,
        p: cfg.p(),
        data_seed: data.seed,
        sample,
        theta_hat: theta_hat.clone(),
        fisher: to_rows(&fisher),
        bvm_mean: theta_hat,
        bvm_cov: to_rows(&((&cov + cov.transpose()) * 0.5)),
        provenance: Provenance {
            method: opts.method,
            length,
            burn_in: opts.burn_in,
            thin: opts.thin,
            seed: opts.seed,
            acceptance_rate: acc,
            split_half_p: p,
            doubled,
            warnings,
            mode,
        },
    })
}

/// Fisher information of the observed model in ϑ and of the augmented model in ϑ_M.
#[derive(Clone, Debug)]
pub struct FisherBlocks {
    pub variant: VariantId,
    /// Information of the observed-data model in ϑ (singular for augmented variants).
    pub i_full: DMatrix<f64>,
    /// Indices of ϑ_F and ϑ_M within ϑ.
    pub f_idx: Vec<usize>,
    pub m_idx: Vec<usize>,
    /// Augmented-model information for ϑ_M.
    pub k_m: DMatrix<f64>,
    /// `K_M − I_M`.
    pub j_m: DMatrix<f64>,
    /// Smallest eigenvalue of `J_M`; negative beyond tolerance is a finding.
    pub j_m_min_eigenvalue: f64,
}

impl FisherBlocks {
    pub fn i_m(&self) -> DMatrix<f64> {
        self.i_full.select_rows(&self.m_idx).select_columns(&self.m_idx)
    }

    pub fn i_mf(&self) -> DMatrix<f64> {
        self.i_full.select_rows(&self.m_idx).select_columns(&self.f_idx)
    }

    pub fn j_m_psd(&self) -> bool {
        self.j_m_min_eigenvalue >= -1e-6
    }
}

/// `(ϑ_F, ϑ_M)` index split of `ϑ = (α, β[, g])`.
pub fn partition_indices(variant: VariantId, c: usize, p: usize) -> (Vec<usize>, Vec<usize>) {
    let k = c - 2;
    let d = k + p;
    if variant.is_null_type() {
        let f: Vec<usize> = (0..d).collect();
        let m = if variant.is_ma() { vec![d] } else { vec![] };
        (f, m)
    } else {
        let f: Vec<usize> = (0..k).collect();
        let mut m: Vec<usize> = (k..d).collect();
        if variant.is_ma() {
            m.push(d);
        }
        (f, m)
    }
}

/// Closed-form augmented information as stated for the two MA kernels:
/// `g⁻²K` (null-type) and `((g²KΣ, Lμ), (μ'L, g⁻²K))` (β'x-type).
pub fn km_matrix(variant: VariantId, g: f64, k: f64, l: f64, sigma: &DMatrix<f64>, mu: &DVector<f64>) -> Result<DMatrix<f64>> {
    precondition!(variant.is_ma(), "km_matrix is defined for the augmented variants, got {variant}");
    if variant.is_null_type() {
        return Ok(DMatrix::from_element(1, 1, k / (g * g)));
    }
    let p = sigma.nrows();
    let mut m = DMatrix::zeros(p + 1, p + 1);
    m.view_mut((0, 0), (p, p)).copy_from(&(sigma * (g * g * k)));
    for i in 0..p {
        m[(i, p)] = l * mu[i];
        m[(p, i)] = l * mu[i];
    }
    m[(p, p)] = k / (g * g);
    Ok(m)
}

/// Augmented information for ϑ_M computed from the score of `z | x, ϑ`:
/// β-block `g² E[(f'/f)²] Σ`, cross term `Lμ`, g-block `g⁻²K`.
pub fn augmented_information(variant: VariantId, cfg: &ModelConfig, g: f64) -> Result<DMatrix<f64>> {
    let (k, l) = scale_constants(&cfg.link)?;
    let jloc = location_information(&cfg.link)?;
    let sigma = cfg.covariates.second_moment();
    let mu = cfg.covariates.mean();
    let p = cfg.p();
    Ok(match (variant.is_null_type(), variant.is_ma()) {
        (true, true) => DMatrix::from_element(1, 1, k / (g * g)),
        (true, false) => DMatrix::zeros(0, 0),
        (false, false) => sigma * jloc,
        (false, true) => {
            let mut m = DMatrix::zeros(p + 1, p + 1);
            m.view_mut((0, 0), (p, p)).copy_from(&(&sigma * (g * g * jloc)));
            for i in 0..p {
                m[(i, p)] = l * mu[i];
                m[(p, i)] = l * mu[i];
            }
            m[(p, p)] = k / (g * g);
            m
        }
    })
}

/// Monte Carlo estimate of the augmented information: covariance of the
/// ϑ_M-score of `(x, z)` over simulated draws. Returns the estimate and the
/// entrywise standard errors.
pub fn augmented_information_mc(
    variant: VariantId,
    cfg: &ModelConfig,
    state: &ExpandedTheta,
    samples: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    precondition!(samples >= 2, "need at least two samples");
    let p = cfg.p();
    let g = state.g;
    let dm = match (variant.is_null_type(), variant.is_ma()) {
        (true, true) => 1,
        (true, false) => return Err(Error::Precondition(format!("{variant} has no moving block"))),
        (false, false) => p,
        (false, true) => p + 1,
    };
    let mut rng = RngStream::new(seed, ORACLE_STREAM);
    let mut x = vec![0.0; p];
    let mut sum = DMatrix::zeros(dm, dm);
    let mut sq = DMatrix::zeros(dm, dm);
    let mut s = DVector::zeros(dm);
    for _ in 0..samples {
        cfg.covariates.draw(&mut rng, &mut x);
        // u = g(z + β'x) (β'x-type) or u = g z (null-type) is a draw from f.
        let u: f64 = rng.sample(StandardNormal);
        let dl = cfg.link.dlogf(u);
        if variant.is_null_type() {
            s[0] = (1.0 + u * dl) / g;
        } else {
            for j in 0..p {
                s[j] = g * x[j] * dl;
            }
            if variant.is_ma() {
                s[p] = (1.0 + u * dl) / g;
            }
        }
        let outer = &s * s.transpose();
        sq += outer.component_mul(&outer);
        sum += outer;
    }
    let nf = samples as f64;
    let mean = sum / nf;
    let var = sq / nf - mean.component_mul(&mean);
    let se = var.map(|v| (v.max(0.0) / nf).sqrt());
    Ok((mean, se))
}

/// Relative Frobenius distance `|A − B| / |B|`.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Closed form vs Monte Carlo augmented information.
#[derive(Clone, Debug)]
pub struct KmComparison {
    pub closed_form: DMatrix<f64>,
    pub corrected: DMatrix<f64>,
    pub monte_carlo: DMatrix<f64>,
    pub closed_form_error: f64,
    pub corrected_error: f64,
}

impl KmComparison {
    /// Whether the closed form agrees with Monte Carlo within `tol` (relative Frobenius).
    pub fn closed_form_agrees(&self, tol: f64) -> bool {
        self.closed_form_error <= tol
    }
}

pub fn compare_km(variant: VariantId, cfg: &ModelConfig, g: f64, samples: usize, seed: u64) -> Result<KmComparison> {
    let (k, l) = scale_constants(&cfg.link)?;
    let closed_form = km_matrix(variant, g, k, l, &cfg.covariates.second_moment(), &cfg.covariates.mean())?;
    let corrected = augmented_information(variant, cfg, g)?;
    let dummy = ExpandedTheta { theta: Theta { alpha: (1..cfg.c - 1).map(|v| v as f64).collect(), beta: vec![0.0; cfg.p()] }, g };
    let (mc, _) = augmented_information_mc(variant, cfg, &dummy, samples, seed)?;
    Ok(KmComparison {
        closed_form_error: relative_frobenius(&closed_form, &mc),
        corrected_error: relative_frobenius(&corrected, &mc),
        closed_form,
        corrected,
        monte_carlo: mc,
    })
}

/// Information blocks at `state`, with `I(ϑ) = D' I(gθ) D` for the
/// augmented parameterization, `D = [g·Id | θ]`.
pub fn fisher_blocks(variant: VariantId, cfg: &ModelConfig, state: &ExpandedTheta) -> Result<FisherBlocks> {
    let tau = state.identified();
    let it = fisher_information(cfg, &tau)?.matrix;
    let d = tau.dim();
    let i_full = if variant.is_ma() {
        let mut jac = DMatrix::zeros(d, d + 1);
        let theta = state.theta.to_vec();
        for i in 0..d {
            jac[(i, i)] = state.g;
            jac[(i, d)] = theta[i];
        }
        jac.transpose() * &it * &jac
    } else {
        it
    };
    let (f_idx, m_idx) = partition_indices(variant, cfg.c, cfg.p());
    precondition!(!m_idx.is_empty(), "{variant} has no moving block");
    let k_m = augmented_information(variant, cfg, state.g)?;
    let i_m = i_full.select_rows(&m_idx).select_columns(&m_idx);
    let j_m = &k_m - &i_m;
    let j_m_min_eigenvalue = j_m.clone().symmetric_eigen().eigenvalues.min();
    Ok(FisherBlocks { variant, i_full, f_idx, m_idx, k_m, j_m, j_m_min_eigenvalue })
}

/// Normal approximation of one kernel transition of ϑ_M from `state`:
/// mean `ϑ̂_M + K⁻¹J(ϑ_M − ϑ̂_M) − K⁻¹I_{M,F}(ϑ_F − ϑ̂_F)`,
/// covariance `n⁻¹(K⁻¹ + K⁻¹ J K⁻¹)`, with blocks evaluated at `hat`.
pub fn kernel_normal_approx(blocks: &FisherBlocks, n: usize, hat: &[f64], state: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    precondition!(hat.len() == state.len(), "hat and state dimensions differ");
    precondition!(n >= 1, "n must be positive");
    let kinv = blocks.k_m.clone().try_inverse().ok_or_else(|| Error::Degenerate("augmented information K_M is singular".into()))?;
    let pick = |v: &[f64], idx: &[usize]| DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]));
    let hat_m = pick(hat, &blocks.m_idx);
    let dm = pick(state, &blocks.m_idx) - &hat_m;
    let df = pick(state, &blocks.f_idx) - pick(hat, &blocks.f_idx);
    let mut mean = &hat_m + &kinv * &blocks.j_m * dm;
    if !blocks.f_idx.is_empty() {
        mean -= &kinv * blocks.i_mf() * df;
    }
    let cov = (&kinv + &kinv * &blocks.j_m * &kinv) / n as f64;
    Ok((mean, (&cov + cov.transpose()) * 0.5))
}

/// Empirical one-step moments of the actual kernel against the normal approximation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelMomentCheck {
    pub approx_mean: Vec<f64>,
    pub approx_cov: Vec<Vec<f64>>,
    pub empirical_mean: Vec<f64>,
    pub empirical_cov: Vec<Vec<f64>>,
    /// `|E − A| / |A|` for the mean of ϑ_M.
    pub mean_rel_error: f64,
    /// `|E − A| / |A − ϑ̂_M|`: error relative to the predicted displacement.
    pub shift_rel_error: f64,
    /// Largest relative error over the diagonal of the covariance.
    pub var_rel_error: f64,
    pub draws: usize,
}

fn expanded_vec(variant: VariantId, s: &ExpandedTheta) -> Vec<f64> {
    let mut v = s.theta.to_vec();
    if variant.is_ma() {
        v.push(s.g);
    }
    v
}

/// Runs `draws` independent transitions from `state` and compares the
/// moments of ϑ_M with [`kernel_normal_approx`] at `hat`.
pub fn kernel_moment_check(
    variant: VariantId,
    cfg: &ModelConfig,
    data: &Dataset,
    hat: &ExpandedTheta,
    state: &ExpandedTheta,
    draws: usize,
    seed: u64,
) -> Result<KernelMomentCheck> {
    precondition!(draws >= 2, "need at least two draws");
    let blocks = fisher_blocks(variant, cfg, hat)?;
    let hv = expanded_vec(variant, hat);
    let sv = expanded_vec(variant, state);
    let (am, ac) = kernel_normal_approx(&blocks, data.n, &hv, &sv)?;
    let kernel = Kernel::new(variant, cfg, data, KernelOptions::default())?;
    let mut rng = RngStream::new(seed, ORACLE_STREAM);
    let k = blocks.m_idx.len();
    let mut xs = DMatrix::zeros(draws, k);
    for r in 0..draws {
        let v = expanded_vec(variant, &kernel.step(state, &mut rng)?);
        for (c, &i) in blocks.m_idx.iter().enumerate() {
            xs[(r, c)] = v[i];
        }
    }
    let em = DVector::from_fn(k, |c, _| crate::stats::mean(&xs.column(c).iter().copied().collect::<Vec<_>>()));
    let centred = DMatrix::from_fn(draws, k, |r, c| xs[(r, c)] - em[c]);
    let ec = centred.transpose() * &centred / (draws - 1) as f64;
    let hat_m = DVector::from_iterator(k, blocks.m_idx.iter().map(|&i| hv[i]));
    let var_rel_error = (0..k).map(|c| (ec[(c, c)] - ac[(c, c)]).abs() / ac[(c, c)]).fold(0.0, f64::max);
    Ok(KernelMomentCheck {
        approx_mean: am.iter().copied().collect(),
        approx_cov: to_rows(&ac),
        empirical_mean: em.iter().copied().collect(),
        empirical_cov: to_rows(&ec),
        mean_rel_error: (&em - &am).norm() / am.norm(),
        shift_rel_error: (&em - &am).norm() / (&am - &hat_m).norm(),
        var_rel_error,
        draws,
    })
}

/// Contraction factor `K⁻¹J` of the approximate autoregression.
pub fn contraction(blocks: &FisherBlocks) -> Result<DMatrix<f64>> {
    let kinv = blocks.k_m.clone().try_inverse().ok_or_else(|| Error::Degenerate("K_M singular".into()))?;
    Ok(kinv * &blocks.j_m)
}

/// Two-observation test for binary probit around a support point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoPointTest {
    pub i: usize,
    pub z_i: Vec<f64>,
    pub delta: f64,
    /// `P_X(B_δ(z_i))`.
    pub p_i: f64,
    pub c_i: f64,
}

const TWO_POINT_MC: usize = 200_000;

/// Mass and θ-dependent integrals over `B_δ(z) ∩ (0,1)^p`.
fn ball_integral<F: Fn(&[f64]) -> f64>(cfg: &ModelConfig, z: &[f64], delta: f64, f: F) -> Result<f64> {
    if cfg.p() == 1 {
        let lo = (z[0] - delta).max(0.0);
        let hi = (z[0] + delta).min(1.0);
        if hi <= lo {
            return Ok(0.0);
        }
        return Ok(integrate(|x| f(&[x]), lo, hi, 1e-13, 1e-11)?.value);
    }
    let mut rng = RngStream::new(0, ORACLE_STREAM + 1);
    let mut x = vec![0.0; cfg.p()];
    let mut acc = 0.0;
    for _ in 0..TWO_POINT_MC {
        cfg.covariates.draw(&mut rng, &mut x);
        let r2: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if r2 < delta * delta {
            acc += f(&x);
        }
    }
    Ok(acc / TWO_POINT_MC as f64)
}

impl TwoPointTest {
    pub fn new(cfg: &ModelConfig, i: usize, z_i: Vec<f64>, delta: f64, c_i: f64) -> Result<Self> {
        precondition!(cfg.c == 2, "the two-observation test is built for binary models");
        precondition!(z_i.len() == cfg.p(), "support point has wrong dimension");
        precondition!(delta > 0.0, "radius must be positive");
        precondition!(c_i > 0.0 && c_i < 1.0, "c_i must lie in (0, 1)");
        precondition!(cfg.covariates.contains(&z_i), "support point outside the covariate support");
        let p_i = ball_integral(cfg, &z_i, delta, |_| 1.0)?;
        precondition!(p_i > 0.0, "ball around the support point carries no mass");
        Ok(Self { i, z_i, delta, p_i, c_i })
    }

    /// Value of the expected test as `|θ| → ∞` inside the test's cone.
    pub fn limit_value(&self) -> f64 {
        (1.0 - self.p_i * self.p_i) / 2.0 + self.c_i * self.p_i * self.p_i
    }
}

/// Expected test value `(1−p_i²)/2 + c_i(∫_B F(θ'x))² + c_i(∫_B (1−F(θ'x)))²`.
pub fn two_point_test_value(test: &TwoPointTest, theta: &[f64], cfg: &ModelConfig) -> Result<f64> {
    precondition!(theta.len() == cfg.p(), "theta has wrong dimension");
    let lin = |x: &[f64]| theta.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    let a = ball_integral(cfg, &test.z_i, test.delta, |x| cfg.link.cdf(lin(x)))?;
    let b = ball_integral(cfg, &test.z_i, test.delta, |x| cfg.link.cdf(-lin(x)))?;
    Ok((1.0 - test.p_i * test.p_i) / 2.0 + test.c_i * (a * a + b * b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_dataset, PriorSpec};

    #[test]
    fn psi_round_trip() {
        let t = Theta::new(vec![0.5, 1.25, 3.0], vec![-1.0, 2.0]).unwrap();
        let back = psi_to_theta(5, &theta_to_psi(&t));
        for (a, b) in t.to_vec().iter().zip(back.to_vec()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn target_gradient_matches_finite_difference() {
        let cfg = ModelConfig::new(4, 1, PriorSpec::default()).unwrap();
        let t0 = Theta::new(vec![1.0, 2.0], vec![-1.5]).unwrap();
        let d = sample_dataset(&cfg, &t0, 150, 2).unwrap();
        let psi = theta_to_psi(&Theta::new(vec![0.9, 2.2], vec![-1.2]).unwrap());
        let (_, g) = log_target(&cfg, &d, &psi);
        for k in 0..psi.len() {
            let h = 1e-6;
            let mut u = psi.clone();
            u[k] += h;
            let mut l = psi.clone();
            l[k] -= h;
            let fd = (log_target(&cfg, &d, &u).0 - log_target(&cfg, &d, &l).0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-4 * (1.0 + g[k].abs()), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn mode_has_zero_gradient() {
        let cfg = ModelConfig::new(3, 2, PriorSpec::default()).unwrap();
        let t0 = Theta::new(vec![1.0], vec![-1.0, 0.5]).unwrap();
        let d = sample_dataset(&cfg, &t0, 400, 3).unwrap();
        let m = posterior_mode(&cfg, &d).unwrap();
        let (_, g) = log_target(&cfg, &d, &m.psi);
        assert!(g.iter().all(|v| v.abs() < 1e-6), "{g:?}");
    }

    #[test]
    fn km_closed_forms() {
        let cfg = ModelConfig::new(3, 1, PriorSpec::default()).unwrap();
        let (k, l) = scale_constants(&cfg.link).unwrap();
        let s = cfg.covariates.second_moment();
        let mu = cfg.covariates.mean();
        let nm = km_matrix(VariantId::NullMa, 1.0, k, l, &s, &mu).unwrap();
        assert!((nm[(0, 0)] - 2.0).abs() < 1e-8);
        let bm = km_matrix(VariantId::BetaMa, 1.5, k, l, &s, &mu).unwrap();
        assert!(bm[(0, 1)].abs() < 1e-8 && bm[(1, 0)].abs() < 1e-8);
        assert!((bm[(0, 0)] - 2.25 * 2.0 / 3.0).abs() < 1e-8);
        assert!((bm[(1, 1)] - 2.0 / 2.25).abs() < 1e-8);
        assert!(km_matrix(VariantId::Beta, 1.0, k, l, &s, &mu).is_err());
    }

    #[test]
    fn two_point_bound_and_limit() {
        let cfg = ModelConfig::binary();
        let t = TwoPointTest::new(&cfg, 1, vec![0.5], 0.25, 0.5).unwrap();
        assert!((t.p_i - 0.5).abs() < 1e-12);
        for th in [-20.0, -3.0, 0.0, 0.7, 5.0, 50.0] {
            assert!(two_point_test_value(&t, &[th], &cfg).unwrap() <= 0.5 + 1e-12);
        }
        let t2 = TwoPointTest::new(&cfg, 1, vec![0.5], 0.25, 0.7).unwrap();
        let far = two_point_test_value(&t2, &[1e4], &cfg).unwrap();
        assert!((far - t2.limit_value()).abs() < 1e-3, "{far} vs {}", t2.limit_value());
    }
}
