//! Bounded-Lipschitz distances between empirical measures, central values,
//! localization, and the Monte Carlo estimators built on them.

use std::collections::BTreeMap;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{build_reference, PosteriorSampler, ReferenceOptions, ReferencePosterior};
use crate::error::{precondition, Error, Result};
use crate::kernels::{ChainTrace, InitPolicy, Kernel, KernelOptions, TransformKind, VariantId};
use crate::model::{sample_dataset, Dataset, ExpandedTheta, ModelConfig, Theta};
use crate::rng::{path_id, RngStream};
use crate::stats::{lag1_autocorrelation, mean, mean_se, pairwise_sum};
use crate::transport::transport;

/// Largest support handled exactly; bigger measures are subsampled.
pub const SUPPORT_CAP: usize = 400;
/// Replications needed before a Table-1 verdict is issued.
pub const MIN_TABLE1_REPLICATIONS: usize = 50;

const DATA_LABEL: u64 = 0xDA7A;
const CHAIN_LABEL: u64 = 0xC4A1;
const POSTERIOR_LABEL: u64 = 0x9057;
pub const REFERENCE_LABEL: u64 = 0x4EF0;
const SUBSAMPLE_LABEL: u64 = 0x5AB5;

/// Draws taken from the independence sampler for stationary starts.
const LOCAL_DRAWS: usize = 200;
const LOCAL_BURN_IN: usize = 200;
const LOCAL_THIN: usize = 5;

/// `min(|u − v|₂, 1)`.
pub fn ground_distance(u: &[f64], v: &[f64]) -> f64 {
    let s: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    s.sqrt().min(1.0)
}

/// Localized ground distance `min(√n |u − v|₂, 1)`.
pub fn local_distance(u: &[f64], v: &[f64], n: usize) -> f64 {
    let s: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    ((n as f64).sqrt() * s.sqrt()).min(1.0)
}

/// Weighted point cloud in `R^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        precondition!(!points.is_empty(), "empirical measure needs at least one point");
        precondition!(points.len() == weights.len(), "{} points but {} weights", points.len(), weights.len());
        let d = points[0].len();
        precondition!(points.iter().all(|p| p.len() == d), "points have mixed dimensions");
        precondition!(points.iter().flatten().all(|v| v.is_finite()), "points must be finite");
        precondition!(weights.iter().all(|w| *w >= 0.0 && w.is_finite()), "weights must be nonnegative");
        let total = pairwise_sum(&weights);
        precondition!((total - 1.0).abs() <= 1e-12, "weights sum to {total}, not 1");
        Ok(Self { points, weights })
    }

    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let k = points.len();
        precondition!(k > 0, "empirical measure needs at least one point");
        Self::new(points, vec![1.0 / k as f64; k])
    }

    pub fn dirac(x: Vec<f64>) -> Self {
        Self { points: vec![x], weights: vec![1.0] }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `cap` points drawn without replacement, weights renormalized.
    pub fn subsample(&self, cap: usize, rng: &mut RngStream) -> Self {
        if self.len() <= cap {
            return self.clone();
        }
        let mut idx = index::sample(rng, self.len(), cap).into_vec();
        idx.sort_unstable();
        let w: Vec<f64> = idx.iter().map(|&i| self.weights[i]).collect();
        let total = pairwise_sum(&w);
        Self { points: idx.iter().map(|&i| self.points[i].clone()).collect(), weights: w.iter().map(|v| v / total).collect() }
    }
}

/// Bounded-Lipschitz distance with subsampling diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlDistance {
    pub value: f64,
    /// How many of the two measures were subsampled to the cap.
    pub resampled: usize,
    pub support: (usize, usize),
}

/// BL distance with the default cap and subsample seed 0.
pub fn bl_distance(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    Ok(bl_distance_capped(mu, nu, SUPPORT_CAP, 0)?.value)
}

/// BL distance under `min(|·|, 1)`.
///
/// Since the ground metric is bounded by 1, every 1-Lipschitz test function
/// has oscillation at most 1 and can be shifted into `[−1/2, 1/2]`; the
/// sup-norm constraint never binds and the distance is the optimal
/// transport cost.
pub fn bl_distance_capped(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, cap: usize, seed: u64) -> Result<BlDistance> {
    precondition!(mu.dim() == nu.dim(), "dimension mismatch: {} vs {}", mu.dim(), nu.dim());
    precondition!(cap >= 1, "support cap must be positive");
    let mut resampled = 0;
    let mut cut = |m: &EmpiricalMeasure, label: u64| {
        if m.len() > cap {
            resampled += 1;
            m.subsample(cap, &mut RngStream::from_path(seed, &[SUBSAMPLE_LABEL, label]))
        } else {
            m.clone()
        }
    };
    let a = cut(mu, 0);
    let b = cut(nu, 1);
    let sol = transport(&a.weights, &b.weights, |i, j| ground_distance(&a.points[i], &b.points[j]))
        .map_err(|e| Error::Numerical(format!("BL transport failed on {}x{} support (d={}): {e}", a.len(), b.len(), a.dim())))?;
    Ok(BlDistance { value: sol.cost.clamp(0.0, 1.0), resampled, support: (a.len(), b.len()) })
}

/// Root of the strictly decreasing map `x̄ ↦ Σ wᵢ arctan(xᵢ − x̄)`.
fn central_value_1d(xs: &[f64], ws: &[f64]) -> f64 {
    let h = |c: f64| {
        let t: Vec<f64> = xs.iter().zip(ws).map(|(x, w)| w * (x - c).atan()).collect();
        pairwise_sum(&t)
    };
    let mut lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return lo;
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return mid;
        }
        let v = h(mid);
        if v.abs() < 1e-13 {
            return mid;
        }
        if v > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// Per-coordinate central value.
pub fn central_value(mu: &EmpiricalMeasure) -> Vec<f64> {
    (0..mu.dim())
        .map(|k| {
            let xs: Vec<f64> = mu.points.iter().map(|p| p[k]).collect();
            central_value_1d(&xs, &mu.weights)
        })
        .collect()
}

/// Central value of equally weighted rows.
pub fn central_value_columns(sample: &[Vec<f64>]) -> Vec<f64> {
    if sample.is_empty() {
        return Vec::new();
    }
    let w = vec![1.0 / sample.len() as f64; sample.len()];
    (0..sample[0].len())
        .map(|k| {
            let xs: Vec<f64> = sample.iter().map(|p| p[k]).collect();
            central_value_1d(&xs, &w)
        })
        .collect()
}

/// Replaces every transform output `v` by `√n (v − θ̂)`.
pub fn localize(trace: &ChainTrace, theta_hat: &[f64], n: usize) -> Result<ChainTrace> {
    let s = (n as f64).sqrt();
    let mut out = trace.clone();
    for t in &mut out.transforms {
        for v in &mut t.values {
            precondition!(
                v.len() == theta_hat.len(),
                "transform {} has dimension {} but the centre has {}",
                t.kind.as_str(),
                v.len(),
                theta_hat.len()
            );
            for (x, c) in v.iter_mut().zip(theta_hat) {
                *x = s * (*x - c);
            }
        }
    }
    Ok(out)
}

/// What produces the chain being diagnosed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainSource {
    Kernel(VariantId),
    /// Independent posterior draws; the calibration anchor that never degenerates.
    Iid,
}

impl ChainSource {
    pub fn label(&self) -> &'static str {
        match self {
            ChainSource::Kernel(v) => v.as_str(),
            ChainSource::Iid => "iid",
        }
    }
}

/// How `s(0)` is chosen in each replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Start {
    /// A posterior draw (paired with a prior draw of g for augmented chains).
    Stationary,
    Fixed(ExpandedTheta),
}

impl Start {
    fn tag(&self) -> &'static str {
        match self {
            Start::Stationary => "stationary",
            Start::Fixed(_) => "fixed",
        }
    }
}

/// Shared settings of the replicated estimators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSpec {
    pub source: ChainSource,
    pub cfg: ModelConfig,
    /// Data-generating parameter.
    pub theta0: Theta,
    pub n: usize,
    pub replications: usize,
    pub transform: TransformKind,
    /// Restricts the transform to one coordinate.
    pub component: Option<usize>,
    pub start: Start,
    pub seed: u64,
}

impl DiagnosticSpec {
    pub fn new(source: ChainSource, cfg: ModelConfig, theta0: Theta, n: usize, replications: usize, seed: u64) -> Self {
        Self { source, cfg, theta0, n, replications, transform: TransformKind::GTheta, component: None, start: Start::Stationary, seed }
    }

    fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        self.cfg.check_theta(&self.theta0)?;
        precondition!(self.n >= 1, "n must be positive");
        precondition!(self.replications >= 2, "need at least 2 replications for a standard error, got {}", self.replications);
        if let ChainSource::Kernel(v) = self.source {
            v.check_shape(self.cfg.c, self.cfg.p())?;
        }
        let d = self.transform.dim(self.cfg.c, self.cfg.p())?;
        if let Some(k) = self.component {
            precondition!(k < d, "component {k} out of range for {} (dimension {d})", self.transform.as_str());
        }
        if let (Start::Fixed(s), ChainSource::Kernel(v)) = (&self.start, self.source) {
            self.cfg.check_theta(&s.theta)?;
            precondition!(v.is_ma() || s.g == 1.0, "{v} keeps g = 1");
        }
        Ok(())
    }

    fn project(&self, s: &ExpandedTheta) -> Result<Vec<f64>> {
        let v = self.transform.apply(s)?;
        Ok(match self.component {
            Some(k) => vec![v[k]],
            None => v,
        })
    }

    pub fn dataset(&self, r: usize) -> Result<Dataset> {
        sample_dataset(&self.cfg, &self.theta0, self.n, path_id(&[self.seed, r as u64, DATA_LABEL]))
    }

    fn rng(&self, r: usize, label: u64) -> RngStream {
        RngStream::from_path(self.seed, &[r as u64, label])
    }

    fn report(&self, m: Option<usize>) -> DiagnosticsReport {
        DiagnosticsReport {
            source: self.source.label().to_string(),
            c: self.cfg.c,
            p: self.cfg.p(),
            n: self.n,
            m,
            replications: self.replications,
            transform: self.transform,
            component: self.component,
            start: self.start.tag().to_string(),
            seed: self.seed,
            estimates: BTreeMap::new(),
            per_replication: BTreeMap::new(),
            theta_hat: Vec::new(),
            notes: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_replications(xs: &[f64]) -> Self {
        let (value, se) = mean_se(xs);
        Self { value, se }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub source: String,
    pub c: usize,
    pub p: usize,
    pub n: usize,
    pub m: Option<usize>,
    pub replications: usize,
    pub transform: TransformKind,
    pub component: Option<usize>,
    pub start: String,
    pub seed: u64,
    pub estimates: BTreeMap<String, Estimate>,
    pub per_replication: BTreeMap<String, Vec<f64>>,
    /// Centre used for localization in each replication.
    pub theta_hat: Vec<Vec<f64>>,
    pub notes: Vec<String>,
}

impl DiagnosticsReport {
    pub fn estimate(&self, key: &str) -> Result<Estimate> {
        self.estimates.get(key).copied().ok_or_else(|| Error::Missing(format!("report has no estimate '{key}'")))
    }

    fn insert(&mut self, key: &str, values: Vec<f64>) {
        self.estimates.insert(key.to_string(), Estimate::from_replications(&values));
        self.per_replication.insert(key.to_string(), values);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const R_M: &str = "r_m";
pub const R_M_NOISE_FLOOR: &str = "r_m_noise_floor";
pub const R_PRIME: &str = "r_prime_m";
pub const R_PRIME_UNLOCALIZED: &str = "r_prime_m_unlocalized";
pub const LAG1: &str = "lag1_autocorrelation";
pub const D_N: &str = "d_n";
pub const D_N_UNLOCALIZED: &str = "d_n_unlocalized";

/// Approximately independent posterior draws from the independence sampler.
pub fn posterior_draws(cfg: &ModelConfig, data: &Dataset, count: usize, rng: &mut RngStream) -> Result<Vec<Theta>> {
    let mut s = PosteriorSampler::new(cfg, data)?;
    Ok(s.draws(count, LOCAL_BURN_IN, LOCAL_THIN, rng))
}

fn centre(spec: &DiagnosticSpec, draws: &[Theta]) -> Result<Vec<f64>> {
    let v = draws.iter().map(|t| spec.project(&ExpandedTheta::unit(t.clone()))).collect::<Result<Vec<_>>>()?;
    Ok(central_value_columns(&v))
}

/// States `s(0), …, s(m−1)` of one replication's chain.
fn chain_states(spec: &DiagnosticSpec, data: &Dataset, draws: &[Theta], m: usize, rng: &mut RngStream) -> Result<Vec<ExpandedTheta>> {
    match spec.source {
        ChainSource::Iid => {
            precondition!(draws.len() >= m, "need {m} independent draws, have {}", draws.len());
            let mut out: Vec<ExpandedTheta> = draws[..m].iter().map(|t| ExpandedTheta::unit(t.clone())).collect();
            if let Start::Fixed(s) = &spec.start {
                out[0] = s.clone();
            }
            Ok(out)
        }
        ChainSource::Kernel(v) => {
            let kernel = Kernel::new(v, &spec.cfg, data, KernelOptions::default())?;
            let init = match &spec.start {
                Start::Stationary => InitPolicy::Posterior(draws[0].clone()),
                Start::Fixed(s) => InitPolicy::Fixed(s.clone()),
            };
            let mut state = kernel.initial(&init, rng)?;
            let mut out = Vec::with_capacity(m);
            out.push(state.clone());
            for _ in 1..m {
                state = kernel.step(&state, rng)?;
                out.push(state.clone());
            }
            Ok(out)
        }
    }
}

/// `W'_m` of one chain on the localized and raw scales.
pub fn chain_rprime(values: &[Vec<f64>], n: usize) -> (f64, f64) {
    let local: Vec<f64> = values.iter().map(|v| local_distance(&values[0], v, n)).collect();
    let raw: Vec<f64> = values.iter().map(|v| ground_distance(&values[0], v)).collect();
    (mean(&local), mean(&raw))
}

/// Mean distance between `e_m` and `e_1 = δ_{s(0)}`, on the localized and raw scales.
///
/// The BL distance to a Dirac mass is the mean ground distance to it, so no
/// transport problem is solved here.
pub fn estimate_rprime(spec: &DiagnosticSpec, m: usize) -> Result<DiagnosticsReport> {
    spec.validate()?;
    precondition!(m >= 2, "R'_m needs m >= 2, got {m}");
    let rows = (0..spec.replications)
        .into_par_iter()
        .map(|r| -> Result<(f64, f64, f64, Vec<f64>)> {
            let data = spec.dataset(r)?;
            let mut prng = spec.rng(r, POSTERIOR_LABEL);
            let draws = posterior_draws(&spec.cfg, &data, LOCAL_DRAWS.max(m), &mut prng)?;
            let hat = centre(spec, &draws)?;
            let mut rng = spec.rng(r, CHAIN_LABEL);
            let states = chain_states(spec, &data, &draws, m, &mut rng)?;
            let vals = states.iter().map(|s| spec.project(s)).collect::<Result<Vec<_>>>()?;
            let (local, raw) = chain_rprime(&vals, spec.n);
            let first: Vec<f64> = vals.iter().map(|v| v[0]).collect();
            Ok((local, raw, lag1_autocorrelation(&first), hat))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rep = spec.report(Some(m));
    rep.insert(R_PRIME, rows.iter().map(|r| r.0).collect());
    rep.insert(R_PRIME_UNLOCALIZED, rows.iter().map(|r| r.1).collect());
    let lag: Vec<f64> = rows.iter().map(|r| r.2).filter(|v| v.is_finite()).collect();
    if lag.len() >= 2 {
        rep.insert(LAG1, lag);
    } else {
        rep.notes.push("lag-1 autocorrelation undefined: chains did not move".into());
    }
    rep.theta_hat = rows.into_iter().map(|r| r.3).collect();
    Ok(rep)
}

/// Localized BL distance between the chain's empirical measure and the
/// reference posterior, with a split-sample noise floor of matching size.
pub fn estimate_r(spec: &DiagnosticSpec, m: usize, reference: &ReferenceOptions) -> Result<DiagnosticsReport> {
    estimate_r_with(spec, m, |r, data| {
        let opts = ReferenceOptions { seed: path_id(&[spec.seed, r as u64, REFERENCE_LABEL]), ..*reference };
        build_reference(&spec.cfg, data, &opts)
    })
}

/// [`estimate_r`] with the reference for replication `r` supplied by `reference`,
/// e.g. loaded from disk.
pub fn estimate_r_with<F>(spec: &DiagnosticSpec, m: usize, reference: F) -> Result<DiagnosticsReport>
where
    F: Fn(usize, &Dataset) -> Result<ReferencePosterior> + Sync,
{
    spec.validate()?;
    precondition!(m >= 1, "R_m needs m >= 1");
    let needed = (10 * m).max(SUPPORT_CAP + 2 * m);
    let rows = (0..spec.replications)
        .into_par_iter()
        .map(|r| -> Result<(f64, f64, Vec<f64>, usize)> {
            let data = spec.dataset(r)?;
            let refp = reference(r, &data)?;
            precondition!(
                refp.data_seed == data.seed && refp.n == data.n && refp.c == data.c && refp.p == data.p,
                "reference for replication {r} was built on a different dataset"
            );
            precondition!(
                refp.sample.len() >= needed,
                "reference sample of {} draws is too small for m={m} (need {needed})",
                refp.sample.len()
            );
            let thetas: Vec<Theta> = refp.sample.iter().map(|v| Theta::from_slice(spec.cfg.c, v)).collect();
            let hat = centre(spec, &thetas)?;
            let s = (spec.n as f64).sqrt();
            let loc = |v: Vec<f64>| v.iter().zip(&hat).map(|(a, b)| s * (a - b)).collect::<Vec<f64>>();

            // One permutation splits the reference into the comparison sample,
            // the noise-floor sample and (for the iid source) the chain.
            let mut rng = spec.rng(r, SUBSAMPLE_LABEL);
            let perm = index::sample(&mut rng, thetas.len(), SUPPORT_CAP + 2 * m).into_vec();
            let pick = |idx: &[usize]| -> Result<Vec<Vec<f64>>> {
                idx.iter().map(|&i| Ok(loc(spec.project(&ExpandedTheta::unit(thetas[i].clone()))?))).collect()
            };
            let target = EmpiricalMeasure::uniform(pick(&perm[..SUPPORT_CAP])?)?;
            let floor_pts = pick(&perm[SUPPORT_CAP..SUPPORT_CAP + m])?;
            let chain_draws: Vec<Theta> = perm[SUPPORT_CAP + m..].iter().map(|&i| thetas[i].clone()).collect();

            let mut crng = spec.rng(r, CHAIN_LABEL);
            let states = chain_states(spec, &data, &chain_draws, m, &mut crng)?;
            let chain_pts = states.iter().map(|s| spec.project(s).map(loc)).collect::<Result<Vec<_>>>()?;
            let bl_seed = path_id(&[spec.seed, r as u64]);
            let d = bl_distance_capped(&EmpiricalMeasure::uniform(chain_pts)?, &target, SUPPORT_CAP, bl_seed)?;
            let f = bl_distance_capped(&EmpiricalMeasure::uniform(floor_pts)?, &target, SUPPORT_CAP, bl_seed)?;
            Ok((d.value, f.value, hat, d.resampled + f.resampled))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rep = spec.report(Some(m));
    rep.insert(R_M, rows.iter().map(|r| r.0).collect());
    rep.insert(R_M_NOISE_FLOOR, rows.iter().map(|r| r.1).collect());
    let resampled: usize = rows.iter().map(|r| r.3).sum();
    if resampled > 0 {
        rep.notes.push(format!("{resampled} measures subsampled to {SUPPORT_CAP} points"));
    }
    rep.theta_hat = rows.into_iter().map(|r| r.2).collect();
    Ok(rep)
}

/// Mean localized one-step movement `min(√n |F(s(0)) − F(s(1))|, 1)` from
/// stationary starts, averaged over `pairs` starts per replication.
pub fn one_step_statistic(spec: &DiagnosticSpec, pairs: usize) -> Result<DiagnosticsReport> {
    let mut reps = one_step_statistics(spec, &[(spec.transform, spec.component)], pairs)?;
    Ok(reps.remove(0))
}

/// [`one_step_statistic`] for several summaries of the same transitions.
/// Report `k` uses `views[k]` as its transform and component.
pub fn one_step_statistics(
    spec: &DiagnosticSpec,
    views: &[(TransformKind, Option<usize>)],
    pairs: usize,
) -> Result<Vec<DiagnosticsReport>> {
    precondition!(!views.is_empty(), "no transforms requested");
    let specs: Vec<DiagnosticSpec> =
        views.iter().map(|&(transform, component)| DiagnosticSpec { transform, component, ..spec.clone() }).collect();
    for s in &specs {
        s.validate()?;
    }
    precondition!(pairs >= 1, "need at least one start per replication");
    precondition!(spec.start == Start::Stationary, "one-step statistic needs stationary starts");
    // Per replication and view: (localized, raw, centre).
    let rows = (0..spec.replications)
        .into_par_iter()
        .map(|r| -> Result<Vec<(f64, f64, Vec<f64>)>> {
            let data = spec.dataset(r)?;
            let mut prng = spec.rng(r, POSTERIOR_LABEL);
            let draws = posterior_draws(&spec.cfg, &data, LOCAL_DRAWS.max(2 * pairs), &mut prng)?;
            let mut rng = spec.rng(r, CHAIN_LABEL);
            let kernel = match spec.source {
                ChainSource::Kernel(v) => Some(Kernel::new(v, &spec.cfg, &data, KernelOptions::default())?),
                ChainSource::Iid => None,
            };
            let mut moves = Vec::with_capacity(pairs);
            for k in 0..pairs {
                moves.push(match &kernel {
                    Some(kn) => {
                        let s0 = kn.initial(&InitPolicy::Posterior(draws[k].clone()), &mut rng)?;
                        let s1 = kn.step(&s0, &mut rng)?;
                        (s0, s1)
                    }
                    None => (ExpandedTheta::unit(draws[k].clone()), ExpandedTheta::unit(draws[pairs + k].clone())),
                });
            }
            specs
                .iter()
                .map(|s| {
                    let mut local = Vec::with_capacity(pairs);
                    let mut raw = Vec::with_capacity(pairs);
                    for (s0, s1) in &moves {
                        let (a, b) = (s.project(s0)?, s.project(s1)?);
                        local.push(local_distance(&a, &b, s.n));
                        raw.push(ground_distance(&a, &b));
                    }
                    Ok((mean(&local), mean(&raw), centre(s, &draws)?))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(specs
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut rep = s.report(None);
            rep.insert(D_N, rows.iter().map(|r| r[k].0).collect());
            rep.insert(D_N_UNLOCALIZED, rows.iter().map(|r| r[k].1).collect());
            rep.theta_hat = rows.iter().map(|r| r[k].2.clone()).collect();
            rep
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    /// Local consistency: the one-step movement is stable in n.
    O,
    /// Local degeneracy: some identified summary freezes as n grows.
    X,
    #[serde(rename = "inconclusive")]
    Inconclusive,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::O => "O",
            Label::X => "X",
            Label::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub n: usize,
    pub value: f64,
    pub se: f64,
    pub replications: usize,
}

impl TrendPoint {
    pub fn from_report(rep: &DiagnosticsReport) -> Result<Self> {
        let e = rep.estimate(D_N)?;
        Ok(Self { n: rep.n, value: e.value, se: e.se, replications: rep.replications })
    }
}

/// `D_n` across the n-grid for one transform of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTrend {
    pub transform: TransformKind,
    pub points: Vec<TrendPoint>,
}

impl CellTrend {
    pub fn ratio(&self) -> f64 {
        self.points.last().unwrap().value / self.points[0].value
    }

    /// Monotone decrease to below half the first value, clear of 3 pooled s.e.
    pub fn decays(&self) -> bool {
        let (first, last) = (self.points[0], *self.points.last().unwrap());
        let monotone = self.points.windows(2).all(|w| w[1].value < w[0].value);
        let pooled = (last.se * last.se + 0.25 * first.se * first.se).sqrt();
        monotone && self.ratio() < 0.5 && last.value + 3.0 * pooled < 0.5 * first.value
    }

    /// Every point within a factor [2/3, 3/2] of the first.
    pub fn stable(&self) -> bool {
        let v0 = self.points[0].value;
        v0 > 0.0 && self.points.iter().all(|p| (2.0 / 3.0..=1.5).contains(&(p.value / v0)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellInput {
    pub variant: VariantId,
    pub c: usize,
    pub p: usize,
    pub trends: Vec<CellTrend>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellVerdict {
    pub variant: VariantId,
    pub c: usize,
    pub p: usize,
    pub label: Label,
    /// Index into `trends` of the transform with the smallest end-to-start ratio.
    pub decisive: usize,
    pub trends: Vec<CellTrend>,
}

impl CellVerdict {
    pub fn decisive_trend(&self) -> &CellTrend {
        &self.trends[self.decisive]
    }
}

/// Identified summaries inspected for a cell: gθ always, gα and gβ
/// separately when both blocks exist, the direction when θ has at least two
/// coordinates, and the cut-point ratio when there are at least two cuts.
pub fn classification_transforms(c: usize, p: usize) -> Vec<TransformKind> {
    let mut out = vec![TransformKind::GTheta];
    if c >= 3 {
        out.push(TransformKind::GAlpha);
        out.push(TransformKind::GBeta);
    }
    if c - 2 + p >= 2 {
        out.push(TransformKind::ThetaNorm);
    }
    if c >= 4 {
        out.push(TransformKind::AlphaRatio);
    }
    out
}

pub fn classify_cell(input: &CellInput) -> Result<CellVerdict> {
    precondition!(!input.trends.is_empty(), "cell {} c={} has no trends", input.variant, input.c);
    for t in &input.trends {
        precondition!(t.points.len() >= 2, "trend for {} needs at least two sample sizes", t.transform.as_str());
        precondition!(t.points.windows(2).all(|w| w[0].n < w[1].n), "n-grid must be increasing");
        if let Some(p) = t.points.iter().find(|p| p.replications < MIN_TABLE1_REPLICATIONS) {
            return Err(Error::Precondition(format!(
                "insufficient replications: {} at n={} (need {MIN_TABLE1_REPLICATIONS})",
                p.replications, p.n
            )));
        }
    }
    let label = if input.trends.iter().any(CellTrend::decays) {
        Label::X
    } else if input.trends.iter().all(CellTrend::stable) {
        Label::O
    } else {
        Label::Inconclusive
    };
    let decisive = (0..input.trends.len()).min_by(|&a, &b| input.trends[a].ratio().total_cmp(&input.trends[b].ratio())).unwrap();
    Ok(CellVerdict { variant: input.variant, c: input.c, p: input.p, label, decisive, trends: input.trends.clone() })
}

pub fn classify_table1(cells: &[CellInput]) -> Result<Vec<CellVerdict>> {
    cells.iter().map(classify_cell).collect()
}

/// One line of the Table-1 CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub variant: String,
    pub c: usize,
    pub n: usize,
    #[serde(rename = "D")]
    pub d: f64,
    pub se: f64,
    pub label: String,
}

/// Rows for each cell's decisive transform.
pub fn table1_rows(verdicts: &[CellVerdict]) -> Vec<Table1Row> {
    verdicts
        .iter()
        .flat_map(|v| {
            v.decisive_trend().points.iter().map(move |p| Table1Row {
                variant: v.variant.to_string(),
                c: v.c,
                n: p.n,
                d: p.value,
                se: p.se,
                label: v.label.as_str().to_string(),
            })
        })
        .collect()
}
