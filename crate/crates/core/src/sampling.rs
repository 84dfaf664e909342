//! Exact low-level samplers: truncated normal, gamma, and a grid
//! inverse-CDF sampler for arbitrary one-dimensional log densities.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{interval_mass, norm_cdf, norm_quantile};

/// Standardized bound beyond which the exponential-rejection tail sampler
/// replaces inverse-CDF sampling.
pub const TAIL_THRESHOLD: f64 = 6.0;

/// Minimum probability mass a truncation interval may carry.
pub const MIN_INTERVAL_MASS: f64 = 1e-300;

/// A nonempty interval of the real line. Endpoint flags only matter for
/// membership checks; sampling is continuous.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    lo: f64,
    hi: f64,
    lo_closed: bool,
    hi_closed: bool,
}

impl Interval {
    pub fn new(lo: f64, hi: f64, lo_closed: bool, hi_closed: bool) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() {
            return Err(Error::Precondition("interval endpoint is NaN".into()));
        }
        let empty = lo > hi || (lo == hi && !(lo_closed && hi_closed)) || lo == f64::INFINITY || hi == f64::NEG_INFINITY;
        if empty {
            return Err(Error::Precondition(format!("empty interval ({lo}, {hi})")));
        }
        Ok(Self { lo, hi, lo_closed: lo_closed && lo.is_finite(), hi_closed: hi_closed && hi.is_finite() })
    }

    /// `(lo, hi]`, the shape produced by latent-variable constraints.
    pub fn open_closed(lo: f64, hi: f64) -> Result<Self> {
        Self::new(lo, hi, false, true)
    }

    /// `[lo, hi)`, the shape produced by parameter constraints.
    pub fn closed_open(lo: f64, hi: f64) -> Result<Self> {
        Self::new(lo, hi, true, false)
    }

    pub fn real_line() -> Self {
        Self { lo: f64::NEG_INFINITY, hi: f64::INFINITY, lo_closed: false, hi_closed: false }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    /// Membership, treating the closure flags loosely at the endpoints.
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

/// Draws from `N(mean, sd²)` restricted to `iv`.
pub fn truncated_normal<R: Rng + ?Sized>(mean: f64, sd: f64, iv: Interval, rng: &mut R) -> Result<f64> {
    if !(sd > 0.0) || !sd.is_finite() || !mean.is_finite() {
        return Err(Error::Precondition(format!("truncated_normal needs finite mean and sd > 0, got ({mean}, {sd})")));
    }
    let a = (iv.lo - mean) / sd;
    let b = (iv.hi - mean) / sd;
    let z = std_truncated(a, b, rng)?;
    let x = mean + sd * z;
    // Rounding in the affine map can step a hair outside.
    let x = x.clamp(iv.lo, iv.hi);
    debug_assert!(iv.contains(x), "draw {x} outside [{}, {}]", iv.lo, iv.hi);
    Ok(x)
}

/// Standard normal restricted to `(a, b)`.
pub fn std_truncated<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    if !(a < b) {
        if a == b && a.is_finite() {
            return Ok(a);
        }
        return Err(Error::Degenerate(format!("empty standardized interval ({a}, {b})")));
    }
    if a == f64::NEG_INFINITY && b == f64::INFINITY {
        return Ok(rng.sample(StandardNormal));
    }
    // Reflect so the interval reaches into the left half-line.
    if a > 0.0 {
        return Ok(-std_truncated(-b, -a, rng)?);
    }
    if b < -TAIL_THRESHOLD {
        return Ok(-tail_exponential(-b, -a, rng));
    }
    // Short intervals where the density is nearly flat: uniform rejection.
    if a.is_finite() && b.is_finite() {
        let peak = if b < 0.0 { b } else { 0.0 };
        let far = if -a > b.abs() { a } else { b };
        let log_ratio = -0.5 * (far * far - peak * peak);
        if log_ratio > -1.5 {
            loop {
                let u: f64 = rng.sample(Open01);
                let x = a + (b - a) * u;
                let v: f64 = rng.sample(Open01);
                if v.ln() <= -0.5 * (x * x - peak * peak) {
                    return Ok(x);
                }
            }
        }
    }
    let mass = interval_mass(a, b);
    if !(mass > MIN_INTERVAL_MASS) {
        return Err(Error::Degenerate(format!("interval ({a}, {b}) carries mass {mass:e}")));
    }
    let pa = norm_cdf(a);
    let u: f64 = rng.sample(Open01);
    let x = norm_quantile(pa + u * mass);
    Ok(x.clamp(a, b))
}

/// Normal tail on `[lo, hi)` with `lo >= TAIL_THRESHOLD`, by rejection from a
/// truncated exponential of rate `lo`.
fn tail_exponential<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    let rate = lo;
    let span = 1.0 - (-rate * (hi - lo)).exp();
    loop {
        let u: f64 = rng.sample(Open01);
        let x = lo - (1.0 - u * span).ln() / rate;
        let v: f64 = rng.sample(Open01);
        let d = x - lo;
        if v.ln() <= -0.5 * d * d && x <= hi {
            return x;
        }
    }
}

/// Gamma(shape, rate) draw.
pub fn gamma_draw<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
        return Err(Error::Precondition(format!("gamma_draw needs positive shape and rate, got ({shape}, {rate})")));
    }
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Precondition(e.to_string()))?;
    Ok(g.sample(rng))
}

/// A draw from a grid inverse-CDF sampler plus its discretization bound.
#[derive(Clone, Copy, Debug)]
pub struct GridDraw {
    pub value: f64,
    /// Bound on the total-variation error of the piecewise-linear density,
    /// of order `h²` in the final grid spacing `h`.
    pub tv_bound: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Tabulated sampler: refine a grid over `support` until the bulk of the mass
/// is resolved, then invert the piecewise-linear CDF.
pub struct GridSampler {
    nodes: Vec<f64>,
    dens: Vec<f64>,
    cum: Vec<f64>,
    tv_bound: f64,
}

impl GridSampler {
    pub fn new<F: Fn(f64) -> f64>(logdensity: F, support: Interval, gridsize: usize) -> Result<Self> {
        if gridsize < 16 {
            return Err(Error::Precondition("gridsize must be at least 16".into()));
        }
        let (mut lo, mut hi) = (support.lo, support.hi);
        // Unbounded sides are scanned outward until the density is negligible.
        if !lo.is_finite() || !hi.is_finite() {
            let anchor = if lo.is_finite() {
                lo
            } else if hi.is_finite() {
                hi
            } else {
                0.0
            };
            let ref_ld = logdensity(anchor);
            if !ref_ld.is_finite() {
                return Err(Error::Numerical("log density not finite at scan anchor".into()));
            }
            let mut step = 1.0;
            if !lo.is_finite() {
                let mut x = anchor - step;
                let mut best = ref_ld;
                loop {
                    let v = logdensity(x);
                    best = best.max(v);
                    if v < best - 60.0 {
                        break;
                    }
                    step *= 2.0;
                    x = anchor - step;
                    if step > 1e12 {
                        return Err(Error::Numerical("density mass escapes the lower support scan".into()));
                    }
                }
                lo = x;
            }
            step = 1.0;
            if !hi.is_finite() {
                let mut x = anchor + step;
                let mut best = ref_ld;
                loop {
                    let v = logdensity(x);
                    best = best.max(v);
                    if v < best - 60.0 {
                        break;
                    }
                    step *= 2.0;
                    x = anchor + step;
                    if step > 1e12 {
                        return Err(Error::Numerical("density mass escapes the upper support scan".into()));
                    }
                }
                hi = x;
            }
        }

        let tabulate = |lo: f64, hi: f64| -> (Vec<f64>, Vec<f64>) {
            let h = (hi - lo) / (gridsize - 1) as f64;
            let xs: Vec<f64> = (0..gridsize).map(|i| lo + h * i as f64).collect();
            let ld: Vec<f64> = xs.iter().map(|&x| logdensity(x)).collect();
            (xs, ld)
        };

        let (mut xs, mut ld) = tabulate(lo, hi);
        for _ in 0..60 {
            let max = ld.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Numerical("log density has no finite value on the grid".into()));
            }
            let first = ld.iter().position(|&v| v > max - 40.0).unwrap();
            let last = ld.iter().rposition(|&v| v > max - 40.0).unwrap();
            if last - first >= gridsize / 8 {
                break;
            }
            let nlo = xs[first.saturating_sub(1)];
            let nhi = xs[(last + 1).min(gridsize - 1)];
            if nhi - nlo <= 0.0 {
                break;
            }
            let t = tabulate(nlo, nhi);
            xs = t.0;
            ld = t.1;
        }
        let max = ld.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dens: Vec<f64> = ld.iter().map(|&v| if v.is_finite() { (v - max).exp() } else { 0.0 }).collect();
        let mut cum = vec![0.0; gridsize];
        for i in 1..gridsize {
            cum[i] = cum[i - 1] + 0.5 * (dens[i - 1] + dens[i]) * (xs[i] - xs[i - 1]);
        }
        let total = cum[gridsize - 1];
        if !(total > 0.0) {
            return Err(Error::Numerical("grid captured no probability mass".into()));
        }
        // Second differences of the density bound the interpolation error.
        let h = xs[1] - xs[0];
        let mut curv = 0.0f64;
        for i in 1..gridsize - 1 {
            curv = curv.max((dens[i + 1] - 2.0 * dens[i] + dens[i - 1]).abs() / (h * h));
        }
        let tv_bound = curv * h * h * (xs[gridsize - 1] - xs[0]) / (8.0 * total);
        Ok(Self { nodes: xs, dens, cum, tv_bound })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> GridDraw {
        let total = *self.cum.last().unwrap();
        let u: f64 = rng.sample(Open01);
        let target = u * total;
        let k = match self.cum.binary_search_by(|c| c.partial_cmp(&target).unwrap()) {
            Ok(i) => i.min(self.nodes.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.nodes.len() - 2),
        };
        let (x0, x1) = (self.nodes[k], self.nodes[k + 1]);
        let (d0, d1) = (self.dens[k], self.dens[k + 1]);
        let h = x1 - x0;
        let r = target - self.cum[k];
        // Invert the CDF of the linear density on [x0, x1].
        let slope = (d1 - d0) / h;
        let t = if slope.abs() < 1e-300 * d0.max(1e-300) || slope == 0.0 {
            if d0 > 0.0 {
                r / d0
            } else {
                0.0
            }
        } else {
            let disc = (d0 * d0 + 2.0 * slope * r).max(0.0);
            (disc.sqrt() - d0) / slope
        };
        GridDraw {
            value: (x0 + t.clamp(0.0, h)).clamp(x0, x1),
            tv_bound: self.tv_bound,
            lo: self.nodes[0],
            hi: *self.nodes.last().unwrap(),
        }
    }
}

/// One-shot grid inverse-CDF draw.
pub fn grid_inverse_cdf<F: Fn(f64) -> f64, R: Rng + ?Sized>(
    logdensity: F,
    support: Interval,
    gridsize: usize,
    rng: &mut R,
) -> Result<GridDraw> {
    Ok(GridSampler::new(logdensity, support, gridsize)?.sample(rng))
}
