//! Adaptive Gauss–Kronrod (7/15) integration.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_8,
];
const WG: [f64; 4] = [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

/// Integral estimate with its error estimate and evaluation count.
#[derive(Clone, Copy, Debug)]
pub struct Quadrature {
    pub value: f64,
    pub abs_error: f64,
    pub evaluations: usize,
}

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Integrates `f` over a finite `[a, b]` to the requested tolerances.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> Result<Quadrature> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Precondition("integrate requires finite limits".into()));
    }
    if a == b {
        return Ok(Quadrature { value: 0.0, abs_error: 0.0, evaluations: 0 });
    }
    let mut stack = vec![(a, b, gk15(&mut f, a, b))];
    let mut evaluations = 15;
    let mut done_value = 0.0;
    let mut done_err = 0.0;
    let max_intervals = 20_000;
    let mut processed = 0;
    while let Some((lo, hi, (val, err))) = stack.pop() {
        let total_estimate = done_value + val + stack.iter().map(|s| s.2 .0).sum::<f64>();
        let local_tol = (abs_tol.max(rel_tol * total_estimate.abs())) * (hi - lo) / (b - a);
        if err <= local_tol || (hi - lo) < 1e-14 * (b - a).abs() {
            done_value += val;
            done_err += err;
            continue;
        }
        processed += 1;
        if processed > max_intervals {
            return Err(Error::Numerical(format!("quadrature did not converge on [{a}, {b}] (error {err:e})")));
        }
        let mid = 0.5 * (lo + hi);
        let left = gk15(&mut f, lo, mid);
        let right = gk15(&mut f, mid, hi);
        evaluations += 30;
        stack.push((lo, mid, left));
        stack.push((mid, hi, right));
    }
    Ok(Quadrature { value: done_value, abs_error: done_err, evaluations })
}

/// Integrates over the whole real line via `x = t / (1 - t²)`.
pub fn integrate_real_line<F: FnMut(f64) -> f64>(mut f: F, abs_tol: f64, rel_tol: f64) -> Result<Quadrature> {
    integrate(
        |t| {
            let d = 1.0 - t * t;
            if d <= 0.0 {
                return 0.0;
            }
            let x = t / d;
            let jac = (1.0 + t * t) / (d * d);
            let v = f(x) * jac;
            if v.is_finite() {
                v
            } else {
                0.0
            }
        },
        -1.0,
        1.0,
        abs_tol,
        rel_tol,
    )
}
