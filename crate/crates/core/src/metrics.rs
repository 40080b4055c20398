//! Observables and run statistics.

use serde::{Deserialize, Serialize};

use crate::dynamics::SimState;
use crate::error::{Error, Result};
use crate::v2v::KnowledgeBase;

/// Global knowledge over time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSeries {
    pub times: Vec<f64>,
    pub k_n: Vec<f64>,
    pub n_a: Vec<usize>,
}

impl KnowledgeSeries {
    pub fn push(&mut self, t: f64, k_n: f64, n_a: usize) {
        self.times.push(t);
        self.k_n.push(k_n);
        self.n_a.push(n_a);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "t,n_active,k_n")?;
        for i in 0..self.len() {
            writeln!(out, "{:.3},{},{}", self.times[i], self.n_a[i], self.k_n[i])?;
        }
        Ok(())
    }
}

/// Mean number of active cars known per active car; `kbs[i]` belongs to
/// `state.cars[i]`.
pub fn knowledge_indicator(state: &SimState, kbs: &[KnowledgeBase]) -> f64 {
    let mut known = 0usize;
    let mut active = 0usize;
    for (car, kb) in state.cars.iter().zip(kbs) {
        if !car.active {
            continue;
        }
        active += 1;
        known += kb
            .subjects()
            .filter(|s| state.car(*s).is_some_and(|c| c.active))
            .count();
    }
    if active == 0 {
        0.0
    } else {
        known as f64 / active as f64
    }
}

/// Running means `(1/r) Σ_{i≤r} x_i`.
pub fn cumulative_average(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("cumulative average of an empty sequence".into()));
    }
    let mut sum = 0.0;
    Ok(values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            sum += v;
            sum / (i + 1) as f64
        })
        .collect())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (divisor `r - 1`).
pub fn sample_std(values: &[f64]) -> f64 {
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() as f64 - 1.0)).sqrt()
}

/// Half-width `t_{α/2, r-1} σ / √r` of the two-sided `1 - α` confidence
/// interval for the mean.
pub fn confidence_halfwidth(values: &[f64], alpha: f64) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::InvalidParameter("at least two values are needed".into()));
    }
    halfwidth_for(sample_std(values), values.len(), alpha)
}

fn halfwidth_for(sigma: f64, r: usize, alpha: f64) -> Result<f64> {
    if sigma == 0.0 {
        return Ok(0.0);
    }
    Ok(student_t_quantile(alpha, (r - 1) as f64)? * sigma / (r as f64).sqrt())
}

/// Smallest run count whose half-width, with the pilot's standard
/// deviation, is at most `target_eps`.
pub fn required_runs(pilot: &[f64], alpha: f64, target_eps: f64) -> Result<usize> {
    if pilot.len() < 2 {
        return Err(Error::InvalidParameter("pilot needs at least two values".into()));
    }
    if !(target_eps > 0.0) {
        return Err(Error::InvalidParameter("target half-width must be positive".into()));
    }
    let sigma = sample_std(pilot);
    let ok = |r: usize| halfwidth_for(sigma, r, alpha).map(|e| e <= target_eps);
    if ok(2)? {
        return Ok(2);
    }
    let mut hi = 4usize;
    while !ok(hi)? {
        hi = hi.checked_mul(2).ok_or_else(|| Error::InvalidParameter("target out of reach".into()))?;
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `t` with `P(|T_ν| > t) = α`, found by bisection on the two-sided tail
/// `I_{ν/(ν+t²)}(ν/2, 1/2)`.
pub fn student_t_quantile(alpha: f64, nu: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if !(nu > 0.0) {
        return Err(Error::InvalidParameter(format!("degrees of freedom must be positive, got {nu}")));
    }
    let tail = |t: f64| regularized_incomplete_beta(nu / 2.0, 0.5, nu / (nu + t * t));
    let mut lo = 0.0;
    let mut hi = 1.0;
    while tail(hi) > alpha {
        hi *= 2.0;
    }
    while hi - lo > 1e-12 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if tail(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Lanczos approximation (g = 7, n = 9) of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `I_x(a, b)` via the continued fraction (modified Lentz).
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp() * beta_cf(a, b, x)) / a
    } else {
        1.0 - (ln_front.exp() * beta_cf(b, a, 1.0 - x)) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}
