//! Regularized incomplete beta function, its inverse, and the exact binomial bound.

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
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

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let s = (std::f64::consts::PI * x).sin();
        return (std::f64::consts::PI / s).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(x: f64, a: f64, b: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
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
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
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
        if (del - 1.0).abs() < 1e-16 {
            return Ok(h);
        }
    }
    Err(Error::NonConvergence { what: "incomplete beta continued fraction", iterations: 10_000 })
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn reg_inc_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain(format!("incomplete beta shape parameters a={a}, b={b}")));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("incomplete beta argument x={x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok((ln_front.exp() * beta_cf(x, a, b)? / a).clamp(0.0, 1.0))
    } else {
        Ok((1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a)? / b).clamp(0.0, 1.0))
    }
}

fn beta_density(x: f64, a: f64, b: f64) -> f64 {
    ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b)).exp()
}

/// Inverse of `x ↦ I_x(a, b)` by bracketed Newton with bisection fallback.
pub fn betainv(p: f64, a: f64, b: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("betainv probability p={p}")));
    }
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Domain(format!("betainv shape parameters a={a}, b={b}")));
    }
    if b == 1.0 {
        return Ok(p.powf(1.0 / a));
    }
    if a == 1.0 {
        return Ok(1.0 - (1.0 - p).powf(1.0 / b));
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut x = (a / (a + b)).clamp(1e-6, 1.0 - 1e-6);
    for _ in 0..100 {
        let f = reg_inc_beta(x, a, b)? - p;
        if f.abs() <= 1e-15 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= 4.0 * f64::EPSILON * x.max(1e-300) {
            return Ok(x);
        }
        let dens = beta_density(x, a, b);
        let newton = x - f / dens;
        x = if dens.is_finite() && dens > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Err(Error::NonConvergence { what: "betainv", iterations: 100 })
}

/// One-sided exact (Clopper-Pearson) lower confidence bound on a success probability.
///
/// `beta_hat` is the observed success fraction over `samples` trials. With
/// `literal_order` the shape parameters are swapped to `(S+1-m, m)`.
pub fn confidence_lower_bound(beta_hat: f64, samples: usize, alpha: f64, literal_order: bool) -> Result<f64> {
    if samples == 0 || !(0.0..=1.0).contains(&beta_hat) || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("confidence bound inputs beta={beta_hat}, S={samples}, alpha={alpha}")));
    }
    let s = samples as f64;
    let m_real = s * beta_hat;
    let m = m_real.round();
    if (m - m_real).abs() > 1e-9 * s.max(1.0) {
        return Err(Error::Domain(format!("S*beta = {m_real} is not an integer count")));
    }
    if m == 0.0 {
        return Ok(0.0);
    }
    if literal_order {
        betainv(alpha, s + 1.0 - m, m)
    } else {
        betainv(alpha, m, s - m + 1.0)
    }
}
