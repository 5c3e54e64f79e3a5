//! Order statistics for summaries.

use serde::{Deserialize, Serialize};

/// Linear-interpolation percentile (`p` in [0, 100]) of the finite values; NaN when there are none.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    percentile(values, 50.0)
}

pub fn mean(values: &[f64]) -> f64 {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub const BANDS: [f64; 5] = [5.0, 25.0, 50.0, 75.0, 95.0];

/// Band percentiles plus extremes and the count of finite values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub count: usize,
    #[serde(with = "hgp_core::float_serde")]
    pub min: f64,
    #[serde(with = "hgp_core::float_serde")]
    pub p5: f64,
    #[serde(with = "hgp_core::float_serde")]
    pub p25: f64,
    #[serde(with = "hgp_core::float_serde")]
    pub p50: f64,
    #[serde(with = "hgp_core::float_serde")]
    pub p75: f64,
    #[serde(with = "hgp_core::float_serde")]
    pub p95: f64,
    #[serde(with = "hgp_core::float_serde")]
    pub max: f64,
    #[serde(with = "hgp_core::float_serde")]
    pub mean: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Self {
        let b = BANDS.map(|p| percentile(values, p));
        Self {
            count: values.iter().filter(|x| x.is_finite()).count(),
            min: percentile(values, 0.0),
            p5: b[0],
            p25: b[1],
            p50: b[2],
            p75: b[3],
            p95: b[4],
            max: percentile(values, 100.0),
            mean: mean(values),
        }
    }

    pub const HEADER: [&'static str; 9] = ["count", "min", "p5", "p25", "p50", "p75", "p95", "max", "mean"];

    pub fn fields(&self) -> Vec<String> {
        std::iter::once(self.count.to_string()).chain([self.min, self.p5, self.p25, self.p50, self.p75, self.p95, self.max, self.mean].iter().map(|v| format!("{v}"))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolated_percentiles() {
        let v = [4.0, 1.0, f64::NAN, 3.0, 2.0];
        assert_eq!(median(&v), 2.5);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert!((percentile(&v, 25.0) - 1.75).abs() < 1e-15);
        assert!(median(&[f64::NAN]).is_nan());
        let q = Quantiles::of(&v);
        assert_eq!((q.count, q.mean), (4, 2.5));
    }
}
