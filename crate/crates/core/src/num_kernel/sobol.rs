//! Sobol low-discrepancy points with Joe–Kuo direction numbers.

use crate::error::{Error, Result};
use crate::num_kernel::linalg::Matrix;

const BITS: usize = 32;

/// `(degree s, coefficient a, initial m_1..m_s)` for dimensions 2, 3, …
const JOE_KUO: [(u32, u32, &[u32]); 19] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
    (6, 19, &[1, 1, 1, 15, 7, 5]),
    (6, 22, &[1, 3, 1, 15, 13, 25]),
    (6, 25, &[1, 1, 5, 5, 19, 61]),
    (7, 1, &[1, 3, 7, 11, 23, 15, 103]),
];

/// Largest supported dimension.
pub const MAX_SOBOL_DIMS: usize = JOE_KUO.len() + 1;

fn directions(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (k, vk) in v.iter_mut().enumerate() {
            *vk = 1 << (BITS - 1 - k);
        }
        return v;
    }
    let (s, a, m) = JOE_KUO[dim - 1];
    let s = s as usize;
    for k in 0..BITS {
        v[k] = if k < s {
            m[k] << (BITS - 1 - k)
        } else {
            let mut x = v[k - s] ^ (v[k - s] >> s);
            for j in 1..s {
                if (a >> (s - 1 - j)) & 1 == 1 {
                    x ^= v[k - j];
                }
            }
            x
        };
    }
    v
}

/// `count` consecutive Sobol points (starting at index 1) mapped into `bounds`.
pub fn sobol_points(count: usize, bounds: &[(f64, f64)]) -> Result<Matrix<f64>> {
    sobol_points_from(1, count, bounds)
}

/// `count` consecutive Sobol points starting at sequence index `start`.
pub fn sobol_points_from(start: usize, count: usize, bounds: &[(f64, f64)]) -> Result<Matrix<f64>> {
    let dims = bounds.len();
    if dims == 0 || dims > MAX_SOBOL_DIMS {
        return Err(Error::UnsupportedDimension { dims, max: MAX_SOBOL_DIMS });
    }
    for &(lo, hi) in bounds {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Domain(format!("Sobol bounds [{lo}, {hi}]")));
        }
    }
    let v: Vec<[u32; BITS]> = (0..dims).map(directions).collect();
    let mut x = vec![0u32; dims];
    let mut out = Matrix::zeros(count, dims);
    let scale = 1.0 / (1u64 << BITS) as f64;
    let end = start + count;
    for n in 1..end {
        let c = (n - 1).trailing_ones() as usize;
        for d in 0..dims {
            x[d] ^= v[d][c];
        }
        if n >= start {
            let row = out.row_mut(n - start);
            for d in 0..dims {
                let (lo, hi) = bounds[d];
                row[d] = lo + (hi - lo) * (x[d] as f64 * scale);
            }
        }
    }
    Ok(out)
}
