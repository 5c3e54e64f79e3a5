use hgp_bioreactor::plant::{light_quadrature, plant_rhs, BioreactorParams};
use hgp_core::num_kernel::RngStream;
use proptest::prelude::*;

/// Composite Simpson rule of the depth-averaged growth rate.
fn simpson_growth(i0: f64, c_x: f64, p: &BioreactorParams) -> f64 {
    let n = 4000;
    let h = p.width / n as f64;
    let f = |z: f64| {
        let i = i0 * (-(p.alpha_p * c_x + p.beta_p) * z).exp();
        i / (i + p.k_s + i * i / p.k_i)
    };
    let inner: f64 = (1..n).map(|k| if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h)).sum();
    p.mu_max / p.width * h / 3.0 * (f(0.0) + inner + f(p.width))
}

fn balances_oracle(x: [f64; 4], u: [f64; 2], p: &BioreactorParams) -> [f64; 4] {
    let [c_x, c_n, q, fa] = x;
    let mu = simpson_growth(u[0], c_x, p);
    let monod = c_n / (c_n + p.k_n);
    let droop = 1.0 - p.k_q / q;
    [
        2.0 * mu * droop * monod * c_x - p.mu_d * c_x,
        -p.mu_n * monod * c_x + u[1],
        p.mu_n * monod - mu * droop * q,
        mu * (p.theta_p * q - p.eps_p * fa) * droop - p.gamma_p * p.mu_n * monod * c_x,
    ]
}

#[test]
fn rhs_matches_simpson_oracle() {
    let p = BioreactorParams::default();
    let mut rng = RngStream::new(17, 0);
    for _ in 0..100 {
        let x = [3.0 * rng.uniform(), 800.0 * rng.uniform(), 0.5 + 600.0 * rng.uniform(), 3500.0 * rng.uniform()];
        let u = [120.0 + 180.0 * rng.uniform(), 10.0 * rng.uniform()];
        let got = plant_rhs(&x, &u, &p).unwrap();
        for (g, w) in got.iter().zip(balances_oracle(x, u, &p)) {
            assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()), "{x:?} {u:?}: {g} vs {w}");
        }
    }
}

#[test]
fn zero_quota_is_rejected() {
    assert!(plant_rhs(&[1.0, 10.0, 0.0, 0.0], &[150.0, 1.0], &BioreactorParams::default()).is_err());
}

proptest! {
    #[test]
    fn growth_rate_is_bounded_by_the_light_optimum(i0 in 0.0f64..2000.0, c_x in 0.0f64..20.0) {
        let p = BioreactorParams::default();
        let mu = light_quadrature(i0, c_x, &p);
        let peak = p.mu_max / (1.0 + 2.0 * (p.k_s / p.k_i).sqrt());
        prop_assert!(mu >= 0.0 && mu <= peak * (1.0 + 1e-12));
    }

    #[test]
    fn denser_culture_only_shades_below_the_optimum(i0 in 1.0f64..95.0, c_x in 0.0f64..5.0, extra in 0.01f64..5.0) {
        // below the optimal intensity every layer grows slower when it gets less light
        let p = BioreactorParams::default();
        prop_assert!(light_quadrature(i0, c_x + extra, &p) < light_quadrature(i0, c_x, &p));
    }
}
