//! Test-only oracles shared by the integration suites.
//!
//! Everything here recomputes quantities by an independent route (dense
//! matrices, central finite differences) so it can check the block-structured
//! analytic implementation.
#![allow(dead_code)]

use lmmderiv::datasets::{sleepstudy, sleepstudy_spec};
use lmmderiv::model::g_from_sigma2;
use lmmderiv::simulate::{simulate, SimulationSpec};
use lmmderiv::{build_design, DesignMatrices, ParamVector};
use lmmderiv::nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn sleepstudy_design() -> DesignMatrices {
    let spec = sleepstudy_spec();
    build_design(&sleepstudy(&spec).unwrap(), &spec).unwrap()
}

/// Central-difference step, scaled by the coordinate's magnitude.
pub fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let h = fd_step(x[i]);
        let mut up = x.clone();
        let mut dn = x.clone();
        up[i] += h;
        dn[i] -= h;
        (f(&up) - f(&dn)) / (2.0 * h)
    })
}

/// Column `i` holds the central difference of `g` along coordinate `i`.
pub fn fd_jacobian(g: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    let mut out = DMatrix::zeros(g(x).len(), n);
    for i in 0..n {
        let h = fd_step(x[i]);
        let mut up = x.clone();
        let mut dn = x.clone();
        up[i] += h;
        dn[i] -= h;
        out.set_column(i, &((g(&up) - g(&dn)) / (2.0 * h)));
    }
    out
}

/// `|a − b| ≤ tol · max(1, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Match against a value printed with two decimals: relative `rel`, or within
/// half a unit in the last printed digit.
pub fn matches_printed(ours: f64, printed: f64, rel: f64) -> bool {
    (ours - printed).abs() <= (rel * printed.abs()).max(0.005)
}

/// Small random design: J ∈ 3..=6 clusters of 2..=6 rows, q_c ∈ {1, 2}.
pub fn random_instance(seed: u64) -> DesignMatrices {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = rng.random_range(3..=6);
    let sizes: Vec<usize> = (0..clusters).map(|_| rng.random_range(2..=6)).collect();
    let q_c = rng.random_range(1..=2);
    let g = if q_c == 1 {
        DMatrix::from_element(1, 1, 0.8)
    } else {
        DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5])
    };
    let spec = SimulationSpec {
        cluster_sizes: sizes,
        beta: vec![1.0, -0.5],
        g,
        resid_var: 0.7,
        seed: seed.wrapping_mul(7919),
    };
    simulate(&spec).unwrap().design().unwrap()
}

/// A random parameter point with strictly positive definite `G_c`.
pub fn random_point(design: &DesignMatrices, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let q = design.q_c();
    let beta = DVector::from_fn(design.p(), |_, _| rng.random_range(-2.0..2.0));
    let l = DMatrix::from_fn(q, q, |a, b| match a.cmp(&b) {
        std::cmp::Ordering::Less => 0.0,
        std::cmp::Ordering::Equal => rng.random_range(0.4..1.5),
        std::cmp::Ordering::Greater => rng.random_range(-0.5..0.5),
    });
    let g = &l * l.transpose();
    let mut sigma2 = DVector::zeros(design.k());
    let mut k = 0;
    for a in 0..q {
        for b in 0..=a {
            sigma2[k] = g[(a, b)];
            k += 1;
        }
    }
    sigma2[k] = rng.random_range(0.3..1.5);
    ParamVector::new(beta, sigma2, design).unwrap()
}

pub fn with_vector(design: &DesignMatrices, v: &DVector<f64>) -> ParamVector {
    ParamVector::from_vector(v, design).unwrap()
}

/// Dense `n x n` marginal covariance `Z (I_J ⊗ G_c) Zᵀ + σ_r² I`, original row order.
pub fn dense_v(design: &DesignMatrices, sigma2: &DVector<f64>) -> DMatrix<f64> {
    let g = g_from_sigma2(sigma2, design.q_c());
    let j = design.n_clusters();
    let qc = design.q_c();
    let mut big_g = DMatrix::zeros(j * qc, j * qc);
    for c in 0..j {
        big_g.view_mut((c * qc, c * qc), (qc, qc)).copy_from(&g);
    }
    let z = design.z_dense();
    let n = design.n();
    &z * big_g * z.transpose() + DMatrix::identity(n, n) * sigma2[sigma2.len() - 1]
}

/// Whole-matrix Gaussian log-density of `y` under `N(Xβ, V)`.
pub fn dense_loglik(design: &DesignMatrices, params: &ParamVector) -> f64 {
    let v = dense_v(design, params.sigma2());
    let chol = Cholesky::new(v).expect("dense V not PD");
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let r = design.y() - design.x() * params.beta();
    let quad = r.dot(&chol.solve(&r));
    let n = design.n() as f64;
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
}

/// Sleepstudy ML optimum from an independent dense Newton solve on the analytic gradient.
pub const SLEEP_ML_SIGMA2: [f64; 4] = [565.5153668031188, 11.055429022598641, 32.682197186409354, 654.9410270722988];
pub const SLEEP_REML_SIGMA2: [f64; 4] = [612.0899386625244, 9.604333316743983, 35.07166049831745, 654.941027072299];
pub const SLEEP_BETA: [f64; 2] = [251.40510484848483, 10.467285959595955];
pub const SLEEP_ML_LOGLIK: f64 = -875.9696722316;
pub const SLEEP_REML_LOGLIK: f64 = -871.8141359792;

pub const SLEEP_NAMES: [&str; 6] = [
    "(Intercept)",
    "Days",
    "cov_Subject.(Intercept)",
    "cov_Subject.Days.(Intercept)",
    "cov_Subject.Days",
    "residual",
];

/// Expected-information covariance of the sleepstudy ML fit, lower triangle (row, col, value).
pub const PUBLISHED_VCOV: [(usize, usize, f64); 21] = [
    (0, 0, 43.99),
    (1, 0, -1.37),
    (1, 1, 2.26),
    (2, 0, 0.0),
    (2, 1, 0.0),
    (2, 2, 70366.08),
    (3, 0, 0.0),
    (3, 1, 0.0),
    (3, 2, -2282.47),
    (3, 3, 1838.33),
    (4, 0, 0.0),
    (4, 1, 0.0),
    (4, 2, 92.56),
    (4, 3, -115.28),
    (4, 4, 184.21),
    (5, 0, 0.0),
    (5, 1, 0.0),
    (5, 2, -2058.08),
    (5, 3, 324.96),
    (5, 4, -72.21),
    (5, 5, 5957.61),
];

/// Cluster-robust sandwich of the sleepstudy ML fit, lower triangle.
pub const PUBLISHED_SANDWICH: [(usize, usize, f64); 21] = [
    (0, 0, 43.99),
    (1, 0, -1.37),
    (1, 1, 2.26),
    (2, 0, -523.40),
    (2, 1, -56.09),
    (2, 2, 45232.13),
    (3, 0, -20.77),
    (3, 1, 0.18),
    (3, 2, 1055.38),
    (3, 3, 1862.99),
    (4, 0, -5.92),
    (4, 1, -1.98),
    (4, 2, 427.39),
    (4, 3, -89.28),
    (4, 4, 137.89),
    (5, 0, 149.15),
    (5, 1, 78.71),
    (5, 2, -27398.62),
    (5, 3, 1214.37),
    (5, 4, -492.56),
    (5, 5, 43229.03),
];
