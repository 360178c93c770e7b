//! Matérn SPDE spatial precisions, AR(1) temporal precisions and their
//! separable space-time product, with factorized solve/sample/variance support.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::cholesky::Cholesky;
use crate::error::{Error, Result};
use crate::mesh::FemMatrices;
use crate::sparse::{SymMatrix, Triplets};

/// Matérn field with smoothness fixed at one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternParams {
    pub sigma2_omega: f64,
    pub rho: f64,
}

impl MaternParams {
    pub fn new(sigma2_omega: f64, rho: f64) -> Result<Self> {
        if !(sigma2_omega > 0.0) || !(rho > 0.0) || !sigma2_omega.is_finite() || !rho.is_finite() {
            return Err(Error::InvalidInput(format!(
                "Matérn parameters must be positive, got variance {sigma2_omega} and range {rho}"
            )));
        }
        Ok(Self { sigma2_omega, rho })
    }

    /// `κ = √8 / ρ`.
    pub fn kappa(&self) -> f64 {
        8f64.sqrt() / self.rho
    }

    /// SPDE scale with `σ²_ω = 1 / (4π κ² τ²)`.
    pub fn tau2(&self) -> f64 {
        let k = self.kappa();
        1.0 / (4.0 * std::f64::consts::PI * k * k * self.sigma2_omega)
    }
}

/// Modified Bessel function of the second kind, order one, for `x > 0`.
///
/// Power series below 2; Steed's continued fraction above.
pub fn bessel_k1(x: f64) -> f64 {
    assert!(x > 0.0, "K1 requires a positive argument");
    if x <= 2.0 {
        const EULER: f64 = 0.577_215_664_901_532_9;
        let y = 0.25 * x * x;
        let (mut term_i, mut term_k) = (0.5 * x, 1.0);
        let mut i1 = 0.0;
        let mut sum = 0.0;
        let mut harmonic = 0.0;
        for k in 0..60 {
            let kf = k as f64;
            if k > 0 {
                term_i *= y / (kf * (kf + 1.0));
                term_k *= y / (kf * (kf + 1.0));
                harmonic += 1.0 / kf;
            }
            i1 += term_i;
            // ψ(k+1) + ψ(k+2) = 2(H_k − γ) + 1/(k+1)
            let psi = 2.0 * (harmonic - EULER) + 1.0 / (kf + 1.0);
            let contrib = psi * term_k;
            sum += contrib;
            if contrib.abs() < 1e-18 * sum.abs() && term_i < 1e-18 * i1 {
                break;
            }
        }
        1.0 / x + (0.5 * x).ln() * i1 - 0.25 * x * sum
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut delh = d;
        let mut h = d;
        let (mut q1, mut q2) = (0.0, 1.0);
        let a1 = 0.25;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 2..10_000 {
            let fi = i as f64;
            a -= 2.0 * (fi - 1.0);
            c = -a * c / fi;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh *= b * d - 1.0;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < 1e-16 {
                break;
            }
        }
        h *= a1;
        let k0 = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp() / s;
        k0 * (x + 0.5 - h) / x
    }
}

/// Matérn covariance with smoothness one: `σ² (κd) K₁(κd)`.
pub fn matern_cov(distance: f64, p: &MaternParams) -> f64 {
    assert!(distance >= 0.0, "distance must be non-negative");
    let u = p.kappa() * distance;
    if u == 0.0 {
        return p.sigma2_omega;
    }
    // u·K1(u) underflows past ~700; the covariance is zero to double precision.
    if u > 700.0 {
        return 0.0;
    }
    p.sigma2_omega * u * bessel_k1(u)
}

/// `C̃`, `G` and `G C̃⁻¹ G` aligned on one shared pattern.
///
/// The precision for any `(κ, τ)` is an elementwise combination of the three
/// value arrays, so every `Q` built from one operator has an identical pattern.
#[derive(Debug, Clone)]
pub struct SpdeOperator {
    pattern: SymMatrix,
    c: Vec<f64>,
    g: Vec<f64>,
    gcg: Vec<f64>,
}

impl SpdeOperator {
    pub fn new(fem: &FemMatrices) -> Self {
        let n = fem.c_lumped.len();
        let g = fem.g.csc();
        let mut gcg = Triplets::with_capacity(n, n, 4 * g.nnz());
        for j in 0..n {
            for (k, gkj) in g.column(j) {
                let scaled = gkj / fem.c_lumped[k];
                for (i, gik) in g.column(k).filter(|&(i, _)| i <= j) {
                    gcg.push_sym(i, j, gik * scaled);
                }
            }
        }
        for j in 0..n {
            for (i, v) in g.column(j) {
                gcg.push(i, j, 0.0 * v);
            }
        }
        let gcg = gcg.to_sym().expect("G C⁻¹ G is symmetric");
        let csc = gcg.csc();
        let mut c = vec![0.0; csc.nnz()];
        let mut gv = vec![0.0; csc.nnz()];
        for j in 0..n {
            let start = csc.col_ptr()[j];
            for (off, &i) in csc.row_idx()[start..csc.col_ptr()[j + 1]].iter().enumerate() {
                if i == j {
                    c[start + off] = fem.c_lumped[j];
                }
                gv[start + off] = fem.g.get(i, j);
            }
        }
        let gcg_vals = csc.values().to_vec();
        Self {
            pattern: gcg,
            c,
            g: gv,
            gcg: gcg_vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.pattern.dim()
    }

    /// `τ² (κ⁴ C̃ + 2κ² G + G C̃⁻¹ G)`.
    pub fn precision_matrix(&self, p: &MaternParams) -> SymMatrix {
        let (k2, tau2) = (p.kappa().powi(2), p.tau2());
        let mut q = self.pattern.clone();
        for (idx, v) in q.values_mut().iter_mut().enumerate() {
            *v = tau2 * (k2 * k2 * self.c[idx] + 2.0 * k2 * self.g[idx] + self.gcg[idx]);
        }
        q
    }
}

/// A symmetric positive-definite precision together with its factorization.
#[derive(Debug, Clone)]
pub struct SparsePrecision {
    matrix: SymMatrix,
    factor: Cholesky,
}

impl SparsePrecision {
    pub fn new(matrix: SymMatrix) -> Result<Self> {
        let factor = Cholesky::factor(&matrix)?;
        Ok(Self { matrix, factor })
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.matrix
    }

    pub fn factor(&self) -> &Cholesky {
        &self.factor
    }

    pub fn log_det(&self) -> f64 {
        self.factor.log_det()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.factor.solve(b)
    }

    /// One draw from `N(0, Q⁻¹)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        sample(self, rng)
    }

    pub fn marginal_variances(&self) -> Vec<f64> {
        marginal_variances(self)
    }

    pub fn write_matrix_market<W: Write>(&self, w: W) -> std::io::Result<()> {
        self.matrix.write_matrix_market(w)
    }
}

pub fn spde_precision(fem: &FemMatrices, p: &MaternParams) -> Result<SparsePrecision> {
    SparsePrecision::new(SpdeOperator::new(fem).precision_matrix(p))
}

/// Tridiagonal unit-innovation stationary AR(1) precision.
pub fn ar1_matrix(varsigma: f64, n_times: usize) -> Result<SymMatrix> {
    if !(varsigma.abs() < 1.0) {
        return Err(Error::InvalidInput(format!(
            "AR(1) coefficient must satisfy |ς| < 1, got {varsigma}"
        )));
    }
    if n_times == 0 {
        return Err(Error::InvalidInput("AR(1) needs at least one time point".into()));
    }
    if n_times == 1 {
        return Ok(SymMatrix::from_diagonal(&[1.0 - varsigma * varsigma]));
    }
    let mut t = Triplets::with_capacity(n_times, n_times, 3 * n_times);
    for i in 0..n_times {
        let interior = i > 0 && i + 1 < n_times;
        t.push(i, i, if interior { 1.0 + varsigma * varsigma } else { 1.0 });
        if i + 1 < n_times {
            t.push_sym(i, i + 1, -varsigma);
        }
    }
    t.to_sym()
}

pub fn ar1_precision(varsigma: f64, n_times: usize) -> Result<SparsePrecision> {
    SparsePrecision::new(ar1_matrix(varsigma, n_times)?)
}

/// Kronecker product with time as the outer index: entry `(t·D + i, u·D + j)`
/// is `Qt[t,u] · Qs[i,j]`.
pub fn kron_matrix(qs: &SymMatrix, qt: &SymMatrix) -> SymMatrix {
    let (d, nt) = (qs.dim(), qt.dim());
    let n = d * nt;
    let mut trip = Triplets::with_capacity(n, n, qs.nnz() * qt.nnz());
    for u in 0..nt {
        for (t, a) in qt.csc().column(u) {
            for j in 0..d {
                for (i, b) in qs.csc().column(j) {
                    trip.push(t * d + i, u * d + j, a * b);
                }
            }
        }
    }
    trip.to_sym().expect("Kronecker product of symmetric matrices is symmetric")
}

pub fn kron_precision(qs: &SparsePrecision, qt: &SparsePrecision, max_dim: usize) -> Result<SparsePrecision> {
    let n = qs.dim().checked_mul(qt.dim()).unwrap_or(usize::MAX);
    if n > max_dim {
        return Err(Error::Resource(format!(
            "space-time dimension {} x {} exceeds the configured cap {max_dim}",
            qs.dim(),
            qt.dim()
        )));
    }
    SparsePrecision::new(kron_matrix(qs.matrix(), qt.matrix()))
}

/// Draw `x = Pᵀ L⁻ᵀ z` with `z` standard normal.
pub fn sample<R: Rng + ?Sized>(q: &SparsePrecision, rng: &mut R) -> Vec<f64> {
    let z: Vec<f64> = (0..q.dim()).map(|_| rng.sample(StandardNormal)).collect();
    q.factor.sample_from_normals(&z)
}

/// `diag(Q⁻¹)` by one triangular solve per column.
pub fn marginal_variances(q: &SparsePrecision) -> Vec<f64> {
    let all: Vec<usize> = (0..q.dim()).collect();
    q.factor.inverse_diagonal_at(&all)
}
