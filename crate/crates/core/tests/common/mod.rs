#![allow(dead_code)]

use stfuse::gmrf::{matern_cov, spde_precision, MaternParams};
use stfuse::mesh::{assemble_fem, build_mesh, rectangle, TriangularMesh};

pub fn nearest_vertex(mesh: &TriangularMesh, x: f64, y: f64) -> usize {
    let p = stfuse::Point2D::new(x, y);
    (0..mesh.n_vertices())
        .min_by(|&a, &b| mesh.vertices()[a].distance(&p).total_cmp(&mesh.vertices()[b].distance(&p)))
        .unwrap()
}

pub struct FidelityReport {
    pub max_abs_error: f64,
    pub n_pairs: usize,
}

/// Normalized SPDE covariances between the central node of a `4ρ`-wide
/// square and every node of the square at distance `[0.2ρ, 2ρ]`, compared
/// with the Matérn correlation.
pub fn spde_fidelity(rho: f64, sigma2: f64) -> FidelityReport {
    let width = 4.0 * rho;
    let buffer = 0.2 * width * std::f64::consts::SQRT_2;
    let mesh = build_mesh(&rectangle(0.0, 0.0, width, width), rho / 5.0, buffer).unwrap();
    let p = MaternParams::new(sigma2, rho).unwrap();
    let q = spde_precision(&assemble_fem(&mesh), &p).unwrap();
    let centre = nearest_vertex(&mesh, width / 2.0, width / 2.0);
    let column = q.factor().inverse_column(centre);
    let c = mesh.vertices()[centre];
    let targets: Vec<usize> = (0..mesh.n_vertices())
        .filter(|&i| {
            let v = mesh.vertices()[i];
            let d = v.distance(&c);
            (0.0..=width).contains(&v.x) && (0.0..=width).contains(&v.y) && d >= 0.2 * rho && d <= 2.0 * rho
        })
        .collect();
    let var = q.factor().inverse_diagonal_at(&targets);
    let var_c = column[centre];
    let mut max_abs_error: f64 = 0.0;
    for (k, &i) in targets.iter().enumerate() {
        let d = mesh.vertices()[i].distance(&c);
        let corr = column[i] / (var[k] * var_c).sqrt();
        let expected = matern_cov(d, &MaternParams::new(1.0, rho).unwrap());
        max_abs_error = max_abs_error.max((corr - expected).abs());
    }
    FidelityReport {
        max_abs_error,
        n_pairs: targets.len(),
    }
}

/// Distance along +x from the centre at which the SPDE correlation first drops below 0.1.
pub fn empirical_range(rho: f64, sigma2: f64, max_edge: f64) -> f64 {
    let width = 8.0;
    let mesh = build_mesh(&rectangle(0.0, 0.0, width, width), max_edge, 2.0).unwrap();
    let q = spde_precision(&assemble_fem(&mesh), &MaternParams::new(sigma2, rho).unwrap()).unwrap();
    let centre = nearest_vertex(&mesh, width / 2.0, width / 2.0);
    let c = mesh.vertices()[centre];
    let column = q.factor().inverse_column(centre);
    let mut ray: Vec<usize> = (0..mesh.n_vertices())
        .filter(|&i| {
            let v = mesh.vertices()[i];
            (v.y - c.y).abs() < 1e-9 && v.x >= c.x
        })
        .collect();
    ray.sort_by(|&a, &b| mesh.vertices()[a].x.total_cmp(&mesh.vertices()[b].x));
    let var = q.factor().inverse_diagonal_at(&ray);
    let corr: Vec<f64> = ray.iter().zip(&var).map(|(&i, v)| column[i] / (v * column[centre]).sqrt()).collect();
    for k in 1..ray.len() {
        if corr[k] < 0.1 {
            let (x0, x1) = (mesh.vertices()[ray[k - 1]].x, mesh.vertices()[ray[k]].x);
            let frac = (corr[k - 1] - 0.1) / (corr[k - 1] - corr[k]);
            return x0 + frac * (x1 - x0) - c.x;
        }
    }
    f64::INFINITY
}

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stfuse::gmrf::sample;
use stfuse::mesh::FemMatrices;
use stfuse::stage1::{ObservationSet, Stage1Fixed, Stage1Hyper};
use stfuse::stage2::{HealthData, Stage2Hyper};
use stfuse::Point2D;

pub struct DenseOracle {
    pub log_likelihood: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Dense SPDE precision `τ²(κ⁴C + 2κ²G + G C⁻¹ G)` built from the FEM matrices.
pub fn dense_spde(fem: &FemMatrices, sigma2: f64, rho: f64) -> DMatrix<f64> {
    let kappa = 8f64.sqrt() / rho;
    let tau2 = 1.0 / (4.0 * std::f64::consts::PI * kappa * kappa * sigma2);
    let g = fem.g.to_dense();
    let c = DMatrix::from_diagonal(&DVector::from_column_slice(&fem.c_lumped));
    let c_inv = DMatrix::from_diagonal(&DVector::from_iterator(
        fem.c_lumped.len(),
        fem.c_lumped.iter().map(|v| 1.0 / v),
    ));
    (&c * kappa.powi(4) + &g * (2.0 * kappa * kappa) + &g * c_inv * &g) * tau2
}

/// Stage-1 posterior by covariance-form Gaussian conditioning, with the copy
/// links written as conditional priors `x* | x` rather than as observations
/// and stationary AR(1) correlations `ς^|t−u| / (1−ς²)` in time.
///
/// With `tau0 = None` the pseudo-zero equations hold exactly: `x` is
/// replaced by `β₀ + β₁z + Bξ`, and its diffuse prior becomes a zero
/// observation of that combination with variance `1/τ_x`. Latent indices
/// follow the production layout: `x`, `x*`, `ξ` time-major, then `α₀, β₀, β₁`.
#[allow(clippy::too_many_arguments)]
pub fn dense_oracle(
    obs: &ObservationSet,
    fem: &FemMatrices,
    b: &DMatrix<f64>,
    hyper: &Stage1Hyper,
    tau0: Option<f64>,
    tau_x: f64,
    tau_xstar: f64,
    fixed_var: [f64; 3],
) -> DenseOracle {
    let (m, g, nt) = (obs.n_monitors(), obs.n_proxy(), obs.n_times());
    let n = m + g;
    let nd = b.ncols();
    let dim = 2 * n * nt + nd * nt + 3;
    let (ix, ixs, ixi) = (0, n * nt, 2 * n * nt);
    let (ia0, ib0, ib1) = (dim - 3, dim - 2, dim - 1);

    // η = (x or nothing, copy noise, ξ, fixed); χ = L η.
    let has_x = tau0.is_some();
    let eta_x = if has_x { n * nt } else { 0 };
    let (je, jxi, jf) = (eta_x, eta_x + n * nt, eta_x + n * nt + nd * nt);
    let ne = jf + 3;
    let mut s = DMatrix::<f64>::zeros(ne, ne);
    for k in 0..eta_x {
        s[(k, k)] = 1.0 / tau_x;
    }
    for k in 0..n * nt {
        s[(je + k, je + k)] = 1.0 / tau_xstar;
    }
    let qs_inv = dense_spde(fem, hyper.sigma2_omega, hyper.rho).try_inverse().unwrap();
    let phi = hyper.varsigma;
    for t in 0..nt {
        for u in 0..nt {
            let rt = phi.powi((t as i32 - u as i32).abs()) / (1.0 - phi * phi);
            for i in 0..nd {
                for j in 0..nd {
                    s[(jxi + t * nd + i, jxi + u * nd + j)] = rt * qs_inv[(i, j)];
                }
            }
        }
    }
    for k in 0..3 {
        s[(jf + k, jf + k)] = fixed_var[k];
    }

    let mut l = DMatrix::<f64>::zeros(dim, ne);
    for t in 0..nt {
        for i in 0..n {
            let xrow = ix + t * n + i;
            if has_x {
                l[(xrow, t * n + i)] = 1.0;
            } else {
                l[(xrow, jf + 1)] = 1.0;
                l[(xrow, jf + 2)] = obs.z[(i, t)];
                for k in 0..nd {
                    l[(xrow, jxi + t * nd + k)] = b[(i, k)];
                }
            }
        }
    }
    for k in 0..nd * nt {
        l[(ixi + k, jxi + k)] = 1.0;
    }
    for k in 0..3 {
        l[(ia0 + k, jf + k)] = 1.0;
    }
    for t in 0..nt {
        for i in 0..n {
            let a = if i < m { 1.0 } else { hyper.alpha1 };
            let row = l.row(ix + t * n + i) * a;
            l.set_row(ixs + t * n + i, &row);
            l[(ixs + t * n + i, je + t * n + i)] += 1.0;
        }
    }
    let sigma = &l * &s * l.transpose();

    let n_pz = n * nt;
    let rows = m * nt + g * nt + n_pz;
    let mut h = DMatrix::<f64>::zeros(rows, dim);
    let mut y = DVector::<f64>::zeros(rows);
    let mut noise = DVector::<f64>::zeros(rows);
    let mut r = 0;
    for t in 0..nt {
        for i in 0..m {
            h[(r, ixs + t * n + i)] = 1.0;
            y[r] = obs.w[(i, t)];
            noise[r] = hyper.sigma2_e;
            r += 1;
        }
        for j in 0..g {
            h[(r, ixs + t * n + m + j)] = 1.0;
            h[(r, ia0)] = 1.0;
            y[r] = obs.x_tilde[(j, t)];
            noise[r] = hyper.sigma2_delta;
            r += 1;
        }
        for i in 0..n {
            if has_x {
                h[(r, ix + t * n + i)] = -1.0;
            }
            h[(r, ib0)] = 1.0;
            h[(r, ib1)] = obs.z[(i, t)];
            for k in 0..nd {
                h[(r, ixi + t * nd + k)] = b[(i, k)];
            }
            noise[r] = tau0.map_or(1.0 / tau_x, |t0| 1.0 / t0);
            r += 1;
        }
    }
    let cov_y = &h * &sigma * h.transpose() + DMatrix::from_diagonal(&noise);
    let chol = cov_y.clone().cholesky().expect("observation covariance is positive definite");
    let alpha = chol.solve(&y);
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let log_likelihood =
        -0.5 * rows as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det - 0.5 * y.dot(&alpha);
    let sh = &sigma * h.transpose();
    let mean = &sh * alpha;
    let cov = &sigma - &sh * chol.solve(&sh.transpose());
    DenseOracle {
        log_likelihood,
        mean,
        cov,
    }
}

/// Synthetic stage-1 data set drawn from the model itself on its own mesh.
pub struct SimInstance {
    pub obs: ObservationSet,
    pub mesh: TriangularMesh,
    /// True latent `x` at the sites, sites × times.
    pub x: DMatrix<f64>,
}

/// Proxy cells on a `grid_side`² lattice over `[0, width]²`, monitors
/// uniform in the square, standard-normal covariate.
#[allow(clippy::too_many_arguments)]
pub fn simulate_instance(
    seed: u64,
    n_monitors: usize,
    grid_side: usize,
    n_times: usize,
    width: f64,
    max_edge: f64,
    hyper: &Stage1Hyper,
    fixed: &Stage1Fixed,
) -> SimInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mesh = build_mesh(&rectangle(0.0, 0.0, width, width), max_edge, 0.3 * width).unwrap();
    let cell = width / grid_side as f64;
    let centroids: Vec<Point2D> = (0..grid_side * grid_side)
        .map(|k| Point2D::new((k % grid_side) as f64 * cell + cell / 2.0, (k / grid_side) as f64 * cell + cell / 2.0))
        .collect();
    let monitors: Vec<Point2D> = (0..n_monitors)
        .map(|_| Point2D::new(rng.random_range(0.0..width), rng.random_range(0.0..width)))
        .collect();
    let sites: Vec<Point2D> = monitors.iter().chain(&centroids).copied().collect();
    let n = sites.len();
    let proj = stfuse::mesh::build_projector(&mesh, &sites).unwrap();
    let q = spde_precision(&assemble_fem(&mesh), &MaternParams::new(hyper.sigma2_omega, hyper.rho).unwrap()).unwrap();
    let mut xi = sample(&q, &mut rng);
    let stat = 1.0 / (1.0 - hyper.varsigma * hyper.varsigma).sqrt();
    xi.iter_mut().for_each(|v| *v *= stat);
    let z = DMatrix::from_fn(n, n_times, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut x = DMatrix::zeros(n, n_times);
    for t in 0..n_times {
        if t > 0 {
            let innov = sample(&q, &mut rng);
            for (v, e) in xi.iter_mut().zip(innov) {
                *v = hyper.varsigma * *v + e;
            }
        }
        let field = proj.apply(&xi);
        for i in 0..n {
            x[(i, t)] = fixed.beta0 + fixed.beta1 * z[(i, t)] + field[i];
        }
    }
    let se = hyper.sigma2_e.sqrt();
    let sd = hyper.sigma2_delta.sqrt();
    let w = DMatrix::from_fn(n_monitors, n_times, |i, t| x[(i, t)] + se * rng.sample::<f64, _>(StandardNormal));
    let x_tilde = DMatrix::from_fn(centroids.len(), n_times, |j, t| {
        fixed.alpha0 + hyper.alpha1 * x[(n_monitors + j, t)] + sd * rng.sample::<f64, _>(StandardNormal)
    });
    let obs = ObservationSet::new(monitors, w, centroids, x_tilde, z).unwrap();
    SimInstance { obs, mesh, x }
}

/// Dense covariance-form posterior of `(γ₀, γ₁, φ, ν)` under a Gaussian
/// likelihood, with the RW1 prior conditioned on `Σν = 0` through the
/// pseudo-inverse of its structure matrix.
pub struct Conjugate {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_marginal: f64,
}

pub fn conjugate_oracle(data: &HealthData, hyper: &Stage2Hyper, var0: f64, var1: f64, noise: f64) -> Conjugate {
    let (n, nt) = (data.n_blocks(), data.n_times());
    let d = 2 + n + nt;
    let mut r = DMatrix::<f64>::zeros(nt, nt);
    for t in 0..nt - 1 {
        r[(t, t)] += 1.0;
        r[(t + 1, t + 1)] += 1.0;
        r[(t, t + 1)] -= 1.0;
        r[(t + 1, t)] -= 1.0;
    }
    let eig = r.clone().symmetric_eigen();
    let mut r_pinv = DMatrix::<f64>::zeros(nt, nt);
    for k in 0..nt {
        let l = eig.eigenvalues[k];
        if l > 1e-9 {
            let v = eig.eigenvectors.column(k);
            r_pinv += (&v * v.transpose()) / l;
        }
    }
    let mut prior = DMatrix::<f64>::zeros(d, d);
    prior[(0, 0)] = var0;
    prior[(1, 1)] = var1;
    for i in 0..n {
        prior[(2 + i, 2 + i)] = hyper.sigma2_phi;
    }
    prior.view_mut((2 + n, 2 + n), (nt, nt)).copy_from(&(r_pinv * hyper.sigma2_nu));
    let m = n * nt;
    let mut a = DMatrix::<f64>::zeros(m, d);
    let mut resid = DVector::<f64>::zeros(m);
    for i in 0..n {
        for t in 0..nt {
            let row = i * nt + t;
            a[(row, 0)] = 1.0;
            a[(row, 1)] = data.exposure[(i, t)];
            a[(row, 2 + i)] = 1.0;
            a[(row, 2 + n + t)] = 1.0;
            resid[row] = data.counts[(i, t)] - data.expected[(i, t)].ln();
        }
    }
    let s = &a * &prior * a.transpose() + DMatrix::<f64>::identity(m, m) * noise;
    let s_chol = s.clone().cholesky().unwrap();
    let gain = &prior * a.transpose() * s_chol.inverse();
    let mean = &gain * &resid;
    let cov = &prior - &gain * &a * &prior;
    let log_det: f64 = 2.0 * s_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = resid.dot(&s_chol.solve(&resid));
    let log_marginal = -0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad);
    Conjugate { mean, cov, log_marginal }
}
