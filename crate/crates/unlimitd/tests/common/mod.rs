//! Shared test oracles: deliberately independent reference implementations
//! (straight-line evaluation, dense weight-space Gaussian algebra, LU-based
//! log-densities, exhaustive pair counting) that the library paths are
//! checked against.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use unlimitd::diffnet::{Activation, BatchInputs, NetworkSpec, ParamVector};
use unlimitd::gp::CovarianceParam;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Straight-line evaluator for the MLP, written against the flattening
/// convention only: per layer a column-major weight block then the bias.
/// It shares no code with the library's forward pass.
pub fn straight_line_forward(
    widths: &[usize],
    activation: Activation,
    theta: &[f64],
    x: &[f64],
) -> Vec<f64> {
    let mut offset = 0;
    let mut current = x.to_vec();
    let n_layers = widths.len() - 1;
    for layer in 0..n_layers {
        let (n_in, n_out) = (widths[layer], widths[layer + 1]);
        // Materialize the weight matrix explicitly.
        let mut w = vec![vec![0.0; n_in]; n_out];
        for (col, w_col) in (0..n_in).map(|c| (c, theta[offset + c * n_out..].to_vec())) {
            for row in 0..n_out {
                w[row][col] = w_col[row];
            }
        }
        offset += n_in * n_out;
        let bias = &theta[offset..offset + n_out];
        offset += n_out;
        let mut next = vec![0.0; n_out];
        for (row, slot) in next.iter_mut().enumerate() {
            let mut acc = bias[row];
            for (col, &v) in current.iter().enumerate() {
                acc += w[row][col] * v;
            }
            *slot = acc;
        }
        if layer + 1 < n_layers {
            for v in next.iter_mut() {
                *v = match activation {
                    Activation::ReLU => {
                        if *v > 0.0 {
                            *v
                        } else {
                            0.0
                        }
                    }
                    Activation::Identity => *v,
                };
            }
        }
        current = next;
    }
    current
}

/// Central finite differences of a scalar function of the parameters.
pub fn finite_diff(
    theta: &ParamVector,
    step: f64,
    mut f: impl FnMut(&ParamVector) -> f64,
) -> DVector<f64> {
    let mut grad = DVector::zeros(theta.values().len());
    let mut probe = theta.clone();
    for q in 0..theta.values().len() {
        let orig = probe.values()[q];
        probe.values_mut()[q] = orig + step;
        let plus = f(&probe);
        probe.values_mut()[q] = orig - step;
        let minus = f(&probe);
        probe.values_mut()[q] = orig;
        grad[q] = (plus - minus) / (2.0 * step);
    }
    grad
}

pub fn max_rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// The dense `P x P` prior covariance a [`CovarianceParam`] stands for.
pub fn dense_sigma(cov: &CovarianceParam, p: usize) -> DMatrix<f64> {
    match cov {
        CovarianceParam::Identity => DMatrix::identity(p, p),
        CovarianceParam::LowRank { basis, scales } => {
            let mut scaled = basis.clone();
            for (r, &s) in scales.iter().enumerate() {
                let mut row = scaled.row_mut(r);
                row *= s * s;
            }
            basis.transpose() * scaled
        }
    }
}

/// Prior predictive of the dense Bayesian linear regression
/// `y = J w + eps`, `w ~ N(mu, Sigma)`, `eps ~ N(0, noise_var I)`.
pub fn dense_prior_predictive(
    j: &DMatrix<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    noise_var: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let mean = j * mu;
    let mut cov = j * sigma * j.transpose();
    for i in 0..cov.nrows() {
        cov[(i, i)] += noise_var;
    }
    (mean, cov)
}

/// Gaussian negative log density via LU inverse and determinant — a different
/// factorization route than the library's Cholesky.
pub fn dense_gaussian_nll(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let inv = cov.clone().try_inverse().expect("oracle covariance invertible");
    let det = cov.determinant();
    let r = y - mean;
    0.5 * ((r.transpose() * inv * &r)[(0, 0)] + det.ln() + y.len() as f64 * LN_2PI)
}

/// Weight-space Bayesian update pushed forward through the query features:
/// the posterior the function-space path must agree with.
pub fn dense_posterior_predictive(
    jc: &DMatrix<f64>,
    jq: &DMatrix<f64>,
    yc: &DVector<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    noise_var: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let mut gram = jc * sigma * jc.transpose();
    for i in 0..gram.nrows() {
        gram[(i, i)] += noise_var;
    }
    let gram_inv = gram.try_inverse().expect("oracle gram invertible");
    let cross = sigma * jc.transpose(); // P x K
    let resid = yc - jc * mu;
    let w_mean = mu + &cross * &gram_inv * resid;
    let w_cov = sigma - &cross * &gram_inv * cross.transpose();
    (jq * w_mean, jq * w_cov * jq.transpose())
}

/// AUC by exhaustive pair counting, ties worth one half.
pub fn brute_force_auc(negative: &[f64], positive: &[f64]) -> f64 {
    let mut total = 0.0;
    for &p in positive {
        for &n in negative {
            total += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    total / (negative.len() * positive.len()) as f64
}

pub fn seeded_params(spec: &NetworkSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.init_params(&mut rng)
}

pub fn random_inputs(k: usize, rng: &mut ChaCha8Rng) -> BatchInputs {
    let xs: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..=5.0)).collect();
    BatchInputs::from_scalars(&xs).unwrap()
}

pub fn random_unit_rows(s: usize, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(p, s, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q().transpose()
}

pub fn random_vector(len: usize, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Per-task Jacobian-like matrices whose average gram matrix has exactly the
/// requested spectrum, built by rescaling a real network's Jacobians along
/// their own dense-FIM eigenvectors.
pub fn engineered_spectrum_tasks(
    spec: &NetworkSpec,
    spectrum: &DVector<f64>,
    n_tasks: usize,
    inputs_per_task: usize,
    seed: u64,
) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
    let p = spec.param_count();
    assert_eq!(spectrum.len(), p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = spec.init_params(&mut rng);
    // Zero-bias ReLU nets on scalar inputs put every kink at x = 0, leaving
    // the Fisher matrix rank-deficient; random biases spread the kinks so the
    // spectrum has enough live directions to reshape.
    let widths = spec.layer_widths().to_vec();
    for layer in 0..widths.len() - 1 {
        for row in 0..widths[layer + 1] {
            theta.set_bias(layer, row, rng.sample::<f64, _>(StandardNormal));
        }
    }
    let jacs: Vec<DMatrix<f64>> = (0..n_tasks)
        .map(|_| {
            let x = random_inputs(inputs_per_task, &mut rng);
            unlimitd::diffnet::jacobian(&theta, &x).unwrap()
        })
        .collect();
    let mut fim = DMatrix::zeros(p, p);
    for j in &jacs {
        fim += j.transpose() * j;
    }
    fim /= n_tasks as f64;
    let eig = fim.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut scaled_vecs = DMatrix::zeros(p, p);
    let mut vecs = DMatrix::zeros(p, p);
    for (pos, &idx) in order.iter().enumerate() {
        let lam = eig.eigenvalues[idx].max(1e-12);
        let f = (spectrum[pos] / lam).sqrt();
        scaled_vecs.set_column(pos, &(eig.eigenvectors.column(idx) * f));
        vecs.set_column(pos, &eig.eigenvectors.column(idx));
    }
    let transform = scaled_vecs * vecs.transpose();
    let tasks: Vec<DMatrix<f64>> = jacs.iter().map(|j| j * &transform).collect();
    let mut target = DMatrix::zeros(p, p);
    for t in &tasks {
        target += t.transpose() * t;
    }
    target /= n_tasks as f64;
    (tasks, target)
}

/// Top-`s` eigenspace of a symmetric matrix as rows, plus the eigenvalues.
pub fn dense_top_eigenspace(m: &DMatrix<f64>, s: usize) -> (DMatrix<f64>, DVector<f64>) {
    let p = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = DMatrix::zeros(s, p);
    let mut values = DVector::zeros(s);
    for (r, &idx) in order.iter().take(s).enumerate() {
        basis.set_row(r, &eig.eigenvectors.column(idx).transpose());
        values[r] = eig.eigenvalues[idx];
    }
    (basis, values)
}
