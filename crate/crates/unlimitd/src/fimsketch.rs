//! Streaming sketched estimation of the dataset Fisher information matrix and
//! extraction of its top eigenspace.
//!
//! The dataset FIM is `(1/N) sum_i J_i^T J_i` over per-task Jacobians (the
//! noise scaling is dropped: it rescales eigenvalues uniformly and leaves
//! eigenvectors untouched). Forming the `P x P` matrix is out of the question
//! for real networks, so two random sketches are accumulated instead — a range
//! sketch `Y = F Omega^T` and a co-range sketch `W = Psi F` — from which the
//! top-`s` eigenpairs are reconstructed. Sketch widths follow the
//! `k = 2s + 1`, `l = 4s + 3` budget.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffnet::{jacobian, BatchInputs, ParamVector};
use crate::error::{Error, Result};

/// Streaming FIM sketches plus the probe matrices that define them.
///
/// Both accumulators are linear in the per-task contributions, so tasks may be
/// folded in (in any order) without storing individual sketches.
#[derive(Debug, Clone)]
pub struct SketchPair {
    range_probe: DMatrix<f64>,    // k x P
    corange_probe: DMatrix<f64>,  // l x P
    range_sketch: DMatrix<f64>,   // P x k
    corange_sketch: DMatrix<f64>, // l x P
    tasks_seen: usize,
}

impl SketchPair {
    pub fn k(&self) -> usize {
        self.range_probe.nrows()
    }

    pub fn l(&self) -> usize {
        self.corange_probe.nrows()
    }

    pub fn param_dim(&self) -> usize {
        self.range_probe.ncols()
    }

    pub fn tasks_seen(&self) -> usize {
        self.tasks_seen
    }

    pub fn range_probe(&self) -> &DMatrix<f64> {
        &self.range_probe
    }

    pub fn range_sketch(&self) -> &DMatrix<f64> {
        &self.range_sketch
    }

    pub fn corange_sketch(&self) -> &DMatrix<f64> {
        &self.corange_sketch
    }
}

/// Orthonormal basis for the approximate top eigenspace of the dataset FIM,
/// with matching eigenvalue estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis {
    pub basis: DMatrix<f64>,      // s x P, orthonormal rows
    pub eigenvalues: DVector<f64>, // nonincreasing, clamped at 0
}

/// Draws the probe matrices and zeroes the accumulators. `k = 2s + 1` and
/// `l = 4s + 3`; the combined sketch width must stay below the parameter
/// dimension.
pub fn init_sketch(param_dim: usize, s: usize, seed: u64) -> Result<SketchPair> {
    if s == 0 {
        return Err(Error::InvalidConfig("subspace size must be >= 1".into()));
    }
    let k = 2 * s + 1;
    let l = 4 * s + 3;
    if k + l > param_dim {
        return Err(Error::InvalidConfig(format!(
            "subspace size {s} needs sketch width {} but the network only has {param_dim} parameters",
            k + l
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut range_probe = DMatrix::zeros(k, param_dim);
    for j in 0..param_dim {
        for i in 0..k {
            range_probe[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut corange_probe = DMatrix::zeros(l, param_dim);
    for j in 0..param_dim {
        for i in 0..l {
            corange_probe[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(SketchPair {
        range_probe,
        corange_probe,
        range_sketch: DMatrix::zeros(param_dim, k),
        corange_sketch: DMatrix::zeros(l, param_dim),
        tasks_seen: 0,
    })
}

/// Folds one task's Jacobian into the sketches with weight `1/n_total`.
/// Only factored products are formed; peak extra memory is `O(P (k + l))`
/// beyond the Jacobian itself.
pub fn update_sketch(sketch: &mut SketchPair, task_jacobian: &DMatrix<f64>, n_total: usize) -> Result<()> {
    if task_jacobian.ncols() != sketch.param_dim() {
        return Err(Error::ShapeMismatch(format!(
            "jacobian has {} columns, sketch expects {}",
            task_jacobian.ncols(),
            sketch.param_dim()
        )));
    }
    if n_total == 0 {
        return Err(Error::InvalidConfig("task count for averaging must be >= 1".into()));
    }
    let w = 1.0 / n_total as f64;
    // (Omega J^T) J, k x P, then transposed into the range accumulator.
    let om_jt = &sketch.range_probe * task_jacobian.transpose();
    let contrib = om_jt * task_jacobian;
    sketch.range_sketch += contrib.transpose() * w;
    // (Psi J^T) J, l x P.
    let ps_jt = &sketch.corange_probe * task_jacobian.transpose();
    sketch.corange_sketch += ps_jt * task_jacobian * w;
    sketch.tasks_seen += 1;
    Ok(())
}

/// Reconstructs the top-`s` eigenpairs of the sketched matrix.
///
/// The range sketch is orthonormalized into `U`, the least-squares system
/// `(Psi U) C = W U` recovers the compression `C ~ U^T F U`, and the
/// symmetrized `C` is eigendecomposed. Rows of the output basis are the
/// re-orthonormalized `U v_i` for the `s` algebraically largest eigenpairs;
/// eigenvalue estimates are clamped at zero.
pub fn fixed_rank_sym_approx(sketch: &SketchPair, s: usize) -> Result<ProjectionBasis> {
    if sketch.tasks_seen == 0 {
        return Err(Error::InvalidConfig(
            "sketch has not accumulated any task".into(),
        ));
    }
    let k = sketch.k();
    if s > k {
        return Err(Error::InvalidConfig(format!(
            "requested {s} eigenpairs from a width-{k} sketch"
        )));
    }
    let u = sketch.range_sketch.clone().qr().q(); // P x k, orthonormal columns
    let psi_u = &sketch.corange_probe * &u; // l x k
    let w_u = &sketch.corange_sketch * &u; // l x k

    let svd = psi_u.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&v| v > smax * 1e-10).count();
    if rank < k {
        return Err(Error::RankDeficientSketch(format!(
            "probe-times-basis system has rank {rank} < {k}"
        )));
    }
    let compression = svd
        .solve(&w_u, smax * 1e-14)
        .map_err(|e| Error::RankDeficientSketch(e.to_string()))?;
    let sym = (&compression + compression.transpose()) * 0.5;

    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut directions = DMatrix::zeros(u.nrows(), s);
    let mut eigenvalues = DVector::zeros(s);
    for (out, &idx) in order.iter().take(s).enumerate() {
        let v = eig.eigenvectors.column(idx);
        directions.set_column(out, &(&u * v));
        eigenvalues[out] = eig.eigenvalues[idx].max(0.0);
    }
    // U and the eigenvectors are each orthonormal, so this QR is a cleanup
    // pass, not a change of subspace.
    let q = directions.qr().q();
    Ok(ProjectionBasis {
        basis: q.transpose(),
        eigenvalues,
    })
}

/// Dense dataset FIM `(1/N) sum_i J_i^T J_i`, the small-scale reference the
/// sketch path is checked against. Guarded so it can never be reached with a
/// real network by accident.
pub fn dense_fim(lin_point: &ParamVector, task_inputs: &[BatchInputs]) -> Result<DMatrix<f64>> {
    let p = lin_point.spec().param_count();
    if p > 500 {
        return Err(Error::InvalidConfig(format!(
            "dense FIM is for reference use at P <= 500, got P = {p}"
        )));
    }
    if task_inputs.is_empty() {
        return Err(Error::InvalidConfig("dense FIM needs at least one task".into()));
    }
    let mut fim = DMatrix::zeros(p, p);
    for x in task_inputs {
        let j = jacobian(lin_point, x)?;
        fim += j.transpose() * j;
    }
    Ok(fim / task_inputs.len() as f64)
}

/// End-to-end driver: sketches the Jacobians of every task input batch at
/// `lin_point` and extracts the top-`s` basis. A rank-deficient probe draw is
/// retried once with a fresh seed before the error surfaces.
pub fn fim_projection(
    lin_point: &ParamVector,
    task_inputs: &[BatchInputs],
    s: usize,
    seed: u64,
) -> Result<ProjectionBasis> {
    if task_inputs.is_empty() {
        return Err(Error::InvalidConfig("FIM projection needs at least one task".into()));
    }
    let p = lin_point.spec().param_count();
    let n = task_inputs.len();
    let mut attempt_seed = seed;
    for attempt in 0..2 {
        let mut sketch = init_sketch(p, s, attempt_seed)?;
        for x in task_inputs {
            let j = jacobian(lin_point, x)?;
            update_sketch(&mut sketch, &j, n)?;
        }
        match fixed_rank_sym_approx(&sketch, s) {
            Ok(basis) => return Ok(basis),
            Err(Error::RankDeficientSketch(_)) if attempt == 0 => {
                attempt_seed = attempt_seed.wrapping_add(1);
            }
            Err(e) => return Err(e),
        }
    }
    unreachable!("second sketch attempt either returns or propagates its error")
}

/// Largest principal angle (radians) between the row spaces of two matrices
/// with orthonormal rows.
pub fn largest_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let overlap = a * b.transpose();
    let svd = overlap.svd(false, false);
    let cos = svd.singular_values.min().clamp(-1.0, 1.0);
    cos.acos()
}
