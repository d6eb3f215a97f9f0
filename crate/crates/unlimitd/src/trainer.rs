//! Meta-training loops for the three covariance parameterizations.
//!
//! Each epoch samples a batch of tasks, scores every task's context data with
//! the Gaussian (or mixture) NLL of the current prior, and follows the summed
//! NLL gradient with Adam. The gradient flows into the linearization point
//! through the Jacobian feature map (second-order differentiation of the
//! network), into the weight means in closed form, and into the subspace
//! scales through the projected features. The projection basis itself is
//! never differentiated: random and Fisher bases are frozen once built.
//!
//! Variant schedules:
//! - identity: one phase, identity prior covariance, `alpha = 1` only;
//! - random: orthonormalized random projection built up front, then one phase;
//! - fisher: identity warmup for half the epochs, then the projection is
//!   extracted from sketched Fisher information at the intermediate
//!   linearization point and training continues with the learnt covariance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CovariancePayload, MatrixData, Phase, RngBundle, UnlimitdCheckpoint};
use crate::diffnet::{jacobian, jacobian_vjp, BatchInputs, NetworkSpec, ParamVector};
use crate::error::{Error, Result};
use crate::fimsketch::fim_projection;
use crate::gp::SpdFactor;
use crate::mixture::mixture_nll_from_components;
use crate::opt::{adam_step, AdamState};
use crate::taskgen::{domains, substream, TaskSource};

const LN_2PI: f64 = 1.8378770664093453;

/// Prior covariance parameterization being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Identity,
    Random,
    Fisher,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i" | "identity" => Ok(Variant::Identity),
            "r" | "random" => Ok(Variant::Random),
            "f" | "fisher" => Ok(Variant::Fisher),
            other => Err(Error::InvalidConfig(format!("unknown variant '{other}'"))),
        }
    }
}

fn default_fim_aux_tasks() -> usize {
    100
}

/// Hyperparameters of one meta-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Cluster count of the mixture; 1 trains a single GP.
    pub alpha: usize,
    pub epochs: usize,
    /// Tasks sampled per epoch, split evenly across clusters.
    pub tasks_per_epoch: usize,
    /// Context points per task.
    pub context_size: usize,
    /// Projection subspace size (random and fisher variants).
    pub subspace_size: usize,
    pub learning_rate: f64,
    /// Observation noise std of the model.
    pub sigma_eps: f64,
    pub seed: u64,
    /// Hidden layer widths; inputs and outputs are scalar.
    pub hidden: Vec<usize>,
    /// Tasks in the synthetic dataset built for Fisher estimation when
    /// training on infinite task streams.
    #[serde(default = "default_fim_aux_tasks")]
    pub fim_aux_tasks: usize,
    /// Inputs per synthetic Fisher task; defaults to `min(P, 512)`. The cap
    /// bounds the Jacobian buffers on larger networks and is recorded in the
    /// run manifest.
    #[serde(default)]
    pub fim_aux_inputs: Option<usize>,
    /// Emit a checkpoint every this many epochs.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(1);
        widths.extend_from_slice(&self.hidden);
        widths.push(1);
        NetworkSpec::new(widths, crate::diffnet::Activation::ReLU)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0 {
            return Err(Error::InvalidConfig("alpha must be >= 1".into()));
        }
        if self.variant == Variant::Identity && self.alpha > 1 {
            return Err(Error::InvalidConfig(
                "variant 'i' requires alpha = 1: with an identity prior covariance every \
                 cluster would share the same covariance function, so a mixture cannot model \
                 heterogeneous clusters"
                    .into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.variant == Variant::Fisher && self.epochs % 2 != 0 {
            return Err(Error::InvalidConfig(
                "the fisher variant splits epochs into two equal phases; use an even count".into(),
            ));
        }
        if self.tasks_per_epoch == 0 || self.tasks_per_epoch % self.alpha != 0 {
            return Err(Error::InvalidConfig(format!(
                "tasks per epoch ({}) must be a positive multiple of alpha ({})",
                self.tasks_per_epoch, self.alpha
            )));
        }
        if self.context_size == 0 {
            return Err(Error::InvalidConfig("context size must be >= 1".into()));
        }
        if self.variant != Variant::Identity && self.subspace_size == 0 {
            return Err(Error::InvalidConfig("subspace size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig("learning rate must be >= 0".into()));
        }
        if !(self.sigma_eps > 0.0) {
            return Err(Error::InvalidConfig("sigma_eps must be positive".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one hidden layer is required".into(),
            ));
        }
        Ok(())
    }
}

/// The learnable state of the task distribution, in structured form.
#[derive(Debug, Clone)]
pub struct MetaParams {
    pub network: NetworkSpec,
    pub lin_point: DVector<f64>,
    /// One weight mean per cluster.
    pub weight_means: Vec<DVector<f64>>,
    /// Shared projection basis; `None` while the covariance is the identity.
    pub basis: Option<DMatrix<f64>>,
    /// One scale vector per cluster; empty while the covariance is the identity.
    pub scales: Vec<DVector<f64>>,
    pub sigma_eps: f64,
}

impl MetaParams {
    pub fn lin_point_params(&self) -> Result<ParamVector> {
        ParamVector::new(self.network.clone(), self.lin_point.clone())
    }

    fn check(&self) -> Result<()> {
        let p = self.network.param_count();
        if self.lin_point.len() != p {
            return Err(Error::ShapeMismatch(
                "linearization point length does not match the network".into(),
            ));
        }
        if self.weight_means.is_empty() || self.weight_means.iter().any(|m| m.len() != p) {
            return Err(Error::ShapeMismatch("bad weight mean shapes".into()));
        }
        match &self.basis {
            Some(b) => {
                if b.ncols() != p || self.scales.len() != self.weight_means.len() {
                    return Err(Error::ShapeMismatch("bad projection shapes".into()));
                }
                if self.scales.iter().any(|s| s.len() != b.nrows()) {
                    return Err(Error::ShapeMismatch("bad scale lengths".into()));
                }
            }
            None => {
                if self.weight_means.len() != 1 {
                    return Err(Error::InvalidConfig(
                        "the identity covariance supports a single cluster only".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Gradients of the summed NLL, mirroring the [`MetaParams`] layout.
#[derive(Debug, Clone)]
pub struct MetaGrads {
    pub lin_point: DVector<f64>,
    pub weight_means: Vec<DVector<f64>>,
    pub scales: Vec<DVector<f64>>,
}

struct TaskContribution {
    nll: f64,
    grads: MetaGrads,
}

/// Loss `sum_i NLL_i` over a task batch (mixture NLL when there are several
/// clusters) together with its gradients w.r.t. the linearization point,
/// weight means and scales. The projection basis is treated as a constant.
pub fn loss_and_grad(
    params: &MetaParams,
    batch: &[(BatchInputs, DVector<f64>)],
) -> Result<(f64, MetaGrads)> {
    params.check()?;
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty task batch".into()));
    }
    let theta0 = params.lin_point_params()?;
    let contributions: Vec<Result<TaskContribution>> = batch
        .par_iter()
        .map(|(x, y)| task_contribution(params, &theta0, x, y))
        .collect();

    let p = params.network.param_count();
    let n_clusters = params.weight_means.len();
    let s = params.basis.as_ref().map_or(0, |b| b.nrows());
    let mut loss = 0.0;
    let mut total = MetaGrads {
        lin_point: DVector::zeros(p),
        weight_means: vec![DVector::zeros(p); n_clusters],
        scales: vec![DVector::zeros(s); if params.basis.is_some() { n_clusters } else { 0 }],
    };
    // Fixed summation order keeps the reduction bit-deterministic regardless
    // of how the tasks were scheduled.
    for contribution in contributions {
        let c = contribution?;
        loss += c.nll;
        total.lin_point += &c.grads.lin_point;
        for (acc, g) in total.weight_means.iter_mut().zip(&c.grads.weight_means) {
            *acc += g;
        }
        for (acc, g) in total.scales.iter_mut().zip(&c.grads.scales) {
            *acc += g;
        }
    }
    Ok((loss, total))
}

fn task_contribution(
    params: &MetaParams,
    theta0: &ParamVector,
    x: &BatchInputs,
    y: &DVector<f64>,
) -> Result<TaskContribution> {
    let jac = jacobian(theta0, x)?;
    let m = jac.nrows();
    if y.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "task observations have length {}, expected {m}",
            y.len()
        )));
    }
    let noise = params.sigma_eps * params.sigma_eps;
    let projected = params.basis.as_ref().map(|b| &jac * b.transpose());

    let n_clusters = params.weight_means.len();
    let mut nlls = Vec::with_capacity(n_clusters);
    let mut mean_grads = Vec::with_capacity(n_clusters);
    let mut scale_grads = Vec::with_capacity(n_clusters);
    let mut jac_cotangents = Vec::with_capacity(n_clusters);

    for c in 0..n_clusters {
        let mu = &params.weight_means[c];
        let mut cov = match (&projected, params.basis.as_ref()) {
            (Some(z), Some(_)) => {
                let scales = &params.scales[c];
                let mut zs = z.clone();
                for (col, &sv) in scales.iter().enumerate() {
                    let mut column = zs.column_mut(col);
                    column *= sv * sv;
                }
                &zs * z.transpose()
            }
            _ => &jac * jac.transpose(),
        };
        for i in 0..m {
            cov[(i, i)] += noise;
        }
        // Same symmetrization as the predictive path, so the loss optimized
        // here is bitwise the NLL the evaluator scores with.
        let cov = (&cov + cov.transpose()) * 0.5;
        let factor = SpdFactor::new(&cov)?;
        let resid = y - &jac * mu;
        let solved = factor.solve_vec(&resid);
        let nll = 0.5 * (resid.dot(&solved) + factor.logdet() + m as f64 * LN_2PI);

        // d NLL / d Cov = (Cov^-1 - Cov^-1 r r^T Cov^-1) / 2.
        let inv = factor.inverse();
        let curvature = (&inv - &solved * solved.transpose()) * 0.5;

        let mean_grad = -(jac.transpose() * &solved);

        let (cotangent, scale_grad) = match (&projected, params.basis.as_ref()) {
            (Some(z), Some(basis)) => {
                let scales = &params.scales[c];
                let bz = &curvature * z; // m x s
                let mut sg = DVector::zeros(scales.len());
                for i in 0..scales.len() {
                    sg[i] = 2.0 * scales[i] * z.column(i).dot(&bz.column(i));
                }
                let mut bzs = bz;
                for (col, &sv) in scales.iter().enumerate() {
                    let mut column = bzs.column_mut(col);
                    column *= sv * sv;
                }
                // d NLL / d J = -(C^-1 r) mu^T + 2 B J Sigma, factored through Q.
                let cot = -(&solved * mu.transpose()) + (&bzs * basis) * 2.0;
                (cot, Some(sg))
            }
            _ => {
                let cot = -(&solved * mu.transpose()) + (&curvature * &jac) * 2.0;
                (cot, None)
            }
        };
        nlls.push(nll);
        mean_grads.push(mean_grad);
        scale_grads.push(scale_grad);
        jac_cotangents.push(cotangent);
    }

    if n_clusters == 1 {
        let lin_grad = jacobian_vjp(theta0, x, &jac_cotangents[0])?;
        return Ok(TaskContribution {
            nll: nlls[0],
            grads: MetaGrads {
                lin_point: lin_grad,
                weight_means: vec![mean_grads.pop().unwrap()],
                scales: scale_grads.pop().unwrap().into_iter().collect(),
            },
        });
    }

    // Mixture: responsibilities weight each cluster's gradient, and the
    // Jacobian cotangents combine linearly before the single second-order pass.
    let nll = mixture_nll_from_components(&nlls);
    let max_neg = nlls.iter().map(|v| -v).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = nlls.iter().map(|v| (-v - max_neg).exp()).collect();
    let norm: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.into_iter().map(|w| w / norm).collect();

    let mut combined = DMatrix::zeros(m, params.network.param_count());
    for (w, cot) in weights.iter().zip(&jac_cotangents) {
        combined += cot * *w;
    }
    let lin_grad = jacobian_vjp(theta0, x, &combined)?;
    Ok(TaskContribution {
        nll,
        grads: MetaGrads {
            lin_point: lin_grad,
            weight_means: mean_grads
                .into_iter()
                .zip(&weights)
                .map(|(g, &w)| g * w)
                .collect(),
            scales: scale_grads
                .into_iter()
                .zip(&weights)
                .map(|(g, &w)| g.expect("mixtures always train scales") * w)
                .collect(),
        },
    })
}

/// A finished (or checkpointed-out) training run.
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// Summed NLL per epoch; `NaN` marks an epoch skipped after a
    /// conditioning failure.
    pub trace: Vec<f64>,
}

struct TrainState {
    config: TrainConfig,
    sources: Vec<TaskSource>,
    network: NetworkSpec,
    params: MetaParams,
    /// Eigenvalue estimates accompanying a Fisher-derived basis.
    basis_eigenvalues: Option<Vec<f64>>,
    phase: Phase,
    epoch: usize,
    adam: AdamState,
    rngs: RngBundle,
    failed_last_epoch: bool,
}

impl TrainState {
    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::Unlimitd(UnlimitdCheckpoint {
            version: crate::checkpoint::FORMAT_VERSION,
            config: self.config.clone(),
            sources: self.sources.clone(),
            phase: self.phase,
            epoch: self.epoch,
            network: self.network.clone(),
            lin_point: self.params.lin_point.iter().copied().collect(),
            weight_means: self
                .params
                .weight_means
                .iter()
                .map(|m| m.iter().copied().collect())
                .collect(),
            covariance: match &self.params.basis {
                None => CovariancePayload::Identity,
                Some(b) => CovariancePayload::LowRank {
                    basis: MatrixData::from_matrix(b),
                    scales: self
                        .params
                        .scales
                        .iter()
                        .map(|s| s.iter().copied().collect())
                        .collect(),
                    eigenvalues: self.basis_eigenvalues.clone(),
                },
            },
            sigma_eps: self.config.sigma_eps,
            rng: self.rngs.clone(),
            optimizer: self.adam.clone(),
        })
    }

    fn from_checkpoint(ck: &UnlimitdCheckpoint) -> Result<Self> {
        if ck.version != crate::checkpoint::FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "checkpoint format version {} is not supported",
                ck.version
            )));
        }
        let (basis, scales, basis_eigenvalues) = match &ck.covariance {
            CovariancePayload::Identity => (None, Vec::new(), None),
            CovariancePayload::LowRank {
                basis,
                scales,
                eigenvalues,
            } => (
                Some(basis.to_matrix()),
                scales
                    .iter()
                    .map(|s| DVector::from_column_slice(s))
                    .collect(),
                eigenvalues.clone(),
            ),
        };
        let params = MetaParams {
            network: ck.network.clone(),
            lin_point: DVector::from_column_slice(&ck.lin_point),
            weight_means: ck
                .weight_means
                .iter()
                .map(|m| DVector::from_column_slice(m))
                .collect(),
            basis,
            scales,
            sigma_eps: ck.sigma_eps,
        };
        params.check()?;
        Ok(Self {
            config: ck.config.clone(),
            sources: ck.sources.clone(),
            network: ck.network.clone(),
            params,
            basis_eigenvalues,
            phase: ck.phase,
            epoch: ck.epoch,
            adam: ck.optimizer.clone(),
            rngs: ck.rng.clone(),
            failed_last_epoch: false,
        })
    }

    /// Flat learnable vector: `[theta0 | mu_1.. | s_1..]`.
    fn flat_params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.flat_dim());
        out.extend(self.params.lin_point.iter());
        for m in &self.params.weight_means {
            out.extend(m.iter());
        }
        for s in &self.params.scales {
            out.extend(s.iter());
        }
        DVector::from_vec(out)
    }

    fn flat_grads(&self, grads: &MetaGrads) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.flat_dim());
        out.extend(grads.lin_point.iter());
        for m in &grads.weight_means {
            out.extend(m.iter());
        }
        for s in &grads.scales {
            out.extend(s.iter());
        }
        DVector::from_vec(out)
    }

    fn flat_dim(&self) -> usize {
        let p = self.network.param_count();
        p + p * self.params.weight_means.len()
            + self.params.scales.iter().map(|s| s.len()).sum::<usize>()
    }

    fn set_from_flat(&mut self, flat: &DVector<f64>) {
        let p = self.network.param_count();
        let mut off = 0;
        self.params.lin_point.copy_from_slice(&flat.as_slice()[off..off + p]);
        off += p;
        for m in &mut self.params.weight_means {
            m.copy_from_slice(&flat.as_slice()[off..off + p]);
            off += p;
        }
        for s in &mut self.params.scales {
            let len = s.len();
            s.copy_from_slice(&flat.as_slice()[off..off + len]);
            off += len;
        }
    }
}

/// Runs meta-training from scratch. `sources` supplies one task stream per
/// cluster; `on_checkpoint` receives periodic and phase-boundary checkpoints.
pub fn train(
    config: &TrainConfig,
    sources: &[TaskSource],
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainRun> {
    config.validate()?;
    if sources.len() != config.alpha {
        return Err(Error::InvalidConfig(format!(
            "{} task sources for alpha = {}; supply one per cluster",
            sources.len(),
            config.alpha
        )));
    }
    let network = config.network_spec()?;
    let p = network.param_count();
    let mut rngs = RngBundle {
        tasks: substream(config.seed, domains::TRAIN_TASKS, 0),
        inputs: substream(config.seed, domains::TRAIN_INPUTS, 0),
        noise: substream(config.seed, domains::TRAIN_NOISE, 0),
        init: substream(config.seed, domains::TRAIN_INIT, 0),
    };
    let lin_point = network.init_params(&mut rngs.init).values().clone();

    // Warmup trains a single shared mean even for mixtures; the split into
    // per-cluster means happens when the projection appears.
    let (phase, basis, scales, weight_means) = match config.variant {
        Variant::Identity | Variant::Fisher => {
            (Phase::Identity, None, Vec::new(), vec![DVector::zeros(p)])
        }
        Variant::Random => {
            let basis = random_orthonormal_basis(p, config.subspace_size, &mut rngs.init);
            let scales = init_scales(config.alpha, config.subspace_size, &mut rngs.init);
            (
                Phase::Projected,
                Some(basis),
                scales,
                vec![DVector::zeros(p); config.alpha],
            )
        }
    };

    let flat_dim = p + p * weight_means.len() + scales.iter().map(|s| s.len()).sum::<usize>();
    let mut state = TrainState {
        config: config.clone(),
        sources: sources.to_vec(),
        network: network.clone(),
        params: MetaParams {
            network,
            lin_point,
            weight_means,
            basis,
            scales,
            sigma_eps: config.sigma_eps,
        },
        basis_eigenvalues: None,
        phase,
        epoch: 0,
        adam: AdamState::new(flat_dim),
        rngs,
        failed_last_epoch: false,
    };
    run_epochs(&mut state, on_checkpoint)
}

/// Continues a checkpointed run to its configured end, bit-identically to the
/// uninterrupted run.
pub fn resume(
    checkpoint: &Checkpoint,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainRun> {
    let ck = match checkpoint {
        Checkpoint::Unlimitd(ck) => ck,
        Checkpoint::Maml(_) => {
            return Err(Error::InvalidConfig(
                "cannot resume a gradient-baseline checkpoint with the GP trainer".into(),
            ))
        }
    };
    let mut state = TrainState::from_checkpoint(ck)?;
    run_epochs(&mut state, on_checkpoint)
}

fn run_epochs(
    state: &mut TrainState,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainRun> {
    let total = state.config.epochs;
    let per_cluster = state.config.tasks_per_epoch / state.config.alpha;
    let mut trace = Vec::new();

    while state.epoch < total {
        if state.config.variant == Variant::Fisher
            && state.phase == Phase::Identity
            && state.epoch == total / 2
        {
            // The boundary artifact carries no projection yet.
            on_checkpoint(&state.checkpoint())?;
            fisher_transition(state)?;
        }

        let mut batch = Vec::with_capacity(state.config.tasks_per_epoch);
        for source in &state.sources {
            batch.extend(source.draw_epoch_batch(
                per_cluster,
                state.config.context_size,
                &mut state.rngs.tasks,
                &mut state.rngs.inputs,
                &mut state.rngs.noise,
            )?);
        }

        match loss_and_grad(&state.params, &batch) {
            Ok((loss, grads)) => {
                let mut flat = state.flat_params();
                let flat_grads = state.flat_grads(&grads);
                adam_step(&mut state.adam, &mut flat, &flat_grads, state.config.learning_rate)?;
                state.set_from_flat(&flat);
                trace.push(loss);
                state.failed_last_epoch = false;
            }
            Err(Error::Conditioning { attempted }) => {
                // One bad batch is skipped; a second in a row means the model
                // itself has degenerated.
                if state.failed_last_epoch {
                    return Err(Error::Conditioning { attempted });
                }
                trace.push(f64::NAN);
                state.failed_last_epoch = true;
            }
            Err(e) => return Err(e),
        }
        state.epoch += 1;

        if let Some(every) = state.config.checkpoint_every {
            if every > 0 && state.epoch % every == 0 && state.epoch < total {
                on_checkpoint(&state.checkpoint())?;
            }
        }
    }

    Ok(TrainRun {
        checkpoint: state.checkpoint(),
        trace,
    })
}

/// End of the identity warmup for the fisher variant: extract the projection
/// at the intermediate linearization point, copy the shared mean into every
/// cluster, draw fresh scales, and restart the optimizer for the new
/// parameter set.
fn fisher_transition(state: &mut TrainState) -> Result<()> {
    let p = state.network.param_count();
    let aux_inputs = state
        .config
        .fim_aux_inputs
        .unwrap_or_else(|| p.min(512))
        .max(1);
    let per_source = split_evenly(state.config.fim_aux_tasks.max(1), state.sources.len());
    let mut batches = Vec::new();
    for (source, aux_tasks) in state.sources.iter().zip(per_source) {
        batches.extend(source.fim_input_batches(aux_tasks, aux_inputs, &mut state.rngs.init)?);
    }
    let theta0 = state.params.lin_point_params()?;
    let sketch_seed = state.rngs.init.random::<u64>();
    let projection = fim_projection(&theta0, &batches, state.config.subspace_size, sketch_seed)?;

    let shared_mean = state.params.weight_means[0].clone();
    state.params.weight_means = vec![shared_mean; state.config.alpha];
    state.basis_eigenvalues = Some(projection.eigenvalues.iter().copied().collect());
    state.params.basis = Some(projection.basis);
    state.params.scales = init_scales(
        state.config.alpha,
        state.config.subspace_size,
        &mut state.rngs.init,
    );
    state.phase = Phase::Projected;
    let flat_dim = state.flat_dim();
    state.adam = AdamState::new(flat_dim);
    Ok(())
}

fn split_evenly(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

/// Orthonormalizes the rows of an `s x P` standard-normal draw.
fn random_orthonormal_basis(p: usize, s: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(p, s);
    for c in 0..s {
        for r in 0..p {
            g[(r, c)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    g.qr().q().transpose()
}

/// Scale initialization: ones for a single cluster; independent draws with
/// std 0.5 for mixtures, so otherwise-identical clusters can separate.
fn init_scales(alpha: usize, s: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    if alpha == 1 {
        vec![DVector::from_element(s, 1.0)]
    } else {
        (0..alpha)
            .map(|_| DVector::from_fn(s, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal)))
            .collect()
    }
}
