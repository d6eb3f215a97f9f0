//! First-order MAML baseline on the same networks and task generators.
//!
//! Adaptation is plain gradient descent on the context MSE; the meta-gradient
//! is the query-MSE gradient evaluated at the adapted parameters, ignoring
//! differentiation through the inner loop. Predictions are point estimates.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, MamlCheckpoint, RngBundle};
use crate::diffnet::{backprop, forward, unvectorize_outputs, BatchInputs, NetworkSpec, ParamVector};
use crate::error::{Error, Result};
use crate::opt::{adam_step, AdamState};
use crate::taskgen::{domains, substream, TaskSource};

/// Hyperparameters of the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MamlConfig {
    pub inner_lr: f64,
    pub inner_steps_train: usize,
    pub inner_steps_test: usize,
    pub meta_lr: f64,
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    pub context_size: usize,
    pub query_size: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl MamlConfig {
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(1);
        widths.extend_from_slice(&self.hidden);
        widths.push(1);
        NetworkSpec::new(widths, crate::diffnet::Activation::ReLU)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr >= 0.0) || !(self.meta_lr >= 0.0) {
            return Err(Error::InvalidConfig("learning rates must be >= 0".into()));
        }
        if self.epochs == 0
            || self.tasks_per_epoch == 0
            || self.context_size == 0
            || self.query_size == 0
        {
            return Err(Error::InvalidConfig(
                "epochs, tasks per epoch, context size and query size must be >= 1".into(),
            ));
        }
        if self.hidden.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one hidden layer is required".into(),
            ));
        }
        Ok(())
    }
}

/// Mean squared error between network outputs and vectorized targets.
fn batch_mse(theta: &ParamVector, x: &BatchInputs, y: &DVector<f64>) -> Result<f64> {
    let pred = forward(theta, x)?;
    let pred = crate::diffnet::vectorize_outputs(&pred);
    if pred.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "targets have length {}, predictions {}",
            y.len(),
            pred.len()
        )));
    }
    Ok((pred - y).norm_squared() / y.len() as f64)
}

/// Gradient of the batch MSE w.r.t. the parameters.
fn mse_grad(theta: &ParamVector, x: &BatchInputs, y: &DVector<f64>) -> Result<DVector<f64>> {
    let pred = forward(theta, x)?;
    let n_y = theta.spec().output_dim();
    let resid = crate::diffnet::vectorize_outputs(&pred) - y;
    let cotangent = unvectorize_outputs(&(resid * (2.0 / y.len() as f64)), n_y);
    backprop(theta, x, &cotangent)
}

/// `steps` gradient-descent updates on the context MSE.
pub fn inner_adapt(
    theta: &ParamVector,
    xc: &BatchInputs,
    yc: &DVector<f64>,
    steps: usize,
    inner_lr: f64,
) -> Result<ParamVector> {
    let mut adapted = theta.clone();
    for _ in 0..steps {
        let grad = mse_grad(&adapted, xc, yc)?;
        *adapted.values_mut() -= grad * inner_lr;
    }
    Ok(adapted)
}

/// An adapted-at-test-time point predictor.
#[derive(Debug, Clone)]
pub struct MamlModel {
    pub theta: ParamVector,
    pub inner_steps: usize,
    pub inner_lr: f64,
}

impl MamlModel {
    /// Adapts on the context batch and returns point predictions at the
    /// queries (`N_y x L`).
    pub fn predict(
        &self,
        xc: &BatchInputs,
        yc: &DVector<f64>,
        xq: &BatchInputs,
    ) -> Result<nalgebra::DMatrix<f64>> {
        let adapted = inner_adapt(&self.theta, xc, yc, self.inner_steps, self.inner_lr)?;
        forward(&adapted, xq)
    }
}

pub struct MamlRun {
    pub checkpoint: Checkpoint,
    /// Mean query MSE per epoch.
    pub trace: Vec<f64>,
}

struct MamlState {
    config: MamlConfig,
    sources: Vec<TaskSource>,
    network: NetworkSpec,
    theta: ParamVector,
    epoch: usize,
    adam: AdamState,
    rngs: RngBundle,
}

impl MamlState {
    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::Maml(MamlCheckpoint {
            version: crate::checkpoint::FORMAT_VERSION,
            config: self.config.clone(),
            sources: self.sources.clone(),
            epoch: self.epoch,
            network: self.network.clone(),
            theta: self.theta.values().iter().copied().collect(),
            rng: self.rngs.clone(),
            optimizer: self.adam.clone(),
        })
    }
}

/// Meta-trains the baseline. `sources` gets one entry per cluster; every epoch
/// draws an even split of tasks from each.
pub fn meta_train(
    config: &MamlConfig,
    sources: &[TaskSource],
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<MamlRun> {
    config.validate()?;
    if sources.is_empty() || config.tasks_per_epoch % sources.len() != 0 {
        return Err(Error::InvalidConfig(format!(
            "tasks per epoch ({}) must split evenly over {} task sources",
            config.tasks_per_epoch,
            sources.len()
        )));
    }
    let network = config.network_spec()?;
    let mut rngs = RngBundle {
        tasks: substream(config.seed, domains::TRAIN_TASKS, 0),
        inputs: substream(config.seed, domains::TRAIN_INPUTS, 0),
        noise: substream(config.seed, domains::TRAIN_NOISE, 0),
        init: substream(config.seed, domains::TRAIN_INIT, 0),
    };
    let theta = network.init_params(&mut rngs.init);
    let mut state = MamlState {
        config: config.clone(),
        sources: sources.to_vec(),
        network: network.clone(),
        epoch: 0,
        adam: AdamState::new(theta.values().len()),
        theta,
        rngs,
    };
    run_epochs(&mut state, on_checkpoint)
}

/// Continues a checkpointed baseline run to its configured end.
pub fn resume(
    checkpoint: &Checkpoint,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<MamlRun> {
    let ck = match checkpoint {
        Checkpoint::Maml(ck) => ck,
        Checkpoint::Unlimitd(_) => {
            return Err(Error::InvalidConfig(
                "cannot resume a GP checkpoint with the gradient baseline".into(),
            ))
        }
    };
    if ck.version != crate::checkpoint::FORMAT_VERSION {
        return Err(Error::InvalidConfig(format!(
            "checkpoint format version {} is not supported",
            ck.version
        )));
    }
    let theta = ParamVector::new(ck.network.clone(), DVector::from_column_slice(&ck.theta))?;
    let mut state = MamlState {
        config: ck.config.clone(),
        sources: ck.sources.clone(),
        network: ck.network.clone(),
        theta,
        epoch: ck.epoch,
        adam: ck.optimizer.clone(),
        rngs: ck.rng.clone(),
    };
    run_epochs(&mut state, on_checkpoint)
}

fn run_epochs(
    state: &mut MamlState,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<MamlRun> {
    let total = state.config.epochs;
    let per_cluster = state.config.tasks_per_epoch / state.sources.len();
    let mut trace = Vec::new();

    while state.epoch < total {
        let mut batch = Vec::with_capacity(state.config.tasks_per_epoch);
        for source in &state.sources {
            for _ in 0..per_cluster {
                batch.push(source.draw_context_and_query(
                    state.config.context_size,
                    state.config.query_size,
                    &mut state.rngs.tasks,
                    &mut state.rngs.inputs,
                    &mut state.rngs.noise,
                )?);
            }
        }

        let contributions: Vec<Result<(f64, DVector<f64>)>> = batch
            .par_iter()
            .map(|(xc, yc, xq, yq)| {
                let adapted = inner_adapt(
                    &state.theta,
                    xc,
                    yc,
                    state.config.inner_steps_train,
                    state.config.inner_lr,
                )?;
                // First order: the query gradient at the adapted parameters
                // stands in for the full meta-gradient.
                let loss = batch_mse(&adapted, xq, yq)?;
                let grad = mse_grad(&adapted, xq, yq)?;
                Ok((loss, grad))
            })
            .collect();

        let n = batch.len() as f64;
        let mut meta_grad = DVector::zeros(state.theta.values().len());
        let mut loss_sum = 0.0;
        for c in contributions {
            let (loss, grad) = c?;
            loss_sum += loss;
            meta_grad += grad;
        }
        meta_grad /= n;

        let mut flat = state.theta.values().clone();
        adam_step(&mut state.adam, &mut flat, &meta_grad, state.config.meta_lr)?;
        state.theta = ParamVector::new(state.network.clone(), flat)?;
        trace.push(loss_sum / n);
        state.epoch += 1;

        if let Some(every) = state.config.checkpoint_every {
            if every > 0 && state.epoch % every == 0 && state.epoch < total {
                on_checkpoint(&state.checkpoint())?;
            }
        }
    }
    Ok(MamlRun {
        checkpoint: state.checkpoint(),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::Activation;
    use crate::taskgen::TaskKind;

    fn small_config() -> MamlConfig {
        MamlConfig {
            inner_lr: 1e-3,
            inner_steps_train: 5,
            inner_steps_test: 10,
            meta_lr: 1e-3,
            epochs: 10,
            tasks_per_epoch: 4,
            context_size: 5,
            query_size: 5,
            seed: 0,
            hidden: vec![8],
            checkpoint_every: None,
        }
    }

    fn affine_theta(w: f64, b: f64) -> ParamVector {
        let spec = NetworkSpec::new(vec![1, 1], Activation::Identity).unwrap();
        ParamVector::new(spec, DVector::from_column_slice(&[w, b])).unwrap()
    }

    #[test]
    fn zero_steps_or_zero_lr_change_nothing() {
        let theta = affine_theta(0.4, -0.1);
        let xc = BatchInputs::from_scalars(&[1.0, 2.0]).unwrap();
        let yc = DVector::from_column_slice(&[0.5, 1.5]);
        let same = inner_adapt(&theta, &xc, &yc, 0, 0.1).unwrap();
        assert_eq!(same.values(), theta.values());
        let same = inner_adapt(&theta, &xc, &yc, 7, 0.0).unwrap();
        assert_eq!(same.values(), theta.values());
    }

    #[test]
    fn inner_adapt_matches_hand_recursion_on_affine_model() {
        // y = w x + b with one context point: MSE = (w x + b - y)^2, so
        // w' = w - lr 2 x r and b' = b - lr 2 r with r the residual.
        let (x, y) = (1.5, 2.0);
        let lr = 0.05;
        let (mut w, mut b) = (0.3, -0.2);
        for _ in 0..4 {
            let r = w * x + b - y;
            w -= lr * 2.0 * x * r;
            b -= lr * 2.0 * r;
        }
        let theta = affine_theta(0.3, -0.2);
        let xc = BatchInputs::from_scalars(&[x]).unwrap();
        let yc = DVector::from_column_slice(&[y]);
        let adapted = inner_adapt(&theta, &xc, &yc, 4, lr).unwrap();
        assert!((adapted.values()[0] - w).abs() < 1e-12);
        assert!((adapted.values()[1] - b).abs() < 1e-12);
    }

    #[test]
    fn inner_adapt_strictly_decreases_context_mse_below_stability_threshold() {
        // For the affine model the context MSE is quadratic with Hessian
        // (2/K) X X^T-like; any lr below 1/lambda_max descends strictly.
        let theta = affine_theta(0.0, 0.0);
        let xs = [0.5, -1.0, 2.0];
        let xc = BatchInputs::from_scalars(&xs).unwrap();
        let yc = DVector::from_column_slice(&[1.0, -0.5, 2.5]);
        let gram_scale: f64 = xs.iter().map(|x| x * x + 1.0).sum::<f64>();
        let lr = 0.5 / gram_scale;
        let mut current = theta;
        let mut prev = batch_mse(&current, &xc, &yc).unwrap();
        for _ in 0..20 {
            current = inner_adapt(&current, &xc, &yc, 1, lr).unwrap();
            let now = batch_mse(&current, &xc, &yc).unwrap();
            assert!(now < prev, "MSE must strictly decrease: {now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn predictions_overfit_context_in_the_many_steps_limit() {
        let theta = affine_theta(0.1, 0.1);
        let xc = BatchInputs::from_scalars(&[1.0, -2.0]).unwrap();
        let yc = DVector::from_column_slice(&[0.8, -1.9]); // a line through the points
        let model = MamlModel {
            theta,
            inner_steps: 4000,
            inner_lr: 0.05,
        };
        let pred = model.predict(&xc, &yc, &xc).unwrap();
        assert!((pred[(0, 0)] - 0.8).abs() < 1e-4);
        assert!((pred[(0, 1)] + 1.9).abs() < 1e-4);
    }

    #[test]
    fn zero_meta_lr_keeps_the_initialization() {
        let mut config = small_config();
        config.meta_lr = 0.0;
        let run = meta_train(
            &config,
            &[TaskSource::infinite(TaskKind::Sine)],
            &mut |_| Ok(()),
        )
        .unwrap();
        let Checkpoint::Maml(ck) = run.checkpoint else { panic!() };
        let network = config.network_spec().unwrap();
        let mut init = substream(config.seed, domains::TRAIN_INIT, 0);
        let expected = network.init_params(&mut init);
        assert_eq!(DVector::from_column_slice(&ck.theta), *expected.values());
    }

    #[test]
    fn meta_training_is_deterministic_and_improves_query_mse() {
        let mut config = small_config();
        config.epochs = 300;
        config.tasks_per_epoch = 8;
        let source = TaskSource::infinite(TaskKind::Sine);
        let a = meta_train(&config, &[source.clone()], &mut |_| Ok(())).unwrap();
        let b = meta_train(&config, &[source], &mut |_| Ok(())).unwrap();
        assert_eq!(a.trace, b.trace);
        let head: f64 = a.trace[..30].iter().sum::<f64>() / 30.0;
        let tail: f64 = a.trace[270..].iter().sum::<f64>() / 30.0;
        assert!(tail < head, "query MSE should drop: head {head}, tail {tail}");
    }

    #[test]
    fn zero_inner_steps_predicts_with_the_meta_initialization() {
        let theta = affine_theta(2.0, 1.0);
        let model = MamlModel {
            theta: theta.clone(),
            inner_steps: 0,
            inner_lr: 0.1,
        };
        let xc = BatchInputs::from_scalars(&[0.0]).unwrap();
        let yc = DVector::from_column_slice(&[5.0]);
        let xq = BatchInputs::from_scalars(&[1.0, 3.0]).unwrap();
        let pred = model.predict(&xc, &yc, &xq).unwrap();
        let expected = forward(&theta, &xq).unwrap();
        assert_eq!(pred, expected);
    }

    #[test]
    fn mse_grad_matches_finite_differences() {
        let spec = NetworkSpec::new(vec![1, 6, 1], Activation::ReLU).unwrap();
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let theta = spec.init_params(&mut rng);
        let x = BatchInputs::from_scalars(&[0.4, -1.2, 2.0]).unwrap();
        let y = DVector::from_column_slice(&[0.1, 0.7, -0.4]);
        let grad = mse_grad(&theta, &x, &y).unwrap();
        let mut probe = theta.clone();
        for q in 0..grad.len() {
            let orig = probe.values()[q];
            probe.values_mut()[q] = orig + 1e-6;
            let plus = batch_mse(&probe, &x, &y).unwrap();
            probe.values_mut()[q] = orig - 1e-6;
            let minus = batch_mse(&probe, &x, &y).unwrap();
            probe.values_mut()[q] = orig;
            let numeric = (plus - minus) / 2e-6;
            let rel = (grad[q] - numeric).abs() / grad[q].abs().max(numeric.abs()).max(1.0);
            assert!(rel < 1e-5, "coord {q}: rel {rel}");
        }
    }
}
