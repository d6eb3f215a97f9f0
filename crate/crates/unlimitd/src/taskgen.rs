//! Synthetic regression task clusters: sines, lines and quadratics on the
//! interval `[-5, 5]`, with Gaussian noise on context observations and
//! noiseless query targets.
//!
//! Sampling is organized around seeded, purpose-separated ChaCha streams so
//! that reproducibility survives both resumption and parallel evaluation:
//! task parameters, input locations and observation noise each come from
//! their own stream.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffnet::BatchInputs;
use crate::error::{Error, Result};

pub const INPUT_MIN: f64 = -5.0;
pub const INPUT_MAX: f64 = 5.0;
/// Noise std applied to context observations; query targets stay clean.
pub const CONTEXT_NOISE_STD: f64 = 0.05;

/// Deterministic sub-stream of a base seed. Streams are keyed by a purpose
/// domain plus an index, so independent consumers never share one.
pub(crate) fn substream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 40) ^ index);
    rng
}

pub(crate) mod domains {
    pub const DATASET_TASKS: u64 = 0x01;
    pub const DATASET_INPUTS: u64 = 0x02;
    pub const DATASET_NOISE: u64 = 0x03;
    pub const TRAIN_TASKS: u64 = 0x11;
    pub const TRAIN_INPUTS: u64 = 0x12;
    pub const TRAIN_NOISE: u64 = 0x13;
    pub const TRAIN_INIT: u64 = 0x14;
    pub const EVAL_TASK: u64 = 0x21;
    pub const EVAL_QUERY: u64 = 0x22;
    pub const EVAL_CONTEXT: u64 = 0x23;
    pub const OOD_TASK: u64 = 0x24;
    pub const OOD_CONTEXT: u64 = 0x25;
}

/// Which cluster a task is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Sine,
    Line,
    Quadratic,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sine" | "sines" => Ok(TaskKind::Sine),
            "line" | "lines" | "linear" => Ok(TaskKind::Line),
            "quadratic" | "quadratics" => Ok(TaskKind::Quadratic),
            other => Err(Error::InvalidConfig(format!("unknown task cluster '{other}'"))),
        }
    }
}

/// One sampled function:
/// sine `A sin(x + phi) + 1`, line `a x`, quadratic `a (x - phi)^2 + 0.5`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Sine { amplitude: f64, phase: f64 },
    Line { slope: f64 },
    Quadratic { coeff: f64, shift: f64 },
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSpec::Sine { .. } => TaskKind::Sine,
            TaskSpec::Line { .. } => TaskKind::Line,
            TaskSpec::Quadratic { .. } => TaskKind::Quadratic,
        }
    }

    /// Noiseless function value.
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            TaskSpec::Sine { amplitude, phase } => amplitude * (x + phase).sin() + 1.0,
            TaskSpec::Line { slope } => slope * x,
            TaskSpec::Quadratic { coeff, shift } => coeff * (x - shift) * (x - shift) + 0.5,
        }
    }

    pub fn eval_batch(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.eval(x)).collect()
    }
}

/// Draws task parameters uniformly over the cluster's parameter box.
pub fn sample_task<R: Rng + ?Sized>(kind: TaskKind, rng: &mut R) -> TaskSpec {
    match kind {
        TaskKind::Sine => TaskSpec::Sine {
            amplitude: rng.random_range(0.1..=5.0),
            phase: rng.random_range(0.0..=std::f64::consts::PI),
        },
        TaskKind::Line => TaskSpec::Line {
            slope: rng.random_range(-1.0..=1.0),
        },
        TaskKind::Quadratic => TaskSpec::Quadratic {
            coeff: rng.random_range(-0.2..=0.2),
            shift: rng.random_range(-2.0..=2.0),
        },
    }
}

/// Uniform input locations on `[-5, 5]`.
pub fn sample_inputs<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<f64> {
    (0..count)
        .map(|_| rng.random_range(INPUT_MIN..=INPUT_MAX))
        .collect()
}

/// A noisy context batch: `K` uniform inputs and observations
/// `f(x) + N(0, noise_std^2)`, noise drawn i.i.d. per scalar output.
pub fn sample_context<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    task: &TaskSpec,
    k: usize,
    noise_std: f64,
    input_rng: &mut R1,
    noise_rng: &mut R2,
) -> Result<(BatchInputs, DVector<f64>)> {
    if k == 0 {
        return Err(Error::InvalidConfig("context size must be >= 1".into()));
    }
    let xs = sample_inputs(k, input_rng);
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| task.eval(x) + noise_std * noise_rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok((BatchInputs::from_scalars(&xs)?, DVector::from_vec(ys)))
}

/// A frozen dataset: `N` tasks with `M` points each, observation noise applied
/// once at construction so every epoch sees the same observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDataset {
    tasks: Vec<TaskSpec>,
    inputs: Vec<Vec<f64>>,
    observations: Vec<Vec<f64>>,
    noise_std: f64,
}

impl FiniteDataset {
    pub fn generate(
        kind: TaskKind,
        n_tasks: usize,
        m_points: usize,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if n_tasks == 0 || m_points == 0 {
            return Err(Error::InvalidConfig(
                "a finite dataset needs at least one task and one point".into(),
            ));
        }
        let mut task_rng = substream(seed, domains::DATASET_TASKS, 0);
        let mut input_rng = substream(seed, domains::DATASET_INPUTS, 0);
        let mut noise_rng = substream(seed, domains::DATASET_NOISE, 0);
        let mut tasks = Vec::with_capacity(n_tasks);
        let mut inputs = Vec::with_capacity(n_tasks);
        let mut observations = Vec::with_capacity(n_tasks);
        for _ in 0..n_tasks {
            let task = sample_task(kind, &mut task_rng);
            let xs = sample_inputs(m_points, &mut input_rng);
            let ys: Vec<f64> = xs
                .iter()
                .map(|&x| task.eval(x) + noise_std * noise_rng.sample::<f64, _>(StandardNormal))
                .collect();
            tasks.push(task);
            inputs.push(xs);
            observations.push(ys);
        }
        Ok(Self {
            tasks,
            inputs,
            observations,
            noise_std,
        })
    }

    pub fn from_parts(
        tasks: Vec<TaskSpec>,
        inputs: Vec<Vec<f64>>,
        observations: Vec<Vec<f64>>,
        noise_std: f64,
    ) -> Result<Self> {
        if tasks.is_empty() || tasks.len() != inputs.len() || tasks.len() != observations.len() {
            return Err(Error::InvalidConfig(
                "dataset parts must be nonempty and aligned".into(),
            ));
        }
        let m = inputs[0].len();
        if m == 0
            || inputs.iter().any(|x| x.len() != m)
            || observations.iter().any(|y| y.len() != m)
        {
            return Err(Error::InvalidConfig(
                "every task must carry the same nonzero number of points".into(),
            ));
        }
        Ok(Self {
            tasks,
            inputs,
            observations,
            noise_std,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn points_per_task(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn task(&self, i: usize) -> &TaskSpec {
        &self.tasks[i]
    }

    pub fn task_inputs(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    pub fn task_observations(&self, i: usize) -> &[f64] {
        &self.observations[i]
    }

    /// A context batch for task `i`: a uniformly random `k`-subset of the
    /// frozen points, drawn without replacement.
    pub fn context_batch<R: Rng + ?Sized>(
        &self,
        task_idx: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<(BatchInputs, DVector<f64>)> {
        let m = self.points_per_task();
        if k == 0 || k > m {
            return Err(Error::InvalidConfig(format!(
                "context size {k} must be in 1..={m} for this dataset"
            )));
        }
        let picks = sample_without_replacement(m, k, rng);
        let xs: Vec<f64> = picks.iter().map(|&i| self.inputs[task_idx][i]).collect();
        let ys: Vec<f64> = picks
            .iter()
            .map(|&i| self.observations[task_idx][i])
            .collect();
        Ok((BatchInputs::from_scalars(&xs)?, DVector::from_vec(ys)))
    }
}

/// First `k` entries of a partial Fisher-Yates shuffle of `0..m`.
pub(crate) fn sample_without_replacement<R: Rng + ?Sized>(
    m: usize,
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..m).collect();
    for i in 0..k {
        let j = rng.random_range(i..m);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Where training tasks come from: a fresh draw from a cluster each epoch, a
/// fresh draw from several clusters (for flat training on a multimodal
/// stream), or a frozen finite pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TaskSource {
    Infinite {
        kind: TaskKind,
        noise_std: f64,
    },
    InfiniteMix {
        kinds: Vec<TaskKind>,
        noise_std: f64,
    },
    Finite {
        dataset: FiniteDataset,
    },
}

impl TaskSource {
    pub fn infinite(kind: TaskKind) -> Self {
        TaskSource::Infinite {
            kind,
            noise_std: CONTEXT_NOISE_STD,
        }
    }

    /// One stream over several clusters; epoch batches split evenly across
    /// the kinds, single draws pick a kind uniformly.
    pub fn infinite_mix(kinds: Vec<TaskKind>) -> Self {
        TaskSource::InfiniteMix {
            kinds,
            noise_std: CONTEXT_NOISE_STD,
        }
    }

    /// The clusters this source draws from.
    pub fn kinds(&self) -> Vec<TaskKind> {
        match self {
            TaskSource::Infinite { kind, .. } => vec![*kind],
            TaskSource::InfiniteMix { kinds, .. } => kinds.clone(),
            TaskSource::Finite { dataset } => {
                let mut kinds: Vec<TaskKind> =
                    (0..dataset.n_tasks()).map(|i| dataset.task(i).kind()).collect();
                kinds.dedup();
                kinds
            }
        }
    }

    /// One training task's context batch.
    pub fn draw_context(
        &self,
        k: usize,
        task_rng: &mut ChaCha8Rng,
        input_rng: &mut ChaCha8Rng,
        noise_rng: &mut ChaCha8Rng,
    ) -> Result<(BatchInputs, DVector<f64>)> {
        match self {
            TaskSource::Infinite { kind, noise_std } => {
                let task = sample_task(*kind, task_rng);
                sample_context(&task, k, *noise_std, input_rng, noise_rng)
            }
            TaskSource::InfiniteMix { kinds, noise_std } => {
                let kind = kinds[task_rng.random_range(0..kinds.len())];
                let task = sample_task(kind, task_rng);
                sample_context(&task, k, *noise_std, input_rng, noise_rng)
            }
            TaskSource::Finite { dataset } => {
                let idx = task_rng.random_range(0..dataset.n_tasks());
                dataset.context_batch(idx, k, input_rng)
            }
        }
    }

    /// One epoch's worth of training tasks. Infinite sources draw `n` fresh
    /// tasks; finite sources pick an `n`-subset of their pool without
    /// replacement, so an epoch never sees the same frozen task twice.
    pub fn draw_epoch_batch(
        &self,
        n: usize,
        k: usize,
        task_rng: &mut ChaCha8Rng,
        input_rng: &mut ChaCha8Rng,
        noise_rng: &mut ChaCha8Rng,
    ) -> Result<Vec<(BatchInputs, DVector<f64>)>> {
        match self {
            TaskSource::Infinite { .. } => (0..n)
                .map(|_| self.draw_context(k, task_rng, input_rng, noise_rng))
                .collect(),
            // A mixed stream splits each epoch evenly across its clusters.
            TaskSource::InfiniteMix { kinds, noise_std } => (0..n)
                .map(|i| {
                    let task = sample_task(kinds[i % kinds.len()], task_rng);
                    sample_context(&task, k, *noise_std, input_rng, noise_rng)
                })
                .collect(),
            TaskSource::Finite { dataset } => {
                if n > dataset.n_tasks() {
                    return Err(Error::InvalidConfig(format!(
                        "{n} tasks per epoch requested from a pool of {}",
                        dataset.n_tasks()
                    )));
                }
                sample_without_replacement(dataset.n_tasks(), n, task_rng)
                    .into_iter()
                    .map(|idx| dataset.context_batch(idx, k, input_rng))
                    .collect()
            }
        }
    }

    /// Context plus query batches for gradient-descent baselines. In finite
    /// mode both batches are subsets of the same frozen pool; in infinite mode
    /// queries are fresh noiseless draws.
    pub fn draw_context_and_query(
        &self,
        k: usize,
        l: usize,
        task_rng: &mut ChaCha8Rng,
        input_rng: &mut ChaCha8Rng,
        noise_rng: &mut ChaCha8Rng,
    ) -> Result<(BatchInputs, DVector<f64>, BatchInputs, DVector<f64>)> {
        match self {
            TaskSource::Infinite { .. } | TaskSource::InfiniteMix { .. } => {
                let (kind, noise_std) = match self {
                    TaskSource::Infinite { kind, noise_std } => (*kind, *noise_std),
                    TaskSource::InfiniteMix { kinds, noise_std } => {
                        (kinds[task_rng.random_range(0..kinds.len())], *noise_std)
                    }
                    TaskSource::Finite { .. } => unreachable!(),
                };
                let task = sample_task(kind, task_rng);
                let (xc, yc) = sample_context(&task, k, noise_std, input_rng, noise_rng)?;
                let xq_vals = sample_inputs(l, input_rng);
                let yq = DVector::from_vec(task.eval_batch(&xq_vals));
                Ok((xc, yc, BatchInputs::from_scalars(&xq_vals)?, yq))
            }
            TaskSource::Finite { dataset } => {
                let idx = task_rng.random_range(0..dataset.n_tasks());
                let (xc, yc) = dataset.context_batch(idx, k, input_rng)?;
                let (xq, yq) = dataset.context_batch(idx, l, input_rng)?;
                Ok((xc, yc, xq, yq))
            }
        }
    }

    /// Input batches for Fisher information estimation. A finite source
    /// contributes exactly its tasks' input sets; an infinite source
    /// synthesizes `aux_tasks` batches of `aux_inputs` fresh locations.
    pub fn fim_input_batches(
        &self,
        aux_tasks: usize,
        aux_inputs: usize,
        input_rng: &mut ChaCha8Rng,
    ) -> Result<Vec<BatchInputs>> {
        match self {
            TaskSource::Infinite { .. } | TaskSource::InfiniteMix { .. } => (0..aux_tasks)
                .map(|_| BatchInputs::from_scalars(&sample_inputs(aux_inputs, input_rng)))
                .collect(),
            TaskSource::Finite { dataset } => (0..dataset.n_tasks())
                .map(|i| BatchInputs::from_scalars(dataset.task_inputs(i)))
                .collect(),
        }
    }
}

/// Monte-Carlo estimate of the cluster mean function at the given inputs.
/// Reference-grade: used to sanity-check learned prior means.
pub fn cluster_mean_oracle(kind: TaskKind, xs: &[f64], n_mc: usize, seed: u64) -> Result<Vec<f64>> {
    if n_mc < 10_000 {
        return Err(Error::InvalidConfig(
            "the Monte-Carlo mean needs n_mc >= 10^4".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; xs.len()];
    for _ in 0..n_mc {
        let task = sample_task(kind, &mut rng);
        for (a, &x) in acc.iter_mut().zip(xs.iter()) {
            *a += task.eval(x);
        }
    }
    Ok(acc.into_iter().map(|a| a / n_mc as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn eval_formulas_hit_the_fixed_points() {
        assert_eq!(
            TaskSpec::Sine {
                amplitude: 1.0,
                phase: 0.0
            }
            .eval(0.0),
            1.0
        );
        assert_eq!(TaskSpec::Line { slope: -1.0 }.eval(2.0), -2.0);
        let q = TaskSpec::Quadratic {
            coeff: 0.2,
            shift: -2.0,
        };
        assert!((q.eval(0.0) - 1.3).abs() < 1e-15);
    }

    #[test]
    fn sine_parameter_moments_match_uniform_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let (mut amp_sum, mut phase_sum) = (0.0, 0.0);
        for _ in 0..n {
            match sample_task(TaskKind::Sine, &mut rng) {
                TaskSpec::Sine { amplitude, phase } => {
                    amp_sum += amplitude;
                    phase_sum += phase;
                }
                _ => unreachable!(),
            }
        }
        assert!((amp_sum / n as f64 - 2.55).abs() < 0.02);
        assert!((phase_sum / n as f64 - PI / 2.0).abs() < 0.02);
    }

    #[test]
    fn line_slopes_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            match sample_task(TaskKind::Line, &mut rng) {
                TaskSpec::Line { slope } => assert!((-1.0..=1.0).contains(&slope)),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn task_sampling_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        for kind in [TaskKind::Sine, TaskKind::Line, TaskKind::Quadratic] {
            assert_eq!(sample_task(kind, &mut a), sample_task(kind, &mut b));
        }
    }

    #[test]
    fn context_noise_has_the_configured_scale() {
        let task = TaskSpec::Line { slope: 0.5 };
        let mut input_rng = ChaCha8Rng::seed_from_u64(2);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut sq = 0.0;
        let mut mean = 0.0;
        for _ in 0..n {
            let (x, y) = sample_context(&task, 1, 0.05, &mut input_rng, &mut noise_rng).unwrap();
            let eps = y[0] - task.eval(x.matrix()[(0, 0)]);
            mean += eps;
            sq += eps * eps;
        }
        mean /= n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        assert!((std - 0.05).abs() < 0.002, "std {std}");
    }

    #[test]
    fn zero_noise_reproduces_the_function_exactly() {
        let task = TaskSpec::Sine {
            amplitude: 2.0,
            phase: 1.0,
        };
        let mut input_rng = ChaCha8Rng::seed_from_u64(4);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y) = sample_context(&task, 10, 0.0, &mut input_rng, &mut noise_rng).unwrap();
        assert_eq!(x.matrix().nrows(), 1);
        assert_eq!(x.matrix().ncols(), 10);
        assert_eq!(y.len(), 10);
        for t in 0..10 {
            assert_eq!(y[t], task.eval(x.matrix()[(0, t)]));
        }
    }

    #[test]
    fn finite_dataset_is_fully_seed_determined() {
        let a = FiniteDataset::generate(TaskKind::Sine, 10, 50, 0.05, 7).unwrap();
        let b = FiniteDataset::generate(TaskKind::Sine, 10, 50, 0.05, 7).unwrap();
        assert_eq!(a, b);
        let c = FiniteDataset::generate(TaskKind::Sine, 10, 50, 0.05, 8).unwrap();
        assert_ne!(a, c);
        for i in 0..10 {
            for &x in a.task_inputs(i) {
                assert!((INPUT_MIN..=INPUT_MAX).contains(&x));
            }
        }
    }

    #[test]
    fn finite_context_subsets_have_no_repeats() {
        let ds = FiniteDataset::generate(TaskKind::Line, 3, 20, 0.05, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let (x, _) = ds.context_batch(1, 12, &mut rng).unwrap();
            let mut seen: Vec<f64> = x.matrix().iter().copied().collect();
            seen.sort_by(f64::total_cmp);
            seen.dedup();
            assert_eq!(seen.len(), 12);
        }
        assert!(ds.context_batch(0, 21, &mut rng).is_err());
    }

    #[test]
    fn sine_values_stay_in_the_offset_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let task = sample_task(TaskKind::Sine, &mut rng);
            let x = rng.random_range(INPUT_MIN..=INPUT_MAX);
            let y = task.eval(x);
            assert!((-4.0..=6.0).contains(&y));
        }
    }

    #[test]
    fn line_cluster_mean_vanishes_by_symmetry() {
        let n_mc = 40_000;
        let means = cluster_mean_oracle(TaskKind::Line, &[-3.0, 1.5, 4.0], n_mc, 1).unwrap();
        let tol = 3.0 / (n_mc as f64).sqrt() * 5.0; // inputs up to |x| = 5
        for m in means {
            assert!(m.abs() < tol, "mean {m}");
        }
    }

    #[test]
    fn sine_cluster_mean_matches_quadrature() {
        // E[A sin(x + phi) + 1] with A ~ U[0.1, 5], phi ~ U[0, pi]:
        // Simpson quadrature over phi provides the independent value.
        let x = PI / 2.0;
        let n_grid = 2000;
        let h = PI / n_grid as f64;
        let mut integral = 0.0;
        for i in 0..=n_grid {
            let phi = i as f64 * h;
            let w = if i == 0 || i == n_grid {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            integral += w * (x + phi).sin();
        }
        integral *= h / 3.0;
        let expected = 2.55 * integral / PI + 1.0;

        let n_mc = 200_000;
        let got = cluster_mean_oracle(TaskKind::Sine, &[x], n_mc, 2).unwrap()[0];
        assert!((got - expected).abs() < 0.03, "mc {got} vs quadrature {expected}");
    }

    #[test]
    fn quadratic_cluster_mean_is_the_offset() {
        let got = cluster_mean_oracle(TaskKind::Quadratic, &[0.0], 100_000, 3).unwrap()[0];
        // a is symmetric about 0, so E[a (x - phi)^2] = 0 at any x.
        assert!((got - 0.5).abs() < 0.01, "mean {got}");
    }

    #[test]
    fn substreams_are_independent_and_stable() {
        let a: Vec<u64> = {
            let mut r = substream(1, 2, 3);
            (0..4).map(|_| r.random()).collect()
        };
        let b: Vec<u64> = {
            let mut r = substream(1, 2, 3);
            (0..4).map(|_| r.random()).collect()
        };
        assert_eq!(a, b);
        let c: Vec<u64> = {
            let mut r = substream(1, 2, 4);
            (0..4).map(|_| r.random()).collect()
        };
        assert_ne!(a, c);
    }
}
