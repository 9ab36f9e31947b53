//! Episodic meta-training of the embedding network and the meta-test procedure.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, Graph};
use crate::embedding::{init_network, NetworkGrads, NetworkParams, NetworkSpec};
use crate::episodes::{choose_classes, corrupt, derive_seed, make_world, sample_episode, ClassPool, CorruptionSpec, Episode};
use crate::error::{Error, Result};
use crate::pll::{self, classify_proba, predict, rectify, QueryObjective, Rectification, RectifyConfig};

/// Hidden widths and output size; the input size comes from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { hidden_dims: vec![64, 64], output_dim: 64 }
    }
}

impl NetworkConfig {
    pub fn spec(&self, input_dim: usize) -> NetworkSpec {
        NetworkSpec::new(input_dim, self.hidden_dims.clone(), self.output_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epoch: usize,
    /// Tasks per epoch (T).
    pub tasks: usize,
    /// Meta-train ways (N1).
    pub ways: usize,
    /// Meta-train support shots per class (K1).
    pub shots: usize,
    pub query_shots: usize,
    /// Partial-label corruption of meta-train support sets.
    pub corruption: CorruptionSpec,
    /// `k: null` resolves to `shots - 1`.
    pub rectify: RectifyConfig,
    pub lr: f64,
    /// The learning rate halves every this many epochs.
    pub lr_halving_period: usize,
    /// Take one SGD step per task instead of one per epoch.
    pub step_per_task: bool,
    /// Reuse the same T tasks every epoch.
    pub fixed_tasks: bool,
    pub objective: QueryObjective,
    pub network: NetworkConfig,
    /// Write wall-clock seconds into the epoch log (makes logs non-reproducible).
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epoch: 200,
            tasks: 100,
            ways: 30,
            shots: 5,
            query_shots: 15,
            corruption: CorruptionSpec { p: 1.0, r: 2 },
            rectify: RectifyConfig::default(),
            lr: 0.001,
            lr_halving_period: 20,
            step_per_task: false,
            fixed_tasks: false,
            objective: QueryObjective::MaxPosterior,
            network: NetworkConfig::default(),
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.ways < 2 || self.shots == 0 || self.query_shots == 0 {
            return Err(Error::config("tasks, shots and query_shots must be positive and ways at least 2"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.lr_halving_period == 0 {
            return Err(Error::config("lr_halving_period must be positive"));
        }
        CorruptionSpec::new(self.corruption.p, self.corruption.r)?;
        if self.corruption.r >= self.ways {
            return Err(Error::config("meta-train corruption r must be below the number of ways"));
        }
        self.rectify.with_shots(self.shots).validate(self.ways * self.shots)
    }
}

/// `lr0 * 2^-(floor(epoch / period))`, epochs counted from 0.
pub fn lr_at(epoch: usize, lr0: f64, period: usize) -> f64 {
    let halvings = (epoch / period.max(1)).min(i32::MAX as usize) as i32;
    lr0 * 0.5f64.powi(halvings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0-based.
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// CSV with columns `epoch,loss,lr,seconds`; seconds are left empty unless `with_time`.
    pub fn to_csv(&self, with_time: bool) -> String {
        let mut out = String::from("epoch,loss,lr,seconds\n");
        for e in &self.epochs {
            let secs = if with_time { format!("{:.6}", e.seconds) } else { String::new() };
            out.push_str(&format!("{},{:.17e},{:.17e},{}\n", e.epoch, e.loss, e.lr, secs));
        }
        out
    }
}

/// Loss of one task and its gradient w.r.t. every network parameter.
pub fn task_loss_and_grad(
    params: &NetworkParams,
    episode: &Episode,
    rectify_cfg: &RectifyConfig,
    objective: QueryObjective,
) -> Result<(f64, NetworkGrads)> {
    let cfg = rectify_cfg.with_shots(episode.shots);
    let z_support = params.embed_values(&episode.support)?;
    let Rectification { weights, .. } = rectify(&z_support, &episode.candidates, &cfg)?;

    let mut graph = Graph::new();
    let net = params.bind(&mut graph);
    let xs = graph.leaf(episode.support.clone());
    let xq = graph.leaf(episode.query.clone());
    let zs = net.embed(&mut graph, xs)?;
    let zq = net.embed(&mut graph, xq)?;
    let loss = pll::episode_loss(&mut graph, zs, zq, &weights, cfg.distance, objective, Some(&episode.query_labels))?;
    graph.forward();
    let value = graph.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite("episode loss".into()));
    }
    graph.backward(loss)?;
    Ok((value, net.grads(&graph)))
}

/// Samples meta-train task `task` of `epoch`: fresh classes, samples and corruption per seed.
pub fn sample_task(
    pool: &dyn ClassPool,
    classes: &[usize],
    config: &TrainConfig,
    seed: u64,
    epoch: usize,
    task: usize,
) -> Result<Episode> {
    let round = if config.fixed_tasks { 0 } else { epoch as u64 };
    let task_seed = derive_seed(seed, &[0x7A5C, round, task as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(task_seed, &[0]));
    let chosen = choose_classes(classes, config.ways, &mut rng)?;
    let clean = sample_episode(pool, &chosen, config.shots, config.query_shots, derive_seed(task_seed, &[1]))?;
    corrupt(&clean, config.corruption, derive_seed(task_seed, &[2]))
}

/// Meta-trains an embedding over tasks drawn from `classes` of `pool`.
///
/// Task evaluation runs on the ambient rayon pool; gradients are summed in
/// task order, so results do not depend on the thread count.
pub fn meta_train(config: &TrainConfig, pool: &dyn ClassPool, classes: &[usize], seed: u64) -> Result<(NetworkParams, TrainLog)> {
    config.validate()?;
    if classes.len() < config.ways {
        return Err(Error::PoolTooSmall { available: classes.len(), required: config.ways });
    }
    let mut params = init_network(&config.network.spec(pool.dim()), derive_seed(seed, &[0x1417]))?;
    let mut log = TrainLog::default();

    for epoch in 0..config.max_epoch {
        let start = Instant::now();
        let lr = lr_at(epoch, config.lr, config.lr_halving_period);
        let mean_loss = if config.step_per_task {
            let mut total = 0.0;
            for t in 0..config.tasks {
                let ep = sample_task(pool, classes, config, seed, epoch, t)?;
                let (loss, grads) =
                    task_loss_and_grad(&params, &ep, &config.rectify, config.objective).map_err(|e| nonfinite_at(e, epoch, t))?;
                params.sgd_step(&grads, lr);
                total += loss;
            }
            total / config.tasks as f64
        } else {
            let results: Vec<Result<(f64, NetworkGrads)>> = (0..config.tasks)
                .into_par_iter()
                .map(|t| {
                    let ep = sample_task(pool, classes, config, seed, epoch, t)?;
                    task_loss_and_grad(&params, &ep, &config.rectify, config.objective).map_err(|e| nonfinite_at(e, epoch, t))
                })
                .collect();
            let mut total = 0.0;
            let mut grads = NetworkGrads::zeros_like(&params);
            for r in results {
                let (loss, g) = r?;
                total += loss;
                grads.add_assign(&g);
            }
            let inv = 1.0 / config.tasks as f64;
            grads.scale(inv);
            params.sgd_step(&grads, lr);
            total * inv
        };
        log.epochs.push(EpochRecord { epoch, loss: mean_loss, lr, seconds: start.elapsed().as_secs_f64() });
    }
    Ok((params, log))
}

fn nonfinite_at(e: Error, epoch: usize, task: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::NonFiniteLoss { epoch, task },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestOutcome {
    /// 0-based episode-local labels.
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    pub rectification: Rectification,
}

/// Rectifies the support of `episode` under the fixed embedding and classifies its queries.
pub fn meta_test(params: &NetworkParams, episode: &Episode, rectify_cfg: &RectifyConfig) -> Result<TestOutcome> {
    if episode.support.nrows() != params.input_dim() {
        return Err(Error::ShapeMismatch { op: "meta_test", left: (params.input_dim(), 0), right: episode.support.dim() });
    }
    let cfg = rectify_cfg.with_shots(episode.shots);
    let zs = params.embed_values(&episode.support)?;
    let zq = params.embed_values(&episode.query)?;
    let rectification = rectify(&zs, &episode.candidates, &cfg)?;
    let probs = classify_proba(&zq, &rectification.prototypes, cfg.distance)?;
    let predictions = predict(&probs);
    let correct = predictions.iter().zip(&episode.query_labels).filter(|(p, t)| p == t).count();
    let accuracy = correct as f64 / predictions.len() as f64;
    Ok(TestOutcome { predictions, accuracy, rectification })
}

/// Size limits of the random tiny tasks drawn by [`gradient_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradSuiteConfig {
    pub episodes: usize,
    pub max_dim: usize,
    pub max_ways: usize,
    pub max_shots: usize,
    pub query_shots: usize,
    /// Central-difference step.
    pub step: f64,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        Self { episodes: 20, max_dim: 8, max_ways: 4, max_shots: 4, query_shots: 2, step: 1e-5 }
    }
}

/// One task of the gradient suite and how its analytic gradient fared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteCase {
    pub dim: usize,
    pub ways: usize,
    pub shots: usize,
    pub r: usize,
    pub hidden: usize,
    pub output: usize,
    pub loss: f64,
    /// Worst entry over every weight and bias.
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
}

/// Checks the task-loss gradient w.r.t. every network parameter against
/// central differences on `config.episodes` random tiny tasks.
pub fn gradient_suite(config: &GradSuiteConfig, seed: u64) -> Result<Vec<GradSuiteCase>> {
    if config.max_dim == 0 || config.max_ways < 2 || config.max_shots < 2 || config.query_shots == 0 {
        return Err(Error::config("gradient suite needs max_dim >= 1, max_ways >= 2, max_shots >= 2, query_shots >= 1"));
    }
    if !(config.step > 0.0) {
        return Err(Error::config("gradient suite step must be positive"));
    }
    (0..config.episodes)
        .map(|i| {
            let case_seed = derive_seed(seed, &[0x6AD, i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
            let dim = rng.random_range(1..=config.max_dim);
            let ways = rng.random_range(2..=config.max_ways);
            let shots = rng.random_range(2..=config.max_shots);
            let r = rng.random_range(0..ways);
            let hidden = rng.random_range(2..=6);
            let output = rng.random_range(2..=5);

            let world = make_world(derive_seed(case_seed, &[1]), ways, dim, 0.5, 1.0)?;
            let classes: Vec<usize> = (0..ways).collect();
            let clean = sample_episode(&world, &classes, shots, config.query_shots, derive_seed(case_seed, &[2]))?;
            let ep = corrupt(&clean, CorruptionSpec { p: 1.0, r }, derive_seed(case_seed, &[3]))?;
            let params = init_network(&NetworkSpec::new(dim, vec![hidden], output), derive_seed(case_seed, &[4]))?;

            let cfg = RectifyConfig::default().with_shots(shots);
            let zs = params.embed_values(&ep.support)?;
            let weights = rectify(&zs, &ep.candidates, &cfg)?.weights;
            let mut graph = Graph::new();
            let net = params.bind(&mut graph);
            let xs = graph.leaf(ep.support.clone());
            let xq = graph.leaf(ep.query.clone());
            let s = net.embed(&mut graph, xs)?;
            let q = net.embed(&mut graph, xq)?;
            let loss = pll::episode_loss(&mut graph, s, q, &weights, cfg.distance, QueryObjective::MaxPosterior, None)?;
            graph.forward();
            let value = graph.scalar(loss);

            let mut case =
                GradSuiteCase { dim, ways, shots, r, hidden, output, loss: value, max_rel_error: 0.0, checked: 0, excluded: 0 };
            for layer in 0..params.layers.len() {
                for leaf in [net.weight(layer), net.bias(layer)] {
                    let rep = grad_check(&mut graph, leaf, loss, config.step)?;
                    case.max_rel_error = case.max_rel_error.max(rep.max_rel_error);
                    case.checked += rep.checked;
                    case.excluded += rep.excluded;
                }
            }
            Ok(case)
        })
        .collect()
}

/// Writes `config.json`, `log.csv` and `checkpoint.json` into `dir`.
pub fn write_run<C: Serialize>(dir: &Path, config: &C, log: &TrainLog, params: &NetworkParams, with_time: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    fs::write(dir.join("log.csv"), log.to_csv(with_time))?;
    params.save(&dir.join("checkpoint.json"))
}
