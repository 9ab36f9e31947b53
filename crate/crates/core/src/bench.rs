//! Paired multi-round evaluation over a grid of (ways, shots, r) cells, the
//! ablation baselines, parameter sweeps and CSV reporting.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::NetworkParams;
use crate::episodes::{choose_classes, corrupt, derive_seed, sample_episode, ClassPool, CorruptionSpec, Episode, WorldConfig};
use crate::error::{Error, Result};
use crate::pll::RectifyConfig;
use crate::trainer::{meta_test, meta_train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Fspll,
    FspllNm,
    Pn,
    FspllPlus,
    PnPlus,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Fspll, Method::FspllNm, Method::Pn, Method::FspllPlus, Method::PnPlus];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fspll => "fspll",
            Method::FspllNm => "fspll-nm",
            Method::Pn => "pn",
            Method::FspllPlus => "fspll-plus",
            Method::PnPlus => "pn-plus",
        }
    }

    /// Rectification used both when training and when testing this method.
    pub fn rectify(self, base: &RectifyConfig) -> RectifyConfig {
        match self {
            Method::Fspll | Method::FspllPlus => *base,
            Method::FspllNm => RectifyConfig { lambda: 0.0, ..*base },
            Method::Pn | Method::PnPlus => RectifyConfig { iterations: 0, ..*base },
        }
    }

    /// Meta-train support corruption given the cell's corruption.
    pub fn train_corruption(self, cell: CorruptionSpec) -> CorruptionSpec {
        match self {
            Method::FspllPlus | Method::PnPlus => CorruptionSpec::CLEAN,
            _ => cell,
        }
    }

    /// Training configuration for this method under `cell` corruption.
    pub fn train_config(self, base: &TrainConfig, cell: CorruptionSpec) -> TrainConfig {
        TrainConfig { rectify: self.rectify(&base.rectify), corruption: self.train_corruption(cell), ..base.clone() }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod { name: s.to_string(), valid: Method::ALL.map(Method::name).join(", ") })
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.name().to_string()
    }
}

/// Looks up a method by name.
pub fn method_variant(name: &str) -> Result<Method> {
    name.parse()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Lambda,
    K,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub seed: u64,
    pub world: WorldConfig,
    pub train: TrainConfig,
    /// Meta-test ways (N2).
    pub ways: Vec<usize>,
    /// Meta-test shots (K2).
    pub shots: Vec<usize>,
    pub r: Vec<usize>,
    pub p: f64,
    pub rounds: usize,
    pub methods: Vec<Method>,
    pub query_shots: usize,
    /// Meta-test rectification; `k: null` resolves to K2 - 1.
    pub rectify: RectifyConfig,
    pub sweep: Option<SweepSpec>,
    /// Retrain every checkpoint for every round instead of once per cell.
    pub retrain_per_round: bool,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            ways: vec![5, 10],
            shots: vec![5, 10],
            r: vec![0, 1, 2],
            p: 1.0,
            rounds: 50,
            methods: vec![Method::Fspll, Method::FspllNm, Method::Pn],
            query_shots: 15,
            rectify: RectifyConfig::default(),
            sweep: None,
            retrain_per_round: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub ways: usize,
    pub shots: usize,
    pub p: f64,
    pub r: usize,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("N{}-K{}-p{}-r{}", self.ways, self.shots, self.p, self.r)
    }

    pub fn corruption(&self) -> CorruptionSpec {
        CorruptionSpec { p: self.p, r: self.r }
    }
}

impl BenchSpec {
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &ways in &self.ways {
            for &shots in &self.shots {
                for &r in &self.r {
                    out.push(Cell { ways, shots, p: self.p, r });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("at least one method is required"));
        }
        if self.query_shots == 0 {
            return Err(Error::config("query_shots must be positive"));
        }
        CorruptionSpec::new(self.p, 0)?;
        let cells = self.cells();
        if cells.is_empty() {
            return Err(Error::config("empty benchmark grid"));
        }
        for cell in &cells {
            if cell.ways < 2 || cell.shots == 0 {
                return Err(Error::config(format!("cell {} needs at least 2 ways and 1 shot", cell.label())));
            }
            if cell.r >= cell.ways {
                return Err(Error::config(format!("cell {}: r must be below the number of ways", cell.label())));
            }
            for rc in self.test_rectify_variants() {
                rc.with_shots(cell.shots).validate(cell.ways * cell.shots)?;
            }
        }
        self.train.validate()
    }

    fn test_rectify_variants(&self) -> Vec<RectifyConfig> {
        match &self.sweep {
            None => vec![self.rectify],
            Some(s) => s.values.iter().map(|&v| apply_axis(&self.rectify, s.axis, v)).collect(),
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn apply_axis(base: &RectifyConfig, axis: SweepAxis, value: f64) -> RectifyConfig {
    match axis {
        SweepAxis::Lambda => RectifyConfig { lambda: value, ..*base },
        SweepAxis::K => RectifyConfig { k: Some(value as usize), ..*base },
    }
}

fn axis_label(axis: SweepAxis, value: f64) -> String {
    match axis {
        SweepAxis::Lambda => format!("lambda={value}"),
        SweepAxis::K => format!("k={}", value as usize),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MethodResult {
    pub fn new(method: String, accuracies: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        Self { method, accuracies, mean, std }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub label: String,
    pub methods: Vec<MethodResult>,
    /// Content hash of each round's meta-test episode, shared by every method.
    pub episode_hashes: Vec<String>,
}

impl CellResult {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub config_hash: String,
    pub seed: u64,
    pub cells: Vec<CellResult>,
}

/// A trained checkpoint for each method, keyed by what determines its training.
struct CheckpointCache<'a> {
    spec: &'a BenchSpec,
    pool: &'a dyn ClassPool,
    train_classes: &'a [usize],
    trained: HashMap<String, NetworkParams>,
}

impl<'a> CheckpointCache<'a> {
    fn get(&mut self, method: Method, cell: &Cell, round: Option<usize>) -> Result<NetworkParams> {
        let cfg = method.train_config(&self.spec.train, cell.corruption());
        let seed = match round {
            Some(r) => derive_seed(self.spec.seed, &[0x7EA1, r as u64]),
            None => derive_seed(self.spec.seed, &[0x7EA1]),
        };
        let key = format!("{}|{seed}", serde_json::to_string(&cfg)?);
        if let Some(p) = self.trained.get(&key) {
            return Ok(p.clone());
        }
        let (params, _) = meta_train(&cfg, self.pool, self.train_classes, seed)?;
        self.trained.insert(key, params.clone());
        Ok(params)
    }
}

/// Samples the held-out meta-test episode for `round` of cell number `cell_index`.
pub fn test_episode(
    pool: &dyn ClassPool,
    test_classes: &[usize],
    cell: &Cell,
    query_shots: usize,
    seed: u64,
    cell_index: usize,
    round: usize,
) -> Result<Episode> {
    let round_seed = derive_seed(seed, &[0x7E57, cell_index as u64, round as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(round_seed, &[0]));
    let classes = choose_classes(test_classes, cell.ways, &mut rng)?;
    let clean = sample_episode(pool, &classes, cell.shots, query_shots, derive_seed(round_seed, &[1]))?;
    corrupt(&clean, cell.corruption(), derive_seed(round_seed, &[2]))
}

/// An evaluated pipeline: a method's checkpoint plus the rectification used at test time.
struct Entry {
    label: String,
    method: Method,
    rectify: RectifyConfig,
}

fn entries(spec: &BenchSpec) -> Vec<Entry> {
    let mut out = Vec::new();
    for &method in &spec.methods {
        match &spec.sweep {
            None => out.push(Entry { label: method.name().to_string(), method, rectify: method.rectify(&spec.rectify) }),
            Some(s) => {
                for &v in &s.values {
                    out.push(Entry {
                        label: format!("{}@{}", method.name(), axis_label(s.axis, v)),
                        method,
                        rectify: method.rectify(&apply_axis(&spec.rectify, s.axis, v)),
                    });
                }
            }
        }
    }
    out
}

/// Runs every cell of `spec`; all pipelines of a cell see the identical episode stream.
///
/// Rounds run on the ambient rayon pool and are collected by round index.
pub fn run_benchmark(spec: &BenchSpec) -> Result<BenchResult> {
    spec.validate()?;
    let split = spec.world.build(derive_seed(spec.seed, &[0x3071D]))?;
    let pool: &dyn ClassPool = split.pool.as_ref();
    let max_ways = spec.ways.iter().copied().max().unwrap_or(0);
    if split.test.len() < max_ways {
        return Err(Error::PoolTooSmall { available: split.test.len(), required: max_ways });
    }
    let mut cache = CheckpointCache { spec, pool, train_classes: &split.train, trained: HashMap::new() };
    let entries = entries(spec);

    let mut cells = Vec::new();
    for (ci, cell) in spec.cells().into_iter().enumerate() {
        // per-round accuracies, one vector per entry
        let rounds: Vec<(String, Vec<f64>)> = if spec.retrain_per_round {
            let mut out = Vec::with_capacity(spec.rounds);
            for round in 0..spec.rounds {
                let ep = test_episode(pool, &split.test, &cell, spec.query_shots, spec.seed, ci, round)?;
                let mut accs = Vec::with_capacity(entries.len());
                for e in &entries {
                    let params = cache.get(e.method, &cell, Some(round))?;
                    accs.push(meta_test(&params, &ep, &e.rectify)?.accuracy);
                }
                out.push((ep.content_hash(), accs));
            }
            out
        } else {
            let checkpoints = entries.iter().map(|e| cache.get(e.method, &cell, None)).collect::<Result<Vec<_>>>()?;
            (0..spec.rounds)
                .into_par_iter()
                .map(|round| {
                    let ep = test_episode(pool, &split.test, &cell, spec.query_shots, spec.seed, ci, round)?;
                    let accs = entries
                        .iter()
                        .zip(&checkpoints)
                        .map(|(e, params)| meta_test(params, &ep, &e.rectify).map(|o| o.accuracy))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((ep.content_hash(), accs))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let methods = entries
            .iter()
            .enumerate()
            .map(|(k, e)| MethodResult::new(e.label.clone(), rounds.iter().map(|(_, a)| a[k]).collect()))
            .collect();
        cells.push(CellResult {
            cell,
            label: cell.label(),
            methods,
            episode_hashes: rounds.into_iter().map(|(h, _)| h).collect(),
        });
    }
    Ok(BenchResult { config_hash: spec.config_hash(), seed: spec.seed, cells })
}

/// Runs the benchmark once per value of `spec.sweep`, with checkpoints trained
/// under the base rectification and shared across values.
pub fn sweep(spec: &BenchSpec) -> Result<BenchResult> {
    match &spec.sweep {
        Some(s) if !s.values.is_empty() => run_benchmark(spec),
        _ => Err(Error::config("sweep needs a `sweep` section with at least one value")),
    }
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

/// Writes `rounds.csv`, `summary.csv` and `meta.json` into `dir`.
pub fn write_report(result: &BenchResult, spec: &BenchSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rounds = csv::Writer::from_path(dir.join("rounds.csv"))?;
    rounds.write_record(["cell", "method", "round", "accuracy"])?;
    let mut summary = csv::Writer::from_path(dir.join("summary.csv"))?;
    summary.write_record(["cell", "method", "mean", "std"])?;
    for cell in &result.cells {
        for m in &cell.methods {
            for (i, acc) in m.accuracies.iter().enumerate() {
                rounds.write_record([cell.label.as_str(), &m.method, &i.to_string(), &fmt6(*acc)])?;
            }
            summary.write_record([cell.label.as_str(), &m.method, &fmt6(m.mean), &fmt6(m.std)])?;
        }
    }
    rounds.flush()?;
    summary.flush()?;

    let hashes: serde_json::Map<String, serde_json::Value> =
        result.cells.iter().map(|c| (c.label.clone(), serde_json::json!(c.episode_hashes))).collect();
    let meta = serde_json::json!({
        "config_hash": result.config_hash,
        "seed": result.seed,
        "std": "population",
        "version": env!("CARGO_PKG_VERSION"),
        "spec": spec,
        "episode_hashes": hashes,
    });
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}
