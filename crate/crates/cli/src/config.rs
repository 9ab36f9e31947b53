//! The single run-configuration file shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::Context;
use fspll_core::bench::{BenchSpec, SweepSpec};
use fspll_core::{GradSuiteConfig, Method, RectifyConfig, TrainConfig, WorldConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Root of every derived seed; `--seed` overrides it.
    pub seed: u64,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub test: TestConfig,
    pub bench: BenchConfig,
    pub grad_check: GradSuiteConfig,
}

/// Meta-test of a saved checkpoint on held-out classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestConfig {
    pub checkpoint: Option<PathBuf>,
    pub ways: usize,
    pub shots: usize,
    pub query_shots: usize,
    pub p: f64,
    pub r: usize,
    pub rounds: usize,
    pub rectify: RectifyConfig,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self { checkpoint: None, ways: 5, shots: 5, query_shots: 15, p: 1.0, r: 2, rounds: 50, rectify: RectifyConfig::default() }
    }
}

/// Grid, methods and rounds of `bench` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub ways: Vec<usize>,
    pub shots: Vec<usize>,
    pub r: Vec<usize>,
    pub p: f64,
    pub rounds: usize,
    pub methods: Vec<Method>,
    pub query_shots: usize,
    pub rectify: RectifyConfig,
    pub sweep: Option<SweepSpec>,
    pub retrain_per_round: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let d = BenchSpec::default();
        Self {
            ways: d.ways,
            shots: d.shots,
            r: d.r,
            p: d.p,
            rounds: d.rounds,
            methods: d.methods,
            query_shots: d.query_shots,
            rectify: d.rectify,
            sweep: d.sweep,
            retrain_per_round: d.retrain_per_round,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: Config = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // relative paths inside a config are relative to the config file
        if let Some(base) = path.parent() {
            for p in [&mut config.world.dataset, &mut config.test.checkpoint].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn bench_spec(&self) -> BenchSpec {
        let b = self.bench.clone();
        BenchSpec {
            seed: self.seed,
            world: self.world.clone(),
            train: self.train.clone(),
            ways: b.ways,
            shots: b.shots,
            r: b.r,
            p: b.p,
            rounds: b.rounds,
            methods: b.methods,
            query_shots: b.query_shots,
            rectify: b.rectify,
            sweep: b.sweep,
            retrain_per_round: b.retrain_per_round,
        }
    }
}

/// `key = default` for every config key, dotted by section.
pub fn defaults_help() -> String {
    let mut lines = Vec::new();
    let value = serde_json::to_value(Config::default()).expect("defaults serialize");
    flatten("", &value, &mut lines);
    let mut out = String::from(
        "Config file (JSON). Every key is optional; missing keys take these defaults.\n\
         `null` for world.dataset generates Gaussian clusters; `null` for a rectify.k means shots - 1.\n\
         bench.sweep takes {\"axis\": \"lambda\" | \"k\", \"values\": [...]}.\n\
         Methods: fspll, fspll-nm, pn, fspll-plus, pn-plus.\n\n",
    );
    for l in lines {
        out.push_str("  ");
        out.push_str(&l);
        out.push('\n');
    }
    out
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}
