//! Class pools, N-way K-shot episode sampling and (p, r) partial-label corruption.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::pll::CandidateMatrix;

/// Mixes `parts` into `base` (splitmix64 finalizer per part).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// A source of labelled feature vectors, indexed by class `0..n_classes()`.
pub trait ClassPool: Sync {
    fn n_classes(&self) -> usize;
    fn dim(&self) -> usize;
    /// Draws `count` feature vectors of `class`.
    fn draw(&self, class: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>>;
}

/// Isotropic Gaussian clusters with uniformly drawn means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub sigma: f64,
    pub mean_scale: f64,
    /// C×d, one class mean per row.
    pub means: Array2<f64>,
}

pub fn make_world(seed: u64, classes: usize, dim: usize, sigma: f64, mean_scale: f64) -> Result<World> {
    if classes < 2 {
        return Err(Error::config(format!("a world needs at least 2 classes, got {classes}")));
    }
    if dim == 0 {
        return Err(Error::config("feature dimension must be positive"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!("sigma must be positive, got {sigma}")));
    }
    if !(mean_scale > 0.0) || !mean_scale.is_finite() {
        return Err(Error::config(format!("mean_scale must be positive, got {mean_scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = Array2::from_shape_simple_fn((classes, dim), || rng.random_range(-mean_scale..=mean_scale));
    for a in 0..classes {
        for b in a + 1..classes {
            if means.row(a) == means.row(b) {
                return Err(Error::config(format!("classes {a} and {b} drew identical means")));
            }
        }
    }
    Ok(World { seed, sigma, mean_scale, means })
}

impl World {
    /// The same means with a different noise level.
    pub fn with_sigma(&self, sigma: f64) -> Self {
        Self { sigma, ..self.clone() }
    }
}

impl ClassPool for World {
    fn n_classes(&self) -> usize {
        self.means.nrows()
    }

    fn dim(&self) -> usize {
        self.means.ncols()
    }

    fn draw(&self, class: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        if class >= self.n_classes() {
            return Err(Error::PoolTooSmall { available: self.n_classes(), required: class + 1 });
        }
        let mean = self.means.row(class);
        Ok((0..count)
            .map(|_| {
                mean.iter()
                    .map(|&mu| {
                        let z: f64 = rng.sample(StandardNormal);
                        mu + self.sigma * z
                    })
                    .collect()
            })
            .collect())
    }
}

/// Records loaded from a feature file, grouped by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePool {
    pub dim: usize,
    /// Original class id of each pool class, ascending.
    pub class_ids: Vec<u64>,
    pub records: Vec<Vec<Vec<f64>>>,
}

impl FeaturePool {
    pub fn from_records(dim: usize, records: impl IntoIterator<Item = (u64, Vec<f64>)>) -> Result<Self> {
        let mut grouped: BTreeMap<u64, Vec<Vec<f64>>> = BTreeMap::new();
        for (class, features) in records {
            if features.len() != dim {
                return Err(Error::config(format!("record of class {class} has {} features, expected {dim}", features.len())));
            }
            grouped.entry(class).or_default().push(features);
        }
        if grouped.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (class_ids, records) = grouped.into_iter().unzip();
        Ok(Self { dim, class_ids, records })
    }

    pub fn len(&self) -> usize {
        self.records.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the pool as `class,f0,..,f{d-1}` CSV, classes ascending.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("class");
        for k in 0..self.dim {
            out.push_str(&format!(",f{k}"));
        }
        out.push('\n');
        for (id, rows) in self.class_ids.iter().zip(&self.records) {
            for row in rows {
                out.push_str(&id.to_string());
                for v in row {
                    out.push(',');
                    out.push_str(&format!("{v:?}"));
                }
                out.push('\n');
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }
}

impl ClassPool for FeaturePool {
    fn n_classes(&self) -> usize {
        self.records.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn draw(&self, class: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        let rows = self.records.get(class).ok_or(Error::PoolTooSmall { available: self.n_classes(), required: class + 1 })?;
        if rows.len() < count {
            return Err(Error::PoolTooSmall { available: rows.len(), required: count });
        }
        Ok(index::sample(rng, rows.len(), count).into_iter().map(|i| rows[i].clone()).collect())
    }
}

/// Reads a `class,f0,f1,...` CSV feature file.
pub fn load_feature_dataset(path: &Path) -> Result<FeaturePool> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_path(path)?;
    let mut rows = reader.records();
    let header = match rows.next() {
        Some(h) => h?,
        None => return Err(Error::EmptyDataset),
    };
    if header.get(0) != Some("class") {
        return Err(Error::MissingClassColumn { line: 1 });
    }
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(Error::RaggedRow { line: 1, expected: 1, found: 0 });
    }
    let mut records = Vec::new();
    for row in rows {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() == 1 && row.get(0) == Some("") {
            continue;
        }
        if row.len() != dim + 1 {
            return Err(Error::RaggedRow { line, expected: dim, found: row.len().saturating_sub(1) });
        }
        let class_str = &row[0];
        let class: u64 = class_str.parse().map_err(|_| Error::BadClass { line, value: class_str.to_string() })?;
        let features = row
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| Error::BadFeature { line, value: v.to_string() })
            })
            .collect::<Result<Vec<_>>>()?;
        records.push((class, features));
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    FeaturePool::from_records(dim, records)
}

/// One N-way task. Local labels are `0..n_labels`; `class_ids[c]` is the pool class of label c.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub n_labels: usize,
    pub shots: usize,
    pub query_shots: usize,
    /// d×n_s
    pub support: Matrix,
    pub candidates: CandidateMatrix,
    /// d×n_q
    pub query: Matrix,
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
    pub class_ids: Vec<usize>,
}

impl Episode {
    pub fn n_support(&self) -> usize {
        self.support.ncols()
    }

    pub fn n_query(&self) -> usize {
        self.query.ncols()
    }

    /// SHA-256 over labels, candidate mask and feature bits, hex-encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.n_labels, self.shots, self.query_shots] {
            h.update((v as u64).to_le_bytes());
        }
        for m in [&self.support, &self.query] {
            for x in m.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.update(self.candidates.mask().iter().map(|&b| b as u8).collect::<Vec<_>>());
        for v in self.support_labels.iter().chain(&self.query_labels).chain(&self.class_ids) {
            h.update((*v as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn columns_to_matrix(dim: usize, cols: &[Vec<f64>]) -> Matrix {
    Matrix::from_shape_fn((dim, cols.len()), |(r, c)| cols[c][r])
}

/// Draws `shots` support and `query_shots` query samples for each of `class_ids`, with one-hot candidates.
pub fn sample_episode(pool: &dyn ClassPool, class_ids: &[usize], shots: usize, query_shots: usize, seed: u64) -> Result<Episode> {
    if class_ids.is_empty() || shots == 0 {
        return Err(Error::config("an episode needs at least one class and one shot"));
    }
    for (i, a) in class_ids.iter().enumerate() {
        if class_ids[..i].contains(a) {
            return Err(Error::config(format!("duplicate class id {a} in episode")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support = Vec::new();
    let mut query = Vec::new();
    let mut support_labels = Vec::new();
    let mut query_labels = Vec::new();
    for (label, &class) in class_ids.iter().enumerate() {
        let mut drawn = pool.draw(class, shots + query_shots, &mut rng)?;
        let q = drawn.split_off(shots);
        support.extend(drawn);
        query.extend(q);
        support_labels.extend(std::iter::repeat_n(label, shots));
        query_labels.extend(std::iter::repeat_n(label, query_shots));
    }
    let n_labels = class_ids.len();
    Ok(Episode {
        n_labels,
        shots,
        query_shots,
        support: columns_to_matrix(pool.dim(), &support),
        candidates: CandidateMatrix::one_hot(&support_labels, n_labels)?,
        query: columns_to_matrix(pool.dim(), &query),
        support_labels,
        query_labels,
        class_ids: class_ids.to_vec(),
    })
}

/// Picks `n` distinct classes from `available`, in draw order.
pub fn choose_classes(available: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if n > available.len() {
        return Err(Error::PoolTooSmall { available: available.len(), required: n });
    }
    Ok(index::sample(rng, available.len(), n).into_iter().map(|i| available[i]).collect())
}

/// `p`: share of support samples made ambiguous; `r`: irrelevant labels added to each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub p: f64,
    pub r: usize,
}

impl CorruptionSpec {
    pub const CLEAN: CorruptionSpec = CorruptionSpec { p: 0.0, r: 0 };

    pub fn new(p: f64, r: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config(format!("corruption proportion p must lie in [0, 1], got {p}")));
        }
        Ok(Self { p, r })
    }

    pub fn is_clean(&self) -> bool {
        self.p == 0.0 || self.r == 0
    }
}

/// Adds `spec.r` irrelevant candidates to `floor(p * n_s)` randomly chosen support samples.
pub fn corrupt(episode: &Episode, spec: CorruptionSpec, seed: u64) -> Result<Episode> {
    let spec = CorruptionSpec::new(spec.p, spec.r)?;
    let l = episode.n_labels;
    if spec.r >= l {
        return Err(Error::config(format!("r = {} irrelevant labels impossible with {l} classes", spec.r)));
    }
    let n = episode.n_support();
    let count = (spec.p * n as f64).floor() as usize;
    let mut out = episode.clone();
    if spec.r == 0 || count == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let truth = episode.support_labels[i];
        let others: Vec<usize> = (0..l).filter(|&c| c != truth).collect();
        for j in index::sample(&mut rng, others.len(), spec.r) {
            out.candidates.set(others[j], i);
        }
    }
    Ok(out)
}

/// Where classes come from and how they split into meta-train and held-out pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Feature CSV to load instead of generating Gaussian clusters.
    pub dataset: Option<PathBuf>,
    pub classes: usize,
    pub dim: usize,
    pub sigma: f64,
    pub mean_scale: f64,
    /// The first `train_classes` classes are used for meta-training, the rest are held out.
    pub train_classes: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { dataset: None, classes: 50, dim: 16, sigma: 1.0, mean_scale: 1.0, train_classes: 30 }
    }
}

/// A class pool with disjoint meta-train and held-out class lists.
pub struct PoolSplit {
    pub pool: Box<dyn ClassPool + Send>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl WorldConfig {
    pub fn generate(&self, seed: u64) -> Result<World> {
        make_world(seed, self.classes, self.dim, self.sigma, self.mean_scale)
    }

    pub fn build(&self, seed: u64) -> Result<PoolSplit> {
        let pool: Box<dyn ClassPool + Send> = match &self.dataset {
            Some(path) => Box::new(load_feature_dataset(path)?),
            None => Box::new(self.generate(seed)?),
        };
        let n = pool.n_classes();
        if self.train_classes == 0 || self.train_classes >= n {
            return Err(Error::config(format!(
                "train_classes must lie in 1..{n} to leave held-out classes, got {}",
                self.train_classes
            )));
        }
        Ok(PoolSplit { pool, train: (0..self.train_classes).collect(), test: (self.train_classes..n).collect() })
    }
}
