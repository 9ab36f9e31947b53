//! Feed-forward embedding network: relu hidden layers, identity output.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self { input_dim, hidden_dims, output_dim }
    }

    /// `input_dim -> 64 -> 64 -> 64`.
    pub fn default_for(input_dim: usize) -> Self {
        Self::new(input_dim, vec![64, 64], 64)
    }

    /// (in, out) for every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config(format!("zero-dimension layer in {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// out×in
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Weights and biases of the embedding network, plus the seed used to draw them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    pub seed: u64,
    pub layers: Vec<Layer>,
}

/// He initialization: weights ~ N(0, 2 / in), biases zero.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Layer {
                weight: Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(&mut rng)),
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(NetworkParams { spec: spec.clone(), seed, layers })
}

impl NetworkParams {
    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Non-differentiable forward pass over the columns of `x` (d×n).
    pub fn embed_values(&self, x: &Matrix) -> Result<Matrix> {
        if x.nrows() != self.input_dim() {
            return Err(Error::ShapeMismatch { op: "embed", left: (self.input_dim(), 0), right: x.dim() });
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = layer.weight.dot(&h);
            for mut col in next.columns_mut() {
                col += &layer.bias;
            }
            if i < last {
                next.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
            }
            h = next;
        }
        Ok(h)
    }

    /// Adds every weight and bias to `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundNetwork {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = graph.leaf(l.weight.clone());
                let b = graph.leaf(l.bias.clone().insert_axis(ndarray::Axis(1)));
                (w, b)
            })
            .collect();
        BoundNetwork { input_dim: self.input_dim(), layers }
    }

    /// Flattens into one vector: per layer, weight row-major then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// `self -= lr * grads`, layer by layer.
    pub fn sgd_step(&mut self, grads: &NetworkGrads, lr: f64) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weight.scaled_add(-lr, gw);
            layer.bias.scaled_add(-lr, gb);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let params: NetworkParams = serde_json::from_str(&fs::read_to_string(path)?)?;
        params.spec.validate()?;
        let dims = params.spec.layer_dims();
        let consistent = dims.len() == params.layers.len()
            && dims.iter().zip(&params.layers).all(|(&(i, o), l)| l.weight.dim() == (o, i) && l.bias.len() == o);
        if !consistent {
            return Err(Error::config("checkpoint layer shapes disagree with its spec"));
        }
        Ok(params)
    }
}

/// Gradients with the same layout as [`NetworkParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl NetworkGrads {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self { layers: params.layers.iter().map(|l| (Array2::zeros(l.weight.dim()), Array1::zeros(l.bias.len()))).collect() }
    }

    pub fn add_assign(&mut self, other: &NetworkGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            *w *= factor;
            *b *= factor;
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>()).collect()
    }
}

/// Network parameters living as leaves of a [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundNetwork {
    input_dim: usize,
    layers: Vec<(Tensor, Tensor)>,
}

impl BoundNetwork {
    /// Embeds the columns of `x` (d×n) into m×n.
    pub fn embed(&self, graph: &mut Graph, x: Tensor) -> Result<Tensor> {
        let (rows, cols) = graph.shape(x);
        if rows != self.input_dim {
            return Err(Error::ShapeMismatch { op: "embed", left: (self.input_dim, cols), right: (rows, cols) });
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wx = graph.matmul(w, h)?;
            h = graph.add_bias(wx, b)?;
            if i < last {
                h = graph.relu(h);
            }
        }
        Ok(h)
    }

    pub fn weight(&self, layer: usize) -> Tensor {
        self.layers[layer].0
    }

    pub fn bias(&self, layer: usize) -> Tensor {
        self.layers[layer].1
    }

    /// Reads the accumulated gradients out of `graph`.
    pub fn grads(&self, graph: &Graph) -> NetworkGrads {
        NetworkGrads {
            layers: self.layers.iter().map(|&(w, b)| (graph.grad(w).clone(), graph.grad(b).column(0).to_owned())).collect(),
        }
    }
}
