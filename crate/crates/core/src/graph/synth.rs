//! Seeded synthetic fixtures: a stochastic block model for node tasks and a
//! labeled graph collection for graph tasks.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SbmConfig {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Standard deviation of the Gaussian noise added to each feature.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            nodes_per_block: 25,
            p_in: 0.9,
            p_out: 0.05,
            feature_dim: 16,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

/// Stochastic block model; node `i` belongs to block `i / nodes_per_block`.
///
/// Features are the one-hot block indicator plus `N(0, noise_std^2)` noise.
pub fn synth_sbm(cfg: &SbmConfig) -> Result<Graph> {
    let &SbmConfig {
        blocks,
        nodes_per_block,
        p_in,
        p_out,
        feature_dim,
        noise_std,
        seed,
    } = cfg;
    if !(0.0 <= p_out && p_out <= p_in && p_in <= 1.0) {
        return Err(Error::Contract(format!(
            "sbm needs 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}"
        )));
    }
    if feature_dim < blocks {
        return Err(Error::Contract(format!(
            "feature_dim {feature_dim} cannot hold {blocks} one-hot blocks"
        )));
    }
    if noise_std < 0.0 || !noise_std.is_finite() {
        return Err(Error::Contract(format!(
            "noise_std {noise_std} must be >= 0"
        )));
    }
    let mut rng = seeded(seed, 0);
    let n = blocks * nodes_per_block;
    let block = |i: usize| i / nodes_per_block.max(1);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if block(i) == block(j) { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let features = Tensor::from_fn(n, feature_dim, |i, c| {
        let centroid = if c == block(i) { 1.0 } else { 0.0 };
        let z: f64 = StandardNormal.sample(&mut rng);
        centroid + noise_std * z
    });
    Graph::new(n, edges, features)?.with_node_labels((0..n).map(block).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSetConfig {
    pub classes: usize,
    pub graphs_per_class: usize,
    pub nodes_per_graph: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GraphSetConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            graphs_per_class: 20,
            nodes_per_graph: 12,
            feature_dim: 8,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

/// A labeled collection of small graphs.
///
/// Class `c` graphs have edge density `0.1 + 0.6 c / (classes - 1)` and node
/// features centred on the one-hot indicator of `c mod feature_dim`.
pub fn synth_graph_classes(cfg: &GraphSetConfig) -> Result<Vec<Graph>> {
    if cfg.classes < 2 || cfg.feature_dim == 0 || cfg.nodes_per_graph == 0 {
        return Err(Error::Contract(
            "graph set needs >= 2 classes, feature_dim > 0 and nodes_per_graph > 0".into(),
        ));
    }
    let mut rng = seeded(cfg.seed, 0);
    let mut out = Vec::with_capacity(cfg.classes * cfg.graphs_per_class);
    for c in 0..cfg.classes {
        let density = 0.1 + 0.6 * c as f64 / (cfg.classes - 1) as f64;
        for _ in 0..cfg.graphs_per_class {
            let n = cfg.nodes_per_graph;
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random::<f64>() < density {
                        edges.push((i, j));
                    }
                }
            }
            let hot = c % cfg.feature_dim;
            let features = Tensor::from_fn(n, cfg.feature_dim, |_, k| {
                let z: f64 = StandardNormal.sample(&mut rng);
                f64::from(u8::from(k == hot)) + cfg.noise_std * z
            });
            out.push(Graph::new(n, edges, features)?.with_graph_label(c));
        }
    }
    Ok(out)
}
