//! Stochastic graph views: node dropping, edge removing and feature masking.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which augmentation kinds are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AugSet {
    pub node_drop: bool,
    pub edge_remove: bool,
    pub feature_mask: bool,
}

impl AugSet {
    pub const ALL: AugSet = AugSet {
        node_drop: true,
        edge_remove: true,
        feature_mask: true,
    };
    pub const NONE: AugSet = AugSet {
        node_drop: false,
        edge_remove: false,
        feature_mask: false,
    };
}

impl Default for AugSet {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for AugSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [
            (self.node_drop, "ND"),
            (self.edge_remove, "ER"),
            (self.feature_mask, "FM"),
        ]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
        .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl FromStr for AugSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = AugSet::NONE;
        if s.trim().eq_ignore_ascii_case("none") {
            return Ok(set);
        }
        for part in s.split('+') {
            match part.trim().to_ascii_uppercase().as_str() {
                "ND" => set.node_drop = true,
                "ER" => set.edge_remove = true,
                "FM" => set.feature_mask = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown augmentation {other:?} in {s:?}"
                    )))
                }
            }
        }
        Ok(set)
    }
}

impl Serialize for AugSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AugSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Zero whole feature dimensions for every node of the view.
    #[default]
    Column,
    /// Zero individual (node, feature) entries.
    Entry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub node_drop_rate: f64,
    pub edge_remove_rate: f64,
    pub feature_mask_rate: f64,
    pub enabled: AugSet,
    pub mask_mode: MaskMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            node_drop_rate: 0.15,
            edge_remove_rate: 0.15,
            feature_mask_rate: 0.20,
            enabled: AugSet::ALL,
            mask_mode: MaskMode::Column,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            node_drop_rate: 0.0,
            edge_remove_rate: 0.0,
            feature_mask_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.node_drop_rate) {
            return Err(Error::Config(format!(
                "node_drop_rate {} outside [0, 1)",
                self.node_drop_rate
            )));
        }
        for (name, r) in [
            ("edge_remove_rate", self.edge_remove_rate),
            ("feature_mask_rate", self.feature_mask_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} {r} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Rates after applying the `enabled` set.
    fn effective(&self) -> (f64, f64, f64) {
        let pick = |on: bool, r: f64| if on { r } else { 0.0 };
        (
            pick(self.enabled.node_drop, self.node_drop_rate),
            pick(self.enabled.edge_remove, self.edge_remove_rate),
            pick(self.enabled.feature_mask, self.feature_mask_rate),
        )
    }
}

/// An augmented copy of a graph together with its node correspondence.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView {
    pub graph: Graph,
    /// `kept_nodes[orig]` is the view index of original node `orig`, if it survived.
    pub kept_nodes: Vec<Option<usize>>,
    /// Original index of every view node, ascending.
    pub view_nodes: Vec<usize>,
}

impl AugmentedView {
    /// The unaugmented graph as a view.
    pub fn identity(g: &Graph) -> Self {
        let n = g.num_nodes();
        Self {
            graph: g.clone(),
            kept_nodes: (0..n).map(Some).collect(),
            view_nodes: (0..n).collect(),
        }
    }

    pub fn view_index(&self, orig: usize) -> Option<usize> {
        self.kept_nodes.get(orig).copied().flatten()
    }
}

pub fn augment(g: &Graph, cfg: &AugmentConfig, rng: &mut Rng) -> Result<AugmentedView> {
    augment_keeping(g, cfg, rng, None)
}

fn augment_keeping(
    g: &Graph,
    cfg: &AugmentConfig,
    rng: &mut Rng,
    force: Option<usize>,
) -> Result<AugmentedView> {
    cfg.validate()?;
    let n = g.num_nodes();
    if n == 0 {
        return Err(Error::degenerate("augment", "graph has no nodes"));
    }
    let (drop_rate, remove_rate, mask_rate) = cfg.effective();

    let mut keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= drop_rate).collect();
    if let Some(f) = force {
        keep[f] = true;
    }
    if !keep.iter().any(|&k| k) {
        keep[rng.random_range(0..n)] = true;
    }
    let view_nodes: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    let mut kept_nodes = vec![None; n];
    for (v, &o) in view_nodes.iter().enumerate() {
        kept_nodes[o] = Some(v);
    }

    let edges: Vec<(usize, usize)> = g
        .edges()
        .iter()
        .filter_map(|&(u, v)| Some((kept_nodes[u]?, kept_nodes[v]?)))
        .filter(|_| rng.random::<f64>() >= remove_rate)
        .collect();

    let mut features = g.features().select_rows(&view_nodes);
    mask_features(&mut features, mask_rate, cfg.mask_mode, rng);

    let mut graph = Graph::new(view_nodes.len(), edges, features)?;
    if let Some(labels) = g.node_labels() {
        graph = graph.with_node_labels(view_nodes.iter().map(|&i| labels[i]).collect())?;
    }
    if let Some(label) = g.graph_label() {
        graph = graph.with_graph_label(label);
    }
    Ok(AugmentedView {
        graph,
        kept_nodes,
        view_nodes,
    })
}

fn mask_features(x: &mut Tensor, rate: f64, mode: MaskMode, rng: &mut Rng) {
    if rate == 0.0 {
        return;
    }
    match mode {
        MaskMode::Column => {
            let d = x.cols();
            let count = (rate * d as f64).floor() as usize;
            let all: Vec<usize> = (0..d).collect();
            let cols: Vec<usize> = all.choose_multiple(rng, count).copied().collect();
            for r in 0..x.rows() {
                let row = x.row_mut(r);
                for &c in &cols {
                    row[c] = 0.0;
                }
            }
        }
        MaskMode::Entry => {
            for v in x.data_mut() {
                if rng.random::<f64>() < rate {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Two independent views that share at least one original node.
pub fn make_view_pair(
    g: &Graph,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(AugmentedView, AugmentedView)> {
    const RESAMPLES: usize = 10;
    for _ in 0..RESAMPLES {
        let a = augment(g, cfg, rng)?;
        let b = augment(g, cfg, rng)?;
        if a.view_nodes.iter().any(|&o| b.kept_nodes[o].is_some()) {
            return Ok((a, b));
        }
    }
    let anchor = rng.random_range(0..g.num_nodes());
    let a = augment_keeping(g, cfg, rng, Some(anchor))?;
    let b = augment_keeping(g, cfg, rng, Some(anchor))?;
    Ok((a, b))
}

/// Original nodes present in both views, as `(original, index in a, index in b)`.
pub fn shared_nodes(a: &AugmentedView, b: &AugmentedView) -> Vec<(usize, usize, usize)> {
    a.view_nodes
        .iter()
        .enumerate()
        .filter_map(|(ia, &o)| Some((o, ia, b.view_index(o)?)))
        .collect()
}
