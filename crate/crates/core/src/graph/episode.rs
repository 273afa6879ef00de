use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};

use super::Graph;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Labeled instances (node or graph indices) grouped by class.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabeledPool {
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl LabeledPool {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (instance, class) in pairs {
            by_class.entry(class).or_default().push(instance);
        }
        for v in by_class.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        Self { by_class }
    }

    /// Nodes of `g` whose label is in `classes`.
    pub fn from_node_labels(g: &Graph, classes: &BTreeSet<usize>) -> Result<Self> {
        let labels = g
            .node_labels()
            .ok_or_else(|| Error::Integrity("graph has no node labels".into()))?;
        Ok(Self::from_pairs(
            labels
                .iter()
                .enumerate()
                .filter(|(_, c)| classes.contains(c))
                .map(|(i, &c)| (i, c)),
        ))
    }

    /// Graph indices whose graph label is in `classes`.
    pub fn from_graph_labels(graphs: &[Graph], classes: &BTreeSet<usize>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, g) in graphs.iter().enumerate() {
            let c = g
                .graph_label()
                .ok_or_else(|| Error::Integrity(format!("graph {i} has no label")))?;
            if classes.contains(&c) {
                pairs.push((i, c));
            }
        }
        Ok(Self::from_pairs(pairs))
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_class.keys().copied()
    }

    pub fn instances(&self, class: usize) -> &[usize] {
        self.by_class.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn count(&self, class: usize) -> usize {
        self.instances(class).len()
    }

    pub fn total(&self) -> usize {
        self.by_class.values().map(Vec::len).sum()
    }

    /// Smallest class size among `classes`.
    pub fn min_count(&self, classes: &BTreeSet<usize>) -> usize {
        classes.iter().map(|&c| self.count(c)).min().unwrap_or(0)
    }

    pub fn contains_instance(&self, instance: usize) -> bool {
        self.by_class
            .values()
            .any(|v| v.binary_search(&instance).is_ok())
    }
}

/// One N-way K-shot task with classes remapped to local ids `0..n_way`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    /// Global class id of each local class.
    pub classes: Vec<usize>,
    /// `(instance, local class)` pairs, `k_shot` per class.
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

impl Episode {
    pub fn support_instances(&self) -> Vec<usize> {
        self.support.iter().map(|p| p.0).collect()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|p| p.1).collect()
    }

    pub fn query_instances(&self) -> Vec<usize> {
        self.query.iter().map(|p| p.0).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|p| p.1).collect()
    }

    /// Every instance referenced by the episode, support first.
    pub fn all_instances(&self) -> Vec<usize> {
        self.support
            .iter()
            .chain(&self.query)
            .map(|p| p.0)
            .collect()
    }
}

/// Draws `n_way` classes without replacement, then `k_shot` support and
/// `query_per_class` query instances per class, disjoint.
pub fn sample_episode(
    pool: &LabeledPool,
    classes: &BTreeSet<usize>,
    n_way: usize,
    k_shot: usize,
    query_per_class: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || query_per_class == 0 {
        return Err(Error::Sampling(format!(
            "n_way ({n_way}), k_shot ({k_shot}) and query_per_class ({query_per_class}) must be positive"
        )));
    }
    let candidates: Vec<usize> = classes.iter().copied().collect();
    if candidates.len() < n_way {
        return Err(Error::Sampling(format!(
            "{n_way}-way episode needs {n_way} classes, only {} available",
            candidates.len()
        )));
    }
    let chosen: Vec<usize> = candidates.choose_multiple(rng, n_way).copied().collect();
    let need = k_shot + query_per_class;
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * query_per_class);
    for (local, &class) in chosen.iter().enumerate() {
        let available = pool.instances(class);
        if available.len() < need {
            return Err(Error::Sampling(format!(
                "class {class} has {} instances, episode needs {need}",
                available.len()
            )));
        }
        let picked: Vec<usize> = available.choose_multiple(rng, need).copied().collect();
        support.extend(picked[..k_shot].iter().map(|&i| (i, local)));
        query.extend(picked[k_shot..].iter().map(|&i| (i, local)));
    }
    Ok(Episode {
        n_way,
        k_shot,
        classes: chosen,
        support,
        query,
    })
}

/// Keeps `ceil(rate * count)` uniformly chosen instances of every class.
pub fn apply_label_rate(pool: &LabeledPool, rate: f64, rng: &mut Rng) -> Result<LabeledPool> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Contract(format!("label rate {rate} outside (0, 1]")));
    }
    let mut pairs = Vec::new();
    for (&class, instances) in &pool.by_class {
        // The epsilon keeps e.g. 0.3 * 10 from rounding up to 4.
        let keep = ((rate * instances.len() as f64) - 1e-9).ceil().max(0.0) as usize;
        if keep == 0 {
            return Err(Error::Sampling(format!(
                "class {class} is empty after label-rate subsampling"
            )));
        }
        let mut chosen: Vec<usize> = instances.clone();
        chosen.shuffle(rng);
        chosen.truncate(keep);
        pairs.extend(chosen.into_iter().map(|i| (i, class)));
    }
    Ok(LabeledPool::from_pairs(pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn pool(classes: usize, per_class: usize) -> LabeledPool {
        LabeledPool::from_pairs((0..classes * per_class).map(|i| (i, i / per_class)))
    }

    fn set(ids: &[usize]) -> BTreeSet<usize> {
        ids.iter().copied().collect()
    }

    #[test]
    fn counts() {
        let p = pool(4, 10);
        let e = sample_episode(&p, &set(&[0, 1, 2, 3]), 2, 3, 5, &mut seeded(1, 0)).unwrap();
        assert_eq!(e.support.len(), 6);
        assert_eq!(e.query.len(), 10);
        let mut local = e.support_labels();
        local.sort();
        assert_eq!(local, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn exact_partition() {
        let p = pool(3, 7);
        let e = sample_episode(&p, &set(&[0, 1, 2]), 3, 5, 2, &mut seeded(2, 0)).unwrap();
        let mut all = e.all_instances();
        all.sort();
        assert_eq!(all, (0..21).collect::<Vec<_>>());
    }

    #[test]
    fn insufficient_class_is_named() {
        let p = LabeledPool::from_pairs([(0, 0), (1, 0), (2, 0), (3, 7)]);
        let err = sample_episode(&p, &set(&[0, 7]), 2, 1, 1, &mut seeded(0, 0)).unwrap_err();
        assert!(err.to_string().contains("class 7"), "{err}");
    }

    #[test]
    fn label_rate_counts() {
        let p = pool(3, 10);
        let mut rng = seeded(5, 0);
        assert_eq!(apply_label_rate(&p, 1.0, &mut rng).unwrap(), p);
        let half = apply_label_rate(&p, 0.5, &mut rng).unwrap();
        assert!(half.classes().all(|c| half.count(c) == 5));
        let tenth = apply_label_rate(&pool(2, 25), 0.1, &mut rng).unwrap();
        assert!(tenth.classes().all(|c| tenth.count(c) == 3));
        let third = apply_label_rate(&pool(2, 10), 0.3, &mut rng).unwrap();
        assert!(third.classes().all(|c| third.count(c) == 3));
    }

    #[test]
    fn label_rate_bounds() {
        let p = pool(1, 4);
        let mut rng = seeded(0, 0);
        assert!(apply_label_rate(&p, 0.0, &mut rng).is_err());
        assert!(apply_label_rate(&p, 1.5, &mut rng).is_err());
    }
}
