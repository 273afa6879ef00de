//! Episodic meta-learning: prototypical loss, first-order MAML inner
//! adaptation and outer update, and meta-testing on novel classes.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, EncoderVars, ParamSet};
use crate::error::{Error, Result};
use crate::graph::{propagation_matrix, sample_episode, ClassSplit, Episode, Graph, LabeledPool};
use crate::pretrain::ViewBatch;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Which encoder tensors the inner loop adapts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptScope {
    #[default]
    Full,
    /// Only the FC output layer.
    Output,
}

impl AdaptScope {
    fn includes(self, tensor_index: usize) -> bool {
        match self {
            AdaptScope::Full => true,
            AdaptScope::Output => tensor_index >= 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner (per-task) gradient step.
    pub inner_lr: f64,
    /// Outer (meta) gradient step.
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub tasks_per_batch: usize,
    pub meta_epochs: usize,
    pub steps_per_epoch: usize,
    pub first_order: bool,
    pub adapt_scope: AdaptScope,
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    pub test_episodes: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.01,
            outer_lr: 0.001,
            inner_steps: 5,
            tasks_per_batch: 4,
            meta_epochs: 10,
            steps_per_epoch: 10,
            first_order: true,
            adapt_scope: AdaptScope::Full,
            n_way: 2,
            k_shot: 3,
            query_per_class: 10,
            test_episodes: 100,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.inner_lr.is_finite() && self.inner_lr > 0.0) {
            return bad(format!("inner_lr must be positive, got {}", self.inner_lr));
        }
        if !(self.outer_lr.is_finite() && self.outer_lr > 0.0) {
            return bad(format!("outer_lr must be positive, got {}", self.outer_lr));
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1".into());
        }
        if !self.first_order {
            return bad("only first-order meta-gradients are supported".into());
        }
        if self.n_way < 2 || self.k_shot == 0 || self.query_per_class == 0 {
            return bad(format!(
                "episodes need n_way >= 2, k_shot >= 1, query_per_class >= 1 (got {}, {}, {})",
                self.n_way, self.k_shot, self.query_per_class
            ));
        }
        Ok(())
    }
}

/// Labeled instances available for episodes: the nodes of one graph, or a
/// set of graphs.
#[derive(Clone, Debug)]
pub struct TaskData {
    instances: Instances,
    labels: Vec<usize>,
}

#[derive(Clone, Debug)]
enum Instances {
    Nodes { adj: Tensor, features: Tensor },
    Graphs(Vec<Graph>),
}

impl TaskData {
    /// Node classification on `g`, which must carry node labels.
    pub fn nodes(g: &Graph) -> Result<Self> {
        let labels = g
            .node_labels()
            .ok_or_else(|| Error::Integrity("node task needs node labels".into()))?
            .to_vec();
        Ok(Self {
            instances: Instances::Nodes {
                adj: propagation_matrix(g),
                features: g.features().clone(),
            },
            labels,
        })
    }

    /// Graph classification over `graphs`, each carrying a graph label.
    pub fn graphs(graphs: &[Graph]) -> Result<Self> {
        let labels = graphs
            .iter()
            .enumerate()
            .map(|(i, g)| {
                g.graph_label()
                    .ok_or_else(|| Error::Integrity(format!("graph {i} has no label")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            instances: Instances::Graphs(graphs.iter().map(Graph::without_labels).collect()),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, instance: usize) -> usize {
        self.labels[instance]
    }

    pub fn feature_dim(&self) -> usize {
        match &self.instances {
            Instances::Nodes { features, .. } => features.cols(),
            Instances::Graphs(gs) => gs.first().map_or(0, Graph::feature_dim),
        }
    }

    /// Instances whose class is in `classes`.
    pub fn pool(&self, classes: &BTreeSet<usize>) -> LabeledPool {
        LabeledPool::from_pairs(
            self.labels
                .iter()
                .enumerate()
                .filter(|(_, c)| classes.contains(c))
                .map(|(i, &c)| (i, c)),
        )
    }

    fn batch(&self, instances: &[usize]) -> Result<ViewBatch> {
        if let Some(&bad) = instances.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Integrity(format!(
                "instance {bad} out of range ({} instances)",
                self.len()
            )));
        }
        match &self.instances {
            Instances::Nodes { adj, features } => Ok(ViewBatch::from_parts(
                adj.clone(),
                features.clone(),
                instances.to_vec(),
            )),
            Instances::Graphs(gs) => {
                ViewBatch::pooled(&instances.iter().map(|&i| &gs[i]).collect::<Vec<_>>())
            }
        }
    }
}

/// Class centroids of support embeddings, one row per local class.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    centroids: Tensor,
}

impl Prototypes {
    pub fn from_support(embeddings: &Tensor, labels: &[usize], n_way: usize) -> Result<Self> {
        let avg = averaging_matrix(labels, n_way)?;
        if embeddings.rows() != labels.len() {
            return Err(Error::dim(
                "prototypes",
                format!(
                    "{} embeddings for {} labels",
                    embeddings.rows(),
                    labels.len()
                ),
            ));
        }
        Ok(Self {
            centroids: avg.matmul(embeddings)?,
        })
    }

    pub fn centroids(&self) -> &Tensor {
        &self.centroids
    }

    pub fn n_way(&self) -> usize {
        self.centroids.rows()
    }

    /// Index of the nearest centroid (squared Euclidean) for each row.
    pub fn classify(&self, queries: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let q = tape.constant(queries.clone());
        let c = tape.constant(self.centroids.clone());
        let d = tape.pairwise_sq_dist(q, c)?;
        let neg = tape.scale(d, -1.0)?;
        Ok(argmax_rows(tape.value(neg)))
    }
}

/// `n_way x n` matrix whose row `c` averages the rows labeled `c`.
fn averaging_matrix(labels: &[usize], n_way: usize) -> Result<Tensor> {
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        if l >= n_way {
            return Err(Error::Contract(format!(
                "local label {l} outside 0..{n_way}"
            )));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::degenerate(
            "prototypes",
            format!("class {c} has no support examples"),
        ));
    }
    let mut m = Tensor::zeros(n_way, labels.len());
    for (j, &l) in labels.iter().enumerate() {
        m.set(l, j, 1.0 / counts[l] as f64);
    }
    Ok(m)
}

/// Recorded prototypes: the class means of `support` rows.
pub fn prototypes_var(
    tape: &mut Tape,
    support: Var,
    labels: &[usize],
    n_way: usize,
) -> Result<Var> {
    let avg = averaging_matrix(labels, n_way)?;
    let avg = tape.constant(avg);
    tape.matmul(avg, support)
}

/// First index of each row's maximum.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mean cross-entropy of queries against negative squared distances to the
/// prototypes, and the fraction classified correctly.
pub fn proto_loss(
    tape: &mut Tape,
    queries: Var,
    labels: &[usize],
    protos: Var,
) -> Result<(Var, f64)> {
    if tape.value(queries).rows() != labels.len() {
        return Err(Error::dim(
            "proto_loss",
            format!(
                "{} queries for {} labels",
                tape.value(queries).rows(),
                labels.len()
            ),
        ));
    }
    let d = tape.pairwise_sq_dist(queries, protos)?;
    let logits = tape.scale(d, -1.0)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let predicted = argmax_rows(tape.value(logits));
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok((loss, correct as f64 / labels.len() as f64))
}

/// An episode's instances embedded together; support rows come first.
struct EpisodeBatch {
    batch: ViewBatch,
    n_way: usize,
    support_labels: Vec<usize>,
    query_labels: Vec<usize>,
}

impl EpisodeBatch {
    fn new(task: &TaskData, episode: &Episode) -> Result<Self> {
        if episode.support.is_empty() {
            return Err(Error::Sampling("episode has an empty support set".into()));
        }
        Ok(Self {
            batch: task.batch(&episode.all_instances())?,
            n_way: episode.n_way,
            support_labels: episode.support_labels(),
            query_labels: episode.query_labels(),
        })
    }

    fn n_support(&self) -> usize {
        self.support_labels.len()
    }

    /// Prototypes from `proto_rows`, loss over `query_rows` (batch row indices).
    fn loss(
        &self,
        tape: &mut Tape,
        enc: &EncoderVars,
        proto_rows: &[usize],
        query_rows: &[usize],
    ) -> Result<(Var, f64)> {
        let label_of = |r: usize| {
            if r < self.n_support() {
                self.support_labels[r]
            } else {
                self.query_labels[r - self.n_support()]
            }
        };
        let emb = self.batch.embed(tape, enc)?;
        let s = tape.gather_rows(emb, proto_rows)?;
        let proto_labels: Vec<usize> = proto_rows.iter().map(|&r| label_of(r)).collect();
        let protos = prototypes_var(tape, s, &proto_labels, self.n_way)?;
        let q = tape.gather_rows(emb, query_rows)?;
        let q_labels: Vec<usize> = query_rows.iter().map(|&r| label_of(r)).collect();
        proto_loss(tape, q, &q_labels, protos)
    }

    /// Support-only loss: each class's first `ceil(k/2)` examples form the
    /// prototype and the rest are classified. A class with one example acts
    /// as both prototype and query.
    fn inner_split(&self) -> (Vec<usize>, Vec<usize>) {
        let mut protos = Vec::new();
        let mut queries = Vec::new();
        for c in 0..self.n_way {
            let members: Vec<usize> = (0..self.n_support())
                .filter(|&r| self.support_labels[r] == c)
                .collect();
            if members.len() < 2 {
                protos.extend(&members);
                queries.extend(&members);
            } else {
                let half = members.len().div_ceil(2);
                protos.extend(&members[..half]);
                queries.extend(&members[half..]);
            }
        }
        (protos, queries)
    }

    fn support_loss(&self, tape: &mut Tape, enc: &EncoderVars) -> Result<(Var, f64)> {
        let (p, q) = self.inner_split();
        self.loss(tape, enc, &p, &q)
    }

    fn query_loss(&self, tape: &mut Tape, enc: &EncoderVars) -> Result<(Var, f64)> {
        let n = self.n_support();
        let support: Vec<usize> = (0..n).collect();
        let query: Vec<usize> = (n..n + self.query_labels.len()).collect();
        self.loss(tape, enc, &support, &query)
    }
}

/// Loss value, accuracy and parameter gradients of one evaluation.
fn evaluate(
    params: &EncoderParams,
    f: impl FnOnce(&mut Tape, &EncoderVars) -> Result<(Var, f64)>,
    want_grads: bool,
) -> Result<(f64, f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape, want_grads);
    let (loss, acc) = f(&mut tape, &vars)?;
    let value = tape.value(loss).item();
    let mut grads = Vec::new();
    if want_grads {
        tape.backward(loss)?;
        for (v, t) in vars.vars().into_iter().zip(params.tensors()) {
            grads.push(
                tape.take_grad(v)
                    .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())),
            );
        }
    }
    Ok((value, acc, grads))
}

fn adapt_batch(
    params: &EncoderParams,
    eb: &EpisodeBatch,
    cfg: &MetaConfig,
) -> Result<EncoderParams> {
    if !(cfg.inner_lr.is_finite() && cfg.inner_lr >= 0.0) {
        return Err(Error::Config(format!(
            "inner_lr must be non-negative, got {}",
            cfg.inner_lr
        )));
    }
    let mut adapted = params.clone();
    for _ in 0..cfg.inner_steps {
        let (_, _, grads) = evaluate(&adapted, |t, v| eb.support_loss(t, v), true)?;
        for (i, (p, g)) in adapted.tensors_mut().into_iter().zip(&grads).enumerate() {
            if cfg.adapt_scope.includes(i) {
                p.axpy(-cfg.inner_lr, g);
            }
        }
    }
    Ok(adapted)
}

/// `inner_steps` plain gradient-descent steps of size `inner_lr` on the
/// support-only prototypical loss. `params` is not modified.
pub fn inner_adapt(
    params: &EncoderParams,
    task: &TaskData,
    episode: &Episode,
    cfg: &MetaConfig,
) -> Result<EncoderParams> {
    let eb = EpisodeBatch::new(task, episode)?;
    adapt_batch(params, &eb, cfg)
}

/// Support-only inner loss under `params`.
pub fn support_loss(params: &EncoderParams, task: &TaskData, episode: &Episode) -> Result<f64> {
    let eb = EpisodeBatch::new(task, episode)?;
    Ok(evaluate(params, |t, v| eb.support_loss(t, v), false)?.0)
}

/// Query loss and accuracy with prototypes from the full support set.
pub fn query_loss(
    params: &EncoderParams,
    task: &TaskData,
    episode: &Episode,
) -> Result<(f64, f64)> {
    let eb = EpisodeBatch::new(task, episode)?;
    let (l, a, _) = evaluate(params, |t, v| eb.query_loss(t, v), false)?;
    Ok((l, a))
}

/// Query loss before and after inner adaptation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptationEffect {
    pub loss_before: f64,
    pub loss_after: f64,
    pub acc_before: f64,
    pub acc_after: f64,
}

pub fn adaptation_effect(
    params: &EncoderParams,
    task: &TaskData,
    episode: &Episode,
    cfg: &MetaConfig,
) -> Result<AdaptationEffect> {
    let eb = EpisodeBatch::new(task, episode)?;
    let (loss_before, acc_before, _) = evaluate(params, |t, v| eb.query_loss(t, v), false)?;
    let adapted = adapt_batch(params, &eb, cfg)?;
    let (loss_after, acc_after, _) = evaluate(&adapted, |t, v| eb.query_loss(t, v), false)?;
    Ok(AdaptationEffect {
        loss_before,
        loss_after,
        acc_before,
        acc_after,
    })
}

/// Fails if any instance of `episode` belongs to a class outside `allowed`.
pub fn check_no_leak(task: &TaskData, episode: &Episode, allowed: &BTreeSet<usize>) -> Result<()> {
    for i in episode.all_instances() {
        let c = task.label(i);
        if !allowed.contains(&c) {
            return Err(Error::Integrity(format!(
                "instance {i} of class {c} leaked into a meta-training episode"
            )));
        }
    }
    Ok(())
}

/// Shot and query sizes that fit the smallest class of `pool`: keeps at
/// least one query per class and shrinks the shot if it must.
pub fn fitted_shots(
    pool: &LabeledPool,
    classes: &BTreeSet<usize>,
    k_shot: usize,
    query_per_class: usize,
) -> Result<(usize, usize)> {
    let m = pool.min_count(classes);
    if m < 2 {
        return Err(Error::Sampling(format!(
            "smallest class has {m} labeled instances, episodes need at least 2"
        )));
    }
    let k = k_shot.min(m - 1);
    Ok((k, query_per_class.min(m - k)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_query_acc: f64,
    pub mean_query_loss: f64,
}

#[derive(Clone, Debug)]
pub struct MetaTrainOutcome {
    pub params: EncoderParams,
    pub epochs: Vec<EpochRow>,
    /// Per encoder tensor: received a nonzero meta-gradient at least once.
    pub touched: Vec<bool>,
    /// Shot and query sizes used for training episodes.
    pub shots: (usize, usize),
}

/// `epoch,mean_query_acc,mean_query_loss` lines with a header.
pub fn epochs_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,mean_query_acc,mean_query_loss\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{}",
            r.epoch, r.mean_query_acc, r.mean_query_loss
        );
    }
    out
}

/// One outer update over `tasks_per_batch` base-class episodes. Returns the
/// mean query loss and accuracy under the adapted parameters.
#[allow(clippy::too_many_arguments)]
pub fn meta_step(
    params: &mut EncoderParams,
    task: &TaskData,
    pool: &LabeledPool,
    base: &BTreeSet<usize>,
    cfg: &MetaConfig,
    shots: (usize, usize),
    touched: &mut [bool],
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let mut total: Vec<Tensor> = params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.rows(), t.cols()))
        .collect();
    let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
    for _ in 0..cfg.tasks_per_batch {
        let episode = sample_episode(pool, base, cfg.n_way, shots.0, shots.1, rng)?;
        check_no_leak(task, &episode, base)?;
        let eb = EpisodeBatch::new(task, &episode)?;
        let adapted = adapt_batch(params, &eb, cfg)?;
        let (loss, acc, grads) = evaluate(&adapted, |t, v| eb.query_loss(t, v), true)?;
        loss_sum += loss;
        acc_sum += acc;
        for (acc_g, g) in total.iter_mut().zip(&grads) {
            acc_g.axpy(1.0, g);
        }
    }
    for (i, (p, g)) in params.tensors_mut().into_iter().zip(&total).enumerate() {
        if cfg.adapt_scope.includes(i) {
            p.axpy(-cfg.outer_lr, g);
            if g.data().iter().any(|&v| v != 0.0) {
                touched[i] = true;
            }
        }
    }
    let n = cfg.tasks_per_batch.max(1) as f64;
    Ok((loss_sum / n, acc_sum / n))
}

/// Meta-trains from `init` on base-class episodes drawn from `pool`.
pub fn meta_train(
    init: &EncoderParams,
    task: &TaskData,
    split: &ClassSplit,
    pool: &LabeledPool,
    cfg: &MetaConfig,
    rng: &mut Rng,
) -> Result<MetaTrainOutcome> {
    cfg.validate()?;
    if task.feature_dim() != init.dims().d_in {
        return Err(Error::Integrity(format!(
            "encoder expects {} features, task has {}",
            init.dims().d_in,
            task.feature_dim()
        )));
    }
    let base = split.base();
    let mut params = init.clone();
    let mut touched = vec![false; params.tensors().len()];
    if cfg.tasks_per_batch == 0 || cfg.meta_epochs == 0 || cfg.steps_per_epoch == 0 {
        return Ok(MetaTrainOutcome {
            params,
            epochs: Vec::new(),
            touched,
            shots: (cfg.k_shot, cfg.query_per_class),
        });
    }
    let shots = fitted_shots(pool, base, cfg.k_shot, cfg.query_per_class)?;
    if shots.0 < cfg.k_shot {
        log::warn!(
            "meta-training with {}-shot episodes: base classes are too small for {}",
            shots.0,
            cfg.k_shot
        );
    }
    let mut epochs = Vec::with_capacity(cfg.meta_epochs);
    for epoch in 1..=cfg.meta_epochs {
        let (mut loss, mut acc) = (0.0, 0.0);
        for _ in 0..cfg.steps_per_epoch {
            let (l, a) = meta_step(&mut params, task, pool, base, cfg, shots, &mut touched, rng)?;
            loss += l;
            acc += a;
        }
        let n = cfg.steps_per_epoch as f64;
        let row = EpochRow {
            epoch,
            mean_query_acc: acc / n,
            mean_query_loss: loss / n,
        };
        log::info!(
            "meta epoch {epoch}: acc {:.4} loss {:.4}",
            row.mean_query_acc,
            row.mean_query_loss
        );
        epochs.push(row);
    }
    Ok(MetaTrainOutcome {
        params,
        epochs,
        touched,
        shots,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaTestSummary {
    pub mean: f64,
    /// Population standard deviation over episodes.
    pub std: f64,
    pub episodes: usize,
}

impl MetaTestSummary {
    pub fn from_accuracies(accs: &[f64]) -> Self {
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            episodes: accs.len(),
        }
    }

    /// `mean,std,n_episodes` with a header.
    pub fn to_csv(&self) -> String {
        format!(
            "mean,std,n_episodes\n{},{},{}\n",
            self.mean, self.std, self.episodes
        )
    }
}

/// Adapts on the support set of `cfg.test_episodes` novel-class episodes
/// and scores each query set. The query size is capped by the smallest
/// novel class.
pub fn meta_test(
    params: &EncoderParams,
    task: &TaskData,
    split: &ClassSplit,
    cfg: &MetaConfig,
    rng: &mut Rng,
) -> Result<MetaTestSummary> {
    cfg.validate()?;
    if cfg.test_episodes == 0 {
        return Err(Error::Config("test_episodes must be positive".into()));
    }
    let novel = split.novel();
    let pool = task.pool(novel);
    let m = pool.min_count(novel);
    if m < cfg.k_shot + 1 {
        return Err(Error::Sampling(format!(
            "smallest novel class has {m} instances, {}-shot testing needs {}",
            cfg.k_shot,
            cfg.k_shot + 1
        )));
    }
    let q = cfg.query_per_class.min(m - cfg.k_shot);
    let mut accs = Vec::with_capacity(cfg.test_episodes);
    for _ in 0..cfg.test_episodes {
        let episode = sample_episode(&pool, novel, cfg.n_way, cfg.k_shot, q, rng)?;
        let eb = EpisodeBatch::new(task, &episode)?;
        let adapted = adapt_batch(params, &eb, cfg)?;
        accs.push(evaluate(&adapted, |t, v| eb.query_loss(t, v), false)?.1);
    }
    Ok(MetaTestSummary::from_accuracies(&accs))
}
