//! Bootstrapped contrastive pre-training: an online encoder with a two-layer
//! head regresses the normalized output of an EMA target encoder with a
//! one-layer head, across two augmented views of the same data.

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{make_view_pair, shared_nodes, AugmentConfig};
use crate::encoder::{
    pooling_matrix, project, EncoderDims, EncoderParams, EncoderVars, HeadVars, OnlineHead,
    ParamSet, TargetHead,
};
use crate::error::{Error, Result};
use crate::graph::{propagation_matrix, Graph};
use crate::rng::Rng;
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, Var};

/// Which unlabeled data pre-training may see.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    /// Training split only.
    #[default]
    Inductive,
    /// Training and test splits.
    Transductive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub tau: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Cap on paired nodes per step (node tasks).
    pub batch_nodes: usize,
    /// Cap on paired graphs per step (graph tasks).
    pub batch_graphs: usize,
    /// Average the loss over both view orderings.
    pub symmetric_loss: bool,
    /// ReLU between the two layers of the online head.
    pub head_nonlinearity: bool,
    /// Log the embedding spread every this many steps (0 disables).
    pub embed_std_every: usize,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            lr_decay: 0.9,
            tau: 0.999,
            epochs: 10,
            steps_per_epoch: 20,
            batch_nodes: 2048,
            batch_graphs: 64,
            symmetric_loss: true,
            head_nonlinearity: true,
            embed_std_every: 20,
            adam: AdamConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay {} outside (0, 1]",
                self.lr_decay
            )));
        }
        if self.batch_nodes == 0 || self.batch_graphs == 0 {
            return Err(Error::Config("batch caps must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Unlabeled training data: one graph (node task) or a set of graphs (graph task).
#[derive(Clone, Debug, PartialEq)]
pub enum Corpus {
    Nodes(Graph),
    Graphs(Vec<Graph>),
}

impl Corpus {
    /// Drops every label so downstream code cannot read them.
    pub fn unlabeled(self) -> Self {
        match self {
            Corpus::Nodes(g) => Corpus::Nodes(g.without_labels()),
            Corpus::Graphs(gs) => Corpus::Graphs(gs.iter().map(Graph::without_labels).collect()),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Corpus::Nodes(g) => g.feature_dim(),
            Corpus::Graphs(gs) => gs.first().map_or(0, Graph::feature_dim),
        }
    }

    fn has_labels(&self) -> bool {
        match self {
            Corpus::Nodes(g) => g.node_labels().is_some() || g.graph_label().is_some(),
            Corpus::Graphs(gs) => gs
                .iter()
                .any(|g| g.node_labels().is_some() || g.graph_label().is_some()),
        }
    }

    /// Train data alone (inductive) or train and test data together (transductive).
    pub fn select(setting: Setting, train: Corpus, test: Option<Corpus>) -> Result<Corpus> {
        match (setting, test) {
            (Setting::Inductive, _) => Ok(train.unlabeled()),
            (Setting::Transductive, None) => Err(Error::Config(
                "transductive pre-training needs test data".into(),
            )),
            (Setting::Transductive, Some(test)) => {
                let merged = match (train, test) {
                    (Corpus::Nodes(a), Corpus::Nodes(b)) => {
                        Corpus::Nodes(Graph::disjoint_union(&[&a, &b])?.0)
                    }
                    (Corpus::Graphs(mut a), Corpus::Graphs(b)) => {
                        a.extend(b);
                        Corpus::Graphs(a)
                    }
                    _ => {
                        return Err(Error::Config(
                            "train and test data are of different task kinds".into(),
                        ))
                    }
                };
                Ok(merged.unlabeled())
            }
        }
    }
}

/// One side of a contrastive pair, ready to encode.
pub(crate) struct ViewBatch {
    adj: Tensor,
    features: Tensor,
    rows: Rows,
}

enum Rows {
    /// Gather these node rows.
    Select(Vec<usize>),
    /// Mean-pool nodes into graph rows.
    Pool(Tensor),
}

impl ViewBatch {
    /// Node rows `idx` of `graph`.
    pub(crate) fn select(graph: &Graph, idx: Vec<usize>) -> Self {
        Self {
            adj: propagation_matrix(graph),
            features: graph.features().clone(),
            rows: Rows::Select(idx),
        }
    }

    /// Node rows `idx` of a graph given by its propagation matrix and features.
    pub(crate) fn from_parts(adj: Tensor, features: Tensor, idx: Vec<usize>) -> Self {
        Self {
            adj,
            features,
            rows: Rows::Select(idx),
        }
    }

    /// One mean-pooled row per graph.
    pub(crate) fn pooled(graphs: &[&Graph]) -> Result<Self> {
        let (graph, offsets) = Graph::disjoint_union(graphs)?;
        let sizes: Vec<usize> = graphs.iter().map(|g| g.num_nodes()).collect();
        let pool = pooling_matrix(&offsets, &sizes, graph.num_nodes())?;
        Ok(Self {
            adj: propagation_matrix(&graph),
            features: graph.features().clone(),
            rows: Rows::Pool(pool),
        })
    }

    /// Encoder output for the rows of this batch.
    pub(crate) fn embed(&self, tape: &mut Tape, enc: &EncoderVars) -> Result<Var> {
        let adj = tape.constant(self.adj.clone());
        let x = tape.constant(self.features.clone());
        let out = enc.encode(tape, adj, x)?.out;
        match &self.rows {
            Rows::Select(idx) => tape.gather_rows(out, idx),
            Rows::Pool(p) => {
                let p = tape.constant(p.clone());
                tape.matmul(p, out)
            }
        }
    }
}

/// Builds a pair of augmented views whose rows correspond one-to-one.
pub(crate) fn sample_pair(
    corpus: &Corpus,
    aug: &AugmentConfig,
    batch_nodes: usize,
    batch_graphs: usize,
    rng: &mut Rng,
) -> Result<(ViewBatch, ViewBatch)> {
    match corpus {
        Corpus::Nodes(g) => {
            let (a, b) = make_view_pair(g, aug, rng)?;
            let mut shared = shared_nodes(&a, &b);
            if shared.len() > batch_nodes {
                let mut pick: Vec<(usize, usize, usize)> =
                    shared.choose_multiple(rng, batch_nodes).copied().collect();
                pick.sort_unstable();
                shared = pick;
            }
            let ia = shared.iter().map(|s| s.1).collect();
            let ib = shared.iter().map(|s| s.2).collect();
            Ok((
                ViewBatch::select(&a.graph, ia),
                ViewBatch::select(&b.graph, ib),
            ))
        }
        Corpus::Graphs(gs) => {
            if gs.is_empty() {
                return Err(Error::degenerate("pretrain", "no graphs"));
            }
            let batch: Vec<&Graph> = if gs.len() > batch_graphs {
                gs.choose_multiple(rng, batch_graphs).collect()
            } else {
                gs.iter().collect()
            };
            let mut va = Vec::with_capacity(batch.len());
            let mut vb = Vec::with_capacity(batch.len());
            for g in batch {
                let (a, b) = make_view_pair(g, aug, rng)?;
                va.push(a.graph);
                vb.push(b.graph);
            }
            Ok((pooled(&va)?, pooled(&vb)?))
        }
    }
}

fn pooled(graphs: &[Graph]) -> Result<ViewBatch> {
    ViewBatch::pooled(&graphs.iter().collect::<Vec<_>>())
}

/// Mean over rows of `2 - 2 cos(z_i, h_i)`: the squared distance of the
/// row-normalized inputs.
/// Mean over rows of `2 - 2 cos(z_i, h_i)`: the squared distance of the
/// row-normalized inputs. A zero row has no direction and is rejected.
pub fn contrastive_loss(tape: &mut Tape, z: Var, h: Var) -> Result<Var> {
    for v in [z, h] {
        let t = tape.value(v);
        if let Some(r) = (0..t.rows()).find(|&r| t.row(r).iter().all(|&x| x == 0.0)) {
            return Err(Error::degenerate(
                "contrastive_loss",
                format!("row {r} has zero norm"),
            ));
        }
    }
    paired_loss(tape, z, h)
}

/// Training form of [`contrastive_loss`]: zero rows (dead units at
/// initialization) normalize to zero instead of failing the step.
pub(crate) fn paired_loss(tape: &mut Tape, z: Var, h: Var) -> Result<Var> {
    let (zs, hs) = (tape.value(z).shape(), tape.value(h).shape());
    if zs != hs {
        return Err(Error::dim("contrastive_loss", format!("{zs:?} vs {hs:?}")));
    }
    if zs.0 == 0 {
        return Err(Error::degenerate("contrastive_loss", "no paired rows"));
    }
    let zn = tape.l2norm_rows(z)?;
    let hn = tape.l2norm_rows(h)?;
    let diff = tape.sub(zn, hn)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / zs.0 as f64)
}

/// [`contrastive_loss`] on plain values.
pub fn normalized_mse(z: &Tensor, h: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (z, h) = (tape.constant(z.clone()), tape.constant(h.clone()));
    let loss = contrastive_loss(&mut tape, z, h)?;
    Ok(tape.value(loss).item())
}

/// `target <- tau * target + (1 - tau) * online` for encoder and projector.
pub fn ema_update(
    target: &mut EncoderParams,
    target_head: &mut TargetHead,
    online: &EncoderParams,
    online_head: &OnlineHead,
    tau: f64,
) {
    target.ema_from(online, tau);
    target_head.ema_from_online(online_head, tau);
}

/// Online and target networks plus the online optimizer state.
#[derive(Clone, Debug)]
pub struct ContrastiveState {
    pub online: EncoderParams,
    pub online_head: OnlineHead,
    pub target: EncoderParams,
    pub target_head: TargetHead,
    pub adam: AdamState,
    pub epoch: usize,
    pub step: usize,
}

impl ContrastiveState {
    /// Fresh online network; the target starts as a copy of it.
    pub fn new(dims: &EncoderDims, cfg: &PretrainConfig, rng: &mut Rng) -> Self {
        let online = EncoderParams::init(dims, rng);
        let online_head = OnlineHead::init(dims, cfg.head_nonlinearity, rng);
        let adam = AdamState::new(
            online.tensors().into_iter().chain(online_head.tensors()),
            cfg.adam,
        );
        Self {
            target: online.clone(),
            target_head: online_head.to_target(),
            online,
            online_head,
            adam,
            epoch: 0,
            step: 0,
        }
    }
}

/// Symmetrized (or one-directional) online-vs-target loss on one pair.
/// Returns the loss value and the online gradients.
pub(crate) fn online_vs_fixed(
    tape: &mut Tape,
    online: &EncoderParams,
    online_head: &OnlineHead,
    fixed: &EncoderParams,
    fixed_head: &TargetHead,
    pair: &(ViewBatch, ViewBatch),
    symmetric: bool,
) -> Result<(Var, Vec<Var>)> {
    let enc = online.attach(tape, true);
    let head = online_head.attach(tape, true);
    let fixed_enc = fixed.attach(tape, false);
    let fixed_head = fixed_head.attach(tape, false);
    let online_head_vars = HeadVars::Online(head);

    let one_way =
        |tape: &mut Tape, online_side: &ViewBatch, fixed_side: &ViewBatch| -> Result<Var> {
            let e = online_side.embed(tape, &enc)?;
            let z = project(tape, &online_head_vars, e)?;
            let t = fixed_side.embed(tape, &fixed_enc)?;
            let h = project(tape, &fixed_head, t)?;
            paired_loss(tape, z, h)
        };
    let mut loss = one_way(tape, &pair.0, &pair.1)?;
    if symmetric {
        let back = one_way(tape, &pair.1, &pair.0)?;
        let both = tape.add(loss, back)?;
        loss = tape.scale(both, 0.5)?;
    }
    let mut vars = enc.vars();
    vars.extend(head.vars());
    Ok((loss, vars))
}

/// One optimization step: a view pair, the loss, Adam on the online
/// network, then the EMA update of the target.
pub fn pretrain_step(
    state: &mut ContrastiveState,
    corpus: &Corpus,
    aug: &AugmentConfig,
    cfg: &PretrainConfig,
    lr: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let pair = sample_pair(corpus, aug, cfg.batch_nodes, cfg.batch_graphs, rng)?;
    let mut tape = Tape::new();
    let (loss, vars) = online_vs_fixed(
        &mut tape,
        &state.online,
        &state.online_head,
        &state.target,
        &state.target_head,
        &pair,
        cfg.symmetric_loss,
    )?;
    tape.backward(loss)?;
    let value = tape.value(loss).item();
    let grads: Vec<Option<Tensor>> = vars.iter().map(|&v| tape.take_grad(v)).collect();

    let mut params: Vec<&mut Tensor> = state.online.tensors_mut();
    params.extend(state.online_head.tensors_mut());
    state.adam.step(&mut params, grads, lr)?;
    ema_update(
        &mut state.target,
        &mut state.target_head,
        &state.online,
        &state.online_head,
        cfg.tau,
    );
    state.step += 1;
    Ok(value)
}

/// Smallest per-dimension standard deviation of row-normalized embeddings.
///
/// Near zero means every node (or graph) maps to the same direction.
pub fn embedding_spread(encoder: &EncoderParams, corpus: &Corpus) -> Result<f64> {
    let emb = match corpus {
        Corpus::Nodes(g) => encoder.embed(g)?,
        Corpus::Graphs(gs) => {
            let batch = pooled(gs)?;
            let mut tape = Tape::new();
            let vars = encoder.attach(&mut tape, false);
            let e = batch.embed(&mut tape, &vars)?;
            tape.value(e).clone()
        }
    };
    let mut tape = Tape::new();
    let e = tape.constant(emb);
    let normed = tape.l2norm_rows(e)?;
    Ok(column_std(tape.value(normed))
        .into_iter()
        .fold(f64::INFINITY, f64::min))
}

pub(crate) fn column_std(t: &Tensor) -> Vec<f64> {
    let n = t.rows() as f64;
    (0..t.cols())
        .map(|c| {
            let mean = (0..t.rows()).map(|r| t.get(r, c)).sum::<f64>() / n;
            ((0..t.rows())
                .map(|r| (t.get(r, c) - mean).powi(2))
                .sum::<f64>()
                / n)
                .sqrt()
        })
        .collect()
}

/// One row of a training trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub embed_std: Option<f64>,
}

pub fn trajectory_csv(rows: &[LossRow], with_std: bool) -> String {
    let mut s = String::from(if with_std {
        "step,loss,embed_std\n"
    } else {
        "step,loss\n"
    });
    for r in rows {
        if with_std {
            let std = r.embed_std.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", r.step, r.loss, std));
        } else {
            s.push_str(&format!("{},{}\n", r.step, r.loss));
        }
    }
    s
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub state: ContrastiveState,
    pub trajectory: Vec<LossRow>,
}

impl PretrainOutcome {
    pub fn encoder(&self) -> &EncoderParams {
        &self.state.online
    }

    /// The online projector as a one-layer head, for use by a frozen teacher.
    pub fn teacher_head(&self) -> TargetHead {
        self.state.online_head.to_target()
    }
}

/// Runs `epochs x steps_per_epoch` steps on unlabeled data with per-epoch
/// learning-rate decay.
pub fn pretrain(
    corpus: &Corpus,
    dims: &EncoderDims,
    aug: &AugmentConfig,
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    if corpus.has_labels() {
        return Err(Error::Contract(
            "pre-training data must be unlabeled".into(),
        ));
    }
    if corpus.feature_dim() != dims.d_in {
        return Err(Error::dim(
            "pretrain",
            format!(
                "data has {} features, encoder expects {}",
                corpus.feature_dim(),
                dims.d_in
            ),
        ));
    }
    let mut state = ContrastiveState::new(dims, cfg, rng);
    let mut trajectory = Vec::with_capacity(cfg.total_steps());
    let mut lr = cfg.lr;
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        for _ in 0..cfg.steps_per_epoch {
            let loss = pretrain_step(&mut state, corpus, aug, cfg, lr, rng)?;
            let step = state.step;
            let embed_std = if cfg.embed_std_every > 0 && step.is_multiple_of(cfg.embed_std_every) {
                Some(embedding_spread(&state.online, corpus)?)
            } else {
                None
            };
            log::debug!("pretrain step {step} loss {loss:.5}");
            trajectory.push(LossRow {
                step,
                loss,
                embed_std,
            });
        }
        lr *= cfg.lr_decay;
    }
    Ok(PretrainOutcome { state, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{synth_sbm, SbmConfig};
    use crate::rng::seeded;

    fn loss_of(z: &Tensor, h: &Tensor) -> f64 {
        normalized_mse(z, h).unwrap()
    }

    #[test]
    fn loss_identities() {
        let z = Tensor::from_rows(&[[1.0, 2.0, -1.0], [0.3, 0.0, 4.0]]);
        assert!(loss_of(&z, &z).abs() < 1e-12);
        assert!((loss_of(&z, &z.map(|v| -v)) - 4.0).abs() < 1e-12);
        let a = Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0]]);
        let b = Tensor::from_rows(&[[0.0, 3.0], [-5.0, 0.0]]);
        assert!((loss_of(&a, &b) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_bad_input() {
        let z = Tensor::from_rows(&[[0.0, 0.0]]);
        assert!(matches!(
            normalized_mse(&z, &z),
            Err(Error::Degenerate { .. })
        ));
        let empty = Tensor::zeros(0, 2);
        assert!(matches!(
            normalized_mse(&empty, &empty),
            Err(Error::Degenerate { .. })
        ));
        assert!(normalized_mse(&Tensor::zeros(1, 2), &Tensor::zeros(2, 2)).is_err());
    }

    #[test]
    fn scalar_ema() {
        let mut xi = Tensor::scalar(0.0);
        let theta = Tensor::scalar(1.0);
        let tau: f64 = 0.999;
        for (d, s) in xi.data_mut().iter_mut().zip(theta.data()) {
            *d = tau * *d + (1.0 - tau) * s;
        }
        assert_eq!(xi.item(), 1.0 - 0.999);
        assert!((xi.item() - 0.001).abs() < 1e-15);
    }

    fn fixture() -> (Corpus, EncoderDims) {
        let g = synth_sbm(&SbmConfig {
            seed: 11,
            ..Default::default()
        })
        .unwrap();
        let dims = EncoderDims {
            d_in: g.feature_dim(),
            d_hidden: 16,
            d_out: 16,
            d_proj: 8,
        };
        (Corpus::Nodes(g.without_labels()), dims)
    }

    #[test]
    fn tau_one_freezes_target_and_tau_zero_copies() {
        let (corpus, dims) = fixture();
        let aug = AugmentConfig::default();
        let mut rng = seeded(0, 0);
        for tau in [1.0, 0.0] {
            let cfg = PretrainConfig {
                tau,
                ..Default::default()
            };
            let mut state = ContrastiveState::new(&dims, &cfg, &mut rng);
            let before = state.target.clone();
            pretrain_step(&mut state, &corpus, &aug, &cfg, cfg.lr, &mut rng).unwrap();
            if tau == 1.0 {
                assert_eq!(state.target, before);
            } else {
                assert_eq!(state.target, state.online);
                assert_eq!(state.target_head, state.online_head.to_target());
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (corpus, dims) = fixture();
        let cfg = PretrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = pretrain(
            &corpus,
            &dims,
            &AugmentConfig::default(),
            &cfg,
            &mut seeded(3, 0),
        )
        .unwrap();
        let init = ContrastiveState::new(&dims, &cfg, &mut seeded(3, 0));
        assert_eq!(out.encoder(), &init.online);
        assert!(out.trajectory.is_empty());
    }

    #[test]
    fn labels_are_refused() {
        let g = synth_sbm(&SbmConfig::default()).unwrap();
        let dims = EncoderDims {
            d_in: g.feature_dim(),
            ..Default::default()
        };
        let err = pretrain(
            &Corpus::Nodes(g),
            &dims,
            &AugmentConfig::default(),
            &PretrainConfig::default(),
            &mut seeded(0, 0),
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn transductive_needs_test_data() {
        let (corpus, _) = fixture();
        assert!(matches!(
            Corpus::select(Setting::Transductive, corpus.clone(), None),
            Err(Error::Config(_))
        ));
        let both = Corpus::select(Setting::Transductive, corpus.clone(), Some(corpus)).unwrap();
        let Corpus::Nodes(g) = both else { panic!() };
        assert_eq!(g.num_nodes(), 200);
    }

    #[test]
    fn trajectory_format() {
        let rows = vec![
            LossRow {
                step: 1,
                loss: 0.5,
                embed_std: None,
            },
            LossRow {
                step: 2,
                loss: 0.25,
                embed_std: Some(0.1),
            },
        ];
        assert_eq!(
            trajectory_csv(&rows, true),
            "step,loss,embed_std\n1,0.5,\n2,0.25,0.1\n"
        );
        assert_eq!(trajectory_csv(&rows, false), "step,loss\n1,0.5\n2,0.25\n");
    }
}
