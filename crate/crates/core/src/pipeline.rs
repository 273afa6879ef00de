//! End-to-end runs: data, pre-training, distillation, meta-training,
//! meta-testing and the optional probe, driven by one serializable config.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugSet, AugmentConfig};
use crate::distill::{distill, teacher_checkpoint};
use crate::encoder::{EncoderDims, EncoderParams, ParamSet};
use crate::error::{Error, Result};
use crate::fewshot::{
    epochs_csv, meta_test, meta_train, EpochRow, MetaConfig, MetaTestSummary, TaskData,
};
use crate::graph::{
    apply_label_rate, load_citation_dataset, synth_graph_classes, synth_sbm, ClassSplit, Graph,
    GraphSetConfig, SbmConfig,
};
use crate::infoprobe::{probe_model, InfoProbeReport, ProbeConfig};
use crate::pretrain::{pretrain, trajectory_csv, Corpus, PretrainConfig, Setting};
use crate::rng::seeded;
use crate::tensor::Checkpoint;

/// RNG stream of each stage; stage `s` draws from `seeded(seed, s)`.
pub mod stream {
    pub const LABEL_RATE: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const DISTILL: u64 = 3;
    pub const META_TRAIN: u64 = 4;
    pub const META_TEST: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const RANDOM_INIT: u64 = 7;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    #[default]
    Node,
    Graph,
}

/// Which stages precede meta-training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Pre-train, distill, then meta-learn from the student.
    #[default]
    Cgfl,
    /// Pre-train, then meta-learn from the teacher (no distillation).
    Teacher,
    /// Meta-learn from a random initialization.
    NoPretrain,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Cgfl => "cgfl",
            Mode::Teacher => "teacher",
            Mode::NoPretrain => "no-pretrain",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cgfl" => Ok(Mode::Cgfl),
            "teacher" => Ok(Mode::Teacher),
            "no-pretrain" => Ok(Mode::NoPretrain),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (cgfl, teacher, no-pretrain)"
            ))),
        }
    }
}

/// Where the labeled data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Sbm(SbmConfig),
    GraphSet(GraphSetConfig),
    Citation(CitationPaths),
}

/// Node and edge files in the plain-text citation format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CitationPaths {
    pub nodes: PathBuf,
    pub edges: PathBuf,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Sbm(SbmConfig::default())
    }
}

/// Hidden, output and projector widths; the input width comes from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Widths {
    pub d_hidden: usize,
    pub d_out: usize,
    pub d_proj: usize,
}

impl Default for Widths {
    fn default() -> Self {
        let d = EncoderDims::default();
        Self {
            d_hidden: d.d_hidden,
            d_out: d.d_out,
            d_proj: d.d_proj,
        }
    }
}

impl Widths {
    pub fn dims(&self, d_in: usize) -> EncoderDims {
        EncoderDims {
            d_in,
            d_hidden: self.d_hidden,
            d_out: self.d_out,
            d_proj: self.d_proj,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub task: TaskKind,
    pub setting: Setting,
    pub mode: Mode,
    /// Fraction of base-class labels available to meta-training.
    pub label_rate: f64,
    /// Number of classes (highest ids) held out for meta-testing.
    pub novel_classes: usize,
    pub dataset: DatasetSpec,
    pub encoder: Widths,
    pub augment: AugmentConfig,
    pub pretrain: PretrainConfig,
    /// Distillation schedule; the pre-training schedule when absent.
    pub distill: Option<PretrainConfig>,
    /// Distillation augmentations; the pre-training ones when absent.
    pub distill_augment: Option<AugmentConfig>,
    pub meta: MetaConfig,
    /// Runs the probe on the final encoder when present.
    pub probe: Option<ProbeConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            task: TaskKind::Node,
            setting: Setting::Inductive,
            mode: Mode::Cgfl,
            label_rate: 1.0,
            novel_classes: 2,
            dataset: DatasetSpec::default(),
            encoder: Widths::default(),
            augment: AugmentConfig::default(),
            pretrain: PretrainConfig::default(),
            distill: None,
            distill_augment: None,
            meta: MetaConfig::default(),
            probe: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical serialization; independent of how the
    /// config was written.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn distill_schedule(&self) -> &PretrainConfig {
        self.distill.as_ref().unwrap_or(&self.pretrain)
    }

    pub fn distill_augmentation(&self) -> &AugmentConfig {
        self.distill_augment.as_ref().unwrap_or(&self.augment)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.label_rate > 0.0 && self.label_rate <= 1.0) {
            return Err(Error::Config(format!(
                "label_rate {} outside (0, 1]",
                self.label_rate
            )));
        }
        match (&self.dataset, self.task) {
            (DatasetSpec::GraphSet(_), TaskKind::Node) => {
                return Err(Error::Config(
                    "a graph-set dataset needs task = \"graph\"".into(),
                ))
            }
            (DatasetSpec::Sbm(_) | DatasetSpec::Citation(_), TaskKind::Graph) => {
                return Err(Error::Config(
                    "graph classification needs a graph-set dataset".into(),
                ))
            }
            _ => {}
        }
        self.augment.validate()?;
        self.distill_augmentation().validate()?;
        self.pretrain.validate()?;
        self.distill_schedule().validate()?;
        self.meta.validate()?;
        if let Some(p) = &self.probe {
            p.validate()?;
        }
        Ok(())
    }

    /// Stages `run_pipeline` executes for this config.
    pub fn stages(&self) -> Vec<Stage> {
        let mut s = match self.mode {
            Mode::Cgfl => vec![Stage::Pretrain, Stage::Distill],
            Mode::Teacher => vec![Stage::Pretrain],
            Mode::NoPretrain => vec![],
        };
        s.extend([Stage::MetaTrain, Stage::MetaTest]);
        if self.probe.is_some() {
            s.push(Stage::Probe);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Data,
    Pretrain,
    Distill,
    MetaTrain,
    MetaTest,
    Probe,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Data => "data",
            Stage::Pretrain => "pretrain",
            Stage::Distill => "distill",
            Stage::MetaTrain => "meta_train",
            Stage::MetaTest => "meta_test",
            Stage::Probe => "probe",
        })
    }
}

/// Loaded data, labels intact.
#[derive(Clone, Debug)]
pub enum Dataset {
    Nodes(Graph),
    Graphs(Vec<Graph>),
}

impl Dataset {
    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        Ok(match spec {
            DatasetSpec::Sbm(c) => Dataset::Nodes(synth_sbm(c)?),
            DatasetSpec::GraphSet(c) => Dataset::Graphs(synth_graph_classes(c)?),
            DatasetSpec::Citation(CitationPaths { nodes, edges }) => {
                Dataset::Nodes(load_citation_dataset(nodes, edges)?)
            }
        })
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Dataset::Nodes(g) => g.feature_dim(),
            Dataset::Graphs(gs) => gs.first().map_or(0, Graph::feature_dim),
        }
    }

    pub fn task_data(&self) -> Result<TaskData> {
        match self {
            Dataset::Nodes(g) => TaskData::nodes(g),
            Dataset::Graphs(gs) => TaskData::graphs(gs),
        }
    }

    pub fn classes(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = match self {
            Dataset::Nodes(g) => g.node_labels().unwrap_or(&[]).iter().copied().collect(),
            Dataset::Graphs(gs) => gs.iter().filter_map(Graph::graph_label).collect(),
        };
        set.into_iter().collect()
    }

    /// Unlabeled pre-training data. Inductive runs see base-class instances
    /// only; transductive runs see everything.
    pub fn pretrain_corpus(&self, split: &ClassSplit, setting: Setting) -> Result<Corpus> {
        match (self, setting) {
            (Dataset::Nodes(g), Setting::Transductive) => Ok(Corpus::Nodes(g.without_labels())),
            (Dataset::Nodes(g), Setting::Inductive) => {
                let labels = g
                    .node_labels()
                    .ok_or_else(|| Error::Integrity("node task needs labels".into()))?;
                let keep: Vec<usize> = (0..g.num_nodes())
                    .filter(|&i| split.base().contains(&labels[i]))
                    .collect();
                Ok(Corpus::Nodes(g.induced_subgraph(&keep)?.without_labels()))
            }
            (Dataset::Graphs(gs), Setting::Transductive) => Ok(Corpus::Graphs(
                gs.iter().map(Graph::without_labels).collect(),
            )),
            (Dataset::Graphs(gs), Setting::Inductive) => Ok(Corpus::Graphs(
                gs.iter()
                    .filter(|g| g.graph_label().is_some_and(|c| split.base().contains(&c)))
                    .map(Graph::without_labels)
                    .collect(),
            )),
        }
    }

    /// Graph the probe runs on: the node graph, or all graphs side by side.
    pub fn probe_graph(&self) -> Result<Graph> {
        match self {
            Dataset::Nodes(g) => Ok(g.without_labels()),
            Dataset::Graphs(gs) => {
                let refs: Vec<&Graph> = gs.iter().collect();
                Ok(Graph::disjoint_union(&refs)?.0.without_labels())
            }
        }
    }
}

/// One metrics row. Rows are only ever appended.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub config_hash: String,
    pub stage: Stage,
    pub metric: String,
    pub value: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

pub const METRICS_HEADER: &str = "run_id,config_hash,stage,metric,value,timestamp";

impl MetricsRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.run_id, self.config_hash, self.stage, self.metric, self.value, self.timestamp
        )
    }
}

/// Collects metrics and mirrors each row to `metrics.csv` as it arrives.
struct MetricsSink {
    run_id: String,
    config_hash: String,
    file: Option<PathBuf>,
    rows: Vec<MetricsRecord>,
}

impl MetricsSink {
    fn push(&mut self, stage: Stage, metric: &str, value: f64) -> Result<()> {
        let row = MetricsRecord {
            run_id: self.run_id.clone(),
            config_hash: self.config_hash.clone(),
            stage,
            metric: metric.to_string(),
            value,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        };
        if let Some(path) = &self.file {
            let fresh = !path.exists();
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            if fresh {
                writeln!(f, "{METRICS_HEADER}")?;
            }
            writeln!(f, "{}", row.csv_line())?;
        }
        self.rows.push(row);
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config_hash: String,
    pub stages: Vec<Stage>,
    pub summary: MetaTestSummary,
    pub meta_epochs: Vec<EpochRow>,
    pub metrics: Vec<MetricsRecord>,
    pub probe: Option<InfoProbeReport>,
    /// Encoder after meta-training.
    pub encoder: EncoderParams,
}

fn write_file(dir: Option<&Path>, name: &str, contents: &str) -> Result<()> {
    if let Some(d) = dir {
        fs::write(d.join(name), contents)?;
    }
    Ok(())
}

fn write_ckpt(dir: Option<&Path>, name: &str, ckpt: &Checkpoint) -> Result<()> {
    if let Some(d) = dir {
        ckpt.save(d.join(name))?;
    }
    Ok(())
}

/// Runs every stage of `cfg.mode`. Metrics written before a failure stay on
/// disk, followed by a `failed` row for the failing stage.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let dir = cfg.output_dir.as_deref();
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
        fs::write(d.join("config.toml"), cfg.to_toml()?)?;
    }
    let mut sink = MetricsSink {
        run_id: format!("{}-{}", &hash[..12], cfg.seed),
        config_hash: hash.clone(),
        file: dir.map(|d| d.join("metrics.csv")),
        rows: Vec::new(),
    };
    let mut current = Stage::Data;
    match run_stages(cfg, dir, &mut sink, &mut current) {
        Ok((summary, meta_epochs, probe, encoder)) => Ok(RunOutcome {
            config_hash: hash,
            stages: cfg.stages(),
            summary,
            meta_epochs,
            metrics: sink.rows,
            probe,
            encoder,
        }),
        Err(e) => {
            log::error!("stage {current} failed: {e}");
            sink.push(current, "failed", 1.0)?;
            Err(e)
        }
    }
}

type StageResults = (
    MetaTestSummary,
    Vec<EpochRow>,
    Option<InfoProbeReport>,
    EncoderParams,
);

fn run_stages(
    cfg: &RunConfig,
    dir: Option<&Path>,
    sink: &mut MetricsSink,
    current: &mut Stage,
) -> Result<StageResults> {
    let data = Dataset::load(&cfg.dataset)?;
    let split = ClassSplit::highest_as_novel(&data.classes(), cfg.novel_classes)?;
    for (name, set) in [("base", split.base()), ("novel", split.novel())] {
        if set.len() < cfg.meta.n_way {
            return Err(Error::Config(format!(
                "{} {name} classes cannot form {}-way episodes",
                set.len(),
                cfg.meta.n_way
            )));
        }
    }
    let task = data.task_data()?;
    let dims = cfg.encoder.dims(data.feature_dim());
    let seed = cfg.seed;

    let full_pool = task.pool(split.base());
    let train_pool = if cfg.label_rate < 1.0 {
        apply_label_rate(
            &full_pool,
            cfg.label_rate,
            &mut seeded(seed, stream::LABEL_RATE),
        )?
    } else {
        full_pool
    };
    sink.push(Stage::Data, "train_labels", train_pool.total() as f64)?;

    let init = match cfg.mode {
        Mode::NoPretrain => EncoderParams::init(&dims, &mut seeded(seed, stream::RANDOM_INIT)),
        Mode::Cgfl | Mode::Teacher => {
            *current = Stage::Pretrain;
            let corpus = data.pretrain_corpus(&split, cfg.setting)?;
            let pre = pretrain(
                &corpus,
                &dims,
                &cfg.augment,
                &cfg.pretrain,
                &mut seeded(seed, stream::PRETRAIN),
            )?;
            let traj = &pre.trajectory;
            if let (Some(first), Some(last)) = (traj.first(), traj.last()) {
                sink.push(Stage::Pretrain, "initial_loss", first.loss)?;
                sink.push(Stage::Pretrain, "final_loss", last.loss)?;
            }
            write_file(dir, "pretrain_loss.csv", &trajectory_csv(traj, true))?;
            let teacher = pre.encoder().clone();
            let head = pre.teacher_head();
            write_ckpt(dir, "teacher.ckpt", &teacher_checkpoint(&teacher, &head))?;
            if cfg.mode == Mode::Teacher {
                teacher
            } else {
                *current = Stage::Distill;
                let out = distill(
                    teacher,
                    head,
                    &corpus,
                    cfg.distill_augmentation(),
                    cfg.distill_schedule(),
                    &mut seeded(seed, stream::DISTILL),
                )?;
                if let Some(last) = out.trajectory.last() {
                    sink.push(Stage::Distill, "final_loss", last.loss)?;
                }
                write_file(
                    dir,
                    "distill_loss.csv",
                    &trajectory_csv(&out.trajectory, false),
                )?;
                let mut ckpt = Checkpoint::new();
                out.student().write_checkpoint("student", &mut ckpt);
                write_ckpt(dir, "student.ckpt", &ckpt)?;
                out.state.student
            }
        }
    };

    *current = Stage::MetaTrain;
    let trained = meta_train(
        &init,
        &task,
        &split,
        &train_pool,
        &cfg.meta,
        &mut seeded(seed, stream::META_TRAIN),
    )?;
    if let Some(last) = trained.epochs.last() {
        sink.push(Stage::MetaTrain, "final_query_acc", last.mean_query_acc)?;
        sink.push(Stage::MetaTrain, "final_query_loss", last.mean_query_loss)?;
    }
    write_file(dir, "meta_train.csv", &epochs_csv(&trained.epochs))?;
    let mut ckpt = Checkpoint::new();
    trained.params.write_checkpoint("meta", &mut ckpt);
    write_ckpt(dir, "meta.ckpt", &ckpt)?;

    *current = Stage::MetaTest;
    let summary = meta_test(
        &trained.params,
        &task,
        &split,
        &cfg.meta,
        &mut seeded(seed, stream::META_TEST),
    )?;
    sink.push(Stage::MetaTest, "mean_acc", summary.mean)?;
    sink.push(Stage::MetaTest, "std_acc", summary.std)?;
    write_file(dir, "meta_test.csv", &summary.to_csv())?;

    let probe = match &cfg.probe {
        Some(pc) => {
            *current = Stage::Probe;
            let g = data.probe_graph()?;
            let report = probe_model(&trained.params, &g, pc, &mut seeded(seed, stream::PROBE))?;
            for l in &report.layers {
                sink.push(Stage::Probe, &format!("H_{}", l.layer), l.entropy)?;
            }
            write_file(dir, "probe.csv", &report.to_csv())?;
            Some(report)
        }
        None => None,
    };
    Ok((summary, trained.epochs, probe, trained.params))
}

/// A list of values for one config field, run one at a time.
#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    KShot(Vec<usize>),
    LabelRate(Vec<f64>),
    AugSet(Vec<AugSet>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::KShot(_) => "k_shot",
            SweepAxis::LabelRate(_) => "label_rate",
            SweepAxis::AugSet(_) => "aug_set",
        }
    }

    /// `(printed value, config with the value applied)` per point.
    pub fn configs(&self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            if let Some(d) = &base.output_dir {
                c.output_dir = Some(d.join(format!("{}-{}", self.name(), label.replace('+', "_"))));
            }
            (label, c)
        };
        match self {
            SweepAxis::KShot(ks) => ks
                .iter()
                .map(|&k| with(k.to_string(), &|c| c.meta.k_shot = k))
                .collect(),
            SweepAxis::LabelRate(rs) => rs
                .iter()
                .map(|&r| with(r.to_string(), &|c| c.label_rate = r))
                .collect(),
            SweepAxis::AugSet(sets) => sets
                .iter()
                .map(|&s| {
                    with(s.to_string(), &|c| {
                        c.augment.enabled = s;
                        if let Some(a) = &mut c.distill_augment {
                            a.enabled = s;
                        }
                    })
                })
                .collect(),
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    /// `k-shot=1,2,3`, `label-rate=0.1,1` or `aug-set=ND,ER+FM`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, values) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep axis {s:?} is not name=v1,v2,...")))?;
        let items: Vec<&str> = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .collect();
        if items.is_empty() {
            return Err(Error::Config(format!("sweep axis {name} has no values")));
        }
        let bad = |v: &str| Error::Config(format!("bad {name} value {v:?}"));
        match name.trim() {
            "k-shot" | "k_shot" => Ok(SweepAxis::KShot(
                items
                    .iter()
                    .map(|v| v.parse().map_err(|_| bad(v)))
                    .collect::<Result<_>>()?,
            )),
            "label-rate" | "label_rate" => Ok(SweepAxis::LabelRate(
                items
                    .iter()
                    .map(|v| v.parse().map_err(|_| bad(v)))
                    .collect::<Result<_>>()?,
            )),
            "aug-set" | "aug_set" => Ok(SweepAxis::AugSet(
                items.iter().map(|v| v.parse()).collect::<Result<_>>()?,
            )),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: String,
    pub mean: f64,
    pub std: f64,
    /// Set when this point's run failed; `mean` and `std` are NaN then.
    pub error: Option<String>,
}

/// One run per axis value with the same seed. A failing point is recorded
/// and the sweep moves on.
pub fn sweep(cfg: &RunConfig, axis: &SweepAxis) -> Vec<SweepRow> {
    axis.configs(cfg)
        .into_iter()
        .map(|(value, c)| match run_pipeline(&c) {
            Ok(out) => SweepRow {
                axis: axis.name(),
                value,
                mean: out.summary.mean,
                std: out.summary.std,
                error: None,
            },
            Err(e) => {
                log::warn!("sweep {}={value} failed: {e}", axis.name());
                SweepRow {
                    axis: axis.name(),
                    value,
                    mean: f64::NAN,
                    std: f64::NAN,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect()
}

/// `axis,value,mean,std` with a header.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,value,mean,std\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.axis, r.value, r.mean, r.std));
    }
    out
}
