use std::path::PathBuf;

use cgfl_core::augment::AugSet;
use cgfl_core::graph::SbmConfig;
use cgfl_core::pipeline::{DatasetSpec, Mode, RunConfig, SweepAxis, TaskKind};
use cgfl_core::pretrain::Setting;
use cgfl_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "cgfl",
    version,
    about = "Few-shot learning on graphs with contrastive pre-training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run every stage of one configuration.
    Run(RunArgs),
    /// Run one configuration per value of an axis and write a sweep CSV.
    Sweep(SweepArgs),
    /// Measure per-layer discarded information of saved encoders.
    Probe(ProbeArgs),
    /// Synthetic data utilities.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Print the resolved configuration as TOML.
    Config(RunArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// `k-shot=1,2,3`, `label-rate=0.1,0.5,1` or `aug-set=ND,ER,FM,ND+ER+FM`.
    #[arg(long)]
    pub axis: SweepAxisArg,
    /// Sweep CSV path; defaults to `sweep_<axis>.csv` under the output directory.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Encoder checkpoint to probe.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Second checkpoint; writes a per-layer comparison instead of a report.
    #[arg(long)]
    pub against: Option<PathBuf>,
    /// Tensor name prefix inside the checkpoints. Inferred when omitted.
    #[arg(long)]
    pub prefix: Option<String>,
    /// Output CSV path; printed to stdout when omitted.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub entropy_weight: Option<f64>,
    #[arg(long)]
    pub probe_steps: Option<usize>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Subcommand, Debug)]
pub enum SynthCommand {
    /// Write a block-model graph in the plain-text citation format.
    Export {
        #[arg(long)]
        nodes: PathBuf,
        #[arg(long)]
        edges: PathBuf,
        #[command(flatten)]
        sbm: SbmArgs,
    },
}

#[derive(Clone, Debug)]
pub struct SweepAxisArg(pub SweepAxis);

impl std::str::FromStr for SweepAxisArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.parse().map(SweepAxisArg)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Cgfl,
    Teacher,
    NoPretrain,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SettingArg {
    Inductive,
    Transductive,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Node,
    Graph,
}

#[derive(Args, Debug, Default)]
pub struct SbmArgs {
    #[arg(long)]
    pub sbm_blocks: Option<usize>,
    #[arg(long)]
    pub sbm_nodes_per_block: Option<usize>,
    #[arg(long)]
    pub sbm_p_in: Option<f64>,
    #[arg(long)]
    pub sbm_p_out: Option<f64>,
    #[arg(long)]
    pub sbm_feature_dim: Option<usize>,
    #[arg(long)]
    pub sbm_noise: Option<f64>,
    #[arg(long)]
    pub sbm_seed: Option<u64>,
}

impl SbmArgs {
    fn any(&self) -> bool {
        self.sbm_blocks.is_some()
            || self.sbm_nodes_per_block.is_some()
            || self.sbm_p_in.is_some()
            || self.sbm_p_out.is_some()
            || self.sbm_feature_dim.is_some()
            || self.sbm_noise.is_some()
            || self.sbm_seed.is_some()
    }

    pub fn apply(&self, c: &mut SbmConfig) {
        set(&mut c.blocks, self.sbm_blocks);
        set(&mut c.nodes_per_block, self.sbm_nodes_per_block);
        set(&mut c.p_in, self.sbm_p_in);
        set(&mut c.p_out, self.sbm_p_out);
        set(&mut c.feature_dim, self.sbm_feature_dim);
        set(&mut c.noise_std, self.sbm_noise);
        set(&mut c.seed, self.sbm_seed);
    }
}

/// Flags that override the config file.
#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// TOML config file; flags below take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub setting: Option<SettingArg>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub k_shot: Option<usize>,
    #[arg(long)]
    pub n_way: Option<usize>,
    #[arg(long)]
    pub label_rate: Option<f64>,
    /// Enabled augmentations, e.g. `ND+ER+FM`.
    #[arg(long)]
    pub aug_set: Option<AugSetArg>,
    #[arg(long)]
    pub node_drop: Option<f64>,
    #[arg(long)]
    pub edge_remove: Option<f64>,
    #[arg(long)]
    pub feat_mask: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub sbm: SbmArgs,
}

#[derive(Clone, Copy, Debug)]
pub struct AugSetArg(pub AugSet);

impl std::str::FromStr for AugSetArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.parse().map(AugSetArg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Overrides {
    /// The config file (or defaults) with every given flag applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::Cgfl => Mode::Cgfl,
                ModeArg::Teacher => Mode::Teacher,
                ModeArg::NoPretrain => Mode::NoPretrain,
            };
        }
        if let Some(s) = self.setting {
            cfg.setting = match s {
                SettingArg::Inductive => Setting::Inductive,
                SettingArg::Transductive => Setting::Transductive,
            };
        }
        if let Some(t) = self.task {
            cfg.task = match t {
                TaskArg::Node => TaskKind::Node,
                TaskArg::Graph => TaskKind::Graph,
            };
            // Switching task without a config file also switches the default dataset.
            if self.config.is_none() && cfg.task == TaskKind::Graph {
                cfg.dataset = DatasetSpec::GraphSet(Default::default());
            }
        }
        set(&mut cfg.meta.k_shot, self.k_shot);
        set(&mut cfg.meta.n_way, self.n_way);
        set(&mut cfg.label_rate, self.label_rate);
        set(&mut cfg.seed, self.seed);
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        for aug in std::iter::once(&mut cfg.augment).chain(cfg.distill_augment.as_mut()) {
            set(&mut aug.enabled, self.aug_set.map(|a| a.0));
            set(&mut aug.node_drop_rate, self.node_drop);
            set(&mut aug.edge_remove_rate, self.edge_remove);
            set(&mut aug.feature_mask_rate, self.feat_mask);
        }
        if self.sbm.any() {
            match &mut cfg.dataset {
                DatasetSpec::Sbm(c) => self.sbm.apply(c),
                _ => {
                    return Err(Error::Config(
                        "--sbm-* flags need a block-model dataset".into(),
                    ))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
