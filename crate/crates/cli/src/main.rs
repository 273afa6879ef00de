//! `cgfl`: runs, sweeps, probes and synthetic data export.

mod args;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cgfl_core::encoder::{EncoderDims, EncoderParams, ParamSet};
use cgfl_core::graph::{synth_sbm, write_citation_dataset, SbmConfig};
use cgfl_core::infoprobe::{compare_reports, comparison_csv, probe_model, InfoProbeReport};
use cgfl_core::pipeline::{run_pipeline, stream, sweep, sweep_csv, Dataset};
use cgfl_core::rng::seeded;
use cgfl_core::tensor::Checkpoint;
use cgfl_core::{Error, Result};
use clap::Parser;

use args::{Cli, Command, ProbeArgs, SweepArgs, SynthCommand};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run(a) => {
            let cfg = a.overrides.resolve()?;
            let out = run_pipeline(&cfg)?;
            let stages: Vec<String> = out.stages.iter().map(ToString::to_string).collect();
            println!("config_hash {}", out.config_hash);
            println!("stages {}", stages.join(","));
            println!(
                "meta_test mean {:.4} std {:.4} episodes {}",
                out.summary.mean, out.summary.std, out.summary.episodes
            );
            Ok(())
        }
        Command::Sweep(a) => run_sweep(a),
        Command::Probe(a) => run_probe(a),
        Command::Synth(SynthCommand::Export { nodes, edges, sbm }) => {
            let mut c = SbmConfig::default();
            sbm.apply(&mut c);
            let g = synth_sbm(&c)?;
            write_citation_dataset(&g, &nodes, &edges)?;
            log::info!(
                "wrote {} nodes and {} edges",
                g.num_nodes(),
                g.edges().len()
            );
            Ok(())
        }
        Command::Config(a) => {
            print!("{}", a.overrides.resolve()?.to_toml()?);
            Ok(())
        }
    }
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    let axis = a.axis.0;
    let rows = sweep(&cfg, &axis);
    let csv = sweep_csv(&rows);
    let path = a.csv.or_else(|| {
        cfg.output_dir
            .as_ref()
            .map(|d| d.join(format!("sweep_{}.csv", axis.name())))
    });
    match path {
        Some(p) => write_creating_parent(&p, &csv)?,
        None => print!("{csv}"),
    }
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.value.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{} sweep point(s) failed: {}",
            failed.len(),
            failed.join(",")
        )))
    }
}

fn run_probe(a: ProbeArgs) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    let mut probe_cfg = cfg.probe.clone().unwrap_or_default();
    if let Some(w) = a.entropy_weight {
        probe_cfg.entropy_weight = w;
    }
    if let Some(s) = a.probe_steps {
        probe_cfg.steps = s;
    }
    probe_cfg.validate()?;
    let graph = Dataset::load(&cfg.dataset)?.probe_graph()?;
    let report = |path: &Path| -> Result<InfoProbeReport> {
        let enc = load_encoder(path, a.prefix.as_deref())?;
        if enc.conv1.weight.rows() != graph.feature_dim() {
            return Err(Error::Config(format!(
                "{} expects {} input features, dataset has {}",
                path.display(),
                enc.conv1.weight.rows(),
                graph.feature_dim()
            )));
        }
        probe_model(
            &enc,
            &graph,
            &probe_cfg,
            &mut seeded(cfg.seed, stream::PROBE),
        )
    };
    let first = report(&a.checkpoint)?;
    let csv = match &a.against {
        Some(other) => comparison_csv(&compare_reports(&first, &report(other)?)?),
        None => first.to_csv(),
    };
    match &a.csv {
        Some(p) => write_creating_parent(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

/// Reads the encoder tensors stored under `prefix`, or under the first
/// prefix that has a `conv1.weight` entry.
fn load_encoder(path: &Path, prefix: Option<&str>) -> Result<EncoderParams> {
    let ckpt = Checkpoint::load(path)?;
    let prefix = match prefix {
        Some(p) => p.to_string(),
        None => ckpt
            .names()
            .find_map(|n| n.strip_suffix(".conv1.weight"))
            .ok_or_else(|| Error::Config(format!("{} holds no encoder tensors", path.display())))?
            .to_string(),
    };
    let shape = |name: &str| {
        ckpt.get(&format!("{prefix}.{name}"))
            .map(|t| t.shape())
            .ok_or_else(|| Error::Config(format!("{} is missing {prefix}.{name}", path.display())))
    };
    let (d_in, d_hidden) = shape("conv1.weight")?;
    let (_, d_out) = shape("fc.weight")?;
    let mut enc = EncoderParams::zeros(&EncoderDims {
        d_in,
        d_hidden,
        d_out,
        ..Default::default()
    });
    enc.read_checkpoint(&prefix, &ckpt)?;
    Ok(enc)
}

fn write_creating_parent(path: &PathBuf, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}
