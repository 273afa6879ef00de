//! Per-layer discarded information. Learns per-node Gaussian noise scales
//! that are as large as possible while keeping a layer's hidden state close
//! to its clean value, then reports the noise entropy `H(G|Z)`.

use std::f64::consts::{E, PI};
use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, Layer};
use crate::error::{Error, Result};
use crate::graph::{propagation_matrix, Graph};
use crate::rng::Rng;
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor};

/// Entropy of a unit-variance Gaussian per dimension: `0.5 ln(2 pi e)`.
pub fn gaussian_entropy_constant() -> f64 {
    0.5 * (2.0 * PI * E).ln()
}

/// `sum_i d (ln sigma_i + 0.5 ln(2 pi e))`, in nats.
pub fn gaussian_entropy(sigma: &[f64], d: usize) -> f64 {
    let c = gaussian_entropy_constant();
    sigma.iter().map(|s| d as f64 * (s.ln() + c)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Weight of the entropy reward against the reconstruction penalty.
    pub entropy_weight: f64,
    pub mc_samples: usize,
    pub steps: usize,
    pub lr: f64,
    pub sigma_init: f64,
    pub sigma_cap: f64,
    pub adam: AdamConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            entropy_weight: 0.1,
            mc_samples: 8,
            steps: 500,
            lr: 0.01,
            sigma_init: 0.1,
            sigma_cap: 10.0,
            adam: AdamConfig::default(),
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.entropy_weight.is_finite() && self.entropy_weight > 0.0) {
            return Err(Error::Config(format!(
                "entropy_weight must be positive, got {}",
                self.entropy_weight
            )));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if !(self.sigma_init > 0.0
            && self.sigma_init <= self.sigma_cap
            && self.sigma_cap.is_finite())
        {
            return Err(Error::Config(format!(
                "need 0 < sigma_init <= sigma_cap, got {} and {}",
                self.sigma_init, self.sigma_cap
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "probe lr must be non-negative, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Per-node noise scales `sigma_i = exp(rho_i)`, with `rho` clamped so that
/// `sigma_i <= cap`.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaField {
    rho: Tensor,
    cap: f64,
}

impl SigmaField {
    pub fn new(nodes: usize, sigma_init: f64, cap: f64) -> Self {
        let mut f = Self {
            rho: Tensor::filled(nodes, 1, sigma_init.ln()),
            cap,
        };
        f.clamp();
        f
    }

    pub fn from_rho(rho: Tensor, cap: f64) -> Result<Self> {
        if rho.cols() != 1 {
            return Err(Error::dim(
                "sigma_field",
                format!("rho must be a column, got {:?}", rho.shape()),
            ));
        }
        let mut f = Self { rho, cap };
        f.clamp();
        Ok(f)
    }

    pub fn rho(&self) -> &Tensor {
        &self.rho
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho
            .data()
            .iter()
            .map(|r| r.exp().min(self.cap))
            .collect()
    }

    fn clamp(&mut self) {
        let top = self.cap.ln();
        self.rho.data_mut().iter_mut().for_each(|r| *r = r.min(top));
    }
}

/// Monte-Carlo value of the probe objective for fixed standard-normal draws.
#[derive(Clone, Debug)]
pub struct ProbeObjective {
    /// Mean squared reconstruction error over the draws.
    pub recon: f64,
    pub entropy: f64,
    /// `recon - entropy_weight * entropy`.
    pub loss: f64,
    /// Gradient of `loss` with respect to `rho`.
    pub grad_rho: Tensor,
}

/// Clean hidden state of one layer.
pub fn layer_state(encoder: &EncoderParams, g: &Graph, layer: Layer) -> Result<Tensor> {
    let outs = encoder.layer_outputs(g)?;
    Ok(outs[layer_index(layer)].clone())
}

fn layer_index(layer: Layer) -> usize {
    match layer {
        Layer::Gnn1 => 0,
        Layer::Gnn2 => 1,
        Layer::Fc => 2,
    }
}

/// Evaluates the objective with inputs `X + sigma * u` for every `u` in
/// `draws` (each `n x d`), differentiating through the reparameterization.
pub fn probe_objective(
    encoder: &EncoderParams,
    g: &Graph,
    layer: Layer,
    clean: &Tensor,
    rho: &Tensor,
    draws: &[Tensor],
    entropy_weight: f64,
) -> Result<ProbeObjective> {
    let (n, d) = (g.num_nodes(), g.feature_dim());
    if rho.shape() != (n, 1) {
        return Err(Error::dim(
            "probe",
            format!("rho {:?} for {n} nodes", rho.shape()),
        ));
    }
    if draws.is_empty() {
        return Err(Error::Contract(
            "probe needs at least one noise draw".into(),
        ));
    }
    let mut tape = Tape::new();
    let enc = encoder.attach(&mut tape, false);
    let adj = tape.constant(propagation_matrix(g));
    let x = tape.constant(g.features().clone());
    let z = tape.constant(clean.clone());
    let r = tape.param(rho.clone());
    let sigma = tape.exp(r)?;
    let mut recon = None;
    for u in draws {
        if u.shape() != (n, d) {
            return Err(Error::dim(
                "probe",
                format!("noise draw {:?} for {:?}", u.shape(), (n, d)),
            ));
        }
        let u = tape.constant(u.clone());
        let eps = tape.scale_rows(u, sigma)?;
        let noisy = tape.add(x, eps)?;
        let out = enc.encode(&mut tape, adj, noisy)?.layer(layer);
        let diff = tape.sub(out, z)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq)?;
        recon = Some(match recon {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let recon = tape.scale(recon.expect("draws is non-empty"), 1.0 / draws.len() as f64)?;
    let rho_sum = tape.sum(r)?;
    let penalty = tape.scale(rho_sum, entropy_weight * d as f64)?;
    let loss = tape.sub(recon, penalty)?;
    tape.backward(loss)?;
    let recon_value = tape.value(recon).item();
    let entropy = d as f64 * (rho.sum() + n as f64 * gaussian_entropy_constant());
    Ok(ProbeObjective {
        recon: recon_value,
        entropy,
        loss: recon_value - entropy_weight * entropy,
        grad_rho: tape.take_grad(r).expect("rho is a parameter"),
    })
}

fn draw_noise(n: usize, d: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(n, d, |_, _| StandardNormal.sample(rng))
}

/// Result of probing one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub layer: Layer,
    /// `H(G|Z)` in nats, from `sigma`.
    pub entropy: f64,
    pub sigma: Vec<f64>,
    /// Reconstruction term at the final step.
    pub recon: f64,
    pub entropy_weight: f64,
    pub steps: usize,
    /// Objective value at every step.
    pub losses: Vec<f64>,
}

/// Optimizes the noise scales for one layer with Adam.
pub fn probe_layer(
    encoder: &EncoderParams,
    g: &Graph,
    layer: Layer,
    cfg: &ProbeConfig,
    rng: &mut Rng,
) -> Result<LayerReport> {
    cfg.validate()?;
    if g.feature_dim() != encoder.dims().d_in {
        return Err(Error::dim(
            "probe",
            format!(
                "graph has {} features, encoder expects {}",
                g.feature_dim(),
                encoder.dims().d_in
            ),
        ));
    }
    let (n, d) = (g.num_nodes(), g.feature_dim());
    let clean = layer_state(encoder, g, layer)?;
    let mut field = SigmaField::new(n, cfg.sigma_init, cfg.sigma_cap);
    let mut adam = AdamState::new([field.rho()], cfg.adam);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut recon = f64::NAN;
    for _ in 0..cfg.steps {
        let draws: Vec<Tensor> = (0..cfg.mc_samples).map(|_| draw_noise(n, d, rng)).collect();
        let obj = probe_objective(
            encoder,
            g,
            layer,
            &clean,
            field.rho(),
            &draws,
            cfg.entropy_weight,
        )?;
        losses.push(obj.loss);
        recon = obj.recon;
        adam.step(&mut [&mut field.rho], vec![Some(obj.grad_rho)], cfg.lr)?;
        field.clamp();
    }
    let sigma = field.sigma();
    Ok(LayerReport {
        layer,
        entropy: gaussian_entropy(&sigma, d),
        sigma,
        recon,
        entropy_weight: cfg.entropy_weight,
        steps: cfg.steps,
        losses,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfoProbeReport {
    pub layers: Vec<LayerReport>,
}

impl InfoProbeReport {
    /// `layer,H,recon,entropy_weight,steps` with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,H,recon,entropy_weight,steps\n");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                l.layer, l.entropy, l.recon, l.entropy_weight, l.steps
            );
        }
        out
    }
}

/// Probes GNN-1, GNN-2 and FC in order.
pub fn probe_model(
    encoder: &EncoderParams,
    g: &Graph,
    cfg: &ProbeConfig,
    rng: &mut Rng,
) -> Result<InfoProbeReport> {
    let layers = Layer::ALL
        .iter()
        .map(|&l| probe_layer(encoder, g, l, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(InfoProbeReport { layers })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDelta {
    pub layer: Layer,
    pub h_a: f64,
    pub h_b: f64,
    /// `h_a - h_b`.
    pub delta: f64,
}

/// Per-layer differences of discarded information between two reports.
pub fn compare_reports(a: &InfoProbeReport, b: &InfoProbeReport) -> Result<Vec<LayerDelta>> {
    let la: Vec<Layer> = a.layers.iter().map(|l| l.layer).collect();
    let lb: Vec<Layer> = b.layers.iter().map(|l| l.layer).collect();
    if la != lb {
        return Err(Error::Contract(format!(
            "reports cover different layers: {la:?} vs {lb:?}"
        )));
    }
    if let Some((x, _)) = a
        .layers
        .iter()
        .zip(&b.layers)
        .find(|(x, y)| x.entropy_weight != y.entropy_weight)
    {
        return Err(Error::Contract(format!(
            "layer {} was probed with different entropy weights",
            x.layer
        )));
    }
    Ok(a.layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| LayerDelta {
            layer: x.layer,
            h_a: x.entropy,
            h_b: y.entropy,
            delta: x.entropy - y.entropy,
        })
        .collect())
}

/// `layer,H_a,H_b,delta` with a header.
pub fn comparison_csv(deltas: &[LayerDelta]) -> String {
    let mut out = String::from("layer,H_a,H_b,delta\n");
    for d in deltas {
        let _ = writeln!(out, "{},{},{},{}", d.layer, d.h_a, d.h_b, d.delta);
    }
    out
}
