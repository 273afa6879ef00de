//! GCN backbone (two graph convolutions and one FC layer), mean readout, and
//! the online/target projection heads.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{propagation_matrix, Graph};
use crate::rng::Rng;
use crate::tensor::{Checkpoint, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderDims {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub d_proj: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            d_in: 0,
            d_hidden: 64,
            d_out: 64,
            d_proj: 32,
        }
    }
}

/// A fixed, named list of tensors that an optimizer or checkpoint can walk.
pub trait ParamSet {
    fn named(&self) -> Vec<(&'static str, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    fn content_hash(&self) -> u64 {
        Tensor::content_hash(&self.tensors())
    }

    fn write_checkpoint(&self, prefix: &str, ckpt: &mut Checkpoint) {
        for (name, t) in self.named() {
            ckpt.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    /// Overwrites every tensor from `ckpt`, requiring identical shapes.
    fn read_checkpoint(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        let names: Vec<(String, (usize, usize))> = self
            .named()
            .into_iter()
            .map(|(n, t)| (format!("{prefix}.{n}"), t.shape()))
            .collect();
        for ((name, shape), slot) in names.into_iter().zip(self.tensors_mut()) {
            *slot = ckpt.require(&name, shape)?.clone();
        }
        Ok(())
    }

    /// `self <- tau * self + (1 - tau) * other`, coordinate-wise.
    fn ema_from(&mut self, other: &Self, tau: f64)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.data_mut().iter_mut().zip(s.data()) {
                *d = tau * *d + (1.0 - tau) * v;
            }
        }
    }
}

/// `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (d_in + d_out).max(1) as f64).sqrt();
        Self {
            weight: Tensor::from_fn(d_in, d_out, |_, _| rng.random_range(-limit..=limit)),
            bias: Tensor::zeros(1, d_out),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(d_in, d_out),
            bias: Tensor::zeros(1, d_out),
        }
    }

    /// Rectangular identity weights: input dim `i` feeds output dim `i`.
    pub fn identity(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::from_fn(d_in, d_out, |r, c| if r == c { 1.0 } else { 0.0 }),
            bias: Tensor::zeros(1, d_out),
        }
    }

    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> AffineVars {
        AffineVars {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub weight: Var,
    pub bias: Var,
}

impl AffineVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add_bias(xw, self.bias)
    }

    /// `adj (x W) + b`, multiplying in whichever order is cheaper.
    pub fn graph_conv(&self, tape: &mut Tape, adj: Var, x: Var) -> Result<Var> {
        let (d_in, d_out) = tape.value(self.weight).shape();
        let agg = if d_in > d_out {
            let xw = tape.matmul(x, self.weight)?;
            tape.matmul(adj, xw)?
        } else {
            let ax = tape.matmul(adj, x)?;
            tape.matmul(ax, self.weight)?
        };
        tape.add_bias(agg, self.bias)
    }
}

/// Weights of the two graph convolutions and the FC output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub conv1: Affine,
    pub conv2: Affine,
    pub fc: Affine,
}

impl EncoderParams {
    pub fn init(dims: &EncoderDims, rng: &mut Rng) -> Self {
        Self {
            conv1: Affine::glorot(dims.d_in, dims.d_hidden, rng),
            conv2: Affine::glorot(dims.d_hidden, dims.d_hidden, rng),
            fc: Affine::glorot(dims.d_hidden, dims.d_out, rng),
        }
    }

    pub fn zeros(dims: &EncoderDims) -> Self {
        Self {
            conv1: Affine::zeros(dims.d_in, dims.d_hidden),
            conv2: Affine::zeros(dims.d_hidden, dims.d_hidden),
            fc: Affine::zeros(dims.d_hidden, dims.d_out),
        }
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            d_in: self.conv1.weight.rows(),
            d_hidden: self.conv1.weight.cols(),
            d_out: self.fc.weight.cols(),
            d_proj: EncoderDims::default().d_proj,
        }
    }

    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        EncoderVars {
            conv1: self.conv1.attach(tape, trainable),
            conv2: self.conv2.attach(tape, trainable),
            fc: self.fc.attach(tape, trainable),
        }
    }

    /// Forward pass on a plain graph, returning every layer's output.
    pub fn layer_outputs(&self, g: &Graph) -> Result<[Tensor; 3]> {
        let mut tape = Tape::new();
        let vars = self.attach(&mut tape, false);
        let adj = tape.constant(propagation_matrix(g));
        let x = tape.constant(g.features().clone());
        let trace = vars.encode(&mut tape, adj, x)?;
        Ok([
            tape.value(trace.gnn1).clone(),
            tape.value(trace.gnn2).clone(),
            tape.value(trace.out).clone(),
        ])
    }

    /// Node embeddings (output of the FC layer).
    pub fn embed(&self, g: &Graph) -> Result<Tensor> {
        let [_, _, out] = self.layer_outputs(g)?;
        Ok(out)
    }
}

impl ParamSet for EncoderParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv1.weight", &self.conv1.weight),
            ("conv1.bias", &self.conv1.bias),
            ("conv2.weight", &self.conv2.weight),
            ("conv2.bias", &self.conv2.bias),
            ("fc.weight", &self.fc.weight),
            ("fc.bias", &self.fc.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.fc.weight,
            &mut self.fc.bias,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub conv1: AffineVars,
    pub conv2: AffineVars,
    pub fc: AffineVars,
}

/// Hidden states of one encoder forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderTrace {
    pub gnn1: Var,
    pub gnn2: Var,
    pub out: Var,
}

impl EncoderTrace {
    pub fn layer(&self, layer: Layer) -> Var {
        match layer {
            Layer::Gnn1 => self.gnn1,
            Layer::Gnn2 => self.gnn2,
            Layer::Fc => self.out,
        }
    }
}

impl EncoderVars {
    /// Same order as [`ParamSet::tensors`] on [`EncoderParams`].
    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.conv1.weight,
            self.conv1.bias,
            self.conv2.weight,
            self.conv2.bias,
            self.fc.weight,
            self.fc.bias,
        ]
    }

    /// `FC(ReLU(adj ReLU(adj x W1 + b1) W2 + b2))`.
    pub fn encode(&self, tape: &mut Tape, adj: Var, x: Var) -> Result<EncoderTrace> {
        let (n, d) = tape.value(x).shape();
        let d_in = tape.value(self.conv1.weight).rows();
        if d != d_in {
            return Err(Error::dim(
                "encode_nodes",
                format!("features have {d} columns, encoder expects {d_in}"),
            ));
        }
        if tape.value(adj).shape() != (n, n) {
            return Err(Error::dim(
                "encode_nodes",
                format!(
                    "propagation matrix {:?} for {n} nodes",
                    tape.value(adj).shape()
                ),
            ));
        }
        let c1 = self.conv1.graph_conv(tape, adj, x)?;
        let gnn1 = tape.relu(c1)?;
        let c2 = self.conv2.graph_conv(tape, adj, gnn1)?;
        let gnn2 = tape.relu(c2)?;
        let out = self.fc.forward(tape, gnn2)?;
        Ok(EncoderTrace { gnn1, gnn2, out })
    }
}

/// Records the encoder forward pass for a graph (or augmented view's graph).
pub fn encode_nodes(tape: &mut Tape, vars: &EncoderVars, g: &Graph) -> Result<EncoderTrace> {
    let adj = tape.constant(propagation_matrix(g));
    let x = tape.constant(g.features().clone());
    vars.encode(tape, adj, x)
}

/// Mean over node rows, giving a `1 x d` graph embedding.
pub fn readout(tape: &mut Tape, node_embeddings: Var) -> Result<Var> {
    if tape.value(node_embeddings).rows() == 0 {
        return Err(Error::degenerate("readout", "no node embeddings"));
    }
    tape.mean_rows(node_embeddings)
}

/// Row `i` averages the nodes `offsets[i]..offsets[i] + sizes[i]` of a disjoint union.
pub fn pooling_matrix(offsets: &[usize], sizes: &[usize], total: usize) -> Result<Tensor> {
    let mut p = Tensor::zeros(offsets.len(), total);
    for (i, (&o, &s)) in offsets.iter().zip(sizes).enumerate() {
        if s == 0 {
            return Err(Error::degenerate(
                "readout",
                format!("graph {i} has no nodes"),
            ));
        }
        for j in o..o + s {
            p.set(i, j, 1.0 / s as f64);
        }
    }
    Ok(p)
}

/// Layers whose hidden state can be inspected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layer {
    Gnn1,
    Gnn2,
    Fc,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::Gnn1, Layer::Gnn2, Layer::Fc];
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layer::Gnn1 => "GNN-1",
            Layer::Gnn2 => "GNN-2",
            Layer::Fc => "FC",
        })
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "GNN-1" => Ok(Layer::Gnn1),
            "GNN-2" => Ok(Layer::Gnn2),
            "FC" => Ok(Layer::Fc),
            other => Err(Error::Contract(format!("unknown layer {other:?}"))),
        }
    }
}

/// Two affine layers with an optional ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct OnlineHead {
    pub projector: Affine,
    pub predictor: Affine,
    pub nonlinearity: bool,
}

impl OnlineHead {
    pub fn init(dims: &EncoderDims, nonlinearity: bool, rng: &mut Rng) -> Self {
        Self {
            projector: Affine::glorot(dims.d_out, dims.d_proj, rng),
            predictor: Affine::glorot(dims.d_proj, dims.d_proj, rng),
            nonlinearity,
        }
    }

    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> OnlineHeadVars {
        OnlineHeadVars {
            projector: self.projector.attach(tape, trainable),
            predictor: self.predictor.attach(tape, trainable),
            nonlinearity: self.nonlinearity,
        }
    }

    /// The target-style single layer made from this head's projector.
    pub fn to_target(&self) -> TargetHead {
        TargetHead {
            projector: self.projector.clone(),
        }
    }
}

impl ParamSet for OnlineHead {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("projector.weight", &self.projector.weight),
            ("projector.bias", &self.projector.bias),
            ("predictor.weight", &self.predictor.weight),
            ("predictor.bias", &self.predictor.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.projector.weight,
            &mut self.projector.bias,
            &mut self.predictor.weight,
            &mut self.predictor.bias,
        ]
    }
}

/// A single affine projection layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetHead {
    pub projector: Affine,
}

impl TargetHead {
    pub fn init(dims: &EncoderDims, rng: &mut Rng) -> Self {
        Self {
            projector: Affine::glorot(dims.d_out, dims.d_proj, rng),
        }
    }

    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        HeadVars::Target(self.projector.attach(tape, trainable))
    }

    /// EMA towards the projector of an online head.
    pub fn ema_from_online(&mut self, online: &OnlineHead, tau: f64) {
        for (dst, src) in [
            (&mut self.projector.weight, &online.projector.weight),
            (&mut self.projector.bias, &online.projector.bias),
        ] {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = tau * *d + (1.0 - tau) * s;
            }
        }
    }
}

impl ParamSet for TargetHead {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("projector.weight", &self.projector.weight),
            ("projector.bias", &self.projector.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.projector.weight, &mut self.projector.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OnlineHeadVars {
    pub projector: AffineVars,
    pub predictor: AffineVars,
    pub nonlinearity: bool,
}

impl OnlineHeadVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.projector.weight,
            self.projector.bias,
            self.predictor.weight,
            self.predictor.bias,
        ]
    }
}

/// Which branch a head belongs to, with its recorded weights.
#[derive(Clone, Copy, Debug)]
pub enum HeadVars {
    Online(OnlineHeadVars),
    Target(AffineVars),
}

/// Applies the online (two-layer) or target (one-layer) projection head.
pub fn project(tape: &mut Tape, head: &HeadVars, emb: Var) -> Result<Var> {
    let expected = match head {
        HeadVars::Online(h) => tape.value(h.projector.weight).rows(),
        HeadVars::Target(p) => tape.value(p.weight).rows(),
    };
    let got = tape.value(emb).cols();
    if got != expected {
        return Err(Error::dim(
            "project",
            format!("embedding has {got} columns, head expects {expected}"),
        ));
    }
    match head {
        HeadVars::Online(h) => {
            let mut z = h.projector.forward(tape, emb)?;
            if h.nonlinearity {
                z = tape.relu(z)?;
            }
            h.predictor.forward(tape, z)
        }
        HeadVars::Target(p) => p.forward(tape, emb),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn dims(d_in: usize) -> EncoderDims {
        EncoderDims {
            d_in,
            d_hidden: 6,
            d_out: 5,
            d_proj: 4,
        }
    }

    #[test]
    fn single_node_is_plain_mlp() {
        let p = EncoderParams::init(&dims(3), &mut seeded(1, 0));
        let x = Tensor::from_rows(&[[0.3, -1.2, 2.0]]);
        let g = Graph::new(1, [], x.clone()).unwrap();
        let got = p.embed(&g).unwrap();

        let relu = |t: Tensor| t.map(|v| v.max(0.0));
        let h1 = relu(x.matmul(&p.conv1.weight).unwrap());
        let h2 = relu(h1.matmul(&p.conv2.weight).unwrap());
        let want = h2.matmul(&p.fc.weight).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn zero_weights_zero_output() {
        let p = EncoderParams::zeros(&dims(3));
        let g = Graph::new(3, [(0, 1)], Tensor::filled(3, 3, 1.0)).unwrap();
        assert_eq!(p.embed(&g).unwrap(), Tensor::zeros(3, 5));
    }

    #[test]
    fn dimension_mismatch() {
        let p = EncoderParams::init(&dims(4), &mut seeded(0, 0));
        let g = Graph::new(2, [], Tensor::zeros(2, 3)).unwrap();
        assert!(matches!(p.embed(&g), Err(Error::Dimension { .. })));
    }

    #[test]
    fn readout_means() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let r = readout(&mut t, x).unwrap();
        assert_eq!(t.value(r), &Tensor::from_rows(&[[0.5, 0.5]]));
        let empty = t.constant(Tensor::zeros(0, 2));
        assert!(readout(&mut t, empty).is_err());
    }

    #[test]
    fn identity_target_head_passes_through() {
        let head = TargetHead {
            projector: Affine::identity(3, 3),
        };
        let mut t = Tape::new();
        let vars = head.attach(&mut t, false);
        let emb = t.constant(Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, 9.0]]));
        let out = project(&mut t, &vars, emb).unwrap();
        assert_eq!(t.value(out), t.value(emb));
    }

    #[test]
    fn heads_differ_and_shapes_hold() {
        let d = dims(3);
        let mut rng = seeded(2, 0);
        let online = OnlineHead::init(&d, true, &mut rng);
        let target = TargetHead::init(&d, &mut rng);
        let mut t = Tape::new();
        let emb = t.constant(Tensor::from_fn(7, 5, |r, c| (r as f64 - c as f64) * 0.3));
        let ov = HeadVars::Online(online.attach(&mut t, false));
        let tv = target.attach(&mut t, false);
        let zo = project(&mut t, &ov, emb).unwrap();
        let zt = project(&mut t, &tv, emb).unwrap();
        assert_eq!(t.value(zo).shape(), (7, 4));
        assert_eq!(t.value(zt).shape(), (7, 4));
        assert!(t.value(zo).max_abs_diff(t.value(zt)) > 1e-3);

        let bad = t.constant(Tensor::zeros(2, 3));
        assert!(project(&mut t, &tv, bad).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = EncoderParams::init(&dims(3), &mut seeded(5, 0));
        let mut ckpt = Checkpoint::new();
        p.write_checkpoint("student", &mut ckpt);
        let mut q = EncoderParams::zeros(&dims(3));
        q.read_checkpoint("student", &ckpt).unwrap();
        assert_eq!(p, q);
        let mut wrong = EncoderParams::zeros(&dims(4));
        assert!(matches!(
            wrong.read_checkpoint("student", &ckpt),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn layer_names() {
        for l in Layer::ALL {
            assert_eq!(l.to_string().parse::<Layer>().unwrap(), l);
        }
        assert!("GNN-3".parse::<Layer>().is_err());
    }
}
