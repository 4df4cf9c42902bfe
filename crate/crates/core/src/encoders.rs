//! Graph and sequence encoders, their Siamese pairings, the interaction
//! predictor and the end-to-end baseline model.
//!
//! Parameters live in [`ParamSet`]s of named tensors. A model is bound to a
//! [`Tape`] once per step, either as trainable leaves or as constants, and
//! the bound form evaluates whole batches. Reusing one bound encoder for
//! both branches of a Siamese pair makes the two branches share storage, so
//! their gradients sum.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AutodiffError, NormalizedAdjacency, Tape, Tensor, Var};
use crate::chemio::{EncodedSequence, MolecularGraph, NODE_INPUT_WIDTH, PADDING, VOCAB_SIZE};
use crate::seed::Rng;

/// Layer sizes shared by every encoder of one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Embedding dimension of every encoder output.
    pub d: usize,
    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    /// Width of the first dense layer after graph pooling.
    pub gcn_dense: usize,
    pub residue_embedding: usize,
    pub filters: usize,
    pub kernel: usize,
    pub sequence_length: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 128,
            gcn_layers: 3,
            gcn_hidden: 128,
            gcn_dense: 256,
            residue_embedding: 32,
            filters: 32,
            kernel: 8,
            sequence_length: 1000,
        }
    }
}

impl EncoderConfig {
    /// Small sizes that train in minutes on a laptop.
    pub fn desk() -> Self {
        Self {
            d: 16,
            gcn_layers: 3,
            gcn_hidden: 16,
            gcn_dense: 32,
            residue_embedding: 16,
            filters: 16,
            kernel: 8,
            sequence_length: 64,
        }
    }

    pub fn validate(&self) -> Result<(), AutodiffError> {
        let fields = [
            ("d", self.d),
            ("gcn_layers", self.gcn_layers),
            ("gcn_hidden", self.gcn_hidden),
            ("gcn_dense", self.gcn_dense),
            ("residue_embedding", self.residue_embedding),
            ("filters", self.filters),
            ("kernel", self.kernel),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(AutodiffError::InvalidArgument(format!("{name} must be positive")));
        }
        if self.sequence_length < self.kernel {
            return Err(AutodiffError::InvalidArgument(format!(
                "sequence_length {} shorter than kernel {}",
                self.sequence_length, self.kernel
            )));
        }
        if self.d < 4 {
            return Err(AutodiffError::InvalidArgument("d must be at least 4".into()));
        }
        Ok(())
    }
}

/// Ordered named tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Leaves on `tape` in set order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Replaces values from `other`, which must have the same names and shapes.
    pub fn assign(&mut self, other: &ParamSet) -> Result<(), AutodiffError> {
        if self.names != other.names
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| !a.same_shape(b))
        {
            return Err(AutodiffError::ShapeMismatch {
                op: "assign",
                detail: "parameter layout differs".into(),
            });
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Node features and normalized adjacency of one compound.
#[derive(Debug, Clone)]
pub struct GraphInput {
    nodes: usize,
    features: Vec<f64>,
    edges: Vec<(usize, usize)>,
    adjacency: Arc<NormalizedAdjacency>,
}

impl GraphInput {
    pub fn new(graph: &MolecularGraph) -> Result<Self, AutodiffError> {
        let edges = graph.edges();
        Ok(Self {
            nodes: graph.atom_count(),
            features: graph.node_inputs(),
            adjacency: Arc::new(NormalizedAdjacency::from_edges(graph.atom_count(), &edges)?),
            edges,
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }
}

/// Residue codes of one sequence as embedding indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceInput {
    indices: Vec<usize>,
}

impl SequenceInput {
    pub fn new(encoded: &EncodedSequence) -> Self {
        Self {
            indices: encoded.indices(),
        }
    }

    pub fn from_indices(indices: Vec<usize>) -> Self {
        Self { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Kipf-style graph convolutions, global max pooling and two dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnEncoder {
    layers: usize,
    params: ParamSet,
}

impl GcnEncoder {
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let mut width = NODE_INPUT_WIDTH;
        for l in 0..config.gcn_layers {
            params.push(format!("conv{l}.weight"), glorot(rng, width, config.gcn_hidden));
            params.push(format!("conv{l}.bias"), Tensor::zeros(&[config.gcn_hidden]));
            width = config.gcn_hidden;
        }
        params.push("fc0.weight", glorot(rng, width, config.gcn_dense));
        params.push("fc0.bias", Tensor::zeros(&[config.gcn_dense]));
        params.push("fc1.weight", glorot(rng, config.gcn_dense, config.d));
        params.push("fc1.bias", Tensor::zeros(&[config.d]));
        Self {
            layers: config.gcn_layers,
            params,
        }
    }

    pub fn from_params(layers: usize, params: ParamSet) -> Self {
        Self { layers, params }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn output_dim(&self) -> usize {
        self.params.tensors().last().map_or(0, Tensor::len)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundGcn {
        BoundGcn {
            layers: self.layers,
            vars: self.params.bind(tape, trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundGcn {
    layers: usize,
    vars: Vec<Var>,
}

impl BoundGcn {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Embeds every graph, giving a `graphs.len() x d` matrix. The graphs
    /// are processed as one disconnected union.
    pub fn encode(&self, tape: &mut Tape, graphs: &[&GraphInput]) -> Result<Var, AutodiffError> {
        if graphs.is_empty() {
            return Err(AutodiffError::InvalidArgument("no graphs to encode".into()));
        }
        let total: usize = graphs.iter().map(|g| g.nodes).sum();
        let mut features = Vec::with_capacity(total * NODE_INPUT_WIDTH);
        let mut ranges = Vec::with_capacity(graphs.len());
        let mut offset = 0;
        let adjacency = if graphs.len() == 1 {
            features.extend_from_slice(&graphs[0].features);
            ranges.push((0..graphs[0].nodes).collect::<Vec<_>>());
            Arc::clone(&graphs[0].adjacency)
        } else {
            let mut edges = Vec::new();
            for g in graphs {
                features.extend_from_slice(&g.features);
                edges.extend(g.edges.iter().map(|&(a, b)| (a + offset, b + offset)));
                ranges.push((offset..offset + g.nodes).collect());
                offset += g.nodes;
            }
            Arc::new(NormalizedAdjacency::from_edges(total, &edges)?)
        };
        let mut h = tape.constant(Tensor::matrix(total, NODE_INPUT_WIDTH, features)?);
        for l in 0..self.layers {
            let agg = tape.neighbor_aggregate(h, &adjacency)?;
            let z = dense(tape, agg, self.vars[2 * l], self.vars[2 * l + 1])?;
            h = tape.relu(z)?;
        }
        let pooled = if graphs.len() == 1 {
            let p = tape.global_max_pool(h)?;
            tape.stack_rows(&[p])?
        } else {
            let mut rows = Vec::with_capacity(graphs.len());
            for range in &ranges {
                let part = tape.gather_rows(h, range)?;
                rows.push(tape.global_max_pool(part)?);
            }
            tape.stack_rows(&rows)?
        };
        let base = 2 * self.layers;
        let f = dense(tape, pooled, self.vars[base], self.vars[base + 1])?;
        let f = tape.relu(f)?;
        dense(tape, f, self.vars[base + 2], self.vars[base + 3])
    }
}

/// Residue embedding, one convolution, global max pooling and a dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnEncoder {
    kernel: usize,
    params: ParamSet,
}

impl CnnEncoder {
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let mut table = glorot(rng, VOCAB_SIZE, config.residue_embedding);
        let pad = usize::from(PADDING);
        for x in &mut table.data_mut()[pad * config.residue_embedding..(pad + 1) * config.residue_embedding] {
            *x = 0.0;
        }
        params.push("embedding", table);
        params.push(
            "conv.weight",
            glorot(rng, config.kernel * config.residue_embedding, config.filters),
        );
        params.push("conv.bias", Tensor::zeros(&[config.filters]));
        params.push("fc.weight", glorot(rng, config.filters, config.d));
        params.push("fc.bias", Tensor::zeros(&[config.d]));
        Self {
            kernel: config.kernel,
            params,
        }
    }

    pub fn from_params(kernel: usize, params: ParamSet) -> Self {
        Self { kernel, params }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn output_dim(&self) -> usize {
        self.params.tensors().last().map_or(0, Tensor::len)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundCnn {
        BoundCnn {
            kernel: self.kernel,
            vars: self.params.bind(tape, trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundCnn {
    kernel: usize,
    vars: Vec<Var>,
}

impl BoundCnn {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Embeds every sequence, giving a `sequences.len() x d` matrix.
    pub fn encode(&self, tape: &mut Tape, sequences: &[&SequenceInput]) -> Result<Var, AutodiffError> {
        if sequences.is_empty() {
            return Err(AutodiffError::InvalidArgument("no sequences to encode".into()));
        }
        let mut pooled = Vec::with_capacity(sequences.len());
        for s in sequences {
            let e = tape.embedding(self.vars[0], &s.indices, Some(usize::from(PADDING)))?;
            let c = tape.conv1d(e, self.vars[1], self.kernel, 1)?;
            let c = tape.add_bias(c, self.vars[2])?;
            let c = tape.relu(c)?;
            pooled.push(tape.global_max_pool(c)?);
        }
        let p = tape.stack_rows(&pooled)?;
        dense(tape, p, self.vars[3], self.vars[4])
    }
}

/// Dense layers with relu between them and a raw final output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    params: ParamSet,
}

impl Mlp {
    pub fn init(widths: &[usize], rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        for (l, w) in widths.windows(2).enumerate() {
            params.push(format!("layer{l}.weight"), glorot(rng, w[0], w[1]));
            params.push(format!("layer{l}.bias"), Tensor::zeros(&[w[1]]));
        }
        Self { params }
    }

    /// Interaction head over an `input`-wide embedding: two halving layers
    /// and a one-unit logit.
    pub fn predictor(input: usize, rng: &mut Rng) -> Self {
        Self::init(&[input, (input / 2).max(1), (input / 4).max(1), 1], rng)
    }

    pub fn from_params(params: ParamSet) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.params.tensors().first().map_or(0, |t| t.dims().0)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        BoundMlp {
            vars: self.params.bind(tape, trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundMlp {
    vars: Vec<Var>,
}

impl BoundMlp {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        let layers = self.vars.len() / 2;
        let mut h = x;
        for l in 0..layers {
            h = dense(tape, h, self.vars[2 * l], self.vars[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Bias-free linear map, used to bring a concatenated pair embedding back
/// to the width of a single-object embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    params: ParamSet,
}

impl Projection {
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        params.push("weight", glorot(rng, input, output));
        Self { params }
    }

    pub fn from_params(params: ParamSet) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Var {
        self.params.bind(tape, trainable)[0]
    }
}

/// Graph encoder, sequence encoder and predictor trained jointly on
/// labeled pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub gcn: GcnEncoder,
    pub cnn: CnnEncoder,
    pub mlp: Mlp,
}

impl Baseline {
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Self {
        let gcn = GcnEncoder::init(config, rng);
        let cnn = CnnEncoder::init(config, rng);
        let mlp = Mlp::predictor(2 * config.d, rng);
        Self { gcn, cnn, mlp }
    }
}

fn rows_of(tape: &Tape, v: Var) -> Vec<Vec<f64>> {
    let t = tape.value(v);
    let (_, n) = t.dims();
    t.data().chunks(n).map(<[f64]>::to_vec).collect()
}

/// Embedding of one compound.
pub fn gcn_encode(graph: &MolecularGraph, encoder: &GcnEncoder) -> Result<Vec<f64>, AutodiffError> {
    let input = GraphInput::new(graph)?;
    let mut tape = Tape::new();
    let z = encoder.bind(&mut tape, false).encode(&mut tape, &[&input])?;
    Ok(tape.value(z).data().to_vec())
}

/// Embedding of one sequence.
pub fn cnn_encode(sequence: &EncodedSequence, encoder: &CnnEncoder) -> Result<Vec<f64>, AutodiffError> {
    let input = SequenceInput::new(sequence);
    let mut tape = Tape::new();
    let z = encoder.bind(&mut tape, false).encode(&mut tape, &[&input])?;
    Ok(tape.value(z).data().to_vec())
}

/// `CNN(a) ⊕ CNN(b)` with one parameter set.
pub fn siamese_sequence_pair(a: &EncodedSequence, b: &EncodedSequence, encoder: &CnnEncoder) -> Result<Vec<f64>, AutodiffError> {
    let (a, b) = (SequenceInput::new(a), SequenceInput::new(b));
    let mut tape = Tape::new();
    let z = encoder.bind(&mut tape, false).encode(&mut tape, &[&a, &b])?;
    Ok(rows_of(&tape, z).concat())
}

/// `GCN(a) ⊕ GCN(b)` with one parameter set.
pub fn siamese_compound_pair(a: &MolecularGraph, b: &MolecularGraph, encoder: &GcnEncoder) -> Result<Vec<f64>, AutodiffError> {
    let (a, b) = (GraphInput::new(a)?, GraphInput::new(b)?);
    let mut tape = Tape::new();
    let z = encoder.bind(&mut tape, false).encode(&mut tape, &[&a, &b])?;
    Ok(rows_of(&tape, z).concat())
}

/// Raw interaction logit from a concatenated view embedding.
pub fn predict_interaction(embedding: &[f64], predictor: &Mlp) -> Result<f64, AutodiffError> {
    if embedding.len() != predictor.input_dim() {
        return Err(AutodiffError::ShapeMismatch {
            op: "predict_interaction",
            detail: format!("input width {} vs {}", embedding.len(), predictor.input_dim()),
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(embedding.to_vec()));
    let y = predictor.bind(&mut tape, false).forward(&mut tape, x)?;
    Ok(tape.value(y).item())
}

/// Records the baseline logits of aligned compound and sequence batches.
pub fn baseline_logits(
    tape: &mut Tape,
    gcn: &BoundGcn,
    cnn: &BoundCnn,
    mlp: &BoundMlp,
    graphs: &[&GraphInput],
    sequences: &[&SequenceInput],
) -> Result<Var, AutodiffError> {
    let zc = gcn.encode(tape, graphs)?;
    let zs = cnn.encode(tape, sequences)?;
    let x = tape.concat(&[zc, zs])?;
    mlp.forward(tape, x)
}

/// Baseline logit for one compound and one sequence.
pub fn baseline_forward(graph: &MolecularGraph, sequence: &EncodedSequence, model: &Baseline) -> Result<f64, AutodiffError> {
    let g = GraphInput::new(graph)?;
    let s = SequenceInput::new(sequence);
    let mut tape = Tape::new();
    let gcn = model.gcn.bind(&mut tape, false);
    let cnn = model.cnn.bind(&mut tape, false);
    let mlp = model.mlp.bind(&mut tape, false);
    let y = baseline_logits(&mut tape, &gcn, &cnn, &mlp, &[&g], &[&s])?;
    Ok(tape.value(y).item())
}
