//! Two-phase training: contrastive pre-training of the encoders over
//! congruent views, then a predictor trained on frozen embeddings. Also
//! holds the end-to-end baseline, the optimizer, the checkpoint format and
//! the training log.

mod adam;
mod checkpoint;
mod phase1;
mod phase2;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::chemio::{encode_fasta, parse_smiles, ChemError};
use crate::contrastive::{Denominator, DEFAULT_TAU};
use crate::datamodel::{CompoundId, SequenceId};
use crate::encoders::{
    BoundCnn, BoundGcn, BoundMlp, CnnEncoder, GcnEncoder, GraphInput, Mlp, ParamSet, Projection,
    SequenceInput,
};
use crate::stratify::StratifyError;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointMeta, ModelKind, ParamGroup, FORMAT_VERSION, MAGIC};
pub use phase1::{train_contrastive, ContrastiveMode, ViewInputs};
pub use phase2::{score_pairs, train_baseline, train_predictor, FeatureLayout, FeatureSlot, Phase2Hook, Side};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch in parameter group '{group}'")]
    ChecksumMismatch { group: String },
    #[error("malformed checkpoint: {0}")]
    Corrupt(String),
    #[error("batch size {requested} exceeds the {eligible} eligible keys of phase {phase}")]
    BatchTooLarge {
        phase: String,
        requested: usize,
        eligible: usize,
    },
    #[error("phase {phase}, epoch {epoch}, batch {batch}: {source}")]
    NonFinite {
        phase: String,
        epoch: usize,
        batch: usize,
        #[source]
        source: AutodiffError,
    },
    #[error("frozen parameter group '{group}' changed during predictor training")]
    FrozenViolation { group: String },
    #[error("too few examples: {0}")]
    TooFewExamples(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint has no parameter group '{0}'")]
    MissingGroup(String),
    #[error("unknown object '{0}'")]
    UnknownObject(String),
    #[error("object '{id}': {source}")]
    Chem {
        id: String,
        #[source]
        source: ChemError,
    },
    #[error(transparent)]
    Stratify(#[from] StratifyError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl PipelineError {
    /// True for failures caused by non-finite or degenerate numerics.
    pub fn is_numeric(&self) -> bool {
        matches!(self, PipelineError::NonFinite { .. } | PipelineError::Autodiff(_))
    }
}

/// Optimization settings shared by both phases and the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub tau: f64,
    pub denominator: Denominator,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub baseline_epochs: usize,
    /// Contrastive batch size `k`.
    pub batch_size: usize,
    /// Mini-batch size of predictor and baseline training.
    pub predictor_batch: usize,
    pub adam: AdamConfig,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub negative_ratio: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            denominator: Denominator::ExcludePositive,
            phase1_epochs: 700,
            phase2_epochs: 200,
            baseline_epochs: 200,
            batch_size: 32,
            predictor_batch: 64,
            adam: AdamConfig::default(),
            patience: 10,
            negative_ratio: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Budget for the small planted experiments.
    pub fn desk() -> Self {
        Self {
            phase1_epochs: 200,
            phase2_epochs: 100,
            baseline_epochs: 100,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(PipelineError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_size < 2 {
            return Err(PipelineError::InvalidConfig("batch_size must be at least 2".into()));
        }
        if self.predictor_batch == 0 || self.negative_ratio == 0 || self.patience == 0 {
            return Err(PipelineError::InvalidConfig(
                "predictor_batch, negative_ratio and patience must be positive".into(),
            ));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(PipelineError::InvalidConfig(format!("invalid optimizer settings {a:?}")));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn push(&mut self, phase: &str, epoch: usize, loss: f64, val_loss: Option<f64>) {
        self.records.push(LogRecord {
            phase: phase.to_string(),
            epoch,
            loss,
            val_loss,
        });
    }

    /// Per-epoch losses of one phase.
    pub fn losses(&self, phase: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.phase == phase).map(|r| r.loss).collect()
    }

    pub fn phases(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.phase) {
                seen.push(r.phase.clone());
            }
        }
        seen
    }

    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_json_lines().as_bytes()).into()
    }

    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_json_lines()).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Featurized compounds and sequences, keyed by id.
#[derive(Debug, Clone)]
pub struct Objects {
    graphs: BTreeMap<CompoundId, GraphInput>,
    sequences: BTreeMap<SequenceId, SequenceInput>,
}

impl Objects {
    pub fn build(
        compounds: &BTreeMap<CompoundId, String>,
        sequences: &BTreeMap<SequenceId, String>,
        sequence_length: usize,
    ) -> Result<Self, PipelineError> {
        let graphs = compounds
            .iter()
            .map(|(id, smiles)| {
                let graph = parse_smiles(smiles).map_err(|source| PipelineError::Chem {
                    id: id.to_string(),
                    source,
                })?;
                Ok((id.clone(), GraphInput::new(&graph)?))
            })
            .collect::<Result<_, PipelineError>>()?;
        let sequences = sequences
            .iter()
            .map(|(id, residues)| {
                let encoded = encode_fasta(residues, sequence_length).map_err(|source| PipelineError::Chem {
                    id: id.to_string(),
                    source,
                })?;
                Ok((id.clone(), SequenceInput::new(&encoded)))
            })
            .collect::<Result<_, PipelineError>>()?;
        Ok(Self { graphs, sequences })
    }

    pub fn graph(&self, id: &CompoundId) -> Result<&GraphInput, PipelineError> {
        self.graphs.get(id).ok_or_else(|| PipelineError::UnknownObject(id.to_string()))
    }

    pub fn sequence(&self, id: &SequenceId) -> Result<&SequenceInput, PipelineError> {
        self.sequences.get(id).ok_or_else(|| PipelineError::UnknownObject(id.to_string()))
    }

    pub fn compound_ids(&self) -> impl Iterator<Item = &CompoundId> {
        self.graphs.keys()
    }

    pub fn sequence_ids(&self) -> impl Iterator<Item = &SequenceId> {
        self.sequences.keys()
    }
}

/// A trainable component, recognized from its group name prefix.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Module {
    Gcn(GcnEncoder),
    Cnn(CnnEncoder),
    Head(Projection),
    Mlp(Mlp),
}

pub(crate) enum Bound {
    Gcn(BoundGcn),
    Cnn(BoundCnn),
    Head(Var),
    Mlp(BoundMlp),
}

impl Module {
    pub(crate) fn from_group(name: &str, params: ParamSet) -> Result<Self, PipelineError> {
        let bad = || PipelineError::Corrupt(format!("group '{name}' has an unexpected layout"));
        if name.starts_with("gcn") {
            if params.len() < 4 || params.len() % 2 != 0 {
                return Err(bad());
            }
            Ok(Module::Gcn(GcnEncoder::from_params((params.len() - 4) / 2, params)))
        } else if name.starts_with("cnn") {
            let (Some(table), Some(conv)) = (params.get("embedding"), params.get("conv.weight")) else {
                return Err(bad());
            };
            let width = table.dims().1;
            if width == 0 || conv.dims().0 % width != 0 {
                return Err(bad());
            }
            let kernel = conv.dims().0 / width;
            Ok(Module::Cnn(CnnEncoder::from_params(kernel, params)))
        } else if name.starts_with("head") {
            Ok(Module::Head(Projection::from_params(params)))
        } else if name.starts_with("predictor") || name.starts_with("mlp") {
            Ok(Module::Mlp(Mlp::from_params(params)))
        } else {
            Err(bad())
        }
    }

    pub(crate) fn params(&self) -> &ParamSet {
        match self {
            Module::Gcn(m) => m.params(),
            Module::Cnn(m) => m.params(),
            Module::Head(m) => m.params(),
            Module::Mlp(m) => m.params(),
        }
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Module::Gcn(m) => m.params_mut(),
            Module::Cnn(m) => m.params_mut(),
            Module::Head(m) => m.params_mut(),
            Module::Mlp(m) => m.params_mut(),
        }
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        match self {
            Module::Gcn(m) => Bound::Gcn(m.bind(tape, trainable)),
            Module::Cnn(m) => Bound::Cnn(m.bind(tape, trainable)),
            Module::Head(m) => Bound::Head(m.bind(tape, trainable)),
            Module::Mlp(m) => Bound::Mlp(m.bind(tape, trainable)),
        }
    }
}

impl Bound {
    pub(crate) fn vars(&self) -> Vec<Var> {
        match self {
            Bound::Gcn(b) => b.vars().to_vec(),
            Bound::Cnn(b) => b.vars().to_vec(),
            Bound::Head(v) => vec![*v],
            Bound::Mlp(b) => b.vars().to_vec(),
        }
    }

    pub(crate) fn gcn(&self) -> &BoundGcn {
        match self {
            Bound::Gcn(b) => b,
            _ => panic!("module is not a graph encoder"),
        }
    }

    pub(crate) fn cnn(&self) -> &BoundCnn {
        match self {
            Bound::Cnn(b) => b,
            _ => panic!("module is not a sequence encoder"),
        }
    }

    pub(crate) fn head(&self) -> Var {
        match self {
            Bound::Head(v) => *v,
            _ => panic!("module is not a projection head"),
        }
    }

    pub(crate) fn mlp(&self) -> &BoundMlp {
        match self {
            Bound::Mlp(b) => b,
            _ => panic!("module is not a predictor"),
        }
    }
}

/// Distinct items in first-appearance order and each item's position in
/// that list.
pub(crate) fn dedup<K: Ord + Clone>(items: &[K]) -> (Vec<K>, Vec<usize>) {
    let mut seen: BTreeMap<K, usize> = BTreeMap::new();
    let mut unique = Vec::new();
    let index = items
        .iter()
        .map(|k| {
            *seen.entry(k.clone()).or_insert_with(|| {
                unique.push(k.clone());
                unique.len() - 1
            })
        })
        .collect();
    (unique, index)
}

/// Embeds `ids` with the graph encoder, each distinct compound once.
pub(crate) fn encode_compounds(
    tape: &mut Tape,
    encoder: &BoundGcn,
    objects: &Objects,
    ids: &[CompoundId],
) -> Result<Var, PipelineError> {
    let (unique, index) = dedup(ids);
    let inputs = unique.iter().map(|id| objects.graph(id)).collect::<Result<Vec<_>, _>>()?;
    let z = encoder.encode(tape, &inputs)?;
    if unique.len() == ids.len() {
        return Ok(z);
    }
    Ok(tape.gather_rows(z, &index)?)
}

/// Embeds `ids` with the sequence encoder, each distinct sequence once.
pub(crate) fn encode_sequences(
    tape: &mut Tape,
    encoder: &BoundCnn,
    objects: &Objects,
    ids: &[SequenceId],
) -> Result<Var, PipelineError> {
    let (unique, index) = dedup(ids);
    let inputs = unique.iter().map(|id| objects.sequence(id)).collect::<Result<Vec<_>, _>>()?;
    let z = encoder.encode(tape, &inputs)?;
    if unique.len() == ids.len() {
        return Ok(z);
    }
    Ok(tape.gather_rows(z, &index)?)
}

/// Distinct compounds and sequences referenced by `pairs`.
pub(crate) fn members(pairs: &[crate::datamodel::LabeledPair]) -> (BTreeSet<CompoundId>, BTreeSet<SequenceId>) {
    (
        pairs.iter().map(|p| p.compound.clone()).collect(),
        pairs.iter().map(|p| p.sequence.clone()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;

    #[test]
    fn dedup_keeps_first_appearance() {
        let (u, i) = dedup(&["b", "a", "b", "c", "a"]);
        assert_eq!(u, vec!["b", "a", "c"]);
        assert_eq!(i, vec![0, 1, 0, 2, 1]);
    }

    #[test]
    fn log_serializes_as_json_lines() {
        let mut log = TrainingLog::default();
        log.push("1A", 0, 1.5, None);
        log.push("2", 0, 0.25, Some(0.5));
        let text = log.to_json_lines();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], r#"{"phase":"1A","epoch":0,"loss":1.5,"val_loss":null}"#);
        let back: LogRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(back.val_loss, Some(0.5));
        assert_eq!(log.phases(), vec!["1A", "2"]);
        assert_eq!(log.losses("2"), vec![0.25]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            tau: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn module_recognized_from_group_name() {
        let mut rng = crate::seed::rng(1);
        let cfg = EncoderConfig::desk();
        let g = GcnEncoder::init(&cfg, &mut rng);
        let c = CnnEncoder::init(&cfg, &mut rng);
        assert_eq!(Module::from_group("gcn-1A", g.params().clone()).unwrap(), Module::Gcn(g));
        assert_eq!(Module::from_group("cnn-ss", c.params().clone()).unwrap(), Module::Cnn(c));
        assert!(Module::from_group("weird", ParamSet::new()).is_err());
    }
}
