//! Contrastive pre-training of the encoders.

use serde::{Deserialize, Serialize};

use super::{
    adam_step, dedup, encode_compounds, encode_sequences, AdamState, Bound, Checkpoint, CheckpointMeta,
    FeatureLayout, ModelKind, Module, Objects, ParamGroup, PipelineError, Side, TrainConfig, TrainingLog,
};
use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::contrastive::{multiview_loss_tape, total_loss_tape, Temperature};
use crate::datamodel::{CompoundId, SequenceId};
use crate::encoders::{CnnEncoder, EncoderConfig, GcnEncoder, Projection};
use crate::seed;
use crate::stratify::{sample_batch, ContrastiveBatch, CongruentViewSet, ViewTuple};

/// Which congruent views drive pre-training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastiveMode {
    /// Compound-keyed and sequence-keyed strata, each with its own pair of
    /// encoders.
    TwoView { compound: bool, sequence: bool },
    /// Reaction-keyed strata with compound-compound, compound-sequence and
    /// sequence-sequence views.
    ThreeView { views: [bool; 3] },
}

impl ContrastiveMode {
    pub const TWO_VIEW: Self = ContrastiveMode::TwoView {
        compound: true,
        sequence: true,
    };
    pub const THREE_VIEW: Self = ContrastiveMode::ThreeView { views: [true; 3] };

    pub fn validate(self) -> Result<(), PipelineError> {
        match self {
            ContrastiveMode::TwoView {
                compound: false,
                sequence: false,
            } => Err(PipelineError::InvalidConfig("at least one stratification must be kept".into())),
            ContrastiveMode::ThreeView { views } if views.iter().filter(|&&v| v).count() < 2 => {
                Err(PipelineError::InvalidConfig("at least two views must be kept".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Stratified views consumed by [`train_contrastive`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ViewInputs<'a> {
    pub compound: Option<&'a CongruentViewSet>,
    pub sequence: Option<&'a CongruentViewSet>,
    pub reaction: Option<&'a CongruentViewSet>,
}

/// Pre-trains the encoders for `mode` and returns them as frozen groups.
/// The returned checkpoint has no predictor yet.
pub fn train_contrastive(
    objects: &Objects,
    views: &ViewInputs,
    mode: ContrastiveMode,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    log: &mut TrainingLog,
) -> Result<Checkpoint, PipelineError> {
    mode.validate()?;
    cfg.validate()?;
    encoder.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
    let tau = Temperature::new(cfg.tau).map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
    let rng = |group: &str| seed::rng(seed::derive(cfg.seed, &format!("init-{group}"), &[]));
    let d = encoder.d;

    let mut groups = Vec::new();
    let mut layout = FeatureLayout::default();
    match mode {
        ContrastiveMode::TwoView { compound, sequence } => {
            let compound_views = need(views.compound, compound, "compound")?;
            let sequence_views = need(views.sequence, sequence, "sequence")?;
            // every batch-size check happens before any training
            for (phase, v) in [("1A", compound_views), ("1B", sequence_views)] {
                if let Some(v) = v {
                    check_batch(phase, v, cfg.batch_size)?;
                }
            }
            for (phase, v) in [("1A", compound_views), ("1B", sequence_views)] {
                let Some(v) = v else { continue };
                let names = [format!("gcn-{phase}"), format!("cnn-{phase}"), format!("head-{phase}")];
                let mut modules = vec![
                    Module::Gcn(GcnEncoder::init(encoder, &mut rng(&names[0]))),
                    Module::Cnn(CnnEncoder::init(encoder, &mut rng(&names[1]))),
                    Module::Head(Projection::init(2 * d, d, &mut rng(&names[2]))),
                ];
                let keyed_by_compound = phase == "1A";
                run_phase(phase, v, &mut modules, cfg, log, |tape, bound, batch| {
                    let (gcn, cnn, head) = (bound[0].gcn(), bound[1].cnn(), bound[2].head());
                    let (z1, z2) = if keyed_by_compound {
                        let (cs, (si, sj)) = compound_keyed(batch)?;
                        let z1 = encode_compounds(tape, gcn, objects, &cs)?;
                        let pair = sequence_pair(tape, cnn, objects, &si, &sj)?;
                        (z1, tape.matmul(pair, head)?)
                    } else {
                        let ((ci, cj), ss) = sequence_keyed(batch)?;
                        let pair = compound_pair(tape, gcn, objects, &ci, &cj)?;
                        let z2 = encode_sequences(tape, cnn, objects, &ss)?;
                        (tape.matmul(pair, head)?, z2)
                    };
                    Ok(total_loss_tape(tape, z1, z2, tau, cfg.denominator)?)
                })?;
                layout.push(Side::Compound, &names[0]);
                layout.push(Side::Sequence, &names[1]);
                for (name, m) in names.iter().zip(modules) {
                    groups.push(frozen(name, m));
                }
            }
        }
        ContrastiveMode::ThreeView { views: keep } => {
            let v = views
                .reaction
                .ok_or_else(|| PipelineError::InvalidConfig("three-view training needs reaction strata".into()))?;
            check_batch("1", v, cfg.batch_size)?;
            let mut names = Vec::new();
            let mut modules = Vec::new();
            if keep[0] {
                names.push("gcn-cc");
                modules.push(Module::Gcn(GcnEncoder::init(encoder, &mut rng("gcn-cc"))));
            }
            if keep[1] {
                names.push("gcn-cs");
                modules.push(Module::Gcn(GcnEncoder::init(encoder, &mut rng("gcn-cs"))));
                names.push("cnn-cs");
                modules.push(Module::Cnn(CnnEncoder::init(encoder, &mut rng("cnn-cs"))));
            }
            if keep[2] {
                names.push("cnn-ss");
                modules.push(Module::Cnn(CnnEncoder::init(encoder, &mut rng("cnn-ss"))));
            }
            run_phase("1", v, &mut modules, cfg, log, |tape, bound, batch| {
                let (rp, cs, ss) = reaction_keyed(batch)?;
                let mut views = Vec::with_capacity(3);
                let mut next = 0;
                if keep[0] {
                    views.push(compound_pair(tape, bound[next].gcn(), objects, &rp.0, &rp.1)?);
                    next += 1;
                }
                if keep[1] {
                    let zc = encode_compounds(tape, bound[next].gcn(), objects, &cs.0)?;
                    let zs = encode_sequences(tape, bound[next + 1].cnn(), objects, &cs.1)?;
                    views.push(tape.concat(&[zc, zs])?);
                    next += 2;
                }
                if keep[2] {
                    views.push(sequence_pair(tape, bound[next].cnn(), objects, &ss.0, &ss.1)?);
                }
                Ok(multiview_loss_tape(tape, &views, tau, cfg.denominator)?)
            })?;
            for name in ["gcn-cc", "gcn-cs"] {
                if names.contains(&name) {
                    layout.push(Side::Compound, name);
                }
            }
            for name in ["cnn-cs", "cnn-ss"] {
                if names.contains(&name) {
                    layout.push(Side::Sequence, name);
                }
            }
            for (name, m) in names.iter().zip(modules) {
                groups.push(frozen(name, m));
            }
        }
    }
    Ok(Checkpoint {
        meta: CheckpointMeta {
            model: ModelKind::Contrastive(mode),
            encoder: encoder.clone(),
            train: cfg.clone(),
            features: layout,
            predictor: "predictor".into(),
        },
        groups,
        log_digest: log.digest(),
    })
}

fn need<'a>(
    views: Option<&'a CongruentViewSet>,
    wanted: bool,
    what: &str,
) -> Result<Option<&'a CongruentViewSet>, PipelineError> {
    match (wanted, views) {
        (false, _) => Ok(None),
        (true, Some(v)) => Ok(Some(v)),
        (true, None) => Err(PipelineError::InvalidConfig(format!("missing {what}-keyed strata"))),
    }
}

fn frozen(name: &str, module: Module) -> ParamGroup {
    ParamGroup {
        name: name.to_string(),
        frozen: true,
        params: module.params().clone(),
    }
}

fn check_batch(phase: &str, views: &CongruentViewSet, k: usize) -> Result<(), PipelineError> {
    let eligible = views.eligible_keys().len();
    if eligible < k {
        return Err(PipelineError::BatchTooLarge {
            phase: phase.to_string(),
            requested: k,
            eligible,
        });
    }
    Ok(())
}

fn wrong_tuple() -> PipelineError {
    PipelineError::InvalidConfig("strata keying does not match the training phase".into())
}

type Compounds = Vec<CompoundId>;
type Sequences = Vec<SequenceId>;

fn compound_keyed(batch: &ContrastiveBatch) -> Result<(Compounds, (Sequences, Sequences)), PipelineError> {
    let mut out = (Vec::new(), (Vec::new(), Vec::new()));
    for e in &batch.entries {
        let ViewTuple::Compound { compound, sequences } = &e.tuple else {
            return Err(wrong_tuple());
        };
        out.0.push(compound.clone());
        out.1 .0.push(sequences.0.clone());
        out.1 .1.push(sequences.1.clone());
    }
    Ok(out)
}

fn sequence_keyed(batch: &ContrastiveBatch) -> Result<((Compounds, Compounds), Sequences), PipelineError> {
    let mut out = ((Vec::new(), Vec::new()), Vec::new());
    for e in &batch.entries {
        let ViewTuple::Sequence { compounds, sequence } = &e.tuple else {
            return Err(wrong_tuple());
        };
        out.0 .0.push(compounds.0.clone());
        out.0 .1.push(compounds.1.clone());
        out.1.push(sequence.clone());
    }
    Ok(out)
}

type ReactionColumns = ((Compounds, Compounds), (Compounds, Sequences), (Sequences, Sequences));

fn reaction_keyed(batch: &ContrastiveBatch) -> Result<ReactionColumns, PipelineError> {
    let mut out: ReactionColumns = Default::default();
    for e in &batch.entries {
        let ViewTuple::Reaction {
            reaction_pair,
            cross_pair,
            enzyme_pair,
        } = &e.tuple
        else {
            return Err(wrong_tuple());
        };
        out.0 .0.push(reaction_pair.0.clone());
        out.0 .1.push(reaction_pair.1.clone());
        out.1 .0.push(cross_pair.0.clone());
        out.1 .1.push(cross_pair.1.clone());
        out.2 .0.push(enzyme_pair.0.clone());
        out.2 .1.push(enzyme_pair.1.clone());
    }
    Ok(out)
}

/// Row `i` is `GCN(a_i) ⊕ GCN(b_i)` with one shared encoder.
fn compound_pair(
    tape: &mut Tape,
    gcn: &crate::encoders::BoundGcn,
    objects: &Objects,
    a: &[CompoundId],
    b: &[CompoundId],
) -> Result<Var, PipelineError> {
    let all: Vec<CompoundId> = a.iter().chain(b).cloned().collect();
    let (unique, index) = dedup(&all);
    let z = encode_compounds(tape, gcn, objects, &unique)?;
    split_pair(tape, z, &index, a.len())
}

/// Row `i` is `CNN(a_i) ⊕ CNN(b_i)` with one shared encoder.
fn sequence_pair(
    tape: &mut Tape,
    cnn: &crate::encoders::BoundCnn,
    objects: &Objects,
    a: &[SequenceId],
    b: &[SequenceId],
) -> Result<Var, PipelineError> {
    let all: Vec<SequenceId> = a.iter().chain(b).cloned().collect();
    let (unique, index) = dedup(&all);
    let z = encode_sequences(tape, cnn, objects, &unique)?;
    split_pair(tape, z, &index, a.len())
}

fn split_pair(tape: &mut Tape, z: Var, index: &[usize], k: usize) -> Result<Var, PipelineError> {
    let first = tape.gather_rows(z, &index[..k])?;
    let second = tape.gather_rows(z, &index[k..])?;
    Ok(tape.concat(&[first, second])?)
}

/// Runs `cfg.phase1_epochs` epochs of `⌈eligible keys / k⌉` batches each,
/// with one optimizer over every module.
fn run_phase<F>(
    phase: &str,
    views: &CongruentViewSet,
    modules: &mut [Module],
    cfg: &TrainConfig,
    log: &mut TrainingLog,
    mut batch_loss: F,
) -> Result<(), PipelineError>
where
    F: FnMut(&mut Tape, &[Bound], &ContrastiveBatch) -> Result<Var, PipelineError>,
{
    let k = cfg.batch_size;
    let batches = views.eligible_keys().len().div_ceil(k);
    let mut state = AdamState::new(modules.iter().flat_map(|m| m.params().tensors()));
    let tag = format!("phase-{phase}");
    for epoch in 0..cfg.phase1_epochs {
        let mut total = 0.0;
        for b in 0..batches {
            let nonfinite = |source| PipelineError::NonFinite {
                phase: phase.to_string(),
                epoch,
                batch: b,
                source,
            };
            let batch = sample_batch(views, k, seed::derive(cfg.seed, &tag, &[epoch as u64, b as u64]))?;
            let mut tape = Tape::new();
            let bound: Vec<Bound> = modules.iter().map(|m| m.bind(&mut tape, true)).collect();
            let loss = batch_loss(&mut tape, &bound, &batch).map_err(|e| match e {
                PipelineError::Autodiff(source) => nonfinite(source),
                other => other,
            })?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(nonfinite(AutodiffError::NonFiniteValue { op: "contrastive loss" }));
            }
            let grads = tape.backward(loss).map_err(nonfinite)?;
            let grads: Vec<Tensor> = bound
                .iter()
                .zip(modules.iter())
                .flat_map(|(bm, m)| {
                    bm.vars()
                        .into_iter()
                        .zip(m.params().tensors())
                        .map(|(v, t)| grads.get_or_zeros(v, t))
                        .collect::<Vec<_>>()
                })
                .collect();
            if !grads.iter().all(Tensor::is_finite) {
                return Err(nonfinite(AutodiffError::NonFiniteValue { op: "gradient" }));
            }
            let mut params: Vec<&mut Tensor> =
                modules.iter_mut().flat_map(|m| m.params_mut().tensors_mut().iter_mut()).collect();
            adam_step(&mut params, &grads, &mut state, &cfg.adam)?;
            total += value;
        }
        log.push(phase, epoch, total / batches as f64, None);
    }
    Ok(())
}
