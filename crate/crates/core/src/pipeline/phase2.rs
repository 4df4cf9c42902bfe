//! Predictor training on frozen embeddings, the end-to-end baseline and
//! pair scoring.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, encode_compounds, encode_sequences, members, AdamState, Bound, Checkpoint, CheckpointMeta,
    ModelKind, Module, Objects, ParamGroup, PipelineError, TrainConfig, TrainingLog,
};
use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::datamodel::{CompoundId, LabeledPair, SequenceId};
use crate::encoders::{CnnEncoder, EncoderConfig, GcnEncoder, Mlp};
use crate::seed;

/// Objects embedded per encoder call when precomputing features.
const EMBED_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Compound,
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSlot {
    pub side: Side,
    pub group: String,
}

/// Ordered encoder outputs whose concatenation is the predictor input.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureLayout {
    pub slots: Vec<FeatureSlot>,
}

impl FeatureLayout {
    pub fn push(&mut self, side: Side, group: &str) {
        self.slots.push(FeatureSlot {
            side,
            group: group.to_string(),
        });
    }
}

/// Called after every predictor epoch with the epoch and the working
/// checkpoint.
pub type Phase2Hook<'a> = &'a mut dyn FnMut(usize, &mut Checkpoint);

/// Per-slot embeddings of the objects a pair list needs.
struct Embeddings {
    slots: Vec<(Side, BTreeMap<String, Vec<f64>>)>,
}

impl Embeddings {
    fn compute(
        encoders: &[(Side, &Module)],
        objects: &Objects,
        compounds: &BTreeSet<CompoundId>,
        sequences: &BTreeSet<SequenceId>,
    ) -> Result<Self, PipelineError> {
        let mut slots = Vec::with_capacity(encoders.len());
        for &(side, module) in encoders {
            let mut table = BTreeMap::new();
            match side {
                Side::Compound => {
                    let ids: Vec<CompoundId> = compounds.iter().cloned().collect();
                    for chunk in ids.chunks(EMBED_CHUNK) {
                        let mut tape = Tape::new();
                        let bound = module.bind(&mut tape, false);
                        let z = encode_compounds(&mut tape, bound.gcn(), objects, chunk)?;
                        insert_rows(&mut table, chunk.iter().map(|c| c.0.clone()), tape.value(z));
                    }
                }
                Side::Sequence => {
                    let ids: Vec<SequenceId> = sequences.iter().cloned().collect();
                    for chunk in ids.chunks(EMBED_CHUNK) {
                        let mut tape = Tape::new();
                        let bound = module.bind(&mut tape, false);
                        let z = encode_sequences(&mut tape, bound.cnn(), objects, chunk)?;
                        insert_rows(&mut table, chunk.iter().map(|s| s.0.clone()), tape.value(z));
                    }
                }
            }
            slots.push((side, table));
        }
        Ok(Self { slots })
    }

    /// One row per pair: the slot embeddings concatenated in layout order.
    fn matrix(&self, pairs: &[LabeledPair]) -> Result<Vec<Vec<f64>>, PipelineError> {
        pairs
            .iter()
            .map(|p| {
                let mut row = Vec::new();
                for (side, table) in &self.slots {
                    let key = match side {
                        Side::Compound => &p.compound.0,
                        Side::Sequence => &p.sequence.0,
                    };
                    let z = table.get(key).ok_or_else(|| PipelineError::UnknownObject(key.clone()))?;
                    row.extend_from_slice(z);
                }
                Ok(row)
            })
            .collect()
    }
}

fn insert_rows(table: &mut BTreeMap<String, Vec<f64>>, keys: impl Iterator<Item = String>, z: &Tensor) {
    let (_, width) = z.dims();
    for (key, row) in keys.zip(z.data().chunks(width)) {
        table.insert(key, row.to_vec());
    }
}

fn rows_tensor(rows: &[Vec<f64>], pick: &[usize]) -> Result<Tensor, AutodiffError> {
    let width = rows.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(pick.len() * width);
    for &i in pick {
        data.extend_from_slice(&rows[i]);
    }
    Tensor::matrix(pick.len(), width, data)
}

fn targets(pairs: &[LabeledPair]) -> Vec<f64> {
    pairs.iter().map(|p| f64::from(p.label)).collect()
}

/// `negatives / positives` of the training pairs.
fn positive_weight(train: &[LabeledPair], val: &[LabeledPair]) -> Result<f64, PipelineError> {
    let pos = train.iter().filter(|p| p.label == 1).count();
    let neg = train.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(PipelineError::TooFewExamples(format!(
            "training needs positives and negatives, got {pos} and {neg}"
        )));
    }
    if val.is_empty() {
        return Err(PipelineError::TooFewExamples("validation set is empty".into()));
    }
    Ok(neg as f64 / pos as f64)
}

fn checkpoint_encoders<'a>(ckpt: &Checkpoint, modules: &'a BTreeMap<String, Module>) -> Vec<(Side, &'a Module)> {
    ckpt.meta
        .features
        .slots
        .iter()
        .map(|s| (s.side, &modules[&s.group]))
        .collect()
}

fn load_encoders(ckpt: &Checkpoint) -> Result<BTreeMap<String, Module>, PipelineError> {
    ckpt.meta
        .features
        .slots
        .iter()
        .map(|s| Ok((s.group.clone(), ckpt.module(&s.group)?)))
        .collect()
}

/// Raw logits of `pairs` under a trained checkpoint.
pub fn score_pairs(ckpt: &Checkpoint, objects: &Objects, pairs: &[LabeledPair]) -> Result<Vec<f64>, PipelineError> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let modules = load_encoders(ckpt)?;
    let (compounds, sequences) = members(pairs);
    let emb = Embeddings::compute(&checkpoint_encoders(ckpt, &modules), objects, &compounds, &sequences)?;
    let rows = emb.matrix(pairs)?;
    let predictor = ckpt.module(&ckpt.meta.predictor)?;
    logits(&predictor, &rows)
}

fn logits(predictor: &Module, rows: &[Vec<f64>]) -> Result<Vec<f64>, PipelineError> {
    let mut tape = Tape::new();
    let bound = predictor.bind(&mut tape, false);
    let all: Vec<usize> = (0..rows.len()).collect();
    let x = tape.constant(rows_tensor(rows, &all)?);
    let y = bound.mlp().forward(&mut tape, x)?;
    Ok(tape.value(y).data().to_vec())
}

fn bce_value(predictor: &Module, rows: &[Vec<f64>], y: &[f64], pos_weight: f64) -> Result<f64, PipelineError> {
    let z = logits(predictor, rows)?;
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(z));
    let l = tape.weighted_bce(v, y, pos_weight)?;
    Ok(tape.value(l).item())
}

/// Trains the predictor on embeddings of the frozen encoders in `pretrained`
/// with weighted cross-entropy, mini-batches and early stopping on the
/// validation loss. Fails with [`PipelineError::FrozenViolation`] if any
/// frozen group differs afterwards.
pub fn train_predictor(
    pretrained: &Checkpoint,
    objects: &Objects,
    train: &[LabeledPair],
    val: &[LabeledPair],
    log: &mut TrainingLog,
    mut hook: Option<Phase2Hook>,
) -> Result<Checkpoint, PipelineError> {
    let cfg = pretrained.meta.train.clone();
    cfg.validate()?;
    let pos_weight = positive_weight(train, val)?;
    let before = pretrained.frozen_checksums();
    let mut working = pretrained.clone();
    working.groups.retain(|g| g.name != pretrained.meta.predictor);

    let modules = load_encoders(&working)?;
    let encoders = checkpoint_encoders(&working, &modules);
    let (mut compounds, mut sequences) = members(train);
    let (vc, vs) = members(val);
    compounds.extend(vc);
    sequences.extend(vs);
    let emb = Embeddings::compute(&encoders, objects, &compounds, &sequences)?;
    let (xt, yt) = (emb.matrix(train)?, targets(train));
    let (xv, yv) = (emb.matrix(val)?, targets(val));

    let width = xt[0].len();
    let name = pretrained.meta.predictor.clone();
    let init = seed::derive(cfg.seed, &format!("init-{name}"), &[]);
    let mut fitted = vec![Module::Mlp(Mlp::predictor(width, &mut seed::rng(init)))];
    fit(
        "2",
        &mut fitted,
        train.len(),
        cfg.phase2_epochs,
        &cfg,
        log,
        |tape, bound, batch| {
            let x = tape.constant(rows_tensor(&xt, batch)?);
            let z = bound[0].mlp().forward(tape, x)?;
            let y: Vec<f64> = batch.iter().map(|&i| yt[i]).collect();
            Ok(tape.weighted_bce(z, &y, pos_weight)?)
        },
        |m| bce_value(&m[0], &xv, &yv, pos_weight),
        |epoch| {
            if let Some(h) = hook.as_mut() {
                h(epoch, &mut working);
            }
        },
    )?;

    for (group, sum) in before {
        if working.group(&group)?.params.digest() != sum {
            return Err(PipelineError::FrozenViolation { group });
        }
    }
    let predictor = fitted.pop().expect("one module");
    working.groups.push(ParamGroup {
        name,
        frozen: false,
        params: predictor.params().clone(),
    });
    working.log_digest = log.digest();
    Ok(working)
}

/// Trains a graph encoder, a sequence encoder and a predictor jointly on
/// labeled pairs, with the same loss, batching and early stopping as the
/// predictor phase.
pub fn train_baseline(
    objects: &Objects,
    train: &[LabeledPair],
    val: &[LabeledPair],
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    log: &mut TrainingLog,
) -> Result<Checkpoint, PipelineError> {
    cfg.validate()?;
    encoder.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
    let pos_weight = positive_weight(train, val)?;
    let rng = |group: &str| seed::rng(seed::derive(cfg.seed, &format!("init-{group}"), &[]));
    let mut modules = vec![
        Module::Gcn(GcnEncoder::init(encoder, &mut rng("gcn"))),
        Module::Cnn(CnnEncoder::init(encoder, &mut rng("cnn"))),
        Module::Mlp(Mlp::predictor(2 * encoder.d, &mut rng("mlp"))),
    ];
    let yt = targets(train);
    let yv = targets(val);
    let (vc, vs) = members(val);
    fit(
        "baseline",
        &mut modules,
        train.len(),
        cfg.baseline_epochs,
        cfg,
        log,
        |tape, bound, batch| {
            let cs: Vec<CompoundId> = batch.iter().map(|&i| train[i].compound.clone()).collect();
            let ss: Vec<SequenceId> = batch.iter().map(|&i| train[i].sequence.clone()).collect();
            let zc = encode_compounds(tape, bound[0].gcn(), objects, &cs)?;
            let zs = encode_sequences(tape, bound[1].cnn(), objects, &ss)?;
            let x = tape.concat(&[zc, zs])?;
            let z = bound[2].mlp().forward(tape, x)?;
            let y: Vec<f64> = batch.iter().map(|&i| yt[i]).collect();
            Ok(tape.weighted_bce(z, &y, pos_weight)?)
        },
        |m| {
            let emb = Embeddings::compute(&[(Side::Compound, &m[0]), (Side::Sequence, &m[1])], objects, &vc, &vs)?;
            bce_value(&m[2], &emb.matrix(val)?, &yv, pos_weight)
        },
        |_| {},
    )?;
    let mut features = super::FeatureLayout::default();
    features.push(Side::Compound, "gcn");
    features.push(Side::Sequence, "cnn");
    let groups = ["gcn", "cnn", "mlp"]
        .iter()
        .zip(&modules)
        .map(|(name, m)| ParamGroup {
            name: name.to_string(),
            frozen: false,
            params: m.params().clone(),
        })
        .collect();
    Ok(Checkpoint {
        meta: CheckpointMeta {
            model: ModelKind::Baseline,
            encoder: encoder.clone(),
            train: cfg.clone(),
            features,
            predictor: "mlp".into(),
        },
        groups,
        log_digest: log.digest(),
    })
}

/// Mini-batch training with one optimizer over `modules`, evaluating the
/// validation loss once per epoch. Stops after `cfg.patience` epochs
/// without improvement and restores the best epoch's parameters.
#[allow(clippy::too_many_arguments)]
fn fit<F, V, E>(
    phase: &str,
    modules: &mut Vec<Module>,
    n: usize,
    epochs: usize,
    cfg: &TrainConfig,
    log: &mut TrainingLog,
    mut batch_loss: F,
    mut val_loss: V,
    mut after_epoch: E,
) -> Result<(), PipelineError>
where
    F: FnMut(&mut Tape, &[Bound], &[usize]) -> Result<Var, PipelineError>,
    V: FnMut(&[Module]) -> Result<f64, PipelineError>,
    E: FnMut(usize),
{
    let mut state = AdamState::new(modules.iter().flat_map(|m| m.params().tensors()));
    let mut best: Option<(f64, Vec<Module>)> = None;
    let mut stale = 0;
    let tag = format!("phase-{phase}");
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, &tag, &[epoch as u64])));
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.predictor_batch).enumerate() {
            let nonfinite = |source| PipelineError::NonFinite {
                phase: phase.to_string(),
                epoch,
                batch: b,
                source,
            };
            let mut tape = Tape::new();
            let bound: Vec<Bound> = modules.iter().map(|m| m.bind(&mut tape, true)).collect();
            let loss = batch_loss(&mut tape, &bound, batch).map_err(|e| match e {
                PipelineError::Autodiff(source) => nonfinite(source),
                other => other,
            })?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(nonfinite(AutodiffError::NonFiniteValue { op: "prediction loss" }));
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
            total += value * batch.len() as f64;
        }
        let vl = val_loss(modules)?;
        if !vl.is_finite() {
            return Err(PipelineError::NonFinite {
                phase: phase.to_string(),
                epoch,
                batch: 0,
                source: AutodiffError::NonFiniteValue { op: "validation loss" },
            });
        }
        log.push(phase, epoch, total / n as f64, Some(vl));
        after_epoch(epoch);
        if best.as_ref().map_or(true, |(b, _)| vl < *b) {
            best = Some((vl, modules.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, m)) = best {
        *modules = m;
    }
    Ok(())
}
