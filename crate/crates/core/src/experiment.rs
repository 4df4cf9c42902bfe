//! End-to-end runs: unseen hold-out, split, negative sampling, contrastive
//! or baseline training and the evaluation report. CSI and baseline runs
//! with the same configuration seed share one split and one negative
//! sample, so their reports are paired.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{
    build_unseen_test, sample_negatives_among_members, sample_negatives_excluding, split, DataError, InteractionSet,
    LabeledPair, Pair, ReactionSet, SplitSpec,
};
use crate::encoders::EncoderConfig;
use crate::metrics::{evaluate, MetricError, MetricReport};
use crate::pipeline::{
    score_pairs, train_baseline, train_contrastive, train_predictor, Checkpoint, ContrastiveMode, Objects,
    PipelineError, TrainConfig, TrainingLog, ViewInputs,
};
use crate::seed;
use crate::stratify::{
    stratify_by_compound, stratify_by_reaction_feature, stratify_by_sequence, CongruentViewSet, Keying, Stratum,
    StratifyError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Stratify(#[from] StratifyError),
    #[error("metric error: {0}")]
    Metric(#[from] MetricError),
}

impl ExperimentError {
    /// 2 for configuration problems, 3 for data problems, 4 for numeric
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Stratify(_) => 2,
            ExperimentError::Data(_) => 3,
            ExperimentError::Pipeline(e) => match e {
                PipelineError::InvalidConfig(_)
                | PipelineError::BatchTooLarge { .. }
                | PipelineError::Stratify(_) => 2,
                PipelineError::NonFinite { .. } | PipelineError::Autodiff(_) | PipelineError::FrozenViolation { .. } => 4,
                _ => 3,
            },
            ExperimentError::Metric(_) => 4,
        }
    }
}

/// Pre-training strategy selected by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stratification {
    /// No pre-training: the end-to-end baseline.
    None,
    Compound,
    Sequence,
    CompoundSequence,
    Reaction(Keying),
}

impl Stratification {
    pub const NAMES: [&'static str; 7] = ["none", "compound", "sequence", "compound+sequence", "reaction", "rclass", "ec"];

    pub fn name(self) -> &'static str {
        match self {
            Stratification::None => "none",
            Stratification::Compound => "compound",
            Stratification::Sequence => "sequence",
            Stratification::CompoundSequence => "compound+sequence",
            Stratification::Reaction(k) => k.name(),
        }
    }

    pub fn is_reaction(self) -> bool {
        matches!(self, Stratification::Reaction(_))
    }
}

impl fmt::Display for Stratification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stratification {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "baseline" => Ok(Stratification::None),
            "compound" => Ok(Stratification::Compound),
            "sequence" => Ok(Stratification::Sequence),
            "compound+sequence" => Ok(Stratification::CompoundSequence),
            "reaction" => Ok(Stratification::Reaction(Keying::Reaction)),
            "rclass" => Ok(Stratification::Reaction(Keying::Rclass)),
            "ec" => Ok(Stratification::Reaction(Keying::Ec)),
            _ => Err(ExperimentError::Config(format!(
                "unknown stratification '{s}'; valid values: {}",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

impl Serialize for Stratification {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Stratification {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parts of a pre-training strategy that can be switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "V1")]
    DropV1,
    #[serde(rename = "V2")]
    DropV2,
    #[serde(rename = "V3")]
    DropV3,
    #[serde(rename = "compound")]
    DropCompound,
    #[serde(rename = "sequence")]
    DropSequence,
}

impl Ablation {
    pub const NAMES: [&'static str; 5] = ["V1", "V2", "V3", "compound", "sequence"];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::DropV1 => "V1",
            Ablation::DropV2 => "V2",
            Ablation::DropV3 => "V3",
            Ablation::DropCompound => "compound",
            Ablation::DropSequence => "sequence",
        }
    }
}

impl FromStr for Ablation {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        match t.strip_prefix("drop-").unwrap_or(&t) {
            "v1" => Ok(Ablation::DropV1),
            "v2" => Ok(Ablation::DropV2),
            "v3" => Ok(Ablation::DropV3),
            "compound" => Ok(Ablation::DropCompound),
            "sequence" => Ok(Ablation::DropSequence),
            _ => Err(ExperimentError::Config(format!(
                "unknown ablation '{s}'; valid values: {}",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

/// The contrastive mode for a strategy and its ablations, `None` for the
/// baseline.
pub fn contrastive_mode(strategy: Stratification, drop: &[Ablation]) -> Result<Option<ContrastiveMode>, ExperimentError> {
    let invalid = |a: &Ablation| {
        ExperimentError::Config(format!(
            "ablation '{}' does not apply to stratification '{strategy}'",
            a.name()
        ))
    };
    let mode = match strategy {
        Stratification::None => {
            if let Some(a) = drop.first() {
                return Err(invalid(a));
            }
            return Ok(None);
        }
        Stratification::Compound | Stratification::Sequence | Stratification::CompoundSequence => {
            let mut compound = strategy != Stratification::Sequence;
            let mut sequence = strategy != Stratification::Compound;
            for a in drop {
                match a {
                    Ablation::DropCompound => compound = false,
                    Ablation::DropSequence => sequence = false,
                    _ => return Err(invalid(a)),
                }
            }
            ContrastiveMode::TwoView { compound, sequence }
        }
        Stratification::Reaction(_) => {
            let mut views = [true; 3];
            for a in drop {
                match a {
                    Ablation::DropV1 => views[0] = false,
                    Ablation::DropV2 => views[1] = false,
                    Ablation::DropV3 => views[2] = false,
                    _ => return Err(invalid(a)),
                }
            }
            ContrastiveMode::ThreeView { views }
        }
    };
    mode.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
    Ok(Some(mode))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub stratification: Stratification,
    pub drop: Vec<Ablation>,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    /// Negatives per positive of the nested test sets.
    pub test_ratios: Vec<usize>,
    pub unseen_ratio: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            stratification: Stratification::CompoundSequence,
            drop: Vec::new(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            test_ratios: vec![1, 5, 10, 25],
            unseen_ratio: 1,
        }
    }
}

impl ExperimentConfig {
    /// Desk-sized encoders and budget.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            train: TrainConfig::desk(),
            ..Self::default()
        }
    }

    /// Uses `seed` for both the split and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.split.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.encoder
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.train.validate()?;
        self.split.validate()?;
        if self.test_ratios.is_empty() || self.test_ratios.contains(&0) || self.unseen_ratio == 0 {
            return Err(ExperimentError::Config("negative ratios must be positive".into()));
        }
        contrastive_mode(self.stratification, &self.drop)?;
        Ok(())
    }
}

/// Interactions plus, for reaction-keyed strategies, the reactions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub interactions: InteractionSet,
    pub reactions: Option<ReactionSet>,
}

/// Split, negatives and featurized objects shared by every model trained
/// on one dataset and seed.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub objects: Objects,
    pub train_set: InteractionSet,
    pub train: Vec<LabeledPair>,
    pub val: Vec<LabeledPair>,
    /// Test pairs per negative ratio; each set's negatives extend the
    /// previous one's.
    pub test: BTreeMap<usize, Vec<LabeledPair>>,
    pub unseen: Vec<LabeledPair>,
    /// Positives outside the training split, never shown to pre-training.
    pub held_out: BTreeSet<Pair>,
}

/// Keeps only objects that occur in some pair of `data`.
fn restrict_to_members(data: &InteractionSet) -> Result<InteractionSet, DataError> {
    let pairs = || data.positives().iter().chain(data.labeled_negatives());
    let cs: BTreeSet<_> = pairs().map(|(c, _)| c).collect();
    let ss: BTreeSet<_> = pairs().map(|(_, s)| s).collect();
    InteractionSet::new(
        data.compounds()
            .iter()
            .filter(|(k, _)| cs.contains(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
        data.sequences()
            .iter()
            .filter(|(k, _)| ss.contains(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
        data.positives().clone(),
        data.labeled_negatives().clone(),
    )
}

fn shuffled(mut pairs: Vec<LabeledPair>, seed: u64) -> Vec<LabeledPair> {
    pairs.shuffle(&mut seed::rng(seed));
    pairs
}

pub fn prepare(dataset: &Dataset, config: &ExperimentConfig) -> Result<PreparedData, ExperimentError> {
    config.validate()?;
    let data = &dataset.interactions;
    let s = config.split.seed;
    let objects = Objects::build(data.compounds(), data.sequences(), config.encoder.sequence_length)?;
    let (reduced, unseen_set) = build_unseen_test(data, &config.split)?;
    let reduced = restrict_to_members(&reduced)?;
    let (train_set, val_set, test_set) = split(&reduced, &config.split)?;
    let forbidden = data.positives();
    let ratio = config.train.negative_ratio;
    let train = sample_negatives_excluding(&train_set, ratio, seed::derive(s, "negatives-train", &[]), forbidden)?;
    let val = sample_negatives_excluding(&val_set, ratio, seed::derive(s, "negatives-val", &[]), forbidden)?;
    let max_ratio = *config.test_ratios.iter().max().expect("validated non-empty");
    let widest = sample_negatives_excluding(&test_set, max_ratio, seed::derive(s, "negatives-test", &[]), forbidden)?;
    let p = test_set.positives().len();
    let mut test = BTreeMap::new();
    for &r in &config.test_ratios {
        let nested: Vec<LabeledPair> = widest[..p + r * p].to_vec();
        test.insert(r, shuffled(nested, seed::derive(s, "order-test", &[r as u64])));
    }
    let unseen = if unseen_set.positives().is_empty() {
        Vec::new()
    } else {
        let u = sample_negatives_among_members(
            &unseen_set,
            config.unseen_ratio,
            seed::derive(s, "negatives-unseen", &[]),
            forbidden,
        )?;
        shuffled(u, seed::derive(s, "order-unseen", &[]))
    };
    let held_out = val_set
        .positives()
        .iter()
        .chain(test_set.positives())
        .chain(unseen_set.positives())
        .cloned()
        .collect();
    Ok(PreparedData {
        objects,
        train_set,
        train,
        val,
        test,
        unseen,
        held_out,
    })
}

/// Removes held-out compound/enzyme pairs from reaction strata so that
/// pre-training never sees an evaluation positive.
fn without_held_out(mut views: CongruentViewSet, held_out: &BTreeSet<Pair>) -> CongruentViewSet {
    for stratum in views.strata.values_mut() {
        if let Stratum::Reaction(v) = stratum {
            v.cross_pairs.retain(|p| !held_out.contains(p));
        }
    }
    views
}

/// Per-ratio test reports plus the unseen report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub model: String,
    pub test: BTreeMap<String, MetricReport>,
    pub unseen: Option<MetricReport>,
}

impl ExperimentReport {
    /// Overall AP at `ratio` negatives per positive.
    pub fn ap(&self, ratio: usize) -> Option<f64> {
        self.test.get(&ratio_label(ratio)).map(|r| r.overall.ap)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn ratio_label(ratio: usize) -> String {
    format!("{ratio}:1")
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
}

/// Trains the model selected by `config` on prepared data and evaluates it.
pub fn run_prepared(
    dataset: &Dataset,
    prepared: &PreparedData,
    config: &ExperimentConfig,
) -> Result<ExperimentOutcome, ExperimentError> {
    let mut log = TrainingLog::default();
    let mode = contrastive_mode(config.stratification, &config.drop)?;
    let checkpoint = match mode {
        None => train_baseline(
            &prepared.objects,
            &prepared.train,
            &prepared.val,
            &config.encoder,
            &config.train,
            &mut log,
        )?,
        Some(mode) => {
            let compound;
            let sequence;
            let reaction;
            let mut views = ViewInputs::default();
            match config.stratification {
                Stratification::Reaction(keying) => {
                    let reactions = dataset.reactions.as_ref().ok_or_else(|| {
                        ExperimentError::Config(format!("stratification '{keying}' needs a reaction bundle"))
                    })?;
                    reaction = without_held_out(stratify_by_reaction_feature(reactions, keying)?, &prepared.held_out);
                    views.reaction = Some(&reaction);
                }
                _ => {
                    compound = stratify_by_compound(&prepared.train_set);
                    sequence = stratify_by_sequence(&prepared.train_set);
                    views.compound = Some(&compound);
                    views.sequence = Some(&sequence);
                }
            }
            let pretrained = train_contrastive(&prepared.objects, &views, mode, &config.encoder, &config.train, &mut log)?;
            train_predictor(
                &pretrained,
                &prepared.objects,
                &prepared.train,
                &prepared.val,
                &mut log,
                None,
            )?
        }
    };
    let report = evaluate_checkpoint(&checkpoint, prepared, &model_name(config))?;
    Ok(ExperimentOutcome {
        report,
        checkpoint,
        log,
    })
}

pub fn model_name(config: &ExperimentConfig) -> String {
    let mut name = config.stratification.name().to_string();
    for a in &config.drop {
        name.push_str(&format!(" -{}", a.name()));
    }
    name
}

pub fn run_experiment(dataset: &Dataset, config: &ExperimentConfig) -> Result<ExperimentOutcome, ExperimentError> {
    let prepared = prepare(dataset, config)?;
    run_prepared(dataset, &prepared, config)
}

/// Scores every test set and the unseen set with a trained checkpoint.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    prepared: &PreparedData,
    model: &str,
) -> Result<ExperimentReport, ExperimentError> {
    let mut test = BTreeMap::new();
    for (&ratio, pairs) in &prepared.test {
        let scores = score_pairs(checkpoint, &prepared.objects, pairs)?;
        test.insert(ratio_label(ratio), evaluate(pairs, &scores)?);
    }
    let unseen = if prepared.unseen.is_empty() {
        None
    } else {
        let scores = score_pairs(checkpoint, &prepared.objects, &prepared.unseen)?;
        Some(evaluate(&prepared.unseen, &scores)?)
    };
    Ok(ExperimentReport {
        model: model.to_string(),
        test,
        unseen,
    })
}

/// Ablation variants of a strategy, the full strategy first and the
/// baseline last.
pub fn ablation_suite(strategy: Stratification) -> Vec<(Stratification, Vec<Ablation>)> {
    let mut out = vec![(strategy, Vec::new())];
    match strategy {
        Stratification::CompoundSequence => {
            out.push((strategy, vec![Ablation::DropCompound]));
            out.push((strategy, vec![Ablation::DropSequence]));
        }
        Stratification::Reaction(_) => {
            for a in [Ablation::DropV1, Ablation::DropV2, Ablation::DropV3] {
                out.push((strategy, vec![a]));
            }
        }
        _ => {}
    }
    if strategy != Stratification::None {
        out.push((Stratification::None, Vec::new()));
    }
    out
}

/// Runs every ablation variant on one shared split.
pub fn run_ablations(dataset: &Dataset, config: &ExperimentConfig) -> Result<Vec<ExperimentReport>, ExperimentError> {
    let prepared = prepare(dataset, config)?;
    ablation_suite(config.stratification)
        .into_iter()
        .map(|(stratification, drop)| {
            let cfg = ExperimentConfig {
                stratification,
                drop,
                ..config.clone()
            };
            Ok(run_prepared(dataset, &prepared, &cfg)?.report)
        })
        .collect()
}

/// Test AP at the first configured ratio for every temperature.
pub fn grid_tau(dataset: &Dataset, config: &ExperimentConfig, taus: &[f64]) -> Result<Vec<(f64, ExperimentReport)>, ExperimentError> {
    if config.stratification == Stratification::None {
        return Err(ExperimentError::Config("temperature grid needs a contrastive stratification".into()));
    }
    let prepared = prepare(dataset, config)?;
    taus.iter()
        .map(|&tau| {
            let mut cfg = config.clone();
            cfg.train.tau = tau;
            let mut report = run_prepared(dataset, &prepared, &cfg)?.report;
            report.model = format!("{} tau={tau}", report.model);
            Ok((tau, report))
        })
        .collect()
}
