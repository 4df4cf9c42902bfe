//! Interaction and reaction datasets, splits, negative sampling and strata
//! statistics.

mod io;
mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub use io::{load_interactions, load_reactions, read_interactions, read_reactions, write_interactions, write_reactions, LoadReport};
pub use stats::{strata_stats, StrataStatistics};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CompoundId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SequenceId(pub String);

impl fmt::Display for CompoundId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for SequenceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for CompoundId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl From<&str> for SequenceId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

pub type Pair = (CompoundId, SequenceId);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledPair {
    pub compound: CompoundId,
    pub sequence: SequenceId,
    pub label: u8,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("dangling reference at line {line}: unknown id '{id}'")]
    DanglingReference { line: usize, id: String },
    #[error("reaction '{reaction}' has an empty {side} side")]
    EmptySide { reaction: String, side: &'static str },
    #[error("too few examples: need at least {needed}, got {got}")]
    TooFewExamples { needed: usize, got: usize },
    #[error("insufficient negative space: need {needed} negatives, only {available} available")]
    InsufficientNegativeSpace { needed: usize, available: usize },
    #[error("invalid split specification: {0}")]
    InvalidSplit(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("empty input")]
    EmptyInput,
}

/// Compounds, sequences and the known interactions between them.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSet {
    compounds: Arc<BTreeMap<CompoundId, String>>,
    sequences: Arc<BTreeMap<SequenceId, String>>,
    positives: BTreeSet<Pair>,
    labeled_negatives: BTreeSet<Pair>,
}

impl InteractionSet {
    pub fn new(
        compounds: BTreeMap<CompoundId, String>,
        sequences: BTreeMap<SequenceId, String>,
        positives: BTreeSet<Pair>,
        labeled_negatives: BTreeSet<Pair>,
    ) -> Result<Self, DataError> {
        Self::with_shared(Arc::new(compounds), Arc::new(sequences), positives, labeled_negatives)
    }

    fn with_shared(
        compounds: Arc<BTreeMap<CompoundId, String>>,
        sequences: Arc<BTreeMap<SequenceId, String>>,
        positives: BTreeSet<Pair>,
        labeled_negatives: BTreeSet<Pair>,
    ) -> Result<Self, DataError> {
        for (c, s) in positives.iter().chain(&labeled_negatives) {
            if !compounds.contains_key(c) {
                return Err(DataError::Invalid(format!("pair references unknown compound '{c}'")));
            }
            if !sequences.contains_key(s) {
                return Err(DataError::Invalid(format!("pair references unknown sequence '{s}'")));
            }
        }
        if let Some((c, s)) = positives.intersection(&labeled_negatives).next() {
            return Err(DataError::Invalid(format!("pair ({c}, {s}) is both positive and negative")));
        }
        Ok(Self {
            compounds,
            sequences,
            positives,
            labeled_negatives,
        })
    }

    /// Same object maps with a different pair selection.
    fn derive(&self, positives: BTreeSet<Pair>, labeled_negatives: BTreeSet<Pair>) -> Self {
        Self {
            compounds: Arc::clone(&self.compounds),
            sequences: Arc::clone(&self.sequences),
            positives,
            labeled_negatives,
        }
    }

    pub fn compounds(&self) -> &BTreeMap<CompoundId, String> {
        &self.compounds
    }

    pub fn sequences(&self) -> &BTreeMap<SequenceId, String> {
        &self.sequences
    }

    pub fn positives(&self) -> &BTreeSet<Pair> {
        &self.positives
    }

    pub fn labeled_negatives(&self) -> &BTreeSet<Pair> {
        &self.labeled_negatives
    }

    /// Partner sequences of every compound with at least one positive.
    pub fn partners_by_compound(&self) -> BTreeMap<CompoundId, BTreeSet<SequenceId>> {
        let mut out: BTreeMap<CompoundId, BTreeSet<SequenceId>> = BTreeMap::new();
        for (c, s) in &self.positives {
            out.entry(c.clone()).or_default().insert(s.clone());
        }
        out
    }

    /// Partner compounds of every sequence with at least one positive.
    pub fn partners_by_sequence(&self) -> BTreeMap<SequenceId, BTreeSet<CompoundId>> {
        let mut out: BTreeMap<SequenceId, BTreeSet<CompoundId>> = BTreeMap::new();
        for (c, s) in &self.positives {
            out.entry(s.clone()).or_default().insert(c.clone());
        }
        out
    }

    pub fn base_stats(&self) -> BaseStatistics {
        let compounds = self.partners_by_compound().len();
        let sequences = self.partners_by_sequence().len();
        BaseStatistics {
            interactions: self.positives.len(),
            compounds,
            sequences,
            labeled_negatives: self.labeled_negatives.len(),
            interactions_per_compound: ratio(self.positives.len(), compounds),
            interactions_per_sequence: ratio(self.positives.len(), sequences),
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Headline counts of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseStatistics {
    pub interactions: usize,
    pub compounds: usize,
    pub sequences: usize,
    pub labeled_negatives: usize,
    pub interactions_per_compound: f64,
    pub interactions_per_sequence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reaction {
    pub id: String,
    pub reactants: BTreeSet<CompoundId>,
    pub products: BTreeSet<CompoundId>,
    pub enzymes: BTreeSet<SequenceId>,
    #[serde(default)]
    pub rclass: BTreeSet<String>,
    #[serde(default)]
    pub ec: BTreeSet<String>,
}

/// Biochemical reactions over shared compound and sequence maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionSet {
    compounds: Arc<BTreeMap<CompoundId, String>>,
    sequences: Arc<BTreeMap<SequenceId, String>>,
    reactions: Vec<Reaction>,
}

impl ReactionSet {
    pub fn new(
        compounds: BTreeMap<CompoundId, String>,
        sequences: BTreeMap<SequenceId, String>,
        reactions: Vec<Reaction>,
    ) -> Result<Self, DataError> {
        let mut ids = BTreeSet::new();
        for (i, r) in reactions.iter().enumerate() {
            let line = i + 1;
            if !ids.insert(r.id.as_str()) {
                return Err(DataError::Schema {
                    line,
                    message: format!("duplicate reaction id '{}'", r.id),
                });
            }
            for (set, side) in [(&r.reactants, "reactant"), (&r.products, "product")] {
                if set.is_empty() {
                    return Err(DataError::EmptySide {
                        reaction: r.id.clone(),
                        side,
                    });
                }
                if let Some(c) = set.iter().find(|c| !compounds.contains_key(*c)) {
                    return Err(DataError::DanglingReference { line, id: c.0.clone() });
                }
            }
            if r.enzymes.is_empty() {
                return Err(DataError::EmptySide {
                    reaction: r.id.clone(),
                    side: "enzyme",
                });
            }
            if let Some(s) = r.enzymes.iter().find(|s| !sequences.contains_key(*s)) {
                return Err(DataError::DanglingReference { line, id: s.0.clone() });
            }
        }
        Ok(Self {
            compounds: Arc::new(compounds),
            sequences: Arc::new(sequences),
            reactions,
        })
    }

    pub fn reactions(&self) -> &[Reaction] {
        &self.reactions
    }

    pub fn compounds(&self) -> &BTreeMap<CompoundId, String> {
        &self.compounds
    }

    pub fn sequences(&self) -> &BTreeMap<SequenceId, String> {
        &self.sequences
    }

    /// Every (compound in R ∪ P, enzyme) pair as a positive.
    pub fn induced_interactions(&self) -> InteractionSet {
        let mut positives = BTreeSet::new();
        for r in &self.reactions {
            for c in r.reactants.union(&r.products) {
                for s in &r.enzymes {
                    positives.insert((c.clone(), s.clone()));
                }
            }
        }
        InteractionSet {
            compounds: Arc::clone(&self.compounds),
            sequences: Arc::clone(&self.sequences),
            positives,
            labeled_negatives: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub unseen_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
            unseen_fraction: 0.05,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(f.is_finite() && f > 0.0) {
                return Err(DataError::InvalidSplit(format!("{name} fraction must be positive, got {f}")));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidSplit(format!("fractions sum to {sum}, expected 1")));
        }
        if !(0.0..=1.0).contains(&self.unseen_fraction) {
            return Err(DataError::InvalidSplit(format!(
                "unseen fraction {} outside [0, 1]",
                self.unseen_fraction
            )));
        }
        Ok(())
    }

    /// Part sizes for `n` items: train and val rounded, test takes the rest.
    fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = ((n as f64 * self.train).round() as usize).min(n);
        let val = ((n as f64 * self.val).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

pub const MIN_SPLIT_POSITIVES: usize = 10;

fn partition<T: Clone + Ord>(items: &BTreeSet<T>, spec: &SplitSpec, seed: u64) -> [BTreeSet<T>; 3] {
    let mut order: Vec<T> = items.iter().cloned().collect();
    order.shuffle(&mut seed::rng(seed));
    let (a, b, _) = spec.sizes(order.len());
    let test = order.split_off(a + b);
    let val = order.split_off(a);
    [order.into_iter().collect(), val.into_iter().collect(), test.into_iter().collect()]
}

/// Seeded partition of the positives (and, independently, the labeled
/// negatives) into train, validation and test sets.
pub fn split(data: &InteractionSet, spec: &SplitSpec) -> Result<(InteractionSet, InteractionSet, InteractionSet), DataError> {
    spec.validate()?;
    if data.positives.len() < MIN_SPLIT_POSITIVES {
        return Err(DataError::TooFewExamples {
            needed: MIN_SPLIT_POSITIVES,
            got: data.positives.len(),
        });
    }
    let [p_train, p_val, p_test] = partition(&data.positives, spec, seed::derive(spec.seed, "split-positives", &[]));
    let [n_train, n_val, n_test] = partition(
        &data.labeled_negatives,
        spec,
        seed::derive(spec.seed, "split-negatives", &[]),
    );
    Ok((
        data.derive(p_train, n_train),
        data.derive(p_val, n_val),
        data.derive(p_test, n_test),
    ))
}

fn least_frequent<K: Ord + Clone>(freq: &BTreeMap<K, usize>, fraction: f64) -> BTreeSet<K> {
    let take = (fraction * freq.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<(&K, usize)> = freq.iter().map(|(k, &n)| (k, n)).collect();
    // BTreeMap iteration is id-ordered and the sort is stable, so ties keep id order.
    order.sort_by_key(|&(_, n)| n);
    order.into_iter().take(take).map(|(k, _)| k.clone()).collect()
}

/// Holds out every pair touching the least frequent compounds and,
/// independently, the least frequent sequences.
pub fn build_unseen_test(data: &InteractionSet, spec: &SplitSpec) -> Result<(InteractionSet, InteractionSet), DataError> {
    spec.validate()?;
    if data.positives.is_empty() {
        return Err(DataError::TooFewExamples { needed: 1, got: 0 });
    }
    let c_freq: BTreeMap<CompoundId, usize> = data
        .partners_by_compound()
        .into_iter()
        .map(|(c, s)| (c, s.len()))
        .collect();
    let s_freq: BTreeMap<SequenceId, usize> = data
        .partners_by_sequence()
        .into_iter()
        .map(|(s, c)| (s, c.len()))
        .collect();
    let c_sel = least_frequent(&c_freq, spec.unseen_fraction);
    let s_sel = least_frequent(&s_freq, spec.unseen_fraction);
    let touches = |(c, s): &Pair| c_sel.contains(c) || s_sel.contains(s);
    let (unseen_pos, reduced_pos): (BTreeSet<Pair>, BTreeSet<Pair>) = data.positives.iter().cloned().partition(touches);
    let (unseen_neg, reduced_neg): (BTreeSet<Pair>, BTreeSet<Pair>) =
        data.labeled_negatives.iter().cloned().partition(touches);
    if reduced_pos.is_empty() {
        return Err(DataError::TooFewExamples { needed: 1, got: 0 });
    }
    Ok((data.derive(reduced_pos, reduced_neg), data.derive(unseen_pos, unseen_neg)))
}

/// All positives labeled 1 followed by `ratio · |positives|` distinct
/// negatives labeled 0.
pub fn sample_negatives(data: &InteractionSet, ratio: usize, seed: u64) -> Result<Vec<LabeledPair>, DataError> {
    sample_negatives_excluding(data, ratio, seed, data.positives())
}

/// Like [`sample_negatives`], drawing compounds and sequences from the
/// whole object maps but never emitting a pair in `forbidden` (which
/// should contain at least `data`'s positives).
pub fn sample_negatives_excluding(
    data: &InteractionSet,
    ratio: usize,
    seed: u64,
    forbidden: &BTreeSet<Pair>,
) -> Result<Vec<LabeledPair>, DataError> {
    let compounds: Vec<&CompoundId> = data.compounds.keys().collect();
    let sequences: Vec<&SequenceId> = data.sequences.keys().collect();
    sample_over(data, &compounds, &sequences, ratio, seed, forbidden)
}

/// Negatives restricted to the compounds and sequences that occur in
/// `data`'s positives.
pub fn sample_negatives_among_members(
    data: &InteractionSet,
    ratio: usize,
    seed: u64,
    forbidden: &BTreeSet<Pair>,
) -> Result<Vec<LabeledPair>, DataError> {
    let by_c = data.partners_by_compound();
    let by_s = data.partners_by_sequence();
    let compounds: Vec<&CompoundId> = by_c.keys().collect();
    let sequences: Vec<&SequenceId> = by_s.keys().collect();
    sample_over(data, &compounds, &sequences, ratio, seed, forbidden)
}

fn sample_over(
    data: &InteractionSet,
    compounds: &[&CompoundId],
    sequences: &[&SequenceId],
    ratio: usize,
    seed: u64,
    forbidden: &BTreeSet<Pair>,
) -> Result<Vec<LabeledPair>, DataError> {
    let needed = ratio * data.positives.len();
    let mut rng = seed::rng(seed);
    let c_set: BTreeSet<&CompoundId> = compounds.iter().copied().collect();
    let s_set: BTreeSet<&SequenceId> = sequences.iter().copied().collect();
    let in_grid = |(c, s): &Pair| c_set.contains(c) && s_set.contains(s);
    let blocked: BTreeSet<&Pair> = forbidden.iter().chain(&data.positives).filter(|p| in_grid(p)).collect();
    let grid = compounds.len() * sequences.len();
    let available = grid - blocked.len();
    if needed > available {
        return Err(DataError::InsufficientNegativeSpace { needed, available });
    }

    let mut out: Vec<LabeledPair> = data
        .positives
        .iter()
        .map(|(c, s)| LabeledPair {
            compound: c.clone(),
            sequence: s.clone(),
            label: 1,
        })
        .collect();
    let mut taken: BTreeSet<Pair> = BTreeSet::new();

    let mut labeled: Vec<&Pair> = data
        .labeled_negatives
        .iter()
        .filter(|p| in_grid(p) && !blocked.contains(p))
        .collect();
    labeled.shuffle(&mut rng);
    let mut order: Vec<Pair> = Vec::with_capacity(needed);
    for p in labeled.into_iter().take(needed) {
        taken.insert(p.clone());
        order.push(p.clone());
    }

    let rest = needed - taken.len();
    if rest > 0 {
        if 2 * rest > available - taken.len() {
            // dense: enumerate the free cells and take a shuffled prefix
            let mut free: Vec<Pair> = Vec::with_capacity(available);
            for c in compounds {
                for s in sequences {
                    let p = ((*c).clone(), (*s).clone());
                    if !blocked.contains(&p) && !taken.contains(&p) {
                        free.push(p);
                    }
                }
            }
            free.shuffle(&mut rng);
            order.extend(free.into_iter().take(rest));
        } else {
            while order.len() < needed {
                let c = compounds[rng.gen_range(0..compounds.len())];
                let s = sequences[rng.gen_range(0..sequences.len())];
                let p = (c.clone(), s.clone());
                if blocked.contains(&p) || taken.contains(&p) {
                    continue;
                }
                taken.insert(p.clone());
                order.push(p);
            }
        }
    }
    out.extend(order.into_iter().map(|(compound, sequence)| LabeledPair {
        compound,
        sequence,
        label: 0,
    }));
    Ok(out)
}
