//! Congruent view sets keyed by compound, sequence or reaction feature,
//! and contrastive batches drawn from distinct keys.
//!
//! Two objects are congruent views of a key when both are justified by
//! the key's known interactions: two partner sequences of one compound,
//! two partner compounds of one sequence, or the reactant/product,
//! compound/enzyme and enzyme/enzyme pairs of one reaction group.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::datamodel::{CompoundId, InteractionSet, ReactionSet, SequenceId};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StratifyError {
    #[error("unknown keying '{0}'")]
    UnknownKeying(String),
    #[error("batch of {requested} needs that many eligible keys, only {eligible} available")]
    BatchTooLarge { requested: usize, eligible: usize },
    #[error("batch size {0} is degenerate; need at least 2")]
    DegenerateBatch(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Keying {
    Compound,
    Sequence,
    Reaction,
    Rclass,
    Ec,
}

impl Keying {
    pub fn is_reaction_feature(self) -> bool {
        matches!(self, Keying::Reaction | Keying::Rclass | Keying::Ec)
    }

    pub fn name(self) -> &'static str {
        match self {
            Keying::Compound => "compound",
            Keying::Sequence => "sequence",
            Keying::Reaction => "reaction",
            Keying::Rclass => "rclass",
            Keying::Ec => "ec",
        }
    }
}

impl fmt::Display for Keying {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Keying {
    type Err = StratifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "compound" => Ok(Keying::Compound),
            "sequence" => Ok(Keying::Sequence),
            "reaction" => Ok(Keying::Reaction),
            "rclass" => Ok(Keying::Rclass),
            "ec" => Ok(Keying::Ec),
            _ => Err(StratifyError::UnknownKeying(s.to_string())),
        }
    }
}

/// The three views of a reaction group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReactionViews {
    /// Reactant/product pairs.
    pub reaction_pairs: Vec<(CompoundId, CompoundId)>,
    /// Compound/enzyme pairs.
    pub cross_pairs: Vec<(CompoundId, SequenceId)>,
    /// Unordered enzyme pairs.
    pub enzyme_pairs: Vec<(SequenceId, SequenceId)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stratum {
    Compound {
        compound: CompoundId,
        pairs: Vec<(SequenceId, SequenceId)>,
    },
    Sequence {
        sequence: SequenceId,
        pairs: Vec<(CompoundId, CompoundId)>,
    },
    Reaction(ReactionViews),
}

impl Stratum {
    /// Number of distinct view tuples.
    pub fn tuple_count(&self) -> usize {
        match self {
            Stratum::Compound { pairs, .. } => pairs.len(),
            Stratum::Sequence { pairs, .. } => pairs.len(),
            Stratum::Reaction(v) => v.reaction_pairs.len() * v.cross_pairs.len() * v.enzyme_pairs.len(),
        }
    }

    /// Distinct objects named by the stratum, prefixed `c:` or `s:`.
    pub fn objects(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        match self {
            Stratum::Compound { pairs, .. } => {
                for (a, b) in pairs {
                    out.insert(format!("s:{a}"));
                    out.insert(format!("s:{b}"));
                }
            }
            Stratum::Sequence { pairs, .. } => {
                for (a, b) in pairs {
                    out.insert(format!("c:{a}"));
                    out.insert(format!("c:{b}"));
                }
            }
            Stratum::Reaction(v) => {
                for (c, s) in &v.cross_pairs {
                    out.insert(format!("c:{c}"));
                    out.insert(format!("s:{s}"));
                }
            }
        }
        out
    }

    fn views_json(&self) -> serde_json::Value {
        match self {
            Stratum::Compound { compound, pairs } => {
                json!(pairs.iter().map(|(a, b)| json!([compound, [a, b]])).collect::<Vec<_>>())
            }
            Stratum::Sequence { sequence, pairs } => {
                json!(pairs.iter().map(|(a, b)| json!([[a, b], sequence])).collect::<Vec<_>>())
            }
            Stratum::Reaction(v) => json!([v.reaction_pairs, v.cross_pairs, v.enzyme_pairs]),
        }
    }
}

/// One sampled tuple of congruent views.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewTuple {
    Compound {
        compound: CompoundId,
        sequences: (SequenceId, SequenceId),
    },
    Sequence {
        compounds: (CompoundId, CompoundId),
        sequence: SequenceId,
    },
    Reaction {
        reaction_pair: (CompoundId, CompoundId),
        cross_pair: (CompoundId, SequenceId),
        enzyme_pair: (SequenceId, SequenceId),
    },
}

impl ViewTuple {
    pub fn arity(&self) -> usize {
        match self {
            ViewTuple::Reaction { .. } => 3,
            _ => 2,
        }
    }
}

/// Strata keyed by the string form of the key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CongruentViewSet {
    pub keying: Keying,
    pub strata: BTreeMap<String, Stratum>,
}

impl CongruentViewSet {
    /// Keys whose stratum holds at least one tuple, in key order.
    pub fn eligible_keys(&self) -> Vec<&str> {
        self.strata
            .iter()
            .filter(|(_, s)| s.tuple_count() > 0)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn total_tuples(&self) -> usize {
        self.strata.values().map(Stratum::tuple_count).sum()
    }

    /// Object sets per key, for strata statistics.
    pub fn object_sets(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.strata.iter().map(|(k, s)| (k.clone(), s.objects())).collect()
    }

    /// One `{"key", "views"}` JSON object per stratum.
    pub fn write_json_lines<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (key, stratum) in &self.strata {
            let line = json!({ "key": key, "views": stratum.views_json() });
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

fn unordered_pairs<T: Clone + Ord>(items: &BTreeSet<T>) -> Vec<(T, T)> {
    let v: Vec<&T> = items.iter().collect();
    let mut out = Vec::with_capacity(v.len() * v.len().saturating_sub(1) / 2);
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            out.push((v[i].clone(), v[j].clone()));
        }
    }
    out
}

/// For every compound with at least two partner sequences, all unordered
/// partner pairs.
pub fn stratify_by_compound(data: &InteractionSet) -> CongruentViewSet {
    let strata = data
        .partners_by_compound()
        .into_iter()
        .filter(|(_, partners)| partners.len() >= 2)
        .map(|(c, partners)| {
            let pairs = unordered_pairs(&partners);
            (c.0.clone(), Stratum::Compound { compound: c, pairs })
        })
        .collect();
    CongruentViewSet {
        keying: Keying::Compound,
        strata,
    }
}

/// Mirror of [`stratify_by_compound`] keyed by sequence.
pub fn stratify_by_sequence(data: &InteractionSet) -> CongruentViewSet {
    let strata = data
        .partners_by_sequence()
        .into_iter()
        .filter(|(_, partners)| partners.len() >= 2)
        .map(|(s, partners)| {
            let pairs = unordered_pairs(&partners);
            (s.0.clone(), Stratum::Sequence { sequence: s, pairs })
        })
        .collect();
    CongruentViewSet {
        keying: Keying::Sequence,
        strata,
    }
}

#[derive(Default)]
struct Group {
    reaction_pairs: BTreeSet<(CompoundId, CompoundId)>,
    cross_pairs: BTreeSet<(CompoundId, SequenceId)>,
    enzymes: BTreeSet<SequenceId>,
}

/// Reaction groups keyed by reaction id, RCLASS label or EC number. A
/// group's views are the unions over its member reactions; enzyme pairs
/// are drawn from the union of member enzymes, with the self-pair used
/// only when that union has one element.
pub fn stratify_by_reaction_feature(data: &ReactionSet, keying: Keying) -> Result<CongruentViewSet, StratifyError> {
    let mut groups: BTreeMap<String, Group> = BTreeMap::new();
    for r in data.reactions() {
        let keys: Vec<&String> = match keying {
            Keying::Reaction => vec![&r.id],
            Keying::Rclass => r.rclass.iter().collect(),
            Keying::Ec => r.ec.iter().collect(),
            other => return Err(StratifyError::UnknownKeying(other.to_string())),
        };
        for key in keys {
            let g = groups.entry(key.clone()).or_default();
            for a in &r.reactants {
                for b in &r.products {
                    g.reaction_pairs.insert((a.clone(), b.clone()));
                }
            }
            for c in r.reactants.union(&r.products) {
                for s in &r.enzymes {
                    g.cross_pairs.insert((c.clone(), s.clone()));
                }
            }
            g.enzymes.extend(r.enzymes.iter().cloned());
        }
    }
    let strata = groups
        .into_iter()
        .map(|(key, g)| {
            let enzyme_pairs = if g.enzymes.len() == 1 {
                let s = g.enzymes.iter().next().cloned().unwrap();
                vec![(s.clone(), s)]
            } else {
                unordered_pairs(&g.enzymes)
            };
            let views = ReactionViews {
                reaction_pairs: g.reaction_pairs.into_iter().collect(),
                cross_pairs: g.cross_pairs.into_iter().collect(),
                enzyme_pairs,
            };
            (key, Stratum::Reaction(views))
        })
        .collect();
    Ok(CongruentViewSet { keying, strata })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub key: String,
    pub tuple: ViewTuple,
}

/// `k` tuples from `k` distinct keys; every other entry in the batch is a
/// non-congruent view for a given entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveBatch {
    pub keying: Keying,
    pub entries: Vec<BatchEntry>,
}

impl ContrastiveBatch {
    pub fn k(&self) -> usize {
        self.entries.len()
    }
}

/// Samples `k` distinct eligible keys uniformly without replacement and one
/// tuple uniformly from each chosen stratum.
pub fn sample_batch(views: &CongruentViewSet, k: usize, seed: u64) -> Result<ContrastiveBatch, StratifyError> {
    if k < 2 {
        return Err(StratifyError::DegenerateBatch(k));
    }
    let keys = views.eligible_keys();
    if keys.len() < k {
        return Err(StratifyError::BatchTooLarge {
            requested: k,
            eligible: keys.len(),
        });
    }
    let mut rng = seed::rng(seed);
    let chosen = index::sample(&mut rng, keys.len(), k);
    let entries = chosen
        .into_iter()
        .map(|i| {
            let key = keys[i];
            let tuple = match &views.strata[key] {
                Stratum::Compound { compound, pairs } => ViewTuple::Compound {
                    compound: compound.clone(),
                    sequences: pairs[rng.gen_range(0..pairs.len())].clone(),
                },
                Stratum::Sequence { sequence, pairs } => ViewTuple::Sequence {
                    compounds: pairs[rng.gen_range(0..pairs.len())].clone(),
                    sequence: sequence.clone(),
                },
                Stratum::Reaction(v) => ViewTuple::Reaction {
                    reaction_pair: v.reaction_pairs[rng.gen_range(0..v.reaction_pairs.len())].clone(),
                    cross_pair: v.cross_pairs[rng.gen_range(0..v.cross_pairs.len())].clone(),
                    enzyme_pair: v.enzyme_pairs[rng.gen_range(0..v.enzyme_pairs.len())].clone(),
                },
            };
            BatchEntry {
                key: key.to_string(),
                tuple,
            }
        })
        .collect();
    Ok(ContrastiveBatch {
        keying: views.keying,
        entries,
    })
}
