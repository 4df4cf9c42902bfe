//! Ranking metrics over scored, labeled items.
//!
//! Items are ranked by descending score with a stable sort, so equal
//! scores keep their input order. Per-group metrics skip groups without a
//! positive and report how many were skipped.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::LabeledPair;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("no positive items")]
    NoPositives,
    #[error("no group has a positive item")]
    NoEligibleGroups,
    #[error("empty scored set")]
    Empty,
    #[error("{pairs} pairs but {scores} scores")]
    LengthMismatch { pairs: usize, scores: usize },
    #[error("score is not finite")]
    NonFiniteScore,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoredSet {
    pub items: Vec<(f64, bool)>,
}

impl ScoredSet {
    pub fn new(items: Vec<(f64, bool)>) -> Self {
        Self { items }
    }

    pub fn from_parts(scores: &[f64], labels: &[bool]) -> Self {
        Self {
            items: scores.iter().copied().zip(labels.iter().copied()).collect(),
        }
    }

    pub fn positives(&self) -> usize {
        self.items.iter().filter(|(_, y)| *y).count()
    }

    /// Labels in rank order.
    pub fn ranked_labels(&self) -> Vec<bool> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.sort_by(|&a, &b| self.items[b].0.total_cmp(&self.items[a].0));
        order.into_iter().map(|i| self.items[i].1).collect()
    }
}

fn ap_of_ranked(labels: &[bool], cutoff: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &y) in labels.iter().take(cutoff).enumerate() {
        if y {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Mean over positives of the precision at each positive's rank.
pub fn average_precision(set: &ScoredSet) -> Result<f64, MetricError> {
    if set.positives() == 0 {
        return Err(MetricError::NoPositives);
    }
    Ok(ap_of_ranked(&set.ranked_labels(), usize::MAX))
}

/// Fraction of the top-R items that are positive, R being the positive count.
pub fn r_precision(set: &ScoredSet) -> Result<f64, MetricError> {
    let r = set.positives();
    if r == 0 {
        return Err(MetricError::NoPositives);
    }
    let hits = set.ranked_labels().iter().take(r).filter(|&&y| y).count();
    Ok(hits as f64 / r as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupMetric {
    AveragePrecision,
    RPrecision,
}

/// Mean of a per-group metric over groups with positives, with the number
/// of groups skipped for lacking one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupedValue {
    pub value: f64,
    pub groups: usize,
    pub skipped: usize,
}

/// Averages `metric` over eligible groups. With `at_k`, average precision is
/// computed over the top `k` items only, counting the positives found there;
/// a group with none there scores 0.
pub fn grouped_metric(sets: &[ScoredSet], metric: GroupMetric, at_k: Option<usize>) -> Result<GroupedValue, MetricError> {
    let mut values = Vec::new();
    let mut skipped = 0;
    for set in sets {
        if set.positives() == 0 {
            skipped += 1;
            continue;
        }
        let v = match (metric, at_k) {
            (GroupMetric::AveragePrecision, None) => average_precision(set)?,
            (GroupMetric::AveragePrecision, Some(k)) => ap_of_ranked(&set.ranked_labels(), k),
            (GroupMetric::RPrecision, None) => r_precision(set)?,
            (GroupMetric::RPrecision, Some(k)) => {
                let r = set.positives().min(k);
                set.ranked_labels().iter().take(r).filter(|&&y| y).count() as f64 / r as f64
            }
        };
        values.push(v);
    }
    if values.is_empty() {
        return Err(MetricError::NoEligibleGroups);
    }
    Ok(GroupedValue {
        value: values.iter().sum::<f64>() / values.len() as f64,
        groups: values.len(),
        skipped,
    })
}

/// Fraction of eligible groups whose top-ranked item is positive.
pub fn precision_at_1(sets: &[ScoredSet]) -> Result<GroupedValue, MetricError> {
    let mut hits = 0usize;
    let mut groups = 0usize;
    let mut skipped = 0usize;
    for set in sets {
        if set.positives() == 0 {
            skipped += 1;
            continue;
        }
        groups += 1;
        if set.ranked_labels()[0] {
            hits += 1;
        }
    }
    if groups == 0 {
        return Err(MetricError::NoEligibleGroups);
    }
    Ok(GroupedValue {
        value: hits as f64 / groups as f64,
        groups,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub ap: f64,
    pub r_precision: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupedMetrics {
    pub map: f64,
    pub r_precision: f64,
    pub map_at_3: f64,
    pub precision_at_1: f64,
    pub groups: usize,
    pub skipped_groups: usize,
}

/// Overall, per-compound and per-sequence metrics for one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub items: usize,
    pub positives: usize,
    pub overall: OverallMetrics,
    pub by_compound: Option<GroupedMetrics>,
    pub by_sequence: Option<GroupedMetrics>,
}

fn grouped(sets: &[ScoredSet]) -> Result<Option<GroupedMetrics>, MetricError> {
    let map = match grouped_metric(sets, GroupMetric::AveragePrecision, None) {
        Ok(v) => v,
        Err(MetricError::NoEligibleGroups) => return Ok(None),
        Err(e) => return Err(e),
    };
    Ok(Some(GroupedMetrics {
        map: map.value,
        r_precision: grouped_metric(sets, GroupMetric::RPrecision, None)?.value,
        map_at_3: grouped_metric(sets, GroupMetric::AveragePrecision, Some(3))?.value,
        precision_at_1: precision_at_1(sets)?.value,
        groups: map.groups,
        skipped_groups: map.skipped,
    }))
}

/// Scores `pairs` as one flat set and grouped by compound and by sequence.
/// Groups keep the input order of their items.
pub fn evaluate(pairs: &[LabeledPair], scores: &[f64]) -> Result<MetricReport, MetricError> {
    if pairs.len() != scores.len() {
        return Err(MetricError::LengthMismatch {
            pairs: pairs.len(),
            scores: scores.len(),
        });
    }
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFiniteScore);
    }
    let flat = ScoredSet::new(scores.iter().zip(pairs).map(|(&s, p)| (s, p.label == 1)).collect());
    let mut by_c: BTreeMap<&str, ScoredSet> = BTreeMap::new();
    let mut by_s: BTreeMap<&str, ScoredSet> = BTreeMap::new();
    for (p, &s) in pairs.iter().zip(scores) {
        by_c.entry(&p.compound.0).or_default().items.push((s, p.label == 1));
        by_s.entry(&p.sequence.0).or_default().items.push((s, p.label == 1));
    }
    let by_c: Vec<ScoredSet> = by_c.into_values().collect();
    let by_s: Vec<ScoredSet> = by_s.into_values().collect();
    Ok(MetricReport {
        items: pairs.len(),
        positives: flat.positives(),
        overall: OverallMetrics {
            ap: average_precision(&flat)?,
            r_precision: r_precision(&flat)?,
        },
        by_compound: grouped(&by_c)?,
        by_sequence: grouped(&by_s)?,
    })
}
