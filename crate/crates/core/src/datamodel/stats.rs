use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::DataError;

/// Size and overlap summary of a keyed family of object sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataStatistics {
    pub strata: usize,
    pub average_size: f64,
    pub std_size: f64,
    pub max_size: usize,
    pub min_size: usize,
    pub average_sharing: f64,
    pub average_jaccard: f64,
}

/// Size statistics plus the mean intersection size and mean Jaccard
/// similarity over all unordered pairs of strata.
pub fn strata_stats<K, T: Ord>(strata: &BTreeMap<K, BTreeSet<T>>) -> Result<StrataStatistics, DataError> {
    if strata.is_empty() {
        return Err(DataError::EmptyInput);
    }
    let sets: Vec<&BTreeSet<T>> = strata.values().collect();
    let n = sets.len() as f64;
    let sizes: Vec<usize> = sets.iter().map(|s| s.len()).collect();
    let mean = sizes.iter().sum::<usize>() as f64 / n;
    let var = sizes.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n;

    let mut sharing = 0.0;
    let mut jaccard = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let inter = sets[i].intersection(sets[j]).count();
            let union = sets[i].len() + sets[j].len() - inter;
            sharing += inter as f64;
            if union > 0 {
                jaccard += inter as f64 / union as f64;
            }
            pairs += 1;
        }
    }
    let (average_sharing, average_jaccard) = if pairs == 0 {
        (0.0, 0.0)
    } else {
        (sharing / pairs as f64, jaccard / pairs as f64)
    };
    Ok(StrataStatistics {
        strata: sets.len(),
        average_size: mean,
        std_size: var.sqrt(),
        max_size: sizes.iter().copied().max().unwrap_or(0),
        min_size: sizes.iter().copied().min().unwrap_or(0),
        average_sharing,
        average_jaccard,
    })
}
