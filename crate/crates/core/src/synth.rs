//! Seeded generator of interaction data with planted block structure.
//!
//! Every block has a core scaffold shared by its compounds and a residue
//! motif shared by its sequences. Inside a block, objects also carry one of
//! a few variants: a functional group on the compound side and a second
//! motif on the sequence side. Compounds prefer partners of their own block
//! and variant; with probability `noise` a partner is drawn uniformly from
//! all sequences instead.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datamodel::{CompoundId, DataError, InteractionSet, Pair, Reaction, ReactionSet, SequenceId};
use crate::seed;

const SCAFFOLDS: [&str; 8] = [
    "c1ccccc1", "C1CCNCC1", "c1ccncc1", "C1CCOC1", "c1ccsc1", "C1CCCCC1", "C1COCCN1", "c1ccoc1",
];
const GROUPS: [&str; 8] = ["C(=O)O", "C#N", "Cl", "S", "F", "Br", "I", "P"];
const RESIDUES: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";
const BLOCK_MOTIF: usize = 8;
const VARIANT_MOTIF: usize = 6;
const MIN_LENGTH: usize = 30;
const MAX_LENGTH: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub blocks: usize,
    pub compounds_per_block: usize,
    pub sequences_per_block: usize,
    /// Variants per block; objects of one variant prefer each other.
    pub variants: usize,
    /// Partner draws per compound.
    pub partners: usize,
    pub noise: f64,
    /// Reactions per block; zero skips the reaction bundle.
    pub reactions_per_block: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            compounds_per_block: 15,
            sequences_per_block: 15,
            variants: 3,
            partners: 6,
            noise: 0.05,
            reactions_per_block: 10,
            seed: 0,
        }
    }
}

impl PlantedConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(m));
        if !(2..=SCAFFOLDS.len()).contains(&self.blocks) {
            return bad(format!("blocks must be in 2..={}, got {}", SCAFFOLDS.len(), self.blocks));
        }
        if !(1..=GROUPS.len()).contains(&self.variants) {
            return bad(format!("variants must be in 1..={}, got {}", GROUPS.len(), self.variants));
        }
        if self.compounds_per_block < self.variants || self.sequences_per_block < self.variants {
            return bad("every variant needs at least one compound and one sequence per block".into());
        }
        if self.partners == 0 {
            return bad("partners must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise must be in [0, 1], got {}", self.noise));
        }
        Ok(())
    }
}

/// Generated data with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedBundle {
    pub interactions: InteractionSet,
    pub reactions: Option<ReactionSet>,
    pub compound_blocks: BTreeMap<CompoundId, usize>,
    pub sequence_blocks: BTreeMap<SequenceId, usize>,
    pub compound_variants: BTreeMap<CompoundId, usize>,
    pub sequence_variants: BTreeMap<SequenceId, usize>,
}

impl PlantedBundle {
    /// Tab-separated `kind, id, block, variant` rows.
    pub fn labels_tsv(&self) -> String {
        let mut out = String::from("kind\tid\tblock\tvariant\n");
        for (id, b) in &self.compound_blocks {
            out.push_str(&format!("compound\t{id}\t{b}\t{}\n", self.compound_variants[id]));
        }
        for (id, b) in &self.sequence_blocks {
            out.push_str(&format!("sequence\t{id}\t{b}\t{}\n", self.sequence_variants[id]));
        }
        out
    }
}

fn random_residues(rng: &mut seed::Rng, n: usize) -> String {
    (0..n).map(|_| RESIDUES[rng.gen_range(0..RESIDUES.len())] as char).collect()
}

/// Random residues with both motifs inserted at random, non-overlapping
/// positions.
fn planted_sequence(rng: &mut seed::Rng, block_motif: &str, variant_motif: &str) -> String {
    let len = rng.gen_range(MIN_LENGTH..=MAX_LENGTH);
    let filler = len - block_motif.len() - variant_motif.len();
    let mut parts = [block_motif, variant_motif];
    if rng.gen_bool(0.5) {
        parts.swap(0, 1);
    }
    let a = rng.gen_range(0..=filler);
    let b = rng.gen_range(0..=filler - a);
    let c = filler - a - b;
    let mut out = random_residues(rng, a);
    out.push_str(parts[0]);
    out.push_str(&random_residues(rng, b));
    out.push_str(parts[1]);
    out.push_str(&random_residues(rng, c));
    out
}

pub fn generate(config: &PlantedConfig) -> Result<PlantedBundle, DataError> {
    config.validate()?;
    let mut rng = seed::rng(config.seed);
    let v = config.variants;

    let mut compounds = BTreeMap::new();
    let mut compound_blocks = BTreeMap::new();
    let mut compound_variants = BTreeMap::new();
    let mut by_class: BTreeMap<(usize, usize), Vec<CompoundId>> = BTreeMap::new();
    for b in 0..config.blocks {
        for i in 0..config.compounds_per_block {
            let (variant, chain) = (i % v, i / v + 1);
            let id = CompoundId(format!("C{b}_{i:03}"));
            let smiles = format!("{}{}{}", SCAFFOLDS[b], "C".repeat(chain), GROUPS[variant]);
            compounds.insert(id.clone(), smiles);
            compound_blocks.insert(id.clone(), b);
            compound_variants.insert(id.clone(), variant);
            by_class.entry((b, variant)).or_default().push(id);
        }
    }

    let block_motifs: Vec<String> = (0..config.blocks).map(|_| random_residues(&mut rng, BLOCK_MOTIF)).collect();
    let variant_motifs: Vec<Vec<String>> = (0..config.blocks)
        .map(|_| (0..v).map(|_| random_residues(&mut rng, VARIANT_MOTIF)).collect())
        .collect();
    let mut sequences = BTreeMap::new();
    let mut sequence_blocks = BTreeMap::new();
    let mut sequence_variants = BTreeMap::new();
    let mut seq_class: BTreeMap<(usize, usize), Vec<SequenceId>> = BTreeMap::new();
    let mut seq_block: Vec<Vec<SequenceId>> = vec![Vec::new(); config.blocks];
    for b in 0..config.blocks {
        for j in 0..config.sequences_per_block {
            let variant = j % v;
            let id = SequenceId(format!("S{b}_{j:03}"));
            sequences.insert(
                id.clone(),
                planted_sequence(&mut rng, &block_motifs[b], &variant_motifs[b][variant]),
            );
            sequence_blocks.insert(id.clone(), b);
            sequence_variants.insert(id.clone(), variant);
            seq_class.entry((b, variant)).or_default().push(id.clone());
            seq_block[b].push(id);
        }
    }
    let all_sequences: Vec<SequenceId> = sequences.keys().cloned().collect();

    // four in five structured draws stay within the variant
    let mut positives: BTreeSet<Pair> = BTreeSet::new();
    for (c, &b) in &compound_blocks {
        let variant = compound_variants[c];
        for _ in 0..config.partners {
            let s = if rng.gen_bool(config.noise) {
                all_sequences.choose(&mut rng)
            } else if rng.gen_bool(0.8) {
                seq_class[&(b, variant)].choose(&mut rng)
            } else {
                seq_block[b].choose(&mut rng)
            };
            positives.insert((c.clone(), s.expect("non-empty pool").clone()));
        }
    }

    let reactions = if config.reactions_per_block == 0 {
        None
    } else {
        let mut list = Vec::new();
        for b in 0..config.blocks {
            for i in 0..config.reactions_per_block {
                let variant = rng.gen_range(0..v);
                let pool = &by_class[&(b, variant)];
                let mut picked: Vec<CompoundId> = pool.clone();
                picked.shuffle(&mut rng);
                let (reactants, products) = if picked.len() >= 2 {
                    let split = rng.gen_range(1..picked.len().min(4));
                    let end = (split + rng.gen_range(1..=2)).min(picked.len());
                    (picked[..split].to_vec(), picked[split..end].to_vec())
                } else {
                    // a lone compound of its class reacts into a block sibling
                    let other = by_class[&(b, (variant + 1) % v)].choose(&mut rng).expect("non-empty class");
                    (picked.clone(), vec![other.clone()])
                };
                let mut enzymes = BTreeSet::new();
                for _ in 0..rng.gen_range(1..=2) {
                    let s = if rng.gen_bool(config.noise) {
                        all_sequences.choose(&mut rng)
                    } else {
                        seq_class[&(b, variant)].choose(&mut rng)
                    };
                    enzymes.insert(s.expect("non-empty pool").clone());
                }
                list.push(Reaction {
                    id: format!("R{b}_{i:03}"),
                    reactants: reactants.into_iter().collect(),
                    products: products.into_iter().collect(),
                    enzymes,
                    rclass: BTreeSet::from([format!("RC{b}_{variant}")]),
                    ec: BTreeSet::from([format!("{}.1.{variant}.{i}", b + 1)]),
                });
            }
        }
        Some(ReactionSet::new(compounds.clone(), sequences.clone(), list)?)
    };

    Ok(PlantedBundle {
        interactions: InteractionSet::new(compounds, sequences, positives, BTreeSet::new())?,
        reactions,
        compound_blocks,
        sequence_blocks,
        compound_variants,
        sequence_variants,
    })
}
