use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CompoundId, DataError, InteractionSet, Reaction, ReactionSet, SequenceId};
use crate::chemio::{encode_fasta, parse_smiles};

const INTERACTION_HEADER: [&str; 5] = ["compound_id", "smiles", "sequence_id", "fasta", "label"];

/// Counts gathered while loading an interaction file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows: usize,
    pub positives: usize,
    pub labeled_negatives: usize,
    pub duplicates: usize,
    pub compounds: usize,
    pub sequences: usize,
}

fn open(path: &Path) -> Result<BufReader<File>, DataError> {
    File::open(path).map(BufReader::new).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_lines<R: BufRead>(reader: R, name: &str) -> Result<Vec<(usize, String)>, DataError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: name.to_string(),
            source,
        })?;
        let line = line.trim_end_matches('\r');
        if !line.trim().is_empty() {
            out.push((i + 1, line.to_string()));
        }
    }
    Ok(out)
}

fn schema(line: usize, message: impl Into<String>) -> DataError {
    DataError::Schema {
        line,
        message: message.into(),
    }
}

fn check_smiles(line: usize, id: &str, smiles: &str) -> Result<(), DataError> {
    parse_smiles(smiles)
        .map(|_| ())
        .map_err(|e| schema(line, format!("compound '{id}': {e}")))
}

fn check_fasta(line: usize, id: &str, fasta: &str) -> Result<(), DataError> {
    encode_fasta(fasta, 1)
        .map(|_| ())
        .map_err(|e| schema(line, format!("sequence '{id}': {e}")))
}

/// Records a definition, keeping the first and rejecting conflicting ones.
fn define<K: Ord + Clone>(map: &mut BTreeMap<K, String>, key: K, value: &str, line: usize, what: &str) -> Result<bool, DataError>
where
    K: std::fmt::Display,
{
    match map.get(&key) {
        Some(existing) if existing != value => Err(schema(line, format!("conflicting redefinition of {what} '{key}'"))),
        Some(_) => Ok(false),
        None => {
            map.insert(key, value.to_string());
            Ok(true)
        }
    }
}

pub fn load_interactions(path: impl AsRef<Path>) -> Result<(InteractionSet, LoadReport), DataError> {
    let path = path.as_ref();
    read_interactions(open(path)?)
}

/// Parses the tab-separated interaction format. Object definitions may
/// appear on any row referencing the id; rows may leave them empty.
pub fn read_interactions<R: BufRead>(reader: R) -> Result<(InteractionSet, LoadReport), DataError> {
    let lines = read_lines(reader, "interactions")?;
    let Some((header_line, header)) = lines.first() else {
        return Err(DataError::EmptyInput);
    };
    let cols: Vec<&str> = header.split('\t').collect();
    if cols != INTERACTION_HEADER {
        return Err(schema(*header_line, format!("expected header '{}'", INTERACTION_HEADER.join("\\t"))));
    }

    let mut rows = Vec::with_capacity(lines.len() - 1);
    let mut compounds = BTreeMap::new();
    let mut sequences = BTreeMap::new();
    for (line, text) in &lines[1..] {
        let f: Vec<&str> = text.split('\t').map(str::trim).collect();
        if f.len() != 5 {
            return Err(schema(*line, format!("expected 5 columns, found {}", f.len())));
        }
        if f[0].is_empty() || f[2].is_empty() {
            return Err(schema(*line, "empty id"));
        }
        let label = match f[4] {
            "1" => 1u8,
            "0" => 0u8,
            other => return Err(schema(*line, format!("label must be 0 or 1, found '{other}'"))),
        };
        if !f[1].is_empty() && define(&mut compounds, CompoundId(f[0].into()), f[1], *line, "compound")? {
            check_smiles(*line, f[0], f[1])?;
        }
        if !f[3].is_empty() && define(&mut sequences, SequenceId(f[2].into()), f[3], *line, "sequence")? {
            check_fasta(*line, f[2], f[3])?;
        }
        rows.push((*line, CompoundId(f[0].into()), SequenceId(f[2].into()), label));
    }

    let mut report = LoadReport {
        rows: rows.len(),
        ..LoadReport::default()
    };
    let mut labels: BTreeMap<(CompoundId, SequenceId), u8> = BTreeMap::new();
    for (line, c, s, label) in rows {
        if !compounds.contains_key(&c) {
            return Err(DataError::DanglingReference { line, id: c.0 });
        }
        if !sequences.contains_key(&s) {
            return Err(DataError::DanglingReference { line, id: s.0 });
        }
        let key = (c, s);
        match labels.get(&key) {
            Some(&l) if l == label => report.duplicates += 1,
            Some(_) => {
                return Err(schema(
                    line,
                    format!("pair ({}, {}) labeled both positive and negative", key.0, key.1),
                ))
            }
            None => {
                labels.insert(key, label);
            }
        }
    }
    let mut positives = BTreeSet::new();
    let mut negatives = BTreeSet::new();
    for (pair, label) in labels {
        if label == 1 {
            positives.insert(pair);
        } else {
            negatives.insert(pair);
        }
    }
    report.positives = positives.len();
    report.labeled_negatives = negatives.len();
    report.compounds = compounds.len();
    report.sequences = sequences.len();
    Ok((InteractionSet::new(compounds, sequences, positives, negatives)?, report))
}

/// Writes positives (label 1) then labeled negatives (label 0), each row
/// carrying full object definitions.
pub fn write_interactions<W: Write>(set: &InteractionSet, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", INTERACTION_HEADER.join("\t"))?;
    for (pairs, label) in [(set.positives(), 1), (set.labeled_negatives(), 0)] {
        for (c, s) in pairs {
            writeln!(out, "{c}\t{}\t{s}\t{}\t{label}", set.compounds()[c], set.sequences()[s])?;
        }
    }
    Ok(())
}

fn read_objects<R: BufRead, K>(reader: R, name: &str, value_col: &str, make: impl Fn(&str) -> K) -> Result<BTreeMap<K, String>, DataError>
where
    K: Ord + Clone + std::fmt::Display,
{
    let lines = read_lines(reader, name)?;
    let Some((header_line, header)) = lines.first() else {
        return Err(DataError::EmptyInput);
    };
    if header.split('\t').collect::<Vec<_>>() != ["id", value_col] {
        return Err(schema(*header_line, format!("{name}: expected header 'id\\t{value_col}'")));
    }
    let mut map = BTreeMap::new();
    for (line, text) in &lines[1..] {
        let f: Vec<&str> = text.split('\t').map(str::trim).collect();
        if f.len() != 2 {
            return Err(schema(*line, format!("{name}: expected 2 columns, found {}", f.len())));
        }
        if f[0].is_empty() || f[1].is_empty() {
            return Err(schema(*line, format!("{name}: empty field")));
        }
        if define(&mut map, make(f[0]), f[1], *line, name)? {
            if value_col == "smiles" {
                check_smiles(*line, f[0], f[1])?;
            } else {
                check_fasta(*line, f[0], f[1])?;
            }
        }
    }
    Ok(map)
}

/// Loads `reactions.jsonl` together with the sibling `compounds.tsv` and
/// `sequences.tsv`, returning the reactions and their induced interactions.
pub fn load_reactions(path: impl AsRef<Path>) -> Result<(ReactionSet, InteractionSet), DataError> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let compounds = open(&dir.join("compounds.tsv"))?;
    let sequences = open(&dir.join("sequences.tsv"))?;
    read_reactions(open(path)?, compounds, sequences)
}

pub fn read_reactions<R1: BufRead, R2: BufRead, R3: BufRead>(
    reactions: R1,
    compounds: R2,
    sequences: R3,
) -> Result<(ReactionSet, InteractionSet), DataError> {
    let compounds = read_objects(compounds, "compounds", "smiles", |s| CompoundId(s.into()))?;
    let sequences = read_objects(sequences, "sequences", "fasta", |s| SequenceId(s.into()))?;
    let mut list = Vec::new();
    for (line, text) in read_lines(reactions, "reactions")? {
        let r: Reaction = serde_json::from_str(&text).map_err(|e| schema(line, e.to_string()))?;
        if r.id.is_empty() {
            return Err(schema(line, "empty reaction id"));
        }
        list.push(r);
    }
    let set = ReactionSet::new(compounds, sequences, list)?;
    let induced = set.induced_interactions();
    Ok((set, induced))
}

/// Writes `reactions.jsonl`, `compounds.tsv` and `sequences.tsv` into `dir`.
pub fn write_reactions(set: &ReactionSet, dir: &Path) -> std::io::Result<()> {
    let mut r = std::io::BufWriter::new(File::create(dir.join("reactions.jsonl"))?);
    for reaction in set.reactions() {
        writeln!(r, "{}", serde_json::to_string(reaction)?)?;
    }
    r.flush()?;
    let mut c = std::io::BufWriter::new(File::create(dir.join("compounds.tsv"))?);
    writeln!(c, "id\tsmiles")?;
    for (id, smiles) in set.compounds() {
        writeln!(c, "{id}\t{smiles}")?;
    }
    c.flush()?;
    let mut s = std::io::BufWriter::new(File::create(dir.join("sequences.tsv"))?);
    writeln!(s, "id\tfasta")?;
    for (id, fasta) in set.sequences() {
        writeln!(s, "{id}\t{fasta}")?;
    }
    s.flush()
}
