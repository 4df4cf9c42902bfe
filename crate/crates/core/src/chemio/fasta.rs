use serde::{Deserialize, Serialize};

use super::ChemError;

/// Residue alphabet: the 20 standard amino acids followed by the
/// ambiguity and rare codes. Code `i + 1` is assigned to `ALPHABET[i]`;
/// code 0 is padding.
pub const ALPHABET: &[u8; 26] = b"ACDEFGHIKLMNPQRSTVWYBZJUOX";

/// Number of distinct codes including padding.
pub const VOCAB_SIZE: usize = ALPHABET.len() + 1;

pub const DEFAULT_LENGTH: usize = 1000;

pub const PADDING: u8 = 0;

/// Fixed-length integer encoding of a protein sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSequence {
    codes: Vec<u8>,
    original_length: usize,
}

pub fn residue_code(residue: char) -> Option<u8> {
    let upper = residue.to_ascii_uppercase();
    if !upper.is_ascii() {
        return None;
    }
    ALPHABET
        .iter()
        .position(|&c| c == upper as u8)
        .map(|i| (i + 1) as u8)
}

/// Encodes `residues` (case-insensitive) into `length` codes, truncating
/// longer inputs and zero-padding shorter ones.
pub fn encode_fasta(residues: &str, length: usize) -> Result<EncodedSequence, ChemError> {
    if residues.is_empty() {
        return Err(ChemError::EmptyInput);
    }
    if length == 0 {
        return Err(ChemError::InvalidLength);
    }
    let mut codes = vec![PADDING; length];
    let mut original_length = 0;
    for (i, ch) in residues.chars().enumerate() {
        let code = residue_code(ch).ok_or(ChemError::UnknownResidue {
            position: i,
            residue: ch,
        })?;
        if i < length {
            codes[i] = code;
        }
        original_length += 1;
    }
    Ok(EncodedSequence {
        codes,
        original_length,
    })
}

impl EncodedSequence {
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    /// Codes as embedding-table row indices.
    pub fn indices(&self) -> Vec<usize> {
        self.codes.iter().map(|&c| usize::from(c)).collect()
    }

    /// Residues of the unpadded prefix, uppercase.
    pub fn decode(&self) -> String {
        self.codes
            .iter()
            .take_while(|&&c| c != PADDING)
            .map(|&c| ALPHABET[usize::from(c) - 1] as char)
            .collect()
    }
}
