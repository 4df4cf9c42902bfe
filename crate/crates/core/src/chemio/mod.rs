//! Compound and protein ingestion: SMILES to featurised molecular graphs,
//! residue strings to fixed-length integer codes.

mod elements;
mod fasta;
mod graph;
mod smiles;

use thiserror::Error;

pub use elements::{element_class, ELEMENT_CLASSES, ELEMENT_VOCAB};
pub use fasta::{encode_fasta, residue_code, EncodedSequence, ALPHABET, DEFAULT_LENGTH, PADDING, VOCAB_SIZE};
pub use graph::{
    AtomFeatures, BondFeatures, BondStereo, BondType, Chirality, MolecularGraph, ATOM_FEATURE_WIDTH,
    BOND_FEATURE_WIDTH, NODE_INPUT_WIDTH,
};
pub use smiles::parse_smiles;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChemError {
    #[error("empty input")]
    EmptyInput,
    #[error("SMILES syntax error at {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown residue '{residue}' at position {position}")]
    UnknownResidue { position: usize, residue: char },
    #[error("encoded length must be positive")]
    InvalidLength,
    #[error("invalid molecular graph: {0}")]
    InvalidGraph(String),
}
