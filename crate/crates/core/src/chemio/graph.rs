use serde::{Deserialize, Serialize};

use super::elements::ELEMENT_CLASSES;
use super::ChemError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Chirality {
    Unspecified,
    /// `@`
    CounterClockwise,
    /// `@@`
    Clockwise,
    /// `@TH1`, `@SP2`, ... collapsed to one category.
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BondType {
    Single,
    Double,
    Triple,
    Aromatic,
}

/// Directional cis/trans marks as written (`/` or `\`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BondStereo {
    None,
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomFeatures {
    pub symbol: String,
    pub element_class: usize,
    pub atomic_mass: f64,
    pub valence: u8,
    pub in_ring: bool,
    pub formal_charge: i8,
    pub radical_electrons: u8,
    pub chirality: Chirality,
    pub degree: u8,
    pub num_hydrogens: u8,
    pub aromatic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BondFeatures {
    pub bond_type: BondType,
    pub in_ring: bool,
    pub conjugated: bool,
    pub stereo: BondStereo,
}

const VALENCE_SLOTS: usize = 7;
const CHARGE_SLOTS: usize = 5;
const CHIRALITY_SLOTS: usize = 4;
const DEGREE_SLOTS: usize = 6;
const HYDROGEN_SLOTS: usize = 5;

/// Width of [`AtomFeatures::to_vector`].
pub const ATOM_FEATURE_WIDTH: usize = ELEMENT_CLASSES
    + 1
    + VALENCE_SLOTS
    + 1
    + CHARGE_SLOTS
    + 1
    + CHIRALITY_SLOTS
    + DEGREE_SLOTS
    + HYDROGEN_SLOTS
    + 1;

/// Width of [`BondFeatures::to_vector`].
pub const BOND_FEATURE_WIDTH: usize = 4 + 1 + 1 + 3;

fn one_hot(out: &mut Vec<f64>, slots: usize, index: usize) {
    let hot = index.min(slots - 1);
    out.extend((0..slots).map(|i| if i == hot { 1.0 } else { 0.0 }));
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

impl AtomFeatures {
    /// Fixed-width numeric encoding. Integer categories beyond the last
    /// slot are clamped into it.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(ATOM_FEATURE_WIDTH);
        one_hot(&mut v, ELEMENT_CLASSES, self.element_class);
        v.push(self.atomic_mass / 100.0);
        one_hot(&mut v, VALENCE_SLOTS, usize::from(self.valence));
        v.push(flag(self.in_ring));
        one_hot(&mut v, CHARGE_SLOTS, (i32::from(self.formal_charge) + 2).clamp(0, 4) as usize);
        v.push(f64::from(self.radical_electrons));
        let chir = match self.chirality {
            Chirality::Unspecified => 0,
            Chirality::CounterClockwise => 1,
            Chirality::Clockwise => 2,
            Chirality::Other => 3,
        };
        one_hot(&mut v, CHIRALITY_SLOTS, chir);
        one_hot(&mut v, DEGREE_SLOTS, usize::from(self.degree));
        one_hot(&mut v, HYDROGEN_SLOTS, usize::from(self.num_hydrogens));
        v.push(flag(self.aromatic));
        v
    }
}

impl BondFeatures {
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(BOND_FEATURE_WIDTH);
        let t = match self.bond_type {
            BondType::Single => 0,
            BondType::Double => 1,
            BondType::Triple => 2,
            BondType::Aromatic => 3,
        };
        one_hot(&mut v, 4, t);
        v.push(flag(self.in_ring));
        v.push(flag(self.conjugated));
        let s = match self.stereo {
            BondStereo::None => 0,
            BondStereo::Up => 1,
            BondStereo::Down => 2,
        };
        one_hot(&mut v, 3, s);
        v
    }
}

/// Undirected simple graph of featurised atoms and bonds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolecularGraph {
    atoms: Vec<AtomFeatures>,
    bonds: Vec<(usize, usize, BondFeatures)>,
}

impl MolecularGraph {
    pub fn new(atoms: Vec<AtomFeatures>, bonds: Vec<(usize, usize, BondFeatures)>) -> Result<Self, ChemError> {
        if atoms.is_empty() {
            return Err(ChemError::InvalidGraph("graph has no atoms".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(a, b, _) in &bonds {
            if a >= atoms.len() || b >= atoms.len() {
                return Err(ChemError::InvalidGraph(format!("bond ({a}, {b}) out of range")));
            }
            if a == b {
                return Err(ChemError::InvalidGraph(format!("self-loop on atom {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(ChemError::InvalidGraph(format!("duplicate bond ({a}, {b})")));
            }
        }
        Ok(Self { atoms, bonds })
    }

    pub fn atoms(&self) -> &[AtomFeatures] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[(usize, usize, BondFeatures)] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.bonds.iter().map(|&(a, b, _)| (a, b)).collect()
    }

    /// Number of connected components.
    pub fn components(&self) -> usize {
        let n = self.atoms.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(a, b, _) in &self.bonds {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
            }
        }
        (0..n).filter(|&i| find(&mut parent, i) == i).count()
    }

    /// Node input rows: each atom's features followed by the mean of its
    /// incident bond features (zeros for isolated atoms). Row-major,
    /// `atom_count x NODE_INPUT_WIDTH`.
    pub fn node_inputs(&self) -> Vec<f64> {
        let n = self.atoms.len();
        let mut bond_sum = vec![vec![0.0; BOND_FEATURE_WIDTH]; n];
        let mut count = vec![0usize; n];
        for (a, b, f) in &self.bonds {
            let v = f.to_vector();
            for end in [*a, *b] {
                for (s, x) in bond_sum[end].iter_mut().zip(&v) {
                    *s += x;
                }
                count[end] += 1;
            }
        }
        let mut out = Vec::with_capacity(n * NODE_INPUT_WIDTH);
        for (i, atom) in self.atoms.iter().enumerate() {
            out.extend(atom.to_vector());
            let c = count[i].max(1) as f64;
            out.extend(bond_sum[i].iter().map(|s| s / c));
        }
        out
    }

    /// Same molecule with atoms relabelled so that old atom `i` becomes
    /// atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, ChemError> {
        let n = self.atoms.len();
        if perm.len() != n {
            return Err(ChemError::InvalidGraph("permutation length mismatch".into()));
        }
        let mut atoms = vec![None; n];
        for (i, &p) in perm.iter().enumerate() {
            if p >= n || atoms[p].is_some() {
                return Err(ChemError::InvalidGraph("not a permutation".into()));
            }
            atoms[p] = Some(self.atoms[i].clone());
        }
        let bonds = self
            .bonds
            .iter()
            .map(|&(a, b, f)| (perm[a], perm[b], f))
            .collect();
        Self::new(atoms.into_iter().map(Option::unwrap).collect(), bonds)
    }
}

/// Width of a row of [`MolecularGraph::node_inputs`].
pub const NODE_INPUT_WIDTH: usize = ATOM_FEATURE_WIDTH + BOND_FEATURE_WIDTH;
